use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{central_difference, relative_error};
use super::*;
use crate::error::Error;

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Checks d(sum(w ⊙ f(x)))/dx against finite differences, where `w` is a
/// fixed random projection so every output element contributes.
fn check_op<F>(shapes: &[Vec<usize>], seed: u64, tol: f64, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let eval = |vals: &[Vec<f64>]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(shapes)
            .map(|(v, s)| g.param(&Tensor::param(s.clone(), v.clone()).unwrap()))
            .collect();
        let out = build(&mut g, &vars);
        let n = g.value(out).len();
        let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let w: Vec<f64> = (0..n).map(|_| wr.random_range(-1.0..1.0)).collect();
        let wv = g.constant_from(g.shape(out).to_vec(), w).unwrap();
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        (g, vars, loss)
    };
    let (g, vars, loss) = eval(&inputs);
    let grads = g.backward(loss).unwrap();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).unwrap().to_vec();
        let numeric = central_difference(
            |x| {
                let mut vals = inputs.clone();
                vals[k] = x.to_vec();
                let (g, _, l) = eval(&vals);
                g.scalar_value(l)
            },
            &inputs[k],
            1e-5,
        );
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < tol, "input {k}: rel err {err}\n{analytic:?}\n{numeric:?}");
    }
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::new();
    let i = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = g.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(mat(&[&[1.0, 2.0]]));
    let b = g.constant(mat(&[&[3.0], &[4.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    // d sum(A·B) / dA for A=[[1,1]], B=[[2],[3]]
    let b = [2.0, 3.0];
    let f = |a: &[f64]| a[0] * b[0] + a[1] * b[1];
    let numeric = central_difference(f, &[1.0, 1.0], 1e-5);
    let mut g = Graph::new();
    let a = g.param(&Tensor::param(vec![1, 2], vec![1.0, 1.0]).unwrap());
    let bv = g.constant(mat(&[&[2.0], &[3.0]]));
    let c = g.matmul(a, bv).unwrap();
    let l = g.sum(c);
    let grads = g.backward(l).unwrap();
    let analytic = grads.wrt(a).unwrap();
    assert_eq!(analytic, &[2.0, 3.0]);
    for (x, y) in analytic.iter().zip(&numeric) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant_from(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
    let r = g.relu(x);
    assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
    let z = g.scalar(0.0);
    let s = g.sigmoid(z);
    assert_eq!(g.value(s), &[0.5]);

    let mut g = Graph::new();
    let x = g.param(&Tensor::param(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn elementwise_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2]));
    let b = g.constant(Tensor::zeros(vec![3]));
    assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    // scalar broadcast is allowed
    let s = g.scalar(2.0);
    assert!(g.mul(a, s).is_ok());
}

#[test]
fn reduction_examples() {
    let mut g = Graph::new();
    let x = g.constant(mat(&[&[0.0, 0.0, 0.0]]));
    let s = g.softmax_rows(x).unwrap();
    for v in g.value(s) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let p = g.constant(mat(&[&[1.0, 5.0], &[3.0, 2.0]]));
    let m = g.max_rows(p).unwrap();
    assert_eq!(g.value(m), &[3.0, 5.0]);
    let a = g.constant(mat(&[&[1.0]]));
    let b = g.constant(mat(&[&[2.0]]));
    let c = g.concat(&[a, b]).unwrap();
    assert_eq!(g.shape(c), &[1, 2]);
    assert_eq!(g.value(c), &[1.0, 2.0]);
}

#[test]
fn axis_out_of_range_is_dimension_error() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::zeros(vec![4]));
    assert!(matches!(g.max_rows(v), Err(Error::Dimension { .. })));
    let m = g.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(g.slice_cols(m, 1, 4), Err(Error::Dimension { .. })));
    assert!(matches!(g.slice_rows(m, 0, 3), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_rows_sum_to_one_and_layer_norm_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant_from(vec![16, 9], random(&[16, 9], &mut rng)).unwrap();
    let x = g.scale(x, 10.0);
    let s = g.softmax_rows(x).unwrap();
    for row in g.value(s).chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let ln = g.layer_norm_rows(x, 1e-12).unwrap();
    for row in g.value(ln).chunks(9) {
        let mean = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn max_pool_gradient_goes_to_first_tie() {
    let mut g = Graph::new();
    let p = g.param(&Tensor::param(vec![3, 2], vec![4.0, 1.0, 4.0, 7.0, 2.0, 7.0]).unwrap());
    let m = g.max_rows(p).unwrap();
    let l = g.sum(m);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(p).unwrap(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn backward_examples() {
    // loss = sum(w·x)
    let mut w = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&w);
    let x = g.constant_from(vec![2], vec![3.0, 4.0]).unwrap();
    let p = g.mul(wv, x).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap().accumulate_into([&mut w]);
    assert_eq!(w.grad().unwrap(), &[3.0, 4.0]);

    // loss = mean((w − 1)²)
    let mut w = Tensor::param(vec![1], vec![2.0]).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&w);
    let d = g.offset(wv, -1.0);
    let sq = g.mul(d, d).unwrap();
    let l = g.mean(sq);
    let grads = g.backward(l).unwrap();
    grads.accumulate_into([&mut w]);
    assert_eq!(w.grad().unwrap(), &[2.0]);
    // a second pass accumulates
    g.backward(l).unwrap().accumulate_into([&mut w]);
    assert_eq!(w.grad().unwrap(), &[4.0]);
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::param(vec![2], vec![1.0, 2.0]).unwrap());
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn fan_out_sums_path_contributions() {
    // l = sum(x·a) + sum(x·x): dl/dx = a + 2x
    let mut g = Graph::new();
    let x = g.param(&Tensor::param(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let a = g.constant_from(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let p1 = g.mul(x, a).unwrap();
    let p2 = g.mul(x, x).unwrap();
    let s1 = g.sum(p1);
    let s2 = g.sum(p2);
    let l = g.add(s1, s2).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[2.0, 0.0, 7.0]);
}

#[test]
fn shared_param_leaves_sum_gradients() {
    let mut w = Tensor::param(vec![1], vec![3.0]).unwrap();
    let mut g = Graph::new();
    let a = g.param(&w);
    let b = g.param(&w);
    let p = g.mul(a, b).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap().accumulate_into([&mut w]);
    assert_eq!(w.grad().unwrap(), &[6.0]);
}

#[test]
fn gradient_check_every_op() {
    let tol = 1e-5;
    for seed in 0..5 {
        check_op(&[vec![3, 4], vec![4, 2]], seed, tol, |g, v| g.matmul(v[0], v[1]).unwrap());
        check_op(&[vec![3, 4], vec![5, 4]], seed, tol, |g, v| g.matmul_t(v[0], v[1]).unwrap());
        check_op(&[vec![3, 4]], seed, tol, |g, v| g.transpose(v[0]).unwrap());
        check_op(&[vec![2, 3], vec![2, 3]], seed, tol, |g, v| g.add(v[0], v[1]).unwrap());
        check_op(&[vec![2, 3], vec![2, 3]], seed, tol, |g, v| g.sub(v[0], v[1]).unwrap());
        check_op(&[vec![2, 3], vec![2, 3]], seed, tol, |g, v| g.mul(v[0], v[1]).unwrap());
        check_op(&[vec![2, 3], vec![1]], seed, tol, |g, v| g.mul(v[0], v[1]).unwrap());
        check_op(&[vec![1], vec![2, 3]], seed, tol, |g, v| g.sub(v[0], v[1]).unwrap());
        check_op(&[vec![2, 3], vec![2, 3]], seed, tol, |g, v| {
            let d = g.abs(v[1]);
            let d = g.offset(d, 0.5);
            g.div(v[0], d).unwrap()
        });
        check_op(&[vec![2, 3]], seed, tol, |g, v| g.sigmoid(v[0]));
        check_op(&[vec![2, 3]], seed, tol, |g, v| g.exp(v[0]));
        check_op(&[vec![2, 3]], seed, tol, |g, v| g.softplus(v[0]));
        check_op(&[vec![2, 3]], seed, tol, |g, v| {
            let a = g.mul(v[0], v[0]).unwrap();
            let a = g.offset(a, 0.1);
            g.log(a)
        });
        check_op(&[vec![2, 3]], seed, tol, |g, v| {
            let a = g.mul(v[0], v[0]).unwrap();
            let a = g.offset(a, 0.1);
            g.sqrt(a)
        });
        check_op(&[vec![2, 3]], seed, tol, |g, v| g.scale(v[0], -1.7));
        check_op(&[vec![2, 3]], seed, tol, |g, v| g.mean(v[0]));
        check_op(&[vec![4, 3]], seed, tol, |g, v| g.sum_rows(v[0]).unwrap());
        check_op(&[vec![4, 3]], seed, tol, |g, v| g.mean_rows(v[0]).unwrap());
        check_op(&[vec![4, 3]], seed, tol, |g, v| g.max_rows(v[0]).unwrap());
        check_op(&[vec![4, 3]], seed, tol, |g, v| g.sum_cols(v[0]).unwrap());
        check_op(&[vec![1, 3]], seed, tol, |g, v| g.expand_rows(v[0], 4).unwrap());
        check_op(&[vec![2, 3], vec![2, 1], vec![2, 2]], seed, tol, |g, v| {
            g.concat(&[v[0], v[1], v[2]]).unwrap()
        });
        check_op(&[vec![5, 3]], seed, tol, |g, v| g.slice_rows(v[0], 1, 4).unwrap());
        check_op(&[vec![3, 5]], seed, tol, |g, v| g.slice_cols(v[0], 2, 5).unwrap());
        check_op(&[vec![3, 5]], seed, tol, |g, v| g.softmax_rows(v[0]).unwrap());
        check_op(&[vec![3, 5]], seed, tol, |g, v| g.layer_norm_rows(v[0], 1e-5).unwrap());
        check_op(&[vec![4, 3]], seed, tol, |g, v| g.normalize_rows(v[0]).unwrap());
        check_op(&[vec![12, 2]], seed, tol, |g, v| g.im2col3x3(v[0], 3, 4).unwrap());
        check_op(&[vec![2, 6]], seed, tol, |g, v| g.reshape(v[0], vec![3, 4]).unwrap());
    }
}

#[test]
fn gradient_check_kinked_ops_away_from_kinks() {
    // relu and abs are checked on inputs bounded away from zero
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..6)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..2.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        for which in 0..2 {
            let f = |x: &[f64]| {
                let mut g = Graph::new();
                let v = g.constant_from(vec![6], x.to_vec()).unwrap();
                let y = if which == 0 { g.relu(v) } else { g.abs(v) };
                let w = g.constant_from(vec![6], (1..=6).map(f64::from).collect()).unwrap();
                let p = g.mul(y, w).unwrap();
                let l = g.sum(p);
                g.scalar_value(l)
            };
            let mut g = Graph::new();
            let v = g.param(&Tensor::param(vec![6], x.clone()).unwrap());
            let y = if which == 0 { g.relu(v) } else { g.abs(v) };
            let w = g.constant_from(vec![6], (1..=6).map(f64::from).collect()).unwrap();
            let p = g.mul(y, w).unwrap();
            let l = g.sum(p);
            let analytic = g.backward(l).unwrap().wrt(v).unwrap().to_vec();
            let numeric = central_difference(f, &x, 1e-5);
            assert!(relative_error(&analytic, &numeric, 1e-8) < 1e-8);
        }
    }
}

fn mlp_loss(params: &[Tensor], x: &Tensor, g: &mut Graph) -> Var {
    let xv = g.constant(x.clone());
    let mut h = xv;
    for (i, pair) in params.chunks(2).enumerate() {
        let w = g.param(&pair[0]);
        let b = g.param(&pair[1]);
        let z = g.matmul(h, w).unwrap();
        let rows = g.shape(z)[0];
        let be = g.expand_rows(b, rows).unwrap();
        let z = g.add(z, be).unwrap();
        h = if i + 1 < params.len() / 2 { g.sigmoid(z) } else { z };
    }
    let sq = g.mul(h, h).unwrap();
    g.mean(sq)
}

#[test]
fn three_layer_mlp_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [4usize, 6, 5, 2];
        let mut params = Vec::new();
        for w in dims.windows(2) {
            params.push(Tensor::param(vec![w[0], w[1]], random(&[w[0], w[1]], &mut rng)).unwrap());
            params.push(Tensor::param(vec![1, w[1]], random(&[1, w[1]], &mut rng)).unwrap());
        }
        let x = Tensor::new(vec![3, 4], random(&[3, 4], &mut rng)).unwrap();
        let mut g = Graph::new();
        let l = mlp_loss(&params, &x, &mut g);
        let grads = g.backward(l).unwrap();
        for k in 0..params.len() {
            let analytic = grads.for_param(params[k].id()).unwrap().to_vec();
            let numeric = central_difference(
                |v| {
                    let mut ps = params.clone();
                    ps[k].data_mut().copy_from_slice(v);
                    let mut g = Graph::new();
                    let l = mlp_loss(&ps, &x, &mut g);
                    g.scalar_value(l)
                },
                params[k].data(),
                1e-5,
            );
            let err = relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-5, "seed {seed} param {k}: {err}");
        }
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[8, 8], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant_from(vec![8, 8], a.clone()).unwrap();
        let y = g.matmul_t(x, x).unwrap();
        let y = g.softmax_rows(y).unwrap();
        let y = g.layer_norm_rows(y, 1e-5).unwrap();
        g.value(y).to_vec()
    };
    let first = run();
    for _ in 0..3 {
        assert_eq!(first, run());
    }
}

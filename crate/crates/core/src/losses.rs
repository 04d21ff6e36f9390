//! Second-stage training losses. Vector L1 terms are means over components.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rx: f64,
    pub rz: f64,
    pub ra: f64,
    pub t: f64,
    pub s: f64,
    pub conx: f64,
    pub conz: f64,
    /// Sharpness of the confidence target `exp(α‖â − a*‖)`; negative.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rx: 8e-4,
            rz: 8e-4,
            ra: 4e-4,
            t: 8e-4,
            s: 8e-4,
            conx: 1e-4,
            conz: 1e-4,
            alpha: -5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.rx, self.rz, self.ra, self.t, self.s, self.conx, self.conz];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {lambdas:?}")));
        }
        if !(self.alpha < 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be negative, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            rx: self.rx * k,
            rz: self.rz * k,
            ra: self.ra * k,
            t: self.t * k,
            s: self.s * k,
            conx: self.conx * k,
            conz: self.conz * k,
            alpha: self.alpha,
        }
    }
}

/// The seven component losses of one sample, in accumulation order.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub rx: Var,
    pub rz: Var,
    pub ra: Var,
    pub t: Var,
    pub s: Var,
    pub conx: Var,
    pub conz: Var,
}

pub const LOSS_NAMES: [&str; 7] = ["l_rx", "l_rz", "l_a", "l_t", "l_s", "l_conx", "l_conz"];

impl LossParts {
    pub fn values(&self, g: &Graph) -> [f64; 7] {
        [self.rx, self.rz, self.ra, self.t, self.s, self.conx, self.conz].map(|v| g.scalar_value(v))
    }
}

fn mean_abs_diff(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

fn dot(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let p = g.mul(a, b)?;
    Ok(g.sum(p))
}

pub fn loss_translation(g: &mut Graph, t_hat: Var, t_star: Var) -> Result<Var> {
    mean_abs_diff(g, t_hat, t_star)
}

pub fn loss_scale(g: &mut Graph, s_hat: Var, s_star: Var) -> Result<Var> {
    mean_abs_diff(g, s_hat, s_star)
}

/// `mean|â − a*| + 1 − ⟨â, a*⟩`.
pub fn loss_axis(g: &mut Graph, a_hat: Var, a_star: Var) -> Result<Var> {
    let l1 = mean_abs_diff(g, a_hat, a_star)?;
    let c = dot(g, a_hat, a_star)?;
    let one_minus = g.scale(c, -1.0);
    let one_minus = g.offset(one_minus, 1.0);
    g.add(l1, one_minus)
}

/// `|⟨â_x, â_z⟩|`.
pub fn loss_angular(g: &mut Graph, a_x: Var, a_z: Var) -> Result<Var> {
    let c = dot(g, a_x, a_z)?;
    Ok(g.abs(c))
}

/// `|c − exp(α‖â − a*‖₂)|`. The target is differentiated through, so the
/// axis head also feels this term.
pub fn loss_confidence(g: &mut Graph, c: Var, a_hat: Var, a_star: Var, alpha: f64) -> Result<Var> {
    let d = g.sub(a_hat, a_star)?;
    let sq = g.mul(d, d)?;
    let sq = g.sum(sq);
    let norm = g.sqrt(sq);
    let arg = g.scale(norm, alpha);
    let target = g.exp(arg);
    let r = g.sub(c, target)?;
    Ok(g.abs(r))
}

/// Weighted sum in the fixed order of [`LOSS_NAMES`].
pub fn loss_total(g: &mut Graph, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let terms = [
        (parts.rx, w.rx),
        (parts.rz, w.rz),
        (parts.ra, w.ra),
        (parts.t, w.t),
        (parts.s, w.s),
        (parts.conx, w.conx),
        (parts.conz, w.conz),
    ];
    let mut total = g.scale(terms[0].0, terms[0].1);
    for &(v, lambda) in &terms[1..] {
        let wv = g.scale(v, lambda);
        total = g.add(total, wv)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_difference, relative_error};
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(g: &mut Graph, v: &[f64]) -> Var {
        g.constant_from(vec![1, v.len()], v.to_vec()).unwrap()
    }

    fn eval2(f: fn(&mut Graph, Var, Var) -> Result<Var>, a: &[f64], b: &[f64]) -> f64 {
        let mut g = Graph::new();
        let (a, b) = (row(&mut g, a), row(&mut g, b));
        let l = f(&mut g, a, b).unwrap();
        g.scalar_value(l)
    }

    #[test]
    fn translation_and_scale_cases() {
        assert_eq!(eval2(loss_translation, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert!((eval2(loss_translation, &[1.0, 2.0, 3.0], &[0.0, 2.0, 3.0]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            eval2(loss_translation, &[0.3, -1.0, 2.0], &[1.0, 0.5, 0.0]),
            eval2(loss_translation, &[1.0, 0.5, 0.0], &[0.3, -1.0, 2.0])
        );
        assert!((eval2(loss_scale, &[1.1, 1.0, 1.0], &[1.0, 1.0, 1.0]) - 0.1 / 3.0).abs() < 1e-15);
        let one = eval2(loss_scale, &[0.3, 0.2, 0.5], &[0.1, 0.25, 0.4]);
        let two = eval2(loss_scale, &[0.6, 0.4, 1.0], &[0.2, 0.5, 0.8]);
        assert!((two - 2.0 * one).abs() < 1e-15);
    }

    #[test]
    fn axis_and_angular_cases() {
        assert_eq!(eval2(loss_axis, &[0.0, 0.6, 0.8], &[0.0, 0.6, 0.8]), 0.0);
        assert!((eval2(loss_axis, &[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]) - 8.0 / 3.0).abs() < 1e-15);
        assert_eq!(eval2(loss_angular, &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]), 0.0);
        assert_eq!(eval2(loss_angular, &[0.0, 0.6, 0.8], &[0.0, 0.6, 0.8]), 1.0);
        let t = 120f64.to_radians();
        assert!((eval2(loss_angular, &[1.0, 0.0, 0.0], &[t.cos(), t.sin(), 0.0]) - 0.5).abs() < 1e-15);
    }

    fn confidence(c: f64, a: &[f64], b: &[f64], alpha: f64) -> f64 {
        let mut g = Graph::new();
        let c = g.scalar(c);
        let (a, b) = (row(&mut g, a), row(&mut g, b));
        let l = loss_confidence(&mut g, c, a, b, alpha).unwrap();
        g.scalar_value(l)
    }

    #[test]
    fn confidence_cases() {
        let a = [0.0, 0.0, 1.0];
        assert_eq!(confidence(1.0, &a, &a, -5.0), 0.0);
        assert_eq!(confidence(0.5, &a, &a, -5.0), 0.5);
        let off = [0.2, 0.0, 1.0];
        assert!(confidence(0.3679, &off, &a, -5.0) < 1e-4);
    }

    #[test]
    fn total_with_default_weights() {
        let mut g = Graph::new();
        let one = g.scalar(1.0);
        let parts = LossParts { rx: one, rz: one, ra: one, t: one, s: one, conx: one, conz: one };
        let w = LossWeights::default();
        let t = loss_total(&mut g, &parts, &w).unwrap();
        assert!((g.scalar_value(t) - 38e-4).abs() < 1e-15);
        let t2 = loss_total(&mut g, &parts, &w.scaled(2.0)).unwrap();
        assert!((g.scalar_value(t2) - 2.0 * g.scalar_value(t)).abs() < 1e-15);
        let zero = g.scalar(0.0);
        let zp = LossParts { rx: zero, rz: zero, ra: zero, t: zero, s: zero, conx: zero, conz: zero };
        let z = loss_total(&mut g, &zp, &w).unwrap();
        assert_eq!(g.scalar_value(z), 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { ra: -1.0, ..Default::default() }.validate().is_err());
    }

    /// Gradient of a scalar loss in its first (prediction) argument.
    fn check(f: &dyn Fn(&mut Graph, Var) -> Var, x: &[f64]) -> f64 {
        let t = Tensor::param(vec![1, x.len()], x.to_vec()).unwrap();
        let mut g = Graph::new();
        let v = g.param(&t);
        let l = f(&mut g, v);
        let grads = g.backward(l).unwrap();
        let analytic = grads.wrt(v).unwrap().to_vec();
        let numeric = central_difference(
            |xs| {
                let mut g = Graph::new();
                let v = g.constant_from(vec![1, xs.len()], xs.to_vec()).unwrap();
                let l = f(&mut g, v);
                g.scalar_value(l)
            },
            x,
            1e-6,
        );
        relative_error(&analytic, &numeric, 1e-8)
    }

    fn unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = unit(&mut rng);
            let b = unit(&mut rng);
            if a.iter().zip(&b).any(|(x, y)| (x - y).abs() < 1e-3) {
                continue;
            }
            let bc = b.clone();
            let e = check(
                &move |g, v| {
                    let t = row(g, &bc);
                    loss_axis(g, v, t).unwrap()
                },
                &a,
            );
            assert!(e < 1e-5, "axis {e}");
            let bc = b.clone();
            let e = check(
                &move |g, v| {
                    let t = row(g, &bc);
                    loss_translation(g, v, t).unwrap()
                },
                &a,
            );
            assert!(e < 1e-5, "translation {e}");
            let bc = b.clone();
            let e = check(
                &move |g, v| {
                    let t = row(g, &bc);
                    let c = g.scalar(0.05);
                    loss_confidence(g, c, v, t, -5.0).unwrap()
                },
                &a,
            );
            assert!(e < 1e-5, "confidence {e}");
        }
    }
}

//! Small layer library on top of the autodiff graph.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// Anything that owns trainable tensors. Parameter order is fixed and is the
/// order used by checkpoints and optimizer state.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// He-initialized weights, zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        Linear {
            w: Tensor::randn_param(vec![fan_in, fan_out], std, rng),
            b: Tensor::zeros(vec![1, fan_out]).with_grad(),
        }
    }

    pub fn with_std<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            w: Tensor::randn_param(vec![fan_in, fan_out], std, rng),
            b: Tensor::zeros(vec![1, fan_out]).with_grad(),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(vec![fan_in, fan_out]).with_grad(),
            b: Tensor::zeros(vec![1, fan_out]).with_grad(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let y = g.matmul(x, w)?;
        let rows = g.shape(y)[0];
        let b = g.expand_rows(b, rows)?;
        g.add(y, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Row-wise layer normalization with a learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::param(vec![1, dim], vec![1.0; dim]).expect("shape matches"),
            shift: Tensor::zeros(vec![1, dim]).with_grad(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x, self.eps)?;
        let rows = g.shape(n)[0];
        let gain = g.param(&self.gain);
        let gain = g.expand_rows(gain, rows)?;
        let shift = g.param(&self.shift);
        let shift = g.expand_rows(shift, rows)?;
        let y = g.mul(n, gain)?;
        g.add(y, shift)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gain, &self.shift]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gain, &mut self.shift]
    }
}

/// Stack of linear layers with ReLU between them and none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Mlp { layers }
    }

    /// Same as [`Mlp::new`] but the output layer starts at zero, so the
    /// network initially predicts exactly 0.
    pub fn zero_output<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let mut mlp = Mlp::new(dims, rng);
        if let Some(last) = mlp.layers.last_mut() {
            *last = Linear::zeros(last.fan_in(), last.fan_out());
        }
        mlp
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// 3×3 same-padded convolution over an `(h·w) × c_in` channel-last image.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub inner: Linear,
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Conv3x3 {
            inner: Linear::new(9 * c_in, c_out, rng),
        }
    }

    pub fn with_std<R: Rng + ?Sized>(c_in: usize, c_out: usize, std: f64, rng: &mut R) -> Self {
        Conv3x3 {
            inner: Linear::with_std(9 * c_in, c_out, std, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
        let cols = g.im2col3x3(x, h, w)?;
        self.inner.forward(g, cols)
    }
}

impl Module for Conv3x3 {
    fn params(&self) -> Vec<&Tensor> {
        self.inner.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.inner.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_mlp_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::zero_output(&[3, 8, 2], &mut rng);
        let mut g = Graph::new();
        let x = g.constant_from(vec![4, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let y = mlp.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[4, 2]);
        assert!(g.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv3x3::new(2, 1, &mut rng);
        let (h, w) = (3, 4);
        let x: Vec<f64> = (0..h * w * 2).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut g = Graph::new();
        let xv = g.constant_from(vec![h * w, 2], x.clone()).unwrap();
        let y = conv.forward(&mut g, xv, h, w).unwrap();
        let wt = conv.inner.w.data();
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for k in 0..9 {
                    let sy = yy as isize + (k / 3) as isize - 1;
                    let sx = xx as isize + (k % 3) as isize - 1;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    for c in 0..2 {
                        acc += x[(sy as usize * w + sx as usize) * 2 + c] * wt[k * 2 + c];
                    }
                }
                assert!((g.value(y)[yy * w + xx] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_are_listed_in_layer_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[2, 3, 1], &mut rng);
        let shapes: Vec<Vec<usize>> = mlp.params().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 3], vec![1, 3], vec![3, 1], vec![1, 1]]);
        assert_eq!(mlp.param_count(), 6 + 3 + 3 + 1);
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transparent-surface sensor failure model, applied inside the mask only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionParams {
    /// Probability that a masked pixel reads 0 (no return).
    pub dropout: f64,
    /// Standard deviation of additive Gaussian noise, meters.
    pub noise_sigma: f64,
    /// Amplitude of the smooth sinusoidal bias, meters.
    pub bias_amplitude: f64,
    /// Spatial period of the bias, pixels.
    pub bias_period: f64,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        CorruptionParams {
            dropout: 0.6,
            noise_sigma: 0.005,
            bias_amplitude: 0.015,
            bias_period: 48.0,
        }
    }
}

impl CorruptionParams {
    pub fn none() -> Self {
        CorruptionParams {
            dropout: 0.0,
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            bias_period: 48.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1], got {}", self.dropout)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_amplitude >= 0.0) {
            return Err(Error::Config("corruption sigmas must be non-negative".into()));
        }
        if !(self.bias_period > 0.0) {
            return Err(Error::Config(format!("bias period must be > 0, got {}", self.bias_period)));
        }
        Ok(())
    }
}

/// Raw sensor depth from ground truth. Pixels outside the mask pass through;
/// masked pixels are dropped with probability `dropout`, otherwise perturbed
/// by noise plus a low-frequency bias. Perturbed values that end up ≤ 0 read
/// as dropped.
pub fn corrupt_depth(
    gt: &[f64],
    mask: &[u8],
    width: usize,
    params: &CorruptionParams,
    seed: u64,
) -> Result<Vec<f64>> {
    params.validate()?;
    if gt.len() != mask.len() || width == 0 || gt.len() % width != 0 {
        return Err(Error::dim("corrupt_depth", &[gt.len(), width], &[mask.len()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let phase_u: f64 = rng.random_range(0.0..tau);
    let phase_v: f64 = rng.random_range(0.0..tau);
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut raw = gt.to_vec();
    for (idx, (r, &m)) in raw.iter_mut().zip(mask).enumerate() {
        if m == 0 {
            continue;
        }
        let drop = rng.random::<f64>() < params.dropout;
        let n = if params.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        if drop {
            *r = 0.0;
            continue;
        }
        let (u, v) = ((idx % width) as f64, (idx / width) as f64);
        let bias = params.bias_amplitude
            * (tau * u / params.bias_period + phase_u).sin()
            * (tau * v / params.bias_period + phase_v).cos();
        let d = *r + n + bias;
        *r = if d > 0.0 { d } else { 0.0 };
    }
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(n: usize) -> (Vec<f64>, Vec<u8>) {
        let gt: Vec<f64> = (0..n).map(|i| 0.5 + 0.001 * (i % 97) as f64).collect();
        let mask = (0..n).map(|i| (i % 5 != 0) as u8).collect();
        (gt, mask)
    }

    #[test]
    fn full_dropout_zeroes_the_mask() {
        let (gt, mask) = scene(400);
        let p = CorruptionParams {
            dropout: 1.0,
            ..Default::default()
        };
        let raw = corrupt_depth(&gt, &mask, 20, &p, 3).unwrap();
        for i in 0..400 {
            if mask[i] == 1 {
                assert_eq!(raw[i], 0.0);
            } else {
                assert_eq!(raw[i], gt[i]);
            }
        }
    }

    #[test]
    fn null_corruption_is_identity() {
        let (gt, mask) = scene(400);
        assert_eq!(corrupt_depth(&gt, &mask, 20, &CorruptionParams::none(), 9).unwrap(), gt);
    }

    #[test]
    fn dropout_rate_matches_binomial_bound() {
        let n = 10_000;
        let gt = vec![1.0; n];
        let mask = vec![1u8; n];
        let p = CorruptionParams {
            dropout: 0.5,
            ..CorruptionParams::none()
        };
        for seed in 0..5 {
            let raw = corrupt_depth(&gt, &mask, 100, &p, seed).unwrap();
            let frac = raw.iter().filter(|d| **d == 0.0).count() as f64 / n as f64;
            assert!((0.47..=0.53).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn same_seed_same_output() {
        let (gt, mask) = scene(400);
        let p = CorruptionParams::default();
        let a = corrupt_depth(&gt, &mask, 20, &p, 42).unwrap();
        let b = corrupt_depth(&gt, &mask, 20, &p, 42).unwrap();
        let c = corrupt_depth(&gt, &mask, 20, &p, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let p = CorruptionParams {
            dropout: 1.5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}

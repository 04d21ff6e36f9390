use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depth completion statistics over masked pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub rel: f64,
    pub mae: f64,
    pub delta_105: f64,
    pub delta_110: f64,
    pub delta_125: f64,
    pub pixels: usize,
}

/// Surface normal statistics over masked pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub mean_deg: f64,
    pub within_11_25: f64,
    pub within_22_5: f64,
    pub within_30: f64,
    pub pixels: usize,
}

/// Pools depth errors over any number of images; statistics are over all
/// pooled pixels, not averaged per image.
#[derive(Debug, Clone, Default)]
pub struct DepthAccumulator {
    sq: f64,
    rel: f64,
    abs: f64,
    hits: [usize; 3],
    n: usize,
}

const DELTAS: [f64; 3] = [1.05, 1.10, 1.25];

impl DepthAccumulator {
    pub fn add(&mut self, pred: &[f64], gt: &[f64], mask: &[u8]) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != mask.len() {
            return Err(Error::dim("depth_metrics", &[pred.len(), gt.len()], &[mask.len()]));
        }
        for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
            if m == 0 {
                continue;
            }
            if !(g > 0.0) {
                return Err(Error::Contract(format!("ground-truth depth {g} inside mask")));
            }
            let e = p - g;
            self.sq += e * e;
            self.abs += e.abs();
            self.rel += e.abs() / g;
            if p > 0.0 {
                let ratio = (p / g).max(g / p);
                for (h, n) in self.hits.iter_mut().zip(DELTAS) {
                    *h += (ratio < n) as usize;
                }
            }
            self.n += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<DepthMetrics> {
        if self.n == 0 {
            return Err(Error::EmptyMask("depth metrics over an empty mask".into()));
        }
        let n = self.n as f64;
        Ok(DepthMetrics {
            rmse: (self.sq / n).sqrt(),
            rel: self.rel / n,
            mae: self.abs / n,
            delta_105: self.hits[0] as f64 / n,
            delta_110: self.hits[1] as f64 / n,
            delta_125: self.hits[2] as f64 / n,
            pixels: self.n,
        })
    }
}

pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[u8]) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt, mask)?;
    acc.finish()
}

/// Angular thresholds are strict; errors within this many degrees of a
/// threshold count as equal to it (and so miss).
pub const ANGLE_TIE_DEG: f64 = 1e-9;

#[derive(Debug, Clone, Default)]
pub struct NormalAccumulator {
    sq: f64,
    abs: f64,
    angle: f64,
    hits: [usize; 3],
    n: usize,
}

const NORMAL_THRESHOLDS: [f64; 3] = [11.25, 22.5, 30.0];

pub fn angle_between_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

impl NormalAccumulator {
    /// `pred` and `gt` are interleaved 3-vectors, one per mask entry.
    pub fn add(&mut self, pred: &[f64], gt: &[f64], mask: &[u8]) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != 3 * mask.len() {
            return Err(Error::dim("normal_metrics", &[pred.len(), gt.len()], &[3 * mask.len()]));
        }
        for (i, &m) in mask.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let p = Vector3::new(pred[3 * i], pred[3 * i + 1], pred[3 * i + 2]);
            let g = Vector3::new(gt[3 * i], gt[3 * i + 1], gt[3 * i + 2]);
            for k in 0..3 {
                let e = p[k] - g[k];
                self.sq += e * e;
                self.abs += e.abs();
            }
            let ang = angle_between_deg(&p, &g);
            self.angle += ang;
            for (h, t) in self.hits.iter_mut().zip(NORMAL_THRESHOLDS) {
                *h += (ang < t - ANGLE_TIE_DEG) as usize;
            }
            self.n += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<NormalMetrics> {
        if self.n == 0 {
            return Err(Error::EmptyMask("normal metrics over an empty mask".into()));
        }
        let n = self.n as f64;
        Ok(NormalMetrics {
            rmse: (self.sq / (3.0 * n)).sqrt(),
            mae: self.abs / (3.0 * n),
            mean_deg: self.angle / n,
            within_11_25: self.hits[0] as f64 / n,
            within_22_5: self.hits[1] as f64 / n,
            within_30: self.hits[2] as f64 / n,
            pixels: self.n,
        })
    }
}

pub fn normal_metrics(pred: &[f64], gt: &[f64], mask: &[u8]) -> Result<NormalMetrics> {
    let mut acc = NormalAccumulator::default();
    acc.add(pred, gt, mask)?;
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;

    #[test]
    fn exact_depth() {
        let gt = vec![0.5, 0.7, 1.2, 2.0];
        let m = depth_metrics(&gt, &gt, &[1, 1, 1, 1]).unwrap();
        assert_eq!((m.rmse, m.rel, m.mae), (0.0, 0.0, 0.0));
        assert_eq!((m.delta_105, m.delta_110, m.delta_125), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_ratio_and_offset() {
        let gt = vec![0.5, 0.7, 1.2, 2.0];
        let scaled: Vec<f64> = gt.iter().map(|g| 1.06 * g).collect();
        let m = depth_metrics(&scaled, &gt, &[1; 4]).unwrap();
        assert_eq!((m.delta_105, m.delta_110, m.delta_125), (0.0, 1.0, 1.0));
        let shifted: Vec<f64> = gt.iter().map(|g| g + 0.01).collect();
        let m = depth_metrics(&shifted, &gt, &[1; 4]).unwrap();
        assert!((m.mae - 0.01).abs() < 1e-12 && (m.rmse - 0.01).abs() < 1e-12);
    }

    #[test]
    fn masked_out_pixels_are_ignored_and_misses_count() {
        let gt = vec![1.0, 1.0, 1.0];
        let pred = vec![1.0, 0.0, 99.0];
        let m = depth_metrics(&pred, &gt, &[1, 1, 0]).unwrap();
        assert_eq!(m.pixels, 2);
        assert_eq!(m.delta_125, 0.5);
        assert!(matches!(depth_metrics(&pred, &gt, &[0, 0, 0]), Err(Error::EmptyMask(_))));
    }

    fn rotate_all(n: &[Vector3<f64>], deg: f64) -> Vec<f64> {
        n.iter()
            .flat_map(|v| {
                let axis = v.cross(&Vector3::new(0.3, 1.0, 0.2));
                let r = axis_angle(&axis, deg.to_radians()) * v;
                [r.x, r.y, r.z]
            })
            .collect()
    }

    #[test]
    fn normal_reference_cases() {
        let n: Vec<Vector3<f64>> = (0..8)
            .map(|i| Vector3::new(0.1 * i as f64, -0.2, -1.0).normalize())
            .collect();
        let gt: Vec<f64> = n.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let m = normal_metrics(&gt, &gt, &[1; 8]).unwrap();
        assert_eq!((m.rmse, m.mae, m.mean_deg), (0.0, 0.0, 0.0));
        assert_eq!((m.within_11_25, m.within_22_5, m.within_30), (1.0, 1.0, 1.0));

        let off30 = rotate_all(&n, 30.0);
        let m = normal_metrics(&off30, &gt, &[1; 8]).unwrap();
        assert!((m.mean_deg - 30.0).abs() < 1e-12);
        assert_eq!((m.within_22_5, m.within_30), (0.0, 0.0));

        let mut half = gt.clone();
        half[12..].copy_from_slice(&rotate_all(&n[4..], 20.0));
        let m = normal_metrics(&half, &gt, &[1; 8]).unwrap();
        assert!((m.mean_deg - 10.0).abs() < 1e-12);
        assert_eq!(m.within_11_25, 0.5);
        assert_eq!(m.within_22_5, 1.0);
    }
}

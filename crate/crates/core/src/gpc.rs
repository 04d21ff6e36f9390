//! Generalized point cloud: per-pixel RGB, ray direction, completed depth and
//! estimated normal, sampled inside the object mask.

use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::synth::{Category, PatchBundle};

/// Feature width and column layout: RGB, ray, depth, normal.
pub const GPC_WIDTH: usize = 10;
pub const RGB_COLS: std::ops::Range<usize> = 0..3;
pub const RAY_COLS: std::ops::Range<usize> = 3..6;
pub const DEPTH_COL: usize = 6;
pub const NORMAL_COLS: std::ops::Range<usize> = 7..10;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedPointCloud {
    /// `n × 10` row-major.
    pub features: Vec<f64>,
    /// `(u, v)` patch pixel of each row.
    pub pixels: Vec<(usize, usize)>,
    pub category: Category,
    pub seed: u64,
}

impl GeneralizedPointCloud {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * GPC_WIDTH..(i + 1) * GPC_WIDTH]
    }

    pub fn depth(&self, i: usize) -> f64 {
        self.features[i * GPC_WIDTH + DEPTH_COL]
    }

    pub fn one_hot(&self) -> [f64; 4] {
        self.category.one_hot()
    }

    /// Rows reordered by `perm` (row `i` of the result is row `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let features = perm.iter().flat_map(|&i| self.row(i).to_vec()).collect();
        let pixels = perm.iter().map(|&i| self.pixels[i]).collect();
        GeneralizedPointCloud { features, pixels, ..self.clone() }
    }
}

/// Samples `n` mask pixels (uniformly without replacement when the mask has
/// at least `n` pixels, with replacement otherwise) and gathers their
/// features. `depth` is the completed depth map, `normals` the interleaved
/// estimated normal map.
pub fn build_gpc(
    bundle: &PatchBundle,
    category: Category,
    depth: &[f64],
    normals: &[f64],
    n: usize,
    seed: u64,
) -> Result<GeneralizedPointCloud> {
    let px = bundle.pixels();
    if depth.len() != px || normals.len() != 3 * px {
        return Err(Error::dim("build_gpc", &[depth.len(), normals.len()], &[px, 3 * px]));
    }
    if n == 0 {
        return Err(Error::Config("point count must be positive".into()));
    }
    let pool: Vec<usize> = (0..px).filter(|&i| bundle.mask[i] != 0).collect();
    if pool.is_empty() {
        return Err(Error::EmptyMask("cannot sample a point cloud from an empty mask".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if pool.len() >= n {
        index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    let mut features = Vec::with_capacity(n * GPC_WIDTH);
    let mut pixels = Vec::with_capacity(n);
    for &i in &picks {
        let d = depth[i];
        if !(d > 0.0) {
            return Err(Error::InvalidDepth(d));
        }
        let ray = bundle.ray(i);
        let nrm = Vector3::new(normals[3 * i], normals[3 * i + 1], normals[3 * i + 2]).normalize();
        features.extend_from_slice(&bundle.rgb[3 * i..3 * i + 3]);
        features.extend_from_slice(ray.as_slice());
        features.push(d);
        features.extend_from_slice(nrm.as_slice());
        pixels.push((i % bundle.size, i / bundle.size));
    }
    Ok(GeneralizedPointCloud { features, pixels, category, seed })
}

/// Mean back-projection of the sampled pixels at their completed depth.
pub fn translation_prior(gpc: &GeneralizedPointCloud, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if gpc.is_empty() {
        return Err(Error::EmptyMask("translation prior of an empty point cloud".into()));
    }
    let mut acc = Vector3::zeros();
    for (i, &(u, v)) in gpc.pixels.iter().enumerate() {
        acc += k.backproject(u as f64, v as f64, gpc.depth(i))?;
    }
    Ok(acc / gpc.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::derive_seed;

    fn bundle(size: usize, mask: Vec<u8>) -> PatchBundle {
        let px = size * size;
        PatchBundle {
            size,
            k: CameraIntrinsics::new(20.0, 20.0, (size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0, size, size)
                .unwrap(),
            rgb: (0..3 * px).map(|i| (i % 7) as f64 / 7.0).collect(),
            depth_gt: vec![0.5; px],
            depth_raw: vec![0.5; px],
            normal_gt: (0..px).flat_map(|_| [0.0, 0.0, -1.0]).collect(),
            mask,
        }
    }

    #[test]
    fn exhaustive_sample_of_small_mask() {
        let mut mask = vec![0u8; 64];
        for i in [3, 9, 20, 41, 63] {
            mask[i] = 1;
        }
        let b = bundle(8, mask);
        let g = build_gpc(&b, Category::Bowl, &b.depth_gt, &b.normal_gt, 5, 11).unwrap();
        assert_eq!(g.features.len(), 5 * GPC_WIDTH);
        let mut idx: Vec<usize> = g.pixels.iter().map(|(u, v)| v * 8 + u).collect();
        idx.sort();
        assert_eq!(idx, vec![3, 9, 20, 41, 63]);
        for i in 0..5 {
            let r = &g.row(i)[RAY_COLS];
            assert!(((r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_mask_samples_with_replacement() {
        let mut mask = vec![0u8; 16];
        mask[5] = 1;
        mask[6] = 1;
        let b = bundle(4, mask);
        let g = build_gpc(&b, Category::Mug, &b.depth_gt, &b.normal_gt, 32, 1).unwrap();
        assert_eq!(g.len(), 32);
        assert!(g.pixels.iter().all(|&(u, v)| v == 1 && (u == 1 || u == 2)));
    }

    #[test]
    fn deterministic_per_seed_and_empty_mask_fails() {
        let b = bundle(6, vec![1; 36]);
        let a = build_gpc(&b, Category::Bowl, &b.depth_gt, &b.normal_gt, 10, 4).unwrap();
        let c = build_gpc(&b, Category::Bowl, &b.depth_gt, &b.normal_gt, 10, 4).unwrap();
        assert_eq!(a, c);
        let e = bundle(6, vec![0; 36]);
        assert!(matches!(build_gpc(&e, Category::Bowl, &e.depth_gt, &e.normal_gt, 10, 4), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn sampling_is_uniform() {
        let b = bundle(10, vec![1; 100]);
        let mut counts = [0usize; 100];
        let trials = 10_000;
        for s in 0..trials {
            let g = build_gpc(&b, Category::Bowl, &b.depth_gt, &b.normal_gt, 10, derive_seed(99, s)).unwrap();
            for (u, v) in g.pixels {
                counts[v * 10 + u] += 1;
            }
        }
        // each pixel is picked with probability 0.1 per trial
        let sigma = (trials as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - 0.1 * trials as f64).abs() < 3.0 * sigma + 1.0, "{c}");
        }
    }

    #[test]
    fn translation_prior_cases() {
        let mut mask = vec![0u8; 49];
        mask[24] = 1; // principal point of a 7×7 patch
        let mut b = bundle(7, mask);
        b.depth_gt = vec![2.0; 49];
        let g = build_gpc(&b, Category::Bowl, &b.depth_gt, &b.normal_gt, 1, 0).unwrap();
        let t = translation_prior(&g, &b.k).unwrap();
        assert!((t - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-15);

        let mut mask = vec![0u8; 49];
        mask[21] = 1;
        mask[27] = 1;
        let b2 = PatchBundle { mask, ..b.clone() };
        let g = build_gpc(&b2, Category::Bowl, &b2.depth_gt, &b2.normal_gt, 2, 0).unwrap();
        let t = translation_prior(&g, &b2.k).unwrap();
        assert!((t - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-15);
    }

    #[test]
    fn translation_prior_matches_direct_loop_and_scales() {
        let mut b = bundle(9, (0..81).map(|i| (i % 3 != 0) as u8).collect());
        b.depth_gt = (0..81).map(|i| 0.4 + 0.01 * (i % 11) as f64).collect();
        let g = build_gpc(&b, Category::WineCup, &b.depth_gt, &b.normal_gt, 20, 9).unwrap();
        let t = translation_prior(&g, &b.k).unwrap();
        let mut direct = Vector3::zeros();
        for &(u, v) in &g.pixels {
            let d = b.depth_gt[v * 9 + u];
            direct += Vector3::new((u as f64 - b.k.cx) / b.k.fx * d, (v as f64 - b.k.cy) / b.k.fy * d, d);
        }
        direct /= 20.0;
        assert!((t - direct).norm() < 1e-12);
        let scaled: Vec<f64> = b.depth_gt.iter().map(|d| 1.7 * d).collect();
        let g2 = build_gpc(&b, Category::WineCup, &scaled, &b.normal_gt, 20, 9).unwrap();
        assert!((translation_prior(&g2, &b.k).unwrap() - 1.7 * t).norm() < 1e-12);
    }
}

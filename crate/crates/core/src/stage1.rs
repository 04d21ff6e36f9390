//! First stage: depth completion (F_D) and surface normal estimation (F_SN)
//! as small same-padded convolution stacks, trained with masked L2 losses
//! and an optional cross-task consistency term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, OptimConfig, Optimizer, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::metrics::{DepthAccumulator, DepthMetrics, NormalAccumulator, NormalMetrics};
use crate::nn::{Conv3x3, Module};
use crate::synth::PatchBundle;

/// Depth residuals are predicted in units of this many meters.
pub const DEPTH_UNIT: f64 = 0.05;
/// Temperature of the positive output map `τ·softplus(x/τ)`.
pub const DEPTH_TAU: f64 = 0.01;
const FD_IN: usize = 6;
const FSN_IN: usize = 5;
/// Bound on the F_SN depth-slope channel, which otherwise explodes at the
/// silhouette.
const SLOPE_CLIP: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct LocalNet {
    pub layers: Vec<Conv3x3>,
}

impl LocalNet {
    fn new<R: Rng + ?Sized>(c_in: usize, hidden: usize, c_out: usize, depth: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut c = c_in;
        for i in 0..depth {
            if i + 1 == depth {
                let std = 0.1 * (2.0 / (9 * c) as f64).sqrt();
                layers.push(Conv3x3::with_std(c, c_out, std, rng));
            } else {
                layers.push(Conv3x3::new(c, hidden, rng));
                c = hidden;
            }
        }
        LocalNet { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
        let mut a = x;
        for (i, l) in self.layers.iter().enumerate() {
            a = l.forward(g, a, h, w)?;
            if i + 1 < self.layers.len() {
                a = g.relu(a);
            }
        }
        Ok(a)
    }
}

impl Module for LocalNet {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub hidden: usize,
    pub layers: usize,
    pub batch: usize,
    pub pretrain_steps: usize,
    pub joint_steps: usize,
    pub consistency: bool,
    pub w_con: f64,
    /// Weight of L_d relative to the normal losses in the joint objective;
    /// L_d is in m² and would otherwise vanish next to them.
    pub depth_weight: f64,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            hidden: 16,
            layers: 4,
            batch: 4,
            pretrain_steps: 600,
            joint_steps: 300,
            consistency: true,
            w_con: 1.0,
            depth_weight: 1.0 / (DEPTH_UNIT * DEPTH_UNIT),
            optim: OptimConfig {
                base_lr: 3e-3,
                warmup_steps: 50,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers < 2 || self.batch == 0 {
            return Err(Error::Config("stage1 needs hidden > 0, layers ≥ 2, batch > 0".into()));
        }
        if !(self.w_con >= 0.0 && self.depth_weight >= 0.0) {
            return Err(Error::Config("stage1 loss weights must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Stage1 {
    pub depth_net: LocalNet,
    pub normal_net: LocalNet,
}

impl Module for Stage1 {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.depth_net.params();
        p.extend(self.normal_net.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.depth_net.params_mut();
        p.extend(self.normal_net.params_mut());
        p
    }
}

/// Median of the valid raw depth inside the mask, falling back to the whole
/// patch and then to half a meter. Used only as a normalizer.
pub fn reference_depth(bundle: &PatchBundle) -> f64 {
    let pick = |inside: bool| {
        let mut v: Vec<f64> = bundle
            .depth_raw
            .iter()
            .zip(&bundle.mask)
            .filter(|(d, m)| **d > 0.0 && (!inside || **m != 0))
            .map(|(d, _)| *d)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[v.len() / 2])
    };
    pick(true).or_else(|| pick(false)).unwrap_or(0.5)
}

fn depth_input(bundle: &PatchBundle, d_ref: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(bundle.pixels() * FD_IN);
    for i in 0..bundle.pixels() {
        let raw = bundle.depth_raw[i];
        let valid = if raw > 0.0 { 1.0 } else { 0.0 };
        x.extend_from_slice(&[
            bundle.rgb[3 * i] - 0.5,
            bundle.rgb[3 * i + 1] - 0.5,
            bundle.rgb[3 * i + 2] - 0.5,
            valid,
            valid * (raw - d_ref) / DEPTH_UNIT,
            bundle.mask[i] as f64,
        ]);
    }
    x
}

fn mask_column(bundle: &PatchBundle) -> Vec<f64> {
    bundle.mask.iter().map(|&m| m as f64).collect()
}

impl Stage1 {
    pub fn new(cfg: &Stage1Config) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Stage1 {
            depth_net: LocalNet::new(FD_IN, cfg.hidden, 1, cfg.layers, &mut rng),
            normal_net: LocalNet::new(FSN_IN, cfg.hidden, 3, cfg.layers, &mut rng),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (net, n) in [("depth", self.depth_net.layers.len()), ("normal", self.normal_net.layers.len())] {
            for i in 0..n {
                names.push(format!("{net}.conv{i}.w"));
                names.push(format!("{net}.conv{i}.b"));
            }
        }
        names
    }

    /// D̂ as a `(size²) × 1` node: network output inside the mask, raw depth
    /// verbatim outside.
    pub fn complete_depth_graph(&self, g: &mut Graph, bundle: &PatchBundle) -> Result<Var> {
        let s = bundle.size;
        let px = bundle.pixels();
        check_bundle(bundle)?;
        let d_ref = reference_depth(bundle);
        let x = g.constant_from(vec![px, FD_IN], depth_input(bundle, d_ref))?;
        let o = self.depth_net.forward(g, x, s, s)?;
        let o = g.scale(o, DEPTH_UNIT / DEPTH_TAU);
        let o = g.offset(o, d_ref / DEPTH_TAU);
        let o = g.softplus(o);
        let pred = g.scale(o, DEPTH_TAU);
        let m = g.constant_from(vec![px, 1], mask_column(bundle))?;
        let inside = g.mul(pred, m)?;
        let outside: Vec<f64> = (0..px)
            .map(|i| if bundle.mask[i] != 0 { 0.0 } else { bundle.depth_raw[i] })
            .collect();
        let outside = g.constant_from(vec![px, 1], outside)?;
        g.add(inside, outside)
    }

    /// Ŝ = F_SN(depth) as a `(size²) × 3` node of unit, camera-facing rows.
    /// The depth enters as a bounded slope-normalized channel inside the mask
    /// plus the patch ray directions. The normalizer comes from the raw input
    /// so that it is a constant of the sample, not of the prediction.
    pub fn estimate_normals_graph(&self, g: &mut Graph, bundle: &PatchBundle, depth: Var) -> Result<Var> {
        let s = bundle.size;
        let px = bundle.pixels();
        if g.shape(depth) != [px, 1] {
            return Err(Error::dim("estimate_normals", g.shape(depth), &[px, 1]));
        }
        let c = reference_depth(bundle);
        let gain = bundle.k.fx / c;
        // slope channel: gain·(D − c) on the mask, then softly bounded
        let centered = g.offset(depth, -c);
        let slope = g.scale(centered, gain / SLOPE_CLIP);
        let m = g.constant_from(vec![px, 1], mask_column(bundle))?;
        let slope = g.mul(slope, m)?;
        let slope = bounded(g, slope)?;
        let slope = g.scale(slope, SLOPE_CLIP);
        let rays = bundle.rays();
        let extra: Vec<f64> = (0..px)
            .flat_map(|i| [rays[3 * i], rays[3 * i + 1], rays[3 * i + 2] + 1.0, bundle.mask[i] as f64])
            .collect();
        let extra = g.constant_from(vec![px, 4], extra)?;
        let x = g.concat(&[slope, extra])?;
        let o = self.normal_net.forward(g, x, s, s)?;
        // bias toward the camera so an untrained net already emits −z
        let toward = g.constant_from(vec![px, 3], (0..px).flat_map(|_| [0.0, 0.0, -1.0]).collect())?;
        let o = g.add(o, toward)?;
        let n = g.normalize_rows(o)?;
        let flips: Vec<f64> = g
            .value(n)
            .chunks(3)
            .zip(rays.chunks(3))
            .flat_map(|(v, r)| {
                let f = if v[0] * r[0] + v[1] * r[1] + v[2] * r[2] > 0.0 { -1.0 } else { 1.0 };
                [f; 3]
            })
            .collect();
        let flips = g.constant_from(vec![px, 3], flips)?;
        g.mul(n, flips)
    }

    /// Completed depth and estimated normals (interleaved) for one patch.
    pub fn predict(&self, bundle: &PatchBundle) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let d = self.complete_depth_graph(&mut g, bundle)?;
        let n = self.estimate_normals_graph(&mut g, bundle, d)?;
        Ok((g.value(d).to_vec(), g.value(n).to_vec()))
    }

    /// F_SN applied to an arbitrary depth map of the bundle's grid.
    pub fn normals_from(&self, bundle: &PatchBundle, depth: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let d = g.constant_from(vec![bundle.pixels(), 1], depth.to_vec())?;
        let n = self.estimate_normals_graph(&mut g, bundle, d)?;
        Ok(g.value(n).to_vec())
    }
}

/// `tanh(x)`, written as `2·sigmoid(2x) − 1`.
fn bounded(g: &mut Graph, x: Var) -> Result<Var> {
    let y = g.scale(x, 2.0);
    let y = g.sigmoid(y);
    let y = g.scale(y, 2.0);
    Ok(g.offset(y, -1.0))
}

fn check_bundle(b: &PatchBundle) -> Result<()> {
    let px = b.pixels();
    if b.rgb.len() != 3 * px || b.depth_raw.len() != px || b.mask.len() != px {
        return Err(Error::dim("stage1 input", &[b.rgb.len(), b.depth_raw.len(), b.mask.len()], &[3 * px, px, px]));
    }
    Ok(())
}

/// `Σ_M ‖a_p − b_p‖² / N_p` for `(pixels) × c` nodes.
pub fn masked_sq_loss(g: &mut Graph, a: Var, b: Var, mask: &[u8]) -> Result<Var> {
    let n_p = mask.iter().filter(|m| **m != 0).count();
    if n_p == 0 {
        return Err(Error::EmptyMask("masked loss over an empty mask".into()));
    }
    let c = g.shape(a).get(1).copied().unwrap_or(1);
    let m: Vec<f64> = mask.iter().flat_map(|&m| std::iter::repeat_n(m as f64, c)).collect();
    let m = g.constant_from(g.shape(a).to_vec(), m)?;
    let d = g.sub(a, b)?;
    let d = g.mul(d, m)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n_p as f64))
}

/// Normals from a depth map by central differences of back-projected
/// neighbours (edges replicated), oriented toward the camera.
pub fn normal_from_depth_oracle(depth: &[f64], k: &CameraIntrinsics, size: usize) -> Result<Vec<f64>> {
    if depth.len() != size * size {
        return Err(Error::dim("normal_from_depth_oracle", &[depth.len()], &[size * size]));
    }
    // invalid neighbours only spoil their own neighbourhood
    let point = |u: usize, v: usize| k.unproject(u as f64, v as f64) * depth[v * size + u];
    let mut out = Vec::with_capacity(3 * size * size);
    for v in 0..size {
        for u in 0..size {
            let (ul, ur) = (u.saturating_sub(1), (u + 1).min(size - 1));
            let (vu, vd) = (v.saturating_sub(1), (v + 1).min(size - 1));
            let du = point(ur, v) - point(ul, v);
            let dv = point(u, vd) - point(u, vu);
            let mut n = du.cross(&dv).normalize();
            if n.dot(&k.ray_direction(u as f64, v as f64)) > 0.0 {
                n = -n;
            }
            out.extend_from_slice(n.as_slice());
        }
    }
    Ok(out)
}

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1LogRow {
    pub step: usize,
    pub phase: u8,
    pub l_d: f64,
    pub l_s: f64,
    pub l_con: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Run {
    pub model: Stage1,
    pub log: Vec<Stage1LogRow>,
    pub skipped: usize,
    pub optimizer: Optimizer,
}

/// Trains both networks. Phase 1 trains them separately: F_D on L_d, F_SN on
/// L_s with ground-truth depth input. Phase 2 either trains them jointly on
/// `w_d·L_d + L_s + w_con·L_con` with Ŝ = F_SN(D̂) (consistency on), or keeps
/// them separate with F_SN fed the detached D̂ (consistency off).
pub fn train_stage1(data: &[PatchBundle], cfg: &Stage1Config) -> Result<Stage1Run> {
    train_stage1_from(Stage1::new(cfg), None, 0, usize::MAX, data, cfg)
}

/// Runs steps `start_step + 1 ..= min(until, total)`. The schedule always
/// spans the full run, so stopping early and resuming later reproduces an
/// uninterrupted run exactly.
pub fn train_stage1_from(
    mut model: Stage1,
    optimizer: Option<Optimizer>,
    start_step: usize,
    until: usize,
    data: &[PatchBundle],
    cfg: &Stage1Config,
) -> Result<Stage1Run> {
    cfg.validate()?;
    crate::tune_allocator();
    let usable: Vec<&PatchBundle> = data.iter().filter(|b| b.mask_count() > 0).collect();
    let skipped = data.len() - usable.len();
    if skipped > 0 {
        log::warn!("stage1: skipping {skipped} samples with empty masks");
    }
    if usable.is_empty() {
        return Err(Error::EmptyMask("stage1 training set has no usable samples".into()));
    }
    let total = cfg.pretrain_steps + cfg.joint_steps;
    let mut ocfg = cfg.optim;
    ocfg.total_steps = total;
    let mut opt = optimizer.unwrap_or_else(|| Optimizer::new(ocfg));
    opt.config = ocfg;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::synth::derive_seed(cfg.seed, 0x5747_0001));
    // fast-forward the batch stream so a resumed run sees the same batches
    for _ in 0..start_step * cfg.batch {
        let _ = rng.random_range(0..usable.len());
    }
    let mut log = Vec::with_capacity(total.saturating_sub(start_step));
    for step in start_step + 1..=total.min(until) {
        let joint = step > cfg.pretrain_steps;
        let mut sums = [0.0f64; 3];
        for _ in 0..cfg.batch {
            let b = usable[rng.random_range(0..usable.len())];
            let mut g = Graph::new();
            let (loss, parts) = stage1_loss(&model, &mut g, b, cfg, joint)?;
            let loss = g.scale(loss, 1.0 / cfg.batch as f64);
            let grads = g.backward(loss)?;
            grads.accumulate_into(model.params_mut());
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p / cfg.batch as f64;
            }
        }
        let lr = opt.step(&mut model.params_mut(), step)?;
        let con = joint && cfg.consistency;
        log.push(Stage1LogRow {
            step,
            phase: if joint { 2 } else { 1 },
            l_d: sums[0],
            l_s: sums[1],
            l_con: con.then_some(sums[2]),
            lr,
        });
    }
    Ok(Stage1Run { model, log, skipped, optimizer: opt })
}

/// Objective for one sample and the values `[L_d, L_s, L_con]`.
pub fn stage1_loss(
    model: &Stage1,
    g: &mut Graph,
    b: &PatchBundle,
    cfg: &Stage1Config,
    joint: bool,
) -> Result<(Var, [f64; 3])> {
    let px = b.pixels();
    let d_hat = model.complete_depth_graph(g, b)?;
    let d_star = g.constant_from(vec![px, 1], b.depth_gt.clone())?;
    let s_star = g.constant_from(vec![px, 3], b.normal_gt.clone())?;
    let l_d = masked_sq_loss(g, d_hat, d_star, &b.mask)?;
    let weighted_d = g.scale(l_d, cfg.depth_weight);
    if !joint {
        let s_gt_in = model.estimate_normals_graph(g, b, d_star)?;
        let l_s = masked_sq_loss(g, s_gt_in, s_star, &b.mask)?;
        let total = g.add(weighted_d, l_s)?;
        return Ok((total, [g.scalar_value(l_d), g.scalar_value(l_s), 0.0]));
    }
    if cfg.consistency {
        let s_hat = model.estimate_normals_graph(g, b, d_hat)?;
        let l_s = masked_sq_loss(g, s_hat, s_star, &b.mask)?;
        let target = model.estimate_normals_graph(g, b, d_star)?;
        let target = g.detach(target);
        let l_con = masked_sq_loss(g, s_hat, target, &b.mask)?;
        let wc = g.scale(l_con, cfg.w_con);
        let t = g.add(weighted_d, l_s)?;
        let total = g.add(t, wc)?;
        Ok((total, [g.scalar_value(l_d), g.scalar_value(l_s), g.scalar_value(l_con)]))
    } else {
        let d_in = g.detach(d_hat);
        let s_hat = model.estimate_normals_graph(g, b, d_in)?;
        let l_s = masked_sq_loss(g, s_hat, s_star, &b.mask)?;
        let total = g.add(weighted_d, l_s)?;
        Ok((total, [g.scalar_value(l_d), g.scalar_value(l_s), 0.0]))
    }
}

/// Pooled depth and normal metrics of Ŝ = F_SN(D̂) over held-out patches.
pub fn evaluate_stage1(model: &Stage1, data: &[PatchBundle]) -> Result<(DepthMetrics, NormalMetrics)> {
    let mut da = DepthAccumulator::default();
    let mut na = NormalAccumulator::default();
    for b in data.iter().filter(|b| b.mask_count() > 0) {
        let (d, n) = model.predict(b)?;
        da.add(&d, &b.depth_gt, &b.mask)?;
        na.add(&n, &b.normal_gt, &b.mask)?;
    }
    Ok((da.finish()?, na.finish()?))
}

/// Depth metrics of the raw sensor depth itself (the identity baseline).
pub fn raw_depth_metrics(data: &[PatchBundle]) -> Result<DepthMetrics> {
    let mut da = DepthAccumulator::default();
    for b in data.iter().filter(|b| b.mask_count() > 0) {
        da.add(&b.depth_raw, &b.depth_gt, &b.mask)?;
    }
    da.finish()
}

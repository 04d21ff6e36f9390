//! Second stage: a small point transformer over the generalized point cloud
//! followed by translation, axis and scale decoders.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    orthogonalize_axes, perpendicular_fallback, rotation_from_axes, AxisPair, CameraIntrinsics, Pose,
};
use crate::gpc::{translation_prior, GeneralizedPointCloud, DEPTH_COL, GPC_WIDTH, NORMAL_COLS, RAY_COLS, RGB_COLS};
use crate::losses::{loss_angular, loss_axis, loss_confidence, loss_scale, loss_total, loss_translation, LossParts, LossWeights};
use crate::nn::{LayerNorm, Linear, Mlp, Module};
use crate::synth::Category;

/// Ray offsets from the mean ray are multiplied by this before entering the
/// network (a patch spans roughly ±0.1 rad).
const RAY_GAIN: f64 = 10.0;
const DEPTH_UNIT: f64 = 0.05;
const DEPTH_CENTER: f64 = 0.55;
const DEPTH_SPREAD: f64 = 0.1;
/// Residual heads emit values in units of this many meters.
const RESIDUAL_UNIT: f64 = 0.05;
const SCALE_FLOOR: f64 = 1e-4;

/// Which generalized-point-cloud channel groups reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub rgb: bool,
    pub ray: bool,
    pub depth: bool,
    pub normal: bool,
}

impl Default for Channels {
    fn default() -> Self {
        Channels { rgb: true, ray: true, depth: true, normal: true }
    }
}

impl Channels {
    /// Width of the generalized point cloud these channels select.
    pub fn gpc_width(&self) -> usize {
        3 * self.rgb as usize + 3 * self.ray as usize + self.depth as usize + 3 * self.normal as usize
    }

    /// Width after input normalization: the ray group adds the mean ray and
    /// the depth group adds the mean depth as broadcast columns.
    pub fn input_width(&self) -> usize {
        3 * self.rgb as usize + 6 * self.ray as usize + 2 * self.depth as usize + 3 * self.normal as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_points: usize,
    pub d_emb: usize,
    pub d_global: usize,
    pub blocks: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub channels: Channels,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_points: 512,
            d_emb: 64,
            d_global: 128,
            blocks: 2,
            heads: 4,
            head_hidden: 64,
            channels: Channels::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 || self.d_emb == 0 || self.d_global == 0 || self.heads == 0 || self.head_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_emb % self.heads != 0 {
            return Err(Error::Config(format!("d_emb {} not divisible by {} heads", self.d_emb, self.heads)));
        }
        if self.channels.input_width() == 0 {
            return Err(Error::Config("at least one point-cloud channel must be enabled".into()));
        }
        Ok(())
    }

    pub fn concat_width(&self) -> usize {
        self.d_emb + self.d_global + Category::COUNT
    }
}

#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub ff: Mlp,
    pub heads: usize,
}

impl AttentionBlock {
    fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        AttentionBlock {
            norm1: LayerNorm::new(d),
            q: Linear::with_std(d, d, std, rng),
            k: Linear::with_std(d, d, std, rng),
            v: Linear::with_std(d, d, std, rng),
            out: Linear::with_std(d, d, 0.5 * std, rng),
            norm2: LayerNorm::new(d),
            ff: Mlp::new(&[d, 2 * d, d], rng),
            heads,
        }
    }

    /// Multi-head self-attention over all rows.
    pub fn attention(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let d = g.shape(x)[1];
        let dh = d / self.heads;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, s, e)?;
            let kh = g.slice_cols(k, s, e)?;
            let vh = g.slice_cols(v, s, e)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let att = g.softmax_rows(scores)?;
            outs.push(g.matmul(att, vh)?);
        }
        let cat = g.concat(&outs)?;
        self.out.forward(g, cat)
    }

    /// Pre-norm residual block.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = self.norm1.forward(g, x)?;
        let a = self.attention(g, n)?;
        let x = g.add(x, a)?;
        let n = self.norm2.forward(g, x)?;
        let f = self.ff.forward(g, n)?;
        g.add(x, f)
    }
}

impl Module for AttentionBlock {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.norm1.params();
        for l in [&self.q, &self.k, &self.v, &self.out] {
            p.extend(l.params());
        }
        p.extend(self.norm2.params());
        p.extend(self.ff.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.norm1.params_mut();
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.out] {
            p.extend(l.params_mut());
        }
        p.extend(self.norm2.params_mut());
        p.extend(self.ff.params_mut());
        p
    }
}

/// Point-cloud encoder: input projection plus self-attention blocks. No
/// positional encoding, so it is permutation-equivariant.
#[derive(Debug, Clone)]
pub struct PointformerLite {
    pub input: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub norm: LayerNorm,
}

impl PointformerLite {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = self.input.forward(g, x)?;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        self.norm.forward(g, h)
    }
}

impl Module for PointformerLite {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.input.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.norm.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.input.params_mut();
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.norm.params_mut());
        p
    }
}

/// Per-category mean ground-truth extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePrior {
    pub extents: [[f64; 3]; 4],
}

impl ScalePrior {
    /// Mean of the given `(category, extents)` samples; a category without
    /// samples falls back to the midpoint of its generator scale range.
    pub fn from_samples(samples: &[(Category, Vector3<f64>)]) -> Self {
        let mut extents = [[0.0; 3]; 4];
        for c in Category::ALL {
            let own: Vec<&Vector3<f64>> = samples.iter().filter(|(k, _)| *k == c).map(|(_, s)| s).collect();
            let mean = if own.is_empty() {
                let spec = c.spec();
                (spec.scale_min + spec.scale_max) / 2.0
            } else {
                own.iter().copied().sum::<Vector3<f64>>() / own.len() as f64
            };
            extents[c.index()] = [mean.x, mean.y, mean.z];
        }
        ScalePrior { extents }
    }

    pub fn get(&self, c: Category) -> Vector3<f64> {
        Vector3::from(self.extents[c.index()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().flatten().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("scale prior must be positive: {:?}", self.extents)))
        }
    }
}

/// Full second-stage network.
#[derive(Debug, Clone)]
pub struct TransNet {
    pub config: ModelConfig,
    pub encoder: PointformerLite,
    pub pool_mlp: Mlp,
    pub f_t: Mlp,
    pub f_x: Mlp,
    pub f_z: Mlp,
    pub f_s: Mlp,
    pub scale_prior: ScalePrior,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub p_emb: Var,
    pub p_concat: Var,
    pub t: Var,
    pub a_x: Var,
    pub a_z: Var,
    pub c_x: Var,
    pub c_z: Var,
    pub s: Var,
}

/// A decoded pose with its raw axis pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub category: Category,
    pub axes: AxisPair,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub s: Vector3<f64>,
    /// The decoded axes were (nearly) parallel and `a_x` was replaced.
    pub degenerate: bool,
}

impl PoseEstimate {
    pub fn pose(&self) -> Pose {
        Pose { r: self.r, t: self.t, s: self.s }
    }
}

fn mean_of(rows: impl Iterator<Item = f64>, n: usize) -> f64 {
    rows.sum::<f64>() / n as f64
}

/// Normalized network input for the enabled channels (see
/// [`Channels::input_width`]).
pub fn network_input(gpc: &GeneralizedPointCloud, ch: &Channels) -> Vec<f64> {
    let n = gpc.len();
    let ray_mean: [f64; 3] = std::array::from_fn(|k| mean_of((0..n).map(|i| gpc.row(i)[RAY_COLS][k]), n));
    let d_mean = mean_of((0..n).map(|i| gpc.depth(i)), n);
    let mut x = Vec::with_capacity(n * ch.input_width());
    for i in 0..n {
        let r = gpc.row(i);
        if ch.rgb {
            x.extend(r[RGB_COLS].iter().map(|c| c - 0.5));
        }
        if ch.ray {
            x.extend(r[RAY_COLS].iter().zip(ray_mean).map(|(c, m)| (c - m) * RAY_GAIN));
            x.extend_from_slice(&ray_mean);
        }
        if ch.depth {
            x.push((r[DEPTH_COL] - d_mean) / DEPTH_UNIT);
            x.push((d_mean - DEPTH_CENTER) / DEPTH_SPREAD);
        }
        if ch.normal {
            x.extend_from_slice(&r[NORMAL_COLS]);
        }
    }
    debug_assert_eq!(GPC_WIDTH, 10);
    x
}

impl TransNet {
    pub fn new(config: ModelConfig, scale_prior: ScalePrior, seed: u64) -> Result<Self> {
        config.validate()?;
        scale_prior.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_emb;
        let w = config.concat_width();
        let hid = config.head_hidden;
        let encoder = PointformerLite {
            input: Linear::new(config.channels.input_width(), d, &mut rng),
            blocks: (0..config.blocks).map(|_| AttentionBlock::new(d, config.heads, &mut rng)).collect(),
            norm: LayerNorm::new(d),
        };
        Ok(TransNet {
            config,
            encoder,
            pool_mlp: Mlp::new(&[d, config.d_global, config.d_global], &mut rng),
            f_t: Mlp::zero_output(&[w + config.channels.input_width(), hid, 3], &mut rng),
            f_x: Mlp::new(&[w, hid, 4], &mut rng),
            f_z: Mlp::new(&[w, hid, 4], &mut rng),
            f_s: Mlp::zero_output(&[w, hid, 3], &mut rng),
            scale_prior,
        })
    }

    /// Names matching [`Module::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["enc.input.w".to_string(), "enc.input.b".to_string()];
        for (i, _) in self.encoder.blocks.iter().enumerate() {
            for p in [
                "norm1.gain", "norm1.shift", "q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "out.w", "out.b", "norm2.gain",
                "norm2.shift", "ff0.w", "ff0.b", "ff1.w", "ff1.b",
            ] {
                names.push(format!("enc.block{i}.{p}"));
            }
        }
        names.push("enc.norm.gain".into());
        names.push("enc.norm.shift".into());
        for (head, mlp) in [("pool", &self.pool_mlp), ("f_t", &self.f_t), ("f_x", &self.f_x), ("f_z", &self.f_z), ("f_s", &self.f_s)] {
            for (i, _) in mlp.layers.iter().enumerate() {
                names.push(format!("{head}.{i}.w"));
                names.push(format!("{head}.{i}.b"));
            }
        }
        names
    }

    /// `P_emb` for the point cloud.
    pub fn encode(&self, g: &mut Graph, gpc: &GeneralizedPointCloud) -> Result<(Var, Var)> {
        let ch = self.config.channels;
        let x = g.constant_from(vec![gpc.len(), ch.input_width()], network_input(gpc, &ch))?;
        Ok((self.encoder.forward(g, x)?, x))
    }

    /// `[P_emb, max-pool(MLP(P_emb)), P_c]` per row.
    pub fn pool_concat(&self, g: &mut Graph, p_emb: Var, category: Category) -> Result<Var> {
        let n = g.shape(p_emb)[0];
        let h = self.pool_mlp.forward(g, p_emb)?;
        let global = g.max_rows(h)?;
        let global = g.expand_rows(global, n)?;
        let onehot = g.constant_from(vec![1, Category::COUNT], category.one_hot().to_vec())?;
        let onehot = g.expand_rows(onehot, n)?;
        g.concat(&[p_emb, global, onehot])
    }

    pub fn forward_graph(&self, g: &mut Graph, gpc: &GeneralizedPointCloud, k: &CameraIntrinsics) -> Result<ForwardVars> {
        let (p_emb, x) = self.encode(g, gpc)?;
        let p_concat = self.pool_concat(g, p_emb, gpc.category)?;
        let pooled = g.max_rows(p_concat)?;

        let t_prior = translation_prior(gpc, k)?;
        let per_point = g.concat(&[p_concat, x])?;
        let res_t = self.f_t.forward(g, per_point)?;
        let res_t = g.mean_rows(res_t)?;
        let res_t = g.scale(res_t, RESIDUAL_UNIT);
        let prior = g.constant_from(vec![1, 3], t_prior.as_slice().to_vec())?;
        let t = g.add(prior, res_t)?;

        let (a_x, c_x) = axis_head(g, &self.f_x, pooled)?;
        let (a_z, c_z) = axis_head(g, &self.f_z, pooled)?;

        let res_s = self.f_s.forward(g, pooled)?;
        let res_s = g.scale(res_s, RESIDUAL_UNIT);
        let sp = self.scale_prior.get(gpc.category);
        let sp = g.constant_from(vec![1, 3], sp.as_slice().to_vec())?;
        let s = g.add(sp, res_s)?;
        // floor at SCALE_FLOOR: relu(s − f) + f
        let s = g.offset(s, -SCALE_FLOOR);
        let s = g.relu(s);
        let s = g.offset(s, SCALE_FLOOR);
        Ok(ForwardVars { p_emb, p_concat, t, a_x, a_z, c_x, c_z, s })
    }

    pub fn decode(&self, g: &Graph, v: &ForwardVars, category: Category) -> Result<PoseEstimate> {
        let vec3 = |x: Var| Vector3::from_column_slice(g.value(x));
        let conf = |x: Var| g.value(x)[0].clamp(1e-12, 1.0);
        let axes = AxisPair { a_x: vec3(v.a_x), a_z: vec3(v.a_z), c_x: conf(v.c_x), c_z: conf(v.c_z) };
        let (r, degenerate) = match orthogonalize_axes(&axes) {
            Ok(o) => (rotation_from_axes(&o.a_x, &o.a_z)?, false),
            Err(Error::DegenerateAxes(cos)) => {
                log::warn!("decoded axes are parallel (|cos| = {cos}); using the perpendicular fallback");
                let a_z = axes.a_z.normalize();
                (rotation_from_axes(&perpendicular_fallback(&axes.a_x, &a_z), &a_z)?, true)
            }
            Err(e) => return Err(e),
        };
        Ok(PoseEstimate { category, axes, r, t: vec3(v.t), s: vec3(v.s), degenerate })
    }

    pub fn forward(&self, gpc: &GeneralizedPointCloud, k: &CameraIntrinsics) -> Result<PoseEstimate> {
        let mut g = Graph::new();
        let v = self.forward_graph(&mut g, gpc, k)?;
        self.decode(&g, &v, gpc.category)
    }

    pub fn forward_batch(&self, batch: &[(&GeneralizedPointCloud, &CameraIntrinsics)]) -> Result<Vec<PoseEstimate>> {
        batch.iter().map(|(p, k)| self.forward(p, k)).collect()
    }
}

fn axis_head(g: &mut Graph, head: &Mlp, pooled: Var) -> Result<(Var, Var)> {
    let o = head.forward(g, pooled)?;
    let a = g.slice_cols(o, 0, 3)?;
    let a = g.normalize_rows(a)?;
    let c = g.slice_cols(o, 3, 4)?;
    let c = g.sigmoid(c);
    Ok((a, c))
}

impl Module for TransNet {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        for m in [&self.pool_mlp, &self.f_t, &self.f_x, &self.f_z, &self.f_s] {
            p.extend(m.params());
        }
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        for m in [&mut self.pool_mlp, &mut self.f_t, &mut self.f_x, &mut self.f_z, &mut self.f_s] {
            p.extend(m.params_mut());
        }
        p
    }
}

/// Builds the seven component losses against a ground-truth pose.
pub fn pose_losses(g: &mut Graph, v: &ForwardVars, gt: &Pose, w: &LossWeights) -> Result<(Var, LossParts)> {
    let row = |g: &mut Graph, x: Vector3<f64>| g.constant_from(vec![1, 3], x.as_slice().to_vec());
    let ax_star = row(g, gt.r.column(0).into_owned())?;
    let az_star = row(g, gt.r.column(2).into_owned())?;
    let t_star = row(g, gt.t)?;
    let s_star = row(g, gt.s)?;
    let parts = LossParts {
        rx: loss_axis(g, v.a_x, ax_star)?,
        rz: loss_axis(g, v.a_z, az_star)?,
        ra: loss_angular(g, v.a_x, v.a_z)?,
        t: loss_translation(g, v.t, t_star)?,
        s: loss_scale(g, v.s, s_star)?,
        conx: loss_confidence(g, v.c_x, v.a_x, ax_star, w.alpha)?,
        conz: loss_confidence(g, v.c_z, v.a_z, az_star, w.alpha)?,
    };
    let total = loss_total(g, &parts, w)?;
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::is_rotation;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig { n_points: 8, d_emb: 8, d_global: 8, blocks: 2, heads: 2, head_hidden: 8, channels: Channels::default() }
    }

    fn prior() -> ScalePrior {
        ScalePrior::from_samples(&[])
    }

    fn random_gpc(n: usize, seed: u64) -> (GeneralizedPointCloud, CameraIntrinsics) {
        let k = CameraIntrinsics::new(60.0, 60.0, 15.5, 15.5, 32, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::new();
        let mut pixels = Vec::new();
        for _ in 0..n {
            let (u, v) = (rng.random_range(0..32), rng.random_range(0..32));
            let ray = k.ray_direction(u as f64, v as f64);
            let nrm = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0).normalize();
            features.extend([rng.random::<f64>(), rng.random(), rng.random()]);
            features.extend(ray.iter());
            features.push(rng.random_range(0.4..0.7));
            features.extend(nrm.iter());
            pixels.push((u, v));
        }
        (GeneralizedPointCloud { features, pixels, category: Category::ALL[seed as usize % 4], seed }, k)
    }

    #[test]
    fn shapes_and_zero_init() {
        let cfg = ModelConfig { n_points: 16, d_emb: 64, d_global: 128, ..small() };
        let net = TransNet::new(cfg, prior(), 1).unwrap();
        let (gpc, k) = random_gpc(16, 3);
        let mut g = Graph::new();
        let v = net.forward_graph(&mut g, &gpc, &k).unwrap();
        assert_eq!(g.shape(v.p_emb), &[16, 64]);
        assert_eq!(g.shape(v.p_concat), &[16, 196]);
        let est = net.decode(&g, &v, gpc.category).unwrap();
        assert_eq!(est.t, translation_prior(&gpc, &k).unwrap());
        assert_eq!(est.s, net.scale_prior.get(gpc.category));
        assert!(is_rotation(&est.r, 1e-9));
        assert!(est.axes.c_x > 0.0 && est.axes.c_x < 1.0 && est.axes.c_z > 0.0 && est.axes.c_z < 1.0);
        let onehot = gpc.category.one_hot();
        for i in 0..16 {
            let row = &g.value(v.p_concat)[i * 196..(i + 1) * 196];
            assert_eq!(&row[192..], &onehot);
        }
    }

    #[test]
    fn permutation_equivariance_and_invariance() {
        let net = TransNet::new(small(), prior(), 2).unwrap();
        let (gpc, k) = random_gpc(8, 5);
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let pg = gpc.permuted(&perm);
        let mut g1 = Graph::new();
        let v1 = net.forward_graph(&mut g1, &gpc, &k).unwrap();
        let mut g2 = Graph::new();
        let v2 = net.forward_graph(&mut g2, &pg, &k).unwrap();
        let d = 8;
        for (i, &p) in perm.iter().enumerate() {
            let a = &g1.value(v1.p_emb)[p * d..(p + 1) * d];
            let b = &g2.value(v2.p_emb)[i * d..(i + 1) * d];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let e1 = net.decode(&g1, &v1, gpc.category).unwrap();
        let e2 = net.decode(&g2, &v2, pg.category).unwrap();
        assert!((e1.r - e2.r).abs().max() < 1e-9);
        assert!((e1.t - e2.t).norm() < 1e-9 && (e1.s - e2.s).norm() < 1e-9);
    }

    #[test]
    fn duplicating_points_keeps_global_feature() {
        let net = TransNet::new(small(), prior(), 4).unwrap();
        let (gpc, _) = random_gpc(8, 6);
        let doubled = gpc.permuted(&[0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3, 4, 5, 6, 7]);
        // duplication changes the attention context, so compare the pooling
        // stage on fixed embeddings
        let mut g = Graph::new();
        let (emb, _) = net.encode(&mut g, &gpc).unwrap();
        let emb_t = g.tensor(emb);
        let mut dup = emb_t.data().to_vec();
        dup.extend_from_slice(emb_t.data());
        let e1 = g.constant(emb_t);
        let e2 = g.constant_from(vec![16, 8], dup).unwrap();
        let c1 = net.pool_concat(&mut g, e1, gpc.category).unwrap();
        let c2 = net.pool_concat(&mut g, e2, doubled.category).unwrap();
        assert_eq!(&g.value(c1)[8..16], &g.value(c2)[8..16]);
    }

    #[test]
    fn deterministic_and_batched() {
        let net = TransNet::new(small(), prior(), 8).unwrap();
        let clouds: Vec<_> = (0..3).map(|s| random_gpc(8, s)).collect();
        let batch: Vec<_> = clouds.iter().map(|(p, k)| (p, k)).collect();
        let out = net.forward_batch(&batch).unwrap();
        for ((p, k), e) in clouds.iter().zip(&out) {
            assert_eq!(&net.forward(p, k).unwrap(), e);
        }
    }

    #[test]
    fn channel_widths() {
        let all = Channels::default();
        assert_eq!(all.gpc_width(), 10);
        assert_eq!(Channels { normal: false, ..all }.gpc_width(), 7);
        assert_eq!(Channels { ray: false, ..all }.gpc_width(), 7);
        let net = TransNet::new(ModelConfig { channels: Channels { ray: false, ..all }, ..small() }, prior(), 0).unwrap();
        let (gpc, k) = random_gpc(8, 2);
        assert!(is_rotation(&net.forward(&gpc, &k).unwrap().r, 1e-9));
    }
}

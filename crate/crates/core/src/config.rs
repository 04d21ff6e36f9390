//! Flat `key = value` run configuration. One file fully determines a run.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown or repeated keys are errors. Missing keys take their defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::OptimConfig;
use crate::dataio::sha256_hex;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Channels, ModelConfig};
use crate::stage1::Stage1Config;
use crate::synth::{CorruptionParams, SceneConfig};
use crate::train::Stage2Config;

/// Ablation toggles understood by `ablate`.
pub const ABLATION_TOGGLES: [&str; 3] = ["consistency", "normal", "ray"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub stage1: PathBuf,
    pub stage2: PathBuf,

    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Distinct object instances per category in each split.
    pub train_instances: usize,
    pub test_instances: usize,
    pub patch_size: usize,
    pub mesh_segments: usize,
    pub corruption: CorruptionParams,

    pub n_points: usize,
    pub d_emb: usize,
    pub d_global: usize,
    pub blocks: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub channels: Channels,
    pub weights: LossWeights,

    pub s1_hidden: usize,
    pub s1_layers: usize,
    pub s1_batch: usize,
    pub s1_pretrain_steps: usize,
    pub s1_joint_steps: usize,
    pub s1_lr: f64,
    pub s1_warmup: usize,
    pub consistency: bool,
    pub w_con: f64,
    pub depth_weight: f64,

    pub lr: f64,
    pub warmup_steps: usize,
    pub anneal_point: f64,
    pub min_lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub per_category: bool,

    pub ablate: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s1 = Stage1Config::default();
        RunConfig {
            seed: 0,
            dataset: PathBuf::from("data"),
            stage1: PathBuf::from("runs/stage1"),
            stage2: PathBuf::from("runs/stage2"),
            train_scenes: 5000,
            test_scenes: 400,
            train_instances: 40,
            test_instances: 10,
            patch_size: 32,
            mesh_segments: 48,
            corruption: CorruptionParams::default(),
            n_points: 64,
            d_emb: 32,
            d_global: 64,
            blocks: 2,
            heads: 4,
            head_hidden: 64,
            channels: Channels::default(),
            weights: LossWeights::default(),
            s1_hidden: s1.hidden,
            s1_layers: s1.layers,
            s1_batch: s1.batch,
            s1_pretrain_steps: 400,
            s1_joint_steps: 200,
            s1_lr: s1.optim.base_lr,
            s1_warmup: s1.optim.warmup_steps,
            consistency: true,
            w_con: s1.w_con,
            depth_weight: s1.depth_weight,
            lr: 1e-3,
            warmup_steps: 60,
            anneal_point: 0.72,
            min_lr: 0.0,
            steps: 600,
            batch: 8,
            per_category: true,
            ablate: ABLATION_TOGGLES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

/// Shortest decimal form that round-trips, so hashing is stable.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

const PATH_KEYS: [&str; 3] = ["dataset", "stage1", "stage2"];

impl RunConfig {
    /// All keys with their canonical values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corruption;
        let w = &self.weights;
        let ch = &self.channels;
        vec![
            ("seed", self.seed.to_string()),
            ("dataset", self.dataset.display().to_string()),
            ("stage1", self.stage1.display().to_string()),
            ("stage2", self.stage2.display().to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("test_scenes", self.test_scenes.to_string()),
            ("train_instances", self.train_instances.to_string()),
            ("test_instances", self.test_instances.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("mesh_segments", self.mesh_segments.to_string()),
            ("dropout", fmt_f(c.dropout)),
            ("noise_sigma", fmt_f(c.noise_sigma)),
            ("bias_amplitude", fmt_f(c.bias_amplitude)),
            ("bias_period", fmt_f(c.bias_period)),
            ("n_points", self.n_points.to_string()),
            ("d_emb", self.d_emb.to_string()),
            ("d_global", self.d_global.to_string()),
            ("blocks", self.blocks.to_string()),
            ("heads", self.heads.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("use_rgb", ch.rgb.to_string()),
            ("use_ray", ch.ray.to_string()),
            ("use_depth", ch.depth.to_string()),
            ("use_normal", ch.normal.to_string()),
            ("lambda_rx", fmt_f(w.rx)),
            ("lambda_rz", fmt_f(w.rz)),
            ("lambda_a", fmt_f(w.ra)),
            ("lambda_t", fmt_f(w.t)),
            ("lambda_s", fmt_f(w.s)),
            ("lambda_conx", fmt_f(w.conx)),
            ("lambda_conz", fmt_f(w.conz)),
            ("alpha", fmt_f(w.alpha)),
            ("s1_hidden", self.s1_hidden.to_string()),
            ("s1_layers", self.s1_layers.to_string()),
            ("s1_batch", self.s1_batch.to_string()),
            ("s1_pretrain_steps", self.s1_pretrain_steps.to_string()),
            ("s1_joint_steps", self.s1_joint_steps.to_string()),
            ("s1_lr", fmt_f(self.s1_lr)),
            ("s1_warmup", self.s1_warmup.to_string()),
            ("consistency", self.consistency.to_string()),
            ("w_con", fmt_f(self.w_con)),
            ("depth_weight", fmt_f(self.depth_weight)),
            ("lr", fmt_f(self.lr)),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("anneal_point", fmt_f(self.anneal_point)),
            ("min_lr", fmt_f(self.min_lr)),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("per_category", self.per_category.to_string()),
            ("ablate", self.ablate.join(",")),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "stage1" => self.stage1 = PathBuf::from(v),
            "stage2" => self.stage2 = PathBuf::from(v),
            "train_scenes" => self.train_scenes = parse_num(key, v)?,
            "test_scenes" => self.test_scenes = parse_num(key, v)?,
            "train_instances" => self.train_instances = parse_num(key, v)?,
            "test_instances" => self.test_instances = parse_num(key, v)?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "mesh_segments" => self.mesh_segments = parse_num(key, v)?,
            "dropout" => self.corruption.dropout = parse_num(key, v)?,
            "noise_sigma" => self.corruption.noise_sigma = parse_num(key, v)?,
            "bias_amplitude" => self.corruption.bias_amplitude = parse_num(key, v)?,
            "bias_period" => self.corruption.bias_period = parse_num(key, v)?,
            "n_points" => self.n_points = parse_num(key, v)?,
            "d_emb" => self.d_emb = parse_num(key, v)?,
            "d_global" => self.d_global = parse_num(key, v)?,
            "blocks" => self.blocks = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "head_hidden" => self.head_hidden = parse_num(key, v)?,
            "use_rgb" => self.channels.rgb = parse_bool(key, v)?,
            "use_ray" => self.channels.ray = parse_bool(key, v)?,
            "use_depth" => self.channels.depth = parse_bool(key, v)?,
            "use_normal" => self.channels.normal = parse_bool(key, v)?,
            "lambda_rx" => self.weights.rx = parse_num(key, v)?,
            "lambda_rz" => self.weights.rz = parse_num(key, v)?,
            "lambda_a" => self.weights.ra = parse_num(key, v)?,
            "lambda_t" => self.weights.t = parse_num(key, v)?,
            "lambda_s" => self.weights.s = parse_num(key, v)?,
            "lambda_conx" => self.weights.conx = parse_num(key, v)?,
            "lambda_conz" => self.weights.conz = parse_num(key, v)?,
            "alpha" => self.weights.alpha = parse_num(key, v)?,
            "s1_hidden" => self.s1_hidden = parse_num(key, v)?,
            "s1_layers" => self.s1_layers = parse_num(key, v)?,
            "s1_batch" => self.s1_batch = parse_num(key, v)?,
            "s1_pretrain_steps" => self.s1_pretrain_steps = parse_num(key, v)?,
            "s1_joint_steps" => self.s1_joint_steps = parse_num(key, v)?,
            "s1_lr" => self.s1_lr = parse_num(key, v)?,
            "s1_warmup" => self.s1_warmup = parse_num(key, v)?,
            "consistency" => self.consistency = parse_bool(key, v)?,
            "w_con" => self.w_con = parse_num(key, v)?,
            "depth_weight" => self.depth_weight = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_num(key, v)?,
            "anneal_point" => self.anneal_point = parse_num(key, v)?,
            "min_lr" => self.min_lr = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "per_category" => self.per_category = parse_bool(key, v)?,
            "ablate" => {
                self.ablate = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses and validates config text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical entries. Paths are left out: they say where
    /// artifacts live, not what they contain.
    pub fn hash(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            if !PATH_KEYS.contains(&k) {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        sha256_hex(s.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train_scenes", self.train_scenes),
            ("test_scenes", self.test_scenes),
            ("train_instances", self.train_instances),
            ("test_instances", self.test_instances),
            ("mesh_segments", self.mesh_segments),
            ("steps", self.steps),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if self.patch_size < 4 {
            return Err(Error::Config(format!("`patch_size` must be ≥ 4, got {}", self.patch_size)));
        }
        if self.mesh_segments < 3 {
            return Err(Error::Config("`mesh_segments` must be ≥ 3".into()));
        }
        for (k, v) in [("lr", self.lr), ("s1_lr", self.s1_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::Config(format!("`min_lr` must be in [0, lr], got {}", self.min_lr)));
        }
        if !(0.0..=1.0).contains(&self.anneal_point) {
            return Err(Error::Config(format!("`anneal_point` must be in [0, 1], got {}", self.anneal_point)));
        }
        for t in &self.ablate {
            if !ABLATION_TOGGLES.contains(&t.as_str()) {
                return Err(Error::Config(format!("unknown ablation toggle `{t}`")));
            }
        }
        self.corruption.validate()?;
        self.stage1_config().validate()?;
        self.stage2_config().validate()
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            patch_size: self.patch_size,
            segments: self.mesh_segments,
            corruption: self.corruption,
            ..Default::default()
        }
    }

    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config {
            hidden: self.s1_hidden,
            layers: self.s1_layers,
            batch: self.s1_batch,
            pretrain_steps: self.s1_pretrain_steps,
            joint_steps: self.s1_joint_steps,
            consistency: self.consistency,
            w_con: self.w_con,
            depth_weight: self.depth_weight,
            optim: OptimConfig {
                base_lr: self.s1_lr,
                warmup_steps: self.s1_warmup,
                anneal_point: self.anneal_point,
                min_lr: self.min_lr.min(self.s1_lr),
                ..Default::default()
            },
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_points: self.n_points,
            d_emb: self.d_emb,
            d_global: self.d_global,
            blocks: self.blocks,
            heads: self.heads,
            head_hidden: self.head_hidden,
            channels: self.channels,
        }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        Stage2Config {
            model: self.model_config(),
            weights: self.weights,
            optim: OptimConfig {
                base_lr: self.lr,
                warmup_steps: self.warmup_steps,
                total_steps: self.steps,
                anneal_point: self.anneal_point,
                min_lr: self.min_lr,
                ..Default::default()
            },
            steps: self.steps,
            batch: self.batch,
            per_category: self.per_category,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_text() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn every_entry_key_is_settable() {
        let mut c = RunConfig::default();
        for (k, v) in RunConfig::default().entries() {
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn comments_partial_files_and_overrides() {
        let c = RunConfig::parse("# desk run\nseed = 7   # trailing\n\nsteps=10\nuse_ray = false\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.steps, 10);
        assert!(!c.channels.ray);
        assert_eq!(c.batch, RunConfig::default().batch);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "nope = 1",
            "seed = -1",
            "seed = 1\nseed = 2",
            "use_ray = yes",
            "steps",
            "d_emb = 30",
            "alpha = 0.5",
            "dropout = 1.5",
            "ablate = ray,colour",
            "patch_size = 2",
        ] {
            let e = RunConfig::parse(bad).unwrap_err();
            assert!(e.is_validation(), "{bad}: {e}");
        }
    }

    #[test]
    fn hash_tracks_content_not_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.dataset = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.weights.alpha = -4.0;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}

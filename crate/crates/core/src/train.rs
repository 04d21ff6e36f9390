//! Second-stage training and evaluation on top of frozen first-stage outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, OptimConfig, Optimizer};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::gpc::{build_gpc, GeneralizedPointCloud};
use crate::losses::LossWeights;
use crate::metrics::{evaluate, MetricReport, PoseRecord};
use crate::model::{pose_losses, ModelConfig, PoseEstimate, ScalePrior, TransNet};
use crate::nn::Module;
use crate::stage1::Stage1;
use crate::synth::{derive_seed, Category, PatchBundle};

/// One object patch with its first-stage outputs and ground truth.
#[derive(Debug, Clone)]
pub struct Stage2Sample {
    pub id: String,
    pub category: Category,
    pub bundle: PatchBundle,
    /// Completed depth D̂.
    pub depth: Vec<f64>,
    /// Estimated normals Ŝ, interleaved.
    pub normals: Vec<f64>,
    pub gt: Pose,
}

impl Stage2Sample {
    /// Runs the frozen first stage, or uses ground-truth depth and normals
    /// when `stage1` is `None`.
    pub fn prepare(id: String, category: Category, bundle: PatchBundle, gt: Pose, stage1: Option<&Stage1>) -> Result<Self> {
        let (depth, normals) = match stage1 {
            Some(s) => s.predict(&bundle)?,
            None => (bundle.depth_gt.clone(), bundle.normal_gt.clone()),
        };
        Ok(Stage2Sample { id, category, bundle, depth, normals, gt })
    }

    pub fn gpc(&self, n: usize, seed: u64) -> Result<GeneralizedPointCloud> {
        build_gpc(&self.bundle, self.category, &self.depth, &self.normals, n, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch: usize,
    /// Train one model per category instead of one shared model.
    pub per_category: bool,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            steps: 2000,
            batch: 8,
            per_category: true,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2LogRow {
    pub model: String,
    pub step: usize,
    /// Component losses in [`crate::losses::LOSS_NAMES`] order.
    pub parts: [f64; 7],
    pub total: f64,
    pub lr: f64,
}

/// A trained model, either shared (`category == None`) or per category.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub category: Option<Category>,
    pub net: TransNet,
    pub optimizer: Optimizer,
    pub step: usize,
}

impl TrainedModel {
    pub fn name(&self) -> &'static str {
        self.category.map(|c| c.name()).unwrap_or("all")
    }
}

#[derive(Debug, Clone)]
pub struct PoseModels {
    pub models: Vec<TrainedModel>,
}

impl PoseModels {
    /// The category's own model if there is one, else the shared model.
    pub fn for_category(&self, c: Category) -> Option<&TransNet> {
        self.models
            .iter()
            .find(|m| m.category == Some(c))
            .or_else(|| self.models.iter().find(|m| m.category.is_none()))
            .map(|m| &m.net)
    }
}

fn gpc_seed(base: u64, step: usize, slot: usize) -> u64 {
    derive_seed(derive_seed(base, step as u64), slot as u64)
}

/// Continues (or starts, with `start == None`) training one model on the
/// given samples up to step `min(until, cfg.steps)`. The learning-rate
/// schedule always spans `cfg.steps`.
pub fn train_model(
    samples: &[&Stage2Sample],
    cfg: &Stage2Config,
    category: Option<Category>,
    prior: ScalePrior,
    start: Option<TrainedModel>,
    until: usize,
) -> Result<(TrainedModel, Vec<Stage2LogRow>)> {
    cfg.validate()?;
    crate::tune_allocator();
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "no training samples for model {}",
            category.map(|c| c.name()).unwrap_or("all")
        )));
    }
    let stream = derive_seed(cfg.seed, category.map(|c| c.index() as u64 + 1).unwrap_or(0));
    let mut ocfg = cfg.optim;
    ocfg.total_steps = cfg.steps;
    let mut tm = match start {
        Some(mut tm) => {
            tm.optimizer.config = ocfg;
            tm
        }
        None => TrainedModel {
            category,
            net: TransNet::new(cfg.model, prior, derive_seed(stream, 1))?,
            optimizer: Optimizer::new(ocfg),
            step: 0,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(stream, 2));
    for _ in 0..tm.step * cfg.batch {
        let _ = rng.random_range(0..samples.len());
    }
    let name = tm.name().to_string();
    let mut log = Vec::new();
    for step in tm.step + 1..=cfg.steps.min(until) {
        let mut parts = [0.0; 7];
        let mut total = 0.0;
        for slot in 0..cfg.batch {
            let s = samples[rng.random_range(0..samples.len())];
            let gpc = s.gpc(cfg.model.n_points, gpc_seed(stream, step, slot))?;
            let mut g = Graph::new();
            let v = tm.net.forward_graph(&mut g, &gpc, &s.bundle.k)?;
            let (loss, lp) = pose_losses(&mut g, &v, &s.gt, &cfg.weights)?;
            let scaled = g.scale(loss, 1.0 / cfg.batch as f64);
            let grads = g.backward(scaled)?;
            grads.accumulate_into(tm.net.params_mut());
            for (acc, x) in parts.iter_mut().zip(lp.values(&g)) {
                *acc += x / cfg.batch as f64;
            }
            total += g.scalar_value(loss) / cfg.batch as f64;
        }
        let lr = tm.optimizer.step(&mut tm.net.params_mut(), step)?;
        tm.step = step;
        log.push(Stage2LogRow { model: name.clone(), step, parts, total, lr });
    }
    Ok((tm, log))
}

/// Trains either one shared model or one per category present in `samples`.
pub fn train_stage2(samples: &[Stage2Sample], cfg: &Stage2Config, prior: ScalePrior) -> Result<(PoseModels, Vec<Stage2LogRow>)> {
    let mut models = Vec::new();
    let mut log = Vec::new();
    if cfg.per_category {
        for c in Category::ALL {
            let subset: Vec<&Stage2Sample> = samples.iter().filter(|s| s.category == c).collect();
            if subset.is_empty() {
                continue;
            }
            let (m, l) = train_model(&subset, cfg, Some(c), prior, None, usize::MAX)?;
            models.push(m);
            log.extend(l);
        }
    } else {
        let all: Vec<&Stage2Sample> = samples.iter().collect();
        let (m, l) = train_model(&all, cfg, None, prior, None, usize::MAX)?;
        models.push(m);
        log.extend(l);
    }
    Ok((PoseModels { models }, log))
}

/// Mean ground-truth extents per category of a training set.
pub fn scale_prior_of(samples: &[Stage2Sample]) -> ScalePrior {
    let pairs: Vec<_> = samples.iter().map(|s| (s.category, s.gt.s)).collect();
    ScalePrior::from_samples(&pairs)
}

/// Predicts every sample with a fixed per-sample point-sampling seed.
pub fn predict_all(models: &PoseModels, samples: &[Stage2Sample], n_points: usize, seed: u64) -> Result<Vec<PoseEstimate>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let net = models
                .for_category(s.category)
                .ok_or_else(|| Error::Dependency(format!("no model for category {}", s.category)))?;
            let gpc = s.gpc(n_points, derive_seed(seed, i as u64))?;
            net.forward(&gpc, &s.bundle.k)
        })
        .collect()
}

pub fn records(samples: &[Stage2Sample], poses: &[Pose]) -> Vec<PoseRecord> {
    samples
        .iter()
        .zip(poses)
        .map(|(s, p)| PoseRecord { id: s.id.clone(), category: s.category, pose: *p })
        .collect()
}

/// Pose metrics of the models on held-out samples.
pub fn evaluate_models(models: &PoseModels, samples: &[Stage2Sample], n_points: usize, seed: u64) -> Result<MetricReport> {
    let est = predict_all(models, samples, n_points, seed)?;
    let poses: Vec<Pose> = est.iter().map(|e| e.pose()).collect();
    let gt: Vec<Pose> = samples.iter().map(|s| s.gt).collect();
    evaluate(&records(samples, &poses), &records(samples, &gt))
}

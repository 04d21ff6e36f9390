//! The operator pipeline behind the `transnet` binary: dataset generation,
//! stage-1 and stage-2 training with resumable checkpoints, evaluation and
//! the ablation grid. Every artifact records the config hash that made it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Optimizer;
use crate::config::RunConfig;
use crate::dataio::{
    hash_tree, list_scenes, load_checkpoint, load_scene, prepare_output_dir, read_json, save_checkpoint, save_scene,
    write_json, Checkpoint,
};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::losses::LOSS_NAMES;
use crate::metrics::{evaluate, DepthAccumulator, MetricReport, NormalAccumulator, ReportRow};
use crate::model::{ModelConfig, ScalePrior, TransNet};
use crate::nn::Module;
use crate::stage1::{train_stage1_from, Stage1, Stage1Config, Stage1LogRow};
use crate::synth::{derive_seed, generate_scene, Category, PatchBundle, SceneSeeds, GENERATOR_VERSION};
use crate::train::{predict_all, records, scale_prior_of, train_model, PoseModels, Stage2LogRow, Stage2Sample, TrainedModel};

pub const DATASET_META: &str = "dataset.json";
pub const MANIFEST: &str = "manifest.json";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const MODELS_META: &str = "models.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

const STAGE1_KIND: &str = "stage1";
const STAGE2_KIND: &str = "stage2";
const SPLITS: [(&str, u64); 2] = [("train", 1), ("test", 2)];
const INSTANCE_STREAM: u64 = 0x1_0000;
const EVAL_STREAM: u64 = 0xE7A1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub scenes: usize,
    pub per_category: BTreeMap<String, usize>,
    pub instance_seeds: BTreeMap<String, Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub config_hash: String,
    pub seed: u64,
    pub generator_version: u32,
    pub patch_size: usize,
    pub train: SplitInfo,
    pub test: SplitInfo,
}

/// Seed of instance `j` of a category. Train instances take
/// `j < train_instances`, test instances the next `test_instances`, so the
/// two sets are disjoint by construction.
pub fn instance_seed(seed: u64, category: Category, j: usize) -> u64 {
    derive_seed(derive_seed(seed, INSTANCE_STREAM + category.index() as u64), j as u64)
}

fn scene_dir_name(i: usize) -> String {
    format!("scene_{i:05}")
}

/// Writes `train/` and `test/` scene directories plus `dataset.json`.
/// Scene `i` of a split shows category `i mod 4`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<DatasetInfo> {
    cfg.validate()?;
    prepare_output_dir(out, overwrite)?;
    let hash = cfg.hash();
    let scene_cfg = cfg.scene_config();
    let mut infos = Vec::new();
    for (split, stream) in SPLITS {
        let (count, n_inst, first) = match split {
            "train" => (cfg.train_scenes, cfg.train_instances, 0),
            _ => (cfg.test_scenes, cfg.test_instances, cfg.train_instances),
        };
        let mut per_category = BTreeMap::new();
        let mut instance_seeds: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
        for i in 0..count {
            let category = Category::ALL[i % Category::COUNT];
            let inst = instance_seed(cfg.seed, category, first + (i / Category::COUNT) % n_inst);
            let seeds = SceneSeeds {
                global: cfg.seed,
                scene_index: i as u64,
                scene: derive_seed(derive_seed(cfg.seed, stream), i as u64),
            };
            let scene = generate_scene(category, inst, seeds, &scene_cfg, &hash)?;
            save_scene(&out.join(split).join(scene_dir_name(i)), &scene)?;
            *per_category.entry(category.name().to_string()).or_insert(0) += 1;
            instance_seeds.entry(category.name().to_string()).or_default().insert(inst);
        }
        infos.push(SplitInfo {
            scenes: count,
            per_category,
            instance_seeds: instance_seeds.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect(),
        });
    }
    let test = infos.pop().expect("two splits");
    let train = infos.pop().expect("two splits");
    let seen: BTreeSet<u64> = train.instance_seeds.values().flatten().copied().collect();
    if test.instance_seeds.values().flatten().any(|s| seen.contains(s)) {
        return Err(Error::Generation("train and test instance seeds overlap".into()));
    }
    let info = DatasetInfo {
        config_hash: hash,
        seed: cfg.seed,
        generator_version: GENERATOR_VERSION,
        patch_size: cfg.patch_size,
        train,
        test,
    };
    write_json(&out.join(DATASET_META), &info)?;
    log::info!(
        "generated {} train / {} test scenes in {}",
        info.train.scenes,
        info.test.scenes,
        out.display()
    );
    Ok(info)
}

/// One loaded scene with its single annotated object.
#[derive(Debug, Clone)]
pub struct DataItem {
    pub id: String,
    pub category: Category,
    pub bundle: PatchBundle,
    pub gt: Pose,
}

pub fn load_dataset_info(dataset: &Path) -> Result<DatasetInfo> {
    let path = dataset.join(DATASET_META);
    if !path.is_file() {
        return Err(Error::Dependency(format!("no dataset at {} (run generate first)", dataset.display())));
    }
    read_json(&path)
}

pub fn load_split(dataset: &Path, split: &str) -> Result<Vec<DataItem>> {
    load_dataset_info(dataset)?;
    let mut items = Vec::new();
    for dir in list_scenes(&dataset.join(split))? {
        let (bundle, ann) = load_scene(&dir)?;
        let obj = ann.objects.first().ok_or_else(|| Error::Load {
            path: dir.clone(),
            field: "objects".into(),
            msg: "scene has no annotated object".into(),
        })?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        items.push(DataItem {
            id: format!("{split}/{name}"),
            category: obj.category,
            gt: obj.pose(),
            bundle,
        });
    }
    Ok(items)
}

fn warn_hash(what: &str, theirs: &str, ours: &str) -> bool {
    if theirs != ours {
        log::warn!("{what} was produced with config hash {theirs}, current config is {ours}");
        true
    } else {
        false
    }
}

fn module_checkpoint(
    kind: &str,
    cfg: &RunConfig,
    names: Vec<String>,
    module: &dyn Module,
    optimizer: &Optimizer,
    step: usize,
    extra: serde_json::Value,
) -> Checkpoint {
    Checkpoint {
        kind: kind.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        step,
        params: names.into_iter().zip(module.params().into_iter().cloned()).collect(),
        moments: optimizer.moments().to_vec(),
        extra,
    }
}

/// Copies checkpoint parameters into a freshly built module, checking names
/// and shapes.
fn restore(module: &mut dyn Module, names: &[String], ck: &Checkpoint, dir: &Path) -> Result<()> {
    let mut params = module.params_mut();
    if params.len() != ck.params.len() {
        return Err(Error::Load {
            path: dir.to_path_buf(),
            field: "params".into(),
            msg: format!("{} tensors, model expects {}", ck.params.len(), params.len()),
        });
    }
    for ((p, (name, t)), want) in params.iter_mut().zip(&ck.params).zip(names) {
        if name != want || p.shape() != t.shape() {
            return Err(Error::Load {
                path: dir.to_path_buf(),
                field: name.clone(),
                msg: format!("expected {want} with shape {:?}, found shape {:?}", p.shape(), t.shape()),
            });
        }
        p.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

fn extra_field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, dir: &Path, key: &str) -> Result<T> {
    let v = ck.extra.get(key).cloned().ok_or_else(|| Error::Load {
        path: dir.to_path_buf(),
        field: key.into(),
        msg: "missing from checkpoint manifest".into(),
    })?;
    serde_json::from_value(v).map_err(|e| Error::Load {
        path: dir.to_path_buf(),
        field: key.into(),
        msg: e.to_string(),
    })
}

fn check_kind(ck: &Checkpoint, dir: &Path, kind: &str) -> Result<()> {
    if ck.kind != kind {
        return Err(Error::Load {
            path: dir.to_path_buf(),
            field: "kind".into(),
            msg: format!("expected a {kind} checkpoint, found {}", ck.kind),
        });
    }
    Ok(())
}

/// A stage-1 checkpoint with its config and recorded hash.
pub struct LoadedStage1 {
    pub model: Stage1,
    pub config: Stage1Config,
    pub checkpoint: Checkpoint,
}

pub fn load_stage1(dir: &Path) -> Result<LoadedStage1> {
    let ck = load_checkpoint(dir)?;
    check_kind(&ck, dir, STAGE1_KIND)?;
    let config: Stage1Config = extra_field(&ck, dir, "stage1_config")?;
    config.validate()?;
    let mut model = Stage1::new(&config);
    let names = model.param_names();
    restore(&mut model, &names, &ck, dir)?;
    Ok(LoadedStage1 { model, config, checkpoint: ck })
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

/// Reads an existing loss log and keeps the header plus the rows up to
/// `step`, so a resumed run appends where the checkpoint left off.
fn log_prefix(path: &Path, header: &str, step: usize, step_col: usize) -> Result<String> {
    let mut out = format!("{header}\n");
    if step == 0 || !path.is_file() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for line in text.lines().skip(1) {
        let s: usize = line.split(',').nth(step_col).and_then(|v| v.parse().ok()).unwrap_or(usize::MAX);
        if s <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Resumes from the checkpoint in `out` unless `overwrite` is set;
/// otherwise `out` must be new or empty.
fn open_run_dir(out: &Path, overwrite: bool, cfg: &RunConfig) -> Result<Option<Checkpoint>> {
    if !overwrite && out.join(MANIFEST).is_file() {
        let ck = load_checkpoint(out)?;
        if ck.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "{} holds a run with config hash {}; resume needs the same config (or pass --overwrite)",
                out.display(),
                ck.config_hash
            )));
        }
        return Ok(Some(ck));
    }
    prepare_output_dir(out, overwrite)?;
    Ok(None)
}

pub fn stage1_log_header(consistency: bool) -> String {
    if consistency {
        "step,phase,l_d,l_s,l_con,lr".into()
    } else {
        "step,phase,l_d,l_s,lr".into()
    }
}

fn stage1_log_line(r: &Stage1LogRow, consistency: bool) -> String {
    let mut line = format!("{},{},{},{}", r.step, r.phase, f(r.l_d), f(r.l_s));
    if consistency {
        line.push(',');
        line.push_str(&r.l_con.map(f).unwrap_or_default());
    }
    format!("{line},{}", f(r.lr))
}

/// Trains (or resumes) stage 1 on the train split and writes the checkpoint
/// and loss log to `out`. Stops after `stop_after` steps if given. Returns
/// the step reached.
pub fn cmd_train_stage1(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    overwrite: bool,
    stop_after: Option<usize>,
) -> Result<usize> {
    cfg.validate()?;
    let info = load_dataset_info(dataset)?;
    warn_hash("dataset", &info.config_hash, &cfg.hash());
    let s1cfg = cfg.stage1_config();
    let resume = open_run_dir(out, overwrite, cfg)?;
    let (model, optimizer, start) = match resume {
        Some(ck) => {
            check_kind(&ck, out, STAGE1_KIND)?;
            let mut model = Stage1::new(&s1cfg);
            let names = model.param_names();
            restore(&mut model, &names, &ck, out)?;
            let opt = Optimizer::with_moments(s1cfg.optim, ck.moments.clone());
            log::info!("stage1: resuming at step {}", ck.step);
            (model, Some(opt), ck.step)
        }
        None => (Stage1::new(&s1cfg), None, 0),
    };
    let bundles: Vec<PatchBundle> = load_split(dataset, "train")?.into_iter().map(|d| d.bundle).collect();
    let run = train_stage1_from(model, optimizer, start, stop_after.unwrap_or(usize::MAX), &bundles, &s1cfg)?;
    let step = run.log.last().map(|r| r.step).unwrap_or(start);
    let ck = module_checkpoint(
        STAGE1_KIND,
        cfg,
        run.model.param_names(),
        &run.model,
        &run.optimizer,
        step,
        serde_json::json!({ "stage1_config": s1cfg }),
    );
    save_checkpoint(out, &ck)?;
    let log_path = out.join(LOSS_LOG);
    let mut text = log_prefix(&log_path, &stage1_log_header(s1cfg.consistency), start, 0)?;
    for r in &run.log {
        text.push_str(&stage1_log_line(r, s1cfg.consistency));
        text.push('\n');
    }
    fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    log::info!("stage1: step {step} of {}", s1cfg.pretrain_steps + s1cfg.joint_steps);
    Ok(step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsMeta {
    pub config_hash: String,
    pub stage1_config_hash: String,
    pub per_category: bool,
    pub models: Vec<String>,
    pub scale_prior: ScalePrior,
}

/// Runs frozen stage 1 over a split.
pub fn stage2_samples(items: Vec<DataItem>, stage1: &Stage1) -> Result<Vec<Stage2Sample>> {
    items
        .into_iter()
        .filter(|d| {
            let keep = d.bundle.mask_count() > 0;
            if !keep {
                log::warn!("skipping {}: empty mask", d.id);
            }
            keep
        })
        .map(|d| Stage2Sample::prepare(d.id, d.category, d.bundle, d.gt, Some(stage1)))
        .collect()
}

pub const STAGE2_LOG_HEADER_PREFIX: &str = "model,step";

pub fn stage2_log_header() -> String {
    format!("{STAGE2_LOG_HEADER_PREFIX},{},total,lr", LOSS_NAMES.join(","))
}

fn stage2_log_line(r: &Stage2LogRow) -> String {
    let parts: Vec<String> = r.parts.iter().map(|v| f(*v)).collect();
    format!("{},{},{},{},{}", r.model, r.step, parts.join(","), f(r.total), f(r.lr))
}

fn load_stage2_model(dir: &Path, cfg: Option<&ModelConfig>) -> Result<(TransNet, Checkpoint, Option<Category>)> {
    let ck = load_checkpoint(dir)?;
    check_kind(&ck, dir, STAGE2_KIND)?;
    let mc: ModelConfig = extra_field(&ck, dir, "model_config")?;
    if let Some(want) = cfg {
        if *want != mc {
            return Err(Error::Config(format!("{}: model dimensions differ from the config", dir.display())));
        }
    }
    let prior: ScalePrior = extra_field(&ck, dir, "scale_prior")?;
    let category: Option<Category> = extra_field(&ck, dir, "category")?;
    let mut net = TransNet::new(mc, prior, 0)?;
    let names = net.param_names();
    restore(&mut net, &names, &ck, dir)?;
    Ok((net, ck, category))
}

/// Trains (or resumes) the pose models on frozen stage-1 outputs. One model
/// per category, or one shared model, lands in `out/<name>/`.
pub fn cmd_train_stage2(
    cfg: &RunConfig,
    dataset: &Path,
    stage1_dir: &Path,
    out: &Path,
    overwrite: bool,
    stop_after: Option<usize>,
) -> Result<usize> {
    cfg.validate()?;
    let s1 = load_stage1(stage1_dir)?;
    warn_hash("stage1 checkpoint", &s1.checkpoint.config_hash, &cfg.hash());
    let info = load_dataset_info(dataset)?;
    warn_hash("dataset", &info.config_hash, &cfg.hash());
    let s2cfg = cfg.stage2_config();
    let fresh = overwrite || !out.join(MODELS_META).is_file();
    if fresh {
        prepare_output_dir(out, overwrite)?;
    } else {
        let meta: ModelsMeta = read_json(&out.join(MODELS_META))?;
        if meta.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "{} holds a run with config hash {}; resume needs the same config (or pass --overwrite)",
                out.display(),
                meta.config_hash
            )));
        }
    }
    let samples = stage2_samples(load_split(dataset, "train")?, &s1.model)?;
    let prior = scale_prior_of(&samples);
    let groups: Vec<(Option<Category>, Vec<&Stage2Sample>)> = if s2cfg.per_category {
        Category::ALL
            .iter()
            .map(|&c| (Some(c), samples.iter().filter(|s| s.category == c).collect::<Vec<_>>()))
            .filter(|(_, v)| !v.is_empty())
            .collect()
    } else {
        vec![(None, samples.iter().collect())]
    };
    let names: Vec<String> = groups.iter().map(|(c, _)| c.map(|c| c.name()).unwrap_or("all").to_string()).collect();
    write_json(
        &out.join(MODELS_META),
        &ModelsMeta {
            config_hash: cfg.hash(),
            stage1_config_hash: s1.checkpoint.config_hash.clone(),
            per_category: s2cfg.per_category,
            models: names.clone(),
            scale_prior: prior,
        },
    )?;
    let log_path = out.join(LOSS_LOG);
    let old_log = if log_path.is_file() && !fresh {
        fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?
    } else {
        String::new()
    };
    let mut text = format!("{}\n", stage2_log_header());
    let mut reached = usize::MAX;
    for ((category, subset), name) in groups.into_iter().zip(&names) {
        let dir = out.join(name);
        let start = if !fresh && dir.join(MANIFEST).is_file() {
            let (net, ck, _) = load_stage2_model(&dir, Some(&s2cfg.model))?;
            let optimizer = Optimizer::with_moments(s2cfg.optim, ck.moments.clone());
            for line in old_log.lines().skip(1) {
                let mut it = line.split(',');
                let (m, s) = (it.next(), it.next().and_then(|v| v.parse::<usize>().ok()));
                if m == Some(name.as_str()) && s.is_some_and(|s| s <= ck.step) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
            log::info!("stage2[{name}]: resuming at step {}", ck.step);
            Some(TrainedModel { category, net, optimizer, step: ck.step })
        } else {
            None
        };
        let (tm, log) = train_model(&subset, &s2cfg, category, prior, start, stop_after.unwrap_or(usize::MAX))?;
        for r in &log {
            text.push_str(&stage2_log_line(r));
            text.push('\n');
        }
        let ck = module_checkpoint(
            STAGE2_KIND,
            cfg,
            tm.net.param_names(),
            &tm.net,
            &tm.optimizer,
            tm.step,
            serde_json::json!({
                "category": category,
                "model_config": s2cfg.model,
                "scale_prior": prior,
            }),
        );
        save_checkpoint(&dir, &ck)?;
        log::info!("stage2[{name}]: step {} of {}", tm.step, s2cfg.steps);
        reached = reached.min(tm.step);
    }
    fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    Ok(reached)
}

/// Loads every pose model of a stage-2 run directory.
pub fn load_stage2(dir: &Path) -> Result<(PoseModels, ModelsMeta, Vec<Checkpoint>)> {
    let meta_path = dir.join(MODELS_META);
    if !meta_path.is_file() {
        return Err(Error::Dependency(format!("no stage-2 models at {}", dir.display())));
    }
    let meta: ModelsMeta = read_json(&meta_path)?;
    let mut models = Vec::new();
    let mut cks = Vec::new();
    for name in &meta.models {
        let (net, ck, category) = load_stage2_model(&dir.join(name), None)?;
        models.push(TrainedModel {
            category,
            net,
            optimizer: Optimizer::new(Default::default()),
            step: ck.step,
        });
        cks.push(ck);
    }
    Ok((PoseModels { models }, meta, cks))
}

fn stage1_rows(stage1: &Stage1, items: &[DataItem]) -> Result<BTreeMap<String, (DepthAccumulator, NormalAccumulator)>> {
    let mut acc: BTreeMap<String, (DepthAccumulator, NormalAccumulator)> = BTreeMap::new();
    for it in items.iter().filter(|d| d.bundle.mask_count() > 0) {
        let (d, n) = stage1.predict(&it.bundle)?;
        for key in [it.category.name(), "all"] {
            let e = acc.entry(key.to_string()).or_default();
            e.0.add(&d, &it.bundle.depth_gt, &it.bundle.mask)?;
            e.1.add(&n, &it.bundle.normal_gt, &it.bundle.mask)?;
        }
    }
    Ok(acc)
}

/// Evaluates stage 1 and stage 2 on the test split and writes
/// `report.csv` and `report.json` into `out`.
pub fn cmd_eval(cfg: &RunConfig, dataset: &Path, stage1_dir: &Path, stage2_dir: &Path, out: &Path) -> Result<MetricReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let s1 = load_stage1(stage1_dir)?;
    let (models, _meta, cks) = load_stage2(stage2_dir)?;
    let mut mismatch = warn_hash("stage1 checkpoint", &s1.checkpoint.config_hash, &hash);
    for ck in &cks {
        mismatch |= warn_hash("stage2 checkpoint", &ck.config_hash, &hash);
    }
    let items = load_split(dataset, "test")?;
    let pixel = stage1_rows(&s1.model, &items)?;
    let n_points = models.models.first().map(|m| m.net.config.n_points).unwrap_or(cfg.n_points);
    let samples = stage2_samples(items, &s1.model)?;
    let est = predict_all(&models, &samples, n_points, derive_seed(cfg.seed, EVAL_STREAM))?;
    let poses: Vec<Pose> = est.iter().map(|e| e.pose()).collect();
    let gts: Vec<Pose> = samples.iter().map(|s| s.gt).collect();
    let mut report = evaluate(&records(&samples, &poses), &records(&samples, &gts))?;
    for row in report.rows.iter_mut() {
        if let Some((d, n)) = pixel.get(&row.category) {
            row.depth = Some(d.finish()?);
            row.normal = Some(n.finish()?);
        }
    }
    report.config_hash = hash;
    report.seed = cfg.seed;
    report.dataset_hash = hash_tree(dataset)?;
    report.config_hash_mismatch = mismatch;
    write_report(&report, out)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let path = out.join(PREDICTIONS_CSV);
    fs::write(&path, predictions_csv(&ids, &poses)).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

pub fn write_report(report: &MetricReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join(REPORT_CSV);
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let json = out.join(REPORT_JSON);
    fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))
}

/// One trial of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub trial: usize,
    pub consistency: bool,
    pub normal: bool,
    pub ray: bool,
    pub gpc_width: usize,
    pub pose: ReportRow,
}

/// Trial configs of the toggle grid: trial 0 has every listed toggle on,
/// later trials count down in binary with the first toggle most significant.
pub fn ablation_grid(cfg: &RunConfig) -> Vec<RunConfig> {
    let k = cfg.ablate.len();
    (0..1usize << k)
        .map(|t| {
            let mut c = cfg.clone();
            for (i, name) in cfg.ablate.iter().enumerate() {
                let on = (t >> (k - 1 - i)) & 1 == 0;
                match name.as_str() {
                    "consistency" => c.consistency = on,
                    "normal" => c.channels.normal = on,
                    "ray" => c.channels.ray = on,
                    _ => unreachable!("validated toggle"),
                }
            }
            c
        })
        .collect()
}

pub const ABLATION_COLUMNS: [&str; 16] = [
    "trial",
    "consistency",
    "normal",
    "ray",
    "gpc_width",
    "3D_25",
    "3D_50",
    "3D_75",
    "5deg5cm",
    "10deg5cm",
    "10deg10cm",
    "rot_err_deg",
    "trans_err_cm",
    "depth_rmse",
    "normal_mean_deg",
    "config_hash",
];

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn ablation_csv(rows: &[AblationRow], hashes: &[String]) -> String {
    let mut s = format!("{}\n", ABLATION_COLUMNS.join(","));
    for (r, h) in rows.iter().zip(hashes) {
        let p = &r.pose;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.trial,
            on_off(r.consistency),
            on_off(r.normal),
            on_off(r.ray),
            r.gpc_width,
            p.iou_25,
            p.iou_50,
            p.iou_75,
            p.deg5_cm5,
            p.deg10_cm5,
            p.deg10_cm10,
            p.rot_err_deg,
            p.trans_err_cm,
            p.depth.map(|d| d.rmse).unwrap_or(f64::NAN),
            p.normal.map(|n| n.mean_deg).unwrap_or(f64::NAN),
            h
        );
    }
    s
}

/// Trains and evaluates every trial of the toggle grid under `out/trial_XX`
/// and writes `ablation.csv`. Trials that share a stage-1 configuration
/// share one stage-1 run.
pub fn cmd_ablate(cfg: &RunConfig, dataset: &Path, out: &Path, overwrite: bool) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    load_dataset_info(dataset)?;
    prepare_output_dir(out, overwrite)?;
    let mut stage1_runs: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut hashes = Vec::new();
    for (t, tc) in ablation_grid(cfg).into_iter().enumerate() {
        let dir = out.join(format!("trial_{t:02}"));
        let s1key = serde_json::to_string(&tc.stage1_config()).expect("config serializes");
        let s1dir = match stage1_runs.get(&s1key) {
            Some(d) => d.clone(),
            None => {
                let d = dir.join("stage1");
                cmd_train_stage1(&tc, dataset, &d, false, None)?;
                stage1_runs.insert(s1key, d.clone());
                d
            }
        };
        let s2dir = dir.join("stage2");
        cmd_train_stage2(&tc, dataset, &s1dir, &s2dir, false, None)?;
        let report = cmd_eval(&tc, dataset, &s1dir, &s2dir, &dir.join("eval"))?;
        let pose = report
            .row("all")
            .cloned()
            .ok_or_else(|| Error::Contract("report has no overall row".into()))?;
        log::info!("ablation trial {t}: 10deg10cm = {:.3}", pose.deg10_cm10);
        rows.push(AblationRow {
            trial: t,
            consistency: tc.consistency,
            normal: tc.channels.normal,
            ray: tc.channels.ray,
            gpc_width: tc.channels.gpc_width(),
            pose,
        });
        hashes.push(tc.hash());
    }
    let path = out.join(ABLATION_CSV);
    fs::write(&path, ablation_csv(&rows, &hashes)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Pose estimates as a CSV of row-major rotation, translation and extents.
pub fn predictions_csv(ids: &[String], poses: &[Pose]) -> String {
    let mut s = String::from("id,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz,sx,sy,sz\n");
    for (id, p) in ids.iter().zip(poses) {
        let r = p.r;
        let vals: Vec<String> = (0..3)
            .flat_map(|i| (0..3).map(move |j| r[(i, j)]))
            .chain(p.t.iter().copied())
            .chain(p.s.iter().copied())
            .map(f)
            .collect();
        let _ = writeln!(s, "{id},{}", vals.join(","));
    }
    s
}

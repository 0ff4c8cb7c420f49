//! Experiment configuration and the `train`, `eval`, `sweep` and `landscape` commands.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_mnist, load_mvtec_category, make_one_class_task, ADTask, ColorMode, PreprocessOp};
use crate::error::{Error, Result};
use crate::eval::{evaluate_task, EvalReport};
use crate::landscape::{
    encoder_probe_train, infer_classes, loss_grid, random_direction, reconstruction_loss, sharpness_index,
    LandscapeGrid, Normalization, ProbeModel,
};
use crate::losses::{LampConfig, LossSpec, Reduction};
use crate::model::{AEConfig, AEModel, Parameterized};
use crate::optim::{train_with_optimizer, Optimizer, OptimizerConfig, OptimizerKind, TrainConfig, TrainHistory};
use crate::tensor::{Element, Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Mvtec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandscapeMode {
    /// The autoencoder under its own training loss.
    #[default]
    Reconstruction,
    /// The encoder plus a linear classifier under cross-entropy.
    Probe,
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $val:expr;)*) => {
        $(fn $name() -> $ty { $val })*
    };
}

defaults! {
    d_dataset: DatasetKind = DatasetKind::Mnist;
    d_data_dir: PathBuf = PathBuf::from("data/mnist");
    d_pad_to: Option<usize> = Some(32);
    d_target_size: usize = 256;
    d_color: ColorMode = ColorMode::Rgb;
    d_depth: usize = 4;
    d_kernel: usize = 3;
    d_slope: f64 = 0.2;
    d_patches: usize = 1;
    d_loss: LossSpec = LossSpec::new(crate::losses::BaseLoss::L2, false);
    d_epsilon: f64 = 0.01;
    d_optimizer: OptimizerKind = OptimizerKind::Adam;
    d_lr: f64 = 1e-3;
    d_rho: f64 = 0.9;
    d_beta1: f64 = 0.9;
    d_beta2: f64 = 0.999;
    d_eps: f64 = 1e-8;
    d_epochs: usize = 20;
    d_batch: usize = 128;
    d_true: bool = true;
    d_out: PathBuf = PathBuf::from("runs/default");
    d_res: usize = 51;
    d_range: (f64, f64) = (-1.0, 1.0);
    d_dims: usize = 1;
    d_lseeds: Vec<u64> = vec![0];
    d_lsamples: usize = 1024;
    d_probe_epochs: usize = 20;
    d_probe_samples: usize = 1024;
}

/// Flat experiment description; every key has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_dataset")]
    pub dataset: DatasetKind,
    #[serde(default = "d_data_dir")]
    pub data_dir: PathBuf,
    /// MNIST normal digit.
    #[serde(default)]
    pub normal_class: u8,
    /// MVTec category folder.
    #[serde(default)]
    pub category: Option<String>,
    /// MVTec images are resized to this square size.
    #[serde(default = "d_target_size")]
    pub target_size: usize,
    #[serde(default = "d_color")]
    pub color: ColorMode,
    /// Zero-pads MNIST digits to this square size.
    #[serde(default = "d_pad_to")]
    pub pad_to: Option<usize>,
    #[serde(default)]
    pub max_train: Option<usize>,
    #[serde(default)]
    pub max_test: Option<usize>,

    #[serde(default = "d_depth")]
    pub depth: usize,
    /// Defaults to 16 at depth 4 and 32 at depth 6.
    #[serde(default)]
    pub base_width: Option<usize>,
    #[serde(default = "d_kernel")]
    pub kernel_size: usize,
    #[serde(default = "d_slope")]
    pub leaky_slope: f64,
    #[serde(default = "d_patches")]
    pub patches: usize,

    #[serde(default = "d_loss")]
    pub loss: LossSpec,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default = "d_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub precision: Precision,

    #[serde(default = "d_out")]
    pub out: PathBuf,

    /// Task axis: digits for MNIST, categories for MVTec. Empty means the configured task.
    #[serde(default)]
    pub sweep_tasks: Vec<String>,
    #[serde(default)]
    pub sweep_losses: Vec<LossSpec>,
    #[serde(default)]
    pub sweep_optimizers: Vec<OptimizerKind>,
    #[serde(default)]
    pub sweep_batch_sizes: Vec<usize>,
    /// Empty means `[seed]`.
    #[serde(default)]
    pub sweep_seeds: Vec<u64>,

    #[serde(default = "d_res")]
    pub landscape_resolution: usize,
    #[serde(default = "d_range")]
    pub landscape_range: (f64, f64),
    #[serde(default = "d_dims")]
    pub landscape_dims: usize,
    #[serde(default = "d_lseeds")]
    pub landscape_seeds: Vec<u64>,
    #[serde(default = "d_lsamples")]
    pub landscape_samples: usize,
    #[serde(default)]
    pub landscape_normalization: Normalization,
    #[serde(default)]
    pub landscape_mode: LandscapeMode,
    #[serde(default = "d_probe_epochs")]
    pub probe_epochs: usize,
    #[serde(default = "d_probe_samples")]
    pub probe_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub loss: Option<String>,
    pub optimizer: Option<String>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.loss {
            self.loss = v.parse().map_err(|e: Error| Error::config("loss", e.to_string()))?;
        }
        if let Some(v) = &o.optimizer {
            self.optimizer = v.parse()?;
        }
        if let Some(v) = o.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = o.epochs {
            self.epochs = v;
        }
        Ok(())
    }

    pub fn ae_config(&self, channels: usize, size: (usize, usize)) -> AEConfig {
        let mut c = AEConfig::new(self.depth, channels, size);
        if let Some(w) = self.base_width {
            c.base_width = w;
        }
        c.kernel_size = self.kernel_size;
        c.leaky_slope = self.leaky_slope;
        c.patches = self.patches;
        c
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            rho: self.rho,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }

    pub fn lamp_config(&self) -> LampConfig {
        LampConfig {
            epsilon: self.epsilon,
            reduction: self.reduction,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            loss: self.loss,
            lamp: self.lamp_config(),
            optimizer: self.optimizer_config(),
            patches: self.patches,
            shuffle: self.shuffle,
        }
    }

    /// Field-level checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if !self.data_dir.exists() {
            return Err(Error::config(
                "data_dir",
                format!("{} does not exist", self.data_dir.display()),
            ));
        }
        if self.dataset == DatasetKind::Mvtec && self.category.is_none() && self.sweep_tasks.is_empty() {
            return Err(Error::config("category", "required for the mvtec dataset"));
        }
        if self.dataset == DatasetKind::Mnist && self.normal_class > 9 {
            return Err(Error::config("normal_class", "must be a digit 0-9"));
        }
        if self.target_size == 0 {
            return Err(Error::config("target_size", "must be positive"));
        }
        if self.landscape_resolution == 0 {
            return Err(Error::config("landscape_resolution", "must be positive"));
        }
        if !(1..=2).contains(&self.landscape_dims) {
            return Err(Error::config("landscape_dims", "must be 1 or 2"));
        }
        if self.landscape_seeds.len() < self.landscape_dims {
            return Err(Error::config("landscape_seeds", "need one seed per direction"));
        }
        if self.landscape_samples == 0 {
            return Err(Error::config("landscape_samples", "must be positive"));
        }
        self.train_config().validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything except the output directory.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
        }
        // serde_json maps are ordered by key, so this rendering is canonical.
        let text = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Copy configured for one task of the sweep axis.
    fn for_task(&self, task: &str) -> Result<Self> {
        let mut c = self.clone();
        match self.dataset {
            DatasetKind::Mnist => {
                c.normal_class = task
                    .parse()
                    .map_err(|_| Error::config("sweep_tasks", format!("`{task}` is not a digit")))?;
            }
            DatasetKind::Mvtec => c.category = Some(task.to_string()),
        }
        Ok(c)
    }

    fn task_label(&self) -> String {
        match self.dataset {
            DatasetKind::Mnist => self.normal_class.to_string(),
            DatasetKind::Mvtec => self.category.clone().unwrap_or_default(),
        }
    }
}

/// Builds the configured task in single precision.
pub fn load_task(cfg: &ExperimentConfig) -> Result<ADTask> {
    let mut task = match cfg.dataset {
        DatasetKind::Mnist => {
            let mnist = load_mnist(&cfg.data_dir)?;
            let mut t = make_one_class_task(&mnist, cfg.normal_class)?;
            if let Some(p) = cfg.pad_to {
                t = t.preprocess(&[PreprocessOp::Pad { height: p, width: p }])?;
            }
            t
        }
        DatasetKind::Mvtec => {
            let cat = cfg
                .category
                .as_deref()
                .ok_or_else(|| Error::config("category", "required for the mvtec dataset"))?;
            load_mvtec_category(&cfg.data_dir, cat, (cfg.target_size, cfg.target_size), cfg.color)?
        }
    };
    if let Some(n) = cfg.max_train {
        task.train = task.train.take(n)?;
    }
    if let Some(n) = cfg.max_test {
        task.test = task.test.take(n)?;
    }
    Ok(task)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Resolved configuration stored next to every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub config: ExperimentConfig,
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    pub fingerprint: String,
    pub out: PathBuf,
}

pub const MODEL_BASE: &str = "model";
pub const OPTIMIZER_FILE: &str = "optimizer.lampmodel";
pub const HISTORY_FILE: &str = "history.json";
pub const TIMING_FILE: &str = "timing.json";
pub const RUN_FILE: &str = "run.json";

fn train_typed<T: Element>(cfg: &ExperimentConfig, task: &ADTask, fp: &str) -> Result<TrainHistory> {
    let task = task.cast::<T>();
    let (c, h, w) = task.train.sample_shape();
    let mut model = AEModel::<T>::build(cfg.ae_config(c, (h, w)), cfg.seed)?;
    let tc = cfg.train_config();
    let mut opt = Optimizer::new(tc.optimizer.clone())?;
    let mut history = train_with_optimizer(&mut model, &task.train, &tc, &mut opt, |_| {})?;
    history.fingerprint = fp.to_string();
    let base = cfg.out.join(MODEL_BASE);
    model.save(&base)?;
    opt.save(model.params(), &cfg.out.join(OPTIMIZER_FILE))?;
    // Relative to the output directory, so reruns elsewhere write identical files.
    history.model = Some(MODEL_BASE.to_string());
    Ok(history)
}

/// Trains on the configured task and writes a checkpoint into `cfg.out`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = load_task(cfg)?;
    ensure_dir(&cfg.out)?;
    let fp = cfg.fingerprint();
    let history = match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &task, &fp)?,
        Precision::F64 => train_typed::<f64>(cfg, &task, &fp)?,
    };
    write_json(&cfg.out.join(HISTORY_FILE), &history)?;
    write_json(
        &cfg.out.join(TIMING_FILE),
        &serde_json::json!({ "fingerprint": fp, "epoch_seconds": history.epoch_seconds }),
    )?;
    write_json(
        &cfg.out.join(RUN_FILE),
        &RunRecord {
            fingerprint: fp.clone(),
            config: cfg.clone(),
        },
    )?;
    Ok(TrainOutcome {
        history,
        fingerprint: fp,
        out: cfg.out.clone(),
    })
}

pub fn read_run(checkpoint: &Path) -> Result<RunRecord> {
    let path = checkpoint.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn eval_typed<T: Element>(checkpoint: &Path, task: &ADTask, fp: &str) -> Result<EvalReport> {
    let model = AEModel::<T>::load(&checkpoint.join(MODEL_BASE))?;
    let (c, h, w) = task.test.sample_shape();
    let mc = model.config();
    if (mc.input_channels, mc.input_size) != (c, (h, w)) {
        return Err(Error::shape(
            "eval",
            "checkpoint input",
            (mc.input_channels, mc.input_size),
            (c, (h, w)),
        ));
    }
    evaluate_task(&model, &task.cast::<T>(), fp)
}

/// Scores the configured task's test split with the checkpoint in `checkpoint`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let run = read_run(checkpoint)?;
    let task = load_task(cfg)?;
    let report = match run.config.precision {
        Precision::F32 => eval_typed::<f32>(checkpoint, &task, &run.fingerprint)?,
        Precision::F64 => eval_typed::<f64>(checkpoint, &task, &run.fingerprint)?,
    };
    ensure_dir(&cfg.out)?;
    report.save(&cfg.out.join("eval.json"))?;
    Ok(report)
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: String,
    pub loss: String,
    pub optimizer: String,
    pub batch_size: usize,
    pub seed: u64,
    /// Empty for failed cells.
    pub auroc: Option<f64>,
    /// `ok`, or the error message of a failed cell.
    pub status: String,
}

impl SweepRow {
    fn key(&self) -> (String, String, String, usize, u64) {
        (
            self.task.clone(),
            self.loss.clone(),
            self.optimizer.clone(),
            self.batch_size,
            self.seed,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: String,
    pub loss: String,
    pub optimizer: String,
    pub batch_size: usize,
    pub seeds: usize,
    pub auroc_mean: Option<f64>,
}

pub const SWEEP_RESULTS: &str = "results.csv";
pub const SWEEP_AGGREGATE: &str = "aggregate.csv";
pub const SWEEP_META: &str = "sweep.json";

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub aggregate: Vec<AggregateRow>,
    /// Cells run by this invocation (the rest were already recorded).
    pub ran: usize,
}

fn run_cell(cfg: &ExperimentConfig) -> Result<f64> {
    let task = load_task(cfg)?;
    let fp = cfg.fingerprint();
    fn go<T: Element>(cfg: &ExperimentConfig, task: &ADTask, fp: &str) -> Result<f64> {
        let task = task.cast::<T>();
        let (c, h, w) = task.train.sample_shape();
        let mut model = AEModel::<T>::build(cfg.ae_config(c, (h, w)), cfg.seed)?;
        let tc = cfg.train_config();
        let mut opt = Optimizer::new(tc.optimizer.clone())?;
        train_with_optimizer(&mut model, &task.train, &tc, &mut opt, |_| {})?;
        Ok(evaluate_task(&model, &task, fp)?.auroc)
    }
    match cfg.precision {
        Precision::F32 => go::<f32>(cfg, &task, &fp),
        Precision::F64 => go::<f64>(cfg, &task, &fp),
    }
}

fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Runs every (task, loss, optimizer, batch size, seed) cell not yet recorded in `cfg.out`.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    ensure_dir(&cfg.out)?;
    let fp = cfg.fingerprint();
    let meta_path = cfg.out.join(SWEEP_META);
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let old: serde_json::Value = serde_json::from_str(&text)?;
        if old["fingerprint"] != serde_json::Value::String(fp.clone()) {
            return Err(Error::config(
                "out",
                format!("{} holds a sweep with a different configuration", cfg.out.display()),
            ));
        }
    }
    write_json(&meta_path, &serde_json::json!({ "fingerprint": fp, "config": cfg }))?;

    let tasks = if cfg.sweep_tasks.is_empty() { vec![cfg.task_label()] } else { cfg.sweep_tasks.clone() };
    let losses = if cfg.sweep_losses.is_empty() { vec![cfg.loss] } else { cfg.sweep_losses.clone() };
    let opts = if cfg.sweep_optimizers.is_empty() { vec![cfg.optimizer] } else { cfg.sweep_optimizers.clone() };
    let sizes = if cfg.sweep_batch_sizes.is_empty() { vec![cfg.batch_size] } else { cfg.sweep_batch_sizes.clone() };
    let seeds = if cfg.sweep_seeds.is_empty() { vec![cfg.seed] } else { cfg.sweep_seeds.clone() };

    let results = cfg.out.join(SWEEP_RESULTS);
    let mut rows = read_rows(&results)?;
    let done: HashSet<_> = rows.iter().map(SweepRow::key).collect();
    let fresh = !results.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&results)
        .map_err(|e| Error::io(&results, e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    let mut ran = 0;
    for task in &tasks {
        for loss in &losses {
            for opt in &opts {
                for &bs in &sizes {
                    for &seed in &seeds {
                        let mut cell = cfg.for_task(task)?;
                        cell.loss = *loss;
                        cell.optimizer = *opt;
                        cell.batch_size = bs;
                        cell.seed = seed;
                        let mut row = SweepRow {
                            task: task.clone(),
                            loss: loss.to_string(),
                            optimizer: opt.to_string(),
                            batch_size: bs,
                            seed,
                            auroc: None,
                            status: "ok".into(),
                        };
                        if done.contains(&row.key()) {
                            continue;
                        }
                        match run_cell(&cell) {
                            Ok(a) => row.auroc = Some(a),
                            Err(e) => row.status = format!("error: {e}"),
                        }
                        writer.serialize(&row)?;
                        writer.flush().map_err(|e| Error::io(&results, e))?;
                        rows.push(row);
                        ran += 1;
                    }
                }
            }
        }
    }
    drop(writer);

    let aggregate = aggregate_rows(&rows);
    let agg_path = cfg.out.join(SWEEP_AGGREGATE);
    let mut w = csv::Writer::from_path(&agg_path)?;
    for a in &aggregate {
        w.serialize(a)?;
    }
    w.flush().map_err(|e| Error::io(&agg_path, e))?;
    Ok(SweepOutcome { rows, aggregate, ran })
}

/// Mean AUROC over seeds per (task, loss, optimizer, batch size), failed cells excluded.
pub fn aggregate_rows(rows: &[SweepRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, String, usize), Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let key = (r.task.clone(), r.loss.clone(), r.optimizer.clone(), r.batch_size);
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        if let Some(a) = r.auroc {
            entry.push(a);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            AggregateRow {
                task: key.0,
                loss: key.1,
                optimizer: key.2,
                batch_size: key.3,
                seeds: v.len(),
                auroc_mean: (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LandscapeReport {
    pub fingerprint: String,
    pub mode: LandscapeMode,
    pub checkpoints: Vec<String>,
    /// Fingerprints of the runs that produced each checkpoint.
    pub checkpoint_fingerprints: Vec<String>,
    pub grids: Vec<String>,
    pub sharpness: Vec<f64>,
    pub centers: Vec<f64>,
}

fn landscape_typed<T: Element>(
    cfg: &ExperimentConfig,
    run: &RunRecord,
    checkpoint: &Path,
    task: &ADTask,
) -> Result<LandscapeGrid> {
    let model = AEModel::<T>::load(&checkpoint.join(MODEL_BASE))?;
    let range = cfg.landscape_range;
    let res = cfg.landscape_resolution;
    let mut grid = match cfg.landscape_mode {
        LandscapeMode::Reconstruction => {
            let d1 = random_direction(model.params(), cfg.landscape_seeds[0], cfg.landscape_normalization);
            let d2 = (cfg.landscape_dims == 2)
                .then(|| random_direction(model.params(), cfg.landscape_seeds[1], cfg.landscape_normalization));
            let batch = task.train.take(cfg.landscape_samples)?.cast::<T>();
            let spec = run.config.loss;
            let lamp = run.config.lamp_config();
            let mut g = loss_grid(&model, &d1, d2.as_ref(), range, res, |m: &AEModel<T>| {
                reconstruction_loss(m, &batch.pixels, spec, &lamp)
            })?;
            g.meta.loss_kind = spec.to_string();
            g.meta.samples = batch.len();
            g
        }
        LandscapeMode::Probe => {
            if cfg.dataset != DatasetKind::Mnist {
                return Err(Error::config("landscape_mode", "the probe needs multi-class MNIST labels"));
            }
            let mnist = load_mnist(&cfg.data_dir)?;
            let n = cfg.probe_samples.min(mnist.train.classes.len());
            let idx: Vec<usize> = (0..n).collect();
            let mut images: Tensor<f32> = mnist.train.images.select_rows(&idx)?;
            if let Some(p) = cfg.pad_to {
                images = crate::data::preprocess(
                    &crate::data::ImageBatch::new(images, None, vec![String::new(); n], None)?,
                    &[PreprocessOp::Pad { height: p, width: p }],
                )?
                .pixels;
            }
            let images = images.cast::<T>();
            let labels: Vec<usize> = mnist.train.classes[..n].iter().map(|&c| c as usize).collect();
            let mut probe = ProbeModel::from_autoencoder(&model, infer_classes(&labels), cfg.seed)?;
            encoder_probe_train(
                &mut probe,
                &images,
                &labels,
                cfg.probe_epochs,
                cfg.batch_size,
                &cfg.optimizer_config(),
                cfg.seed,
            )?;
            let d1 = random_direction(probe.params(), cfg.landscape_seeds[0], cfg.landscape_normalization);
            let d2 = (cfg.landscape_dims == 2)
                .then(|| random_direction(probe.params(), cfg.landscape_seeds[1], cfg.landscape_normalization));
            let mut g = loss_grid(&probe, &d1, d2.as_ref(), range, res, |p: &ProbeModel<T>| p.loss(&images, &labels))?;
            g.meta.loss_kind = "cross_entropy".into();
            g.meta.samples = n;
            g
        }
    };
    grid.meta.fingerprint = run.fingerprint.clone();
    Ok(grid)
}

/// Landscapes for one checkpoint, or two (paired mode) with shared direction seeds.
pub fn cmd_landscape(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<LandscapeReport> {
    cfg.validate()?;
    if checkpoints.is_empty() || checkpoints.len() > 2 {
        return Err(Error::config("checkpoint", "give one checkpoint, or two for paired mode"));
    }
    let runs: Vec<RunRecord> = checkpoints.iter().map(|c| read_run(c)).collect::<Result<_>>()?;
    if runs.len() == 2 {
        let (a, b) = (&runs[0].config, &runs[1].config);
        let arch = |c: &ExperimentConfig| (c.depth, c.base_width, c.kernel_size, c.patches, c.dataset, c.precision);
        if arch(a) != arch(b) {
            return Err(Error::config("checkpoint", "paired checkpoints have different architectures"));
        }
    }
    let task = load_task(cfg)?;
    ensure_dir(&cfg.out)?;
    let fp = cfg.fingerprint();
    let mut report = LandscapeReport {
        fingerprint: fp.clone(),
        mode: cfg.landscape_mode,
        checkpoints: checkpoints.iter().map(|c| c.display().to_string()).collect(),
        checkpoint_fingerprints: runs.iter().map(|r| r.fingerprint.clone()).collect(),
        grids: Vec::new(),
        sharpness: Vec::new(),
        centers: Vec::new(),
    };
    for (i, (run, ckpt)) in runs.iter().zip(checkpoints).enumerate() {
        let mut grid = match run.config.precision {
            Precision::F32 => landscape_typed::<f32>(cfg, run, ckpt, &task)?,
            Precision::F64 => landscape_typed::<f64>(cfg, run, ckpt, &task)?,
        };
        grid.meta.fingerprint = fp.clone();
        let name = if checkpoints.len() == 1 { "grid".to_string() } else { format!("grid_{i}") };
        let csv_path = cfg.out.join(format!("{name}.csv"));
        grid.write_csv(&csv_path)?;
        grid.write_json(&cfg.out.join(format!("{name}.json")))?;
        report.sharpness.push(sharpness_index(&grid)?);
        report.centers.push(grid.center());
        report.grids.push(csv_path.display().to_string());
    }
    write_json(&cfg.out.join("landscape.json"), &report)?;
    Ok(report)
}

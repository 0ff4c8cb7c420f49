//! SGD, RMSprop and Adam, plus the autoencoder training loop.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::losses::{training_loss, LampConfig, LossSpec};
use crate::model::{patchify, AEModel, Mode, Parameterized};
use crate::params::ParamSet;
use crate::tensor::{Element, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }

    /// Per-parameter state tensors kept by this kind.
    fn slot_names(self) -> &'static [&'static str] {
        match self {
            OptimizerKind::Sgd => &["velocity"],
            OptimizerKind::Rmsprop => &["square_avg"],
            OptimizerKind::Adam => &["m", "v"],
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config("optimizer", format!("unknown optimizer `{other}`"))),
        }
    }
}

fn d_rho() -> f64 {
    0.9
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
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
    /// L2 penalty added to the gradient; off by default.
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm clip; off by default.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        OptimizerConfig {
            kind,
            learning_rate,
            momentum: 0.0,
            rho: d_rho(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: 0.0,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate", format!("{} is not a valid rate", self.learning_rate)));
        }
        let unit = |v: f64, field: &str| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} outside [0, 1)")))
            }
        };
        unit(self.momentum, "momentum")?;
        unit(self.rho, "rho")?;
        unit(self.beta1, "beta1")?;
        unit(self.beta2, "beta2")?;
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Optimizer with lazily created per-parameter state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    slots: Vec<Vec<Tensor<T>>>,
    step: u64,
}

impl<T: Element> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            slots: Vec::new(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// State tensors for parameter `i` (empty before the first step).
    pub fn slots(&self, i: usize) -> &[Tensor<T>] {
        self.slots.get(i).map_or(&[], |s| s.as_slice())
    }

    /// One update of every parameter. `grads` is aligned with `params`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("optimizer step", "gradient count", params.len(), grads.len()));
        }
        for (i, g) in grads.iter().enumerate() {
            match g {
                None => return Err(Error::MissingGrad { name: params.name(i).to_string() }),
                Some(g) if g.shape() != params.tensor(i).shape() => {
                    return Err(Error::shape("optimizer step", params.name(i), params.tensor(i).shape(), g.shape()))
                }
                _ => {}
            }
        }
        if self.slots.is_empty() {
            let n = self.config.kind.slot_names().len();
            self.slots = params
                .iter()
                .map(|(_, t)| vec![Tensor::zeros(t.shape().to_vec()); n])
                .collect();
        } else if self.slots.len() != params.len() {
            return Err(Error::shape("optimizer step", "state count", self.slots.len(), params.len()));
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flatten()
                    .map(|g| g.l2_norm().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let lr = T::from_f64(c.learning_rate);
        let wd = T::from_f64(c.weight_decay);
        let clip = T::from_f64(clip);
        let eps = T::from_f64(c.eps);
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        for (i, grad) in grads.iter().enumerate() {
            let grad = grad.as_ref().unwrap().data();
            let w = params.tensor_mut(i).data_mut();
            let slots = &mut self.slots[i];
            match c.kind {
                OptimizerKind::Sgd => {
                    let mu = T::from_f64(c.momentum);
                    let v = slots[0].data_mut();
                    for k in 0..w.len() {
                        let g = grad[k] * clip + wd * w[k];
                        v[k] = mu * v[k] + g;
                        w[k] = w[k] - lr * v[k];
                    }
                }
                OptimizerKind::Rmsprop => {
                    let rho = T::from_f64(c.rho);
                    let v = slots[0].data_mut();
                    for k in 0..w.len() {
                        let g = grad[k] * clip + wd * w[k];
                        v[k] = rho * v[k] + (T::one() - rho) * g * g;
                        w[k] = w[k] - lr * g / (v[k].sqrt() + eps);
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
                    let (ms, vs) = slots.split_at_mut(1);
                    let m = ms[0].data_mut();
                    let v = vs[0].data_mut();
                    for k in 0..w.len() {
                        let g = grad[k] * clip + wd * w[k];
                        m[k] = b1 * m[k] + (T::one() - b1) * g;
                        v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        w[k] = w[k] - lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// State as named tensors: `step`, then `<slot>/<param>` for each parameter.
    pub fn state_set(&self, params: &ParamSet<T>) -> ParamSet<T> {
        let mut set = ParamSet::new();
        set.push("step", Tensor::scalar(T::from_f64(self.step as f64)));
        for (i, slots) in self.slots.iter().enumerate() {
            for (name, t) in self.config.kind.slot_names().iter().zip(slots) {
                set.push(format!("{name}/{}", params.name(i)), t.clone());
            }
        }
        set
    }

    pub fn load_state_set(&mut self, state: &ParamSet<T>, params: &ParamSet<T>) -> Result<()> {
        let step = state
            .get("step")
            .and_then(|t| t.item())
            .ok_or_else(|| Error::Format("optimizer state has no step counter".into()))?;
        let names = self.config.kind.slot_names();
        let mut slots = Vec::new();
        if state.len() > 1 {
            for (i, (pname, p)) in params.iter().enumerate() {
                let mut s = Vec::new();
                for (k, slot) in names.iter().enumerate() {
                    let idx = 1 + i * names.len() + k;
                    let key = format!("{slot}/{pname}");
                    if idx >= state.len() || state.name(idx) != key || state.tensor(idx).shape() != p.shape() {
                        return Err(Error::Format(format!("optimizer state does not match parameter {pname}")));
                    }
                    s.push(state.tensor(idx).clone());
                }
                slots.push(s);
            }
            if state.len() != 1 + params.len() * names.len() {
                return Err(Error::Format("optimizer state has extra records".into()));
            }
        }
        self.slots = slots;
        self.step = step.as_f64() as u64;
        Ok(())
    }

    pub fn save(&self, params: &ParamSet<T>, path: &Path) -> Result<()> {
        self.state_set(params).save(path)
    }

    pub fn load(config: OptimizerConfig, params: &ParamSet<T>, path: &Path) -> Result<Self> {
        let mut opt = Self::new(config)?;
        opt.load_state_set(&ParamSet::load(path)?, params)?;
        Ok(opt)
    }
}

fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossSpec,
    #[serde(default)]
    pub lamp: LampConfig,
    pub optimizer: OptimizerConfig,
    /// Must agree with the model's patch grid.
    #[serde(default = "one")]
    pub patches: usize,
    #[serde(default = "d_true")]
    pub shuffle: bool,
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn new(loss: LossSpec, optimizer: OptimizerConfig, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            seed,
            loss,
            lamp: LampConfig::default(),
            optimizer,
            patches: 1,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.patches == 0 {
            return Err(Error::config("patches", "must be at least 1"));
        }
        self.lamp.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss_kind: String,
    /// Hash of the configuration that produced this run.
    #[serde(default)]
    pub fingerprint: String,
    /// Mean per-batch training loss for each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    /// Where the trained model was written, when it was.
    #[serde(default)]
    pub model: Option<String>,
    /// Wall-clock seconds per epoch; kept out of the serialized history.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

/// Equality ignores wall-clock timing.
impl PartialEq for TrainHistory {
    fn eq(&self, other: &Self) -> bool {
        self.loss_kind == other.loss_kind
            && self.fingerprint == other.fingerprint
            && self.epoch_losses == other.epoch_losses
            && self.steps == other.steps
            && self.model == other.model
    }
}

/// What a training observer sees after each step's forward pass.
pub struct StepView<'a, T> {
    pub step: usize,
    pub epoch: usize,
    pub input: &'a Tensor<T>,
    pub recon: &'a Tensor<T>,
    pub loss: f64,
}

/// Trains `model` on normal-only `data`.
pub fn train<T: Element>(
    model: &mut AEModel<T>,
    data: &ImageBatch<T>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    train_observed(model, data, config, |_| {})
}

pub fn train_observed<T: Element>(
    model: &mut AEModel<T>,
    data: &ImageBatch<T>,
    config: &TrainConfig,
    observer: impl FnMut(&StepView<'_, T>),
) -> Result<TrainHistory> {
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    train_with_optimizer(model, data, config, &mut opt, observer)
}

/// Training loop driving a caller-owned optimizer, so its state can be saved afterwards.
pub fn train_with_optimizer<T: Element>(
    model: &mut AEModel<T>,
    data: &ImageBatch<T>,
    config: &TrainConfig,
    opt: &mut Optimizer<T>,
    mut observer: impl FnMut(&StepView<'_, T>),
) -> Result<TrainHistory> {
    config.validate()?;
    if config.patches != model.config().patches {
        return Err(Error::config(
            "patches",
            format!("training uses {} but the model expects {}", config.patches, model.config().patches),
        ));
    }
    if let Some(index) = data.first_anomaly() {
        return Err(Error::AnomalousTrainingSample { index });
    }
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut history = TrainHistory {
        loss_kind: config.loss.to_string(),
        ..Default::default()
    };
    let n = data.len();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        if config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let mut x = data.pixels.select_rows(idx)?;
            if config.patches > 1 {
                x = patchify(&x, config.patches)?;
            }
            let mut g = Graph::new();
            let xv = g.input(x);
            let fwd = model.forward(&mut g, xv, Mode::Train)?;
            let loss = training_loss(&mut g, xv, fwd.output, config.loss, &config.lamp)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite { step, value });
            }
            observer(&StepView {
                step,
                epoch,
                input: g.value(xv),
                recon: g.value(fwd.output),
                loss: value,
            });
            g.backward(loss)?;
            let grads: Vec<Option<Tensor<T>>> = fwd.params.iter().map(|&p| g.take_grad(p)).collect();
            opt.step(model.params_mut(), &grads)?;
            total += value;
            batches += 1;
            step += 1;
        }
        history.epoch_losses.push(total / batches as f64);
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    history.steps = opt.steps();
    Ok(history)
}

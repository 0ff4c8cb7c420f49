//! Loss landscapes along filter-normalized random directions, sharpness
//! indices, and the encoder classification probe.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{training_loss, LampConfig, LossSpec};
use crate::model::{patchify, update_running_stats, AEConfig, AEModel, BnState, Mode, Parameterized};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParamSet;
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Filter,
    None,
}

/// One perturbation tensor per model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction<T> {
    pub tensors: Vec<Tensor<T>>,
    pub seed: u64,
    pub normalization: Normalization,
}

/// Gaussian direction; parameters of rank <= 1 (biases, batch-norm) get zeros.
///
/// With filter normalization each slice along the leading axis is rescaled to
/// the norm of the matching slice of the model's weights.
pub fn random_direction<T: Element>(params: &ParamSet<T>, seed: u64, normalization: Normalization) -> Direction<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = params
        .iter()
        .map(|(_, p)| {
            if p.rank() <= 1 {
                return Tensor::zeros(p.shape().to_vec());
            }
            let mut d: Vec<f64> = (0..p.numel()).map(|_| rng.sample(StandardNormal)).collect();
            if normalization == Normalization::Filter {
                let per = p.numel() / p.shape()[0];
                for (ds, ws) in d.chunks_mut(per).zip(p.data().chunks(per)) {
                    let wn = ws.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                    let dn = ds.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let scale = if dn > 0.0 { wn / dn } else { 0.0 };
                    ds.iter_mut().for_each(|v| *v *= scale);
                }
            }
            Tensor::new(p.shape().to_vec(), d.into_iter().map(T::from_f64).collect()).expect("same length")
        })
        .collect();
    Direction {
        tensors,
        seed,
        normalization,
    }
}

impl<T: Element> Direction<T> {
    fn check(&self, params: &ParamSet<T>) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::shape("direction", "parameter count", params.len(), self.tensors.len()));
        }
        for (i, (name, p)) in params.iter().enumerate() {
            if self.tensors[i].shape() != p.shape() {
                return Err(Error::shape("direction", name, p.shape(), self.tensors[i].shape()));
            }
        }
        Ok(())
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub loss_kind: String,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub normalization: Normalization,
    #[serde(default)]
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    /// Absent for a 1-D scan.
    pub betas: Option<Vec<f64>>,
    /// Alpha-major: `values[i * betas.len() + j]` is at `(alphas[i], betas[j])`.
    pub values: Vec<f64>,
    pub meta: GridMeta,
}

impl LandscapeGrid {
    /// Value at the grid point nearest the origin.
    pub fn center(&self) -> f64 {
        let nearest = |v: &[f64]| {
            (0..v.len())
                .min_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
                .unwrap_or(0)
        };
        let i = nearest(&self.alphas);
        match &self.betas {
            Some(b) => self.values[i * b.len() + nearest(b)],
            None => self.values[i],
        }
    }

    /// CSV with columns `alpha,beta,loss`; 1-D scans report `beta = 0`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        w.write_record(["alpha", "beta", "loss"])?;
        let betas = self.betas.clone().unwrap_or_else(|| vec![0.0]);
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in betas.iter().enumerate() {
                let v = self.values[i * betas.len() + j];
                w.write_record([a.to_string(), b.to_string(), v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Evaluates `loss` at `theta + alpha * d1 (+ beta * d2)` for every grid point.
///
/// Each point is evaluated on a displaced copy, so `model` is never modified.
pub fn loss_grid<T, M, F>(
    model: &M,
    d1: &Direction<T>,
    d2: Option<&Direction<T>>,
    range: (f64, f64),
    resolution: usize,
    mut loss: F,
) -> Result<LandscapeGrid>
where
    T: Element,
    M: Parameterized<T> + Clone,
    F: FnMut(&M) -> Result<f64>,
{
    if resolution == 0 {
        return Err(Error::InvalidArgument("grid resolution must be positive".into()));
    }
    let base = model.params();
    d1.check(base)?;
    if let Some(d) = d2 {
        d.check(base)?;
    }
    let alphas = linspace(range.0, range.1, resolution);
    let betas = d2.map(|_| linspace(range.0, range.1, resolution));
    let beta_points = betas.clone().unwrap_or_else(|| vec![0.0]);
    let mut work = model.clone();
    let mut values = Vec::with_capacity(alphas.len() * beta_points.len());
    for &a in &alphas {
        for &b in &beta_points {
            let (ta, tb) = (T::from_f64(a), T::from_f64(b));
            for (i, (_, w)) in work.params_mut().iter_mut().enumerate() {
                let theta = base.tensor(i).data();
                let u = d1.tensors[i].data();
                let out = w.data_mut();
                match d2 {
                    Some(d2) => {
                        let v = d2.tensors[i].data();
                        for k in 0..out.len() {
                            out[k] = theta[k] + ta * u[k] + tb * v[k];
                        }
                    }
                    None => {
                        for k in 0..out.len() {
                            out[k] = theta[k] + ta * u[k];
                        }
                    }
                }
            }
            values.push(loss(&work)?);
        }
    }
    Ok(LandscapeGrid {
        alphas,
        betas,
        values,
        meta: GridMeta {
            seeds: std::iter::once(d1.seed).chain(d2.map(|d| d.seed)).collect(),
            normalization: d1.normalization,
            ..Default::default()
        },
    })
}

/// Mean absolute finite difference along the grid axes per unit coordinate.
pub fn sharpness_index(grid: &LandscapeGrid) -> Result<f64> {
    let na = grid.alphas.len();
    let nb = grid.betas.as_ref().map_or(1, |b| b.len());
    if na < 2 && nb < 2 {
        return Err(Error::InvalidArgument("sharpness needs at least two grid points".into()));
    }
    let at = |i: usize, j: usize| grid.values[i * nb + j];
    let mut total = 0.0;
    let mut count = 0usize;
    if na >= 2 {
        for i in 0..na - 1 {
            let step = (grid.alphas[i + 1] - grid.alphas[i]).abs();
            for j in 0..nb {
                total += (at(i + 1, j) - at(i, j)).abs() / step;
                count += 1;
            }
        }
    }
    if let Some(b) = &grid.betas {
        if nb >= 2 {
            for j in 0..nb - 1 {
                let step = (b[j + 1] - b[j]).abs();
                for i in 0..na {
                    total += (at(i, j + 1) - at(i, j)).abs() / step;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Eval-mode training loss of `model` on a fixed batch.
pub fn reconstruction_loss<T: Element>(
    model: &AEModel<T>,
    images: &Tensor<T>,
    spec: LossSpec,
    lamp: &LampConfig,
) -> Result<f64> {
    let p = model.config().patches;
    let x = if p > 1 { patchify(images, p)? } else { images.clone() };
    let mut g = Graph::new();
    let xv = g.input(x);
    let fwd = model.forward_eval(&mut g, xv)?;
    let loss = training_loss(&mut g, xv, fwd.output, spec, lamp)?;
    Ok(g.value(loss).data()[0].as_f64())
}

/// Autoencoder encoder followed by a flatten and a linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel<T> {
    config: AEConfig,
    classes: usize,
    params: ParamSet<T>,
    bn: Vec<BnState<T>>,
}

impl<T: Element> ProbeModel<T> {
    /// Takes the encoder of `ae` (weights and running statistics) and adds a fresh head.
    pub fn from_autoencoder(ae: &AEModel<T>, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("a probe needs at least 2 classes, got {classes}")));
        }
        let config = ae.config().clone();
        let mut params = ParamSet::new();
        for (name, t) in ae.params().iter().filter(|(n, _)| n.starts_with("enc")) {
            params.push(name, t.clone());
        }
        let (ph, pw) = config.patch_size();
        let d = config.depth;
        let features = config.encoder_widths()[d - 1] * (ph >> d) * (pw >> d);
        let bound = 1.0 / (features as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..classes * features)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        params.push("head.weight", Tensor::new([classes, features], w)?);
        params.push("head.bias", Tensor::zeros([classes]));
        Ok(ProbeModel {
            bn: ae.bn_states()[..d].to_vec(),
            config,
            classes,
            params,
        })
    }

    /// Probe on an untrained encoder built from `seed`.
    pub fn fresh(config: AEConfig, classes: usize, seed: u64) -> Result<Self> {
        Self::from_autoencoder(&AEModel::build(config, seed)?, classes, seed)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn logits(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Var, Vec<Var>, Vec<(usize, Var)>)> {
        let vars: Vec<Var> = self.params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let (h, updates) = AEModel::encode_with(&self.config, &self.params, &vars, &self.bn, g, x, mode)?;
        let s = g.value(h).shape().to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
        let n = self.params.len();
        let out = g.linear(flat, vars[n - 2], vars[n - 1])?;
        Ok((out, vars, updates))
    }

    fn check_labels(&self, images: &Tensor<T>, labels: &[usize]) -> Result<()> {
        if images.shape().first() != Some(&labels.len()) {
            return Err(Error::shape("probe", "labels", images.shape().first().copied().unwrap_or(0), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::InvalidArgument(format!("label {bad} with only {} classes", self.classes)));
        }
        Ok(())
    }

    /// Mean cross-entropy in eval mode.
    pub fn loss(&self, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        self.check_labels(images, labels)?;
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let (logits, _, _) = self.logits(&mut g, x, Mode::Eval)?;
        let l = g.cross_entropy(logits, labels)?;
        Ok(g.value(l).data()[0].as_f64())
    }

    pub fn accuracy(&self, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        self.check_labels(images, labels)?;
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let (logits, _, _) = self.logits(&mut g, x, Mode::Eval)?;
        let hits = g
            .value(logits)
            .data()
            .chunks(self.classes)
            .zip(labels)
            .filter(|(row, &l)| {
                let best = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
                best == l
            })
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

impl<T: Element> Parameterized<T> for ProbeModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

/// Number of classes implied by integer labels.
pub fn infer_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Trains the probe with cross-entropy; returns the mean loss per epoch.
pub fn encoder_probe_train<T: Element>(
    probe: &mut ProbeModel<T>,
    images: &Tensor<T>,
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    probe.check_labels(images, labels)?;
    if epochs == 0 || batch_size == 0 {
        return Err(Error::config("epochs", "epochs and batch size must be positive"));
    }
    let mut opt = Optimizer::new(optimizer.clone())?;
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64)));
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(batch_size) {
            let mut g = Graph::new();
            let x = g.input(images.select_rows(idx)?);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, vars, updates) = probe.logits(&mut g, x, Mode::Train)?;
            let loss = g.cross_entropy(logits, &y)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite { step: batches, value });
            }
            update_running_stats(&g, &updates, &mut probe.bn);
            g.backward(loss)?;
            let grads: Vec<_> = vars.iter().map(|&v| g.take_grad(v)).collect();
            opt.step(&mut probe.params, &grads)?;
            total += value;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}

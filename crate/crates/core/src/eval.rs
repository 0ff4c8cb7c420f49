//! Anomaly scores and AUROC.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ADTask, ImageBatch};
use crate::error::{Error, Result};
use crate::model::{patchify, AEModel};
use crate::tensor::{Element, Tensor};

/// Anything that maps a batch of images to reconstructions of the same shape.
pub trait Reconstructor<T> {
    fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>>;

    /// Side of the patch grid used for scoring.
    fn patches(&self) -> usize {
        1
    }
}

impl<T: Element> Reconstructor<T> for AEModel<T> {
    fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        AEModel::reconstruct(self, images)
    }

    fn patches(&self) -> usize {
        self.config().patches
    }
}

/// Returns its input unchanged.
pub struct Identity;

impl<T: Element> Reconstructor<T> for Identity {
    fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(images.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchAggregation {
    #[default]
    Mean,
    Max,
}

/// Mean squared error per sample, aggregated over patches when `patches > 1`.
pub fn reconstruction_scores<T: Element>(
    y: &Tensor<T>,
    y_hat: &Tensor<T>,
    patches: usize,
    agg: PatchAggregation,
) -> Result<Vec<f64>> {
    if y.shape() != y_hat.shape() {
        return Err(Error::shape("anomaly score", "reconstruction", y.shape(), y_hat.shape()));
    }
    let n = y.shape().first().copied().unwrap_or(0);
    let (a, b) = if patches > 1 {
        (patchify(y, patches)?, patchify(y_hat, patches)?)
    } else {
        (y.clone(), y_hat.clone())
    };
    let per_sample = patches * patches;
    let unit = a.numel() / (n * per_sample).max(1);
    let patch_scores: Vec<f64> = a
        .data()
        .chunks(unit.max(1))
        .zip(b.data().chunks(unit.max(1)))
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(&u, &v)| {
                    let d = u.as_f64() - v.as_f64();
                    d * d
                })
                .sum::<f64>()
                / unit as f64
        })
        .collect();
    Ok(patch_scores
        .chunks(per_sample)
        .map(|s| match agg {
            PatchAggregation::Mean => s.iter().sum::<f64>() / s.len() as f64,
            PatchAggregation::Max => s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect())
}

/// Scores every sample of `images` in eval mode.
pub fn anomaly_scores<T: Element, M: Reconstructor<T> + ?Sized>(
    model: &M,
    images: &Tensor<T>,
    agg: PatchAggregation,
) -> Result<Vec<f64>> {
    let recon = model.reconstruct(images)?;
    reconstruction_scores(images, &recon, model.patches(), agg)
}

/// Score of a single `[C, H, W]` or `[1, C, H, W]` sample.
pub fn anomaly_score<T: Element, M: Reconstructor<T> + ?Sized>(model: &M, sample: &Tensor<T>) -> Result<f64> {
    let mut shape = sample.shape().to_vec();
    if shape.len() == 3 {
        shape.insert(0, 1);
    }
    if shape.first() != Some(&1) {
        return Err(Error::shape("anomaly score", "batch", 1, shape.first().copied().unwrap_or(0)));
    }
    let x = sample.clone().reshape(shape)?;
    Ok(anomaly_scores(model, &x, PatchAggregation::Mean)?[0])
}

/// Mann-Whitney AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", "labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("auroc: NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::InvalidArgument("auroc: labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("auroc needs both normal and anomalous samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub auroc: f64,
    /// Hash of the configuration that produced the model.
    pub fingerprint: String,
    pub samples: Vec<SampleScore>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn evaluate_batch<T: Element, M: Reconstructor<T> + ?Sized>(
    model: &M,
    name: &str,
    test: &ImageBatch<T>,
    fingerprint: &str,
) -> Result<EvalReport> {
    let labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{name}: test set is unlabeled")))?;
    let scores = anomaly_scores(model, &test.pixels, PatchAggregation::Mean)?;
    let auroc = auroc(&scores, labels)?;
    let samples = test
        .ids
        .iter()
        .zip(&scores)
        .zip(labels)
        .map(|((id, &score), &label)| SampleScore {
            id: id.clone(),
            score,
            label,
        })
        .collect();
    Ok(EvalReport {
        task: name.to_string(),
        auroc,
        fingerprint: fingerprint.to_string(),
        samples,
    })
}

pub fn evaluate_task<T: Element, M: Reconstructor<T> + ?Sized>(
    model: &M,
    task: &ADTask<T>,
    fingerprint: &str,
) -> Result<EvalReport> {
    evaluate_batch(model, &task.name, &task.test, fingerprint)
}

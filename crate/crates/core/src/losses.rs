//! Reconstruction losses and loss amplification.
//!
//! Base losses produce a per-element [`LossMap`] with the same shape as the
//! image batch. Amplification first rescales that map by its batch maximum so
//! every element lies in `[0, 1 - eps]`, then replaces each element `x` by
//! `-ln(1 - x)` before reducing. The maximum is a detached constant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    L2,
    L1,
    Ssim,
}

impl BaseLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseLoss::L2 => "l2",
            BaseLoss::L1 => "l1",
            BaseLoss::Ssim => "ssim",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::config("reduction", format!("unknown reduction `{other}`"))),
        }
    }
}

/// A base loss, optionally amplified. Parsed from `l2`, `l1`, `ssim`, each with
/// an optional `.lamp` suffix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LossSpec {
    pub base: BaseLoss,
    pub lamp: bool,
}

impl LossSpec {
    pub const fn new(base: BaseLoss, lamp: bool) -> Self {
        LossSpec { base, lamp }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, lamp) = match s.strip_suffix(".lamp") {
            Some(h) => (h, true),
            None => (s, false),
        };
        let base = match head {
            "l2" => BaseLoss::L2,
            "l1" => BaseLoss::L1,
            "ssim" => BaseLoss::Ssim,
            _ => return Err(Error::config("loss", format!("unknown loss spec `{s}`"))),
        };
        Ok(LossSpec { base, lamp })
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.base.as_str())?;
        if self.lamp {
            f.write_str(".lamp")?;
        }
        Ok(())
    }
}

impl Serialize for LossSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LossSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LampConfig {
    pub epsilon: f64,
    pub reduction: Reduction,
}

impl Default for LampConfig {
    fn default() -> Self {
        LampConfig {
            epsilon: 0.01,
            reduction: Reduction::Sum,
        }
    }
}

impl LampConfig {
    pub fn new(epsilon: f64, reduction: Reduction) -> Result<Self> {
        let c = LampConfig { epsilon, reduction };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config("epsilon", format!("{} is not in (0, 1)", self.epsilon)));
        }
        Ok(())
    }
}

/// Local-statistics parameters for the SSIM map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    /// 11x11 Gaussian window, sigma 1.5, constants for a dynamic range of 1.
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
        }
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// Per-element, nonnegative reconstruction loss with the shape of the batch.
#[derive(Clone, Copy, Debug)]
pub struct LossMap {
    pub values: Var,
    pub base: BaseLoss,
}

fn same_shape<T: Element>(g: &Graph<T>, y: Var, y_hat: Var) -> Result<()> {
    let (a, b) = (g.value(y).shape(), g.value(y_hat).shape());
    if a != b {
        return Err(Error::shape("loss", "reconstruction shape", a, b));
    }
    Ok(())
}

/// `(y - y_hat)^2`.
pub fn l2_map<T: Element>(g: &mut Graph<T>, y: Var, y_hat: Var) -> Result<LossMap> {
    same_shape(g, y, y_hat)?;
    let d = g.sub(y, y_hat)?;
    Ok(LossMap {
        values: g.square(d)?,
        base: BaseLoss::L2,
    })
}

/// `|y - y_hat|`.
pub fn l1_map<T: Element>(g: &mut Graph<T>, y: Var, y_hat: Var) -> Result<LossMap> {
    same_shape(g, y, y_hat)?;
    let d = g.sub(y, y_hat)?;
    Ok(LossMap {
        values: g.abs(d)?,
        base: BaseLoss::L1,
    })
}

/// `(1 - SSIM_local) / 2` per pixel and channel, using Gaussian-weighted local
/// statistics with reflect padding.
pub fn ssim_map<T: Element>(
    g: &mut Graph<T>,
    y: Var,
    y_hat: Var,
    params: &SsimParams,
) -> Result<LossMap> {
    same_shape(g, y, y_hat)?;
    let shape = g.value(y).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("ssim_map", "rank", 4, shape.len()));
    }
    if shape[2] < params.window || shape[3] < params.window {
        return Err(Error::shape(
            "ssim_map",
            "image size",
            format!(">= {} window", params.window),
            [shape[2], shape[3]],
        ));
    }
    let kernel: Vec<T> = gaussian_window(params.window, params.sigma)
        .into_iter()
        .map(T::from_f64)
        .collect();
    let c1 = T::from_f64(params.c1);
    let c2 = T::from_f64(params.c2);

    let mu_x = g.blur(y, &kernel)?;
    let mu_y = g.blur(y_hat, &kernel)?;
    let xx = g.square(y)?;
    let yy = g.square(y_hat)?;
    let xy = g.mul(y, y_hat)?;
    let e_xx = g.blur(xx, &kernel)?;
    let e_yy = g.blur(yy, &kernel)?;
    let e_xy = g.blur(xy, &kernel)?;

    let mu_xx = g.square(mu_x)?;
    let mu_yy = g.square(mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;
    let var_x = g.sub(e_xx, mu_xx)?;
    let var_y = g.sub(e_yy, mu_yy)?;
    let cov = g.sub(e_xy, mu_xy)?;

    // Terms are ordered so that y == y_hat gives numerator == denominator exactly.
    let two = T::from_f64(2.0);
    let mean_num = g.scalar_mul(mu_xy, two);
    let mean_num = g.add_scalar(mean_num, c1);
    let mean_den = g.add(mu_xx, mu_yy)?;
    let mean_den = g.add_scalar(mean_den, c1);
    let cov_num = g.scalar_mul(cov, two);
    let cov_num = g.add_scalar(cov_num, c2);
    let var_den = g.add(var_x, var_y)?;
    let var_den = g.add_scalar(var_den, c2);

    let num = g.mul(mean_num, cov_num)?;
    let den = g.mul(mean_den, var_den)?;
    let ssim = g.div(num, den)?;
    let half = T::from_f64(0.5);
    let loss = g.scalar_mul(ssim, -half);
    let loss = g.add_scalar(loss, half);
    Ok(LossMap {
        values: g.clamp(loss, T::zero(), T::one())?,
        base: BaseLoss::Ssim,
    })
}

pub fn base_map<T: Element>(g: &mut Graph<T>, y: Var, y_hat: Var, base: BaseLoss) -> Result<LossMap> {
    match base {
        BaseLoss::L2 => l2_map(g, y, y_hat),
        BaseLoss::L1 => l1_map(g, y, y_hat),
        BaseLoss::Ssim => ssim_map(g, y, y_hat, &SsimParams::default()),
    }
}

/// Rescales a loss map by its (detached) maximum so the largest element is
/// exactly `1 - epsilon`. An all-zero map is returned unchanged.
pub fn scale_loss_map<T: Element>(g: &mut Graph<T>, map: LossMap, epsilon: f64) -> Result<LossMap> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::config("epsilon", format!("{epsilon} is not in (0, 1)")));
    }
    let m = g
        .value(map.values)
        .max_value()
        .ok_or(Error::EmptyReduction { op: "scale_loss_map" })?;
    if !(m > T::zero()) {
        return Ok(map);
    }
    let factor = T::one() - T::from_f64(epsilon);
    Ok(LossMap {
        values: g.scale_by_const(map.values, m, factor),
        base: map.base,
    })
}

fn reduce<T: Element>(g: &mut Graph<T>, x: Var, reduction: Reduction) -> Result<Var> {
    match reduction {
        Reduction::Sum => g.sum(x, None),
        Reduction::Mean => g.mean(x, None),
    }
}

/// Elementwise `-ln(1 - x)`.
pub fn amplify<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let neg = g.neg(x)?;
    let one_minus = g.add_scalar(neg, T::one());
    let log = g.log(one_minus)?;
    g.neg(log)
}

/// Amplified loss: base map, max-scaling, `-ln(1 - .)`, then reduction.
pub fn lamp_loss<T: Element>(
    g: &mut Graph<T>,
    y: Var,
    y_hat: Var,
    base: BaseLoss,
    config: &LampConfig,
) -> Result<Var> {
    config.validate()?;
    let map = base_map(g, y, y_hat, base)?;
    let scaled = scale_loss_map(g, map, config.epsilon)?;
    let amplified = amplify(g, scaled.values)?;
    reduce(g, amplified, config.reduction)
}

/// Plain reduced base loss, the control arm for [`lamp_loss`].
pub fn base_loss<T: Element>(
    g: &mut Graph<T>,
    y: Var,
    y_hat: Var,
    base: BaseLoss,
    reduction: Reduction,
) -> Result<Var> {
    let map = base_map(g, y, y_hat, base)?;
    reduce(g, map.values, reduction)
}

/// Dispatches on `spec` to [`lamp_loss`] or [`base_loss`].
pub fn training_loss<T: Element>(
    g: &mut Graph<T>,
    y: Var,
    y_hat: Var,
    spec: LossSpec,
    config: &LampConfig,
) -> Result<Var> {
    if spec.lamp {
        lamp_loss(g, y, y_hat, spec.base, config)
    } else {
        base_loss(g, y, y_hat, spec.base, config.reduction)
    }
}

pub fn cross_entropy<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

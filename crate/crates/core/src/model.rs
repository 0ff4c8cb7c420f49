//! Convolutional autoencoder without skip connections.
//!
//! Encoder layer: `conv(stride 2) -> batch norm -> leaky ReLU`.
//! Decoder layer: `nearest 2x upsample -> conv(stride 1) -> batch norm -> leaky ReLU`,
//! except the last decoder layer, which ends in a sigmoid instead.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{nchw, BatchNormMode, Element, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Samples per graph when reconstructing in eval mode.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn default_cap() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AEConfig {
    /// Layers per side: 4 for low-resolution inputs, 6 otherwise.
    pub depth: usize,
    pub input_channels: usize,
    /// Full image size (H, W).
    pub input_size: (usize, usize),
    pub kernel_size: usize,
    /// Channels of the first encoder layer; doubles per layer up to `width_cap`.
    pub base_width: usize,
    #[serde(default = "default_cap")]
    pub width_cap: usize,
    pub leaky_slope: f64,
    /// Side of the non-overlapping patch grid; 1 reconstructs whole images.
    pub patches: usize,
    #[serde(default)]
    pub skip_connections: bool,
}

impl AEConfig {
    /// Defaults for a given depth: base width 16 at depth 4, 32 at depth 6.
    pub fn new(depth: usize, input_channels: usize, input_size: (usize, usize)) -> Self {
        AEConfig {
            depth,
            input_channels,
            input_size,
            kernel_size: 3,
            base_width: if depth >= 6 { 32 } else { 16 },
            width_cap: default_cap(),
            leaky_slope: 0.2,
            patches: 1,
            skip_connections: false,
        }
    }

    /// Spatial size seen by the network (the patch size when `patches > 1`).
    pub fn patch_size(&self) -> (usize, usize) {
        (self.input_size.0 / self.patches.max(1), self.input_size.1 / self.patches.max(1))
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_width << i).min(self.width_cap))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth != 4 && self.depth != 6 {
            return Err(Error::config("depth", format!("{} is not 4 or 6", self.depth)));
        }
        if self.skip_connections {
            return Err(Error::config("skip_connections", "skip connections are not supported"));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("kernel_size", format!("{} must be odd", self.kernel_size)));
        }
        if self.input_channels == 0 || self.base_width == 0 || self.width_cap == 0 {
            return Err(Error::config("base_width", "channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::config("leaky_slope", format!("{} outside [0, 1)", self.leaky_slope)));
        }
        if self.patches == 0 {
            return Err(Error::config("patches", "must be at least 1"));
        }
        let (h, w) = self.input_size;
        if h % self.patches != 0 || w % self.patches != 0 {
            return Err(Error::config(
                "patches",
                format!("input {h}x{w} is not divisible into a {0}x{0} grid", self.patches),
            ));
        }
        let (ph, pw) = self.patch_size();
        let unit = 1usize << self.depth;
        if ph == 0 || pw == 0 || ph % unit != 0 || pw % unit != 0 {
            return Err(Error::config(
                "input_size",
                format!("network input {ph}x{pw} must be divisible by 2^{} = {unit}", self.depth),
            ));
        }
        Ok(())
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub batches: u64,
}

impl<T: Element> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            batches: 0,
        }
    }

    fn eval_mode(&self) -> Result<BatchNormMode<T>> {
        if self.batches == 0 {
            return Err(Error::UninitializedBatchNorm);
        }
        Ok(BatchNormMode::Eval {
            mean: self.mean.clone(),
            var: self.var.clone(),
            eps: T::from_f64(BN_EPS),
        })
    }

    /// Momentum update from biased batch statistics over `count` elements per channel.
    fn update(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let m = BN_MOMENTUM;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for c in 0..self.mean.len() {
            let rm = self.mean[c].as_f64();
            let rv = self.var[c].as_f64();
            self.mean[c] = T::from_f64((1.0 - m) * rm + m * mean[c]);
            self.var[c] = T::from_f64((1.0 - m) * rv + m * var[c] * unbias);
        }
        self.batches += 1;
    }
}

/// Models with a named parameter set that can be displaced or optimized.
pub trait Parameterized<T> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
}

/// One conv block's graph handles.
pub(crate) struct BlockVars {
    pub weight: Var,
    pub bias: Var,
    pub norm: Option<(Var, Var)>,
}

/// Records `conv -> [bn -> leaky relu]` and returns (output, bn node).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_block<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    vars: &BlockVars,
    stride: usize,
    pad: usize,
    bn: Option<&BnState<T>>,
    mode: Mode,
    slope: T,
) -> Result<(Var, Option<Var>)> {
    let y = g.conv2d(x, vars.weight, Some(vars.bias), stride, pad)?;
    let Some((gamma, beta)) = vars.norm else {
        return Ok((y, None));
    };
    let bn_mode = match mode {
        Mode::Train => BatchNormMode::Train { eps: T::from_f64(BN_EPS) },
        Mode::Eval => bn.ok_or(Error::UninitializedBatchNorm)?.eval_mode()?,
    };
    let normed = g.batchnorm2d(y, gamma, beta, bn_mode)?;
    let act = g.leaky_relu(normed, slope)?;
    Ok((act, (mode == Mode::Train).then_some(normed)))
}

/// Applies train-mode batch statistics recorded in `g` to running state.
pub(crate) fn update_running_stats<T: Element>(
    g: &Graph<T>,
    updates: &[(usize, Var)],
    states: &mut [BnState<T>],
) {
    for &(i, node) in updates {
        if let Some((mean, var)) = g.batchnorm_stats(node) {
            let shape = g.value(node).shape();
            let count = shape[0] * shape[2] * shape[3];
            states[i].update(mean, var, count);
        }
    }
}

/// Graph handles for one forward pass.
pub struct Forward {
    pub output: Var,
    /// Parameter leaves, aligned with the model's [`ParamSet`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AEModel<T> {
    config: AEConfig,
    params: ParamSet<T>,
    bn: Vec<BnState<T>>,
}

fn kaiming_uniform<T: Element>(rng: &mut ChaCha8Rng, shape: [usize; 4], slope: f64) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let bound = gain * (3.0 / fan_in).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl<T: Element> AEModel<T> {
    /// Builds a freshly initialized autoencoder; identical seeds give identical weights.
    pub fn build(config: AEConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;
        let widths = config.encoder_widths();
        let mut params = ParamSet::new();
        let mut bn = Vec::new();
        let mut add_layer = |name: String, cin: usize, cout: usize, norm: bool, params: &mut ParamSet<T>| {
            params.push(
                format!("{name}.weight"),
                kaiming_uniform(&mut rng, [cout, cin, k, k], config.leaky_slope),
            );
            params.push(format!("{name}.bias"), Tensor::zeros([cout]));
            if norm {
                params.push(format!("{name}.bn.gamma"), Tensor::full([cout], T::one()));
                params.push(format!("{name}.bn.beta"), Tensor::zeros([cout]));
                bn.push(BnState::new(cout));
            }
        };
        let mut cin = config.input_channels;
        for (i, &w) in widths.iter().enumerate() {
            add_layer(format!("enc{i}"), cin, w, true, &mut params);
            cin = w;
        }
        for j in 0..config.depth {
            let last = j + 1 == config.depth;
            let cout = if last {
                config.input_channels
            } else {
                widths[config.depth - 2 - j]
            };
            add_layer(format!("dec{j}"), cin, cout, !last, &mut params);
            cin = cout;
        }
        Ok(AEModel { config, params, bn })
    }

    pub fn config(&self) -> &AEConfig {
        &self.config
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }

    pub(crate) fn block_vars(params: &ParamSet<T>, vars: &[Var], name: &str) -> Result<BlockVars> {
        let find = |suffix: &str| {
            params
                .index_of(&format!("{name}.{suffix}"))
                .map(|i| vars[i])
                .ok_or_else(|| Error::Format(format!("missing parameter {name}.{suffix}")))
        };
        let norm = match (find("bn.gamma"), find("bn.beta")) {
            (Ok(g), Ok(b)) => Some((g, b)),
            _ => None,
        };
        Ok(BlockVars {
            weight: find("weight")?,
            bias: find("bias")?,
            norm,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = nchw("autoencoder", shape)?;
        let (ph, pw) = self.config.patch_size();
        if c != self.config.input_channels {
            return Err(Error::shape("autoencoder", "channels", self.config.input_channels, c));
        }
        if (h, w) != (ph, pw) {
            return Err(Error::shape("autoencoder", "spatial size", (ph, pw), (h, w)));
        }
        Ok(())
    }

    /// Records the encoder on `g`; returns (latent, train-mode bn nodes).
    pub(crate) fn encode_with(
        config: &AEConfig,
        params: &ParamSet<T>,
        vars: &[Var],
        bn: &[BnState<T>],
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<(usize, Var)>)> {
        let pad = (config.kernel_size - 1) / 2;
        let slope = T::from_f64(config.leaky_slope);
        let mut h = x;
        let mut updates = Vec::new();
        for i in 0..config.depth {
            let bv = Self::block_vars(params, vars, &format!("enc{i}"))?;
            let (out, node) = conv_block(g, h, &bv, 2, pad, bn.get(i), mode, slope)?;
            if let Some(node) = node {
                updates.push((i, node));
            }
            h = out;
        }
        Ok((h, updates))
    }

    fn run(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Forward, Vec<(usize, Var)>)> {
        self.check_input(g.value(x).shape())?;
        let vars: Vec<Var> = self.params.iter().map(|(_, t)| g.param(t.clone())).collect();
        let (mut h, mut updates) =
            Self::encode_with(&self.config, &self.params, &vars, &self.bn, g, x, mode)?;
        let pad = (self.config.kernel_size - 1) / 2;
        let slope = T::from_f64(self.config.leaky_slope);
        for j in 0..self.config.depth {
            let bv = Self::block_vars(&self.params, &vars, &format!("dec{j}"))?;
            let up = g.upsample_nearest2x(h)?;
            let bn_index = self.config.depth + j;
            let (out, node) = conv_block(g, up, &bv, 1, pad, self.bn.get(bn_index), mode, slope)?;
            if let Some(node) = node {
                updates.push((bn_index, node));
            }
            h = out;
        }
        let output = g.sigmoid(h)?;
        Ok((Forward { output, params: vars }, updates))
    }

    /// Records a forward pass. Train mode normalizes with batch statistics and
    /// updates the running statistics; eval mode uses the running statistics.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Forward> {
        let (fwd, updates) = self.run(g, x, mode)?;
        update_running_stats(g, &updates, &mut self.bn);
        Ok(fwd)
    }

    /// Eval-mode forward pass; leaves the model untouched.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var) -> Result<Forward> {
        Ok(self.run(g, x, Mode::Eval)?.0)
    }

    /// Eval-mode reconstruction of full images, tiling into patches when configured.
    pub fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.config.patches;
        let input = if p > 1 { patchify(images, p)? } else { images.clone() };
        self.check_input(input.shape())?;
        let n = input.shape()[0];
        let mut data = Vec::with_capacity(input.numel());
        let mut first = 0;
        while first < n {
            let idx: Vec<usize> = (first..(first + EVAL_CHUNK).min(n)).collect();
            let mut g = Graph::new();
            let x = g.input(input.select_rows(&idx)?);
            let fwd = self.forward_eval(&mut g, x)?;
            data.extend_from_slice(g.value(fwd.output).data());
            first += idx.len();
        }
        let out = Tensor::new(input.shape().to_vec(), data)?;
        if p > 1 {
            unpatchify(&out, p)
        } else {
            Ok(out)
        }
    }

    /// Parameters plus running statistics, as written to disk.
    fn state_records(&self) -> ParamSet<T> {
        let mut set = self.params.clone();
        for (name, st) in self.bn_names().iter().zip(&self.bn) {
            set.push(format!("{name}.bn.running_mean"), Tensor::from_vec(st.mean.clone()));
            set.push(format!("{name}.bn.running_var"), Tensor::from_vec(st.var.clone()));
            set.push(format!("{name}.bn.batches"), Tensor::scalar(T::from_f64(st.batches as f64)));
        }
        set
    }

    fn bn_names(&self) -> Vec<String> {
        let d = self.config.depth;
        (0..d)
            .map(|i| format!("enc{i}"))
            .chain((0..d - 1).map(|j| format!("dec{j}")))
            .collect()
    }

    /// Writes `<base>.lampmodel` and `<base>.json`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let (bin, json) = model_paths(base);
        self.state_records().save(&bin)?;
        let cfg = serde_json::to_string_pretty(&self.config)?;
        fs::write(&json, cfg).map_err(|e| Error::io(&json, e))
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (bin, json) = model_paths(base);
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let config: AEConfig = serde_json::from_str(&text)?;
        let mut model = Self::build(config, 0)?;
        let records = ParamSet::<T>::load(&bin)?;
        let expected = model.state_records();
        if !expected.same_layout(&records) {
            return Err(Error::Format(format!(
                "{} does not match the architecture in {}",
                bin.display(),
                json.display()
            )));
        }
        let np = model.params.len();
        for i in 0..np {
            *model.params.tensor_mut(i) = records.tensor(i).clone();
        }
        for (k, st) in model.bn.iter_mut().enumerate() {
            let base = np + 3 * k;
            st.mean = records.tensor(base).data().to_vec();
            st.var = records.tensor(base + 1).data().to_vec();
            st.batches = records.tensor(base + 2).data()[0].as_f64() as u64;
        }
        Ok(model)
    }
}

impl<T: Element> Parameterized<T> for AEModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

/// `(<base>.lampmodel, <base>.json)`.
pub fn model_paths(base: &Path) -> (PathBuf, PathBuf) {
    let mut bin = base.as_os_str().to_owned();
    bin.push(".lampmodel");
    let mut json = base.as_os_str().to_owned();
    json.push(".json");
    (bin.into(), json.into())
}

/// Splits each image into a `p x p` grid of non-overlapping patches.
/// Output is sample-major with patches in row-major grid order.
pub fn patchify<T: Element>(images: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw("patchify", images.shape())?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidArgument(format!("{h}x{w} is not divisible into a {p}x{p} grid")));
    }
    if p == 1 {
        return Ok(images.clone());
    }
    let (ph, pw) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for s in 0..n {
        for gi in 0..p {
            for gj in 0..p {
                for ch in 0..c {
                    for i in 0..ph {
                        let row = ((s * c + ch) * h + gi * ph + i) * w + gj * pw;
                        out.extend_from_slice(&src[row..row + pw]);
                    }
                }
            }
        }
    }
    Tensor::new([n * p * p, c, ph, pw], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Element>(patches: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [np, c, ph, pw] = nchw("unpatchify", patches.shape())?;
    if p == 0 || np % (p * p) != 0 {
        return Err(Error::InvalidArgument(format!("{np} patches do not form {p}x{p} grids")));
    }
    if p == 1 {
        return Ok(patches.clone());
    }
    let n = np / (p * p);
    let (h, w) = (ph * p, pw * p);
    let src = patches.data();
    let mut out = vec![T::zero(); src.len()];
    let mut k = 0;
    for s in 0..n {
        for gi in 0..p {
            for gj in 0..p {
                for ch in 0..c {
                    for i in 0..ph {
                        let row = ((s * c + ch) * h + gi * ph + i) * w + gj * pw;
                        out[row..row + pw].copy_from_slice(&src[k..k + pw]);
                        k += pw;
                    }
                }
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

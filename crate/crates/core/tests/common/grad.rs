//! Central finite-difference oracle for graph operations.

use lamp_core::model::{AEConfig, AEModel, Mode, Parameterized};
use lamp_core::tensor::{BatchNormMode, Element, Graph, Tensor, Var};
use lamp_core::{losses, BaseLoss, LampConfig, Reduction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 20;
pub const TOL_F64: f64 = 1e-4;
pub const TOL_F32: f64 = 1e-2;

/// A scalar-valued computation over differentiable leaves, generic over precision.
pub trait Fixture {
    fn name(&self) -> String;
    /// Fresh leaf values for instance `rng`.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>>;
    fn eval<T: Element>(&self, g: &mut Graph<T>, x: &[Var]) -> lamp_core::Result<Var>;
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform magnitude in `[lo, hi)` with a random sign, keeping clear of kinks at 0.
pub fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces a non-scalar output to a scalar with fixed random weights.
fn scalarize<T: Element>(g: &mut Graph<T>, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    if g.value(out).numel() == 1 && shape.len() <= 1 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, &shape, -1.0, 1.0).cast::<T>();
    let w = g.input(w);
    let p = g.mul(out, w).unwrap();
    g.sum(p, None).unwrap()
}

fn value<F: Fixture, T: Element>(f: &F, inputs: &[Tensor<T>], seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f.eval(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, out, seed);
    g.value(s).data()[0].as_f64()
}

fn analytic<F: Fixture, T: Element>(f: &F, inputs: &[Tensor<T>], seed: u64) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f.eval(&mut g, &vars).unwrap();
    let s = scalarize(&mut g, out, seed);
    g.backward(s).unwrap();
    vars.iter()
        .zip(inputs)
        .flat_map(|(&v, t)| match g.grad(v) {
            Some(d) => d.data().iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
            None => vec![0.0; t.numel()],
        })
        .collect()
}

/// Coordinate-wise central differences in 64-bit.
fn numeric<F: Fixture>(f: &F, inputs: &[Tensor<f64>], seed: u64, h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            out.push((value(f, &plus, seed) - value(f, &minus, seed)) / (2.0 * h));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: String,
    pub max_err_f64: f64,
    pub max_err_f32: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_err_f64 < TOL_F64 && self.max_err_f32 < TOL_F32
    }
}

/// Runs `INSTANCES` random instances at both precisions. The 32-bit analytic
/// gradient is compared against a 64-bit oracle evaluated at the rounded inputs.
pub fn check<F: Fixture>(f: &F, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut e64, mut e32) = (0.0f64, 0.0f64);
    for k in 0..INSTANCES {
        let inputs = f.sample(&mut rng);
        let s = seed.wrapping_add(k as u64);
        let num = numeric(f, &inputs, s, 1e-6);
        e64 = e64.max(rel_err(&analytic(f, &inputs, s), &num));

        let rounded: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
        let widened: Vec<Tensor<f64>> = rounded.iter().map(|t| t.cast()).collect();
        let num = numeric(f, &widened, s, 1e-6);
        e32 = e32.max(rel_err(&analytic(f, &rounded, s), &num));
    }
    OracleReport {
        name: f.name(),
        max_err_f64: e64,
        max_err_f32: e32,
    }
}

/// Builds a fixture from a name, a sampler and a generic body.
macro_rules! fixture {
    ($ty:ident, $name:expr, |$rng:ident| $sample:expr, |$g:ident, $x:ident| $body:expr) => {
        pub struct $ty;
        impl Fixture for $ty {
            fn name(&self) -> String {
                $name.to_string()
            }
            fn sample(&self, $rng: &mut rand_chacha::ChaCha8Rng) -> Vec<lamp_core::Tensor<f64>> {
                $sample
            }
            fn eval<T: lamp_core::Element>(
                &self,
                $g: &mut lamp_core::Graph<T>,
                $x: &[lamp_core::Var],
            ) -> lamp_core::Result<lamp_core::Var> {
                #[allow(unused_imports)]
                use lamp_core::Element as _;
                $body
            }
        }
    };
}

fn t<T: Element>(v: f64) -> T {
    T::from_f64(v)
}

fixture!(Neg, "neg", |r| vec![signed(r, &[3, 4], 0.1, 2.0)], |g, x| g.neg(x[0]));
fixture!(Log, "log", |r| vec![uniform(r, &[3, 4], 0.2, 3.0)], |g, x| g.log(x[0]));
fixture!(Square, "square", |r| vec![signed(r, &[3, 4], 0.1, 2.0)], |g, x| g.square(x[0]));
fixture!(Abs, "abs", |r| vec![signed(r, &[3, 4], 0.05, 2.0)], |g, x| g.abs(x[0]));
fixture!(Sigmoid, "sigmoid", |r| vec![signed(r, &[3, 4], 0.0, 4.0)], |g, x| g.sigmoid(x[0]));
fixture!(Add, "add", |r| vec![signed(r, &[2, 5], 0.0, 2.0), signed(r, &[2, 5], 0.0, 2.0)], |g, x| g.add(x[0], x[1]));
fixture!(Sub, "sub", |r| vec![signed(r, &[2, 5], 0.0, 2.0), signed(r, &[2, 5], 0.0, 2.0)], |g, x| g.sub(x[0], x[1]));
fixture!(Mul, "mul", |r| vec![signed(r, &[2, 5], 0.0, 2.0), signed(r, &[2, 5], 0.0, 2.0)], |g, x| g.mul(x[0], x[1]));
fixture!(Div, "div", |r| vec![signed(r, &[2, 5], 0.0, 2.0), signed(r, &[2, 5], 0.5, 2.0)], |g, x| g.div(x[0], x[1]));
fixture!(ScalarMul, "scalar_mul", |r| vec![signed(r, &[6], 0.0, 2.0)], |g, x| Ok(g.scalar_mul(x[0], t(-1.7))));
fixture!(AddScalar, "add_scalar", |r| vec![signed(r, &[6], 0.0, 2.0)], |g, x| Ok(g.add_scalar(x[0], t(0.3))));
// Values kept at least 0.05 away from both clamp bounds.
fixture!(Clamp, "clamp", |r| {
    let mut v = uniform(r, &[10], 0.0, 1.0);
    for e in v.data_mut() {
        *e = if *e < 0.3 { -0.5 + *e } else if *e > 0.7 { 1.0 + *e } else { *e };
    }
    vec![v]
}, |g, x| g.clamp(x[0], t(0.0), t(1.0)));
fixture!(LeakyRelu, "leaky_relu", |r| vec![signed(r, &[3, 4], 0.05, 2.0)], |g, x| g.leaky_relu(x[0], t(0.2)));
fixture!(ScaleByConst, "scale_by_const", |r| vec![signed(r, &[8], 0.0, 2.0)], |g, x| Ok(g.scale_by_const(x[0], t(2.5), t(0.99))));
fixture!(SumAll, "sum", |r| vec![signed(r, &[2, 3, 4], 0.0, 2.0)], |g, x| g.sum(x[0], None));
fixture!(SumAxes, "sum_axes", |r| vec![signed(r, &[2, 3, 4], 0.0, 2.0)], |g, x| g.sum(x[0], Some(&[0, 2])));
fixture!(MeanAll, "mean", |r| vec![signed(r, &[2, 3, 4], 0.0, 2.0)], |g, x| g.mean(x[0], None));
fixture!(MeanAxes, "mean_axes", |r| vec![signed(r, &[2, 3, 4], 0.0, 2.0)], |g, x| g.mean(x[0], Some(&[1])));
fixture!(Reshape, "reshape", |r| vec![signed(r, &[2, 6], 0.0, 2.0)], |g, x| g.reshape(x[0], &[3, 4]));
fixture!(Conv, "conv2d_s1_p1", |r| vec![
    signed(r, &[2, 2, 5, 5], 0.0, 1.0),
    signed(r, &[3, 2, 3, 3], 0.0, 1.0),
    signed(r, &[3], 0.0, 1.0),
], |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 1));
fixture!(ConvStrided, "conv2d_s2_p1", |r| vec![
    signed(r, &[2, 3, 6, 6], 0.0, 1.0),
    signed(r, &[2, 3, 3, 3], 0.0, 1.0),
    signed(r, &[2], 0.0, 1.0),
], |g, x| g.conv2d(x[0], x[1], Some(x[2]), 2, 1));
fixture!(ConvNoBias, "conv2d_nobias_p0", |r| vec![
    signed(r, &[1, 2, 5, 4], 0.0, 1.0),
    signed(r, &[2, 2, 2, 3], 0.0, 1.0),
], |g, x| g.conv2d(x[0], x[1], None, 1, 0));
fixture!(BatchNormTrain, "batchnorm_train", |r| vec![
    signed(r, &[3, 2, 3, 3], 0.0, 2.0),
    uniform(r, &[2], 0.5, 1.5),
    signed(r, &[2], 0.0, 1.0),
], |g, x| g.batchnorm2d(x[0], x[1], x[2], BatchNormMode::Train { eps: t(1e-5) }));
fixture!(BatchNormEval, "batchnorm_eval", |r| vec![
    signed(r, &[2, 2, 3, 3], 0.0, 2.0),
    uniform(r, &[2], 0.5, 1.5),
    signed(r, &[2], 0.0, 1.0),
], |g, x| g.batchnorm2d(x[0], x[1], x[2], BatchNormMode::Eval {
    mean: vec![t(0.3), t(-0.2)],
    var: vec![t(1.5), t(0.7)],
    eps: t(1e-5),
}));
fixture!(Upsample, "upsample_nearest2x", |r| vec![signed(r, &[2, 2, 3, 2], 0.0, 2.0)], |g, x| g.upsample_nearest2x(x[0]));
fixture!(Blur, "blur", |r| vec![signed(r, &[1, 2, 6, 7], 0.0, 2.0)], |g, x| {
    let k: Vec<T> = losses::gaussian_window(5, 1.0).into_iter().map(T::from_f64).collect();
    g.blur(x[0], &k)
});
fixture!(Linear, "linear", |r| vec![
    signed(r, &[3, 4], 0.0, 1.0),
    signed(r, &[2, 4], 0.0, 1.0),
    signed(r, &[2], 0.0, 1.0),
], |g, x| g.linear(x[0], x[1], x[2]));
fixture!(CrossEntropy, "cross_entropy", |r| vec![signed(r, &[4, 3], 0.0, 3.0)], |g, x| g.cross_entropy(x[0], &[0, 2, 1, 2]));
fixture!(Amplify, "amplify", |r| vec![uniform(r, &[10], 0.0, 0.95)], |g, x| losses::amplify(g, x[0]));

fn pair(r: &mut ChaCha8Rng, shape: &[usize]) -> Vec<Tensor<f64>> {
    vec![uniform(r, shape, 0.05, 0.95), uniform(r, shape, 0.05, 0.95)]
}

fixture!(L2Map, "l2_map", |r| pair(r, &[2, 1, 3, 3]), |g, x| Ok(losses::l2_map(g, x[0], x[1])?.values));
fixture!(L1Map, "l1_map", |r| pair(r, &[2, 1, 3, 3]), |g, x| Ok(losses::l1_map(g, x[0], x[1])?.values));
fixture!(SsimMap, "ssim_map", |r| pair(r, &[1, 2, 12, 12]), |g, x| Ok(losses::ssim_map(g, x[0], x[1], &Default::default())?.values));
fixture!(BaseSum, "base_loss_l2_sum", |r| pair(r, &[2, 1, 4, 4]), |g, x| losses::base_loss(g, x[0], x[1], BaseLoss::L2, Reduction::Sum));
fixture!(BaseMean, "base_loss_l1_mean", |r| pair(r, &[2, 1, 4, 4]), |g, x| losses::base_loss(g, x[0], x[1], BaseLoss::L1, Reduction::Mean));

/// LAMP on a pair of images. The batch maximum used for scaling is detached,
/// so the oracle evaluates with that maximum frozen at the unperturbed point.
pub struct Lamp {
    pub base: BaseLoss,
    pub reduction: Reduction,
    pub shape: Vec<usize>,
}

impl Lamp {
    fn frozen_max(&self, x: &[Tensor<f64>]) -> f64 {
        let mut g = Graph::<f64>::new();
        let y = g.input(x[0].clone());
        let yh = g.input(x[1].clone());
        let m = losses::base_map(&mut g, y, yh, self.base).unwrap();
        g.value(m.values).max_value().unwrap()
    }
}

/// Frozen-maximum LAMP built from the public primitives.
fn frozen_lamp<T: Element>(
    g: &mut Graph<T>,
    y: Var,
    y_hat: Var,
    base: BaseLoss,
    reduction: Reduction,
    max: f64,
) -> lamp_core::Result<Var> {
    let map = losses::base_map(g, y, y_hat, base)?;
    let scaled = g.scale_by_const(map.values, T::from_f64(max), T::from_f64(1.0 - 0.01));
    let a = losses::amplify(g, scaled)?;
    match reduction {
        Reduction::Sum => g.sum(a, None),
        Reduction::Mean => g.mean(a, None),
    }
}

/// Wrapper that records the frozen maximum of the instance it was sampled for.
pub struct LampInstance<'a> {
    lamp: &'a Lamp,
    max: f64,
}

impl Fixture for LampInstance<'_> {
    fn name(&self) -> String {
        self.lamp.name()
    }
    fn sample(&self, _: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        unreachable!()
    }
    fn eval<T: Element>(&self, g: &mut Graph<T>, x: &[Var]) -> lamp_core::Result<Var> {
        frozen_lamp(g, x[0], x[1], self.lamp.base, self.lamp.reduction, self.max)
    }
}

impl Lamp {
    fn name(&self) -> String {
        format!("lamp_{}_{:?}", self.lamp_base(), self.reduction).to_lowercase()
    }
    fn lamp_base(&self) -> &'static str {
        self.base.as_str()
    }

    /// Like [`check`], additionally asserting that the library loss agrees with
    /// the frozen-maximum construction at every sampled point.
    pub fn check(&self, seed: u64) -> OracleReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut e64, mut e32) = (0.0f64, 0.0f64);
        for k in 0..INSTANCES {
            let inputs = pair(&mut rng, &self.shape);
            let s = seed.wrapping_add(k as u64);
            for prec in [false, true] {
                let x: Vec<Tensor<f64>> = if prec {
                    inputs.iter().map(|t| t.cast::<f32>().cast()).collect()
                } else {
                    inputs.clone()
                };
                let inst = LampInstance { lamp: self, max: self.frozen_max(&x) };
                let num = numeric(&inst, &x, s, 1e-6);
                let ana = if prec {
                    let x32: Vec<Tensor<f32>> = x.iter().map(|t| t.cast()).collect();
                    library_lamp_grad(&x32, self.base, self.reduction)
                } else {
                    library_lamp_grad(&x, self.base, self.reduction)
                };
                let e = rel_err(&ana, &num);
                if prec { e32 = e32.max(e) } else { e64 = e64.max(e) }
            }
        }
        OracleReport { name: self.name(), max_err_f64: e64, max_err_f32: e32 }
    }
}

fn library_lamp_grad<T: Element>(x: &[Tensor<T>], base: BaseLoss, reduction: Reduction) -> Vec<f64> {
    let mut g = Graph::new();
    let y = g.param(x[0].clone());
    let yh = g.param(x[1].clone());
    let cfg = LampConfig::new(0.01, reduction).unwrap();
    let loss = losses::lamp_loss(&mut g, y, yh, base, &cfg).unwrap();
    g.backward(loss).unwrap();
    [y, yh]
        .iter()
        .flat_map(|&v| g.grad(v).unwrap().data().iter().map(|e| e.as_f64()).collect::<Vec<_>>())
        .collect()
}

/// Autoencoder forward, base loss, optional LAMP and reduction, differentiated
/// with respect to every model parameter. Checked along random directions,
/// since the parameter count makes coordinate-wise differences too slow.
pub struct Pipeline {
    pub base: BaseLoss,
    pub lamp: bool,
    pub reduction: Reduction,
}

const DIRECTIONS: usize = 4;

impl Pipeline {
    pub fn name(&self) -> String {
        let l = if self.lamp { ".lamp" } else { "" };
        format!("ae_{}{l}_{:?}", self.base.as_str(), self.reduction).to_lowercase()
    }

    /// The MNIST geometry; smaller inputs leave a 1x1 bottleneck whose batch
    /// statistics over a handful of values are ill-conditioned in 32-bit.
    fn config(&self) -> AEConfig {
        let mut c = AEConfig::new(4, 1, (32, 32));
        c.base_width = 2;
        c
    }

    /// Loss value, plus the parameter gradient when `grad` is set. With
    /// `frozen` the LAMP scale uses that maximum instead of the batch one.
    fn loss<T: Element>(
        &self,
        model: &mut AEModel<T>,
        x: &Tensor<T>,
        frozen: Option<f64>,
        grad: bool,
    ) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let fwd = model.forward(&mut g, xv, Mode::Train).unwrap();
        let loss = match (self.lamp, frozen) {
            (true, Some(m)) => frozen_lamp(&mut g, xv, fwd.output, self.base, self.reduction, m).unwrap(),
            (true, None) => {
                let cfg = LampConfig::new(0.01, self.reduction).unwrap();
                losses::lamp_loss(&mut g, xv, fwd.output, self.base, &cfg).unwrap()
            }
            (false, _) => losses::base_loss(&mut g, xv, fwd.output, self.base, self.reduction).unwrap(),
        };
        let value = g.value(loss).data()[0].as_f64();
        if !grad {
            return (value, Vec::new());
        }
        g.backward(loss).unwrap();
        let grads = fwd
            .params
            .iter()
            .flat_map(|&v| g.grad(v).unwrap().data().iter().map(|e| e.as_f64()).collect::<Vec<_>>())
            .collect();
        (value, grads)
    }

    fn map_max(&self, model: &mut AEModel<f64>, x: &Tensor<f64>) -> f64 {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let fwd = model.forward(&mut g, xv, Mode::Train).unwrap();
        let m = losses::base_map(&mut g, xv, fwd.output, self.base).unwrap();
        g.value(m.values).max_value().unwrap()
    }

    fn displaced(model: &AEModel<f64>, dir: &[f64], h: f64) -> AEModel<f64> {
        let mut m = model.clone();
        let mut k = 0;
        for (_, t) in m.params_mut().iter_mut() {
            for e in t.data_mut() {
                *e += h * dir[k];
                k += 1;
            }
        }
        m
    }

    fn directional_error<T: Element>(&self, model64: &AEModel<f64>, x64: &Tensor<f64>, rng: &mut ChaCha8Rng) -> f64 {
        let mut model: AEModel<T> = cast_model(model64);
        let x: Tensor<T> = x64.cast();
        let (_, grad) = self.loss(&mut model, &x, None, true);
        // Oracle runs at the (possibly rounded) point in 64-bit.
        let base64: AEModel<f64> = cast_model(&model);
        let x_or: Tensor<f64> = x.cast();
        let max = if self.lamp {
            Some(self.map_max(&mut base64.clone(), &x_or))
        } else {
            None
        };
        let n = grad.len();
        let (mut ana, mut num) = (Vec::new(), Vec::new());
        for _ in 0..DIRECTIONS {
            let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            ana.push(grad.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>());
            // Small enough that the step rarely crosses a leaky-relu kink.
            let h = 1e-7;
            let f = |m: &mut AEModel<f64>| self.loss(m, &x_or, max, false).0;
            let plus = f(&mut Self::displaced(&base64, &dir, h));
            let minus = f(&mut Self::displaced(&base64, &dir, -h));
            num.push((plus - minus) / (2.0 * h));
        }
        rel_err(&ana, &num)
    }

    pub fn check(&self, seed: u64) -> OracleReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut e64, mut e32) = (0.0f64, 0.0f64);
        let cfg = self.config();
        let (h, w) = cfg.input_size;
        for k in 0..INSTANCES {
            let model = AEModel::<f64>::build(cfg.clone(), seed.wrapping_add(k as u64)).unwrap();
            let x = uniform(&mut rng, &[4, 1, h, w], 0.0, 1.0);
            e64 = e64.max(self.directional_error::<f64>(&model, &x, &mut rng));
            e32 = e32.max(self.directional_error::<f32>(&model, &x, &mut rng));
        }
        OracleReport { name: self.name(), max_err_f64: e64, max_err_f32: e32 }
    }
}

fn cast_model<A: Element, B: Element>(m: &AEModel<A>) -> AEModel<B> {
    let mut out = AEModel::<B>::build(m.config().clone(), 0).unwrap();
    for ((_, dst), (_, src)) in out.params_mut().iter_mut().zip(m.params().iter()) {
        *dst = src.cast();
    }
    out
}

/// Every fixture in the suite, in a fixed order.
pub fn run_all(seed: u64) -> Vec<OracleReport> {
    let mut out = vec![
        check(&Neg, seed),
        check(&Log, seed),
        check(&Square, seed),
        check(&Abs, seed),
        check(&Sigmoid, seed),
        check(&Add, seed),
        check(&Sub, seed),
        check(&Mul, seed),
        check(&Div, seed),
        check(&ScalarMul, seed),
        check(&AddScalar, seed),
        check(&Clamp, seed),
        check(&LeakyRelu, seed),
        check(&ScaleByConst, seed),
        check(&SumAll, seed),
        check(&SumAxes, seed),
        check(&MeanAll, seed),
        check(&MeanAxes, seed),
        check(&Reshape, seed),
        check(&Conv, seed),
        check(&ConvStrided, seed),
        check(&ConvNoBias, seed),
        check(&BatchNormTrain, seed),
        check(&BatchNormEval, seed),
        check(&Upsample, seed),
        check(&Blur, seed),
        check(&Linear, seed),
        check(&CrossEntropy, seed),
        check(&Amplify, seed),
        check(&L2Map, seed),
        check(&L1Map, seed),
        check(&SsimMap, seed),
        check(&BaseSum, seed),
        check(&BaseMean, seed),
    ];
    for base in [BaseLoss::L2, BaseLoss::L1, BaseLoss::Ssim] {
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let shape = if base == BaseLoss::Ssim { vec![1, 1, 12, 12] } else { vec![2, 1, 3, 3] };
            out.push(Lamp { base, reduction, shape }.check(seed));
        }
    }
    for base in [BaseLoss::L2, BaseLoss::L1, BaseLoss::Ssim] {
        for lamp in [false, true] {
            for reduction in [Reduction::Sum, Reduction::Mean] {
                out.push(Pipeline { base, lamp, reduction }.check(seed));
            }
        }
    }
    out
}

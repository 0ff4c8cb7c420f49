//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each, and exits nonzero if any failed.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{grad, mnist_dir, mvtec_fixture};
use lamp_core::cli::{cmd_sweep, ExperimentConfig, SweepRow, SWEEP_AGGREGATE, SWEEP_RESULTS};
use lamp_core::data::{load_mnist, load_mvtec_category, make_one_class_task, ColorMode, Mnist, PreprocessOp};
use lamp_core::eval::{anomaly_scores, auroc, evaluate_task, PatchAggregation};
use lamp_core::landscape::{loss_grid, random_direction, reconstruction_loss, sharpness_index, Normalization};
use lamp_core::losses::{amplify, scale_loss_map, BaseLoss, LossMap};
use lamp_core::model::AEModel;
use lamp_core::optim::train;
use lamp_core::{AEConfig, Graph, LossSpec, OptimizerConfig, OptimizerKind, Parameterized, Tensor, TrainConfig, TrainHistory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// 1. -ln(1-x) >= x with equality only at 0, and slope >= 1.
fn amplification_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut xs: Vec<f64> = (0..9_999).map(|_| rng.random_range(0.0..=0.99)).collect();
    xs.push(0.0);
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_vec(xs.clone()));
    let y = amplify(&mut g, x).unwrap();
    let s = g.sum(y, None).unwrap();
    g.backward(s).unwrap();
    let values = g.value(y).data().to_vec();
    let slopes = g.grad(x).unwrap().data().to_vec();
    let mut bad = Vec::new();
    for ((&x, &v), &d) in xs.iter().zip(&values).zip(&slopes) {
        let oracle = -(-x).ln_1p();
        let equal = (v - x).abs() <= 1e-12;
        let ok = (v - oracle).abs() <= 1e-12 * oracle.max(1.0)
            && v >= x - 1e-12
            && (x == 0.0) == (v == x)
            && (x == 0.0 || x * x / 2.0 <= 1e-12 || !equal)
            && (d - 1.0 / (1.0 - x)).abs() <= 1e-12 * d
            && d >= 1.0;
        if !ok {
            bad.push(x);
        }
    }
    outcome(bad.is_empty(), format!("{} samples, {} violations", xs.len(), bad.len()))
}

// 2. Finite-difference agreement for every op and composed pipeline.
fn gradient_oracle() -> Outcome {
    let reports = grad::run_all(2024);
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    let worst64 = reports.iter().map(|r| r.max_err_f64).fold(0.0, f64::max);
    let worst32 = reports.iter().map(|r| r.max_err_f32).fold(0.0, f64::max);
    outcome(
        failed.is_empty(),
        format!(
            "{} fixtures x {} instances, worst rel err f64 {worst64:.1e} f32 {worst32:.1e}{}",
            reports.len(),
            grad::INSTANCES,
            if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }
        ),
    )
}

/// Mann-Whitney U by counting pairs, ties worth one half.
fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut u = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                u += 1.0;
            } else if si == sj {
                u += 0.5;
            }
        }
    }
    u / pairs
}

// 3. Rank AUROC against the pairwise definition.
fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut broken = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let a = auroc(&scores, &labels).unwrap();
        worst = worst.max((a - brute_auroc(&scores, &labels)).abs());

        // Strictly increasing maps keep every order and tie.
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s - 7.0).collect();
        let expd: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let monotone = auroc(&cubed, &labels).unwrap() == a && auroc(&expd, &labels).unwrap() == a;

        // Swapping the classes turns U into pos*neg - U; 2U is an integer under ties.
        let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
        let b = auroc(&scores, &flipped).unwrap();
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let pairs = pos * (n as f64 - pos);
        let complement = (2.0 * a * pairs).round() + (2.0 * b * pairs).round() == 2.0 * pairs && (a + b - 1.0).abs() <= f64::EPSILON;
        if !(monotone && complement) {
            broken += 1;
        }
    }
    outcome(
        worst <= 1e-12 && broken == 0,
        format!("100 instances, max |rank - pairwise| {worst:.1e}, invariance violations {broken}"),
    )
}

// 4. Max-scaling lands in [0, 1-eps] with the max hit exactly.
fn scaling_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    for k in 0..1000 {
        let eps = if k % 2 == 0 { 0.01 } else { rng.random_range(1e-4..0.5) };
        let shape = [rng.random_range(1..4), 1, rng.random_range(1..9), rng.random_range(1..9)];
        let len: usize = shape.iter().product();
        let magnitude = 10f64.powi(rng.random_range(-6..6));
        let data: Vec<f64> = if k % 10 == 0 {
            vec![0.0; len]
        } else {
            (0..len).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..magnitude) }).collect()
        };
        let zero = data.iter().all(|&v| v == 0.0);
        let mut g = Graph::<f64>::new();
        let v = g.input(Tensor::new(shape, data.clone()).unwrap());
        let out = scale_loss_map(&mut g, LossMap { values: v, base: BaseLoss::L2 }, eps).unwrap();
        let y = g.value(out.values).data();
        let top = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ok = if zero {
            y == &data[..]
        } else {
            y.iter().all(|&u| (0.0..=1.0 - eps).contains(&u)) && top == 1.0 - eps
        };
        if !ok {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("1000 maps, {bad} violations"))
}

const EPOCHS: usize = 12;
const LR: f64 = 1e-3;
const SEEDS: u64 = 5;

fn mnist_auroc(mnist: &Mnist, digit: u8, loss: &str, batch_size: usize, seed: u64) -> f64 {
    let task = make_one_class_task(mnist, digit)
        .unwrap()
        .preprocess(&[PreprocessOp::Pad { height: 32, width: 32 }])
        .unwrap();
    assert!(task.train.len() <= 2000);
    let mut model = AEModel::<f32>::build(AEConfig::new(4, 1, (32, 32)), seed).unwrap();
    let cfg = TrainConfig::new(
        loss.parse().unwrap(),
        OptimizerConfig::new(OptimizerKind::Adam, LR),
        EPOCHS,
        batch_size,
        seed,
    );
    train(&mut model, &task.train, &cfg).unwrap();
    evaluate_task(&model, &task, "").unwrap().auroc
}

/// Per-digit seed means of (base, lamp) AUROC.
fn digit_table(mnist: &Mnist, digits: &[u8], batch_size: usize) -> Vec<(u8, f64, f64)> {
    digits
        .iter()
        .map(|&d| {
            let base: Vec<f64> = (0..SEEDS).map(|s| mnist_auroc(mnist, d, "l2", batch_size, s)).collect();
            let lamp: Vec<f64> = (0..SEEDS).map(|s| mnist_auroc(mnist, d, "l2.lamp", batch_size, s)).collect();
            let row = (d, mean(&base), mean(&lamp));
            println!("    digit {d}  bs {batch_size}  l2 {:.4}  l2.lamp {:.4}", row.1, row.2);
            row
        })
        .collect()
}

// 5. LAMP keeps up with the base loss at batch size 128.
fn mnist_small_batch(mnist: &Mnist) -> Outcome {
    let rows = digit_table(mnist, &(0..10).collect::<Vec<_>>(), 128);
    let base = mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let lamp = mean(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
    outcome(
        base >= 0.85 && lamp >= base - 0.005,
        format!("mean AUROC l2 {base:.4}, l2.lamp {lamp:.4} (need l2 >= 0.85, l2.lamp >= l2 - 0.005)"),
    )
}

// 6. LAMP gain at batch size 1024.
fn mnist_large_batch(mnist: &Mnist) -> Outcome {
    let rows = digit_table(mnist, &(0..10).collect::<Vec<_>>(), 1024);
    let gains: Vec<u8> = rows.iter().filter(|r| r.2 - r.1 > 0.0).map(|r| r.0).collect();
    let gap = mean(&rows.iter().map(|r| r.2 - r.1).collect::<Vec<_>>());
    outcome(
        gains.len() >= 3,
        format!("positive mean gap on digits {gains:?} ({} of 10, need 3), overall gap {gap:+.4}", gains.len()),
    )
}

// 7. LAMP models sit in sharper 1-D landscapes.
fn landscape_sharpening(mnist: &Mnist) -> Outcome {
    let task = make_one_class_task(mnist, 0)
        .unwrap()
        .preprocess(&[PreprocessOp::Pad { height: 32, width: 32 }])
        .unwrap();
    let batch = task.train.take(256).unwrap();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..SEEDS {
        let mut s = [0.0; 2];
        for (k, loss) in ["l2", "l2.lamp"].into_iter().enumerate() {
            let spec: LossSpec = loss.parse().unwrap();
            let mut model = AEModel::<f32>::build(AEConfig::new(4, 1, (32, 32)), seed).unwrap();
            let cfg = TrainConfig::new(spec, OptimizerConfig::new(OptimizerKind::Adam, LR), EPOCHS, 128, seed);
            train(&mut model, &task.train, &cfg).unwrap();
            let d = random_direction(model.params(), 1000 + seed, Normalization::Filter);
            let grid = loss_grid(&model, &d, None, (-1.0, 1.0), 51, |m: &AEModel<f32>| {
                reconstruction_loss(m, &batch.pixels, spec, &cfg.lamp)
            })
            .unwrap();
            s[k] = sharpness_index(&grid).unwrap();
        }
        if s[1] > s[0] {
            wins += 1;
        }
        pairs.push(format!("{:.0}/{:.0}", s[0], s[1]));
    }
    outcome(
        wins >= 4,
        format!("l2.lamp sharper in {wins} of {SEEDS} seeds (l2/l2.lamp: {})", pairs.join(", ")),
    )
}

// 8. MVTec layout, 2 x 2 sweep, resume.
fn mvtec_protocol(root: &Path) -> Outcome {
    let data = root.join("mvtec");
    mvtec_fixture(&data, "bottle", 40);
    let task = load_mvtec_category(&data, "bottle", (32, 32), ColorMode::Rgb).unwrap();
    let loader_ok = task.train.pixels.shape() == [3, 3, 32, 32]
        && task.test.pixels.shape() == [4, 3, 32, 32]
        && task.test.labels.as_deref() == Some(&[1, 0, 0, 1][..])
        && task.test.class_tags.clone().unwrap() == ["crack", "good", "good", "scratch"];

    let out = root.join("sweep");
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "dataset": "mvtec",
        "data_dir": data,
        "category": "bottle",
        "target_size": 32,
        "color": "rgb",
        "base_width": 2,
        "epochs": 2,
        "batch_size": 2,
        "sweep_losses": ["l2", "l2.lamp"],
        "sweep_optimizers": ["rmsprop", "adam"],
        "out": out,
    }))
    .unwrap();
    let first = cmd_sweep(&cfg).unwrap();
    let results = out.join(SWEEP_RESULTS);
    let text = std::fs::read_to_string(&results).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let shaped = header.starts_with(&["task", "loss", "optimizer", "batch_size", "seed", "auroc"])
        && first.rows.len() == 4
        && first.rows.iter().all(|r| r.auroc.is_some_and(|a| (0.0..=1.0).contains(&a)))
        && std::fs::read_to_string(out.join(SWEEP_AGGREGATE)).unwrap().lines().count() == 5;

    // Drop the last two cells as if interrupted.
    let kept: Vec<&str> = text.lines().take(3).collect();
    std::fs::write(&results, kept.join("\n") + "\n").unwrap();
    let again = cmd_sweep(&cfg).unwrap();
    let mut r = csv::Reader::from_path(&results).unwrap();
    let rows: Vec<SweepRow> = r.deserialize().map(|x| x.unwrap()).collect();
    let resumed = again.ran == 2 && rows == first.rows && cmd_sweep(&cfg).unwrap().ran == 0;
    outcome(
        loader_ok && shaped && resumed,
        format!("loader {loader_ok}, table shape {shaped}, resume {resumed}"),
    )
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

// 9. Same config and seed gives the same bits; checkpoints reload exactly.
fn determinism(mnist: &Mnist, root: &Path) -> Outcome {
    let task = make_one_class_task(mnist, 3)
        .unwrap()
        .preprocess(&[PreprocessOp::Pad { height: 32, width: 32 }])
        .unwrap();
    let data = task.train.take(100).unwrap();
    let run = || {
        let mut c = AEConfig::new(4, 1, (32, 32));
        c.base_width = 4;
        let mut m = AEModel::<f32>::build(c, 9).unwrap();
        let cfg = TrainConfig::new("l2.lamp".parse().unwrap(), OptimizerConfig::new(OptimizerKind::Adam, 1e-3), 3, 32, 9);
        let h = train(&mut m, &data, &cfg).unwrap();
        (m, h)
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    let loss_bits = |h: &TrainHistory| h.epoch_losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same_history = h1 == h2 && loss_bits(&h1) == loss_bits(&h2);
    let same_weights = m1
        .params()
        .iter()
        .zip(m2.params().iter())
        .all(|((_, a), (_, b))| bits(a.data()) == bits(b.data()));
    let json = serde_json::to_string(&h1).unwrap();
    let history_json = serde_json::from_str::<TrainHistory>(&json).unwrap() == h1;

    let base = root.join("model");
    m1.save(&base).unwrap();
    let loaded = AEModel::<f32>::load(&base).unwrap();
    let test = task.test.take(200).unwrap();
    let same_recon = bits(m1.reconstruct(&test.pixels).unwrap().data())
        == bits(loaded.reconstruct(&test.pixels).unwrap().data());
    let s1 = anomaly_scores(&m1, &test.pixels, PatchAggregation::Mean).unwrap();
    let s2 = anomaly_scores(&loaded, &test.pixels, PatchAggregation::Mean).unwrap();
    let same_scores = s1.iter().zip(&s2).all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(
        same_history && same_weights && history_json && same_recon && same_scores,
        format!(
            "history {same_history}, weights {same_weights}, history json {history_json}, \
             reconstruction {same_recon}, scores {same_scores}"
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mnist = load_mnist(&mnist_dir()).unwrap();
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("amplification property", Box::new(amplification_property)),
        ("gradient oracle", Box::new(gradient_oracle)),
        ("auroc oracle", Box::new(auroc_oracle)),
        ("scaling contract", Box::new(scaling_contract)),
        ("mnist bs128 direction", Box::new(|| mnist_small_batch(&mnist))),
        ("mnist bs1024 gap sign", Box::new(|| mnist_large_batch(&mnist))),
        ("landscape sharpening", Box::new(|| landscape_sharpening(&mnist))),
        ("mvtec protocol", Box::new(|| mvtec_protocol(dir.path()))),
        ("determinism and serialization", Box::new(|| determinism(&mnist, dir.path()))),
    ];
    // Optional criterion numbers on the command line select a subset.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let o = run();
        let secs = t.elapsed().as_secs_f64();
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("acceptance {} {name}: {tag} ({:.1}s) {}", i + 1, secs, o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

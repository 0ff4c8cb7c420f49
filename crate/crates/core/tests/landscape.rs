mod common;

use common::mnist_dir;
use lamp_core::data::{load_mnist, PreprocessOp};
use lamp_core::landscape::{
    encoder_probe_train, infer_classes, loss_grid, random_direction, reconstruction_loss, sharpness_index, Direction,
    Normalization, ProbeModel,
};
use lamp_core::model::{AEConfig, AEModel, Parameterized};
use lamp_core::{LampConfig, OptimizerConfig, OptimizerKind, ParamSet, Tensor};
use proptest::prelude::*;

#[derive(Clone)]
struct Quadratic(ParamSet<f64>);

impl Parameterized<f64> for Quadratic {
    fn params(&self) -> &ParamSet<f64> {
        &self.0
    }
    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.0
    }
}

fn quadratic(w: f64) -> Quadratic {
    let mut p = ParamSet::new();
    p.push("w", Tensor::from_vec(vec![w]));
    Quadratic(p)
}

fn unit_direction() -> Direction<f64> {
    Direction {
        tensors: vec![Tensor::from_vec(vec![1.0])],
        seed: 0,
        normalization: Normalization::None,
    }
}

#[test]
fn quadratic_toy_gives_exact_parabola() {
    let m = quadratic(0.25);
    let grid = loss_grid(&m, &unit_direction(), None, (-1.0, 1.0), 51, |q: &Quadratic| {
        let w = q.0.tensor(0).data()[0];
        Ok((w - 1.0) * (w - 1.0))
    })
    .unwrap();
    for (a, v) in grid.alphas.iter().zip(&grid.values) {
        let w = 0.25 + a;
        assert_eq!(*v, (w - 1.0) * (w - 1.0));
    }
    assert_eq!(grid.center(), 0.5625);
}

fn ae() -> AEModel<f32> {
    AEModel::build(AEConfig::new(4, 1, (32, 32)), 8).unwrap()
}

#[test]
fn independent_seeds_give_near_orthogonal_directions() {
    let m = ae();
    assert!(m.params().numel() >= 10_000);
    let flat = |d: &Direction<f32>| d.tensors.iter().flat_map(|t| t.data().to_vec()).collect::<Vec<f32>>();
    let a = flat(&random_direction(m.params(), 1, Normalization::Filter));
    let b = flat(&random_direction(m.params(), 2, Normalization::Filter));
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    assert!((dot / (na * nb)).abs() < 0.2);
}

#[test]
fn filter_slices_match_weight_norms() {
    let m = ae();
    let d = random_direction(m.params(), 3, Normalization::Filter);
    for ((name, w), dt) in m.params().iter().zip(&d.tensors) {
        if w.rank() <= 1 {
            assert!(dt.data().iter().all(|&v| v == 0.0), "{name}");
            continue;
        }
        let per = w.numel() / w.shape()[0];
        for (ws, ds) in w.data().chunks(per).zip(dt.data().chunks(per)) {
            let wn = ws.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let dn = ds.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((wn - dn).abs() <= 1e-6 * wn, "{name}: {wn} vs {dn}");
        }
    }
}

fn trained_ae_and_batch() -> (AEModel<f32>, Tensor<f32>) {
    let mnist = load_mnist(&mnist_dir()).unwrap();
    let task = lamp_core::data::make_one_class_task(&mnist, 1)
        .unwrap()
        .preprocess(&[PreprocessOp::Pad { height: 32, width: 32 }])
        .unwrap();
    let train = task.train.take(64).unwrap();
    let mut c = AEConfig::new(4, 1, (32, 32));
    c.base_width = 4;
    let mut m = AEModel::build(c, 0).unwrap();
    let cfg = lamp_core::TrainConfig::new(
        "l2".parse().unwrap(),
        OptimizerConfig::new(OptimizerKind::Adam, 1e-2),
        1,
        32,
        0,
    );
    lamp_core::optim::train(&mut m, &train, &cfg).unwrap();
    (m, train.pixels.select_rows(&(0..16).collect::<Vec<_>>()).unwrap())
}

#[test]
fn grid_is_pure_and_leaves_the_model_untouched() {
    let (m, x) = trained_ae_and_batch();
    let before = m.clone();
    let d1 = random_direction(m.params(), 10, Normalization::Filter);
    let d2 = random_direction(m.params(), 11, Normalization::Filter);
    let lamp = LampConfig::default();
    let spec = "l2".parse().unwrap();
    let f = |a: &AEModel<f32>| reconstruction_loss(a, &x, spec, &lamp);
    let g1 = loss_grid(&m, &d1, Some(&d2), (-1.0, 1.0), 5, f).unwrap();
    let g2 = loss_grid(&m, &d1, Some(&d2), (-1.0, 1.0), 5, f).unwrap();
    assert_eq!(m, before);
    assert_eq!(g1, g2);
    assert_eq!(g1.values.len(), 25);
    assert_eq!(g1.center(), reconstruction_loss(&m, &x, spec, &lamp).unwrap());
}

#[test]
fn incompatible_direction_is_rejected() {
    let m = ae();
    let d = Direction::<f32> {
        tensors: vec![Tensor::from_vec(vec![1.0])],
        seed: 0,
        normalization: Normalization::None,
    };
    assert!(loss_grid(&m, &d, None, (-1.0, 1.0), 3, |_| Ok(0.0)).is_err());
}

fn grid_of(values: Vec<f64>) -> lamp_core::landscape::LandscapeGrid {
    let n = values.len();
    let m = quadratic(0.0);
    let mut k = 0;
    loss_grid(&m, &unit_direction(), None, (-1.0, 1.0), n, |_| {
        k += 1;
        Ok(values[k - 1])
    })
    .unwrap()
}

#[test]
fn sharpness_examples() {
    assert_eq!(sharpness_index(&grid_of(vec![3.0; 51])).unwrap(), 0.0);
    let abs: Vec<f64> = lamp_core::landscape::linspace(-1.0, 1.0, 51).iter().map(|a| a.abs()).collect();
    assert!((sharpness_index(&grid_of(abs)).unwrap() - 1.0).abs() < 1e-12);
    assert!(sharpness_index(&grid_of(vec![1.0])).is_err());
}

proptest! {
    #[test]
    fn sharpness_is_translation_invariant_and_scales(
        values in prop::collection::vec(-10.0f64..10.0, 2..40),
        shift in -100.0f64..100.0,
        c in 0.01f64..50.0,
    ) {
        let s = sharpness_index(&grid_of(values.clone())).unwrap();
        let shifted = sharpness_index(&grid_of(values.iter().map(|v| v + shift).collect())).unwrap();
        let scaled = sharpness_index(&grid_of(values.iter().map(|v| v * c).collect())).unwrap();
        prop_assert!((s - shifted).abs() <= 1e-9 * (1.0 + s));
        prop_assert!((scaled - c * s).abs() <= 1e-9 * (1.0 + c * s));
    }
}

#[test]
fn probe_fits_a_small_labelled_sample() {
    let mnist = load_mnist(&mnist_dir()).unwrap();
    let idx: Vec<usize> = (0..200).collect();
    let images = lamp_core::data::preprocess(
        &lamp_core::data::ImageBatch::new(
            mnist.train.images.select_rows(&idx).unwrap(),
            None,
            idx.iter().map(|i| i.to_string()).collect(),
            None,
        )
        .unwrap(),
        &[PreprocessOp::Pad { height: 32, width: 32 }],
    )
    .unwrap()
    .pixels;
    let labels: Vec<usize> = idx.iter().map(|&i| mnist.train.classes[i] as usize).collect();
    let k = infer_classes(&labels);
    assert_eq!(k, 10);
    let mut probe = ProbeModel::<f32>::fresh(AEConfig::new(4, 1, (32, 32)), k, 0).unwrap();
    assert_eq!(probe.params().get("head.weight").unwrap().shape()[0], 10);
    let opt = OptimizerConfig::new(OptimizerKind::Adam, 1e-3);
    let losses = encoder_probe_train(&mut probe, &images, &labels, 50, 32, &opt, 0).unwrap();
    assert_eq!(losses.len(), 50);
    let acc = probe.accuracy(&images, &labels).unwrap();
    assert!(acc > 0.9, "accuracy {acc}");

    let final_loss = probe.loss(&images, &labels).unwrap();
    let d = random_direction(probe.params(), 4, Normalization::Filter);
    let grid = loss_grid(&probe, &d, None, (-1.0, 1.0), 3, |p: &ProbeModel<f32>| p.loss(&images, &labels)).unwrap();
    assert_eq!(grid.center(), final_loss);

    assert!(probe.loss(&images, &labels[..10]).is_err());
}

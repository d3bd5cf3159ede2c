//! Helpers shared by the integration tests: independent oracles, a toy
//! network for gradient checks, and a small synthetic dataset.

#![allow(dead_code)]

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skinfair::experiment::{Scope, SplitReport};
use skinfair::features::{load_backbone, BackboneSpec};
use skinfair::ingest::{AugmentSpec, Normalization, PreprocessSpec};
use skinfair::metrics::{tpr_table, FairnessReport, MetricOptions, PredictionRecord};
use skinfair::models::{DebiasNet, ModelConfig, NetInput, Variant};
use skinfair::split::{stratified_split_by_key, Partition, Ratios};
use skinfair::synthetic::{self, SyntheticSpec};
use skinfair::train::{train, Checkpoint, Dataset, Hyperparameters, Inputs, RunManifest, TrainConfig};

/// A random prediction set with 2..=4 classes, 2..=6 groups and 5..=200
/// records.
pub fn random_predictions(rng: &mut ChaCha8Rng) -> Vec<PredictionRecord> {
    let classes = rng.random_range(2..=4usize);
    let groups = rng.random_range(2..=6u8);
    let n = rng.random_range(5..=200usize);
    let skill = rng.random_range(0.0..1.0f64);
    (0..n)
        .map(|i| {
            let label = rng.random_range(0..classes);
            let predicted = if rng.random_bool(skill) {
                label
            } else {
                rng.random_range(0..classes)
            };
            PredictionRecord {
                image_id: format!("r{i}"),
                label,
                predicted,
                scores: Vec::new(),
                group: rng.random_range(1..=groups),
                split: 0,
            }
        })
        .collect()
}

fn recall(preds: &[PredictionRecord], class: usize, group: Option<u8>) -> Option<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for p in preds {
        if p.label == class && group.is_none_or(|g| g == p.group) {
            total += 1;
            hit += usize::from(p.predicted == class);
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

fn ratio(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if hi == 0.0 {
        1.0
    } else {
        lo / hi
    }
}

fn label_set(preds: &[PredictionRecord]) -> Vec<usize> {
    let mut v: Vec<usize> = preds.iter().map(|p| p.label).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn group_set(preds: &[PredictionRecord]) -> Vec<u8> {
    let mut v: Vec<u8> = preds.iter().map(|p| p.group).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Mean of recalls over the classes present.
pub fn oracle_balanced_accuracy(preds: &[PredictionRecord], group: Option<u8>) -> Option<f64> {
    let recalls: Vec<f64> = label_set(preds)
        .into_iter()
        .filter_map(|c| recall(preds, c, group))
        .collect();
    (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Mean over classes of min/max group TPR.
pub fn oracle_eom(preds: &[PredictionRecord]) -> f64 {
    let groups = group_set(preds);
    let per_class: Vec<f64> = label_set(preds)
        .into_iter()
        .map(|c| {
            let tprs: Vec<f64> = groups.iter().filter_map(|&g| recall(preds, c, Some(g))).collect();
            ratio(&tprs)
        })
        .collect();
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

/// min/max of per-group balanced accuracy.
pub fn oracle_pqd(preds: &[PredictionRecord]) -> f64 {
    let bas: Vec<f64> = group_set(preds)
        .into_iter()
        .filter_map(|g| oracle_balanced_accuracy(preds, Some(g)))
        .collect();
    ratio(&bas)
}

/// Welford mean and sample standard deviation.
pub fn welford(values: &[f64]) -> (f64, Option<f64>) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    let std = (values.len() >= 2).then(|| (m2 / (values.len() - 1) as f64).sqrt());
    (mean, std)
}

/// Records for a 2-class, 2-group confusion given per-(class, group)
/// (correct, total) counts.
pub fn records_from_counts(cells: &[(usize, u8, usize, usize)]) -> Vec<PredictionRecord> {
    let mut out = Vec::new();
    for &(class, group, correct, total) in cells {
        for i in 0..total {
            out.push(PredictionRecord {
                image_id: format!("c{class}g{group}-{i}"),
                label: class,
                predicted: if i < correct { class } else { 1 - class },
                scores: Vec::new(),
                group,
                split: 0,
            });
        }
    }
    out
}

/// Largest elementwise relative disagreement between the autograd
/// gradient of `f` and central differences, over every parameter.
pub fn max_gradient_error<F>(params: &[Tensor], f: F) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    max_gradient_error_scaled(params, &vec![1.0; params.len()], f)
}

/// As [`max_gradient_error`], comparing against `scale[i]` times the
/// numerical gradient of parameter `i`.
pub fn max_gradient_error_scaled<F>(params: &[Tensor], scale: &[f64], f: F) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let vars: Vec<Var> = params.iter().map(|p| Var::from_tensor(p).unwrap()).collect();
    let live: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&live).backward().unwrap();
    let eval = |ps: &[Tensor]| f(ps).to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[i].as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1().unwrap())
            .unwrap_or_else(|| vec![0.0; p.elem_count()]);
        let flat: Vec<f64> = p.flatten_all().unwrap().to_vec1().unwrap();
        for (j, &a) in analytic.iter().enumerate() {
            let bumped = |delta: f64| {
                let mut v = flat.clone();
                v[j] += delta;
                let mut ps = params.to_vec();
                ps[i] = Tensor::from_vec(v, p.shape(), p.device()).unwrap();
                eval(&ps)
            };
            let numeric = scale[i] * (bumped(h) - bumped(-h)) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Deterministic f64 matrix with entries in [-1, 1).
pub fn toy_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (rows, cols), &Device::Cpu).unwrap()
}

/// A small synthetic image dataset held in memory, with the train split
/// first and the test split after it.
pub struct ToyImages {
    pub data: Dataset,
    pub n_train: usize,
}

pub fn toy_images(n_per_cell: usize, size: u32, seed: u64) -> ToyImages {
    let spec = SyntheticSpec {
        n_per_cell,
        test_n_per_cell: n_per_cell.div_ceil(2),
        image_size: size,
        rho: 0.5,
        seed,
        ..SyntheticSpec::default()
    };
    let set = synthetic::generate(&spec).unwrap();
    let n_train = set.train.len();
    let samples: Vec<_> = set.train.into_iter().chain(set.test).collect();
    let pre = PreprocessSpec {
        target_size: size,
        augment: AugmentSpec::default(),
        augment_enabled: true,
        normalization: Normalization::UNIT,
    };
    let data = Dataset::new(
        samples.iter().map(|s| s.image_id.clone()).collect(),
        Inputs::ImagesInMemory {
            images: samples.iter().map(|s| s.image.clone()).collect(),
            spec: pre,
        },
        samples.iter().map(|s| s.label).collect(),
        samples.iter().map(|s| s.tone).collect(),
    )
    .unwrap();
    ToyImages { data, n_train }
}

/// Count of each label in `batch`.
pub fn label_counts(batch: &[usize], labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &i in batch {
        *m.entry(labels[i]).or_default() += 1;
    }
    m
}

pub const TOY_SEED: u64 = 17;

/// Train/val split of the toy training images; the test partition is the
/// toy test set.
pub fn toy_split(toy: &ToyImages) -> Partition {
    let keys: Vec<(u8, usize)> = (0..toy.n_train).map(|i| (toy.data.tones[i], toy.data.labels[i])).collect();
    let mut p = stratified_split_by_key(&keys, &Ratios { train: 0.8, val: 0.2, test: 0.0 }, TOY_SEED).unwrap();
    p.test = (toy.n_train..toy.data.len()).collect();
    p
}

/// Train `model` on the toy images through a small trainable CNN.
pub fn train_toy(model: ModelConfig, epochs: usize, toy: &ToyImages) -> (DebiasNet, Checkpoint, RunManifest) {
    let dev = Device::Cpu;
    let spec = BackboneSpec::small_cnn(16, [4, 8, 8]);
    let backbone = load_backbone(&spec, TOY_SEED, &dev).unwrap();
    let checksum = backbone.checksum().to_string();
    let net = DebiasNet::new(model.clone(), NetInput::Images(backbone), TOY_SEED, &dev).unwrap();
    let mut cfg = TrainConfig::new(model, spec, TOY_SEED);
    cfg.hyper = Hyperparameters {
        epochs,
        batch_size: 16,
        ..Hyperparameters::default()
    };
    let out = train(&cfg, &net, &checksum, &toy.data, &toy_split(toy), 0).unwrap();
    (net, out.checkpoint, out.manifest)
}

/// Every batch task loss of a run, in order.
pub fn task_curve(m: &RunManifest) -> Vec<f64> {
    m.history.iter().flat_map(|e| e.task_losses.iter().copied()).collect()
}

/// Five values with the given mean and sample standard deviation.
pub fn five_splits(mean: f64, std: f64) -> Vec<f64> {
    // Offsets -2..=2 have sample standard deviation sqrt(2.5).
    (0..5).map(|k| mean + std * (k as f64 - 2.0) / 2.5f64.sqrt()).collect()
}

/// Per-split reports carrying only an EOM value.
pub fn eom_reports(variant: Variant, backbone: &str, index: usize, scope: Scope, eom: &[f64]) -> Vec<SplitReport> {
    eom.iter()
        .enumerate()
        .map(|(split, &v)| SplitReport {
            variant,
            backbone: backbone.to_string(),
            backbone_index: index,
            split,
            scope,
            options: MetricOptions::default(),
            report: FairnessReport {
                n: 0,
                tpr: tpr_table(&[]),
                group_balanced_accuracy: BTreeMap::new(),
                balanced_accuracy: Some(0.5 + 0.01 * index as f64),
                eom: Some(v),
                pqd: None,
            },
            tone_probe: None,
        })
        .collect()
}

/// The published malignant-lesion EOM table as (variant, [(mean, std)])
/// over ResNet-152 internal/external and LesionCLIP internal/external.
pub const CANCER_EOM: [(Variant, [(f64, f64); 4]); 4] = [
    (Variant::Baseline, [(0.77, 0.11), (0.42, 0.05), (0.68, 0.17), (0.47, 0.00)]),
    (Variant::FairDisco, [(0.81, 0.07), (0.39, 0.04), (0.76, 0.11), (0.52, 0.09)]),
    (Variant::Tabe, [(0.79, 0.06), (0.45, 0.17), (0.82, 0.05), (0.56, 0.11)]),
    (Variant::Vae, [(0.77, 0.04), (0.46, 0.10), (0.76, 0.08), (0.49, 0.10)]),
];

pub const CANCER_COLUMNS: [(&str, usize, Scope); 4] = [
    ("ResNet-152", 0, Scope::Internal),
    ("ResNet-152", 0, Scope::External),
    ("LesionCLIP", 1, Scope::Internal),
    ("LesionCLIP", 1, Scope::External),
];

/// Five-split reports whose aggregate is the published table.
pub fn cancer_reports() -> Vec<SplitReport> {
    let mut out = Vec::new();
    for (variant, cells) in CANCER_EOM {
        for ((b, i, s), (m, sd)) in CANCER_COLUMNS.into_iter().zip(cells) {
            out.extend(eom_reports(variant, b, i, s, &five_splits(m, sd)));
        }
    }
    out
}

pub const CANCER_TABLE_ROWS: [&str; 4] = [
    "| Baseline | 0.77 ± 0.11 | 0.42 ± 0.05 | 0.68 ± 0.17 | 0.47 ± 0.00 |",
    "| FairDisCo | **0.81 ± 0.07** | 0.39 ± 0.04 | 0.76 ± 0.11 | 0.52 ± 0.09 |",
    "| TABE | 0.79 ± 0.06 | 0.45 ± 0.17 | **0.82 ± 0.05** | **0.56 ± 0.11** |",
    "| VAE | 0.77 ± 0.04 | **0.46 ± 0.10** | 0.76 ± 0.08 | 0.49 ± 0.10 |",
];

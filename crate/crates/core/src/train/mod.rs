//! Training loop, evaluation passes, checkpoints and run manifests.

mod checkpoint;
mod data;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use data::{Dataset, Inputs};

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use candle_core::Var;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::BackboneSpec;
use crate::metrics::{balanced_accuracy, PredictionRecord, ToneGrouping};
use crate::models::{adaptive_resampling_weights, mix_with_uniform, DebiasNet, LossBreakdown, ModelConfig, Variant};
use crate::nn::{mix_seed, Adam};
use crate::split::{condition_balanced_batches, weighted_condition_batches, BalancePolicy, BatchPlan, Partition};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

/// Which epoch's weights a run keeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelection {
    /// Best validation balanced accuracy, earliest epoch on ties.
    #[default]
    BestValidation,
    /// The last epoch.
    FinalEpoch,
}

impl CheckpointSelection {
    pub fn describe(self) -> &'static str {
        match self {
            CheckpointSelection::BestValidation => "best validation balanced accuracy, earliest epoch on ties",
            CheckpointSelection::FinalEpoch => "final epoch",
        }
    }
}

/// Optimization settings. The defaults are the reference protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub balance: BalancePolicy,
    /// Positive-class score threshold used for validation accuracy.
    pub threshold: f64,
    /// Learning rate of the tone adversary relative to `learning_rate`.
    pub adversary_lr_scale: f64,
    /// Tone-head updates per batch, each on the same detached features.
    pub adversary_steps: usize,
    pub selection: CheckpointSelection,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            lr_step: 2,
            lr_gamma: 0.1,
            balance: BalancePolicy::Oversample,
            threshold: 0.5,
            adversary_lr_scale: 1.0,
            adversary_steps: 1,
            selection: CheckpointSelection::BestValidation,
        }
    }
}

impl Hyperparameters {
    /// Step decay: `lr * gamma^floor(epoch / step)`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = if self.lr_step == 0 { 0 } else { epoch / self.lr_step };
        self.learning_rate * self.lr_gamma.powi(decays as i32)
    }

    /// `field=value` for every setting that differs from the defaults.
    pub fn overrides(&self) -> Vec<String> {
        let mine = serde_json::to_value(self).expect("serializable");
        let reference = serde_json::to_value(Self::default()).expect("serializable");
        let (Some(mine), Some(reference)) = (mine.as_object(), reference.as_object()) else {
            return Vec::new();
        };
        mine.iter()
            .filter(|(k, v)| reference.get(*k) != Some(*v))
            .map(|(k, v)| format!("{k}={v}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hyper: Hyperparameters,
    pub seed: u64,
    pub model: ModelConfig,
    pub backbone: BackboneSpec,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, backbone: BackboneSpec, seed: u64) -> Self {
        Self {
            hyper: Hyperparameters::default(),
            seed,
            model,
            backbone,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Task loss of every batch, in order.
    pub task_losses: Vec<f64>,
    /// Batch means of each loss component.
    pub mean_components: BTreeMap<String, f64>,
    pub val_balanced_accuracy: Option<f64>,
}

/// Provenance of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub config: TrainConfig,
    pub overrides: Vec<String>,
    pub dataset_checksum: String,
    pub split_index: usize,
    pub split_seed: Option<u64>,
    pub split_sizes: [usize; 3],
    pub weights_checksums: BTreeMap<String, String>,
    pub selected_epoch: usize,
    pub selection_rule: String,
    pub wall_clock_seconds: f64,
    pub history: Vec<EpochLog>,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

pub struct TrainOutcome {
    /// Best-validation snapshot; also loaded into the network.
    pub checkpoint: Checkpoint,
    pub manifest: RunManifest,
}

/// Digest of the ids, labels and tones a run consumed.
pub fn dataset_checksum(data: &Dataset) -> String {
    let mut h = Sha256::new();
    for i in 0..data.len() {
        h.update(data.ids[i].as_bytes());
        h.update([0, data.labels[i] as u8, data.tones[i]]);
    }
    hex::encode(h.finalize())
}

/// Fail if any training record also appears among validation or test
/// records, by index or by id.
pub fn check_no_leakage(data: &Dataset, split: &Partition) -> Result<()> {
    let train: BTreeSet<usize> = split.train.iter().copied().collect();
    let train_ids: BTreeSet<&str> = split.train.iter().map(|&i| data.ids[i].as_str()).collect();
    for (name, idx) in [("val", &split.val), ("test", &split.test)] {
        if let Some(&i) = idx
            .iter()
            .find(|&&i| train.contains(&i) || train_ids.contains(data.ids[i].as_str()))
        {
            return Err(Error::invalid(format!("record {} is in both train and {name}", data.ids[i])));
        }
    }
    Ok(())
}

/// Train `net` on `split.train`, keeping the epoch chosen by
/// `hyper.selection` (by default the best validation balanced accuracy,
/// ties keeping the earlier epoch). The kept weights are left loaded in
/// `net`.
pub fn train(
    config: &TrainConfig,
    net: &DebiasNet,
    backbone_checksum: &str,
    data: &Dataset,
    split: &Partition,
    split_index: usize,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let hp = &config.hyper;
    if net.config() != &config.model {
        return Err(Error::config("network and training configuration disagree on the model"));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation partitions"));
    }
    check_no_leakage(data, split)?;
    let num_classes = config.model.num_classes;
    if let Some(l) = data.labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::invalid(format!("label {l} outside {num_classes} classes")));
    }
    match (data.inputs.embedding_dim(), net.input_dim()) {
        (a, b) if a == b => {}
        (a, b) => return Err(Error::invalid(format!("dimension mismatch: data {a:?}, network {b:?}"))),
    }

    let vars = |p: crate::nn::Params| p.into_iter().map(|(_, v)| v).collect::<Vec<Var>>();
    let mut main_opt = Adam::new(vars(net.main_params()), hp.learning_rate);
    let adversary = net.adversary_params();
    let mut aux_opt = (!adversary.is_empty()).then(|| Adam::new(vars(adversary), hp.learning_rate));

    let plan = BatchPlan {
        batch_size: hp.batch_size,
        policy: hp.balance,
    };
    let train_labels: Vec<usize> = split.train.iter().map(|&i| data.labels[i]).collect();
    let mut history = Vec::with_capacity(hp.epochs);
    let mut best: Option<Checkpoint> = None;
    let device = net.device().clone();

    for epoch in 0..hp.epochs {
        let lr = hp.learning_rate_at(epoch);
        main_opt.lr = lr;
        if let Some(o) = aux_opt.as_mut() {
            o.lr = lr * hp.adversary_lr_scale;
        }
        let epoch_seed = mix_seed(config.seed, &[1, epoch as u64]);
        let batches = match resampling_weights(net, data, split, &train_labels, epoch)? {
            Some(w) => weighted_condition_batches(&train_labels, &w, num_classes, &plan, epoch_seed)?,
            None => condition_balanced_batches(&train_labels, num_classes, &plan, epoch_seed)?,
        };

        let mut task_losses = Vec::with_capacity(batches.len());
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for (b, local) in batches.iter().enumerate() {
            let idx: Vec<usize> = local.iter().map(|&j| split.train[j]).collect();
            let x = data
                .inputs
                .batch(&idx, Some(mix_seed(config.seed, &[2, epoch as u64])), &device)?;
            let labels: Vec<u32> = idx.iter().map(|&i| data.labels[i] as u32).collect();
            let tones: Vec<u8> = idx.iter().map(|&i| data.tones[i]).collect();
            let fwd = net.forward(&x)?;

            if let Some(opt) = aux_opt.as_mut() {
                let features = fwd.features.detach();
                for step in 0..hp.adversary_steps.max(1) {
                    let aux = net.tone_aux_loss(&features, &tones)?;
                    let v = crate::models::losses::scalar(&aux)?;
                    if !v.is_finite() {
                        return Err(non_finite(epoch, b, &idx, data, best));
                    }
                    opt.step(&aux.backward()?)?;
                    if step == 0 {
                        *sums.entry(TONE_AUX.into()).or_default() += v;
                    }
                }
            }

            let noise_seed = mix_seed(config.seed, &[3, epoch as u64, b as u64]);
            let (total, breakdown) = net.objective(&fwd, &x, &labels, &tones, noise_seed)?;
            if !breakdown.total.is_finite() {
                return Err(non_finite(epoch, b, &idx, data, best));
            }
            main_opt.step(&total.backward()?)?;
            accumulate(&mut sums, &breakdown);
            task_losses.push(breakdown.component(crate::models::losses::TASK).unwrap_or(f64::NAN));
        }

        let val = predict(net, data, &split.val, split_index, ToneGrouping::Fine, hp.threshold)?;
        let val_ba = balanced_accuracy(&val, None);
        let n = batches.len().max(1) as f64;
        log::info!(
            "epoch {epoch}: lr {lr:.2e}, task loss {:.4}, val BA {}",
            sums.get(crate::models::losses::TASK).copied().unwrap_or(0.0) / n,
            val_ba.map_or("-".into(), |v| format!("{v:.4}"))
        );
        history.push(EpochLog {
            epoch,
            learning_rate: lr,
            task_losses,
            mean_components: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            val_balanced_accuracy: val_ba,
        });
        let score = val_ba.unwrap_or(f64::NEG_INFINITY);
        let keep = match hp.selection {
            CheckpointSelection::BestValidation => best.as_ref().is_none_or(|c| score > c.meta.val_balanced_accuracy),
            CheckpointSelection::FinalEpoch => true,
        };
        if keep {
            best = Some(Checkpoint::capture(net, &config.backbone, backbone_checksum, epoch, score)?);
        }
    }

    let checkpoint = best.ok_or_else(|| Error::config("epochs must be at least 1"))?;
    checkpoint.restore(net)?;
    let mut weights_checksums = BTreeMap::new();
    weights_checksums.insert("backbone".to_string(), backbone_checksum.to_string());
    weights_checksums.insert("checkpoint".to_string(), checkpoint.weights_checksum()?);
    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        overrides: hp.overrides(),
        dataset_checksum: dataset_checksum(data),
        split_index,
        split_seed: None,
        split_sizes: [split.train.len(), split.val.len(), split.test.len()],
        weights_checksums,
        selected_epoch: checkpoint.meta.epoch,
        selection_rule: hp.selection.describe().into(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        history,
        metrics: BTreeMap::new(),
        notes: Vec::new(),
    };
    Ok(TrainOutcome { checkpoint, manifest })
}

/// History key of the tone head's own cross-entropy in TABE runs.
pub const TONE_AUX: &str = "tone_aux";

fn accumulate(sums: &mut BTreeMap<String, f64>, b: &LossBreakdown) {
    for (k, v) in &b.components {
        *sums.entry(k.clone()).or_default() += v;
    }
    *sums.entry("total".into()).or_default() += b.total;
}

fn non_finite(epoch: usize, batch: usize, idx: &[usize], data: &Dataset, best: Option<Checkpoint>) -> Error {
    let ids: Vec<&str> = idx.iter().take(8).map(|&i| data.ids[i].as_str()).collect();
    log::error!("non-finite loss at epoch {epoch}, batch {batch}; first records {ids:?}");
    Error::NonFiniteLoss {
        epoch,
        batch,
        last_good: best.map(Box::new),
    }
}

/// Per-sample weights for the density-adaptive variant, computed within
/// each condition from the current posterior means. `None` means plain
/// condition-balanced sampling.
fn resampling_weights(
    net: &DebiasNet,
    data: &Dataset,
    split: &Partition,
    train_labels: &[usize],
    epoch: usize,
) -> Result<Option<Vec<f64>>> {
    let cfg = net.config();
    let strength = cfg.resample_strength.unwrap_or(0.0);
    if cfg.variant != Variant::Vae || strength == 0.0 || epoch == 0 {
        return Ok(None);
    }
    let latents = features(net, data, &split.train)?;
    let mut weights = vec![0.0; train_labels.len()];
    for c in 0..cfg.num_classes {
        let members: Vec<usize> = (0..train_labels.len()).filter(|&j| train_labels[j] == c).collect();
        if members.is_empty() {
            continue;
        }
        let z: Vec<Vec<f64>> = members.iter().map(|&j| latents[j].clone()).collect();
        let w = adaptive_resampling_weights(&z, cfg.resample_bins.unwrap_or(10), cfg.resample_eps.unwrap_or(1e-6))?;
        for (&j, w) in members.iter().zip(mix_with_uniform(&w, strength)) {
            weights[j] = w;
        }
    }
    Ok(Some(weights))
}

/// Shared representations of the given records, without augmentation.
pub fn features(net: &DebiasNet, data: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = data.inputs.batch(chunk, None, net.device())?;
        let f: Vec<Vec<f64>> = net.forward(&x)?.features.to_dtype(candle_core::DType::F64)?.to_vec2()?;
        out.extend(f);
    }
    Ok(out)
}

/// One prediction per record at `indices`, without augmentation.
pub fn predict(
    net: &DebiasNet,
    data: &Dataset,
    indices: &[usize],
    split_index: usize,
    grouping: ToneGrouping,
    threshold: f64,
) -> Result<Vec<PredictionRecord>> {
    if data.inputs.embedding_dim() != net.input_dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: data {:?}, network {:?}",
            data.inputs.embedding_dim(),
            net.input_dim()
        )));
    }
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = data.inputs.batch(chunk, None, net.device())?;
        let probs = net.predict_proba(&x)?;
        for (&i, scores) in chunk.iter().zip(probs) {
            let predicted = if scores.len() == 2 {
                usize::from(scores[1] >= threshold)
            } else {
                scores
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, &s)| if s > acc.1 { (k, s) } else { acc })
                    .0
            };
            out.push(PredictionRecord {
                image_id: data.ids[i].clone(),
                label: data.labels[i],
                predicted,
                scores,
                group: grouping.group(data.tones[i]),
                split: split_index,
            });
        }
    }
    Ok(out)
}

/// Rebuild the network stored in `checkpoint` and predict `indices`.
pub fn evaluate(
    checkpoint: &Checkpoint,
    data: &Dataset,
    indices: &[usize],
    split_index: usize,
    grouping: ToneGrouping,
    threshold: f64,
    device: &candle_core::Device,
) -> Result<Vec<PredictionRecord>> {
    if data.inputs.embedding_dim() != checkpoint.meta.input_dim {
        return Err(Error::invalid(format!(
            "dimension mismatch: data {:?}, checkpoint {:?}",
            data.inputs.embedding_dim(),
            checkpoint.meta.input_dim
        )));
    }
    let net = checkpoint.build_net(device)?;
    predict(&net, data, indices, split_index, grouping, threshold)
}

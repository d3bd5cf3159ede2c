use std::collections::{BTreeSet, HashMap};

use candle_core::{DType, Device, Tensor, D};
use candle_nn::ops::{sigmoid, softmax};

use super::config::{ModelConfig, Variant};
use super::losses::{
    self, confusion_from_logits, cross_entropy, gaussian_noise, gradient_reversal, kl_standard_normal,
    reconstruction_error, supervised_contrastive, task_loss, LossBreakdown, Objective,
};
use crate::error::{Error, Result};
use crate::features::Backbone;
use crate::nn::{Linear, Params};

/// Longest image side the reconstruction branch works on.
pub const RECON_MAX_SIDE: usize = 64;

/// What the network consumes.
pub enum NetInput {
    /// Precomputed embeddings of the given width.
    Embeddings(usize),
    /// Raw pixels through a backbone owned by the network.
    Images(Backbone),
}

enum Trunk {
    Mlp(Linear),
    Backbone(Backbone),
}

/// Intermediate activations of one forward pass.
pub struct Forward {
    /// Trunk output the feature layer reads.
    pub pre: Tensor,
    /// Shared representation; the posterior mean for the VAE variant.
    pub features: Tensor,
    /// Class logits: shape (batch,) for binary tasks.
    pub logits: Tensor,
}

/// Losses of one TABE step.
pub struct TabeLosses {
    /// Task loss plus weighted confusion; for the trunk and class head.
    pub main: Tensor,
    /// Tone-head cross-entropy on detached features; for the tone head.
    pub aux: Tensor,
    pub breakdown: LossBreakdown,
}

/// Trunk, linear feature layer, class head and the variant's extra heads.
pub struct DebiasNet {
    config: ModelConfig,
    trunk: Trunk,
    feature: Linear,
    class_head: Linear,
    tone_head: Option<Linear>,
    projection: Option<Linear>,
    logvar_head: Option<Linear>,
    decoder: Option<(Linear, Linear)>,
    recon_side: Option<usize>,
    device: Device,
}

impl DebiasNet {
    pub fn new(config: ModelConfig, input: NetInput, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let dt = DType::F32;
        let (trunk, pre_dim, recon_dim, recon_side) = match input {
            NetInput::Embeddings(dim) => {
                let l = Linear::new("trunk", dim, config.hidden_dim, seed, dt, device)?;
                (Trunk::Mlp(l), config.hidden_dim, dim, None)
            }
            NetInput::Images(b) => {
                let side = (b.spec().input_size as usize).min(RECON_MAX_SIDE);
                let d = b.embedding_dim();
                (Trunk::Backbone(b), d, 3 * side * side, Some(side))
            }
        };
        let fd = config.feature_dim;
        let feature = Linear::new("feature", pre_dim, fd, seed, dt, device)?;
        let class_head = Linear::new("class_head", fd, config.logit_dim(), seed, dt, device)?;
        let k = config.num_tone_groups();
        let (mut tone_head, mut projection, mut logvar_head, mut decoder) = (None, None, None, None);
        match config.variant {
            Variant::Baseline => {}
            Variant::Tabe => tone_head = Some(Linear::new("tone_head", fd, k, seed, dt, device)?),
            Variant::FairDisco => {
                tone_head = Some(Linear::new("tone_head", fd, k, seed, dt, device)?);
                let p = config.projection_dim.unwrap_or(fd);
                projection = Some(Linear::new("projection", fd, p, seed, dt, device)?);
            }
            Variant::Vae => {
                logvar_head = Some(Linear::new("logvar_head", pre_dim, fd, seed, dt, device)?);
                let h = config.decoder_hidden.unwrap_or(fd);
                decoder = Some((
                    Linear::new("decoder.0", fd, h, seed, dt, device)?,
                    Linear::new("decoder.1", h, recon_dim, seed, dt, device)?,
                ));
            }
        }
        let net = Self {
            config,
            trunk,
            feature,
            class_head,
            tone_head,
            projection,
            logvar_head,
            decoder,
            recon_side,
            device: device.clone(),
        };
        net.check_partition()?;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn backbone(&self) -> Option<&Backbone> {
        match &self.trunk {
            Trunk::Backbone(b) => Some(b),
            Trunk::Mlp(_) => None,
        }
    }

    /// Width of embedding inputs, or `None` for image inputs.
    pub fn input_dim(&self) -> Option<usize> {
        match &self.trunk {
            Trunk::Mlp(l) => Some(l.in_dim()),
            Trunk::Backbone(_) => None,
        }
    }

    fn trunk_params(&self) -> Params {
        let mut p = match &self.trunk {
            Trunk::Mlp(l) => l.params(),
            Trunk::Backbone(b) => b.params(),
        };
        p.extend(self.feature.params());
        p
    }

    /// Parameters updated by the auxiliary (tone-head) step. Empty unless
    /// the variant alternates.
    pub fn adversary_params(&self) -> Params {
        match (self.config.variant, &self.tone_head) {
            (Variant::Tabe, Some(h)) => h.params(),
            _ => Vec::new(),
        }
    }

    /// Parameters updated by the main step.
    pub fn main_params(&self) -> Params {
        let mut p = self.trunk_params();
        p.extend(self.class_head.params());
        if self.config.variant != Variant::Tabe {
            if let Some(h) = &self.tone_head {
                p.extend(h.params());
            }
        }
        for l in [&self.projection, &self.logvar_head].into_iter().flatten() {
            p.extend(l.params());
        }
        if let Some((a, b)) = &self.decoder {
            p.extend(a.params());
            p.extend(b.params());
        }
        p
    }

    pub fn all_params(&self) -> Params {
        let mut p = self.main_params();
        p.extend(self.adversary_params());
        p
    }

    fn check_partition(&self) -> Result<()> {
        let main: BTreeSet<String> = self.main_params().into_iter().map(|(n, _)| n).collect();
        let overlap: Vec<String> = self
            .adversary_params()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| main.contains(n))
            .collect();
        if overlap.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("parameters shared by main and auxiliary steps: {overlap:?}")))
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Forward> {
        let pre = match &self.trunk {
            Trunk::Mlp(l) => l.forward(x)?.relu()?,
            Trunk::Backbone(b) => b.forward(x)?,
        };
        let features = self.feature.forward(&pre)?;
        let logits = self.class_logits(&features)?;
        Ok(Forward { pre, features, logits })
    }

    pub fn class_logits(&self, features: &Tensor) -> Result<Tensor> {
        let out = self.class_head.forward(features)?;
        Ok(if self.config.logit_dim() == 1 { out.squeeze(1)? } else { out })
    }

    /// Class probabilities, one row per input.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let logits = self.forward(x)?.logits.to_dtype(DType::F64)?;
        if logits.rank() == 1 {
            let p: Vec<f64> = sigmoid(&logits)?.to_vec1()?;
            Ok(p.into_iter().map(|p| vec![1.0 - p, p]).collect())
        } else {
            Ok(softmax(&logits, D::Minus1)?.to_vec2()?)
        }
    }

    fn tone_targets(&self, tones: &[u8]) -> Result<Vec<u32>> {
        let g = self.config.adversary_grouping;
        tones
            .iter()
            .map(|&t| {
                if (1..=6).contains(&t) {
                    Ok(u32::from(g.group(t)) - 1)
                } else {
                    Err(Error::invalid(format!("tone {t} outside 1..=6")))
                }
            })
            .collect()
    }

    fn tone_head(&self) -> Result<&Linear> {
        self.tone_head
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{} has no tone head", self.config.variant)))
    }

    /// Tone-head cross-entropy on detached features.
    pub fn tone_aux_loss(&self, features: &Tensor, tones: &[u8]) -> Result<Tensor> {
        let logits = self.tone_head()?.forward(&features.detach())?;
        cross_entropy(&logits, &self.tone_targets(tones)?)
    }

    /// Both TABE objectives for one batch.
    pub fn tabe_step_losses(&self, features: &Tensor, labels: &[u32], tones: &[u8]) -> Result<TabeLosses> {
        if self.config.variant != Variant::Tabe {
            return Err(Error::invalid("tabe_step_losses requires the TABE variant"));
        }
        let aux = self.tone_aux_loss(features, tones)?;
        let (main, breakdown) = self.tabe_main(features, labels)?;
        Ok(TabeLosses { main, aux, breakdown })
    }

    fn tabe_main(&self, features: &Tensor, labels: &[u32]) -> Result<(Tensor, LossBreakdown)> {
        let mut o = Objective::new(task_loss(&self.class_logits(features)?, labels)?)?;
        let alpha = self.config.alpha_confusion.unwrap_or(0.0);
        let tone_logits = self.tone_head()?.forward(features)?;
        o.add(losses::CONFUSION, alpha, &confusion_from_logits(&tone_logits)?)?;
        o.finish()
    }

    /// Task loss, tone adversary behind gradient reversal, and supervised
    /// contrastive loss on the projection head.
    pub fn fairdisco_loss(&self, features: &Tensor, labels: &[u32], tones: &[u8]) -> Result<(Tensor, LossBreakdown)> {
        if self.config.variant != Variant::FairDisco {
            return Err(Error::invalid("fairdisco_loss requires the FairDisCo variant"));
        }
        let mut o = Objective::new(task_loss(&self.class_logits(features)?, labels)?)?;
        let lambda = self.config.lambda_reversal.unwrap_or(0.0);
        let reversed = gradient_reversal(features, 1.0)?;
        let tone_logits = self.tone_head()?.forward(&reversed)?;
        o.add(losses::TONE_ADVERSARY, lambda, &cross_entropy(&tone_logits, &self.tone_targets(tones)?)?)?;

        let beta = self.config.beta_contrastive.unwrap_or(0.0);
        let tau = self.config.temperature.unwrap_or(0.1);
        let proj = self
            .projection
            .as_ref()
            .ok_or_else(|| Error::invalid("missing projection head"))?
            .forward(features)?;
        match supervised_contrastive(&proj, labels, tau)? {
            Some(c) => o.add(losses::CONTRASTIVE, beta, &c)?,
            None => {
                log::warn!("batch has no same-class pair; contrastive term set to 0");
                o.add(losses::CONTRASTIVE, beta, &Tensor::new(0f32, &self.device)?)?;
            }
        }
        o.finish()
    }

    /// Target of the reconstruction branch for a batch of inputs.
    pub fn reconstruction_target(&self, x: &Tensor) -> Result<Tensor> {
        match self.recon_side {
            None => Ok(x.detach()),
            Some(side) => {
                let (n, _, h, w) = x.dims4()?;
                let small = if h == side && w == side {
                    x.clone()
                } else {
                    x.upsample_nearest2d(side, side)?
                };
                Ok(small.reshape((n, ()))?.detach())
            }
        }
    }

    /// Reconstruction, KL and task terms. The posterior mean is the shared
    /// feature vector; the classifier reads it, the decoder reads a sample.
    pub fn vae_losses(
        &self,
        fwd: &Forward,
        x: &Tensor,
        labels: &[u32],
        noise_seed: u64,
    ) -> Result<(Tensor, LossBreakdown)> {
        if self.config.variant != Variant::Vae {
            return Err(Error::invalid("vae_losses requires the VAE variant"));
        }
        let (lv_head, (dec0, dec1)) = match (&self.logvar_head, &self.decoder) {
            (Some(l), Some(d)) => (l, d),
            _ => return Err(Error::invalid("VAE heads missing")),
        };
        let mean = &fwd.features;
        let logvar = lv_head.forward(&fwd.pre)?;
        let kl = kl_standard_normal(mean, &logvar)?;
        let eps = gaussian_noise(mean.dims2()?, noise_seed, mean.dtype(), &self.device)?;
        let z = (mean + (logvar * 0.5)?.exp()?.mul(&eps)?)?;
        let recon = dec1.forward(&dec0.forward(&z)?.relu()?)?;
        let rec = reconstruction_error(&recon, &self.reconstruction_target(x)?)?;

        let mut o = Objective::new(task_loss(&fwd.logits, labels)?)?;
        o.add(losses::RECONSTRUCTION, self.config.rho_recon.unwrap_or(0.0), &rec)?;
        o.add(losses::KL, self.config.kappa_kl.unwrap_or(0.0), &kl)?;
        o.finish()
    }

    /// The main-step objective of the configured variant.
    pub fn objective(
        &self,
        fwd: &Forward,
        x: &Tensor,
        labels: &[u32],
        tones: &[u8],
        noise_seed: u64,
    ) -> Result<(Tensor, LossBreakdown)> {
        match self.config.variant {
            Variant::Baseline => Objective::new(task_loss(&fwd.logits, labels)?)?.finish(),
            Variant::Tabe => self.tabe_main(&fwd.features, labels),
            Variant::FairDisco => self.fairdisco_loss(&fwd.features, labels, tones),
            Variant::Vae => self.vae_losses(fwd, x, labels, noise_seed),
        }
    }

    /// Trainable values by name, for checkpoints.
    pub fn state(&self) -> Result<Vec<(String, Tensor)>> {
        Ok(self
            .all_params()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect())
    }

    /// Overwrite trainable values from a checkpoint.
    pub fn load_state(&self, state: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.all_params() {
            let t = state
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::invalid(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::losses::scalar;

    fn batch(n: usize, d: usize) -> (Tensor, Vec<u32>, Vec<u8>) {
        let x: Vec<f32> = (0..n * d).map(|i| ((i * 37 % 17) as f32 / 8.0) - 1.0).collect();
        let x = Tensor::from_vec(x, (n, d), &Device::Cpu).unwrap();
        let y = (0..n).map(|i| (i % 2) as u32).collect();
        let t = (0..n).map(|i| (i % 6 + 1) as u8).collect();
        (x, y, t)
    }

    fn net(config: ModelConfig) -> DebiasNet {
        let mut config = config;
        config.hidden_dim = 16;
        config.feature_dim = 8;
        if config.decoder_hidden.is_some() {
            config.decoder_hidden = Some(8);
        }
        DebiasNet::new(config, NetInput::Embeddings(5), 3, &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_weights_reduce_every_variant_to_the_task_loss() {
        let (x, y, t) = batch(8, 5);
        let base = net(ModelConfig::new(Variant::Baseline));
        let fwd = base.forward(&x).unwrap();
        let (reference, _) = base.objective(&fwd, &x, &y, &t, 0).unwrap();
        let reference = scalar(&reference).unwrap();
        for v in [Variant::Tabe, Variant::FairDisco, Variant::Vae] {
            let m = net(ModelConfig::new(v).with_debias_weights_zeroed());
            let fwd = m.forward(&x).unwrap();
            let (total, b) = m.objective(&fwd, &x, &y, &t, 0).unwrap();
            assert_eq!(scalar(&total).unwrap().to_bits(), reference.to_bits(), "{v}");
            assert!(b.is_consistent());
        }
    }

    #[test]
    fn tabe_partition_is_disjoint_and_uniform_head_adds_ln_k() {
        let m = net(ModelConfig::new(Variant::Tabe));
        let aux: BTreeSet<_> = m.adversary_params().into_iter().map(|(n, _)| n).collect();
        assert!(!aux.is_empty());
        assert!(m.main_params().iter().all(|(n, _)| !aux.contains(n)));

        for (_, v) in m.adversary_params() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let (x, y, t) = batch(6, 5);
        let fwd = m.forward(&x).unwrap();
        let l = m.tabe_step_losses(&fwd.features, &y, &t).unwrap();
        let task = l.breakdown.component(losses::TASK).unwrap();
        assert!((l.breakdown.total - (task + 6f64.ln())).abs() < 1e-5);
        assert!((scalar(&l.aux).unwrap() - 6f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn state_round_trip() {
        let a = net(ModelConfig::new(Variant::Vae));
        let mut b_cfg = ModelConfig::new(Variant::Vae);
        b_cfg.hidden_dim = 16;
        b_cfg.feature_dim = 8;
        b_cfg.decoder_hidden = Some(8);
        let b = DebiasNet::new(b_cfg, NetInput::Embeddings(5), 99, &Device::Cpu).unwrap();
        let state: HashMap<_, _> = a.state().unwrap().into_iter().collect();
        b.load_state(&state).unwrap();
        let (x, _, _) = batch(4, 5);
        assert_eq!(a.predict_proba(&x).unwrap(), b.predict_proba(&x).unwrap());
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ToneGrouping;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Tabe,
    #[serde(alias = "fair_disco")]
    FairDisco,
    Vae,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::FairDisco, Variant::Tabe, Variant::Vae];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Tabe => "tabe",
            Variant::FairDisco => "fairdisco",
            Variant::Vae => "vae",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Tabe => "TABE",
            Variant::FairDisco => "FairDisCo",
            Variant::Vae => "VAE",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "baseline" => Ok(Variant::Baseline),
            "tabe" => Ok(Variant::Tabe),
            "fairdisco" => Ok(Variant::FairDisco),
            "vae" => Ok(Variant::Vae),
            other => Err(Error::config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Architecture and loss weights of one model variant.
///
/// Loss weights and variant-specific hyperparameters are optional: a
/// variant must leave every setting that belongs to another variant unset
/// (or, for loss weights, zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    /// Granularity of the tone adversary's targets.
    #[serde(default)]
    pub adversary_grouping: ToneGrouping,
    /// Width of the hidden layer placed on frozen embeddings.
    pub hidden_dim: usize,
    /// Width of the shared representation the heads read.
    pub feature_dim: usize,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_confusion: Option<f64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_reversal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_contrastive: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_dim: Option<usize>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_recon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_hidden: Option<usize>,
    /// Mix between uniform (0) and fully density-adaptive (1) sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_strength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_eps: Option<f64>,
}

impl ModelConfig {
    /// Defaults for `variant` on a binary task.
    pub fn new(variant: Variant) -> Self {
        let mut c = Self {
            variant,
            num_classes: 2,
            adversary_grouping: ToneGrouping::Fine,
            hidden_dim: 256,
            feature_dim: 64,
            alpha_confusion: None,
            lambda_reversal: None,
            beta_contrastive: None,
            temperature: None,
            projection_dim: None,
            kappa_kl: None,
            rho_recon: None,
            decoder_hidden: None,
            resample_strength: None,
            resample_bins: None,
            resample_eps: None,
        };
        match variant {
            Variant::Baseline => {}
            Variant::Tabe => c.alpha_confusion = Some(1.0),
            Variant::FairDisco => {
                c.lambda_reversal = Some(1.0);
                c.beta_contrastive = Some(0.5);
                c.temperature = Some(0.1);
                c.projection_dim = Some(32);
            }
            Variant::Vae => {
                c.kappa_kl = Some(1.0);
                c.rho_recon = Some(1.0);
                c.decoder_hidden = Some(128);
                c.resample_strength = Some(1.0);
                c.resample_bins = Some(10);
                c.resample_eps = Some(1e-6);
            }
        }
        c
    }

    /// Same variant with every debiasing weight set to zero.
    pub fn with_debias_weights_zeroed(mut self) -> Self {
        for w in [
            &mut self.alpha_confusion,
            &mut self.lambda_reversal,
            &mut self.beta_contrastive,
            &mut self.kappa_kl,
            &mut self.rho_recon,
            &mut self.resample_strength,
        ] {
            if w.is_some() {
                *w = Some(0.0);
            }
        }
        self
    }

    pub fn num_tone_groups(&self) -> usize {
        self.adversary_grouping.num_groups()
    }

    /// Width of the class head output: one logit for binary tasks.
    pub fn logit_dim(&self) -> usize {
        if self.num_classes == 2 {
            1
        } else {
            self.num_classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        let v = self.variant;
        let weights: [(&str, Option<f64>, bool); 6] = [
            ("alpha_confusion", self.alpha_confusion, v == Variant::Tabe),
            ("lambda_reversal", self.lambda_reversal, v == Variant::FairDisco),
            ("beta_contrastive", self.beta_contrastive, v == Variant::FairDisco),
            ("kappa_kl", self.kappa_kl, v == Variant::Vae),
            ("rho_recon", self.rho_recon, v == Variant::Vae),
            ("resample_strength", self.resample_strength, v == Variant::Vae),
        ];
        for (name, value, relevant) in weights {
            match (value, relevant) {
                (None, true) => {
                    return Err(Error::config(format!("{v}: missing loss weight {name}")))
                }
                (Some(w), _) if !w.is_finite() || w < 0.0 => {
                    return Err(Error::config(format!("{name} must be a finite value >= 0")))
                }
                (Some(w), false) if w != 0.0 => {
                    return Err(Error::config(format!("{name} does not apply to {v}")))
                }
                _ => {}
            }
        }
        if self.resample_strength.is_some_and(|s| s > 1.0) {
            return Err(Error::config("resample_strength must lie in [0, 1]"));
        }
        let settings: [(&str, bool, bool); 6] = [
            ("temperature", self.temperature.is_some(), v == Variant::FairDisco),
            ("projection_dim", self.projection_dim.is_some(), v == Variant::FairDisco),
            ("decoder_hidden", self.decoder_hidden.is_some(), v == Variant::Vae),
            ("resample_bins", self.resample_bins.is_some(), v == Variant::Vae),
            ("resample_eps", self.resample_eps.is_some(), v == Variant::Vae),
            ("resample_bins", self.resample_bins.is_some_and(|b| b == 0), false),
        ];
        for (name, present, relevant) in settings {
            if present != relevant {
                return Err(Error::config(if present {
                    format!("{name} does not apply to {v}")
                } else {
                    format!("{v}: missing setting {name}")
                }));
            }
        }
        if self.temperature.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_variant() {
        for v in Variant::ALL {
            ModelConfig::new(v).validate().unwrap();
            ModelConfig::new(v).with_debias_weights_zeroed().validate().unwrap();
        }
    }

    #[test]
    fn foreign_weights_are_rejected() {
        let mut c = ModelConfig::new(Variant::Baseline);
        c.alpha_confusion = Some(0.5);
        assert!(c.validate().is_err());
        c.alpha_confusion = Some(0.0);
        c.validate().unwrap();

        let mut t = ModelConfig::new(Variant::Tabe);
        t.temperature = Some(0.1);
        assert!(t.validate().is_err());

        let mut f = ModelConfig::new(Variant::FairDisco);
        f.lambda_reversal = None;
        assert!(f.validate().is_err());

        let mut v = ModelConfig::new(Variant::Vae);
        v.resample_strength = Some(1.5);
        assert!(v.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.key().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("FairDisCo".parse::<Variant>().unwrap(), Variant::FairDisco);
        assert!("dann".parse::<Variant>().is_err());
    }
}

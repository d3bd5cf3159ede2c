//! Baseline classifier and the three bias-unlearning variants.

mod config;
pub mod losses;
mod net;
mod resample;

pub use config::{ModelConfig, Variant};
pub use losses::{
    baseline_loss, confusion_loss, gradient_reversal, kl_diag_gaussian, supervised_contrastive, LossBreakdown,
};
pub use net::{DebiasNet, Forward, NetInput, TabeLosses, RECON_MAX_SIDE};
pub use resample::{adaptive_resampling_weights, mix_with_uniform};

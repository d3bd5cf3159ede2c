//! Density-adaptive sampling weights over latent codes.

use crate::error::{Error, Result};

/// Sampling weights that favour rare regions of the latent space.
///
/// Each dimension gets a `bins`-bin histogram over its observed range; a
/// sample's weight is proportional to the product over dimensions of
/// `1 / (f_d + eps)`, where `f_d` is the relative frequency of the sample's
/// bin. With one dimension this is `1 / (density + eps)`. Products are taken
/// in log space. The result sums to one.
pub fn adaptive_resampling_weights(latents: &[Vec<f64>], bins: usize, eps: f64) -> Result<Vec<f64>> {
    let n = latents.len();
    if n == 0 {
        return Err(Error::invalid("no latent codes to weight"));
    }
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if !(eps >= 0.0) {
        return Err(Error::invalid("eps must be non-negative"));
    }
    let d = latents[0].len();
    if latents.iter().any(|z| z.len() != d) {
        return Err(Error::invalid("latent codes differ in width"));
    }
    if latents.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite latent code"));
    }

    let mut log_w = vec![0f64; n];
    for dim in 0..d {
        let (lo, hi) = latents
            .iter()
            .map(|z| z[dim])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if hi <= lo {
            continue;
        }
        let bin_of = |v: f64| (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
        let mut counts = vec![0usize; bins];
        for z in latents {
            counts[bin_of(z[dim])] += 1;
        }
        for (w, z) in log_w.iter_mut().zip(latents) {
            let freq = counts[bin_of(z[dim])] as f64 / n as f64;
            *w -= (freq + eps).ln();
        }
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Blend `weights` with the uniform distribution.
pub fn mix_with_uniform(weights: &[f64], strength: f64) -> Vec<f64> {
    let u = 1.0 / weights.len() as f64;
    weights.iter().map(|w| strength * w + (1.0 - strength) * u).collect()
}

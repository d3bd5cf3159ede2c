//! Loss terms shared by the model variants.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, D};
use candle_nn::ops::{log_softmax, softmax};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

pub const TASK: &str = "task";
pub const CONFUSION: &str = "confusion";
pub const TONE_ADVERSARY: &str = "tone_adversary";
pub const CONTRASTIVE: &str = "contrastive";
pub const KL: &str = "kl";
pub const RECONSTRUCTION: &str = "reconstruction";

/// Scalar value of every loss term and the weight it enters the total with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    pub fn weighted_sum(&self) -> f64 {
        self.components
            .iter()
            .map(|(k, v)| self.weights.get(k).copied().unwrap_or(1.0) * v)
            .sum()
    }

    /// Total agrees with the weighted component sum to 1e-6 relative.
    pub fn is_consistent(&self) -> bool {
        let sum = self.weighted_sum();
        (self.total - sum).abs() <= 1e-6 * self.total.abs().max(sum.abs()).max(1e-12)
    }
}

/// Builds a differentiable total while recording each term.
///
/// A term with weight zero is reported but left out of the graph, so a
/// variant with all debiasing weights at zero optimizes exactly the task
/// loss tensor.
pub(crate) struct Objective {
    total: Tensor,
    breakdown: LossBreakdown,
}

impl Objective {
    pub fn new(task: Tensor) -> Result<Self> {
        let value = scalar(&task)?;
        let mut breakdown = LossBreakdown::default();
        breakdown.components.insert(TASK.into(), value);
        breakdown.weights.insert(TASK.into(), 1.0);
        Ok(Self { total: task, breakdown })
    }

    pub fn add(&mut self, name: &str, weight: f64, term: &Tensor) -> Result<()> {
        let value = scalar(term)?;
        self.breakdown.components.insert(name.into(), value);
        self.breakdown.weights.insert(name.into(), weight);
        if weight != 0.0 {
            self.total = (&self.total + (term * weight)?)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(Tensor, LossBreakdown)> {
        self.breakdown.total = scalar(&self.total)?;
        Ok((self.total, self.breakdown))
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean binary cross-entropy on raw logits (numerically stable form).
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let targets = targets.to_dtype(logits.dtype())?;
    // max(x, 0) - x*y + log(1 + exp(-|x|))
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((logits.relu()? - (logits * &targets)?)? + softplus)?;
    Ok(per.mean_all()?)
}

/// Mean cross-entropy of `logits` (batch x K) against integer targets.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if targets.len() != n {
        return Err(Error::invalid(format!("{} targets for {n} rows", targets.len())));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= k) {
        return Err(Error::invalid(format!("target {t} out of range for {k} classes")));
    }
    let idx = Tensor::from_slice(targets, n, logits.device())?.unsqueeze(1)?;
    let picked = log_softmax(logits, D::Minus1)?.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Task loss: single-logit BCE for binary tasks, softmax cross-entropy
/// otherwise. Binary logits have shape (batch,).
pub fn task_loss(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    match logits.rank() {
        1 => {
            if let Some(l) = labels.iter().find(|&&l| l > 1) {
                return Err(Error::invalid(format!("binary label {l} outside {{0, 1}}")));
            }
            if labels.len() != logits.dim(0)? {
                return Err(Error::invalid("label count does not match batch size"));
            }
            let y: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
            let y = Tensor::from_vec(y, labels.len(), logits.device())?;
            bce_with_logits(logits, &y)
        }
        _ => cross_entropy(logits, labels),
    }
}

/// Baseline objective: the task loss alone.
pub fn baseline_loss(logits: &Tensor, labels: &[u32]) -> Result<LossBreakdown> {
    Ok(Objective::new(task_loss(logits, labels)?)?.finish()?.1)
}

/// Mean over the batch of the cross-entropy between each row and the
/// uniform distribution, `-(1/K) sum_k log p_k`. Rows must sum to one.
pub fn confusion_loss(probs: &Tensor) -> Result<Tensor> {
    let (_, k) = probs.dims2()?;
    if k < 2 {
        return Err(Error::invalid("confusion loss needs at least two tone groups"));
    }
    let sums: Vec<f64> = probs.to_dtype(DType::F64)?.sum(1)?.to_vec1()?;
    if let Some((i, s)) = sums.iter().enumerate().find(|(_, s)| (*s - 1.0).abs() > 1e-6) {
        return Err(Error::invalid(format!("probability row {i} sums to {s}")));
    }
    confusion_unchecked(probs)
}

pub(crate) fn confusion_unchecked(probs: &Tensor) -> Result<Tensor> {
    let k = probs.dim(1)? as f64;
    let logs = probs.clamp(PROB_EPS, 1.0)?.log()?;
    Ok((logs.sum(1)? / -k)?.mean_all()?)
}

/// Confusion loss of the distributions given by `logits`.
pub fn confusion_from_logits(logits: &Tensor) -> Result<Tensor> {
    confusion_unchecked(&softmax(logits, D::Minus1)?)
}

struct GradReverse(f64);

impl CustomOp1 for GradReverse {
    fn name(&self) -> &'static str {
        "grad-reverse"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("gradient reversal expects a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            CpuStorage::F16(v) => CpuStorage::F16(v[start..end].to_vec()),
            CpuStorage::BF16(v) => CpuStorage::BF16(v[start..end].to_vec()),
            _ => return Err(candle_core::Error::Msg("gradient reversal needs a float tensor".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some((grad_res * -self.0)?))
    }
}

/// Identity in the forward pass (bit for bit); scales the backward gradient
/// by `-lambda`.
pub fn gradient_reversal(x: &Tensor, lambda: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GradReverse(lambda))?)
}

/// Supervised contrastive loss with same-class positives.
///
/// Rows of `features` are L2-normalized; similarities are divided by
/// `temperature`. Anchors without a positive are skipped and `None` is
/// returned when no anchor has one.
pub fn supervised_contrastive(
    features: &Tensor,
    labels: &[u32],
    temperature: f64,
) -> Result<Option<Tensor>> {
    let (n, _) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::invalid("label count does not match batch size"));
    }
    let mut positives = vec![0f32; n * n];
    let mut has_positive = vec![0f32; n];
    let mut counts = vec![1f32; n];
    for i in 0..n {
        let c = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        if c > 0 {
            has_positive[i] = 1.0;
            counts[i] = c as f32;
            for j in 0..n {
                if j != i && labels[j] == labels[i] {
                    positives[i * n + j] = 1.0;
                }
            }
        }
    }
    let anchors = has_positive.iter().filter(|&&h| h > 0.0).count();
    if anchors == 0 {
        return Ok(None);
    }
    let dev = features.device();
    let dtype = features.dtype();
    let norm = features.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-12, f64::INFINITY)?;
    let z = features.broadcast_div(&norm)?;
    let sim = (z.matmul(&z.t()?)? / temperature)?;
    let row_max = sim.max_keepdim(1)?.detach();
    let shifted = sim.broadcast_sub(&row_max)?;
    let off_diag = (Tensor::ones((n, n), dtype, dev)? - Tensor::eye(n, dtype, dev)?)?;
    let log_denom = (shifted.exp()? * off_diag)?.sum_keepdim(1)?.log()?;
    let log_prob = shifted.broadcast_sub(&log_denom)?;
    let pos = Tensor::from_vec(positives, (n, n), dev)?.to_dtype(dtype)?;
    let counts = Tensor::from_vec(counts, n, dev)?.to_dtype(dtype)?;
    let mask = Tensor::from_vec(has_positive, n, dev)?.to_dtype(dtype)?;
    let per_anchor = ((log_prob * pos)?.sum(1)? / counts)?.neg()?;
    Ok(Some(((per_anchor * mask)?.sum_all()? / anchors as f64)?))
}

/// KL divergence of a diagonal Gaussian from the standard normal, in closed
/// form, for a single posterior.
pub fn kl_diag_gaussian(mean: &[f64], variance: &[f64]) -> Result<f64> {
    if mean.len() != variance.len() {
        return Err(Error::invalid("mean and variance lengths differ"));
    }
    let mut kl = 0.0;
    for (&m, &v) in mean.iter().zip(variance) {
        if !(v > 0.0) {
            return Err(Error::numeric(format!("non-positive posterior variance {v}")));
        }
        kl += 0.5 * (v + m * m - 1.0 - v.ln());
    }
    Ok(kl)
}

/// Batch mean of the closed-form KL for posteriors given as mean and
/// log-variance tensors (batch x d).
pub fn kl_standard_normal(mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let var = logvar.exp()?;
    let min = scalar(&var.min_all()?)?;
    if !(min > 0.0) {
        return Err(Error::numeric(format!("non-positive posterior variance {min}")));
    }
    let per = (((var + mean.sqr()?)? - 1.0)? - logvar)?;
    Ok((per.sum(1)? * 0.5)?.mean_all()?)
}

/// Mean squared reconstruction error.
pub fn reconstruction_error(recon: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((recon - target)?.sqr()?.mean_all()?)
}

/// Standard-normal noise of the given shape from a seeded stream.
pub fn gaussian_noise(shape: (usize, usize), seed: u64, dtype: DType, device: &Device) -> Result<Tensor> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..shape.0 * shape.1).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn bce_worked_values() {
        let l = baseline_loss(&t1(&[0.0]).to_dtype(DType::F32).unwrap(), &[1]).unwrap();
        assert_abs_diff_eq!(l.total, std::f64::consts::LN_2, epsilon = 1e-6);
        // p = 0.25 -> logit ln(1/3)
        let l = baseline_loss(&t1(&[(1.0f64 / 3.0).ln()]), &[0]).unwrap();
        assert_abs_diff_eq!(l.total, -(0.75f64).ln(), epsilon = 1e-9);
        let l = baseline_loss(&t1(&[40.0]), &[1]).unwrap();
        assert!(l.total < 1e-15);
        assert!(baseline_loss(&t1(&[0.0]), &[2]).is_err());
    }

    #[test]
    fn confusion_worked_values() {
        let uniform = Tensor::full(1.0 / 6.0, (1, 6), &Device::Cpu).unwrap();
        assert_abs_diff_eq!(scalar(&confusion_loss(&uniform).unwrap()).unwrap(), 6f64.ln(), epsilon = 1e-12);
        let skewed = Tensor::new(&[[0.95f64, 0.01, 0.01, 0.01, 0.01, 0.01]], &Device::Cpu).unwrap();
        let oracle = -(0.95f64.ln() + 5.0 * 0.01f64.ln()) / 6.0;
        assert_abs_diff_eq!(scalar(&confusion_loss(&skewed).unwrap()).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle, 3.8462, epsilon = 1e-4);
        let bad = Tensor::new(&[[0.5f64, 0.4]], &Device::Cpu).unwrap();
        assert!(confusion_loss(&bad).is_err());
        let single = Tensor::new(&[[1.0f64]], &Device::Cpu).unwrap();
        assert!(confusion_loss(&single).is_err());
    }

    #[test]
    fn confusion_clamps_zero_probabilities() {
        let p = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
        let v = scalar(&confusion_loss(&p).unwrap()).unwrap();
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, -(PROB_EPS.ln()) / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_diag_gaussian(&[0.0], &[1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_diag_gaussian(&[1.5], &[1.0]).unwrap(), 1.125, epsilon = 1e-12);
        let oracle = 0.5 * (0.25 + 1.0 - 1.0 - 0.25f64.ln());
        assert_abs_diff_eq!(kl_diag_gaussian(&[1.0], &[0.25]).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle, 0.8181, epsilon = 1e-4);
        assert!(kl_diag_gaussian(&[0.0], &[0.0]).is_err());
        assert!(kl_diag_gaussian(&[0.0], &[-1.0]).is_err());

        let mean = Tensor::new(&[[1.0f64]], &Device::Cpu).unwrap();
        let logvar = Tensor::new(&[[0.25f64.ln()]], &Device::Cpu).unwrap();
        assert_abs_diff_eq!(scalar(&kl_standard_normal(&mean, &logvar).unwrap()).unwrap(), oracle, epsilon = 1e-12);
        let underflow = Tensor::new(&[[-1e4f64]], &Device::Cpu).unwrap();
        assert!(kl_standard_normal(&mean, &underflow).is_err());
    }

    #[test]
    fn reversal_forward_is_bitwise_identity() {
        let x = t1(&[1.5, -0.0, 0.0, -3.25e-30, f64::MAX]);
        for lambda in [0.0, 0.5, 1.0, 7.0] {
            let y: Vec<f64> = gradient_reversal(&x, lambda).unwrap().to_vec1().unwrap();
            let x: Vec<f64> = x.to_vec1().unwrap();
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&y), bits(&x));
        }
    }

    #[test]
    fn contrastive_identical_embeddings() {
        for n in [2usize, 4, 7] {
            let f = Tensor::ones((n, 3), DType::F64, &Device::Cpu).unwrap();
            let labels = vec![0u32; n];
            let v = scalar(&supervised_contrastive(&f, &labels, 0.1).unwrap().unwrap()).unwrap();
            // every similarity is equal: log-prob of each positive is -ln(n-1)
            assert_abs_diff_eq!(v, ((n - 1) as f64).ln(), epsilon = 1e-9);
        }
        let f = Tensor::ones((3, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(supervised_contrastive(&f, &[0, 1, 2], 0.1).unwrap().is_none());
    }

    #[test]
    fn objective_skips_zero_weight_terms() {
        let task = t1(&[0.7]).sum_all().unwrap();
        let extra = t1(&[2.0]).sum_all().unwrap();
        let mut o = Objective::new(task.clone()).unwrap();
        o.add(CONFUSION, 0.0, &extra).unwrap();
        let (total, b) = o.finish().unwrap();
        assert_eq!(scalar(&total).unwrap().to_bits(), 0.7f64.to_bits());
        assert_eq!(b.component(CONFUSION), Some(2.0));
        assert!(b.is_consistent());

        let mut o = Objective::new(task).unwrap();
        o.add(KL, 0.5, &extra).unwrap();
        let (_, b) = o.finish().unwrap();
        assert_abs_diff_eq!(b.total, 1.7, epsilon = 1e-12);
        assert!(b.is_consistent());
    }
}

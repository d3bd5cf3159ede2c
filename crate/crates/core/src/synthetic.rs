//! Tone-confounded synthetic lesion images and a linear tone probe.
//!
//! Class is carried by lesion orientation: an ellipse lying along x for the
//! first condition of the task, along y for the second, both with the area
//! of the same disc. Tone is carried by the skin background: six levels
//! from light (I) to dark (VI); the lesion colour is the background plus a
//! fixed offset. In the training partition class and tone super-group
//! (I-III versus IV-VI) are correlated with strength `rho`; the test
//! partition is always generated at `rho = 0`.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Condition, Task};
use crate::nn::mix_seed;

/// Realized class/tone correlation must lie this close to the request.
pub const PHI_TOLERANCE: f64 = 0.05;

/// Skin background per Fitzpatrick type.
pub const TONE_PALETTE: [[f32; 3]; 6] = [
    [244.0, 220.0, 200.0],
    [230.0, 196.0, 168.0],
    [205.0, 160.0, 125.0],
    [165.0, 118.0, 85.0],
    [115.0, 78.0, 55.0],
    [72.0, 48.0, 35.0],
];

/// Lesion colour relative to the surrounding skin; edge contrast is the
/// same on every tone.
const LESION_OFFSET: [f32; 3] = [-60.0, -40.0, 50.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Images per (tone, class) cell at `rho = 0`; each tone gets `2n`.
    pub n_per_cell: usize,
    pub test_n_per_cell: usize,
    pub image_size: u32,
    /// Train-time class/tone correlation in [0, 1].
    pub rho: f64,
    /// Per-pixel noise standard deviation as a fraction of full scale.
    pub noise: f64,
    /// Lesion radius range as a fraction of the image side.
    pub lesion_radius: (f64, f64),
    pub task: Task,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_per_cell: 200,
            test_n_per_cell: 50,
            image_size: 32,
            rho: 0.9,
            noise: 0.04,
            lesion_radius: (0.18, 0.3),
            task: Task::Cancer,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("rho must lie in [0, 1]"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::config("noise must lie in [0, 0.5]"));
        }
        if self.image_size < 8 {
            return Err(Error::config("image_size must be at least 8"));
        }
        let (lo, hi) = self.lesion_radius;
        if !(0.0 < lo && lo <= hi && hi < 0.5) {
            return Err(Error::config("lesion_radius must satisfy 0 < lo <= hi < 0.5"));
        }
        if self.n_per_cell == 0 || self.test_n_per_cell == 0 {
            return Err(Error::config("cell sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image_id: String,
    pub image: RgbImage,
    pub condition: Condition,
    /// Class index within the task.
    pub label: usize,
    pub tone: u8,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
    /// Class/tone-super-group correlation realized in `train`.
    pub train_phi: f64,
}

/// Count of class-0 images in a light-tone cell of `2n` images.
fn light_class0(n: usize, rho: f64) -> usize {
    ((1.0 + rho) / 2.0 * (2 * n) as f64).round() as usize
}

fn realized_phi(n: usize, rho: f64) -> f64 {
    light_class0(n, rho) as f64 / n as f64 - 1.0
}

/// Smallest cell size whose realized correlation is within tolerance.
pub fn minimal_feasible_n(rho: f64) -> usize {
    (1..).find(|&n| (realized_phi(n, rho) - rho).abs() <= PHI_TOLERANCE).unwrap_or(1)
}

/// Generate both partitions. Fails when `n_per_cell` cannot realize `rho`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let phi = realized_phi(spec.n_per_cell, spec.rho);
    if (phi - spec.rho).abs() > PHI_TOLERANCE {
        return Err(Error::config(format!(
            "n_per_cell = {} realizes correlation {phi:.4} for rho = {}; the minimal feasible n_per_cell is {}",
            spec.n_per_cell,
            spec.rho,
            minimal_feasible_n(spec.rho)
        )));
    }
    let train = partition(spec, "train", spec.n_per_cell, spec.rho);
    let test = partition(spec, "test", spec.test_n_per_cell, 0.0);
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let groups: Vec<usize> = train.iter().map(|s| usize::from(s.tone > 3)).collect();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        train_phi: phi_coefficient(&labels, &groups),
        train,
        test,
    })
}

fn partition(spec: &SyntheticSpec, name: &str, n: usize, rho: f64) -> Vec<SyntheticSample> {
    let tag = if name == "train" { 0 } else { 1 };
    let k = light_class0(n, rho);
    let mut out = Vec::with_capacity(12 * n);
    for tone in 1..=6u8 {
        let class0 = if tone <= 3 { k } else { 2 * n - k };
        for i in 0..2 * n {
            let label = usize::from(i >= class0);
            let seed = mix_seed(spec.seed, &[tag, u64::from(tone), i as u64]);
            out.push(SyntheticSample {
                image_id: format!("{name}-t{tone}-{i:05}"),
                image: render(spec, tone, label, seed),
                condition: spec.task.conditions()[label],
                label,
                tone,
            });
        }
    }
    out
}

fn render(spec: &SyntheticSpec, tone: u8, label: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_size as f64;
    let base = TONE_PALETTE[usize::from(tone - 1)];
    let jitter = 1.0 + rng.random_range(-0.03f32..=0.03);
    let bg: [f32; 3] = [base[0] * jitter, base[1] * jitter, base[2] * jitter];
    let fg: [f32; 3] = [bg[0] + LESION_OFFSET[0], bg[1] + LESION_OFFSET[1], bg[2] + LESION_OFFSET[2]];
    let (lo, hi) = spec.lesion_radius;
    let r = rng.random_range(lo..=hi) * s;
    let cx = rng.random_range(0.35..=0.65) * s;
    let cy = rng.random_range(0.35..=0.65) * s;
    // Ellipse with the area of a disc of radius r; class 0 lies along x,
    // class 1 along y.
    let (a, b) = (r * std::f64::consts::SQRT_2, r / std::f64::consts::SQRT_2);
    let (ax, ay) = if label == 0 { (a, b) } else { (b, a) };
    let noise = Normal::new(0.0f32, (spec.noise * 255.0) as f32).expect("finite noise");
    RgbImage::from_fn(spec.image_size, spec.image_size, |x, y| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let inside = (dx / ax).powi(2) + (dy / ay).powi(2) <= 1.0;
        let c = if inside { fg } else { bg };
        let mut px = [0u8; 3];
        for ch in 0..3 {
            px[ch] = (c[ch] + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Pearson correlation of two binary variables.
pub fn phi_coefficient(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut c = [[0f64; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        c[x.min(1)][y.min(1)] += 1.0;
    }
    let (a1, b1) = (c[1][0] + c[1][1], c[0][1] + c[1][1]);
    let den = (a1 * (n - a1) * b1 * (n - b1)).sqrt();
    if den == 0.0 {
        return 0.0;
    }
    (c[1][1] * n - a1 * b1) / den
}

/// Empirical mutual information in nats between two discrete variables.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::HashMap;
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pa: HashMap<usize, f64> = HashMap::new();
    let mut pb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *pa.entry(x).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| c / n * (c * n / (pa[&x] * pb[&y])).ln())
        .sum()
}

/// Write PNGs and two manifests (`train.csv`, `test.csv`) readable by the
/// synthetic ingestion source.
pub fn write_dataset(data: &SyntheticDataset, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut paths = Vec::new();
    for (name, samples) in [("train", &data.train), ("test", &data.test)] {
        let manifest = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&manifest)?;
        w.write_record(["image_id", "image_path", "label", "fitzpatrick_scale"])?;
        for s in samples.iter() {
            let rel = format!("images/{}.png", s.image_id);
            s.image.save(dir.join(&rel))?;
            w.write_record([
                s.image_id.as_str(),
                rel.as_str(),
                &s.condition.name().to_ascii_lowercase(),
                &s.tone.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&manifest, e))?;
        paths.push(manifest);
    }
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&data.spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok((paths[0].clone(), paths[1].clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// `1 / K` for `K` distinct tones.
    pub chance: f64,
    pub fit_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

/// Accuracy of a multinomial logistic regression predicting tone from
/// `features`, fitted on a tone-stratified half and scored on the other.
pub fn tone_probe(features: &[Vec<f64>], tones: &[u8], seed: u64) -> Result<ProbeResult> {
    let n = features.len();
    if n != tones.len() || n < 2 {
        return Err(Error::invalid("probe needs matching features and tones for at least two samples"));
    }
    let mut classes: Vec<u8> = tones.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("probe input has a single tone"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("feature rows differ in width"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fit, mut eval) = (Vec::new(), Vec::new());
    for &c in &classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| tones[i] == c).collect();
        members.shuffle(&mut rng);
        let half = members.len().div_ceil(2);
        fit.extend_from_slice(&members[..half]);
        eval.extend_from_slice(&members[half..]);
    }
    fit.sort_unstable();
    eval.sort_unstable();
    if eval.is_empty() {
        return Err(Error::invalid("too few samples for a held-out probe split"));
    }

    let k = classes.len();
    let target = |i: usize| classes.iter().position(|&c| c == tones[i]).expect("known tone");
    // Standardize with fit-split statistics.
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in &fit {
        for j in 0..d {
            mean[j] += features[i][j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= fit.len() as f64);
    for &i in &fit {
        for j in 0..d {
            sd[j] += (features[i][j] - mean[j]).powi(2);
        }
    }
    sd.iter_mut()
        .for_each(|s| *s = (*s / fit.len() as f64).sqrt().max(1e-8));
    let x = |i: usize| -> Vec<f64> { (0..d).map(|j| (features[i][j] - mean[j]) / sd[j]).collect() };
    let xs_fit: Vec<Vec<f64>> = fit.iter().map(|&i| x(i)).collect();
    let ys_fit: Vec<usize> = fit.iter().map(|&i| target(i)).collect();

    let (w, b) = fit_softmax_regression(&xs_fit, &ys_fit, k, 1e-3, 500);
    let correct = eval
        .iter()
        .filter(|&&i| {
            let xi = x(i);
            let pred = (0..k)
                .map(|c| b[c] + w[c].iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>())
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, s)| if s > acc.1 { (c, s) } else { acc })
                .0;
            pred == target(i)
        })
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / eval.len() as f64,
        chance: 1.0 / k as f64,
        fit_indices: fit,
        eval_indices: eval,
    })
}

/// Full-batch Adam on the L2-regularized multinomial log-likelihood.
fn fit_softmax_regression(
    xs: &[Vec<f64>],
    ys: &[usize],
    k: usize,
    l2: f64,
    iters: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = xs.first().map_or(0, Vec::len);
    let n = xs.len() as f64;
    let mut w = vec![vec![0.0; d]; k];
    let mut b = vec![0.0; k];
    let (mut mw, mut vw) = (vec![vec![0.0; d]; k], vec![vec![0.0; d]; k]);
    let (mut mb, mut vb) = (vec![0.0; k], vec![0.0; k]);
    let (lr, b1, b2, eps) = (0.05, 0.9f64, 0.999f64, 1e-8);
    for t in 1..=iters {
        let mut gw = vec![vec![0.0; d]; k];
        let mut gb = vec![0.0; k];
        for (xi, &yi) in xs.iter().zip(ys) {
            let logits: Vec<f64> = (0..k)
                .map(|c| b[c] + w[c].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / z - f64::from(u8::from(c == yi));
                gb[c] += g / n;
                for j in 0..d {
                    gw[c][j] += g * xi[j] / n;
                }
            }
        }
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for c in 0..k {
            for j in 0..d {
                let g = gw[c][j] + l2 * w[c][j];
                mw[c][j] = b1 * mw[c][j] + (1.0 - b1) * g;
                vw[c][j] = b2 * vw[c][j] + (1.0 - b2) * g * g;
                w[c][j] -= lr * (mw[c][j] / c1) / ((vw[c][j] / c2).sqrt() + eps);
            }
            mb[c] = b1 * mb[c] + (1.0 - b1) * gb[c];
            vb[c] = b2 * vb[c] + (1.0 - b2) * gb[c] * gb[c];
            b[c] -= lr * (mb[c] / c1) / ((vb[c] / c2).sqrt() + eps);
        }
    }
    (w, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rho: f64, n: usize) -> SyntheticSpec {
        SyntheticSpec {
            n_per_cell: n,
            test_n_per_cell: 4,
            image_size: 16,
            rho,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn marginals_are_exact() {
        let d = generate(&small(0.9, 20)).unwrap();
        assert_eq!(d.train.len(), 240);
        for t in 1..=6 {
            assert_eq!(d.train.iter().filter(|s| s.tone == t).count(), 40);
        }
        assert_eq!(d.train.iter().filter(|s| s.label == 1).count(), 120);
        assert!((d.train_phi - 0.9).abs() <= PHI_TOLERANCE);
        assert_eq!(d.test.len(), 48);
    }

    #[test]
    fn full_confound_separates_groups() {
        let d = generate(&small(1.0, 5)).unwrap();
        assert!(d.train.iter().filter(|s| s.label == 1).all(|s| s.tone > 3));
        assert!(d.train.iter().filter(|s| s.label == 0).all(|s| s.tone <= 3));
    }

    #[test]
    fn independent_at_zero_rho() {
        let d = generate(&small(0.0, 7)).unwrap();
        let labels: Vec<usize> = d.train.iter().map(|s| s.label).collect();
        let tones: Vec<usize> = d.train.iter().map(|s| usize::from(s.tone)).collect();
        assert!(mutual_information(&labels, &tones) < 0.01);
        assert!(mutual_information(&labels, &tones).abs() < 1e-12);
    }

    #[test]
    fn infeasible_cell_size_reports_minimum() {
        let err = generate(&small(0.9, 3)).unwrap_err().to_string();
        let min = minimal_feasible_n(0.9);
        assert!(min > 3);
        assert!(err.contains(&format!("minimal feasible n_per_cell is {min}")), "{err}");
        generate(&small(0.9, min)).unwrap();
    }

    #[test]
    fn deterministic_images() {
        let a = generate(&small(0.5, 10)).unwrap();
        let b = generate(&small(0.5, 10)).unwrap();
        assert!(a.train.iter().zip(&b.train).all(|(x, y)| x.image.as_raw() == y.image.as_raw()));
        let mut other = small(0.5, 10);
        other.seed = 1;
        let c = generate(&other).unwrap();
        assert_ne!(a.train[0].image.as_raw(), c.train[0].image.as_raw());
    }

    #[test]
    fn probe_on_one_hot_tones_is_perfect() {
        let tones: Vec<u8> = (0..120).map(|i| (i % 6 + 1) as u8).collect();
        let feats: Vec<Vec<f64>> = tones
            .iter()
            .map(|&t| (1..=6).map(|k| f64::from(u8::from(k == t))).collect())
            .collect();
        let r = tone_probe(&feats, &tones, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!((r.chance - 1.0 / 6.0).abs() < 1e-12);
        assert!(r.fit_indices.iter().all(|i| !r.eval_indices.contains(i)));
    }

    #[test]
    fn probe_on_noise_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tones: Vec<u8> = (0..1200).map(|i| (i % 6 + 1) as u8).collect();
        let feats: Vec<Vec<f64>> = (0..1200)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let r = tone_probe(&feats, &tones, 1).unwrap();
        assert!((r.accuracy - r.chance).abs() <= 0.1, "{}", r.accuracy);
    }

    #[test]
    fn probe_rejects_single_tone() {
        assert!(tone_probe(&[vec![0.0], vec![1.0]], &[3, 3], 0).is_err());
    }
}

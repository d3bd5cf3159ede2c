//! Stratified train/val/test partitioning and condition-balanced batching.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Condition, ImageRecord, Tone};

pub const NUM_SPLITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Ratios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.20,
            test: 0.10,
        }
    }
}

impl Ratios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    fn validate(&self) -> Result<()> {
        let r = self.as_array();
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9
        {
            return Err(Error::config(format!(
                "split ratios must be non-negative and sum to 1, got {r:?}"
            )));
        }
        Ok(())
    }
}

/// Indices into the record slice, each list ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parts(&self) -> [(&'static str, &[usize]); 3] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ]
    }
}

/// Largest-remainder allocation of `n` items over `ratios`. Ties on the
/// fractional remainder go to the earlier partition (train, val, test).
pub fn allocate(n: usize, ratios: &Ratios) -> [usize; 3] {
    let ideal = ratios.as_array().map(|r| r * n as f64);
    // Guard against 0.7 * 10 = 6.9999999.
    let mut counts = ideal.map(|x| (x + 1e-9).floor() as usize);
    let remainders: Vec<f64> = ideal
        .iter()
        .zip(counts)
        .map(|(x, c)| (x - c as f64).max(0.0))
        .collect();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].total_cmp(&remainders[a]).then(a.cmp(&b)));
    let mut left = n.saturating_sub(counts.iter().sum());
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Stratify by arbitrary keys. Strata with fewer than three members go
/// entirely to train.
pub fn stratified_split_by_key<K: Ord + Clone + std::fmt::Debug>(
    keys: &[K],
    ratios: &Ratios,
    seed: u64,
) -> Result<Partition> {
    ratios.validate()?;
    let mut strata: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        strata.entry(k.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Partition::default();
    for (key, mut members) in strata {
        members.shuffle(&mut rng);
        if members.len() < 3 {
            log::warn!(
                "stratum {key:?} has {} record(s); assigning all to train",
                members.len()
            );
            out.train.extend(members);
            continue;
        }
        let [n_train, n_val, _] = allocate(members.len(), ratios);
        out.train.extend_from_slice(&members[..n_train]);
        out.val.extend_from_slice(&members[n_train..n_train + n_val]);
        out.test.extend_from_slice(&members[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

fn stratum_keys(records: &[ImageRecord]) -> Vec<(Tone, Condition)> {
    records.iter().map(|r| (r.tone, r.condition)).collect()
}

/// Split stratified by (tone, condition).
pub fn stratified_split(records: &[ImageRecord], ratios: &Ratios, seed: u64) -> Result<Partition> {
    stratified_split_by_key(&stratum_keys(records), ratios, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSeries {
    pub seeds: Vec<u64>,
    pub ratios: Ratios,
    /// When true every split shares the test partition of the first split.
    pub fixed_test_pool: bool,
    pub splits: Vec<Partition>,
}

impl SplitSeries {
    pub fn export_csv(&self, image_ids: &[String], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image_id", "split_index", "partition"])?;
        for (k, split) in self.splits.iter().enumerate() {
            for (name, idx) in split.parts() {
                for &i in idx {
                    w.write_record([image_ids[i].as_str(), &k.to_string(), name])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub fn make_split_series(
    records: &[ImageRecord],
    base_seed: u64,
    ratios: &Ratios,
    fixed_test_pool: bool,
) -> Result<SplitSeries> {
    make_split_series_by_key(&stratum_keys(records), base_seed, ratios, fixed_test_pool)
}

pub fn make_split_series_by_key<K: Ord + Clone + std::fmt::Debug>(
    keys: &[K],
    base_seed: u64,
    ratios: &Ratios,
    fixed_test_pool: bool,
) -> Result<SplitSeries> {
    let seeds: Vec<u64> = (0..NUM_SPLITS as u64).map(|k| base_seed + k).collect();
    let mut splits = Vec::with_capacity(NUM_SPLITS);
    if !fixed_test_pool {
        for &seed in &seeds {
            splits.push(stratified_split_by_key(keys, ratios, seed)?);
        }
    } else {
        let first = stratified_split_by_key(keys, ratios, seeds[0])?;
        let rest: Vec<usize> = first.train.iter().chain(&first.val).copied().collect();
        let rest_keys: Vec<K> = rest.iter().map(|&i| keys[i].clone()).collect();
        let share = ratios.train + ratios.val;
        let inner = Ratios {
            train: ratios.train / share,
            val: ratios.val / share,
            test: 0.0,
        };
        splits.push(first.clone());
        for &seed in &seeds[1..] {
            let p = stratified_split_by_key(&rest_keys, &inner, seed)?;
            let mut train: Vec<usize> = p.train.iter().map(|&i| rest[i]).collect();
            let mut val: Vec<usize> = p.val.iter().map(|&i| rest[i]).collect();
            train.sort_unstable();
            val.sort_unstable();
            splits.push(Partition {
                train,
                val,
                test: first.test.clone(),
            });
        }
    }
    Ok(SplitSeries {
        seeds,
        ratios: *ratios,
        fixed_test_pool,
        splits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalancePolicy {
    /// Every condition is drawn up to the largest condition's size (rounded
    /// up to whole batches), minority samples repeating.
    #[default]
    Oversample,
    /// Every condition is cut to the smallest condition's size.
    Undersample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub policy: BalancePolicy,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            batch_size: 64,
            policy: BalancePolicy::Oversample,
        }
    }
}

impl BatchPlan {
    /// Samples per condition in each batch.
    pub fn quota(&self, num_conditions: usize) -> Result<usize> {
        if num_conditions == 0 || self.batch_size == 0 || self.batch_size % num_conditions != 0 {
            return Err(Error::config(format!(
                "batch size {} is not divisible by {num_conditions} conditions",
                self.batch_size
            )));
        }
        Ok(self.batch_size / num_conditions)
    }

    fn pool_len(&self, sizes: &[usize], quota: usize) -> usize {
        match self.policy {
            BalancePolicy::Oversample => {
                let max = sizes.iter().copied().max().unwrap_or(0);
                max.div_ceil(quota) * quota
            }
            BalancePolicy::Undersample => {
                let min = sizes.iter().copied().min().unwrap_or(0);
                ((min / quota) * quota).max(quota)
            }
        }
    }
}

fn group_by_condition(labels: &[usize], num_conditions: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); num_conditions];
    for (i, &l) in labels.iter().enumerate() {
        groups
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("condition index {l} >= {num_conditions}")))?
            .push(i);
    }
    if let Some(c) = groups.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!(
            "condition {c} has no training records"
        )));
    }
    Ok(groups)
}

/// Batches of positions into `labels`, each holding exactly
/// `batch_size / num_conditions` samples of every condition.
pub fn condition_balanced_batches(
    labels: &[usize],
    num_conditions: usize,
    plan: &BatchPlan,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let quota = plan.quota(num_conditions)?;
    let groups = group_by_condition(labels, num_conditions)?;
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let pool_len = plan.pool_len(&sizes, quota);
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let pools: Vec<Vec<usize>> = groups
        .into_iter()
        .map(|mut g| {
            g.shuffle(&mut rng);
            if g.len() >= pool_len {
                g.truncate(pool_len);
                g
            } else {
                let extra: Vec<usize> =
                    (0..pool_len - g.len()).map(|_| g[rng.random_range(0..g.len())]).collect();
                g.extend(extra);
                g.shuffle(&mut rng);
                g
            }
        })
        .collect();
    Ok(interleave(&pools, quota))
}

/// Like [`condition_balanced_batches`] but draws each condition's samples
/// with replacement according to `weights` (normalized within each
/// condition). Produces the same number of batches as the unweighted plan.
pub fn weighted_condition_batches(
    labels: &[usize],
    weights: &[f64],
    num_conditions: usize,
    plan: &BatchPlan,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if weights.len() != labels.len() {
        return Err(Error::invalid("one weight per sample required"));
    }
    let quota = plan.quota(num_conditions)?;
    let groups = group_by_condition(labels, num_conditions)?;
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let pool_len = plan.pool_len(&sizes, quota);
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut pools = Vec::with_capacity(groups.len());
    for g in groups {
        let w: Vec<f64> = g.iter().map(|&i| weights[i].max(0.0)).collect();
        let dist = rand::distr::weighted::WeightedIndex::new(&w)
            .map_err(|e| Error::numeric(format!("resampling weights: {e}")))?;
        let pool: Vec<usize> = (0..pool_len).map(|_| g[rng.sample(&dist)]).collect();
        pools.push(pool);
    }
    Ok(interleave(&pools, quota))
}

fn interleave(pools: &[Vec<usize>], quota: usize) -> Vec<Vec<usize>> {
    let n_batches = pools.first().map_or(0, |p| p.len() / quota);
    (0..n_batches)
        .map(|b| {
            pools
                .iter()
                .flat_map(|p| p[b * quota..(b + 1) * quota].iter().copied())
                .collect()
        })
        .collect()
}

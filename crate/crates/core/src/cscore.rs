//! Consistency-score estimation: expected accuracy on an example under
//! models trained on subsets of the pool that exclude it.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{init_network, predict, ForwardMode, PartitionedNetwork};
use crate::rng;
use crate::tasks::LabeledDataset;
use crate::train::{train_supervised, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CScoreConfig {
    pub subset_sizes: Vec<usize>,
    /// Repetitions per subset size.
    pub repetitions: usize,
    /// Hidden widths of the held-out trainer.
    pub profile: Vec<usize>,
    pub train: TrainConfig,
    pub seed: u64,
}

impl CScoreConfig {
    /// Sizes default to 25/50/75% of the pool; tiny 1-hidden-layer trainer.
    pub fn for_pool(pool_size: usize, seed: u64) -> Self {
        let sizes = [0.25, 0.5, 0.75]
            .iter()
            .map(|f| ((pool_size - 1) as f64 * f).round() as usize)
            .collect();
        CScoreConfig {
            subset_sizes: sizes,
            repetitions: 20,
            profile: vec![16],
            train: TrainConfig {
                epochs: 10,
                batch_size: 16,
                ..TrainConfig::default()
            },
            seed,
        }
    }
}

/// Train a fresh small model on the pool rows `subset` and report whether it
/// predicts the target correctly.
pub fn subset_indicator(
    pool: &LabeledDataset,
    target_index: usize,
    subset: &[usize],
    cfg: &CScoreConfig,
    rep_tag: u64,
) -> Result<f64> {
    let d = pool.inputs.cols();
    let init_seed = rng::derive(cfg.seed, &[rng::tag("cscore-init"), rep_tag]);
    let mut net: PartitionedNetwork = init_network(
        d,
        &cfg.profile,
        1.0,
        &vec![0; cfg.profile.len()],
        pool.num_classes,
        init_seed,
    )?;
    if !subset.is_empty() {
        let ds = pool.select(subset);
        let train_seed = rng::derive(cfg.seed, &[rng::tag("cscore-train"), rep_tag]);
        train_supervised(&mut net, &ds, &cfg.train, None, train_seed)?;
    }
    let x = pool.inputs.gather_rows(&[target_index]);
    let pred = predict(&net, &x, ForwardMode::Full)?[0];
    Ok(if pred == pool.effective_labels[target_index] { 1.0 } else { 0.0 })
}

/// Empirical consistency score of the target example: mean over subset sizes
/// of the mean correct-prediction indicator over sampled excluding subsets.
pub fn estimate_cscore(pool: &LabeledDataset, target_index: usize, cfg: &CScoreConfig) -> Result<f64> {
    if target_index >= pool.len() {
        return Err(Error::InvalidArgument(format!(
            "target index {target_index} out of range for pool of {}",
            pool.len()
        )));
    }
    if cfg.repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
    }
    let others: Vec<usize> = (0..pool.len()).filter(|&i| i != target_index).collect();
    for &n in &cfg.subset_sizes {
        if n > others.len() {
            return Err(Error::InvalidArgument(format!(
                "subset size {n} exceeds pool size minus one ({})",
                others.len()
            )));
        }
    }
    let mut size_means = Vec::with_capacity(cfg.subset_sizes.len());
    for (si, &n) in cfg.subset_sizes.iter().enumerate() {
        let mut acc = 0.0;
        for rep in 0..cfg.repetitions {
            let rep_tag = rng::derive(cfg.seed, &[rng::tag("cscore-rep"), si as u64, rep as u64]);
            let mut pick = others.clone();
            pick.shuffle(&mut rng::stream(cfg.seed, &[rng::tag("cscore-subset"), si as u64, rep as u64]));
            pick.truncate(n);
            pick.sort_unstable();
            acc += subset_indicator(pool, target_index, &pick, cfg, rep_tag)?;
        }
        size_means.push(acc / cfg.repetitions as f64);
    }
    Ok(size_means.iter().sum::<f64>() / size_means.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::gen_synthetic;

    #[test]
    fn n_zero_is_chance_level() {
        let (pool, _) = gen_synthetic(4, 8, 1, 4, 0.1, 5).unwrap();
        let cfg = CScoreConfig {
            subset_sizes: vec![0],
            repetitions: 64,
            ..CScoreConfig::for_pool(pool.len(), 5)
        };
        // untrained accuracy on a random target, averaged over targets:
        // binomial around 1/4 with a wide tolerance band (3 sigma).
        let mut acc = 0.0;
        let targets = 8;
        for t in 0..targets {
            acc += estimate_cscore(&pool, t * 4, &cfg).unwrap();
        }
        acc /= targets as f64;
        let sigma = (0.25 * 0.75 / (64.0 * targets as f64)).sqrt();
        assert!((acc - 0.25).abs() <= 3.0 * sigma + 0.05, "chance accuracy {acc}");
    }

    #[test]
    fn deterministic_given_seed() {
        let (pool, _) = gen_synthetic(3, 4, 1, 4, 0.1, 5).unwrap();
        let cfg = CScoreConfig {
            subset_sizes: vec![4],
            repetitions: 3,
            ..CScoreConfig::for_pool(pool.len(), 9)
        };
        let a = estimate_cscore(&pool, 0, &cfg).unwrap();
        let b = estimate_cscore(&pool, 0, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn rejects_oversized_subset() {
        let (pool, _) = gen_synthetic(3, 3, 1, 4, 0.1, 5).unwrap();
        let cfg = CScoreConfig {
            subset_sizes: vec![pool.len()],
            ..CScoreConfig::for_pool(pool.len(), 9)
        };
        assert!(estimate_cscore(&pool, 0, &cfg).is_err());
    }
}

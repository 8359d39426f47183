//! Shuffled minibatch cross-entropy training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss;
use crate::masking::MaskTable;
use crate::net::{ForwardMode, PartitionedNetwork};
use crate::opt::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState, ParamRegion};
use crate::tasks::LabeledDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub opt: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // calibrated so the benchmark-scale model memorizes random-label
        // corruption (weaker recipes fit only the clean examples)
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            opt: OptimizerConfig {
                learning_rate: 0.05,
                kind: OptimizerKind::Sgd { momentum: 0.9 },
            },
        }
    }
}

/// Train on effective labels. With a mask table the forward pass runs in
/// masked mode (example-tied dropout); evaluation afterwards should use
/// gen-only mode.
pub fn train_supervised(
    net: &mut PartitionedNetwork,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    masks: Option<&MaskTable>,
    seed: u64,
) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut state = OptimizerState::new(cfg.opt, net);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut crate::rng::stream(seed, &[crate::rng::tag("shuffle"), epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch = ds.inputs.gather_rows(chunk);
            let labels: Vec<u32> = chunk.iter().map(|&i| ds.effective_labels[i]).collect();
            let ids: Vec<u64> = chunk.iter().map(|&i| ds.example_ids[i]).collect();
            let mode = match masks {
                Some(t) => ForwardMode::Masked(t),
                None => ForwardMode::Full,
            };
            let (logits, cache) = net.forward(&batch, Some(&ids), mode)?;
            let ce = loss::cross_entropy(&logits, &labels)?;
            let dlogits = loss::ce_grad(&ce.probs, &labels);
            let grads = net.backward(&cache, &dlogits)?;
            optimizer_step(net, &grads, &mut state, ParamRegion::All)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{accuracy, init_network, ForwardMode};
    use crate::tasks::gen_synthetic;

    #[test]
    fn separable_toy_set_reaches_high_accuracy() {
        let (train, _) = gen_synthetic(2, 20, 5, 4, 0.05, 11).unwrap();
        let mut net = init_network(16, &[16], 1.0, &[0], 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            ..TrainConfig::default()
        };
        train_supervised(&mut net, &train, &cfg, None, 5).unwrap();
        let acc = accuracy(&net, &train.inputs, &train.effective_labels, ForwardMode::Full).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");
    }

    #[test]
    fn default_synthetic_set_is_cleanly_learnable() {
        // 10 classes, 500/class, 8x8, sigma 0.15: a 2x128 MLP reaches 0.95
        // clean test accuracy within 40 epochs
        let (train, test) = gen_synthetic(10, 500, 100, 8, 0.15, 0).unwrap();
        let mut net = init_network(64, &[128, 128], 1.0, &[0, 0], 10, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            ..TrainConfig::default()
        };
        train_supervised(&mut net, &train, &cfg, None, 0).unwrap();
        let acc = accuracy(&net, &test.inputs, &test.clean_labels, ForwardMode::Full).unwrap();
        assert!(acc >= 0.95, "clean test accuracy {acc}");
    }

    #[test]
    fn zero_epochs_leaves_net_unchanged() {
        let (train, _) = gen_synthetic(2, 5, 2, 4, 0.05, 11).unwrap();
        let mut net = init_network(16, &[8], 1.0, &[0], 2, 3).unwrap();
        let before = net.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        train_supervised(&mut net, &train, &cfg, None, 5).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn same_seed_identical_weights() {
        let (train, _) = gen_synthetic(3, 10, 2, 4, 0.1, 11).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut a = init_network(16, &[8], 1.0, &[0], 3, 3).unwrap();
        let mut b = a.clone();
        train_supervised(&mut a, &train, &cfg, None, 5).unwrap();
        train_supervised(&mut b, &train, &cfg, None, 5).unwrap();
        assert_eq!(a, b);
    }
}

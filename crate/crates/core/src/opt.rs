//! SGD (with momentum) and Adam, with an optional structural filter that
//! restricts an update to gen-incident parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Grads, PartitionedNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(flatten)]
    pub kind: OptimizerKind,
}

/// Which parameters a step may touch. `GenOnly` leaves every mem-incident
/// parameter (and its accumulator) bit-unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRegion {
    All,
    GenOnly,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub cfg: OptimizerConfig,
    /// First-moment / momentum accumulators, one slot per parameter.
    m: Vec<Vec<f64>>,
    /// Second-moment accumulators (Adam only).
    v: Vec<Vec<f64>>,
    t: u64,
}

impl OptimizerState {
    pub fn new(cfg: OptimizerConfig, net: &PartitionedNetwork) -> Self {
        let sizes: Vec<usize> = net
            .layers
            .iter()
            .flat_map(|l| [l.w.len(), l.b.len()])
            .collect();
        let m = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let v = match cfg.kind {
            OptimizerKind::Adam { .. } => sizes.iter().map(|&n| vec![0.0; n]).collect(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        OptimizerState { cfg, m, v, t: 0 }
    }
}

/// Apply one update in place. Errors on non-finite gradients without
/// touching the network.
pub fn optimizer_step(
    net: &mut PartitionedNetwork,
    grads: &Grads,
    state: &mut OptimizerState,
    region: ParamRegion,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFiniteGradient("optimizer_step".into()));
    }
    state.t += 1;
    let lr = state.cfg.learning_rate;
    let t = state.t;
    for (li, layer) in net.layers.iter_mut().enumerate() {
        let hidden = li < grads.layers.len() - 1;
        let g = &grads.layers[li];
        let (in_dim, in_gen, gen_out) = (layer.in_dim, layer.in_gen, layer.gen_out);
        let skip_w = |idx: usize| {
            if region == ParamRegion::All {
                return false;
            }
            let j = idx / in_dim;
            let k = idx % in_dim;
            (hidden && j >= gen_out) || k >= in_gen
        };
        let skip_b = |j: usize| region == ParamRegion::GenOnly && hidden && j >= gen_out;
        match state.cfg.kind {
            OptimizerKind::Sgd { momentum } => {
                let mw = &mut state.m[2 * li];
                for (idx, (p, gv)) in layer.w.iter_mut().zip(g.w.iter()).enumerate() {
                    if skip_w(idx) {
                        continue;
                    }
                    mw[idx] = momentum * mw[idx] + gv;
                    *p -= lr * mw[idx];
                }
                let mb = &mut state.m[2 * li + 1];
                for (j, (p, gv)) in layer.b.iter_mut().zip(g.b.iter()).enumerate() {
                    if skip_b(j) {
                        continue;
                    }
                    mb[j] = momentum * mb[j] + gv;
                    *p -= lr * mb[j];
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let bc1 = 1.0 - beta1.powi(t as i32);
                let bc2 = 1.0 - beta2.powi(t as i32);
                let m = &mut state.m[2 * li];
                let v = &mut state.v[2 * li];
                for (idx, (p, gv)) in layer.w.iter_mut().zip(g.w.iter()).enumerate() {
                    if skip_w(idx) {
                        continue;
                    }
                    m[idx] = beta1 * m[idx] + (1.0 - beta1) * gv;
                    v[idx] = beta2 * v[idx] + (1.0 - beta2) * gv * gv;
                    *p -= lr * (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + epsilon);
                }
                let m = &mut state.m[2 * li + 1];
                let v = &mut state.v[2 * li + 1];
                for (j, (p, gv)) in layer.b.iter_mut().zip(g.b.iter()).enumerate() {
                    if skip_b(j) {
                        continue;
                    }
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                    *p -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + epsilon);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_network;

    fn single_param_net() -> PartitionedNetwork {
        let mut net = init_network(1, &[1], 1.0, &[0], 2, 0).unwrap();
        net.layers[0].w[0] = 1.0;
        net
    }

    fn grads_with(net: &PartitionedNetwork, val: f64) -> Grads {
        let mut g = Grads::zeros_like(net);
        g.layers[0].w[0] = val;
        g
    }

    #[test]
    fn sgd_definition() {
        let mut net = single_param_net();
        let g = grads_with(&net, 0.5);
        let mut st = OptimizerState::new(
            OptimizerConfig {
                learning_rate: 0.1,
                kind: OptimizerKind::sgd(),
            },
            &net,
        );
        optimizer_step(&mut net, &g, &mut st, ParamRegion::All).unwrap();
        assert!((net.layers[0].w[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let mut net = single_param_net();
        let before = net.clone();
        let g = Grads::zeros_like(&net);
        let mut st = OptimizerState::new(
            OptimizerConfig {
                learning_rate: 0.1,
                kind: OptimizerKind::sgd(),
            },
            &net,
        );
        optimizer_step(&mut net, &g, &mut st, ParamRegion::All).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut net = single_param_net();
        let g = grads_with(&net, 3.7);
        let mut st = OptimizerState::new(
            OptimizerConfig {
                learning_rate: 0.01,
                kind: OptimizerKind::adam(),
            },
            &net,
        );
        optimizer_step(&mut net, &g, &mut st, ParamRegion::All).unwrap();
        // bias-corrected first step: update = lr * g / (|g| + eps') ~ lr
        let delta = 1.0 - net.layers[0].w[0];
        assert!((delta - 0.01).abs() < 1e-6);
    }

    #[test]
    fn non_finite_grad_rejected() {
        let mut net = single_param_net();
        let g = grads_with(&net, f64::NAN);
        let mut st = OptimizerState::new(
            OptimizerConfig {
                learning_rate: 0.1,
                kind: OptimizerKind::sgd(),
            },
            &net,
        );
        assert!(optimizer_step(&mut net, &g, &mut st, ParamRegion::All).is_err());
    }

    #[test]
    fn gen_only_region_leaves_mem_params_untouched() {
        let mut net = init_network(4, &[6], 1.0, &[3], 3, 1).unwrap();
        let before = net.clone();
        let mut g = Grads::zeros_like(&net);
        for l in &mut g.layers {
            l.w.iter_mut().for_each(|v| *v = 1.0);
            l.b.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut st = OptimizerState::new(
            OptimizerConfig {
                learning_rate: 0.1,
                kind: OptimizerKind::adam(),
            },
            &net,
        );
        optimizer_step(&mut net, &g, &mut st, ParamRegion::GenOnly).unwrap();
        for (li, layer) in net.layers.iter().enumerate() {
            let old = &before.layers[li];
            let hidden = li + 1 < net.layers.len();
            for j in 0..layer.out_dim {
                for k in 0..layer.in_dim {
                    let idx = j * layer.in_dim + k;
                    let mem = (hidden && j >= layer.gen_out) || k >= layer.in_gen;
                    if mem {
                        assert_eq!(layer.w[idx].to_bits(), old.w[idx].to_bits());
                    } else {
                        assert_ne!(layer.w[idx], old.w[idx]);
                    }
                }
            }
        }
    }
}

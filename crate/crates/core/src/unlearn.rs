//! REM and the baseline unlearning methods, behind one method interface.
//!
//! Every method maps an [`UnlearnContext`] to a network that is evaluable in
//! plain/gen-only mode. REM follows four steps: expand with fresh mem
//! capacity (skipped when the model was ETD-trained), remove the forget set
//! from the gen partition with NPO, repair utility over the full training
//! set while redirecting corruptions into the mem partition via a shared
//! forget mask, then excise the mem partition.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss;
use crate::masking::{self, MaskTable};
use crate::net::{
    accuracy, excise_memorization, expand_network, init_network, ForwardMode, Grads,
    PartitionedNetwork,
};
use crate::opt::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState, ParamRegion};
use crate::rng;
use crate::tasks::{LabeledDataset, TaskInstance};
use crate::tensor::Tensor;
use crate::train::{train_supervised, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    /// Forget-set accuracy threshold stopping removal updates.
    pub gamma: f64,
    /// NPO inverse-temperature.
    pub beta: f64,
    pub ul_learning_rate: f64,
    pub max_ul_epochs: usize,
    pub scrub_alpha: f64,
    pub distill_temperature: f64,
    /// Mem units REM adds per hidden layer; empty means "mirror gen widths".
    pub rem_mem_units: Vec<usize>,
    pub rem_density: f64,
    /// Step 3.2 barrier term; disabling reduces step 3 to redirection only.
    pub enable_step32: bool,
    /// Global-norm cap on every unlearning update; the ascent-style
    /// objectives (NPO at tiny forget CE, the SCRUB max-step) otherwise
    /// produce unbounded steps. Non-positive disables clipping.
    pub grad_clip: f64,
    pub ul_optimizer: OptimizerKind,
    pub batch_size: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            gamma: 0.2,
            beta: 1.0,
            // 1/5 of the default training learning rate
            ul_learning_rate: 0.01,
            max_ul_epochs: 10,
            scrub_alpha: 0.01,
            distill_temperature: 4.0,
            rem_mem_units: Vec::new(),
            rem_density: 0.2,
            enable_step32: true,
            grad_clip: 5.0,
            ul_optimizer: OptimizerKind::sgd(),
            batch_size: 128,
        }
    }
}

pub struct UnlearnContext<'a> {
    pub original_net: &'a PartitionedNetwork,
    pub task: &'a TaskInstance,
    /// Mask table from ETD training, when the original was ETD-trained.
    pub mask_table: Option<&'a MaskTable>,
    pub cfg: MethodConfig,
    /// Full training recipe, used by retrain.
    pub train_recipe: TrainConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rem,
    RemIdeal,
    Npo,
    Ascent,
    Retrain,
    Finetune,
    BadT,
    Scrub,
    EtdDrop,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Rem,
        Method::RemIdeal,
        Method::Npo,
        Method::Ascent,
        Method::Retrain,
        Method::Finetune,
        Method::BadT,
        Method::Scrub,
        Method::EtdDrop,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Rem => "rem",
            Method::RemIdeal => "rem_ideal",
            Method::Npo => "npo",
            Method::Ascent => "ascent",
            Method::Retrain => "retrain",
            Method::Finetune => "finetune",
            Method::BadT => "badt",
            Method::Scrub => "scrub",
            Method::EtdDrop => "etd_drop",
        }
    }

    /// This method's original model must be ETD-trained.
    pub fn requires_etd(&self) -> bool {
        matches!(self, Method::EtdDrop)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Removal stopped because Acc(D_f) dropped below gamma.
    Gamma,
    /// Epoch budget exhausted without hitting the gamma condition.
    MaxEpochs,
    /// Step-2 iteration cap hit without Acc(D_f) < gamma; run proceeded.
    Step2Cap,
    EmptyForget,
    Completed,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Gamma => "gamma",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Step2Cap => "step2_cap",
            StopReason::EmptyForget => "empty_forget",
            StopReason::Completed => "completed",
        }
    }
}

pub struct UnlearnOutcome {
    pub net: PartitionedNetwork,
    pub stop: StopReason,
}

pub fn run_method(method: Method, ctx: &UnlearnContext) -> Result<UnlearnOutcome> {
    match method {
        Method::Rem => rem(ctx, false),
        Method::RemIdeal => rem(ctx, true),
        Method::Npo => npo_unlearn(ctx),
        Method::Ascent => ascent(ctx),
        Method::Retrain => retrain(ctx),
        Method::Finetune => finetune(ctx),
        Method::BadT => badt(ctx),
        Method::Scrub => scrub(ctx),
        Method::EtdDrop => etd_drop(ctx),
    }
}

/// D_f rows of the training set.
fn forget_data(task: &TaskInstance) -> (Tensor, Vec<u32>, Vec<u64>) {
    let idx = task.forget_indices();
    let inputs = task.train.inputs.gather_rows(&idx);
    let labels = idx.iter().map(|&i| task.train.effective_labels[i]).collect();
    let ids = idx.iter().map(|&i| task.train.example_ids[i]).collect();
    (inputs, labels, ids)
}

/// Per-example CE under the given view, evaluated in chunks.
fn per_example_ce(
    net: &PartitionedNetwork,
    inputs: &Tensor,
    labels: &[u32],
    ids: &[u64],
    mode: ForwardMode,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(labels.len());
    let chunk = 512;
    let mut start = 0;
    while start < labels.len() {
        let end = (start + chunk).min(labels.len());
        let rows: Vec<usize> = (start..end).collect();
        let batch = inputs.gather_rows(&rows);
        let logits = net.logits(&batch, Some(&ids[start..end]), mode)?;
        let ce = loss::cross_entropy(&logits, &labels[start..end])?;
        out.extend(ce.per_example);
        start = end;
    }
    Ok(out)
}

fn ul_optimizer_config(cfg: &MethodConfig) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: cfg.ul_learning_rate,
        kind: cfg.ul_optimizer,
    }
}

/// Shared inner loop for the forget-only methods (NPO, Ascent): minibatch
/// updates until Acc(D_f) < gamma or the epoch budget runs out.
fn forget_descent(
    ctx: &UnlearnContext,
    mut grads_for_batch: impl FnMut(
        &PartitionedNetwork,
        &Tensor,
        &[u32],
        &[u64],
        &[usize],
        ForwardMode,
    ) -> Result<Grads>,
) -> Result<UnlearnOutcome> {
    if ctx.task.forget_ids.is_empty() {
        return Ok(UnlearnOutcome {
            net: ctx.original_net.clone(),
            stop: StopReason::EmptyForget,
        });
    }
    let mut net = ctx.original_net.clone();
    let mode_is_gen = net.has_mem();
    let view = if mode_is_gen { ForwardMode::GenOnly } else { ForwardMode::Full };
    let region = if mode_is_gen { ParamRegion::GenOnly } else { ParamRegion::All };
    let (f_inputs, f_labels, f_ids) = forget_data(ctx.task);
    let mut state = OptimizerState::new(ul_optimizer_config(&ctx.cfg), &net);
    let mut order: Vec<usize> = (0..f_labels.len()).collect();
    for epoch in 0..ctx.cfg.max_ul_epochs {
        if accuracy(&net, &f_inputs, &f_labels, view)? < ctx.cfg.gamma {
            return Ok(UnlearnOutcome { net, stop: StopReason::Gamma });
        }
        order.shuffle(&mut rng::stream(ctx.seed, &[rng::tag("ul-shuffle"), epoch as u64]));
        for chunk in order.chunks(ctx.cfg.batch_size) {
            let mut grads = grads_for_batch(&net, &f_inputs, &f_labels, &f_ids, chunk, view)?;
            grads.clip_global_norm(ctx.cfg.grad_clip);
            optimizer_step(&mut net, &grads, &mut state, region)?;
            if accuracy(&net, &f_inputs, &f_labels, view)? < ctx.cfg.gamma {
                return Ok(UnlearnOutcome { net, stop: StopReason::Gamma });
            }
        }
    }
    Ok(UnlearnOutcome { net, stop: StopReason::MaxEpochs })
}

/// NPO descent over the forget set.
pub fn npo_unlearn(ctx: &UnlearnContext) -> Result<UnlearnOutcome> {
    let (f_inputs, f_labels, f_ids) = forget_data(ctx.task);
    let view = if ctx.original_net.has_mem() { ForwardMode::GenOnly } else { ForwardMode::Full };
    let ref_ce = per_example_ce(ctx.original_net, &f_inputs, &f_labels, &f_ids, view)?;
    let beta = ctx.cfg.beta;
    forget_descent(ctx, move |net, inputs, labels, ids, chunk, view| {
        let batch = inputs.gather_rows(chunk);
        let labels: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
        let ids: Vec<u64> = chunk.iter().map(|&i| ids[i]).collect();
        let refs: Vec<f64> = chunk.iter().map(|&i| ref_ce[i]).collect();
        let (logits, cache) = net.forward(&batch, Some(&ids), view)?;
        let ce = loss::cross_entropy(&logits, &labels)?;
        let npo = loss::npo_term(&ce.per_example, &refs, beta)?;
        let dlogits = loss::npo_grad(&ce.probs, &labels, &npo.dloss_dce);
        net.backward(&cache, &dlogits)
    })
}

/// Gradient ascent on CE over the forget set.
pub fn ascent(ctx: &UnlearnContext) -> Result<UnlearnOutcome> {
    forget_descent(ctx, |net, inputs, labels, ids, chunk, view| {
        let batch = inputs.gather_rows(chunk);
        let labels: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
        let ids: Vec<u64> = chunk.iter().map(|&i| ids[i]).collect();
        let (logits, cache) = net.forward(&batch, Some(&ids), view)?;
        let ce = loss::cross_entropy(&logits, &labels)?;
        let mut dlogits = loss::ce_grad(&ce.probs, &labels);
        dlogits.data.iter_mut().for_each(|v| *v = -*v);
        net.backward(&cache, &dlogits)
    })
}

/// Retrain from scratch on the retain set with a fresh seed branch.
pub fn retrain(ctx: &UnlearnContext) -> Result<UnlearnOutcome> {
    let src = ctx.original_net;
    let hidden = src.hidden_count();
    let profile: Vec<usize> = src.layers[..hidden]
        .iter()
        .map(|l| (l.gen_out as f64 / src.capacity_fraction).round() as usize)
        .collect();
    let mem: Vec<usize> = vec![0; hidden];
    let init_seed = rng::derive(ctx.seed, &[rng::tag("retrain-init")]);
    let mut net = init_network(
        src.input_dim,
        &profile,
        src.capacity_fraction,
        &mem,
        src.num_classes,
        init_seed,
    )?;
    let retained = ctx.task.train.select(&ctx.task.retain_indices());
    let train_seed = rng::derive(ctx.seed, &[rng::tag("retrain-train")]);
    train_supervised(&mut net, &retained, &ctx.train_recipe, None, train_seed)?;
    Ok(UnlearnOutcome { net, stop: StopReason::Completed })
}

/// Continue training on the retain set (catastrophic forgetting baseline).
pub fn finetune(ctx: &UnlearnContext) -> Result<UnlearnOutcome> {
    if ctx.task.forget_ids.is_empty() {
        return Ok(UnlearnOutcome {
            net: ctx.original_net.clone(),
            stop: StopReason::EmptyForget,
        });
    }
    let mut net = ctx.original_net.clone();
    let retained = ctx.task.train.select(&ctx.task.retain_indices());
    let cfg = TrainConfig {
        epochs: ctx.cfg.max_ul_epochs,
        batch_size: ctx.cfg.batch_size,
        opt: ul_optimizer_config(&ctx.cfg),
    };
    let seed = rng::derive(ctx.seed, &[rng::tag("finetune")]);
    train_supervised(&mut net, &retained, &cfg, ctx.mask_table, seed)?;
    Ok(UnlearnOutcome { net, stop: StopReason::Completed })
}

/// Distill from a random teacher on D_f and from the original elsewhere.
pub fn badt(ctx: &UnlearnContext) -> Result<UnlearnOutcome> {
    if ctx.task.forget_ids.is_empty() {
        return Ok(UnlearnOutcome {
            net: ctx.original_net.clone(),
            stop: StopReason::EmptyForget,
        });
    }
    let mut student = ctx.original_net.clone();
    let teacher = ctx.original_net;
    let src = ctx.original_net;
    let hidden = src.hidden_count();
    let profile: Vec<usize> = src.layers[..hidden]
        .iter()
        .map(|l| (l.gen_out as f64 / src.capacity_fraction).round() as usize)
        .collect();
    let mem = src.mem_shape();
    let random_teacher = init_network(
        src.input_dim,
        &profile,
        src.capacity_fraction,
        &mem,
        src.num_classes,
        rng::derive(ctx.seed, &[rng::tag("badt-teacher")]),
    )?;
    let forget: std::collections::BTreeSet<u64> = ctx.task.forget_ids.iter().copied().collect();
    let ds = &ctx.task.train;
    let temp = ctx.cfg.distill_temperature;
    let mut state = OptimizerState::new(ul_optimizer_config(&ctx.cfg), &student);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..ctx.cfg.max_ul_epochs {
        order.shuffle(&mut rng::stream(ctx.seed, &[rng::tag("badt-shuffle"), epoch as u64]));
        for chunk in order.chunks(ctx.cfg.batch_size) {
            let batch = ds.inputs.gather_rows(chunk);
            let (s_logits, cache) = student.forward(&batch, None, ForwardMode::Full)?;
            let good = teacher.logits(&batch, None, ForwardMode::Full)?;
            let bad = random_teacher.logits(&batch, None, ForwardMode::Full)?;
            let mut t_logits = good;
            for (r, &i) in chunk.iter().enumerate() {
                if forget.contains(&ds.example_ids[i]) {
                    t_logits.row_mut(r).copy_from_slice(bad.row(r));
                }
            }
            let distill = loss::distill_kl(&s_logits, &t_logits, temp)?;
            let mut grads = student.backward(&cache, &distill.dstudent)?;
            grads.clip_global_norm(ctx.cfg.grad_clip);
            optimizer_step(&mut student, &grads, &mut state, ParamRegion::All)?;
        }
    }
    Ok(UnlearnOutcome { net: student, stop: StopReason::Completed })
}

/// Alternate distillation away from the original on D_f (max step) and
/// toward it on D_r plus a CE term (min step).
pub fn scrub(ctx: &UnlearnContext) -> Result<UnlearnOutcome> {
    if ctx.task.forget_ids.is_empty() {
        return Ok(UnlearnOutcome {
            net: ctx.original_net.clone(),
            stop: StopReason::EmptyForget,
        });
    }
    let mut student = ctx.original_net.clone();
    let teacher = ctx.original_net;
    let temp = ctx.cfg.distill_temperature;
    let alpha = ctx.cfg.scrub_alpha;
    let ds = &ctx.task.train;
    let f_idx = ctx.task.forget_indices();
    let r_idx = ctx.task.retain_indices();
    let mut state = OptimizerState::new(ul_optimizer_config(&ctx.cfg), &student);
    for epoch in 0..ctx.cfg.max_ul_epochs {
        // max step: push student's D_f predictions away from the teacher.
        let mut f_order = f_idx.clone();
        f_order.shuffle(&mut rng::stream(ctx.seed, &[rng::tag("scrub-max"), epoch as u64]));
        for chunk in f_order.chunks(ctx.cfg.batch_size) {
            let batch = ds.inputs.gather_rows(chunk);
            let (s_logits, cache) = student.forward(&batch, None, ForwardMode::Full)?;
            let t_logits = teacher.logits(&batch, None, ForwardMode::Full)?;
            let distill = loss::distill_kl(&s_logits, &t_logits, temp)?;
            let mut d = distill.dstudent;
            d.data.iter_mut().for_each(|v| *v = -*v);
            let mut grads = student.backward(&cache, &d)?;
            grads.clip_global_norm(ctx.cfg.grad_clip);
            optimizer_step(&mut student, &grads, &mut state, ParamRegion::All)?;
        }
        // min step: distill toward the teacher on D_r with a CE anchor.
        let mut r_order = r_idx.clone();
        r_order.shuffle(&mut rng::stream(ctx.seed, &[rng::tag("scrub-min"), epoch as u64]));
        for chunk in r_order.chunks(ctx.cfg.batch_size) {
            let batch = ds.inputs.gather_rows(chunk);
            let labels: Vec<u32> = chunk.iter().map(|&i| ds.effective_labels[i]).collect();
            let (s_logits, cache) = student.forward(&batch, None, ForwardMode::Full)?;
            let t_logits = teacher.logits(&batch, None, ForwardMode::Full)?;
            let distill = loss::distill_kl(&s_logits, &t_logits, temp)?;
            let ce = loss::cross_entropy(&s_logits, &labels)?;
            let mut dlogits = distill.dstudent;
            let ce_d = loss::ce_grad(&ce.probs, &labels);
            for (a, b) in dlogits.data.iter_mut().zip(ce_d.data.iter()) {
                *a += alpha * b;
            }
            let mut grads = student.backward(&cache, &dlogits)?;
            grads.clip_global_norm(ctx.cfg.grad_clip);
            optimizer_step(&mut student, &grads, &mut state, ParamRegion::All)?;
        }
    }
    Ok(UnlearnOutcome { net: student, stop: StopReason::Completed })
}

/// Drop the memorization partition of an ETD-trained model; ignores D_f.
pub fn etd_drop(ctx: &UnlearnContext) -> Result<UnlearnOutcome> {
    if ctx.mask_table.is_none() {
        return Err(Error::InvalidArgument(
            "etd_drop requires an ETD-trained original (mask table missing)".into(),
        ));
    }
    Ok(UnlearnOutcome {
        net: excise_memorization(ctx.original_net),
        stop: StopReason::Completed,
    })
}

/// The four-step REM procedure. With `ideal`, the shared redirection mask
/// covers every corrupted example instead of only the discovered ones.
pub fn rem(ctx: &UnlearnContext, ideal: bool) -> Result<UnlearnOutcome> {
    if ctx.task.forget_ids.is_empty() {
        return Err(Error::InvalidArgument("rem requires a nonempty forget set".into()));
    }
    let cfg = &ctx.cfg;
    let ds = &ctx.task.train;

    // Step 1: expand, unless the model already carries an ETD mem partition.
    let mut net = if ctx.mask_table.is_some() && ctx.original_net.has_mem() {
        ctx.original_net.clone()
    } else {
        let add: Vec<usize> = if cfg.rem_mem_units.is_empty() {
            ctx.original_net.layers[..ctx.original_net.hidden_count()]
                .iter()
                .map(|l| l.gen_out)
                .collect()
        } else {
            cfg.rem_mem_units.clone()
        };
        expand_network(ctx.original_net, &add, rng::derive(ctx.seed, &[rng::tag("rem-expand")]))?
    };
    let mem_shape = net.mem_shape();

    let mask_seed = rng::derive(ctx.seed, &[rng::tag("rem-masks")]);
    let table = if ideal {
        let corrupted: Vec<u64> = ds
            .corrupted_indices()
            .iter()
            .map(|&i| ds.example_ids[i])
            .collect();
        masking::assign_ideal_masks(&ds.example_ids, &corrupted, &mem_shape, cfg.rem_density, mask_seed)?
    } else {
        masking::assign_rem_masks(
            &ds.example_ids,
            &ctx.task.forget_ids,
            &mem_shape,
            cfg.rem_density,
            mask_seed,
            ctx.mask_table,
        )?
    };

    // Reference snapshot: trained gen weights plus fresh mem init, frozen.
    let ref_net = net.clone();
    let (f_inputs, f_labels, f_ids) = forget_data(ctx.task);
    let ref_ce_f = per_example_ce(&ref_net, &f_inputs, &f_labels, &f_ids, ForwardMode::GenOnly)?;
    let all_ids = ds.example_ids.clone();
    let ref_ce_tr: Vec<f64> = per_example_ce(
        &ref_net,
        &ds.inputs,
        &ds.effective_labels,
        &all_ids,
        ForwardMode::Masked(&table),
    )?;
    let mut step2_state = OptimizerState::new(ul_optimizer_config(cfg), &net);
    let mut step3_state = OptimizerState::new(ul_optimizer_config(cfg), &net);
    let mut step2_capped = false;
    let mut gamma_reached = false;
    let step2_cap = 50 * f_labels.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.max_ul_epochs {
        // Step 2: remove D_f from the gen partition until Acc(D_f) < gamma.
        let mut iters = 0usize;
        let mut order: Vec<usize> = (0..f_labels.len()).collect();
        'remove: while accuracy(&net, &f_inputs, &f_labels, ForwardMode::GenOnly)? > cfg.gamma {
            order.shuffle(&mut rng::stream(ctx.seed, &[rng::tag("rem-step2"), epoch as u64, iters as u64]));
            for chunk in order.chunks(cfg.batch_size) {
                let batch = f_inputs.gather_rows(chunk);
                let labels: Vec<u32> = chunk.iter().map(|&i| f_labels[i]).collect();
                let refs: Vec<f64> = chunk.iter().map(|&i| ref_ce_f[i]).collect();
                let (logits, cache) = net.forward(&batch, None, ForwardMode::GenOnly)?;
                let ce = loss::cross_entropy(&logits, &labels)?;
                let npo = loss::npo_term(&ce.per_example, &refs, cfg.beta)?;
                let dlogits = loss::npo_grad(&ce.probs, &labels, &npo.dloss_dce);
                let mut grads = net.backward(&cache, &dlogits)?;
                grads.clip_global_norm(cfg.grad_clip);
                optimizer_step(&mut net, &grads, &mut step2_state, ParamRegion::GenOnly)?;
                iters += 1;
                if accuracy(&net, &f_inputs, &f_labels, ForwardMode::GenOnly)? < cfg.gamma {
                    gamma_reached = true;
                    break 'remove;
                }
                if iters >= step2_cap {
                    step2_capped = true;
                    break 'remove;
                }
            }
        }

        // Step 3: one epoch of utility repair plus redirection over D_tr.
        let mut tr_order: Vec<usize> = (0..ds.len()).collect();
        tr_order.shuffle(&mut rng::stream(ctx.seed, &[rng::tag("rem-step3"), epoch as u64]));
        let mut f_order: Vec<usize> = (0..f_labels.len()).collect();
        f_order.shuffle(&mut rng::stream(ctx.seed, &[rng::tag("rem-step3-f"), epoch as u64]));
        let mut f_cursor = 0usize;
        for chunk in tr_order.chunks(cfg.batch_size) {
            let batch = ds.inputs.gather_rows(chunk);
            let labels: Vec<u32> = chunk.iter().map(|&i| ds.effective_labels[i]).collect();
            let ids: Vec<u64> = chunk.iter().map(|&i| ds.example_ids[i]).collect();
            let refs: Vec<f64> = chunk.iter().map(|&i| ref_ce_tr[i]).collect();
            // Redirect term is maximized: descend its negation.
            let (logits, cache) = net.forward(&batch, Some(&ids), ForwardMode::Masked(&table))?;
            let ce = loss::cross_entropy(&logits, &labels)?;
            let npo = loss::npo_term(&ce.per_example, &refs, cfg.beta)?;
            let mut dlogits = loss::npo_grad(&ce.probs, &labels, &npo.dloss_dce);
            dlogits.data.iter_mut().for_each(|v| *v = -*v);
            let mut grads = net.backward(&cache, &dlogits)?;

            if cfg.enable_step32 {
                // Barrier: keep the gen partition's loss on D_f inflated.
                let take = cfg.batch_size.min(f_labels.len());
                let mut rows = Vec::with_capacity(take);
                for _ in 0..take {
                    rows.push(f_order[f_cursor % f_order.len()]);
                    f_cursor += 1;
                }
                let fb = f_inputs.gather_rows(&rows);
                let fl: Vec<u32> = rows.iter().map(|&i| f_labels[i]).collect();
                let fr: Vec<f64> = rows.iter().map(|&i| ref_ce_f[i]).collect();
                let (fl_logits, f_cache) = net.forward(&fb, None, ForwardMode::GenOnly)?;
                let f_ce = loss::cross_entropy(&fl_logits, &fl)?;
                let f_npo = loss::npo_term(&f_ce.per_example, &fr, cfg.beta)?;
                let f_dlogits = loss::npo_grad(&f_ce.probs, &fl, &f_npo.dloss_dce);
                let barrier = net.backward(&f_cache, &f_dlogits)?;
                grads.add_scaled(&barrier, 1.0);
            }
            grads.clip_global_norm(cfg.grad_clip);
            optimizer_step(&mut net, &grads, &mut step3_state, ParamRegion::All)?;
        }
        let _ = epoch;
    }

    // Step 4: discard the mem partition.
    let net = excise_memorization(&net);
    let stop = if step2_capped {
        StopReason::Step2Cap
    } else if gamma_reached {
        StopReason::Gamma
    } else {
        StopReason::MaxEpochs
    };
    Ok(UnlearnOutcome { net, stop })
}

/// Per-method original-model requirements are handled by the caller; this
/// helper builds the ETD mask table used when training an ETD original.
pub fn etd_training_masks(ds: &LabeledDataset, mem_shape: &[usize], density: f64, seed: u64) -> Result<MaskTable> {
    masking::assign_etd_masks(&ds.example_ids, mem_shape, density, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::accuracy;
    use crate::tasks::{corrupt_random_labels, gen_synthetic, split_discovery, Regularity};

    fn small_task(seed: u64) -> TaskInstance {
        let (train, test) = gen_synthetic(4, 30, 10, 4, 0.15, seed).unwrap();
        let c = corrupt_random_labels(&train, 24, seed).unwrap();
        split_discovery(c, test, Regularity::Low, 0.5, seed).unwrap()
    }

    // strong enough to fully memorize the 24 random labels; weaker recipes
    // plateau on clean data only and leave nothing to unlearn
    fn trained_original(task: &TaskInstance, seed: u64) -> PartitionedNetwork {
        let mut net = init_network(16, &[64, 64], 0.5, &[0, 0], 4, seed).unwrap();
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 16,
            opt: crate::opt::OptimizerConfig {
                learning_rate: 0.1,
                kind: crate::opt::OptimizerKind::sgd(),
            },
            ..TrainConfig::default()
        };
        train_supervised(&mut net, &task.train, &cfg, None, seed).unwrap();
        net
    }

    fn ctx<'a>(net: &'a PartitionedNetwork, task: &'a TaskInstance, seed: u64) -> UnlearnContext<'a> {
        UnlearnContext {
            original_net: net,
            task,
            mask_table: None,
            cfg: MethodConfig {
                ul_learning_rate: 0.01,
                batch_size: 16,
                ..MethodConfig::default()
            },
            train_recipe: TrainConfig {
                epochs: 25,
                batch_size: 16,
                ..TrainConfig::default()
            },
            seed,
        }
    }

    #[test]
    fn npo_stops_below_gamma_when_reported() {
        let task = small_task(0);
        let net = trained_original(&task, 0);
        let c = ctx(&net, &task, 0);
        let out = npo_unlearn(&c).unwrap();
        if out.stop == StopReason::Gamma {
            let idx = task.forget_indices();
            let inputs = task.train.inputs.gather_rows(&idx);
            let labels: Vec<u32> = idx.iter().map(|&i| task.train.effective_labels[i]).collect();
            let acc = accuracy(&out.net, &inputs, &labels, ForwardMode::Full).unwrap();
            assert!(acc < c.cfg.gamma, "reported gamma stop but Acc(D_f) = {acc}");
        }
    }

    #[test]
    fn npo_update_does_not_decrease_forget_ce() {
        // directional check over 5 seeds
        let mut ok = 0;
        for seed in 0..5 {
            let task = small_task(seed);
            let net = trained_original(&task, seed);
            let mut c = ctx(&net, &task, seed);
            c.cfg.max_ul_epochs = 1;
            c.cfg.ul_learning_rate = 1e-3;
            let idx = task.forget_indices();
            let inputs = task.train.inputs.gather_rows(&idx);
            let labels: Vec<u32> = idx.iter().map(|&i| task.train.effective_labels[i]).collect();
            let before = per_example_ce(&net, &inputs, &labels, &task.forget_ids, ForwardMode::Full)
                .unwrap()
                .iter()
                .sum::<f64>();
            let out = npo_unlearn(&c).unwrap();
            let after = per_example_ce(&out.net, &inputs, &labels, &task.forget_ids, ForwardMode::Full)
                .unwrap()
                .iter()
                .sum::<f64>();
            if after >= before {
                ok += 1;
            }
        }
        assert!(ok >= 4, "forget CE decreased in {} of 5 seeds", 5 - ok);
    }

    #[test]
    fn ascent_increases_forget_ce() {
        let task = small_task(1);
        let net = trained_original(&task, 1);
        let mut c = ctx(&net, &task, 1);
        c.cfg.max_ul_epochs = 1;
        c.cfg.ul_learning_rate = 1e-3;
        let idx = task.forget_indices();
        let inputs = task.train.inputs.gather_rows(&idx);
        let labels: Vec<u32> = idx.iter().map(|&i| task.train.effective_labels[i]).collect();
        let before: f64 = per_example_ce(&net, &inputs, &labels, &task.forget_ids, ForwardMode::Full)
            .unwrap()
            .iter()
            .sum();
        let out = ascent(&c).unwrap();
        let after: f64 = per_example_ce(&out.net, &inputs, &labels, &task.forget_ids, ForwardMode::Full)
            .unwrap()
            .iter()
            .sum();
        assert!(after > before);
    }

    #[test]
    fn empty_forget_is_identity_for_forget_methods() {
        let (train, test) = gen_synthetic(4, 10, 5, 4, 0.1, 2).unwrap();
        let c = corrupt_random_labels(&train, 4, 2).unwrap();
        let mut task = split_discovery(c, test, Regularity::Low, 0.5, 2).unwrap();
        task.forget_ids.clear();
        task.retain_ids = task.train.example_ids.clone();
        let net = trained_original(&task, 2);
        let c = ctx(&net, &task, 2);
        for f in [npo_unlearn, ascent, finetune, badt, scrub] {
            let out = f(&c).unwrap();
            assert_eq!(out.net, net);
            assert_eq!(out.stop, StopReason::EmptyForget);
        }
    }

    #[test]
    fn retrain_set_excludes_forgotten_corruption() {
        let (train, test) = gen_synthetic(4, 30, 5, 4, 0.15, 3).unwrap();
        let c = corrupt_random_labels(&train, 24, 3).unwrap();
        let full = split_discovery(c.clone(), test.clone(), Regularity::Low, 1.0, 3).unwrap();
        let retained = full.train.select(&full.retain_indices());
        assert_eq!(retained.corrupted_count(), 0);
        let half = split_discovery(c, test, Regularity::Low, 0.5, 3).unwrap();
        let retained = half.train.select(&half.retain_indices());
        assert_eq!(retained.corrupted_count(), 12);
    }

    #[test]
    fn etd_drop_ignores_discovery_rate() {
        let (train, test) = gen_synthetic(4, 20, 5, 4, 0.15, 4).unwrap();
        let corrupted = corrupt_random_labels(&train, 16, 4).unwrap();
        let mut net = init_network(16, &[32, 32], 0.5, &[8, 8], 4, 4).unwrap();
        let masks = etd_training_masks(&corrupted, &[8, 8], 0.2, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 16,
            ..TrainConfig::default()
        };
        train_supervised(&mut net, &corrupted, &cfg, Some(&masks), 4).unwrap();
        let mut outs = Vec::new();
        for rate in [0.2, 0.7] {
            let task = split_discovery(corrupted.clone(), test.clone(), Regularity::Low, rate, 4).unwrap();
            let mut c = ctx(&net, &task, 4);
            c.mask_table = Some(&masks);
            outs.push(etd_drop(&c).unwrap().net);
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], excise_memorization(&net));
    }

    #[test]
    fn etd_drop_without_masks_errors() {
        let task = small_task(5);
        let net = trained_original(&task, 5);
        let c = ctx(&net, &task, 5);
        assert!(etd_drop(&c).is_err());
    }

    #[test]
    fn rem_output_has_no_mem_units() {
        let task = small_task(6);
        let net = trained_original(&task, 6);
        let mut c = ctx(&net, &task, 6);
        c.cfg.max_ul_epochs = 2;
        let out = rem(&c, false).unwrap();
        assert!(!out.net.has_mem());
    }

    #[test]
    fn rem_ideal_equals_rem_at_full_discovery() {
        let (train, test) = gen_synthetic(4, 30, 10, 4, 0.15, 7).unwrap();
        let corrupted = corrupt_random_labels(&train, 24, 7).unwrap();
        let task = split_discovery(corrupted, test, Regularity::Low, 1.0, 7).unwrap();
        let net = trained_original(&task, 7);
        let mut c = ctx(&net, &task, 7);
        c.cfg.max_ul_epochs = 2;
        let a = rem(&c, false).unwrap();
        let b = rem(&c, true).unwrap();
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn rem_requires_nonempty_forget() {
        let task = small_task(8);
        let net = trained_original(&task, 8);
        let mut task2 = task.clone();
        task2.forget_ids.clear();
        let c = ctx(&net, &task2, 8);
        assert!(rem(&c, false).is_err());
    }

    #[test]
    fn rem_step2_reaches_gamma_on_forget_set() {
        let task = small_task(9);
        let net = trained_original(&task, 9);
        let mut c = ctx(&net, &task, 9);
        c.cfg.ul_learning_rate = 0.02;
        let out = rem(&c, false).unwrap();
        assert_ne!(out.stop, StopReason::Step2Cap);
    }
}

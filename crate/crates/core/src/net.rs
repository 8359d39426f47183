//! Partitioned dense network: forward/backward with partition-aware masking,
//! expansion with fresh memorization capacity, and excision of that capacity.
//!
//! Unit ordering inside every hidden layer is `[gen..., mem...]`; expanding
//! appends new mem units at the end, so the gen block and any pre-existing
//! mem block keep their indices. The output layer has undivided outputs but
//! partitioned input columns.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskTable;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major `out_dim x in_dim` weight matrix.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    /// First `gen_out` outputs are generalization units; the rest are mem.
    pub gen_out: usize,
    /// First `in_gen` input columns come from gen units (or raw input).
    pub in_gen: usize,
}

impl Layer {
    pub fn mem_out(&self) -> usize {
        self.out_dim - self.gen_out
    }

    pub fn in_mem(&self) -> usize {
        self.in_dim - self.in_gen
    }

    fn affine(&self, input: &Tensor, out: &mut Tensor) {
        let (bsz, ind) = (input.rows(), input.cols());
        debug_assert_eq!(ind, self.in_dim);
        for r in 0..bsz {
            let x = input.row(r);
            let o = out.row_mut(r);
            for (j, oj) in o.iter_mut().enumerate() {
                let wrow = &self.w[j * ind..(j + 1) * ind];
                let mut acc = self.b[j];
                for (wv, xv) in wrow.iter().zip(x.iter()) {
                    acc += wv * xv;
                }
                *oj = acc;
            }
        }
    }
}

/// How memorization activations are treated during a pass.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    /// All units active.
    Full,
    /// Every mem activation zeroed.
    GenOnly,
    /// Each example's mem activations multiplied by its binary mask.
    Masked(&'a MaskTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedNetwork {
    pub layers: Vec<Layer>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub capacity_fraction: f64,
}

/// Activations cached by a forward pass, consumed by `backward`.
pub struct ForwardCache {
    input: Tensor,
    /// Pre-activation per hidden layer.
    zs: Vec<Tensor>,
    /// Post-ReLU, post-mask activation per hidden layer.
    acts: Vec<Tensor>,
    /// Multiplicative unit factor per hidden layer (1 for gen; mode-dependent
    /// for mem units).
    unit_masks: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
}

impl Grads {
    pub fn zeros_like(net: &PartitionedNetwork) -> Grads {
        Grads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            for (x, y) in a.w.iter_mut().zip(b.w.iter()) {
                *x += scale * y;
            }
            for (x, y) in a.b.iter_mut().zip(b.b.iter()) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.w.iter().map(|v| v * v).sum::<f64>() + l.b.iter().map(|v| v * v).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v *= factor);
            l.b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Rescale so the global norm is at most `max_norm`. `max_norm <= 0`
    /// disables clipping; non-finite norms are left for the optimizer to
    /// reject.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        if max_norm <= 0.0 {
            return;
        }
        let norm = self.global_norm();
        if norm.is_finite() && norm > max_norm {
            self.scale(max_norm / norm);
        }
    }
}

fn he_uniform(fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let limit = (6.0 / fan_in as f64).sqrt();
    rng.gen_range(-limit..limit)
}

/// Build a partitioned MLP. Gen widths are `round(capacity_fraction *
/// profile[i])`; `mem_units[i]` mem units are appended per hidden layer.
pub fn init_network(
    input_dim: usize,
    profile: &[usize],
    capacity_fraction: f64,
    mem_units: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<PartitionedNetwork> {
    if !(capacity_fraction > 0.0 && capacity_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "capacity_fraction must be in (0, 1], got {capacity_fraction}"
        )));
    }
    if profile.is_empty() || profile.iter().any(|&w| w == 0) {
        return Err(Error::InvalidArgument(
            "profile widths must be positive".into(),
        ));
    }
    if mem_units.len() != profile.len() {
        return Err(Error::InvalidArgument(format!(
            "mem_units has {} entries for {} hidden layers",
            mem_units.len(),
            profile.len()
        )));
    }
    let mut layers = Vec::new();
    let mut in_dim = input_dim;
    let mut in_gen = input_dim;
    for (li, (&pw, &mem)) in profile.iter().zip(mem_units.iter()).enumerate() {
        let gen = (capacity_fraction * pw as f64).round() as usize;
        if gen == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer {li} has zero gen width after scaling"
            )));
        }
        let out = gen + mem;
        let mut r = rng::stream(seed, &[rng::tag("init"), li as u64]);
        let w: Vec<f64> = (0..out * in_dim).map(|_| he_uniform(in_dim, &mut r)).collect();
        layers.push(Layer {
            w,
            b: vec![0.0; out],
            in_dim,
            out_dim: out,
            gen_out: gen,
            in_gen,
        });
        in_dim = out;
        in_gen = gen;
    }
    let mut r = rng::stream(seed, &[rng::tag("init"), profile.len() as u64]);
    let w: Vec<f64> = (0..num_classes * in_dim)
        .map(|_| he_uniform(in_dim, &mut r))
        .collect();
    layers.push(Layer {
        w,
        b: vec![0.0; num_classes],
        in_dim,
        out_dim: num_classes,
        gen_out: num_classes,
        in_gen,
    });
    Ok(PartitionedNetwork {
        layers,
        input_dim,
        num_classes,
        capacity_fraction,
    })
}

impl PartitionedNetwork {
    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn mem_shape(&self) -> Vec<usize> {
        self.layers[..self.hidden_count()]
            .iter()
            .map(|l| l.mem_out())
            .collect()
    }

    pub fn has_mem(&self) -> bool {
        self.mem_shape().iter().any(|&m| m > 0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Forward pass. `ids` is required for `Masked` mode, one id per row.
    pub fn forward(
        &self,
        batch: &Tensor,
        ids: Option<&[u64]>,
        mode: ForwardMode,
    ) -> Result<(Tensor, ForwardCache)> {
        let bsz = batch.rows();
        if batch.cols() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "batch width {} vs input_dim {}",
                batch.cols(),
                self.input_dim
            )));
        }
        let hidden = self.hidden_count();
        let mut zs = Vec::with_capacity(hidden);
        let mut acts = Vec::with_capacity(hidden);
        let mut unit_masks = Vec::with_capacity(hidden);
        let mut cur = batch.clone();
        for (li, layer) in self.layers[..hidden].iter().enumerate() {
            let mut z = Tensor::zeros(vec![bsz, layer.out_dim]);
            layer.affine(&cur, &mut z);
            let mut um = Tensor::zeros(vec![bsz, layer.out_dim]);
            for r in 0..bsz {
                let row = um.row_mut(r);
                for v in row[..layer.gen_out].iter_mut() {
                    *v = 1.0;
                }
                match mode {
                    ForwardMode::Full => {
                        for v in row[layer.gen_out..].iter_mut() {
                            *v = 1.0;
                        }
                    }
                    ForwardMode::GenOnly => {}
                    ForwardMode::Masked(table) => {
                        let ids = ids.ok_or_else(|| {
                            Error::InvalidArgument("masked forward requires example ids".into())
                        })?;
                        let id = ids[r];
                        let mask = table.get(id).ok_or(Error::MissingMask(id))?;
                        for (v, &bit) in row[layer.gen_out..].iter_mut().zip(&mask.layers[li]) {
                            *v = f64::from(bit);
                        }
                    }
                }
            }
            let mut a = Tensor::zeros(vec![bsz, layer.out_dim]);
            for i in 0..z.data.len() {
                let relu = if z.data[i] > 0.0 { z.data[i] } else { 0.0 };
                a.data[i] = relu * um.data[i];
            }
            zs.push(z);
            unit_masks.push(um);
            acts.push(a.clone());
            cur = a;
        }
        let out_layer = &self.layers[hidden];
        let mut logits = Tensor::zeros(vec![bsz, out_layer.out_dim]);
        out_layer.affine(&cur, &mut logits);
        Ok((
            logits,
            ForwardCache {
                input: batch.clone(),
                zs,
                acts,
                unit_masks,
            },
        ))
    }

    /// Logits only, without keeping the cache.
    pub fn logits(&self, batch: &Tensor, ids: Option<&[u64]>, mode: ForwardMode) -> Result<Tensor> {
        Ok(self.forward(batch, ids, mode)?.0)
    }

    /// Backpropagate `dlogits` (already scaled for the batch reduction)
    /// through the cached pass.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor) -> Result<Grads> {
        let bsz = cache.input.rows();
        if dlogits.rows() != bsz || dlogits.cols() != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "dlogits {:?} vs batch {} x {}",
                dlogits.shape, bsz, self.num_classes
            )));
        }
        let mut grads = Grads::zeros_like(self);
        let mut delta = dlogits.clone();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let prev_act: &Tensor = if li == 0 { &cache.input } else { &cache.acts[li - 1] };
            let g = &mut grads.layers[li];
            for r in 0..bsz {
                let d = delta.row(r);
                let a = prev_act.row(r);
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    let wrow = &mut g.w[j * layer.in_dim..(j + 1) * layer.in_dim];
                    for (wv, av) in wrow.iter_mut().zip(a.iter()) {
                        *wv += dj * av;
                    }
                    g.b[j] += dj;
                }
            }
            if li == 0 {
                break;
            }
            // delta for previous layer: through weights, then mask and ReLU'.
            let mut prev_delta = Tensor::zeros(vec![bsz, layer.in_dim]);
            for r in 0..bsz {
                let d = delta.row(r);
                let pd = prev_delta.row_mut(r);
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    let wrow = &layer.w[j * layer.in_dim..(j + 1) * layer.in_dim];
                    for (pv, wv) in pd.iter_mut().zip(wrow.iter()) {
                        *pv += dj * wv;
                    }
                }
            }
            let z = &cache.zs[li - 1];
            let um = &cache.unit_masks[li - 1];
            for i in 0..prev_delta.data.len() {
                let dz = if z.data[i] > 0.0 { 1.0 } else { 0.0 };
                prev_delta.data[i] *= dz * um.data[i];
            }
            delta = prev_delta;
        }
        Ok(grads)
    }
}

/// Append fresh randomly-initialized mem units per hidden layer. The
/// gen-only function of the network is unchanged (exact logit equality).
pub fn expand_network(
    net: &PartitionedNetwork,
    add_mem: &[usize],
    seed: u64,
) -> Result<PartitionedNetwork> {
    let hidden = net.hidden_count();
    if add_mem.len() != hidden {
        return Err(Error::InvalidArgument(format!(
            "add_mem has {} entries for {} hidden layers",
            add_mem.len(),
            hidden
        )));
    }
    let mut out = net.clone();
    let mut prev_added = 0usize;
    for li in 0..out.layers.len() {
        let added = if li < hidden { add_mem[li] } else { 0 };
        let layer = &net.layers[li];
        let new_in = layer.in_dim + prev_added;
        let new_out = layer.out_dim + added;
        let mut r = rng::stream(seed, &[rng::tag("expand"), li as u64]);
        let mut w = Vec::with_capacity(new_out * new_in);
        // Existing rows keep their old columns; new columns (from the
        // previous layer's added units) and new rows are freshly drawn.
        for j in 0..layer.out_dim {
            w.extend_from_slice(&layer.w[j * layer.in_dim..(j + 1) * layer.in_dim]);
            for _ in 0..prev_added {
                w.push(he_uniform(new_in, &mut r));
            }
        }
        for _ in 0..added * new_in {
            w.push(he_uniform(new_in, &mut r));
        }
        let mut b = layer.b.clone();
        b.extend(std::iter::repeat(0.0).take(added));
        out.layers[li] = Layer {
            w,
            b,
            in_dim: new_in,
            out_dim: new_out,
            gen_out: layer.gen_out,
            in_gen: layer.in_gen,
        };
        prev_added = added;
    }
    Ok(out)
}

/// Remove all mem units and their incident weights. The result's plain
/// forward equals the input's gen-only forward.
pub fn excise_memorization(net: &PartitionedNetwork) -> PartitionedNetwork {
    let hidden = net.hidden_count();
    let mut layers = Vec::with_capacity(net.layers.len());
    for (li, layer) in net.layers.iter().enumerate() {
        let keep_out = if li < hidden { layer.gen_out } else { layer.out_dim };
        let keep_in = layer.in_gen;
        let mut w = Vec::with_capacity(keep_out * keep_in);
        for j in 0..keep_out {
            let row = &layer.w[j * layer.in_dim..(j + 1) * layer.in_dim];
            w.extend_from_slice(&row[..keep_in]);
        }
        layers.push(Layer {
            w,
            b: layer.b[..keep_out].to_vec(),
            in_dim: keep_in,
            out_dim: keep_out,
            gen_out: keep_out,
            in_gen: keep_in,
        });
    }
    PartitionedNetwork {
        layers,
        input_dim: net.input_dim,
        num_classes: net.num_classes,
        capacity_fraction: net.capacity_fraction,
    }
}

/// Argmax class prediction per row.
pub fn predict(net: &PartitionedNetwork, batch: &Tensor, mode: ForwardMode) -> Result<Vec<u32>> {
    let logits = net.logits(batch, None, mode)?;
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect())
}

/// Fraction of rows whose argmax matches `labels`.
pub fn accuracy(
    net: &PartitionedNetwork,
    batch: &Tensor,
    labels: &[u32],
    mode: ForwardMode,
) -> Result<f64> {
    if batch.rows() == 0 {
        return Ok(0.0);
    }
    let preds = predict(net, batch, mode)?;
    let hits = preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking;

    fn toy_batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[rng::tag("toy-batch")]);
        let data = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn init_widths_follow_capacity_fraction() {
        let full = init_network(8, &[64, 64], 1.0, &[0, 0], 10, 0).unwrap();
        assert_eq!(full.layers[0].out_dim, 64);
        let half = init_network(8, &[64, 64], 0.5, &[0, 0], 10, 0).unwrap();
        assert_eq!(half.layers[0].out_dim, 32);
        assert_eq!(half.layers[1].out_dim, 32);
    }

    #[test]
    fn init_rejects_zero_width() {
        assert!(init_network(8, &[64], 0.001, &[0], 10, 0).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_network(8, &[16, 16], 1.0, &[4, 4], 3, 42).unwrap();
        let b = init_network(8, &[16, 16], 1.0, &[4, 4], 3, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_mem_full_equals_gen_only() {
        let net = init_network(6, &[12], 1.0, &[0], 4, 1).unwrap();
        let x = toy_batch(5, 6, 2);
        let a = net.logits(&x, None, ForwardMode::Full).unwrap();
        let b = net.logits(&x, None, ForwardMode::GenOnly).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn all_ones_mask_equals_full() {
        let net = init_network(6, &[12, 12], 1.0, &[4, 4], 4, 1).unwrap();
        let ids: Vec<u64> = (0..5).collect();
        let table = masking::assign_etd_masks(&ids, &[4, 4], 1.0, 7).unwrap();
        let x = toy_batch(5, 6, 2);
        let a = net.logits(&x, None, ForwardMode::Full).unwrap();
        let b = net.logits(&x, Some(&ids), ForwardMode::Masked(&table)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn all_zero_mask_equals_gen_only() {
        let net = init_network(6, &[12], 1.0, &[4], 4, 1).unwrap();
        let ids: Vec<u64> = (0..5).collect();
        let mut table = masking::assign_etd_masks(&ids, &[4], 0.5, 7).unwrap();
        for m in table.entries.values_mut() {
            for l in &mut m.layers {
                l.iter_mut().for_each(|b| *b = 0);
            }
        }
        let x = toy_batch(5, 6, 2);
        let a = net.logits(&x, None, ForwardMode::GenOnly).unwrap();
        let b = net.logits(&x, Some(&ids), ForwardMode::Masked(&table)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn masked_forward_errors_on_missing_id() {
        let net = init_network(6, &[12], 1.0, &[4], 4, 1).unwrap();
        let table = masking::assign_etd_masks(&[0, 1], &[4], 0.5, 7).unwrap();
        let x = toy_batch(3, 6, 2);
        let err = net
            .logits(&x, Some(&[0, 1, 99]), ForwardMode::Masked(&table))
            .unwrap_err();
        match err {
            Error::MissingMask(id) => assert_eq!(id, 99),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn expansion_preserves_gen_only_function() {
        let net = init_network(6, &[12, 12], 0.5, &[0, 0], 4, 1).unwrap();
        let big = expand_network(&net, &[8, 8], 9).unwrap();
        let x = toy_batch(7, 6, 2);
        let a = net.logits(&x, None, ForwardMode::Full).unwrap();
        let b = big.logits(&x, None, ForwardMode::GenOnly).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn expansion_by_zero_is_identity() {
        let net = init_network(6, &[12], 1.0, &[2], 4, 1).unwrap();
        let same = expand_network(&net, &[0], 9).unwrap();
        assert_eq!(net, same);
    }

    #[test]
    fn expansion_is_deterministic() {
        let net = init_network(6, &[12], 1.0, &[0], 4, 1).unwrap();
        let a = expand_network(&net, &[8], 9).unwrap();
        let b = expand_network(&net, &[8], 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn excision_matches_gen_only() {
        let net = init_network(6, &[12, 12], 1.0, &[4, 4], 4, 1).unwrap();
        let cut = excise_memorization(&net);
        let x = toy_batch(9, 6, 2);
        let a = net.logits(&x, None, ForwardMode::GenOnly).unwrap();
        let b = cut.logits(&x, None, ForwardMode::Full).unwrap();
        for (u, v) in a.data.iter().zip(b.data.iter()) {
            assert!((u - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn excision_shrinks_param_count() {
        let net = init_network(6, &[12], 1.0, &[4], 4, 1).unwrap();
        let cut = excise_memorization(&net);
        // removed: 4 rows of 6 inputs + 4 biases in hidden, 4 cols x 4 rows in output
        assert_eq!(net.param_count() - cut.param_count(), 4 * 6 + 4 + 4 * 4);
        assert_eq!(cut.mem_shape(), vec![0]);
    }

    #[test]
    fn excising_pure_gen_net_is_identity() {
        let net = init_network(6, &[12], 1.0, &[0], 4, 1).unwrap();
        assert_eq!(excise_memorization(&net), net);
    }

    #[test]
    fn gen_only_backward_zeroes_mem_grads() {
        let net = init_network(6, &[12, 12], 1.0, &[4, 4], 4, 1).unwrap();
        let x = toy_batch(5, 6, 2);
        let (logits, cache) = net.forward(&x, None, ForwardMode::GenOnly).unwrap();
        let mut dl = Tensor::zeros(logits.shape.clone());
        dl.data.iter_mut().for_each(|v| *v = 0.3);
        let grads = net.backward(&cache, &dl).unwrap();
        for (li, layer) in net.layers.iter().enumerate() {
            let g = &grads.layers[li];
            for j in 0..layer.out_dim {
                for k in 0..layer.in_dim {
                    let mem_incident = j >= layer.gen_out || k >= layer.in_gen;
                    if mem_incident {
                        assert_eq!(g.w[j * layer.in_dim + k], 0.0);
                    }
                }
                if j >= layer.gen_out {
                    assert_eq!(g.b[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_dlogits_gives_zero_grads() {
        let net = init_network(6, &[12], 1.0, &[4], 4, 1).unwrap();
        let x = toy_batch(5, 6, 2);
        let (logits, cache) = net.forward(&x, None, ForwardMode::Full).unwrap();
        let dl = Tensor::zeros(logits.shape.clone());
        let grads = net.backward(&cache, &dl).unwrap();
        for g in &grads.layers {
            assert!(g.w.iter().all(|&v| v == 0.0));
            assert!(g.b.iter().all(|&v| v == 0.0));
        }
    }

    use rand::Rng;
}

#![allow(dead_code)]

//! Helpers shared by the gradient and acceptance suites.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rem_core::net::{init_network, Grads, PartitionedNetwork};
use rem_core::rng::stream;
use rem_core::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn random_batch(
    r: &mut ChaCha8Rng,
    bsz: usize,
    input_dim: usize,
    classes: usize,
) -> (Tensor, Vec<u32>) {
    let data: Vec<f64> = (0..bsz * input_dim).map(|_| r.gen_range(-1.5..1.5)).collect();
    let batch = Tensor::new(vec![bsz, input_dim], data).unwrap();
    let labels: Vec<u32> = (0..bsz).map(|_| r.gen_range(0..classes) as u32).collect();
    (batch, labels)
}

pub fn random_instance(seed: u64, mem: &[usize]) -> (PartitionedNetwork, Tensor, Vec<u32>, Vec<u64>) {
    let mut r = stream(seed, &[0x67adf]);
    let input_dim = r.gen_range(3..7);
    let classes = r.gen_range(2..5);
    let hidden = r.gen_range(4..8);
    let net = init_network(input_dim, &[hidden], 0.75, mem, classes, seed ^ 0x9e37).unwrap();
    let bsz = r.gen_range(2..5);
    let (batch, labels) = random_batch(&mut r, bsz, input_dim, classes);
    let ids: Vec<u64> = (0..bsz as u64).collect();
    (net, batch, labels, ids)
}

fn read_param(net: &PartitionedNetwork, li: usize, slot: usize, k: usize) -> f64 {
    if slot == 0 { net.layers[li].w[k] } else { net.layers[li].b[k] }
}

fn write_param(net: &mut PartitionedNetwork, li: usize, slot: usize, k: usize, v: f64) {
    if slot == 0 { net.layers[li].w[k] = v } else { net.layers[li].b[k] = v }
}

/// Max relative error between an analytic gradient and central differences
/// of `f` over every parameter. A ReLU kink inside the probe interval can
/// make the difference quotient meaningless, so tiny absolute differences
/// also pass.
pub fn check_grads(
    net: &PartitionedNetwork,
    analytic: &Grads,
    mut f: impl FnMut(&PartitionedNetwork) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for li in 0..net.layers.len() {
        for slot in 0..2 {
            let n = if slot == 0 { net.layers[li].w.len() } else { net.layers[li].b.len() };
            for k in 0..n {
                let orig = read_param(&probe, li, slot, k);
                write_param(&mut probe, li, slot, k, orig + FD_EPS);
                let up = f(&probe);
                write_param(&mut probe, li, slot, k, orig - FD_EPS);
                let down = f(&probe);
                write_param(&mut probe, li, slot, k, orig);
                let fd = (up - down) / (2.0 * FD_EPS);
                let an = if slot == 0 { analytic.layers[li].w[k] } else { analytic.layers[li].b[k] };
                if (an - fd).abs() < 1e-7 {
                    continue;
                }
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

/// Worst finite-difference error across the four loss paths, 10 random
/// instances each.
pub fn gradient_suite_worst_error() -> f64 {
    use rem_core::loss;
    use rem_core::masking::assign_etd_masks;
    use rem_core::net::ForwardMode;

    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        // cross-entropy
        let (net, batch, labels, _) = random_instance(seed, &[0]);
        let (logits, cache) = net.forward(&batch, None, ForwardMode::Full).unwrap();
        let ce = loss::cross_entropy(&logits, &labels).unwrap();
        let grads = net.backward(&cache, &loss::ce_grad(&ce.probs, &labels)).unwrap();
        worst = worst.max(check_grads(&net, &grads, |p| {
            let l = p.logits(&batch, None, ForwardMode::Full).unwrap();
            loss::cross_entropy(&l, &labels).unwrap().mean
        }));

        // NPO term
        let mut r = stream(seed, &[0x2217]);
        let ce_ref: Vec<f64> = ce.per_example.iter().map(|v| v * r.gen_range(0.5..2.0) + 0.01).collect();
        let beta = r.gen_range(0.5..2.0);
        let npo = loss::npo_term(&ce.per_example, &ce_ref, beta).unwrap();
        let grads = net
            .backward(&cache, &loss::npo_grad(&ce.probs, &labels, &npo.dloss_dce))
            .unwrap();
        worst = worst.max(check_grads(&net, &grads, |p| {
            let l = p.logits(&batch, None, ForwardMode::Full).unwrap();
            let c = loss::cross_entropy(&l, &labels).unwrap();
            loss::npo_term(&c.per_example, &ce_ref, beta).unwrap().mean
        }));

        // combined remove-minus-redirect on a partitioned net
        let (net, batch, labels, ids) = random_instance(seed, &[3]);
        let table = assign_etd_masks(&ids, &net.mem_shape(), 0.7, seed ^ 0x55).unwrap();
        let mut r = stream(seed, &[0x31c]);
        let f_bsz = r.gen_range(2..5);
        let (f_batch, f_labels) = random_batch(&mut r, f_bsz, net.input_dim, net.num_classes);
        let ce_ref: Vec<f64> = {
            let l = net.logits(&f_batch, None, ForwardMode::GenOnly).unwrap();
            let c = loss::cross_entropy(&l, &f_labels).unwrap();
            c.per_example.iter().map(|v| v * 1.3 + 0.05).collect()
        };
        let (logits_f, cache_f) = net.forward(&f_batch, None, ForwardMode::GenOnly).unwrap();
        let ce_f = loss::cross_entropy(&logits_f, &f_labels).unwrap();
        let npo = loss::npo_term(&ce_f.per_example, &ce_ref, 1.0).unwrap();
        let mut grads = net
            .backward(&cache_f, &loss::npo_grad(&ce_f.probs, &f_labels, &npo.dloss_dce))
            .unwrap();
        let (logits_r, cache_r) = net.forward(&batch, Some(&ids), ForwardMode::Masked(&table)).unwrap();
        let ce_r = loss::cross_entropy(&logits_r, &labels).unwrap();
        let redirect = net.backward(&cache_r, &loss::ce_grad(&ce_r.probs, &labels)).unwrap();
        grads.add_scaled(&redirect, -1.0);
        worst = worst.max(check_grads(&net, &grads, |p| {
            let lf = p.logits(&f_batch, None, ForwardMode::GenOnly).unwrap();
            let cf = loss::cross_entropy(&lf, &f_labels).unwrap();
            let remove = loss::npo_term(&cf.per_example, &ce_ref, 1.0).unwrap().mean;
            let lr = p.logits(&batch, Some(&ids), ForwardMode::Masked(&table)).unwrap();
            let redirect = loss::cross_entropy(&lr, &labels).unwrap().mean;
            remove - redirect
        }));

        // KL distillation
        let (net, batch, _, _) = random_instance(seed, &[0]);
        let teacher_logits = {
            let student = net.logits(&batch, None, ForwardMode::Full).unwrap();
            let mut r = stream(seed, &[0x90]);
            let data: Vec<f64> = (0..student.data.len()).map(|_| r.gen_range(-2.0..2.0)).collect();
            Tensor::new(student.shape.clone(), data).unwrap()
        };
        let temperature = 1.0 + (seed % 4) as f64;
        let (logits, cache) = net.forward(&batch, None, ForwardMode::Full).unwrap();
        let out = loss::distill_kl(&logits, &teacher_logits, temperature).unwrap();
        let grads = net.backward(&cache, &out.dstudent).unwrap();
        worst = worst.max(check_grads(&net, &grads, |p| {
            let l = p.logits(&batch, None, ForwardMode::Full).unwrap();
            loss::distill_kl(&l, &teacher_logits, temperature).unwrap().mean
        }));
    }
    worst
}

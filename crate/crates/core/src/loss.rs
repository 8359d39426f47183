//! Losses: cross-entropy, the NPO removal term, and temperature-scaled KL
//! distillation. Each returns per-example values plus what backward needs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor for probabilities and reference losses inside logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub struct CeOut {
    pub per_example: Vec<f64>,
    pub mean: f64,
    pub probs: Tensor,
}

/// Cross-entropy from logits; probabilities are clamped at `LOG_CLAMP`
/// inside the log.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<CeOut> {
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let classes = logits.cols();
    for &l in labels {
        if l as usize >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
    }
    let probs = softmax_rows(logits);
    let per_example: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -probs.row(r)[l as usize].max(LOG_CLAMP).ln())
        .collect();
    let mean = if per_example.is_empty() {
        0.0
    } else {
        per_example.iter().sum::<f64>() / per_example.len() as f64
    };
    Ok(CeOut {
        per_example,
        mean,
        probs,
    })
}

/// Gradient of mean CE w.r.t. logits: `(softmax - onehot) / batch`.
pub fn ce_grad(probs: &Tensor, labels: &[u32]) -> Tensor {
    let bsz = probs.rows();
    let mut g = probs.clone();
    let scale = 1.0 / bsz as f64;
    for (r, &l) in labels.iter().enumerate() {
        let row = g.row_mut(r);
        row[l as usize] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    g
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(x)` computed as `-softplus(-x)`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub struct NpoOut {
    pub per_example: Vec<f64>,
    pub mean: f64,
    /// dl_i / dce_i for each example.
    pub dloss_dce: Vec<f64>,
}

/// NPO removal term per example:
/// `l = (2/beta) * ln sigmoid(-beta * ln(ce / ce_ref))`.
///
/// Minimizing `l` inflates `ce`; the gradient decays as `ce` grows past
/// `ce_ref`. Both `ce` and `ce_ref` are clamped at `LOG_CLAMP`.
pub fn npo_term(ce: &[f64], ce_ref: &[f64], beta: f64) -> Result<NpoOut> {
    if ce.len() != ce_ref.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ce values vs {} references",
            ce.len(),
            ce_ref.len()
        )));
    }
    if beta <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    let mut per_example = Vec::with_capacity(ce.len());
    let mut dloss_dce = Vec::with_capacity(ce.len());
    for (&c, &cr) in ce.iter().zip(ce_ref.iter()) {
        let c = c.max(LOG_CLAMP);
        let cr = cr.max(LOG_CLAMP);
        let u = -beta * (c / cr).ln();
        per_example.push(2.0 / beta * log_sigmoid(u));
        dloss_dce.push(-2.0 * (1.0 - sigmoid(u)) / c);
    }
    let mean = if per_example.is_empty() {
        0.0
    } else {
        per_example.iter().sum::<f64>() / per_example.len() as f64
    };
    Ok(NpoOut {
        per_example,
        mean,
        dloss_dce,
    })
}

/// Gradient of the mean NPO term w.r.t. logits, via the CE chain rule.
pub fn npo_grad(probs: &Tensor, labels: &[u32], dloss_dce: &[f64]) -> Tensor {
    let bsz = probs.rows();
    let mut g = probs.clone();
    let scale = 1.0 / bsz as f64;
    for (r, &l) in labels.iter().enumerate() {
        let row = g.row_mut(r);
        row[l as usize] -= 1.0;
        let f = dloss_dce[r] * scale;
        for v in row.iter_mut() {
            *v *= f;
        }
    }
    g
}

pub struct DistillOut {
    pub per_example: Vec<f64>,
    pub mean: f64,
    /// d(mean loss)/d(student logits).
    pub dstudent: Tensor,
}

/// Temperature-scaled distillation loss per example:
/// `T^2 * KL(softmax(teacher/T) || softmax(student/T))`.
pub fn distill_kl(student_logits: &Tensor, teacher_logits: &Tensor, temperature: f64) -> Result<DistillOut> {
    if student_logits.shape != teacher_logits.shape {
        return Err(Error::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            student_logits.shape, teacher_logits.shape
        )));
    }
    let t = temperature;
    let mut s_scaled = student_logits.clone();
    let mut te_scaled = teacher_logits.clone();
    s_scaled.data.iter_mut().for_each(|v| *v /= t);
    te_scaled.data.iter_mut().for_each(|v| *v /= t);
    let ps = softmax_rows(&s_scaled);
    let pt = softmax_rows(&te_scaled);
    let bsz = ps.rows();
    let mut per_example = Vec::with_capacity(bsz);
    let mut dstudent = Tensor::zeros(student_logits.shape.clone());
    let scale = 1.0 / bsz as f64;
    for r in 0..bsz {
        let mut kl = 0.0;
        for (&p, &q) in pt.row(r).iter().zip(ps.row(r).iter()) {
            if p > 0.0 {
                kl += p * (p.max(LOG_CLAMP).ln() - q.max(LOG_CLAMP).ln());
            }
        }
        per_example.push(t * t * kl);
        let d = dstudent.row_mut(r);
        for (j, dv) in d.iter_mut().enumerate() {
            *dv = t * (ps.row(r)[j] - pt.row(r)[j]) * scale;
        }
    }
    let mean = per_example.iter().sum::<f64>() / bsz as f64;
    Ok(DistillOut {
        per_example,
        mean,
        dstudent,
    })
}

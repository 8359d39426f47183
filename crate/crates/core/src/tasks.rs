//! Dataset generation and loading, the three corruption types, and
//! discovery-rate splits producing [`TaskInstance`] objects.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Offset applied to test-set example ids so they never collide with train ids.
const TEST_ID_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// N x D inputs in [0, 1].
    pub inputs: Tensor,
    pub clean_labels: Vec<u32>,
    /// Equals `clean_labels` unless corrupted.
    pub effective_labels: Vec<u32>,
    pub corrupted: Vec<bool>,
    pub example_ids: Vec<u64>,
    pub num_classes: usize,
    /// Image geometry, planar channel layout (D = channels * side * side).
    pub side: usize,
    pub channels: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.example_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn corrupted_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.corrupted[i]).collect()
    }

    pub fn corrupted_count(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }

    /// Row index of each example id.
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.example_ids.iter().position(|&e| e == id)
    }

    /// New dataset restricted to the given row indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.gather_rows(indices),
            clean_labels: indices.iter().map(|&i| self.clean_labels[i]).collect(),
            effective_labels: indices.iter().map(|&i| self.effective_labels[i]).collect(),
            corrupted: indices.iter().map(|&i| self.corrupted[i]).collect(),
            example_ids: indices.iter().map(|&i| self.example_ids[i]).collect(),
            num_classes: self.num_classes,
            side: self.side,
            channels: self.channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularity {
    Low,
    Medium,
    High,
}

impl Regularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regularity::Low => "low",
            Regularity::Medium => "medium",
            Regularity::High => "high",
        }
    }
}

impl std::str::FromStr for Regularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Regularity::Low),
            "medium" => Ok(Regularity::Medium),
            "high" => Ok(Regularity::High),
            other => Err(Error::InvalidArgument(format!("unknown regularity {other:?}"))),
        }
    }
}

/// Patch of constant-value pixels stamped at the bottom-right corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub rows: usize,
    pub cols: usize,
    pub value: f64,
}

impl Default for TriggerSpec {
    fn default() -> Self {
        TriggerSpec {
            rows: 2,
            cols: 2,
            value: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionKind {
    RandomLabel,
    Interclass { class_a: u32, class_b: u32 },
    Poison { target_class: u32, trigger: TriggerSpec },
}

impl CorruptionKind {
    pub fn regularity(&self) -> Regularity {
        match self {
            CorruptionKind::RandomLabel => Regularity::Low,
            CorruptionKind::Interclass { .. } => Regularity::Medium,
            CorruptionKind::Poison { .. } => Regularity::High,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(flatten)]
    pub kind: CorruptionKind,
    pub n_corrupt: usize,
    pub seed: u64,
}

/// Corrupted training set plus clean test set and discovery split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// For poison tasks: test inputs with the trigger stamped, for
    /// attack-rate diagnostics.
    pub triggered_test: Option<Tensor>,
    pub forget_ids: Vec<u64>,
    pub retain_ids: Vec<u64>,
    pub undiscovered_ids: Vec<u64>,
    pub discovery_rate: f64,
    pub regularity: Regularity,
    pub poison_target: Option<u32>,
}

impl TaskInstance {
    pub fn forget_indices(&self) -> Vec<usize> {
        self.forget_ids
            .iter()
            .map(|&id| self.train.index_of(id).expect("forget id in train"))
            .collect()
    }

    pub fn retain_indices(&self) -> Vec<usize> {
        self.retain_ids
            .iter()
            .map(|&id| self.train.index_of(id).expect("retain id in train"))
            .collect()
    }
}

/// Synthetic class-prototype images with per-example Gaussian noise. The
/// noise makes individual samples memorizable while keeping classes
/// linearly separable.
pub fn gen_synthetic(
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    side: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let d = side * side;
    let mut prototypes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut r = rng::stream(seed, &[rng::tag("proto"), c as u64]);
        let proto: Vec<f64> = (0..d).map(|_| r.gen_range(0.0..1.0)).collect();
        prototypes.push(proto);
    }
    let make = |per_class: usize, split_tag: u64, id_base: u64| -> LabeledDataset {
        let n = num_classes * per_class;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        let mut i = 0u64;
        for c in 0..num_classes {
            for k in 0..per_class {
                let mut r = rng::stream(seed, &[rng::tag("sample"), split_tag, c as u64, k as u64]);
                let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
                for &p in &prototypes[c] {
                    let noise = if noise_sigma > 0.0 { normal.sample(&mut r) } else { 0.0 };
                    data.push((0.8 * p + noise).clamp(0.0, 1.0));
                }
                labels.push(c as u32);
                ids.push(id_base + i);
                i += 1;
            }
        }
        LabeledDataset {
            inputs: Tensor::new(vec![n, d], data).unwrap(),
            clean_labels: labels.clone(),
            effective_labels: labels,
            corrupted: vec![false; n],
            example_ids: ids,
            num_classes,
            side,
            channels: 1,
        }
    };
    let train = make(per_class_train, 0, 0);
    let test = make(per_class_test, 1, TEST_ID_BASE);
    Ok((train, test))
}

fn read_u32_be(buf: &[u8], offset: usize) -> Result<u32> {
    if offset + 4 > buf.len() {
        return Err(Error::BadFormat {
            offset: offset as u64,
            msg: "unexpected end of file".into(),
        });
    }
    Ok(u32::from_be_bytes([buf[offset], buf[offset + 1], buf[offset + 2], buf[offset + 3]]))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// IDX image + label files (big-endian, magic 0x00000803 / 0x00000801),
/// pixels scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = read_all(images_path)?;
    let lab = read_all(labels_path)?;
    if read_u32_be(&img, 0)? != 0x0000_0803 {
        return Err(Error::BadFormat {
            offset: 0,
            msg: "bad IDX image magic (expected 0x00000803)".into(),
        });
    }
    if read_u32_be(&lab, 0)? != 0x0000_0801 {
        return Err(Error::BadFormat {
            offset: 0,
            msg: "bad IDX label magic (expected 0x00000801)".into(),
        });
    }
    let n = read_u32_be(&img, 4)? as usize;
    let rows = read_u32_be(&img, 8)? as usize;
    let cols = read_u32_be(&img, 12)? as usize;
    let nl = read_u32_be(&lab, 4)? as usize;
    if nl != n {
        return Err(Error::BadFormat {
            offset: 4,
            msg: format!("{n} images but {nl} labels"),
        });
    }
    let d = rows * cols;
    if img.len() != 16 + n * d {
        return Err(Error::BadFormat {
            offset: img.len() as u64,
            msg: format!("image file truncated: expected {} bytes", 16 + n * d),
        });
    }
    if lab.len() != 8 + n {
        return Err(Error::BadFormat {
            offset: lab.len() as u64,
            msg: format!("label file truncated: expected {} bytes", 8 + n),
        });
    }
    let data: Vec<f64> = img[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<u32> = lab[8..].iter().map(|&b| u32::from(b)).collect();
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    Ok(LabeledDataset {
        inputs: Tensor::new(vec![n, d], data)?,
        clean_labels: labels.clone(),
        effective_labels: labels,
        corrupted: vec![false; n],
        example_ids: (0..n as u64).collect(),
        num_classes,
        side: rows,
        channels: 1,
    })
}

/// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes.
pub fn load_cifar_binary(paths: &[&Path]) -> Result<LabeledDataset> {
    const REC: usize = 3073;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let buf = read_all(path)?;
        if buf.is_empty() || buf.len() % REC != 0 {
            return Err(Error::BadFormat {
                offset: buf.len() as u64,
                msg: format!("CIFAR file length {} is not a multiple of {REC}", buf.len()),
            });
        }
        for rec in buf.chunks_exact(REC) {
            labels.push(u32::from(rec[0]));
            data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let n = labels.len();
    Ok(LabeledDataset {
        inputs: Tensor::new(vec![n, 3072], data)?,
        clean_labels: labels.clone(),
        effective_labels: labels,
        corrupted: vec![false; n],
        example_ids: (0..n as u64).collect(),
        num_classes: 10,
        side: 32,
        channels: 3,
    })
}

/// Keep a uniformly sampled subset of `count` examples.
pub fn subsample(ds: &LabeledDataset, count: usize, seed: u64) -> Result<LabeledDataset> {
    if count > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot subsample {count} from {}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::tag("subsample")]));
    idx.truncate(count);
    idx.sort_unstable();
    Ok(LabeledDataset {
        inputs: ds.inputs.gather_rows(&idx),
        clean_labels: idx.iter().map(|&i| ds.clean_labels[i]).collect(),
        effective_labels: idx.iter().map(|&i| ds.effective_labels[i]).collect(),
        corrupted: idx.iter().map(|&i| ds.corrupted[i]).collect(),
        example_ids: idx.iter().map(|&i| ds.example_ids[i]).collect(),
        num_classes: ds.num_classes,
        side: ds.side,
        channels: ds.channels,
    })
}

/// Relabel `n` uniformly chosen examples to a uniformly random wrong label.
pub fn corrupt_random_labels(ds: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "n_corrupt {n} exceeds dataset size {}",
            ds.len()
        )));
    }
    let mut out = ds.clone();
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut r = rng::stream(seed, &[rng::tag("rand-label")]);
    idx.shuffle(&mut r);
    for &i in &idx[..n] {
        let clean = out.clean_labels[i];
        let mut wrong = r.gen_range(0..ds.num_classes as u32 - 1);
        if wrong >= clean {
            wrong += 1;
        }
        out.effective_labels[i] = wrong;
        out.corrupted[i] = true;
    }
    Ok(out)
}

/// Swap labels between two classes: n/2 members of each relabeled as the other.
pub fn corrupt_interclass(
    ds: &LabeledDataset,
    class_a: u32,
    class_b: u32,
    n: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_a == class_b {
        return Err(Error::InvalidArgument("interclass classes must differ".into()));
    }
    if n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "interclass n must be even, got {n}"
        )));
    }
    let half = n / 2;
    let mut out = ds.clone();
    let mut r = rng::stream(seed, &[rng::tag("interclass")]);
    for (src, dst) in [(class_a, class_b), (class_b, class_a)] {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.clean_labels[i] == src).collect();
        if members.len() < half {
            return Err(Error::InvalidArgument(format!(
                "class {src} has {} members, need {half}",
                members.len()
            )));
        }
        members.shuffle(&mut r);
        for &i in &members[..half] {
            out.effective_labels[i] = dst;
            out.corrupted[i] = true;
        }
    }
    Ok(out)
}

fn stamp_trigger(row: &mut [f64], side: usize, channels: usize, trigger: &TriggerSpec) {
    let plane = side * side;
    for c in 0..channels {
        for dr in 0..trigger.rows.min(side) {
            for dc in 0..trigger.cols.min(side) {
                let r = side - 1 - dr;
                let col = side - 1 - dc;
                row[c * plane + r * side + col] = trigger.value;
            }
        }
    }
}

/// Stamp the trigger patch onto `n` examples whose clean label differs from
/// the target class and relabel them to the target.
pub fn corrupt_poison(
    ds: &LabeledDataset,
    n: usize,
    target_class: u32,
    trigger: &TriggerSpec,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut eligible: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.clean_labels[i] != target_class)
        .collect();
    if n > eligible.len() {
        return Err(Error::InvalidArgument(format!(
            "n_corrupt {n} exceeds {} eligible (non-target) examples",
            eligible.len()
        )));
    }
    let mut out = ds.clone();
    let mut r = rng::stream(seed, &[rng::tag("poison")]);
    eligible.shuffle(&mut r);
    for &i in &eligible[..n] {
        stamp_trigger(out.inputs.row_mut(i), ds.side, ds.channels, trigger);
        out.effective_labels[i] = target_class;
        out.corrupted[i] = true;
    }
    Ok(out)
}

/// Apply a corruption spec to a clean training set.
pub fn corrupt(ds: &LabeledDataset, spec: &CorruptionSpec) -> Result<LabeledDataset> {
    match &spec.kind {
        CorruptionKind::RandomLabel => corrupt_random_labels(ds, spec.n_corrupt, spec.seed),
        CorruptionKind::Interclass { class_a, class_b } => {
            corrupt_interclass(ds, *class_a, *class_b, spec.n_corrupt, spec.seed)
        }
        CorruptionKind::Poison { target_class, trigger } => {
            corrupt_poison(ds, spec.n_corrupt, *target_class, trigger, spec.seed)
        }
    }
}

/// Sample `round(rate * |D_c|)` corrupted ids as the forget set. Splits are
/// nested: a lower rate's forget set is a prefix of a higher rate's, given
/// the same seed.
pub fn split_discovery(
    train: LabeledDataset,
    test: LabeledDataset,
    regularity: Regularity,
    rate: f64,
    seed: u64,
) -> Result<TaskInstance> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "discovery rate must be in (0, 1], got {rate}"
        )));
    }
    let mut corrupted_ids: Vec<u64> = train
        .corrupted_indices()
        .iter()
        .map(|&i| train.example_ids[i])
        .collect();
    corrupted_ids.sort_unstable();
    let mut perm = corrupted_ids.clone();
    perm.shuffle(&mut rng::stream(seed, &[rng::tag("discovery")]));
    let k = (rate * corrupted_ids.len() as f64).round() as usize;
    let mut forget_ids: Vec<u64> = perm[..k].to_vec();
    forget_ids.sort_unstable();
    let forget_set: std::collections::BTreeSet<u64> = forget_ids.iter().copied().collect();
    let undiscovered_ids: Vec<u64> = corrupted_ids
        .iter()
        .copied()
        .filter(|id| !forget_set.contains(id))
        .collect();
    let retain_ids: Vec<u64> = train
        .example_ids
        .iter()
        .copied()
        .filter(|id| !forget_set.contains(id))
        .collect();
    let (triggered_test, poison_target) = poison_diag(&train, &test);
    Ok(TaskInstance {
        train,
        test,
        triggered_test,
        forget_ids,
        retain_ids,
        undiscovered_ids,
        discovery_rate: rate,
        regularity,
        poison_target,
    })
}

/// Triggered copy of the test inputs when the train set carries a poison
/// trigger; detected by comparing a corrupted row's corner pixels.
fn poison_diag(train: &LabeledDataset, test: &LabeledDataset) -> (Option<Tensor>, Option<u32>) {
    // poison is recognizable: corrupted rows all share one effective label
    // and their bottom-right pixel sits at the trigger value.
    let idx = train.corrupted_indices();
    if idx.is_empty() {
        return (None, None);
    }
    let target = train.effective_labels[idx[0]];
    let uniform = idx.iter().all(|&i| train.effective_labels[i] == target);
    let corner = train.inputs.row(idx[0])[train.side * train.side - 1];
    let stamped = uniform
        && idx
            .iter()
            .all(|&i| train.inputs.row(i)[train.side * train.side - 1] == corner)
        && idx.iter().all(|&i| train.clean_labels[i] != target);
    if !stamped {
        return (None, None);
    }
    let trigger = TriggerSpec {
        value: corner,
        ..TriggerSpec::default()
    };
    let mut t = test.inputs.clone();
    for r in 0..t.rows() {
        stamp_trigger(t.row_mut(r), test.side, test.channels, &trigger);
    }
    (Some(t), Some(target))
}

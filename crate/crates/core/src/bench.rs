//! Evaluation metrics, the (regularity x discovery) grid runner, SEM
//! aggregation, and CSV/heatmap emission.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskTable;
use crate::net::{accuracy, excise_memorization, init_network, predict, ForwardMode, PartitionedNetwork};
use crate::rng;
use crate::tasks::{
    corrupt, gen_synthetic, split_discovery, CorruptionKind, CorruptionSpec, LabeledDataset,
    Regularity, TaskInstance, TriggerSpec,
};
use crate::train::{train_supervised, TrainConfig};
use crate::unlearn::{run_method, Method, MethodConfig, UnlearnContext};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Accuracy on the clean test set.
    pub utility: f64,
    /// Clean-label accuracy on the corrupted D_f inputs.
    pub healed_forget: f64,
    /// Clean-label accuracy on all corrupted inputs, discovered or not.
    pub healed_all: f64,
    /// utility * healed_all.
    pub product: f64,
    /// Poison tasks: fraction of triggered test inputs predicted as the
    /// poison target.
    pub attack_rate: Option<f64>,
}

/// Evaluate a mem-free (or mem-dropped) network on a task. All forwards run
/// gen-only, which is the plain forward for networks without mem units.
pub fn evaluate(net: &PartitionedNetwork, task: &TaskInstance) -> Result<Metrics> {
    let mode = ForwardMode::GenOnly;
    let utility = accuracy(net, &task.test.inputs, &task.test.clean_labels, mode)?;
    let corrupted_idx = task.train.corrupted_indices();
    let corrupted_inputs = task.train.inputs.gather_rows(&corrupted_idx);
    let corrupted_clean: Vec<u32> = corrupted_idx
        .iter()
        .map(|&i| task.train.clean_labels[i])
        .collect();
    let healed_all = accuracy(net, &corrupted_inputs, &corrupted_clean, mode)?;
    let forget_idx = task.forget_indices();
    let healed_forget = if forget_idx.is_empty() {
        healed_all
    } else {
        let inputs = task.train.inputs.gather_rows(&forget_idx);
        let clean: Vec<u32> = forget_idx.iter().map(|&i| task.train.clean_labels[i]).collect();
        accuracy(net, &inputs, &clean, mode)?
    };
    let attack_rate = match (&task.triggered_test, task.poison_target) {
        (Some(triggered), Some(target)) => {
            let preds = predict(net, triggered, mode)?;
            let eligible: Vec<usize> = (0..task.test.len())
                .filter(|&i| task.test.clean_labels[i] != target)
                .collect();
            let hits = eligible.iter().filter(|&&i| preds[i] == target).count();
            Some(hits as f64 / eligible.len().max(1) as f64)
        }
        _ => None,
    };
    Ok(Metrics {
        utility,
        healed_forget,
        healed_all,
        product: utility * healed_all,
        attack_rate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub regularity: Regularity,
    pub discovery_rate: f64,
    pub seed: u64,
    pub metrics: Metrics,
    pub wall_time: f64,
    pub stop_reason: String,
}

/// Sample mean and standard error (sample std over sqrt k); a single value
/// has SEM 0.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, var.sqrt() / (k as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub key: String,
    pub k: usize,
    pub utility_mean: f64,
    pub utility_sem: f64,
    pub healed_forget_mean: f64,
    pub healed_forget_sem: f64,
    pub healed_all_mean: f64,
    pub healed_all_sem: f64,
    pub product_mean: f64,
    pub product_sem: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Method,
    /// method x regularity x discovery rate (seeds pooled).
    MethodCell,
}

pub fn aggregate(results: &[RunResult], group_by: GroupBy) -> Vec<AggregateResult> {
    let mut groups: BTreeMap<String, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        let key = match group_by {
            GroupBy::Method => r.method.clone(),
            GroupBy::MethodCell => format!(
                "{}/{}/{:.1}",
                r.method,
                r.regularity.as_str(),
                r.discovery_rate
            ),
        };
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, rs)| {
            let col = |f: fn(&Metrics) -> f64| -> Vec<f64> {
                rs.iter().map(|r| f(&r.metrics)).collect()
            };
            let (um, us) = mean_sem(&col(|m| m.utility));
            let (hfm, hfs) = mean_sem(&col(|m| m.healed_forget));
            let (ham, has) = mean_sem(&col(|m| m.healed_all));
            let (pm, ps) = mean_sem(&col(|m| m.product));
            AggregateResult {
                key,
                k: rs.len(),
                utility_mean: um,
                utility_sem: us,
                healed_forget_mean: hfm,
                healed_forget_sem: hfs,
                healed_all_mean: ham,
                healed_all_sem: has,
                product_mean: pm,
                product_sem: ps,
            }
        })
        .collect()
}

/// Everything a grid run needs besides the method/rate/seed axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub side: usize,
    pub noise_sigma: f64,
    pub n_corrupt: usize,
    pub interclass_classes: (u32, u32),
    pub poison_target: u32,
    pub trigger: TriggerSpec,
    /// Full-width hidden profile; gen widths scale by `capacity_fraction`.
    pub profile: Vec<usize>,
    pub capacity_fraction: f64,
    /// Train originals with example-tied dropout.
    pub etd: bool,
    /// ETD mem units per hidden layer; empty mirrors the gen widths.
    pub etd_mem_units: Vec<usize>,
    pub mask_density: f64,
    pub train: TrainConfig,
    pub method: MethodConfig,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_classes: 10,
            per_class_train: 500,
            per_class_test: 100,
            side: 8,
            noise_sigma: 0.3,
            n_corrupt: 1000,
            interclass_classes: (0, 1),
            poison_target: 0,
            trigger: TriggerSpec::default(),
            profile: vec![128, 128],
            capacity_fraction: 0.5,
            etd: false,
            etd_mem_units: Vec::new(),
            mask_density: 0.2,
            train: TrainConfig::default(),
            method: MethodConfig::default(),
            master_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn gen_widths(&self) -> Vec<usize> {
        self.profile
            .iter()
            .map(|&w| (self.capacity_fraction * w as f64).round() as usize)
            .collect()
    }

    pub fn mem_widths(&self) -> Vec<usize> {
        if self.etd_mem_units.is_empty() {
            self.gen_widths()
        } else {
            self.etd_mem_units.clone()
        }
    }

    pub fn corruption_spec(&self, regularity: Regularity, seed: u64) -> CorruptionSpec {
        let kind = match regularity {
            Regularity::Low => CorruptionKind::RandomLabel,
            Regularity::Medium => CorruptionKind::Interclass {
                class_a: self.interclass_classes.0,
                class_b: self.interclass_classes.1,
            },
            Regularity::High => CorruptionKind::Poison {
                target_class: self.poison_target,
                trigger: self.trigger,
            },
        };
        CorruptionSpec {
            kind,
            n_corrupt: self.n_corrupt,
            seed: rng::derive(self.master_seed, &[rng::tag("corrupt"), regularity as u64, seed]),
        }
    }
}

/// A trained original model plus the data it was trained on.
pub struct TrainedOriginal {
    pub net: PartitionedNetwork,
    pub masks: Option<MaskTable>,
    pub train_ds: LabeledDataset,
    pub test_ds: LabeledDataset,
}

/// Build the corrupted data for one (regularity, seed) and train an
/// original model, with or without ETD.
pub fn train_original(
    cfg: &ExperimentConfig,
    regularity: Regularity,
    seed: u64,
    etd: bool,
) -> Result<TrainedOriginal> {
    let (train_ds, test_ds) = make_data(cfg, regularity, seed)?;
    let mem = if etd { cfg.mem_widths() } else { vec![0; cfg.profile.len()] };
    let init_seed = rng::derive(cfg.master_seed, &[rng::tag("init"), regularity as u64, seed, etd as u64]);
    let mut net = init_network(
        cfg.side * cfg.side,
        &cfg.profile,
        cfg.capacity_fraction,
        &mem,
        cfg.num_classes,
        init_seed,
    )?;
    let masks = if etd {
        Some(crate::masking::assign_etd_masks(
            &train_ds.example_ids,
            &net.mem_shape(),
            cfg.mask_density,
            rng::derive(cfg.master_seed, &[rng::tag("etd-masks"), regularity as u64, seed]),
        )?)
    } else {
        None
    };
    let train_seed = rng::derive(cfg.master_seed, &[rng::tag("train"), regularity as u64, seed, etd as u64]);
    train_supervised(&mut net, &train_ds, &cfg.train, masks.as_ref(), train_seed)?;
    Ok(TrainedOriginal {
        net,
        masks,
        train_ds,
        test_ds,
    })
}

/// Generate and corrupt the training data for one (regularity, seed)
/// without training anything.
pub fn make_data(
    cfg: &ExperimentConfig,
    regularity: Regularity,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let data_seed = rng::derive(cfg.master_seed, &[rng::tag("data"), seed]);
    let (train_clean, test_ds) = gen_synthetic(
        cfg.num_classes,
        cfg.per_class_train,
        cfg.per_class_test,
        cfg.side,
        cfg.noise_sigma,
        data_seed,
    )?;
    let spec = cfg.corruption_spec(regularity, seed);
    Ok((corrupt(&train_clean, &spec)?, test_ds))
}

/// Build a task directly from the config, without a trained model.
pub fn make_task(
    cfg: &ExperimentConfig,
    regularity: Regularity,
    rate: f64,
    seed: u64,
) -> Result<TaskInstance> {
    let (train_ds, test_ds) = make_data(cfg, regularity, seed)?;
    let split_seed = rng::derive(cfg.master_seed, &[rng::tag("split"), regularity as u64, seed]);
    split_discovery(train_ds, test_ds, regularity, rate, split_seed)
}

/// Build the task for one grid cell from a trained original's data.
pub fn build_task(
    cfg: &ExperimentConfig,
    orig: &TrainedOriginal,
    regularity: Regularity,
    rate: f64,
    seed: u64,
) -> Result<TaskInstance> {
    let split_seed = rng::derive(cfg.master_seed, &[rng::tag("split"), regularity as u64, seed]);
    split_discovery(
        orig.train_ds.clone(),
        orig.test_ds.clone(),
        regularity,
        rate,
        split_seed,
    )
}

pub struct GridSpec {
    pub methods: Vec<Method>,
    pub regularities: Vec<Regularity>,
    pub discovery_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Evaluate the pre-unlearning model as a 0.0-discovery row per
    /// (method, regularity, seed).
    pub include_zero_discovery: bool,
    pub jobs: usize,
}

impl GridSpec {
    pub fn default_rates() -> Vec<f64> {
        (1..=10).map(|i| i as f64 / 10.0).collect()
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    orig: &TrainedOriginal,
    method: Method,
    regularity: Regularity,
    rate: f64,
    seed: u64,
) -> RunResult {
    let started = Instant::now();
    let outcome = (|| -> Result<(Metrics, String)> {
        if rate == 0.0 {
            // pre-unlearning baseline row
            let task = build_task(cfg, orig, regularity, 1.0, seed)?;
            let net = if orig.net.has_mem() {
                excise_memorization(&orig.net)
            } else {
                orig.net.clone()
            };
            let mut m = evaluate(&net, &task)?;
            m.healed_forget = m.healed_all;
            return Ok((m, "baseline".to_string()));
        }
        let task = build_task(cfg, orig, regularity, rate, seed)?;
        let cell_seed = rng::derive(
            cfg.master_seed,
            &[
                rng::tag("cell"),
                rng::tag(method.as_str()),
                regularity as u64,
                (rate * 1000.0).round() as u64,
                seed,
            ],
        );
        let ctx = UnlearnContext {
            original_net: &orig.net,
            task: &task,
            mask_table: orig.masks.as_ref(),
            cfg: cfg.method.clone(),
            train_recipe: cfg.train.clone(),
            seed: cell_seed,
        };
        let out = run_method(method, &ctx)?;
        let metrics = evaluate(&out.net, &task)?;
        Ok((metrics, out.stop.as_str().to_string()))
    })();
    let wall_time = started.elapsed().as_secs_f64();
    match outcome {
        Ok((metrics, stop_reason)) => RunResult {
            method: method.as_str().to_string(),
            regularity,
            discovery_rate: rate,
            seed,
            metrics,
            wall_time,
            stop_reason,
        },
        Err(e) => RunResult {
            method: method.as_str().to_string(),
            regularity,
            discovery_rate: rate,
            seed,
            metrics: Metrics {
                utility: 0.0,
                healed_forget: 0.0,
                healed_all: 0.0,
                product: 0.0,
                attack_rate: None,
            },
            wall_time,
            stop_reason: format!("error: {e}"),
        },
    }
}

/// Run every (method, regularity, rate, seed) cell. Results are ordered
/// canonically and are independent of the worker count.
pub fn run_grid(cfg: &ExperimentConfig, spec: &GridSpec) -> Result<Vec<RunResult>> {
    // originals shared across rates: one per (regularity, seed, etd-variant)
    let mut variants: Vec<(Regularity, u64, bool)> = Vec::new();
    for &reg in &spec.regularities {
        for &seed in &spec.seeds {
            let mut needed: Vec<bool> = Vec::new();
            for m in &spec.methods {
                let etd = cfg.etd || m.requires_etd();
                if !needed.contains(&etd) {
                    needed.push(etd);
                }
            }
            for etd in needed {
                variants.push((reg, seed, etd));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let originals: BTreeMap<(Regularity, u64, bool), Arc<TrainedOriginal>> = pool.install(|| {
        variants
            .par_iter()
            .map(|&(reg, seed, etd)| {
                train_original(cfg, reg, seed, etd).map(|t| ((reg, seed, etd), Arc::new(t)))
            })
            .collect::<Result<_>>()
    })?;
    let mut cells: Vec<(Method, Regularity, f64, u64)> = Vec::new();
    for &m in &spec.methods {
        for &reg in &spec.regularities {
            if spec.include_zero_discovery {
                for &seed in &spec.seeds {
                    cells.push((m, reg, 0.0, seed));
                }
            }
            for &rate in &spec.discovery_rates {
                for &seed in &spec.seeds {
                    cells.push((m, reg, rate, seed));
                }
            }
        }
    }
    let results: Vec<RunResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, reg, rate, seed)| {
                let etd = cfg.etd || m.requires_etd();
                let orig = &originals[&(reg, seed, etd)];
                run_cell(cfg, orig, m, reg, rate, seed)
            })
            .collect()
    });
    Ok(results)
}

pub const CSV_HEADER: &str =
    "method,regularity,discovery_rate,seed,utility,healed_forget,healed_all,product,wall_time,stop_reason";

/// Write results as fixed-point CSV, atomically (temp file + rename).
pub fn emit_csv(results: &[RunResult], path: &Path) -> Result<()> {
    let mut body = String::from(CSV_HEADER);
    body.push('\n');
    for r in results {
        body.push_str(&format!(
            "{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.method,
            r.regularity.as_str(),
            r.discovery_rate,
            r.seed,
            r.metrics.utility,
            r.metrics.healed_forget,
            r.metrics.healed_all,
            r.metrics.product,
            r.wall_time,
            r.stop_reason
        ));
    }
    write_atomic(path, body.as_bytes())
}

pub fn emit_aggregate_csv(aggregates: &[AggregateResult], path: &Path) -> Result<()> {
    let mut body = String::from(
        "key,k,utility_mean,utility_sem,healed_forget_mean,healed_forget_sem,healed_all_mean,healed_all_sem,product_mean,product_sem\n",
    );
    for a in aggregates {
        body.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            a.key,
            a.k,
            a.utility_mean,
            a.utility_sem,
            a.healed_forget_mean,
            a.healed_forget_sem,
            a.healed_all_mean,
            a.healed_all_sem,
            a.product_mean,
            a.product_sem
        ));
    }
    write_atomic(path, body.as_bytes())
}

/// Parse a results CSV produced by [`emit_csv`].
pub fn parse_csv(path: &Path) -> Result<Vec<RunResult>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::BadFormat {
        offset: 0,
        msg: "empty CSV".into(),
    })?;
    if header != CSV_HEADER {
        return Err(Error::BadFormat {
            offset: 0,
            msg: format!("unexpected CSV header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line.splitn(10, ',').collect();
        if fields.len() != 10 {
            return Err(Error::BadFormat {
                offset: ln as u64 + 1,
                msg: format!("expected 10 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::BadFormat {
                offset: ln as u64 + 1,
                msg: format!("bad float {s:?}"),
            })
        };
        let utility = parse_f(fields[4])?;
        let healed_all = parse_f(fields[6])?;
        out.push(RunResult {
            method: fields[0].to_string(),
            regularity: fields[1].parse()?,
            discovery_rate: parse_f(fields[2])?,
            seed: fields[3].parse().map_err(|_| Error::BadFormat {
                offset: ln as u64 + 1,
                msg: format!("bad seed {:?}", fields[3]),
            })?,
            metrics: Metrics {
                utility,
                healed_forget: parse_f(fields[5])?,
                healed_all,
                product: parse_f(fields[7])?,
                attack_rate: None,
            },
            wall_time: parse_f(fields[8])?,
            stop_reason: fields[9].to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Utility,
    HealedForget,
    HealedAll,
    Product,
}

impl MetricKind {
    pub fn extract(&self, m: &Metrics) -> f64 {
        match self {
            MetricKind::Utility => m.utility,
            MetricKind::HealedForget => m.healed_forget,
            MetricKind::HealedAll => m.healed_all,
            MetricKind::Product => m.product,
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "utility" => Ok(MetricKind::Utility),
            "healed_forget" => Ok(MetricKind::HealedForget),
            "healed_all" => Ok(MetricKind::HealedAll),
            "product" => Ok(MetricKind::Product),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

/// SVG heatmap: rows are regularities (high on top), columns discovery
/// rates ascending left to right, cell shade linear in the metric with
/// darker = higher; the value is printed in each cell.
pub fn emit_heatmap(results: &[RunResult], metric: MetricKind, path: &Path) -> Result<()> {
    let mut regs: Vec<Regularity> = Vec::new();
    let mut rates: Vec<f64> = Vec::new();
    for r in results {
        if !regs.contains(&r.regularity) {
            regs.push(r.regularity);
        }
        if !rates.iter().any(|&x| x == r.discovery_rate) {
            rates.push(r.discovery_rate);
        }
    }
    regs.sort();
    regs.reverse(); // high regularity on top
    rates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cell_w = 56.0;
    let cell_h = 40.0;
    let margin_left = 70.0;
    let margin_top = 30.0;
    let width = margin_left + cell_w * rates.len() as f64 + 10.0;
    let height = margin_top + cell_h * regs.len() as f64 + 30.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    for (ri, reg) in regs.iter().enumerate() {
        let y = margin_top + cell_h * ri as f64;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            margin_left - 6.0,
            y + cell_h / 2.0 + 4.0,
            reg.as_str()
        ));
        for (ci, &rate) in rates.iter().enumerate() {
            let vals: Vec<f64> = results
                .iter()
                .filter(|r| r.regularity == *reg && r.discovery_rate == rate)
                .map(|r| metric.extract(&r.metrics))
                .collect();
            let (mean, _) = mean_sem(&vals);
            let shade = (255.0 * (1.0 - mean.clamp(0.0, 1.0))).round() as u8;
            let x = margin_left + cell_w * ci as f64;
            let text_color = if shade < 96 { "#ffffff" } else { "#000000" };
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell_w:.1}\" height=\"{cell_h:.1}\" fill=\"rgb({shade},{shade},{shade})\" stroke=\"#888\"/>\n"
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"{}\">{:.2}</text>\n",
                x + cell_w / 2.0,
                y + cell_h / 2.0 + 4.0,
                text_color,
                mean
            ));
        }
    }
    for (ci, &rate) in rates.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.1}</text>\n",
            margin_left + cell_w * (ci as f64 + 0.5),
            margin_top + cell_h * regs.len() as f64 + 18.0,
            rate
        ));
    }
    svg.push_str("</svg>\n");
    write_atomic(path, svg.as_bytes())
}

/// Write via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

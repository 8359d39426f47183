//! `rem` — command-line front end for the unlearning workbench.
//!
//! Exit codes: 0 success, 2 bad config, 3 missing file, 4 numeric failure,
//! 1 anything else. Failures print one machine-readable JSON line on
//! stderr. All outputs are written atomically.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rem_core::bench::{
    aggregate, emit_aggregate_csv, emit_csv, emit_heatmap, evaluate, make_data, make_task,
    parse_csv, run_grid, train_original, write_atomic, GroupBy, MetricKind, RunResult,
};
use rem_core::checkpoint::{load_checkpoint, save_checkpoint};
use rem_core::config::{write_manifest, Config};
use rem_core::cscore::{estimate_cscore, CScoreConfig};
use rem_core::error::Error;
use rem_core::tasks::Regularity;
use rem_core::unlearn::{run_method, Method, UnlearnContext};

const OUT_DIR_ENV: &str = "REM_OUT_DIR";

#[derive(Parser)]
#[command(name = "rem", about = "Unlearning workbench for corrupted training data", version)]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (falls back to config, then $REM_OUT_DIR, then ".").
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and write IDX image/label files.
    GenData,
    /// Corrupt the training data and write the corruption record.
    Corrupt {
        #[arg(long, default_value = "low")]
        regularity: Regularity,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train an original model on corrupted data and save a checkpoint.
    Train {
        #[arg(long, default_value = "low")]
        regularity: Regularity,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train with example-tied dropout.
        #[arg(long)]
        etd: bool,
    },
    /// Run one unlearning method on one task cell.
    Unlearn {
        #[arg(long)]
        method: Method,
        #[arg(long, default_value = "low")]
        regularity: Regularity,
        #[arg(long, default_value_t = 0.5)]
        discovery: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpointed model on a task cell.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "low")]
        regularity: Regularity,
        #[arg(long, default_value_t = 0.5)]
        discovery: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full (method x regularity x discovery x seed) grid.
    Grid {
        /// Worker threads; results are identical for any value.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Estimate the consistency score of one training example.
    Cscore {
        #[arg(long, default_value_t = 0)]
        target: usize,
        /// Pool size drawn from the clean training set.
        #[arg(long, default_value_t = 64)]
        pool_size: usize,
        #[arg(long, default_value = "low")]
        regularity: Regularity,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a results CSV as an SVG heatmap.
    Heatmap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "product")]
        metric: String,
        /// Keep only this method's rows.
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value = "heatmap.svg")]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match &e {
                Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::Json(_) | Error::BadFormat { .. } => 2,
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
                Error::Io(_) => 3,
                Error::NonFiniteGradient(_) => 4,
                _ => 1,
            };
            eprintln!(
                "error: {}",
                serde_json::json!({ "code": code, "message": e.to_string() })
            );
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cfg.validate()?;
    let out = out_dir(&cli, &cfg);
    std::fs::create_dir_all(&out)?;
    let exp = cfg.experiment();
    match cli.cmd {
        Cmd::GenData => {
            let (train, test) = make_data(&exp, Regularity::Low, 0)?;
            write_idx(&out, "train", &train.inputs.data, train.inputs.rows(), exp.side, &train.clean_labels)?;
            write_idx(&out, "test", &test.inputs.data, test.inputs.rows(), exp.side, &test.clean_labels)?;
            write_manifest(&out, &cfg)?;
            println!("wrote {} train and {} test examples", train.len(), test.len());
        }
        Cmd::Corrupt { regularity, seed } => {
            let (train, _) = make_data(&exp, regularity, seed)?;
            let record: Vec<serde_json::Value> = train
                .corrupted_indices()
                .iter()
                .map(|&i| {
                    serde_json::json!({
                        "example_id": train.example_ids[i],
                        "clean_label": train.clean_labels[i],
                        "effective_label": train.effective_labels[i],
                    })
                })
                .collect();
            let doc = serde_json::json!({
                "regularity": regularity.as_str(),
                "seed": seed,
                "n_corrupt": record.len(),
                "corrupted": record,
            });
            write_atomic(&out.join("corruption.json"), format!("{:#}\n", doc).as_bytes())?;
            write_manifest(&out, &cfg)?;
            println!("corrupted {} of {} examples", record.len(), train.len());
        }
        Cmd::Train { regularity, seed, etd } => {
            let trained = train_original(&exp, regularity, seed, etd || exp.etd)?;
            let path = out.join("original.rmck");
            save_checkpoint(&path, &trained.net, trained.masks.as_ref(), exp.master_seed)?;
            write_manifest(&out, &cfg)?;
            println!("saved {}", path.display());
        }
        Cmd::Unlearn { method, regularity, discovery, seed } => {
            let etd = exp.etd || method.requires_etd();
            let trained = train_original(&exp, regularity, seed, etd)?;
            let task = make_task(&exp, regularity, discovery, seed)?;
            let ctx = UnlearnContext {
                original_net: &trained.net,
                task: &task,
                mask_table: trained.masks.as_ref(),
                cfg: exp.method.clone(),
                train_recipe: exp.train.clone(),
                seed: exp.master_seed,
            };
            let started = std::time::Instant::now();
            let outcome = run_method(method, &ctx)?;
            let metrics = evaluate(&outcome.net, &task)?;
            let row = RunResult {
                method: method.as_str().to_string(),
                regularity,
                discovery_rate: discovery,
                seed,
                metrics,
                wall_time: started.elapsed().as_secs_f64(),
                stop_reason: outcome.stop.as_str().to_string(),
            };
            emit_csv(&[row], &out.join("result.csv"))?;
            save_checkpoint(&out.join("unlearned.rmck"), &outcome.net, None, exp.master_seed)?;
            write_manifest(&out, &cfg)?;
            println!(
                "{}: utility {:.4} healed_all {:.4} product {:.4} ({})",
                method.as_str(),
                metrics.utility,
                metrics.healed_all,
                metrics.product,
                outcome.stop.as_str()
            );
        }
        Cmd::Eval { checkpoint, regularity, discovery, seed } => {
            let ck = load_checkpoint(&checkpoint)?;
            let task = make_task(&exp, regularity, discovery, seed)?;
            let m = evaluate(&ck.net, &task)?;
            println!(
                "{}",
                serde_json::json!({
                    "utility": m.utility,
                    "healed_forget": m.healed_forget,
                    "healed_all": m.healed_all,
                    "product": m.product,
                    "attack_rate": m.attack_rate,
                })
            );
        }
        Cmd::Grid { jobs } => {
            let mut spec = cfg.grid_spec()?;
            if let Some(j) = jobs {
                spec.jobs = j.max(1);
            }
            let results = run_grid(&exp, &spec)?;
            emit_csv(&results, &out.join("results.csv"))?;
            let aggregates = aggregate(&results, GroupBy::Method);
            emit_aggregate_csv(&aggregates, &out.join("aggregates.csv"))?;
            write_manifest(&out, &cfg)?;
            println!("wrote {} rows to {}", results.len(), out.join("results.csv").display());
            for a in &aggregates {
                println!(
                    "{}: product {:.4} ± {:.4} (k={})",
                    a.key, a.product_mean, a.product_sem, a.k
                );
            }
        }
        Cmd::Cscore { target, pool_size, regularity, seed } => {
            let (train, _) = make_data(&exp, regularity, seed)?;
            let pool = rem_core::tasks::subsample(&train, pool_size, exp.master_seed)?;
            if target >= pool.len() {
                return Err(Error::InvalidArgument(format!(
                    "target {target} out of range for pool of {}",
                    pool.len()
                )));
            }
            let ccfg = CScoreConfig::for_pool(pool.len(), exp.master_seed);
            let score = estimate_cscore(&pool, target, &ccfg)?;
            println!("{}", serde_json::json!({ "target": target, "cscore": score }));
        }
        Cmd::Heatmap { input, metric, method, output } => {
            let metric: MetricKind = metric.parse()?;
            let mut rows = parse_csv(&input)?;
            if let Some(m) = method {
                rows.retain(|r| r.method == m);
                if rows.is_empty() {
                    return Err(Error::InvalidArgument(format!("no rows for method {m:?}")));
                }
            }
            let path = if output.is_absolute() { output } else { out.join(output) };
            emit_heatmap(&rows, metric, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn out_dir(cli: &Cli, cfg: &Config) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Write one dataset as an IDX image/label file pair (pixels quantized to
/// 8 bits).
fn write_idx(
    dir: &Path,
    stem: &str,
    pixels: &[f64],
    n: usize,
    side: usize,
    labels: &[u32],
) -> Result<(), Error> {
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(side as u32).to_be_bytes());
    img.extend_from_slice(&(side as u32).to_be_bytes());
    img.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_atomic(&dir.join(format!("{stem}-images-idx3-ubyte")), &img)?;
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(labels.iter().map(|&l| l as u8));
    write_atomic(&dir.join(format!("{stem}-labels-idx1-ubyte")), &lab)?;
    Ok(())
}

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use saff::config::RunConfig;
use saff::data::{generate_synthetic, load_store, save_store, FeatureStore};
use saff::experiments::{compare_masks, run_seeds, summarize_reports, sweep, SWEEP_ITERS, SWEEP_SLOTS};
use saff::export::{
    attention_records, load_json, load_report, loss_records, save_json, save_jsonl, save_report, write_jsonl,
};
use saff::stats::{mcnemar, mcnemar_paired, Discordant};
use saff::train::{grad_check, GradCheckConfig};
use saff::{evaluate, train, Error, EvalReport, ModelParams, Result};

#[derive(Parser)]
#[command(name = "saff", version, about = "Slot-attention feature filtering for few-shot classification")]
#[command(args_override_self = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override the config file.
#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    n_way: Option<usize>,
    #[arg(long, global = true)]
    k_shot: Option<usize>,
    #[arg(long, global = true)]
    q_per_class: Option<usize>,
    /// Evaluation episodes
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[arg(long, global = true)]
    train_episodes: Option<usize>,
    #[arg(long, global = true)]
    slots: Option<usize>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// binary or weighted
    #[arg(long, global = true)]
    mask_mode: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// full or no_filter
    #[arg(long, global = true)]
    ablation: Option<String>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Print a table instead of JSON lines
    #[arg(long, global = true)]
    pretty: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature store
    SynthGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split and save parameters as JSON
    Train {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss curve (JSON lines)
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Evaluate on test episodes (untrained parameters without --params)
    Eval {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Full report including per-query correctness
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy over {3,5,10} slots x {3,5,10} iterations
    Sweep {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Binary versus weighted masking on identical episodes
    CompareMasks {
        #[arg(long)]
        store: PathBuf,
        /// Share these parameters instead of training one model per mode
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// McNemar's test from two eval reports or from discordant counts
    Mcnemar {
        #[arg(long, requires = "report_b")]
        report_a: Option<PathBuf>,
        #[arg(long)]
        report_b: Option<PathBuf>,
        /// A correct, B wrong
        #[arg(long, conflicts_with = "report_a", requires = "c")]
        b: Option<u64>,
        /// A wrong, B correct
        #[arg(long, requires = "b")]
        c: Option<u64>,
        #[arg(long)]
        no_correction: bool,
    },
    /// Median / mean / std over seeds, from saved reports or fresh runs
    Seeds {
        #[arg(long, conflicts_with = "reports")]
        store: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-iteration attention and filter internals as JSON lines
    ExportAttn {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check on a tiny model
    Gradcheck,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let flags: [(&str, Option<String>); 13] = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("n_way", common.n_way.map(|v| v.to_string())),
        ("k_shot", common.k_shot.map(|v| v.to_string())),
        ("q_per_class", common.q_per_class.map(|v| v.to_string())),
        ("episodes_eval", common.episodes.map(|v| v.to_string())),
        ("episodes_train", common.train_episodes.map(|v| v.to_string())),
        ("n_slots", common.slots.map(|v| v.to_string())),
        ("n_iters", common.iters.map(|v| v.to_string())),
        ("mask_mode", common.mask_mode.clone()),
        ("lambda", common.lambda.map(|v| v.to_string())),
        ("threshold", common.threshold.map(|v| v.to_string())),
        ("ablation", common.ablation.clone()),
        ("learning_rate", common.lr.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig) {
    let mut err = std::io::stderr().lock();
    for line in cfg.render().lines() {
        let _ = writeln!(err, "# {line}");
    }
}

fn open_store(path: &Path) -> Result<FeatureStore> {
    let store = load_store(path)?;
    store.validate()?;
    Ok(store)
}

fn params_or_init(path: Option<&Path>, store: &FeatureStore, cfg: &RunConfig) -> Result<ModelParams> {
    let params = match path {
        Some(p) => load_json(p)?,
        None => cfg.train.init_params(store.n_patches, store.dim),
    };
    params.check_store(store)?;
    Ok(params)
}

fn emit<T: Serialize>(records: &[T], out: Option<&Path>) -> Result<()> {
    write_jsonl(records, std::io::stdout().lock())?;
    if let Some(path) = out {
        save_jsonl(records, path)?;
    }
    Ok(())
}

fn summary_line(r: &EvalReport) -> serde_json::Value {
    serde_json::json!({
        "seed": r.seed,
        "episodes": r.episode_accuracies.len(),
        "accuracy": r.mean_accuracy,
        "ci95": r.ci95,
    })
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let cfg = resolve(common)?;
    echo_config(&cfg);
    let pretty = common.pretty;
    match cli.command {
        Command::SynthGen { out } => {
            let store = generate_synthetic(&cfg.synth)?;
            save_store(&store, &out)?;
            eprintln!("# wrote {} images of {} classes to {}", store.len(), store.n_classes(), out.display());
        }
        Command::Train { store, out, losses } => {
            cfg.train.validate()?;
            let store = open_store(&store)?;
            let trained = train(&store, &cfg.train)?;
            save_json(&trained.params, &out)?;
            if let Some(path) = losses {
                save_jsonl(&loss_records(&trained.losses), &path)?;
            }
            let n = trained.losses.len();
            let tail = &trained.losses[n.saturating_sub(100)..];
            let final_loss = if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 };
            emit(&[serde_json::json!({ "steps": n, "final_loss_mean_100": final_loss })], None)?;
        }
        Command::Eval { store, params, out } => {
            let store = open_store(&store)?;
            let params = params_or_init(params.as_deref(), &store, &cfg)?;
            let report = evaluate(&store, &params, &cfg.train)?;
            if let Some(path) = out {
                save_report(&report, &path)?;
            }
            if pretty {
                println!("accuracy {:.2} ± {:.2} over {} episodes", report.mean_accuracy, report.ci95, report.episode_accuracies.len());
            } else {
                emit(&[summary_line(&report)], None)?;
            }
        }
        Command::Sweep { store, out } => {
            let store = open_store(&store)?;
            let rows = sweep(&store, &cfg.train, &SWEEP_SLOTS, &SWEEP_ITERS)?;
            if pretty {
                println!("{:>6} {:>6} {:>16}", "slots", "iters", "accuracy");
                for r in &rows {
                    println!("{:>6} {:>6} {:>8.2} ± {:<5.2}", r.n_slots, r.n_iters, r.accuracy, r.ci95);
                }
            }
            if let Some(path) = out.as_deref() {
                save_jsonl(&rows, path)?;
            }
            if !pretty {
                emit(&rows, None)?;
            }
        }
        Command::CompareMasks { store, params, out } => {
            let store = open_store(&store)?;
            let params = match params {
                Some(p) => Some(params_or_init(Some(&p), &store, &cfg)?),
                None => None,
            };
            let cmp = compare_masks(&store, &cfg.train, params.as_ref())?;
            if pretty {
                for r in &cmp.rows {
                    println!("{:<9} {:>8.2} ± {:.2}", r.mask_mode.to_string(), r.accuracy, r.ci95);
                }
                match &cmp.mcnemar {
                    Some(m) => println!("mcnemar chi2 {:.4} p {:.4} (b={}, c={})", m.chi2, m.p_value, m.b, m.c),
                    None => println!("mcnemar undefined: no discordant queries"),
                }
            }
            if let Some(path) = out.as_deref() {
                save_json(&cmp, path)?;
            }
            if !pretty {
                emit(&cmp.rows, None)?;
                let test = match &cmp.mcnemar {
                    Some(m) => serde_json::to_value(m)?,
                    None => serde_json::json!({ "undefined": "no discordant queries" }),
                };
                emit(&[test], None)?;
            }
        }
        Command::Mcnemar { report_a, report_b, b, c, no_correction } => {
            let result = match (report_a, report_b, b, c) {
                (Some(a), Some(bp), _, _) => {
                    let ra = load_report(&a)?;
                    let rb = load_report(&bp)?;
                    mcnemar_paired(&ra.correct, &rb.correct, !no_correction)?
                }
                (None, None, Some(b), Some(c)) => mcnemar(Discordant { b, c }, !no_correction)?,
                _ => return Err(Error::Usage("give --report-a and --report-b, or --b and --c".into())),
            };
            if pretty {
                println!("b {} c {} chi2 {:.4} p {:.4}", result.b, result.c, result.chi2, result.p_value);
            } else {
                emit(&[result], None)?;
            }
        }
        Command::Seeds { store, seeds, reports, out } => {
            let reports: Vec<EvalReport> = match store {
                Some(path) => run_seeds(&open_store(&path)?, &cfg.train, &seeds)?,
                None if !reports.is_empty() => reports.iter().map(|p| load_report(p)).collect::<Result<_>>()?,
                None => return Err(Error::Usage("give --store or --reports".into())),
            };
            let (rows, summary) = summarize_reports(&reports)?;
            if pretty {
                for r in &rows {
                    println!("seed {:>4} {:>8.2} ± {:.2}", r.seed, r.accuracy, r.ci95);
                }
                println!("median {:.2} mean {:.2} std {:.2}", summary.median, summary.mean, summary.std);
            } else {
                emit(&rows, None)?;
                emit(&[summary], None)?;
            }
            if let Some(path) = out {
                save_json(&serde_json::json!({ "runs": rows, "summary": summary }), &path)?;
            }
        }
        Command::ExportAttn { store, params, ids, out } => {
            let store = open_store(&store)?;
            let params = params_or_init(params.as_deref(), &store, &cfg)?;
            let records = attention_records(&store, &params, &cfg.train.model, &ids, cfg.train.seed)?;
            save_jsonl(&records, &out)?;
            eprintln!("# wrote {} records to {}", records.len(), out.display());
        }
        Command::Gradcheck => {
            let gc = GradCheckConfig { seed: cfg.train.seed, ..Default::default() };
            let report = grad_check(&gc)?;
            if pretty {
                for (name, err) in &report.groups {
                    println!("{name:<20} {err:.3e}");
                }
                println!("max relative error {:.3e}", report.max_relative_error);
            } else {
                let rows: Vec<_> = report
                    .groups
                    .iter()
                    .map(|(g, e)| serde_json::json!({ "group": g, "relative_error": e }))
                    .collect();
                emit(&rows, None)?;
                emit(&[serde_json::json!({ "max_relative_error": report.max_relative_error })], None)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

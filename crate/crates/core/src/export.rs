//! JSON and JSON-lines output: attention dumps, parameter files, reports.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::FeatureStore;
use crate::error::{Error, Result};
use crate::filter::filter;
use crate::model::{ModelConfig, ModelParams};
use crate::rng::SaffRng;
use crate::slot_attention::run;
use crate::tensor::Tensor;
use crate::train::EvalReport;

/// Domain for the slot jitter of attention dumps; image `i` uses stream `i`.
pub const EXPORT_DOMAIN: u64 = 0x5eed_0000_0000_0003;

/// One line of an attention dump. Each image yields one `iteration` record
/// per refinement step followed by one `final` record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionRecord {
    Iteration {
        image: usize,
        label: usize,
        iteration: usize,
        /// N×P, one row per slot.
        attention: Vec<Vec<f64>>,
    },
    Final {
        image: usize,
        label: usize,
        similarity: Vec<f64>,
        similarity_norm: Vec<f64>,
        mask: Vec<bool>,
        n_passing: usize,
        combined: Vec<f64>,
    },
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = t.dims2();
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

/// Runs slot attention and the filter on each listed image.
pub fn attention_records(
    store: &FeatureStore,
    params: &ModelParams,
    cfg: &ModelConfig,
    ids: &[usize],
    seed: u64,
) -> Result<Vec<AttentionRecord>> {
    params.check_store(store)?;
    let mut out = Vec::with_capacity(ids.len() * (cfg.slots.n_iters + 1));
    for &id in ids {
        let img = store.image(id)?;
        let mut rng = SaffRng::stream(seed ^ EXPORT_DOMAIN, id as u64);
        let state = run(&img.patches, &img.class_token, cfg.slots, &params.slot, &mut rng)?;
        for (iteration, attn) in state.attention_history.iter().enumerate() {
            out.push(AttentionRecord::Iteration {
                image: id,
                label: img.label,
                iteration,
                attention: rows(attn),
            });
        }
        let f = filter(&img.patches, &img.class_token, &state, &cfg.filter)?;
        out.push(AttentionRecord::Final {
            image: id,
            label: img.label,
            similarity: f.similarity.data().to_vec(),
            similarity_norm: f.similarity_norm.data().to_vec(),
            mask: f.mask.data().iter().map(|&m| m > 0.0).collect(),
            n_passing: f.n_passing,
            combined: f.combined.data().to_vec(),
        });
    }
    Ok(out)
}

/// One training step of a loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

pub fn loss_records(losses: &[f64]) -> Vec<LossRecord> {
    losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRecord { step, loss })
        .collect()
}

/// One line of a saved [`EvalReport`]: a record per episode, then a summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportRecord {
    Episode {
        index: usize,
        accuracy: f64,
        correct: Vec<bool>,
    },
    Summary {
        seed: u64,
        episodes: usize,
        mean_accuracy: f64,
        ci95: f64,
    },
}

pub fn report_records(r: &EvalReport) -> Vec<ReportRecord> {
    let n = r.episode_accuracies.len();
    let per = if n == 0 { 0 } else { r.correct.len() / n };
    let mut out: Vec<ReportRecord> = r
        .episode_accuracies
        .iter()
        .enumerate()
        .map(|(index, &accuracy)| ReportRecord::Episode {
            index,
            accuracy,
            correct: r.correct[index * per..(index + 1) * per].to_vec(),
        })
        .collect();
    out.push(ReportRecord::Summary {
        seed: r.seed,
        episodes: n,
        mean_accuracy: r.mean_accuracy,
        ci95: r.ci95,
    });
    out
}

pub fn report_from_records(records: Vec<ReportRecord>) -> Result<EvalReport> {
    let bad = |msg: &str| Error::Config(format!("eval report: {msg}"));
    let mut accs = Vec::new();
    let mut correct = Vec::new();
    let mut summary = None;
    for rec in records {
        match rec {
            ReportRecord::Episode { index, accuracy, correct: c } => {
                if index != accs.len() {
                    return Err(bad("episode records out of order"));
                }
                accs.push(accuracy);
                correct.extend(c);
            }
            ReportRecord::Summary { seed, episodes, mean_accuracy, ci95 } => {
                summary = Some((seed, episodes, mean_accuracy, ci95));
            }
        }
    }
    let (seed, episodes, mean_accuracy, ci95) = summary.ok_or_else(|| bad("missing summary record"))?;
    if episodes != accs.len() {
        return Err(bad("episode count does not match the summary"));
    }
    Ok(EvalReport {
        seed,
        mean_accuracy,
        ci95,
        episode_accuracies: accs,
        correct,
    })
}

pub fn save_report(r: &EvalReport, path: &Path) -> Result<()> {
    save_jsonl(&report_records(r), path)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    report_from_records(load_jsonl(path)?)
}

pub fn write_jsonl<T: Serialize>(records: &[T], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn save_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    write_jsonl(records, BufWriter::new(File::create(path)?))
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

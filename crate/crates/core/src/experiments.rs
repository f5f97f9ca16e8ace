//! Multi-run harnesses built on [`train`] and [`evaluate`].

use serde::{Deserialize, Serialize};

use crate::data::FeatureStore;
use crate::error::Result;
use crate::filter::MaskMode;
use crate::model::ModelParams;
use crate::stats::{aggregate_seeds, mcnemar_paired, McNemar, SeedSummary};
use crate::train::{evaluate, train, EvalReport, TrainConfig};

pub const SWEEP_SLOTS: [usize; 3] = [3, 5, 10];
pub const SWEEP_ITERS: [usize; 3] = [3, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_slots: usize,
    pub n_iters: usize,
    pub accuracy: f64,
    pub ci95: f64,
}

/// Trains and evaluates one model per (slots, iterations) pair, slots-major.
pub fn sweep(store: &FeatureStore, cfg: &TrainConfig, slots: &[usize], iters: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(slots.len() * iters.len());
    for &n_slots in slots {
        for &n_iters in iters {
            let mut c = cfg.clone();
            c.model.slots.n_slots = n_slots;
            c.model.slots.n_iters = n_iters;
            let trained = train(store, &c)?;
            let report = evaluate(store, &trained.params, &c)?;
            rows.push(SweepRow {
                n_slots,
                n_iters,
                accuracy: report.mean_accuracy,
                ci95: report.ci95,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub mask_mode: MaskMode,
    pub accuracy: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskComparison {
    /// Binary first, then weighted.
    pub rows: Vec<MaskRow>,
    /// Binary as model A, weighted as B; `None` when no query was
    /// classified differently.
    pub mcnemar: Option<McNemar>,
    #[serde(skip)]
    pub reports: Vec<EvalReport>,
}

/// Evaluates binary and weighted masking on the same episodes. With `params`
/// both modes share those parameters; otherwise one model is trained per
/// mode.
pub fn compare_masks(store: &FeatureStore, cfg: &TrainConfig, params: Option<&ModelParams>) -> Result<MaskComparison> {
    let mut rows = Vec::with_capacity(2);
    let mut reports = Vec::with_capacity(2);
    for mode in [MaskMode::Binary, MaskMode::Weighted] {
        let mut c = cfg.clone();
        c.model.filter.mask_mode = mode;
        let report = match params {
            Some(p) => evaluate(store, p, &c)?,
            None => evaluate(store, &train(store, &c)?.params, &c)?,
        };
        rows.push(MaskRow {
            mask_mode: mode,
            accuracy: report.mean_accuracy,
            ci95: report.ci95,
        });
        reports.push(report);
    }
    let mcnemar = mcnemar_paired(&reports[0].correct, &reports[1].correct, true).ok();
    Ok(MaskComparison { rows, mcnemar, reports })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub accuracy: f64,
    pub ci95: f64,
}

/// Summary of per-seed accuracies.
pub fn summarize_reports(reports: &[EvalReport]) -> Result<(Vec<SeedRow>, SeedSummary)> {
    let rows: Vec<SeedRow> = reports
        .iter()
        .map(|r| SeedRow {
            seed: r.seed,
            accuracy: r.mean_accuracy,
            ci95: r.ci95,
        })
        .collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    Ok((rows, aggregate_seeds(&acc)?))
}

/// Trains and evaluates once per seed.
pub fn run_seeds(store: &FeatureStore, cfg: &TrainConfig, seeds: &[u64]) -> Result<Vec<EvalReport>> {
    seeds
        .iter()
        .map(|&seed| {
            let c = TrainConfig { seed, ..cfg.clone() };
            let trained = train(store, &c)?;
            evaluate(store, &trained.params, &c)
        })
        .collect()
}

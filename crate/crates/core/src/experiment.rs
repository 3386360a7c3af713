//! Whole-run helpers shared by the command line and the experiment tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::Result;
use crate::metrics::{report, MetricReport};
use crate::regrad::ModulationMode;
use crate::trainer::{
    load_splits, resolve_protocol, run_training, RunLog, Start, StepRecord, TrainOutcome,
};

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    /// Metrics of the final model on the protocol's test split.
    pub report: MetricReport,
    pub trailing_ssp_variance: f64,
}

/// Mean SSP variance over the last `fraction` of the steps (at least one).
pub fn trailing_ssp_variance(steps: &[StepRecord], fraction: f64) -> f64 {
    if steps.is_empty() {
        return f64::NAN;
    }
    let k = ((steps.len() as f64 * fraction).ceil() as usize).clamp(1, steps.len());
    steps[steps.len() - k..]
        .iter()
        .map(|s| s.ssp_variance)
        .sum::<f64>()
        / k as f64
}

/// Trains on the configured protocol and scores the final model.
pub fn run_protocol(cfg: &TrainConfig, out: Option<&Path>, start: Start) -> Result<RunResult> {
    let spec = resolve_protocol(cfg, &cfg.protocol)?;
    let splits = load_splits(cfg, &spec)?;
    let log = RunLog::new(out)?;
    let outcome = run_training(cfg, &splits, start, &log)?;
    let scores = outcome
        .trainer
        .scores(&splits.test, &spec.missing, cfg.imputation)?;
    let rep = report(&spec.name, &scores)?;
    log.append_json("metrics.ndjson", &rep)?;
    log.write("roc.csv", &crate::metrics::roc_csv(&scores)?)?;
    Ok(RunResult {
        trailing_ssp_variance: trailing_ssp_variance(&outcome.steps, 0.2),
        outcome,
        report: rep,
    })
}

/// Gate on/off crossed with every modulation mode.
pub fn ablation_grid() -> Vec<(bool, ModulationMode)> {
    [true, false]
        .into_iter()
        .flat_map(|gate| ModulationMode::ALL.into_iter().map(move |m| (gate, m)))
        .collect()
}

pub fn with_variant(cfg: &TrainConfig, gate: bool, modulation: ModulationMode) -> TrainConfig {
    let mut c = cfg.clone();
    c.model.adapter.gate = gate;
    c.modulation = modulation;
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub gate: bool,
    pub modulation: ModulationMode,
    pub seeds: Vec<u64>,
    pub hter: Vec<f64>,
    pub auc: Vec<f64>,
    pub mean_hter: f64,
    pub mean_auc: f64,
    pub mean_trailing_ssp_variance: f64,
}

/// One row per grid configuration, averaged over `seeds`.
pub fn run_ablation(
    cfg: &TrainConfig,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (gate, modulation) in ablation_grid() {
        let mut hter = Vec::new();
        let mut auc = Vec::new();
        let mut var = 0.0;
        for &seed in seeds {
            let mut c = with_variant(cfg, gate, modulation);
            c.seed = seed;
            let dir = out.map(|o| {
                o.join(format!(
                    "gate-{}_{}_seed{seed}",
                    if gate { "on" } else { "off" },
                    modulation.name()
                ))
            });
            let r = run_protocol(&c, dir.as_deref(), Start::Fresh)?;
            hter.push(r.report.hter);
            auc.push(r.report.auc);
            var += r.trailing_ssp_variance;
        }
        let n = seeds.len().max(1) as f64;
        rows.push(AblationRow {
            gate,
            modulation,
            seeds: seeds.to_vec(),
            mean_hter: hter.iter().sum::<f64>() / n,
            mean_auc: auc.iter().sum::<f64>() / n,
            mean_trailing_ssp_variance: var / n,
            hter,
            auc,
        });
    }
    Ok(rows)
}

//! Leave-one-domain-out sweeps over modes, shot counts and seeds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::ExperimentPlan;
use super::pretrain::pretrain_bundle;
use crate::adapt::{self, Mode, PipelineLog};
use crate::data::{self, Dataset, NormStats, Window};
use crate::error::{config_err, data_err, Result};
use crate::meta::{Trained, META_ORDER};
use crate::metrics::{self, ConfusionMatrix, MetricReport, Summary};
use crate::models::{ModelBundle, Origin};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub target_domain: usize,
    pub shots: usize,
    pub seed: u64,
    pub mode: Mode,
    pub config_hash: String,
    pub report: Option<MetricReport>,
    pub log: Option<PipelineLog>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub target_domain: usize,
    pub origin: Origin,
    pub seed: u64,
    pub train_windows: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f32>,
    pub first_epoch_loss: Option<f32>,
    pub last_epoch_loss: Option<f32>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMean {
    pub domain: usize,
    /// Macro-F1 over this domain's successful seeds.
    pub macro_f1: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub shots: usize,
    pub per_domain: Vec<DomainMean>,
    /// Mean of the per-domain means.
    pub macro_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_hash: String,
    pub meta_order: u32,
    pub records: Vec<CellRecord>,
    pub pretraining: Vec<PretrainRecord>,
    pub summary: Vec<ModeSummary>,
    pub failed: usize,
}

impl SweepResult {
    pub fn grand_mean(&self, mode: Mode, shots: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.mode == mode && s.shots == shots).and_then(|s| s.macro_f1)
    }
}

/// Per-target preparation shared by every cell of that target.
struct Prepared {
    normalized: Dataset,
    bundles: BTreeMap<Origin, std::result::Result<ModelBundle, String>>,
}

/// Evaluates a bundle on windows and returns the confusion matrix.
pub fn evaluate(bundle: &ModelBundle, windows: &[Window], n_classes: usize) -> Result<ConfusionMatrix> {
    let values: Vec<Tensor> = windows.iter().map(|w| w.values.clone()).collect();
    let truth: Vec<usize> = windows
        .iter()
        .map(|w| w.label.ok_or_else(|| data_err("evaluation window without a label")))
        .collect::<Result<_>>()?;
    let predicted = metrics::predict(bundle, &values)?;
    ConfusionMatrix::from_predictions(&truth, &predicted, n_classes)
}

fn pretrain_record(target: usize, origin: Origin, seed: u64, train: usize, outcome: &Result<(ModelBundle, Trained)>) -> PretrainRecord {
    let mut r = PretrainRecord {
        target_domain: target,
        origin,
        seed,
        train_windows: train,
        best_epoch: None,
        best_val_loss: None,
        first_epoch_loss: None,
        last_epoch_loss: None,
        error: None,
    };
    match outcome {
        Ok((_, t)) => {
            r.best_epoch = t.log.best_epoch;
            r.best_val_loss = t.log.best_val_loss;
            r.first_epoch_loss = t.log.epochs.first().map(|e| e.query_loss);
            r.last_epoch_loss = t.log.epochs.last().map(|e| e.query_loss);
        }
        Err(e) => r.error = Some(e.to_string()),
    }
    r
}

fn prepare(plan: &ExperimentPlan, raw: &Dataset, target: usize, seed: u64, origins: &[Origin]) -> Result<(Prepared, Vec<PretrainRecord>)> {
    let pretext = plan.pretext.pretext()?;
    let src = data::source_split(raw, target, seed)?;
    let pool: Vec<&Tensor> = src.train.iter().chain(&src.val).map(|&i| &raw.windows[i].values).collect();
    let norm = NormStats::fit(pool)?;
    let normalized = raw.normalized_with(&norm)?;
    let train = normalized.select(&src.train);
    let val = normalized.select(&src.val);
    let pretrain_seed = rng::derive_seed(seed, &[target as u64]);
    let outcomes: Vec<(Origin, Result<(ModelBundle, Trained)>)> = origins
        .par_iter()
        .map(|&o| {
            let r = pretrain_bundle(&pretext, o, &train, &val, &plan.pretext.plain, &plan.meta, Some(norm.clone()), pretrain_seed);
            (o, r)
        })
        .collect();
    let records = outcomes.iter().map(|(o, r)| pretrain_record(target, *o, seed, train.len(), r)).collect();
    let bundles = outcomes.into_iter().map(|(o, r)| (o, r.map(|(b, _)| b).map_err(|e| e.to_string()))).collect();
    Ok((Prepared { normalized, bundles }, records))
}

#[allow(clippy::too_many_arguments)]
fn run_cell(plan: &ExperimentPlan, raw: &Dataset, prepared: &Prepared, target: usize, shots: usize, seed: u64, mode: Mode, hash: &str) -> CellRecord {
    let mut record = CellRecord { target_domain: target, shots, seed, mode, config_hash: hash.to_string(), report: None, log: None, error: None };
    let outcome = (|| -> Result<(MetricReport, PipelineLog)> {
        let bundle = match prepared.bundles.get(&mode.required_origin()) {
            Some(Ok(b)) => b,
            Some(Err(e)) => return Err(config_err(format!("pre-training failed: {e}"))),
            None => return Err(config_err("no pre-trained weights for this mode")),
        };
        let split = data::target_split(raw, target, shots, seed)?;
        let shot_windows = prepared.normalized.select(&split.shots);
        let test = prepared.normalized.select(&split.test);
        let pretext = plan.pretext.pretext()?;
        let cell_seed = rng::derive_seed(seed, &[target as u64, shots as u64, mode as u64]);
        let (tuned, log) = adapt::run_pipeline(
            mode,
            &pretext,
            bundle,
            &shot_windows,
            raw.n_classes,
            &plan.replay,
            plan.meta.inner_lr,
            &plan.finetune,
            cell_seed,
        )?;
        let cm = evaluate(&tuned, &test, raw.n_classes)?;
        Ok((MetricReport::from_confusion(&cm, seed, hash)?, log))
    })();
    match outcome {
        Ok((report, log)) => {
            record.report = Some(report);
            record.log = Some(log);
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Seeds averaged within each domain, then domains averaged.
pub fn summarize(records: &[CellRecord], modes: &[Mode], shots: &[usize], targets: &[usize]) -> Vec<ModeSummary> {
    let mut out = Vec::new();
    for &mode in modes {
        for &k in shots {
            let per_domain: Vec<DomainMean> = targets
                .iter()
                .filter_map(|&d| {
                    let f1: Vec<f64> = records
                        .iter()
                        .filter(|r| r.mode == mode && r.shots == k && r.target_domain == d)
                        .filter_map(|r| r.report.as_ref().map(|m| m.macro_f1))
                        .collect();
                    metrics::aggregate(&f1).ok().map(|macro_f1| DomainMean { domain: d, macro_f1 })
                })
                .collect();
            let means: Vec<f64> = per_domain.iter().map(|d| d.macro_f1.mean).collect();
            let macro_f1 = metrics::aggregate(&means).ok().map(|s| s.mean);
            out.push(ModeSummary { mode, shots: k, per_domain, macro_f1 });
        }
    }
    out
}

/// Rotates each target domain out of pre-training, adapts on its shots and
/// scores its test windows. Stage failures are recorded per cell; only
/// configuration problems abort the whole sweep.
pub fn leave_one_domain_out(plan: &ExperimentPlan, raw: &Dataset) -> Result<SweepResult> {
    plan.validate()?;
    if raw.n_domains() < 2 {
        return Err(data_err("leave-one-domain-out needs at least two domains"));
    }
    let targets = plan.sweep.targets.clone().unwrap_or_else(|| (0..raw.n_domains()).collect());
    if let Some(&bad) = targets.iter().find(|&&t| t >= raw.n_domains()) {
        return Err(config_err(format!("target domain {bad} does not exist")));
    }
    let s = &plan.sweep;
    let hash = plan.config_hash();
    let mut origins: Vec<Origin> = s.modes.iter().map(|m| m.required_origin()).collect();
    origins.sort();
    origins.dedup();
    let pretrain_seeds: Vec<u64> = if s.pretrain_per_seed { s.seeds.clone() } else { vec![s.base_seed] };

    let mut records = Vec::new();
    let mut pretraining = Vec::new();
    for &target in &targets {
        for &ps in &pretrain_seeds {
            let cell_seeds: Vec<u64> = if s.pretrain_per_seed { vec![ps] } else { s.seeds.clone() };
            let cells: Vec<(usize, u64, Mode)> = s
                .shots
                .iter()
                .flat_map(|&k| cell_seeds.iter().flat_map(move |&seed| s.modes.iter().map(move |&m| (k, seed, m))))
                .collect();
            match prepare(plan, raw, target, ps, &origins) {
                Ok((prepared, pre)) => {
                    pretraining.extend(pre);
                    let done: Vec<CellRecord> =
                        cells.par_iter().map(|&(k, seed, m)| run_cell(plan, raw, &prepared, target, k, seed, m, &hash)).collect();
                    records.extend(done);
                }
                Err(e) => {
                    for (k, seed, mode) in cells {
                        records.push(CellRecord {
                            target_domain: target,
                            shots: k,
                            seed,
                            mode,
                            config_hash: hash.clone(),
                            report: None,
                            log: None,
                            error: Some(format!("preparation failed: {e}")),
                        });
                    }
                }
            }
        }
    }
    let summary = summarize(&records, &s.modes, &s.shots, &targets);
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    Ok(SweepResult { config_hash: hash, meta_order: META_ORDER, records, pretraining, summary, failed })
}

//! Experiment orchestration: plans, pre-training, sweeps, the shift study
//! and embedding dumps.

mod plan;
mod pretrain;
mod shift;
mod sweep;

use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use plan::{DataSection, ExperimentPlan, PlainHyper, Preset, PretextSection, ShiftSection, SweepSection};
pub use pretrain::{plain_pretrain, plain_pretrain_with, plain_validation_loss, pretrain_bundle, Batching};
pub use shift::{domain_shift_study, ShiftCell, ShiftDomain, ShiftResult, ShiftSummary};
pub use sweep::{evaluate, leave_one_domain_out, summarize, CellRecord, DomainMean, ModeSummary, PretrainRecord, SweepResult};

use crate::data::Window;
use crate::error::{config_err, Result};
use crate::models::{self, ModelBundle};
use crate::tensor::Tensor;

/// Runs `f` on a pool bounded by `ADAPT2_THREADS` when set.
pub fn with_worker_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let threads = match std::env::var("ADAPT2_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| config_err(format!("ADAPT2_THREADS=`{v}` is not a number")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| config_err(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Wall-clock and memory of one run; kept apart from results so those stay
/// reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub started_unix: u64,
    pub wall_seconds: f64,
    pub threads: usize,
    /// Peak resident set size, where the platform reports it.
    pub peak_rss_kb: Option<u64>,
}

fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

pub struct RunClock {
    command: String,
    started: SystemTime,
    instant: Instant,
}

impl RunClock {
    pub fn start(command: impl Into<String>) -> Self {
        RunClock { command: command.into(), started: SystemTime::now(), instant: Instant::now() }
    }

    pub fn finish(&self) -> RunInfo {
        RunInfo {
            command: self.command.clone(),
            started_unix: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_seconds: self.instant.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
            peak_rss_kb: peak_rss_kb(),
        }
    }
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// One CSV row per window: `domain,label,e0..e{d-1}`, input order kept.
/// Unlabeled windows have an empty label field.
pub fn dump_embeddings(bundle: &ModelBundle, windows: &[Window], path: impl AsRef<Path>) -> Result<()> {
    let values: Vec<Tensor> = windows.iter().map(|w| w.values.clone()).collect();
    let e = models::embed(&bundle.params, &bundle.encoder, &values)?;
    let d = bundle.encoder.embedding_dim();
    let mut out = csv::Writer::from_path(path)?;
    let mut header = vec!["domain".to_string(), "label".to_string()];
    header.extend((0..d).map(|i| format!("e{i}")));
    out.write_record(&header)?;
    for (w, row) in windows.iter().zip(e.data().chunks(d)) {
        let mut rec = vec![w.domain.to_string(), w.label.map(|l| l.to_string()).unwrap_or_default()];
        rec.extend(row.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

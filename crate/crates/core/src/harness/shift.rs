//! In-domain versus out-of-domain pre-training at equal data size.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::ExperimentPlan;
use super::pretrain::pretrain_bundle;
use super::sweep::evaluate;
use crate::adapt;
use crate::data::{self, Dataset};
use crate::error::{data_err, Result};
use crate::metrics::{self, MetricReport, Summary};
use crate::models::Origin;
use crate::pretext::PretextKind;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftCell {
    pub kind: PretextKind,
    pub domain: usize,
    pub seed: u64,
    /// Pre-training windows in each arm.
    pub pretrain_size: usize,
    pub in_domain: Option<MetricReport>,
    pub out_of_domain: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftDomain {
    pub domain: usize,
    pub in_domain: Summary,
    pub out_of_domain: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub kind: PretextKind,
    pub per_domain: Vec<ShiftDomain>,
    pub in_domain_f1: Option<f64>,
    pub out_of_domain_f1: Option<f64>,
    /// `(in − out) · 100`; positive means out-of-domain pre-training is worse.
    pub drop_pp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftResult {
    pub config_hash: String,
    pub cells: Vec<ShiftCell>,
    pub summary: Vec<ShiftSummary>,
}

/// Windows of each domain, in dataset order.
fn domain_members(ds: &Dataset) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); ds.n_domains()];
    for (i, w) in ds.windows.iter().enumerate() {
        members[w.domain].push(i);
    }
    members
}

fn run_cell(plan: &ExperimentPlan, ds: &Dataset, members: &[Vec<usize>], kind: PretextKind, domain: usize, seed: u64, hash: &str) -> Result<ShiftCell> {
    let shift = &plan.sweep.shift;
    let mut own = members[domain].clone();
    own.shuffle(&mut rng::stream(seed, &[0x5b, domain as u64]));
    let size = own.len() * shift.pretrain_percent / 100;
    let held = own.split_off(size);
    let split = data::stratified_holdout(ds, &held, shift.shots, &mut rng::stream(seed, &[0x5c, domain as u64]))
        .map_err(|e| data_err(format!("domain {domain}: {e}")))?;

    let others: Vec<usize> = members.iter().enumerate().filter(|&(d, _)| d != domain).flat_map(|(_, m)| m.iter().copied()).collect();
    let outside: Vec<usize> = index::sample(&mut rng::stream(seed, &[0x5d, domain as u64]), others.len(), size).into_iter().map(|i| others[i]).collect();

    let pretext = plan.pretext.pretext_for(kind)?;
    let shots = ds.select(&split.shots);
    let test = ds.select(&split.test);
    let init_seed = rng::derive_seed(seed, &[domain as u64, kind as u64]);
    let arm = |pool: &[usize]| -> Result<MetricReport> {
        let cut = pool.len() * 9 / 10;
        let (train, val) = (ds.select(&pool[..cut]), ds.select(&pool[cut..]));
        let (bundle, _) = pretrain_bundle(&pretext, Origin::Plain, &train, &val, &plan.pretext.plain, &plan.meta, None, init_seed)?;
        let (tuned, _) = adapt::finetune(&bundle, &shots, ds.n_classes, &plan.finetune)?;
        MetricReport::from_confusion(&evaluate(&tuned, &test, ds.n_classes)?, seed, hash)
    };
    Ok(ShiftCell {
        kind,
        domain,
        seed,
        pretrain_size: size,
        in_domain: Some(arm(&own)?),
        out_of_domain: Some(arm(&outside)?),
        error: None,
    })
}

fn summarize(cells: &[ShiftCell], kinds: &[PretextKind], domains: usize) -> Vec<ShiftSummary> {
    kinds
        .iter()
        .map(|&kind| {
            let per_domain: Vec<ShiftDomain> = (0..domains)
                .filter_map(|d| {
                    let ok: Vec<&ShiftCell> = cells.iter().filter(|c| c.kind == kind && c.domain == d && c.error.is_none()).collect();
                    let f1 = |get: fn(&ShiftCell) -> &Option<MetricReport>| -> Vec<f64> { ok.iter().filter_map(|c| get(c).as_ref().map(|r| r.macro_f1)).collect() };
                    let in_domain = metrics::aggregate(&f1(|c| &c.in_domain)).ok()?;
                    let out_of_domain = metrics::aggregate(&f1(|c| &c.out_of_domain)).ok()?;
                    Some(ShiftDomain { domain: d, in_domain, out_of_domain })
                })
                .collect();
            let mean = |xs: Vec<f64>| metrics::aggregate(&xs).ok().map(|s| s.mean);
            let in_domain_f1 = mean(per_domain.iter().map(|d| d.in_domain.mean).collect());
            let out_of_domain_f1 = mean(per_domain.iter().map(|d| d.out_of_domain.mean).collect());
            let drop_pp = in_domain_f1.zip(out_of_domain_f1).map(|(i, o)| (i - o) * 100.0);
            ShiftSummary { kind, per_domain, in_domain_f1, out_of_domain_f1, drop_pp }
        })
        .collect()
}

/// For every domain: pre-train once on a share of that domain and once on
/// an equally large sample of the other domains, fine-tune both on the same
/// shots and score both on the same held-out windows. Data are normalized
/// once over the whole dataset, since each arm pre-trains on different
/// domains.
pub fn domain_shift_study(plan: &ExperimentPlan, raw: &Dataset) -> Result<ShiftResult> {
    plan.validate()?;
    if raw.n_domains() < 2 {
        return Err(data_err("the shift study needs at least two domains"));
    }
    let (ds, _) = data::normalize(raw)?;
    let members = domain_members(&ds);
    let pct = plan.sweep.shift.pretrain_percent;
    for (d, m) in members.iter().enumerate() {
        let size = m.len() * pct / 100;
        let others = ds.len() - m.len();
        if size < 2 || others < size {
            return Err(data_err(format!(
                "domain {d} cannot be equalized: {size} in-domain pre-training windows, {others} windows in other domains"
            )));
        }
    }
    let hash = plan.config_hash();
    let shift = &plan.sweep.shift;
    let jobs: Vec<(PretextKind, usize, u64)> = shift
        .kinds
        .iter()
        .flat_map(|&k| (0..ds.n_domains()).flat_map(move |d| shift.seeds.iter().map(move |&s| (k, d, s))))
        .collect();
    let cells: Vec<ShiftCell> = jobs
        .par_iter()
        .map(|&(kind, domain, seed)| {
            run_cell(plan, &ds, &members, kind, domain, seed, &hash).unwrap_or_else(|e| ShiftCell {
                kind,
                domain,
                seed,
                pretrain_size: members[domain].len() * pct / 100,
                in_domain: None,
                out_of_domain: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    let summary = summarize(&cells, &shift.kinds, ds.n_domains());
    Ok(ShiftResult { config_hash: hash, cells, summary })
}

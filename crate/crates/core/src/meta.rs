//! Task generation and first-order self-supervised meta-training.
//!
//! Each task adapts a copy of θ on its support set with the pretext loss,
//! then takes the pretext-loss gradient on its query set at the adapted
//! weights. Query gradients are summed in task order and applied to θ by
//! the outer optimizer. Second-order terms are dropped.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::error::{config_err, data_err, Result};
use crate::pretext::{Pretext, PretextBatchLoss};
use crate::rng::{self, Phase, Rng};
use crate::tensor::{adam_step, sgd_step, AdamConfig, AdamState, ParamVector, Tensor};

/// Gradient order of the meta update, recorded in reports.
pub const META_ORDER: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaHyper {
    /// Tasks per epoch.
    #[serde(rename = "M")]
    pub tasks: usize,
    /// How many of those are drawn from a single domain.
    #[serde(rename = "M_dom")]
    pub domain_tasks: usize,
    /// Support size, and separately query size.
    #[serde(rename = "K")]
    pub task_size: usize,
    #[serde(rename = "alpha")]
    pub inner_lr: f32,
    #[serde(rename = "beta")]
    pub outer_lr: f32,
    pub inner_steps: usize,
    pub epochs: usize,
    #[serde(default = "default_outer")]
    pub outer: OuterOptimizer,
    /// Validation cadence in epochs; the last epoch is always validated.
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    /// Informational: intended share of mixed-domain tasks.
    #[serde(default)]
    pub multi_task_fraction: Option<f64>,
}

fn default_outer() -> OuterOptimizer {
    OuterOptimizer::Adam
}
fn default_val_every() -> usize {
    1
}

impl MetaHyper {
    /// K=16, M=12, M_dom=8, one inner step.
    pub fn desk() -> Self {
        MetaHyper {
            tasks: 12,
            domain_tasks: 8,
            task_size: 16,
            inner_lr: 5e-3,
            outer_lr: 1e-3,
            inner_steps: 1,
            epochs: 200,
            outer: OuterOptimizer::Adam,
            val_every: 10,
            multi_task_fraction: Some(1.0 / 3.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.domain_tasks > self.tasks {
            return Err(config_err(format!("need 0 ≤ M_dom ≤ M and M ≥ 1, got M={} M_dom={}", self.tasks, self.domain_tasks)));
        }
        if self.task_size == 0 {
            return Err(config_err("task size K must be positive"));
        }
        for (name, v) in [("alpha", self.inner_lr), ("beta", self.outer_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("meta {name} must be positive, got {v}")));
            }
        }
        if self.val_every == 0 {
            return Err(config_err("val_every must be at least 1"));
        }
        Ok(())
    }
}

/// Support and query sets as indices into the pool the task was drawn from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaTask {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    /// Set for domain-specific tasks.
    pub pure_domain: Option<usize>,
}

fn draw_disjoint(members: &[usize], k: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let picked: Vec<usize> = index::sample(rng, members.len(), 2 * k).into_iter().map(|i| members[i]).collect();
    let query = picked[k..].to_vec();
    let mut support = picked;
    support.truncate(k);
    (support, query)
}

/// The first `domain_tasks` tasks each come from one domain chosen uniformly
/// among domains holding at least `2K` windows; the rest mix the whole pool.
/// Support and query never share a window.
pub fn generate_tasks(pool: &[Window], hyper: &MetaHyper, rng: &mut Rng) -> Result<Vec<MetaTask>> {
    hyper.validate()?;
    let k = hyper.task_size;
    if pool.len() < 2 * k {
        return Err(data_err(format!("task size K={k} needs {} windows, pool has {}", 2 * k, pool.len())));
    }
    let mut by_domain: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in pool.iter().enumerate() {
        by_domain.entry(w.domain).or_default().push(i);
    }
    let qualifying: Vec<(usize, Vec<usize>)> = by_domain.into_iter().filter(|(_, m)| m.len() >= 2 * k).collect();
    if hyper.domain_tasks > 0 && qualifying.is_empty() {
        return Err(data_err(format!("no source domain has the {} windows a domain-specific task needs", 2 * k)));
    }
    let everything: Vec<usize> = (0..pool.len()).collect();
    let mut tasks = Vec::with_capacity(hyper.tasks);
    for t in 0..hyper.tasks {
        let (members, pure_domain) = if t < hyper.domain_tasks {
            let (d, members) = &qualifying[rng.gen_range(0..qualifying.len())];
            (members.as_slice(), Some(*d))
        } else {
            (everything.as_slice(), None)
        };
        let (support, query) = draw_disjoint(members, k, rng);
        tasks.push(MetaTask { support, query, pure_domain });
    }
    Ok(tasks)
}

/// Task list for one training epoch.
pub fn epoch_tasks(pool: &[Window], hyper: &MetaHyper, seed: u64, epoch: usize) -> Result<Vec<MetaTask>> {
    generate_tasks(pool, hyper, &mut rng::stream(seed, &[0x7a5c, epoch as u64]))
}

/// `steps` full-batch SGD steps on the support set. Returns the adapted
/// weights and the loss seen before each step.
pub fn inner_adapt(
    pretext: &Pretext,
    params: &ParamVector,
    support: &[Tensor],
    lr: f32,
    steps: usize,
    rng: &mut Rng,
) -> Result<(ParamVector, Vec<f32>)> {
    let mut theta = params.clone();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (stats, grads) = pretext.loss_and_grad(&theta, support, rng)?;
        theta = sgd_step(&theta, &grads, lr)?;
        losses.push(stats.loss);
    }
    Ok((theta, losses))
}

/// Outer optimizer with its state.
#[derive(Clone, Debug)]
pub enum OuterState {
    Adam(AdamConfig, AdamState),
    Sgd(f32),
}

impl OuterState {
    pub fn new(hyper: &MetaHyper, params: &ParamVector) -> Self {
        match hyper.outer {
            OuterOptimizer::Adam => OuterState::Adam(AdamConfig::new(hyper.outer_lr), AdamState::new(params)),
            OuterOptimizer::Sgd => OuterState::Sgd(hyper.outer_lr),
        }
    }

    pub fn step(&mut self, params: &ParamVector, grads: &ParamVector) -> Result<ParamVector> {
        Ok(match self {
            OuterState::Adam(cfg, state) => {
                let (next, s) = adam_step(state, params, grads, cfg)?;
                *state = s;
                next
            }
            OuterState::Sgd(lr) => sgd_step(params, grads, *lr)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutcome {
    /// Support loss before each inner step.
    pub support_losses: Vec<f32>,
    pub query: PretextBatchLoss,
    pub query_grad: ParamVector,
}

fn values(pool: &[Window], idx: &[usize]) -> Vec<Tensor> {
    idx.iter().map(|&i| pool[i].values.clone()).collect()
}

/// Inner adaptation on the support set, then the query loss and its
/// gradient at the adapted weights.
pub fn run_task(
    pretext: &Pretext,
    params: &ParamVector,
    pool: &[Window],
    task: &MetaTask,
    hyper: &MetaHyper,
    support_rng: &mut Rng,
    query_rng: &mut Rng,
) -> Result<TaskOutcome> {
    let (adapted, support_losses) =
        inner_adapt(pretext, params, &values(pool, &task.support), hyper.inner_lr, hyper.inner_steps, support_rng)?;
    let (query, query_grad) = pretext.loss_and_grad(&adapted, &values(pool, &task.query), query_rng)?;
    Ok(TaskOutcome { support_losses, query, query_grad })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean support loss before adaptation; absent without inner steps.
    pub support_loss: Option<f32>,
    pub query_loss: f32,
    pub query_losses: Vec<f32>,
    pub val_loss: Option<f32>,
}

fn mean(xs: impl IntoIterator<Item = f32>) -> Option<f32> {
    let (sum, n) = xs.into_iter().fold((0.0f64, 0usize), |(s, n), x| (s + x as f64, n + 1));
    (n > 0).then(|| (sum / n as f64) as f32)
}

/// One outer update over `tasks`. Tasks run in parallel; their query
/// gradients are summed in task order, so the result does not depend on
/// scheduling.
#[allow(clippy::too_many_arguments)]
pub fn meta_epoch(
    pretext: &Pretext,
    params: &ParamVector,
    outer: &mut OuterState,
    pool: &[Window],
    tasks: &[MetaTask],
    hyper: &MetaHyper,
    seed: u64,
    epoch: usize,
) -> Result<(ParamVector, EpochRecord)> {
    if tasks.is_empty() {
        return Err(config_err("meta epoch needs at least one task"));
    }
    let outcomes: Vec<TaskOutcome> = tasks
        .par_iter()
        .enumerate()
        .map(|(t, task)| {
            let mut s = rng::step_stream(seed, epoch, t, Phase::Support);
            let mut q = rng::step_stream(seed, epoch, t, Phase::Query);
            run_task(pretext, params, pool, task, hyper, &mut s, &mut q)
        })
        .collect::<Result<_>>()?;
    let mut total = outcomes[0].query_grad.clone();
    for o in &outcomes[1..] {
        total = total.add(&o.query_grad)?;
    }
    let next = outer.step(params, &total)?;
    let record = EpochRecord {
        epoch,
        support_loss: mean(outcomes.iter().filter_map(|o| o.support_losses.first().copied())),
        query_loss: mean(outcomes.iter().map(|o| o.query.loss)).unwrap_or(0.0),
        query_losses: outcomes.iter().map(|o| o.query.loss).collect(),
        val_loss: None,
    };
    Ok((next, record))
}

/// Validation tasks, drawn once. If the validation pool is too small for
/// domain-specific tasks they become mixed; if it cannot hold `2K` windows
/// the task size shrinks to what fits. `None` when not even the objective's
/// minimum batch fits.
pub fn validation_tasks(pretext: &Pretext, val: &[Window], hyper: &MetaHyper, seed: u64) -> Result<Option<(MetaHyper, Vec<MetaTask>)>> {
    let mut h = hyper.clone();
    h.task_size = h.task_size.min(val.len() / 2);
    if h.task_size < pretext.min_batch() {
        return Ok(None);
    }
    let mut r = rng::stream(seed, &[0x7a5d]);
    match generate_tasks(val, &h, &mut r) {
        Ok(t) => Ok(Some((h, t))),
        Err(_) => {
            h.domain_tasks = 0;
            let t = generate_tasks(val, &h, &mut rng::stream(seed, &[0x7a5d]))?;
            Ok(Some((h, t)))
        }
    }
}

/// Mean query loss after inner adaptation over fixed validation tasks, with
/// fixed random streams so values are comparable across epochs.
pub fn validation_loss(pretext: &Pretext, params: &ParamVector, val: &[Window], tasks: &[MetaTask], hyper: &MetaHyper, seed: u64) -> Result<f32> {
    let losses: Vec<f32> = tasks
        .par_iter()
        .enumerate()
        .map(|(t, task)| {
            let mut s = rng::step_stream(seed, usize::MAX, t, Phase::Support);
            let (adapted, _) = inner_adapt(pretext, params, &values(val, &task.support), hyper.inner_lr, hyper.inner_steps, &mut s)?;
            let mut q = rng::step_stream(seed, usize::MAX, t, Phase::Validation);
            Ok(pretext.eval(&adapted, &values(val, &task.query), &mut q)?.loss)
        })
        .collect::<Result<_>>()?;
    Ok(mean(losses).unwrap_or(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    /// Best-validation weights, or the final ones without validation.
    pub params: ParamVector,
    pub final_params: ParamVector,
    pub log: TrainingLog,
}

/// Keeps the parameters with the lowest validation loss seen so far.
#[derive(Clone, Debug, Default)]
pub(crate) struct Checkpoint {
    pub best: Option<(usize, f32, ParamVector)>,
}

impl Checkpoint {
    pub fn offer(&mut self, epoch: usize, loss: f32, params: &ParamVector) {
        if self.best.as_ref().is_none_or(|(_, b, _)| loss < *b) {
            self.best = Some((epoch, loss, params.clone()));
        }
    }

    pub fn finish(self, final_params: ParamVector, epochs: Vec<EpochRecord>) -> Trained {
        match self.best {
            Some((e, l, p)) => Trained { params: p, final_params, log: TrainingLog { epochs, best_epoch: Some(e), best_val_loss: Some(l) } },
            None => Trained { params: final_params.clone(), final_params, log: TrainingLog { epochs, best_epoch: None, best_val_loss: None } },
        }
    }
}

/// Full meta-training run. `on_epoch` sees each epoch's record and the
/// parameters after that epoch's update.
pub fn meta_pretrain_with(
    pretext: &Pretext,
    init: &ParamVector,
    train: &[Window],
    val: &[Window],
    hyper: &MetaHyper,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord, &ParamVector),
) -> Result<Trained> {
    hyper.validate()?;
    if hyper.task_size < pretext.min_batch() {
        return Err(config_err(format!("task size K={} is below the objective's minimum batch {}", hyper.task_size, pretext.min_batch())));
    }
    let validation = validation_tasks(pretext, val, hyper, seed)?;
    let mut outer = OuterState::new(hyper, init);
    let mut theta = init.clone();
    let mut checkpoint = Checkpoint::default();
    let mut records = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let tasks = epoch_tasks(train, hyper, seed, epoch)?;
        let (next, mut record) = meta_epoch(pretext, &theta, &mut outer, train, &tasks, hyper, seed, epoch)?;
        theta = next;
        let due = (epoch + 1) % hyper.val_every == 0 || epoch + 1 == hyper.epochs;
        if let (true, Some((vh, vt))) = (due, &validation) {
            let loss = validation_loss(pretext, &theta, val, vt, vh, seed)?;
            record.val_loss = Some(loss);
            checkpoint.offer(epoch, loss, &theta);
        }
        on_epoch(&record, &theta);
        records.push(record);
    }
    Ok(checkpoint.finish(theta, records))
}

pub fn meta_pretrain(pretext: &Pretext, init: &ParamVector, train: &[Window], val: &[Window], hyper: &MetaHyper, seed: u64) -> Result<Trained> {
    meta_pretrain_with(pretext, init, train, val, hyper, seed, &mut |_, _| {})
}

//! Ordinary mini-batch self-supervised pre-training, and the shared entry
//! point that produces a pre-trained bundle of either origin.

use rand::seq::SliceRandom;

use super::plan::PlainHyper;
use crate::data::{NormStats, Window};
use crate::error::{config_err, Result};
use crate::meta::{self, Checkpoint, EpochRecord, MetaHyper, Trained};
use crate::models::{ModelBundle, Origin};
use crate::pretext::Pretext;
use crate::rng::{self, Phase};
use crate::tensor::{adam_step, AdamConfig, AdamState, ParamVector, Tensor};

/// How training windows are grouped into batches.
#[derive(Clone, Debug, PartialEq)]
pub enum Batching {
    /// Fresh permutation each epoch, cut into `batch_size` chunks. A final
    /// chunk below the objective's minimum batch is dropped.
    Shuffled { batch_size: usize },
    /// Explicit index batches per epoch, e.g. to replay another run's
    /// batches exactly.
    Fixed(Vec<Vec<Vec<usize>>>),
}

fn epoch_batches(batching: &Batching, n: usize, min_batch: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    match batching {
        Batching::Shuffled { batch_size } => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(seed, &[0x9b, epoch as u64]));
            Ok(order.chunks(*batch_size).filter(|c| c.len() >= min_batch).map(<[usize]>::to_vec).collect())
        }
        Batching::Fixed(schedule) => schedule
            .get(epoch)
            .cloned()
            .ok_or_else(|| config_err(format!("fixed batch schedule has no epoch {epoch}"))),
    }
}

fn values(pool: &[Window], idx: &[usize]) -> Vec<Tensor> {
    idx.iter().map(|&i| pool[i].values.clone()).collect()
}

/// Mean objective over the validation set in chunks, with fixed streams.
pub fn plain_validation_loss(pretext: &Pretext, params: &ParamVector, val: &[Window], batch_size: usize) -> Result<Option<f32>> {
    let chunks: Vec<&[Window]> = val.chunks(batch_size.max(1)).filter(|c| c.len() >= pretext.min_batch()).collect();
    if chunks.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0f64;
    for (c, chunk) in chunks.iter().enumerate() {
        let v: Vec<Tensor> = chunk.iter().map(|w| w.values.clone()).collect();
        total += pretext.eval(params, &v, &mut rng::step_stream(0, usize::MAX, c, Phase::Validation))?.loss as f64;
    }
    Ok(Some((total / chunks.len() as f64) as f32))
}

/// Adam on the pretext loss, one step per batch, validated every epoch and
/// checkpointed on the best validation loss. Step `b` of epoch `e` draws its
/// randomness from the same stream meta-training uses for task `b`'s query,
/// so with one task per step and no inner loop both produce the same
/// trajectory.
#[allow(clippy::too_many_arguments)]
pub fn plain_pretrain_with(
    pretext: &Pretext,
    init: &ParamVector,
    train: &[Window],
    val: &[Window],
    hyper: &PlainHyper,
    batching: &Batching,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord, &ParamVector),
) -> Result<Trained> {
    hyper.validate()?;
    let adam = AdamConfig::new(hyper.lr).with_weight_decay(hyper.weight_decay);
    let mut state = AdamState::new(init);
    let mut theta = init.clone();
    let mut checkpoint = Checkpoint::default();
    let mut records = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let batches = epoch_batches(batching, train.len(), pretext.min_batch(), seed, epoch)?;
        if batches.is_empty() {
            return Err(config_err(format!("{} training windows make no batch of at least {}", train.len(), pretext.min_batch())));
        }
        let mut losses = Vec::with_capacity(batches.len());
        for (b, idx) in batches.iter().enumerate() {
            let (stats, grads) = pretext.loss_and_grad(&theta, &values(train, idx), &mut rng::step_stream(seed, epoch, b, Phase::Query))?;
            (theta, state) = adam_step(&state, &theta, &grads, &adam)?;
            losses.push(stats.loss);
        }
        let val_loss = plain_validation_loss(pretext, &theta, val, hyper.batch_size)?;
        if let Some(l) = val_loss {
            checkpoint.offer(epoch, l, &theta);
        }
        let record = EpochRecord {
            epoch,
            support_loss: None,
            query_loss: (losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64) as f32,
            query_losses: losses,
            val_loss,
        };
        on_epoch(&record, &theta);
        records.push(record);
    }
    Ok(checkpoint.finish(theta, records))
}

pub fn plain_pretrain(pretext: &Pretext, init: &ParamVector, train: &[Window], val: &[Window], hyper: &PlainHyper, seed: u64) -> Result<Trained> {
    let batching = Batching::Shuffled { batch_size: hyper.batch_size };
    plain_pretrain_with(pretext, init, train, val, hyper, &batching, seed, &mut |_, _| {})
}

/// Initializes from `seed` and pre-trains with the requested origin. The
/// initialization does not depend on the origin, so plain and meta arms
/// start from the same weights.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_bundle(
    pretext: &Pretext,
    origin: Origin,
    train: &[Window],
    val: &[Window],
    plain: &PlainHyper,
    meta_hyper: &MetaHyper,
    norm: Option<NormStats>,
    seed: u64,
) -> Result<(ModelBundle, Trained)> {
    let init = pretext.init_params(&mut rng::stream(seed, &[0x1417]))?;
    let trained = match origin {
        Origin::Plain => plain_pretrain(pretext, &init, train, val, plain, seed)?,
        Origin::Meta => meta::meta_pretrain(pretext, &init, train, val, meta_hyper, seed)?,
        Origin::Untrained => return Err(config_err("cannot pre-train with origin `untrained`")),
    };
    let bundle = ModelBundle { encoder: pretext.encoder.clone(), params: trained.params.clone(), origin, norm };
    Ok((bundle, trained))
}

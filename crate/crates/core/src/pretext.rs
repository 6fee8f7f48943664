//! Self-supervised objectives behind one interface: contrastive agreement
//! between augmented views, future-frame prediction, and augmentation
//! detection. Meta-training, replay and plain pre-training all go through
//! [`Pretext::loss_and_grad`].

use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentKind};
use crate::error::{config_err, Error, Result};
use crate::models::{self, EncoderConfig, ENC, HEAD};
use crate::rng::Rng;
use crate::tensor::{Bound, Graph, ParamVector, Tensor, Var};

/// Added to self-similarities so an anchor never scores against itself.
const SELF_MASK: f32 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretextKind {
    SimClr,
    Cpc,
    MultiTask,
}

impl PretextKind {
    pub const ALL: [PretextKind; 3] = [PretextKind::SimClr, PretextKind::Cpc, PretextKind::MultiTask];

    pub fn name(self) -> &'static str {
        match self {
            PretextKind::SimClr => "sim_clr",
            PretextKind::Cpc => "cpc",
            PretextKind::MultiTask => "multi_task",
        }
    }

    fn default_tau(self) -> f32 {
        match self {
            PretextKind::SimClr => 0.1,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextConfig {
    pub kind: PretextKind,
    /// Temperature; defaults to 0.1 for SimCLR and 1.0 for CPC.
    #[serde(default)]
    pub tau: Option<f32>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_frame_len")]
    pub frame_len: usize,
    #[serde(default = "AugmentKind::simclr_default")]
    pub pipeline: Vec<AugmentKind>,
    #[serde(default = "AugmentKind::multitask_default")]
    pub kinds: Vec<AugmentKind>,
    #[serde(default = "default_apply_prob")]
    pub apply_prob: f64,
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
}

fn default_horizon() -> usize {
    2
}
fn default_frame_len() -> usize {
    32
}
fn default_apply_prob() -> f64 {
    0.5
}
fn default_proj_dim() -> usize {
    50
}

impl PretextConfig {
    pub fn new(kind: PretextKind) -> Self {
        PretextConfig {
            kind,
            tau: None,
            horizon: default_horizon(),
            frame_len: default_frame_len(),
            pipeline: AugmentKind::simclr_default(),
            kinds: AugmentKind::multitask_default(),
            apply_prob: default_apply_prob(),
            proj_dim: default_proj_dim(),
        }
    }

    pub fn tau(&self) -> f32 {
        self.tau.unwrap_or(self.kind.default_tau())
    }

    pub fn validate(&self) -> Result<()> {
        let tau = self.tau();
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(config_err(format!("temperature must be positive, got {tau}")));
        }
        match self.kind {
            PretextKind::SimClr => {
                if self.pipeline.is_empty() || self.proj_dim == 0 {
                    return Err(config_err("SimCLR needs a non-empty augmentation pipeline and proj_dim ≥ 1"));
                }
                self.pipeline.iter().try_for_each(AugmentKind::validate)
            }
            PretextKind::Cpc => {
                if self.horizon == 0 || self.frame_len == 0 {
                    return Err(config_err("CPC needs horizon ≥ 1 and a positive frame length"));
                }
                Ok(())
            }
            PretextKind::MultiTask => {
                if self.kinds.is_empty() || !(0.0..=1.0).contains(&self.apply_prob) {
                    return Err(config_err("multi-task detection needs kinds and an application probability in [0, 1]"));
                }
                self.kinds.iter().try_for_each(AugmentKind::validate)
            }
        }
    }
}

/// One objective evaluation: the loss plus diagnostics for reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretextBatchLoss {
    pub loss: f32,
    /// Mean cosine similarity of positive pairs (SimCLR, CPC).
    pub positive_similarity: Option<f32>,
    /// Top-1 retrieval accuracy (CPC) or per-head detection accuracy
    /// (multi-task).
    pub accuracy: Option<f32>,
}

/// NT-Xent over `z: [2n, d]` where rows `2i` and `2i + 1` are views of the
/// same source.
pub fn simclr_loss(g: &mut Graph, z: Var, tau: f32) -> Result<Var> {
    let rows = g.shape(z)[0];
    if !rows.is_multiple_of(2) || rows < 4 {
        return Err(Error::BatchTooSmall { what: "SimCLR loss (pairs of views)", need: 4, got: rows });
    }
    let sim = g.cosine_similarity(z, z)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let mask = g.constant(Tensor::from_fn(&[rows, rows], |i| if i / rows == i % rows { SELF_MASK } else { 0.0 }));
    let logits = g.add(logits, mask)?;
    let positives: Vec<usize> = (0..rows).map(|a| a ^ 1).collect();
    Ok(g.cross_entropy_with_logits(logits, &positives)?)
}

/// InfoNCE over future frames. `predictions` and `targets` are
/// `[n, horizon, d]`; for every (sample, step) the candidates are the true
/// frame and the same-step frames of the other samples.
pub fn cpc_loss(g: &mut Graph, predictions: Var, targets: Var, tau: f32) -> Result<Var> {
    let shape = g.shape(predictions).to_vec();
    if shape.len() != 3 || g.shape(targets) != shape.as_slice() {
        return Err(config_err(format!(
            "CPC predictions {:?} and targets {:?} must both be [n, horizon, d]",
            shape,
            g.shape(targets)
        )));
    }
    let (n, horizon) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::BatchTooSmall { what: "CPC loss", need: 2, got: n });
    }
    let diagonal: Vec<usize> = (0..n).collect();
    let mut terms = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let p = models::frame_at(g, predictions, k)?;
        let t = models::frame_at(g, targets, k)?;
        let sim = g.cosine_similarity(p, t)?;
        let logits = g.scale(sim, 1.0 / tau)?;
        terms.push(g.cross_entropy_with_logits(logits, &diagonal)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / horizon as f32)?)
}

/// Mean binary cross-entropy over every detection head output.
pub fn multitask_loss(g: &mut Graph, logits: Var, labels: &Tensor) -> Result<Var> {
    Ok(g.binary_cross_entropy_with_logits(logits, labels)?)
}

/// Rebuilds the objective whose head `params` carry: kind, horizon,
/// projection width and number of detection heads come from the parameter
/// names and shapes; everything else from `base`.
pub fn config_for_params(params: &ParamVector, base: &PretextConfig) -> Result<PretextConfig> {
    let mut cfg = base.clone();
    if let Some(w) = params.get("head.proj.w") {
        cfg.kind = PretextKind::SimClr;
        cfg.proj_dim = w.shape()[1];
    } else if params.contains("head.gru.wz") {
        cfg.kind = PretextKind::Cpc;
        cfg.horizon = (0..).take_while(|k| params.contains(&format!("head.pred{k}.w"))).count();
    } else if let Some(w) = params.get("head.detect.w") {
        cfg.kind = PretextKind::MultiTask;
        if w.shape()[1] != cfg.kinds.len() {
            return Err(config_err(format!("model has {} detection heads, configuration lists {} kinds", w.shape()[1], cfg.kinds.len())));
        }
    } else {
        return Err(config_err("model carries no pretext head"));
    }
    if cfg.kind != base.kind {
        cfg.tau = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// An objective bound to an encoder architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Pretext {
    pub config: PretextConfig,
    pub encoder: EncoderConfig,
}

impl Pretext {
    pub fn new(config: PretextConfig, encoder: EncoderConfig) -> Result<Self> {
        config.validate()?;
        encoder.validate()?;
        Ok(Pretext { config, encoder })
    }

    pub fn kind(&self) -> PretextKind {
        self.config.kind
    }

    /// Smallest number of source windows one evaluation accepts.
    pub fn min_batch(&self) -> usize {
        match self.kind() {
            PretextKind::SimClr | PretextKind::Cpc => 2,
            PretextKind::MultiTask => 1,
        }
    }

    /// Encoder plus this objective's head.
    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamVector> {
        let mut p = self.encoder.init(rng)?;
        let d = self.encoder.embedding_dim();
        let head = match self.kind() {
            PretextKind::SimClr => models::init_dense("head.proj", d, self.config.proj_dim, Some(rng))?,
            PretextKind::Cpc => models::init_aggregator(d, self.config.horizon, rng)?,
            PretextKind::MultiTask => models::init_dense("head.detect", d, self.config.kinds.len(), Some(rng))?,
        };
        p.extend(head)?;
        Ok(p)
    }

    /// Loss only; no backward graph is kept.
    pub fn eval(&self, params: &ParamVector, windows: &[Tensor], rng: &mut Rng) -> Result<PretextBatchLoss> {
        let mut g = Graph::new();
        let (_, _, stats) = self.forward(&mut g, params, windows, rng, false)?;
        Ok(stats)
    }

    /// Loss and its gradient with respect to every entry of `params`.
    /// Entries outside `enc.` and `head.` get zero gradient.
    pub fn loss_and_grad(&self, params: &ParamVector, windows: &[Tensor], rng: &mut Rng) -> Result<(PretextBatchLoss, ParamVector)> {
        let mut g = Graph::new();
        let (loss, bound, stats) = self.forward(&mut g, params, windows, rng, true)?;
        let grads = g.backward(loss)?;
        Ok((stats, grads.for_params(&bound, params)))
    }

    fn forward(
        &self,
        g: &mut Graph,
        params: &ParamVector,
        windows: &[Tensor],
        rng: &mut Rng,
        train: bool,
    ) -> Result<(Var, Bound, PretextBatchLoss)> {
        if windows.len() < self.min_batch() {
            return Err(Error::BatchTooSmall { what: "pretext objective", need: self.min_batch(), got: windows.len() });
        }
        let p = g.bind_filtered(params, |n| train && (n.starts_with(ENC) || n.starts_with(HEAD)));
        let tau = self.config.tau();
        let (loss, stats) = match self.kind() {
            PretextKind::SimClr => {
                let mut views = Vec::with_capacity(2 * windows.len());
                for w in windows {
                    let (a, b) = augment::two_views(w, &self.config.pipeline, rng)?;
                    views.push(a);
                    views.push(b);
                }
                let x = g.constant(models::batch(&views)?);
                let e = models::encode(g, &p, &self.encoder, x)?;
                let z = models::project(g, &p, e)?;
                let loss = simclr_loss(g, z, tau)?;
                let pos = pair_similarity(g.value(z));
                (loss, PretextBatchLoss { loss: scalar(g, loss), positive_similarity: Some(pos), accuracy: None })
            }
            PretextKind::Cpc => {
                let n = windows.len();
                let (frames, steps) = models::frames(windows, self.config.frame_len)?;
                let horizon = self.config.horizon;
                if horizon >= steps {
                    return Err(config_err(format!("CPC horizon {horizon} must be below {steps} frames")));
                }
                let x = g.constant(frames);
                let e = models::encode(g, &p, &self.encoder, x)?;
                let d = self.encoder.embedding_dim();
                let seq = g.reshape(e, &[n, steps, d])?;
                let anchor = steps - horizon;
                let preds = models::aggregate_and_predict(g, &p, seq, anchor, horizon)?;
                let targets = g.slice(seq, 1, anchor, horizon)?;
                let loss = cpc_loss(g, preds, targets, tau)?;
                let (pos, acc) = retrieval_stats(g.value(preds), g.value(targets));
                (loss, PretextBatchLoss { loss: scalar(g, loss), positive_similarity: Some(pos), accuracy: Some(acc) })
            }
            PretextKind::MultiTask => {
                let (augmented, labels) =
                    augment::sample_task_batch(windows, &self.config.kinds, self.config.apply_prob, rng)?;
                let x = g.constant(models::batch(&augmented)?);
                let e = models::encode(g, &p, &self.encoder, x)?;
                let logits = models::detect(g, &p, e)?;
                let loss = multitask_loss(g, logits, &labels)?;
                let acc = detection_accuracy(g.value(logits), &labels);
                (loss, PretextBatchLoss { loss: scalar(g, loss), positive_similarity: None, accuracy: Some(acc) })
            }
        };
        Ok((loss, p, stats))
    }
}

fn scalar(g: &Graph, v: Var) -> f32 {
    g.value(v).data()[0]
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Mean cosine between rows `2i` and `2i + 1`.
fn pair_similarity(z: &Tensor) -> f32 {
    let d = z.shape()[1];
    let rows: Vec<&[f32]> = z.data().chunks(d).collect();
    let pairs = rows.len() / 2;
    let total: f64 = (0..pairs).map(|i| cosine(rows[2 * i], rows[2 * i + 1])).sum();
    (total / pairs as f64) as f32
}

/// Mean positive cosine, and how often the true frame is the most similar
/// candidate.
fn retrieval_stats(preds: &Tensor, targets: &Tensor) -> (f32, f32) {
    let &[n, h, d] = preds.shape() else { return (0.0, 0.0) };
    let (p, t) = (preds.data(), targets.data());
    let row = |i: usize, k: usize| (i * h + k) * d..(i * h + k + 1) * d;
    let (mut pos, mut hits) = (0.0f64, 0usize);
    for k in 0..h {
        for i in 0..n {
            let sims: Vec<f64> = (0..n).map(|j| cosine(&p[row(i, k)], &t[row(j, k)])).collect();
            pos += sims[i];
            if sims.iter().all(|&s| s <= sims[i]) {
                hits += 1;
            }
        }
    }
    let total = (n * h) as f64;
    ((pos / total) as f32, (hits as f64 / total) as f32)
}

fn detection_accuracy(logits: &Tensor, labels: &Tensor) -> f32 {
    let correct = logits.data().iter().zip(labels.data()).filter(|(&x, &y)| (x > 0.0) == (y > 0.5)).count();
    correct as f32 / labels.numel() as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            blocks: vec![models::ConvBlock { out_channels: 8, kernel: 3, stride: 2 }, models::ConvBlock { out_channels: 12, kernel: 3, stride: 2 }],
        }
    }

    fn windows(n: usize, seed: u64) -> Vec<Tensor> {
        use rand::Rng as _;
        let mut r = seeded(seed);
        (0..n).map(|_| Tensor::from_fn(&[3, 64], |_| r.gen_range(-1.0..1.0))).collect()
    }

    fn pretext(kind: PretextKind) -> Pretext {
        let mut cfg = PretextConfig::new(kind);
        cfg.frame_len = 16;
        Pretext::new(cfg, small_encoder()).unwrap()
    }

    #[test]
    fn same_seed_same_loss() {
        for kind in PretextKind::ALL {
            let p = pretext(kind);
            let params = p.init_params(&mut seeded(1)).unwrap();
            let w = windows(4, 2);
            let a = p.eval(&params, &w, &mut seeded(3)).unwrap();
            let b = p.eval(&params, &w, &mut seeded(3)).unwrap();
            assert_eq!(a, b, "{kind:?}");
            assert!(a.loss.is_finite() && a.loss >= 0.0);
            let (c, grads) = p.loss_and_grad(&params, &w, &mut seeded(3)).unwrap();
            assert_eq!(a.loss, c.loss);
            grads.check_aligned(&params).unwrap();
        }
    }

    #[test]
    fn head_parameters_differ_encoder_does_not() {
        let enc_count = |k| pretext(k).init_params(&mut seeded(0)).unwrap().with_prefix(ENC).numel();
        assert_eq!(enc_count(PretextKind::SimClr), enc_count(PretextKind::Cpc));
        assert_eq!(enc_count(PretextKind::Cpc), enc_count(PretextKind::MultiTask));
        let full = EncoderConfig::default();
        // 3·7·32+32 + 32·5·64+64 + 64·3·96+96
        assert_eq!(full.init(&mut seeded(0)).unwrap().numel(), 704 + 10304 + 18528);
    }

    #[test]
    fn too_small_batches_are_rejected() {
        for kind in [PretextKind::SimClr, PretextKind::Cpc] {
            let p = pretext(kind);
            let params = p.init_params(&mut seeded(1)).unwrap();
            let err = p.eval(&params, &windows(1, 0), &mut seeded(0)).unwrap_err();
            assert!(matches!(err, Error::BatchTooSmall { .. }), "{kind:?}: {err}");
        }
    }

    #[test]
    fn classifier_entries_get_zero_gradient() {
        let p = pretext(PretextKind::SimClr);
        let mut params = p.init_params(&mut seeded(1)).unwrap();
        params.extend(models::init_classifier(12, 3).unwrap()).unwrap();
        let (_, grads) = p.loss_and_grad(&params, &windows(4, 2), &mut seeded(3)).unwrap();
        assert!(grads.get("clf.w").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get("enc.conv0.w").unwrap().data().iter().any(|&v| v != 0.0));
        assert!(grads.get("head.proj.w").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn config_recovered_from_heads() {
        for kind in PretextKind::ALL {
            let p = pretext(kind);
            let params = p.init_params(&mut seeded(0)).unwrap();
            let back = config_for_params(&params, &PretextConfig::new(PretextKind::SimClr)).unwrap();
            assert_eq!(back.kind, kind);
            assert_eq!(back.horizon, p.config.horizon);
        }
        assert!(config_for_params(&ParamVector::new(), &PretextConfig::new(PretextKind::Cpc)).is_err());
    }

    #[test]
    fn multitask_zero_probability_zero_head_is_ln2() {
        let mut cfg = PretextConfig::new(PretextKind::MultiTask);
        cfg.apply_prob = 0.0;
        let p = Pretext::new(cfg, small_encoder()).unwrap();
        let mut params = p.init_params(&mut seeded(1)).unwrap();
        let zero = params.with_prefix("head.").zeros_like();
        params.overwrite(&zero).unwrap();
        let out = p.eval(&params, &windows(5, 4), &mut seeded(0)).unwrap();
        assert!((out.loss - std::f32::consts::LN_2).abs() < 1e-6);
    }
}

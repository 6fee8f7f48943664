//! Target-side adaptation: a few pretext-loss steps on the unlabeled shots
//! (replay), then supervised fine-tuning of a classifier.

use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::error::{config_err, data_err, Result};
use crate::models::{self, ModelBundle, Origin, CLF, ENC};
use crate::pretext::Pretext;
use crate::rng::{self, Phase};
use crate::tensor::{adam_step, sgd_step, AdamConfig, AdamState, Graph, ParamVector, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    #[serde(default = "default_replay_steps")]
    pub steps: usize,
    /// Defaults to the meta-training inner learning rate.
    #[serde(default)]
    pub lr: Option<f32>,
}

fn default_replay_steps() -> usize {
    10
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig { steps: default_replay_steps(), lr: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayLog {
    pub lr: f32,
    pub steps: usize,
    /// Objective on the shot set before and after replay, under one fixed
    /// random stream so the two are comparable.
    pub loss_before: f32,
    pub loss_after: f32,
    /// Loss seen by each gradient step.
    pub step_losses: Vec<f32>,
}

/// Pretext-loss SGD on the shots. Labels are dropped before anything else
/// happens, so they cannot influence the result.
pub fn pretext_replay(pretext: &Pretext, params: &ParamVector, shots: &[Window], steps: usize, lr: f32, seed: u64) -> Result<(ParamVector, ReplayLog)> {
    let unlabeled: Vec<Tensor> = shots.iter().map(|w| w.values.clone()).collect();
    replay_unlabeled(pretext, params, &unlabeled, steps, lr, seed)
}

pub fn replay_unlabeled(pretext: &Pretext, params: &ParamVector, shots: &[Tensor], steps: usize, lr: f32, seed: u64) -> Result<(ParamVector, ReplayLog)> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(config_err(format!("replay learning rate must be positive, got {lr}")));
    }
    let probe = |p: &ParamVector| pretext.eval(p, shots, &mut rng::step_stream(seed, 0, 0, Phase::Evaluation));
    let loss_before = probe(params)?.loss;
    let mut theta = params.clone();
    let mut step_losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let (stats, grads) = pretext.loss_and_grad(&theta, shots, &mut rng::step_stream(seed, 0, s, Phase::Replay))?;
        theta = sgd_step(&theta, &grads, lr)?;
        step_losses.push(stats.loss);
    }
    let loss_after = if steps == 0 { loss_before } else { probe(&theta)?.loss };
    Ok((theta, ReplayLog { lr, steps, loss_before, loss_after, step_losses }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Frozen encoder, linear classifier only.
    LinearEval,
    EndToEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    /// Defaults to 0.005 for linear evaluation, 0.001 end-to-end.
    #[serde(default)]
    pub lr: Option<f32>,
    #[serde(default = "default_finetune_epochs")]
    pub epochs: usize,
}

fn default_protocol() -> Protocol {
    Protocol::LinearEval
}
fn default_finetune_epochs() -> usize {
    20
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { protocol: default_protocol(), lr: None, epochs: default_finetune_epochs() }
    }
}

impl FinetuneConfig {
    pub fn lr(&self) -> f32 {
        self.lr.unwrap_or(match self.protocol {
            Protocol::LinearEval => 0.005,
            Protocol::EndToEnd => 0.001,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub lr: f32,
    /// Cross-entropy before each epoch's update.
    pub losses: Vec<f32>,
    pub train_accuracy: f32,
}

fn labeled(shots: &[Window], n_classes: usize) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let mut values = Vec::with_capacity(shots.len());
    let mut labels = Vec::with_capacity(shots.len());
    for w in shots {
        let l = w.label.ok_or_else(|| data_err("fine-tuning shot without a label"))?;
        if l >= n_classes {
            return Err(data_err(format!("label {l} outside {n_classes} classes")));
        }
        values.push(w.values.clone());
        labels.push(l);
    }
    if let Some(c) = (0..n_classes).find(|c| !labels.contains(c)) {
        return Err(data_err(format!("class {c} has no fine-tuning shots")));
    }
    Ok((values, labels))
}

/// Fresh zero classifier trained full-batch with Adam on cross-entropy.
/// Linear evaluation touches only `clf.`; end-to-end also trains `enc.`.
/// `head.` entries are never modified. Every class in `0..n_classes` needs
/// at least one shot.
pub fn finetune(bundle: &ModelBundle, shots: &[Window], n_classes: usize, cfg: &FinetuneConfig) -> Result<(ModelBundle, FinetuneLog)> {
    let lr = cfg.lr();
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(config_err(format!("fine-tuning learning rate must be positive, got {lr}")));
    }
    let (values, labels) = labeled(shots, n_classes)?;
    let dim = bundle.encoder.embedding_dim();
    let mut params = bundle.params.filter(|n| !n.starts_with(CLF));
    params.extend(models::init_classifier(dim, n_classes)?)?;
    let adam = AdamConfig::new(lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let final_logits = match cfg.protocol {
        Protocol::LinearEval => {
            let embeddings = models::embed(&params, &bundle.encoder, &values)?;
            let mut clf = params.with_prefix(CLF);
            let mut state = AdamState::new(&clf);
            for _ in 0..cfg.epochs {
                let mut g = Graph::new();
                let p = g.bind(&clf);
                let x = g.constant(embeddings.clone());
                let y = models::classify(&mut g, &p, x)?;
                let loss = g.cross_entropy_with_logits(y, &labels)?;
                losses.push(g.value(loss).data()[0]);
                let grads = g.backward(loss)?.for_params(&p, &clf);
                (clf, state) = adam_step(&state, &clf, &grads, &adam)?;
            }
            params.overwrite(&clf)?;
            let mut g = Graph::new();
            let p = g.bind_filtered(&clf, |_| false);
            let x = g.constant(embeddings);
            let y = models::classify(&mut g, &p, x)?;
            g.value(y).clone()
        }
        Protocol::EndToEnd => {
            let x_all = models::batch(&values)?;
            let trainable = |n: &str| n.starts_with(ENC) || n.starts_with(CLF);
            let mut state = AdamState::new(&params);
            for _ in 0..cfg.epochs {
                let mut g = Graph::new();
                let p = g.bind_filtered(&params, trainable);
                let x = g.constant(x_all.clone());
                let e = models::encode(&mut g, &p, &bundle.encoder, x)?;
                let y = models::classify(&mut g, &p, e)?;
                let loss = g.cross_entropy_with_logits(y, &labels)?;
                losses.push(g.value(loss).data()[0]);
                let grads = g.backward(loss)?.for_params(&p, &params);
                (params, state) = adam_step(&state, &params, &grads, &adam)?;
            }
            models::logits(&params, &bundle.encoder, &values)?
        }
    };
    let predicted = crate::metrics::argmax_rows(&final_logits);
    let correct = predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
    let log = FinetuneLog { lr, losses, train_accuracy: correct as f32 / labels.len() as f32 };
    Ok((ModelBundle { params, ..bundle.clone() }, log))
}

/// The four ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain pre-training, fine-tuning only.
    Baseline,
    /// Plain pre-training, replay, fine-tuning.
    ReplayOnly,
    /// Meta pre-training, fine-tuning only.
    MetaOnly,
    /// Meta pre-training, replay, linear evaluation.
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::ReplayOnly, Mode::MetaOnly, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::ReplayOnly => "replay_only",
            Mode::MetaOnly => "meta_only",
            Mode::Full => "full",
        }
    }

    pub fn required_origin(self) -> Origin {
        match self {
            Mode::Baseline | Mode::ReplayOnly => Origin::Plain,
            Mode::MetaOnly | Mode::Full => Origin::Meta,
        }
    }

    pub fn replays(self) -> bool {
        matches!(self, Mode::ReplayOnly | Mode::Full)
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| config_err(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineLog {
    pub mode: Mode,
    pub replay: Option<ReplayLog>,
    pub finetune: FinetuneLog,
}

/// Replay (for modes that use it) followed by fine-tuning. `inner_lr` is the
/// replay rate used when `replay.lr` is unset. The `full` arm always uses
/// linear evaluation.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    mode: Mode,
    pretext: &Pretext,
    pretrained: &ModelBundle,
    shots: &[Window],
    n_classes: usize,
    replay: &ReplayConfig,
    inner_lr: f32,
    finetune_cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(ModelBundle, PipelineLog)> {
    if pretrained.origin != mode.required_origin() {
        return Err(config_err(format!(
            "mode `{}` needs {:?} pre-trained weights, got {:?}",
            mode.name(),
            mode.required_origin(),
            pretrained.origin
        )));
    }
    let mut bundle = pretrained.clone();
    let replay_log = if mode.replays() {
        let (theta, log) = pretext_replay(pretext, &bundle.params, shots, replay.steps, replay.lr.unwrap_or(inner_lr), seed)?;
        bundle.params = theta;
        Some(log)
    } else {
        None
    };
    let mut ft = *finetune_cfg;
    if mode == Mode::Full {
        ft.protocol = Protocol::LinearEval;
    }
    let (bundle, finetune_log) = finetune(&bundle, shots, n_classes, &ft)?;
    Ok((bundle, PipelineLog { mode, replay: replay_log, finetune: finetune_log }))
}

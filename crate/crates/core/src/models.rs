//! Encoder and heads. Parameters live in one [`ParamVector`] whose names are
//! prefixed `enc.`, `head.` or `clf.`; every forward function reads what it
//! needs from a [`Bound`] view of that vector.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{config_err, data_err, Result};
use crate::rng::Rng;
use crate::tensor::{Bound, Graph, ParamVector, Tensor, Var};

pub const ENC: &str = "enc.";
pub const HEAD: &str = "head.";
pub const CLF: &str = "clf.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Conv blocks (conv → layer norm → relu) followed by global mean pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlock>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let b = |out_channels, kernel| ConvBlock { out_channels, kernel, stride: 2 };
        EncoderConfig { in_channels: 3, blocks: vec![b(32, 7), b(64, 5), b(96, 3)] }
    }
}

impl EncoderConfig {
    pub fn embedding_dim(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.blocks.is_empty() {
            return Err(config_err("encoder needs input channels and at least one conv block"));
        }
        if self.blocks.iter().any(|b| b.out_channels == 0 || b.kernel == 0 || b.stride == 0) {
            return Err(config_err("conv blocks need positive channels, kernel and stride"));
        }
        Ok(())
    }

    /// Kaiming-uniform conv weights, zero biases.
    pub fn init(&self, rng: &mut Rng) -> Result<ParamVector> {
        self.validate()?;
        let mut p = ParamVector::new();
        let mut c_in = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            let bound = (6.0 / (c_in * b.kernel) as f32).sqrt();
            let w = Tensor::from_fn(&[b.out_channels, c_in, b.kernel], |_| rng.gen_range(-bound..bound));
            p.push(format!("enc.conv{i}.w"), w)?;
            p.push(format!("enc.conv{i}.b"), Tensor::zeros(&[b.out_channels]))?;
            c_in = b.out_channels;
        }
        Ok(p)
    }
}

/// Stacks `[channels, T]` windows into `[n, channels, T]`.
pub fn batch(windows: &[Tensor]) -> Result<Tensor> {
    let first = windows.first().ok_or_else(|| data_err("empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(windows.len() * first.numel());
    for w in windows {
        if w.shape() != shape.as_slice() {
            return Err(data_err(format!("batch mixes shapes {:?} and {:?}", shape, w.shape())));
        }
        data.extend_from_slice(w.data());
    }
    let mut full = vec![windows.len()];
    full.extend(shape);
    Ok(Tensor::new(full, data)?)
}

/// Splits every window into consecutive frames of `frame_len` samples:
/// `[n, C, steps * frame_len]` windows become `[n * steps, C, frame_len]`,
/// sample-major.
pub fn frames(windows: &[Tensor], frame_len: usize) -> Result<(Tensor, usize)> {
    let x = batch(windows)?;
    let &[n, c, t] = x.shape() else { unreachable!() };
    if frame_len == 0 || t % frame_len != 0 {
        return Err(data_err(format!("window length {t} is not a multiple of frame length {frame_len}")));
    }
    let steps = t / frame_len;
    let src = x.data();
    let out = Tensor::from_fn(&[n * steps, c, frame_len], |i| {
        let j = i % frame_len;
        let ch = (i / frame_len) % c;
        let s = (i / (frame_len * c)) % steps;
        let sample = i / (frame_len * c * steps);
        src[(sample * c + ch) * t + s * frame_len + j]
    });
    Ok((out, steps))
}

/// `[n, C, T]` → `[n, embedding_dim]`.
pub fn encode(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, b) in cfg.blocks.iter().enumerate() {
        let w = p.get(&format!("enc.conv{i}.w"))?;
        let bias = p.get(&format!("enc.conv{i}.b"))?;
        h = g.conv1d(h, w, bias, b.stride, b.kernel / 2)?;
        h = g.layer_norm(h, 2)?;
        h = g.relu(h)?;
    }
    Ok(g.global_mean_pool(h)?)
}

/// `x · {prefix}.w + {prefix}.b`.
pub fn dense(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let h = g.matmul(x, w)?;
    Ok(g.add(h, b)?)
}

/// Glorot-uniform weights (or zeros) and zero bias for a dense layer.
pub fn init_dense(prefix: &str, fan_in: usize, fan_out: usize, rng: Option<&mut Rng>) -> Result<ParamVector> {
    let w = match rng {
        Some(r) => {
            let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
            Tensor::from_fn(&[fan_in, fan_out], |_| r.gen_range(-bound..bound))
        }
        None => Tensor::zeros(&[fan_in, fan_out]),
    };
    let mut p = ParamVector::new();
    p.push(format!("{prefix}.w"), w)?;
    p.push(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(p)
}

pub fn project(g: &mut Graph, p: &Bound, embeddings: Var) -> Result<Var> {
    dense(g, p, "head.proj", embeddings)
}

pub fn classify(g: &mut Graph, p: &Bound, embeddings: Var) -> Result<Var> {
    dense(g, p, "clf", embeddings)
}

pub fn detect(g: &mut Graph, p: &Bound, embeddings: Var) -> Result<Var> {
    dense(g, p, "head.detect", embeddings)
}

/// Zero classifier: uniform logits until trained.
pub fn init_classifier(dim: usize, classes: usize) -> Result<ParamVector> {
    init_dense("clf", dim, classes, None)
}

const GRU_INPUT: [&str; 3] = ["wz", "wr", "wh"];
const GRU_HIDDEN: [&str; 3] = ["uz", "ur", "uh"];
const GRU_BIAS: [&str; 3] = ["bz", "br", "bh"];

/// Single-layer gated recurrent aggregator (hidden = `dim`) plus `horizon`
/// linear step predictors.
pub fn init_aggregator(dim: usize, horizon: usize, rng: &mut Rng) -> Result<ParamVector> {
    let mut p = ParamVector::new();
    let bound = (3.0 / dim as f32).sqrt();
    for name in GRU_INPUT.iter().chain(&GRU_HIDDEN) {
        p.push(format!("head.gru.{name}"), Tensor::from_fn(&[dim, dim], |_| rng.gen_range(-bound..bound)))?;
    }
    for name in GRU_BIAS {
        p.push(format!("head.gru.{name}"), Tensor::zeros(&[dim]))?;
    }
    for k in 0..horizon {
        p.extend(init_dense(&format!("head.pred{k}"), dim, dim, Some(rng))?)?;
    }
    Ok(p)
}

fn gru_cell(g: &mut Graph, p: &Bound, x: Var, h: Var) -> Result<Var> {
    let gate = |g: &mut Graph, w: &str, u: &str, b: &str, hidden: Var| -> Result<Var> {
        let a = g.matmul(x, p.get(&format!("head.gru.{w}"))?)?;
        let c = g.matmul(hidden, p.get(&format!("head.gru.{u}"))?)?;
        let s = g.add(a, c)?;
        Ok(g.add(s, p.get(&format!("head.gru.{b}"))?)?)
    };
    let z = gate(g, "wz", "uz", "bz", h)?;
    let z = g.sigmoid(z)?;
    let r = gate(g, "wr", "ur", "br", h)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h)?;
    let cand = gate(g, "wh", "uh", "bh", rh)?;
    let cand = g.tanh(cand)?;
    // h' = h + z ⊙ (ĥ − h)
    let diff = g.sub(cand, h)?;
    let step = g.mul(z, diff)?;
    Ok(g.add(h, step)?)
}

/// Frame `t` of `[n, steps, dim]` as `[n, dim]`.
pub fn frame_at(g: &mut Graph, frames: Var, t: usize) -> Result<Var> {
    let &[n, _, d] = g.shape(frames) else {
        return Err(data_err(format!("expected [n, steps, dim] frames, got {:?}", g.shape(frames))));
    };
    let f = g.slice(frames, 1, t, 1)?;
    Ok(g.reshape(f, &[n, d])?)
}

/// Consumes frames `0..anchor` and predicts frames `anchor..anchor + horizon`
/// from the final context. Returns `[n, horizon, dim]`.
pub fn aggregate_and_predict(g: &mut Graph, p: &Bound, frames: Var, anchor: usize, horizon: usize) -> Result<Var> {
    let &[n, steps, d] = g.shape(frames) else {
        return Err(data_err(format!("expected [n, steps, dim] frames, got {:?}", g.shape(frames))));
    };
    if horizon == 0 || horizon >= steps {
        return Err(config_err(format!("horizon {horizon} must be in 1..{steps}")));
    }
    if anchor == 0 || anchor + horizon > steps {
        return Err(config_err(format!("anchor {anchor} with horizon {horizon} does not fit {steps} frames")));
    }
    let mut h = g.constant(Tensor::zeros(&[n, d]));
    for t in 0..anchor {
        let x = frame_at(g, frames, t)?;
        h = gru_cell(g, p, x, h)?;
    }
    let mut preds = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let y = dense(g, p, &format!("head.pred{k}"), h)?;
        preds.push(g.reshape(y, &[n, 1, d])?);
    }
    Ok(g.concat(&preds, 1)?)
}

/// Embeddings without building a backward graph, in chunks to bound memory.
pub fn embed(params: &ParamVector, cfg: &EncoderConfig, windows: &[Tensor]) -> Result<Tensor> {
    const CHUNK: usize = 128;
    let d = cfg.embedding_dim();
    let mut out = Vec::with_capacity(windows.len() * d);
    for chunk in windows.chunks(CHUNK) {
        let mut g = Graph::new();
        let bound = g.bind_filtered(&params.with_prefix(ENC), |_| false);
        let x = g.constant(batch(chunk)?);
        let e = encode(&mut g, &bound, cfg, x)?;
        out.extend_from_slice(g.value(e).data());
    }
    if windows.is_empty() {
        return Err(data_err("nothing to embed"));
    }
    Ok(Tensor::new(vec![windows.len(), d], out)?)
}

/// Classifier logits for each window.
pub fn logits(params: &ParamVector, cfg: &EncoderConfig, windows: &[Tensor]) -> Result<Tensor> {
    let e = embed(params, cfg, windows)?;
    let mut g = Graph::new();
    let bound = g.bind_filtered(&params.with_prefix(CLF), |_| false);
    let x = g.constant(e);
    let y = classify(&mut g, &bound, x)?;
    Ok(g.value(y).clone())
}

/// How the encoder weights were produced; `run_pipeline` checks it against
/// the requested ablation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Untrained,
    Plain,
    Meta,
}

impl Origin {
    fn code(self) -> f32 {
        match self {
            Origin::Untrained => 0.0,
            Origin::Plain => 1.0,
            Origin::Meta => 2.0,
        }
    }

    fn from_code(c: f32) -> Result<Origin> {
        match c as i32 {
            0 => Ok(Origin::Untrained),
            1 => Ok(Origin::Plain),
            2 => Ok(Origin::Meta),
            _ => Err(data_err(format!("unknown model origin code {c}"))),
        }
    }
}

/// Parameters plus what is needed to run them on raw data.
///
/// On disk this is a single parameter file; the metadata rides along as
/// extra `info.*` entries that never enter training.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub encoder: EncoderConfig,
    pub params: ParamVector,
    pub origin: Origin,
    pub norm: Option<NormStats>,
}

impl ModelBundle {
    pub fn n_classes(&self) -> Option<usize> {
        self.params.get("clf.b").map(|b| b.numel())
    }

    pub fn to_file_params(&self) -> Result<ParamVector> {
        let mut p = self.params.clone();
        let strides: Vec<f32> = self.encoder.blocks.iter().map(|b| b.stride as f32).collect();
        p.push("info.origin", Tensor::new(vec![1], vec![self.origin.code()])?)?;
        p.push("info.enc.stride", Tensor::new(vec![strides.len()], strides)?)?;
        if let Some(n) = &self.norm {
            p.push("info.norm.lo", Tensor::new(vec![n.lo.len()], n.lo.clone())?)?;
            p.push("info.norm.hi", Tensor::new(vec![n.hi.len()], n.hi.clone())?)?;
        }
        Ok(p)
    }

    pub fn from_file_params(file: ParamVector) -> Result<ModelBundle> {
        let info = |name: &str| file.get(name).map(|t| t.data().to_vec());
        let origin = Origin::from_code(info("info.origin").and_then(|v| v.first().copied()).ok_or_else(|| data_err("model file lacks info.origin"))?)?;
        let strides = info("info.enc.stride").ok_or_else(|| data_err("model file lacks info.enc.stride"))?;
        let mut blocks = Vec::new();
        let mut in_channels = 0;
        for (i, &s) in strides.iter().enumerate() {
            let w = file.get(&format!("enc.conv{i}.w")).ok_or_else(|| data_err(format!("model file lacks enc.conv{i}.w")))?;
            let &[out_channels, c_in, kernel] = w.shape() else {
                return Err(data_err(format!("enc.conv{i}.w has shape {:?}", w.shape())));
            };
            if i == 0 {
                in_channels = c_in;
            }
            blocks.push(ConvBlock { out_channels, kernel, stride: s as usize });
        }
        let norm = match (info("info.norm.lo"), info("info.norm.hi")) {
            (Some(lo), Some(hi)) => Some(NormStats { lo, hi }),
            _ => None,
        };
        let encoder = EncoderConfig { in_channels, blocks };
        encoder.validate()?;
        Ok(ModelBundle { encoder, params: file.filter(|n| !n.starts_with("info.")), origin, norm })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_file_params()?.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelBundle> {
        Self::from_file_params(ParamVector::load(path)?)
    }
}

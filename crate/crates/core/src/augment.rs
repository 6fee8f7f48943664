//! Stochastic sensor-signal transformations for contrastive views and
//! transformation-detection batches. Every output is clamped to [-1, 1].

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentKind {
    /// Additive Gaussian noise.
    Jitter { sigma: f32 },
    /// Per-channel factor drawn uniformly from `[lo, hi]`.
    Scale { lo: f32, hi: f32 },
    /// One random 3-D rotation per window, angle up to `max_deg`.
    Rotate3d { max_deg: f32 },
    Negate,
    TimeFlip,
    /// Splits time into `segments` near-equal pieces and shuffles them.
    Permute { segments: usize },
    ChannelShuffle,
}

impl AugmentKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AugmentKind::Jitter { sigma } => sigma >= 0.0 && sigma.is_finite(),
            AugmentKind::Scale { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            AugmentKind::Rotate3d { max_deg } => max_deg >= 0.0 && max_deg.is_finite(),
            AugmentKind::Permute { segments } => segments >= 1,
            AugmentKind::Negate | AugmentKind::TimeFlip | AugmentKind::ChannelShuffle => true,
        };
        if ok {
            Ok(())
        } else {
            Err(config_err(format!("invalid augmentation parameters: {self:?}")))
        }
    }

    pub fn simclr_default() -> Vec<AugmentKind> {
        vec![
            AugmentKind::Jitter { sigma: 0.05 },
            AugmentKind::Scale { lo: 0.9, hi: 1.1 },
            AugmentKind::Rotate3d { max_deg: 30.0 },
        ]
    }

    pub fn multitask_default() -> Vec<AugmentKind> {
        vec![
            AugmentKind::Jitter { sigma: 0.05 },
            AugmentKind::Scale { lo: 0.9, hi: 1.1 },
            AugmentKind::Rotate3d { max_deg: 30.0 },
            AugmentKind::Negate,
            AugmentKind::TimeFlip,
            AugmentKind::Permute { segments: 4 },
        ]
    }
}

fn unclamped(kind: &AugmentKind, values: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let &[channels, t] = values.shape() else {
        return Err(config_err(format!("augmentations expect [channels, T], got {:?}", values.shape())));
    };
    let x = values.data();
    let out = match *kind {
        AugmentKind::Jitter { sigma } => {
            if sigma == 0.0 {
                return Ok(values.clone());
            }
            let n = Normal::new(0.0, sigma).map_err(|e| config_err(e.to_string()))?;
            Tensor::from_fn(&[channels, t], |i| x[i] + n.sample(rng))
        }
        AugmentKind::Scale { lo, hi } => {
            let factors: Vec<f32> = (0..channels).map(|_| if lo == hi { lo } else { rng.gen_range(lo..=hi) }).collect();
            Tensor::from_fn(&[channels, t], |i| x[i] * factors[i / t])
        }
        AugmentKind::Rotate3d { max_deg } => {
            if channels != 3 {
                return Err(config_err(format!("rotate3d needs 3 channels, got {channels}")));
            }
            let r = random_rotation(max_deg, rng);
            Tensor::from_fn(&[3, t], |i| {
                let (c, k) = (i / t, i % t);
                (0..3).map(|j| r[c][j] * x[j * t + k]).sum()
            })
        }
        AugmentKind::Negate => values.map(|v| -v),
        AugmentKind::TimeFlip => Tensor::from_fn(&[channels, t], |i| x[(i / t) * t + (t - 1 - i % t)]),
        AugmentKind::Permute { segments } => {
            let bounds: Vec<usize> = (0..=segments).map(|s| s * t / segments).collect();
            let mut order: Vec<usize> = (0..segments).collect();
            order.shuffle(rng);
            let mut src = Vec::with_capacity(t);
            for &s in &order {
                src.extend(bounds[s]..bounds[s + 1]);
            }
            Tensor::from_fn(&[channels, t], |i| x[(i / t) * t + src[i % t]])
        }
        AugmentKind::ChannelShuffle => {
            let mut perm: Vec<usize> = (0..channels).collect();
            perm.shuffle(rng);
            Tensor::from_fn(&[channels, t], |i| x[perm[i / t] * t + i % t])
        }
    };
    Ok(out)
}

/// Uniform random axis, angle uniform in `[-max_deg, max_deg]`.
fn random_rotation(max_deg: f32, rng: &mut Rng) -> [[f32; 3]; 3] {
    let mut axis = [0.0f32; 3];
    loop {
        for a in axis.iter_mut() {
            *a = StandardNormal.sample(rng);
        }
        let n = axis.iter().map(|a| a * a).sum::<f32>().sqrt();
        if n > 1e-6 {
            axis.iter_mut().for_each(|a| *a /= n);
            break;
        }
    }
    let angle = if max_deg == 0.0 { 0.0 } else { rng.gen_range(-max_deg..=max_deg).to_radians() };
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let k = 1.0 - c;
    [
        [c + x * x * k, x * y * k - z * s, x * z * k + y * s],
        [y * x * k + z * s, c + y * y * k, y * z * k - x * s],
        [z * x * k - y * s, z * y * k + x * s, c + z * z * k],
    ]
}

fn clamp(t: Tensor) -> Tensor {
    t.map(|v| v.clamp(-1.0, 1.0))
}

/// Applies one transformation; shape is preserved.
pub fn apply(kind: &AugmentKind, values: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    kind.validate()?;
    Ok(clamp(unclamped(kind, values, rng)?))
}

/// Applies each kind in order, clamping once at the end.
pub fn apply_pipeline(pipeline: &[AugmentKind], values: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let mut out = values.clone();
    for kind in pipeline {
        kind.validate()?;
        out = unclamped(kind, &out, rng)?;
    }
    Ok(clamp(out))
}

/// Two independent draws of `pipeline` on the same source.
pub fn two_views(values: &Tensor, pipeline: &[AugmentKind], rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    if pipeline.is_empty() {
        return Err(config_err("two_views needs a non-empty pipeline"));
    }
    let a = apply_pipeline(pipeline, values, rng)?;
    let b = apply_pipeline(pipeline, values, rng)?;
    Ok((a, b))
}

/// Each window receives each kind independently with probability `prob`
/// (in list order). Returns the transformed windows and the `[n, m]`
/// indicator matrix of which kinds were applied.
pub fn sample_task_batch(windows: &[Tensor], kinds: &[AugmentKind], prob: f64, rng: &mut Rng) -> Result<(Vec<Tensor>, Tensor)> {
    if kinds.is_empty() || windows.is_empty() {
        return Err(config_err("transformation detection needs at least one window and one kind"));
    }
    if !(0.0..=1.0).contains(&prob) {
        return Err(config_err(format!("application probability {prob} outside [0, 1]")));
    }
    for kind in kinds {
        kind.validate()?;
    }
    let m = kinds.len();
    let mut labels = vec![0.0f32; windows.len() * m];
    let mut out = Vec::with_capacity(windows.len());
    for (i, w) in windows.iter().enumerate() {
        let mut x = w.clone();
        for (j, kind) in kinds.iter().enumerate() {
            if rng.gen_bool(prob) {
                x = unclamped(kind, &x, rng)?;
                labels[i * m + j] = 1.0;
            }
        }
        out.push(clamp(x));
    }
    Ok((out, Tensor::new(vec![windows.len(), m], labels)?))
}

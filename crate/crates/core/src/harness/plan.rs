//! Experiment plans: JSON sections layered over a named preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adapt::{FinetuneConfig, Mode, ReplayConfig};
use crate::augment::AugmentKind;
use crate::data::{self, Dataset, SynthSpec};
use crate::error::{config_err, Result};
use crate::meta::{MetaHyper, OuterOptimizer};
use crate::models::EncoderConfig;
use crate::pretext::{Pretext, PretextConfig, PretextKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small epochs, batches and tasks for CPU test runs.
    DeskScale,
    /// The full-size hyperparameter regime.
    PaperScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset file; when absent `synth` is rendered instead.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub synth_seed: u64,
    /// Domains with fewer windows are dropped before splitting.
    #[serde(default)]
    pub min_domain_windows: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    #[serde(default)]
    pub weight_decay: f32,
}

impl PlainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(config_err("plain pre-training needs batch_size ≥ 1, lr > 0 and weight_decay ≥ 0"));
        }
        Ok(())
    }
}

/// Objective, encoder and plain pre-training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextSection {
    pub kind: PretextKind,
    #[serde(default)]
    pub tau: Option<f32>,
    pub horizon: usize,
    pub frame_len: usize,
    pub pipeline: Vec<AugmentKind>,
    pub kinds: Vec<AugmentKind>,
    pub apply_prob: f64,
    pub proj_dim: usize,
    pub encoder: EncoderConfig,
    pub plain: PlainHyper,
}

impl PretextSection {
    pub fn objective(&self, kind: PretextKind) -> PretextConfig {
        PretextConfig {
            kind,
            tau: if kind == self.kind { self.tau } else { None },
            horizon: self.horizon,
            frame_len: self.frame_len,
            pipeline: self.pipeline.clone(),
            kinds: self.kinds.clone(),
            apply_prob: self.apply_prob,
            proj_dim: self.proj_dim,
        }
    }

    pub fn pretext(&self) -> Result<Pretext> {
        self.pretext_for(self.kind)
    }

    /// Same settings with another objective; the temperature override only
    /// applies to the configured kind.
    pub fn pretext_for(&self, kind: PretextKind) -> Result<Pretext> {
        Pretext::new(self.objective(kind), self.encoder.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSection {
    pub kinds: Vec<PretextKind>,
    pub seeds: Vec<u64>,
    pub shots: usize,
    /// Share of each domain used for in-domain pre-training, in percent.
    pub pretrain_percent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub modes: Vec<Mode>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Seed for source splits, normalization and pre-training.
    pub base_seed: u64,
    /// Target domains to rotate through; all when absent.
    #[serde(default)]
    pub targets: Option<Vec<usize>>,
    /// Re-run pre-training for every seed instead of once per target.
    #[serde(default)]
    pub pretrain_per_seed: bool,
    pub shift: ShiftSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub preset: Preset,
    pub data: DataSection,
    pub pretext: PretextSection,
    pub meta: MetaHyper,
    pub replay: ReplayConfig,
    pub finetune: FinetuneConfig,
    pub sweep: SweepSection,
}

fn preset_value(preset: Preset) -> Value {
    let desk = preset == Preset::DeskScale;
    let plain = if desk {
        PlainHyper { epochs: 30, batch_size: 64, lr: 1e-3, weight_decay: 0.0 }
    } else {
        PlainHyper { epochs: 100, batch_size: 128, lr: 1e-3, weight_decay: 0.0 }
    };
    let base = PretextConfig::new(PretextKind::SimClr);
    let meta = if desk {
        MetaHyper::desk()
    } else {
        MetaHyper { task_size: 128, epochs: 5000, val_every: 50, ..MetaHyper::desk() }
    };
    let plan = ExperimentPlan {
        preset,
        data: DataSection { path: None, synth: Some(SynthSpec::desk()), synth_seed: 0, min_domain_windows: if desk { 0 } else { 500 } },
        pretext: PretextSection {
            kind: base.kind,
            tau: None,
            horizon: base.horizon,
            frame_len: base.frame_len,
            pipeline: base.pipeline,
            kinds: base.kinds,
            apply_prob: base.apply_prob,
            proj_dim: base.proj_dim,
            encoder: EncoderConfig::default(),
            plain,
        },
        meta: MetaHyper { outer: OuterOptimizer::Adam, ..meta },
        replay: ReplayConfig::default(),
        finetune: FinetuneConfig::default(),
        sweep: SweepSection {
            modes: Mode::ALL.to_vec(),
            shots: vec![1, 2, 5, 10],
            seeds: (0..5).collect(),
            base_seed: 0,
            targets: None,
            pretrain_per_seed: false,
            shift: ShiftSection { kinds: PretextKind::ALL.to_vec(), seeds: (0..3).collect(), shots: 5, pretrain_percent: 70 },
        },
    };
    serde_json::to_value(plan).expect("plans serialize")
}

/// Objects merge key by key; anything else in `over` replaces `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if v.is_object() && slot.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentPlan {
    pub fn preset(preset: Preset) -> Self {
        serde_json::from_value(preset_value(preset)).expect("presets are valid plans")
    }

    /// Overlays `value` on its `preset` (default `desk_scale`). Unknown keys
    /// anywhere are errors.
    pub fn from_value(value: Value) -> Result<Self> {
        let plan = Self::resolve(value)?;
        plan.validate()?;
        Ok(plan)
    }

    fn resolve(value: Value) -> Result<Self> {
        if !value.is_object() {
            return Err(config_err("plan must be a JSON object"));
        }
        let preset: Preset = match value.get("preset") {
            Some(p) => serde_json::from_value(p.clone())?,
            None => Preset::DeskScale,
        };
        let mut full = preset_value(preset);
        merge(&mut full, value);
        Ok(serde_json::from_value(full)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    /// Like [`Self::from_json`]; a relative dataset path is taken relative
    /// to the plan file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut plan = Self::resolve(serde_json::from_str(&std::fs::read_to_string(path)?)?)?;
        if let (Some(p), Some(dir)) = (&plan.data.path, path.parent()) {
            if p.is_relative() {
                plan.data.path = Some(dir.join(p));
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.path.is_none() && self.data.synth.is_none() {
            return Err(config_err("data needs a `path` or a `synth` spec"));
        }
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(config_err(format!("dataset file {} does not exist", p.display())));
            }
        }
        let s = &self.sweep;
        if s.shots.is_empty() || s.seeds.is_empty() || s.modes.is_empty() {
            return Err(config_err("sweep needs at least one shot count, seed and mode"));
        }
        if s.shift.kinds.is_empty() || s.shift.seeds.is_empty() || !(1..100).contains(&s.shift.pretrain_percent) {
            return Err(config_err("shift study needs kinds, seeds and a pre-training share in 1..100"));
        }
        self.pretext.pretext()?;
        self.pretext.plain.validate()?;
        self.meta.validate()
    }

    /// Canonical JSON of the resolved plan.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("plans serialize")
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match (&self.data.path, &self.data.synth) {
            (Some(p), _) if p.extension().is_some_and(|e| e == "csv") => data::read_csv(p)?,
            (Some(p), _) => data::read_dataset(p)?,
            (None, Some(spec)) => data::synth_generate(spec, self.data.synth_seed)?,
            (None, None) => return Err(config_err("data needs a `path` or a `synth` spec")),
        };
        if self.data.min_domain_windows > 0 {
            data::exclude_small_domains(&ds, self.data.min_domain_windows)
        } else {
            Ok(ds)
        }
    }
}

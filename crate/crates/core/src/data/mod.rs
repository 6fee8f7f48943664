//! Windows, datasets, normalization, splits and the synthetic generator.

mod io;
mod split;
mod synth;

pub use io::{read_csv, read_dataset, write_dataset};
pub use split::{make_split, source_split, stratified_holdout, target_split, SourceSplit, SplitPlan, TargetSplit};
pub use synth::{generate as synth_generate, DomainTransform, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const WINDOW: usize = 256;
pub const OVERLAP: usize = 128;

/// One fixed-length multi-channel segment, `[channels, timesteps]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub values: Tensor,
    pub label: Option<usize>,
    pub domain: usize,
}

impl Window {
    pub fn new(values: Tensor, label: Option<usize>, domain: usize) -> Self {
        Window { values, label, domain }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainId {
    pub id: usize,
    pub tag: String,
}

/// An immutable collection of windows sharing one shape.
///
/// Domain ids are dense, `0..domains.len()`; class ids lie in `0..n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub windows: Vec<Window>,
    pub channels: usize,
    pub timesteps: usize,
    pub domains: Vec<DomainId>,
    pub n_classes: usize,
}

impl Dataset {
    /// Validates shapes, domain density and label range.
    pub fn new(windows: Vec<Window>, channels: usize, timesteps: usize, domains: Vec<DomainId>, n_classes: usize) -> Result<Self> {
        for (i, d) in domains.iter().enumerate() {
            if d.id != i {
                return Err(data_err(format!("domain ids must be dense; position {i} holds id {}", d.id)));
            }
        }
        for (i, w) in windows.iter().enumerate() {
            if w.values.shape() != [channels, timesteps] {
                return Err(data_err(format!("window {i} has shape {:?}, expected [{channels}, {timesteps}]", w.values.shape())));
            }
            if w.domain >= domains.len() {
                return Err(data_err(format!("window {i} has domain {} of {}", w.domain, domains.len())));
            }
            if let Some(l) = w.label {
                if l >= n_classes {
                    return Err(data_err(format!("window {i} has label {l} of {n_classes} classes")));
                }
            }
        }
        Ok(Dataset { windows, channels, timesteps, domains, n_classes })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.domains.len()];
        for w in &self.windows {
            counts[w.domain] += 1;
        }
        counts
    }

    /// Clones the windows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Vec<Window> {
        indices.iter().map(|&i| self.windows[i].clone()).collect()
    }

    /// The same dataset with every window passed through `stats`.
    pub fn normalized_with(&self, stats: &NormStats) -> Result<Dataset> {
        let windows = self
            .windows
            .iter()
            .map(|w| Ok(Window::new(stats.apply(&w.values)?, w.label, w.domain)))
            .collect::<Result<_>>()?;
        Ok(Dataset { windows, ..self.clone_header() })
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            windows: Vec::new(),
            channels: self.channels,
            timesteps: self.timesteps,
            domains: self.domains.clone(),
            n_classes: self.n_classes,
        }
    }
}

/// Cuts `series` (`[channels, T]`) into windows of `window` samples starting
/// every `window - overlap` samples. The trailing remainder is dropped.
pub fn windowize(series: &Tensor, window: usize, overlap: usize, label: Option<usize>, domain: usize) -> Result<Vec<Window>> {
    let &[channels, t] = series.shape() else {
        return Err(data_err(format!("windowize expects [channels, T], got {:?}", series.shape())));
    };
    if window == 0 || overlap >= window {
        return Err(data_err(format!("invalid window {window} with overlap {overlap}")));
    }
    if t < window {
        return Err(data_err(format!("series of length {t} is shorter than one window of {window}")));
    }
    let hop = window - overlap;
    let count = (t - window) / hop + 1;
    let data = series.data();
    let windows = (0..count)
        .map(|k| {
            let start = k * hop;
            let values = Tensor::from_fn(&[channels, window], |i| data[(i / window) * t + start + i % window]);
            Window::new(values, label, domain)
        })
        .collect();
    Ok(windows)
}

/// Per-channel affine map sending `lo` to -1 and `hi` to +1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

impl NormStats {
    /// Channel-wise extrema over every value of every window.
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a Tensor>) -> Result<NormStats> {
        let mut lo: Vec<f32> = Vec::new();
        let mut hi: Vec<f32> = Vec::new();
        for values in windows {
            let &[channels, t] = values.shape() else {
                return Err(data_err(format!("expected [channels, T] windows, got {:?}", values.shape())));
            };
            if lo.is_empty() {
                lo = vec![f32::INFINITY; channels];
                hi = vec![f32::NEG_INFINITY; channels];
            } else if lo.len() != channels {
                return Err(data_err("windows disagree on channel count"));
            }
            for (c, row) in values.data().chunks(t).enumerate() {
                for &v in row {
                    if !v.is_finite() {
                        return Err(data_err("cannot normalize non-finite values"));
                    }
                    lo[c] = lo[c].min(v);
                    hi[c] = hi[c].max(v);
                }
            }
        }
        if lo.is_empty() {
            return Err(data_err("cannot fit normalization on an empty dataset"));
        }
        Ok(NormStats { lo, hi })
    }

    /// Maps into [-1, 1]. Held-out values outside the fitted range are
    /// clamped; constant channels map to 0.
    pub fn apply(&self, values: &Tensor) -> Result<Tensor> {
        let &[channels, t] = values.shape() else {
            return Err(data_err(format!("expected [channels, T], got {:?}", values.shape())));
        };
        if channels != self.lo.len() {
            return Err(data_err(format!("normalization fitted for {} channels, window has {channels}", self.lo.len())));
        }
        let data = values.data();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(data_err("cannot normalize non-finite values"));
        }
        let out = Tensor::from_fn(&[channels, t], |i| {
            let c = i / t;
            let (lo, hi) = (self.lo[c], self.hi[c]);
            if hi > lo {
                (2.0 * (data[i] - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        });
        Ok(out)
    }
}

/// Fits [`NormStats`] on the whole dataset and applies them.
pub fn normalize(dataset: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = NormStats::fit(dataset.windows.iter().map(|w| &w.values))?;
    Ok((dataset.normalized_with(&stats)?, stats))
}

/// Drops domains with fewer than `min_count` windows and re-numbers the
/// survivors densely, keeping their tags and relative order.
pub fn exclude_small_domains(dataset: &Dataset, min_count: usize) -> Result<Dataset> {
    let counts = dataset.domain_counts();
    let mut remap = vec![None; counts.len()];
    let mut domains = Vec::new();
    for (old, &n) in counts.iter().enumerate() {
        if n >= min_count && n > 0 {
            remap[old] = Some(domains.len());
            domains.push(DomainId { id: domains.len(), tag: dataset.domains[old].tag.clone() });
        }
    }
    if domains.is_empty() {
        return Err(data_err(format!("every domain has fewer than {min_count} windows")));
    }
    let windows = dataset
        .windows
        .iter()
        .filter_map(|w| remap[w.domain].map(|d| Window::new(w.values.clone(), w.label, d)))
        .collect();
    Ok(Dataset { windows, domains, ..dataset.clone_header() })
}

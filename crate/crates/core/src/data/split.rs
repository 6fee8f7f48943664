use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{data_err, Result};
use crate::rng::{self, Rng};

/// Source pool fraction, and the train share of that pool.
const POOL_PERCENT: usize = 70;
const TRAIN_PERCENT: usize = 90;

/// Disjoint index sets into one dataset for a single held-out target domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub target_domain: usize,
    pub shots: usize,
    pub seed: u64,
    pub pretrain_train: Vec<usize>,
    pub pretrain_val: Vec<usize>,
    pub finetune_shots: Vec<usize>,
    pub target_val: Vec<usize>,
    pub target_test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetSplit {
    pub shots: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn check_target(dataset: &Dataset, target: usize) -> Result<()> {
    if target >= dataset.n_domains() {
        return Err(data_err(format!("target domain {target} does not exist ({} domains)", dataset.n_domains())));
    }
    Ok(())
}

/// Shuffles the non-target windows, keeps 70% as the pre-training pool and
/// splits that pool 90/10 into train and validation.
pub fn source_split(dataset: &Dataset, target: usize, seed: u64) -> Result<SourceSplit> {
    check_target(dataset, target)?;
    let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.windows[i].domain != target).collect();
    if idx.is_empty() {
        return Err(data_err(format!("no source windows outside target domain {target}")));
    }
    idx.shuffle(&mut rng::stream(seed, &[0x5a, 1]));
    let pool = idx.len() * POOL_PERCENT / 100;
    let train = pool * TRAIN_PERCENT / 100;
    Ok(SourceSplit { train: idx[..train].to_vec(), val: idx[train..pool].to_vec() })
}

/// Draws `shots` labeled windows per class present in the target domain,
/// then halves the labeled remainder into validation and test.
/// Unlabeled target windows cannot be scored and are left out.
pub fn target_split(dataset: &Dataset, target: usize, shots: usize, seed: u64) -> Result<TargetSplit> {
    check_target(dataset, target)?;
    let candidates: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.windows[i].domain == target).collect();
    stratified_holdout(dataset, &candidates, shots, &mut rng::stream(seed, &[0x5a, 2]))
        .map_err(|e| data_err(format!("target domain {target}: {e}")))
}

/// `shots` labeled windows per class among `candidates`, the labeled rest
/// split evenly into validation and test.
pub fn stratified_holdout(dataset: &Dataset, candidates: &[usize], shots: usize, rng: &mut Rng) -> Result<TargetSplit> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in candidates {
        if let Some(l) = dataset.windows[i].label {
            by_class.entry(l).or_default().push(i);
        }
    }
    if by_class.is_empty() {
        return Err(data_err("no labeled windows"));
    }
    let mut picked = Vec::new();
    let mut rest = Vec::new();
    for (class, mut members) in by_class {
        if members.len() < shots {
            return Err(data_err(format!("{} windows of class {class}, fewer than {shots} shots", members.len())));
        }
        members.shuffle(rng);
        picked.extend_from_slice(&members[..shots]);
        rest.extend_from_slice(&members[shots..]);
    }
    if rest.len() < 2 {
        return Err(data_err(format!("only {} windows left for validation and test", rest.len())));
    }
    rest.shuffle(rng);
    let half = rest.len() / 2;
    let test = rest.split_off(half);
    Ok(TargetSplit { shots: picked, val: rest, test })
}

/// Full split for one target domain, deterministic in `seed`.
pub fn make_split(dataset: &Dataset, target: usize, shots: usize, seed: u64) -> Result<SplitPlan> {
    let source = source_split(dataset, target, seed)?;
    let t = target_split(dataset, target, shots, seed)?;
    Ok(SplitPlan {
        target_domain: target,
        shots,
        seed,
        pretrain_train: source.train,
        pretrain_val: source.val,
        finetune_shots: t.shots,
        target_val: t.val,
        target_test: t.test,
    })
}

impl SplitPlan {
    pub fn source_pool(&self) -> Vec<usize> {
        self.pretrain_train.iter().chain(&self.pretrain_val).copied().collect()
    }

    /// Checks disjointness, index range and that no pre-training index comes
    /// from the target domain.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let mut seen = vec![false; dataset.len()];
        let sets = [&self.pretrain_train, &self.pretrain_val, &self.finetune_shots, &self.target_val, &self.target_test];
        for set in sets {
            for &i in set.iter() {
                if i >= dataset.len() {
                    return Err(data_err(format!("split index {i} out of range for {} windows", dataset.len())));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(data_err(format!("split index {i} appears in more than one set")));
                }
            }
        }
        if let Some(&i) = self.source_pool().iter().find(|&&i| dataset.windows[i].domain == self.target_domain) {
            return Err(data_err(format!("pre-training index {i} belongs to target domain {}", self.target_domain)));
        }
        Ok(())
    }
}

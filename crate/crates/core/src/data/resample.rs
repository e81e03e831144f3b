//! Class balancing by random undersampling and oversampling.

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Task};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampler {
    #[default]
    None,
    Under,
    Over,
}

impl std::str::FromStr for Resampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "imbalanced" => Ok(Resampler::None),
            "under" | "undersample" | "undersampling" => Ok(Resampler::Under),
            "over" | "oversample" | "oversampling" => Ok(Resampler::Over),
            _ => Err(Error::Config(format!("unknown resampler {s:?}"))),
        }
    }
}

impl Resampler {
    pub fn apply(self, ds: &Dataset, task: Task, rng: &mut Rng) -> Result<Dataset> {
        match self {
            Resampler::None => Ok(ds.clone()),
            Resampler::Under => undersample(ds, task, rng),
            Resampler::Over => oversample(ds, task, rng),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Resampler::None => "none",
            Resampler::Under => "under",
            Resampler::Over => "over",
        }
    }
}

fn groups(ds: &Dataset, task: Task) -> Result<Vec<Vec<usize>>> {
    let groups = ds.by_class(task);
    if let Some(c) = groups.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(task.labels()[c].to_string()));
    }
    Ok(groups)
}

/// Every class reduced to the smallest class count, without replacement.
pub fn undersample(ds: &Dataset, task: Task, rng: &mut Rng) -> Result<Dataset> {
    let groups = groups(ds, task)?;
    let target = groups.iter().map(Vec::len).min().unwrap_or(0);
    let mut rows = Vec::with_capacity(target * groups.len());
    for g in &groups {
        rows.extend(rng.sample_indices(g.len(), target).into_iter().map(|i| g[i]));
    }
    rng.shuffle(&mut rows);
    Ok(ds.select(&rows))
}

/// Every class padded to the largest class count by duplicating random
/// members with replacement; all originals are kept.
pub fn oversample(ds: &Dataset, task: Task, rng: &mut Rng) -> Result<Dataset> {
    let groups = groups(ds, task)?;
    let target = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(target * groups.len());
    for g in &groups {
        rows.extend_from_slice(g);
        rows.extend((g.len()..target).map(|_| g[rng.below(g.len())]));
    }
    rng.shuffle(&mut rows);
    Ok(ds.select(&rows))
}

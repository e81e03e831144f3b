//! Stratified train/val/test splits, the two resampling protocols, k-fold
//! folds and the leakage auditor.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Task};
use super::resample::Resampler;
use crate::error::{Error, Result};
use crate::rng::Rng;

const SPLIT_STREAM: u64 = 1;
const RESAMPLE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Ratios {
    fn default() -> Self {
        Ratios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl Ratios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Ratios { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::Config(format!("split ratios must be positive: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split ratios must sum to 1: {parts:?}")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

impl std::str::FromStr for Ratios {
    type Err = Error;

    /// Accepts `80/10/10`, `0.8,0.1,0.1` and similar.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(['/', ',', ':'])
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("cannot parse ratios {s:?}")))?;
        let [a, b, c] = parts[..] else {
            return Err(Error::Config(format!("expected three ratios, got {s:?}")));
        };
        let total = a + b + c;
        Ratios::new(a / total, b / total, c / total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Technique {
    /// Resample the whole dataset, then split.
    One,
    /// Split, then resample the training portion only.
    Two,
}

impl std::str::FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "one" | "technique1" => Ok(Technique::One),
            "2" | "two" | "technique2" => Ok(Technique::Two),
            _ => Err(Error::Config(format!("unknown technique {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task: Task,
    pub technique: Option<Technique>,
    pub resampler: Resampler,
    pub ratios: Ratios,
    pub seed: u64,
    /// Duplicates of one source row may sit in more than one split.
    pub contamination_possible: bool,
}

/// Id lists per split. Ids repeat where resampling duplicated rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAudit {
    /// Distinct ids shared by each pair of splits.
    pub train_val: usize,
    pub train_test: usize,
    pub val_test: usize,
    /// Test rows whose id also occurs in train.
    pub test_rows_seen_in_train: usize,
}

impl SplitAudit {
    pub fn cross_split_duplicates(&self) -> usize {
        self.train_val + self.train_test + self.val_test
    }
}

impl Split {
    pub fn audit(&self) -> SplitAudit {
        let set = |v: &[u64]| v.iter().copied().collect::<HashSet<u64>>();
        let (tr, va, te) = (set(&self.train), set(&self.val), set(&self.test));
        SplitAudit {
            train_val: tr.intersection(&va).count(),
            train_test: tr.intersection(&te).count(),
            val_test: va.intersection(&te).count(),
            test_rows_seen_in_train: self.test.iter().filter(|id| tr.contains(id)).count(),
        }
    }

    pub fn materialize(&self, source: &Dataset) -> Result<(Dataset, Dataset, Dataset)> {
        Ok((
            source.by_ids(&self.train)?,
            source.by_ids(&self.val)?,
            source.by_ids(&self.test)?,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Integer allocation of `n` items to parts proportional to `weights`
/// (largest remainder). Ties among equal remainders go to the part that
/// comes first counting from `offset`, which callers rotate per class so
/// rounding does not always favour the same split.
fn apportion(n: usize, weights: &[f64], offset: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let mut left = n - out.iter().sum::<usize>();
    let k = weights.len();
    let mut order: Vec<usize> = (0..k).collect();
    let frac = |j: usize| ((exact[j] - out[j] as f64) * 1e6).round() as i64;
    order.sort_by_key(|&j| (-frac(j), (j + offset) % k));
    for &j in &order {
        if left == 0 {
            break;
        }
        out[j] += 1;
        left -= 1;
    }
    out
}

/// Row positions of each split, stratified by class.
fn split_rows(ds: &Dataset, task: Task, ratios: &Ratios, rng: &mut Rng) -> Result<[Vec<usize>; 3]> {
    ratios.validate()?;
    let weights = ratios.as_array();
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut offset = 0;
    for (c, mut rows) in ds.by_class(task).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < weights.len() {
            return Err(Error::Data(format!(
                "class {} has {} examples, fewer than {} splits",
                task.labels()[c],
                rows.len(),
                weights.len()
            )));
        }
        rng.shuffle(&mut rows);
        let sizes = apportion(rows.len(), &weights, offset);
        offset += 1;
        let mut it = rows.into_iter();
        for (part, n) in parts.iter_mut().zip(sizes) {
            part.extend(it.by_ref().take(n));
        }
    }
    for part in &mut parts {
        rng.shuffle(part);
    }
    Ok(parts)
}

fn ids_of(ds: &Dataset, rows: &[usize]) -> Vec<u64> {
    rows.iter().map(|&i| ds.examples[i].id).collect()
}

pub fn stratified_split(ds: &Dataset, task: Task, ratios: &Ratios, rng: &mut Rng) -> Result<Split> {
    let seed = rng.seed();
    let [tr, va, te] = split_rows(ds, task, ratios, rng)?;
    Ok(Split {
        train: ids_of(ds, &tr),
        val: ids_of(ds, &va),
        test: ids_of(ds, &te),
        provenance: Provenance {
            task,
            technique: None,
            resampler: Resampler::None,
            ratios: *ratios,
            seed,
            contamination_possible: false,
        },
    })
}

/// Resample everything, then split. With oversampling, copies of one row can
/// land in train and test; this is flagged rather than prevented.
pub fn technique1(
    ds: &Dataset,
    task: Task,
    resampler: Resampler,
    ratios: &Ratios,
    rng: &Rng,
) -> Result<Split> {
    let pool = resampler.apply(ds, task, &mut rng.derive(RESAMPLE_STREAM))?;
    let mut split = stratified_split(&pool, task, ratios, &mut rng.derive(SPLIT_STREAM))?;
    split.provenance.technique = Some(Technique::One);
    split.provenance.resampler = resampler;
    split.provenance.seed = rng.seed();
    split.provenance.contamination_possible = resampler == Resampler::Over;
    Ok(split)
}

/// Split the raw data, then resample the training rows only. Val and test are
/// exactly the unresampled split for the same seed.
pub fn technique2(
    ds: &Dataset,
    task: Task,
    resampler: Resampler,
    ratios: &Ratios,
    rng: &Rng,
) -> Result<Split> {
    let mut split = stratified_split(ds, task, ratios, &mut rng.derive(SPLIT_STREAM))?;
    let train = ds.by_ids(&split.train)?;
    let resampled = resampler.apply(&train, task, &mut rng.derive(RESAMPLE_STREAM))?;
    split.train = resampled.ids();
    split.provenance.technique = Some(Technique::Two);
    split.provenance.resampler = resampler;
    split.provenance.seed = rng.seed();
    Ok(split)
}

pub fn run_technique(
    technique: Technique,
    ds: &Dataset,
    task: Task,
    resampler: Resampler,
    ratios: &Ratios,
    rng: &Rng,
) -> Result<Split> {
    match technique {
        Technique::One => technique1(ds, task, resampler, ratios, rng),
        Technique::Two => technique2(ds, task, resampler, ratios, rng),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

/// `k` stratified folds over row positions of `ds` (which may already be
/// resampled). Fold `i` tests on partition `i`; `val_fraction` of each
/// remaining class is carved off as validation.
pub fn kfold(ds: &Dataset, task: Task, k: usize, val_fraction: f64, rng: &mut Rng) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction must be in [0, 1), got {val_fraction}")));
    }
    let classes = ds.by_class(task);
    // assignment[c][f] = rows of class c in partition f
    let mut assignment: Vec<Vec<Vec<usize>>> = Vec::with_capacity(classes.len());
    let mut offset = 0;
    for (c, mut rows) in classes.into_iter().enumerate() {
        if rows.is_empty() {
            assignment.push(vec![Vec::new(); k]);
            continue;
        }
        if rows.len() < k {
            return Err(Error::Data(format!(
                "class {} has {} examples, fewer than k = {k}",
                task.labels()[c],
                rows.len()
            )));
        }
        rng.shuffle(&mut rows);
        let mut parts = vec![Vec::new(); k];
        for (j, r) in rows.iter().enumerate() {
            parts[(j + offset) % k].push(*r);
        }
        offset = (offset + rows.len()) % k;
        assignment.push(parts);
    }

    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        let mut test = Vec::new();
        let mut val = Vec::new();
        let mut train = Vec::new();
        for (c, parts) in assignment.iter().enumerate() {
            test.extend_from_slice(&parts[i]);
            let mut rest: Vec<usize> = (0..k).filter(|&f| f != i).flat_map(|f| parts[f].iter().copied()).collect();
            rng.shuffle(&mut rest);
            let sizes = apportion(rest.len(), &[val_fraction, 1.0 - val_fraction], c + i);
            let nval = if val_fraction > 0.0 { sizes[0] } else { 0 };
            val.extend_from_slice(&rest[..nval]);
            train.extend_from_slice(&rest[nval..]);
        }
        for part in [&mut train, &mut val, &mut test] {
            rng.shuffle(part);
        }
        folds.push(Fold {
            index: i,
            train: ids_of(ds, &train),
            val: ids_of(ds, &val),
            test: ids_of(ds, &test),
        });
    }
    Ok(folds)
}

/// Distinct ids appearing in more than one test fold.
pub fn fold_test_overlap(folds: &[Fold]) -> usize {
    let mut seen = BTreeSet::new();
    let mut shared = BTreeSet::new();
    for f in folds {
        let ids: BTreeSet<u64> = f.test.iter().copied().collect();
        for id in ids {
            if !seen.insert(id) {
                shared.insert(id);
            }
        }
    }
    shared.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::Example;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn toy(counts: &[usize]) -> Dataset {
        let mut ex = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let id = ex.len() as u64;
                ex.push(Example { id, text: format!("w{id} x"), aspect: c, polarity: c % 3 });
            }
        }
        Dataset::new(ex)
    }

    fn sorted(mut v: Vec<u64>) -> Vec<u64> {
        v.sort_unstable();
        v
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(5, &[0.8, 0.1, 0.1], 0), vec![4, 1, 0]);
        assert_eq!(apportion(5, &[0.8, 0.1, 0.1], 1), vec![4, 0, 1]);
        assert_eq!(apportion(10, &[0.8, 0.1, 0.1], 0), vec![8, 1, 1]);
        assert_eq!(apportion(7, &[1.0, 1.0], 3), vec![3, 4]);
    }

    #[test]
    fn ten_items_two_classes() {
        let ds = toy(&[5, 5]);
        let s = stratified_split(&ds, Task::Aspect, &Ratios::default(), &mut Rng::new(3)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(sorted([s.train.clone(), s.val.clone(), s.test.clone()].concat()), ds.ids());
        let again = stratified_split(&ds, Task::Aspect, &Ratios::default(), &mut Rng::new(3)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn small_class_is_an_error() {
        let ds = toy(&[5, 2]);
        assert!(stratified_split(&ds, Task::Aspect, &Ratios::default(), &mut Rng::new(0)).is_err());
        assert!(kfold(&toy(&[5, 4]), Task::Aspect, 5, 0.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn ratio_parsing() {
        let r: Ratios = "80/10/10".parse().unwrap();
        assert!((r.train - 0.8).abs() < 1e-12);
        assert!("1,2".parse::<Ratios>().is_err());
        assert!("1,-1,1".parse::<Ratios>().is_err());
    }

    #[test]
    fn technique2_without_resampler_is_plain_split() {
        let ds = toy(&[20, 12, 9, 7]);
        let rng = Rng::new(5);
        let t2 = technique2(&ds, Task::Aspect, Resampler::None, &Ratios::default(), &rng).unwrap();
        let plain = stratified_split(&ds, Task::Aspect, &Ratios::default(), &mut rng.derive(SPLIT_STREAM)).unwrap();
        assert_eq!((t2.train, t2.val, t2.test), (plain.train, plain.val, plain.test));
    }

    #[test]
    fn technique1_oversampling_can_leak() {
        // Classes 1..3 each have a single source row duplicated nine times, so copies
        // must be spread over every split.
        let ds = toy(&[10, 1, 1, 1]);
        let s = technique1(&ds, Task::Aspect, Resampler::Over, &Ratios::default(), &Rng::new(0)).unwrap();
        assert!(s.provenance.contamination_possible);
        assert!(s.audit().cross_split_duplicates() >= 1);
        assert!(s.audit().test_rows_seen_in_train >= 1);
    }

    #[test]
    fn kfold_ten_items() {
        let ds = toy(&[5, 5]);
        let folds = kfold(&ds, Task::Aspect, 5, 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(folds.len(), 5);
        assert!(folds.iter().all(|f| f.test.len() == 2 && f.val.is_empty() && f.train.len() == 8));
        assert_eq!(fold_test_overlap(&folds), 0);
        let all: Vec<u64> = folds.iter().flat_map(|f| f.test.clone()).collect();
        assert_eq!(sorted(all), ds.ids());
    }

    #[test]
    fn manifest_roundtrip() {
        let ds = toy(&[6, 6, 6, 6]);
        let s = technique2(&ds, Task::Aspect, Resampler::Over, &Ratios::default(), &Rng::new(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        s.save(&p).unwrap();
        assert_eq!(Split::load(&p).unwrap(), s);
    }

    proptest! {
        #[test]
        fn split_partitions_and_stratifies(counts in prop::collection::vec(3usize..40, 2..5), seed in any::<u64>()) {
            let ds = toy(&counts);
            let r = Ratios::default();
            let s = stratified_split(&ds, Task::Aspect, &r, &mut Rng::new(seed)).unwrap();
            let all = sorted([s.train.clone(), s.val.clone(), s.test.clone()].concat());
            prop_assert_eq!(all, ds.ids());
            for (part, w) in [(&s.train, r.train), (&s.val, r.val), (&s.test, r.test)] {
                let sub = ds.by_ids(part).unwrap().class_counts(Task::Aspect);
                for (c, &n) in counts.iter().enumerate() {
                    prop_assert!((sub.counts[c] as f64 - n as f64 * w).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn technique2_keeps_eval_clean(counts in prop::collection::vec(3usize..30, 4), seed in any::<u64>(), over in any::<bool>()) {
            let ds = toy(&counts);
            let rs = if over { Resampler::Over } else { Resampler::Under };
            let rng = Rng::new(seed);
            let t2 = technique2(&ds, Task::Aspect, rs, &Ratios::default(), &rng).unwrap();
            let plain = technique2(&ds, Task::Aspect, Resampler::None, &Ratios::default(), &rng).unwrap();
            prop_assert_eq!(&t2.val, &plain.val);
            prop_assert_eq!(&t2.test, &plain.test);
            let a = t2.audit();
            prop_assert_eq!(a.cross_split_duplicates(), 0);
            let pre: std::collections::HashSet<u64> = plain.train.iter().copied().collect();
            prop_assert!(t2.train.iter().all(|id| pre.contains(id)));
        }

        #[test]
        fn kfold_partitions(counts in prop::collection::vec(5usize..30, 2..5), k in 2usize..6, seed in any::<u64>()) {
            let ds = toy(&counts);
            let folds = kfold(&ds, Task::Aspect, k, 0.125, &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(fold_test_overlap(&folds), 0);
            let all = sorted(folds.iter().flat_map(|f| f.test.clone()).collect());
            prop_assert_eq!(all, ds.ids());
            for f in &folds {
                let sub = ds.by_ids(&f.test).unwrap().class_counts(Task::Aspect);
                for (c, &n) in counts.iter().enumerate() {
                    prop_assert!((sub.counts[c] as f64 - n as f64 / k as f64).abs() <= 1.0);
                }
                let union = sorted([f.train.clone(), f.val.clone(), f.test.clone()].concat());
                prop_assert_eq!(union, ds.ids());
            }
        }
    }
}

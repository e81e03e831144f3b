//! Deterministic synthetic headline corpora for tests and desk runs.

use super::dataset::{Dataset, Example, Task};
use crate::error::{Error, Result};
use crate::rng::Rng;

const FILLER: [&str; 12] = [
    "ঢাকা", "নতুন", "খবর", "দেশ", "মানুষ", "শহর", "সকাল", "রাত", "উন্নয়ন", "জেলা", "বিকেল", "প্রকাশ",
];

const ASPECT_WORDS: [[&str; 4]; 4] = [
    ["আবহাওয়া", "বাজার", "প্রযুক্তি", "শিক্ষা"],
    ["নির্বাচন", "সংসদ", "মন্ত্রী", "ভোট"],
    ["মসজিদ", "মন্দির", "পূজা", "ঈদ"],
    ["ক্রিকেট", "ফুটবল", "গোল", "ম্যাচ"],
];

const POLARITY_WORDS: [[&str; 4]; 3] = [
    ["দুর্ঘটনা", "মৃত্যু", "হামলা", "ক্ষতি"],
    ["জয়", "সাফল্য", "উৎসব", "পুরস্কার"],
    ["বৈঠক", "ঘোষণা", "সভা", "প্রতিবেদন"],
];

fn headline(aspect: usize, polarity: usize, rng: &mut Rng) -> String {
    let mut words = vec![
        ASPECT_WORDS[aspect][rng.below(4)],
        POLARITY_WORDS[polarity][rng.below(4)],
    ];
    for _ in 0..1 + rng.below(3) {
        words.push(FILLER[rng.below(FILLER.len())]);
    }
    rng.shuffle(&mut words);
    words.join(" ")
}

/// Corpus whose class marginals match the given counts exactly. Labels are
/// paired by filling the joint table row by row.
pub fn with_counts(aspect: &[usize], polarity: &[usize], rng: &mut Rng) -> Result<Dataset> {
    if aspect.len() != Task::Aspect.num_classes() || polarity.len() != Task::Polarity.num_classes() {
        return Err(Error::Config("count vectors must match the label sets".into()));
    }
    let total: usize = aspect.iter().sum();
    if total != polarity.iter().sum::<usize>() {
        return Err(Error::Config("aspect and polarity counts must have the same total".into()));
    }
    let mut pol_left = polarity.to_vec();
    let mut p = 0;
    let mut pairs = Vec::with_capacity(total);
    for (a, &n) in aspect.iter().enumerate() {
        let mut need = n;
        while need > 0 {
            while pol_left[p] == 0 {
                p += 1;
            }
            let take = need.min(pol_left[p]);
            pairs.extend(std::iter::repeat((a, p)).take(take));
            pol_left[p] -= take;
            need -= take;
        }
    }
    rng.shuffle(&mut pairs);
    let examples = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (a, p))| Example {
            id: i as u64,
            text: headline(a, p, rng),
            aspect: a,
            polarity: p,
        })
        .collect();
    Ok(Dataset::new(examples))
}

/// `per_class` examples of every class of `task`; each headline carries a
/// keyword of its class, so the task is separable. The other label is random.
pub fn separable(task: Task, per_class: usize, rng: &mut Rng) -> Dataset {
    let mut examples = Vec::new();
    for c in 0..task.num_classes() {
        for _ in 0..per_class {
            let (aspect, polarity) = match task {
                Task::Aspect => (c, rng.below(3)),
                Task::Polarity => (rng.below(4), c),
            };
            examples.push((aspect, polarity));
        }
    }
    rng.shuffle(&mut examples);
    let examples = examples
        .into_iter()
        .enumerate()
        .map(|(i, (aspect, polarity))| Example {
            id: i as u64,
            text: headline(aspect, polarity, rng),
            aspect,
            polarity,
        })
        .collect();
    Dataset::new(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginals_are_exact() {
        let ds = with_counts(&[5, 4, 2, 1], &[6, 3, 3], &mut Rng::new(0)).unwrap();
        assert_eq!(ds.class_counts(Task::Aspect).counts, vec![5, 4, 2, 1]);
        assert_eq!(ds.class_counts(Task::Polarity).counts, vec![6, 3, 3]);
        assert!(with_counts(&[1, 1, 1, 1], &[1, 1, 1], &mut Rng::new(0)).is_err());
    }

    #[test]
    fn separable_is_balanced_and_seeded() {
        let a = separable(Task::Aspect, 8, &mut Rng::new(4));
        assert_eq!(a.class_counts(Task::Aspect).counts, vec![8; 4]);
        assert_eq!(a, separable(Task::Aspect, 8, &mut Rng::new(4)));
        assert!(a.examples.iter().all(|e| e.text.split(' ').count() >= 3));
    }
}

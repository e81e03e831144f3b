//! `prepare`: CSV to vocabulary, encoded corpus cache and manifest.

use std::fmt::Write as _;
use std::path::Path;

use hybrid_core::corpus::{PreparedCorpus, RejectionCounts};
use hybrid_core::data::{read_csv, technique2, Dataset, Ratios, Resampler, Task};
use hybrid_core::error::Error;
use hybrid_core::rng::Rng;
use hybrid_core::text::{Normalizer, TextPipeline, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::artifacts::{file_digest, sha256_hex, to_json, write, write_json};
use crate::config::RunConfig;
use crate::error::{CliError, Staged};

pub const VOCAB_FILE: &str = "vocab.json";
pub const CACHE_FILE: &str = "corpus.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Class counts for one data treatment, aspect then polarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub technique: String,
    pub dataset: String,
    pub aspect: Vec<usize>,
    pub polarity: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Digests {
    pub input: String,
    /// Of the settings that shape the cache.
    pub settings: String,
    pub vocab: String,
    pub cache: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub rows: usize,
    pub kept: usize,
    pub rejected: RejectionCounts,
    pub vocab_size: usize,
    /// Computed on all rows read, before preprocessing.
    pub distribution: Vec<DistributionRow>,
    pub digests: Digests,
}

fn settings_digest(cfg: &RunConfig) -> Result<String, CliError> {
    let key = serde_json::json!({
        "columns": cfg.columns,
        "text": cfg.text,
        "ratios": cfg.ratios,
        "seed": cfg.seed,
    });
    Ok(sha256_hex(to_json(&key)?.as_bytes()))
}

/// Whole-corpus counts, then whole-corpus resampling, then training
/// portions resampled after a split.
pub fn distribution(ds: &Dataset, ratios: &Ratios, seed: u64) -> Result<Vec<DistributionRow>, Error> {
    let rng = Rng::new(seed);
    let whole = |r: Resampler, task: Task| -> Result<Vec<usize>, Error> {
        Ok(r.apply(ds, task, &mut rng.derive(1))?.class_counts(task).counts)
    };
    let train_part = |r: Resampler, task: Task| -> Result<Vec<usize>, Error> {
        let split = technique2(ds, task, r, ratios, &rng)?;
        Ok(ds.by_ids(&split.train)?.class_counts(task).counts)
    };
    let row = |technique: &str, dataset: &str, aspect, polarity| DistributionRow {
        technique: technique.into(),
        dataset: dataset.into(),
        aspect,
        polarity,
    };
    Ok(vec![
        row("Technique 1", "Imbalanced", ds.class_counts(Task::Aspect).counts, ds.class_counts(Task::Polarity).counts),
        row("Technique 1", "Undersampling", whole(Resampler::Under, Task::Aspect)?, whole(Resampler::Under, Task::Polarity)?),
        row("Technique 1", "Oversampling", whole(Resampler::Over, Task::Aspect)?, whole(Resampler::Over, Task::Polarity)?),
        row("Technique 2", "Train-Undersampling", train_part(Resampler::Under, Task::Aspect)?, train_part(Resampler::Under, Task::Polarity)?),
        row("Technique 2", "Train-Oversampling", train_part(Resampler::Over, Task::Aspect)?, train_part(Resampler::Over, Task::Polarity)?),
    ])
}

pub fn render_distribution(rows: &[DistributionRow]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<12} {:<20}", "Technique", "Dataset Type");
    for l in Task::Aspect.labels() {
        let _ = write!(out, " {:>9}", capitalise(l));
    }
    out.push_str(" |");
    for l in Task::Polarity.labels() {
        let _ = write!(out, " {:>9}", capitalise(l));
    }
    out.push('\n');
    let mut last = "";
    for r in rows {
        let t = if r.technique == last { "" } else { r.technique.as_str() };
        last = &r.technique;
        let _ = write!(out, "{:<12} {:<20}", t, r.dataset);
        for c in &r.aspect {
            let _ = write!(out, " {c:>9}");
        }
        out.push_str(" |");
        for c in &r.polarity {
            let _ = write!(out, " {c:>9}");
        }
        out.push('\n');
    }
    out
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e)).stage("load prepared corpus")?;
    serde_json::from_str(&text).map_err(Error::from).stage("load prepared corpus")
}

/// The manifest, if the directory already holds artifacts for exactly
/// these inputs and settings.
fn cache_hit(dir: &Path, input: &str, settings: &str) -> Option<Manifest> {
    let m = read_manifest(dir).ok()?;
    let same = m.digests.input == input
        && m.digests.settings == settings
        && file_digest(&dir.join(VOCAB_FILE)).ok()? == m.digests.vocab
        && file_digest(&dir.join(CACHE_FILE)).ok()? == m.digests.cache;
    same.then_some(m)
}

pub fn run(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let data = cfg.data.as_ref().ok_or_else(|| CliError::Usage("prepare needs --data <csv>".into()))?;
    let dir = cfg.prepared_dir();
    let bytes = std::fs::read(data).map_err(|e| Error::io(data, e)).stage("read data")?;
    let input = sha256_hex(&bytes);
    let settings = settings_digest(cfg)?;
    if let Some(m) = cache_hit(&dir, &input, &settings) {
        log::info!("cache hit in {}", dir.display());
        println!("cache hit: {}", dir.display());
        print_summary(&m);
        return Ok(m);
    }

    let raw = read_csv(bytes.as_slice(), &cfg.columns).stage("read data")?;
    let corpus = PreparedCorpus::build(&raw, Normalizer::bangla(), &cfg.text).stage("preprocess")?;
    let vocab_json = corpus.pipeline.vocab.to_json().stage("vocabulary")?;
    let cache = corpus.cache_bytes();
    let manifest = Manifest {
        config: RunConfig { prepared: Some(dir.clone()), ..cfg.clone() },
        rows: raw.len(),
        kept: corpus.len(),
        rejected: corpus.rejected.clone(),
        vocab_size: corpus.pipeline.vocab.len(),
        distribution: distribution(&raw, &cfg.ratios, cfg.seed).stage("class distribution")?,
        digests: Digests {
            input,
            settings,
            vocab: sha256_hex(vocab_json.as_bytes()),
            cache: sha256_hex(&cache),
        },
    };
    write(&dir.join(VOCAB_FILE), &vocab_json)?;
    write(&dir.join(CACHE_FILE), &cache)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    println!("prepared: {}", dir.display());
    print_summary(&manifest);
    Ok(manifest)
}

fn print_summary(m: &Manifest) {
    println!(
        "rows {}  kept {}  rejected {} (too short {}, empty after stopwords {})  vocabulary {}",
        m.rows,
        m.kept,
        m.rejected.total(),
        m.rejected.too_short,
        m.rejected.empty_after_stopwords,
        m.vocab_size
    );
    print!("{}", render_distribution(&m.distribution));
    println!("digest input {}\ndigest vocab {}\ndigest cache {}", m.digests.input, m.digests.vocab, m.digests.cache);
}

/// Reopens a prepared directory, checking the files against the manifest.
pub fn load(dir: &Path) -> Result<(PreparedCorpus, Manifest), CliError> {
    let m = read_manifest(dir)?;
    for (file, want) in [(VOCAB_FILE, &m.digests.vocab), (CACHE_FILE, &m.digests.cache)] {
        if &file_digest(&dir.join(file))? != want {
            return Err(Error::Data(format!("{} does not match its manifest digest", dir.join(file).display())))
                .stage("load prepared corpus");
        }
    }
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE)).stage("load prepared corpus")?;
    let pipeline = TextPipeline { normalizer: Normalizer::bangla(), vocab, max_len: m.config.text.max_len };
    let corpus =
        PreparedCorpus::load_cache(&dir.join(CACHE_FILE), pipeline, m.rejected.clone()).stage("load prepared corpus")?;
    Ok((corpus, m))
}

//! `resample`, `train`, `eval` and `kfold`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hybrid_core::checkpoint::{load_model, save_model};
use hybrid_core::corpus::PreparedCorpus;
use hybrid_core::data::{Split, SplitAudit};
use hybrid_core::error::Error;
use hybrid_core::eval::{
    evaluate_split, make_split, render_table, run_experiment, run_kfold, ExperimentConfig, ExperimentReport,
    KFoldConfig, KFoldReport, MetricsReport, SplitSizes,
};
use hybrid_core::explain::Format;
use hybrid_core::model::HybridModel;
use hybrid_core::text::Vocabulary;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifacts::{create_run_dir, file_digest, to_json, write, write_json};
use crate::config::RunConfig;
use crate::error::{CliError, Staged};
use crate::prepare;

pub const CHECKPOINT_FILE: &str = "model.hybc";

/// The prepared corpus named by `cfg`, with `cfg` updated to the text
/// settings and data source the cache was built from and to the corpus's
/// vocabulary, sequence length and class count.
pub fn open_corpus(cfg: &mut RunConfig) -> Result<PreparedCorpus, CliError> {
    let dir = cfg.prepared_dir();
    let (corpus, manifest) = prepare::load(&dir)?;
    if manifest.config.text != cfg.text {
        log::info!("using the text settings of {}", dir.display());
    }
    cfg.text = manifest.config.text;
    cfg.data = manifest.config.data;
    cfg.columns = manifest.config.columns;
    cfg.prepared = Some(dir);
    cfg.model = corpus.model_config(&cfg.model, cfg.task);
    Ok(corpus)
}

pub fn experiment_config(cfg: &RunConfig) -> ExperimentConfig {
    ExperimentConfig {
        task: cfg.task,
        technique: cfg.technique,
        resampler: cfg.resampler,
        ratios: cfg.ratios,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        seed: cfg.seed,
    }
}

fn log_audit(audit: &SplitAudit) {
    log::info!(
        "split audit: {} duplicate ids across splits (train/val {}, train/test {}, val/test {}), {} test rows seen in train",
        audit.cross_split_duplicates(),
        audit.train_val,
        audit.train_test,
        audit.val_test,
        audit.test_rows_seen_in_train
    );
}

#[derive(Serialize)]
struct ResampleReport<'a> {
    config: &'a RunConfig,
    label: String,
    split: &'a Split,
    sizes: SplitSizes,
    audit: SplitAudit,
    counts: Vec<(String, Vec<usize>)>,
}

pub fn resample(mut cfg: RunConfig) -> Result<PathBuf, CliError> {
    let corpus = open_corpus(&mut cfg)?;
    let exp = experiment_config(&cfg);
    let split = make_split(&corpus, &exp).stage("resample")?;
    let audit = split.audit();
    log_audit(&audit);
    let mut counts = Vec::new();
    for (name, ids) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let ds = corpus.dataset.by_ids(ids).stage("resample")?;
        counts.push((name.to_string(), ds.class_counts(cfg.task).counts));
    }
    let dir = create_run_dir(&cfg, "resample")?;
    let report = ResampleReport {
        config: &cfg,
        label: exp.label(),
        split: &split,
        sizes: SplitSizes { train: split.train.len(), val: split.val.len(), test: split.test.len() },
        audit: audit.clone(),
        counts,
    };
    write_json(&dir.join("split.json"), &report)?;
    println!("{}", exp.label());
    print!("{:<6}", "split");
    for l in cfg.task.labels() {
        print!(" {l:>9}");
    }
    println!(" {:>9}", "total");
    for (name, c) in &report.counts {
        print!("{name:<6}");
        for v in c {
            print!(" {v:>9}");
        }
        println!(" {:>9}", c.iter().sum::<usize>());
    }
    println!(
        "audit: {} duplicate ids across splits, {} test rows seen in train",
        audit.cross_split_duplicates(),
        audit.test_rows_seen_in_train
    );
    println!("{}", dir.display());
    Ok(dir)
}

#[derive(Serialize, Deserialize)]
pub struct TrainReport {
    pub config: RunConfig,
    pub experiment: ExperimentReport,
}

/// Metadata stored in every checkpoint header.
#[derive(Serialize, Deserialize)]
pub struct CheckpointExtra {
    pub run: RunConfig,
    pub labels: Vec<String>,
    pub vocab: Value,
}

pub fn metrics_text(m: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} ({} rows): accuracy {:.4}", m.split, m.total, m.accuracy);
    let _ = writeln!(out, "  {:<10} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support");
    for c in &m.per_class {
        let flag = if c.precision_undefined || c.recall_undefined || c.f1_undefined { " *" } else { "" };
        let _ = writeln!(
            out,
            "  {:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}{flag}",
            c.label, c.precision, c.recall, c.f1, c.support
        );
    }
    let w = &m.weighted;
    let _ = writeln!(out, "  {:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}", "weighted", w.precision, w.recall, w.f1, m.total);
    if m.has_undefined() {
        let _ = writeln!(out, "  * zero denominator, reported as 0");
    }
    let _ = writeln!(out, "  confusion (rows true, columns predicted):");
    for row in &m.confusion {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
        let _ = writeln!(out, "  {}", cells.join(""));
    }
    out
}

pub fn train(mut cfg: RunConfig) -> Result<PathBuf, CliError> {
    let corpus = open_corpus(&mut cfg)?;
    let exp = experiment_config(&cfg);
    exp.validate().stage("config")?;
    let dir = create_run_dir(&cfg, "train")?;
    let split = make_split(&corpus, &exp).stage("split")?;
    write_json(&dir.join("split.json"), &split)?;
    log_audit(&split.audit());

    let (report, model) = run_experiment(&corpus, &exp).stage("train")?;
    write(&dir.join("history.jsonl"), report.history.to_jsonl())?;
    let extra = CheckpointExtra {
        run: cfg.clone(),
        labels: cfg.task.labels().iter().map(|s| s.to_string()).collect(),
        vocab: serde_json::from_str(&corpus.pipeline.vocab.to_json().stage("vocabulary")?)
            .map_err(Error::from)
            .stage("vocabulary")?,
    };
    let extra = serde_json::to_value(&extra).map_err(Error::from).stage("serialize")?;
    save_model(&dir.join(CHECKPOINT_FILE), &model, extra).stage("checkpoint")?;
    let labels = cfg.task.labels();
    let cm = hybrid_core::eval::ConfusionMatrix::from_rows(&report.test.confusion).stage("report")?;
    write(&dir.join("confusion_test.csv"), cm.to_csv(labels))?;

    let mut text = render_table("Dataset", std::slice::from_ref(&report.row));
    let _ = writeln!(
        text,
        "\nbest epoch {} of {}{}",
        report.history.best_epoch,
        report.history.records.len(),
        if report.history.stopped_early { " (stopped early)" } else { "" }
    );
    for m in [&report.train, &report.val, &report.test] {
        text.push('\n');
        text.push_str(&metrics_text(m));
    }
    let _ = writeln!(text, "\nconfig {}", serde_json::to_string(&cfg).map_err(Error::from).stage("serialize")?);
    write(&dir.join("report.txt"), &text)?;
    write_json(&dir.join("report.json"), &TrainReport { config: cfg, experiment: report })?;
    print!("{text}");
    println!("{}", dir.display());
    Ok(dir)
}

#[derive(Serialize, Deserialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub checkpoint: PathBuf,
    pub checkpoint_digest: String,
    pub label: String,
    pub splits: Vec<MetricsReport>,
}

/// The model, its training configuration and vocabulary.
pub fn open_checkpoint(path: &Path) -> Result<(HybridModel, CheckpointExtra, Vocabulary), CliError> {
    let (model, extra) = load_model(path).stage("load checkpoint")?;
    let extra: CheckpointExtra = serde_json::from_value(extra).map_err(Error::from).stage("load checkpoint")?;
    let vocab = Vocabulary::from_json(&extra.vocab.to_string()).stage("load checkpoint")?;
    Ok((model, extra, vocab))
}

/// Evaluates a checkpoint on the splits its run was trained with. The
/// report depends only on the checkpoint and the prepared corpus.
pub fn eval(checkpoint: &Path, prepared: Option<PathBuf>, which: &str, format: Format) -> Result<PathBuf, CliError> {
    let names: &[&str] = match which {
        "train" => &["train"],
        "val" => &["val"],
        "test" => &["test"],
        "all" => &["train", "val", "test"],
        _ => return Err(CliError::Usage(format!("unknown split {which:?} (train, val, test, all)"))),
    };
    let (model, extra, _) = open_checkpoint(checkpoint)?;
    let mut cfg = extra.run;
    if prepared.is_some() {
        cfg.prepared = prepared;
    }
    let corpus = open_corpus(&mut cfg)?;
    let exp = experiment_config(&cfg);
    let split = make_split(&corpus, &exp).stage("split")?;
    let mut splits = Vec::new();
    for &name in names {
        let ids = match name {
            "train" => &split.train,
            "val" => &split.val,
            _ => &split.test,
        };
        let set = corpus.encoded_set(ids, cfg.task).stage("encode")?;
        if set.is_empty() {
            return Err(Error::Data(format!("the {name} split is empty"))).stage("evaluate");
        }
        splits.push(evaluate_split(&model, &set, cfg.task, name, cfg.train.batch_size).stage("evaluate")?);
    }
    let report = EvalReport {
        checkpoint_digest: file_digest(checkpoint)?,
        checkpoint: checkpoint.to_path_buf(),
        label: exp.label(),
        config: cfg,
        splits,
    };
    let (body, ext) = match format {
        Format::Json => (to_json(&report)?, "json"),
        Format::Text => {
            let mut s = format!("{}\ncheckpoint {} ({})\n", report.label, report.checkpoint.display(), report.checkpoint_digest);
            for m in &report.splits {
                s.push('\n');
                s.push_str(&metrics_text(m));
            }
            let _ = writeln!(s, "\nconfig {}", serde_json::to_string(&report.config).map_err(Error::from).stage("serialize")?);
            (s, "txt")
        }
        Format::Html => return Err(CliError::Usage("eval writes json or text".into())),
    };
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let path = dir.join(format!("eval-{which}.{ext}"));
    write(&path, &body)?;
    print!("{body}");
    Ok(path)
}

#[derive(Serialize, Deserialize)]
pub struct KFoldOutput {
    pub config: RunConfig,
    pub report: KFoldReport,
}

pub fn kfold(mut cfg: RunConfig) -> Result<PathBuf, CliError> {
    let corpus = open_corpus(&mut cfg)?;
    if cfg.technique.is_some() {
        log::info!("kfold resamples the whole corpus before folding; technique is ignored");
    }
    let kcfg = KFoldConfig {
        task: cfg.task,
        resampler: cfg.resampler,
        k: cfg.k,
        val_fraction: cfg.val_fraction,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        seed: cfg.seed,
    };
    let dir = create_run_dir(&cfg, "kfold")?;
    let report = run_kfold(&corpus, &kcfg, cfg.jobs).stage("kfold")?;
    if report.test_overlap > 0 {
        log::warn!("{} ids occur in more than one test fold", report.test_overlap);
    }
    let table = report.render();
    write(&dir.join("kfold.txt"), &table)?;
    write_json(&dir.join("kfold.json"), &KFoldOutput { config: cfg, report })?;
    print!("{table}");
    println!("{}", dir.display());
    Ok(dir)
}

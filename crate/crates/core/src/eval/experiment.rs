//! Split → train → evaluate drivers producing table rows, for a single split
//! and for k-fold cross-validation.

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, ConfusionMatrix, MetricsReport};
use crate::corpus::PreparedCorpus;
use crate::data::{
    fold_test_overlap, kfold, run_technique, technique2, Provenance, Ratios, Resampler, Split, SplitAudit, Task, Technique,
};
use crate::error::{Error, Result};
use crate::model::{HybridModel, ModelConfig};
use crate::rng::Rng;
use crate::train::{evaluate, train, EncodedSet, History, TrainConfig};

const MODEL_STREAM: u64 = 20;
const TRAIN_STREAM: u64 = 21;
const POOL_STREAM: u64 = 30;
const FOLD_STREAM: u64 = 31;

/// One row in the Train / Val / Test / P / R / F1 layout. Fractions in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl TableRow {
    fn from_reports(label: String, train: &MetricsReport, val: &MetricsReport, test: &MetricsReport) -> Self {
        TableRow {
            label,
            train: train.accuracy,
            val: val.accuracy,
            test: test.accuracy,
            precision: test.weighted.precision,
            recall: test.weighted.recall,
            f1: test.weighted.f1,
        }
    }

    fn values(&self) -> [f64; 6] {
        [self.train, self.val, self.test, self.precision, self.recall, self.f1]
    }

    /// Column-wise arithmetic mean.
    pub fn mean(label: &str, rows: &[TableRow]) -> Result<TableRow> {
        if rows.is_empty() {
            return Err(Error::Data("cannot average zero rows".into()));
        }
        let mut acc = [0.0; 6];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let n = rows.len() as f64;
        let [train, val, test, precision, recall, f1] = acc.map(|a| a / n);
        Ok(TableRow { label: label.to_string(), train, val, test, precision, recall, f1 })
    }
}

/// Aligned text table, values in percent with two decimals.
pub fn render_table(first_column: &str, rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.label.chars().count()).chain([first_column.chars().count()]).max().unwrap_or(0);
    let mut out = format!("{first_column:<width$}");
    for h in ["Train", "Val", "Test", "P", "R", "F1"] {
        out.push_str(&format!("  {h:>6}"));
    }
    out.push('\n');
    for r in rows {
        let pad = width - r.label.chars().count();
        out.push_str(&r.label);
        out.push_str(&" ".repeat(pad));
        for v in r.values() {
            out.push_str(&format!("  {:>6.2}", 100.0 * v));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    /// `None` is a plain stratified split of the data as-is.
    pub technique: Option<Technique>,
    pub resampler: Resampler,
    pub ratios: Ratios,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.technique.is_none() && self.resampler != Resampler::None {
            return Err(Error::Config("a resampler needs technique 1 or 2".into()));
        }
        self.ratios.validate()?;
        self.train.validate()
    }

    pub fn label(&self) -> String {
        let data = match self.resampler {
            Resampler::None => "Imb",
            Resampler::Under => "UnS",
            Resampler::Over => "OvS",
        };
        let task = match self.task {
            Task::Aspect => "Headline",
            Task::Polarity => "Sentiment",
        };
        match self.technique {
            Some(Technique::One) => format!("{task} – Full {data} (T1)"),
            Some(Technique::Two) => format!("{task} – {data} (T2)"),
            None => format!("{task} – {data}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub audit: SplitAudit,
    pub sizes: SplitSizes,
    pub history: History,
    pub train: MetricsReport,
    pub val: MetricsReport,
    pub test: MetricsReport,
    pub row: TableRow,
}

/// Eval-mode metrics of `model` on `set`.
pub fn evaluate_split(model: &HybridModel, set: &EncodedSet, task: Task, split: &str, batch_size: usize) -> Result<MetricsReport> {
    let e = evaluate(model, set, batch_size)?;
    let cm = ConfusionMatrix::from_labels(&set.labels, &e.predictions, task.num_classes())?;
    compute_metrics(&cm, task.labels(), split)
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{name}: {m}")),
        Error::Config(m) => Error::Config(format!("{name}: {m}")),
        e => e,
    })
}

fn fit_and_report(
    corpus: &PreparedCorpus,
    task: Task,
    ids: [&[u64]; 3],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    model_seed: u64,
) -> Result<(HybridModel, History, [MetricsReport; 3])> {
    let [tr, va, te] = ids;
    let sets = [tr, va, te].map(|s| corpus.encoded_set(s, task));
    let [tr, va, te] = sets;
    let (tr, va, te) = (stage("encode", tr)?, stage("encode", va)?, stage("encode", te)?);
    let mut model = stage("model", HybridModel::new(corpus.model_config(model_cfg, task), model_seed))?;
    let history = stage("train", train(&mut model, &tr, (!va.is_empty()).then_some(&va), train_cfg))?;
    let bs = train_cfg.batch_size;
    let reports = [
        stage("evaluate", evaluate_split(&model, &tr, task, "train", bs))?,
        stage("evaluate", evaluate_split(&model, &va, task, "val", bs))?,
        stage("evaluate", evaluate_split(&model, &te, task, "test", bs))?,
    ];
    Ok((model, history, reports))
}

/// The split `run_experiment` trains and evaluates on.
pub fn make_split(corpus: &PreparedCorpus, cfg: &ExperimentConfig) -> Result<Split> {
    stage("config", cfg.validate())?;
    let root = Rng::new(cfg.seed);
    stage(
        "split",
        match cfg.technique {
            Some(t) => run_technique(t, &corpus.dataset, cfg.task, cfg.resampler, &cfg.ratios, &root),
            None => technique2(&corpus.dataset, cfg.task, Resampler::None, &cfg.ratios, &root).map(|mut s| {
                s.provenance.technique = None;
                s
            }),
        },
    )
}

/// Split, train one model and evaluate it on all three splits. The trained
/// model is returned alongside the report.
pub fn run_experiment(corpus: &PreparedCorpus, cfg: &ExperimentConfig) -> Result<(ExperimentReport, HybridModel)> {
    let split = make_split(corpus, cfg)?;
    let root = Rng::new(cfg.seed);
    let audit = split.audit();
    if audit.cross_split_duplicates() > 0 {
        log::warn!(
            "split audit: {} ids shared across splits ({} test rows seen in train)",
            audit.cross_split_duplicates(),
            audit.test_rows_seen_in_train
        );
    }
    let train_cfg = TrainConfig { seed: root.derive(TRAIN_STREAM).seed(), ..cfg.train.clone() };
    let (model, history, [train, val, test]) = fit_and_report(
        corpus,
        cfg.task,
        [&split.train, &split.val, &split.test],
        &cfg.model,
        &train_cfg,
        root.derive(MODEL_STREAM).seed(),
    )?;
    let row = TableRow::from_reports(cfg.label(), &train, &val, &test);
    let report = ExperimentReport {
        config: cfg.clone(),
        provenance: split.provenance.clone(),
        audit,
        sizes: SplitSizes { train: split.train.len(), val: split.val.len(), test: split.test.len() },
        history,
        train,
        val,
        test,
        row,
    };
    Ok((report, model))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldConfig {
    pub task: Task,
    /// Applied once to the whole corpus before folding.
    pub resampler: Resampler,
    pub k: usize,
    /// Share of each fold's training partitions held out for validation.
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub index: usize,
    pub sizes: SplitSizes,
    pub history: History,
    pub train: MetricsReport,
    pub val: MetricsReport,
    pub test: MetricsReport,
    pub row: TableRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub config: KFoldConfig,
    pub folds: Vec<FoldReport>,
    pub average: TableRow,
    /// Distinct ids occurring in more than one test fold (non-zero only when
    /// the pool was oversampled).
    pub test_overlap: usize,
}

impl KFoldReport {
    pub fn rows(&self) -> Vec<TableRow> {
        let mut rows: Vec<TableRow> = self.folds.iter().map(|f| f.row.clone()).collect();
        rows.push(self.average.clone());
        rows
    }

    pub fn render(&self) -> String {
        render_table("Fold", &self.rows())
    }
}

/// Trains `k` independent models. Up to `jobs` folds run in parallel; each
/// fold has its own derived seeds, so results do not depend on `jobs`.
pub fn run_kfold(corpus: &PreparedCorpus, cfg: &KFoldConfig, jobs: usize) -> Result<KFoldReport> {
    stage("config", cfg.train.validate())?;
    let root = Rng::new(cfg.seed);
    let pool = stage("resample", cfg.resampler.apply(&corpus.dataset, cfg.task, &mut root.derive(POOL_STREAM)))?;
    let folds = stage("split", kfold(&pool, cfg.task, cfg.k, cfg.val_fraction, &mut root.derive(FOLD_STREAM)))?;
    let test_overlap = fold_test_overlap(&folds);

    let run_fold = |i: usize| -> Result<FoldReport> {
        let f = &folds[i];
        let fold_rng = root.derive(100 + i as u64);
        let train_cfg = TrainConfig { seed: fold_rng.derive(TRAIN_STREAM).seed(), ..cfg.train.clone() };
        let (_, history, [train, val, test]) = fit_and_report(
            corpus,
            cfg.task,
            [&f.train, &f.val, &f.test],
            &cfg.model,
            &train_cfg,
            fold_rng.derive(MODEL_STREAM).seed(),
        )?;
        let row = TableRow::from_reports((i + 1).to_string(), &train, &val, &test);
        Ok(FoldReport {
            index: i,
            sizes: SplitSizes { train: f.train.len(), val: f.val.len(), test: f.test.len() },
            history,
            train,
            val,
            test,
            row,
        })
    };

    let jobs = jobs.clamp(1, folds.len());
    let mut results: Vec<Option<Result<FoldReport>>> = (0..folds.len()).map(|_| None).collect();
    for start in (0..folds.len()).step_by(jobs) {
        let end = (start + jobs).min(folds.len());
        let batch: Vec<Result<FoldReport>> = std::thread::scope(|s| {
            let handles: Vec<_> = (start..end).map(|i| s.spawn(move || run_fold(i))).collect();
            handles.into_iter().map(|h| h.join().expect("fold worker panicked")).collect()
        });
        for (i, r) in (start..end).zip(batch) {
            results[i] = Some(r);
        }
    }
    let folds_out = results.into_iter().map(|r| r.expect("every fold ran")).collect::<Result<Vec<_>>>()?;
    let rows: Vec<TableRow> = folds_out.iter().map(|f| f.row.clone()).collect();
    Ok(KFoldReport {
        config: cfg.clone(),
        average: TableRow::mean("Avg", &rows)?,
        folds: folds_out,
        test_overlap,
    })
}

//! `explain` and `inspect`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hybrid_core::checkpoint::Checkpoint;
use hybrid_core::error::Error;
use hybrid_core::explain::{self, render, Explanation, Format, ModelClassifier};
use hybrid_core::text::Normalizer;
use serde::Serialize;

use crate::artifacts::{sha256_hex, to_json, write};
use crate::config::RunConfig;
use crate::error::{CliError, Staged};
use crate::prepare::MANIFEST_FILE;
use crate::run::open_checkpoint;

#[derive(Serialize)]
struct ExplanationRecord<'a> {
    config: &'a RunConfig,
    checkpoint: &'a Path,
    explanation: &'a Explanation,
}

pub struct ExplainRequest<'a> {
    pub checkpoint: &'a Path,
    pub text: &'a str,
    pub class: Option<&'a str>,
    pub top: usize,
    pub format: Format,
}

/// `cfg` supplies the LIME settings and seed; the model, task and
/// vocabulary come from the checkpoint.
pub fn explain(cfg: &RunConfig, req: &ExplainRequest) -> Result<PathBuf, CliError> {
    let (model, extra, vocab) = open_checkpoint(req.checkpoint)?;
    let mut run = extra.run;
    run.lime = cfg.lime.clone();
    run.seed = cfg.seed;
    let class = req
        .class
        .map(|c| {
            extra
                .labels
                .iter()
                .position(|l| l.eq_ignore_ascii_case(c))
                .ok_or_else(|| CliError::Usage(format!("unknown class {c:?} (one of {})", extra.labels.join(", "))))
        })
        .transpose()?;
    let classifier = ModelClassifier { model: &model, vocab: &vocab, labels: extra.labels.clone(), batch_size: run.lime.batch_size };
    let e = explain::explain(req.text, &Normalizer::bangla(), &classifier, class, &run.lime, run.seed).stage("explain")?;

    let record = ExplanationRecord { config: &run, checkpoint: req.checkpoint, explanation: &e };
    let json = to_json(&record)?;
    let config_json = serde_json::to_string(&run).map_err(Error::from).stage("serialize")?;
    let (body, ext) = match req.format {
        Format::Json => (json.clone(), "json"),
        Format::Html => {
            let html = render(&e, Format::Html).stage("render")?;
            let script = format!(
                "<script type=\"application/json\" id=\"run-config\">{}</script>\n</body>",
                config_json.replace("</", "<\\/")
            );
            (html.replacen("</body>", &script, 1), "html")
        }
        Format::Text => (format!("{}config {config_json}\n", render(&e, Format::Text).stage("render")?), "txt"),
    };
    let name = &sha256_hex(format!("{}\n{:?}\n{config_json}", req.text, class).as_bytes())[..12];
    let dir = req.checkpoint.parent().unwrap_or(Path::new(".")).join("explanations");
    let path = dir.join(format!("{name}.{ext}"));
    write(&path, &body)?;
    if req.format != Format::Json {
        write(&dir.join(format!("{name}.json")), &json)?;
    }
    print!("{}", explain::render::to_text(&e, req.top));
    println!("{}", path.display());
    Ok(path)
}

fn checkpoint_summary(path: &Path) -> Result<String, CliError> {
    let ck = Checkpoint::load(path).stage("load checkpoint")?;
    let mut out = String::new();
    let _ = writeln!(out, "checkpoint {}", path.display());
    let _ = writeln!(out, "{:<44} {:>18} {:>10} {:>9}", "tensor", "shape", "values", "trainable");
    let (mut total, mut trainable) = (0usize, 0usize);
    for t in &ck.tensors {
        let n = t.tensor.numel();
        total += n;
        if t.trainable {
            trainable += n;
        }
        let _ = writeln!(out, "{:<44} {:>18} {:>10} {:>9}", t.name, format!("{:?}", t.tensor.shape()), n, t.trainable);
    }
    let _ = writeln!(out, "{} tensors, {total} values, {trainable} trainable", ck.tensors.len());
    // The header also carries the vocabulary, which is too long to print.
    for (name, value) in [("model", &ck.header["model"]), ("run", &ck.header["extra"]["run"])] {
        let _ = writeln!(out, "{name} {}", serde_json::to_string_pretty(value).map_err(Error::from).stage("serialize")?);
    }
    Ok(out)
}

/// A checkpoint file, a prepared directory, or with no path the resolved
/// configuration.
pub fn inspect(cfg: &RunConfig, path: Option<&Path>) -> Result<(), CliError> {
    match path {
        None => print!("{}", to_json(cfg)?),
        Some(p) if p.is_dir() => {
            let m = p.join(MANIFEST_FILE);
            let text = std::fs::read_to_string(&m).map_err(|e| Error::io(&m, e)).stage("inspect")?;
            print!("{text}");
        }
        Some(p) if p.exists() => print!("{}", checkpoint_summary(p)?),
        Some(p) => return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound))).stage("inspect"),
    }
    Ok(())
}

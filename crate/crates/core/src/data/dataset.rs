//! Labelled headlines and CSV ingestion.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ASPECT_LABELS: [&str; 4] = ["other", "politics", "religion", "sports"];
pub const POLARITY_LABELS: [&str; 3] = ["negative", "positive", "neutral"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Aspect,
    Polarity,
}

impl Task {
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Task::Aspect => &ASPECT_LABELS,
            Task::Polarity => &POLARITY_LABELS,
        }
    }

    pub fn num_classes(self) -> usize {
        self.labels().len()
    }

    pub fn parse_label(self, s: &str) -> Option<usize> {
        let s = s.trim();
        self.labels().iter().position(|l| l.eq_ignore_ascii_case(s))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Aspect => "aspect",
            Task::Polarity => "polarity",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aspect" | "headline" => Ok(Task::Aspect),
            "polarity" | "sentiment" => Ok(Task::Polarity),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub text: String,
    pub aspect: usize,
    pub polarity: usize,
}

impl Example {
    pub fn label(&self, task: Task) -> usize {
        match task {
            Task::Aspect => self.aspect,
            Task::Polarity => self.polarity,
        }
    }
}

/// Per-class counts for one task, indexed by label id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub task: Task,
    pub counts: Vec<usize>,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn min(&self) -> usize {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    pub fn max(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.task
            .labels()
            .iter()
            .zip(&self.counts)
            .map(|(l, &c)| (l.to_string(), c))
            .collect()
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.task.parse_label(label).map(|i| self.counts[i])
    }
}

/// An ordered collection of examples. Loaded datasets have unique ids;
/// resampled ones may repeat them.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.examples.iter().map(|e| e.id).collect()
    }

    pub fn labels(&self, task: Task) -> Vec<usize> {
        self.examples.iter().map(|e| e.label(task)).collect()
    }

    pub fn class_counts(&self, task: Task) -> ClassCounts {
        let mut counts = vec![0; task.num_classes()];
        for e in &self.examples {
            counts[e.label(task)] += 1;
        }
        ClassCounts { task, counts }
    }

    /// Row positions grouped by class, in dataset order.
    pub fn by_class(&self, task: Task) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); task.num_classes()];
        for (i, e) in self.examples.iter().enumerate() {
            groups[e.label(task)].push(i);
        }
        groups
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset::new(rows.iter().map(|&i| self.examples[i].clone()).collect())
    }

    /// Examples for a list of ids (repeats allowed), looked up in this dataset.
    pub fn by_ids(&self, ids: &[u64]) -> Result<Dataset> {
        let index: BTreeMap<u64, &Example> = self.examples.iter().map(|e| (e.id, e)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|e| (*e).clone())
                    .ok_or_else(|| Error::Data(format!("id {id} not in dataset")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Dataset::new)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.len());
        for e in &self.examples {
            if !seen.insert(e.id) {
                return Err(Error::Data(format!("duplicate id {}", e.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub text: String,
    pub aspect: String,
    pub polarity: String,
    /// Optional id column; row order (from 0) is used otherwise.
    pub id: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            text: "post".into(),
            aspect: "aspect".into(),
            polarity: "polarity".into(),
            id: None,
        }
    }
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().trim_start_matches('\u{FEFF}') == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let text_col = col(&schema.text)?;
    let aspect_col = col(&schema.aspect)?;
    let polarity_col = col(&schema.polarity)?;
    let id_col = schema.id.as_deref().map(col).transpose()?;

    let mut examples = Vec::new();
    for (n, record) in rdr.records().enumerate() {
        // Header is line 1, so data row n sits on line n + 2.
        let row = n + 2;
        let record = record.map_err(|e| Error::Row {
            row,
            msg: e.to_string(),
        })?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let label = |task: Task, i: usize| {
            task.parse_label(field(i)).ok_or_else(|| Error::Row {
                row,
                msg: format!("unknown {} label {:?}", task.name(), field(i)),
            })
        };
        let id = match id_col {
            Some(i) => field(i).trim().parse().map_err(|_| Error::Row {
                row,
                msg: format!("invalid id {:?}", field(i)),
            })?,
            None => n as u64,
        };
        examples.push(Example {
            id,
            text: field(text_col).to_string(),
            aspect: label(Task::Aspect, aspect_col)?,
            polarity: label(Task::Polarity, polarity_col)?,
        });
    }
    let ds = Dataset::new(examples);
    ds.check_unique_ids()?;
    Ok(ds)
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "post", "aspect", "polarity"])?;
    for e in &ds.examples {
        w.write_record([
            e.id.to_string().as_str(),
            &e.text,
            ASPECT_LABELS[e.aspect],
            POLARITY_LABELS[e.polarity],
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "post,aspect,polarity\nখেলা হবে,Sports,POSITIVE\nনির্বাচন আজ,politics,neutral\n";

    #[test]
    fn parses_case_insensitive_labels() {
        let ds = read_csv(CSV.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples[0].aspect, 3);
        assert_eq!(ds.examples[0].polarity, 1);
        assert_eq!(ds.ids(), vec![0, 1]);
        assert_eq!(ds.class_counts(Task::Aspect).counts, vec![0, 1, 0, 1]);
    }

    #[test]
    fn unknown_label_cites_row_and_value() {
        let bad = "post,aspect,polarity\na b,sports,positive\nc d,weather,positive\n";
        let err = read_csv(bad.as_bytes(), &CsvSchema::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains("weather"), "{msg}");
    }

    #[test]
    fn missing_column_is_schema_error() {
        let bad = "headline,aspect,polarity\na b,sports,positive\n";
        assert!(matches!(
            read_csv(bad.as_bytes(), &CsvSchema::default()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn custom_columns_and_ids() {
        let text = "id,title,cat,sent\n7,x y,other,negative\n9,z w,religion,neutral\n";
        let schema = CsvSchema {
            text: "title".into(),
            aspect: "cat".into(),
            polarity: "sent".into(),
            id: Some("id".into()),
        };
        let ds = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.ids(), vec![7, 9]);
        let dup = "id,title,cat,sent\n7,x y,other,negative\n7,z w,religion,neutral\n";
        assert!(read_csv(dup.as_bytes(), &schema).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let ds = read_csv(CSV.as_bytes(), &CsvSchema::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&ds, &path).unwrap();
        let schema = CsvSchema {
            id: Some("id".into()),
            ..CsvSchema::default()
        };
        assert_eq!(load_csv(&path, &schema).unwrap(), ds);
    }
}

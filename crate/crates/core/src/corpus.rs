//! A dataset after normalisation, vocabulary training and encoding, keyed by
//! example id, plus its binary cache.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Task};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::text::{EncodedSequence, Normalizer, Rejection, TextConfig, TextPipeline, Vocabulary, PAD};
use crate::train::EncodedSet;

const CACHE_MAGIC: &[u8; 4] = b"HYBE";
const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub too_short: usize,
    pub empty_after_stopwords: usize,
}

impl RejectionCounts {
    pub fn total(&self) -> usize {
        self.too_short + self.empty_after_stopwords
    }
}

#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    /// Rows that survived normalisation; `text` holds the normalised form.
    pub dataset: Dataset,
    pub pipeline: TextPipeline,
    pub encoded: Vec<EncodedSequence>,
    pub rejected: RejectionCounts,
    index: HashMap<u64, usize>,
}

impl PreparedCorpus {
    /// Normalises every row (dropping rejects), trains the vocabulary on the
    /// surviving text and encodes it.
    pub fn build(raw: &Dataset, normalizer: Normalizer, text: &TextConfig) -> Result<Self> {
        let mut rejected = RejectionCounts::default();
        let mut kept = Vec::with_capacity(raw.len());
        for ex in &raw.examples {
            match normalizer.normalize_for_training(&ex.text) {
                Ok(t) => kept.push(Example { text: t, ..ex.clone() }),
                Err(Rejection::TooShort) => rejected.too_short += 1,
                Err(Rejection::EmptyAfterStopwords) => rejected.empty_after_stopwords += 1,
            }
        }
        if kept.is_empty() {
            return Err(Error::Data("no rows survive preprocessing".into()));
        }
        let texts: Vec<&str> = kept.iter().map(|e| e.text.as_str()).collect();
        let vocab = Vocabulary::train(&texts, text.vocab_size)?;
        let pipeline = TextPipeline { normalizer, vocab, max_len: text.max_len };
        let encoded = kept.iter().map(|e| pipeline.encode_normalized(&e.text)).collect();
        Self::from_parts(Dataset::new(kept), pipeline, encoded, rejected)
    }

    pub fn from_parts(
        dataset: Dataset,
        pipeline: TextPipeline,
        encoded: Vec<EncodedSequence>,
        rejected: RejectionCounts,
    ) -> Result<Self> {
        if encoded.len() != dataset.len() {
            return Err(Error::shape("prepared corpus", &[dataset.len()], &[encoded.len()]));
        }
        let mut index = HashMap::with_capacity(dataset.len());
        for (i, e) in dataset.examples.iter().enumerate() {
            if index.insert(e.id, i).is_some() {
                return Err(Error::Data(format!("duplicate example id {}", e.id)));
            }
        }
        Ok(PreparedCorpus { dataset, pipeline, encoded, rejected, index })
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn position(&self, id: u64) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown example id {id}")))
    }

    /// Encoded rows for `ids` (repeats allowed) with their labels for `task`.
    pub fn encoded_set(&self, ids: &[u64], task: Task) -> Result<EncodedSet> {
        let mut seqs = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for &id in ids {
            let i = self.position(id)?;
            seqs.push(self.encoded[i].clone());
            labels.push(self.dataset.examples[i].label(task));
        }
        EncodedSet::new(seqs, labels)
    }

    /// `base` with the vocabulary, sequence length and class count of this corpus.
    pub fn model_config(&self, base: &ModelConfig, task: Task) -> ModelConfig {
        ModelConfig {
            vocab_size: self.pipeline.vocab.len(),
            max_len: self.pipeline.max_len,
            num_classes: task.num_classes(),
            ..base.clone()
        }
    }

    /// Binary layout, little-endian: magic "HYBE", u32 version, u64 max_len,
    /// u64 rows; per row: u64 id, u8 aspect, u8 polarity, u32 original_length,
    /// u32 text_len + UTF-8 normalised text, max_len × u32 token ids. The mask
    /// is implied by non-PAD ids.
    pub fn cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.pipeline.max_len as u64).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (e, s) in self.dataset.examples.iter().zip(&self.encoded) {
            out.extend_from_slice(&e.id.to_le_bytes());
            out.push(e.aspect as u8);
            out.push(e.polarity as u8);
            out.extend_from_slice(&(s.original_length as u32).to_le_bytes());
            out.extend_from_slice(&(e.text.len() as u32).to_le_bytes());
            out.extend_from_slice(e.text.as_bytes());
            for &t in &s.ids {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.cache_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Inverse of `save_cache`, given the pipeline the cache was built with.
    pub fn load_cache(path: &Path, pipeline: TextPipeline, rejected: RejectionCounts) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated cache"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CACHE_MAGIC {
            return Err(bad("not a corpus cache"));
        }
        if u32::from_le_bytes(take(4)?.try_into().unwrap()) != CACHE_VERSION {
            return Err(bad("unsupported cache version"));
        }
        let max_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if max_len != pipeline.max_len {
            return Err(bad("cache max_len differs from the pipeline"));
        }
        let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut examples = Vec::with_capacity(rows.min(1 << 20));
        let mut encoded = Vec::with_capacity(rows.min(1 << 20));
        for _ in 0..rows {
            let id = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let aspect = take(1)?[0] as usize;
            let polarity = take(1)?[0] as usize;
            let original_length = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let text_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let text = std::str::from_utf8(take(text_len)?).map_err(|_| bad("text is not UTF-8"))?.to_string();
            let ids: Vec<u32> = take(4 * max_len)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let mask = ids.iter().map(|&t| u8::from(t != PAD)).collect();
            examples.push(Example { id, text, aspect, polarity });
            encoded.push(EncodedSequence { ids, mask, original_length });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes in cache"));
        }
        Self::from_parts(Dataset::new(examples), pipeline, encoded, rejected)
    }
}

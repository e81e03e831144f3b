//! The full classifier: encoder → (CNN ‖ BiLSTM-attention) → fusion head.

use super::bilstm::BiLstmBranch;
use super::cnn::CnnBranch;
use super::config::ModelConfig;
use super::encoder::{Encoder, EncoderInput};
use super::head::{cross_entropy, one_hot, smooth_targets, Head};
use super::layers::Forward;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::EncodedSequence;

/// A padded `[B, T]` batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub labels: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    pub fn from_sequences(seqs: &[&EncodedSequence], labels: &[usize]) -> Result<Self> {
        let len = seqs.first().map_or(0, |s| s.ids.len());
        if seqs.iter().any(|s| s.ids.len() != len || s.mask.len() != len) {
            return Err(Error::Data("sequences in a batch must share one length".into()));
        }
        if !labels.is_empty() && labels.len() != seqs.len() {
            return Err(Error::shape("batch labels", &[seqs.len()], &[labels.len()]));
        }
        Ok(Batch {
            ids: seqs.iter().flat_map(|s| s.ids.iter().copied()).collect(),
            mask: seqs.iter().flat_map(|s| s.mask.iter().copied()).collect(),
            labels: labels.to_vec(),
            batch: seqs.len(),
            len,
        })
    }

    pub fn encoder_input(&self) -> EncoderInput<'_> {
        EncoderInput {
            ids: &self.ids,
            mask: &self.mask,
            segments: None,
            batch: self.batch,
            len: self.len,
        }
    }
}

pub struct ForwardOutput {
    pub probs: Var,
    pub penalty: Option<Var>,
    pub alpha: Var,
}

#[derive(Clone, Debug)]
pub struct HybridModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub cnn: CnnBranch,
    pub bilstm: BiLstmBranch,
    pub head: Head,
}

impl HybridModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng);
        let cnn = CnnBranch::new(&mut store, &config, &mut rng);
        let bilstm = BiLstmBranch::new(&mut store, &config, &mut rng);
        let head = Head::new(&mut store, &config, &mut rng);
        Ok(HybridModel { config, store, encoder, cnn, bilstm, head })
    }

    pub fn forward(&self, f: &mut Forward, batch: &Batch) -> Result<ForwardOutput> {
        let h = self.encoder.forward(f, &batch.encoder_input())?;
        let cnn = self.cnn.forward(f, h)?;
        let lstm = self.bilstm.forward(f, h, &batch.mask)?;
        let probs = self.head.forward(f, cnn.features, lstm.pooled)?;
        Ok(ForwardOutput { probs, penalty: cnn.penalty, alpha: lstm.alpha })
    }

    /// Smoothed cross-entropy plus the convolution L2 penalty.
    pub fn loss(&self, f: &mut Forward, out: &ForwardOutput, labels: &[usize]) -> Result<Var> {
        let targets = smooth_targets(&one_hot(labels, self.config.num_classes)?, self.config.label_smoothing)?;
        let ce = cross_entropy(f, out.probs, &targets)?;
        match out.penalty {
            Some(p) => f.tape.add(ce, p),
            None => Ok(ce),
        }
    }

    /// Eval-mode class probabilities `[B, C]`.
    pub fn predict_proba(&self, batch: &Batch) -> Result<Tensor> {
        let mut f = Forward::new(&self.store, false, Rng::new(0));
        let out = self.forward(&mut f, batch)?;
        Ok(f.tape.value(out.probs).clone())
    }

    /// Parameter groups by layer, in forward order.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut g = self.encoder.param_groups();
        g.extend(self.cnn.param_groups());
        g.extend(self.bilstm.param_groups());
        g.extend(self.head.param_groups());
        g
    }
}

impl HybridModel {
    /// Finite-difference check of the training-mode loss gradient for the
    /// given parameters. The dropout stream is re-seeded identically for
    /// every evaluation so the masks stay fixed.
    pub fn grad_check(
        &mut self,
        batch: &Batch,
        ids: &[ParamId],
        max_entries: usize,
        dropout_seed: u64,
        rng: &mut Rng,
    ) -> Result<Vec<crate::autodiff::check::GradCheck>> {
        let this = self.clone();
        let loss_of = |store: &ParamStore| -> Result<f64> {
            let mut f = Forward::new(store, true, Rng::new(dropout_seed));
            let out = this.forward(&mut f, batch)?;
            let loss = this.loss(&mut f, &out, &batch.labels)?;
            Ok(f.tape.value(loss).item())
        };
        self.store.zero_grad();
        {
            let mut f = Forward::new(&this.store, true, Rng::new(dropout_seed));
            let out = this.forward(&mut f, batch)?;
            let loss = this.loss(&mut f, &out, &batch.labels)?;
            f.tape.backward_into(loss, &mut self.store)?;
        }
        crate::autodiff::check::check_params(
            &mut self.store,
            ids,
            max_entries,
            crate::autodiff::check::DEFAULT_STEP,
            rng,
            loss_of,
        )
    }
}

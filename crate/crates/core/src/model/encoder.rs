//! Transformer encoder over summed token, position and segment embeddings.

use super::config::ModelConfig;
use super::layers::{Dense, Forward};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub ff1: Dense,
    pub ff2: Dense,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub layers: Vec<EncoderLayer>,
    heads: usize,
    dropout: f64,
    ln_eps: f64,
}

/// Token ids, attention mask and segment ids for a `[B, T]` batch, row-major.
#[derive(Clone, Debug)]
pub struct EncoderInput<'a> {
    pub ids: &'a [u32],
    pub mask: &'a [u8],
    pub segments: Option<&'a [u8]>,
    pub batch: usize,
    pub len: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_bert;
        let token = store.add_xavier("embeddings.token", vec![cfg.vocab_size, d], cfg.vocab_size, d, rng);
        let position = store.add_xavier("embeddings.position", vec![cfg.max_len, d], cfg.max_len, d, rng);
        let segment = store.add_xavier("embeddings.segment", vec![2, d], 2, d, rng);
        let layers = (0..cfg.layers)
            .map(|i| {
                let n = |s: &str| format!("layer.{i}.{s}");
                EncoderLayer {
                    q: Dense::new(store, &n("mha.q"), d, d, rng),
                    k: Dense::new(store, &n("mha.k"), d, d, rng),
                    v: Dense::new(store, &n("mha.v"), d, d, rng),
                    o: Dense::new(store, &n("mha.o"), d, d, rng),
                    ff1: Dense::new(store, &n("ffn.1"), d, cfg.d_ff, rng),
                    ff2: Dense::new(store, &n("ffn.2"), cfg.d_ff, d, rng),
                    ln_gamma: store.add_ones(&n("ln.gamma"), vec![d]),
                    ln_beta: store.add_zeros(&n("ln.beta"), vec![d]),
                }
            })
            .collect();
        Encoder {
            token,
            position,
            segment,
            layers,
            heads: cfg.heads,
            dropout: cfg.dropout,
            ln_eps: cfg.ln_eps,
        }
    }

    /// `h0 = e_tok + e_pos + e_seg`, shape `[B, T, d]`.
    pub fn embed(&self, f: &mut Forward, input: &EncoderInput) -> Result<Var> {
        let (b, t) = (input.batch, input.len);
        if input.ids.len() != b * t || input.mask.len() != b * t {
            return Err(Error::shape("embed", &[b, t], &[input.ids.len()]));
        }
        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let segments: Vec<usize> = match input.segments {
            Some(s) if s.len() != b * t => return Err(Error::shape("embed", &[b, t], &[s.len()])),
            Some(s) => s.iter().map(|&x| x as usize).collect(),
            None => vec![0; b * t],
        };
        if let Some(&bad) = segments.iter().find(|&&s| s > 1) {
            return Err(Error::Index { what: "segment", index: bad, len: 2 });
        }
        let (tok_t, pos_t, seg_t) = (f.param(self.token), f.param(self.position), f.param(self.segment));
        let tok = f.tape.gather_rows(tok_t, &ids)?;
        let pos = f.tape.gather_rows(pos_t, &positions)?;
        let seg = f.tape.gather_rows(seg_t, &segments)?;
        let sum = f.tape.add(tok, pos)?;
        let sum = f.tape.add(sum, seg)?;
        let d = f.tape.shape(sum)[1];
        f.tape.reshape(sum, vec![b, t, d])
    }

    /// `LayerNorm(FFN(MHA(H, M)) + H)`.
    pub fn layer(&self, f: &mut Forward, l: &EncoderLayer, h: Var, keep: &[bool]) -> Result<Var> {
        let shape = f.tape.shape(h).to_vec();
        let d = shape[2];
        let dh = d / self.heads;
        let q = l.q.apply(f, h)?;
        let k = l.k.apply(f, h)?;
        let v = l.v.apply(f, h)?;
        let q = f.tape.split_heads(q, self.heads)?;
        let k = f.tape.split_heads(k, self.heads)?;
        let v = f.tape.split_heads(v, self.heads)?;
        let scores = f.tape.bmm(q, k, true)?;
        let scores = f.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let att = f.tape.masked_softmax(scores, Some(keep))?;
        let ctx = f.tape.bmm(att, v, false)?;
        let ctx = f.tape.merge_heads(ctx, self.heads)?;
        let mha = l.o.apply(f, ctx)?;
        let ff = l.ff1.apply(f, mha)?;
        let ff = f.tape.gelu(ff);
        let ff = l.ff2.apply(f, ff)?;
        let res = f.tape.add(ff, h)?;
        let (g, b) = (f.param(l.ln_gamma), f.param(l.ln_beta));
        f.tape.layer_norm(res, g, b, self.ln_eps)
    }

    /// Key mask for the `[B·H, T, T]` score tensor.
    fn score_keep(&self, input: &EncoderInput) -> Vec<bool> {
        let t = input.len;
        let mut keep = Vec::with_capacity(input.batch * self.heads * t * t);
        for b in 0..input.batch {
            let row = &input.mask[b * t..(b + 1) * t];
            for _ in 0..self.heads * t {
                keep.extend(row.iter().map(|&m| m != 0));
            }
        }
        keep
    }

    /// Embeddings, the layer stack and the post-stack dropout.
    pub fn forward(&self, f: &mut Forward, input: &EncoderInput) -> Result<Var> {
        let mut h = self.embed(f, input)?;
        f.record("encoder.embeddings", h);
        let keep = self.score_keep(input);
        for l in &self.layers {
            h = self.layer(f, l, h, &keep)?;
        }
        let out = f.dropout(h, self.dropout)?;
        f.record("encoder.output", out);
        Ok(out)
    }

    /// Attention weights of one layer, `[B·H, T, T]`, for inspection.
    pub fn attention_weights(&self, f: &mut Forward, input: &EncoderInput, layer: usize) -> Result<Var> {
        let mut h = self.embed(f, input)?;
        let keep = self.score_keep(input);
        for l in &self.layers[..layer] {
            h = self.layer(f, l, h, &keep)?;
        }
        let l = &self.layers[layer];
        let dh = f.tape.shape(h)[2] / self.heads;
        let q = l.q.apply(f, h)?;
        let k = l.k.apply(f, h)?;
        let q = f.tape.split_heads(q, self.heads)?;
        let k = f.tape.split_heads(k, self.heads)?;
        let s = f.tape.bmm(q, k, true)?;
        let s = f.tape.scale(s, 1.0 / (dh as f64).sqrt())?;
        f.tape.masked_softmax(s, Some(&keep))
    }

    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = vec![("embeddings".to_string(), vec![self.token, self.position, self.segment])];
        for (i, l) in self.layers.iter().enumerate() {
            groups.push((format!("layer.{i}.mha"), vec![l.q.w, l.q.b, l.k.w, l.k.b, l.v.w, l.v.b, l.o.w, l.o.b]));
            groups.push((format!("layer.{i}.ffn"), vec![l.ff1.w, l.ff1.b, l.ff2.w, l.ff2.b]));
            groups.push((format!("layer.{i}.ln"), vec![l.ln_gamma, l.ln_beta]));
        }
        groups
    }
}

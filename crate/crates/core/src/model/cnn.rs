//! Multi-kernel 1-D convolutions with global max pooling and a dense
//! projection.

use super::config::ModelConfig;
use super::layers::{BatchNorm, Dense, Forward};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub size: usize,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct CnnBranch {
    pub convs: Vec<ConvBlock>,
    pub proj: Dense,
    pub proj_bn: BatchNorm,
    dropout: f64,
    l2: f64,
}

pub struct CnnOutput {
    pub features: Var,
    /// `l2 · Σ‖kernel‖²`, or `None` when the coefficient is zero.
    pub penalty: Option<Var>,
}

impl CnnBranch {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_bert;
        let f = cfg.filters;
        let convs = cfg
            .kernel_sizes
            .iter()
            .map(|&k| ConvBlock {
                size: k,
                kernel: store.add_xavier(&format!("cnn.k{k}.kernel"), vec![d, k, f], d * k, f, rng),
                bias: store.add_zeros(&format!("cnn.k{k}.bias"), vec![f]),
                bn: BatchNorm::new(store, &format!("cnn.k{k}.bn"), f, cfg.bn_eps),
            })
            .collect();
        let concat = cfg.cnn_concat_dim();
        CnnBranch {
            convs,
            proj: Dense::new(store, "cnn.proj", concat, cfg.proj_dim, rng),
            proj_bn: BatchNorm::new(store, "cnn.proj.bn", cfg.proj_dim, cfg.bn_eps),
            dropout: cfg.dropout,
            l2: cfg.l2,
        }
    }

    /// `h[B, T, d]` → `[B, proj_dim]`.
    pub fn forward(&self, f: &mut Forward, h: Var) -> Result<CnnOutput> {
        let len = f.tape.shape(h)[1];
        if let Some(k) = self.convs.iter().map(|c| c.size).filter(|&k| k > len).max() {
            return Err(Error::SequenceTooShort { len, kernel: k });
        }
        let mut pooled = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let (w, b) = (f.param(c.kernel), f.param(c.bias));
            let z = f.tape.conv1d(h, w, b)?;
            let z = f.tape.relu(z);
            let z = c.bn.apply(f, z, None)?;
            let z = f.dropout(z, self.dropout)?;
            let p = f.tape.max_over_time(z)?;
            f.record(&format!("cnn.pool.k{}", c.size), p);
            pooled.push(p);
        }
        let concat = f.tape.concat(&pooled)?;
        f.record("cnn.concat", concat);
        let y = self.proj.apply(f, concat)?;
        let y = self.proj_bn.apply(f, y, None)?;
        let y = f.tape.relu(y);
        let y = f.dropout(y, self.dropout)?;
        f.record("cnn.output", y);

        let penalty = if self.l2 > 0.0 {
            let mut total: Option<Var> = None;
            for c in &self.convs {
                let w = f.param(c.kernel);
                let s = f.tape.sum_squares(w);
                total = Some(match total {
                    Some(t) => f.tape.add(t, s)?,
                    None => s,
                });
            }
            Some(f.tape.scale(total.expect("at least one kernel"), self.l2)?)
        } else {
            None
        };
        Ok(CnnOutput { features: y, penalty })
    }

    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups: Vec<(String, Vec<ParamId>)> = self
            .convs
            .iter()
            .map(|c| (format!("cnn.k{}", c.size), vec![c.kernel, c.bias, c.bn.gamma, c.bn.beta]))
            .collect();
        groups.push((
            "cnn.proj".into(),
            vec![self.proj.w, self.proj.b, self.proj_bn.gamma, self.proj_bn.beta],
        ));
        groups
    }
}

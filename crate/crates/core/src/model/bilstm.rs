//! Bidirectional LSTM with additive attention pooling.
//!
//! Weights use the row-vector convention `x·W`, so `W_*` is `[d_in, d_h]`
//! and `W_a` is `[2·d_h, d_a]`.

use super::config::ModelConfig;
use super::layers::{BatchNorm, Forward};
use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GATES: [&str; 4] = ["f", "i", "c", "o"];

/// One direction: input weights, recurrent weights and biases per gate, in
/// the order forget, input, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w: [ParamId; 4],
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, rng: &mut Rng) -> Self {
        let w = GATES.map(|g| store.add_xavier(&format!("{prefix}.W_{g}"), vec![d_in, hidden], d_in, hidden, rng));
        let u = GATES.map(|g| store.add_xavier(&format!("{prefix}.U_{g}"), vec![hidden, hidden], hidden, hidden, rng));
        let b = GATES.map(|g| store.add_zeros(&format!("{prefix}.b_{g}"), vec![hidden]));
        LstmParams { w, u, b, hidden }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.w.iter().chain(&self.u).chain(&self.b).copied().collect()
    }

    fn fused(&self, f: &mut Forward) -> Result<(Var, Var, Var)> {
        let w: Vec<Var> = self.w.iter().map(|&id| f.param(id)).collect();
        let u: Vec<Var> = self.u.iter().map(|&id| f.param(id)).collect();
        let b: Vec<Var> = self.b.iter().map(|&id| f.param(id)).collect();
        Ok((f.tape.concat(&w)?, f.tape.concat(&u)?, f.tape.concat(&b)?))
    }
}

/// One step given `xw = x_t·W + b` (all four gates, `[B, 4·d_h]`).
fn step(f: &mut Forward, xw: Var, u: Var, h: Var, c: Var, dh: usize) -> Result<(Var, Var)> {
    let hu = f.tape.matmul(h, u)?;
    let z = f.tape.add(xw, hu)?;
    let zf = f.tape.slice_last(z, 0, dh)?;
    let zi = f.tape.slice_last(z, dh, dh)?;
    let zc = f.tape.slice_last(z, 2 * dh, dh)?;
    let zo = f.tape.slice_last(z, 3 * dh, dh)?;
    let gf = f.tape.sigmoid(zf);
    let gi = f.tape.sigmoid(zi);
    let cand = f.tape.tanh(zc);
    let go = f.tape.sigmoid(zo);
    let keep = f.tape.mul(gf, c)?;
    let write = f.tape.mul(gi, cand)?;
    let c_new = f.tape.add(keep, write)?;
    let tc = f.tape.tanh(c_new);
    let h_new = f.tape.mul(go, tc)?;
    Ok((h_new, c_new))
}

/// Single LSTM step from explicit inputs: `x[B, d]`, `h, c[B, d_h]`.
pub fn lstm_step(f: &mut Forward, p: &LstmParams, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let (w, u, b) = p.fused(f)?;
    let xw = f.tape.linear(x, w, Some(b))?;
    step(f, xw, u, h, c, p.hidden)
}

/// Hidden states of one direction over `x[B, T, d]`, returned in time order.
pub fn scan(f: &mut Forward, p: &LstmParams, x: Var, reverse: bool) -> Result<Vec<Var>> {
    let (b, t) = (f.tape.shape(x)[0], f.tape.shape(x)[1]);
    let (w, u, bias) = p.fused(f)?;
    let xw = f.tape.linear(x, w, Some(bias))?;
    let mut h = f.tape.constant(Tensor::zeros(vec![b, p.hidden]));
    let mut c = f.tape.constant(Tensor::zeros(vec![b, p.hidden]));
    let mut states = Vec::with_capacity(t);
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for step_t in order {
        let xt = f.tape.select_time(xw, step_t)?;
        (h, c) = step(f, xt, u, h, c, p.hidden)?;
        states.push(h);
    }
    if reverse {
        states.reverse();
    }
    Ok(states)
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_a: ParamId,
    pub b_a: ParamId,
    pub u_w: ParamId,
}

#[derive(Clone, Debug)]
pub struct BiLstmBranch {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub bn: BatchNorm,
    pub attn: AttentionParams,
    dropout: f64,
    attend_padding: bool,
}

pub struct BiLstmOutput {
    /// `H'` after batch norm and dropout, `[B, T, 2·d_h]`.
    pub states: Var,
    /// Attention weights `[B, T]`.
    pub alpha: Var,
    /// Pooled context `[B, 2·d_h]`.
    pub pooled: Var,
}

impl BiLstmBranch {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let dh = cfg.hidden;
        let da = cfg.attn_dim;
        BiLstmBranch {
            fwd: LstmParams::new(store, "bilstm.fwd", cfg.d_bert, dh, rng),
            bwd: LstmParams::new(store, "bilstm.bwd", cfg.d_bert, dh, rng),
            bn: BatchNorm::new(store, "bilstm.bn", 2 * dh, cfg.bn_eps),
            attn: AttentionParams {
                w_a: store.add_xavier("attn.W_a", vec![2 * dh, da], 2 * dh, da, rng),
                b_a: store.add_zeros("attn.b_a", vec![da]),
                u_w: store.add_xavier("attn.u_w", vec![da], da, 1, rng),
            },
            dropout: cfg.dropout,
            attend_padding: cfg.attend_padding,
        }
    }

    /// Concatenated forward/backward states `[B, T, 2·d_h]` before BN.
    pub fn states(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let fw = scan(f, &self.fwd, x, false)?;
        let bw = scan(f, &self.bwd, x, true)?;
        let fw = f.tape.stack_time(&fw)?;
        let bw = f.tape.stack_time(&bw)?;
        f.tape.concat(&[fw, bw])
    }

    /// `u_t = tanh(h'_t W_a + b_a)`, `α = softmax(u·u_w)` over unmasked
    /// steps, output `Σ α_t h'_t`.
    pub fn attention_pool(&self, f: &mut Forward, states: Var, mask: &[u8]) -> Result<(Var, Var)> {
        let (b, t, d2) = {
            let s = f.tape.shape(states);
            (s[0], s[1], s[2])
        };
        let (wa, ba, uw) = (f.param(self.attn.w_a), f.param(self.attn.b_a), f.param(self.attn.u_w));
        let u = f.tape.linear(states, wa, Some(ba))?;
        let u = f.tape.tanh(u);
        let da = f.tape.shape(uw)[0];
        let uw = f.tape.reshape(uw, vec![da, 1])?;
        let e = f.tape.linear(u, uw, None)?;
        let e = f.tape.reshape(e, vec![b, t])?;
        let keep: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
        let alpha = if self.attend_padding {
            f.tape.softmax(e)?
        } else {
            f.tape.masked_softmax(e, Some(&keep))?
        };
        let a3 = f.tape.reshape(alpha, vec![b, 1, t])?;
        let pooled = f.tape.bmm(a3, states, false)?;
        let pooled = f.tape.reshape(pooled, vec![b, d2])?;
        Ok((pooled, alpha))
    }

    pub fn forward(&self, f: &mut Forward, x: Var, mask: &[u8]) -> Result<BiLstmOutput> {
        let h = self.states(f, x)?;
        f.record("bilstm.states", h);
        let rows: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
        let h = self.bn.apply(f, h, Some(&rows))?;
        let h = f.dropout(h, self.dropout)?;
        let (pooled, alpha) = self.attention_pool(f, h, mask)?;
        let pooled = f.dropout(pooled, self.dropout)?;
        f.record("bilstm.attention", pooled);
        Ok(BiLstmOutput { states: h, alpha, pooled })
    }

    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = Vec::new();
        for (dir, p) in [("fwd", &self.fwd), ("bwd", &self.bwd)] {
            for (kind, ids) in [("W", &p.w), ("U", &p.u), ("b", &p.b)] {
                for (g, &id) in GATES.iter().zip(ids) {
                    groups.push((format!("bilstm.{dir}.{kind}_{g}"), vec![id]));
                }
            }
        }
        groups.push(("bilstm.bn".into(), vec![self.bn.gamma, self.bn.beta]));
        groups.push(("attn".into(), vec![self.attn.w_a, self.attn.b_a, self.attn.u_w]));
        groups
    }
}

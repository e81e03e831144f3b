//! Fusion head and the label-smoothed cross-entropy.

use super::config::ModelConfig;
use super::layers::{BatchNorm, Dense, Forward};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Head {
    pub fusion_bn: BatchNorm,
    pub dense: Dense,
    pub dense_bn: BatchNorm,
    pub out: Dense,
    dropout: f64,
    fusion_dim: usize,
}

impl Head {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let fusion = cfg.fusion_dim();
        Head {
            fusion_bn: BatchNorm::new(store, "head.fusion.bn", fusion, cfg.bn_eps),
            dense: Dense::new(store, "head.dense", fusion, cfg.dense_units, rng),
            dense_bn: BatchNorm::new(store, "head.dense.bn", cfg.dense_units, cfg.bn_eps),
            out: Dense::new(store, "head.out", cfg.dense_units, cfg.num_classes, rng),
            dropout: cfg.dropout,
            fusion_dim: fusion,
        }
    }

    /// Concat(CNN, attention) → BN → dropout → Dense → ReLU → BN → dropout →
    /// output layer → softmax.
    pub fn forward(&self, f: &mut Forward, cnn: Var, att: Var) -> Result<Var> {
        let fused = f.tape.concat(&[cnn, att])?;
        if f.tape.shape(fused)[1] != self.fusion_dim {
            return Err(Error::shape("fusion", f.tape.shape(fused), &[self.fusion_dim]));
        }
        f.record("head.fusion", fused);
        let x = self.fusion_bn.apply(f, fused, None)?;
        let x = f.dropout(x, self.dropout)?;
        let x = self.dense.apply(f, x)?;
        let x = f.tape.relu(x);
        let x = self.dense_bn.apply(f, x, None)?;
        let x = f.dropout(x, self.dropout)?;
        f.record("head.dense", x);
        let logits = self.out.apply(f, x)?;
        let probs = f.tape.softmax(logits)?;
        f.record("head.softmax", probs);
        Ok(probs)
    }

    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        vec![
            ("head.fusion.bn".into(), vec![self.fusion_bn.gamma, self.fusion_bn.beta]),
            ("head.dense".into(), vec![self.dense.w, self.dense.b, self.dense_bn.gamma, self.dense_bn.beta]),
            ("head.out".into(), vec![self.out.w, self.out.b]),
        ]
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![labels.len(), classes]);
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Index { what: "label", index: y, len: classes });
        }
        t.data_mut()[r * classes + y] = 1.0;
    }
    Ok(t)
}

/// `(1 − ε)·y + ε/C` for one-hot rows.
pub fn smooth_targets(y: &Tensor, eps: f64) -> Result<Tensor> {
    if y.rank() != 2 {
        return Err(Error::Rank { op: "smooth_targets", expected: 2, shape: y.shape().to_vec() });
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} not in [0, 1)")));
    }
    let c = y.shape()[1];
    for (r, row) in y.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::Data(format!("target row {r} is not one-hot")));
        }
    }
    let data = y.data().iter().map(|&v| (1.0 - eps) * v + eps / c as f64).collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// `−(1/B) Σ_b Σ_c t_bc · ln max(p_bc, 1e-12)` on the tape.
pub fn cross_entropy(f: &mut Forward, probs: Var, targets: &Tensor) -> Result<Var> {
    let b = f.tape.shape(probs)[0];
    let logp = f.tape.log_clamped(probs, PROB_FLOOR);
    let t = f.tape.constant(targets.clone());
    let prod = f.tape.mul(logp, t)?;
    let s = f.tape.sum(prod);
    f.tape.scale(s, -1.0 / b as f64)
}

/// Same quantity evaluated directly on tensors.
pub fn cross_entropy_value(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    if probs.shape() != targets.shape() || probs.rank() != 2 {
        return Err(Error::shape("cross_entropy", probs.shape(), targets.shape()));
    }
    let b = probs.shape()[0] as f64;
    let s: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| t * p.max(PROB_FLOOR).ln())
        .sum();
    Ok(-s / b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_substitution() {
        let y = one_hot(&[0], 4).unwrap();
        let s = smooth_targets(&y, 0.2).unwrap();
        for (a, b) in s.data().iter().zip([0.85, 0.05, 0.05, 0.05]) {
            assert!((a - b).abs() < 1e-12);
        }
        let s3 = smooth_targets(&one_hot(&[2], 3).unwrap(), 0.2).unwrap();
        for (a, b) in s3.data().iter().zip([0.0667, 0.0667, 0.8667]) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(smooth_targets(&y, 0.0).unwrap(), y);
        assert!(smooth_targets(&Tensor::matrix(&[&[0.5, 0.5]]).unwrap(), 0.1).is_err());
    }

    #[test]
    fn loss_hand_values() {
        let t = smooth_targets(&one_hot(&[0], 4).unwrap(), 0.2).unwrap();
        let p = Tensor::matrix(&[&[0.7, 0.1, 0.1, 0.1]]).unwrap();
        let want = 0.85 * -(0.7f64.ln()) + 3.0 * 0.05 * -(0.1f64.ln());
        assert!((cross_entropy_value(&p, &t).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.6485).abs() < 1e-3);
        let uniform = Tensor::full(vec![1, 4], 0.25);
        assert!((cross_entropy_value(&uniform, &t).unwrap() - 4f64.ln()).abs() < 1e-9);
        // CE(p, p) = H(p)
        let h: f64 = t.data().iter().map(|&v| -v * v.ln()).sum();
        assert!((cross_entropy_value(&t, &t).unwrap() - h).abs() < 1e-12);
    }
}

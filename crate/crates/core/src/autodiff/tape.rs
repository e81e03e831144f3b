//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every operation evaluates eagerly and appends a node holding its output
//! and whatever the backward rule needs. `Tape::backward` replays the nodes
//! in reverse, accumulating vector-Jacobian products.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, transpose_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    MulConst { x: Var, factor: Vec<f64> },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Gelu { x: Var },
    Softmax { x: Var },
    LogClamped { x: Var, floor: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        // `None` in eval mode, where statistics are constants.
        row_weights: Option<Vec<f64>>,
        count: f64,
    },
    Conv1d { x: Var, w: Var, b: Var, batch: usize, len: usize, dim: usize, kernel: usize, filters: usize },
    MaxOverTime { x: Var, argmax: Vec<usize>, len: usize },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    SliceLast { x: Var, start: usize, width: usize, full: usize },
    SelectTime { x: Var, t: usize, len: usize, dim: usize },
    StackTime { parts: Vec<Var>, dim: usize },
    Reshape { x: Var },
    SplitHeads { x: Var, batch: usize, len: usize, heads: usize, head_dim: usize },
    MergeHeads { x: Var, batch: usize, len: usize, heads: usize, head_dim: usize },
    Gather { table: Var, ids: Vec<usize>, dim: usize },
    Sum { x: Var },
    SumSquares { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for updating
/// running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf (`Tape::leaf` / `Tape::param`); `None` if it does not
    /// require gradients. Leaves the loss does not depend on get zeros.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        let node = &tape.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn rank(op: &'static str, t: &Tensor, expected: usize) -> Result<()> {
    if t.rank() != expected {
        return Err(Error::Rank {
            op,
            expected,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter from the store. Buffers (non-trainable entries)
    /// become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product of `[N, m, k]` with `[N, k, n]`, or with `[N, n, k]`
    /// transposed when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        rank("bmm", av, 3)?;
        rank("bmm", bv, 3)?;
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if transpose_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bv.shape()[0] != batch || bk != k {
            return Err(Error::shape("bmm", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for s in 0..batch {
            let a_s = &ad[s * m * k..(s + 1) * m * k];
            let b_s = &bd[s * k * n..(s + 1) * k * n];
            let o_s = &mut out[s * m * n..(s + 1) * m * n];
            if transpose_b {
                matmul_a_bt_acc(a_s, b_s, o_s, m, n, k);
            } else {
                matmul_acc(a_s, b_s, o_s, m, k, n);
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::BatchMatMul { a, b, batch, m, k, n, transpose_b },
            &[a, b],
        ))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op_name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a `[n]` vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || xv.last_dim() != bv.numel() || xv.rank() == 0 {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let n = bv.numel();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x · W + b` over the last axis for any leading shape.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d_in = *shape.last().ok_or_else(|| Error::shape("linear", &shape, self.shape(w)))?;
        let rows = shape.iter().product::<usize>() / d_in.max(1);
        let flat = self.reshape(x, vec![rows, d_in])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        let d_out = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        self.reshape(y, out_shape)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale { x, c }, &[x]))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factor.len() != xv.numel() {
            return Err(Error::shape("mul_const", xv.shape(), &[factor.len()]));
        }
        let data = xv.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst { x, factor }, &[x]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Op::Gelu { x },
        )
    }

    /// Natural log of `max(x, floor)`.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, move |v| v.max(floor).ln(), Op::LogClamped { x, floor })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last axis, where entries with `keep[i] == false`
    /// are treated as scoring −∞ and receive exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(Error::Rank { op: "softmax", expected: 1, shape: vec![] });
        }
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        if let Some(keep) = keep {
            if keep.len() != xv.numel() {
                return Err(Error::shape("masked_softmax", xv.shape(), &[keep.len()]));
            }
        }
        let c = xv.last_dim();
        let mut out = vec![0.0; xv.numel()];
        for (r, (row, orow)) in xv.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let kept = |j: usize| keep.map_or(true, |k| k[r * c + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateAttention);
            }
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if kept(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// size `[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        ))
    }

    /// Training-mode batch normalization: per-feature (last axis) statistics
    /// over all leading positions, restricted to rows with `row_mask[r]` set.
    /// Every row is normalized with those statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        row_mask: Option<&[bool]>,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let f = xv.last_dim();
        if gv.numel() != f || bv.numel() != f || xv.rank() < 2 {
            return Err(Error::shape("batch_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / f;
        let weights: Vec<f64> = match row_mask {
            Some(m) if m.len() != rows => {
                return Err(Error::shape("batch_norm", xv.shape(), &[m.len()]))
            }
            Some(m) => m.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
            None => vec![1.0; rows],
        };
        let count = weights.iter().sum::<f64>();
        if count < 2.0 {
            return Err(Error::DegenerateBatch { rows: count as usize });
        }
        let data = xv.data();
        let mut mean = vec![0.0; f];
        for r in 0..rows {
            if weights[r] > 0.0 {
                for j in 0..f {
                    mean[j] += data[r * f + j];
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; f];
        for r in 0..rows {
            if weights[r] > 0.0 {
                for j in 0..f {
                    var[j] += (data[r * f + j] - mean[j]).powi(2);
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = normalize(data, &mean, &inv_std, gv.data(), bv.data());
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * count / (count - 1.0)).collect(),
            count: count as usize,
        };
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let var_out = self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, row_weights: Some(weights), count },
            &[x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let f = xv.last_dim();
        if gv.numel() != f || bv.numel() != f || mean.len() != f || var.len() != f {
            return Err(Error::shape("batch_norm", xv.shape(), gv.shape()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = normalize(xv.data(), mean, &inv_std, gv.data(), bv.data());
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, row_weights: None, count: 0.0 },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`. Identity (the
    /// same `Var`) in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let factor = (0..n)
            .map(|_| if rng.bernoulli(p) { 0.0 } else { scale })
            .collect();
        self.mul_const(x, factor)
    }

    /// Valid 1-D cross-correlation: `x[B, T, d]`, `w[d, k, F]`, `b[F]` →
    /// `[B, T-k+1, F]` with
    /// `out[b, t, j] = Σ_i Σ_m w[i, m, j] · x[b, t+m, i] + b[j]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        rank("conv1d", xv, 3)?;
        rank("conv1d", wv, 3)?;
        let (batch, len, dim) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (wd, kernel, filters) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if wd != dim || bv.shape() != [filters] {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        }
        if kernel == 0 || kernel > len {
            return Err(Error::SequenceTooShort { len, kernel });
        }
        let out_len = len - kernel + 1;
        let col = im2col(xv.data(), batch, len, dim, kernel);
        let rows = batch * out_len;
        let mut out = vec![0.0; rows * filters];
        matmul_acc(&col, wv.data(), &mut out, rows, dim * kernel, filters);
        for row in out.chunks_mut(filters) {
            for (o, &bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        let value = Tensor::new(vec![batch, out_len, filters], out)?;
        Ok(self.push(
            value,
            Op::Conv1d { x, w, b, batch, len, dim, kernel, filters },
            &[x, w, b],
        ))
    }

    /// Global max over the time axis: `[B, T, F]` → `[B, F]`.
    pub fn max_over_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        rank("max_over_time", xv, 3)?;
        let (batch, len, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if len == 0 {
            return Err(Error::SequenceTooShort { len, kernel: 1 });
        }
        let d = xv.data();
        let mut out = vec![f64::NEG_INFINITY; batch * f];
        let mut argmax = vec![0; batch * f];
        for b in 0..batch {
            for t in 0..len {
                for j in 0..f {
                    let v = d[(b * len + t) * f + j];
                    if v > out[b * f + j] {
                        out[b * f + j] = v;
                        argmax[b * f + j] = t;
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, f], out)?;
        Ok(self.push(value, Op::MaxOverTime { x, argmax, len }, &[x]))
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), widths }, parts))
    }

    /// Columns `start..start+width` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let full = xv.last_dim();
        if start + width > full || xv.rank() == 0 {
            return Err(Error::shape("slice_last", xv.shape(), &[start, width]));
        }
        let rows = xv.numel() / full;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * full + start..r * full + start + width]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SliceLast { x, start, width, full }, &[x]))
    }

    /// `x[:, t, :]` of a `[B, T, d]` tensor.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        rank("select_time", xv, 3)?;
        let (batch, len, dim) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if t >= len {
            return Err(Error::Index { what: "time step", index: t, len });
        }
        let mut out = Vec::with_capacity(batch * dim);
        for b in 0..batch {
            out.extend_from_slice(&xv.data()[(b * len + t) * dim..(b * len + t + 1) * dim]);
        }
        let value = Tensor::new(vec![batch, dim], out)?;
        Ok(self.push(value, Op::SelectTime { x, t, len, dim }, &[x]))
    }

    /// Stacks `T` tensors of shape `[B, d]` into `[B, T, d]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("stack of zero tensors".into()))?;
        let shape = self.shape(*first).to_vec();
        if shape.len() != 2 {
            return Err(Error::Rank { op: "stack_time", expected: 2, shape });
        }
        let (batch, dim) = (shape[0], shape[1]);
        let len = parts.len();
        let mut out = vec![0.0; batch * len * dim];
        for (t, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            if v.shape() != shape.as_slice() {
                return Err(Error::shape("stack_time", &shape, v.shape()));
            }
            for b in 0..batch {
                out[(b * len + t) * dim..(b * len + t + 1) * dim]
                    .copy_from_slice(&v.data()[b * dim..(b + 1) * dim]);
            }
        }
        let value = Tensor::new(vec![batch, len, dim], out)?;
        Ok(self.push(value, Op::StackTime { parts: parts.to_vec(), dim }, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// `[B, T, H·dh]` → `[B·H, T, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        rank("split_heads", xv, 3)?;
        let (batch, len, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("hidden size {d} not divisible by {heads} heads")));
        }
        let hd = d / heads;
        let src = xv.data();
        let mut out = vec![0.0; xv.numel()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let s = (b * len + t) * d + h * hd;
                    let o = ((b * heads + h) * len + t) * hd;
                    out[o..o + hd].copy_from_slice(&src[s..s + hd]);
                }
            }
        }
        let value = Tensor::new(vec![batch * heads, len, hd], out)?;
        Ok(self.push(
            value,
            Op::SplitHeads { x, batch, len, heads, head_dim: hd },
            &[x],
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        rank("merge_heads", xv, 3)?;
        let (bh, len, hd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if heads == 0 || bh % heads != 0 {
            return Err(Error::shape("merge_heads", xv.shape(), &[heads]));
        }
        let batch = bh / heads;
        let d = heads * hd;
        let src = xv.data();
        let mut out = vec![0.0; xv.numel()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let o = (b * len + t) * d + h * hd;
                    let s = ((b * heads + h) * len + t) * hd;
                    out[o..o + hd].copy_from_slice(&src[s..s + hd]);
                }
            }
        }
        let value = Tensor::new(vec![batch, len, d], out)?;
        Ok(self.push(
            value,
            Op::MergeHeads { x, batch, len, heads, head_dim: hd },
            &[x],
        ))
    }

    /// Row lookup: `table[V, d]` at `ids` → `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        rank("gather_rows", tv, 2)?;
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { what: "embedding", index: id, len: vocab });
            }
            out.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec(), dim }, &[table]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x }, &[x])
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Rank { op: "backward", expected: 0, shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Constant | Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass that also adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Returns the gradient buffer of `v`, allocating it lazily, or None if
        // `v` does not need a gradient.
        fn buf<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = node.value.data();

        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = buf(nodes, grads, *a) {
                    matmul_a_bt_acc(g, val(*b), ga, *m, *k, *n);
                }
                if let Some(gb) = buf(nodes, grads, *b) {
                    matmul_at_b_acc(val(*a), g, gb, *m, *k, *n);
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n, transpose_b } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = buf(nodes, grads, *a) {
                    let bd = val(*b);
                    for s in 0..*batch {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let b_s = &bd[s * k * n..(s + 1) * k * n];
                        let ga_s = &mut ga[s * m * k..(s + 1) * m * k];
                        if *transpose_b {
                            // out = a · bᵀ with b [n, k]: da = g · b
                            matmul_acc(g_s, b_s, ga_s, m, n, k);
                        } else {
                            matmul_a_bt_acc(g_s, b_s, ga_s, m, k, n);
                        }
                    }
                }
                if let Some(gb) = buf(nodes, grads, *b) {
                    let ad = val(*a);
                    for s in 0..*batch {
                        let g_s = &g[s * m * n..(s + 1) * m * n];
                        let a_s = &ad[s * m * k..(s + 1) * m * k];
                        let gb_s = &mut gb[s * k * n..(s + 1) * k * n];
                        if *transpose_b {
                            // db [n, k] = gᵀ · a
                            matmul_at_b_acc(g_s, a_s, gb_s, m, n, k);
                        } else {
                            matmul_at_b_acc(a_s, g_s, gb_s, m, k, n);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = buf(nodes, grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = buf(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
                if let Some(gb) = buf(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, d)| *o -= d);
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = buf(nodes, grads, *a) {
                    for ((o, d), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += d * y;
                    }
                }
                if let Some(gb) = buf(nodes, grads, *b) {
                    for ((o, d), x) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += d * x;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
                if let Some(gb) = buf(nodes, grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d * c);
                }
            }
            Op::MulConst { x, factor } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    for ((o, d), f) in gx.iter_mut().zip(g).zip(factor) {
                        *o += d * f;
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    for ((o, d), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if xv > 0.0 {
                            *o += d;
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    for ((o, d), y) in gx.iter_mut().zip(g).zip(out) {
                        *o += d * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    for ((o, d), y) in gx.iter_mut().zip(g).zip(out) {
                        *o += d * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu { x } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    for ((o, d), &v) in gx.iter_mut().zip(g).zip(val(*x)) {
                        let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dv = 0.5 * (1.0 + th)
                            + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += d * dv;
                    }
                }
            }
            Op::LogClamped { x, floor } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    for ((o, d), &v) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if v > *floor {
                            *o += d / v;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    let c = node.value.last_dim();
                    for ((grow, yrow), orow) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            orow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = node.value.last_dim();
                let gam = val(*gamma);
                if let Some(gg) = buf(nodes, grads, *gamma) {
                    for (r, grow) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += grow[j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = buf(nodes, grads, *beta) {
                    for grow in g.chunks(d) {
                        gb.iter_mut().zip(grow).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(gx) = buf(nodes, grads, *x) {
                    let n = d as f64;
                    for (r, grow) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        for j in 0..d {
                            let dxh = grow[j] * gam[j];
                            gx[r * d + j] += inv_std[r] / n * (n * dxh - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, row_weights, count } => {
                let f = node.value.last_dim();
                let rows = node.value.numel() / f;
                let gam = val(*gamma);
                if let Some(gg) = buf(nodes, grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..f {
                            gg[j] += g[r * f + j] * xhat[r * f + j];
                        }
                    }
                }
                if let Some(gb) = buf(nodes, grads, *beta) {
                    for grow in g.chunks(f) {
                        gb.iter_mut().zip(grow).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(gx) = buf(nodes, grads, *x) {
                    match row_weights {
                        None => {
                            for r in 0..rows {
                                for j in 0..f {
                                    gx[r * f + j] += g[r * f + j] * gam[j] * inv_std[j];
                                }
                            }
                        }
                        Some(w) => {
                            let mut s1 = vec![0.0; f];
                            let mut s2 = vec![0.0; f];
                            for r in 0..rows {
                                for j in 0..f {
                                    let dxh = g[r * f + j] * gam[j];
                                    s1[j] += dxh;
                                    s2[j] += dxh * xhat[r * f + j];
                                }
                            }
                            for r in 0..rows {
                                let wr = w[r] / count;
                                for j in 0..f {
                                    let dxh = g[r * f + j] * gam[j];
                                    gx[r * f + j] += inv_std[j]
                                        * (dxh - wr * (s1[j] + xhat[r * f + j] * s2[j]));
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, batch, len, dim, kernel, filters } => {
                let out_len = len - kernel + 1;
                let rows = batch * out_len;
                let dk = dim * kernel;
                if let Some(gb) = buf(nodes, grads, *b) {
                    for grow in g.chunks(*filters) {
                        gb.iter_mut().zip(grow).for_each(|(o, v)| *o += v);
                    }
                }
                if let Some(gw) = buf(nodes, grads, *w) {
                    let col = im2col(val(*x), *batch, *len, *dim, *kernel);
                    matmul_at_b_acc(&col, g, gw, rows, dk, *filters);
                }
                if let Some(gx) = buf(nodes, grads, *x) {
                    let mut dcol = vec![0.0; rows * dk];
                    matmul_a_bt_acc(g, val(*w), &mut dcol, rows, dk, *filters);
                    for bi in 0..*batch {
                        for t in 0..out_len {
                            let crow = &dcol[(bi * out_len + t) * dk..(bi * out_len + t + 1) * dk];
                            for i in 0..*dim {
                                for m in 0..*kernel {
                                    gx[(bi * len + t + m) * dim + i] += crow[i * kernel + m];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxOverTime { x, argmax, len } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    let f = node.value.last_dim();
                    for (idx, (&t, d)) in argmax.iter().zip(g).enumerate() {
                        let (b, j) = (idx / f, idx % f);
                        gx[(b * len + t) * f + j] += d;
                    }
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = buf(nodes, grads, *p) {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceLast { x, start, width, full } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    let rows = g.len() / width;
                    for r in 0..rows {
                        for c in 0..*width {
                            gx[r * full + start + c] += g[r * width + c];
                        }
                    }
                }
            }
            Op::SelectTime { x, t, len, dim } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    let batch = g.len() / dim;
                    for b in 0..batch {
                        for c in 0..*dim {
                            gx[(b * len + t) * dim + c] += g[b * dim + c];
                        }
                    }
                }
            }
            Op::StackTime { parts, dim } => {
                let len = parts.len();
                let batch = g.len() / (len * dim);
                for (t, p) in parts.iter().enumerate() {
                    if let Some(gp) = buf(nodes, grads, *p) {
                        for b in 0..batch {
                            for c in 0..*dim {
                                gp[b * dim + c] += g[(b * len + t) * dim + c];
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
            }
            Op::SplitHeads { x, batch, len, heads, head_dim } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    let d = heads * head_dim;
                    for b in 0..*batch {
                        for t in 0..*len {
                            for h in 0..*heads {
                                let s = (b * len + t) * d + h * head_dim;
                                let o = ((b * heads + h) * len + t) * head_dim;
                                for e in 0..*head_dim {
                                    gx[s + e] += g[o + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, batch, len, heads, head_dim } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    let d = heads * head_dim;
                    for b in 0..*batch {
                        for t in 0..*len {
                            for h in 0..*heads {
                                let o = (b * len + t) * d + h * head_dim;
                                let s = ((b * heads + h) * len + t) * head_dim;
                                for e in 0..*head_dim {
                                    gx[s + e] += g[o + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids, dim } => {
                if let Some(gt) = buf(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..*dim {
                            gt[id * dim + c] += g[r * dim + c];
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SumSquares { x } => {
                if let Some(gx) = buf(nodes, grads, *x) {
                    for (o, &v) in gx.iter_mut().zip(val(*x)) {
                        *o += 2.0 * v * g[0];
                    }
                }
            }
        }
    }
}

fn normalize(
    data: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let f = mean.len();
    let mut xhat = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for (r, row) in data.chunks(f).enumerate() {
        for j in 0..f {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat[r * f + j] = h;
            out[r * f + j] = gamma[j] * h + beta[j];
        }
    }
    (xhat, out)
}

/// Unfolds `[B, T, d]` into rows of `d·k` window values, column index `i·k + m`.
fn im2col(x: &[f64], batch: usize, len: usize, dim: usize, kernel: usize) -> Vec<f64> {
    let out_len = len - kernel + 1;
    let dk = dim * kernel;
    let mut col = vec![0.0; batch * out_len * dk];
    for b in 0..batch {
        for t in 0..out_len {
            let row = &mut col[(b * out_len + t) * dk..(b * out_len + t + 1) * dk];
            for m in 0..kernel {
                let src = &x[(b * len + t + m) * dim..(b * len + t + m + 1) * dim];
                for (i, &v) in src.iter().enumerate() {
                    row[i * kernel + m] = v;
                }
            }
        }
    }
    col
}

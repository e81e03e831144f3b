//! Forward-pass context and the small reusable layers.

use std::collections::HashMap;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One forward pass: the tape, the dropout stream, batch-norm statistics
/// gathered in training mode, and a trace of intermediate shapes.
pub struct Forward<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    pub training: bool,
    pub rng: Rng,
    pub bn_stats: Vec<(BatchNorm, BatchStats)>,
    pub trace: Vec<(String, Vec<usize>)>,
    cache: HashMap<ParamId, Var>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, training: bool, rng: Rng) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            training,
            rng,
            bn_stats: Vec::new(),
            trace: Vec::new(),
            cache: HashMap::new(),
        }
    }

    /// The tape variable of a parameter, recorded once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.cache.get(&id) {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.cache.insert(id, v);
        v
    }

    pub fn record(&mut self, name: &str, v: Var) {
        let shape = self.tape.shape(v).to_vec();
        self.trace.push((name.to_string(), shape));
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        let training = self.training;
        self.tape.dropout(x, p, &mut self.rng, training)
    }

    pub fn trace_shape(&self, name: &str) -> Option<&[usize]> {
        self.trace
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.as_slice())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Dense {
            w: store.add_xavier(&format!("{name}.w"), vec![d_in, d_out], d_in, d_out, rng),
            b: store.add_zeros(&format!("{name}.b"), vec![d_out]),
        }
    }

    pub fn apply(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.w), f.param(self.b));
        f.tape.linear(x, w, Some(b))
    }
}

/// Batch normalization over every leading position of the last axis, with
/// running estimates kept as buffers.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        BatchNorm {
            gamma: store.add_ones(&format!("{name}.gamma"), vec![dim]),
            beta: store.add_zeros(&format!("{name}.beta"), vec![dim]),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(vec![dim])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(vec![dim], 1.0)),
            eps,
        }
    }

    /// `rows` restricts the training statistics to the selected positions.
    pub fn apply(&self, f: &mut Forward, x: Var, rows: Option<&[bool]>) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        if f.training {
            let (y, stats) = f.tape.batch_norm_train(x, g, b, rows, self.eps)?;
            f.bn_stats.push((*self, stats));
            Ok(y)
        } else {
            let mean = f.store.value(self.running_mean).data().to_vec();
            let var = f.store.value(self.running_var).data().to_vec();
            f.tape.batch_norm_eval(x, g, b, &mean, &var, self.eps)
        }
    }
}

/// `running ← (1 − m)·running + m·batch` for every recorded batch norm.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(BatchNorm, BatchStats)], momentum: f64) {
    for (bn, s) in stats {
        for (r, &m) in store.value_mut(bn.running_mean).data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, &v) in store.value_mut(bn.running_var).data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

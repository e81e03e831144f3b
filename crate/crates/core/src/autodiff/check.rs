//! Finite-difference gradient checking.
//!
//! Numeric derivatives use the fourth-order central stencil
//! `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, which only evaluates
//! the forward pass and is therefore independent of every backward rule.

use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// The stencil's truncation error is O(h^4), negligible at this step; a
/// larger step would cross ReLU and max-pool kinks more often, a smaller one
/// amplifies roundoff.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms; below it the
/// numeric estimate is dominated by roundoff.
pub const ABS_FLOOR: f64 = 1e-6;

/// `|analytic - numeric| / max(|analytic|, |numeric|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

pub fn central_difference(x0: f64, h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let f2p = f(x0 + 2.0 * h)?;
    let f1p = f(x0 + h)?;
    let f1m = f(x0 - h)?;
    let f2m = f(x0 - 2.0 * h)?;
    // Differences first: exactly zero when the entry has no effect.
    Ok((8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * h))
}

/// Errors above this trigger a retry with a ten times narrower stencil.
pub const RETRY_ABOVE: f64 = 1e-5;

/// Numeric derivative compared against `analytic`, returning
/// `(numeric, relative_error)`.
///
/// ReLU and max-pool kinks, sharpened by batch norm over very few rows, can
/// sit inside the `±2h` stencil and corrupt the estimate. Such a kink rarely
/// also falls inside the narrower stencil, while a wrong backward rule
/// disagrees at every step, so the better of the two estimates is kept.
pub fn checked_difference(
    analytic: f64,
    x0: f64,
    h: f64,
    mut f: impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, f64)> {
    let wide = central_difference(x0, h, &mut f)?;
    let err = relative_error(analytic, wide);
    if err <= RETRY_ABOVE {
        return Ok((wide, err));
    }
    let narrow = central_difference(x0, h / 10.0, &mut f)?;
    let err_narrow = relative_error(analytic, narrow);
    Ok(if err_narrow < err { (narrow, err_narrow) } else { (wide, err) })
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// (flat index, analytic, numeric) of the worst entry.
    pub worst: (usize, f64, f64),
}

impl GradCheck {
    fn new(name: String) -> Self {
        GradCheck {
            name,
            entries: 0,
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        }
    }

    fn record(&mut self, idx: usize, analytic: f64, numeric: f64) {
        self.entries += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_error || self.entries == 1 {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = (idx, analytic, numeric);
        }
    }
}

/// Checks gradients of a scalar function of several input tensors.
///
/// `build` records the function on a fresh tape given one `Var` per input and
/// returns the scalar output.
pub fn check_inputs(
    inputs: &[Tensor],
    step: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<Vec<GradCheck>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.wrt(&tape, v).expect("leaf requires grad"))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut working = inputs.to_vec();
    let mut reports = Vec::new();
    for (n, grad) in analytic.iter().enumerate() {
        let mut report = GradCheck::new(format!("input{n}"));
        for i in 0..working[n].numel() {
            let x0 = working[n].data()[i];
            let numeric = central_difference(x0, step, |x| {
                working[n].data_mut()[i] = x;
                eval(&working)
            })?;
            working[n].data_mut()[i] = x0;
            report.record(i, grad.data()[i], numeric);
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Checks the analytic gradients already accumulated in `store` for the
/// given parameters against finite differences of `loss`.
///
/// At most `max_entries` randomly chosen entries of each parameter are
/// probed (all of them when the tensor is smaller).
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    max_entries: usize,
    step: f64,
    rng: &mut Rng,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<Vec<GradCheck>> {
    let mut reports = Vec::with_capacity(ids.len());
    for &id in ids {
        let numel = store.value(id).numel();
        let mut report = GradCheck::new(store.get(id).name.clone());
        let picks: Vec<usize> = if numel <= max_entries {
            (0..numel).collect()
        } else {
            let mut p = rng.sample_indices(numel, max_entries);
            p.sort_unstable();
            p
        };
        for i in picks {
            let analytic = store.grad(id).data()[i];
            let x0 = store.value(id).data()[i];
            let (numeric, _) = checked_difference(analytic, x0, step, |x| {
                store.value_mut(id).data_mut()[i] = x;
                loss(store)
            })?;
            store.value_mut(id).data_mut()[i] = x0;
            report.record(i, analytic, numeric);
        }
        reports.push(report);
    }
    Ok(reports)
}

pub fn max_error(reports: &[GradCheck]) -> f64 {
    reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

//! Central finite-difference verification of tape gradients.

use super::params::{Bound, ParameterStore};
use super::tape::{OpKind, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Largest admissible error (see [`entry_error`]).
    pub tol: f64,
    /// Check at most this many evenly spaced entries per parameter tensor.
    /// `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    /// Corrupt the backward pass of one primitive (negative controls).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-6,
            max_entries_per_param: None,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose ±h perturbation crossed a kink (relu, abs, soft
    /// threshold, corner ordering, SmoothL1 knee).
    pub excluded: usize,
    pub max_error: f64,
    pub worst: Option<EntryError>,
    pub tol: f64,
    pub passed: bool,
}

/// Error between an analytic and a numeric derivative: relative when either
/// magnitude exceeds one, absolute otherwise.
pub fn entry_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks the gradient of `f` with respect to every parameter entry.
pub fn gradcheck<F>(params: &ParameterStore, f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    gradcheck_with(
        params,
        f,
        &GradCheckOptions {
            h,
            tol,
            ..GradCheckOptions::default()
        },
    )
}

pub fn gradcheck_with<F>(
    params: &ParameterStore,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let eval = |store: &ParameterStore| -> Result<(f64, Vec<u8>)> {
        let mut tape = Tape::with_branch_tracking();
        let bound = store.bind(&mut tape);
        let out = f(&mut tape, &bound)?;
        let value = tape.value(out).item();
        Ok((value, tape.branch_signature().unwrap_or_default().to_vec()))
    };

    let mut tape = Tape::with_branch_tracking();
    if let Some(k) = opts.fault {
        tape.inject_fault(k);
    }
    let bound = params.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    let base_signature = tape.branch_signature().unwrap_or_default().to_vec();
    let grads = tape.backward(out)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        excluded: 0,
        max_error: 0.0,
        worst: None,
        tol: opts.tol,
        passed: true,
    };

    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let var = bound.get(&name)?;
        let n = params.value(&name)?.len();
        let analytic: Vec<f64> = match grads.get(var) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let stride = match opts.max_entries_per_param {
            Some(max) if max > 0 && n > max => n.div_ceil(max),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let original = params.value(&name)?.data()[idx];
            work.get_mut(&name)?.value.data_mut()[idx] = original + opts.h;
            let (plus, sig_plus) = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[idx] = original - opts.h;
            let (minus, sig_minus) = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(name));
            }
            if sig_plus != base_signature || sig_minus != base_signature {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let error = entry_error(analytic[idx], numeric);
            report.checked += 1;
            if error > report.max_error || report.worst.is_none() {
                report.max_error = report.max_error.max(error);
                report.worst = Some(EntryError {
                    param: name.clone(),
                    index: idx,
                    analytic: analytic[idx],
                    numeric,
                    error,
                });
            }
        }
    }
    report.passed = report.max_error <= opts.tol;
    Ok(report)
}

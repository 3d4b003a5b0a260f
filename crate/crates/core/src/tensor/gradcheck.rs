//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]: gradients smaller than this
/// are compared in absolute terms scaled by the floor.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub param: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst element.
    pub worst: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tolerance: f64,
    /// (parameter, element, analytic, numeric) for every element checked.
    pub samples: Vec<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value_ref().item()?;
    Ok(v)
}

/// Compare tape gradients of the scalar `f` against central differences.
///
/// `points` lists `(parameter, flat element)` pairs to check; `None`
/// checks every element of every parameter. Mismatches are reported, not
/// raised; only evaluation failures return `Err`.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor],
    points: Option<&[(usize, usize)]>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Contract(format!("step {h} outside (0, 1e-2]")));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    };
    let all: Vec<(usize, usize)>;
    let points = match points {
        Some(p) => p,
        None => {
            all = params
                .iter()
                .enumerate()
                .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        params: Vec::new(),
        tolerance: tol,
        samples: Vec::with_capacity(points.len()),
    };
    let mut work = params.to_vec();
    for &(pi, ei) in points {
        if pi >= params.len() || ei >= params[pi].numel() {
            return Err(Error::Contract(format!("check point ({pi}, {ei}) out of range")));
        }
        let orig = work[pi].data()[ei];
        work[pi].data_mut()[ei] = orig + h;
        let up = evaluate(&f, &work)?;
        work[pi].data_mut()[ei] = orig - h;
        let down = evaluate(&f, &work)?;
        work[pi].data_mut()[ei] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[pi].data()[ei];
        report.samples.push((pi, ei, a, numeric));
        let rel = relative_error(a, numeric);
        let abs = (a - numeric).abs();
        match report.params.iter_mut().find(|r| r.param == pi) {
            Some(r) => {
                r.checked += 1;
                r.max_abs_err = r.max_abs_err.max(abs);
                if rel > r.max_rel_err {
                    r.max_rel_err = rel;
                    r.worst = ei;
                }
            }
            None => report.params.push(ParamReport {
                param: pi,
                checked: 1,
                max_rel_err: rel,
                max_abs_err: abs,
                worst: ei,
            }),
        }
    }
    Ok(report)
}

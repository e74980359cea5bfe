//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};
use crate::tape::Var;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Gradients smaller than this are compared on an absolute scale; below
    /// it central differences are dominated by rounding in the objective.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided);
    /// `None` checks every entry.
    pub max_entries: Option<usize>,
    /// Corrupt the backward rule of one op by a factor (negative control).
    pub corrupt: Option<(&'static str, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_entries: None,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
    /// Names of parameters whose worst entry exceeded `tol`.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = f(&mut g)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of `f` against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every parameter entry.
pub fn finite_diff_check<F>(params: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        if let Some((op, factor)) = opts.corrupt {
            g.corrupt_rule(op, factor);
        }
        let loss = f(&mut g)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite("objective at base point".into()));
        }
        let grads = g.backward(loss)?;
        g.param_grads(&grads)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        eps: opts.eps,
        tol: opts.tol,
        params: Vec::new(),
        failures: Vec::new(),
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.len();
        let stride = match opts.max_entries {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for idx in (0..n).step_by(stride) {
            let orig = params.get(&name)?.data()[idx];
            work.get_mut(&name)?.data_mut()[idx] = orig + opts.eps;
            let plus = eval(&work, &f)?;
            work.get_mut(&name)?.data_mut()[idx] = orig - opts.eps;
            let minus = eval(&work, &f)?;
            work.get_mut(&name)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[&name].data()[idx];
            let rel = relative_error(a, numeric, opts.floor);
            check.checked += 1;
            if rel > check.max_rel_error || check.checked == 1 {
                check.max_rel_error = rel;
                check.worst_index = idx;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error < opts.tol;
        if !check.passed {
            report.failures.push(name.clone());
        }
        report.params.push(check);
    }
    Ok(report)
}

//! Central finite-difference checking of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::ParamStore;

/// `|a − n| / max(|a| + |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    /// Maximum error per name prefix (text before the first `.`).
    pub fn by_group(&self) -> Vec<(String, f64)> {
        let mut groups: Vec<(String, f64)> = Vec::new();
        for p in &self.params {
            let group = p.name.split('.').next().unwrap_or(&p.name).to_string();
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, e)) => *e = e.max(p.max_rel_error),
                None => groups.push((group, p.max_rel_error)),
            }
        }
        groups
    }
}

/// Analytic gradient of `f` for every parameter in `params`, dense.
pub fn analytic_gradients<F>(params: &ParamStore, f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    let grads = tape.backward(loss)?;
    Ok((0..params.len())
        .map(|id| {
            let n = params.by_id(id).numel();
            grads.param(id).map_or_else(|| vec![0.0; n], |g| g.to_dense(n))
        })
        .collect())
}

fn evaluate<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    let v = tape.scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check objective" });
    }
    Ok(v)
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every scalar parameter.
pub fn numeric_gradients<F>(params: &ParamStore, f: &F, step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in 0..params.len() {
        let n = params.by_id(id).numel();
        let mut g = Vec::with_capacity(n);
        for j in 0..n {
            let orig = work.by_id(id).values()[j];
            work.by_id_mut(id).values_mut()[j] = orig + step;
            let plus = evaluate(&work, f)?;
            work.by_id_mut(id).values_mut()[j] = orig - step;
            let minus = evaluate(&work, f)?;
            work.by_id_mut(id).values_mut()[j] = orig;
            g.push((plus - minus) / (2.0 * step));
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares analytic and numeric gradients parameter by parameter.
pub fn compare(params: &ParamStore, analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let checks = analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(id, (a, n))| {
            let mut worst = ParamCheck {
                name: params.name(id).to_string(),
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: a.first().copied().unwrap_or(0.0),
                numeric: n.first().copied().unwrap_or(0.0),
            };
            for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
                let e = relative_error(av, nv);
                if e > worst.max_rel_error {
                    worst.max_rel_error = e;
                    worst.worst_index = j;
                    worst.analytic = av;
                    worst.numeric = nv;
                }
            }
            worst
        })
        .collect();
    GradCheckReport { params: checks }
}

/// Checks the tape gradient of the scalar built by `f` against central differences.
pub fn grad_check<F>(params: &ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &f)?;
    let numeric = numeric_gradients(params, &f, step)?;
    Ok(compare(params, &analytic, &numeric))
}

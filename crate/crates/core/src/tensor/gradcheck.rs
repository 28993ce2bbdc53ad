//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Magnitude below which gradient entries are compared absolutely rather than
/// relatively. Matches the default step: a central difference at step 1e-5
/// cannot resolve smaller entries relatively.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: (usize, usize),
    /// Analytic and numeric values at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Compares analytic against numeric gradients entry by entry. Each item is
    /// `(input, coordinate, analytic, numeric)`.
    pub fn compare(entries: impl IntoIterator<Item = (usize, usize, f64, f64)>, tol: f64) -> Self {
        let mut r = GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: (0, 0),
            worst_values: (0.0, 0.0),
            checked: 0,
            tol,
            passed: true,
        };
        for (input, coord, a, n) in entries {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(REL_ERR_FLOOR);
            r.checked += 1;
            r.max_abs_err = r.max_abs_err.max(abs);
            if rel > r.max_rel_err || rel.is_nan() {
                r.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                r.worst = (input, coord);
                r.worst_values = (a, n);
            }
        }
        r.passed = r.max_rel_err <= tol;
        r
    }
}

/// Checks every coordinate of every input.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coords(&f, inputs, eps, tol, &coords)
}

/// Checks at most `per_input` randomly chosen coordinates of each input.
pub fn grad_check_sampled<T, F, R>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    tol: f64,
    per_input: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            let mut idx = sample(rng, n, per_input.min(n)).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_coords(&f, inputs, eps, tol, &coords)
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>], trainable: bool) -> Result<(Graph<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> =
        inputs.iter().map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) }).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Invalid("grad_check needs a scalar-valued function".into()));
    }
    Ok((g, vars, out))
}

fn check_coords<T, F>(f: &F, inputs: &[Tensor<T>], eps: f64, tol: f64, coords: &[Vec<usize>]) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let (mut g, vars, out) = evaluate(f, inputs, true)?;
    let grads = g.backward(out)?;
    let mut entries = Vec::new();
    let mut work = inputs.to_vec();
    for (k, idxs) in coords.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for &i in idxs {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + T::from_f64_lossy(eps);
            let (gp, _, op) = evaluate(f, &work, false)?;
            work[k].data_mut()[i] = x0 - T::from_f64_lossy(eps);
            let (gm, _, om) = evaluate(f, &work, false)?;
            work[k].data_mut()[i] = x0;
            let numeric = (gp.value(op).item().to_f64_lossy() - gm.value(om).item().to_f64_lossy()) / (2.0 * eps);
            entries.push((k, i, analytic.data()[i].to_f64_lossy(), numeric));
        }
    }
    Ok(GradCheckReport::compare(entries, tol))
}

//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the one-sided slopes disagree (a kink).
    pub kinks: usize,
    /// `(input, coordinate, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Compares analytic gradients of the scalar `f` with central differences
/// on every coordinate of every input that has `requires_grad`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(_, t)| t.requires_grad)
        .flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k)))
        .collect();
    grad_check_subset(f, inputs, &coords, eps)
}

/// As [`grad_check`] but only on the listed `(input, coordinate)` pairs.
pub fn grad_check_subset<F>(f: F, inputs: &[Tensor], coords: &[(usize, usize)], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let base = tape.scalar(out);
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(tape);

    let mut work = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        kinks: 0,
        worst: None,
    };
    for &(i, k) in coords {
        let x0 = work[i].data[k];
        work[i].data[k] = x0 + eps;
        let up = eval(&f, &work)?;
        work[i].data[k] = x0 - eps;
        let down = eval(&f, &work)?;
        work[i].data[k] = x0;
        let d_plus = (up - base) / eps;
        let d_minus = (base - down) / eps;
        if (d_plus - d_minus).abs() > 1e-2 * 1f64.max(d_plus.abs()).max(d_minus.abs()) {
            report.kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i][k];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((i, k, a, numeric));
        }
    }
    Ok(report)
}

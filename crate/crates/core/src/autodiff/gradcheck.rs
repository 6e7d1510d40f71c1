//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing analytic and numerical gradients.
///
/// The error per coordinate is `|a - n| / max(1, |a|, |n|)`: relative for
/// large gradients, absolute for small ones.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, coordinate)` of the worst error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Check `f` at a single input tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), h, tol, None)
}

/// Check `f` at several inputs. `coords`, when given, restricts the numerical
/// side to the listed `(input, coordinate)` pairs.
pub fn finite_diff_check_many<F>(
    f: F,
    xs: &[Tensor],
    h: f64,
    tol: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, xs)?;
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = xs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
                .collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        tol,
        passed: true,
    };
    let mut work: Vec<Tensor> = xs.to_vec();
    for &(i, k) in coords {
        let orig = work[i].data()[k];
        work[i].data_mut()[k] = orig + h;
        let plus = eval(&f, &work)?;
        work[i].data_mut()[k] = orig - h;
        let minus = eval(&f, &work)?;
        work[i].data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let e = rel_err(analytic[i].data()[k], numeric);
        report.checked += 1;
        if e > report.max_rel_err || e.is_nan() {
            report.max_rel_err = e;
            report.worst = (i, k);
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

fn eval<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let root = f(&mut g, &vars)?;
    Ok(g.value(root).item())
}

pub fn analytic_grads<F>(f: &F, xs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    Ok(vars.iter().map(|&v| g.grad_or_zeros(v)).collect())
}

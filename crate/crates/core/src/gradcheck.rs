//! Central finite-difference gradient checking in 64-bit.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Magnitudes below this are treated as this when forming relative errors.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((input, elem, analytic, numeric));
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval_loss<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.item(loss))
}

/// Analytic gradients of `f` at `inputs`.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Checks every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    check_gradients_at(inputs, &coords, eps, f)
}

/// Checks only the listed `(input, element)` coordinates.
pub fn check_gradients_at<F>(
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    eps: f64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for &(i, e) in coords {
        let orig = probe[i].data()[e];
        probe[i].data_mut()[e] = orig + eps;
        let plus = eval_loss(&probe, &f)?;
        probe[i].data_mut()[e] = orig - eps;
        let minus = eval_loss(&probe, &f)?;
        probe[i].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        report.record(i, e, analytic[i].data()[e], numeric);
    }
    Ok(report)
}

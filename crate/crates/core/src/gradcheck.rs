//! Central finite-difference check of graph gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Smallest denominator used in the relative error, so coordinates whose true
/// gradient is (numerically) zero are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// The denominator is also at least this fraction of the largest gradient
/// magnitude in the check. Coordinates many orders of magnitude below the
/// largest are dominated by finite-difference rounding noise (about
/// `eps * |f| / h`) and are compared against the gradient's overall scale.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// `(input index, flat coordinate)` where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, RELATIVE_ERROR_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of `build` against `(f(x+h) - f(x-h)) / 2h`
/// for every coordinate of every input. The error of a coordinate is
/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR, SCALE_FLOOR * max_j |a_j|)`.
///
/// `build` receives a fresh graph and one leaf per input and must return a
/// scalar. It is called `1 + 2 * coordinates` times and must be deterministic
/// (re-seed any dropout generator inside it).
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_at(inputs, h, &coords, build)
}

/// [`grad_check`] restricted to the `(input index, flat coordinate)` pairs in
/// `coords`. The scale floor still uses the full analytic gradient.
pub fn grad_check_at<F>(inputs: &[Tensor<f64>], h: f64, coords: &[(usize, usize)], build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("grad_check: step must be positive".into()));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out)
            .item()
            .ok_or_else(|| Error::InvalidArgument("grad_check: output is not scalar".into()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("leaf gradient"))
        .collect();

    let scale = analytic
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = RELATIVE_ERROR_FLOOR.max(SCALE_FLOOR * scale);

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        if i >= inputs.len() || j >= inputs[i].len() {
            return Err(Error::InvalidArgument(format!("grad_check: coordinate ({i}, {j}) out of range")));
        }
        let x0 = inputs[i].data()[j];
        probe[i].data_mut()[j] = x0 + h;
        let plus = eval(&probe)?;
        probe[i].data_mut()[j] = x0 - h;
        let minus = eval(&probe)?;
        probe[i].data_mut()[j] = x0;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i].data()[j];
        let err = relative_error_with_floor(a, numeric, floor);
        report.coordinates += 1;
        if err > report.max_relative_error || report.coordinates == 1 {
            report.max_relative_error = err;
            report.worst = (i, j);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Relative errors below this absolute denominator are measured against it.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Compares the analytic gradient of `f` at `point` against central
/// differences with the given `step`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_scaled(f, point, step, tolerance, 1.0)
}

/// [`grad_check`] with the analytic gradient multiplied by `corrupt`; used as a
/// negative control (any factor other than 1 should fail).
pub fn grad_check_scaled<F>(
    f: F,
    point: &Tensor,
    step: f64,
    tolerance: f64,
    corrupt: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok(scalar(&g, y))
    };

    let mut worst = (String::from("x"), 0);
    let mut max_err = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = relative_error(analytic.data()[i] * corrupt, numeric);
        if err > max_err {
            max_err = err;
            worst.1 = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_err,
        worst,
        checked: point.len(),
        pass: max_err < tolerance,
    })
}

/// Gradient check over every entry of a parameter store (or at most
/// `max_per_param` evenly spaced entries of each array).
pub fn grad_check_params<F>(
    f: F,
    params: &ParamStore,
    step: f64,
    tolerance: f64,
    max_per_param: usize,
    corrupt: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let y = f(&mut g, &bound)?;
    g.backward(y)?;
    let grads = bound.gradients(&g);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g);
        let y = f(&mut g, &b)?;
        Ok(scalar(&g, y))
    };

    let mut work = params.clone();
    let mut worst = (String::new(), 0);
    let mut max_err = 0.0f64;
    let mut checked = 0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).map_or(0, Tensor::len);
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let analytic = grads.get(&name).expect("every bound param has a gradient");
        for i in (0..n).step_by(stride) {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let err = relative_error(analytic.data()[i] * corrupt, numeric);
            checked += 1;
            if err > max_err {
                max_err = err;
                worst = (name.clone(), i);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_err,
        worst,
        checked,
        pass: max_err < tolerance,
    })
}

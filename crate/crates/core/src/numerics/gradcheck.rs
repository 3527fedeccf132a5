//! Central-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{FbsError, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / (|numeric| + 1e-8)` seen.
    pub max_rel_err: f64,
    /// (input index, flat coordinate) attaining the maximum.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Compares `analytic` against central differences of `f` around `inputs`.
///
/// `coords[i]` lists the flat coordinates of input `i` to probe; `None`
/// probes all of them.
pub fn grad_check_with<F>(
    inputs: &[Tensor],
    analytic: &[Tensor],
    coords: Option<&[Vec<usize>]>,
    h: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    for i in 0..inputs.len() {
        let all: Vec<usize>;
        let list = match coords {
            Some(c) => &c[i],
            None => {
                all = (0..inputs[i].len()).collect();
                &all
            }
        };
        for &j in list {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = f(&work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = f(&work)?;
            work[i].data_mut()[j] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(FbsError::NonFinite(format!(
                    "objective at input {i} coordinate {j}: f(+h)={fp}, f(-h)={fm}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / (numeric.abs() + 1e-8);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.coords_checked == 1 {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// Builds `f` on a fresh tape for both the analytic and the numeric side.
///
/// ```
/// use fbs_core::numerics::{grad_check, Tensor};
///
/// let w = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
/// let r = grad_check(&[w], 1e-5, |g, v| {
///     let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
///     let y = g.mul(v[0], x)?;
///     Ok(g.sum(y))
/// })
/// .unwrap();
/// assert!(r.max_rel_err <= 1e-10);
/// ```
pub fn grad_check<F>(params: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(FbsError::NonFinite(format!("objective at base point: {v}")));
    }
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    grad_check_with(params, &analytic, None, h, |ps| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    })
}

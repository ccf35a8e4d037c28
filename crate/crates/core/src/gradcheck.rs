//! Central-difference gradient checking.
//!
//! The check rebuilds the graph in `f64` for every probe, compares analytic
//! gradients against `(f(x + eps) - f(x - eps)) / (2 eps)` per scalar and
//! reports the maximum relative error with denominator
//! `max(|analytic|, |numeric|, 1e-8)`. Non-finite values encountered while
//! probing are reported as a fault rather than a panic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, GradientSet, NodeId};
use crate::params::{ParamNodes, ParameterSet};
use crate::tensor::Tensor;

/// Closure that rebuilds the computation and returns the scalar loss node.
pub type BuildFn<'a> = dyn Fn(&mut Graph<f64>, &ParamNodes) -> Result<NodeId> + 'a;

const REL_ERR_FLOOR: f64 = 1e-8;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per parameter, sorted by name.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub eps: f64,
    pub tol: f64,
    pub pass: bool,
    /// Set when probing produced a non-finite value; the check fails.
    pub fault: Option<String>,
}

impl GradCheckReport {
    fn fault(eps: f64, tol: f64, message: String) -> Self {
        GradCheckReport {
            per_param: BTreeMap::new(),
            max_rel_err: f64::INFINITY,
            eps,
            tol,
            pass: false,
            fault: Some(message),
        }
    }
}

fn eval(build: &BuildFn, params: &ParameterSet<f64>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let nodes = params.register(&mut g);
    let loss = build(&mut g, &nodes)?;
    let v = g.value(loss);
    if !v.is_scalar_shaped() {
        return Err(Error::contract(format!(
            "grad_check: loss must be scalar-shaped, got {:?}",
            v.shape()
        )));
    }
    let out = v.data()[0];
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {out}")));
    }
    Ok(out)
}

/// Analytic gradients of `build` at `params` via the reverse sweep.
pub fn analytic_gradients(
    build: &BuildFn,
    params: &ParameterSet<f64>,
) -> Result<GradientSet<f64>> {
    let mut g = Graph::<f64>::new();
    let nodes = params.register(&mut g);
    let loss = build(&mut g, &nodes)?;
    g.backward(loss)
}

/// Central-difference gradients of `build` at `params`.
pub fn numeric_gradients(
    build: &BuildFn,
    params: &ParameterSet<f64>,
    eps: f64,
) -> Result<GradientSet<f64>> {
    let mut out = GradientSet::new();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let base = params.get(&name)?.clone();
        let mut grad = vec![0.0f64; base.numel()];
        for i in 0..base.numel() {
            let mut probe = params.clone();
            let mut plus = base.data().to_vec();
            plus[i] += eps;
            *probe.get_mut(&name)? = Tensor::from_vec(base.shape(), plus)?;
            let f_plus = eval(build, &probe)?;

            let mut minus = base.data().to_vec();
            minus[i] -= eps;
            *probe.get_mut(&name)? = Tensor::from_vec(base.shape(), minus)?;
            let f_minus = eval(build, &probe)?;

            grad[i] = (f_plus - f_minus) / (2.0 * eps);
        }
        out.insert(name, Tensor::from_vec(base.shape(), grad)?);
    }
    Ok(out)
}

/// Compare two gradient sets, reporting the worst relative error.
pub fn compare_gradients(
    analytic: &GradientSet<f64>,
    numeric: &GradientSet<f64>,
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    let mut per_param = BTreeMap::new();
    let mut max_rel_err = 0.0f64;
    let mut fault = None;
    for (name, a) in analytic {
        let n = &numeric[name];
        let mut worst = 0.0f64;
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            if !av.is_finite() || !nv.is_finite() {
                fault = Some(format!("non-finite gradient for {name}"));
                worst = f64::INFINITY;
                break;
            }
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(REL_ERR_FLOOR);
            worst = worst.max(rel);
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.insert(name.clone(), worst);
    }
    let pass = fault.is_none() && max_rel_err < tol;
    GradCheckReport { per_param, max_rel_err, eps, tol, pass, fault }
}

/// Full check: analytic vs central differences at tolerance `tol`.
///
/// Faults (non-finite values during probing) come back as a failing report,
/// not an error.
pub fn grad_check(build: &BuildFn, params: &ParameterSet<f64>, eps: f64, tol: f64) -> GradCheckReport {
    let analytic = match analytic_gradients(build, params) {
        Ok(a) => a,
        Err(e) => return GradCheckReport::fault(eps, tol, e.to_string()),
    };
    let numeric = match numeric_gradients(build, params, eps) {
        Ok(n) => n,
        Err(e) => return GradCheckReport::fault(eps, tol, e.to_string()),
    };
    compare_gradients(&analytic, &numeric, eps, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(g: &mut Graph<f64>, nodes: &ParamNodes) -> Result<NodeId> {
        let x = nodes["x"];
        let sq = g.mul(x, x)?;
        g.sum_all(sq)
    }

    #[test]
    fn sum_of_squares_passes() {
        let mut params = ParameterSet::new();
        params
            .insert("x", Tensor::rand_uniform(&[6], -2.0, 2.0, 17).unwrap())
            .unwrap();
        let report = grad_check(&sum_of_squares, &params, 1e-5, 1e-7);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-7);
    }

    #[test]
    fn constant_function_passes_with_zero_gradients() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::rand_uniform(&[3], -1.0, 1.0, 2).unwrap()).unwrap();
        let build = |g: &mut Graph<f64>, _nodes: &ParamNodes| {
            let c = g.constant(Tensor::scalar(4.0));
            g.scale(c, 1.0)
        };
        let report = grad_check(&build, &params, 1e-5, 1e-7);
        assert!(report.pass);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        let mut params = ParameterSet::new();
        params
            .insert("x", Tensor::rand_uniform(&[4], -2.0, 2.0, 5).unwrap())
            .unwrap();
        let mut analytic = analytic_gradients(&sum_of_squares, &params).unwrap();
        // Inject +0.1 into one gradient entry.
        let broken = analytic["x"].clone();
        let mut data = broken.into_data();
        data[2] += 0.1;
        analytic.insert("x".into(), Tensor::from_vec(&[4], data).unwrap());
        let numeric = numeric_gradients(&sum_of_squares, &params, 1e-5).unwrap();
        let report = compare_gradients(&analytic, &numeric, 1e-5, 1e-4);
        assert!(!report.pass);
    }

    #[test]
    fn non_finite_probe_is_a_fault_not_a_crash() {
        let mut params = ParameterSet::new();
        params.insert("x", Tensor::from_vec(&[1], vec![0.0]).unwrap()).unwrap();
        // log(x) at x=0 probes log(-eps) = NaN.
        let build = |g: &mut Graph<f64>, nodes: &ParamNodes| {
            let l = g.log(nodes["x"])?;
            g.sum_all(l)
        };
        let report = grad_check(&build, &params, 1e-5, 1e-4);
        assert!(!report.pass);
        assert!(report.fault.is_some());
    }
}

//! Central finite-difference verification of tape gradients.

use super::graph::{Graph, Var};
use super::tensor::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: T,
    pub numeric: T,
    /// Number of scalar coordinates compared.
    pub checked: usize,
    /// Coordinates re-measured at smaller steps after a miss.
    pub kinks: usize,
    pub passed: bool,
}

/// Relative error with a small absolute floor so that vanishing gradients
/// are compared on an absolute scale.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::lit(1e-3));
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `f` against central differences over every
/// coordinate of every parameter in `params`.
pub fn gradient_check<T, F>(f: F, params: &ParamStore<T>, eps: T, tol: T) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    check_impl(f, params, eps, tol, None, false)
}

/// Like [`gradient_check`] but compares at most `per_param` coordinates of
/// each parameter (an evenly spaced subset, always including the first and
/// last element).
pub fn gradient_check_strided<T, F>(
    f: F,
    params: &ParamStore<T>,
    eps: T,
    tol: T,
    per_param: usize,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    check_impl(f, params, eps, tol, Some(per_param.max(1)), false)
}

/// Strided check for piecewise-smooth objectives (relu networks), where a
/// step can straddle activation kinks. A coordinate that misses is
/// re-measured at `eps/10` and `eps/100` and the closest estimate is kept;
/// a wrong gradient misses at every scale.
pub fn gradient_check_piecewise<T, F>(
    f: F,
    params: &ParamStore<T>,
    eps: T,
    tol: T,
    per_param: usize,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    check_impl(f, params, eps, tol, Some(per_param.max(1)), true)
}

fn check_impl<T, F>(
    mut f: F,
    params: &ParamStore<T>,
    eps: T,
    tol: T,
    per_param: Option<usize>,
    kink_retry: bool,
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if !(eps > T::zero()) {
        return Err(Error::Config("gradient_check: eps must be positive".into()));
    }
    let mut g = Graph::new();
    let root = f(&mut g, params)?;
    g.check_finite(root, "gradient_check objective")?;
    let grads = g.backward(root)?;
    let mut analytic: Vec<(String, Vec<T>)> = Vec::new();
    for (name, t) in params.iter() {
        let bound = g.bound_params().find(|(n, _)| *n == name).map(|(_, v)| v);
        let ga = bound
            .and_then(|v| grads.wrt(v).map(<[T]>::to_vec))
            .unwrap_or_else(|| vec![T::zero(); t.numel()]);
        analytic.push((name.to_owned(), ga));
    }

    let mut work = params.clone();
    let mut eval = |store: &ParamStore<T>| -> Result<T> {
        let mut g = Graph::new();
        let root = f(&mut g, store)?;
        let v = g.item(root);
        if !v.is_finite() {
            return Err(Error::Numerical("gradient_check: non-finite objective under perturbation".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst_param: String::new(),
        worst_index: 0,
        analytic: T::zero(),
        numeric: T::zero(),
        checked: 0,
        kinks: 0,
        passed: true,
    };
    for (name, ga) in &analytic {
        let n = ga.len();
        let coords: Vec<usize> = match per_param {
            Some(m) if m < n => {
                let mut c: Vec<usize> = (0..m).map(|i| i * (n - 1) / (m - 1).max(1)).collect();
                c.dedup();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = work.get(name).expect("param present").data()[idx];
            let mut numeric = central(&mut work, &mut eval, name, idx, orig, eps)?;
            let mut err = relative_error(ga[idx], numeric);
            if kink_retry && err > tol {
                report.kinks += 1;
                let mut h = eps;
                for _ in 0..2 {
                    h = h / T::lit(10.0);
                    let n = central(&mut work, &mut eval, name, idx, orig, h)?;
                    let e = relative_error(ga[idx], n);
                    if e < err {
                        err = e;
                        numeric = n;
                    }
                }
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = ga[idx];
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// `(f(x+h) − f(x−h)) / 2h`, restoring `x`.
fn central<T: Scalar>(
    work: &mut ParamStore<T>,
    eval: &mut impl FnMut(&ParamStore<T>) -> Result<T>,
    name: &str,
    idx: usize,
    orig: T,
    h: T,
) -> Result<T> {
    work.get_mut(name).expect("param present").data_mut()[idx] = orig + h;
    let fp = eval(work)?;
    work.get_mut(name).expect("param present").data_mut()[idx] = orig - h;
    let fm = eval(work)?;
    work.get_mut(name).expect("param present").data_mut()[idx] = orig;
    Ok((fp - fm) / (T::lit(2.0) * h))
}

//! Central-difference gradient oracle.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Options for [`grad_check_with`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation size; must lie in `[1e-6, 1e-4]`.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is near zero are compared absolutely.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst entry per parameter.
    pub per_param: BTreeMap<String, EntryError>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    /// Name and worst entry of the parameter with the largest error.
    pub fn worst(&self) -> Option<(&str, &EntryError)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.rel_error.total_cmp(&b.1.rel_error))
            .map(|(k, v)| (k.as_str(), v))
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::InvalidArgument(format!("grad_check needs a scalar, got {:?}", v.shape())));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("grad_check oracle: f evaluated to {y}")));
    }
    Ok(y)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every entry of every parameter in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    grad_check_with(
        f,
        params,
        &GradCheckOptions {
            eps,
            tol,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.eps) {
        return Err(Error::InvalidArgument(format!("eps {} outside [1e-6, 1e-4]", opts.eps)));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        if !g.value(out).is_finite() {
            return Err(Error::NonFinite("grad_check oracle: f is not finite".into()));
        }
        g.backward(out)?
    };

    let mut work = params.clone();
    let mut per_param = BTreeMap::new();
    let mut max_rel_error = 0.0f64;
    let mut entries_checked = 0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let base = params.get(&name)?.clone();
        let n = base.numel();
        let stride = match opts.max_entries {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        let mut worst: Option<EntryError> = None;
        for index in (0..n).step_by(stride) {
            let a = analytic.param(&name).map_or(0.0, |t| t.data()[index]);
            let orig = base.data()[index];
            let mut plus = base.clone();
            plus.data_mut()[index] = orig + opts.eps;
            work.set(&name, plus)?;
            let fp = evaluate(&f, &work)?;
            let mut minus = base.clone();
            minus.data_mut()[index] = orig - opts.eps;
            work.set(&name, minus)?;
            let fm = evaluate(&f, &work)?;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let rel_error = relative_error(a, numeric, opts.floor);
            entries_checked += 1;
            max_rel_error = max_rel_error.max(rel_error);
            if worst.as_ref().is_none_or(|w| rel_error > w.rel_error) {
                worst = Some(EntryError {
                    index,
                    analytic: a,
                    numeric,
                    rel_error,
                });
            }
        }
        work.set(&name, base)?;
        if let Some(w) = worst {
            per_param.insert(name, w);
        }
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tol: opts.tol,
        entries_checked,
    })
}

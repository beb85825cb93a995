//! Central finite-difference verification of analytic gradients.

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Anything that owns a [`ParamStore`] the checker may perturb in place.
pub trait ParamHost<T: Scalar> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
}

impl<T: Scalar> ParamHost<T> for ParamStore<T> {
    fn store(&self) -> &ParamStore<T> {
        self
    }
    fn store_mut(&mut self) -> &mut ParamStore<T> {
        self
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Times the step is divided by ten when a difference straddles a relu kink.
const KINK_RETRIES: usize = 3;

/// Finite-difference formula used as the reference derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h²).
    Central,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, truncation error
    /// O(h⁴). Lets deep, strongly curved losses use a step large enough to
    /// keep rounding noise off near-zero gradients.
    FourthOrder,
}

/// [`grad_check_with`] using the two-point [`Stencil::Central`] difference.
pub fn grad_check<T, H, F>(
    host: &mut H,
    params: &[ParamId],
    eps: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    H: ParamHost<T>,
    F: FnMut(&H, &mut Graph<T>) -> Result<NodeId>,
{
    grad_check_with(host, params, Stencil::Central, eps, tol, f)
}

/// Compares the analytic gradient of the scalar built by `f` against a
/// central finite difference for every entry of `params`. `f` must be deterministic: any
/// randomness (dropout masks) has to be re-seeded identically on each call.
///
/// A central difference across a relu kink measures a one-sided slope mix,
/// not the derivative, so when either probe flips a relu input relative to
/// the unperturbed pass the step is shrunk and the entry probed again.
pub fn grad_check_with<T, H, F>(
    host: &mut H,
    params: &[ParamId],
    stencil: Stencil,
    eps: f64,
    tol: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    H: ParamHost<T>,
    F: FnMut(&H, &mut Graph<T>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(host, &mut g)?;
    let kinks = g.kink_pattern();
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&pid| match g.param_node(pid).and_then(|n| g.grad(n)) {
            Some(t) => t.to_f64_vec(),
            None => vec![0.0; host.store().value(pid).len()],
        })
        .collect();
    drop(g);

    let mut eval = |host: &H| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let l = f(host, &mut g)?;
        Ok((g.value(l).item().as_f64(), g.kink_pattern() == kinks))
    };

    let mut out = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (&pid, ana) in params.iter().zip(&analytic) {
        let name = host.store().name(pid).to_string();
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (k, &a) in ana.iter().enumerate() {
            let orig = host.store().value(pid).data()[k];
            let mut h = eps;
            let mut numeric = f64::NAN;
            for attempt in 0..=KINK_RETRIES {
                let mut probe = |offset: f64| -> Result<(f64, bool)> {
                    host.store_mut().value_mut(pid).data_mut()[k] = orig + T::of(offset);
                    let r = eval(host);
                    host.store_mut().value_mut(pid).data_mut()[k] = orig;
                    r
                };
                let (p1, s1) = probe(h)?;
                let (m1, s2) = probe(-h)?;
                let smooth = match stencil {
                    Stencil::Central => {
                        numeric = (p1 - m1) / (2.0 * h);
                        s1 && s2
                    }
                    Stencil::FourthOrder => {
                        let (p2, s3) = probe(2.0 * h)?;
                        let (m2, s4) = probe(-2.0 * h)?;
                        numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                        s1 && s2 && s3 && s4
                    }
                };
                if smooth || attempt == KINK_RETRIES {
                    break;
                }
                h /= 10.0;
            }
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of `{name}`[{k}] (analytic {a}, numeric {numeric})"
                )));
            }
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_error || k == 0 {
                check.max_rel_error = rel;
                check.worst_index = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        overall = overall.max(check.max_rel_error);
        out.push(check);
    }
    Ok(GradCheckReport {
        params: out,
        max_rel_error: overall,
        tol,
        passed: overall <= tol,
    })
}

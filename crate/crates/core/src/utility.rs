//! Per-bank utility functions and their convex conjugates.
//!
//! A utility `u` is strictly increasing, strictly concave and satisfies the
//! Inada conditions `u'(-inf) = +inf`, `u'(+inf) = 0`. Its conjugate is
//! `v(y) = sup_x { u(x) - x y }` for `y > 0`, with `v'(y) = -(u')^{-1}(y)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Doubling cap for the bracket search of the marginal-utility inversion.
pub const MAX_DOUBLINGS: usize = 200;

/// Relative tolerance on `u'(x) = y` in the general conjugate path.
pub const INVERSION_RTOL: f64 = 1e-12;

/// A utility supplied only through its value and marginal.
///
/// Implementations are treated as opaque by every engine: no closed form is
/// ever derived from them.
pub trait MarginalUtility: Send + Sync + fmt::Debug {
    fn value(&self, x: f64) -> f64;

    /// `u'(x)`, strictly positive and strictly decreasing.
    fn marginal(&self, x: f64) -> f64;

    /// `ln u'(x)`. Override when `u'` under- or overflows in the tails.
    fn ln_marginal(&self, x: f64) -> f64 {
        self.marginal(x).ln()
    }

    /// `u''(x)` when known analytically.
    fn curvature(&self, _x: f64) -> Option<f64> {
        None
    }

    /// `u(+inf)`; may be `+inf`.
    fn supremum(&self) -> f64;
}

/// `u(x) = -exp(-alpha x) / alpha` exposed only through [`MarginalUtility`],
/// so that the generic machinery can be checked against the closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpaqueExponential {
    pub alpha: f64,
}

impl MarginalUtility for OpaqueExponential {
    fn value(&self, x: f64) -> f64 {
        -(-self.alpha * x).exp() / self.alpha
    }

    fn marginal(&self, x: f64) -> f64 {
        (-self.alpha * x).exp()
    }

    fn ln_marginal(&self, x: f64) -> f64 {
        -self.alpha * x
    }

    fn curvature(&self, x: f64) -> Option<f64> {
        Some(-self.alpha * (-self.alpha * x).exp())
    }

    fn supremum(&self) -> f64 {
        0.0
    }
}

/// `u(x) = -sum_i w_i exp(-a_i x) / a_i` with `w_i, a_i > 0`.
///
/// Has no closed-form conjugate when more than one rate is present.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentialMixture {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

impl ExponentialMixture {
    pub fn new(weights: Vec<f64>, rates: Vec<f64>) -> Self {
        Self { weights, rates }
    }
}

impl MarginalUtility for ExponentialMixture {
    fn value(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.rates)
            .map(|(w, a)| -w * (-a * x).exp() / a)
            .sum()
    }

    fn marginal(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.rates)
            .map(|(w, a)| w * (-a * x).exp())
            .sum()
    }

    fn ln_marginal(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.rates)
            .map(|(w, a)| w.ln() - a * x)
            .collect();
        crate::prob::log_sum_exp(&terms)
    }

    fn curvature(&self, x: f64) -> Option<f64> {
        Some(
            self.weights
                .iter()
                .zip(&self.rates)
                .map(|(w, a)| -w * a * (-a * x).exp())
                .sum(),
        )
    }

    fn supremum(&self) -> f64 {
        0.0
    }
}

/// Utility of a single bank.
#[derive(Clone, Debug)]
pub enum Utility {
    /// `u(x) = -exp(-alpha x) / alpha`, eligible for the closed-form engine.
    Exponential { alpha: f64 },
    General(Arc<dyn MarginalUtility>),
}

/// Value and slope of the conjugate at one dual point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conjugate {
    /// `v(y)`
    pub value: f64,
    /// `v'(y)`
    pub slope: f64,
}

impl Utility {
    pub fn exponential(alpha: f64) -> Self {
        Utility::Exponential { alpha }
    }

    pub fn general<U: MarginalUtility + 'static>(u: U) -> Self {
        Utility::General(Arc::new(u))
    }

    /// Risk aversion if this is a closed-form exponential.
    pub fn alpha(&self) -> Option<f64> {
        match self {
            Utility::Exponential { alpha } => Some(*alpha),
            Utility::General(_) => None,
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            Utility::Exponential { alpha } => -(-alpha * x).exp() / alpha,
            Utility::General(u) => u.value(x),
        }
    }

    pub fn marginal(&self, x: f64) -> f64 {
        match self {
            Utility::Exponential { alpha } => (-alpha * x).exp(),
            Utility::General(u) => u.marginal(x),
        }
    }

    fn ln_marginal(&self, x: f64) -> f64 {
        match self {
            Utility::Exponential { alpha } => -alpha * x,
            Utility::General(u) => u.ln_marginal(x),
        }
    }

    /// `u''(x)`, by central difference of `u'` when no analytic form exists.
    pub fn curvature(&self, x: f64) -> f64 {
        match self {
            Utility::Exponential { alpha } => -alpha * (-alpha * x).exp(),
            Utility::General(u) => u.curvature(x).unwrap_or_else(|| {
                let h = 1e-5 * (1.0 + x.abs());
                (u.marginal(x + h) - u.marginal(x - h)) / (2.0 * h)
            }),
        }
    }

    /// `u(+inf)`, which also equals `v(0+)`.
    pub fn supremum(&self) -> f64 {
        match self {
            Utility::Exponential { .. } => 0.0,
            Utility::General(u) => u.supremum(),
        }
    }

    /// Checks the standing assumptions; `probes` are the points at which a
    /// general utility's monotonicity is sampled.
    pub(crate) fn check(&self, probes: &[f64]) -> std::result::Result<(), String> {
        match self {
            Utility::Exponential { alpha } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return Err(format!("alpha must be finite and positive, got {alpha}"));
                }
                Ok(())
            }
            Utility::General(u) => {
                let mut pts = probes.to_vec();
                pts.sort_by(f64::total_cmp);
                pts.dedup();
                let mut prev: Option<(f64, f64, f64)> = None;
                for &x in &pts {
                    let (val, mu) = (u.value(x), u.marginal(x));
                    if !(mu.is_finite() && mu > 0.0) {
                        return Err(format!("u'({x}) = {mu} is not positive and finite"));
                    }
                    if let Some((px, pv, pm)) = prev {
                        if mu >= pm {
                            return Err(format!("u' not strictly decreasing between {px} and {x}"));
                        }
                        if val <= pv {
                            return Err(format!("u not strictly increasing between {px} and {x}"));
                        }
                    }
                    prev = Some((x, val, mu));
                }
                Ok(())
            }
        }
    }

    /// `v'(y) = -(u')^{-1}(y)` for `y > 0`.
    pub fn conjugate_slope(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::NonPositiveDual(y));
        }
        match self {
            Utility::Exponential { alpha } => Ok(y.ln() / alpha),
            Utility::General(_) => Ok(-self.invert_marginal(y)?),
        }
    }

    /// Evaluates `(v(y), v'(y))`.
    pub fn conjugate(&self, y: f64) -> Result<Conjugate> {
        conjugate_eval(self, y)
    }

    /// Solves `u'(x) = y` in log space: bracket by doubling away from zero,
    /// then Illinois-modified regula falsi inside the bracket.
    fn invert_marginal(&self, y: f64) -> Result<f64> {
        let target = y.ln();
        let f = |x: f64| self.ln_marginal(x) - target;

        let f0 = f(0.0);
        if f0 == 0.0 {
            return Ok(0.0);
        }
        // u' decreasing: f0 > 0 means the root lies to the right.
        let dir = if f0 > 0.0 { 1.0 } else { -1.0 };
        let (mut near, mut f_near) = (0.0, f0);
        let mut step = 1.0;
        let mut far = None;
        for _ in 0..MAX_DOUBLINGS {
            let x = dir * step;
            let fx = f(x);
            if fx.is_nan() {
                return Err(Error::InversionFailure(y));
            }
            if fx == 0.0 {
                return Ok(x);
            }
            if fx.signum() != f0.signum() {
                far = Some((x, fx));
                break;
            }
            near = x;
            f_near = fx;
            step *= 2.0;
        }
        let (far, f_far) = far.ok_or(Error::InversionFailure(y))?;

        let (mut a, mut fa, mut b, mut fb) = (near, f_near, far, f_far);
        let mut side = 0i8;
        for _ in 0..400 {
            let mut x = b - fb * (b - a) / (fb - fa);
            if !x.is_finite() || x <= a.min(b) || x >= a.max(b) {
                x = 0.5 * (a + b);
            }
            let fx = f(x);
            if inverted(fx) || (b - a).abs() <= 4.0 * f64::EPSILON * x.abs().max(1e-300) {
                return Ok(x);
            }
            if fx.signum() == fb.signum() {
                b = x;
                fb = fx;
                if side == -1 {
                    fa *= 0.5;
                }
                side = -1;
            } else {
                a = x;
                fa = fx;
                if side == 1 {
                    fb *= 0.5;
                }
                side = 1;
            }
        }
        Err(Error::InversionFailure(y))
    }
}

/// `|exp(r) - 1| <= INVERSION_RTOL` for a log-space residual `r`.
fn inverted(r: f64) -> bool {
    r.exp_m1().abs() <= INVERSION_RTOL
}

/// Conjugate value and slope at `y > 0`.
///
/// General utilities go through the identity `v(y) = u(-v'(y)) + y v'(y)`.
pub fn conjugate_eval(utility: &Utility, y: f64) -> Result<Conjugate> {
    if !(y > 0.0) {
        return Err(Error::NonPositiveDual(y));
    }
    match utility {
        Utility::Exponential { alpha } => {
            let ln_y = y.ln();
            Ok(Conjugate {
                value: (y * ln_y - y) / alpha,
                slope: ln_y / alpha,
            })
        }
        Utility::General(u) => {
            let slope = utility.conjugate_slope(y)?;
            Ok(Conjugate {
                value: u.value(-slope) + y * slope,
                slope,
            })
        }
    }
}

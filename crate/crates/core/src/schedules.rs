//! Continuous-time diffusion schedules with linear drift `a(t)·x` and scalar
//! diffusion `g(t)`.
//!
//! Two families are supported:
//!
//! * **VP**: `dx = −½β(t)x dt + √β(t) dW`, with `α_t = exp(−∫₀ᵗβ)` and
//!   `σ_t = √((1−α_t)/α_t)`.
//! * **VE**: `dx = g(t) dW` with `σ_t = σ_max·t/T`, so `g(t)² = dσ²/dt`.
//!
//! All time quantities are dimensionless; `T` defaults to 1.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Real;

/// Noise rate `β(t)` of a VP schedule.
#[derive(Clone)]
pub enum BetaFn<S: Real> {
    Constant(S),
    /// `β(t) = start + (end − start)·t/T`.
    Linear { start: S, end: S },
    /// Arbitrary positive rate; its integral is evaluated by adaptive quadrature.
    Custom(Arc<dyn Fn(S) -> S + Send + Sync>),
}

impl<S: Real> fmt::Debug for BetaFn<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaFn::Constant(b) => write!(f, "Constant({b})"),
            BetaFn::Linear { start, end } => write!(f, "Linear({start} -> {end})"),
            BetaFn::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ScheduleKind<S: Real> {
    Vp { beta: BetaFn<S> },
    Ve { sigma_max: S },
}

/// Serializable description of a schedule, as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Ve {
        sigma_max: f64,
        #[serde(default = "default_t_end")]
        t_end: f64,
        #[serde(default = "default_t_min")]
        t_min: f64,
        #[serde(default = "default_t_max")]
        t_max: f64,
    },
    VpLinear {
        beta_start: f64,
        beta_end: f64,
        #[serde(default = "default_t_end")]
        t_end: f64,
        #[serde(default = "default_t_min")]
        t_min: f64,
        #[serde(default = "default_t_max")]
        t_max: f64,
    },
    VpConstant {
        beta: f64,
        #[serde(default = "default_t_end")]
        t_end: f64,
        #[serde(default = "default_t_min")]
        t_min: f64,
        #[serde(default = "default_t_max")]
        t_max: f64,
    },
}

fn default_t_end() -> f64 {
    1.0
}
fn default_t_min() -> f64 {
    0.02
}
fn default_t_max() -> f64 {
    0.98
}

impl ScheduleSpec {
    pub fn build<S: Real>(&self) -> Result<NoiseSchedule<S>> {
        let (kind, t_end, t_min, t_max) = match *self {
            ScheduleSpec::Ve { sigma_max, t_end, t_min, t_max } => {
                (ScheduleKind::Ve { sigma_max: S::lit(sigma_max) }, t_end, t_min, t_max)
            }
            ScheduleSpec::VpLinear { beta_start, beta_end, t_end, t_min, t_max } => (
                ScheduleKind::Vp {
                    beta: BetaFn::Linear { start: S::lit(beta_start), end: S::lit(beta_end) },
                },
                t_end,
                t_min,
                t_max,
            ),
            ScheduleSpec::VpConstant { beta, t_end, t_min, t_max } => (
                ScheduleKind::Vp { beta: BetaFn::Constant(S::lit(beta)) },
                t_end,
                t_min,
                t_max,
            ),
        };
        NoiseSchedule::new(kind, S::lit(t_end), S::lit(t_min * t_end), S::lit(t_max * t_end))
    }
}

/// A diffusion schedule on `[0, T]` together with the sampling range
/// `[t_min, t_max]` used by training and distillation.
#[derive(Clone, Debug)]
pub struct NoiseSchedule<S: Real> {
    kind: ScheduleKind<S>,
    t_end: S,
    t_min: S,
    t_max: S,
}

/// `c(s, t) = exp(∫ₛᵗ a(u) du)`, the Jacobian scale of a PF-ODE flow map under
/// frozen scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleFactor<S> {
    pub value: S,
    pub from_time: S,
    pub to_time: S,
}

impl<S: Real> NoiseSchedule<S> {
    pub fn new(kind: ScheduleKind<S>, t_end: S, t_min: S, t_max: S) -> Result<Self> {
        if !(t_end > S::zero()) || !t_end.is_finite() {
            return Err(Error::InvalidParameter(format!("terminal time must be positive, got {t_end}")));
        }
        if !(S::zero() <= t_min && t_min < t_max && t_max <= t_end) {
            return Err(Error::InvalidParameter(format!(
                "sampling range must satisfy 0 <= t_min < t_max <= T, got [{t_min}, {t_max}] with T = {t_end}"
            )));
        }
        match &kind {
            ScheduleKind::Ve { sigma_max } if !(*sigma_max > S::zero()) => {
                return Err(Error::InvalidParameter("sigma_max must be positive".into()))
            }
            ScheduleKind::Vp { beta: BetaFn::Constant(b) } if !(*b > S::zero()) => {
                return Err(Error::InvalidParameter("beta must be positive".into()))
            }
            ScheduleKind::Vp { beta: BetaFn::Linear { start, end } }
                if !(*start > S::zero() && *end > S::zero()) =>
            {
                return Err(Error::InvalidParameter("beta endpoints must be positive".into()))
            }
            _ => {}
        }
        Ok(Self { kind, t_end, t_min, t_max })
    }

    /// VE schedule `σ_t = σ_max·t/T` on `[0, 1]` with sampling range `[0.02, 0.98]`.
    pub fn ve(sigma_max: S) -> Self {
        Self::new(ScheduleKind::Ve { sigma_max }, S::one(), S::lit(0.02), S::lit(0.98))
            .expect("valid VE schedule")
    }

    /// VP schedule with `β(t)` linear from `start` to `end` over `[0, 1]`.
    pub fn vp_linear(start: S, end: S) -> Self {
        Self::new(
            ScheduleKind::Vp { beta: BetaFn::Linear { start, end } },
            S::one(),
            S::lit(0.02),
            S::lit(0.98),
        )
        .expect("valid VP schedule")
    }

    pub fn vp_constant(beta: S) -> Self {
        Self::new(ScheduleKind::Vp { beta: BetaFn::Constant(beta) }, S::one(), S::lit(0.02), S::lit(0.98))
            .expect("valid VP schedule")
    }

    pub fn with_sampling_range(mut self, t_min: S, t_max: S) -> Result<Self> {
        self = Self::new(self.kind, self.t_end, t_min, t_max)?;
        Ok(self)
    }

    pub fn with_terminal_time(self, t_end: S) -> Result<Self> {
        let ratio_min = self.t_min / self.t_end;
        let ratio_max = self.t_max / self.t_end;
        Self::new(self.kind, t_end, ratio_min * t_end, ratio_max * t_end)
    }

    pub fn kind(&self) -> &ScheduleKind<S> {
        &self.kind
    }
    pub fn is_ve(&self) -> bool {
        matches!(self.kind, ScheduleKind::Ve { .. })
    }
    pub fn t_end(&self) -> S {
        self.t_end
    }
    pub fn t_min(&self) -> S {
        self.t_min
    }
    pub fn t_max(&self) -> S {
        self.t_max
    }

    pub fn check_time(&self, t: S) -> Result<()> {
        if t >= S::zero() && t <= self.t_end {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange { t: t.as_f64(), t_end: self.t_end.as_f64() })
        }
    }

    /// `β(t)`; zero for VE.
    pub fn beta(&self, t: S) -> S {
        match &self.kind {
            ScheduleKind::Ve { .. } => S::zero(),
            ScheduleKind::Vp { beta } => match beta {
                BetaFn::Constant(b) => *b,
                BetaFn::Linear { start, end } => *start + (*end - *start) * t / self.t_end,
                BetaFn::Custom(f) => f(t),
            },
        }
    }

    /// `∫₀ᵗ β(u) du`.
    pub fn integrated_beta(&self, t: S) -> S {
        match &self.kind {
            ScheduleKind::Ve { .. } => S::zero(),
            ScheduleKind::Vp { beta } => match beta {
                BetaFn::Constant(b) => *b * t,
                BetaFn::Linear { start, end } => {
                    *start * t + (*end - *start) * t * t / (S::lit(2.0) * self.t_end)
                }
                BetaFn::Custom(f) => adaptive_simpson(&**f, S::zero(), t, S::lit(1e-10), 40),
            },
        }
    }

    pub fn alpha_at(&self, t: S) -> Result<S> {
        self.check_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    pub(crate) fn alpha_unchecked(&self, t: S) -> S {
        match self.kind {
            ScheduleKind::Ve { .. } => S::one(),
            ScheduleKind::Vp { .. } => (-self.integrated_beta(t)).exp(),
        }
    }

    pub fn sigma_at(&self, t: S) -> Result<S> {
        self.check_time(t)?;
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_unchecked(&self, t: S) -> S {
        match self.kind {
            ScheduleKind::Ve { sigma_max } => sigma_max * t / self.t_end,
            ScheduleKind::Vp { .. } => {
                // (1 − α)/α = e^{B} − 1, evaluated without cancellation.
                self.integrated_beta(t).exp_m1().sqrt()
            }
        }
    }

    /// Largest attainable σ, at `t = T`.
    pub fn sigma_end(&self) -> S {
        self.sigma_unchecked(self.t_end)
    }

    /// Drift coefficient `a(t)` of `f(x, t) = a(t)·x`.
    pub fn drift_coef(&self, t: S) -> S {
        match self.kind {
            ScheduleKind::Ve { .. } => S::zero(),
            ScheduleKind::Vp { .. } => -S::lit(0.5) * self.beta(t),
        }
    }

    /// `g(t)²`.
    pub fn diffusion_sq(&self, t: S) -> S {
        match self.kind {
            ScheduleKind::Ve { sigma_max } => {
                S::lit(2.0) * sigma_max * sigma_max * t / (self.t_end * self.t_end)
            }
            ScheduleKind::Vp { .. } => self.beta(t),
        }
    }

    /// Mean coefficient of the transition kernel: `√α_t` (VP) or 1 (VE).
    pub fn signal_scale(&self, t: S) -> S {
        self.alpha_unchecked(t).sqrt()
    }

    /// Noise coefficient `k(t)` of the transition kernel, `√(1−α_t)` (VP) or
    /// `σ_t` (VE). Also the factor relating noise prediction and score,
    /// `ε = −k(t)·∇log p_t`.
    pub fn noise_scale(&self, t: S) -> S {
        match self.kind {
            ScheduleKind::Ve { .. } => self.sigma_unchecked(t),
            ScheduleKind::Vp { .. } => (-(-self.integrated_beta(t)).exp_m1()).sqrt(),
        }
    }

    pub fn scale_factor(&self, s: S, t: S) -> Result<ScaleFactor<S>> {
        self.check_time(s)?;
        self.check_time(t)?;
        let value = match self.kind {
            ScheduleKind::Ve { .. } => S::one(),
            ScheduleKind::Vp { .. } => {
                (-S::lit(0.5) * (self.integrated_beta(t) - self.integrated_beta(s))).exp()
            }
        };
        Ok(ScaleFactor { value, from_time: s, to_time: t })
    }

    /// `w(t) = ½(T − t)·g(t)²·c(t, 0)²`, the weight of the time-averaged KL
    /// functional whose Wasserstein gradient the PFD update follows.
    pub fn theorem_weight(&self, t: S) -> Result<S> {
        let c = self.scale_factor(t, S::zero())?.value;
        Ok(S::lit(0.5) * (self.t_end - t) * self.diffusion_sq(t) * c * c)
    }

    /// Draws `x_t` from the transition kernel given the standard-normal `noise`.
    pub fn perturb(&self, x0: &[S], t: S, noise: &[S]) -> Result<Vec<S>> {
        self.check_time(t)?;
        check_dim(x0.len(), noise.len())?;
        let mean = self.signal_scale(t);
        let std = self.noise_scale(t);
        Ok(x0.iter().zip(noise).map(|(&x, &e)| mean * x + std * e).collect())
    }

    /// Scale from unscaled to σ-reparameterized coordinates, `x̃ = x·√(1+σ²)`
    /// for VP and the identity for VE.
    pub fn reparam_scale(&self, sigma: S) -> S {
        match self.kind {
            ScheduleKind::Ve { .. } => S::one(),
            ScheduleKind::Vp { .. } => (S::one() + sigma * sigma).sqrt(),
        }
    }

    /// Inverse of `σ_t`.
    pub fn time_at_sigma(&self, sigma: S) -> Result<S> {
        let sigma_end = self.sigma_end();
        if !(sigma >= S::zero() && sigma <= sigma_end * (S::one() + S::epsilon() * S::lit(8.0))) {
            return Err(Error::SigmaOutOfRange { sigma: sigma.as_f64(), sigma_end: sigma_end.as_f64() });
        }
        let t = match &self.kind {
            ScheduleKind::Ve { sigma_max } => sigma * self.t_end / *sigma_max,
            ScheduleKind::Vp { beta } => {
                let target = sigma * sigma;
                let target = target.ln_1p(); // ∫₀ᵗ β = ln(1 + σ²)
                match beta {
                    BetaFn::Constant(b) => target / *b,
                    BetaFn::Linear { start, end } => {
                        let qa = (*end - *start) / (S::lit(2.0) * self.t_end);
                        if qa.abs() <= S::epsilon() * start.abs() {
                            target / *start
                        } else {
                            // Stable root of qa·t² + start·t − target = 0.
                            let disc = (*start * *start + S::lit(4.0) * qa * target).sqrt();
                            S::lit(2.0) * target / (*start + disc)
                        }
                    }
                    BetaFn::Custom(_) => {
                        let (mut lo, mut hi) = (S::zero(), self.t_end);
                        for _ in 0..200 {
                            let mid = S::lit(0.5) * (lo + hi);
                            if self.integrated_beta(mid) < target {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                            if hi - lo <= S::epsilon() * self.t_end {
                                break;
                            }
                        }
                        S::lit(0.5) * (lo + hi)
                    }
                }
            }
        };
        Ok(t.min(self.t_end).max(S::zero()))
    }
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<S: Real>(f: &dyn Fn(S) -> S, a: S, b: S, tol: S, max_depth: u32) -> S {
    let two = S::lit(2.0);
    let six = S::lit(6.0);
    let fa = f(a);
    let fb = f(b);
    let m = (a + b) / two;
    let fm = f(m);
    let whole = (b - a) * (fa + S::lit(4.0) * fm + fb) / six;

    #[allow(clippy::too_many_arguments)]
    fn recurse<S: Real>(
        f: &dyn Fn(S) -> S,
        a: S,
        b: S,
        fa: S,
        fm: S,
        fb: S,
        whole: S,
        tol: S,
        depth: u32,
    ) -> S {
        let two = S::lit(2.0);
        let six = S::lit(6.0);
        let m = (a + b) / two;
        let lm = (a + m) / two;
        let rm = (m + b) / two;
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) * (fa + S::lit(4.0) * flm + fm) / six;
        let right = (b - m) * (fm + S::lit(4.0) * frm + fb) / six;
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= S::lit(15.0) * tol {
            left + right + delta / S::lit(15.0)
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / two, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / two, depth - 1)
        }
    }

    recurse(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

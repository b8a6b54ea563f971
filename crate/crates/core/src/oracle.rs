//! Closed-form references used to check the solvers and estimators.
//!
//! Nothing here calls into `solvers`, `distillation` or the schedule's own
//! coefficient methods: the VP/VE coefficients are re-derived locally from the
//! schedule parameters so that a bug in the system under test cannot cancel
//! against the reference. Only constant/linear `β` and linear-σ VE schedules
//! are supported, the regime where everything integrates in closed form.
//!
//! For an isotropic Gaussian prior `N(μ, s₀²I)` the time-`t` marginal is
//! `N(m_t, v_t I)` with `m_t = √α_t μ` and `v_t = α_t s₀² + (1 − α_t)` (VP) or
//! `v_t = s₀² + σ_t²` (VE). The deviation `r = x − m_t` obeys the linear ODE
//! `dr/dt = (a(t) + ½g(t)²/v_t) r`, whose solution is `r_t = √(v_t/v_s) r_s`,
//! so every PF-ODE flow map is affine.

use crate::error::{check_dim, Error, Result};
use crate::scalar::Real;
use crate::schedules::{BetaFn, NoiseSchedule, ScheduleKind};

#[derive(Clone, Debug, PartialEq)]
pub struct IsotropicGaussian<S> {
    pub mean: Vec<S>,
    pub std: S,
}

impl<S: Real> IsotropicGaussian<S> {
    pub fn new(mean: Vec<S>, std: S) -> Self {
        Self { mean, std }
    }
}

/// `x ↦ to_mean + scale·(x − from_mean)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFlow<S> {
    pub scale: S,
    pub from_mean: Vec<S>,
    pub to_mean: Vec<S>,
    pub from_time: S,
    pub to_time: S,
}

impl<S: Real> AffineFlow<S> {
    pub fn apply(&self, x: &[S]) -> Vec<S> {
        x.iter()
            .zip(&self.from_mean)
            .zip(&self.to_mean)
            .map(|((&xi, &fm), &tm)| tm + self.scale * (xi - fm))
            .collect()
    }

    /// `next ∘ self`; requires `next.from_time == self.to_time`.
    pub fn then(&self, next: &AffineFlow<S>) -> AffineFlow<S> {
        AffineFlow {
            scale: self.scale * next.scale,
            from_mean: self.from_mean.clone(),
            to_mean: next.to_mean.clone(),
            from_time: self.from_time,
            to_time: next.to_time,
        }
    }
}

/// Schedule coefficients evaluated from the raw parameters.
struct Coefficients<S> {
    kind: Kind<S>,
    t_end: S,
}

enum Kind<S> {
    VpConstant(S),
    VpLinear(S, S),
    Ve(S),
}

impl<S: Real> Coefficients<S> {
    fn of(schedule: &NoiseSchedule<S>) -> Result<Self> {
        let kind = match schedule.kind() {
            ScheduleKind::Ve { sigma_max } => Kind::Ve(*sigma_max),
            ScheduleKind::Vp { beta: BetaFn::Constant(b) } => Kind::VpConstant(*b),
            ScheduleKind::Vp { beta: BetaFn::Linear { start, end } } => Kind::VpLinear(*start, *end),
            ScheduleKind::Vp { beta: BetaFn::Custom(_) } => {
                return Err(Error::InvalidParameter("oracle supports constant or linear beta only".into()))
            }
        };
        Ok(Self { kind, t_end: schedule.t_end() })
    }

    /// `∫₀ᵗ β`.
    fn big_b(&self, t: S) -> S {
        match self.kind {
            Kind::VpConstant(b) => b * t,
            Kind::VpLinear(b0, b1) => b0 * t + S::lit(0.5) * (b1 - b0) * t * t / self.t_end,
            Kind::Ve(_) => S::zero(),
        }
    }

    fn alpha(&self, t: S) -> S {
        (-self.big_b(t)).exp()
    }

    fn g2(&self, t: S) -> S {
        match self.kind {
            Kind::VpConstant(b) => b,
            Kind::VpLinear(b0, b1) => b0 + (b1 - b0) * t / self.t_end,
            Kind::Ve(sm) => S::lit(2.0) * sm * sm * t / (self.t_end * self.t_end),
        }
    }

    /// `c(t, 0) = exp(−∫₀ᵗ a)`.
    fn c_to_zero(&self, t: S) -> S {
        (S::lit(0.5) * self.big_b(t)).exp()
    }

    /// Mean factor and variance of the marginal of `N(μ, s₀²)` at `t`.
    fn marginal(&self, s0: S, t: S) -> (S, S) {
        match self.kind {
            Kind::Ve(sm) => {
                let sigma = sm * t / self.t_end;
                (S::one(), s0 * s0 + sigma * sigma)
            }
            _ => {
                let a = self.alpha(t);
                (a.sqrt(), a * s0 * s0 + (S::one() - a))
            }
        }
    }
}

/// Exact PF-ODE flow map from time `s` to time `t` for an isotropic Gaussian prior.
pub fn gaussian_flow<S: Real>(
    schedule: &NoiseSchedule<S>,
    prior: &IsotropicGaussian<S>,
    s: S,
    t: S,
) -> Result<AffineFlow<S>> {
    let c = Coefficients::of(schedule)?;
    let (ms, vs) = c.marginal(prior.std, s);
    let (mt, vt) = c.marginal(prior.std, t);
    Ok(AffineFlow {
        scale: (vt / vs).sqrt(),
        from_mean: prior.mean.iter().map(|&m| ms * m).collect(),
        to_mean: prior.mean.iter().map(|&m| mt * m).collect(),
        from_time: s,
        to_time: t,
    })
}

/// Score of the Gaussian marginal at `(x, t)`.
pub fn gaussian_score<S: Real>(
    schedule: &NoiseSchedule<S>,
    prior: &IsotropicGaussian<S>,
    x: &[S],
    t: S,
) -> Result<Vec<S>> {
    let c = Coefficients::of(schedule)?;
    let (m, v) = c.marginal(prior.std, t);
    Ok(x.iter().zip(&prior.mean).map(|(&xi, &mi)| -(xi - m * mi) / v).collect())
}

/// Both sides of the expected-residual identity for Gaussian `q₀`, `p₀`.
#[derive(Clone, Debug)]
pub struct Theorem1Report<S> {
    /// `(1/T)∫₀ᵀ Δ_t dt` with `Δ_t = x₀ − Φ_p(0,t,Φ_q(t,0,x₀))` from exact flows.
    pub lhs: Vec<S>,
    /// `(1/T)∫₀ᵀ ½(T−t)g(t)²c(t,0)∇log(q_t/p_t)(x_t) dt`.
    pub rhs: Vec<S>,
    /// `‖lhs − rhs‖ / ‖rhs‖`, or the absolute gap when `rhs` vanishes.
    pub rel_err: S,
    /// Right-hand side with `c(t,0)` replaced by the exact reverse-flow
    /// Jacobian `√(v_p,0 / v_p,t)`; equals `lhs` up to quadrature error.
    pub rhs_exact_jacobian: Vec<S>,
}

/// Composite Simpson rule with `panels` (rounded up to even) subintervals.
pub fn simpson<S: Real>(f: impl Fn(S) -> Vec<S>, a: S, b: S, panels: usize, dim: usize) -> Vec<S> {
    let n = panels.max(2) + panels % 2;
    let h = (b - a) / S::from_usize_lossy(n);
    let mut acc = vec![S::zero(); dim];
    for i in 0..=n {
        let w = if i == 0 || i == n {
            S::one()
        } else if i % 2 == 1 {
            S::lit(4.0)
        } else {
            S::lit(2.0)
        };
        let t = if i == n { b } else { a + h * S::from_usize_lossy(i) };
        for (a, v) in acc.iter_mut().zip(f(t)) {
            *a = *a + w * v;
        }
    }
    acc.into_iter().map(|v| v * h / S::lit(3.0)).collect()
}

/// Evaluates both sides of the Wasserstein-gradient identity by `t`-quadrature.
pub fn theorem1_check<S: Real>(
    schedule: &NoiseSchedule<S>,
    q0: &IsotropicGaussian<S>,
    p0: &IsotropicGaussian<S>,
    x0: &[S],
    panels: usize,
) -> Result<Theorem1Report<S>> {
    let d = x0.len();
    check_dim(d, q0.mean.len())?;
    check_dim(d, p0.mean.len())?;
    let c = Coefficients::of(schedule)?;
    let t_end = schedule.t_end();
    let half = S::lit(0.5);

    let forward = |t: S| -> Vec<S> {
        let (m0, v0) = c.marginal(q0.std, S::zero());
        let (mt, vt) = c.marginal(q0.std, t);
        x0.iter().zip(&q0.mean).map(|(&x, &mu)| mt * mu + (vt / v0).sqrt() * (x - m0 * mu)).collect()
    };
    let score_at = |g: &IsotropicGaussian<S>, x: &[S], t: S| -> Vec<S> {
        let (m, v) = c.marginal(g.std, t);
        x.iter().zip(&g.mean).map(|(&xi, &mu)| -(xi - m * mu) / v).collect()
    };
    let score_gap = |t: S| -> (Vec<S>, S) {
        let xt = forward(t);
        let sq = score_at(q0, &xt, t);
        let sp = score_at(p0, &xt, t);
        (sq.iter().zip(&sp).map(|(&a, &b)| a - b).collect(), t)
    };

    let lhs = simpson(
        |t| {
            let xt = forward(t);
            let (mpt, vpt) = c.marginal(p0.std, t);
            let (mp0, vp0) = c.marginal(p0.std, S::zero());
            let scale = (vp0 / vpt).sqrt();
            x0.iter()
                .zip(&xt)
                .zip(&p0.mean)
                .map(|((&x, &y), &mu)| x - (mp0 * mu + scale * (y - mpt * mu)))
                .collect()
        },
        S::zero(),
        t_end,
        panels,
        d,
    );
    let rhs = simpson(
        |t| {
            let (gap, t) = score_gap(t);
            let w = half * (t_end - t) * c.g2(t) * c.c_to_zero(t);
            gap.into_iter().map(|g| w * g).collect()
        },
        S::zero(),
        t_end,
        panels,
        d,
    );
    let rhs_exact_jacobian = simpson(
        |t| {
            let (gap, t) = score_gap(t);
            let (_, vpt) = c.marginal(p0.std, t);
            let (_, vp0) = c.marginal(p0.std, S::zero());
            let w = half * (t_end - t) * c.g2(t) * (vp0 / vpt).sqrt();
            gap.into_iter().map(|g| w * g).collect()
        },
        S::zero(),
        t_end,
        panels,
        d,
    );
    let scale = S::one() / t_end;
    let lhs: Vec<S> = lhs.into_iter().map(|v| v * scale).collect();
    let rhs: Vec<S> = rhs.into_iter().map(|v| v * scale).collect();
    let rhs_exact_jacobian = rhs_exact_jacobian.into_iter().map(|v| v * scale).collect();
    let diff = lhs.iter().zip(&rhs).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>().sqrt();
    let denom = rhs.iter().map(|&v| v * v).sum::<S>().sqrt();
    let rel_err = if denom == S::zero() { diff } else { diff / denom };
    Ok(Theorem1Report { lhs, rhs, rel_err, rhs_exact_jacobian })
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient<S: Real>(f: impl Fn(&[S]) -> S, x: &[S], step: S) -> Result<Vec<S>> {
    if !(step > S::zero()) {
        return Err(Error::InvalidParameter("finite-difference step must be positive".into()));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!("finite difference along coordinate {i}")));
        }
        out.push((plus - minus) / (S::lit(2.0) * step));
    }
    Ok(out)
}

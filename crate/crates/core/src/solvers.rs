//! Fixed-step PF-ODE integration in both time directions.
//!
//! Heun stands in for higher-order deterministic solvers. Score evaluations
//! are plain values, so nothing downstream can differentiate through them.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{all_finite, Real};
use crate::schedules::NoiseSchedule;
use crate::score_fields::ScoreField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Heun,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    Fixed(usize),
    /// `max(1, ⌊k·t/T⌋)` steps for an interval ending at `t`.
    Proportional(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Integrate `dx/dt` on a grid uniform in `t`.
    #[default]
    Native,
    /// Integrate `dx̃/dσ = ε` on a grid uniform in `σ`.
    SigmaReparam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub steps: StepPolicy,
    #[serde(default)]
    pub parameterization: Parameterization,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: Method::Euler, steps: StepPolicy::Proportional(10.0), parameterization: Parameterization::Native }
    }
}

impl SolverConfig {
    pub fn new(method: Method, steps: StepPolicy, parameterization: Parameterization) -> Self {
        Self { method, steps, parameterization }
    }

    pub fn fixed(method: Method, n: usize) -> Self {
        Self::new(method, StepPolicy::Fixed(n), Parameterization::Native)
    }

    /// One Euler step in the σ-parameterization: the posterior-mean map.
    pub fn single_step() -> Self {
        Self::new(Method::Euler, StepPolicy::Fixed(1), Parameterization::SigmaReparam)
    }

    pub fn with_parameterization(mut self, p: Parameterization) -> Self {
        self.parameterization = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.steps {
            StepPolicy::Fixed(0) => Err(Error::InvalidParameter("fixed step count must be at least 1".into())),
            StepPolicy::Proportional(k) if !(k > 0.0 && k.is_finite()) => {
                Err(Error::InvalidParameter("proportional step factor must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Step count for an interval whose later endpoint is `t`.
    pub fn step_count<S: Real>(&self, t: S, t_end: S) -> usize {
        match self.steps {
            StepPolicy::Fixed(n) => n.max(1),
            StepPolicy::Proportional(k) => {
                let n = (k * t.as_f64() / t_end.as_f64()).floor();
                if n >= 1.0 {
                    n as usize
                } else {
                    1
                }
            }
        }
    }
}

/// Visited times and states of one integration.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S> {
    pub times: Vec<S>,
    pub states: Vec<Vec<S>>,
    pub direction: Direction,
}

impl<S: Real> Trajectory<S> {
    fn start(x: &[S], t: S, direction: Direction, capacity: usize) -> Self {
        let mut times = Vec::with_capacity(capacity + 1);
        let mut states = Vec::with_capacity(capacity + 1);
        times.push(t);
        states.push(x.to_vec());
        Self { times, states, direction }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&[S]> {
        self.states.last().map(Vec::as_slice)
    }

    /// CSV with columns `step,t,x0,...,x{d-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.states.first().map_or(0, Vec::len);
        let mut header = String::from("step,t");
        for j in 0..d {
            header.push_str(&format!(",x{j}"));
        }
        writeln!(w, "{header}")?;
        for (i, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            write!(w, "{i},{t}")?;
            for v in x {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// PF-ODE velocity `a(t)·x − ½g(t)²·∇log ρ_t(x)`.
pub fn pf_velocity<S: Real, F: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    field: &F,
    x: &[S],
    t: S,
) -> Result<Vec<S>> {
    schedule.check_time(t)?;
    let score = field.score(schedule, x, t)?;
    if !all_finite(&score) {
        return Err(Error::NonFinite(format!("score at t = {t}")));
    }
    Ok(velocity_from_score(schedule, x, t, &score))
}

fn velocity_from_score<S: Real>(schedule: &NoiseSchedule<S>, x: &[S], t: S, score: &[S]) -> Vec<S> {
    let a = schedule.drift_coef(t);
    let half_g2 = S::lit(0.5) * schedule.diffusion_sq(t);
    x.iter().zip(score).map(|(&xi, &si)| a * xi - half_g2 * si).collect()
}

fn axpy<S: Real>(x: &[S], h: S, v: &[S]) -> Vec<S> {
    x.iter().zip(v).map(|(&a, &b)| a + h * b).collect()
}

fn heun_combine<S: Real>(x: &[S], h: S, k1: &[S], k2: &[S]) -> Vec<S> {
    let half = S::lit(0.5) * h;
    x.iter().zip(k1).zip(k2).map(|((&a, &p), &q)| a + half * (p + q)).collect()
}

fn guard<S: Real>(x: &[S], step: usize, t: S) -> Result<()> {
    if all_finite(x) {
        Ok(())
    } else {
        Err(Error::Divergence { step, t: t.as_f64() })
    }
}

/// Integrates the PF-ODE of `field` from `t_from` to `t_to` (either order).
pub fn integrate<S: Real, F: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    field: &F,
    x_start: &[S],
    t_from: S,
    t_to: S,
    cfg: &SolverConfig,
) -> Result<(Vec<S>, Trajectory<S>)> {
    cfg.validate()?;
    schedule.check_time(t_from)?;
    schedule.check_time(t_to)?;
    check_dim(field.dim(), x_start.len())?;
    let direction = if t_to >= t_from { Direction::Forward } else { Direction::Reverse };
    if t_from == t_to {
        return Ok((x_start.to_vec(), Trajectory::start(x_start, t_from, direction, 0)));
    }
    let n = cfg.step_count(t_from.max(t_to), schedule.t_end());
    match cfg.parameterization {
        Parameterization::Native => integrate_native(schedule, field, x_start, t_from, t_to, cfg.method, n, direction),
        Parameterization::SigmaReparam => {
            integrate_sigma(schedule, field, x_start, t_from, t_to, cfg.method, n, direction)
        }
    }
}

fn grid_point<S: Real>(from: S, to: S, i: usize, n: usize) -> S {
    if i == n {
        to
    } else {
        from + (to - from) * S::from_usize_lossy(i) / S::from_usize_lossy(n)
    }
}

#[allow(clippy::too_many_arguments)]
fn integrate_native<S: Real, F: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    field: &F,
    x_start: &[S],
    t_from: S,
    t_to: S,
    method: Method,
    n: usize,
    direction: Direction,
) -> Result<(Vec<S>, Trajectory<S>)> {
    let mut traj = Trajectory::start(x_start, t_from, direction, n);
    let mut x = x_start.to_vec();
    let mut t = t_from;
    for i in 0..n {
        let t_next = grid_point(t_from, t_to, i + 1, n);
        let h = t_next - t;
        let k1 = pf_velocity(schedule, field, &x, t)?;
        x = match method {
            Method::Euler => axpy(&x, h, &k1),
            Method::Heun => {
                let pred = axpy(&x, h, &k1);
                guard(&pred, i, t_next)?;
                let k2 = pf_velocity(schedule, field, &pred, t_next)?;
                heun_combine(&x, h, &k1, &k2)
            }
        };
        guard(&x, i, t_next)?;
        t = t_next;
        traj.times.push(t);
        traj.states.push(x.clone());
    }
    Ok((x, traj))
}

#[allow(clippy::too_many_arguments)]
fn integrate_sigma<S: Real, F: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    field: &F,
    x_start: &[S],
    t_from: S,
    t_to: S,
    method: Method,
    n: usize,
    direction: Direction,
) -> Result<(Vec<S>, Trajectory<S>)> {
    let s_from = schedule.sigma_at(t_from)?;
    let s_to = schedule.sigma_at(t_to)?;
    let mut traj = Trajectory::start(x_start, t_from, direction, n);
    let mut xt = x_start.to_vec();
    let mut scaled = scale(schedule, &xt, s_from);
    let mut sigma = s_from;
    let mut t = t_from;
    for i in 0..n {
        let s_next = grid_point(s_from, s_to, i + 1, n);
        let t_next = if i + 1 == n { t_to } else { schedule.time_at_sigma(s_next)? };
        let h = s_next - sigma;
        // The unscaled state is carried alongside x̃ so the first stage sees
        // exactly x_start, without a scale/unscale roundtrip.
        let k1 = field.eps(schedule, &xt, t)?;
        scaled = match method {
            Method::Euler => axpy(&scaled, h, &k1),
            Method::Heun => {
                let pred = axpy(&scaled, h, &k1);
                guard(&pred, i, t_next)?;
                let k2 = field.eps(schedule, &unscale(schedule, &pred, s_next), t_next)?;
                heun_combine(&scaled, h, &k1, &k2)
            }
        };
        guard(&scaled, i, t_next)?;
        sigma = s_next;
        t = t_next;
        xt = unscale(schedule, &scaled, sigma);
        traj.times.push(t);
        traj.states.push(xt.clone());
    }
    Ok((xt, traj))
}

/// `x̃ = x·√(1+σ²)` (VP) or `x` (VE).
pub fn scale<S: Real>(schedule: &NoiseSchedule<S>, x: &[S], sigma: S) -> Vec<S> {
    let s = schedule.reparam_scale(sigma);
    x.iter().map(|&v| v * s).collect()
}

/// `x = x̃/√(1+σ²)` (VP) or `x̃` (VE).
pub fn unscale<S: Real>(schedule: &NoiseSchedule<S>, scaled: &[S], sigma: S) -> Vec<S> {
    let s = schedule.reparam_scale(sigma);
    scaled.iter().map(|&v| v / s).collect()
}

/// `x̃ − σ_t·ε(x_t, t)` in unscaled coordinates, the one-step reverse Euler
/// map of the σ-parameterized PF-ODE.
pub fn posterior_mean<S: Real, F: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    field: &F,
    x_t: &[S],
    t: S,
) -> Result<Vec<S>> {
    schedule.check_time(t)?;
    check_dim(field.dim(), x_t.len())?;
    if !(t > S::zero()) {
        return Err(Error::SingularScaling);
    }
    let sigma = schedule.sigma_at(t)?;
    let eps = field.eps(schedule, x_t, t)?;
    let scaled = axpy(&scale(schedule, x_t, sigma), S::zero() - sigma, &eps);
    let out = unscale(schedule, &scaled, S::zero());
    guard(&out, 0, S::zero())?;
    Ok(out)
}

/// One explicit Euler step of `dx̃/dσ = ε(x, t(σ))` on scaled coordinates.
pub fn sigma_reparam_step<S: Real, F: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    field: &F,
    scaled: &[S],
    sigma_from: S,
    sigma_to: S,
) -> Result<Vec<S>> {
    let t_from = schedule.time_at_sigma(sigma_from)?;
    schedule.time_at_sigma(sigma_to)?;
    if sigma_from == sigma_to {
        return Ok(scaled.to_vec());
    }
    let x = unscale(schedule, scaled, sigma_from);
    let eps = field.eps(schedule, &x, t_from)?;
    Ok(axpy(scaled, sigma_to - sigma_from, &eps))
}

const JACOBIAN_STEPS: usize = 200;

/// Finite-difference Jacobian (row-major `d×d`) of the Heun flow map from
/// `s` to `t`, with every score evaluation frozen at the base trajectory.
pub fn frozen_flow_jacobian<S: Real, F: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    field: &F,
    x: &[S],
    s: S,
    t: S,
    fd_step: S,
) -> Result<Vec<S>> {
    schedule.check_time(s)?;
    schedule.check_time(t)?;
    check_dim(field.dim(), x.len())?;
    let n = JACOBIAN_STEPS;
    // Record both Heun stage scores along the unperturbed path.
    let mut frozen = Vec::with_capacity(n);
    let mut cur = x.to_vec();
    for i in 0..n {
        let (ta, tb) = (grid_point(s, t, i, n), grid_point(s, t, i + 1, n));
        let s1 = field.score(schedule, &cur, ta)?;
        let k1 = velocity_from_score(schedule, &cur, ta, &s1);
        let pred = axpy(&cur, tb - ta, &k1);
        let s2 = field.score(schedule, &pred, tb)?;
        let k2 = velocity_from_score(schedule, &pred, tb, &s2);
        cur = heun_combine(&cur, tb - ta, &k1, &k2);
        frozen.push((s1, s2));
    }
    let flow = |start: &[S]| -> Vec<S> {
        let mut y = start.to_vec();
        for (i, (s1, s2)) in frozen.iter().enumerate() {
            let (ta, tb) = (grid_point(s, t, i, n), grid_point(s, t, i + 1, n));
            let k1 = velocity_from_score(schedule, &y, ta, s1);
            let pred = axpy(&y, tb - ta, &k1);
            let k2 = velocity_from_score(schedule, &pred, tb, s2);
            y = heun_combine(&y, tb - ta, &k1, &k2);
        }
        y
    };
    Ok(fd_jacobian(flow, x, fd_step))
}

/// Finite-difference Jacobian of the Heun flow map with live score
/// evaluations, for contrast with [`frozen_flow_jacobian`].
pub fn flow_jacobian<S: Real, F: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    field: &F,
    x: &[S],
    s: S,
    t: S,
    fd_step: S,
) -> Result<Vec<S>> {
    let cfg = SolverConfig::fixed(Method::Heun, JACOBIAN_STEPS);
    integrate(schedule, field, x, s, t, &cfg)?;
    let mut failure = None;
    let jac = fd_jacobian(
        |y: &[S]| match integrate(schedule, field, y, s, t, &cfg) {
            Ok((end, _)) => end,
            Err(e) => {
                failure.get_or_insert(e);
                vec![S::nan(); y.len()]
            }
        },
        x,
        fd_step,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(jac),
    }
}

fn fd_jacobian<S: Real>(mut f: impl FnMut(&[S]) -> Vec<S>, x: &[S], h: S) -> Vec<S> {
    let d = x.len();
    let mut jac = vec![S::zero(); d * d];
    let mut probe = x.to_vec();
    for j in 0..d {
        probe[j] = x[j] + h;
        let plus = f(&probe);
        probe[j] = x[j] - h;
        let minus = f(&probe);
        probe[j] = x[j];
        for i in 0..d {
            jac[i * d + j] = (plus[i] - minus[i]) / (S::lit(2.0) * h);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_fields::{GaussianMixture, MixtureField};

    fn gaussian(mean: Vec<f64>, std: f64) -> MixtureField<f64> {
        MixtureField::new(GaussianMixture::isotropic(mean, std).unwrap())
    }

    struct Zero;
    impl ScoreField<f64> for Zero {
        fn dim(&self) -> usize {
            2
        }
        fn score(&self, _: &NoiseSchedule<f64>, _: &[f64], _: f64) -> Result<Vec<f64>> {
            Ok(vec![0.0, 0.0])
        }
    }

    struct Constant(Vec<f64>);
    impl ScoreField<f64> for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn score(&self, _: &NoiseSchedule<f64>, _: &[f64], _: f64) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn velocity_examples() {
        let ve = NoiseSchedule::ve(1.0);
        assert_eq!(pf_velocity(&ve, &Zero, &[1.0, 2.0], 0.3).unwrap(), vec![0.0, 0.0]);
        // g² = 2t so ½g² = 0.5 at t = 0.5.
        assert_eq!(pf_velocity(&ve, &Constant(vec![1.0, 0.0]), &[3.0, 3.0], 0.5).unwrap(), vec![-0.5, 0.0]);
        // VP with p₀ = N(0, I): every marginal is N(0, I), so the velocity vanishes.
        let vp = NoiseSchedule::vp_linear(0.1, 20.0);
        let v = pf_velocity(&vp, &gaussian(vec![0.0, 0.0], 1.0), &[0.7, -1.2], 0.6).unwrap();
        assert!(v.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn step_policy() {
        let p = SolverConfig::new(Method::Euler, StepPolicy::Proportional(10.0), Parameterization::Native);
        assert_eq!(p.step_count(0.05, 1.0), 1);
        assert_eq!(p.step_count(0.55, 1.0), 5);
        assert_eq!(p.step_count(1.0, 1.0), 10);
        assert!(SolverConfig::fixed(Method::Euler, 0).validate().is_err());
        let bad = SolverConfig::new(Method::Euler, StepPolicy::Proportional(0.0), Parameterization::Native);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_interval() {
        let ve = NoiseSchedule::ve(1.0);
        let (x, traj) =
            integrate(&ve, &gaussian(vec![0.0], 1.0), &[0.4], 0.3, 0.3, &SolverConfig::fixed(Method::Heun, 5)).unwrap();
        assert_eq!(x, vec![0.4]);
        assert_eq!(traj.len(), 1);
    }

    #[test]
    fn trajectory_is_monotone_with_exact_endpoints() {
        let vp = NoiseSchedule::vp_linear(0.1, 20.0);
        let f = gaussian(vec![0.5], 0.7);
        for p in [Parameterization::Native, Parameterization::SigmaReparam] {
            let cfg = SolverConfig::fixed(Method::Heun, 17).with_parameterization(p);
            let (_, traj) = integrate(&vp, &f, &[0.3], 0.9, 0.0, &cfg).unwrap();
            assert_eq!(traj.direction, Direction::Reverse);
            assert_eq!(traj.times[0], 0.9);
            assert_eq!(*traj.times.last().unwrap(), 0.0);
            assert!(traj.times.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn divergence_names_step() {
        struct Blowup;
        impl ScoreField<f64> for Blowup {
            fn dim(&self) -> usize {
                1
            }
            fn score(&self, _: &NoiseSchedule<f64>, x: &[f64], _: f64) -> Result<Vec<f64>> {
                Ok(vec![-x[0].abs().powi(3) * 1e100])
            }
        }
        let ve = NoiseSchedule::ve(1.0);
        let err = integrate(&ve, &Blowup, &[10.0], 0.1, 1.0, &SolverConfig::fixed(Method::Euler, 50)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::NonFinite(_)));
    }

    #[test]
    fn posterior_mean_zero_eps_and_singular_time() {
        let vp = NoiseSchedule::vp_constant(2.0);
        let x = [0.4, -0.2];
        let m = posterior_mean(&vp, &Zero, &x, 0.5).unwrap();
        let a = vp.alpha_at(0.5).unwrap().sqrt();
        for (mi, xi) in m.iter().zip(&x) {
            assert!((mi - xi / a).abs() < 1e-14);
        }
        assert!(matches!(posterior_mean(&vp, &Zero, &x, 0.0), Err(Error::SingularScaling)));
    }

    #[test]
    fn posterior_mean_of_conjugate_gaussian() {
        let ve = NoiseSchedule::ve(2.0);
        let (mu, s) = (vec![0.5, -1.0], 0.8);
        let f = gaussian(mu.clone(), s);
        let x = [1.3, 0.4];
        let t = 0.6;
        let sig2 = (2.0f64 * t).powi(2);
        let m = posterior_mean(&ve, &f, &x, t).unwrap();
        for j in 0..2 {
            let expect = (s * s * x[j] + sig2 * mu[j]) / (s * s + sig2);
            assert!((m[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_step_identity_and_unscale_roundtrip() {
        let vp = NoiseSchedule::vp_linear(0.1, 20.0);
        let f = gaussian(vec![0.0, 1.0], 0.5);
        let xs = [0.3, 0.9];
        assert_eq!(sigma_reparam_step(&vp, &f, &xs, 1.5, 1.5).unwrap(), xs.to_vec());
        assert!(sigma_reparam_step(&vp, &f, &xs, 1.5, vp.sigma_end() * 2.0).is_err());
        let back = scale(&vp, &unscale(&vp, &xs, 3.7), 3.7);
        for (a, b) in back.iter().zip(&xs) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn trajectory_csv() {
        let traj = Trajectory { times: vec![0.0, 0.5], states: vec![vec![1.0, 2.0], vec![3.0, 4.0]], direction: Direction::Forward };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,t,x0,x1\n0,0,1,2\n1,0.5,3,4\n");
    }
}

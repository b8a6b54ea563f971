use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_input, ScoreField};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::scalar::Real;
use crate::schedules::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance<S> {
    /// `s²·I`, stored as the variance `s²`.
    Isotropic(S),
    /// Row-major `d×d` symmetric positive-definite matrix.
    Full(Vec<S>),
}

/// Finite Gaussian mixture `Σ wᵢ N(μᵢ, Σᵢ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture<S> {
    weights: Vec<S>,
    means: Vec<Vec<S>>,
    covariances: Vec<Covariance<S>>,
}

impl<S: Real> GaussianMixture<S> {
    pub fn new(weights: Vec<S>, means: Vec<Vec<S>>, covariances: Vec<Covariance<S>>) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        if means.len() != n || covariances.len() != n {
            return Err(Error::InvalidParameter(format!(
                "mixture has {n} weights, {} means, {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|&w| !(w > S::zero())) {
            return Err(Error::InvalidParameter("mixture weights must be positive".into()));
        }
        let total: S = weights.iter().copied().sum();
        if (total - S::one()).abs() > S::lit(1e-12).max(S::epsilon() * S::lit(64.0)) {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {total}, not 1")));
        }
        let d = means[0].len();
        for (mean, cov) in means.iter().zip(&covariances) {
            check_dim(d, mean.len())?;
            match cov {
                Covariance::Isotropic(v) if !(*v > S::zero()) => {
                    return Err(Error::InvalidParameter("isotropic variance must be positive".into()))
                }
                Covariance::Full(m) => {
                    check_dim(d * d, m.len())?;
                    if !linalg::is_symmetric(m, d, S::lit(1e-12)) {
                        return Err(Error::InvalidParameter("covariance must be symmetric".into()));
                    }
                    linalg::cholesky(m, d)?;
                }
                _ => {}
            }
        }
        Ok(Self { weights, means, covariances })
    }

    /// Single Gaussian `N(mean, std²·I)`.
    pub fn isotropic(mean: Vec<S>, std: S) -> Result<Self> {
        if !(std > S::zero() && std.is_finite()) {
            return Err(Error::InvalidParameter("standard deviation must be positive".into()));
        }
        Self::new(vec![S::one()], vec![mean], vec![Covariance::Isotropic(std * std)])
    }

    /// Equal-weight mixture of isotropic components sharing one standard deviation.
    pub fn equal_isotropic(means: Vec<Vec<S>>, std: S) -> Result<Self> {
        if !(std > S::zero() && std.is_finite()) {
            return Err(Error::InvalidParameter("standard deviation must be positive".into()));
        }
        let n = means.len();
        let w = S::one() / S::from_usize_lossy(n.max(1));
        Self::new(vec![w; n], means, vec![Covariance::Isotropic(std * std); n])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn weights(&self) -> &[S] {
        &self.weights
    }
    pub fn means(&self) -> &[Vec<S>] {
        &self.means
    }
    pub fn covariances(&self) -> &[Covariance<S>] {
        &self.covariances
    }

    /// Same weights and means, covariances multiplied by `factor`.
    pub fn broadened(&self, factor: S) -> Result<Self> {
        let covariances = self
            .covariances
            .iter()
            .map(|c| match c {
                Covariance::Isotropic(v) => Covariance::Isotropic(*v * factor),
                Covariance::Full(m) => Covariance::Full(m.iter().map(|&v| v * factor).collect()),
            })
            .collect();
        Self::new(self.weights.clone(), self.means.clone(), covariances)
    }

    /// Mixture of the pushforward `x ↦ mean_scale·x + noise`, `noise ~ N(0, noise_var·I)`:
    /// component `i` becomes `N(mean_scale·μᵢ, mean_scale²·Σᵢ + noise_var·I)`.
    pub(crate) fn pushforward(&self, mean_scale: S, noise_var: S) -> Result<Self> {
        let d = self.dim();
        let cov_scale = mean_scale * mean_scale;
        let means = self.means.iter().map(|m| m.iter().map(|&v| mean_scale * v).collect()).collect();
        let covariances = self
            .covariances
            .iter()
            .map(|c| match c {
                Covariance::Isotropic(v) => Covariance::Isotropic(cov_scale * *v + noise_var),
                Covariance::Full(m) => Covariance::Full(
                    m.iter()
                        .enumerate()
                        .map(|(k, &v)| cov_scale * v + if k % (d + 1) == 0 { noise_var } else { S::zero() })
                        .collect(),
                ),
            })
            .collect();
        Self::new(self.weights.clone(), means, covariances)
    }

    /// Per-component log-weights-plus-log-densities and gradients, for the
    /// pushforward with the given `mean_scale`/`noise_var`.
    fn component_terms(&self, x: &[S], mean_scale: S, noise_var: S) -> Result<(Vec<S>, Vec<Vec<S>>)> {
        let d = self.dim();
        let log_two_pi = (S::lit(2.0) * S::PI()).ln();
        let half = S::lit(0.5);
        let cov_scale = mean_scale * mean_scale;
        let dd = S::from_usize_lossy(d);
        let mut logs = Vec::with_capacity(self.len());
        let mut grads = Vec::with_capacity(self.len());
        for ((w, mean), cov) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            let diff: Vec<S> = x.iter().zip(mean).map(|(&xi, &mi)| xi - mean_scale * mi).collect();
            match cov {
                Covariance::Isotropic(v) => {
                    let var = cov_scale * *v + noise_var;
                    let sq: S = diff.iter().map(|&e| e * e).sum();
                    logs.push(w.ln() - half * (dd * (log_two_pi + var.ln()) + sq / var));
                    grads.push(diff.iter().map(|&e| -e / var).collect());
                }
                Covariance::Full(m) => {
                    let noised: Vec<S> = m
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| cov_scale * v + if k % (d + 1) == 0 { noise_var } else { S::zero() })
                        .collect();
                    let l = linalg::cholesky(&noised, d)?;
                    let sol = linalg::cholesky_solve(&l, d, &diff);
                    let quad: S = diff.iter().zip(&sol).map(|(&a, &b)| a * b).sum();
                    logs.push(
                        w.ln() - half * (dd * log_two_pi + linalg::cholesky_log_det(&l, d) + quad),
                    );
                    grads.push(sol.into_iter().map(|v| -v).collect());
                }
            }
        }
        Ok((logs, grads))
    }

    fn log_density_affine(&self, x: &[S], mean_scale: S, noise_var: S) -> Result<S> {
        check_input(self.dim(), x)?;
        let (logs, _) = self.component_terms(x, mean_scale, noise_var)?;
        Ok(log_sum_exp(&logs))
    }

    /// Allocation-light path when every component is isotropic.
    fn isotropic_score(&self, x: &[S], mean_scale: S, noise_var: S) -> Option<Vec<S>> {
        let half = S::lit(0.5);
        let cov_scale = mean_scale * mean_scale;
        let dd = S::from_usize_lossy(self.dim());
        let mut logs = Vec::with_capacity(self.len());
        for ((w, mean), cov) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            let Covariance::Isotropic(v) = cov else { return None };
            let var = cov_scale * *v + noise_var;
            let sq = x.iter().zip(mean).fold(S::zero(), |acc, (&xi, &mi)| {
                let e = xi - mean_scale * mi;
                acc + e * e
            });
            logs.push(w.ln() - half * (dd * var.ln() + sq / var));
        }
        let max = logs.iter().copied().fold(S::neg_infinity(), S::max);
        let mut out = vec![S::zero(); x.len()];
        let mut total = S::zero();
        for ((l, mean), cov) in logs.iter().zip(&self.means).zip(&self.covariances) {
            let Covariance::Isotropic(v) = cov else { unreachable!() };
            let r = (*l - max).exp();
            total = total + r;
            let rv = r / (cov_scale * *v + noise_var);
            for ((o, &xi), &mi) in out.iter_mut().zip(x).zip(mean) {
                *o = *o - rv * (xi - mean_scale * mi);
            }
        }
        Some(out.into_iter().map(|o| o / total).collect())
    }

    fn score_affine(&self, x: &[S], mean_scale: S, noise_var: S) -> Result<Vec<S>> {
        check_input(self.dim(), x)?;
        if let Some(out) = self.isotropic_score(x, mean_scale, noise_var) {
            return if out.iter().all(|v| v.is_finite()) {
                Ok(out)
            } else {
                Err(Error::NonFinite("mixture score".into()))
            };
        }
        let (logs, grads) = self.component_terms(x, mean_scale, noise_var)?;
        let lse = log_sum_exp(&logs);
        let mut out = vec![S::zero(); self.dim()];
        for (l, g) in logs.iter().zip(&grads) {
            let r = (*l - lse).exp();
            for (o, &gi) in out.iter_mut().zip(g) {
                *o = *o + r * gi;
            }
        }
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFinite("mixture score".into()))
        }
    }

    pub fn log_density(&self, x: &[S]) -> Result<S> {
        self.log_density_affine(x, S::one(), S::zero())
    }

    pub fn density(&self, x: &[S]) -> Result<S> {
        Ok(self.log_density(x)?.exp())
    }

    /// Closed-form `∇ₓ log Σ wᵢ N(x; μᵢ, Σᵢ)`, stabilized with log-sum-exp.
    pub fn score(&self, x: &[S]) -> Result<Vec<S>> {
        self.score_affine(x, S::one(), S::zero())
    }

    /// Log-density of the marginal at time `t` without materializing it.
    pub fn noised_log_density(&self, schedule: &NoiseSchedule<S>, x: &[S], t: S) -> Result<S> {
        schedule.check_time(t)?;
        let k = schedule.noise_scale(t);
        self.log_density_affine(x, schedule.signal_scale(t), k * k)
    }

    /// Score of the marginal at time `t` without materializing it.
    pub fn noised_score(&self, schedule: &NoiseSchedule<S>, x: &[S], t: S) -> Result<Vec<S>> {
        schedule.check_time(t)?;
        let k = schedule.noise_scale(t);
        self.score_affine(x, schedule.signal_scale(t), k * k)
    }

    /// Draws `n` independent samples.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<S>> {
        let d = self.dim();
        let chols: Vec<Option<Vec<S>>> = self
            .covariances
            .iter()
            .map(|c| match c {
                Covariance::Isotropic(_) => None,
                Covariance::Full(m) => Some(linalg::cholesky(m, d).expect("validated covariance")),
            })
            .collect();
        let mut cumulative = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w.as_f64();
            cumulative.push(acc);
        }
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let i = cumulative.partition_point(|&c| c <= u).min(self.len() - 1);
                let z: Vec<S> = (0..d).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect();
                let offset = match (&self.covariances[i], &chols[i]) {
                    (Covariance::Isotropic(v), _) => z.iter().map(|&zi| v.sqrt() * zi).collect(),
                    (_, Some(l)) => linalg::lower_mul(l, d, &z),
                    _ => unreachable!(),
                };
                self.means[i].iter().zip(&offset).map(|(&m, &o)| m + o).collect()
            })
            .collect()
    }
}

fn log_sum_exp<S: Real>(v: &[S]) -> S {
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<S>().ln()
}

/// Marginal of `base` at time `t` under the schedule's transition kernel.
pub fn noised_mixture<S: Real>(
    base: &GaussianMixture<S>,
    schedule: &NoiseSchedule<S>,
    t: S,
) -> Result<GaussianMixture<S>> {
    schedule.check_time(t)?;
    let k = schedule.noise_scale(t);
    base.pushforward(schedule.signal_scale(t), k * k)
}

/// Concentric rings in the plane, approximated by isotropic Gaussians spread
/// uniformly in angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub radii: Vec<f64>,
    /// Radial standard deviation of each ring component.
    pub thickness: f64,
    pub modes_per_ring: usize,
}

impl RingSpec {
    /// Rings with the default 64 modes and thickness `0.05·max radius`.
    pub fn with_defaults(radii: Vec<f64>) -> Result<Self> {
        let outer = radii.last().copied().unwrap_or(1.0);
        let spec = Self { radii, thickness: 0.05 * outer, modes_per_ring: 64 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::InvalidParameter("ring radii must be positive and non-empty".into()));
        }
        if self.radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("ring radii must be strictly increasing".into()));
        }
        if !(self.thickness > 0.0) || self.thickness >= self.min_gap() {
            return Err(Error::InvalidParameter(format!(
                "ring thickness {} must be positive and below the minimum radius gap {}",
                self.thickness,
                self.min_gap()
            )));
        }
        if self.modes_per_ring == 0 {
            return Err(Error::InvalidParameter("modes_per_ring must be positive".into()));
        }
        Ok(())
    }

    /// Smallest distance between consecutive radii; infinite for a single ring.
    pub fn min_gap(&self) -> f64 {
        self.radii.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    pub fn outer_radius(&self) -> f64 {
        self.radii.last().copied().unwrap_or(0.0)
    }
}

pub fn ring_to_mixture<S: Real>(spec: &RingSpec) -> Result<GaussianMixture<S>> {
    spec.validate()?;
    let m = spec.modes_per_ring;
    let means = spec
        .radii
        .iter()
        .flat_map(|&r| {
            (0..m).map(move |k| {
                let theta = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
                vec![S::lit(r * theta.cos()), S::lit(r * theta.sin())]
            })
        })
        .collect();
    GaussianMixture::equal_isotropic(means, S::lit(spec.thickness))
}

/// Analytic score field of a mixture diffused by the schedule.
#[derive(Clone, Debug)]
pub struct MixtureField<S> {
    pub base: GaussianMixture<S>,
}

impl<S: Real> MixtureField<S> {
    pub fn new(base: GaussianMixture<S>) -> Self {
        Self { base }
    }
}

impl<S: Real> ScoreField<S> for MixtureField<S> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score(&self, schedule: &NoiseSchedule<S>, x: &[S], t: S) -> Result<Vec<S>> {
        self.base.noised_score(schedule, x, t)
    }
}

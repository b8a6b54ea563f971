//! Score functions `∇ₓ log ρ_t(x)` and the equivalent noise predictions.
//!
//! The score is the canonical representation; noise predictions are derived
//! through `ε = −k(t)·score` with `k(t)` the schedule's noise scale, so the
//! solvers never branch on VP/VE to interpret a field.

mod cfg;
mod mixture;
mod network;

pub use cfg::{cfg_combine, CfgField, Guidance};
pub use mixture::{
    noised_mixture, ring_to_mixture, Covariance, GaussianMixture, MixtureField, RingSpec,
};
pub use network::{
    dsm_loss_and_gradient, train_dsm, Activation, DsmExample, DsmReport, DsmTrainer, ScoreNetwork,
};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{all_finite, Real};
use crate::schedules::NoiseSchedule;

/// A time-dependent score field over `R^d`.
pub trait ScoreField<S: Real>: Send + Sync {
    fn dim(&self) -> usize;

    /// `∇ₓ log ρ_t(x)`.
    fn score(&self, schedule: &NoiseSchedule<S>, x: &[S], t: S) -> Result<Vec<S>>;

    /// Noise prediction `ε(x, t) = −k(t)·score`. Vanishes at `t = 0` for
    /// fields that are regular there.
    fn eps(&self, schedule: &NoiseSchedule<S>, x: &[S], t: S) -> Result<Vec<S>> {
        let k = schedule.noise_scale(t);
        Ok(self.score(schedule, x, t)?.into_iter().map(|v| -k * v).collect())
    }
}

impl<S: Real, F: ScoreField<S> + ?Sized> ScoreField<S> for std::sync::Arc<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, schedule: &NoiseSchedule<S>, x: &[S], t: S) -> Result<Vec<S>> {
        (**self).score(schedule, x, t)
    }
    fn eps(&self, schedule: &NoiseSchedule<S>, x: &[S], t: S) -> Result<Vec<S>> {
        (**self).eps(schedule, x, t)
    }
}

fn check_positive_time<S: Real>(schedule: &NoiseSchedule<S>, t: S) -> Result<()> {
    schedule.check_time(t)?;
    if t > S::zero() && schedule.noise_scale(t) > S::zero() {
        Ok(())
    } else {
        Err(Error::SingularScaling)
    }
}

/// `ε = −k(t)·score`.
pub fn eps_from_score<S: Real>(schedule: &NoiseSchedule<S>, score: &[S], t: S) -> Result<Vec<S>> {
    check_positive_time(schedule, t)?;
    let k = schedule.noise_scale(t);
    Ok(score.iter().map(|&v| -k * v).collect())
}

/// `score = −ε / k(t)`.
pub fn score_from_eps<S: Real>(schedule: &NoiseSchedule<S>, eps: &[S], t: S) -> Result<Vec<S>> {
    check_positive_time(schedule, t)?;
    let k = schedule.noise_scale(t);
    Ok(eps.iter().map(|&v| -v / k).collect())
}

pub(crate) fn check_input<S: Real>(dim: usize, x: &[S]) -> Result<()> {
    check_dim(dim, x.len())?;
    if all_finite(x) {
        Ok(())
    } else {
        Err(Error::NonFinite("score input".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_score_conversions() {
        let ve = NoiseSchedule::ve(2.0);
        // σ_t = 2 at t = 1.
        assert_eq!(eps_from_score(&ve, &[1.0, -1.0], 1.0).unwrap(), vec![-2.0, 2.0]);
        assert_eq!(eps_from_score(&ve, &[0.0, 0.0], 0.3).unwrap(), vec![-0.0, -0.0]);
        assert!(matches!(eps_from_score(&ve, &[1.0], 0.0), Err(Error::SingularScaling)));
        assert!(matches!(score_from_eps(&ve, &[1.0], 0.0), Err(Error::SingularScaling)));

        let vp = NoiseSchedule::<f64>::vp_linear(0.1, 20.0);
        let v = [0.3, -1.7, 2.5];
        for &t in &[0.02, 0.4, 1.0] {
            let back = score_from_eps(&vp, &eps_from_score(&vp, &v, t).unwrap(), t).unwrap();
            for (a, b) in v.iter().zip(&back) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}

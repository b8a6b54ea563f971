use std::sync::Arc;

use super::{check_positive_time, ScoreField};
use crate::error::{check_dim, Error, Result};
use crate::scalar::Real;
use crate::schedules::NoiseSchedule;

/// Guidance scale `γ` stored as the pair of extrapolation weights
/// `(γ, 1 − γ)` applied to the conditional and unconditional predictions.
///
/// Keeping both weights lets a role swap reuse them verbatim instead of
/// recomputing `1 − (1 − γ)`, so the swapped combination is bit-identical.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Guidance<S> {
    conditional_weight: S,
    unconditional_weight: S,
}

impl<S: Real> Guidance<S> {
    pub fn scale(gamma: S) -> Self {
        Self { conditional_weight: gamma, unconditional_weight: S::one() - gamma }
    }

    /// The user-facing guidance scale `γ`.
    pub fn gamma(&self) -> S {
        self.conditional_weight
    }

    pub fn weights(&self) -> (S, S) {
        (self.conditional_weight, self.unconditional_weight)
    }

    /// Guidance seen from the swapped roles: `γ ↦ 1 − γ`.
    pub fn reflected(self) -> Self {
        Self {
            conditional_weight: self.unconditional_weight,
            unconditional_weight: self.conditional_weight,
        }
    }
}

/// Classifier-free guidance `ε_∅ + γ(ε_c − ε_∅)` over two fields.
#[derive(Clone)]
pub struct CfgField<S: Real> {
    pub conditional: Arc<dyn ScoreField<S>>,
    pub unconditional: Arc<dyn ScoreField<S>>,
    pub guidance: Guidance<S>,
}

impl<S: Real> CfgField<S> {
    pub fn new(
        conditional: Arc<dyn ScoreField<S>>,
        unconditional: Arc<dyn ScoreField<S>>,
        gamma: S,
    ) -> Result<Self> {
        Self::with_guidance(conditional, unconditional, Guidance::scale(gamma))
    }

    pub fn with_guidance(
        conditional: Arc<dyn ScoreField<S>>,
        unconditional: Arc<dyn ScoreField<S>>,
        guidance: Guidance<S>,
    ) -> Result<Self> {
        check_dim(conditional.dim(), unconditional.dim())?;
        if !guidance.gamma().is_finite() {
            return Err(Error::InvalidParameter("guidance scale must be finite".into()));
        }
        Ok(Self { conditional, unconditional, guidance })
    }

    /// Exchanges the conditional and unconditional fields, replacing `γ` by `1 − γ`.
    pub fn swap_roles(&self) -> Self {
        Self {
            conditional: Arc::clone(&self.unconditional),
            unconditional: Arc::clone(&self.conditional),
            guidance: self.guidance.reflected(),
        }
    }

    fn combine(&self, cond: Vec<S>, uncond: Vec<S>) -> Vec<S> {
        let (wc, wu) = self.guidance.weights();
        cond.into_iter().zip(uncond).map(|(c, u)| wc * c + wu * u).collect()
    }
}

/// Guided noise prediction at `(x, t)`.
pub fn cfg_combine<S: Real>(
    field: &CfgField<S>,
    schedule: &NoiseSchedule<S>,
    x: &[S],
    t: S,
) -> Result<Vec<S>> {
    check_positive_time(schedule, t)?;
    field.eps(schedule, x, t)
}

impl<S: Real> ScoreField<S> for CfgField<S> {
    fn dim(&self) -> usize {
        self.conditional.dim()
    }

    fn score(&self, schedule: &NoiseSchedule<S>, x: &[S], t: S) -> Result<Vec<S>> {
        let cond = self.conditional.score(schedule, x, t)?;
        let uncond = self.unconditional.score(schedule, x, t)?;
        Ok(self.combine(cond, uncond))
    }

    fn eps(&self, schedule: &NoiseSchedule<S>, x: &[S], t: S) -> Result<Vec<S>> {
        let cond = self.conditional.eps(schedule, x, t)?;
        let uncond = self.unconditional.eps(schedule, x, t)?;
        Ok(self.combine(cond, uncond))
    }
}

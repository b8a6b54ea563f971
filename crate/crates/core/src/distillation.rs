//! SDS, SDI and PFD gradient estimators and the particle optimization loop.
//!
//! One iteration is a synchronized sweep: every particle draws its own `t`
//! and residual from the same frozen fields, then all updates are committed
//! together. Per-particle random streams are derived from
//! `(seed, iteration, particle)` so results do not depend on thread count.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{all_finite, Real};
use crate::schedules::NoiseSchedule;
use crate::score_fields::{Activation, CfgField, DsmTrainer, GaussianMixture, MixtureField, ScoreField, ScoreNetwork};
use crate::solvers::{integrate, posterior_mean, Method, Parameterization, SolverConfig, StepPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMethod {
    Sds,
    Sdi,
    Pfd,
}

impl DistillMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sds => "sds",
            Self::Sdi => "sdi",
            Self::Pfd => "pfd",
        }
    }
}

impl std::fmt::Display for DistillMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Source of the `q_t` score driving the forward flow of SDI and PFD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QScoreMode {
    /// Small network retrained online on the particles by DSM.
    #[default]
    Learned,
    /// The prior's own fields combined with the forward guidance scale.
    PriorSurrogate,
    /// Exact noised score of a Gaussian KDE of the current particles,
    /// bandwidth `kde_bandwidth`.
    ParticleKde,
}

/// Step change of the upper sampling time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anneal {
    pub switch_iteration: usize,
    /// New `t_max`, in absolute time units.
    pub t_max: f64,
}

/// Online DSM settings for the learned q-score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsmConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_grad_norm: Option<f64>,
    /// Updates before the first sweep.
    pub warmup_steps: usize,
    /// Warm-started updates before every later sweep.
    pub steps_per_iteration: usize,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Silu,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 128,
            max_grad_norm: Some(10.0),
            warmup_steps: 500,
            steps_per_iteration: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationConfig {
    pub method: DistillMethod,
    pub learning_rate: f64,
    pub iterations: usize,
    #[serde(default = "default_forward_cfg")]
    pub forward_cfg: f64,
    #[serde(default = "default_reverse_cfg")]
    pub reverse_cfg: f64,
    #[serde(default)]
    pub q_score_mode: QScoreMode,
    #[serde(default)]
    pub anneal: Option<Anneal>,
    #[serde(default = "default_forward_solver")]
    pub forward_solver: SolverConfig,
    #[serde(default = "default_reverse_solver")]
    pub reverse_solver: SolverConfig,
    #[serde(default)]
    pub dsm: DsmConfig,
    #[serde(default = "default_kde_bandwidth")]
    pub kde_bandwidth: f64,
    /// Iteration counts after which the snapshot hook fires.
    #[serde(default)]
    pub snapshot_iterations: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_forward_cfg() -> f64 {
    -6.5
}
fn default_reverse_cfg() -> f64 {
    7.5
}
fn default_kde_bandwidth() -> f64 {
    0.1
}
fn default_forward_solver() -> SolverConfig {
    SolverConfig::new(Method::Euler, StepPolicy::Proportional(10.0), Parameterization::Native)
}
fn default_reverse_solver() -> SolverConfig {
    SolverConfig::new(Method::Euler, StepPolicy::Proportional(10.0), Parameterization::Native)
}

impl DistillationConfig {
    pub fn new(method: DistillMethod, learning_rate: f64, iterations: usize) -> Self {
        Self {
            method,
            learning_rate,
            iterations,
            forward_cfg: default_forward_cfg(),
            reverse_cfg: default_reverse_cfg(),
            q_score_mode: QScoreMode::default(),
            anneal: None,
            forward_solver: default_forward_solver(),
            reverse_solver: default_reverse_solver(),
            dsm: DsmConfig::default(),
            kde_bandwidth: default_kde_bandwidth(),
            snapshot_iterations: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate<S: Real>(&self, schedule: &NoiseSchedule<S>) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning_rate must be positive".into()));
        }
        if !(self.forward_cfg.is_finite() && self.reverse_cfg.is_finite()) {
            return Err(Error::InvalidParameter("guidance scales must be finite".into()));
        }
        self.forward_solver.validate()?;
        self.reverse_solver.validate()?;
        if let Some(a) = self.anneal {
            if !(a.t_max <= schedule.t_max().as_f64() && a.t_max > schedule.t_min().as_f64()) {
                return Err(Error::InvalidParameter(format!(
                    "anneal.t_max {} must lie in (t_min, t_max]",
                    a.t_max
                )));
            }
        }
        if self.q_score_mode == QScoreMode::Learned && self.method != DistillMethod::Sds {
            if self.dsm.batch_size == 0 || !(self.dsm.learning_rate > 0.0) {
                return Err(Error::InvalidParameter("dsm batch_size and learning_rate must be positive".into()));
            }
        }
        if self.q_score_mode == QScoreMode::ParticleKde && !(self.kde_bandwidth > 0.0 && self.kde_bandwidth.is_finite()) {
            return Err(Error::InvalidParameter("kde_bandwidth must be positive".into()));
        }
        if self.snapshot_iterations.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("snapshot_iterations must be sorted".into()));
        }
        if self.snapshot_iterations.iter().any(|&s| s > self.iterations) {
            return Err(Error::InvalidParameter("snapshot_iterations must not exceed iterations".into()));
        }
        Ok(())
    }
}

/// Warning text when the forward guidance sign contradicts the inversion
/// reading `γ_fwd = 1 − γ_rev < 0`.
pub fn cfg_sign_lint(config: &DistillationConfig) -> Option<String> {
    (config.method != DistillMethod::Sds && config.forward_cfg > 0.0).then(|| {
        format!(
            "forward guidance {} is positive for {}; inversion under swapped roles expects a negative scale",
            config.forward_cfg, config.method
        )
    })
}

/// Upper sampling time at iteration `tau`.
pub fn anneal_t_max<S: Real>(schedule: &NoiseSchedule<S>, config: &DistillationConfig, tau: usize) -> S {
    match config.anneal {
        Some(a) if tau >= a.switch_iteration => S::lit(a.t_max),
        _ => schedule.t_max(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble<S> {
    pub positions: Vec<Vec<S>>,
    pub iteration: usize,
    /// Master seed; every random draw derives from it and the iteration count.
    pub seed: u64,
}

impl<S: Real> ParticleEnsemble<S> {
    pub fn new(positions: Vec<Vec<S>>, seed: u64) -> Result<Self> {
        let ens = Self { positions, iteration: 0, seed };
        ens.validate()?;
        Ok(ens)
    }

    /// `n` draws from `N(0, scale²·I)`.
    pub fn gaussian(n: usize, dim: usize, scale: S, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, u64::MAX - 1, 0));
        let positions =
            (0..n).map(|_| (0..dim).map(|_| scale * S::lit(rng.sample(StandardNormal))).collect()).collect();
        Self::new(positions, seed)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::InvalidParameter("ensemble needs at least one particle".into()));
        }
        let d = self.dim();
        for p in &self.positions {
            check_dim(d, p.len())?;
            if !all_finite(p) {
                return Err(Error::NonFinite("particle position".into()));
            }
        }
        Ok(())
    }
}

/// Seed of the random stream for `(seed, iteration, index)`.
pub fn stream_seed(seed: u64, iteration: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ iteration) ^ index)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSample<S> {
    pub particle: usize,
    pub t: S,
    /// `x₀ − x̂₀`.
    pub delta: Vec<S>,
    pub x_t: Vec<S>,
    pub x0_hat: Vec<S>,
}

impl<S: Real> GradientSample<S> {
    fn from_parts(x0: &[S], t: S, x_t: Vec<S>, x0_hat: Vec<S>) -> Self {
        let delta = x0.iter().zip(&x0_hat).map(|(&a, &b)| a - b).collect();
        Self { particle: 0, t, delta, x_t, x0_hat }
    }
}

fn check_draw<S: Real>(schedule: &NoiseSchedule<S>, t: S) -> Result<()> {
    schedule.check_time(t)?;
    if t > S::zero() {
        Ok(())
    } else {
        Err(Error::SingularScaling)
    }
}

/// Single-step residual from an already noised point.
pub fn posterior_residual<S: Real, P: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    prior: &P,
    x0: &[S],
    x_t: Vec<S>,
    t: S,
) -> Result<GradientSample<S>> {
    let x0_hat = posterior_mean(schedule, prior, &x_t, t)?;
    Ok(GradientSample::from_parts(x0, t, x_t, x0_hat))
}

/// Stochastic perturbation followed by the posterior mean under the prior.
pub fn sds_gradient<S: Real, P: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    prior: &P,
    x0: &[S],
    t: S,
    noise: &[S],
) -> Result<GradientSample<S>> {
    check_draw(schedule, t)?;
    let x_t = schedule.perturb(x0, t, noise)?;
    posterior_residual(schedule, prior, x0, x_t, t)
}

/// SDS residual in noise form, `σ_t·(ε_φ(x_t, t) − ε)`.
pub fn sds_noise_residual<S: Real, P: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    prior: &P,
    x0: &[S],
    t: S,
    noise: &[S],
) -> Result<Vec<S>> {
    check_draw(schedule, t)?;
    let x_t = schedule.perturb(x0, t, noise)?;
    let sigma = schedule.sigma_at(t)?;
    let eps = prior.eps(schedule, &x_t, t)?;
    Ok(eps.iter().zip(noise).map(|(&p, &e)| sigma * (p - e)).collect())
}

/// Deterministic inversion under `q` followed by the single-step posterior mean.
pub fn sdi_gradient<S: Real, P: ScoreField<S> + ?Sized, Q: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    prior: &P,
    q: &Q,
    x0: &[S],
    t: S,
    forward: &SolverConfig,
) -> Result<GradientSample<S>> {
    check_draw(schedule, t)?;
    let (x_t, _) = integrate(schedule, q, x0, S::zero(), t, forward)?;
    posterior_residual(schedule, prior, x0, x_t, t)
}

/// Deterministic inversion under `q` followed by a multi-step reverse flow under the prior.
pub fn pfd_gradient<S: Real, P: ScoreField<S> + ?Sized, Q: ScoreField<S> + ?Sized>(
    schedule: &NoiseSchedule<S>,
    prior: &P,
    q: &Q,
    x0: &[S],
    t: S,
    forward: &SolverConfig,
    reverse: &SolverConfig,
) -> Result<GradientSample<S>> {
    check_draw(schedule, t)?;
    let (x_t, _) = integrate(schedule, q, x0, S::zero(), t, forward)?;
    let (x0_hat, _) = integrate(schedule, prior, &x_t, t, S::zero(), reverse)?;
    Ok(GradientSample::from_parts(x0, t, x_t, x0_hat))
}

/// Prior fields: a conditional score and, for guidance, an unconditional one.
#[derive(Clone)]
pub struct PriorModel<S: Real> {
    pub conditional: Arc<dyn ScoreField<S>>,
    pub unconditional: Option<Arc<dyn ScoreField<S>>>,
}

impl<S: Real> PriorModel<S> {
    pub fn unguided(field: Arc<dyn ScoreField<S>>) -> Self {
        Self { conditional: field, unconditional: None }
    }

    pub fn guided(conditional: Arc<dyn ScoreField<S>>, unconditional: Arc<dyn ScoreField<S>>) -> Self {
        Self { conditional, unconditional: Some(unconditional) }
    }

    pub fn dim(&self) -> usize {
        self.conditional.dim()
    }

    /// The prior at guidance scale `gamma`; without an unconditional field
    /// the scale is ignored.
    pub fn at_scale(&self, gamma: f64) -> Result<Arc<dyn ScoreField<S>>> {
        match &self.unconditional {
            None => Ok(Arc::clone(&self.conditional)),
            Some(u) => Ok(Arc::new(CfgField::new(Arc::clone(&self.conditional), Arc::clone(u), S::lit(gamma))?)),
        }
    }
}

/// Callback receiving `(iteration, positions)` at snapshot iterations.
pub type SnapshotHook<'a, S> = dyn FnMut(usize, &[Vec<S>]) -> Result<()> + 'a;

/// Runs the particle optimization loop.
pub struct Distiller<'a, S: Real> {
    schedule: &'a NoiseSchedule<S>,
    prior: PriorModel<S>,
    config: DistillationConfig,
    q_override: Option<Arc<dyn ScoreField<S>>>,
    network: Option<ScoreNetwork<S>>,
    trainer: Option<DsmTrainer<S>>,
    dsm_losses: Vec<S>,
}

impl<'a, S: Real> Distiller<'a, S> {
    pub fn new(schedule: &'a NoiseSchedule<S>, prior: PriorModel<S>, config: DistillationConfig) -> Result<Self> {
        config.validate(schedule)?;
        if let Some(w) = cfg_sign_lint(&config) {
            log::warn!("{w}");
        }
        Ok(Self { schedule, prior, config, q_override: None, network: None, trainer: None, dsm_losses: Vec::new() })
    }

    /// Replaces the q-score by a fixed field, bypassing `q_score_mode`.
    pub fn with_q_field(mut self, q: Arc<dyn ScoreField<S>>) -> Self {
        self.q_override = Some(q);
        self
    }

    pub fn config(&self) -> &DistillationConfig {
        &self.config
    }

    /// The learned q-network after a run, if one was trained.
    pub fn network(&self) -> Option<&ScoreNetwork<S>> {
        self.network.as_ref()
    }

    /// Every DSM minibatch loss recorded so far.
    pub fn dsm_losses(&self) -> &[S] {
        &self.dsm_losses
    }

    fn needs_q(&self) -> bool {
        self.config.method != DistillMethod::Sds
    }

    fn learns_q(&self) -> bool {
        self.needs_q() && self.q_override.is_none() && self.config.q_score_mode == QScoreMode::Learned
    }

    fn ensure_network(&mut self, dim: usize, seed: u64) -> Result<()> {
        if self.network.is_none() {
            let dsm = &self.config.dsm;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, u64::MAX - 2, 0));
            self.network = Some(ScoreNetwork::new(dim, &dsm.hidden, dsm.activation, &mut rng)?);
            let mut trainer = DsmTrainer::new(S::lit(dsm.learning_rate), S::lit(dsm.momentum), dsm.batch_size);
            if let Some(c) = dsm.max_grad_norm {
                trainer = trainer.with_grad_clip(S::lit(c));
            }
            self.trainer = Some(trainer);
        }
        Ok(())
    }

    fn retrain(&mut self, positions: &[Vec<S>], tau: usize, seed: u64) -> Result<()> {
        let steps =
            if tau == 0 { self.config.dsm.warmup_steps + self.config.dsm.steps_per_iteration } else { self.config.dsm.steps_per_iteration };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, tau as u64, u64::MAX));
        let (net, trainer) = (self.network.as_mut().expect("network"), self.trainer.as_mut().expect("trainer"));
        let report = trainer.train(net, positions, self.schedule, steps, &mut rng)?;
        self.dsm_losses.extend(report.losses);
        Ok(())
    }

    fn q_field(&self, positions: &[Vec<S>]) -> Result<Arc<dyn ScoreField<S>>> {
        if let Some(q) = &self.q_override {
            return Ok(Arc::clone(q));
        }
        match self.config.q_score_mode {
            QScoreMode::PriorSurrogate => self.prior.at_scale(self.config.forward_cfg),
            QScoreMode::ParticleKde => Ok(Arc::new(MixtureField::new(GaussianMixture::equal_isotropic(
                positions.to_vec(),
                S::lit(self.config.kde_bandwidth),
            )?))),
            QScoreMode::Learned => Ok(Arc::new(self.network.clone().expect("network trained before use"))),
        }
    }

    /// Residual for one particle at iteration `tau`.
    pub fn gradient(
        &self,
        prior: &dyn ScoreField<S>,
        q: Option<&dyn ScoreField<S>>,
        x0: &[S],
        particle: usize,
        tau: usize,
        seed: u64,
    ) -> Result<GradientSample<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, tau as u64, particle as u64));
        let lo = self.schedule.t_min().as_f64();
        let hi = anneal_t_max(self.schedule, &self.config, tau).as_f64();
        let t = S::lit(if hi > lo { rng.random_range(lo..hi) } else { hi });
        let mut sample = match self.config.method {
            DistillMethod::Sds => {
                let noise: Vec<S> = (0..x0.len()).map(|_| S::lit(rng.sample(StandardNormal))).collect();
                sds_gradient(self.schedule, prior, x0, t, &noise)?
            }
            DistillMethod::Sdi => sdi_gradient(self.schedule, prior, q.expect("q field"), x0, t, &self.config.forward_solver)?,
            DistillMethod::Pfd => pfd_gradient(
                self.schedule,
                prior,
                q.expect("q field"),
                x0,
                t,
                &self.config.forward_solver,
                &self.config.reverse_solver,
            )?,
        };
        sample.particle = particle;
        if !all_finite(&sample.delta) {
            return Err(Error::NonFinite("residual".into()));
        }
        Ok(sample)
    }

    /// Runs `config.iterations` sweeps starting from the ensemble's current iteration count.
    pub fn run(
        &mut self,
        mut ensemble: ParticleEnsemble<S>,
        mut hook: Option<&mut SnapshotHook<'_, S>>,
    ) -> Result<ParticleEnsemble<S>> {
        ensemble.validate()?;
        check_dim(self.prior.dim(), ensemble.dim())?;
        let seed = ensemble.seed;
        let eta = S::lit(self.config.learning_rate);
        let prior = self.prior.at_scale(self.config.reverse_cfg)?;
        let start = ensemble.iteration;
        let snapshot_list = self.config.snapshot_iterations.clone();
        let mut snapshots = snapshot_list.into_iter().peekable();
        let mut fire = |tau: usize, positions: &[Vec<S>], hook: &mut Option<&mut SnapshotHook<'_, S>>| -> Result<()> {
            while let Some(&s) = snapshots.peek() {
                if s > tau {
                    break;
                }
                snapshots.next();
                if s == tau {
                    if let Some(h) = hook.as_mut() {
                        h(tau, positions)?;
                    }
                }
            }
            Ok(())
        };
        fire(0, &ensemble.positions, &mut hook)?;
        if self.learns_q() {
            self.ensure_network(ensemble.dim(), seed)?;
        }
        for step in 0..self.config.iterations {
            let tau = start + step;
            if self.learns_q() {
                self.retrain(&ensemble.positions, tau, seed)?;
            }
            let q = if self.needs_q() { Some(self.q_field(&ensemble.positions)?) } else { None };
            let results: Vec<Result<GradientSample<S>>> = ensemble
                .positions
                .par_iter()
                .enumerate()
                .map(|(i, x0)| self.gradient(&*prior, q.as_deref(), x0, i, tau, seed))
                .collect();
            let mut updated = Vec::with_capacity(ensemble.len());
            for (i, (r, x0)) in results.into_iter().zip(&ensemble.positions).enumerate() {
                let fail = |cause: Error, ens: &ParticleEnsemble<S>| Error::ParticleDiverged {
                    particle: i,
                    iteration: tau,
                    cause: Box::new(cause),
                    positions: ens.positions.iter().map(|p| p.iter().map(|v| v.as_f64()).collect()).collect(),
                };
                let g = r.map_err(|e| fail(e, &ensemble))?;
                let next: Vec<S> = x0.iter().zip(&g.delta).map(|(&x, &d)| x - eta * d).collect();
                if !all_finite(&next) {
                    return Err(fail(Error::NonFinite("updated position".into()), &ensemble));
                }
                updated.push(next);
            }
            ensemble.positions = updated;
            ensemble.iteration = tau + 1;
            fire(step + 1, &ensemble.positions, &mut hook)?;
        }
        Ok(ensemble)
    }
}

/// Convenience wrapper around [`Distiller::run`].
pub fn run_distillation<S: Real>(
    ensemble: ParticleEnsemble<S>,
    schedule: &NoiseSchedule<S>,
    prior: PriorModel<S>,
    config: DistillationConfig,
    hook: Option<&mut SnapshotHook<'_, S>>,
) -> Result<ParticleEnsemble<S>> {
    Distiller::new(schedule, prior, config)?.run(ensemble, hook)
}

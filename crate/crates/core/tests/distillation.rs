use std::sync::Arc;

use distill_core::distillation::{
    pfd_gradient, posterior_residual, run_distillation, sdi_gradient, sds_gradient, sds_noise_residual, DistillMethod,
    DistillationConfig, ParticleEnsemble, PriorModel, QScoreMode,
};
use distill_core::metrics::ring_coverage;
use distill_core::oracle::{theorem1_check, IsotropicGaussian};
use distill_core::schedules::NoiseSchedule;
use distill_core::score_fields::{ring_to_mixture, GaussianMixture, MixtureField, RingSpec, ScoreField};
use distill_core::solvers::{Method, SolverConfig, StepPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gauss(mean: Vec<f64>, std: f64) -> Arc<dyn ScoreField<f64>> {
    Arc::new(MixtureField::new(GaussianMixture::isotropic(mean, std).unwrap()))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

#[test]
fn reduction_chain_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for k in 0..100 {
        let sch = match k % 3 {
            0 => NoiseSchedule::ve(rng.random_range(1.0..5.0)),
            1 => NoiseSchedule::vp_linear(0.1, 20.0),
            _ => NoiseSchedule::vp_constant(rng.random_range(0.5..3.0)),
        };
        let mean = |rng: &mut ChaCha8Rng| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let prior = gauss(mean(&mut rng), rng.random_range(0.2..1.5));
        let q = gauss(mean(&mut rng), rng.random_range(0.2..1.5));
        let x0 = mean(&mut rng);
        let t = rng.random_range(0.02..0.98);
        let fwd = SolverConfig::fixed(Method::Heun, rng.random_range(5..40));

        let sdi = sdi_gradient(&sch, &*prior, &*q, &x0, t, &fwd).unwrap();
        let pfd = pfd_gradient(&sch, &*prior, &*q, &x0, t, &fwd, &SolverConfig::single_step()).unwrap();
        assert!(close(&sdi.delta, &pfd.delta, 1e-12), "{:?} vs {:?}", sdi.delta, pfd.delta);

        // SDI with its inversion replaced by the stochastic perturbation is SDS.
        let noise: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let sds = sds_gradient(&sch, &*prior, &x0, t, &noise).unwrap();
        let via = posterior_residual(&sch, &*prior, &x0, sch.perturb(&x0, t, &noise).unwrap(), t).unwrap();
        assert_eq!(sds.delta, via.delta);
        let noise_form = sds_noise_residual(&sch, &*prior, &x0, t, &noise).unwrap();
        assert!(close(&sds.delta, &noise_form, 1e-12), "{:?} vs {noise_form:?}", sds.delta);
    }
}

#[test]
fn monte_carlo_residual_matches_exact_flow_integral() {
    let sch = NoiseSchedule::ve(1.0);
    let (qg, pg) = (IsotropicGaussian::new(vec![1.0], 0.5), IsotropicGaussian::new(vec![0.0], 1.0));
    let report = theorem1_check(&sch, &qg, &pg, &[1.2], 10_000).unwrap();
    let (q, p) = (gauss(vec![1.0], 0.5), gauss(vec![0.0], 1.0));
    let solver = SolverConfig::fixed(Method::Heun, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 20_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let t = 1.0 - rng.random::<f64>();
        sum += pfd_gradient(&sch, &*p, &*q, &[1.2], t, &solver, &solver).unwrap().delta[0];
    }
    let mc = sum / n as f64;
    assert!((mc - report.lhs[0]).abs() < 2e-2 * report.lhs[0].abs(), "{mc} vs {}", report.lhs[0]);
}

#[test]
fn matched_prior_is_a_fixed_point() {
    let sch = NoiseSchedule::ve(2.0);
    let field = gauss(vec![0.5, -0.5], 0.8);
    let mut cfg = DistillationConfig::new(DistillMethod::Pfd, 0.5, 20);
    cfg.reverse_cfg = 1.0;
    let heun = SolverConfig::new(Method::Heun, StepPolicy::Proportional(50.0), Default::default());
    cfg.forward_solver = heun;
    cfg.reverse_solver = heun;
    let ens = ParticleEnsemble::gaussian(50, 2, 1.5, 4).unwrap();
    let mut distiller = distill_core::distillation::Distiller::new(&sch, PriorModel::unguided(Arc::clone(&field)), cfg)
        .unwrap()
        .with_q_field(Arc::clone(&field));
    let out = distiller.run(ens.clone(), None).unwrap();
    let moved = ens.positions.iter().zip(&out.positions).all(|(a, b)| close(a, b, 1e-4));
    assert!(moved, "particles drifted under a matched prior");
}

fn small_pfd(q_score_mode: QScoreMode) -> DistillationConfig {
    let mut cfg = DistillationConfig::new(DistillMethod::Pfd, 0.1, 4);
    cfg.q_score_mode = q_score_mode;
    cfg.dsm.warmup_steps = 20;
    cfg.dsm.steps_per_iteration = 2;
    cfg.dsm.hidden = vec![8];
    cfg.seed = 5;
    cfg
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let sch = NoiseSchedule::ve(2.0);
    let prior = PriorModel::guided(gauss(vec![1.0, 0.0], 0.4), gauss(vec![0.0, 0.0], 1.5));
    let ens = ParticleEnsemble::gaussian(24, 2, 1.0, 17).unwrap();
    for cfg in [
        small_pfd(QScoreMode::Learned),
        small_pfd(QScoreMode::ParticleKde),
        DistillationConfig::new(DistillMethod::Sds, 0.1, 4),
    ] {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_distillation(ens.clone(), &sch, prior.clone(), cfg.clone(), None).unwrap())
        };
        let one = run(1);
        assert_eq!(one, run(4), "{:?}", cfg.method);
        assert_ne!(one.positions, ens.positions);
        let reseeded = ParticleEnsemble::new(ens.positions.clone(), 18).unwrap();
        let other = run_distillation(reseeded, &sch, prior.clone(), cfg.clone(), None).unwrap();
        assert_ne!(one.positions, other.positions);
    }
}

#[test]
fn particle_kde_mode_runs_and_validates() {
    let sch = NoiseSchedule::ve(2.0);
    let prior = PriorModel::unguided(gauss(vec![1.0, 0.0], 0.4));
    let mut cfg = small_pfd(QScoreMode::ParticleKde);
    cfg.reverse_cfg = 1.0;
    cfg.iterations = 10;
    let ens = ParticleEnsemble::gaussian(32, 2, 1.0, 1).unwrap();
    let out = run_distillation(ens.clone(), &sch, prior.clone(), cfg.clone(), None).unwrap();
    let mean_x = |e: &ParticleEnsemble<f64>| e.positions.iter().map(|p| p[0]).sum::<f64>() / e.len() as f64;
    assert!((mean_x(&out) - 1.0).abs() < (mean_x(&ens) - 1.0).abs());
    cfg.kde_bandwidth = 0.0;
    assert!(run_distillation(ens, &sch, prior, cfg, None).is_err());
}

fn ring_prior(spec: &RingSpec) -> PriorModel<f64> {
    let mix = ring_to_mixture::<f64>(spec).unwrap();
    let uncond = mix.broadened(4.0).unwrap();
    PriorModel::guided(Arc::new(MixtureField::new(mix)), Arc::new(MixtureField::new(uncond)))
}

#[test]
fn sds_collapses_on_two_rings() {
    let spec = RingSpec::with_defaults(vec![1.0, 2.0]).unwrap();
    let sch = NoiseSchedule::ve(3.0);
    let cfg = DistillationConfig::new(DistillMethod::Sds, 0.1, 100);
    let ens = ParticleEnsemble::gaussian(300, 2, 3.0, 3).unwrap();
    let out = run_distillation(ens, &sch, ring_prior(&spec), cfg, None).unwrap();
    let report = ring_coverage(&out.positions, &spec, 0.3, 16).unwrap();
    assert!(report.collapsed && report.occupancy < 0.5, "{report:?}");
}

#[test]
fn pfd_covers_two_rings() {
    let spec = RingSpec::with_defaults(vec![1.0, 2.0]).unwrap();
    let sch = NoiseSchedule::ve(3.0);
    let mut cfg = DistillationConfig::new(DistillMethod::Pfd, 0.1, 40);
    cfg.q_score_mode = QScoreMode::ParticleKde;
    let heun = SolverConfig::new(Method::Heun, StepPolicy::Proportional(20.0), Default::default());
    cfg.forward_solver = heun;
    cfg.reverse_solver = heun;
    let ens = ParticleEnsemble::gaussian(300, 2, 3.0, 3).unwrap();
    let out = run_distillation(ens, &sch, ring_prior(&spec), cfg, None).unwrap();
    let report = ring_coverage(&out.positions, &spec, 0.3, 16).unwrap();
    assert!(!report.collapsed && report.occupancy >= 0.8 && report.min_band_mass() >= 0.1, "{report:?}");
}

use std::sync::Arc;

use distill_core::metrics::ring_coverage;
use distill_core::oracle::fd_gradient;
use distill_core::schedules::NoiseSchedule;
use distill_core::score_fields::{
    noised_mixture, ring_to_mixture, train_dsm, Activation, CfgField, Covariance, GaussianMixture, MixtureField,
    RingSpec, ScoreField, ScoreNetwork,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn three_component() -> GaussianMixture<f64> {
    GaussianMixture::new(
        vec![0.5, 0.3, 0.2],
        vec![vec![-1.0, 0.5], vec![1.5, 1.0], vec![0.2, -1.2]],
        vec![Covariance::Isotropic(0.2), Covariance::Full(vec![0.3, 0.1, 0.1, 0.2]), Covariance::Isotropic(0.4)],
    )
    .unwrap()
}

fn schedules() -> [NoiseSchedule<f64>; 3] {
    [NoiseSchedule::ve(3.0), NoiseSchedule::vp_linear(0.1, 20.0), NoiseSchedule::vp_constant(2.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn noised_score_matches_finite_differences(
        x in prop::array::uniform2(-3.0f64..3.0),
        t in 0.05f64..1.0,
        which in 0usize..3,
    ) {
        let mix = three_component();
        let sch = &schedules()[which];
        let analytic = mix.noised_score(sch, &x, t).unwrap();
        let fd = fd_gradient(|p| mix.noised_log_density(sch, p, t).unwrap(), &x, 1e-4).unwrap();
        for (a, b) in analytic.iter().zip(&fd) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{analytic:?} vs {fd:?}");
        }
    }

    #[test]
    fn field_score_matches_materialized_marginal(
        x in prop::array::uniform2(-3.0f64..3.0),
        t in 0.0f64..1.0,
        which in 0usize..3,
    ) {
        let mix = three_component();
        let sch = &schedules()[which];
        let direct = noised_mixture(&mix, sch, t).unwrap().score(&x).unwrap();
        let field = MixtureField::new(mix).score(sch, &x, t).unwrap();
        for (a, b) in direct.iter().zip(&field) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn score_is_negative_eps_over_noise_scale(
        x in prop::array::uniform2(-3.0f64..3.0),
        t in 0.05f64..1.0,
        which in 0usize..3,
    ) {
        let f = MixtureField::new(three_component());
        let sch = &schedules()[which];
        let s = f.score(sch, &x, t).unwrap();
        let e = f.eps(sch, &x, t).unwrap();
        let k = sch.noise_scale(t);
        for (a, b) in s.iter().zip(&e) {
            prop_assert!((a + b / k).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn guidance_role_swap_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cond: Arc<dyn ScoreField<f64>> = Arc::new(MixtureField::new(three_component()));
    let uncond: Arc<dyn ScoreField<f64>> = Arc::new(MixtureField::new(three_component().broadened(4.0).unwrap()));
    let schedules = schedules();
    for _ in 0..1000 {
        let gamma = rng.random_range(-20.0..20.0);
        let sch = &schedules[rng.random_range(0..3)];
        let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let t = rng.random_range(0.01..1.0);
        let guided = CfgField::new(Arc::clone(&cond), Arc::clone(&uncond), gamma).unwrap();
        let swapped = guided.swap_roles();
        assert_eq!(guided.eps(sch, &x, t).unwrap(), swapped.eps(sch, &x, t).unwrap());
        assert_eq!(swapped.guidance.gamma(), 1.0 - gamma);
    }
}

#[test]
fn noised_density_is_normalized() {
    let mix = three_component();
    for sch in schedules() {
        for &t in &[0.0, 0.3, 0.9] {
            let (n, half) = (400, 12.0);
            let h = 2.0 * half / n as f64;
            let mut mass = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let x = [-half + (i as f64 + 0.5) * h, -half + (j as f64 + 0.5) * h];
                    mass += mix.noised_log_density(&sch, &x, t).unwrap().exp() * h * h;
                }
            }
            assert!((mass - 1.0).abs() < 1e-3, "t={t}: {mass}");
        }
    }
}

#[test]
fn ring_mixture_samples_stay_in_bands() {
    let spec = RingSpec::with_defaults(vec![1.0, 2.0, 3.0]).unwrap();
    let mix = ring_to_mixture::<f64>(&spec).unwrap();
    assert_eq!(mix.len(), 3 * 64);
    let samples = mix.sample(10_000, &mut ChaCha8Rng::seed_from_u64(2));
    let report = ring_coverage(&samples, &spec, 3.0 * spec.thickness, 16).unwrap();
    let total: f64 = report.band_mass.iter().sum();
    assert!(total >= 0.99, "{report:?}");
}

#[test]
fn dsm_recovers_gaussian_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sch = NoiseSchedule::vp_constant(2.0);
    let target = GaussianMixture::isotropic(vec![0.5, -0.5], 1.0).unwrap();
    let samples = target.sample(10_000, &mut rng);
    let net = ScoreNetwork::new(2, &[64, 64], Activation::Silu, &mut rng).unwrap();
    let (net, report) = train_dsm(&samples, &sch, &net, 5000, 2e-2, &mut rng).unwrap();

    let field = MixtureField::new(target);
    let (mut sq, mut count) = (0.0, 0.0);
    for &t in &[0.1, 0.5, 0.9] {
        for i in 0..20 {
            for j in 0..20 {
                let x = [-3.0 + 6.0 * i as f64 / 19.0, -3.0 + 6.0 * j as f64 / 19.0];
                let a = field.score(&sch, &x, t).unwrap();
                let b = net.score(&sch, &x, t).unwrap();
                sq += a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
                count += a.len() as f64;
            }
        }
    }
    let mse = sq / count;
    assert!(mse < 0.05, "mse {mse}");
    let first = report.window_mean(0, 100).unwrap();
    let last = report.window_mean(4900, 100).unwrap();
    assert!(last < first, "{first} -> {last}");
}

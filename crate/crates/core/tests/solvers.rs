use distill_core::metrics::{random_directions, sliced_wasserstein_with_directions};
use distill_core::oracle::{gaussian_flow, IsotropicGaussian};
use distill_core::schedules::NoiseSchedule;
use distill_core::score_fields::{
    noised_mixture, Activation, GaussianMixture, MixtureField, ScoreField, ScoreNetwork,
};
use distill_core::solvers::{
    flow_jacobian, frozen_flow_jacobian, integrate, posterior_mean, Method, Parameterization, SolverConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_field(mean: Vec<f64>, std: f64) -> MixtureField<f64> {
    MixtureField::new(GaussianMixture::isotropic(mean, std).unwrap())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn heun(n: usize) -> SolverConfig {
    SolverConfig::fixed(Method::Heun, n)
}

#[test]
fn forward_reverse_roundtrip() {
    let f = gaussian_field(vec![0.5, -1.0], 0.6);
    for sch in [NoiseSchedule::ve(3.0), NoiseSchedule::vp_linear(0.1, 20.0)] {
        let x = [1.1, 0.2];
        let (xt, _) = integrate(&sch, &f, &x, 0.0, 0.9, &heun(200)).unwrap();
        let (back, _) = integrate(&sch, &f, &xt, 0.9, 0.0, &heun(200)).unwrap();
        assert!(dist(&x, &back) < 1e-4);
    }
}

#[test]
fn matches_closed_form_flow() {
    let (mu, s) = (vec![0.3, -0.7], 0.5);
    let f = gaussian_field(mu.clone(), s);
    let prior = IsotropicGaussian::new(mu, s);
    // The linear VP schedule expands deviations ~10x over [0, 1]; its
    // endpoint error at 500 steps is a few 1e-5.
    for (sch, tol) in [(NoiseSchedule::ve(1.0), 1e-5), (NoiseSchedule::vp_linear(0.1, 20.0), 1e-4)] {
        for &(a, b) in &[(0.0, 1.0), (0.8, 0.1), (0.2, 0.6)] {
            let x = [1.4, -0.2];
            let (end, _) = integrate(&sch, &f, &x, a, b, &heun(500)).unwrap();
            let exact = gaussian_flow(&sch, &prior, a, b).unwrap().apply(&x);
            assert!(dist(&end, &exact) < tol, "{a}->{b}: {end:?} vs {exact:?}");
        }
    }
}

fn endpoint_error(method: Method, n: usize) -> f64 {
    let sch = NoiseSchedule::ve(2.0);
    let f = gaussian_field(vec![0.5], 0.5);
    let x = [1.3];
    let (end, _) = integrate(&sch, &f, &x, 0.1, 1.0, &SolverConfig::fixed(method, n)).unwrap();
    let (reference, _) = integrate(&sch, &f, &x, 0.1, 1.0, &SolverConfig::fixed(Method::Heun, 20 * n)).unwrap();
    (end[0] - reference[0]).abs()
}

#[test]
fn order_of_accuracy() {
    let r_euler = endpoint_error(Method::Euler, 40) / endpoint_error(Method::Euler, 80);
    assert!((r_euler - 2.0).abs() < 0.3, "euler ratio {r_euler}");
    let r_heun = endpoint_error(Method::Heun, 20) / endpoint_error(Method::Heun, 40);
    assert!((r_heun - 4.0).abs() < 0.8, "heun ratio {r_heun}");
}

#[test]
fn roundtrip_error_decreases_with_steps() {
    let sch = NoiseSchedule::vp_linear(0.1, 20.0);
    let f = MixtureField::new(
        GaussianMixture::equal_isotropic(vec![vec![-1.0, 0.0], vec![1.0, 0.5]], 0.4).unwrap(),
    );
    let x = [0.3, 0.9];
    let errs: Vec<f64> = [25, 50, 100, 200]
        .iter()
        .map(|&n| {
            let cfg = SolverConfig::fixed(Method::Euler, n);
            let (xt, _) = integrate(&sch, &f, &x, 0.0, 0.8, &cfg).unwrap();
            let (back, _) = integrate(&sch, &f, &xt, 0.8, 0.0, &cfg).unwrap();
            dist(&x, &back)
        })
        .collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
}

#[test]
fn posterior_mean_is_one_euler_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mix = MixtureField::new(
        GaussianMixture::equal_isotropic(vec![vec![-1.0, 0.0], vec![1.0, 1.0], vec![0.0, -2.0]], 0.3).unwrap(),
    );
    let net = ScoreNetwork::new(2, &[16, 16], Activation::Silu, &mut rng).unwrap();
    let fields: [&dyn ScoreField<f64>; 2] = [&mix, &net];
    for sch in [NoiseSchedule::ve(3.0), NoiseSchedule::vp_linear(0.1, 20.0)] {
        for field in fields {
            for _ in 0..100 {
                let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let t = rng.random_range(0.01..1.0);
                let pm = posterior_mean(&sch, field, &x, t).unwrap();
                let (step, _) = integrate(&sch, field, &x, t, 0.0, &SolverConfig::single_step()).unwrap();
                assert!(dist(&pm, &step) <= 1e-12);
                // Against the unscaled formula (x − k·ε)/√α.
                let eps = field.eps(&sch, &x, t).unwrap();
                let (a, k) = (sch.signal_scale(t), sch.noise_scale(t));
                let direct: Vec<f64> = x.iter().zip(&eps).map(|(xi, e)| (xi - k * e) / a).collect();
                assert!(dist(&pm, &direct) <= 1e-12 * (1.0 + dist(&direct, &[0.0, 0.0])));
            }
        }
    }
}

#[test]
fn sigma_and_native_reverse_agree() {
    // Full reverse pass; constant β keeps σ_T ≈ 2.5 so a grid uniform in σ
    // resolves the whole range.
    let sch = NoiseSchedule::vp_constant(2.0);
    let f = gaussian_field(vec![0.4, -0.6], 0.7);
    let x = [1.5, 0.5];
    let gap = |n: usize| {
        let (a, _) = integrate(&sch, &f, &x, 1.0, 0.0, &heun(n)).unwrap();
        let cfg = heun(n).with_parameterization(Parameterization::SigmaReparam);
        let (b, _) = integrate(&sch, &f, &x, 1.0, 0.0, &cfg).unwrap();
        dist(&a, &b)
    };
    assert!(gap(200) < 1e-4);
    let gaps: Vec<f64> = [50, 100, 200, 400].iter().map(|&n| gap(n)).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
}

fn frob_from_scaled_identity(j: &[f64], c: f64) -> f64 {
    let d = (j.len() as f64).sqrt() as usize;
    (0..d * d).map(|k| (j[k] - if k % (d + 1) == 0 { c } else { 0.0 }).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn frozen_jacobian_is_scaled_identity() {
    let mix = MixtureField::new(
        GaussianMixture::new(
            vec![0.5, 0.3, 0.2],
            vec![vec![-1.0, 0.5], vec![1.5, 1.0], vec![0.2, -1.2]],
            vec![
                distill_core::score_fields::Covariance::Isotropic(0.2),
                distill_core::score_fields::Covariance::Full(vec![0.3, 0.1, 0.1, 0.2]),
                distill_core::score_fields::Covariance::Isotropic(0.4),
            ],
        )
        .unwrap(),
    );
    let x = [0.4, 0.1];
    let ve = NoiseSchedule::ve(2.0);
    let j = frozen_flow_jacobian(&ve, &mix, &x, 0.0, 1.0, 1e-4).unwrap();
    assert!(frob_from_scaled_identity(&j, 1.0) < 1e-4);
    let vp = NoiseSchedule::vp_constant(2.0);
    let j = frozen_flow_jacobian(&vp, &mix, &x, 0.0, 1.0, 1e-4).unwrap();
    assert!(frob_from_scaled_identity(&j, (-1.0f64).exp()) < 1e-3);
    let live = flow_jacobian(&ve, &mix, &x, 0.0, 1.0, 1e-4).unwrap();
    assert!(frob_from_scaled_identity(&live, 1.0) > 1e-2);
}

#[test]
fn forward_flow_preserves_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sch = NoiseSchedule::ve(2.0);
    let base = GaussianMixture::equal_isotropic(vec![vec![-1.0, 0.0], vec![1.0, 0.5]], 0.3).unwrap();
    let field = MixtureField::new(base.clone());
    let n = 4000;
    let dirs = random_directions(2, 32, &mut rng);
    for &t in &[0.25, 0.5, 0.9] {
        let target = noised_mixture(&base, &sch, t).unwrap();
        let pushed: Vec<Vec<f64>> = base
            .sample(n, &mut rng)
            .iter()
            .map(|x| integrate(&sch, &field, x, 0.0, t, &heun(50)).unwrap().0)
            .collect();
        let direct = target.sample(n, &mut rng);
        let mut baseline: Vec<f64> = (0..40)
            .map(|_| {
                let (a, b) = (target.sample(n, &mut rng), target.sample(n, &mut rng));
                sliced_wasserstein_with_directions(&a, &b, &dirs).unwrap()
            })
            .collect();
        baseline.sort_by(f64::total_cmp);
        let p99 = baseline[(0.99 * (baseline.len() - 1) as f64).round() as usize];
        let w = sliced_wasserstein_with_directions(&pushed, &direct, &dirs).unwrap();
        assert!(w < p99, "t={t}: {w} vs baseline {p99}");
    }
}

//! Distribution-match diagnostics for particle ensembles.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::{dot, Real};
use crate::score_fields::{GaussianMixture, RingSpec};

/// Random unit directions in `R^d`.
pub fn random_directions<S: Real, R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Vec<Vec<S>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.iter().map(|&x| S::lit(x / norm)).collect();
            }
        })
        .collect()
}

/// Squared 1D Wasserstein-2 distance between two sorted empirical samples,
/// integrating the squared quantile difference over `[0, 1]`.
pub fn wasserstein_1d_sq<S: Real>(a: &[S], b: &[S]) -> S {
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: S = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
        return s / S::from_usize_lossy(n);
    }
    // Merge the quantile breakpoints i/n and j/m.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0.0f64;
    let mut acc = S::zero();
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let diff = a[i] - b[j];
        acc = acc + diff * diff * S::lit(next - prev);
        prev = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc
}

fn projected_sorted<S: Real>(samples: &[Vec<S>], dir: &[S]) -> Vec<S> {
    let mut p: Vec<S> = samples.iter().map(|x| dot(x, dir)).collect();
    p.sort_by(|x, y| x.partial_cmp(y).expect("finite projections"));
    p
}

fn check_samples<S: Real>(a: &[Vec<S>], b: &[Vec<S>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("sample sets must be non-empty".into()));
    }
    let d = a[0].len();
    for x in a.iter().chain(b) {
        check_dim(d, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample".into()));
        }
    }
    Ok(d)
}

/// Average over the given unit directions of the 1D W₂ distance between
/// the projected samples. Exactly symmetric in `(a, b)`.
pub fn sliced_wasserstein_with_directions<S: Real>(a: &[Vec<S>], b: &[Vec<S>], directions: &[Vec<S>]) -> Result<S> {
    let d = check_samples(a, b)?;
    if directions.is_empty() {
        return Err(Error::InvalidParameter("at least one projection is required".into()));
    }
    for dir in directions {
        check_dim(d, dir.len())?;
    }
    let per: Vec<S> = directions
        .par_iter()
        .map(|dir| {
            let (pa, pb) = (projected_sorted(a, dir), projected_sorted(b, dir));
            // Order the pair canonically so swapping the arguments is bit-exact.
            let w = if (pa.len(), pa.as_slice()) <= (pb.len(), pb.as_slice()) {
                wasserstein_1d_sq(&pa, &pb)
            } else {
                wasserstein_1d_sq(&pb, &pa)
            };
            w.sqrt()
        })
        .collect();
    Ok(per.into_iter().sum::<S>() / S::from_usize_lossy(directions.len()))
}

/// Sliced W₂ over `n_projections` random directions.
pub fn sliced_wasserstein<S: Real, R: Rng + ?Sized>(
    a: &[Vec<S>],
    b: &[Vec<S>],
    n_projections: usize,
    rng: &mut R,
) -> Result<S> {
    let d = check_samples(a, b)?;
    let dirs = random_directions(d, n_projections.max(1), rng);
    sliced_wasserstein_with_directions(a, b, &dirs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Fraction of all samples inside each ring's radial band.
    pub band_mass: Vec<f64>,
    /// Fraction of (ring, angle bin) cells holding at least one in-band sample.
    pub occupancy: f64,
    pub collapsed: bool,
}

impl CoverageReport {
    pub fn min_band_mass(&self) -> f64 {
        self.band_mass.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Per-ring band mass and angular occupancy of a 2D sample set.
pub fn ring_coverage<S: Real>(
    samples: &[Vec<S>],
    spec: &RingSpec,
    band_width: f64,
    n_angle_bins: usize,
) -> Result<CoverageReport> {
    spec.validate()?;
    if !(band_width > 0.0) || band_width >= 0.5 * spec.min_gap() {
        return Err(Error::InvalidParameter(format!(
            "band width {band_width} must be positive and below half the minimum ring gap"
        )));
    }
    if n_angle_bins == 0 {
        return Err(Error::InvalidParameter("at least one angle bin is required".into()));
    }
    let rings = spec.radii.len();
    let mut counts = vec![0usize; rings];
    let mut occupied = vec![false; rings * n_angle_bins];
    for x in samples {
        check_dim(2, x.len())?;
        let (px, py) = (x[0].as_f64(), x[1].as_f64());
        let r = px.hypot(py);
        if let Some(k) = spec.radii.iter().position(|&ri| (r - ri).abs() < band_width) {
            counts[k] += 1;
            let theta = py.atan2(px).rem_euclid(std::f64::consts::TAU);
            let bin = ((theta / std::f64::consts::TAU * n_angle_bins as f64) as usize).min(n_angle_bins - 1);
            occupied[k * n_angle_bins + bin] = true;
        }
    }
    let n = samples.len().max(1) as f64;
    let band_mass: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let occupancy = occupied.iter().filter(|&&o| o).count() as f64 / occupied.len() as f64;
    let in_band: usize = counts.iter().sum();
    let dominant = counts.iter().copied().max().unwrap_or(0);
    let collapsed = in_band == 0 || dominant as f64 > 0.9 * in_band as f64 || occupancy < 0.5;
    Ok(CoverageReport { band_mass, occupancy, collapsed })
}

/// Axis-aligned evaluation grid for [`grid_kl`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub resolution: usize,
}

impl Grid {
    pub fn square(half_width: f64, resolution: usize) -> Self {
        Self { lower: vec![-half_width; 2], upper: vec![half_width; 2], resolution }
    }

    fn axis(&self, k: usize) -> Vec<f64> {
        let n = self.resolution;
        (0..n)
            .map(|i| self.lower[k] + (self.upper[k] - self.lower[k]) * (i as f64 + 0.5) / n as f64)
            .collect()
    }

    fn points(&self) -> Vec<Vec<f64>> {
        match self.lower.len() {
            1 => self.axis(0).into_iter().map(|x| vec![x]).collect(),
            _ => {
                let (xs, ys) = (self.axis(0), self.axis(1));
                ys.iter().flat_map(|&y| xs.iter().map(move |&x| vec![x, y])).collect()
            }
        }
    }
}

/// Scott's rule bandwidth `n^(−1/(d+4))·σ̂`, with `σ̂` the mean per-axis std.
pub fn scott_bandwidth<S: Real>(samples: &[Vec<S>]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 1.0;
    }
    let d = samples[0].len();
    let mut std_sum = 0.0;
    for k in 0..d {
        let mean = samples.iter().map(|x| x[k].as_f64()).sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x[k].as_f64() - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        std_sum += var.sqrt();
    }
    let sigma = (std_sum / d as f64).max(1e-6);
    sigma * (n as f64).powf(-1.0 / (d as f64 + 4.0))
}

/// Discrete `KL(KDE(samples) ‖ target)` on a grid.
///
/// The target is convolved with the same Gaussian kernel as the samples, so
/// perfectly distributed samples score near zero regardless of bandwidth.
/// Both grid distributions are normalized and floored at `1e−12`.
pub fn grid_kl<S: Real>(
    samples: &[Vec<S>],
    target: &GaussianMixture<S>,
    grid: &Grid,
    bandwidth: Option<f64>,
) -> Result<f64> {
    let d = target.dim();
    if d == 0 || d > 2 || grid.lower.len() != d || grid.upper.len() != d {
        return Err(Error::InvalidParameter("grid_kl supports matching 1D or 2D grids only".into()));
    }
    if grid.resolution == 0 || samples.is_empty() {
        return Err(Error::EmptyGridMass);
    }
    for x in samples {
        check_dim(d, x.len())?;
    }
    let h = bandwidth.unwrap_or_else(|| scott_bandwidth(samples));
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("bandwidth must be positive".into()));
    }
    let points = grid.points();
    let kde = kde_on_grid(samples, grid, h);
    let smoothed = target.pushforward(S::one(), S::lit(h * h))?;
    let q: Vec<f64> = points
        .par_iter()
        .map(|p| {
            let x: Vec<S> = p.iter().map(|&v| S::lit(v)).collect();
            smoothed.density(&x).map(|v| v.as_f64())
        })
        .collect::<Result<_>>()?;
    let (ps, qs) = (kde.iter().sum::<f64>(), q.iter().sum::<f64>());
    if !(ps > 0.0 && qs > 0.0 && ps.is_finite() && qs.is_finite()) {
        return Err(Error::EmptyGridMass);
    }
    let floor = 1e-12;
    let kl = kde
        .iter()
        .zip(&q)
        .map(|(&p, &q)| {
            let p = (p / ps).max(floor);
            let q = (q / qs).max(floor);
            p * (p / q).ln()
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Unnormalized Gaussian KDE on the grid cells, truncated at 5 bandwidths.
fn kde_on_grid<S: Real>(samples: &[Vec<S>], grid: &Grid, h: f64) -> Vec<f64> {
    let d = grid.lower.len();
    let n = grid.resolution;
    let cell: Vec<f64> = (0..d).map(|k| (grid.upper[k] - grid.lower[k]) / n as f64).collect();
    let reach: Vec<usize> = cell.iter().map(|&c| (5.0 * h / c).ceil() as usize + 1).collect();
    let inv = 1.0 / (2.0 * h * h);
    let mut out = vec![0.0; if d == 1 { n } else { n * n }];
    for x in samples {
        let x: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
        let centre: Vec<isize> =
            (0..d).map(|k| ((x[k] - grid.lower[k]) / cell[k] - 0.5).round() as isize).collect();
        let range = |k: usize| {
            let lo = (centre[k] - reach[k] as isize).max(0);
            let hi = (centre[k] + reach[k] as isize).min(n as isize - 1);
            lo..=hi
        };
        let coord = |k: usize, i: isize| grid.lower[k] + cell[k] * (i as f64 + 0.5);
        if d == 1 {
            for i in range(0) {
                let dx = coord(0, i) - x[0];
                out[i as usize] += (-dx * dx * inv).exp();
            }
        } else {
            for j in range(1) {
                let dy = coord(1, j) - x[1];
                for i in range(0) {
                    let dx = coord(0, i) - x[0];
                    out[j as usize * n + i as usize] += (-(dx * dx + dy * dy) * inv).exp();
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = vec![vec![0.1, 0.2], vec![-1.0, 3.0], vec![2.0, 0.5]];
        assert_eq!(sliced_wasserstein(&a, &a, 50, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn point_masses_one_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: f64 = sliced_wasserstein(&[vec![0.0]], &[vec![1.0]], 10, &mut rng).unwrap();
        assert!((w - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unequal_sizes() {
        // {0, 1} vs {0.5}: quantile gap is 0.5 everywhere.
        let w: f64 = wasserstein_1d_sq(&[0.0, 1.0], &[0.5]);
        assert!((w - 0.25).abs() < 1e-15);
        let w: f64 = wasserstein_1d_sq(&[0.0, 1.0, 2.0], &[0.0, 2.0]);
        // Quantile segments [0,1/3]:0, [1/3,1/2]:1, [1/2,2/3]:1, [2/3,1]:0.
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shared_directions_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Vec<f64>> = (0..37).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        let b: Vec<Vec<f64>> = (0..23).map(|i| vec![(i as f64).cos() + 0.4, i as f64 * 0.01]).collect();
        let dirs = random_directions(2, 40, &mut rng);
        assert_eq!(
            sliced_wasserstein_with_directions(&a, &b, &dirs).unwrap(),
            sliced_wasserstein_with_directions(&b, &a, &dirs).unwrap()
        );
    }

    fn rings() -> RingSpec {
        RingSpec { radii: vec![1.0, 2.0, 3.0], thickness: 0.1, modes_per_ring: 64 }
    }

    #[test]
    fn uniform_ring_samples_cover_everything() {
        let mut samples = Vec::new();
        for &r in &[1.0, 2.0, 3.0] {
            for k in 0..64 {
                let th = std::f64::consts::TAU * (k as f64 + 0.5) / 64.0;
                samples.push(vec![r * th.cos(), r * th.sin()]);
            }
        }
        let rep = ring_coverage(&samples, &rings(), 0.2, 16).unwrap();
        assert_eq!(rep.occupancy, 1.0);
        assert!(!rep.collapsed);
        assert!(rep.band_mass.iter().all(|&m| (m - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn single_point_collapses() {
        let samples = vec![vec![1.0, 0.0]; 100];
        let rep = ring_coverage(&samples, &rings(), 0.2, 16).unwrap();
        assert_eq!(rep.band_mass[0], 1.0);
        assert!(rep.occupancy <= 1.0 / 48.0 + 1e-15);
        assert!(rep.collapsed);
        assert!(ring_coverage(&samples, &rings(), 0.6, 16).is_err());
    }

    #[test]
    fn kl_self_and_distant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = GaussianMixture::equal_isotropic(vec![vec![-1.0, 0.0], vec![1.0, 0.5]], 0.5).unwrap();
        let grid = Grid::square(4.0, 80);
        let own = target.sample(10_000, &mut rng);
        let kl = grid_kl(&own, &target, &grid, None).unwrap();
        assert!(kl < 0.05, "{kl}");
        let far = GaussianMixture::isotropic(vec![2.5, -2.5], 0.3).unwrap().sample(10_000, &mut rng);
        assert!(grid_kl(&far, &target, &grid, None).unwrap() > 1.0);
    }

    #[test]
    fn kl_needs_mass() {
        let target = GaussianMixture::isotropic(vec![0.0, 0.0], 1.0).unwrap();
        let far = vec![vec![100.0, 100.0]];
        assert!(matches!(grid_kl(&far, &target, &Grid::square(3.0, 20), Some(0.1)), Err(Error::EmptyGridMass)));
    }
}

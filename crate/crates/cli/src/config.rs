//! TOML experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use distill_core::distillation::{DistillMethod, DistillationConfig};
use distill_core::metrics::Grid;
use distill_core::schedules::{NoiseSchedule, ScheduleSpec};
use distill_core::score_fields::{ring_to_mixture, Covariance, GaussianMixture, RingSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    Rings(RingSpec),
    /// Isotropic 2D mixture.
    Mixture { weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64> },
}

impl TargetSpec {
    pub fn mixture(&self) -> distill_core::Result<GaussianMixture<f64>> {
        match self {
            TargetSpec::Rings(spec) => ring_to_mixture(spec),
            TargetSpec::Mixture { weights, means, stds } => GaussianMixture::new(
                weights.clone(),
                means.clone(),
                stds.iter().map(|s| Covariance::Isotropic(s * s)).collect(),
            ),
        }
    }

    pub fn rings(&self) -> Option<&RingSpec> {
        match self {
            TargetSpec::Rings(spec) => Some(spec),
            TargetSpec::Mixture { .. } => None,
        }
    }

    /// Distance from the origin that contains the target's bulk.
    pub fn extent(&self) -> f64 {
        match self {
            TargetSpec::Rings(spec) => spec.outer_radius(),
            TargetSpec::Mixture { means, stds, .. } => means
                .iter()
                .zip(stds)
                .map(|(m, s)| m.iter().map(|v| v * v).sum::<f64>().sqrt() + 2.0 * s)
                .fold(0.0, f64::max),
        }
    }
}

/// The unconditional field of the toy guidance analogue is the target with
/// covariances multiplied by `unconditional_broadening`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceOptions {
    #[serde(default = "default_broadening")]
    pub unconditional_broadening: f64,
}

impl Default for GuidanceOptions {
    fn default() -> Self {
        Self { unconditional_broadening: default_broadening() }
    }
}

fn default_broadening() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Half-width of the square KL grid.
    pub grid_half_width: f64,
    pub grid_resolution: usize,
    /// KDE bandwidth for `grid_kl`; Scott's rule when absent.
    pub kl_bandwidth: Option<f64>,
    pub sw_projections: usize,
    pub reference_samples: usize,
    /// Radial band half-width for ring coverage.
    pub band_width: f64,
    pub angle_bins: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            grid_half_width: 15.0,
            grid_resolution: 300,
            kl_bandwidth: Some(0.3),
            sw_projections: 64,
            reference_samples: 2000,
            band_width: 0.3,
            angle_bins: 16,
        }
    }
}

impl MetricOptions {
    pub fn grid(&self) -> Grid {
        Grid::square(self.grid_half_width, self.grid_resolution)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotOptions {
    /// Half-width of the square viewport in data units.
    pub bounds: f64,
    /// Particle dot radius in pixels.
    pub point_radius: f64,
    /// Side of one panel in pixels.
    pub panel_size: f64,
    /// Also write a methods × snapshots overview figure.
    pub overview: bool,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self { bounds: 4.5, point_radius: 1.2, panel_size: 240.0, overview: true }
    }
}

/// `(γ_fwd, γ_rev)` pairs run with PFD by `ablate-cfg`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationOptions {
    pub pairs: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub particles: usize,
    /// Std of the initial Gaussian; 1.5× the target extent when absent.
    #[serde(default)]
    pub init_scale: Option<f64>,
    pub methods: Vec<DistillMethod>,
    pub snapshot_iterations: Vec<usize>,
    pub schedule: ScheduleSpec,
    pub target: TargetSpec,
    #[serde(default)]
    pub guidance: GuidanceOptions,
    /// Settings shared by every method (any `DistillationConfig` field but
    /// `method`, `seed` and `snapshot_iterations`).
    #[serde(default)]
    pub distillation: toml::Table,
    /// Per-method tables merged over `distillation`.
    #[serde(default)]
    pub overrides: BTreeMap<DistillMethod, toml::Table>,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default)]
    pub plot: PlotOptions,
    #[serde(default)]
    pub ablation: Option<AblationOptions>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{field}: {msg}"))
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule<f64>, CliError> {
        self.schedule.build().map_err(|e| invalid("schedule", e))
    }

    pub fn initial_scale(&self) -> f64 {
        self.init_scale.unwrap_or(1.5 * self.target.extent())
    }

    /// Effective distillation settings for one method.
    pub fn method_config(&self, method: DistillMethod) -> Result<DistillationConfig, CliError> {
        let mut table = self.distillation.clone();
        if let Some(o) = self.overrides.get(&method) {
            merge(&mut table, o);
        }
        for reserved in ["method", "seed", "snapshot_iterations"] {
            if table.contains_key(reserved) {
                return Err(invalid(&format!("distillation.{reserved}"), "is set at the top level"));
            }
        }
        table.insert("method".into(), toml::Value::String(method.name().into()));
        let mut cfg: DistillationConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| invalid(&format!("overrides.{method}"), e.message()))?;
        cfg.seed = self.seed;
        cfg.snapshot_iterations = self.snapshot_iterations.clone();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.particles == 0 {
            return Err(invalid("particles", "must be positive"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods", "must list at least one method"));
        }
        let mut seen = self.methods.clone();
        seen.sort_by_key(|m| m.name());
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(invalid("methods", "contains duplicates"));
        }
        if self.snapshot_iterations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("snapshot_iterations", "must be strictly increasing"));
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid("init_scale", "must be positive"));
            }
        }
        let schedule = self.schedule()?;
        let mixture = self.target.mixture().map_err(|e| invalid("target", e))?;
        if mixture.dim() != 2 {
            return Err(invalid("target", "must be two-dimensional"));
        }
        let b = self.guidance.unconditional_broadening;
        if !(b > 0.0 && b.is_finite()) {
            return Err(invalid("guidance.unconditional_broadening", "must be positive"));
        }
        for &m in &self.methods {
            let cfg = self.method_config(m)?;
            if let Some(&last) = self.snapshot_iterations.last() {
                if last > cfg.iterations {
                    return Err(invalid(
                        "snapshot_iterations",
                        format!("{last} exceeds {m} iterations {}", cfg.iterations),
                    ));
                }
            }
            cfg.validate(&schedule).map_err(|e| invalid(&format!("overrides.{m}"), e))?;
        }
        let mo = &self.metrics;
        if !(mo.grid_half_width > 0.0) || mo.grid_resolution == 0 {
            return Err(invalid("metrics.grid_half_width", "grid must be non-empty"));
        }
        if let Some(h) = mo.kl_bandwidth {
            if !(h > 0.0) {
                return Err(invalid("metrics.kl_bandwidth", "must be positive"));
            }
        }
        if mo.sw_projections == 0 || mo.reference_samples == 0 {
            return Err(invalid("metrics.sw_projections", "projections and reference samples must be positive"));
        }
        if let Some(spec) = self.target.rings() {
            if !(mo.band_width > 0.0 && mo.band_width < 0.5 * spec.min_gap()) {
                return Err(invalid("metrics.band_width", "must be positive and below half the minimum ring gap"));
            }
            if mo.angle_bins == 0 {
                return Err(invalid("metrics.angle_bins", "must be positive"));
            }
        }
        let po = &self.plot;
        if !(po.bounds > 0.0 && po.point_radius > 0.0 && po.panel_size > 0.0) {
            return Err(invalid("plot", "bounds, point_radius and panel_size must be positive"));
        }
        if let Some(a) = &self.ablation {
            if a.pairs.is_empty() || a.pairs.iter().flatten().any(|g| !g.is_finite()) {
                return Err(invalid("ablation.pairs", "must be a non-empty list of finite pairs"));
            }
        }
        Ok(())
    }
}

//! Experiment execution: distillation runs, snapshot emission, metrics and manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use distill_core::distillation::{
    run_distillation, stream_seed, DistillMethod, DistillationConfig, ParticleEnsemble, PriorModel,
};
use distill_core::metrics::{grid_kl, random_directions, ring_coverage, sliced_wasserstein_with_directions, CoverageReport, Grid};
use distill_core::schedules::NoiseSchedule;
use distill_core::score_fields::{GaussianMixture, MixtureField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::plot::{plot_ensemble, render_overview, write_svg};
use crate::snapshot::write_snapshot;

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunOptions {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(d) = &self.out_dir {
            config.output_dir = d.clone();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub tau: usize,
    pub sw_dist: f64,
    pub kl: f64,
    /// Empty for non-ring targets.
    pub occupancy: Option<f64>,
    pub collapsed: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFiles {
    pub tau: usize,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: DistillMethod,
    pub status: Status,
    pub snapshots: Vec<SnapshotFiles>,
    pub metrics: Option<PathBuf>,
    pub final_coverage: Option<CoverageReport>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub forward_cfg: f64,
    pub reverse_cfg: f64,
    pub kl: f64,
    pub sw_dist: f64,
    pub occupancy: Option<f64>,
    pub collapsed: Option<bool>,
    pub diverged: bool,
    /// Final KL above twice the best pair's.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub status: Status,
    pub output_dir: PathBuf,
    pub methods: Vec<MethodRecord>,
    pub overview: Option<PathBuf>,
    pub ablation: Option<PathBuf>,
    /// SHA-256 of every emitted file, keyed by path relative to `output_dir`.
    pub file_hashes: BTreeMap<PathBuf, String>,
    pub seconds: f64,
}

impl RunManifest {
    pub fn path(&self) -> PathBuf {
        self.output_dir.join("manifest.json")
    }
}

/// Fields and metric state shared by every method of a run.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub schedule: NoiseSchedule<f64>,
    pub target: GaussianMixture<f64>,
    pub prior: PriorModel<f64>,
    reference: Vec<Vec<f64>>,
    directions: Vec<Vec<f64>>,
    grid: Grid,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, CliError> {
        config.validate()?;
        let schedule = config.schedule()?;
        let target = config.target.mixture()?;
        let broad = target.broadened(config.guidance.unconditional_broadening)?;
        let prior = PriorModel::guided(Arc::new(MixtureField::new(target.clone())), Arc::new(MixtureField::new(broad)));
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, u64::MAX - 3, 0));
        let reference = target.sample(config.metrics.reference_samples, &mut rng);
        let directions = random_directions(2, config.metrics.sw_projections, &mut rng);
        let grid = config.metrics.grid();
        Ok(Self { config, schedule, target, prior, reference, directions, grid })
    }

    pub fn initial_ensemble(&self) -> Result<ParticleEnsemble<f64>, CliError> {
        Ok(ParticleEnsemble::gaussian(self.config.particles, 2, self.config.initial_scale(), self.config.seed)?)
    }

    pub fn coverage(&self, positions: &[Vec<f64>]) -> Result<Option<CoverageReport>, CliError> {
        let m = &self.config.metrics;
        match self.config.target.rings() {
            Some(spec) => Ok(Some(ring_coverage(positions, spec, m.band_width, m.angle_bins)?)),
            None => Ok(None),
        }
    }

    /// Grid KL; infinite when no particle lands on the grid.
    pub fn kl(&self, positions: &[Vec<f64>]) -> Result<f64, CliError> {
        match grid_kl(positions, &self.target, &self.grid, self.config.metrics.kl_bandwidth) {
            Err(distill_core::Error::EmptyGridMass) => Ok(f64::INFINITY),
            r => Ok(r?),
        }
    }

    pub fn metrics(&self, tau: usize, positions: &[Vec<f64>]) -> Result<MetricsRow, CliError> {
        let sw_dist = sliced_wasserstein_with_directions(positions, &self.reference, &self.directions)?;
        let cov = self.coverage(positions)?;
        Ok(MetricsRow {
            tau,
            sw_dist,
            kl: self.kl(positions)?,
            occupancy: cov.as_ref().map(|c| c.occupancy),
            collapsed: cov.map(|c| c.collapsed),
        })
    }

    /// Runs one distillation with the given settings, calling `on_snapshot`
    /// at every snapshot iteration.
    pub fn distill(
        &self,
        config: DistillationConfig,
        on_snapshot: &mut dyn FnMut(usize, &[Vec<f64>]) -> Result<(), CliError>,
    ) -> Result<ParticleEnsemble<f64>, RunFailure> {
        let mut pending: Option<CliError> = None;
        let mut hook = |tau: usize, p: &[Vec<f64>]| -> distill_core::Result<()> {
            on_snapshot(tau, p).map_err(|e| {
                let msg = e.to_string();
                pending = Some(e);
                distill_core::Error::InvalidParameter(msg)
            })
        };
        let result = run_distillation(self.initial_ensemble().map_err(RunFailure::Other)?, &self.schedule, self.prior.clone(), config, Some(&mut hook));
        match result {
            Ok(ens) => Ok(ens),
            Err(e) => match pending.take() {
                Some(cli) => Err(RunFailure::Other(cli)),
                None => Err(RunFailure::from_core(e)),
            },
        }
    }
}

/// Why a distillation stopped early.
pub enum RunFailure {
    Diverged { iteration: usize, cause: String, positions: Vec<Vec<f64>> },
    Other(CliError),
}

impl RunFailure {
    fn from_core(e: distill_core::Error) -> Self {
        use distill_core::Error as E;
        match e {
            E::ParticleDiverged { iteration, cause, positions, particle } => {
                RunFailure::Diverged { iteration, cause: format!("particle {particle}: {cause}"), positions }
            }
            E::TrainingDiverged { step, .. } => RunFailure::Diverged { iteration: step, cause: e.to_string(), positions: Vec::new() },
            other => RunFailure::Other(other.into()),
        }
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let bad = |e: csv::Error| CliError::Snapshot { path: path.into(), msg: e.to_string() };
    csv::Reader::from_path(path).map_err(bad)?.deserialize().collect::<Result<_, _>>().map_err(bad)
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn finish_manifest(manifest: &mut RunManifest, files: &[PathBuf], started: Instant) -> Result<(), CliError> {
    for f in files {
        manifest.file_hashes.insert(f.clone(), sha256_file(&manifest.output_dir.join(f))?);
    }
    manifest.seconds = started.elapsed().as_secs_f64();
    write_json(&manifest.path(), manifest)
}

fn new_manifest(config: &ExperimentConfig) -> RunManifest {
    RunManifest {
        config_hash: config.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: Status::Complete,
        output_dir: config.output_dir.clone(),
        methods: Vec::new(),
        overview: None,
        ablation: None,
        file_hashes: BTreeMap::new(),
        seconds: 0.0,
    }
}

fn fmt_tau(tau: usize) -> String {
    format!("{tau:06}")
}

/// Runs every configured method and writes snapshots, metrics, plots and the manifest.
pub fn run(mut config: ExperimentConfig, opts: &RunOptions) -> Result<RunManifest, CliError> {
    opts.apply(&mut config);
    let exp = Experiment::new(config)?;
    let cfg = &exp.config;
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    let started = Instant::now();
    let mut manifest = new_manifest(cfg);
    let mut files: Vec<PathBuf> = Vec::new();
    let mut overview_rows = Vec::new();
    for &method in &cfg.methods {
        let dcfg = cfg.method_config(method)?;
        let rel_dir = PathBuf::from(method.name());
        create_dir(&out.join(&rel_dir))?;
        log::info!("{method}: {} particles, {} iterations", cfg.particles, dcfg.iterations);
        let t0 = Instant::now();
        let mut snapshots = Vec::new();
        let mut rows = Vec::new();
        let mut kept = Vec::new();
        let title = method.name().to_uppercase();
        let mut on_snapshot = |tau: usize, p: &[Vec<f64>]| -> Result<(), CliError> {
            let csv = rel_dir.join(format!("snapshot_{}.csv", fmt_tau(tau)));
            let svg = rel_dir.join(format!("snapshot_{}.svg", fmt_tau(tau)));
            write_snapshot(&out.join(&csv), tau, p)?;
            plot_ensemble(p, cfg.target.rings(), &cfg.plot, Some(&format!("{title} τ={tau}")), &out.join(&svg))?;
            let row = exp.metrics(tau, p)?;
            log::info!("{method} τ={tau}: kl {:.4} sw {:.4} occupancy {:?}", row.kl, row.sw_dist, row.occupancy);
            rows.push(row);
            snapshots.push(SnapshotFiles { tau, csv, svg });
            kept.push((tau, p.to_vec()));
            Ok(())
        };
        let result = exp.distill(dcfg, &mut on_snapshot);
        let metrics = rel_dir.join("metrics.csv");
        write_rows(&out.join(&metrics), &rows)?;
        files.extend(snapshots.iter().flat_map(|s| [s.csv.clone(), s.svg.clone()]));
        files.push(metrics.clone());
        let mut record = MethodRecord {
            method,
            status: Status::Complete,
            snapshots,
            metrics: Some(metrics),
            final_coverage: None,
            seconds: 0.0,
            error: None,
        };
        match result {
            Ok(ens) => {
                record.final_coverage = exp.coverage(&ens.positions)?;
                let final_csv = rel_dir.join("final.csv");
                write_snapshot(&out.join(&final_csv), ens.iteration, &ens.positions)?;
                files.push(final_csv);
                record.seconds = t0.elapsed().as_secs_f64();
                manifest.methods.push(record);
                overview_rows.push((title, kept));
            }
            Err(RunFailure::Diverged { iteration, cause, positions }) => {
                let dump = rel_dir.join("diverged.csv");
                write_snapshot(&out.join(&dump), iteration, &positions)?;
                files.push(dump);
                record.status = Status::Failed;
                record.error = Some(cause.clone());
                record.seconds = t0.elapsed().as_secs_f64();
                manifest.methods.push(record);
                manifest.status = Status::Failed;
                finish_manifest(&mut manifest, &files, started)?;
                return Err(CliError::Divergence { method: method.name().into(), iteration, cause, manifest: manifest.path() });
            }
            Err(RunFailure::Other(e)) => return Err(e),
        }
    }
    if cfg.plot.overview && !overview_rows.is_empty() {
        let path = PathBuf::from("overview.svg");
        write_svg(&out.join(&path), &render_overview(&overview_rows, cfg.target.rings(), &cfg.plot))?;
        files.push(path.clone());
        manifest.overview = Some(path);
    }
    finish_manifest(&mut manifest, &files, started)?;
    Ok(manifest)
}

/// Runs PFD for every `(γ_fwd, γ_rev)` pair of the ablation grid.
pub fn ablate_cfg(mut config: ExperimentConfig, opts: &RunOptions) -> Result<RunManifest, CliError> {
    opts.apply(&mut config);
    let pairs = match &config.ablation {
        Some(a) => a.pairs.clone(),
        None => return Err(CliError::Validation("ablation: section with `pairs` is required".into())),
    };
    let exp = Experiment::new(config)?;
    let cfg = &exp.config;
    let out = cfg.output_dir.clone();
    let rel_dir = PathBuf::from("ablation");
    create_dir(&out.join(&rel_dir))?;
    let started = Instant::now();
    let mut manifest = new_manifest(cfg);
    let mut files = Vec::new();
    let mut rows = Vec::new();
    let base = cfg.method_config(DistillMethod::Pfd)?;
    for (k, &[gf, gr]) in pairs.iter().enumerate() {
        let mut dcfg = base.clone();
        dcfg.forward_cfg = gf;
        dcfg.reverse_cfg = gr;
        dcfg.snapshot_iterations.clear();
        log::info!("ablation pair {k}: forward {gf}, reverse {gr}");
        match exp.distill(dcfg, &mut |_, _| Ok(())) {
            Ok(ens) => {
                let m = exp.metrics(ens.iteration, &ens.positions)?;
                log::info!("pair {k}: kl {:.4} occupancy {:?}", m.kl, m.occupancy);
                let csv = rel_dir.join(format!("pair_{k:02}.csv"));
                let svg = rel_dir.join(format!("pair_{k:02}.svg"));
                write_snapshot(&out.join(&csv), ens.iteration, &ens.positions)?;
                plot_ensemble(&ens.positions, cfg.target.rings(), &cfg.plot, Some(&format!("γ_fwd={gf} γ_rev={gr}")), &out.join(&svg))?;
                files.extend([csv, svg]);
                rows.push(AblationRow {
                    forward_cfg: gf,
                    reverse_cfg: gr,
                    kl: m.kl,
                    sw_dist: m.sw_dist,
                    occupancy: m.occupancy,
                    collapsed: m.collapsed,
                    diverged: false,
                    flagged: false,
                });
            }
            Err(RunFailure::Diverged { iteration, cause, .. }) => {
                log::warn!("ablation pair {k} diverged at iteration {iteration}: {cause}");
                rows.push(AblationRow {
                    forward_cfg: gf,
                    reverse_cfg: gr,
                    kl: f64::INFINITY,
                    sw_dist: f64::INFINITY,
                    occupancy: None,
                    collapsed: None,
                    diverged: true,
                    flagged: false,
                });
            }
            Err(RunFailure::Other(e)) => return Err(e),
        }
    }
    let best = rows.iter().map(|r| r.kl).fold(f64::INFINITY, f64::min);
    for r in &mut rows {
        r.flagged = r.kl > 2.0 * best;
    }
    let table = rel_dir.join("ablation.csv");
    write_rows(&out.join(&table), &rows)?;
    files.push(table.clone());
    manifest.ablation = Some(table);
    finish_manifest(&mut manifest, &files, started)?;
    Ok(manifest)
}

pub fn read_ablation(path: &Path) -> Result<Vec<AblationRow>, CliError> {
    let bad = |e: csv::Error| CliError::Snapshot { path: path.into(), msg: e.to_string() };
    csv::Reader::from_path(path).map_err(bad)?.deserialize().collect::<Result<_, _>>().map_err(bad)
}

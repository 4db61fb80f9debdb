//! Experiment harness: configuration with per-experiment defaults, per-seed
//! runners for the four benchmark systems and the lemma sweep, and file
//! emission with config-hash-tagged names.

use crate::delay::{select_delay, DelayCriterion, DelaySelection};
use crate::dmd::{compressed_dmd, exact_dmd, lift_series, Dictionary, RankPolicy};
use crate::enkf::{
    run_filter, CovStorage, FilterConfig, FilterKind, FilterMode, FilterRun,
};
use crate::error::{Error, Result};
use crate::report::{
    render_plotdata, render_svg, render_table, write_text, OutputFormat, Table, Track, Value,
};
use crate::series::{build_data_matrices, rmse, SnapshotSeries};
use crate::spectral::SpectralParams;
use crate::systems::{
    add_noise, benchmark_fourier_modes, gen_allen_cahn, gen_fourier_system, gen_nonauto_linear,
    gen_ode_auto, EigenTrack, GroundTruth, Reaction,
};
use crate::theory::{lemma_sweep, misfit_ledger, LemmaSweepReport, TruthParams};
use ndarray::{s, Array1, Array2};
use ndarray_linalg::{c64, QR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    OdeAuto,
    Fourier,
    NonautoLinear,
    AllenCahn,
    LemmaSweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::OdeAuto => "ode_auto",
            ExperimentKind::Fourier => "fourier",
            ExperimentKind::NonautoLinear => "nonauto_linear",
            ExperimentKind::AllenCahn => "allen_cahn",
            ExperimentKind::LemmaSweep => "lemma_sweep",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ode_auto" => Ok(ExperimentKind::OdeAuto),
            "fourier" => Ok(ExperimentKind::Fourier),
            "nonauto_linear" => Ok(ExperimentKind::NonautoLinear),
            "allen_cahn" => Ok(ExperimentKind::AllenCahn),
            "lemma_sweep" => Ok(ExperimentKind::LemmaSweep),
            other => Err(Error::Config(format!("unknown experiment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSettings {
    pub kind: FilterKind,
    pub ensemble_size: usize,
    /// 0 selects the delay count adaptively.
    pub delays: usize,
    /// Observation noise std in filter coordinates; 0 derives it from the
    /// measurement noise and data scaling.
    pub obs_sigma: f64,
    pub q_std: f64,
    pub mode_prior_var: f64,
    pub eig_prior_var: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdeParams {
    pub mu: f64,
    pub lam: f64,
    pub x0: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FourierParams {
    pub grid: usize,
    pub compressed_dim: usize,
    pub compression_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonautoParams {
    pub omega: f64,
    pub freq_divisor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllenCahnParams {
    pub diffusion: f64,
    pub nx: usize,
    /// Smooth sine modes per direction in the projection basis.
    pub basis_per_dir: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DelayParams {
    pub epsilon: f64,
    pub max_n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub format: OutputFormat,
    pub emit_svg: bool,
    /// Measurement (or background, for the Fourier system) noise std.
    pub sigma: f64,
    pub dt: f64,
    pub steps: usize,
    /// Last snapshot index used for fitting; later snapshots are prediction
    /// targets.
    pub train_last: usize,
    pub filter: FilterSettings,
    pub ode: OdeParams,
    pub fourier: FourierParams,
    pub nonauto: NonautoParams,
    pub allen_cahn: AllenCahnParams,
    pub delay: DelayParams,
    pub lemma_count: usize,
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut cfg = ExperimentConfig {
            experiment: kind,
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            format: OutputFormat::Csv,
            emit_svg: false,
            sigma: 0.1,
            dt: 1.0,
            steps: 200,
            train_last: 100,
            filter: FilterSettings {
                kind: FilterKind::Etkf,
                ensemble_size: 40,
                delays: 60,
                obs_sigma: 0.0,
                q_std: 0.0,
                mode_prior_var: 1e-2,
                eig_prior_var: 3e-4,
                rank: 3,
            },
            ode: OdeParams {
                mu: 0.99f64.ln(),
                lam: -0.5,
                x0: [3.0, -1.0],
            },
            fourier: FourierParams {
                grid: 32,
                compressed_dim: 24,
                compression_seed: 999,
            },
            nonauto: NonautoParams {
                omega: 2.0,
                freq_divisor: 1.0,
            },
            allen_cahn: AllenCahnParams {
                diffusion: 0.1,
                nx: 20,
                basis_per_dir: 3,
            },
            delay: DelayParams {
                epsilon: 0.2,
                max_n: 50,
            },
            lemma_count: 200,
        };
        match kind {
            ExperimentKind::OdeAuto => {}
            ExperimentKind::Fourier => {
                cfg.sigma = 4e-3;
                cfg.dt = 0.05;
                cfg.steps = 200;
                cfg.train_last = 200;
                cfg.seeds = (0..5).collect();
                cfg.filter = FilterSettings {
                    kind: FilterKind::Enkf,
                    ensemble_size: 100,
                    delays: 5,
                    obs_sigma: 0.1,
                    q_std: 0.0,
                    mode_prior_var: 1e-2,
                    eig_prior_var: 1e-3,
                    rank: 10,
                };
            }
            ExperimentKind::NonautoLinear => {
                cfg.sigma = 0.1;
                cfg.dt = 0.01;
                cfg.steps = 600;
                cfg.train_last = 600;
                cfg.filter = FilterSettings {
                    kind: FilterKind::Etkf,
                    ensemble_size: 24,
                    delays: 5,
                    obs_sigma: 0.0,
                    q_std: 3e-4,
                    mode_prior_var: 1e-2,
                    eig_prior_var: 1e-4,
                    rank: 2,
                };
            }
            ExperimentKind::AllenCahn => {
                cfg.sigma = 0.1;
                cfg.dt = 0.05;
                cfg.steps = 100;
                cfg.train_last = 40;
                cfg.seeds = (0..3).collect();
                cfg.filter = FilterSettings {
                    kind: FilterKind::Enkf,
                    ensemble_size: 150,
                    delays: 0,
                    obs_sigma: 0.0,
                    q_std: 0.0,
                    mode_prior_var: 1e-3,
                    eig_prior_var: 1e-4,
                    rank: 3,
                };
            }
            ExperimentKind::LemmaSweep => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must be nonempty".into()));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if self.dt <= 0.0 {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps < 2 {
            return Err(Error::Config("need at least two steps".into()));
        }
        if self.train_last < 1 || self.train_last > self.steps {
            return Err(Error::Config(format!(
                "train_last {} outside 1..={}",
                self.train_last, self.steps
            )));
        }
        if self.filter.rank == 0 || self.filter.ensemble_size < 2 {
            return Err(Error::Config("need rank >= 1 and ensemble_size >= 2".into()));
        }
        Ok(())
    }

    /// First 8 hex chars of the SHA-256 of the resolved config, with output
    /// location and seed list factored out (both appear in file names).
    pub fn hash_prefix(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.seeds = Vec::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(4).map(|b| format!("{b:02x}")).collect()
    }

    pub fn file_path(&self, name: &str, seed: Option<u64>, ext: &str) -> PathBuf {
        let tag = match seed {
            Some(s) => format!("seed{s}"),
            None => "all".to_string(),
        };
        self.out_dir.join(format!(
            "{}_{}_{}_{}.{}",
            self.experiment.name(),
            name,
            tag,
            self.hash_prefix(),
            ext
        ))
    }
}

/// Deep-merge a JSON overlay into a resolved config; objects merge
/// recursively, everything else is replaced.
pub fn merge_overlay(base: &ExperimentConfig, overlay: &serde_json::Value) -> Result<ExperimentConfig> {
    if !overlay.is_object() {
        return Err(Error::Config("config overlay must be a JSON object".into()));
    }
    let mut value = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
    merge_values(&mut value, overlay);
    serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))
}

fn merge_values(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    match (base.as_object_mut(), overlay.as_object()) {
        (Some(bm), Some(om)) => {
            for (k, v) in om {
                match bm.get_mut(k) {
                    Some(bv) if bv.is_object() && v.is_object() => merge_values(bv, v),
                    _ => {
                        bm.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        _ => *base = overlay.clone(),
    }
}

/// Mean distance between two spectra under greedy nearest-pair matching.
pub fn eigenvalue_distance(est: &Array1<c64>, truth: &[c64]) -> f64 {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, e) in est.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            pairs.push(((e - t).norm(), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_est = vec![false; est.len()];
    let mut used_truth = vec![false; truth.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    for (d, i, j) in pairs {
        if !used_est[i] && !used_truth[j] {
            used_est[i] = true;
            used_truth[j] = true;
            total += d;
            count += 1;
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    num / (da * db).sqrt()
}

fn filter_config(settings: &FilterSettings, obs_sigma: f64, delays: usize, seed: u64) -> FilterConfig {
    FilterConfig {
        ensemble_size: settings.ensemble_size,
        sigma: obs_sigma,
        q_std: settings.q_std,
        delays,
        filter_kind: settings.kind,
        mode_prior_var: settings.mode_prior_var,
        eig_prior_var: settings.eig_prior_var,
        seed,
        rank: settings.rank,
        store_covariance: CovStorage::None,
    }
}

fn fixed_truth_eigs(truth: &GroundTruth) -> Result<Vec<c64>> {
    match &truth.eigenvalues {
        EigenTrack::Fixed(e) => Ok(e.to_vec()),
        _ => Err(Error::InvalidInput("expected a fixed spectrum".into())),
    }
}

// ---------------------------------------------------------------------------
// slow-manifold ODE
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct OdeAutoOutcome {
    pub truth: GroundTruth,
    pub noisy: SnapshotSeries,
    pub clean_dmd: SpectralParams,
    pub noisy_dmd: SpectralParams,
    pub filtered: SpectralParams,
    pub run: FilterRun,
    pub true_eigs: Vec<c64>,
    pub eig_err_noisy: f64,
    pub eig_err_filtered: f64,
    pub recon_rmse_noisy: f64,
    pub recon_rmse_filtered: f64,
    pub pred_rmse_noisy: f64,
    pub pred_rmse_filtered: f64,
}

fn window_rmse(params: &SpectralParams, truth: &SnapshotSeries, from: usize, to: usize) -> Result<f64> {
    let d = truth.dim();
    let cols = to - from + 1;
    let mut est = Array2::zeros((d, cols));
    let mut tru = Array2::zeros((d, cols));
    for (i, k) in (from..=to).enumerate() {
        let x = params.reconstruct(k)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("reconstruction diverged at step {k}")));
        }
        est.column_mut(i).assign(&x.slice(s![..d]));
        tru.column_mut(i).assign(&truth.column(k));
    }
    rmse(&est, &tru)
}

pub fn run_ode_auto_seed(cfg: &ExperimentConfig, seed: u64) -> Result<OdeAutoOutcome> {
    let truth = gen_ode_auto(cfg.ode.mu, cfg.ode.lam, cfg.dt, cfg.steps, cfg.ode.x0)?;
    let true_eigs = fixed_truth_eigs(&truth)?;
    let noisy = add_noise(&truth, cfg.sigma, seed)?;

    let clean_train = truth.series.truncated(cfg.train_last)?;
    let (y0, y1) = build_data_matrices(&clean_train);
    let clean_dmd = exact_dmd(&y0, &y1, RankPolicy::Fixed(cfg.filter.rank))?;

    let noisy_train = noisy.truncated(cfg.train_last)?;
    let (z0, z1) = build_data_matrices(&noisy_train);
    let noisy_dmd = exact_dmd(&z0, &z1, RankPolicy::Fixed(cfg.filter.rank))?;

    let obs_sigma = if cfg.filter.obs_sigma > 0.0 { cfg.filter.obs_sigma } else { cfg.sigma };
    let fc = filter_config(&cfg.filter, obs_sigma, cfg.filter.delays, seed);
    let run = run_filter(&noisy_train, &fc, FilterMode::Autonomous)?;
    let filtered = run.final_mean_params()?;

    let eig_err_noisy = eigenvalue_distance(&noisy_dmd.eigenvalues, &true_eigs);
    let eig_err_filtered = eigenvalue_distance(&filtered.eigenvalues, &true_eigs);
    let recon_rmse_noisy = window_rmse(&noisy_dmd, &truth.series, 0, cfg.train_last)?;
    let recon_rmse_filtered = window_rmse(&filtered, &truth.series, 0, cfg.train_last)?;
    let pred_rmse_noisy = window_rmse(&noisy_dmd, &truth.series, cfg.train_last + 1, cfg.steps)?;
    let pred_rmse_filtered = window_rmse(&filtered, &truth.series, cfg.train_last + 1, cfg.steps)?;

    Ok(OdeAutoOutcome {
        truth,
        noisy,
        clean_dmd,
        noisy_dmd,
        filtered,
        run,
        true_eigs,
        eig_err_noisy,
        eig_err_filtered,
        recon_rmse_noisy,
        recon_rmse_filtered,
        pred_rmse_noisy,
        pred_rmse_filtered,
    })
}

// ---------------------------------------------------------------------------
// sparse Fourier dynamics
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct FourierOutcome {
    pub true_eigs: Vec<c64>,
    pub cdmd: SpectralParams,
    pub filtered: SpectralParams,
    pub dist_cdmd: f64,
    pub dist_filtered: f64,
}

/// Gaussian compression matrix with entries N(0, 1/rows), fixed by its own
/// seed so every data seed shares one compression.
pub fn gaussian_compression(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = rng.sample(StandardNormal);
        v * scale
    })
}

fn normalized_series(values: Array2<f64>, dt: f64) -> Result<(SnapshotSeries, f64)> {
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt();
    if rms <= 0.0 || !rms.is_finite() {
        return Err(Error::Numerical("degenerate data scale".into()));
    }
    let scaled = values.mapv(|v| v / rms);
    Ok((SnapshotSeries::new(scaled, dt, 0.0)?, rms))
}

pub fn run_fourier_seed(cfg: &ExperimentConfig, seed: u64) -> Result<FourierOutcome> {
    let modes = benchmark_fourier_modes();
    let truth = gen_fourier_system(&modes, cfg.fourier.grid, cfg.sigma, cfg.dt, cfg.steps, seed)?;
    let true_eigs: Vec<c64> = fixed_truth_eigs(&truth)?
        .into_iter()
        .flat_map(|l| [l, l.conj()])
        .collect();

    let d = truth.series.dim();
    let c_mat = gaussian_compression(cfg.fourier.compressed_dim, d, cfg.fourier.compression_seed);
    let (y0, y1) = build_data_matrices(&truth.series);
    let cdmd = compressed_dmd(&y0, &y1, &c_mat, RankPolicy::Fixed(cfg.filter.rank))?;

    let (zs, _rms) = normalized_series(c_mat.dot(truth.series.values()), cfg.dt)?;
    let obs_sigma = if cfg.filter.obs_sigma > 0.0 { cfg.filter.obs_sigma } else { cfg.sigma };
    let fc = filter_config(&cfg.filter, obs_sigma, cfg.filter.delays, seed);
    let run = run_filter(&zs, &fc, FilterMode::Autonomous)?;
    let filtered = run.final_mean_params()?;

    let dist_cdmd = eigenvalue_distance(&cdmd.eigenvalues, &true_eigs);
    let dist_filtered = eigenvalue_distance(&filtered.eigenvalues, &true_eigs);
    Ok(FourierOutcome {
        true_eigs,
        cdmd,
        filtered,
        dist_cdmd,
        dist_filtered,
    })
}

// ---------------------------------------------------------------------------
// linear non-autonomous system
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct NonautoOutcome {
    pub run: FilterRun,
    pub steps_axis: Vec<usize>,
    pub est_eigs: Vec<c64>,
    pub est_modulus: Vec<f64>,
    pub true_modulus: Vec<f64>,
    /// Correlation of the modulus tracks after a 10% burn-in.
    pub pearson_modulus: f64,
    pub recon_rmse: f64,
    pub noisy_rmse: f64,
}

pub fn run_nonauto_seed(cfg: &ExperimentConfig, seed: u64) -> Result<NonautoOutcome> {
    let truth = gen_nonauto_linear(cfg.nonauto.omega, cfg.nonauto.freq_divisor, cfg.dt, cfg.steps)?;
    let track = match &truth.eigenvalues {
        EigenTrack::PerStep(t) => t.clone(),
        _ => return Err(Error::InvalidInput("expected a per-step spectrum".into())),
    };
    let noisy = add_noise(&truth, cfg.sigma, seed)?;
    let obs_sigma = if cfg.filter.obs_sigma > 0.0 { cfg.filter.obs_sigma } else { cfg.sigma };
    let fc = filter_config(&cfg.filter, obs_sigma, cfg.filter.delays, seed);
    let run = run_filter(&noisy, &fc, FilterMode::NonAutonomous)?;

    let d = truth.series.dim();
    let r = cfg.filter.rank;
    let mut steps_axis = Vec::with_capacity(run.steps.len());
    let mut est_eigs = Vec::with_capacity(run.steps.len());
    let mut est_modulus = Vec::with_capacity(run.steps.len());
    let mut true_modulus = Vec::with_capacity(run.steps.len());
    let mut recon = Array2::zeros((d, run.steps.len()));
    let mut tru = Array2::zeros((d, run.steps.len()));
    let mut noisy_cols = Array2::zeros((d, run.steps.len()));
    for (i, rec) in run.steps.iter().enumerate() {
        let params = rec.posterior.mean_params(r, d)?;
        let lead = params
            .eigenvalues
            .iter()
            .cloned()
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .expect("rank >= 1");
        steps_axis.push(rec.step);
        est_eigs.push(lead);
        est_modulus.push(lead.norm());
        true_modulus.push(track[[0, rec.step]].norm());
        let x = params.reconstruct(rec.step)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("reconstruction diverged at step {}", rec.step)));
        }
        recon.column_mut(i).assign(&x);
        tru.column_mut(i).assign(&truth.series.column(rec.step));
        noisy_cols.column_mut(i).assign(&noisy.column(rec.step));
    }
    let burn = run.steps.len() / 10;
    let pearson_modulus = pearson(&est_modulus[burn..], &true_modulus[burn..]);
    let recon_rmse = rmse(&recon, &tru)?;
    let noisy_rmse = rmse(&noisy_cols, &tru)?;
    Ok(NonautoOutcome {
        run,
        steps_axis,
        est_eigs,
        est_modulus,
        true_modulus,
        pearson_modulus,
        recon_rmse,
        noisy_rmse,
    })
}

// ---------------------------------------------------------------------------
// Allen-Cahn equation
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct AllenCahnOutcome {
    pub delay: DelaySelection,
    pub pred_rmse_edmd: f64,
    pub pred_rmse_filtered: f64,
    pub per_step_err_edmd: Vec<f64>,
    pub per_step_err_filtered: Vec<f64>,
    pub eval_times: Vec<f64>,
    /// Leading filtered mode mapped back to the full grid (real part).
    pub leading_mode_field: Array1<f64>,
}

/// Orthonormal smooth basis on the (nx+1)² grid from products
/// sin(m·x/2)·sin(n·y/2), m,n = 1..per_dir; the factors vanish on the
/// clamped edges and resolve the low-wavenumber content the dynamics lives in.
pub fn smooth_sine_basis(nx: usize, per_dir: usize) -> Result<Array2<f64>> {
    if per_dir == 0 {
        return Err(Error::Config("need at least one basis mode per direction".into()));
    }
    let pts = nx + 1;
    let d = pts * pts;
    let n_basis = per_dir * per_dir;
    if n_basis >= d {
        return Err(Error::Config("basis larger than the grid".into()));
    }
    let h = 2.0 * std::f64::consts::PI / nx as f64;
    let mut b = Array2::zeros((d, n_basis));
    let mut col = 0;
    for m in 1..=per_dir {
        for n in 1..=per_dir {
            for i in 0..pts {
                for j in 0..pts {
                    let x = i as f64 * h;
                    let y = j as f64 * h;
                    b[[i * pts + j, col]] = (0.5 * m as f64 * x).sin() * (0.5 * n as f64 * y).sin();
                }
            }
            col += 1;
        }
    }
    let (q, _r) = b.qr()?;
    Ok(q)
}

fn per_column_rmse(est: &Array2<f64>, tru: &Array2<f64>) -> Vec<f64> {
    (0..est.ncols())
        .map(|j| {
            let diff = &est.column(j) - &tru.column(j);
            (diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64).sqrt()
        })
        .collect()
}

pub fn run_allen_cahn_seed(cfg: &ExperimentConfig, seed: u64) -> Result<AllenCahnOutcome> {
    let nx = cfg.allen_cahn.nx;
    let t_end = cfg.steps as f64 * cfg.dt;
    let truth = gen_allen_cahn(
        cfg.allen_cahn.diffusion,
        Reaction::Constant(1.0),
        nx,
        nx,
        cfg.dt,
        t_end,
        None,
    )?;
    let d = truth.series.dim();
    let noisy = add_noise(&truth, cfg.sigma, seed)?;
    let train = noisy.truncated(cfg.train_last)?;
    let dict = Dictionary::cubic(d);
    let lifted = lift_series(&train, &dict)?;

    // lifted-space EDMD baseline, predicted back in the u block
    let (y0, y1) = build_data_matrices(&lifted);
    let edmd = exact_dmd(&y0, &y1, RankPolicy::Fixed(cfg.filter.rank))?;
    let n_eval = cfg.steps - cfg.train_last;
    let mut tru = Array2::zeros((d, n_eval));
    let mut eval_times = Vec::with_capacity(n_eval);
    for (i, k) in (cfg.train_last + 1..=cfg.steps).enumerate() {
        tru.column_mut(i).assign(&truth.series.column(k));
        eval_times.push(truth.series.time_at(k));
    }
    let mut pred_edmd = Array2::zeros((d, n_eval));
    for (i, k) in (cfg.train_last + 1..=cfg.steps).enumerate() {
        let x = edmd.reconstruct(k)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("EDMD prediction diverged at step {k}")));
        }
        pred_edmd.column_mut(i).assign(&x.slice(s![..d]));
    }

    // project [u, u³] blockwise onto the smooth basis and filter there
    let q = smooth_sine_basis(nx, cfg.allen_cahn.basis_per_dir)?;
    let c_small = q.ncols();
    let mut c_mat = Array2::zeros((2 * c_small, 2 * d));
    c_mat.slice_mut(s![..c_small, ..d]).assign(&q.t());
    c_mat.slice_mut(s![c_small.., d..]).assign(&q.t());
    let (zs, rms) = normalized_series(c_mat.dot(lifted.values()), cfg.dt)?;

    let crit = DelayCriterion {
        epsilon: cfg.delay.epsilon,
        max_n: cfg.delay.max_n,
        ..DelayCriterion::new(cfg.filter.rank)
    };
    let delay = select_delay(&zs, &crit)?;
    let delays = if cfg.filter.delays > 0 { cfg.filter.delays } else { delay.n };

    let obs_sigma = if cfg.filter.obs_sigma > 0.0 {
        cfg.filter.obs_sigma
    } else {
        cfg.sigma / rms
    };
    let fc = filter_config(&cfg.filter, obs_sigma, delays, seed);
    let run = run_filter(&zs, &fc, FilterMode::Autonomous)?;
    let filtered = run.final_mean_params()?;

    let mut pred_filtered = Array2::zeros((d, n_eval));
    for (i, k) in (cfg.train_last + 1..=cfg.steps).enumerate() {
        let z = filtered.reconstruct(k)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("filtered prediction diverged at step {k}")));
        }
        let full = c_mat.t().dot(&z.mapv(|v| v * rms));
        pred_filtered.column_mut(i).assign(&full.slice(s![..d]));
    }

    let lead_compressed = filtered.modes.column(0);
    let mut lead_re = Array1::zeros(2 * c_small);
    for (dst, src) in lead_re.iter_mut().zip(lead_compressed.iter()) {
        *dst = src.re;
    }
    let leading_mode_field = c_mat.t().dot(&lead_re).slice(s![..d]).to_owned();

    Ok(AllenCahnOutcome {
        delay,
        pred_rmse_edmd: rmse(&pred_edmd, &tru)?,
        pred_rmse_filtered: rmse(&pred_filtered, &tru)?,
        per_step_err_edmd: per_column_rmse(&pred_edmd, &tru),
        per_step_err_filtered: per_column_rmse(&pred_filtered, &tru),
        eval_times,
        leading_mode_field,
    })
}

// ---------------------------------------------------------------------------
// orchestration
// ---------------------------------------------------------------------------

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("KF_DMD_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("KF_DMD_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::Config("KF_DMD_THREADS must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn run_seeds<T, F>(cfg: &ExperimentConfig, runner: F) -> Result<BTreeMap<u64, T>>
where
    T: Send,
    F: Fn(&ExperimentConfig, u64) -> Result<T> + Sync,
{
    let pool = worker_pool()?;
    let mut seeds: Vec<u64> = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| Ok((s, runner(cfg, s)?)))
            .collect::<Result<BTreeMap<u64, T>>>()
    })
}

struct Emitter<'a> {
    cfg: &'a ExperimentConfig,
    written: Vec<PathBuf>,
}

impl<'a> Emitter<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
            path: cfg.out_dir.display().to_string(),
            source: e,
        })?;
        Ok(Emitter { cfg, written: Vec::new() })
    }

    fn table(&mut self, name: &str, seed: Option<u64>, table: &Table) -> Result<()> {
        let path = self
            .cfg
            .file_path(name, seed, self.cfg.format.extension());
        write_text(&path, &render_table(table, self.cfg.format))?;
        self.written.push(path);
        Ok(())
    }

    fn plot(&mut self, name: &str, seed: Option<u64>, track: &Track) -> Result<()> {
        let path = self.cfg.file_path(name, seed, "csv");
        write_text(&path, &render_plotdata(track))?;
        self.written.push(path);
        if self.cfg.emit_svg {
            let svg_path = self.cfg.file_path(name, seed, "svg");
            write_text(&svg_path, &render_svg(track))?;
            self.written.push(svg_path);
        }
        Ok(())
    }
}

fn complex_cols(prefix: &str) -> [String; 2] {
    [format!("{prefix}_re"), format!("{prefix}_im")]
}

fn ode_eig_table(out: &OdeAutoOutcome) -> Result<Table> {
    let mut cols: Vec<String> = vec!["index".into()];
    for p in ["true", "dmd_clean", "dmd_noisy", "enkf"] {
        cols.extend(complex_cols(p));
    }
    let mut t = Table {
        columns: cols,
        rows: Vec::new(),
    };
    for i in 0..out.true_eigs.len() {
        let mut row: Vec<Value> = vec![i.into()];
        for src in [
            out.true_eigs[i],
            out.clean_dmd.eigenvalues[i],
            out.noisy_dmd.eigenvalues[i],
            out.filtered.eigenvalues[i],
        ] {
            row.push(src.re.into());
            row.push(src.im.into());
        }
        t.push(row)?;
    }
    Ok(t)
}

fn emit_ode_auto(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let outcomes = run_seeds(cfg, run_ode_auto_seed)?;
    let mut em = Emitter::new(cfg)?;
    for (&seed, out) in &outcomes {
        em.table("eigenvalues", Some(seed), &ode_eig_table(out)?)?;

        let mut rmse_t = Table::new(&["method", "reconstruction", "prediction"]);
        rmse_t.push(vec!["dmd_noisy".into(), out.recon_rmse_noisy.into(), out.pred_rmse_noisy.into()])?;
        rmse_t.push(vec!["enkf_dmd".into(), out.recon_rmse_filtered.into(), out.pred_rmse_filtered.into()])?;
        em.table("rmse", Some(seed), &rmse_t)?;

        let times: Vec<f64> = (0..=cfg.steps).map(|k| out.truth.series.time_at(k)).collect();
        let take = |f: &dyn Fn(usize) -> f64| (0..=cfg.steps).map(f).collect::<Vec<f64>>();
        let truth_x1 = take(&|k| out.truth.series.values()[[0, k]]);
        let noisy_x1 = take(&|k| out.noisy.values()[[0, k]]);
        let dmd_x1 = take(&|k| out.noisy_dmd.reconstruct(k).map(|x| x[0]).unwrap_or(f64::NAN));
        let enkf_x1 = take(&|k| out.filtered.reconstruct(k).map(|x| x[0]).unwrap_or(f64::NAN));
        let track = Track::new(
            times,
            &["truth", "noisy", "dmd_noisy", "enkf_dmd"],
            vec![truth_x1, noisy_x1, dmd_x1, enkf_x1],
        )?;
        em.plot("trajectory", Some(seed), &track)?;

        let ledger = misfit_ledger(&out.run, &TruthParams::Fixed(out.clean_dmd.clone()), None)?;
        let steps: Vec<f64> = out.run.steps.iter().map(|s| s.step as f64).collect();
        let misfit_track = Track::new(
            steps,
            &["running_avg_misfit", "running_avg_noise"],
            vec![ledger.running_avg_misfit.clone(), ledger.running_avg_noise.clone()],
        )?;
        em.plot("misfit", Some(seed), &misfit_track)?;
    }

    let mut summary = Table::new(&[
        "seed",
        "eig_err_dmd_noisy",
        "eig_err_enkf",
        "recon_rmse_dmd_noisy",
        "recon_rmse_enkf",
        "pred_rmse_dmd_noisy",
        "pred_rmse_enkf",
    ]);
    let n = outcomes.len() as f64;
    let mut means = [0.0f64; 6];
    for (&seed, out) in &outcomes {
        let vals = [
            out.eig_err_noisy,
            out.eig_err_filtered,
            out.recon_rmse_noisy,
            out.recon_rmse_filtered,
            out.pred_rmse_noisy,
            out.pred_rmse_filtered,
        ];
        for (m, v) in means.iter_mut().zip(vals) {
            *m += v / n;
        }
        let mut row: Vec<Value> = vec![seed.to_string().into()];
        row.extend(vals.into_iter().map(Value::from));
        summary.push(row)?;
    }
    let mut mean_row: Vec<Value> = vec!["mean".into()];
    mean_row.extend(means.into_iter().map(Value::from));
    summary.push(mean_row)?;
    em.table("summary", None, &summary)?;
    Ok(em.written)
}

fn emit_fourier(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let outcomes = run_seeds(cfg, run_fourier_seed)?;
    let mut em = Emitter::new(cfg)?;
    for (&seed, out) in &outcomes {
        let mut cols: Vec<String> = vec!["index".into()];
        for p in ["true", "cdmd", "enkf"] {
            cols.extend(complex_cols(p));
        }
        let mut t = Table { columns: cols, rows: Vec::new() };
        for i in 0..out.true_eigs.len() {
            let mut row: Vec<Value> = vec![i.into()];
            for src in [out.true_eigs[i], out.cdmd.eigenvalues[i], out.filtered.eigenvalues[i]] {
                row.push(src.re.into());
                row.push(src.im.into());
            }
            t.push(row)?;
        }
        em.table("eigenvalues", Some(seed), &t)?;

        let mut mode_t = Table::new(&["cell", "cdmd_mode_re", "cdmd_mode_im"]);
        for (i, v) in out.cdmd.modes.column(0).iter().enumerate() {
            mode_t.push(vec![i.into(), v.re.into(), v.im.into()])?;
        }
        em.table("leading_mode", Some(seed), &mode_t)?;
    }

    let mut summary = Table::new(&["seed", "dist_cdmd", "dist_enkf", "ratio"]);
    let n = outcomes.len() as f64;
    let (mut mc, mut mf) = (0.0, 0.0);
    for (&seed, out) in &outcomes {
        mc += out.dist_cdmd / n;
        mf += out.dist_filtered / n;
        summary.push(vec![
            seed.to_string().into(),
            out.dist_cdmd.into(),
            out.dist_filtered.into(),
            (out.dist_cdmd / out.dist_filtered).into(),
        ])?;
    }
    summary.push(vec!["mean".into(), mc.into(), mf.into(), (mc / mf).into()])?;
    em.table("summary", None, &summary)?;
    Ok(em.written)
}

fn emit_nonauto(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let outcomes = run_seeds(cfg, run_nonauto_seed)?;
    let mut em = Emitter::new(cfg)?;
    for (&seed, out) in &outcomes {
        let mut t = Table::new(&["step", "time", "est_re", "est_im", "est_modulus", "true_modulus"]);
        for (i, &k) in out.steps_axis.iter().enumerate() {
            t.push(vec![
                k.into(),
                (k as f64 * cfg.dt).into(),
                out.est_eigs[i].re.into(),
                out.est_eigs[i].im.into(),
                out.est_modulus[i].into(),
                out.true_modulus[i].into(),
            ])?;
        }
        em.table("eigenvalue_track", Some(seed), &t)?;

        let times: Vec<f64> = out.steps_axis.iter().map(|&k| k as f64 * cfg.dt).collect();
        let track = Track::new(
            times,
            &["est_modulus", "true_modulus"],
            vec![out.est_modulus.clone(), out.true_modulus.clone()],
        )?;
        em.plot("modulus_track", Some(seed), &track)?;
    }

    let mut summary = Table::new(&["seed", "pearson_modulus", "recon_rmse", "noisy_rmse"]);
    for (&seed, out) in &outcomes {
        summary.push(vec![
            seed.to_string().into(),
            out.pearson_modulus.into(),
            out.recon_rmse.into(),
            out.noisy_rmse.into(),
        ])?;
    }
    em.table("summary", None, &summary)?;
    Ok(em.written)
}

fn emit_allen_cahn(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let outcomes = run_seeds(cfg, run_allen_cahn_seed)?;
    let mut em = Emitter::new(cfg)?;
    for (&seed, out) in &outcomes {
        let track = Track::new(
            out.eval_times.clone(),
            &["edmd_error", "enkf_error"],
            vec![out.per_step_err_edmd.clone(), out.per_step_err_filtered.clone()],
        )?;
        em.plot("prediction_error", Some(seed), &track)?;

        let mut mode_t = Table::new(&["cell", "enkf_mode_re"]);
        for (i, v) in out.leading_mode_field.iter().enumerate() {
            mode_t.push(vec![i.into(), (*v).into()])?;
        }
        em.table("leading_mode", Some(seed), &mode_t)?;
    }

    let mut summary = Table::new(&["seed", "delay_n", "delay_saturated", "pred_rmse_edmd", "pred_rmse_enkf"]);
    let n = outcomes.len() as f64;
    let (mut me, mut mf) = (0.0, 0.0);
    for (&seed, out) in &outcomes {
        me += out.pred_rmse_edmd / n;
        mf += out.pred_rmse_filtered / n;
        summary.push(vec![
            seed.to_string().into(),
            out.delay.n.into(),
            i64::from(out.delay.saturated).into(),
            out.pred_rmse_edmd.into(),
            out.pred_rmse_filtered.into(),
        ])?;
    }
    summary.push(vec!["mean".into(), Value::Num(f64::NAN), Value::Num(f64::NAN), me.into(), mf.into()])?;
    em.table("summary", None, &summary)?;
    Ok(em.written)
}

fn emit_lemma_sweep(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let outcomes: BTreeMap<u64, LemmaSweepReport> =
        run_seeds(cfg, |c, seed| lemma_sweep(c.lemma_count, seed))?;
    let mut em = Emitter::new(cfg)?;
    let mut summary = Table::new(&[
        "seed",
        "instances",
        "max_cov_residual",
        "min_w_slack_rel",
        "min_gain_slack_rel",
        "min_gain_slack_inflated",
    ]);
    for (&seed, rep) in &outcomes {
        summary.push(vec![
            seed.to_string().into(),
            rep.instances.into(),
            rep.max_cov_residual.into(),
            rep.min_w_slack_rel.into(),
            rep.min_gain_slack_rel.into(),
            rep.min_gain_slack_inflated.into(),
        ])?;
    }
    em.table("summary", None, &summary)?;
    Ok(em.written)
}

/// Run an experiment end to end and write its artifact files; returns the
/// paths written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    match cfg.experiment {
        ExperimentKind::OdeAuto => emit_ode_auto(cfg),
        ExperimentKind::Fourier => emit_fourier(cfg),
        ExperimentKind::NonautoLinear => emit_nonauto(cfg),
        ExperimentKind::AllenCahn => emit_allen_cahn(cfg),
        ExperimentKind::LemmaSweep => emit_lemma_sweep(cfg),
    }
}

/// Load a config: defaults for the experiment named either by `kind_flag` or
/// by the file, with the file merged on top.
pub fn load_config(path: Option<&Path>, kind_flag: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let overlay: Option<serde_json::Value> = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let kind = match kind_flag {
        Some(k) => k,
        None => {
            let from_file = overlay
                .as_ref()
                .and_then(|v| v.get("experiment"))
                .and_then(|v| v.as_str())
                .map(ExperimentKind::from_name);
            match from_file {
                Some(k) => k?,
                None => return Err(Error::Config("no experiment given (flag or config file)".into())),
            }
        }
    };
    let mut cfg = ExperimentConfig::defaults(kind);
    if let Some(v) = &overlay {
        cfg = merge_overlay(&cfg, v)?;
        cfg.experiment = kind;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_kind() {
        for kind in [
            ExperimentKind::OdeAuto,
            ExperimentKind::Fourier,
            ExperimentKind::NonautoLinear,
            ExperimentKind::AllenCahn,
            ExperimentKind::LemmaSweep,
        ] {
            ExperimentConfig::defaults(kind).validate().unwrap();
        }
    }

    #[test]
    fn hash_ignores_out_dir_and_seeds_only() {
        let a = ExperimentConfig::defaults(ExperimentKind::OdeAuto);
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        b.seeds = vec![7, 9];
        assert_eq!(a.hash_prefix(), b.hash_prefix());
        let mut c = a.clone();
        c.sigma = 0.2;
        assert_ne!(a.hash_prefix(), c.hash_prefix());
    }

    #[test]
    fn file_names_embed_experiment_seed_hash() {
        let cfg = ExperimentConfig::defaults(ExperimentKind::Fourier);
        let p = cfg.file_path("summary", Some(3), "csv");
        let name = p.file_name().unwrap().to_str().unwrap();
        assert!(name.starts_with("fourier_summary_seed3_"));
        assert!(name.ends_with(".csv"));
        assert_eq!(name.len(), "fourier_summary_seed3_".len() + 8 + 4);
    }

    #[test]
    fn overlay_merges_nested_fields() {
        let base = ExperimentConfig::defaults(ExperimentKind::OdeAuto);
        let overlay = serde_json::json!({
            "sigma": 0.25,
            "filter": { "ensemble_size": 11 }
        });
        let merged = merge_overlay(&base, &overlay).unwrap();
        assert_eq!(merged.sigma, 0.25);
        assert_eq!(merged.filter.ensemble_size, 11);
        assert_eq!(merged.filter.delays, base.filter.delays);
    }

    #[test]
    fn overlay_rejects_unknown_shape() {
        let base = ExperimentConfig::defaults(ExperimentKind::OdeAuto);
        assert!(merge_overlay(&base, &serde_json::json!([1, 2])).is_err());
        let bad = serde_json::json!({ "sigma": "not a number" });
        assert!(merge_overlay(&base, &bad).is_err());
    }

    #[test]
    fn eigenvalue_distance_matches_hand_case() {
        let est = Array1::from(vec![c64::new(1.0, 0.0), c64::new(0.0, 1.0)]);
        let truth = [c64::new(0.0, 1.1), c64::new(0.9, 0.0)];
        let d = eigenvalue_distance(&est, &truth);
        assert!((d - 0.1).abs() < 1e-12);
    }

    #[test]
    fn pearson_on_exact_line_is_one() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0];
        assert!((pearson(&a, &b) - 1.0).abs() < 1e-12);
        let c = [8.0, 6.0, 4.0, 2.0];
        assert!((pearson(&a, &c) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_basis_is_orthonormal_and_contains_the_initial_mode() {
        let q = smooth_sine_basis(12, 3).unwrap();
        let gram = q.t().dot(&q);
        for ((i, j), v) in gram.indexed_iter() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-10);
        }
        // sin x · sin y lies in the span: projection preserves its norm
        let pts = 13;
        let h = 2.0 * std::f64::consts::PI / 12.0;
        let field = Array1::from_shape_fn(pts * pts, |idx| {
            let (i, j) = (idx / pts, idx % pts);
            (i as f64 * h).sin() * (j as f64 * h).sin()
        });
        let coeffs = q.t().dot(&field);
        let back = q.dot(&coeffs);
        let err = (&back - &field).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-10, "projection error {err}");
    }

    #[test]
    fn load_config_flag_overrides_file_kind() {
        let dir = std::env::temp_dir().join("kf_dmd_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.json");
        std::fs::write(&path, r#"{ "experiment": "fourier", "sigma": 0.5 }"#).unwrap();
        let cfg = load_config(Some(&path), Some(ExperimentKind::OdeAuto)).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::OdeAuto);
        assert_eq!(cfg.sigma, 0.5);
        let cfg2 = load_config(Some(&path), None).unwrap();
        assert_eq!(cfg2.experiment, ExperimentKind::Fourier);
    }
}

//! Ensemble Kalman filtering of the spectral parameters: stochastic EnKF and
//! deterministic ETKF steps, plus the full filter driver.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::series::{delay_stack, DelayWindow, SnapshotSeries};
use crate::spectral::{flat_len, SpectralParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Array2<f64>,
    step: usize,
}

impl Ensemble {
    pub fn new(members: Array2<f64>, step: usize) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::InvalidInput("ensemble needs at least 2 members".into()));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("ensemble members must be finite".into()));
        }
        Ok(Self { members, step })
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn pdim(&self) -> usize {
        self.members.nrows()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn members(&self) -> &Array2<f64> {
        &self.members
    }

    pub fn mean(&self) -> Array1<f64> {
        self.members.sum_axis(Axis(1)) / self.size() as f64
    }

    pub fn deviations(&self) -> Array2<f64> {
        linalg::column_mean_dev(&self.members).1
    }

    /// Sample covariance ΘΘᵀ/(N−1).
    pub fn sample_covariance(&self) -> Array2<f64> {
        let dev = self.deviations();
        dev.dot(&dev.t()) / (self.size() as f64 - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Etkf,
    Enkf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovStorage {
    None,
    Final,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    Autonomous,
    NonAutonomous,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterConfig {
    pub ensemble_size: usize,
    /// Observation noise std σ.
    pub sigma: f64,
    /// Per-coordinate random-walk std; only used for non-autonomous runs.
    #[serde(default)]
    pub q_std: f64,
    /// Number of time delays n (window of n+1 snapshots).
    pub delays: usize,
    pub filter_kind: FilterKind,
    /// Prior variance for mode coordinates.
    #[serde(default = "default_mode_prior")]
    pub mode_prior_var: f64,
    /// Prior variance for eigenvalue and amplitude coordinates.
    #[serde(default = "default_eig_prior")]
    pub eig_prior_var: f64,
    pub seed: u64,
    pub rank: usize,
    #[serde(default = "default_cov_storage")]
    pub store_covariance: CovStorage,
}

fn default_mode_prior() -> f64 {
    1e-2
}
fn default_eig_prior() -> f64 {
    1e-3
}
fn default_cov_storage() -> CovStorage {
    CovStorage::Final
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::Config("ensemble size must be at least 2".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.q_std < 0.0 {
            return Err(Error::Config("q_std must be nonnegative".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        Ok(())
    }

    /// Default block-diagonal prior covariance C0 for rank r, dimension d.
    pub fn prior_cov(&self, r: usize, d: usize) -> Array2<f64> {
        let p = flat_len(r, d);
        let mut c0 = Array2::zeros((p, p));
        for i in 0..p {
            c0[[i, i]] = if i < 2 * r * d { self.mode_prior_var } else { self.eig_prior_var };
        }
        c0
    }
}

/// Counter-based RNG substream: identical draws regardless of execution
/// schedule.
fn substream(seed: u64, step: u64, member: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 32) ^ member.wrapping_add(1));
    rng
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| rng.sample(StandardNormal))
}

fn check_psd(c0: &Array2<f64>) -> Result<()> {
    use ndarray_linalg::{EigValsh, UPLO};
    let norm = linalg::frobenius(c0);
    if norm == 0.0 {
        return Ok(());
    }
    for i in 0..c0.nrows() {
        for j in 0..i {
            if (c0[[i, j]] - c0[[j, i]]).abs() > 1e-10 * norm {
                return Err(Error::InvalidInput("prior covariance must be symmetric".into()));
            }
        }
    }
    let evals = c0.eigvalsh(UPLO::Lower)?;
    let min = evals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-10 * norm {
        return Err(Error::InvalidInput(format!(
            "prior covariance must be PSD (min eigenvalue {min})"
        )));
    }
    Ok(())
}

/// Draw N members from N(flatten(dmd_out), C0) with a seeded generator.
pub fn init_ensemble(
    dmd_out: &SpectralParams,
    c0: &Array2<f64>,
    n_members: usize,
    seed: u64,
) -> Result<Ensemble> {
    let p = dmd_out.flat_len();
    if c0.dim() != (p, p) {
        return Err(Error::Shape(format!(
            "prior covariance is {:?} but flattened state has length {p}",
            c0.dim()
        )));
    }
    if n_members < 2 {
        return Err(Error::InvalidInput("ensemble needs at least 2 members".into()));
    }
    check_psd(c0)?;
    let sqrt = linalg::psd_sqrt(c0)?;
    let mean = dmd_out.flatten();
    let mut members = Array2::zeros((p, n_members));
    for i in 0..n_members {
        let mut rng = substream(seed, 0, i as u64);
        let z = standard_normal_vec(&mut rng, p);
        let col = &mean + &sqrt.dot(&z);
        members.column_mut(i).assign(&col);
    }
    Ensemble::new(members, 0)
}

/// Recover (r, d) from a flattened length p = 2r(d+2).
pub fn dims_from_flat(p: usize, r: usize) -> Result<usize> {
    if r == 0 || p % (2 * r) != 0 || p / (2 * r) < 3 {
        return Err(Error::Shape(format!("flattened length {p} incompatible with rank {r}")));
    }
    Ok(p / (2 * r) - 2)
}

/// Time-delay observation map: stacks Re(Φ Λ^{k-n} b) .. Re(Φ Λ^k b).
pub fn observation_map(
    theta: ndarray::ArrayView1<'_, f64>,
    k: usize,
    n: usize,
    r: usize,
    d: usize,
) -> Result<Array1<f64>> {
    if k < n {
        return Err(Error::Range(format!("observation map needs k >= n, got k={k}, n={n}")));
    }
    let params = SpectralParams::unflatten(theta, r, d)?;
    let mut weights = params.powered_amplitudes(k - n)?;
    let mut out = Array1::zeros(d * (n + 1));
    for j in 0..=n {
        let block = params.real_combination(&weights);
        out.slice_mut(s![j * d..(j + 1) * d]).assign(&block);
        if j < n {
            for (w, lam) in weights.iter_mut().zip(params.eigenvalues.iter()) {
                *w *= lam;
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Range("observation map overflowed".into()));
    }
    Ok(out)
}

/// Evaluate the observation map for every ensemble member (column-parallel,
/// combined in member order).
pub fn observation_ensemble(ens: &Ensemble, k: usize, n: usize, r: usize) -> Result<Array2<f64>> {
    let d = dims_from_flat(ens.pdim(), r)?;
    let cols: Vec<Result<Array1<f64>>> = (0..ens.size())
        .into_par_iter()
        .map(|i| observation_map(ens.members().column(i), k, n, r, d))
        .collect();
    let mut obs = Array2::zeros((d * (n + 1), ens.size()));
    for (i, col) in cols.into_iter().enumerate() {
        obs.column_mut(i).assign(&col?);
    }
    Ok(obs)
}

/// Empirical covariances (P, P_θy, P_yy) of an ensemble and its observations.
pub fn empirical_covariances(
    ens: &Ensemble,
    obs: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    if obs.ncols() != ens.size() {
        return Err(Error::Shape(format!(
            "observation matrix has {} columns for {} members",
            obs.ncols(),
            ens.size()
        )));
    }
    if ens.size() < 2 {
        return Err(Error::InvalidInput("covariances need N >= 2".into()));
    }
    let scale = 1.0 / (ens.size() as f64 - 1.0);
    let dev_t = ens.deviations();
    let (_, dev_y) = linalg::column_mean_dev(obs);
    let p = dev_t.dot(&dev_t.t()) * scale;
    let p_ty = dev_t.dot(&dev_y.t()) * scale;
    let p_yy = dev_y.dot(&dev_y.t()) * scale;
    Ok((p, p_ty, p_yy))
}

/// K = P_θy (P_yy + σ²I)⁻¹ through an SPD solve.
pub fn kalman_gain(p_ty: &Array2<f64>, p_yy: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
    if p_ty.ncols() != p_yy.nrows() || p_yy.nrows() != p_yy.ncols() {
        return Err(Error::Shape("gain operands have incompatible shapes".into()));
    }
    let mut a = p_yy.clone();
    for i in 0..a.nrows() {
        a[[i, i]] += sigma * sigma;
    }
    // Kᵀ = A⁻¹ P_yθ since A is symmetric
    let x = linalg::solve_spd(&a, &p_ty.t().to_owned()).map_err(|e| match e {
        Error::Numerical(msg) if sigma == 0.0 => {
            Error::Numerical(format!("singular innovation covariance with sigma = 0: {msg}"))
        }
        other => other,
    })?;
    Ok(x.t().to_owned())
}

/// Orthonormal rows, each orthogonal to the all-ones vector (Helmert basis).
fn helmert_rows(p: usize, n: usize) -> Array2<f64> {
    debug_assert!(p <= n - 1);
    let mut b = Array2::zeros((p, n));
    for j in 1..=p {
        let norm = (j as f64 * (j + 1) as f64).sqrt();
        for i in 0..j {
            b[[j - 1, i]] = 1.0 / norm;
        }
        b[[j - 1, j]] = -(j as f64) / norm;
    }
    b
}

/// Deterministic ETKF analysis on precomputed observations. Returns the
/// updated ensemble whose sample covariance equals the covariance update
/// exactly.
pub fn etkf_update(
    ens: &Ensemble,
    obs: &Array2<f64>,
    data: &Array1<f64>,
    sigma: f64,
    q_std: f64,
) -> Result<Ensemble> {
    let (p_cov, p_ty, p_yy) = empirical_covariances(ens, obs)?;
    let n = ens.size();
    let p = ens.pdim();
    if n < p + 1 {
        return Err(Error::Config(format!(
            "ETKF deviation transform needs N >= p+1 ({} >= {}); use the enkf filter kind",
            n,
            p + 1
        )));
    }
    let gain = kalman_gain(&p_ty, &p_yy, sigma)?;
    let obs_mean = obs.sum_axis(Axis(1)) / n as f64;
    let innovation = data - &obs_mean;
    let new_mean = ens.mean() + gain.dot(&innovation);

    let mut p_next = &p_cov - &gain.dot(&p_ty.t());
    for i in 0..p {
        p_next[[i, i]] += q_std * q_std;
    }
    linalg::symmetrize(&mut p_next);

    let sqrt = linalg::psd_sqrt(&p_next)?;
    let basis = helmert_rows(p, n);
    let dev = sqrt.dot(&basis) * ((n - 1) as f64).sqrt();
    let mut members = dev;
    for mut col in members.columns_mut() {
        col += &new_mean;
    }
    Ensemble::new(members, ens.step() + 1)
}

/// Stochastic EnKF analysis on precomputed observations; perturbations use
/// (seed, step, member) substreams.
pub fn enkf_update(
    ens: &Ensemble,
    obs: &Array2<f64>,
    data: &Array1<f64>,
    sigma: f64,
    q_std: f64,
    seed: u64,
    step: usize,
) -> Result<Ensemble> {
    let (_, p_ty, p_yy) = empirical_covariances(ens, obs)?;
    let gain = kalman_gain(&p_ty, &p_yy, sigma)?;
    let p = ens.pdim();
    let dlen = data.len();
    let mut members = ens.members().clone();
    for i in 0..ens.size() {
        let mut rng = substream(seed, step as u64 + 1, i as u64);
        let eps = standard_normal_vec(&mut rng, dlen) * sigma;
        let innovation = data - &obs.column(i).to_owned() - &eps;
        let mut update = gain.dot(&innovation);
        if q_std > 0.0 {
            let xi = standard_normal_vec(&mut rng, p) * q_std;
            update += &xi;
        }
        let col = members.column(i).to_owned() + update;
        members.column_mut(i).assign(&col);
    }
    Ensemble::new(members, ens.step() + 1)
}

/// One stochastic EnKF step against delay-stacked data at step k.
pub fn enkf_step(
    ens: &Ensemble,
    data: &Array1<f64>,
    k: usize,
    cfg: &FilterConfig,
) -> Result<Ensemble> {
    let obs = observation_ensemble(ens, k, cfg.delays, cfg.rank)?;
    enkf_update(ens, &obs, data, cfg.sigma, cfg.q_std, cfg.seed, k)
}

/// One deterministic ETKF step against delay-stacked data at step k.
pub fn etkf_step(
    ens: &Ensemble,
    data: &Array1<f64>,
    k: usize,
    cfg: &FilterConfig,
) -> Result<Ensemble> {
    let obs = observation_ensemble(ens, k, cfg.delays, cfg.rank)?;
    etkf_update(ens, &obs, data, cfg.sigma, cfg.q_std)
}

/// Gaussian posterior over the flattened parameters after a filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSpectrum {
    pub mean: Array1<f64>,
    pub cov: Option<Array2<f64>>,
    pub step: usize,
}

impl PosteriorSpectrum {
    pub fn new(mean: Array1<f64>, cov: Option<Array2<f64>>, step: usize) -> Result<Self> {
        if let Some(c) = &cov {
            if c.dim() != (mean.len(), mean.len()) {
                return Err(Error::Shape("posterior covariance shape mismatch".into()));
            }
            let norm = linalg::frobenius(c);
            if norm > 0.0 {
                for i in 0..c.nrows() {
                    for j in 0..i {
                        if (c[[i, j]] - c[[j, i]]).abs() > 1e-10 * norm {
                            return Err(Error::Numerical("posterior covariance not symmetric".into()));
                        }
                    }
                }
                use ndarray_linalg::{EigValsh, UPLO};
                let evals = c.eigvalsh(UPLO::Lower)?;
                let min = evals.iter().cloned().fold(f64::INFINITY, f64::min);
                if min < -1e-8 * norm {
                    return Err(Error::Numerical(format!(
                        "posterior covariance indefinite (min eigenvalue {min})"
                    )));
                }
            }
        }
        Ok(Self { mean, cov, step })
    }

    pub fn mean_params(&self, r: usize, d: usize) -> Result<SpectralParams> {
        SpectralParams::unflatten(self.mean.view(), r, d)
    }
}

/// Marginal Gaussian over a contiguous block of the flattened layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalBlock {
    pub mean: Array1<f64>,
    pub cov: Option<Array2<f64>>,
}

/// Slice out the mode marginal P(1) and eigenvalue marginal P(2).
pub fn extract_marginals(
    post: &PosteriorSpectrum,
    r: usize,
    d: usize,
) -> Result<(MarginalBlock, MarginalBlock)> {
    if post.mean.len() != flat_len(r, d) {
        return Err(Error::Shape(format!(
            "posterior length {} does not match 2r(d+2) for r={r}, d={d}",
            post.mean.len()
        )));
    }
    let mode_end = 2 * r * d;
    let eig_end = mode_end + 2 * r;
    let block = |lo: usize, hi: usize| MarginalBlock {
        mean: post.mean.slice(s![lo..hi]).to_owned(),
        cov: post.cov.as_ref().map(|c| c.slice(s![lo..hi, lo..hi]).to_owned()),
    };
    Ok((block(0, mode_end), block(mode_end, eig_end)))
}

/// One recorded filter step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub posterior: PosteriorSpectrum,
    /// Ensemble-average predicted observation before the update, ȳ_k.
    pub predicted_obs_mean: Array1<f64>,
    /// The delay-stacked data assimilated at this step.
    pub data: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub init: SpectralParams,
    pub steps: Vec<StepRecord>,
    pub rank: usize,
    pub dim: usize,
    pub delays: usize,
}

impl FilterRun {
    pub fn final_posterior(&self) -> &PosteriorSpectrum {
        &self.steps.last().expect("filter ran at least one step").posterior
    }

    pub fn final_mean_params(&self) -> Result<SpectralParams> {
        self.final_posterior().mean_params(self.rank, self.dim)
    }
}

/// Full EnKF-DMD driver: exact-DMD initialization, then one filter step per
/// snapshot from k = n to m.
pub fn run_filter(
    series: &SnapshotSeries,
    cfg: &FilterConfig,
    mode: FilterMode,
) -> Result<FilterRun> {
    cfg.validate()?;
    let n = cfg.delays;
    let m = series.last_index();
    if m < n + 1 {
        return Err(Error::InvalidInput(format!(
            "series has {} snapshots; need at least n+2 = {}",
            series.count(),
            n + 2
        )));
    }
    let (y0, y1) = crate::series::build_data_matrices(series);
    let init = crate::dmd::exact_dmd(&y0, &y1, crate::dmd::RankPolicy::Fixed(cfg.rank))?;
    let (r, d) = (init.rank(), init.dim());
    let c0 = cfg.prior_cov(r, d);
    let mut ens = init_ensemble(&init, &c0, cfg.ensemble_size, cfg.seed)?;

    let q_std = match mode {
        FilterMode::Autonomous => 0.0,
        FilterMode::NonAutonomous => cfg.q_std,
    };

    let mut steps = Vec::with_capacity(m + 1 - n);
    for k in n..=m {
        let data = delay_stack(series, DelayWindow { n, k }).map_err(|e| e.at_step(k))?;
        let obs = observation_ensemble(&ens, k, n, r).map_err(|e| e.at_step(k))?;
        let predicted_obs_mean = obs.sum_axis(Axis(1)) / ens.size() as f64;
        ens = match cfg.filter_kind {
            FilterKind::Etkf => etkf_update(&ens, &obs, &data, cfg.sigma, q_std),
            FilterKind::Enkf => enkf_update(&ens, &obs, &data, cfg.sigma, q_std, cfg.seed, k),
        }
        .map_err(|e| e.at_step(k))?;

        let store = match cfg.store_covariance {
            CovStorage::All => true,
            CovStorage::Final => k == m,
            CovStorage::None => false,
        };
        let cov = store.then(|| ens.sample_covariance());
        let posterior = PosteriorSpectrum::new(ens.mean(), cov, k).map_err(|e| e.at_step(k))?;
        steps.push(StepRecord {
            step: k,
            time: series.time_at(k),
            posterior,
            predicted_obs_mean,
            data,
        });
    }
    Ok(FilterRun { init, steps, rank: r, dim: d, delays: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use ndarray_linalg::types::c64;

    fn small_params() -> SpectralParams {
        SpectralParams::new(
            array![[c64::new(1.0, 0.0)], [c64::new(0.5, 0.0)]],
            array![c64::new(0.9, 0.0)],
            array![c64::new(1.0, 0.0)],
        )
        .unwrap()
    }

    #[test]
    fn init_degenerate_prior() {
        let p = small_params();
        let c0 = Array2::zeros((p.flat_len(), p.flat_len()));
        let ens = init_ensemble(&p, &c0, 4, 1).unwrap();
        let theta = p.flatten();
        for i in 0..4 {
            assert_eq!(ens.members().column(i), theta.view());
        }
    }

    #[test]
    fn init_is_deterministic_and_consistent() {
        let p = small_params();
        let pl = p.flat_len();
        let c0 = Array2::eye(pl) * 1e-2;
        let a = init_ensemble(&p, &c0, 16, 42).unwrap();
        let b = init_ensemble(&p, &c0, 16, 42).unwrap();
        assert_eq!(a.members(), b.members());
        let c = init_ensemble(&p, &c0, 16, 43).unwrap();
        assert_ne!(a.members(), c.members());
    }

    #[test]
    fn init_sample_covariance_converges() {
        let p = small_params();
        let pl = p.flat_len();
        let eps = 0.25;
        let c0 = Array2::eye(pl) * eps;
        let n = 20_000;
        let ens = init_ensemble(&p, &c0, n, 9).unwrap();
        let cov = ens.sample_covariance();
        let tol = 4.0 * eps / (n as f64).sqrt();
        for i in 0..pl {
            for j in 0..pl {
                let want = if i == j { eps } else { 0.0 };
                assert!(
                    (cov[[i, j]] - want).abs() < 5.0 * tol.max(1e-3),
                    "cov[{i},{j}] = {}",
                    cov[[i, j]]
                );
            }
        }
        assert!(init_ensemble(&p, &(Array2::eye(pl) * -1.0), 4, 0).is_err());
    }

    #[test]
    fn observation_map_reductions() {
        let p = small_params();
        let theta = p.flatten();
        // n = 0 reduces to reconstruct
        let o = observation_map(theta.view(), 5, 0, 1, 2).unwrap();
        assert_eq!(o, p.reconstruct(5).unwrap());
        // unit eigenvalue: constant stack
        let fixed = SpectralParams::new(
            array![[c64::new(1.0, 0.0)], [c64::new(0.0, 0.0)]],
            array![c64::new(1.0, 0.0)],
            array![c64::new(1.0, 0.0)],
        )
        .unwrap();
        let o = observation_map(fixed.flatten().view(), 4, 2, 1, 2).unwrap();
        assert_eq!(o, array![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(observation_map(theta.view(), 1, 2, 1, 2).is_err());
    }

    #[test]
    fn covariance_hand_case() {
        // two members at 0 and 2e1: deviations ±e1, P = 2 e1 e1ᵀ
        let members = array![[0.0, 2.0], [0.0, 0.0]];
        let ens = Ensemble::new(members, 0).unwrap();
        let obs = array![[0.0, 4.0]]; // linear map H = [2, 0]
        let (p, p_ty, p_yy) = empirical_covariances(&ens, &obs).unwrap();
        assert_eq!(p, array![[2.0, 0.0], [0.0, 0.0]]);
        assert_eq!(p_ty, array![[4.0], [0.0]]);
        // H P Hᵀ = 8
        assert_eq!(p_yy, array![[8.0]]);
    }

    #[test]
    fn degenerate_ensemble_zero_covariances() {
        let members = Array2::from_elem((3, 5), 1.5);
        let ens = Ensemble::new(members, 0).unwrap();
        let obs = Array2::from_elem((2, 5), 0.7);
        let (p, p_ty, p_yy) = empirical_covariances(&ens, &obs).unwrap();
        assert!(p.iter().all(|v| *v == 0.0));
        assert!(p_ty.iter().all(|v| *v == 0.0));
        assert!(p_yy.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gain_scalar_cases() {
        let k = kalman_gain(&array![[2.0]], &array![[0.0]], 1.0).unwrap();
        assert!((k[[0, 0]] - 2.0).abs() < 1e-14);
        let k = kalman_gain(&array![[2.0]], &array![[3.0]], 1.0).unwrap();
        assert!((k[[0, 0]] - 0.5).abs() < 1e-14);
        assert!(kalman_gain(&array![[1.0]], &array![[0.0]], 0.0).is_err());
    }

    #[test]
    fn gain_matches_information_form() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let p = 4;
        let dd = 6;
        let h = Array2::from_shape_fn((dd, p), |_| rng.gen_range(-1.0..1.0));
        let a = Array2::from_shape_fn((p, p), |_| rng.gen_range(-1.0..1.0));
        let p_cov = a.dot(&a.t()) + Array2::<f64>::eye(p) * 0.5;
        let sigma = 0.7;
        let p_ty = p_cov.dot(&h.t());
        let p_yy = h.dot(&p_cov).dot(&h.t());
        let k = kalman_gain(&p_ty, &p_yy, sigma).unwrap();
        // information form (P⁻¹ + σ⁻²HᵀH)⁻¹ σ⁻² Hᵀ
        use ndarray_linalg::Inverse;
        let info = (p_cov.inv().unwrap() + h.t().dot(&h) / (sigma * sigma)).inv().unwrap();
        let k_info = info.dot(&h.t()) / (sigma * sigma);
        for (x, y) in k.iter().zip(k_info.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    fn linear_obs(members: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
        h.dot(members)
    }

    #[test]
    fn etkf_realizes_covariance_exactly() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = 3;
        let n = 12;
        let members = Array2::from_shape_fn((p, n), |_| rng.gen_range(-1.0..1.0));
        let ens = Ensemble::new(members, 0).unwrap();
        let h = Array2::from_shape_fn((2, p), |_| rng.gen_range(-1.0..1.0));
        let obs = linear_obs(ens.members(), &h);
        let data = array![0.3, -0.2];
        let q_std = 0.05;
        let out = etkf_update(&ens, &obs, &data, 0.5, q_std).unwrap();

        let (p_cov, p_ty, p_yy) = empirical_covariances(&ens, &obs).unwrap();
        let gain = kalman_gain(&p_ty, &p_yy, 0.5).unwrap();
        let mut want_p = &p_cov - &gain.dot(&p_ty.t());
        for i in 0..p {
            want_p[[i, i]] += q_std * q_std;
        }
        let got_p = out.sample_covariance();
        let norm = linalg::frobenius(&want_p);
        for (x, y) in got_p.iter().zip(want_p.iter()) {
            assert!((x - y).abs() <= 1e-10 * norm);
        }
        // mean follows the ETKF mean formula exactly
        let obs_mean = obs.sum_axis(Axis(1)) / n as f64;
        let want_mean = ens.mean() + gain.dot(&(&data - &obs_mean));
        for (x, y) in out.mean().iter().zip(want_mean.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // deviations have zero row sums
        let dev = out.deviations();
        for row in dev.rows() {
            assert!(row.sum().abs() < 1e-10);
        }
    }

    #[test]
    fn etkf_zero_gain_case() {
        let members = array![[0.0, 1.0, 2.0, -1.0, 3.0], [1.0, 1.0, 1.0, 1.0, 1.0]];
        let ens = Ensemble::new(members, 0).unwrap();
        // observations carry no information about the state
        let obs = Array2::zeros((1, 5));
        let data = array![0.9];
        let q_std = 0.1;
        let before_mean = ens.mean();
        let before_p = ens.sample_covariance();
        let out = etkf_update(&ens, &obs, &data, 1.0, q_std).unwrap();
        for (x, y) in out.mean().iter().zip(before_mean.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let got_p = out.sample_covariance();
        for i in 0..2 {
            for j in 0..2 {
                let want = before_p[[i, j]] + if i == j { q_std * q_std } else { 0.0 };
                assert!((got_p[[i, j]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn etkf_requires_enough_members() {
        let members = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let ens = Ensemble::new(members, 0).unwrap();
        let obs = Array2::zeros((1, 3));
        let err = etkf_update(&ens, &obs, &array![0.0], 1.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("enkf"));
    }

    #[test]
    fn enkf_step_degenerate_zero_innovation() {
        // degenerate ensemble at θ̄ observed exactly: only the ε draws act,
        // and with gain 0 (zero spread) the ensemble is unchanged when Q=0
        let p = small_params();
        let c0 = Array2::zeros((p.flat_len(), p.flat_len()));
        let ens = init_ensemble(&p, &c0, 8, 3).unwrap();
        let cfg = FilterConfig {
            ensemble_size: 8,
            sigma: 0.1,
            q_std: 0.0,
            delays: 1,
            filter_kind: FilterKind::Enkf,
            mode_prior_var: 1e-2,
            eig_prior_var: 1e-3,
            seed: 3,
            rank: 1,
            store_covariance: CovStorage::None,
        };
        let data = observation_map(p.flatten().view(), 4, 1, 1, 2).unwrap();
        let out = enkf_step(&ens, &data, 4, &cfg).unwrap();
        for (x, y) in out.members().iter().zip(ens.members().iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn enkf_step_deterministic_per_seed() {
        let p = small_params();
        let pl = p.flat_len();
        let c0 = Array2::eye(pl) * 1e-2;
        let ens = init_ensemble(&p, &c0, 10, 21).unwrap();
        let cfg = FilterConfig {
            ensemble_size: 10,
            sigma: 0.1,
            q_std: 0.01,
            delays: 0,
            filter_kind: FilterKind::Enkf,
            mode_prior_var: 1e-2,
            eig_prior_var: 1e-3,
            seed: 21,
            rank: 1,
            store_covariance: CovStorage::None,
        };
        let data = array![0.8, 0.4];
        let a = enkf_step(&ens, &data, 2, &cfg).unwrap();
        let b = enkf_step(&ens, &data, 2, &cfg).unwrap();
        assert_eq!(a.members(), b.members());
    }

    #[test]
    fn enkf_mean_update_unbiased() {
        // average of stochastic updates over many seeds approaches the
        // deterministic ETKF mean update
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let p = 2;
        let n = 6;
        let members = Array2::from_shape_fn((p, n), |_| rng.gen_range(-1.0..1.0));
        let ens = Ensemble::new(members, 0).unwrap();
        let h = array![[1.0, 0.5], [0.0, 2.0], [1.0, -1.0]];
        let obs = linear_obs(ens.members(), &h);
        let data = array![0.5, -0.1, 0.2];
        let sigma = 0.4;

        let (_, p_ty, p_yy) = empirical_covariances(&ens, &obs).unwrap();
        let gain = kalman_gain(&p_ty, &p_yy, sigma).unwrap();
        let obs_mean = obs.sum_axis(Axis(1)) / n as f64;
        let target = ens.mean() + gain.dot(&(&data - &obs_mean));

        let trials = 20_000;
        let mut acc = Array1::<f64>::zeros(p);
        for seed in 0..trials {
            let out = enkf_update(&ens, &obs, &data, sigma, 0.0, seed, 0).unwrap();
            acc += &out.mean();
        }
        acc /= trials as f64;
        // per-mean standard error of K ε averaged over members and trials
        let kn = gain.dot(&gain.t());
        for i in 0..p {
            let se = (sigma * sigma * kn[[i, i]] / (n as f64 * trials as f64)).sqrt();
            assert!(
                (acc[i] - target[i]).abs() < 3.0 * se.max(1e-4),
                "component {i}: {} vs {}",
                acc[i],
                target[i]
            );
        }
    }

    #[test]
    fn marginal_extraction_layout() {
        // r=1, d=1: modes at 0..2, eigenvalues at 2..4
        let mean = array![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let cov = Array2::from_diag(&array![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let post = PosteriorSpectrum::new(mean, Some(cov), 0).unwrap();
        let (modes, eigs) = extract_marginals(&post, 1, 1).unwrap();
        assert_eq!(modes.mean, array![1.0, 2.0]);
        assert_eq!(eigs.mean, array![3.0, 4.0]);
        assert_eq!(modes.cov.unwrap(), Array2::from_diag(&array![1.0, 2.0]));
        assert_eq!(eigs.cov.unwrap(), Array2::from_diag(&array![3.0, 4.0]));
        let bad = PosteriorSpectrum::new(Array1::zeros(4), None, 0).unwrap();
        assert!(extract_marginals(&bad, 1, 1).is_err());
    }
}

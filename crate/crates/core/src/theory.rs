//! Numerical verification of the covariance-update identity, the gain and
//! information-matrix bounds, and the long-term misfit ledger.

use ndarray::{Array1, Array2};
use ndarray_linalg::{EigValsh, UPLO};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enkf::{observation_map, FilterRun};
use crate::error::{Error, Result};
use crate::linalg;
use crate::spectral::SpectralParams;

/// One synthetic hypothesis-satisfying instance: P the sample covariance of a
/// norm-R-bounded ensemble, H with spectral norm at most M.
#[derive(Debug, Clone)]
pub struct LemmaInstance {
    pub p_cov: Array2<f64>,
    pub h: Array2<f64>,
    pub sigma: f64,
    pub q: Array2<f64>,
    pub r_bound: f64,
    pub m_bound: f64,
}

impl LemmaInstance {
    pub fn validate(&self) -> Result<()> {
        let p = self.p_cov.nrows();
        if self.p_cov.ncols() != p || self.h.ncols() != p || self.q.dim() != (p, p) {
            return Err(Error::Shape("inconsistent lemma instance shapes".into()));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidInput("sigma must be positive".into()));
        }
        if linalg::spectral_norm(&self.h)? > self.m_bound * (1.0 + 1e-12) {
            return Err(Error::InvalidInput("H exceeds its declared norm bound".into()));
        }
        Ok(())
    }

    /// Draw a random instance satisfying the lemma hypotheses: p ≤ 10,
    /// D ≤ 30, σ ∈ [0.01, 10], ensemble of p+5 members with norms ≤ R, and a
    /// well-conditioned resulting covariance.
    pub fn random(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        loop {
            let p = rng.gen_range(1..=10usize);
            let dd = rng.gen_range(1..=30usize);
            let sigma = 10f64.powf(rng.gen_range(-2.0..1.0));
            let r_bound = rng.gen_range(0.5..3.0);
            let m_bound = rng.gen_range(0.1..5.0);

            let n = p + 5;
            let mut members = Array2::zeros((p, n));
            for i in 0..n {
                let mut col: Array1<f64> = Array1::from_shape_fn(p, |_| rng.gen_range(-1.0..1.0));
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    let target = r_bound * rng.gen_range(0.3..1.0);
                    col.mapv_inplace(|v| v * target / norm);
                }
                members.column_mut(i).assign(&col);
            }
            let (_, dev) = linalg::column_mean_dev(&members);
            let p_cov = dev.dot(&dev.t()) / (n as f64 - 1.0);

            let mut h = Array2::from_shape_fn((dd, p), |_| rng.gen_range(-1.0..1.0));
            if let Ok(hn) = linalg::spectral_norm(&h) {
                if hn > 0.0 {
                    let target = m_bound * rng.gen_range(0.2..1.0);
                    h.mapv_inplace(|v| v * target / hn);
                }
            }

            let q = if rng.gen_bool(0.5) {
                Array2::zeros((p, p))
            } else {
                let g = Array2::from_shape_fn((p, p), |_| rng.gen_range(-0.2..0.2));
                g.dot(&g.t())
            };

            let inst = LemmaInstance { p_cov, h, sigma, q, r_bound, m_bound };
            if let Ok(evals) = inst.p_cov.eigvalsh(UPLO::Lower) {
                let min = evals.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = evals.iter().cloned().fold(0.0f64, f64::max);
                if min > 0.0 && max / min <= 1e6 {
                    return inst;
                }
            }
            // ill-conditioned draw: continue with fresh randomness
        }
    }
}

fn spd_inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    linalg::solve_spd(a, &Array2::eye(a.nrows()))
}

/// Innovation covariance A = H P Hᵀ + σ²I.
fn innovation_cov(inst: &LemmaInstance) -> Array2<f64> {
    let mut a = inst.h.dot(&inst.p_cov).dot(&inst.h.t());
    for i in 0..a.nrows() {
        a[[i, i]] += inst.sigma * inst.sigma;
    }
    a
}

fn gain(inst: &LemmaInstance) -> Result<Array2<f64>> {
    let a = innovation_cov(inst);
    let p_ty = inst.p_cov.dot(&inst.h.t());
    let x = linalg::solve_spd(&a, &p_ty.t().to_owned())?;
    Ok(x.t().to_owned())
}

/// Joseph-versus-information-form covariance identity: relative difference of
/// P − PHᵀ(HPHᵀ+σ²I)⁻¹HP + Q and (P⁻¹+σ⁻²HᵀH)⁻¹ + Q.
pub fn verify_cov_update(inst: &LemmaInstance) -> Result<f64> {
    inst.validate()?;
    let k = gain(inst)?;
    let lhs = &inst.p_cov - &k.dot(&inst.h.dot(&inst.p_cov)) + &inst.q;

    let p_inv = spd_inverse(&inst.p_cov)
        .map_err(|_| Error::Numerical("singular prior covariance".into()))?;
    let info = &p_inv + &(inst.h.t().dot(&inst.h) / (inst.sigma * inst.sigma));
    let rhs = spd_inverse(&info)? + &inst.q;

    Ok(linalg::frobenius(&(&lhs - &rhs)) / linalg::frobenius(&inst.p_cov))
}

fn posterior_cov(inst: &LemmaInstance) -> Result<Array2<f64>> {
    let p_inv = spd_inverse(&inst.p_cov)?;
    let info = &p_inv + &(inst.h.t().dot(&inst.h) / (inst.sigma * inst.sigma));
    Ok(spd_inverse(&info)? + &inst.q)
}

/// Minimum eigenvalue of W − (2M²R²+σ²)⁻¹HᵀH, where
/// W = P⁻¹ − (I−KH)ᵀP₊⁻¹(I−KH); nonnegative iff the information bound holds.
pub fn verify_w_bound(inst: &LemmaInstance) -> Result<f64> {
    inst.validate()?;
    let p = inst.p_cov.nrows();
    let k = gain(inst)?;
    let p_next = posterior_cov(inst)?;
    let p_next_inv = spd_inverse(&p_next)
        .map_err(|_| Error::Numerical("singular posterior covariance".into()))?;
    let mut i_kh = -k.dot(&inst.h);
    for i in 0..p {
        i_kh[[i, i]] += 1.0;
    }
    let p_inv = spd_inverse(&inst.p_cov)?;
    let w = &p_inv - &i_kh.t().dot(&p_next_inv).dot(&i_kh);

    let mu = 2.0 * inst.m_bound * inst.m_bound * inst.r_bound * inst.r_bound
        + inst.sigma * inst.sigma;
    let mut diff = &w - &(inst.h.t().dot(&inst.h) / mu);
    linalg::symmetrize(&mut diff);
    let evals = diff.eigvalsh(UPLO::Lower)?;
    Ok(evals.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// σ⁻²M − ‖KᵀP₊⁻¹‖₂; nonnegative iff the gain-control bound holds.
///
/// The bound is exact for Q = 0, where KᵀP₊⁻¹ = σ⁻²H identically. Additive
/// inflation Q ≻ 0 can break it (‖P₊⁰(P₊⁰+Q)⁻¹‖₂ may exceed 1 for
/// non-commuting factors), so the sweep checks it on the uninflated update
/// and reports the inflated slack separately.
pub fn verify_gain_bound(inst: &LemmaInstance) -> Result<f64> {
    inst.validate()?;
    let k = gain(inst)?;
    let p_next = posterior_cov(inst)?;
    let p_next_inv = spd_inverse(&p_next)
        .map_err(|_| Error::Numerical("singular posterior covariance".into()))?;
    let norm = linalg::spectral_norm(&k.t().dot(&p_next_inv))?;
    Ok(inst.m_bound / (inst.sigma * inst.sigma) - norm)
}

/// Aggregated sweep over randomized instances; order-independent extrema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LemmaSweepReport {
    pub instances: usize,
    pub max_cov_residual: f64,
    /// W-bound slack relative to ‖HᵀH‖.
    pub min_w_slack_rel: f64,
    /// Gain-bound slack at Q = 0 relative to the bound scale σ⁻²M.
    pub min_gain_slack_rel: f64,
    /// Relative gain-bound slack with the drawn inflation Q kept; can be
    /// negative, demonstrating that the bound needs the uninflated update.
    pub min_gain_slack_inflated: f64,
}

pub fn lemma_sweep(count: usize, seed: u64) -> Result<LemmaSweepReport> {
    if count == 0 {
        return Err(Error::InvalidInput("sweep needs at least one instance".into()));
    }
    let rows: Vec<Result<(f64, f64, f64, f64)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let inst = LemmaInstance::random(seed, i as u64);
            let res = verify_cov_update(&inst)?;
            let hth_norm = linalg::spectral_norm(&inst.h.t().dot(&inst.h))?.max(1e-300);
            let w = verify_w_bound(&inst)? / hth_norm;
            let gain_scale = inst.m_bound / (inst.sigma * inst.sigma);
            let g_inflated = verify_gain_bound(&inst)? / gain_scale;
            let mut bare = inst.clone();
            bare.q.fill(0.0);
            let g = verify_gain_bound(&bare)? / gain_scale;
            Ok((res, w, g, g_inflated))
        })
        .collect();
    let mut report = LemmaSweepReport {
        instances: count,
        max_cov_residual: 0.0,
        min_w_slack_rel: f64::INFINITY,
        min_gain_slack_rel: f64::INFINITY,
        min_gain_slack_inflated: f64::INFINITY,
    };
    for row in rows {
        let (res, w, g, gi) = row?;
        report.max_cov_residual = report.max_cov_residual.max(res);
        report.min_w_slack_rel = report.min_w_slack_rel.min(w);
        report.min_gain_slack_rel = report.min_gain_slack_rel.min(g);
        report.min_gain_slack_inflated = report.min_gain_slack_inflated.min(gi);
    }
    Ok(report)
}

/// True spectral parameters, fixed or per recorded filter step.
#[derive(Debug, Clone)]
pub enum TruthParams {
    Fixed(SpectralParams),
    /// Indexed by position in the filter's step records.
    PerStep(Vec<SpectralParams>),
}

/// Per-step misfits, noise and drift magnitudes, and their running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct MisfitLedger {
    /// ‖ȳ_k − h_k(θ†_k)‖² per step.
    pub misfit_sq: Vec<f64>,
    /// ‖ε̂_k‖ per step (first power; the squared norms are recoverable).
    pub noise_norms: Vec<f64>,
    pub drift_norms: Vec<f64>,
    pub running_avg_misfit: Vec<f64>,
    pub running_avg_noise: Vec<f64>,
    pub running_avg_drift: Vec<f64>,
}

fn running_avg(values: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            acc / (i + 1) as f64
        })
        .collect()
}

/// Build the ledger from a filter run and the true parameters: the noise
/// realization at each step is recovered as data − h_k(θ†_k).
pub fn misfit_ledger(
    run: &FilterRun,
    truth: &TruthParams,
    drift_norms: Option<Vec<f64>>,
) -> Result<MisfitLedger> {
    if run.steps.is_empty() {
        return Err(Error::InvalidInput("filter run has no steps".into()));
    }
    if let TruthParams::PerStep(list) = truth {
        if list.len() != run.steps.len() {
            return Err(Error::Shape(format!(
                "{} true parameter sets for {} steps",
                list.len(),
                run.steps.len()
            )));
        }
    }
    if let Some(d) = &drift_norms {
        if d.len() != run.steps.len() {
            return Err(Error::Shape("drift norms must match the step count".into()));
        }
    }
    let mut misfit_sq = Vec::with_capacity(run.steps.len());
    let mut noise_norms = Vec::with_capacity(run.steps.len());
    for (pos, rec) in run.steps.iter().enumerate() {
        let params = match truth {
            TruthParams::Fixed(p) => p,
            TruthParams::PerStep(list) => &list[pos],
        };
        if params.dim() * (run.delays + 1) != rec.data.len() {
            return Err(Error::Shape(format!(
                "true parameters of dimension {} cannot produce observations of length {}",
                params.dim(),
                rec.data.len()
            )));
        }
        let theta = params.flatten();
        let h_true =
            observation_map(theta.view(), rec.step, run.delays, params.rank(), params.dim())?;
        let misfit: f64 = rec
            .predicted_obs_mean
            .iter()
            .zip(h_true.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let noise: f64 = rec
            .data
            .iter()
            .zip(h_true.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        misfit_sq.push(misfit);
        noise_norms.push(noise);
    }
    let drift_norms = drift_norms.unwrap_or_else(|| vec![0.0; run.steps.len()]);
    Ok(MisfitLedger {
        running_avg_misfit: running_avg(&misfit_sq),
        running_avg_noise: running_avg(&noise_norms),
        running_avg_drift: running_avg(&drift_norms),
        misfit_sq,
        noise_norms,
        drift_norms,
    })
}

/// Fitted constants of avg_misfit(T) ≈ C1/T + C2·avg_noise(T), with the
/// relative least-squares residual of the fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MisfitFit {
    pub c1: f64,
    pub c2: f64,
    pub residual_rel: f64,
}

pub fn fit_misfit_bound(ledger: &MisfitLedger) -> Result<MisfitFit> {
    let n = ledger.running_avg_misfit.len();
    if n < 3 {
        return Err(Error::InvalidInput("fit needs at least three steps".into()));
    }
    // 2-column least squares in (1/T, avg_noise)
    let mut ata = [[0.0f64; 2]; 2];
    let mut atb = [0.0f64; 2];
    for t in 0..n {
        let x = [1.0 / (t + 1) as f64, ledger.running_avg_noise[t]];
        let y = ledger.running_avg_misfit[t];
        for i in 0..2 {
            for j in 0..2 {
                ata[i][j] += x[i] * x[j];
            }
            atb[i] += x[i] * y;
        }
    }
    let det = ata[0][0] * ata[1][1] - ata[0][1] * ata[1][0];
    let (c1, c2) = if det.abs() < 1e-300 {
        // degenerate design (e.g. zero noise): single-parameter fit C1/T
        (atb[0] / ata[0][0].max(1e-300), 0.0)
    } else {
        (
            (atb[0] * ata[1][1] - atb[1] * ata[0][1]) / det,
            (atb[1] * ata[0][0] - atb[0] * ata[1][0]) / det,
        )
    };
    let mut sq = 0.0;
    let mut scale = 0.0;
    for t in 0..n {
        let pred = c1 / (t + 1) as f64 + c2 * ledger.running_avg_noise[t];
        let y = ledger.running_avg_misfit[t];
        sq += (pred - y) * (pred - y);
        scale += y * y;
    }
    Ok(MisfitFit { c1, c2, residual_rel: (sq / scale.max(1e-300)).sqrt() })
}

/// Least-squares slope of log(avg) against log(T) over the final decade
/// T ∈ [T_max/10, T_max].
pub fn loglog_slope_final_decade(running_avg: &[f64]) -> Result<f64> {
    let n = running_avg.len();
    if n < 10 {
        return Err(Error::InvalidInput("slope needs at least ten steps".into()));
    }
    let start = n / 10;
    let mut pts = Vec::new();
    for t in start..n {
        let v = running_avg[t];
        if v > 0.0 {
            pts.push(((t as f64 + 1.0).ln(), v.ln()));
        }
    }
    if pts.len() < 2 {
        return Err(Error::Numerical("running average vanished; slope undefined".into()));
    }
    let m = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    Ok((m * sxy - sx * sy) / (m * sxx - sx * sx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_instance() -> LemmaInstance {
        LemmaInstance {
            p_cov: array![[1.0]],
            h: array![[1.0]],
            sigma: 1.0,
            q: array![[0.0]],
            r_bound: 1.0,
            m_bound: 1.0,
        }
    }

    #[test]
    fn cov_update_scalar_and_zero_h() {
        let res = verify_cov_update(&scalar_instance()).unwrap();
        assert!(res < 1e-14, "residual {res}");
        let zero_h = LemmaInstance { h: array![[0.0]], ..scalar_instance() };
        assert!(verify_cov_update(&zero_h).unwrap() < 1e-14);
    }

    #[test]
    fn w_bound_scalar_slack() {
        let slack = verify_w_bound(&scalar_instance()).unwrap();
        assert!((slack - 1.0 / 6.0).abs() < 1e-12, "slack {slack}");
        // H = 0: W = P⁻¹ − P₊⁻¹ with P₊ ⪰ P
        let mut inst = scalar_instance();
        inst.h = array![[0.0]];
        inst.q = array![[0.5]];
        assert!(verify_w_bound(&inst).unwrap() >= -1e-10);
    }

    #[test]
    fn gain_bound_scalar_tight() {
        let slack = verify_gain_bound(&scalar_instance()).unwrap();
        assert!(slack.abs() < 1e-12, "slack {slack}");
        let zero_h = LemmaInstance { h: array![[0.0]], ..scalar_instance() };
        let s = verify_gain_bound(&zero_h).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gain_bound_needs_uninflated_update() {
        // counterexample: with the drawn Q ≻ 0 the slack is genuinely
        // negative, far beyond roundoff; zeroing Q restores it
        let inst = LemmaInstance::random(42, 3);
        assert!(inst.q.iter().any(|v| *v != 0.0));
        let inflated = verify_gain_bound(&inst).unwrap();
        assert!(inflated < -1e-3, "inflated slack {inflated}");
        let mut bare = inst.clone();
        bare.q.fill(0.0);
        let s = verify_gain_bound(&bare).unwrap();
        assert!(s >= -1e-10, "bare slack {s}");
    }

    #[test]
    fn sweep_meets_tolerances() {
        let report = lemma_sweep(200, 12345).unwrap();
        assert_eq!(report.instances, 200);
        assert!(report.max_cov_residual <= 1e-10, "{}", report.max_cov_residual);
        assert!(report.min_w_slack_rel >= -1e-8, "{}", report.min_w_slack_rel);
        assert!(report.min_gain_slack_rel >= -1e-8, "{}", report.min_gain_slack_rel);
    }

    #[test]
    fn sweep_deterministic() {
        let a = lemma_sweep(20, 7).unwrap();
        let b = lemma_sweep(20, 7).unwrap();
        assert_eq!(a.max_cov_residual, b.max_cov_residual);
        assert_eq!(a.min_w_slack_rel, b.min_w_slack_rel);
        assert_eq!(a.min_gain_slack_rel, b.min_gain_slack_rel);
        assert_eq!(a.min_gain_slack_inflated, b.min_gain_slack_inflated);
    }

    #[test]
    fn running_avg_recomputation() {
        let vals = [3.0, 1.0, 2.0, 6.0];
        let avg = running_avg(&vals);
        for (i, a) in avg.iter().enumerate() {
            let direct: f64 = vals[..=i].iter().sum::<f64>() / (i + 1) as f64;
            assert!((a - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn ledger_zero_for_exact_run() {
        use crate::enkf::{PosteriorSpectrum, StepRecord};
        use ndarray_linalg::types::c64;
        let truth = SpectralParams::new(
            array![[c64::new(1.0, 0.0)], [c64::new(0.5, 0.0)]],
            array![c64::new(0.9, 0.0)],
            array![c64::new(1.0, 0.0)],
        )
        .unwrap();
        let n = 1;
        let mut steps = Vec::new();
        for k in n..6 {
            let h = observation_map(truth.flatten().view(), k, n, 1, 2).unwrap();
            steps.push(StepRecord {
                step: k,
                time: k as f64,
                posterior: PosteriorSpectrum::new(truth.flatten(), None, k).unwrap(),
                predicted_obs_mean: h.clone(),
                data: h,
            });
        }
        let run = FilterRun { init: truth.clone(), steps, rank: 1, dim: 2, delays: n };
        let ledger = misfit_ledger(&run, &TruthParams::Fixed(truth), None).unwrap();
        assert!(ledger.misfit_sq.iter().all(|v| *v == 0.0));
        assert!(ledger.noise_norms.iter().all(|v| *v == 0.0));
        assert!(ledger.running_avg_misfit.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn slope_of_one_over_t() {
        let avg: Vec<f64> = (1..=200).map(|t| 3.0 / t as f64).collect();
        let slope = loglog_slope_final_decade(&avg).unwrap();
        assert!((slope + 1.0).abs() < 1e-10, "slope {slope}");
    }

    #[test]
    fn fit_recovers_planted_constants() {
        let n = 300;
        let noise_avg = vec![0.2; n];
        let misfit: Vec<f64> = (1..=n).map(|t| 5.0 / t as f64 + 1.3 * 0.2).collect();
        let ledger = MisfitLedger {
            running_avg_misfit: misfit.clone(),
            running_avg_noise: noise_avg,
            running_avg_drift: vec![0.0; n],
            misfit_sq: misfit,
            noise_norms: vec![0.2; n],
            drift_norms: vec![0.0; n],
        };
        let fit = fit_misfit_bound(&ledger).unwrap();
        assert!((fit.c1 - 5.0).abs() < 1e-8);
        assert!((fit.c2 - 1.3).abs() < 1e-8);
        assert!(fit.residual_rel < 1e-10);
    }
}

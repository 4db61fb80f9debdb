//! Adaptive selection of the time-delay count by eigenvalue-residual
//! stabilization over growing snapshot stencils.

use ndarray::Array1;
use ndarray_linalg::types::c64;

use crate::dmd::{exact_dmd, RankPolicy};
use crate::error::{Error, Result};
use crate::series::{build_data_matrices, SnapshotSeries};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayCriterion {
    /// Residual threshold; interpreted relative to ‖Λ‖_F when `relative`.
    pub epsilon: f64,
    pub relative: bool,
    /// Hard cap on the returned delay count.
    pub max_n: usize,
    /// Rank used for the stencil decompositions.
    pub r: usize,
    /// Match eigenvalues by greedy nearest-neighbor pairing instead of the
    /// deterministic sort order.
    pub greedy_match: bool,
}

impl DelayCriterion {
    pub fn new(r: usize) -> Self {
        Self { epsilon: 1e-2, relative: true, max_n: 50, r, greedy_match: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() && self.epsilon != f64::INFINITY {
            return Err(Error::InvalidInput(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.r == 0 {
            return Err(Error::InvalidInput("stencil rank must be at least 1".into()));
        }
        if self.max_n < self.r + 1 {
            return Err(Error::InvalidInput(format!(
                "max_n = {} must be at least r+1 = {}",
                self.max_n,
                self.r + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelaySelection {
    pub n: usize,
    /// Set when the residual threshold was never met before the cap.
    pub saturated: bool,
}

fn stencil_eigenvalues(series: &SnapshotSeries, size: usize, r: usize) -> Result<Array1<c64>> {
    let stencil = series.truncated(size - 1)?;
    let (y0, y1) = build_data_matrices(&stencil);
    Ok(exact_dmd(&y0, &y1, RankPolicy::Fixed(r))?.eigenvalues)
}

/// Greedy pairing: each λ_i takes its nearest unused λ′.
fn greedy_residual(prev: &Array1<c64>, next: &Array1<c64>) -> f64 {
    let mut used = vec![false; next.len()];
    let mut sq = 0.0;
    for lam in prev.iter() {
        let mut best = None;
        for (j, cand) in next.iter().enumerate() {
            if used[j] {
                continue;
            }
            let dist = (cand - lam).norm();
            if best.map_or(true, |(_, d)| dist < d) {
                best = Some((j, dist));
            }
        }
        let (j, dist) = best.expect("equal-length spectra");
        used[j] = true;
        sq += dist * dist;
    }
    sq.sqrt()
}

fn sorted_residual(prev: &Array1<c64>, next: &Array1<c64>) -> f64 {
    prev.iter()
        .zip(next.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Grow the stencil until consecutive eigenvalue sets agree to within the
/// threshold; the stabilized stencil size is the delay count.
pub fn select_delay(series: &SnapshotSeries, crit: &DelayCriterion) -> Result<DelaySelection> {
    crit.validate()?;
    if series.count() < crit.r + 2 {
        return Err(Error::InvalidInput(format!(
            "delay selection needs at least r+2 = {} snapshots, got {}",
            crit.r + 2,
            series.count()
        )));
    }
    let mut s = crit.r + 1;
    let mut prev = stencil_eigenvalues(series, s, crit.r)?;
    let cap = crit.max_n.min(series.count() - 1);
    while s + 1 <= cap {
        let next = stencil_eigenvalues(series, s + 1, crit.r)?;
        let e = if crit.greedy_match {
            greedy_residual(&prev, &next)
        } else {
            sorted_residual(&prev, &next)
        };
        let threshold = if crit.relative {
            let scale = prev.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            crit.epsilon * scale
        } else {
            crit.epsilon
        };
        if e <= threshold {
            return Ok(DelaySelection { n: s + 1, saturated: false });
        }
        prev = next;
        s += 1;
    }
    Ok(DelaySelection { n: cap.max(crit.r + 1), saturated: true })
}

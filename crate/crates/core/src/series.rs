//! Snapshot sequences and the data matrices derived from them.

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};

/// A uniformly sampled sequence of observable snapshots. Column `k` of
/// `values` holds the observable vector at time `t0 + k*dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSeries {
    values: Array2<f64>,
    dt: f64,
    t0: f64,
}

impl SnapshotSeries {
    pub fn new(values: Array2<f64>, dt: f64, t0: f64) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() < 2 {
            return Err(Error::InvalidInput(format!(
                "snapshot series needs at least 2 columns and 1 row, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(Error::InvalidInput("t0 must be finite".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("snapshot entries must be finite".into()));
        }
        Ok(Self { values, dt, t0 })
    }

    /// Observable dimension d.
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Number of snapshots m+1.
    pub fn count(&self) -> usize {
        self.values.ncols()
    }

    /// Index of the last snapshot, m.
    pub fn last_index(&self) -> usize {
        self.count() - 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn time_at(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn column(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.column(k)
    }

    /// Keep only snapshots `0..=last`.
    pub fn truncated(&self, last: usize) -> Result<Self> {
        if last + 1 > self.count() {
            return Err(Error::Range(format!(
                "truncation index {last} beyond last snapshot {}",
                self.last_index()
            )));
        }
        SnapshotSeries::new(
            self.values.slice(s![.., ..=last]).to_owned(),
            self.dt,
            self.t0,
        )
    }
}

/// A delay window of `n` past snapshots ending at step `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayWindow {
    pub n: usize,
    pub k: usize,
}

impl DelayWindow {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k < n {
            return Err(Error::Range(format!(
                "delay window k={k} precedes series start (n={n})"
            )));
        }
        Ok(Self { n, k })
    }
}

/// Split a series into the shifted pair (Y0, Y1) used by DMD.
pub fn build_data_matrices(series: &SnapshotSeries) -> (Array2<f64>, Array2<f64>) {
    let m = series.last_index();
    let y0 = series.values().slice(s![.., ..m]).to_owned();
    let y1 = series.values().slice(s![.., 1..]).to_owned();
    (y0, y1)
}

/// Stack columns `k-n ..= k` of the series into one long vector.
pub fn delay_stack(series: &SnapshotSeries, window: DelayWindow) -> Result<Array1<f64>> {
    let DelayWindow { n, k } = window;
    if k < n {
        return Err(Error::Range(format!("delay window k={k} < n={n}")));
    }
    if k > series.last_index() {
        return Err(Error::Range(format!(
            "delay window k={k} beyond last snapshot {}",
            series.last_index()
        )));
    }
    let d = series.dim();
    let mut out = Array1::zeros(d * (n + 1));
    for (j, col) in (k - n..=k).enumerate() {
        out.slice_mut(s![j * d..(j + 1) * d])
            .assign(&series.column(col));
    }
    Ok(out)
}

/// Column-wise root mean square error between two equally shaped matrices.
pub fn rmse(estimate: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    if estimate.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "rmse shapes differ: {:?} vs {:?}",
            estimate.dim(),
            truth.dim()
        )));
    }
    let n = estimate.ncols();
    if n == 0 {
        return Err(Error::InvalidInput("rmse over zero columns".into()));
    }
    let sq: f64 = estimate
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sq / n as f64).sqrt())
}

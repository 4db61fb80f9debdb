//! Batch DMD: exact DMD, compressed DMD with full-state mode recovery, and
//! dictionary lifting for EDMD.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use ndarray_linalg::types::c64;
use ndarray_linalg::{Eig, LeastSquaresSvd, SVD};

use crate::error::{Error, Result};
use crate::series::SnapshotSeries;
use crate::spectral::SpectralParams;

/// How to pick the SVD truncation rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankPolicy {
    /// Exactly r modes; errors if the data cannot support them.
    Fixed(usize),
    /// Keep singular values >= tau_rel * sigma_max.
    Threshold(f64),
    /// Keep the smallest leading set capturing an eta fraction of the energy.
    Energy(f64),
}

impl RankPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankPolicy::Fixed(r) if r >= 1 => Ok(()),
            RankPolicy::Fixed(r) => Err(Error::InvalidInput(format!("fixed rank must be >= 1, got {r}"))),
            RankPolicy::Threshold(t) if t > 0.0 && t < 1.0 => Ok(()),
            RankPolicy::Threshold(t) => {
                Err(Error::InvalidInput(format!("threshold must be in (0,1), got {t}")))
            }
            RankPolicy::Energy(e) if e > 0.0 && e <= 1.0 => Ok(()),
            RankPolicy::Energy(e) => {
                Err(Error::InvalidInput(format!("energy fraction must be in (0,1], got {e}")))
            }
        }
    }

    fn choose(&self, singular: &Array1<f64>) -> Result<usize> {
        let smax = singular.iter().cloned().fold(0.0, f64::max);
        if smax <= 0.0 {
            return Err(Error::InvalidInput("data matrix is identically zero".into()));
        }
        // numerical rank floor shared by every policy
        let nrank = singular.iter().filter(|&&s| s > smax * 1e-12).count();
        match *self {
            RankPolicy::Fixed(r) => {
                if r > nrank {
                    Err(Error::RankDeficient { requested: r, achievable: nrank })
                } else {
                    Ok(r)
                }
            }
            RankPolicy::Threshold(tau) => {
                Ok(singular.iter().filter(|&&s| s >= tau * smax).count().clamp(1, nrank))
            }
            RankPolicy::Energy(eta) => {
                let total: f64 = singular.iter().map(|s| s * s).sum();
                let mut acc = 0.0;
                for (i, s) in singular.iter().enumerate() {
                    acc += s * s;
                    if acc >= eta * total {
                        return Ok((i + 1).min(nrank));
                    }
                }
                Ok(nrank)
            }
        }
    }
}

/// Deterministic eigenpair order: modulus desc, then real desc, then imag desc.
fn sort_order(eigenvalues: &Array1<c64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (eigenvalues[a], eigenvalues[b]);
        y.norm()
            .total_cmp(&x.norm())
            .then(y.re.total_cmp(&x.re))
            .then(y.im.total_cmp(&x.im))
    });
    idx
}

fn to_complex(a: &Array2<f64>) -> Array2<c64> {
    a.mapv(|v| c64::new(v, 0.0))
}

/// Rebuild with canonical row-major strides; owned arrays sliced down from
/// larger ones can carry zero strides that LAPACK wrappers reject.
fn standardize(a: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_vec(a.raw_dim(), a.iter().cloned().collect()).expect("matching length")
}

/// Exact DMD (SVD truncation, reduced operator eigenpairs, exact modes).
pub fn exact_dmd(y0: &Array2<f64>, y1: &Array2<f64>, policy: RankPolicy) -> Result<SpectralParams> {
    policy.validate()?;
    if y0.dim() != y1.dim() {
        return Err(Error::Shape(format!("Y0 {:?} and Y1 {:?} differ", y0.dim(), y1.dim())));
    }
    if y0.ncols() < 1 {
        return Err(Error::InvalidInput("need at least one snapshot pair".into()));
    }
    let (u, s, vt) = standardize(y0).svd(true, true)?;
    let u = u.expect("u requested");
    let vt = vt.expect("vt requested");
    let r = policy.choose(&s)?;

    let u_r = u.slice(ndarray::s![.., ..r]);
    let v_r = vt.slice(ndarray::s![..r, ..]).t().to_owned();
    // B = Y1 V_r Σ_r^{-1}
    let mut b_mat = standardize(y1).dot(&v_r);
    for (j, sj) in s.iter().take(r).enumerate() {
        b_mat.column_mut(j).mapv_inplace(|v| v / sj);
    }
    let k_tilde = u_r.t().dot(&b_mat);
    let (vals, vecs) = k_tilde.eig()?;
    let modes_all = to_complex(&b_mat).dot(&vecs);

    let order = sort_order(&vals);
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| vals[i]));
    let modes = modes_all.select(Axis(1), &order);
    let amplitudes = fit_amplitudes(&modes, &y0.column(0))?;
    SpectralParams::new(modes, eigenvalues, amplitudes)
}

/// Least-squares amplitudes b = Φ† y0.
pub fn fit_amplitudes(modes: &Array2<c64>, first_snapshot: &ArrayView1<'_, f64>) -> Result<Array1<c64>> {
    let rhs = first_snapshot.mapv(|v| c64::new(v, 0.0));
    let sol = modes
        .least_squares(&rhs)
        .map_err(|e| Error::Numerical(format!("amplitude fit failed: {e}")))?;
    Ok(sol.solution)
}

/// DMD on compressed snapshots (C Y0, C Y1); eigenvalues come from the
/// compressed problem and full-state modes are rebuilt from the uncompressed
/// Y1.
pub fn compressed_dmd(
    y0: &Array2<f64>,
    y1: &Array2<f64>,
    c: &Array2<f64>,
    policy: RankPolicy,
) -> Result<SpectralParams> {
    policy.validate()?;
    if c.ncols() != y0.nrows() {
        return Err(Error::Shape(format!(
            "compression matrix is {}x{} but data dimension is {}",
            c.nrows(),
            c.ncols(),
            y0.nrows()
        )));
    }
    if c.nrows() > c.ncols() {
        return Err(Error::InvalidInput("compression must not increase dimension".into()));
    }
    let (_, sc, _) = standardize(c).svd(false, false)?;
    let smax = sc.iter().cloned().fold(0.0, f64::max);
    let smin = sc.iter().cloned().fold(f64::INFINITY, f64::min);
    if smax <= 0.0 || smin <= smax * 1e-10 {
        return Err(Error::InvalidInput("compression matrix is row-rank deficient".into()));
    }

    let z0 = c.dot(y0);
    let z1 = c.dot(y1);
    let (u, s, vt) = z0.svd(true, true)?;
    let u = u.expect("u requested");
    let vt = vt.expect("vt requested");
    let r = policy.choose(&s)?;

    let u_r = u.slice(ndarray::s![.., ..r]);
    let v_r = vt.slice(ndarray::s![..r, ..]).t().to_owned();
    let mut vs_inv = v_r.clone();
    for (j, sj) in s.iter().take(r).enumerate() {
        vs_inv.column_mut(j).mapv_inplace(|v| v / sj);
    }
    let k_tilde = u_r.t().dot(&z1.dot(&vs_inv));
    let (vals, vecs) = k_tilde.eig()?;
    // full-state modes from the uncompressed shifted data
    let modes_all = to_complex(&y1.dot(&vs_inv)).dot(&vecs);

    let order = sort_order(&vals);
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| vals[i]));
    let modes = modes_all.select(Axis(1), &order);
    let amplitudes = fit_amplitudes(&modes, &y0.column(0))?;
    SpectralParams::new(modes, eigenvalues, amplitudes)
}

/// A dictionary of observables applied snapshot-wise.
pub struct Dictionary {
    pub name: String,
    pub lifted_dim: usize,
    lift: Box<dyn Fn(ArrayView1<'_, f64>) -> Array1<f64> + Send + Sync>,
}

impl Dictionary {
    pub fn new<F>(name: impl Into<String>, lifted_dim: usize, lift: F) -> Self
    where
        F: Fn(ArrayView1<'_, f64>) -> Array1<f64> + Send + Sync + 'static,
    {
        Self { name: name.into(), lifted_dim, lift: Box::new(lift) }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new("identity", dim, |x| x.to_owned())
    }

    /// (x1, x2) -> (x1, x2, x1^2), the invariant subspace of the slow
    /// manifold system.
    pub fn slow_manifold() -> Self {
        Self::new("slow_manifold", 3, |x| {
            ndarray::array![x[0], x[1], x[0] * x[0]]
        })
    }

    /// u -> [u, u^3] stacked, doubling the dimension.
    pub fn cubic(dim: usize) -> Self {
        Self::new("cubic", 2 * dim, move |x| {
            let mut out = Array1::zeros(2 * dim);
            for j in 0..dim {
                out[j] = x[j];
                out[dim + j] = x[j] * x[j] * x[j];
            }
            out
        })
    }

    pub fn lift(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        (self.lift)(x)
    }
}

impl std::fmt::Debug for Dictionary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dictionary")
            .field("name", &self.name)
            .field("lifted_dim", &self.lifted_dim)
            .finish()
    }
}

/// Apply a dictionary column-wise; time metadata is preserved.
pub fn lift_series(series: &SnapshotSeries, dict: &Dictionary) -> Result<SnapshotSeries> {
    let mut out = Array2::zeros((dict.lifted_dim, series.count()));
    for k in 0..series.count() {
        let lifted = dict.lift(series.column(k));
        if lifted.len() != dict.lifted_dim {
            return Err(Error::Shape(format!(
                "dictionary '{}' produced length {} instead of {}",
                dict.name,
                lifted.len(),
                dict.lifted_dim
            )));
        }
        out.column_mut(k).assign(&lifted);
    }
    SnapshotSeries::new(out, series.dt(), series.t0())
}

//! The spectral parameter triple (modes, eigenvalues, amplitudes) and its
//! flattened real-vector form used as the filter state.

use ndarray::{Array1, Array2, ArrayView1};
use ndarray_linalg::types::c64;

use crate::error::{Error, Result};

/// Modes Φ (d×r), eigenvalues Λ (r) and amplitudes b (r). Observables evolve
/// as g_k = Re(Φ Λ^k b).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralParams {
    pub modes: Array2<c64>,
    pub eigenvalues: Array1<c64>,
    pub amplitudes: Array1<c64>,
}

impl SpectralParams {
    pub fn new(modes: Array2<c64>, eigenvalues: Array1<c64>, amplitudes: Array1<c64>) -> Result<Self> {
        let r = eigenvalues.len();
        if r == 0 || modes.nrows() == 0 {
            return Err(Error::InvalidInput("spectral params need r >= 1, d >= 1".into()));
        }
        if modes.ncols() != r || amplitudes.len() != r {
            return Err(Error::Shape(format!(
                "inconsistent spectral sizes: modes {}x{}, eigenvalues {}, amplitudes {}",
                modes.nrows(),
                modes.ncols(),
                r,
                amplitudes.len()
            )));
        }
        let finite = modes.iter().chain(eigenvalues.iter()).chain(amplitudes.iter());
        for v in finite {
            if !v.re.is_finite() || !v.im.is_finite() {
                return Err(Error::InvalidInput("spectral entries must be finite".into()));
            }
        }
        Ok(Self { modes, eigenvalues, amplitudes })
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn dim(&self) -> usize {
        self.modes.nrows()
    }

    /// Length of the flattened state: p = 2 r (d + 2).
    pub fn flat_len(&self) -> usize {
        flat_len(self.rank(), self.dim())
    }

    /// Flatten to a real vector. Layout: modes column by column, then
    /// eigenvalues, then amplitudes, with (Re, Im) interleaved per scalar.
    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.flat_len());
        let mut idx = 0;
        let mut push = |v: c64, out: &mut Array1<f64>| {
            out[idx] = v.re;
            out[idx + 1] = v.im;
            idx += 2;
        };
        for i in 0..self.rank() {
            for j in 0..self.dim() {
                push(self.modes[[j, i]], &mut out);
            }
        }
        for i in 0..self.rank() {
            push(self.eigenvalues[i], &mut out);
        }
        for i in 0..self.rank() {
            push(self.amplitudes[i], &mut out);
        }
        out
    }

    pub fn unflatten(theta: ArrayView1<'_, f64>, r: usize, d: usize) -> Result<Self> {
        if theta.len() != flat_len(r, d) {
            return Err(Error::Shape(format!(
                "flattened length {} does not match 2r(d+2) = {} for r={r}, d={d}",
                theta.len(),
                flat_len(r, d)
            )));
        }
        let grab = |idx: usize| c64::new(theta[2 * idx], theta[2 * idx + 1]);
        let modes = Array2::from_shape_fn((d, r), |(j, i)| grab(i * d + j));
        let eigenvalues = Array1::from_shape_fn(r, |i| grab(r * d + i));
        let amplitudes = Array1::from_shape_fn(r, |i| grab(r * d + r + i));
        Self::new(modes, eigenvalues, amplitudes)
    }

    /// Evaluate Re(Φ Λ^k b), the reconstructed observable at step k.
    pub fn reconstruct(&self, k: usize) -> Result<Array1<f64>> {
        let weights = self.powered_amplitudes(k)?;
        Ok(self.real_combination(&weights))
    }

    /// b with each entry scaled by λ_i^k. Errors when the power overflows.
    pub fn powered_amplitudes(&self, k: usize) -> Result<Array1<c64>> {
        let mut w = Array1::zeros(self.rank());
        for i in 0..self.rank() {
            let p = complex_pow(self.eigenvalues[i], k);
            if !p.re.is_finite() || !p.im.is_finite() {
                return Err(Error::Range(format!(
                    "eigenvalue power overflow: |lambda|={} at k={k}",
                    self.eigenvalues[i].norm()
                )));
            }
            w[i] = self.amplitudes[i] * p;
        }
        Ok(w)
    }

    /// Re(Φ w) for a complex weight vector w.
    pub fn real_combination(&self, weights: &Array1<c64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        for j in 0..self.dim() {
            let mut acc = 0.0;
            for i in 0..self.rank() {
                let m = self.modes[[j, i]];
                let w = weights[i];
                acc += m.re * w.re - m.im * w.im;
            }
            out[j] = acc;
        }
        out
    }
}

pub fn flat_len(r: usize, d: usize) -> usize {
    2 * r * (d + 2)
}

/// λ^k by binary exponentiation; exact for k = 0 (gives 1).
pub fn complex_pow(base: c64, k: usize) -> c64 {
    let mut result = c64::new(1.0, 0.0);
    let mut b = base;
    let mut e = k;
    while e > 0 {
        if e & 1 == 1 {
            result *= b;
        }
        b *= b;
        e >>= 1;
    }
    result
}

/// Observation noise magnitude σ and state noise covariance Q.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub q: Array2<f64>,
}

impl NoiseSpec {
    pub fn new(sigma: f64, q: Array2<f64>) -> Result<Self> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!("sigma must be nonnegative, got {sigma}")));
        }
        if q.nrows() != q.ncols() {
            return Err(Error::Shape("Q must be square".into()));
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..q.nrows() {
                for j in 0..i {
                    if (q[[i, j]] - q[[j, i]]).abs() > 1e-12 * norm {
                        return Err(Error::InvalidInput("Q must be symmetric".into()));
                    }
                }
            }
            use ndarray_linalg::{EigValsh, UPLO};
            let evals = q.eigvalsh(UPLO::Lower)?;
            let min = evals.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < -1e-10 * norm {
                return Err(Error::InvalidInput(format!(
                    "Q must be positive semidefinite (min eigenvalue {min})"
                )));
            }
        }
        Ok(Self { sigma, q })
    }

    /// Isotropic state noise q^2 I of dimension p; q = 0 gives the zero matrix.
    pub fn isotropic(sigma: f64, q_std: f64, p: usize) -> Result<Self> {
        let q = Array2::eye(p) * (q_std * q_std);
        Self::new(sigma, q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> SpectralParams {
        let modes = array![
            [c64::new(1.0, 0.5), c64::new(0.0, -1.0)],
            [c64::new(-0.25, 0.0), c64::new(2.0, 0.125)],
            [c64::new(0.5, -0.75), c64::new(0.1, 0.2)],
        ];
        SpectralParams::new(
            modes,
            array![c64::new(0.9, 0.1), c64::new(0.9, -0.1)],
            array![c64::new(1.0, -2.0), c64::new(1.0, 2.0)],
        )
        .unwrap()
    }

    #[test]
    fn flatten_roundtrip_bitwise() {
        let p = sample();
        assert_eq!(p.flat_len(), 2 * 2 * (3 + 2));
        let theta = p.flatten();
        let back = SpectralParams::unflatten(theta.view(), 2, 3).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn fixed_point_reconstruct() {
        let p = SpectralParams::new(
            array![[c64::new(1.0, 0.0)], [c64::new(0.0, 0.0)]],
            array![c64::new(1.0, 0.0)],
            array![c64::new(1.0, 0.0)],
        )
        .unwrap();
        for k in [0, 1, 7, 100] {
            let g = p.reconstruct(k).unwrap();
            assert_eq!(g, array![1.0, 0.0]);
        }
    }

    #[test]
    fn k_zero_is_phi_b() {
        let p = sample();
        let g = p.reconstruct(0).unwrap();
        for j in 0..3 {
            let want: c64 = (0..2).map(|i| p.modes[[j, i]] * p.amplitudes[i]).sum();
            assert!((g[j] - want.re).abs() < 1e-15);
        }
    }

    #[test]
    fn overflow_reported_as_range_error() {
        let p = SpectralParams::new(
            array![[c64::new(1.0, 0.0)]],
            array![c64::new(10.0, 0.0)],
            array![c64::new(1.0, 0.0)],
        )
        .unwrap();
        assert!(matches!(p.reconstruct(400), Err(Error::Range(_))));
    }

    #[test]
    fn noise_spec_validation() {
        assert!(NoiseSpec::new(0.1, Array2::zeros((3, 3))).is_ok());
        assert!(NoiseSpec::new(-0.1, Array2::zeros((1, 1))).is_err());
        let bad = array![[1.0, 0.5], [-0.5, 1.0]];
        assert!(NoiseSpec::new(0.0, bad).is_err());
        let indef = array![[1.0, 0.0], [0.0, -1.0]];
        assert!(NoiseSpec::new(0.0, indef).is_err());
    }
}

//! Ground-truth data generators for the benchmark systems, with analytic
//! spectra where available, plus Gaussian noise injection.

use ndarray::{Array1, Array2};
use ndarray_linalg::types::c64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::series::SnapshotSeries;

/// Analytic discrete-time spectrum attached to generated data.
#[derive(Debug, Clone, PartialEq)]
pub enum EigenTrack {
    None,
    /// Time-invariant spectrum.
    Fixed(Array1<c64>),
    /// Column k holds the per-step spectrum at step k.
    PerStep(Array2<c64>),
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub series: SnapshotSeries,
    pub eigenvalues: EigenTrack,
    pub description: String,
}

/// One-step propagator exp(A·dt) of the lifted slow-manifold system with
/// A = [[mu,0,0],[0,lam,-lam],[0,0,2mu]], in closed form.
pub fn slow_manifold_propagator(mu: f64, lam: f64, dt: f64) -> Array2<f64> {
    let e_mu = (mu * dt).exp();
    let e_lam = (lam * dt).exp();
    let e_2mu = (2.0 * mu * dt).exp();
    let coupling = if (lam - 2.0 * mu).abs() < 1e-12 {
        -lam * dt * e_lam
    } else {
        lam * (e_2mu - e_lam) / (lam - 2.0 * mu)
    };
    let mut m = Array2::zeros((3, 3));
    m[[0, 0]] = e_mu;
    m[[1, 1]] = e_lam;
    m[[1, 2]] = coupling;
    m[[2, 2]] = e_2mu;
    m
}

/// Lifted slow-manifold ODE trajectory (x1, x2, x1²), propagated exactly by
/// the matrix exponential each step.
pub fn gen_ode_auto(mu: f64, lam: f64, dt: f64, steps: usize, x0: [f64; 2]) -> Result<GroundTruth> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if steps < 1 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    let m = slow_manifold_propagator(mu, lam, dt);
    let mut y = Array1::from(vec![x0[0], x0[1], x0[0] * x0[0]]);
    let mut values = Array2::zeros((3, steps + 1));
    values.column_mut(0).assign(&y);
    for k in 1..=steps {
        y = m.dot(&y);
        values.column_mut(k).assign(&y);
    }
    // descending modulus for the decaying defaults
    let mut eigs = [mu * dt, 2.0 * mu * dt, lam * dt].map(f64::exp);
    eigs.sort_by(|a, b| b.total_cmp(a));
    Ok(GroundTruth {
        series: SnapshotSeries::new(values, dt, 0.0)?,
        eigenvalues: EigenTrack::Fixed(eigs.iter().map(|&v| c64::new(v, 0.0)).collect()),
        description: format!("lifted slow-manifold ODE, mu={mu}, lambda={lam}"),
    })
}

/// One damped-oscillation Fourier coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierMode {
    pub pos: (usize, usize),
    pub decay: f64,
    pub freq: f64,
    pub init: f64,
}

/// The five-mode benchmark configuration.
pub fn benchmark_fourier_modes() -> Vec<FourierMode> {
    let pos = [(3, 2), (5, 2), (7, 9), (3, 5), (9, 8)];
    let decay = [-0.0755, -0.0839, -0.0414, -0.0175, -0.0702];
    let freq = [12.0967, 11.0315, 8.1959, 6.2861, 1.6272];
    let init = [0.2954, -0.7263, -0.4689, 0.3091, 0.3857];
    (0..5)
        .map(|i| FourierMode { pos: pos[i], decay: decay[i], freq: freq[i], init: init[i] })
        .collect()
}

/// Noise-free coefficient field at time t: seeded modes at init·e^{(d+iω)t},
/// everything else zero.
pub fn fourier_coefficients(modes: &[FourierMode], grid: usize, t: f64) -> Array2<c64> {
    let mut coeff = Array2::zeros((grid, grid));
    for m in modes {
        let lam = c64::new(m.decay, m.freq);
        coeff[[m.pos.0, m.pos.1]] = c64::new(m.init, 0.0) * (lam * t).exp();
    }
    coeff
}

fn ifft2_real(coeff: &Array2<c64>, planner: &mut FftPlanner<f64>) -> Array1<f64> {
    let n = coeff.nrows();
    let fft = planner.plan_fft_inverse(n);
    let mut field: Vec<c64> = coeff.iter().cloned().collect();
    // rows (contiguous in the row-major layout)
    for row in field.chunks_mut(n) {
        fft.process(row);
    }
    // columns
    let mut col = vec![c64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = field[i * n + j];
        }
        fft.process(&mut col);
        for i in 0..n {
            field[i * n + j] = col[i];
        }
    }
    let scale = 1.0 / (n * n) as f64;
    field.iter().map(|v| v.re * scale).collect()
}

/// Sparse linear dynamics in the Fourier domain: five damped oscillating
/// coefficients plus fresh background noise each step; snapshots are the real
/// part of the inverse transform.
pub fn gen_fourier_system(
    modes: &[FourierMode],
    grid: usize,
    sigma_bg: f64,
    dt: f64,
    steps: usize,
    seed: u64,
) -> Result<GroundTruth> {
    if dt <= 0.0 || steps < 1 {
        return Err(Error::InvalidInput("need dt > 0 and at least one step".into()));
    }
    if sigma_bg < 0.0 {
        return Err(Error::InvalidInput("sigma_bg must be nonnegative".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for m in modes {
        if m.pos.0 >= grid || m.pos.1 >= grid {
            return Err(Error::Range(format!(
                "mode position {:?} outside {grid}x{grid} grid",
                m.pos
            )));
        }
        if !seen.insert(m.pos) {
            return Err(Error::InvalidInput(format!("duplicate mode position {:?}", m.pos)));
        }
    }
    let mut planner = FftPlanner::new();
    let d = grid * grid;
    let mut values = Array2::zeros((d, steps + 1));
    for k in 0..=steps {
        let mut coeff = fourier_coefficients(modes, grid, k as f64 * dt);
        if sigma_bg > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            for (pos, v) in coeff.indexed_iter_mut() {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                if !seen.contains(&pos) {
                    *v = c64::new(re * sigma_bg, im * sigma_bg);
                }
            }
        }
        values.column_mut(k).assign(&ifft2_real(&coeff, &mut planner));
    }
    let eigs = modes.iter().map(|m| (c64::new(m.decay, m.freq) * dt).exp()).collect();
    Ok(GroundTruth {
        series: SnapshotSeries::new(values, dt, 0.0)?,
        eigenvalues: EigenTrack::Fixed(eigs),
        description: format!("sparse Fourier dynamics, {grid}x{grid} grid"),
    })
}

/// Fundamental matrix M(t1, t0) of the rotating non-autonomous system with
/// envelope cos(t/divisor) and constant rotation rate omega.
pub fn nonauto_propagator(t1: f64, t0: f64, omega: f64, divisor: f64) -> Array2<f64> {
    let alpha = divisor * ((t1 / divisor).sin() - (t0 / divisor).sin());
    let beta = omega * (t1 - t0);
    let e = alpha.exp();
    ndarray::array![
        [e * beta.cos(), e * beta.sin()],
        [-e * beta.sin(), e * beta.cos()]
    ]
}

/// Linear non-autonomous system with per-step normalized Koopman eigenvalues
/// λ(k) = exp((α(t_k) ± i·omega·t_k)/k); the rotation phase is accumulated
/// continuously, so the imaginary log-part is omega·dt for every k.
pub fn gen_nonauto_linear(omega: f64, freq_divisor: f64, dt: f64, steps: usize) -> Result<GroundTruth> {
    if dt <= 0.0 || steps < 1 {
        return Err(Error::InvalidInput("need dt > 0 and at least one step".into()));
    }
    if freq_divisor <= 0.0 {
        return Err(Error::InvalidInput("freq_divisor must be positive".into()));
    }
    let x0 = [1.0, 0.0];
    let mut values = Array2::zeros((2, steps + 1));
    let mut track = Array2::zeros((2, steps + 1));
    let rot = c64::new(0.0, omega * dt).exp();
    for k in 0..=steps {
        let t = k as f64 * dt;
        let m = nonauto_propagator(t, 0.0, omega, freq_divisor);
        values[[0, k]] = m[[0, 0]] * x0[0] + m[[0, 1]] * x0[1];
        values[[1, k]] = m[[1, 0]] * x0[0] + m[[1, 1]] * x0[1];
        let alpha = freq_divisor * (t / freq_divisor).sin();
        // α(t_k)/k → dt·cos(0) as k → 0
        let log_mod = if k == 0 { dt } else { alpha / k as f64 };
        let lam = log_mod.exp() * rot;
        track[[0, k]] = lam;
        track[[1, k]] = lam.conj();
    }
    Ok(GroundTruth {
        series: SnapshotSeries::new(values, dt, 0.0)?,
        eigenvalues: EigenTrack::PerStep(track),
        description: format!("linear non-autonomous system, envelope cos(t/{freq_divisor})"),
    })
}

/// Reaction coefficient μ(t) of the Allen–Cahn equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reaction {
    Constant(f64),
    SinT,
}

impl Reaction {
    pub fn mu(&self, t: f64) -> f64 {
        match self {
            Reaction::Constant(v) => *v,
            Reaction::SinT => t.sin(),
        }
    }
}

/// Allen–Cahn equation u_t = θΔu − μ(t)(u − u³) on (0,2π)² with Dirichlet
/// u=0 on the x=0 and y=0 edges and first-order homogeneous Neumann on the
/// x=2π and y=2π edges. Semi-implicit stepping: Crank–Nicolson 5-point
/// Laplacian (prefactored LU), Adams–Bashforth extrapolated reaction.
/// Snapshots are the flattened (nx+1)×(ny+1) grid.
pub fn gen_allen_cahn(
    theta: f64,
    reaction: Reaction,
    nx: usize,
    ny: usize,
    dt: f64,
    t_end: f64,
    u0: Option<Array2<f64>>,
) -> Result<GroundTruth> {
    use ndarray_linalg::{Factorize, Solve};
    if nx < 8 || ny < 8 {
        return Err(Error::InvalidInput("grid must be at least 8x8".into()));
    }
    if dt <= 0.0 || t_end <= dt {
        return Err(Error::InvalidInput("need 0 < dt < t_end".into()));
    }
    let steps = (t_end / dt).round() as usize;
    let hx = 2.0 * std::f64::consts::PI / nx as f64;
    let hy = 2.0 * std::f64::consts::PI / ny as f64;
    let (iu, ju) = (nx - 1, ny - 1); // interior unknowns per direction
    let n_unknown = iu * ju;
    let idx = |i: usize, j: usize| (i - 1) * ju + (j - 1);

    // discrete Laplacian with the Neumann copy u[nx][j] = u[nx−1][j] folded in
    let mut lap = Array2::zeros((n_unknown, n_unknown));
    let (wx, wy) = (1.0 / (hx * hx), 1.0 / (hy * hy));
    for i in 1..=iu {
        for j in 1..=ju {
            let row = idx(i, j);
            lap[[row, row]] = -2.0 * wx - 2.0 * wy;
            if i > 1 {
                lap[[row, idx(i - 1, j)]] = wx;
            }
            if i < iu {
                lap[[row, idx(i + 1, j)]] = wx;
            } else {
                lap[[row, row]] += wx; // Neumann fold at x = 2π
            }
            if j > 1 {
                lap[[row, idx(i, j - 1)]] = wy;
            }
            if j < ju {
                lap[[row, idx(i, j + 1)]] = wy;
            } else {
                lap[[row, row]] += wy; // Neumann fold at y = 2π
            }
        }
    }
    // Crank–Nicolson operators (I ∓ dt·θ·L/2)
    let half = 0.5 * dt * theta;
    let mut a_left = &lap * (-half);
    let mut a_right = &lap * half;
    for i in 0..n_unknown {
        a_left[[i, i]] += 1.0;
        a_right[[i, i]] += 1.0;
    }
    let lu = a_left
        .factorize()
        .map_err(|e| Error::Numerical(format!("Allen-Cahn system factorization failed: {e}")))?;

    let mut u = match u0 {
        Some(init) => {
            if init.dim() != (nx + 1, ny + 1) {
                return Err(Error::Shape(format!(
                    "initial condition must be {}x{}, got {:?}",
                    nx + 1,
                    ny + 1,
                    init.dim()
                )));
            }
            let mut interior = Array1::zeros(n_unknown);
            for i in 1..=iu {
                for j in 1..=ju {
                    interior[idx(i, j)] = init[[i, j]];
                }
            }
            interior
        }
        None => {
            let mut interior = Array1::zeros(n_unknown);
            for i in 1..=iu {
                for j in 1..=ju {
                    interior[idx(i, j)] = 0.05 * (i as f64 * hx).sin() * (j as f64 * hy).sin();
                }
            }
            interior
        }
    };

    let d = (nx + 1) * (ny + 1);
    let mut values = Array2::zeros((d, steps + 1));
    let assemble = |interior: &Array1<f64>, col: &mut ndarray::ArrayViewMut1<'_, f64>| {
        let full_idx = |i: usize, j: usize| i * (ny + 1) + j;
        col.fill(0.0);
        for i in 1..=iu {
            for j in 1..=ju {
                col[full_idx(i, j)] = interior[idx(i, j)];
            }
        }
        // Neumann edges copy the adjacent interior value; Dirichlet (i=0, j=0
        // edges, including shared corners) stays zero
        for i in 1..=iu {
            col[full_idx(i, ny)] = interior[idx(i, ju)];
        }
        for j in 1..=ju {
            col[full_idx(nx, j)] = interior[idx(iu, j)];
        }
        col[full_idx(nx, ny)] = interior[idx(iu, ju)];
    };
    assemble(&u, &mut values.column_mut(0));

    let reaction_term = |interior: &Array1<f64>, t: f64| {
        let mu = reaction.mu(t);
        interior.mapv(|v| mu * (v * v * v - v))
    };
    let solve = |rhs: &Array1<f64>| {
        lu.solve(rhs)
            .map_err(|e| Error::Numerical(format!("Allen-Cahn solve failed: {e}")))
    };
    for k in 1..=steps {
        let t_prev = (k - 1) as f64 * dt;
        let t_now = k as f64 * dt;
        let f_now = reaction_term(&u, t_prev);
        // predictor with explicit reaction, trapezoidal corrector
        let diffused = a_right.dot(&u);
        let u_pred = solve(&(&diffused + &(&f_now * dt)))?;
        let f_next = reaction_term(&u_pred, t_now);
        u = solve(&(diffused + (&f_now + &f_next) * (0.5 * dt)))?;
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > 1e3 {
            return Err(Error::Numerical(format!(
                "Allen-Cahn solution blew up at step {k} (norm {norm:.3e}); reduce dt"
            )));
        }
        assemble(&u, &mut values.column_mut(k));
    }
    Ok(GroundTruth {
        series: SnapshotSeries::new(values, dt, 0.0)?,
        eigenvalues: EigenTrack::None,
        description: format!("Allen-Cahn equation, {nx}x{ny} grid"),
    })
}

/// Add i.i.d. N(0, σ²) to every entry; deterministic per seed.
pub fn add_noise(truth: &GroundTruth, sigma: f64, seed: u64) -> Result<SnapshotSeries> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(truth.series.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = truth.series.values().clone();
    // column-major draw order so the noise field is layout-independent
    for k in 0..values.ncols() {
        for i in 0..values.nrows() {
            let z: f64 = rng.sample(StandardNormal);
            values[[i, k]] += sigma * z;
        }
    }
    SnapshotSeries::new(values, truth.series.dt(), truth.series.t0())
}

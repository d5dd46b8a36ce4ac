//! Truncated Q-Wiener noise on the periodic grid.
//!
//! The covariance eigenbasis is the real Fourier basis: `e_1` is the constant
//! mode `1/√(2L)`, then `e_{2m} = cos(mπx/L)/√L` and `e_{2m+1} = sin(mπx/L)/√L`.
//! Eigenvalues follow `q_k = amplitude·k^{−r}` and the scaled modes are
//! `f_k = √q_k·e_k`. The Itô correction field is `F_Q = Σ_k f_k²`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::RngStream;

/// Smallest accepted eigenvalue decay exponent.
pub const MIN_DECAY_EXPONENT: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct NoiseModel {
    grid: Arc<Grid>,
    amplitude: f64,
    decay_exponent: f64,
    eigenvalues: Vec<f64>,
    basis: Vec<Vec<f64>>,
    scaled_modes: Vec<Vec<f64>>,
    fq: Vec<f64>,
}

/// Spatial frequency index `m` of basis function `k` (1-based).
pub fn mode_frequency(k: usize) -> usize {
    k / 2
}

fn basis_function(grid: &Grid, k: usize) -> Vec<f64> {
    let l = grid.half_length();
    let m = mode_frequency(k) as f64;
    grid.points()
        .iter()
        .map(|&x| {
            if k == 1 {
                1.0 / (2.0 * l).sqrt()
            } else if k % 2 == 0 {
                (m * PI * x / l).cos() / l.sqrt()
            } else {
                (m * PI * x / l).sin() / l.sqrt()
            }
        })
        .collect()
}

/// Builds the truncated noise model with `mode_count` modes.
pub fn build_noise(
    grid: Arc<Grid>,
    mode_count: usize,
    amplitude: f64,
    decay_exponent: f64,
) -> Result<NoiseModel> {
    if !(decay_exponent >= MIN_DECAY_EXPONENT) {
        return Err(Error::InvalidNoise(format!(
            "decay exponent r = {decay_exponent} < {MIN_DECAY_EXPONENT}: the eigenvalues must decay \
             fast enough that sum_k q_k (1 + k^2)^2 stays finite (H^2 regularity of Q^(1/2))"
        )));
    }
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(Error::InvalidNoise(format!(
            "amplitude must be finite and nonnegative, got {amplitude}"
        )));
    }
    if mode_count > grid.len() / 4 {
        return Err(Error::InvalidNoise(format!(
            "mode count K = {mode_count} exceeds N/4 = {} (aliasing guard)",
            grid.len() / 4
        )));
    }

    let eigenvalues: Vec<f64> = (1..=mode_count)
        .map(|k| amplitude * (k as f64).powf(-decay_exponent))
        .collect();
    let basis: Vec<Vec<f64>> = (1..=mode_count).map(|k| basis_function(&grid, k)).collect();
    let scaled_modes: Vec<Vec<f64>> = basis
        .iter()
        .zip(&eigenvalues)
        .map(|(e, q)| {
            let s = q.sqrt();
            e.iter().map(|v| s * v).collect()
        })
        .collect();
    let mut fq = vec![0.0; grid.len()];
    for f in &scaled_modes {
        for (acc, v) in fq.iter_mut().zip(f) {
            *acc += v * v;
        }
    }

    Ok(NoiseModel {
        grid,
        amplitude,
        decay_exponent,
        eigenvalues,
        basis,
        scaled_modes,
        fq,
    })
}

impl NoiseModel {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn mode_count(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn decay_exponent(&self) -> f64 {
        self.decay_exponent
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Unscaled orthonormal basis functions `e_k`.
    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    /// `f_k = √q_k·e_k`.
    pub fn scaled_modes(&self) -> &[Vec<f64>] {
        &self.scaled_modes
    }

    /// `F_Q(x_j) = Σ_k f_k(x_j)²`.
    pub fn fq(&self) -> &[f64] {
        &self.fq
    }

    /// Spectral proxy for `‖Q^{1/2}‖²_{L₂^s} = Σ_k ‖f_k‖²_{H^s}`.
    pub fn hilbert_schmidt_norm_sq(&self, s: u32) -> f64 {
        let base = PI / self.grid.half_length();
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let k = base * mode_frequency(i + 1) as f64;
                q * (1.0 + k * k).powi(s as i32)
            })
            .sum()
    }

    /// Draws the `K` Brownian increments `√τ·ξ_k` for one step.
    pub fn sample_brownian(&self, tau: f64, rng: &mut RngStream) -> Vec<f64> {
        let scale = tau.sqrt();
        (0..self.mode_count())
            .map(|_| scale * rng.standard_normal())
            .collect()
    }

    /// Assembles `ΔW = Σ_k f_k·Δβ_k` from per-mode Brownian increments.
    pub fn increment_from_brownian(&self, brownian: &[f64], tau: f64) -> WienerIncrement {
        debug_assert_eq!(brownian.len(), self.mode_count());
        let mut values = vec![0.0; self.grid.len()];
        for (f, &b) in self.scaled_modes.iter().zip(brownian) {
            for (acc, v) in values.iter_mut().zip(f) {
                *acc += v * b;
            }
        }
        WienerIncrement { values, tau }
    }
}

/// Real field `W(t + τ) − W(t)` on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerIncrement {
    pub values: Vec<f64>,
    pub tau: f64,
}

impl WienerIncrement {
    pub fn zero(len: usize, tau: f64) -> Self {
        Self {
            values: vec![0.0; len],
            tau,
        }
    }

    /// Appends the next increment in time: fields add, steps add.
    pub fn accumulate(&mut self, next: &WienerIncrement) {
        for (a, b) in self.values.iter_mut().zip(&next.values) {
            *a += b;
        }
        self.tau += next.tau;
    }
}

/// Samples `ΔW = Σ_k f_k·√τ·ξ_k` with `ξ_k` drawn from `rng` in mode order.
pub fn sample_increment(model: &NoiseModel, tau: f64, rng: &mut RngStream) -> Result<WienerIncrement> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParams(format!("time step must be positive, got {tau}")));
    }
    let brownian = model.sample_brownian(tau, rng);
    Ok(model.increment_from_brownian(&brownian, tau))
}

/// Damping field `α(x)` together with its margin `a = min_x (α − ½F_Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DampingProfile {
    alpha: Vec<f64>,
    margin: f64,
}

/// Pairs `alpha` with the noise model's `F_Q` and computes the damping margin.
pub fn damping_margin(alpha: Vec<f64>, model: &NoiseModel) -> Result<DampingProfile> {
    if alpha.len() != model.grid().len() {
        return Err(Error::GridMismatch(format!(
            "damping table has {} values for a {}-point grid",
            alpha.len(),
            model.grid().len()
        )));
    }
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidParams("damping field must be finite".into()));
    }
    let margin = compute_margin(&alpha, model.fq());
    Ok(DampingProfile { alpha, margin })
}

fn compute_margin(alpha: &[f64], fq: &[f64]) -> f64 {
    alpha
        .iter()
        .zip(fq)
        .map(|(a, f)| a - 0.5 * f)
        .fold(f64::INFINITY, f64::min)
}

impl DampingProfile {
    /// `α = a₀ + ½F_Q`, so the margin is exactly `a₀`.
    pub fn constant_plus_half_fq(model: &NoiseModel, a0: f64) -> Result<Self> {
        damping_margin(model.fq().iter().map(|f| a0 + 0.5 * f).collect(), model)
    }

    /// `α = ½F_Q`: the charge-conserving case.
    pub fn conservative(model: &NoiseModel) -> Result<Self> {
        Self::constant_plus_half_fq(model, 0.0)
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn is_damped(&self) -> bool {
        self.margin > 0.0
    }

    /// Recomputes the margin from the stored field against `model`.
    pub fn recompute_margin(&self, model: &NoiseModel) -> f64 {
        compute_margin(&self.alpha, model.fq())
    }
}

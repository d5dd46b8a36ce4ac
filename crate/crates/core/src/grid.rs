//! Periodic spatial mesh on `[-L, L)` with spectral differential operators
//! and the discrete norms used throughout the crate.
//!
//! Spectral coefficients follow the unnormalized DFT convention
//! `û_j = Σ_n u_n e^{-2πi jn/N}`; wavenumbers are stored in transform order,
//! so index `i < N/2` carries `k = (π/L)·i` and index `i ≥ N/2` carries
//! `k = (π/L)·(i − N)`. The Nyquist index `N/2` therefore has the negative
//! wavenumber `−(π/L)(N/2)`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Highest Sobolev order accepted by [`sobolev_norm`] and [`sobolev_seminorm`].
pub const MAX_SOBOLEV_ORDER: u32 = 4;

/// Uniform periodic grid with cached transform plans.
pub struct Grid {
    half_length: f64,
    num_points: usize,
    spacing: f64,
    wavenumbers: Vec<f64>,
    points: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("half_length", &self.half_length)
            .field("num_points", &self.num_points)
            .field("spacing", &self.spacing)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.half_length == other.half_length && self.num_points == other.num_points
    }
}

/// Builds the grid for `[-L, L)` with `N` points.
pub fn make_grid(half_length: f64, num_points: usize) -> Result<Arc<Grid>> {
    if !(half_length.is_finite() && half_length > 0.0) {
        return Err(Error::InvalidGrid(format!(
            "half-length must be positive and finite, got {half_length}"
        )));
    }
    if num_points < 4 || num_points % 2 != 0 {
        return Err(Error::InvalidGrid(format!(
            "point count must be an even integer >= 4, got {num_points}"
        )));
    }
    let n = num_points;
    let spacing = 2.0 * half_length / n as f64;
    let base = std::f64::consts::PI / half_length;
    let wavenumbers = (0..n)
        .map(|i| {
            let j = if i < n / 2 { i as f64 } else { i as f64 - n as f64 };
            base * j
        })
        .collect();
    let points = (0..n).map(|j| -half_length + j as f64 * spacing).collect();

    let mut planner = FftPlanner::new();
    Ok(Arc::new(Grid {
        half_length,
        num_points: n,
        spacing,
        wavenumbers,
        points,
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }))
}

impl Grid {
    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn len(&self) -> usize {
        self.num_points
    }

    pub fn is_empty(&self) -> bool {
        self.num_points == 0
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Wavenumbers in transform order.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    /// Sample points `x_j = −L + j·h`.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// The wavenumber set sorted by mode index `−N/2, …, N/2 − 1`.
    pub fn sorted_wavenumbers(&self) -> Vec<f64> {
        let n = self.num_points;
        (0..n).map(|i| self.wavenumbers[(i + n / 2) % n]).collect()
    }

    /// Whether `k` is one of the grid's resolved (non-Nyquist) wavenumbers.
    pub fn resolves(&self, k: f64) -> bool {
        let j = k * self.half_length / std::f64::consts::PI;
        let nearest = j.round();
        (j - nearest).abs() < 1e-9 && nearest.abs() < (self.num_points / 2) as f64
    }

    /// Unnormalized forward transform.
    pub fn forward(&self, values: &[Complex64]) -> Vec<Complex64> {
        let mut buf = values.to_vec();
        self.forward.process(&mut buf);
        buf
    }

    /// Inverse transform including the `1/N` normalization.
    pub fn inverse(&self, spectrum: &[Complex64]) -> Vec<Complex64> {
        let mut buf = spectrum.to_vec();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.num_points as f64;
        buf.iter_mut().for_each(|z| *z *= scale);
        buf
    }

    /// Applies a real spectral multiplier `m(k)`.
    pub fn apply_multiplier(&self, values: &[Complex64], m: impl Fn(f64) -> f64) -> Vec<Complex64> {
        let mut spec = self.forward(values);
        for (z, &k) in spec.iter_mut().zip(&self.wavenumbers) {
            *z *= m(k);
        }
        self.inverse(&spec)
    }

    /// Quadrature weight that turns `Σ|û_j|²` into `h·Σ|u_j|²`.
    fn spectral_weight(&self) -> f64 {
        self.spacing / self.num_points as f64
    }
}

/// Complex grid function bound to its grid.
#[derive(Clone)]
pub struct StateVector {
    grid: Arc<Grid>,
    values: Vec<Complex64>,
}

impl fmt::Debug for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateVector")
            .field("grid", &self.grid)
            .field("values", &self.values)
            .finish()
    }
}

impl StateVector {
    pub fn new(grid: Arc<Grid>, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "state has {} values for a {}-point grid",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let values = vec![Complex64::new(0.0, 0.0); grid.len()];
        Self { grid, values }
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64) -> Complex64) -> Self {
        let values = grid.points().iter().map(|&x| f(x)).collect();
        Self { grid, values }
    }

    /// Plane wave `A·e^{ikx}` sampled on the grid.
    pub fn plane_wave(grid: Arc<Grid>, amplitude: Complex64, k: f64) -> Self {
        Self::from_fn(grid, |x| amplitude * Complex64::new(0.0, k * x).exp())
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn same_grid(&self, other: &StateVector) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    /// `self − other`, pointwise.
    pub fn difference(&self, other: &StateVector) -> StateVector {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        StateVector {
            grid: self.grid.clone(),
            values,
        }
    }

    pub(crate) fn with_values(&self, values: Vec<Complex64>) -> StateVector {
        debug_assert_eq!(values.len(), self.values.len());
        StateVector {
            grid: self.grid.clone(),
            values,
        }
    }
}

/// Spectral Laplacian: multiplier `−k²`.
pub fn laplacian(u: &StateVector) -> StateVector {
    u.with_values(u.grid.apply_multiplier(&u.values, |k| -k * k))
}

/// Discrete charge `h·Σ|u_j|²`.
pub fn charge(u: &StateVector) -> f64 {
    u.grid.spacing * u.values.iter().map(|z| z.norm_sqr()).sum::<f64>()
}

/// Real pairing `⟨u, v⟩ = h·Σ Re(conj(u_j)·v_j)`.
pub fn inner(u: &StateVector, v: &StateVector) -> f64 {
    u.grid.spacing
        * u.values
            .iter()
            .zip(&v.values)
            .map(|(a, b)| (a.conj() * b).re)
            .sum::<f64>()
}

/// `L²` distance `‖u − v‖`.
pub fn l2_distance(u: &StateVector, v: &StateVector) -> f64 {
    let sum: f64 = u
        .values
        .iter()
        .zip(&v.values)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    (u.grid.spacing * sum).sqrt()
}

fn check_order(s: u32) -> Result<()> {
    if s > MAX_SOBOLEV_ORDER {
        return Err(Error::UnsupportedOrder {
            order: s,
            supported: "0..=4",
        });
    }
    Ok(())
}

fn weighted_spectral_sum(u: &StateVector, weight: impl Fn(f64) -> f64) -> f64 {
    let spec = u.grid.forward(&u.values);
    let sum: f64 = spec
        .iter()
        .zip(u.grid.wavenumbers())
        .map(|(z, &k)| weight(k) * z.norm_sqr())
        .sum();
    u.grid.spectral_weight() * sum
}

/// `‖u‖_{H^s}` with multiplier `(1 + k²)^{s/2}`; `s = 0` gives `charge(u)^{1/2}`.
pub fn sobolev_norm(u: &StateVector, s: u32) -> Result<f64> {
    check_order(s)?;
    Ok(weighted_spectral_sum(u, |k| (1.0 + k * k).powi(s as i32)).sqrt())
}

/// Seminorm `‖∇^s u‖` with multiplier `|k|^s`.
pub fn sobolev_seminorm(u: &StateVector, s: u32) -> Result<f64> {
    check_order(s)?;
    Ok(weighted_spectral_sum(u, |k| (k * k).powi(s as i32)).sqrt())
}

/// `‖u‖_{L⁴}⁴` by uniform-grid quadrature.
pub fn l4_norm_pow4(u: &StateVector) -> f64 {
    u.grid.spacing
        * u.values
            .iter()
            .map(|z| {
                let m = z.norm_sqr();
                m * m
            })
            .sum::<f64>()
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn grid_definitions() {
        let g = make_grid(PI, 8).unwrap();
        assert_relative_eq!(g.spacing(), PI / 4.0);
        let ks: Vec<f64> = g.sorted_wavenumbers();
        let expected: Vec<f64> = (-4..4).map(|j| j as f64).collect();
        for (a, b) in ks.iter().zip(&expected) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }

        let g = make_grid(1.0, 4).unwrap();
        let ks = g.sorted_wavenumbers();
        for (a, b) in ks.iter().zip(&[-2.0 * PI, -PI, 0.0, PI]) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }

        let g = make_grid(16.0, 256).unwrap();
        assert_eq!(g.spacing(), 0.125);
        assert_relative_eq!(g.spacing() * g.len() as f64, 32.0);
        assert_eq!(g.points()[0], -16.0);
        assert_eq!(g.wavenumbers()[0], 0.0);
        assert_eq!(g.wavenumbers()[128], -PI / 16.0 * 128.0);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(make_grid(1.0, 7).is_err());
        assert!(make_grid(1.0, 2).is_err());
        assert!(make_grid(1.0, 0).is_err());
        assert!(make_grid(0.0, 8).is_err());
        assert!(make_grid(-1.0, 8).is_err());
        assert!(make_grid(f64::NAN, 8).is_err());
    }

    #[test]
    fn laplacian_of_constant_vanishes() {
        let g = make_grid(16.0, 64).unwrap();
        let u = StateVector::from_fn(g, |_| Complex64::new(1.5, -0.5));
        let lap = laplacian(&u);
        assert!(lap.values().iter().all(|z| z.norm() < 1e-13));
    }

    #[test]
    fn laplacian_is_diagonal_on_every_resolved_mode() {
        let g = make_grid(16.0, 64).unwrap();
        let base = PI / 16.0;
        for j in -31..32 {
            let k = base * j as f64;
            let u = StateVector::plane_wave(g.clone(), Complex64::new(0.7, 0.2), k);
            let lap = laplacian(&u);
            let scale = (k * k).max(1.0) * 0.7280109889280518;
            for (a, b) in lap.values().iter().zip(u.values()) {
                assert!((a - (-k * k) * b).norm() <= 1e-12 * scale, "mode {j}");
            }
        }
    }

    #[test]
    fn laplacian_matches_second_difference_at_second_order() {
        // Centered differences on smooth data: error shrinks by ~4 per halving of h.
        let mut errs = Vec::new();
        for &n in &[64usize, 128, 256] {
            let g = make_grid(16.0, n).unwrap();
            let u = smooth_random(&g, 11, 6);
            let lap = laplacian(&u);
            let h = g.spacing();
            let v = u.values();
            let err = (0..n)
                .map(|j| {
                    let fd = (v[(j + 1) % n] - 2.0 * v[j] + v[(j + n - 1) % n]) / (h * h);
                    (fd - lap.values()[j]).norm()
                })
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[0] < 1e-2);
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
    }

    #[test]
    fn charge_cases() {
        let g = make_grid(16.0, 64).unwrap();
        assert_eq!(charge(&StateVector::zeros(g.clone())), 0.0);
        let c = Complex64::new(0.3, -0.4);
        let u = StateVector::from_fn(g.clone(), |_| c);
        assert_relative_eq!(charge(&u), 32.0 * c.norm_sqr(), max_relative = 1e-14);

        let u = rough_random(&g, 3);
        let mut naive = 0.0;
        for z in u.values() {
            naive += z.re * z.re + z.im * z.im;
        }
        naive *= g.spacing();
        assert_relative_eq!(charge(&u), naive, max_relative = 1e-14);
    }

    #[test]
    fn parseval_holds() {
        let g = make_grid(8.0, 128).unwrap();
        let u = rough_random(&g, 5);
        let spec = naive_dft(u.values(), -1.0);
        let spectral: f64 = spec.iter().map(|z| z.norm_sqr()).sum::<f64>() * g.spacing() / 128.0;
        assert_relative_eq!(charge(&u), spectral, max_relative = 1e-12);
        assert_relative_eq!(
            sobolev_norm(&u, 0).unwrap(),
            charge(&u).sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn sobolev_single_mode() {
        let g = make_grid(16.0, 128).unwrap();
        let k = 5.0 * PI / 16.0;
        let a = Complex64::new(1.2, -0.7);
        let u = StateVector::plane_wave(g, a, k);
        for s in 0..=4u32 {
            let expected = a.norm() * 32f64.sqrt() * (1.0 + k * k).powf(s as f64 / 2.0);
            assert_relative_eq!(sobolev_norm(&u, s).unwrap(), expected, max_relative = 1e-12);
            let semi = a.norm() * 32f64.sqrt() * k.abs().powi(s as i32);
            assert_relative_eq!(sobolev_seminorm(&u, s).unwrap(), semi, max_relative = 1e-12);
        }
    }

    #[test]
    fn sobolev_zero_and_range() {
        let g = make_grid(16.0, 32).unwrap();
        let z = StateVector::zeros(g.clone());
        for s in 0..=4 {
            assert_eq!(sobolev_norm(&z, s).unwrap(), 0.0);
        }
        assert!(matches!(
            sobolev_norm(&z, 5),
            Err(Error::UnsupportedOrder { order: 5, .. })
        ));
        assert!(sobolev_seminorm(&z, 7).is_err());
    }

    #[test]
    fn l4_cases() {
        let g = make_grid(16.0, 64).unwrap();
        assert_eq!(l4_norm_pow4(&StateVector::zeros(g.clone())), 0.0);
        let c = Complex64::new(0.6, 0.8);
        let u = StateVector::from_fn(g.clone(), |_| c);
        assert_relative_eq!(l4_norm_pow4(&u), 32.0 * c.norm().powi(4), max_relative = 1e-14);
        let u = rough_random(&g, 9);
        let naive = g.spacing()
            * u.values()
                .iter()
                .map(|z| (z.re * z.re + z.im * z.im).powi(2))
                .sum::<f64>();
        assert_relative_eq!(l4_norm_pow4(&u), naive, max_relative = 1e-14);
    }

    #[test]
    fn state_length_checked() {
        let g = make_grid(1.0, 8).unwrap();
        assert!(StateVector::new(g, vec![Complex64::new(0.0, 0.0); 7]).is_err());
    }

    #[test]
    fn resolves_detects_grid_wavenumbers() {
        let g = make_grid(16.0, 64).unwrap();
        assert!(g.resolves(3.0 * PI / 16.0));
        assert!(g.resolves(-31.0 * PI / 16.0));
        assert!(!g.resolves(32.0 * PI / 16.0));
        assert!(!g.resolves(0.5));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn i_laplacian_is_skew(seed in any::<u64>(), log_n in 3u32..8) {
                let g = make_grid(16.0, 1 << log_n).unwrap();
                let u = rough_random(&g, seed);
                let lap = laplacian(&u);
                let i_lap = u.with_values(lap.values().iter().map(|z| z * Complex64::i()).collect());
                let pairing = inner(&u, &i_lap);
                prop_assert!(pairing.abs() <= 1e-10 * charge(&u), "pairing {pairing}");
            }

            #[test]
            fn seminorm_bounded_by_norm(seed in any::<u64>(), s in 0u32..5) {
                let g = make_grid(4.0, 32).unwrap();
                let u = rough_random(&g, seed);
                prop_assert!(sobolev_seminorm(&u, s).unwrap() <= sobolev_norm(&u, s).unwrap() * (1.0 + 1e-12));
            }
        }
    }
}

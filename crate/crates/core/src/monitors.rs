//! Functionals tracked along trajectories and their aggregate diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, StateVector};
use crate::stepper::Nonlinearity;

/// Column names of `monitors.csv`, in order.
pub const MONITOR_COLUMNS: [&str; 6] = ["t", "charge", "energy_H", "h1_norm", "h2_norm", "exp_arg"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub t: f64,
    pub charge: f64,
    #[serde(rename = "energy_H")]
    pub energy_h: f64,
    pub h1_norm: f64,
    pub h2_norm: f64,
    /// `e^{−βt}·H(u(t))`.
    pub exp_arg: f64,
}

impl MonitorRecord {
    pub fn fields(&self) -> [f64; 6] {
        [self.t, self.charge, self.energy_h, self.h1_norm, self.h2_norm, self.exp_arg]
    }
}

/// `H(u) = ½‖∇u‖² − (λ/4)‖u‖_{L⁴}⁴`.
pub fn energy(u: &StateVector, lambda: Nonlinearity) -> f64 {
    let grad = grid::sobolev_seminorm(u, 1).expect("order 1 is supported");
    0.5 * grad * grad - 0.25 * lambda.lambda() * grid::l4_norm_pow4(u)
}

/// `f(u) = ‖∇^s u‖² − λ⟨(−Δ)^{s−1}u, |u|²u⟩` for `s ∈ {2, 3, 4}`.
pub fn lyapunov_f(u: &StateVector, lambda: Nonlinearity, s: u32) -> Result<f64> {
    if !(2..=4).contains(&s) {
        return Err(Error::UnsupportedOrder {
            order: s,
            supported: "2..=4",
        });
    }
    let semi = grid::sobolev_seminorm(u, s)?;
    let power = (s - 1) as i32;
    let lifted = u.grid().apply_multiplier(u.values(), |k| (k * k).powi(power));
    let h = u.grid().spacing();
    let pairing: f64 = lifted
        .iter()
        .zip(u.values())
        .map(|(a, z)| (a.conj() * z * z.norm_sqr()).re)
        .sum::<f64>()
        * h;
    Ok(semi * semi - lambda.lambda() * pairing)
}

/// Evaluates every monitored functional of `u` at time `t`.
pub fn record(t: f64, u: &StateVector, lambda: Nonlinearity, beta: f64) -> Result<MonitorRecord> {
    let energy_h = energy(u, lambda);
    let rec = MonitorRecord {
        t,
        charge: grid::charge(u),
        energy_h,
        h1_norm: grid::sobolev_norm(u, 1)?,
        h2_norm: grid::sobolev_norm(u, 2)?,
        exp_arg: (-beta * t).exp() * energy_h,
    };
    if rec.fields().iter().all(|v| v.is_finite()) {
        Ok(rec)
    } else {
        Err(Error::NumericalFailure(format!("non-finite monitor at t = {t}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayVerdict {
    pub passed: bool,
    /// `max_m charge(u_m) / (e^{−2a t_m}·charge(u₀))`.
    pub worst_ratio: f64,
    pub worst_index: usize,
}

/// Default slack for `decay_check`: the fixed-point drift budget over `steps` steps.
pub fn default_decay_tolerance(steps: usize) -> f64 {
    steps as f64 * 1e-8
}

/// Checks `charge(u_m) ≤ e^{−2a t_m}·charge(u₀)·(1 + tolerance)` for every record.
pub fn decay_check(records: &[MonitorRecord], a: f64, tolerance: f64) -> Result<DecayVerdict> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidExperiment("decay check needs at least one record".into()))?;
    if first.t != 0.0 {
        return Err(Error::InvalidExperiment(format!(
            "first record must be at t = 0, got {}",
            first.t
        )));
    }
    let c0 = first.charge;
    let mut worst_ratio = f64::NEG_INFINITY;
    let mut worst_index = 0;
    for (i, r) in records.iter().enumerate() {
        let envelope = (-2.0 * a * r.t).exp() * c0;
        let ratio = if envelope > 0.0 {
            r.charge / envelope
        } else if r.charge == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst_index = i;
        }
    }
    Ok(DecayVerdict {
        passed: worst_ratio <= 1.0 + tolerance,
        worst_ratio,
        worst_index,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpMomentPoint {
    pub t: f64,
    /// Sample mean of `exp(e^{−βt}·H(u(t)))`.
    pub estimate: f64,
    /// Running maximum of `estimate` over recorded times up to `t`.
    pub running_max: f64,
}

fn log_mean_exp(args: &[f64]) -> f64 {
    let max = args.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = args.iter().map(|a| (a - max).exp()).sum();
    max + sum.ln() - (args.len() as f64).ln()
}

/// Empirical `E[exp(e^{−βt}·H(u(t)))]` over samples sharing one recording schedule.
///
/// Averages are taken in log-sum-exp form; an estimate that exceeds the `f64`
/// range comes back as `+∞` rather than wrapping or saturating.
pub fn exp_moment_estimate(samples: &[Vec<MonitorRecord>], beta: f64) -> Result<Vec<ExpMomentPoint>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidExperiment(format!("beta must be positive, got {beta}")));
    }
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidExperiment("no samples".into()))?;
    for (i, s) in samples.iter().enumerate() {
        if s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.t != b.t) {
            return Err(Error::InvalidExperiment(format!(
                "sample {i} does not share the recording schedule of sample 0"
            )));
        }
    }
    let mut running_max = f64::NEG_INFINITY;
    let mut out = Vec::with_capacity(first.len());
    let mut args = vec![0.0; samples.len()];
    for (idx, rec) in first.iter().enumerate() {
        let damp = (-beta * rec.t).exp();
        for (a, s) in args.iter_mut().zip(samples) {
            *a = damp * s[idx].energy_h;
        }
        let estimate = log_mean_exp(&args).exp();
        running_max = running_max.max(estimate);
        out.push(ExpMomentPoint {
            t: rec.t,
            estimate,
            running_max,
        });
    }
    Ok(out)
}

/// Running maximum of the moment estimate over the first and last quarter of
/// the recorded time span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentGrowth {
    pub first_quarter_max: f64,
    pub last_quarter_max: f64,
}

impl MomentGrowth {
    /// Whether the last-quarter value stays within `(1 + tol)` of the first quarter's.
    pub fn bounded(&self, tol: f64) -> bool {
        self.first_quarter_max.is_finite()
            && self.last_quarter_max.is_finite()
            && self.last_quarter_max <= (1.0 + tol) * self.first_quarter_max
    }
}

pub fn moment_growth(points: &[ExpMomentPoint]) -> Result<MomentGrowth> {
    let (first, last) = match (points.first(), points.last()) {
        (Some(f), Some(l)) if l.t > f.t => (f, l),
        _ => return Err(Error::InvalidExperiment("moment growth needs a positive time span".into())),
    };
    let cut = first.t + 0.25 * (last.t - first.t);
    let first_quarter_max = points
        .iter()
        .take_while(|p| p.t <= cut * (1.0 + 1e-12))
        .map(|p| p.running_max)
        .last()
        .expect("first point is in the first quarter");
    Ok(MomentGrowth {
        first_quarter_max,
        last_quarter_max: last.running_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::testing::{naive_dft, smooth_random};
    use crate::grid::{make_grid, Grid};
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn g() -> Arc<Grid> {
        make_grid(16.0, 128).unwrap()
    }

    /// Spectral derivative by direct DFT: multiply mode j by (ik_j)^order.
    fn naive_derivative(u: &StateVector, order: u32) -> Vec<Complex64> {
        let n = u.values().len();
        let spec = naive_dft(u.values(), -1.0);
        let ks = u.grid().wavenumbers();
        let scaled: Vec<Complex64> = spec
            .iter()
            .zip(ks)
            .map(|(z, &k)| z * Complex64::new(0.0, k).powu(order))
            .collect();
        naive_dft(&scaled, 1.0).into_iter().map(|z| z / n as f64).collect()
    }

    fn quad(u: &StateVector, f: impl Fn(usize) -> f64) -> f64 {
        (0..u.values().len()).map(f).sum::<f64>() * u.grid().spacing()
    }

    #[test]
    fn energy_cases() {
        let grid = g();
        assert_eq!(energy(&StateVector::zeros(grid.clone()), Nonlinearity::Focusing), 0.0);
        let k = 3.0 * PI / 16.0;
        let a = Complex64::new(0.8, 0.3);
        let u = StateVector::plane_wave(grid, a, k);
        for lambda in [Nonlinearity::Focusing, Nonlinearity::Defocusing, Nonlinearity::Linear] {
            let l = lambda.lambda();
            let expected = 0.5 * k * k * a.norm_sqr() * 32.0 - l / 4.0 * a.norm_sqr().powi(2) * 32.0;
            assert_relative_eq!(energy(&u, lambda), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn energy_matches_direct_quadrature() {
        let grid = g();
        let u = smooth_random(&grid, 4, 10);
        let du = naive_derivative(&u, 1);
        for lambda in [Nonlinearity::Focusing, Nonlinearity::Defocusing] {
            let l = lambda.lambda();
            let direct = quad(&u, |j| {
                0.5 * du[j].norm_sqr() - l / 4.0 * u.values()[j].norm_sqr().powi(2)
            });
            assert_relative_eq!(energy(&u, lambda), direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn lyapunov_cases() {
        let grid = g();
        let z = StateVector::zeros(grid.clone());
        for s in 2..=4 {
            assert_eq!(lyapunov_f(&z, Nonlinearity::Focusing, s).unwrap(), 0.0);
        }
        assert!(lyapunov_f(&z, Nonlinearity::Focusing, 1).is_err());
        assert!(lyapunov_f(&z, Nonlinearity::Focusing, 5).is_err());

        let k = 2.0 * PI / 16.0;
        let a = Complex64::new(0.6, -0.2);
        let u = StateVector::plane_wave(grid, a, k);
        let m2 = a.norm_sqr();
        for lambda in [Nonlinearity::Focusing, Nonlinearity::Defocusing] {
            let l = lambda.lambda();
            let expected = k.powi(4) * m2 * 32.0 - l * k * k * m2 * m2 * 32.0;
            assert_relative_eq!(lyapunov_f(&u, lambda, 2).unwrap(), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn lyapunov_matches_direct_quadrature() {
        let grid = g();
        let u = smooth_random(&grid, 21, 10);
        for s in 2..=4u32 {
            let ds = naive_derivative(&u, s);
            // (−Δ)^{s−1} = (−1)^{s−1}·∂^{2(s−1)}
            let sign = if (s - 1) % 2 == 0 { 1.0 } else { -1.0 };
            let lifted: Vec<Complex64> = naive_derivative(&u, 2 * (s - 1)).into_iter().map(|z| z * sign).collect();
            for lambda in [Nonlinearity::Focusing, Nonlinearity::Defocusing] {
                let l = lambda.lambda();
                let direct = quad(&u, |j| {
                    let z = u.values()[j];
                    ds[j].norm_sqr() - l * (lifted[j].conj() * z * z.norm_sqr()).re
                });
                let got = lyapunov_f(&u, lambda, s).unwrap();
                assert_relative_eq!(got, direct, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn defocusing_energy_nonnegative() {
        let grid = g();
        for seed in 0..20 {
            let u = smooth_random(&grid, seed, 12);
            assert!(energy(&u, Nonlinearity::Defocusing) >= 0.0);
        }
    }

    fn rec(t: f64, charge: f64, energy_h: f64) -> MonitorRecord {
        MonitorRecord {
            t,
            charge,
            energy_h,
            h1_norm: 0.0,
            h2_norm: 0.0,
            exp_arg: energy_h,
        }
    }

    #[test]
    fn decay_check_cases() {
        let flat: Vec<_> = (0..5).map(|i| rec(i as f64 * 0.25, 2.0, 0.0)).collect();
        let v = decay_check(&flat, 0.0, 1e-8).unwrap();
        assert!(v.passed);
        assert_relative_eq!(v.worst_ratio, 1.0);

        let mut decaying: Vec<_> = (0..9)
            .map(|i| {
                let t = i as f64 * 0.5;
                rec(t, 3.0 * (-2.0 * 0.5 * t).exp() * 0.999, 0.0)
            })
            .collect();
        decaying[0].charge = 3.0;
        assert!(decay_check(&decaying, 0.5, 1e-8).unwrap().passed);

        decaying[8].charge *= 1.5;
        let v = decay_check(&decaying, 0.5, 1e-8).unwrap();
        assert!(!v.passed);
        assert_eq!(v.worst_index, 8);

        assert!(decay_check(&[], 0.5, 1e-8).is_err());
        assert!(decay_check(&[rec(1.0, 1.0, 0.0)], 0.5, 1e-8).is_err());
    }

    #[test]
    fn exp_moment_cases() {
        let zero: Vec<Vec<MonitorRecord>> = (0..4)
            .map(|_| (0..5).map(|i| rec(i as f64, 0.0, 0.0)).collect())
            .collect();
        let est = exp_moment_estimate(&zero, 1.0).unwrap();
        assert!(est.iter().all(|p| p.estimate == 1.0 && p.running_max == 1.0));

        let single = vec![vec![rec(0.0, 1.0, 0.7), rec(0.5, 1.0, 0.4), rec(1.0, 1.0, 0.9)]];
        let est = exp_moment_estimate(&single, 2.0).unwrap();
        for (p, r) in est.iter().zip(&single[0]) {
            assert_relative_eq!(p.estimate, ((-2.0 * r.t).exp() * r.energy_h).exp(), max_relative = 1e-14);
        }
        assert_relative_eq!(est[2].running_max, est[0].estimate.max(est[2].estimate));

        let huge = vec![vec![rec(0.0, 1.0, 1e4)], vec![rec(0.0, 1.0, 0.0)]];
        let est = exp_moment_estimate(&huge, 1.0).unwrap();
        assert_eq!(est[0].estimate, f64::INFINITY);

        assert!(exp_moment_estimate(&zero, 0.0).is_err());
        let ragged = vec![vec![rec(0.0, 1.0, 0.0)], vec![rec(0.1, 1.0, 0.0)]];
        assert!(exp_moment_estimate(&ragged, 1.0).is_err());
    }

    #[test]
    fn moment_growth_windows() {
        let pts: Vec<ExpMomentPoint> = (0..=8)
            .map(|i| {
                let v = [1.0, 3.0, 2.0, 5.0, 4.0, 4.0, 4.0, 4.0, 5.2][i];
                ExpMomentPoint { t: i as f64 * 0.5, estimate: v, running_max: 0.0 }
            })
            .scan(f64::NEG_INFINITY, |m, mut p| {
                *m = f64::max(*m, p.estimate);
                p.running_max = *m;
                Some(p)
            })
            .collect();
        let g = moment_growth(&pts).unwrap();
        assert_eq!(g.first_quarter_max, 2.0f64.max(3.0));
        assert_eq!(g.last_quarter_max, 5.2);
        assert!(!g.bounded(0.1));
        assert!(g.bounded(0.8));
        assert!(moment_growth(&pts[..1]).is_err());
    }
}

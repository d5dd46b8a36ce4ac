//! Splitting Crank–Nicolson integrator.
//!
//! One step is `u_{m+1} = Φ^S(Φ^D(u_m))`:
//!
//! * `Φ^D` is the implicit midpoint (Crank–Nicolson) discretization of
//!   `du = (iΔu + iλ|u|²u) dt`,
//!   `v = u + iτΔ(u+v)/2 + iλτ·(|u|²+|v|²)/2·(u+v)/2`,
//!   solved by fixed-point iteration with the density frozen at the current
//!   iterate and the linear part inverted in Fourier space.
//! * `Φ^S` is the exact flow of `du = −αu dt + iu dW`:
//!   `u ↦ exp((−α + ½F_Q)τ + iΔW)·u`, pointwise.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, StateVector};
use crate::monitors::{self, MonitorRecord};
use crate::noise::{sample_increment, DampingProfile, NoiseModel, WienerIncrement};
use crate::rng::RngStream;

pub const DEFAULT_FP_TOL: f64 = 1e-12;
pub const DEFAULT_FP_MAX_ITERS: usize = 50;

/// Sign of the cubic term: `λ = +1` focusing, `−1` defocusing, `0` linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Nonlinearity {
    Focusing,
    Linear,
    Defocusing,
}

impl Nonlinearity {
    pub fn lambda(self) -> f64 {
        match self {
            Nonlinearity::Focusing => 1.0,
            Nonlinearity::Linear => 0.0,
            Nonlinearity::Defocusing => -1.0,
        }
    }
}

impl TryFrom<i64> for Nonlinearity {
    type Error = Error;

    fn try_from(value: i64) -> Result<Self> {
        match value {
            1 => Ok(Nonlinearity::Focusing),
            0 => Ok(Nonlinearity::Linear),
            -1 => Ok(Nonlinearity::Defocusing),
            other => Err(Error::InvalidParams(format!(
                "lambda must be -1, 0 or 1, got {other}"
            ))),
        }
    }
}

impl From<Nonlinearity> for i64 {
    fn from(n: Nonlinearity) -> i64 {
        n.lambda() as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeParams {
    pub tau: f64,
    pub steps: usize,
    pub nonlinearity: Nonlinearity,
    /// Relative fixed-point tolerance: iteration stops once
    /// `‖v_{n+1} − v_n‖ ≤ fp_tol·(1 + ‖u‖)`.
    pub fp_tol: f64,
    pub fp_max_iters: usize,
    pub master_seed: u64,
}

impl SchemeParams {
    pub fn new(tau: f64, steps: usize, nonlinearity: Nonlinearity) -> Result<Self> {
        let p = Self {
            tau,
            steps,
            nonlinearity,
            fp_tol: DEFAULT_FP_TOL,
            fp_max_iters: DEFAULT_FP_MAX_ITERS,
            master_seed: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParams(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.fp_tol > 0.0) {
            return Err(Error::InvalidParams(format!(
                "fp_tol must be positive, got {}",
                self.fp_tol
            )));
        }
        if self.fp_max_iters == 0 {
            return Err(Error::InvalidParams("fp_max_iters must be at least 1".into()));
        }
        Ok(())
    }

    pub fn final_time(&self) -> f64 {
        self.steps as f64 * self.tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub fp_iterations: usize,
    /// Last fixed-point increment, relative to `1 + ‖u‖`.
    pub fp_residual: f64,
    /// `charge(Φ^D u) − charge(u)`.
    pub charge_drift: f64,
}

fn check_finite(values: &[Complex64], what: &str) -> Result<()> {
    if values.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure(format!("non-finite value in {what}")))
    }
}

/// Deterministic Crank–Nicolson substep.
pub fn cn_substep(u: &StateVector, params: &SchemeParams) -> Result<(StateVector, StepReport)> {
    check_finite(u.values(), "cn_substep input")?;
    let grid = u.grid();
    let tau = params.tau;
    let lambda = params.nonlinearity.lambda();
    let h = grid.spacing();

    // (1 − iτk²/2)/(1 + iτk²/2) for the explicit half, 1/(1 + iτk²/2) for sources.
    let inv_den: Vec<Complex64> = grid
        .wavenumbers()
        .iter()
        .map(|&k| Complex64::new(1.0, 0.5 * tau * k * k).inv())
        .collect();
    let u_hat = grid.forward(u.values());
    let free_hat: Vec<Complex64> = u_hat
        .iter()
        .zip(grid.wavenumbers())
        .zip(&inv_den)
        .map(|((z, &k), d)| z * Complex64::new(1.0, -0.5 * tau * k * k) * d)
        .collect();

    let charge_in = grid::charge(u);
    let tolerance = params.fp_tol * (1.0 + charge_in.sqrt());
    let mut v = grid.inverse(&free_hat);
    check_finite(&v, "cn_substep")?;

    let mut report = StepReport::default();
    if lambda == 0.0 {
        let out = u.with_values(v);
        report.charge_drift = grid::charge(&out) - charge_in;
        return Ok((out, report));
    }

    let coupling = Complex64::new(0.0, lambda * tau);
    let mut residual = f64::INFINITY;
    for iter in 1..=params.fp_max_iters {
        let source: Vec<Complex64> = u
            .values()
            .iter()
            .zip(&v)
            .map(|(a, b)| 0.5 * (a.norm_sqr() + b.norm_sqr()) * 0.5 * (a + b))
            .collect();
        let source_hat = grid.forward(&source);
        let next_hat: Vec<Complex64> = free_hat
            .iter()
            .zip(&source_hat)
            .zip(&inv_den)
            .map(|((f, s), d)| f + coupling * s * d)
            .collect();
        let next = grid.inverse(&next_hat);
        let diff: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).norm_sqr()).sum();
        let step = (h * diff).sqrt();
        if !step.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite fixed-point iterate at iteration {iter}"
            )));
        }
        v = next;
        residual = step;
        report.fp_iterations = iter;
        if step <= tolerance {
            break;
        }
    }
    report.fp_residual = residual / (1.0 + charge_in.sqrt());
    if residual > tolerance {
        return Err(Error::FixedPointDivergence {
            iterations: report.fp_iterations,
            residual: report.fp_residual,
            tolerance: params.fp_tol,
        });
    }
    let out = u.with_values(v);
    report.charge_drift = grid::charge(&out) - charge_in;
    Ok((out, report))
}

/// Exact stochastic/damping substep `u ↦ exp((−α + ½F_Q)τ + iΔW)·u`.
pub fn ou_substep(
    u_d: &StateVector,
    dw: &WienerIncrement,
    damping: &DampingProfile,
    model: &NoiseModel,
    tau: f64,
) -> StateVector {
    let values = u_d
        .values()
        .iter()
        .zip(&dw.values)
        .zip(damping.alpha().iter().zip(model.fq()))
        .map(|((z, &w), (&alpha, &fq))| z * Complex64::new((-alpha + 0.5 * fq) * tau, w).exp())
        .collect();
    u_d.with_values(values)
}

/// One full step `Φ^S ∘ Φ^D`.
pub fn split_step(
    u: &StateVector,
    dw: &WienerIncrement,
    damping: &DampingProfile,
    model: &NoiseModel,
    params: &SchemeParams,
) -> Result<(StateVector, StepReport)> {
    let (u_d, report) = cn_substep(u, params)?;
    Ok((ou_substep(&u_d, dw, damping, model, params.tau), report))
}

/// When to record monitors along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordSchedule {
    pub every: usize,
    pub beta: f64,
}

impl RecordSchedule {
    pub fn new(every: usize, beta: f64) -> Self {
        Self {
            every: every.max(1),
            beta,
        }
    }

    /// Step indices at which `run_trajectory` records, for `steps` steps.
    pub fn indices(&self, steps: usize) -> impl Iterator<Item = usize> {
        let every = self.every;
        (0..=steps).filter(move |&m| m % every == 0 || m == steps)
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub final_state: StateVector,
    pub records: Vec<MonitorRecord>,
    pub max_fp_iterations: usize,
}

fn check_compatible(u0: &StateVector, damping: &DampingProfile, model: &NoiseModel) -> Result<()> {
    if **u0.grid() != **model.grid() || damping.alpha().len() != u0.values().len() {
        return Err(Error::GridMismatch(
            "initial state, noise model and damping profile must share one grid".into(),
        ));
    }
    Ok(())
}

/// Runs `params.steps` split steps from `u0`, sampling increments from `rng`.
pub fn run_trajectory(
    u0: &StateVector,
    params: &SchemeParams,
    damping: &DampingProfile,
    model: &NoiseModel,
    rng: &mut RngStream,
    schedule: &RecordSchedule,
) -> Result<Trajectory> {
    params.validate()?;
    check_compatible(u0, damping, model)?;
    let lambda = params.nonlinearity;
    let mut records = vec![monitors::record(0.0, u0, lambda, schedule.beta)?];
    let mut u = u0.clone();
    let mut max_iters = 0;
    for m in 0..params.steps {
        let dw = sample_increment(model, params.tau, rng)?;
        let (next, report) = split_step(&u, &dw, damping, model, params).map_err(|e| Error::Step {
            step: m,
            source: Box::new(e),
        })?;
        max_iters = max_iters.max(report.fp_iterations);
        u = next;
        let done = m + 1;
        if done % schedule.every == 0 || done == params.steps {
            let t = done as f64 * params.tau;
            records.push(monitors::record(t, &u, lambda, schedule.beta)?);
        }
    }
    Ok(Trajectory {
        final_state: u,
        records,
        max_fp_iterations: max_iters,
    })
}

/// Exact solution of the linear commuting case (`λ = 0`, `α ≡ a₀`, one
/// constant noise mode `f₁ ≡ c` with Brownian value `B_T`):
/// free Schrödinger flow `e^{iΔT}` followed by `exp((−a₀ + c²/2)T + i·c·B_T)`.
pub fn exact_linear_flow(u0: &StateVector, t: f64, a0: f64, c: f64, brownian_value: f64) -> StateVector {
    let grid = u0.grid();
    let mut spec = grid.forward(u0.values());
    for (z, &k) in spec.iter_mut().zip(grid.wavenumbers()) {
        *z *= Complex64::new(0.0, -k * k * t).exp();
    }
    let factor = Complex64::new((-a0 + 0.5 * c * c) * t, c * brownian_value).exp();
    let values = grid.inverse(&spec).into_iter().map(|z| z * factor).collect();
    u0.with_values(values)
}

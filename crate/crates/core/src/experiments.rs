//! Monte Carlo convergence studies.
//!
//! Every sample owns one random stream. Its Brownian path is drawn at the
//! reference resolution `τ_ref`; a coarse path at `τ = r·τ_ref` is driven by
//! the sums of `r` consecutive fine increments, so reference and coarse
//! solutions live on the same probability space. Samples run in parallel on
//! the current rayon pool and are reduced in sample order, which makes every
//! result independent of the worker count.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, StateVector};
use crate::noise::{DampingProfile, NoiseModel, WienerIncrement};
use crate::rng::{RngStream, StreamRole};
use crate::stepper::{
    exact_linear_flow, run_trajectory, split_step, Nonlinearity, RecordSchedule, SchemeParams,
    Trajectory,
};

/// Minimum Monte Carlo sample count accepted by the convergence studies.
pub const MIN_STUDY_SAMPLES: usize = 50;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959963984540054;

/// A fully specified initial-value problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub noise: NoiseModel,
    pub damping: DampingProfile,
    pub nonlinearity: Nonlinearity,
    pub fp_tol: f64,
    pub fp_max_iters: usize,
    pub initial: StateVector,
    pub final_time: f64,
    pub master_seed: u64,
}

/// Exact integer quotient `numerator / denominator`, or `None`.
pub fn exact_ratio(numerator: f64, denominator: f64) -> Option<usize> {
    if !(numerator >= 0.0 && denominator > 0.0) {
        return None;
    }
    let r = numerator / denominator;
    let n = r.round();
    if (r - n).abs() <= 1e-9 * n.max(1.0) {
        Some(n as usize)
    } else {
        None
    }
}

impl Problem {
    /// Scheme parameters for step `tau` over `horizon`.
    pub fn params_for(&self, tau: f64, horizon: f64) -> Result<SchemeParams> {
        let steps = exact_ratio(horizon, tau).ok_or_else(|| {
            Error::InvalidExperiment(format!("horizon {horizon} is not a multiple of tau {tau}"))
        })?;
        let p = SchemeParams {
            tau,
            steps,
            nonlinearity: self.nonlinearity,
            fp_tol: self.fp_tol,
            fp_max_iters: self.fp_max_iters,
            master_seed: self.master_seed,
        };
        p.validate()?;
        Ok(p)
    }

    fn is_zero_initial(&self) -> bool {
        self.initial.values().iter().all(|z| z.norm_sqr() == 0.0)
    }
}

/// Parameters of the exactly solvable linear configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommutingOracle {
    pub a0: f64,
    pub c: f64,
}

impl CommutingOracle {
    /// Accepts only `λ = 0`, a single constant noise mode and constant `α`.
    pub fn from_problem(problem: &Problem) -> Result<Self> {
        if problem.nonlinearity != Nonlinearity::Linear {
            return Err(Error::InvalidExperiment(
                "exact reference requires lambda = 0".into(),
            ));
        }
        if problem.noise.mode_count() > 1 {
            return Err(Error::InvalidExperiment(
                "exact reference requires at most one (constant) noise mode".into(),
            ));
        }
        let alpha = problem.damping.alpha();
        let a0 = alpha[0];
        if alpha.iter().any(|&a| (a - a0).abs() > 1e-14 * a0.abs().max(1.0)) {
            return Err(Error::InvalidExperiment(
                "exact reference requires a spatially constant damping".into(),
            ));
        }
        let c = problem
            .noise
            .scaled_modes()
            .first()
            .map_or(0.0, |f| f[0]);
        Ok(Self { a0, c })
    }
}

/// What the coarse paths are compared against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    /// The same scheme at step `tau`.
    Fine { tau: f64 },
    /// The closed-form commuting solution; Brownian paths are drawn at `tau`.
    Exact { tau: f64 },
}

impl Reference {
    pub fn tau(&self) -> f64 {
        match *self {
            Reference::Fine { tau } | Reference::Exact { tau } => tau,
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Reference::Fine { .. } => "fine",
            Reference::Exact { .. } => "exact",
        }
    }
}

/// Sums consecutive groups of `ratio` fine increments into coarse ones.
pub fn coupled_increments(fine: &[WienerIncrement], ratio: usize) -> Result<Vec<WienerIncrement>> {
    if ratio == 0 || fine.len() % ratio != 0 {
        return Err(Error::LengthMismatch(format!(
            "{} fine increments cannot be grouped by {ratio}",
            fine.len()
        )));
    }
    Ok(fine
        .chunks(ratio)
        .map(|chunk| {
            let mut acc = WienerIncrement::zero(chunk[0].values.len(), 0.0);
            for w in chunk {
                acc.accumulate(w);
            }
            acc
        })
        .collect())
}

struct Level {
    params: SchemeParams,
    ratio: usize,
    state: StateVector,
    pending: WienerIncrement,
}

/// Reference state at one coarse time, built lazily.
enum RefState<'a> {
    Fine(&'a StateVector),
    Exact(StateVector),
}

impl RefState<'_> {
    fn get(&self) -> &StateVector {
        match self {
            RefState::Fine(s) => s,
            RefState::Exact(s) => s,
        }
    }
}

/// Drives one sample: the reference path (if any) plus every coarse level,
/// calling `visit(level, step_index, t, reference, coarse)` at each coarse time.
#[allow(clippy::too_many_arguments)]
fn coupled_sample<F>(
    problem: &Problem,
    reference: Option<Reference>,
    brownian_tau: f64,
    taus: &[f64],
    horizon: f64,
    sample: usize,
    role: StreamRole,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, usize, f64, Option<&StateVector>, &StateVector),
{
    let fine_params = problem.params_for(brownian_tau, horizon)?;
    let oracle = match reference {
        Some(Reference::Exact { .. }) => Some(CommutingOracle::from_problem(problem)?),
        _ => None,
    };
    let n = problem.initial.values().len();
    let mut levels = taus
        .iter()
        .map(|&tau| {
            let ratio = exact_ratio(tau, brownian_tau).filter(|&r| r >= 1).ok_or_else(|| {
                Error::InvalidExperiment(format!(
                    "tau {tau} is not an integer multiple of the reference step {brownian_tau}"
                ))
            })?;
            Ok(Level {
                params: problem.params_for(tau, horizon)?,
                ratio,
                state: problem.initial.clone(),
                pending: WienerIncrement::zero(n, 0.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = RngStream::new(problem.master_seed, role, sample as u64);
    let mut fine = problem.initial.clone();
    let mut brownian_sum = 0.0;
    let fail = |tau: f64| move |e: Error| Error::Sample {
        sample,
        tau,
        source: Box::new(e),
    };

    for step in 0..fine_params.steps {
        let brownian = problem.noise.sample_brownian(brownian_tau, &mut rng);
        if let Some(b) = brownian.first() {
            brownian_sum += b;
        }
        let dw = problem.noise.increment_from_brownian(&brownian, brownian_tau);
        if matches!(reference, Some(Reference::Fine { .. })) {
            fine = split_step(&fine, &dw, &problem.damping, &problem.noise, &fine_params)
                .map_err(|e| Error::Step {
                    step,
                    source: Box::new(e),
                })
                .map_err(fail(brownian_tau))?
                .0;
        }
        let done = step + 1;
        let t = done as f64 * brownian_tau;
        let mut exact: Option<StateVector> = None;
        for (li, level) in levels.iter_mut().enumerate() {
            level.pending.accumulate(&dw);
            if done % level.ratio != 0 {
                continue;
            }
            let coarse_step = done / level.ratio;
            let increment = std::mem::replace(&mut level.pending, WienerIncrement::zero(n, 0.0));
            level.state = split_step(
                &level.state,
                &increment,
                &problem.damping,
                &problem.noise,
                &level.params,
            )
            .map_err(|e| Error::Step {
                step: coarse_step - 1,
                source: Box::new(e),
            })
            .map_err(fail(level.params.tau))?
            .0;
            let ref_state = match (reference, oracle) {
                (Some(Reference::Exact { .. }), Some(o)) => {
                    if exact.is_none() {
                        exact = Some(exact_linear_flow(&problem.initial, t, o.a0, o.c, brownian_sum));
                    }
                    Some(RefState::Exact(exact.clone().expect("just set")))
                }
                (Some(Reference::Fine { .. }), _) => Some(RefState::Fine(&fine)),
                _ => None,
            };
            visit(li, coarse_step, t, ref_state.as_ref().map(|r| r.get()), &level.state);
        }
    }
    Ok(())
}

fn validate_taus(taus: &[f64]) -> Result<Vec<f64>> {
    if taus.is_empty() {
        return Err(Error::InvalidExperiment("empty tau list".into()));
    }
    if taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidExperiment("tau values must be positive".into()));
    }
    let mut sorted = taus.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidExperiment("duplicate tau values".into()));
    }
    Ok(sorted)
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < MIN_STUDY_SAMPLES {
        return Err(Error::InvalidExperiment(format!(
            "convergence studies need at least {MIN_STUDY_SAMPLES} samples, got {samples}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Least-squares line through `(ln τ, ln error)`.
pub fn fit_order(points: &[(f64, f64)]) -> Result<OrderFit> {
    if points.len() < 2 {
        return Err(Error::InvalidFit(format!("need at least 2 points, got {}", points.len())));
    }
    if let Some(&(t, e)) = points.iter().find(|(t, e)| !(*t > 0.0 && *e > 0.0)) {
        return Err(Error::InvalidFit(format!(
            "log-log fit needs positive values, got ({t}, {e})"
        )));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidFit("all step sizes are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(OrderFit {
        slope,
        intercept: my - slope * mx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub tau: f64,
    pub error: f64,
    pub half_width: f64,
    pub used_in_fit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    /// Sorted by decreasing `tau`.
    pub rows: Vec<ErrorRow>,
    /// `None` when fewer than two rows are usable (e.g. all errors vanish).
    pub fit: Option<OrderFit>,
    pub sample_count: usize,
    pub reference_tau: f64,
    pub reference: String,
}

impl ErrorTable {
    fn from_rows(mut rows: Vec<ErrorRow>, sample_count: usize, reference: Reference) -> Self {
        rows.sort_by(|a, b| b.tau.partial_cmp(&a.tau).expect("finite"));
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.used_in_fit)
            .map(|r| (r.tau, r.error))
            .collect();
        let fit = if pts.len() >= 2 { fit_order(&pts).ok() } else { None };
        Self {
            rows,
            fit,
            sample_count,
            reference_tau: reference.tau(),
            reference: reference.label().to_string(),
        }
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.map(|f| f.slope)
    }

    pub fn excluded_rows(&self) -> usize {
        self.rows.iter().filter(|r| !r.used_in_fit).count()
    }
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Root-mean-square error and its delta-method 95% half-width from squared errors.
fn rms_with_ci(squares: &[f64]) -> (f64, f64) {
    let (mean, var) = mean_and_var(squares);
    let error = mean.sqrt();
    let se_mean = (var / squares.len() as f64).sqrt();
    let half_width = if error > 0.0 { Z95 * se_mean / (2.0 * error) } else { 0.0 };
    (error, half_width)
}

/// Strong error `(E[max_m ‖u_ref(t_m) − u_τ(t_m)‖²])^{1/2}` for each `τ`.
pub fn strong_study(problem: &Problem, taus: &[f64], reference: Reference, samples: usize) -> Result<ErrorTable> {
    check_samples(samples)?;
    let taus = validate_taus(taus)?;
    let per_sample: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut worst = vec![0.0f64; taus.len()];
            coupled_sample(
                problem,
                Some(reference),
                reference.tau(),
                &taus,
                problem.final_time,
                s,
                StreamRole::Path,
                |level, _, _, r, coarse| {
                    let d = grid::l2_distance(r.expect("reference present"), coarse);
                    worst[level] = worst[level].max(d * d);
                },
            )?;
            Ok(worst)
        })
        .collect::<Result<_>>()?;

    let zero = problem.is_zero_initial();
    let rows = taus
        .iter()
        .enumerate()
        .map(|(i, &tau)| {
            let squares: Vec<f64> = per_sample.iter().map(|w| w[i]).collect();
            let (error, half_width) = rms_with_ci(&squares);
            ErrorRow {
                tau,
                error,
                half_width,
                used_in_fit: error > 0.0 && !zero,
            }
        })
        .collect();
    Ok(ErrorTable::from_rows(rows, samples, reference))
}

/// Bounded smooth test functionals for weak-error estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunctional {
    /// `φ(u) = exp(−‖u‖²)`.
    ExpNegCharge,
    /// `φ(u) = 1/(1 + ‖u‖²_{H¹})`.
    SmoothedH1,
}

impl TestFunctional {
    pub fn evaluate(&self, u: &StateVector) -> f64 {
        match self {
            TestFunctional::ExpNegCharge => (-grid::charge(u)).exp(),
            TestFunctional::SmoothedH1 => {
                let h1 = grid::sobolev_norm(u, 1).expect("order 1 is supported");
                1.0 / (1.0 + h1 * h1)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestFunctional::ExpNegCharge => "exp_neg_charge",
            TestFunctional::SmoothedH1 => "smoothed_h1",
        }
    }
}

impl fmt::Display for TestFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestFunctional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp_neg_charge" => Ok(TestFunctional::ExpNegCharge),
            "smoothed_h1" => Ok(TestFunctional::SmoothedH1),
            other => Err(Error::InvalidExperiment(format!(
                "unknown test functional '{other}' (expected exp_neg_charge or smoothed_h1)"
            ))),
        }
    }
}

/// How coarse paths in the weak study relate to the reference paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// Coarse paths reuse the reference path's Brownian increments.
    Common,
    /// Coarse paths use an independent stream per sample.
    Independent,
}

/// Weak error `|E φ(u_ref(T)) − E φ(u_τ(T))|` for each `τ`.
///
/// Rows whose error does not exceed three times its 95% half-width are kept in
/// the table but marked `used_in_fit = false`.
pub fn weak_study(
    problem: &Problem,
    phi: TestFunctional,
    taus: &[f64],
    reference: Reference,
    samples: usize,
    coupling: Coupling,
) -> Result<ErrorTable> {
    check_samples(samples)?;
    let taus = validate_taus(taus)?;
    let horizon = problem.final_time;
    let per_sample: Vec<(f64, Vec<f64>)> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut reference_value = if horizon == 0.0 { phi.evaluate(&problem.initial) } else { f64::NAN };
            let mut coarse = vec![phi.evaluate(&problem.initial); taus.len()];
            let final_hit = |t: f64| (t - horizon).abs() <= 1e-9 * horizon.max(1.0);
            match coupling {
                Coupling::Common => coupled_sample(
                    problem,
                    Some(reference),
                    reference.tau(),
                    &taus,
                    horizon,
                    s,
                    StreamRole::Path,
                    |level, _, t, r, u| {
                        if final_hit(t) {
                            coarse[level] = phi.evaluate(u);
                            reference_value = phi.evaluate(r.expect("reference present"));
                        }
                    },
                )?,
                Coupling::Independent => {
                    coupled_sample(
                        problem,
                        Some(reference),
                        reference.tau(),
                        &[reference.tau()],
                        horizon,
                        s,
                        StreamRole::Path,
                        |_, _, t, r, _| {
                            if final_hit(t) {
                                reference_value = phi.evaluate(r.expect("reference present"));
                            }
                        },
                    )?;
                    coupled_sample(
                        problem,
                        None,
                        reference.tau(),
                        &taus,
                        horizon,
                        s,
                        StreamRole::Independent,
                        |level, _, t, _, u| {
                            if final_hit(t) {
                                coarse[level] = phi.evaluate(u);
                            }
                        },
                    )?
                }
            }
            Ok((reference_value, coarse))
        })
        .collect::<Result<_>>()?;

    let rows = taus
        .iter()
        .enumerate()
        .map(|(i, &tau)| {
            let diffs: Vec<f64> = per_sample.iter().map(|(r, c)| r - c[i]).collect();
            let (mean, var) = mean_and_var(&diffs);
            let error = mean.abs();
            let half_width = Z95 * (var / samples as f64).sqrt();
            ErrorRow {
                tau,
                error,
                half_width,
                used_in_fit: error > 0.0 && error > 3.0 * half_width,
            }
        })
        .collect();
    Ok(ErrorTable::from_rows(rows, samples, reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: f64,
    pub error: f64,
    pub half_width: f64,
}

/// Final-time strong error `(E‖u_ref(T) − u_τ(T)‖²)^{1/2}` for each horizon `T`.
///
/// All horizons are read off one path per sample, so a horizon's value equals
/// what a separate run to that horizon would produce.
pub fn horizon_study(
    problem: &Problem,
    tau: f64,
    reference: Reference,
    horizons: &[f64],
    samples: usize,
) -> Result<Vec<HorizonRow>> {
    check_samples(samples)?;
    if horizons.is_empty() || horizons.windows(2).any(|w| w[1] <= w[0]) || horizons[0] <= 0.0 {
        return Err(Error::InvalidExperiment(
            "horizons must be positive and strictly increasing".into(),
        ));
    }
    let marks = horizons
        .iter()
        .map(|&h| {
            exact_ratio(h, tau).ok_or_else(|| {
                Error::InvalidExperiment(format!("horizon {h} is not a multiple of tau {tau}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let last = *horizons.last().expect("nonempty");
    let per_sample: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut sq = vec![0.0; marks.len()];
            coupled_sample(
                problem,
                Some(reference),
                reference.tau(),
                &[tau],
                last,
                s,
                StreamRole::Path,
                |_, step, _, r, u| {
                    if let Some(i) = marks.iter().position(|&m| m == step) {
                        let d = grid::l2_distance(r.expect("reference present"), u);
                        sq[i] = d * d;
                    }
                },
            )?;
            Ok(sq)
        })
        .collect::<Result<_>>()?;
    Ok(horizons
        .iter()
        .enumerate()
        .map(|(i, &horizon)| {
            let squares: Vec<f64> = per_sample.iter().map(|v| v[i]).collect();
            let (error, half_width) = rms_with_ci(&squares);
            HorizonRow {
                horizon,
                error,
                half_width,
            }
        })
        .collect())
}

/// Independent trajectories `0..samples` at step `tau` over the problem horizon.
pub fn run_ensemble(
    problem: &Problem,
    tau: f64,
    samples: usize,
    schedule: &RecordSchedule,
) -> Result<Vec<Trajectory>> {
    let params = problem.params_for(tau, problem.final_time)?;
    (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = RngStream::for_sample(problem.master_seed, s as u64);
            run_trajectory(&problem.initial, &params, &problem.damping, &problem.noise, &mut rng, schedule)
                .map_err(|e| Error::Sample {
                    sample: s,
                    tau,
                    source: Box::new(e),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::noise::{build_noise, damping_margin, sample_increment};
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bump_problem(n: usize, k: usize, lambda: Nonlinearity, amp: f64, t: f64) -> Problem {
        let g = make_grid(16.0, n).unwrap();
        let noise = build_noise(g.clone(), k, 1.0, 3.0).unwrap();
        let damping = DampingProfile::constant_plus_half_fq(&noise, 0.5).unwrap();
        let initial = StateVector::from_fn(g, |x| Complex64::new(amp * (-x * x / 8.0).exp(), 0.0));
        Problem {
            noise,
            damping,
            nonlinearity: lambda,
            fp_tol: 1e-12,
            fp_max_iters: 50,
            initial,
            final_time: t,
            master_seed: 5,
        }
    }

    fn commuting_problem(t: f64) -> Problem {
        let g = make_grid(16.0, 64).unwrap();
        let c: f64 = 0.5;
        let noise = build_noise(g.clone(), 1, c * c * 32.0, 3.0).unwrap();
        let damping = damping_margin(vec![0.4; g.len()], &noise).unwrap();
        let initial = StateVector::from_fn(g, |x| {
            Complex64::new((-x * x / 2.0).exp(), 0.0) * Complex64::new(0.0, 0.8 * x).exp()
        });
        Problem {
            noise,
            damping,
            nonlinearity: Nonlinearity::Linear,
            fp_tol: 1e-12,
            fp_max_iters: 50,
            initial,
            final_time: t,
            master_seed: 11,
        }
    }

    #[test]
    fn coupled_increment_cases() {
        let mk = |v: f64| WienerIncrement {
            values: vec![v, 2.0 * v],
            tau: 0.5,
        };
        let fine = vec![mk(1.0), mk(2.0), mk(3.0), mk(4.0)];
        assert_eq!(coupled_increments(&fine, 1).unwrap(), fine);
        let coarse = coupled_increments(&fine, 2).unwrap();
        assert_eq!(coarse.len(), 2);
        assert_eq!(coarse[0].values, vec![3.0, 6.0]);
        assert_eq!(coarse[1].values, vec![7.0, 14.0]);
        assert_eq!(coarse[0].tau, 1.0);
        assert!(coupled_increments(&fine, 3).is_err());
        assert!(coupled_increments(&fine, 0).is_err());
    }

    #[test]
    fn coupled_increment_variance_scales_with_ratio() {
        let g = make_grid(16.0, 16).unwrap();
        let model = build_noise(g, 4, 1.0, 3.0).unwrap();
        let tau = 0.01;
        let ratio = 4;
        let draws = 100_000;
        let mut rng = RngStream::for_sample(77, 0);
        let (mut fine_sq, mut coarse_sq) = (0.0, 0.0);
        let probe = 3;
        for _ in 0..draws / ratio {
            let fine: Vec<_> = (0..ratio)
                .map(|_| sample_increment(&model, tau, &mut rng).unwrap())
                .collect();
            fine_sq += fine.iter().map(|w| w.values[probe].powi(2)).sum::<f64>();
            let c = coupled_increments(&fine, ratio).unwrap();
            coarse_sq += c[0].values[probe].powi(2);
        }
        let fine_var = fine_sq / draws as f64;
        let coarse_var = coarse_sq / (draws / ratio) as f64;
        let expected = ratio as f64 * fine_var;
        let se = expected * (2.0 / (draws / ratio) as f64).sqrt();
        assert!((coarse_var - expected).abs() < 5.0 * se, "{coarse_var} vs {expected}");
    }

    #[test]
    fn streaming_coarse_path_matches_explicit_coupling() {
        let p = bump_problem(64, 8, Nonlinearity::Defocusing, 1.0, 0.25);
        let tau_ref = 1.0 / 64.0;
        let ratio = 4;
        let mut rng = RngStream::for_sample(p.master_seed, 0);
        let fine: Vec<_> = (0..16)
            .map(|_| sample_increment(&p.noise, tau_ref, &mut rng).unwrap())
            .collect();
        let coarse = coupled_increments(&fine, ratio).unwrap();
        let params = p.params_for(tau_ref * ratio as f64, p.final_time).unwrap();
        let mut u = p.initial.clone();
        for dw in &coarse {
            u = split_step(&u, dw, &p.damping, &p.noise, &params).unwrap().0;
        }
        let mut streamed = None;
        coupled_sample(&p, None, tau_ref, &[tau_ref * ratio as f64], p.final_time, 0, StreamRole::Path, |_, step, _, _, s| {
            if step == 4 {
                streamed = Some(s.clone());
            }
        })
        .unwrap();
        assert_eq!(streamed.unwrap().values(), u.values());
    }

    #[test]
    fn fit_order_cases() {
        let taus = [0.1, 0.05, 0.025, 0.0125];
        let f = fit_order(&taus.map(|t| (t, t))).unwrap();
        assert_relative_eq!(f.slope, 1.0, epsilon = 1e-12);
        let f = fit_order(&taus.map(|t| (t, 3.0 * t.sqrt()))).unwrap();
        assert_relative_eq!(f.slope, 0.5, epsilon = 1e-12);
        assert_relative_eq!(f.intercept, 3f64.ln(), epsilon = 1e-12);
        assert!(fit_order(&[(0.1, 0.0), (0.2, 1.0)]).is_err());
        assert!(fit_order(&[(0.1, 1.0)]).is_err());
        assert!(fit_order(&[(-0.1, 1.0), (0.2, 1.0)]).is_err());
    }

    #[test]
    fn fit_order_tolerates_small_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let slope = 0.5 + 0.05 * trial as f64;
            let pts: Vec<(f64, f64)> = (3..9)
                .map(|j| {
                    let t = 2f64.powi(-j);
                    (t, 2.0 * t.powf(slope) * (1.0 + rng.random_range(-0.01..0.01)))
                })
                .collect();
            assert!((fit_order(&pts).unwrap().slope - slope).abs() < 0.05);
        }
    }

    #[test]
    fn same_step_reference_gives_zero_strong_error() {
        let p = bump_problem(64, 8, Nonlinearity::Defocusing, 1.0, 0.25);
        let tau = 1.0 / 32.0;
        let t = strong_study(&p, &[tau], Reference::Fine { tau }, 50).unwrap();
        assert!(t.rows[0].error <= 1e-10, "{:?}", t.rows);
    }

    #[test]
    fn zero_initial_datum_degenerates() {
        let mut p = bump_problem(32, 4, Nonlinearity::Defocusing, 0.0, 0.25);
        p.initial = StateVector::zeros(p.initial.grid().clone());
        let taus = [0.125, 0.0625];
        let s = strong_study(&p, &taus, Reference::Fine { tau: 1.0 / 64.0 }, 50).unwrap();
        assert!(s.rows.iter().all(|r| r.error == 0.0));
        assert!(s.fit.is_none());
        let w = weak_study(&p, TestFunctional::ExpNegCharge, &taus, Reference::Fine { tau: 1.0 / 64.0 }, 50, Coupling::Common).unwrap();
        assert!(w.rows.iter().all(|r| r.error == 0.0 && !r.used_in_fit));
        assert!(w.fit.is_none());
    }

    #[test]
    fn commuting_oracle_strong_and_weak_rates() {
        let p = commuting_problem(1.0);
        let taus: Vec<f64> = (3..7).map(|j| 2f64.powi(-j)).collect();
        let reference = Reference::Exact { tau: 2f64.powi(-8) };
        let s = strong_study(&p, &taus, reference, 50).unwrap();
        assert!(s.slope().unwrap() >= 1.5, "{s:?}");
        // Both functionals depend only on Fourier moduli, which the unit-modulus
        // rational factor leaves untouched: the weak error is pure roundoff.
        for phi in [TestFunctional::SmoothedH1, TestFunctional::ExpNegCharge] {
            let w = weak_study(&p, phi, &taus, reference, 50, Coupling::Common).unwrap();
            assert!(w.rows.iter().all(|r| r.error <= 1e-13), "{w:?}");
        }
    }

    #[test]
    fn exact_reference_rejects_non_commuting_problem() {
        let p = bump_problem(32, 4, Nonlinearity::Defocusing, 1.0, 0.25);
        let err = strong_study(&p, &[0.125], Reference::Exact { tau: 0.0625 }, 50).unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
    }

    #[test]
    fn rejects_bad_study_inputs() {
        let p = bump_problem(32, 4, Nonlinearity::Defocusing, 1.0, 0.25);
        let r = Reference::Fine { tau: 1.0 / 64.0 };
        assert!(strong_study(&p, &[0.125], r, 10).is_err());
        assert!(strong_study(&p, &[0.1], r, 50).is_err());
        assert!(strong_study(&p, &[], r, 50).is_err());
        assert!(horizon_study(&p, 0.125, r, &[0.5, 0.25], 50).is_err());
        assert!("nope".parse::<TestFunctional>().is_err());
        assert_eq!("smoothed_h1".parse::<TestFunctional>().unwrap(), TestFunctional::SmoothedH1);
    }

    #[test]
    fn single_horizon_matches_strong_final_time() {
        let p = bump_problem(32, 4, Nonlinearity::Defocusing, 1.0, 0.5);
        let r = Reference::Fine { tau: 1.0 / 64.0 };
        let rows = horizon_study(&p, 0.125, r, &[0.5], 50).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].error > 0.0);
        let s = strong_study(&p, &[0.125], r, 50).unwrap();
        assert!(rows[0].error <= s.rows[0].error * (1.0 + 1e-12));
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let p = bump_problem(32, 4, Nonlinearity::Defocusing, 1.0, 0.25);
        let r = Reference::Fine { tau: 1.0 / 64.0 };
        let run = |workers| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap()
                .install(|| strong_study(&p, &[0.125, 0.0625], r, 64).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}

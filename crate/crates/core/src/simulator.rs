//! Closed-loop nonlinear simulation under the time-varying LQR feedback and
//! Monte Carlo evaluation over the parameter box.

use nalgebra::SVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, inf_norm, rk4_step, stable_substeps, UniformGrid};
use crate::linearizer::input_jacobian;
use crate::lqr::GainSchedule;
use crate::model::{forward_dynamics, task_outputs, InputVector, JointState, ParameterBox, ParameterVector, StateVector, N_PARAMS};
use crate::num::Real;
use crate::planner::ReferenceTrajectory;

/// State norms beyond this are treated as divergence.
pub const STATE_LIMIT: f64 = 1e6;

/// Final `|x_CoM|` allowed for a safe stand (m).
pub const DEFAULT_POSITION_TOL: f64 = 5e-3;
/// Final CoM speed allowed for a safe stand (m/s).
pub const DEFAULT_SPEED_TOL: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct SimulationResult<T: Real> {
    pub grid: UniformGrid<T>,
    pub times: Vec<T>,
    pub states: Vec<StateVector<T>>,
    /// Applied input `ū − K(x − x̄)` at the grid points.
    pub inputs: Vec<InputVector<T>>,
    /// `ζ = (θ₂, x_CoM, y_CoM, θ̇₂, ẋ_CoM, ẏ_CoM)`.
    pub outputs: Vec<SVector<T, 6>>,
    pub params: ParameterVector<T>,
}

impl<T: Real> SimulationResult<T> {
    pub fn final_state(&self) -> &StateVector<T> {
        self.states.last().expect("non-empty simulation")
    }

    pub fn final_output(&self) -> &SVector<T, 6> {
        self.outputs.last().expect("non-empty simulation")
    }

    /// `|x_CoM(t_f)|`; the ankle sits at the origin.
    pub fn final_com_error(&self) -> T {
        self.final_output()[1].abs()
    }

    /// `‖(ẋ_CoM, ẏ_CoM)‖` at `t_f`.
    pub fn final_com_speed(&self) -> T {
        let z = self.final_output();
        (z[4] * z[4] + z[5] * z[5]).sqrt()
    }
}

fn check_aligned<T: Real>(traj: &ReferenceTrajectory<T>, gains: &GainSchedule<T>) -> Result<()> {
    if traj.grid != gains.grid || traj.len() != gains.len() {
        return Err(Error::GridMismatch(format!(
            "reference has {} samples, gain schedule {}",
            traj.len(),
            gains.len()
        )));
    }
    Ok(())
}

/// Integrates `ẋ = f(x, p, ū − K(x − x̄))` with RK4 on the reference grid.
///
/// `ū`, `x̄` and `K` are linearly interpolated at every stage. Intervals where
/// the feedback `B₂K` is too fast for one RK4 step are split into equal
/// substeps; without feedback each interval is a single step.
pub fn simulate_closed_loop<T: Real>(
    x0: &JointState<T>,
    p: &ParameterVector<T>,
    traj: &ReferenceTrajectory<T>,
    gains: &GainSchedule<T>,
) -> Result<SimulationResult<T>> {
    simulate_closed_loop_refined(x0, p, traj, gains, 1)
}

/// [`simulate_closed_loop`] with at least `min_substeps` RK4 steps per grid
/// interval; the interpolated reference and gains are unchanged.
pub fn simulate_closed_loop_refined<T: Real>(
    x0: &JointState<T>,
    p: &ParameterVector<T>,
    traj: &ReferenceTrajectory<T>,
    gains: &GainSchedule<T>,
    min_substeps: usize,
) -> Result<SimulationResult<T>> {
    check_aligned(traj, gains)?;
    let x0 = x0.to_vector();
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial state must be finite".into()));
    }
    let grid = traj.grid;
    let n = grid.len;
    let limit = T::lit(STATE_LIMIT);
    let control = |k: usize, s: T, x: &StateVector<T>| {
        let xb = grid::lerp(&traj.x_bar[k], &traj.x_bar[k + 1], s);
        let ub = grid::lerp(&traj.u_bar[k], &traj.u_bar[k + 1], s);
        let kk = grid::lerp(&gains.k[k], &gains.k[k + 1], s);
        ub - kk * (x - xb)
    };

    let mut states = Vec::with_capacity(n);
    let mut x = x0;
    states.push(x);
    let feedback_rate = |k: usize| -> Result<T> {
        if gains.k[k].iter().all(|v| *v == T::zero()) {
            return Ok(T::zero());
        }
        Ok(inf_norm(&(input_jacobian(&traj.x_bar[k], p)? * gains.k[k])))
    };
    let mut rate_k = feedback_rate(0)?;
    for k in 0..n - 1 {
        let rate_next = feedback_rate(k + 1)?;
        let m = stable_substeps(rate_k.max(rate_next), grid.dt).max(min_substeps);
        rate_k = rate_next;
        let h = grid.dt / T::from_usize(m).unwrap();
        let rhs = |tau: T, x: &StateVector<T>| forward_dynamics(x, p, &control(k, tau / grid.dt, x));
        for j in 0..m {
            x = rk4_step(h * T::from_usize(j).unwrap(), h, &x, rhs)
                .map_err(|_| Error::SimulationDiverged { index: k })?;
            if !x.iter().all(|v| v.is_finite()) || x.norm() > limit {
                return Err(Error::SimulationDiverged { index: k });
            }
        }
        states.push(x);
    }

    let inputs: Vec<_> = (0..n)
        .map(|k| {
            let (i, s) = if k + 1 < n { (k, T::zero()) } else { (k - 1, T::one()) };
            control(i, s, &states[k])
        })
        .collect();
    let outputs = states.iter().map(|x| task_outputs(x, p).to_vector()).collect();
    Ok(SimulationResult {
        grid,
        times: traj.times.clone(),
        states,
        inputs,
        outputs,
        params: *p,
    })
}

/// `n` independent uniform draws from the box, deterministic in `seed`.
pub fn sample_parameters<T: Real>(bounds: &ParameterBox<T>, n: usize, seed: u64) -> Vec<ParameterVector<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| bounds.sample(&mut rng)).collect()
}

/// Safety thresholds on the final CoM state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyThresholds {
    pub position: f64,
    pub speed: f64,
}

impl Default for SafetyThresholds {
    fn default() -> Self {
        Self { position: DEFAULT_POSITION_TOL, speed: DEFAULT_SPEED_TOL }
    }
}

/// End-state metrics of one Monte Carlo draw. Diverged runs carry `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawOutcome {
    pub index: usize,
    pub params: [f64; N_PARAMS],
    pub final_com_error: Option<f64>,
    pub final_com_speed: Option<f64>,
    /// `max_t |u_i − ū_i|` per input channel.
    pub max_input_deviation: Option<[f64; 4]>,
    /// `‖W_e (ζ(x(t_f), p) − ζ̄(t_f))‖`.
    pub final_output_deviation: Option<f64>,
}

impl DrawOutcome {
    pub fn diverged(&self) -> bool {
        self.final_com_error.is_none()
    }

    pub fn position_ok(&self, th: &SafetyThresholds) -> bool {
        self.final_com_error.is_some_and(|e| e <= th.position)
    }

    pub fn speed_ok(&self, th: &SafetyThresholds) -> bool {
        self.final_com_speed.is_some_and(|s| s <= th.speed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub seed: u64,
    pub thresholds: SafetyThresholds,
    pub draws: Vec<DrawOutcome>,
    pub position_pass: usize,
    pub speed_pass: usize,
    pub both_pass: usize,
    pub diverged: usize,
}

impl MonteCarloReport {
    fn from_draws(seed: u64, thresholds: SafetyThresholds, draws: Vec<DrawOutcome>) -> Self {
        let count = |f: &dyn Fn(&DrawOutcome) -> bool| draws.iter().filter(|d| f(d)).count();
        Self {
            seed,
            thresholds,
            position_pass: count(&|d| d.position_ok(&thresholds)),
            speed_pass: count(&|d| d.speed_ok(&thresholds)),
            both_pass: count(&|d| d.position_ok(&thresholds) && d.speed_ok(&thresholds)),
            diverged: count(&|d| d.diverged()),
            draws,
        }
    }
}

/// Simulates one draw from `x̄(0)` and reduces it to end-state metrics.
pub fn evaluate_draw<T: Real>(
    index: usize,
    p: &ParameterVector<T>,
    traj: &ReferenceTrajectory<T>,
    gains: &GainSchedule<T>,
    output_weights: &SVector<T, 6>,
) -> Result<DrawOutcome> {
    let mut params = [0.0; N_PARAMS];
    for (dst, src) in params.iter_mut().zip(p.as_vector().iter()) {
        *dst = src.as_f64();
    }
    let x0 = JointState::from_vector(&traj.x_bar[0]);
    let sim = match simulate_closed_loop(&x0, p, traj, gains) {
        Ok(sim) => sim,
        Err(Error::SimulationDiverged { .. } | Error::IllConditionedMassMatrix) => {
            return Ok(DrawOutcome {
                index,
                params,
                final_com_error: None,
                final_com_speed: None,
                max_input_deviation: None,
                final_output_deviation: None,
            })
        }
        Err(e) => return Err(e),
    };
    let mut dev = [0.0f64; 4];
    for (u, ub) in sim.inputs.iter().zip(&traj.u_bar) {
        for (i, d) in dev.iter_mut().enumerate() {
            *d = d.max((u[i] - ub[i]).abs().as_f64());
        }
    }
    let last = traj.len() - 1;
    let reference = crate::model::TaskState { z: traj.z_bar[last], z_dot: traj.z_bar_dot[last] }.to_vector();
    let out_dev = (sim.final_output() - reference).component_mul(output_weights).norm();
    Ok(DrawOutcome {
        index,
        params,
        final_com_error: Some(sim.final_com_error().as_f64()),
        final_com_speed: Some(sim.final_com_speed().as_f64()),
        max_input_deviation: Some(dev),
        final_output_deviation: Some(out_dev.as_f64()),
    })
}

/// Closed-loop runs for `n` parameter draws from the box (in parallel on the
/// current rayon pool). Draws are generated sequentially first, so the report
/// does not depend on the number of workers.
pub fn monte_carlo<T: Real>(
    traj: &ReferenceTrajectory<T>,
    gains: &GainSchedule<T>,
    bounds: &ParameterBox<T>,
    n: usize,
    seed: u64,
    thresholds: SafetyThresholds,
    output_weights: &SVector<T, 6>,
) -> Result<MonteCarloReport> {
    if n == 0 {
        return Err(Error::InvalidInput("Monte Carlo needs at least one draw".into()));
    }
    check_aligned(traj, gains)?;
    let params = sample_parameters(bounds, n, seed);
    monte_carlo_with(traj, gains, &params, seed, thresholds, output_weights)
}

/// Monte Carlo over an explicit list of parameter vectors.
pub fn monte_carlo_with<T: Real>(
    traj: &ReferenceTrajectory<T>,
    gains: &GainSchedule<T>,
    params: &[ParameterVector<T>],
    seed: u64,
    thresholds: SafetyThresholds,
    output_weights: &SVector<T, 6>,
) -> Result<MonteCarloReport> {
    let draws = params
        .par_iter()
        .enumerate()
        .map(|(i, p)| evaluate_draw(i, p, traj, gains, output_weights))
        .collect::<Result<Vec<_>>>()?;
    Ok(MonteCarloReport::from_draws(seed, thresholds, draws))
}

/// Per draw: does feedback end no further from the reference output than open
/// loop? Open-loop runs that diverge count as infinitely far.
pub fn feedback_benefit(closed: &MonteCarloReport, open: &MonteCarloReport) -> Vec<bool> {
    closed
        .draws
        .iter()
        .zip(&open.draws)
        .map(|(c, o)| {
            let c = c.final_output_deviation.unwrap_or(f64::INFINITY);
            let o = o.final_output_deviation.unwrap_or(f64::INFINITY);
            c <= o
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{build_reference, AllocationSpec, ManeuverSpec};

    fn short_reference() -> ReferenceTrajectory<f64> {
        let spec = ManeuverSpec { grid_points: 141, ..ManeuverSpec::sts2() };
        build_reference(&spec, &AllocationSpec::crutch_push(), &ParameterVector::nominal()).unwrap()
    }

    #[test]
    fn draws_stay_in_box_and_are_reproducible() {
        let b = ParameterBox::<f64>::standard();
        let draws = sample_parameters(&b, 200, 42);
        assert!(draws.iter().all(|p| b.contains(p)));
        assert_eq!(draws, sample_parameters(&b, 200, 42));
        assert_ne!(draws, sample_parameters(&b, 200, 43));
    }

    #[test]
    fn degenerate_box_draws_nominal() {
        let b = ParameterBox::new(ParameterVector::<f64>::nominal(), SVector::zeros()).unwrap();
        for p in sample_parameters(&b, 20, 1) {
            assert_eq!(p, ParameterVector::nominal());
        }
    }

    #[test]
    fn mass_marginal_mean() {
        let b = ParameterBox::<f64>::standard();
        let draws = sample_parameters(&b, 100_000, 9);
        let mean = draws.iter().map(|p| p.mass(2)).sum::<f64>() / draws.len() as f64;
        assert!((mean - 44.57).abs() < 0.01, "{mean}");
    }

    #[test]
    fn zero_gain_equals_open_loop_integration() {
        let traj = short_reference();
        let p = ParameterVector::nominal();
        let sim = simulate_closed_loop(&JointState::from_vector(&traj.x_bar[0]), &p, &traj, &GainSchedule::zeros(traj.grid))
            .unwrap();
        let mut x = traj.x_bar[0];
        let dt = traj.grid.dt;
        for k in 0..traj.len() - 1 {
            x = rk4_step(0.0, dt, &x, |tau, x| {
                forward_dynamics(x, &p, &grid::lerp(&traj.u_bar[k], &traj.u_bar[k + 1], tau / dt))
            })
            .unwrap();
            assert_eq!(x, sim.states[k + 1]);
        }
        for (u, ub) in sim.inputs.iter().zip(&traj.u_bar) {
            assert_eq!(u, ub);
        }
    }

    #[test]
    fn rejects_misaligned_gains() {
        let traj = short_reference();
        let gains = GainSchedule::zeros(UniformGrid::over(3.5, 11).unwrap());
        let x0 = JointState::from_vector(&traj.x_bar[0]);
        assert!(matches!(
            simulate_closed_loop(&x0, &ParameterVector::nominal(), &traj, &gains),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let traj = short_reference();
        let mut gains = GainSchedule::zeros(traj.grid);
        // δu = c·B₂ᵀδx makes δẋ ≈ c·B₂B₂ᵀδx, which is anti-damped
        let p = ParameterVector::nominal();
        for (k, x) in gains.k.iter_mut().zip(&traj.x_bar) {
            *k = -input_jacobian(x, &p).unwrap().transpose() * 1e3;
        }
        let x0 = JointState::from_vector(&(traj.x_bar[0] + StateVector::from_element(1e-3)));
        let err = simulate_closed_loop(&x0, &p, &traj, &gains).unwrap_err();
        assert!(matches!(err, Error::SimulationDiverged { .. }), "{err:?}");
    }

    #[test]
    fn report_counts_match_draws() {
        let th = SafetyThresholds::default();
        let d = |i, e: Option<f64>, s: Option<f64>| DrawOutcome {
            index: i,
            params: [0.0; N_PARAMS],
            final_com_error: e,
            final_com_speed: s,
            max_input_deviation: None,
            final_output_deviation: None,
        };
        let r = MonteCarloReport::from_draws(
            0,
            th,
            vec![d(0, Some(1e-3), Some(1e-3)), d(1, Some(1e-2), Some(1e-3)), d(2, None, None)],
        );
        assert_eq!((r.position_pass, r.speed_pass, r.both_pass, r.diverged), (1, 2, 1, 1));
    }
}

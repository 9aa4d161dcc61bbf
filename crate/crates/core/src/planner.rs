//! Rest-to-rest reference planning in task space, the task-to-joint lift and
//! computed-torque input allocation.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::grid::{self, UniformGrid};
use crate::model::{
    self, task_jacobian, task_jacobian_rate, InputVector, JointState, ParameterVector, StateVector,
};
use crate::num::Real;

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;
const SINGULAR_DET: f64 = 1e-5;

/// Boundary values and discretization of a sit-to-stand maneuver.
#[derive(Debug, Clone, PartialEq)]
pub struct ManeuverSpec<T: Real> {
    /// Initial joint angles (rad); the maneuver starts at rest.
    pub theta0: Vector3<T>,
    /// Final `[θ₂; x_CoM; y_CoM]`.
    pub z_final: Vector3<T>,
    pub t_final: T,
    pub grid_points: usize,
}

impl<T: Real> ManeuverSpec<T> {
    fn standing() -> Vector3<T> {
        Vector3::new(T::lit((-5.0f64).to_radians()), T::zero(), T::lit(0.974))
    }

    /// Dynamic strategy: shanks and torso vertical, thighs horizontal.
    pub fn sts1() -> Self {
        Self {
            theta0: Vector3::new(90.0f64, -90.0, 90.0).map(|d| T::lit(d.to_radians())),
            z_final: Self::standing(),
            t_final: T::lit(3.5),
            grid_points: 701,
        }
    }

    /// Quasi-static strategy: CoM above the ankle before seat-off.
    pub fn sts2() -> Self {
        Self {
            theta0: Vector3::new(120.0f64, -120.0, 110.87).map(|d| T::lit(d.to_radians())),
            z_final: Self::standing(),
            t_final: T::lit(3.5),
            grid_points: 701,
        }
    }

    pub fn validate(&self, p: &ParameterVector<T>) -> Result<()> {
        if !(self.t_final > T::zero()) || !self.t_final.is_finite() {
            return Err(Error::InvalidInput("t_final must be positive".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidInput("grid_points must be at least 2".into()));
        }
        if !self.theta0.iter().chain(self.z_final.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("boundary values must be finite".into()));
        }
        let det = task_jacobian(&self.theta0, p).determinant();
        if det.abs() < T::lit(SINGULAR_DET) {
            return Err(Error::Singular {
                index: 0,
                det: det.as_f64(),
            });
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<UniformGrid<T>> {
        UniformGrid::over(self.t_final, self.grid_points)
    }
}

/// Cubic blend `Φ(t) = 3(t/t_f)² − 2(t/t_f)³` with its first two time derivatives.
pub fn blend_polynomial<T: Real>(t: T, t_final: T) -> Result<(T, T, T)> {
    if !(t >= T::zero() && t <= t_final) || !(t_final > T::zero()) {
        return Err(Error::Domain {
            value: t.as_f64(),
            lower: 0.0,
            upper: t_final.as_f64(),
        });
    }
    let s = t / t_final;
    let (two, three, six) = (T::lit(2.0), T::lit(3.0), T::lit(6.0));
    let phi = s * s * (three - two * s);
    let phi_dot = six * s * (T::one() - s) / t_final;
    let phi_ddot = six * (T::one() - two * s) / (t_final * t_final);
    Ok((phi, phi_dot, phi_ddot))
}

/// Gridded task-space reference `z̄`, `ż̄`, `z̈̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskReference<T: Real> {
    pub grid: UniformGrid<T>,
    pub z: Vec<Vector3<T>>,
    pub z_dot: Vec<Vector3<T>>,
    pub z_ddot: Vec<Vector3<T>>,
}

pub fn task_reference<T: Real>(
    spec: &ManeuverSpec<T>,
    p: &ParameterVector<T>,
) -> Result<TaskReference<T>> {
    spec.validate(p)?;
    let grid = spec.grid()?;
    let z0 = model::task_outputs(&JointState::at_rest(spec.theta0).to_vector(), p).z;
    let delta = spec.z_final - z0;
    let mut out = TaskReference {
        grid,
        z: Vec::with_capacity(grid.len),
        z_dot: Vec::with_capacity(grid.len),
        z_ddot: Vec::with_capacity(grid.len),
    };
    for k in 0..grid.len {
        // Clamp the last sample so roundoff in k·dt never leaves the domain.
        let t = if k + 1 == grid.len {
            spec.t_final
        } else {
            grid.time(k).min(spec.t_final)
        };
        let (phi, phi_dot, phi_ddot) = blend_polynomial(t, spec.t_final)?;
        out.z.push(if k + 1 == grid.len {
            spec.z_final
        } else {
            z0 + delta * phi
        });
        out.z_dot.push(delta * phi_dot);
        out.z_ddot.push(delta * phi_ddot);
    }
    Ok(out)
}

/// One sample of the joint-space reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointSample<T: Real> {
    pub theta: Vector3<T>,
    pub theta_dot: Vector3<T>,
    pub theta_ddot: Vector3<T>,
}

/// Lifts a task-space sample to joint space.
///
/// `θ₂ = z₁`; `(θ₁, θ₃)` solve the CoM position equations by damped Newton
/// starting from `guess`. Rates follow from `J θ̇ = ż` and `J θ̈ = z̈ − J̇ θ̇`.
/// `index` only labels errors.
pub fn task_to_joint<T: Real>(
    z: &Vector3<T>,
    z_dot: &Vector3<T>,
    z_ddot: &Vector3<T>,
    p: &ParameterVector<T>,
    guess: &Vector3<T>,
    index: usize,
) -> Result<JointSample<T>> {
    let target = Vector2::new(z[1], z[2]);
    let mut theta = Vector3::new(guess[0], z[0], guess[2]);
    let residual = |theta: &Vector3<T>| model::com_position(theta, p) - target;
    let tol = T::lit(NEWTON_TOL);
    let singular = T::lit(SINGULAR_DET);

    let mut r = residual(&theta);
    let mut converged = r.norm() < tol;
    for _ in 0..NEWTON_MAX_ITER {
        if converged {
            break;
        }
        let (s, c) = model::com_partial_sums(&theta, p);
        let jac = Matrix2::new(-s[0], -s[2], c[0], c[2]);
        let det = jac.determinant();
        if det.abs() < singular {
            return Err(Error::Singular {
                index,
                det: det.as_f64(),
            });
        }
        let step = jac.try_inverse().ok_or(Error::Singular {
            index,
            det: det.as_f64(),
        })? * r;
        let norm0 = r.norm();
        let mut alpha = T::one();
        loop {
            let trial = Vector3::new(theta[0] - alpha * step[0], theta[1], theta[2] - alpha * step[1]);
            let r_trial = residual(&trial);
            if r_trial.norm() < norm0 || alpha < T::lit(1e-4) {
                theta = trial;
                r = r_trial;
                break;
            }
            alpha *= T::lit(0.5);
        }
        converged = r.norm() < tol;
    }
    if !converged {
        return Err(Error::Unreachable { index });
    }

    let jac = task_jacobian(&theta, p);
    let det = jac.determinant();
    if det.abs() < singular {
        return Err(Error::Singular {
            index,
            det: det.as_f64(),
        });
    }
    let lu = jac.lu();
    let theta_dot = lu.solve(z_dot).ok_or(Error::Singular {
        index,
        det: det.as_f64(),
    })?;
    let rhs = z_ddot - task_jacobian_rate(&theta, &theta_dot, p) * theta_dot;
    let theta_ddot = lu.solve(&rhs).ok_or(Error::Singular {
        index,
        det: det.as_f64(),
    })?;
    Ok(JointSample {
        theta,
        theta_dot,
        theta_ddot,
    })
}

/// Weights and box bounds of the input allocation program.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationSpec<T: Real> {
    /// Diagonal of `W_u`.
    pub weights: Vector4<T>,
    /// Lower bounds; `-∞` marks an unbounded input.
    pub lower: Vector4<T>,
    /// Upper bounds; `+∞` marks an unbounded input.
    pub upper: Vector4<T>,
}

impl<T: Real> AllocationSpec<T> {
    /// `W_u = diag(1, 1, 10, 1)` with only `F_y ≥ 0` enforced.
    pub fn crutch_push() -> Self {
        let inf = T::lit(f64::INFINITY);
        Self {
            weights: Vector4::new(T::one(), T::one(), T::lit(10.0), T::one()),
            lower: Vector4::new(-inf, -inf, -inf, T::zero()),
            upper: Vector4::repeat(inf),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if !(self.weights[i] > T::zero()) || !self.weights[i].is_finite() {
                return Err(Error::InvalidInput("allocation weights must be positive".into()));
            }
            if self.lower[i].as_f64().is_nan() || self.upper[i].as_f64().is_nan() || self.lower[i] > self.upper[i] {
                return Err(Error::InvalidInput(format!(
                    "allocation bounds inconsistent for input {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Solution of the allocation program.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation<T: Real> {
    pub input: InputVector<T>,
    /// Bound multipliers: `≥ 0` at an active lower bound, `≤ 0` at an active upper
    /// bound, zero for free inputs.
    pub bound_multipliers: Vector4<T>,
    /// Multipliers of the equality constraints.
    pub equality_multipliers: Vector3<T>,
    pub cost: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BoundState {
    Free,
    AtLower,
    AtUpper,
}

/// Solves `min ½‖W ξ‖²` subject to `A ξ = b` and `lower ≤ ξ ≤ upper`.
///
/// Every pattern of active bounds is tried; each pattern is an equality
/// constrained weighted least-norm problem solved in closed form. The cheapest
/// pattern whose solution is feasible is the global minimizer because the
/// program is strictly convex. Returns `None` when no pattern is feasible.
pub fn solve_allocation<T: Real>(
    a: &Matrix3x4<T>,
    b: &Vector3<T>,
    spec: &AllocationSpec<T>,
) -> Option<Allocation<T>> {
    let choices: Vec<Vec<BoundState>> = (0..4)
        .map(|i| {
            let mut c = vec![BoundState::Free];
            if spec.lower[i].is_finite() {
                c.push(BoundState::AtLower);
            }
            if spec.upper[i].is_finite() && spec.upper[i] != spec.lower[i] {
                c.push(BoundState::AtUpper);
            }
            c
        })
        .collect();
    let total: usize = choices.iter().map(Vec::len).product();
    let scale = T::one() + b.norm();
    let feas_tol = T::lit(1e-8) * scale;
    let bound_tol = T::lit(1e-12) * scale;

    let mut best: Option<(T, Vector4<T>, [BoundState; 4])> = None;
    for code in 0..total {
        let mut rem = code;
        let mut pattern = [BoundState::Free; 4];
        for i in 0..4 {
            pattern[i] = choices[i][rem % choices[i].len()];
            rem /= choices[i].len();
        }

        let mut fixed = Vector4::zeros();
        let mut inv_w = Vector4::zeros();
        for i in 0..4 {
            match pattern[i] {
                BoundState::Free => inv_w[i] = T::one() / spec.weights[i],
                BoundState::AtLower => fixed[i] = spec.lower[i],
                BoundState::AtUpper => fixed[i] = spec.upper[i],
            }
        }
        let r = b - a * fixed;
        let scaled = a * Matrix4::from_diagonal(&inv_w);
        let Ok(pinv) = scaled.pseudo_inverse(T::lit(1e-12)) else {
            continue;
        };
        let v = pinv * r;
        let xi = fixed + inv_w.component_mul(&v);
        if (a * xi - b).norm() > feas_tol {
            continue;
        }
        let in_box = (0..4).all(|i| {
            pattern[i] != BoundState::Free
                || (xi[i] >= spec.lower[i] - bound_tol && xi[i] <= spec.upper[i] + bound_tol)
        });
        if !in_box {
            continue;
        }
        let cost = spec.weights.component_mul(&xi).norm_squared() * T::lit(0.5);
        if best.as_ref().is_none_or(|(c, _, _)| cost < *c) {
            best = Some((cost, xi, pattern));
        }
    }

    let (cost, xi, pattern) = best?;
    let (lambda, mu) = allocation_multipliers(a, spec, &xi, &pattern);
    Some(Allocation {
        input: xi,
        bound_multipliers: mu,
        equality_multipliers: lambda,
        cost,
    })
}

/// KKT multipliers for `W² ξ − Aᵀ λ − μ = 0`, with `μ = 0` on free inputs.
fn allocation_multipliers<T: Real>(
    a: &Matrix3x4<T>,
    spec: &AllocationSpec<T>,
    xi: &Vector4<T>,
    pattern: &[BoundState; 4],
) -> (Vector3<T>, Vector4<T>) {
    let grad = spec.weights.component_mul(&spec.weights).component_mul(xi);
    // λ from the free rows of the stationarity condition (least squares).
    let free: Vec<usize> = (0..4).filter(|i| pattern[*i] == BoundState::Free).collect();
    let mut lambda = Vector3::zeros();
    if !free.is_empty() {
        let at = DMatrix::from_fn(free.len(), 3, |r, c| a[(c, free[r])]);
        let g = DVector::from_fn(free.len(), |r, _| grad[free[r]]);
        if let Ok(sol) = at.svd(true, true).solve(&g, T::lit(1e-12)) {
            lambda = Vector3::new(sol[0], sol[1], sol[2]);
        }
    }
    let mut mu = grad - a.transpose() * lambda;
    for &i in &free {
        mu[i] = T::zero();
    }
    (lambda, mu)
}

/// Computed-torque input for one joint-space sample.
pub fn allocate_input<T: Real>(
    sample: &JointSample<T>,
    p: &ParameterVector<T>,
    alloc: &AllocationSpec<T>,
    index: usize,
) -> Result<Allocation<T>> {
    let b = model::mass_matrix(&sample.theta, p) * sample.theta_ddot
        + model::bias_forces(&sample.theta, &sample.theta_dot, p);
    let a = model::generalized_force_matrix(&sample.theta, p);
    solve_allocation(&a, &b, alloc).ok_or(Error::AllocationInfeasible { index })
}

/// Nominal state, input and task references on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory<T: Real> {
    pub grid: UniformGrid<T>,
    pub times: Vec<T>,
    pub x_bar: Vec<StateVector<T>>,
    pub u_bar: Vec<InputVector<T>>,
    pub z_bar: Vec<Vector3<T>>,
    pub z_bar_dot: Vec<Vector3<T>>,
    pub z_bar_ddot: Vec<Vector3<T>>,
}

impl<T: Real> ReferenceTrajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_final(&self) -> T {
        self.grid.t_final()
    }

    pub fn state_at(&self, t: T) -> StateVector<T> {
        grid::sample(&self.grid, &self.x_bar, t)
    }

    pub fn input_at(&self, t: T) -> InputVector<T> {
        grid::sample(&self.grid, &self.u_bar, t)
    }

    pub(crate) fn check_consistent(&self) -> Result<()> {
        let n = self.times.len();
        if n < 2
            || self.x_bar.len() != n
            || self.u_bar.len() != n
            || self.z_bar.len() != n
            || self.z_bar_dot.len() != n
            || self.z_bar_ddot.len() != n
            || self.grid.len != n
        {
            return Err(Error::GridMismatch("reference trajectory columns differ in length".into()));
        }
        Ok(())
    }
}

/// Plans the maneuver, lifts it to joint space and allocates the reference inputs.
pub fn build_reference<T: Real>(
    spec: &ManeuverSpec<T>,
    alloc: &AllocationSpec<T>,
    p: &ParameterVector<T>,
) -> Result<ReferenceTrajectory<T>> {
    alloc.validate()?;
    let task = task_reference(spec, p)?;
    let n = task.grid.len;

    let mut guess = spec.theta0;
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let s = task_to_joint(&task.z[k], &task.z_dot[k], &task.z_ddot[k], p, &guess, k)?;
        guess = s.theta;
        samples.push(s);
    }

    let mut x_bar = Vec::with_capacity(n);
    let mut u_bar = Vec::with_capacity(n);
    for (k, s) in samples.iter().enumerate() {
        u_bar.push(allocate_input(s, p, alloc, k)?.input);
        x_bar.push(JointState::new(s.theta, s.theta_dot)?.to_vector());
    }

    Ok(ReferenceTrajectory {
        grid: task.grid,
        times: task.grid.times(),
        x_bar,
        u_bar,
        z_bar: task.z,
        z_bar_dot: task.z_dot,
        z_bar_ddot: task.z_ddot,
    })
}

//! Jacobian linearization of the dynamics and of the task outputs along a
//! reference trajectory.

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::grid::UniformGrid;
use crate::model::{
    self, absolute_angles, absolute_rates, InputVector, JointState, ParameterVector, StateVector,
    N_PARAMS,
};
use crate::num::Real;
use crate::planner::ReferenceTrajectory;

pub type Matrix6<T> = SMatrix<T, 6, 6>;
pub type Matrix6x12<T> = SMatrix<T, 6, N_PARAMS>;
pub type Matrix6x4<T> = SMatrix<T, 6, 4>;

/// `δẋ ≈ A δx + B₁ δp + B₂ δu`, `δζ ≈ C δx + D₁ δp`, sampled on the reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvSystem<T: Real> {
    pub grid: UniformGrid<T>,
    pub times: Vec<T>,
    pub a: Vec<Matrix6<T>>,
    pub b1: Vec<Matrix6x12<T>>,
    pub b2: Vec<Matrix6x4<T>>,
    pub c: Vec<Matrix6<T>>,
    pub d1: Vec<Matrix6x12<T>>,
}

impl<T: Real> LtvSystem<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// `B₂ = [0; M⁻¹ A_τ]`; exact because `f` is affine in `u`.
pub fn input_jacobian<T: Real>(x: &StateVector<T>, p: &ParameterVector<T>) -> Result<Matrix6x4<T>> {
    let theta = JointState::from_vector(x).theta;
    let chol = model::mass_matrix(&theta, p)
        .cholesky()
        .ok_or(Error::IllConditionedMassMatrix)?;
    let lower = chol.solve(&model::generalized_force_matrix(&theta, p));
    let mut b2 = Matrix6x4::zeros();
    b2.fixed_view_mut::<3, 4>(3, 0).copy_from(&lower);
    Ok(b2)
}

/// `(A, B₁, B₂)` at one point, with central differences of relative step `rel_step`.
pub fn dynamics_jacobians_with_step<T: Real>(
    x: &StateVector<T>,
    p: &ParameterVector<T>,
    u: &InputVector<T>,
    rel_step: T,
) -> Result<(Matrix6<T>, Matrix6x12<T>, Matrix6x4<T>)> {
    let two = T::lit(2.0);
    let step = |v: T| rel_step * v.abs().max(T::one());

    let mut a = Matrix6::zeros();
    for j in 0..6 {
        let h = step(x[j]);
        let mut xp = *x;
        let mut xm = *x;
        xp[j] += h;
        xm[j] -= h;
        let col = (model::forward_dynamics(&xp, p, u)? - model::forward_dynamics(&xm, p, u)?)
            / (two * h);
        a.set_column(j, &col);
    }
    // θ̇ rows of f are exactly linear.
    a.fixed_view_mut::<3, 6>(0, 0).fill(T::zero());
    a.fixed_view_mut::<3, 3>(0, 3).fill_with_identity();

    let mut b1 = Matrix6x12::zeros();
    for j in 0..N_PARAMS {
        let v = p.as_vector()[j];
        let h = step(v);
        let mut pp = *p.as_vector();
        let mut pm = *p.as_vector();
        pp[j] += h;
        pm[j] -= h;
        let fp = model::forward_dynamics(x, &ParameterVector::new(pp)?, u)?;
        let fm = model::forward_dynamics(x, &ParameterVector::new(pm)?, u)?;
        b1.set_column(j, &((fp - fm) / (two * h)));
    }
    b1.fixed_view_mut::<3, N_PARAMS>(0, 0).fill(T::zero());

    Ok((a, b1, input_jacobian(x, p)?))
}

pub fn dynamics_jacobians<T: Real>(
    x: &StateVector<T>,
    p: &ParameterVector<T>,
    u: &InputVector<T>,
) -> Result<(Matrix6<T>, Matrix6x12<T>, Matrix6x4<T>)> {
    dynamics_jacobians_with_step(x, p, u, T::lit(T::FD_STEP))
}

/// `C = ∂ζ/∂x` and `D₁ = ∂ζ/∂p`, both analytic.
pub fn output_jacobians<T: Real>(
    x: &StateVector<T>,
    p: &ParameterVector<T>,
) -> (Matrix6<T>, Matrix6x12<T>) {
    let js = JointState::from_vector(x);
    let jac = model::task_jacobian(&js.theta, p);
    let jac_rate = model::task_jacobian_rate(&js.theta, &js.theta_dot, p);
    let mut c = Matrix6::zeros();
    c.fixed_view_mut::<3, 3>(0, 0).copy_from(&jac);
    c.fixed_view_mut::<3, 3>(3, 0).copy_from(&jac_rate);
    c.fixed_view_mut::<3, 3>(3, 3).copy_from(&jac);

    // ζ as a function of the lumped constants (k₀, k₁, k₂, k₃).
    let k = model::lumped_constants(p);
    let phi = absolute_angles(&js.theta);
    let omega = absolute_rates(&js.theta_dot);
    let cos = phi.map(|v| v.cos());
    let sin = phi.map(|v| v.sin());
    let moments = Vector3::from(k.moments());
    let mut dk = SMatrix::<T, 6, 4>::zeros();
    dk[(1, 0)] = moments.dot(&cos);
    dk[(2, 0)] = moments.dot(&sin);
    dk[(4, 0)] = -moments.dot(&sin.component_mul(&omega));
    dk[(5, 0)] = moments.dot(&cos.component_mul(&omega));
    for i in 0..3 {
        dk[(1, i + 1)] = k.k0 * cos[i];
        dk[(2, i + 1)] = k.k0 * sin[i];
        dk[(4, i + 1)] = -k.k0 * sin[i] * omega[i];
        dk[(5, i + 1)] = k.k0 * cos[i] * omega[i];
    }
    let d1 = dk * model::lumped_constant_partials(p);
    (c, d1)
}

#[allow(clippy::type_complexity)]
pub fn linearize_dynamics<T: Real>(
    traj: &ReferenceTrajectory<T>,
    p: &ParameterVector<T>,
) -> Result<(Vec<Matrix6<T>>, Vec<Matrix6x12<T>>, Vec<Matrix6x4<T>>)> {
    traj.check_consistent()?;
    let mut a = Vec::with_capacity(traj.len());
    let mut b1 = Vec::with_capacity(traj.len());
    let mut b2 = Vec::with_capacity(traj.len());
    for (x, u) in traj.x_bar.iter().zip(&traj.u_bar) {
        let (ak, b1k, b2k) = dynamics_jacobians(x, p, u)?;
        a.push(ak);
        b1.push(b1k);
        b2.push(b2k);
    }
    Ok((a, b1, b2))
}

pub fn linearize_outputs<T: Real>(
    traj: &ReferenceTrajectory<T>,
    p: &ParameterVector<T>,
) -> (Vec<Matrix6<T>>, Vec<Matrix6x12<T>>) {
    traj.x_bar.iter().map(|x| output_jacobians(x, p)).unzip()
}

/// Full LTV description of the deviation dynamics about the reference.
pub fn linearize<T: Real>(
    traj: &ReferenceTrajectory<T>,
    p: &ParameterVector<T>,
) -> Result<LtvSystem<T>> {
    let (a, b1, b2) = linearize_dynamics(traj, p)?;
    let (c, d1) = linearize_outputs(traj, p);
    let all_finite = a.iter().all(|m| m.iter().all(|v| v.is_finite()))
        && b1.iter().all(|m| m.iter().all(|v| v.is_finite()))
        && b2.iter().all(|m| m.iter().all(|v| v.is_finite()))
        && c.iter().all(|m| m.iter().all(|v| v.is_finite()))
        && d1.iter().all(|m| m.iter().all(|v| v.is_finite()));
    if !all_finite {
        return Err(Error::InvalidInput("linearization produced non-finite entries".into()));
    }
    Ok(LtvSystem {
        grid: traj.grid,
        times: traj.times.clone(),
        a,
        b1,
        b2,
        c,
        d1,
    })
}

/// Identity used to sanity-check `B₂`: `M B₂[3..6] = A_τ`.
pub fn mass_weighted_input_block<T: Real>(
    x: &StateVector<T>,
    p: &ParameterVector<T>,
    b2: &Matrix6x4<T>,
) -> SMatrix<T, 3, 4> {
    let theta: Vector3<T> = JointState::from_vector(x).theta;
    let m: Matrix3<T> = model::mass_matrix(&theta, p);
    m * b2.fixed_view::<3, 4>(3, 0)
}

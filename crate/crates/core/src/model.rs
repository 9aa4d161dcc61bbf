//! Equations of motion and center-of-mass kinematics of the three-link planar
//! robot (shanks, thighs, torso) used to model a lower-limb orthosis and its user.
//!
//! Joint 1 is the ankle, measured from the horizontal `x` axis; joints 2 and 3
//! (knee, hip) are relative angles. The state is `x = [θ; θ̇]` and the input is
//! `u = [τ₁; τ₂; F_x; F_y]`: hip torque, shoulder torque and the two shoulder
//! force components transmitted through the crutches.

use nalgebra::{Matrix3, Matrix3x4, SMatrix, SVector, Vector2, Vector3, Vector4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::num::Real;

/// Gravitational acceleration in m/s².
pub const GRAVITY: f64 = 9.81;

/// Number of physical parameters.
pub const N_PARAMS: usize = 12;

/// Full robot state `[θ₁, θ₂, θ₃, θ̇₁, θ̇₂, θ̇₃]`.
pub type StateVector<T> = SVector<T, 6>;

/// Input `[τ₁, τ₂, F_x, F_y]` in N·m and N.
pub type InputVector<T> = Vector4<T>;

/// Parameter vector `[m₁ m₂ m₃ I₁ I₂ I₃ l₁ l₂ l₃ l_c1 l_c2 l_c3]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterVector<T: Real> {
    values: SVector<T, N_PARAMS>,
}

impl<T: Real> ParameterVector<T> {
    pub const MASS: usize = 0;
    pub const INERTIA: usize = 3;
    pub const LENGTH: usize = 6;
    pub const COM_OFFSET: usize = 9;

    /// Builds a parameter vector; every entry must be finite and strictly positive.
    pub fn new(values: SVector<T, N_PARAMS>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v <= T::zero()) {
            return Err(Error::InvalidInput(
                "physical parameters must be finite and strictly positive".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn from_slice(values: &[T]) -> Result<Self> {
        if values.len() != N_PARAMS {
            return Err(Error::InvalidInput(format!(
                "expected {N_PARAMS} parameters, got {}",
                values.len()
            )));
        }
        Self::new(SVector::from_column_slice(values))
    }

    /// Nominal anthropometric values: lengths given, CoM offsets at mid-link.
    pub fn nominal() -> Self {
        let l = [0.53, 0.41, 0.52];
        let raw = [
            9.68, 12.59, 44.57, 1.16, 0.52, 2.56, l[0], l[1], l[2], l[0] / 2.0, l[1] / 2.0,
            l[2] / 2.0,
        ];
        Self {
            values: SVector::from_iterator(raw.iter().map(|v| T::lit(*v))),
        }
    }

    pub fn as_vector(&self) -> &SVector<T, N_PARAMS> {
        &self.values
    }

    /// Mass of link `i` (0-based).
    pub fn mass(&self, i: usize) -> T {
        self.values[Self::MASS + i]
    }

    /// Moment of inertia of link `i` about its CoM.
    pub fn inertia(&self, i: usize) -> T {
        self.values[Self::INERTIA + i]
    }

    pub fn length(&self, i: usize) -> T {
        self.values[Self::LENGTH + i]
    }

    /// Distance of the CoM of link `i` from its proximal joint.
    pub fn com_offset(&self, i: usize) -> T {
        self.values[Self::COM_OFFSET + i]
    }

    /// Short parameter names in vector order.
    pub fn names() -> [&'static str; N_PARAMS] {
        [
            "m1", "m2", "m3", "I1", "I2", "I3", "l1", "l2", "l3", "lc1", "lc2", "lc3",
        ]
    }
}

/// Additive uncertainty box around a nominal parameter vector.
///
/// The CoM offset bounds are relative to the link length of the same draw:
/// `l_ci ∈ [l_i/2 − δ, l_i/2 + δ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBox<T: Real> {
    pub nominal: ParameterVector<T>,
    pub half_widths: SVector<T, N_PARAMS>,
}

impl<T: Real> ParameterBox<T> {
    pub fn new(nominal: ParameterVector<T>, half_widths: SVector<T, N_PARAMS>) -> Result<Self> {
        if half_widths.iter().any(|h| !h.is_finite() || *h < T::zero()) {
            return Err(Error::InvalidInput(
                "half widths must be finite and nonnegative".into(),
            ));
        }
        let lower = nominal.as_vector() - half_widths;
        if lower.iter().any(|v| *v <= T::zero()) {
            return Err(Error::InvalidInput(
                "uncertainty box reaches nonpositive parameter values".into(),
            ));
        }
        Ok(Self {
            nominal,
            half_widths,
        })
    }

    /// The nominal values and uncertainties of the orthosis-user model.
    pub fn standard() -> Self {
        let hw = [0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01];
        Self {
            nominal: ParameterVector::nominal(),
            half_widths: SVector::from_iterator(hw.iter().map(|v| T::lit(*v))),
        }
    }

    pub fn lower(&self) -> SVector<T, N_PARAMS> {
        self.nominal.as_vector() - self.half_widths
    }

    pub fn upper(&self) -> SVector<T, N_PARAMS> {
        self.nominal.as_vector() + self.half_widths
    }

    /// Box membership, with CoM offsets checked against the draw's own lengths.
    pub fn contains(&self, p: &ParameterVector<T>) -> bool {
        let tol = T::default_epsilon() * T::lit(64.0);
        let nominal = self.nominal.as_vector();
        let v = p.as_vector();
        for i in 0..ParameterVector::<T>::COM_OFFSET {
            if (v[i] - nominal[i]).abs() > self.half_widths[i] + tol * (T::one() + nominal[i]) {
                return false;
            }
        }
        (0..3).all(|i| {
            let k = ParameterVector::<T>::COM_OFFSET + i;
            let center = p.length(i) * T::lit(0.5);
            (v[k] - center).abs() <= self.half_widths[k] + tol
        })
    }

    /// Uniform draw: masses, inertias and lengths first, then each CoM offset
    /// uniform around half of the drawn length.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterVector<T> {
        let mut v = *self.nominal.as_vector();
        let mut uniform = |center: T, half: T| {
            let u = T::lit(rng.gen::<f64>());
            center - half + T::lit(2.0) * half * u
        };
        for i in 0..ParameterVector::<T>::COM_OFFSET {
            v[i] = uniform(v[i], self.half_widths[i]);
        }
        for i in 0..3 {
            let k = ParameterVector::<T>::COM_OFFSET + i;
            let center = v[ParameterVector::<T>::LENGTH + i] * T::lit(0.5);
            v[k] = uniform(center, self.half_widths[k]);
        }
        ParameterVector { values: v }
    }
}

/// Joint angles and rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointState<T: Real> {
    pub theta: Vector3<T>,
    pub theta_dot: Vector3<T>,
}

impl<T: Real> JointState<T> {
    pub fn new(theta: Vector3<T>, theta_dot: Vector3<T>) -> Result<Self> {
        if !(theta.iter().chain(theta_dot.iter())).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("joint state must be finite".into()));
        }
        Ok(Self { theta, theta_dot })
    }

    pub fn at_rest(theta: Vector3<T>) -> Self {
        Self {
            theta,
            theta_dot: Vector3::zeros(),
        }
    }

    pub fn from_vector(x: &StateVector<T>) -> Self {
        Self {
            theta: x.fixed_rows::<3>(0).into_owned(),
            theta_dot: x.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> StateVector<T> {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.theta);
        x.fixed_rows_mut::<3>(3).copy_from(&self.theta_dot);
        x
    }
}

/// Task-space variables `z = [θ₂; x_CoM; y_CoM]` and their rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskState<T: Real> {
    pub z: Vector3<T>,
    pub z_dot: Vector3<T>,
}

impl<T: Real> TaskState<T> {
    /// Stacked `[z; ż]`.
    pub fn to_vector(&self) -> SVector<T, 6> {
        let mut v = SVector::<T, 6>::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.z);
        v.fixed_rows_mut::<3>(3).copy_from(&self.z_dot);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LumpedConstants<T> {
    pub k0: T,
    pub k1: T,
    pub k2: T,
    pub k3: T,
}

impl<T: Real> LumpedConstants<T> {
    /// `[k₁, k₂, k₃]`, the first moments of mass seen from each joint.
    pub fn moments(&self) -> [T; 3] {
        [self.k1, self.k2, self.k3]
    }
}

pub fn lumped_constants<T: Real>(p: &ParameterVector<T>) -> LumpedConstants<T> {
    let (m1, m2, m3) = (p.mass(0), p.mass(1), p.mass(2));
    let (l1, l2) = (p.length(0), p.length(1));
    let (lc1, lc2, lc3) = (p.com_offset(0), p.com_offset(1), p.com_offset(2));
    LumpedConstants {
        k0: T::one() / (m1 + m2 + m3),
        k1: lc1 * m1 + l1 * m2 + l1 * m3,
        k2: lc2 * m2 + l2 * m3,
        k3: lc3 * m3,
    }
}

/// Jacobian of `[k₀, k₁, k₂, k₃]` with respect to the parameter vector.
pub fn lumped_constant_partials<T: Real>(p: &ParameterVector<T>) -> SMatrix<T, 4, N_PARAMS> {
    let k0 = lumped_constants(p).k0;
    let mut d = SMatrix::<T, 4, N_PARAMS>::zeros();
    for i in 0..3 {
        d[(0, i)] = -k0 * k0;
    }
    d[(1, 0)] = p.com_offset(0);
    d[(1, 1)] = p.length(0);
    d[(1, 2)] = p.length(0);
    d[(1, 6)] = p.mass(1) + p.mass(2);
    d[(1, 9)] = p.mass(0);
    d[(2, 1)] = p.com_offset(1);
    d[(2, 2)] = p.length(1);
    d[(2, 7)] = p.mass(2);
    d[(2, 10)] = p.mass(1);
    d[(3, 2)] = p.com_offset(2);
    d[(3, 11)] = p.mass(2);
    d
}

/// Absolute link angles `[θ₁, θ₁+θ₂, θ₁+θ₂+θ₃]`.
#[inline]
pub fn absolute_angles<T: Real>(theta: &Vector3<T>) -> Vector3<T> {
    Vector3::new(theta[0], theta[0] + theta[1], theta[0] + theta[1] + theta[2])
}

/// Absolute link rates, the running sums of `θ̇`.
#[inline]
pub fn absolute_rates<T: Real>(theta_dot: &Vector3<T>) -> Vector3<T> {
    absolute_angles(theta_dot)
}

pub fn mass_matrix<T: Real>(theta: &Vector3<T>, p: &ParameterVector<T>) -> Matrix3<T> {
    let (m1, m2, m3) = (p.mass(0), p.mass(1), p.mass(2));
    let (i1, i2, i3) = (p.inertia(0), p.inertia(1), p.inertia(2));
    let (l1, l2) = (p.length(0), p.length(1));
    let (lc1, lc2, lc3) = (p.com_offset(0), p.com_offset(1), p.com_offset(2));
    let two = T::lit(2.0);
    let c2 = theta[1].cos();
    let c3 = theta[2].cos();
    let c23 = (theta[1] + theta[2]).cos();

    let m11 = i1
        + i2
        + i3
        + lc1 * lc1 * m1
        + m2 * (l1 * l1 + two * l1 * lc2 * c2 + lc2 * lc2)
        + m3 * (l1 * l1
            + two * l1 * l2 * c2
            + two * l1 * lc3 * c23
            + l2 * l2
            + two * l2 * lc3 * c3
            + lc3 * lc3);
    let m12 = i2
        + i3
        + lc2 * m2 * (l1 * c2 + lc2)
        + m3 * (l1 * l2 * c2 + l1 * lc3 * c23 + l2 * l2 + two * l2 * lc3 * c3 + lc3 * lc3);
    let m13 = i3 + lc3 * m3 * (l1 * c23 + l2 * c3 + lc3);
    let m22 = i2 + i3 + lc2 * lc2 * m2 + m3 * (l2 * l2 + two * l2 * lc3 * c3 + lc3 * lc3);
    let m23 = i3 + lc3 * m3 * (l2 * c3 + lc3);
    let m33 = i3 + lc3 * lc3 * m3;

    Matrix3::new(m11, m12, m13, m12, m22, m23, m13, m23, m33)
}

/// Matrix multiplying the squared absolute rates in the bias force vector.
pub fn coriolis_matrix<T: Real>(theta: &Vector3<T>, p: &ParameterVector<T>) -> Matrix3<T> {
    let k = lumped_constants(p);
    let (l1, l2) = (p.length(0), p.length(1));
    let s2 = theta[1].sin();
    let s3 = theta[2].sin();
    let s23 = (theta[1] + theta[2]).sin();
    let a = l1 * (k.k2 * s2 + k.k3 * s23);
    let b = k.k3 * l2 * s3;
    Matrix3::new(
        a,
        -k.k2 * l1 * s2 + b,
        -k.k3 * l1 * s23 - b,
        a,
        b,
        -b,
        l1 * k.k3 * s23,
        b,
        T::zero(),
    )
}

/// Gravity and velocity-product terms `F(θ, θ̇, p)`.
pub fn bias_forces<T: Real>(
    theta: &Vector3<T>,
    theta_dot: &Vector3<T>,
    p: &ParameterVector<T>,
) -> Vector3<T> {
    let omega = absolute_rates(theta_dot);
    let squares = omega.component_mul(&omega);
    coriolis_matrix(theta, p) * squares + gravity_forces(theta, p)
}

/// Gradient of the potential energy with respect to the joint angles.
pub fn gravity_forces<T: Real>(theta: &Vector3<T>, p: &ParameterVector<T>) -> Vector3<T> {
    let k = lumped_constants(p);
    let phi = absolute_angles(theta);
    let g = T::lit(GRAVITY);
    let t3 = k.k3 * phi[2].cos();
    let t2 = k.k2 * phi[1].cos() + t3;
    let t1 = k.k1 * phi[0].cos() + t2;
    Vector3::new(g * t1, g * t2, g * t3)
}

/// Maps `u` to generalized joint forces.
pub fn generalized_force_matrix<T: Real>(
    theta: &Vector3<T>,
    p: &ParameterVector<T>,
) -> Matrix3x4<T> {
    let phi = absolute_angles(theta);
    let (l1, l2, l3) = (p.length(0), p.length(1), p.length(2));
    let sx3 = l3 * phi[2].sin();
    let sx2 = l2 * phi[1].sin() + sx3;
    let sx1 = l1 * phi[0].sin() + sx2;
    let cx3 = l3 * phi[2].cos();
    let cx2 = l2 * phi[1].cos() + cx3;
    let cx1 = l1 * phi[0].cos() + cx2;
    let (zero, one) = (T::zero(), T::one());
    Matrix3x4::new(
        zero, -one, -sx1, cx1, //
        zero, -one, -sx2, cx2, //
        one, -one, -sx3, cx3,
    )
}

/// Solves `M θ̈ = rhs` by Cholesky factorization.
pub fn solve_mass<T: Real>(mass: Matrix3<T>, rhs: &Vector3<T>) -> Result<Vector3<T>> {
    let chol = mass.cholesky().ok_or(Error::IllConditionedMassMatrix)?;
    Ok(chol.solve(rhs))
}

/// Joint accelerations `θ̈` produced by input `u`.
pub fn joint_accelerations<T: Real>(
    theta: &Vector3<T>,
    theta_dot: &Vector3<T>,
    p: &ParameterVector<T>,
    u: &InputVector<T>,
) -> Result<Vector3<T>> {
    let rhs = generalized_force_matrix(theta, p) * u - bias_forces(theta, theta_dot, p);
    solve_mass(mass_matrix(theta, p), &rhs)
}

/// `ẋ = f(x, p, u)`.
pub fn forward_dynamics<T: Real>(
    x: &StateVector<T>,
    p: &ParameterVector<T>,
    u: &InputVector<T>,
) -> Result<StateVector<T>> {
    let js = JointState::from_vector(x);
    let acc = joint_accelerations(&js.theta, &js.theta_dot, p, u)?;
    let mut dx = StateVector::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&js.theta_dot);
    dx.fixed_rows_mut::<3>(3).copy_from(&acc);
    Ok(dx)
}

/// CoM position `(x_CoM, y_CoM)` in the inertial frame centered at the ankle.
pub fn com_position<T: Real>(theta: &Vector3<T>, p: &ParameterVector<T>) -> Vector2<T> {
    let (s, c) = com_partial_sums(theta, p);
    Vector2::new(c[0], s[0])
}

/// Tail sums `S_j = k₀ Σ_{i≥j} k_i sin φ_i` and `C_j = k₀ Σ_{i≥j} k_i cos φ_i`.
///
/// `∂x_CoM/∂θ_j = −S_j` and `∂y_CoM/∂θ_j = C_j`.
pub fn com_partial_sums<T: Real>(
    theta: &Vector3<T>,
    p: &ParameterVector<T>,
) -> (Vector3<T>, Vector3<T>) {
    let k = lumped_constants(p);
    let phi = absolute_angles(theta);
    let a = k.moments().map(|ki| k.k0 * ki);
    let mut s = Vector3::zeros();
    let mut c = Vector3::zeros();
    let mut acc_s = T::zero();
    let mut acc_c = T::zero();
    for i in (0..3).rev() {
        acc_s += a[i] * phi[i].sin();
        acc_c += a[i] * phi[i].cos();
        s[i] = acc_s;
        c[i] = acc_c;
    }
    (s, c)
}

/// Task outputs `ζ(x, p) = [θ₂, x_CoM, y_CoM, θ̇₂, ẋ_CoM, ẏ_CoM]`.
pub fn task_outputs<T: Real>(x: &StateVector<T>, p: &ParameterVector<T>) -> TaskState<T> {
    let js = JointState::from_vector(x);
    let (s, c) = com_partial_sums(&js.theta, p);
    let vx = -s.dot(&js.theta_dot);
    let vy = c.dot(&js.theta_dot);
    TaskState {
        z: Vector3::new(js.theta[1], c[0], s[0]),
        z_dot: Vector3::new(js.theta_dot[1], vx, vy),
    }
}

/// `J(θ) = ∂z/∂θ`.
pub fn task_jacobian<T: Real>(theta: &Vector3<T>, p: &ParameterVector<T>) -> Matrix3<T> {
    let (s, c) = com_partial_sums(theta, p);
    let (zero, one) = (T::zero(), T::one());
    Matrix3::new(zero, one, zero, -s[0], -s[1], -s[2], c[0], c[1], c[2])
}

/// `J̇(θ, θ̇)`, the time derivative of [`task_jacobian`] along the motion.
pub fn task_jacobian_rate<T: Real>(
    theta: &Vector3<T>,
    theta_dot: &Vector3<T>,
    p: &ParameterVector<T>,
) -> Matrix3<T> {
    let k = lumped_constants(p);
    let phi = absolute_angles(theta);
    let omega = absolute_rates(theta_dot);
    let a = k.moments().map(|ki| k.k0 * ki);
    let mut jd = Matrix3::zeros();
    let mut s_rate = T::zero();
    let mut c_rate = T::zero();
    for i in (0..3).rev() {
        s_rate += a[i] * phi[i].cos() * omega[i];
        c_rate -= a[i] * phi[i].sin() * omega[i];
        jd[(1, i)] = -s_rate;
        jd[(2, i)] = c_rate;
    }
    jd
}

pub fn kinetic_energy<T: Real>(x: &StateVector<T>, p: &ParameterVector<T>) -> T {
    let js = JointState::from_vector(x);
    (mass_matrix(&js.theta, p) * js.theta_dot).dot(&js.theta_dot) * T::lit(0.5)
}

pub fn potential_energy<T: Real>(theta: &Vector3<T>, p: &ParameterVector<T>) -> T {
    let k = lumped_constants(p);
    let phi = absolute_angles(theta);
    T::lit(GRAVITY) * (k.k1 * phi[0].sin() + k.k2 * phi[1].sin() + k.k3 * phi[2].sin())
}

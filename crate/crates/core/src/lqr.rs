//! Finite-horizon LQR: backward Riccati integration and the time-varying gain.

use nalgebra::{SMatrix, SVector, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, inf_norm, rk4_step, UniformGrid, RK4_STABILITY};
use crate::linearizer::{LtvSystem, Matrix6};
use crate::num::Real;

/// Riccati entries beyond this magnitude are treated as divergence.
pub const RICCATI_LIMIT: f64 = 1e12;

pub type GainMatrix<T> = SMatrix<T, 4, 6>;

/// Diagonal weights `Q`, `R`, `S` of the quadratic cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct LqrWeights<T: Real> {
    pub q: SVector<T, 6>,
    pub r: Vector4<T>,
    pub s: SVector<T, 6>,
}

impl<T: Real> LqrWeights<T> {
    pub fn new(q: SVector<T, 6>, r: Vector4<T>, s: SVector<T, 6>) -> Result<Self> {
        let w = Self { q, r, s };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: &T| v.is_finite() && *v >= T::zero();
        if !self.q.iter().all(nonneg) || !self.s.iter().all(nonneg) {
            return Err(Error::InvalidInput("Q and S must be nonnegative".into()));
        }
        if !self.r.iter().all(|v| v.is_finite() && *v > T::zero()) {
            return Err(Error::InvalidInput("R must be positive definite".into()));
        }
        Ok(())
    }

    /// The 16 diagonal entries in `Q, R, S` order.
    pub fn to_array(&self) -> [T; 16] {
        let mut out = [T::zero(); 16];
        out[..6].copy_from_slice(self.q.as_slice());
        out[6..10].copy_from_slice(self.r.as_slice());
        out[10..].copy_from_slice(self.s.as_slice());
        out
    }

    pub fn from_array(values: &[T; 16]) -> Result<Self> {
        Self::new(
            SVector::from_column_slice(&values[..6]),
            Vector4::from_column_slice(&values[6..10]),
            SVector::from_column_slice(&values[10..]),
        )
    }
}

/// Time-varying feedback `δu = −K(t) δx` on the reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule<T: Real> {
    pub grid: UniformGrid<T>,
    pub times: Vec<T>,
    pub k: Vec<GainMatrix<T>>,
    /// Weights that produced the schedule, when it came from an LQR design.
    pub weights: Option<LqrWeights<T>>,
}

impl<T: Real> GainSchedule<T> {
    /// `K ≡ 0`, i.e. open loop.
    pub fn zeros(grid: UniformGrid<T>) -> Self {
        Self {
            grid,
            times: grid.times(),
            k: vec![GainMatrix::zeros(); grid.len],
            weights: None,
        }
    }

    pub fn gain_at(&self, t: T) -> GainMatrix<T> {
        grid::sample(&self.grid, &self.k, t)
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }
}

/// Integrates `−Ṗ = PA + AᵀP − PBR⁻¹BᵀP + Q`, `P(t_f) = S` backward over the grid.
///
/// Runs RK4 in reversed time with matrices linearly interpolated between
/// samples and symmetrizes `P` after every step. Each grid interval is covered
/// in one step unless the closed-loop matrix `A − BR⁻¹BᵀP` is too fast for
/// RK4 at that step; the interval is then split into stability-limited
/// substeps. Large terminal weights make the first intervals stiff.
pub fn riccati_backward<T: Real, const N: usize, const M: usize>(
    grid: &UniformGrid<T>,
    a: &[SMatrix<T, N, N>],
    b: &[SMatrix<T, N, M>],
    q: &SVector<T, N>,
    r: &SVector<T, M>,
    s: &SVector<T, N>,
) -> Result<Vec<SMatrix<T, N, N>>> {
    let n = grid.len;
    if a.len() != n || b.len() != n {
        return Err(Error::GridMismatch(format!(
            "expected {n} samples, got A: {}, B: {}",
            a.len(),
            b.len()
        )));
    }
    let q = SMatrix::<T, N, N>::from_diagonal(q);
    let r_inv = r.map(|v| T::one() / v);
    let limit = T::lit(RICCATI_LIMIT);
    let half = T::lit(0.5);
    let stability = T::lit(RK4_STABILITY);

    let mut p_hist = vec![SMatrix::<T, N, N>::zeros(); n];
    let mut p = SMatrix::<T, N, N>::from_diagonal(s);
    p_hist[n - 1] = p;
    for k in (0..n - 1).rev() {
        // σ runs forward from t_{k+1} (σ = 0) down to t_k (σ = dt).
        let at = |sigma: T| {
            let frac = T::one() - sigma / grid.dt;
            (
                grid::lerp(&a[k], &a[k + 1], frac),
                grid::lerp(&b[k], &b[k + 1], frac),
            )
        };
        let rhs = |sigma: T, p: &SMatrix<T, N, N>| -> Result<SMatrix<T, N, N>> {
            let (ak, bk) = at(sigma);
            let pb = p * bk;
            let pa = p * ak;
            Ok(pa + pa.transpose() - scale_columns(pb, &r_inv) * pb.transpose() + q)
        };
        let mut sigma = T::zero();
        let mut steps = 0usize;
        while sigma < grid.dt {
            let (ak, bk) = at(sigma);
            let closed = ak - scale_columns(bk, &r_inv) * bk.transpose() * p;
            let rate = T::lit(2.0) * inf_norm(&closed);
            let mut h = grid.dt - sigma;
            if rate * h > stability {
                h = stability / rate;
            }
            p = rk4_step(sigma, h, &p, rhs)?;
            p = (p + p.transpose()) * half;
            if p.iter().any(|v| !v.is_finite() || v.abs() > limit) {
                return Err(Error::RiccatiDiverged { index: k });
            }
            sigma = if grid.dt - (sigma + h) <= grid.dt * T::lit(1e-12) {
                grid.dt
            } else {
                sigma + h
            };
            steps += 1;
            if steps > MAX_SUBSTEPS {
                return Err(Error::RiccatiDiverged { index: k });
            }
        }
        p_hist[k] = p;
    }
    Ok(p_hist)
}

const MAX_SUBSTEPS: usize = 1_000_000;

fn scale_columns<T: Real, const R: usize, const C: usize>(
    mut m: SMatrix<T, R, C>,
    factors: &SVector<T, C>,
) -> SMatrix<T, R, C> {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col *= factors[j];
    }
    m
}

/// Riccati solution `P(t)` for the state/input matrices of `ltv`.
pub fn solve_riccati<T: Real>(ltv: &LtvSystem<T>, w: &LqrWeights<T>) -> Result<Vec<Matrix6<T>>> {
    w.validate()?;
    riccati_backward(&ltv.grid, &ltv.a, &ltv.b2, &w.q, &w.r, &w.s)
}

/// `K = R⁻¹ Bᵀ P` for a generic system.
pub fn gain_from_riccati<T: Real, const N: usize, const M: usize>(
    p: &[SMatrix<T, N, N>],
    b: &[SMatrix<T, N, M>],
    r: &SVector<T, M>,
) -> Vec<SMatrix<T, M, N>> {
    p.iter()
        .zip(b)
        .map(|(p, b)| {
            let mut k = b.transpose() * p;
            for (i, mut row) in k.row_iter_mut().enumerate() {
                row /= r[i];
            }
            k
        })
        .collect()
}

pub fn lqr_gain<T: Real>(p: &[Matrix6<T>], ltv: &LtvSystem<T>, w: &LqrWeights<T>) -> GainSchedule<T> {
    GainSchedule {
        grid: ltv.grid,
        times: ltv.times.clone(),
        k: gain_from_riccati(p, &ltv.b2, &w.r),
        weights: Some(*w),
    }
}

/// Riccati solve followed by the gain computation.
pub fn design<T: Real>(ltv: &LtvSystem<T>, w: &LqrWeights<T>) -> Result<GainSchedule<T>> {
    let p = solve_riccati(ltv, w)?;
    Ok(lqr_gain(&p, ltv, w))
}

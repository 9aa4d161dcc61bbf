//! Uniform time grids, linear interpolation and the fixed-step RK4 kernel used
//! by every time integration in the crate.

use nalgebra::SMatrix;

use crate::error::{Error, Result};
use crate::num::Real;

/// Uniform grid `t_k = t0 + k·dt`, `k = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformGrid<T> {
    pub t0: T,
    pub dt: T,
    pub len: usize,
}

impl<T: Real> UniformGrid<T> {
    /// `points` samples spanning `[0, t_final]`.
    pub fn over(t_final: T, points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::InvalidInput("a time grid needs at least 2 points".into()));
        }
        if !(t_final > T::zero()) || !t_final.is_finite() {
            return Err(Error::InvalidInput("horizon must be positive and finite".into()));
        }
        Ok(Self {
            t0: T::zero(),
            dt: t_final / T::from_usize(points - 1).unwrap(),
            len: points,
        })
    }

    /// Recovers the grid from explicit sample times, checking uniform spacing.
    pub fn from_times(times: &[T]) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidInput("a time grid needs at least 2 points".into()));
        }
        let n = times.len();
        let t0 = times[0];
        let span = times[n - 1] - t0;
        let grid = Self {
            t0,
            dt: span / T::from_usize(n - 1).unwrap(),
            len: n,
        };
        let tol = T::lit(1e-6) * grid.dt;
        for (k, t) in times.iter().enumerate() {
            if (*t - grid.time(k)).abs() > tol {
                return Err(Error::GridMismatch(format!("times are not uniform at index {k}")));
            }
        }
        Ok(grid)
    }

    #[inline]
    pub fn time(&self, k: usize) -> T {
        self.t0 + self.dt * T::from_usize(k).unwrap()
    }

    pub fn t_final(&self) -> T {
        self.time(self.len - 1)
    }

    pub fn times(&self) -> Vec<T> {
        (0..self.len).map(|k| self.time(k)).collect()
    }

    /// Interval index `k` and fraction `s ∈ [0, 1]` with `t = t_k + s·dt`,
    /// clamped to the grid.
    pub fn locate(&self, t: T) -> (usize, T) {
        let rel = ((t - self.t0) / self.dt).max(T::zero());
        let last = self.len - 2;
        let k = rel.floor().to_usize().unwrap_or(last).min(last);
        let s = (rel - T::from_usize(k).unwrap()).min(T::one());
        (k, s)
    }

    /// Grid index closest to `t`, when `t` lies within `tol` of a grid point.
    pub fn index_of(&self, t: T, tol: T) -> Option<usize> {
        let rel = (t - self.t0) / self.dt;
        let k = rel.round();
        if k < T::zero() || (rel - k).abs() * self.dt > tol {
            return None;
        }
        let k = k.to_usize()?;
        (k < self.len).then_some(k)
    }
}

/// `a + s·(b − a)`.
#[inline]
pub fn lerp<T: Real, const R: usize, const C: usize>(
    a: &SMatrix<T, R, C>,
    b: &SMatrix<T, R, C>,
    s: T,
) -> SMatrix<T, R, C> {
    a + (b - a) * s
}

/// Linear interpolation of a gridded matrix-valued signal.
pub fn sample<T: Real, const R: usize, const C: usize>(
    grid: &UniformGrid<T>,
    values: &[SMatrix<T, R, C>],
    t: T,
) -> SMatrix<T, R, C> {
    let (k, s) = grid.locate(t);
    lerp(&values[k], &values[k + 1], s)
}

/// One classical fourth-order Runge-Kutta step for `ẏ = f(t, y)`.
pub fn rk4_step<T, const R: usize, const C: usize, E>(
    t: T,
    h: T,
    y: &SMatrix<T, R, C>,
    mut f: impl FnMut(T, &SMatrix<T, R, C>) -> std::result::Result<SMatrix<T, R, C>, E>,
) -> std::result::Result<SMatrix<T, R, C>, E>
where
    T: Real,
{
    let half = h * T::lit(0.5);
    let k1 = f(t, y)?;
    let k2 = f(t + half, &(y + k1 * half))?;
    let k3 = f(t + half, &(y + k2 * half))?;
    let k4 = f(t + h, &(y + k3 * h))?;
    Ok(y + (k1 + (k2 + k3) * T::lit(2.0) + k4) * (h / T::lit(6.0)))
}

/// Largest `ρ·h` accepted for one explicit RK4 step, where `ρ` bounds the
/// spectral radius of the right-hand side's Jacobian (the real-axis stability
/// limit of classical RK4 is ≈ 2.785).
pub const RK4_STABILITY: f64 = 2.5;

/// Number of equal RK4 substeps needed to cover `dt` stably at rate `rate`.
pub fn stable_substeps<T: Real>(rate: T, dt: T) -> usize {
    let n = (rate * dt / T::lit(RK4_STABILITY)).ceil();
    n.to_usize().unwrap_or(usize::MAX).max(1)
}

/// Maximum absolute row sum, an upper bound on the spectral radius.
pub fn inf_norm<T: Real, const R: usize, const C: usize>(m: &SMatrix<T, R, C>) -> T {
    m.row_iter()
        .map(|row| row.iter().fold(T::zero(), |acc, v| acc + v.abs()))
        .fold(T::zero(), |acc, v| acc.max(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    #[test]
    fn grid_hits_intermediate_time() {
        let g = UniformGrid::<f64>::over(3.5, 701).unwrap();
        assert_eq!(g.index_of(2.0, 1e-9), Some(400));
        assert_eq!(g.index_of(2.0025, 1e-9), None);
        assert!((g.t_final() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn locate_clamps() {
        let g = UniformGrid::<f64>::over(1.0, 11).unwrap();
        assert_eq!(g.locate(-1.0).0, 0);
        let (k, s) = g.locate(1.0);
        assert_eq!(k, 9);
        assert!((s - 1.0).abs() < 1e-12);
        let (k, s) = g.locate(0.25);
        assert_eq!(k, 2);
        assert!((s - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rk4_is_fourth_order() {
        // ẏ = [y2, -y1], exact solution (cos t, -sin t)
        let run = |n: usize| {
            let h = 1.0 / n as f64;
            let mut y = Vector2::new(1.0, 0.0);
            for k in 0..n {
                y = rk4_step(k as f64 * h, h, &y, |_, y| {
                    Ok::<_, ()>(Vector2::new(y[1], -y[0]))
                })
                .unwrap();
            }
            (y - Vector2::new(1f64.cos(), -(1f64.sin()))).norm()
        };
        let ratio = run(20) / run(40);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn substeps_cover_the_stability_limit() {
        assert_eq!(stable_substeps(0.0, 0.005), 1);
        assert_eq!(stable_substeps(400.0, 0.005), 1);
        assert_eq!(stable_substeps(628.3, 0.005), 2);
        // RK4 on ẏ = −ρy stays bounded with the chosen count
        let (rho, dt) = (5000.0, 0.005);
        let m = stable_substeps(rho, dt);
        let h = dt / m as f64;
        let mut y = nalgebra::Vector1::new(1.0);
        for _ in 0..100 * m {
            y = rk4_step(0.0, h, &y, |_, y| Ok::<_, ()>(-y * rho)).unwrap();
        }
        assert!(y[0].abs() < 1.0);
    }

    #[test]
    fn rejects_nonuniform_times() {
        assert!(UniformGrid::from_times(&[0.0, 0.1, 0.3]).is_err());
        assert!(UniformGrid::from_times(&[0.0, 0.1, 0.2]).is_ok());
    }
}

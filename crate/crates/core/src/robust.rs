//! Parameter-perturbation filter, extended closed-loop LTV system and the
//! finite-horizon L2-to-Euclidean gain used as the robustness metric.
//!
//! The gain of `ẋ = A(t)x + B(t)d`, `e = C(T)x(T)` over `[0, T]` is
//! `sqrt(λ_max(C(T) W(T) C(T)ᵀ))`, where the controllability Gramian solves
//! `Ẇ = AW + WAᵀ + BBᵀ` from `W(0) = 0`.

use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, inf_norm, rk4_step, stable_substeps, UniformGrid};
use crate::linearizer::{LtvSystem, Matrix6, Matrix6x12};
use crate::lqr::{GainSchedule, LqrWeights};
use crate::model::{ParameterBox, N_PARAMS};
use crate::num::Real;

pub type Matrix12<T> = SMatrix<T, N_PARAMS, N_PARAMS>;

/// Extended state dimension: 6 plant states plus 12 filter states.
pub const EXTENDED_DIM: usize = 6 + N_PARAMS;

/// `a = 100π` rad/s, i.e. a 50 Hz filter bandwidth.
pub const DEFAULT_BANDWIDTH: f64 = 100.0 * std::f64::consts::PI;

/// Output weights `W_e`: CoM velocity errors count ten times position errors.
pub const DEFAULT_OUTPUT_WEIGHTS: [f64; 6] = [1.0, 1.0, 1.0, 10.0, 10.0, 10.0];

pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_T_M: f64 = 2.0;

/// Bank of first-order lags `η̇ = A_d η + B_d d`, `δp = C_d η`.
///
/// A constant unit input drives each `δp_i` to the half-width of its
/// parameter interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterFilter<T: Real> {
    pub bandwidth: T,
    pub a_d: Matrix12<T>,
    pub b_d: Matrix12<T>,
    pub c_d: Matrix12<T>,
}

impl<T: Real> ParameterFilter<T> {
    pub fn half_widths(&self) -> SVector<T, N_PARAMS> {
        self.c_d.diagonal() / self.bandwidth
    }

    /// `C_d (−A_d)⁻¹ B_d`.
    pub fn dc_gain(&self) -> Matrix12<T> {
        self.c_d * self.b_d / self.bandwidth
    }
}

pub fn build_parameter_filter<T: Real>(bounds: &ParameterBox<T>, a: T) -> Result<ParameterFilter<T>> {
    if !(a > T::zero()) || !a.is_finite() {
        return Err(Error::InvalidInput("filter bandwidth must be positive".into()));
    }
    let half = (bounds.upper() - bounds.lower()) * T::lit(0.5);
    Ok(ParameterFilter {
        bandwidth: a,
        a_d: Matrix12::identity() * (-a),
        b_d: Matrix12::identity(),
        c_d: Matrix12::from_diagonal(&(half * a)),
    })
}

/// Closed loop driven through the parameter filter, stored by blocks:
///
/// ```text
/// Ā = [A − B₂K   B₁C_d]   B̄ = [0]   C̄ = [W_e C   W_e D₁ C_d]
///     [0         −a I ]       [I]
/// ```
#[derive(Debug, Clone)]
pub struct ExtendedLtv<T: Real> {
    pub grid: UniformGrid<T>,
    pub times: Vec<T>,
    /// `A − B₂K`.
    pub closed_loop: Vec<Matrix6<T>>,
    /// `B₁C_d`.
    pub coupling: Vec<Matrix6x12<T>>,
    pub bandwidth: T,
    /// `W_e C`.
    pub c_state: Vec<Matrix6<T>>,
    /// `W_e D₁ C_d`.
    pub c_filter: Vec<Matrix6x12<T>>,
    pub output_weights: SVector<T, 6>,
}

impl<T: Real> ExtendedLtv<T> {
    pub fn len(&self) -> usize {
        self.closed_loop.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closed_loop.is_empty()
    }

    pub fn a_bar(&self, k: usize) -> SMatrix<T, EXTENDED_DIM, EXTENDED_DIM> {
        let mut a = SMatrix::<T, EXTENDED_DIM, EXTENDED_DIM>::zeros();
        a.fixed_view_mut::<6, 6>(0, 0).copy_from(&self.closed_loop[k]);
        a.fixed_view_mut::<6, N_PARAMS>(0, 6).copy_from(&self.coupling[k]);
        a.fixed_view_mut::<N_PARAMS, N_PARAMS>(6, 6)
            .copy_from(&(Matrix12::identity() * (-self.bandwidth)));
        a
    }

    pub fn b_bar(&self) -> SMatrix<T, EXTENDED_DIM, N_PARAMS> {
        let mut b = SMatrix::<T, EXTENDED_DIM, N_PARAMS>::zeros();
        b.fixed_view_mut::<N_PARAMS, N_PARAMS>(6, 0).fill_with_identity();
        b
    }

    pub fn c_bar(&self, k: usize) -> SMatrix<T, 6, EXTENDED_DIM> {
        let mut c = SMatrix::<T, 6, EXTENDED_DIM>::zeros();
        c.fixed_view_mut::<6, 6>(0, 0).copy_from(&self.c_state[k]);
        c.fixed_view_mut::<6, N_PARAMS>(0, 6).copy_from(&self.c_filter[k]);
        c
    }

    /// Gains for several horizons from a single Gramian integration.
    ///
    /// Exploits the block structure: with `W = [X Y; Yᵀ wI]`,
    /// `Ẋ = A_cl X + X A_clᵀ + B_c Yᵀ + Y B_cᵀ`, `Ẏ = A_cl Y − aY + w B_c`,
    /// `ẇ = −2aw + 1`.
    pub fn gains(&self, horizons: &[T]) -> Result<Vec<T>> {
        let grid = self.grid;
        let mut targets = Vec::with_capacity(horizons.len());
        for &h in horizons {
            if !(h > grid.t0) || h > grid.t_final() + grid.dt * T::lit(1e-9) {
                return Err(Error::InvalidInput("gain horizon must lie in (0, t_f]".into()));
            }
            targets.push(horizon_position(&grid, h));
        }
        let mut out = vec![T::zero(); horizons.len()];
        let a = self.bandwidth;
        let mut w = Packed::<T>::zeros();
        let last = targets.iter().map(|&(k, s)| if s > T::zero() { k + 1 } else { k }).max().unwrap_or(0);

        for (i, &(k, s)) in targets.iter().enumerate() {
            if k == 0 && s == T::zero() {
                out[i] = T::zero();
            }
        }
        for k in 0..last {
            let rate = T::lit(2.0) * inf_norm(&self.closed_loop[k]).max(inf_norm(&self.closed_loop[k + 1])).max(a);
            let m = stable_substeps(rate, grid.dt);
            for (i, &(kt, s)) in targets.iter().enumerate() {
                if kt == k && s > T::zero() {
                    let part = self.advance(w, k, s, m)?;
                    let c_x = grid::lerp(&self.c_state[k], &self.c_state[k + 1], s);
                    let c_e = grid::lerp(&self.c_filter[k], &self.c_filter[k + 1], s);
                    out[i] = output_gain(&part, &c_x, &c_e);
                }
            }
            w = self.advance(w, k, T::one(), m)?;
            for (i, &(kt, s)) in targets.iter().enumerate() {
                if kt == k + 1 && s == T::zero() {
                    out[i] = output_gain(&w, &self.c_state[k + 1], &self.c_filter[k + 1]);
                }
            }
        }
        Ok(out)
    }

    /// Integrates the packed Gramian across fraction `frac` of interval `k`
    /// using `m` substeps per full interval.
    fn advance(&self, w: Packed<T>, k: usize, frac: T, m: usize) -> Result<Packed<T>> {
        let dt = self.grid.dt;
        let a = self.bandwidth;
        let steps = ((T::from_usize(m).unwrap() * frac).ceil().to_usize().unwrap_or(m)).max(1);
        let h = dt * frac / T::from_usize(steps).unwrap();
        let (a0, a1) = (&self.closed_loop[k], &self.closed_loop[k + 1]);
        let (b0, b1) = (&self.coupling[k], &self.coupling[k + 1]);
        let rhs = |tau: T, w: &Packed<T>| -> Result<Packed<T>> {
            let s = tau / dt;
            let acl = grid::lerp(a0, a1, s);
            let bc = grid::lerp(b0, b1, s);
            let x = w.fixed_view::<6, 6>(0, 0);
            let y = w.fixed_view::<6, N_PARAMS>(0, 6);
            let z = w[(0, 6 + N_PARAMS)];
            let mut d = Packed::zeros();
            let ax = acl * x + bc * y.transpose();
            d.fixed_view_mut::<6, 6>(0, 0).copy_from(&(ax + ax.transpose()));
            d.fixed_view_mut::<6, N_PARAMS>(0, 6)
                .copy_from(&(acl * y - y * a + bc * z));
            d[(0, 6 + N_PARAMS)] = T::one() - T::lit(2.0) * a * z;
            Ok(d)
        };
        let mut w = w;
        let mut tau = T::zero();
        for _ in 0..steps {
            w = rk4_step(tau, h, &w, rhs)?;
            let x = w.fixed_view::<6, 6>(0, 0).into_owned();
            w.fixed_view_mut::<6, 6>(0, 0)
                .copy_from(&((x + x.transpose()) * T::lit(0.5)));
            tau += h;
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::GramianDiverged { index: k });
        }
        Ok(w)
    }
}

/// `[X | Y | w·e₁]`: the independent blocks of the extended Gramian.
type Packed<T> = SMatrix<T, 6, { 6 + N_PARAMS + 1 }>;

fn output_gain<T: Real>(w: &Packed<T>, c_x: &Matrix6<T>, c_e: &Matrix6x12<T>) -> T {
    let x = w.fixed_view::<6, 6>(0, 0);
    let y = w.fixed_view::<6, N_PARAMS>(0, 6);
    let z = w[(0, 6 + N_PARAMS)];
    let cross = c_x * y * c_e.transpose();
    let m = c_x * x * c_x.transpose() + cross + cross.transpose() + c_e * c_e.transpose() * z;
    let m = (m + m.transpose()) * T::lit(0.5);
    m.symmetric_eigenvalues().max().max(T::zero()).sqrt()
}

/// Interval index and fraction of `t`, snapping to grid points.
fn horizon_position<T: Real>(grid: &UniformGrid<T>, t: T) -> (usize, T) {
    if let Some(k) = grid.index_of(t, grid.dt * T::lit(1e-9)) {
        return (k, T::zero());
    }
    grid.locate(t)
}

pub fn assemble_extended_ltv<T: Real>(
    ltv: &LtvSystem<T>,
    gains: &GainSchedule<T>,
    filter: &ParameterFilter<T>,
    output_weights: &SVector<T, 6>,
) -> Result<ExtendedLtv<T>> {
    if gains.len() != ltv.len() || gains.grid != ltv.grid {
        return Err(Error::GridMismatch(format!(
            "gain schedule has {} samples, linearization {}",
            gains.len(),
            ltv.len()
        )));
    }
    if !output_weights.iter().all(|w| *w > T::zero() && w.is_finite()) {
        return Err(Error::InvalidInput("output weights must be positive".into()));
    }
    let we = SMatrix::<T, 6, 6>::from_diagonal(output_weights);
    let n = ltv.len();
    let mut ext = ExtendedLtv {
        grid: ltv.grid,
        times: ltv.times.clone(),
        closed_loop: Vec::with_capacity(n),
        coupling: Vec::with_capacity(n),
        bandwidth: filter.bandwidth,
        c_state: Vec::with_capacity(n),
        c_filter: Vec::with_capacity(n),
        output_weights: *output_weights,
    };
    for k in 0..n {
        ext.closed_loop.push(ltv.a[k] - ltv.b2[k] * gains.k[k]);
        ext.coupling.push(ltv.b1[k] * filter.c_d);
        ext.c_state.push(we * ltv.c[k]);
        ext.c_filter.push(we * ltv.d1[k] * filter.c_d);
    }
    Ok(ext)
}

/// Finite-horizon L2-to-Euclidean gain of the extended system over `[0, T]`.
pub fn l2_to_euclidean_gain<T: Real>(ext: &ExtendedLtv<T>, horizon: T) -> Result<T> {
    Ok(ext.gains(&[horizon])?[0])
}

/// Controllability Gramians `W(t_k)` of a generic sampled LTV pair on the grid.
pub fn controllability_gramians<T: Real, const N: usize, const M: usize>(
    grid: &UniformGrid<T>,
    a: &[SMatrix<T, N, N>],
    b: &[SMatrix<T, N, M>],
) -> Result<Vec<SMatrix<T, N, N>>> {
    if a.len() != grid.len || b.len() != grid.len {
        return Err(Error::GridMismatch("system samples do not match the grid".into()));
    }
    let mut out = Vec::with_capacity(grid.len);
    let mut w = SMatrix::<T, N, N>::zeros();
    out.push(w);
    for k in 0..grid.len - 1 {
        let rate = T::lit(2.0) * inf_norm(&a[k]).max(inf_norm(&a[k + 1]));
        let m = stable_substeps(rate, grid.dt);
        let h = grid.dt / T::from_usize(m).unwrap();
        let rhs = |tau: T, w: &SMatrix<T, N, N>| -> Result<SMatrix<T, N, N>> {
            let s = tau / grid.dt;
            let ak = grid::lerp(&a[k], &a[k + 1], s);
            let bk = grid::lerp(&b[k], &b[k + 1], s);
            let aw = ak * w;
            Ok(aw + aw.transpose() + bk * bk.transpose())
        };
        for j in 0..m {
            w = rk4_step(h * T::from_usize(j).unwrap(), h, &w, rhs)?;
            w = (w + w.transpose()) * T::lit(0.5);
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::GramianDiverged { index: k });
        }
        out.push(w);
    }
    Ok(out)
}

/// `sqrt(λ_max(C W Cᵀ))`.
pub fn euclidean_gain<T: Real, const N: usize, const P: usize>(
    c: &SMatrix<T, P, N>,
    w: &SMatrix<T, N, N>,
) -> T {
    let m = c * w * c.transpose();
    let m = DMatrix::from_iterator(P, P, ((m + m.transpose()) * T::lit(0.5)).iter().copied());
    m.symmetric_eigenvalues().max().max(T::zero()).sqrt()
}

/// `J_RP = (1 − α)·γ(t_m) + α·γ(t_f)`.
pub fn robust_metric<T: Real>(gamma_tm: T, gamma_tf: T, alpha: T) -> T {
    (T::one() - alpha) * gamma_tm + alpha * gamma_tf
}

/// Robustness evaluation of one controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct GainReport<T: Real> {
    pub gamma_tm: T,
    pub gamma_tf: T,
    pub alpha: T,
    pub t_m: T,
    pub t_f: T,
    pub j_rp: T,
    pub weights: Option<LqrWeights<T>>,
}

/// Everything besides the controller that the metric depends on.
#[derive(Debug, Clone)]
pub struct RobustSettings<T: Real> {
    pub filter: ParameterFilter<T>,
    pub output_weights: SVector<T, 6>,
    pub alpha: T,
    pub t_m: T,
}

impl<T: Real> RobustSettings<T> {
    /// Standard box, `a = 100π`, `W_e = diag(1,1,1,10,10,10)`, `α = 0.7`, `t_m = 2 s`.
    pub fn standard() -> Self {
        Self {
            filter: build_parameter_filter(&ParameterBox::standard(), T::lit(DEFAULT_BANDWIDTH))
                .expect("positive bandwidth"),
            output_weights: SVector::from_fn(|i, _| T::lit(DEFAULT_OUTPUT_WEIGHTS[i])),
            alpha: T::lit(DEFAULT_ALPHA),
            t_m: T::lit(DEFAULT_T_M),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= T::zero() && self.alpha <= T::one()) {
            return Err(Error::InvalidInput("alpha must lie in [0, 1]".into()));
        }
        if !(self.t_m > T::zero()) {
            return Err(Error::InvalidInput("t_m must be positive".into()));
        }
        Ok(())
    }

    /// Assembles the extended system for `gains` and evaluates `J_RP`.
    pub fn evaluate(&self, ltv: &LtvSystem<T>, gains: &GainSchedule<T>) -> Result<GainReport<T>> {
        self.validate()?;
        let ext = assemble_extended_ltv(ltv, gains, &self.filter, &self.output_weights)?;
        let t_f = ltv.grid.t_final();
        let g = ext.gains(&[self.t_m, t_f])?;
        Ok(GainReport {
            gamma_tm: g[0],
            gamma_tf: g[1],
            alpha: self.alpha,
            t_m: self.t_m,
            t_f,
            j_rp: robust_metric(g[0], g[1], self.alpha),
            weights: gains.weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix1, Matrix2x3, Matrix3, Matrix3x2, Vector1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_order_lag_closed_form() {
        let grid = UniformGrid::<f64>::over(1.0, 201).unwrap();
        let a = vec![Matrix1::new(-1.0); grid.len];
        let b = vec![Matrix1::new(1.0); grid.len];
        let w = controllability_gramians(&grid, &a, &b).unwrap();
        let gamma = euclidean_gain(&Matrix1::new(1.0), w.last().unwrap());
        let exact = ((1.0 - (-2.0f64).exp()) / 2.0).sqrt();
        assert!((gamma - exact).abs() < 1e-6, "{gamma} vs {exact}");
        assert!((exact - 0.65752).abs() < 1e-5);
    }

    #[test]
    fn zero_output_or_input_gives_zero_gain() {
        let grid = UniformGrid::<f64>::over(1.0, 51).unwrap();
        let a = vec![Matrix1::new(0.3); grid.len];
        let w = controllability_gramians(&grid, &a, &vec![Matrix1::new(1.0); grid.len]).unwrap();
        assert_eq!(euclidean_gain(&Matrix1::new(0.0), w.last().unwrap()), 0.0);
        let w = controllability_gramians(&grid, &a, &vec![Matrix1::new(0.0); grid.len]).unwrap();
        assert_eq!(euclidean_gain(&Matrix1::new(2.0), w.last().unwrap()), 0.0);
    }

    #[test]
    fn metric_is_affine_combination() {
        assert_eq!(robust_metric(2.0, 1.0, 1.0), 1.0);
        assert_eq!(robust_metric(2.0, 1.0, 0.0), 2.0);
        assert!((robust_metric(2.0f64, 1.0, 0.7) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn filter_matrices() {
        let f = build_parameter_filter(&ParameterBox::<f64>::standard(), DEFAULT_BANDWIDTH).unwrap();
        assert!((f.c_d[(0, 0)] - DEFAULT_BANDWIDTH * 0.1).abs() < 1e-12);
        assert!((f.c_d[(6, 6)] - DEFAULT_BANDWIDTH * 0.01).abs() < 1e-12);
        let dc = f.dc_gain();
        for i in 0..N_PARAMS {
            let hw = if i < 6 { 0.1 } else { 0.01 };
            assert!((dc[(i, i)] - hw).abs() < 1e-12);
        }
        assert!((dc - Matrix12::from_diagonal(&dc.diagonal())).norm() == 0.0);
        assert!(build_parameter_filter(&ParameterBox::<f64>::standard(), 0.0).is_err());
    }

    #[test]
    fn filter_step_settles_within_five_time_constants() {
        for a in [10.0, 100.0, DEFAULT_BANDWIDTH] {
            let f = build_parameter_filter(&ParameterBox::<f64>::standard(), a).unwrap();
            let hw = f.half_widths();
            let t_settle = 5.0 / a;
            let n = 2000;
            let h = t_settle / n as f64;
            let d = SVector::<f64, N_PARAMS>::repeat(1.0);
            let mut eta = SVector::<f64, N_PARAMS>::zeros();
            for _ in 0..n {
                eta = rk4_step(0.0, h, &eta, |_, e| Ok::<_, ()>(f.a_d * e + f.b_d * d)).unwrap();
            }
            let out = f.c_d * eta;
            for i in 0..N_PARAMS {
                assert!((out[i] - hw[i]).abs() <= 0.01 * hw[i], "channel {i} at a = {a}");
            }
        }
    }

    /// Largest singular value of the map from piecewise-constant inputs on
    /// `pieces` subintervals to `e = C x(T)`, scaled to an L2 gain.
    fn operator_gain(
        a: impl Fn(f64) -> Matrix3<f64>,
        b: &Matrix3x2<f64>,
        c: &Matrix2x3<f64>,
        pieces: usize,
    ) -> f64 {
        let dt = 1.0 / pieces as f64;
        let sub = 8;
        let h = dt / sub as f64;
        let mut map = DMatrix::<f64>::zeros(2, 2 * pieces);
        for j in 0..pieces {
            // response to a unit pulse on [t_j, t_{j+1}] in each channel at once
            let mut x = Matrix3x2::<f64>::zeros();
            let mut t = j as f64 * dt;
            for _ in 0..sub {
                x = rk4_step(t, h, &x, |t, x| Ok::<_, ()>(a(t) * x + b)).unwrap();
                t += h;
            }
            for _ in (j + 1) * sub..pieces * sub {
                x = rk4_step(t, h, &x, |t, x| Ok::<_, ()>(a(t) * x)).unwrap();
                t += h;
            }
            let e = c * x;
            map.view_mut((0, 2 * j), (2, 2)).copy_from(&e);
        }
        map.singular_values().max() / dt.sqrt()
    }

    #[test]
    fn gain_matches_discretized_operator_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a0 = Matrix3::<f64>::from_fn(|_, _| rng.gen_range(-1.5..1.0));
            let a1 = Matrix3::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let b = Matrix3x2::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let c = Matrix2x3::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let a_of = |t: f64| a0 + a1 * t;
            let grid = UniformGrid::<f64>::over(1.0, 201).unwrap();
            let a: Vec<_> = grid.times().iter().map(|&t| a_of(t)).collect();
            let w = controllability_gramians(&grid, &a, &vec![b; grid.len]).unwrap();
            let gamma = euclidean_gain(&c, w.last().unwrap());
            let oracle = operator_gain(a_of, &b, &c, 200);
            assert!((gamma - oracle).abs() <= 0.01 * oracle, "{gamma} vs {oracle}");
        }
    }

    fn random_extended(seed: u64) -> (ExtendedLtv<f64>, Vec<SMatrix<f64, 18, 18>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = UniformGrid::<f64>::over(1.0, 101).unwrap();
        let mut m6 = |s: f64| Matrix6::<f64>::from_fn(|_, _| rng.gen_range(-s..s));
        let (a0, a1) = (m6(1.0) - Matrix6::identity() * 2.0, m6(1.0));
        let (c0, c1) = (m6(1.0), m6(1.0));
        let mut m12 = |s: f64| Matrix6x12::<f64>::from_fn(|_, _| rng.gen_range(-s..s));
        let (b0, e0) = (m12(3.0), m12(1.0));
        let n = grid.len;
        let ext = ExtendedLtv {
            grid,
            times: grid.times(),
            closed_loop: grid.times().iter().map(|t| a0 + a1 * *t).collect(),
            coupling: vec![b0; n],
            bandwidth: 40.0,
            c_state: grid.times().iter().map(|t| c0 + c1 * *t).collect(),
            c_filter: vec![e0; n],
            output_weights: SVector::repeat(1.0),
        };
        let dense: Vec<_> = (0..n).map(|k| ext.a_bar(k)).collect();
        (ext, dense)
    }

    #[test]
    fn structured_gramian_matches_dense() {
        let (ext, a) = random_extended(3);
        let w = controllability_gramians(&ext.grid, &a, &vec![ext.b_bar(); ext.len()]).unwrap();
        let g = ext.gains(&[0.5, 0.505, 1.0]).unwrap();
        let dense = |k: usize| euclidean_gain(&ext.c_bar(k), &w[k]);
        assert!((g[0] - dense(50)).abs() < 1e-9 * g[0].max(1.0));
        assert!((g[2] - dense(100)).abs() < 1e-9 * g[2].max(1.0));
        // off-grid horizon falls between its neighbours' values
        let (lo, hi) = (dense(50).min(dense(51)), dense(50).max(dense(51)));
        assert!(g[1] > lo - 1e-3 * hi && g[1] < hi + 1e-3 * hi, "{} not in [{lo}, {hi}]", g[1]);
    }

    #[test]
    fn gramians_are_psd() {
        let (ext, a) = random_extended(11);
        let w = controllability_gramians(&ext.grid, &a, &vec![ext.b_bar(); ext.len()]).unwrap();
        for wk in &w {
            let tr: f64 = wk.trace();
            assert!(wk.symmetric_eigenvalues().min() >= -1e-9 * tr);
        }
    }

    #[test]
    fn gramian_accumulates_a_psd_integrand() {
        // W(T) = Φ(T,0) G(T) Φ(T,0)ᵀ with G(T) = ∫₀ᵀ Φ(0,s)BBᵀΦ(0,s)ᵀ ds,
        // so G(T₂) − G(T₁) ⪰ 0 for T₂ > T₁.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a0 = Matrix3::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let a1 = Matrix3::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let b = Matrix3x2::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let grid = UniformGrid::<f64>::over(1.0, 201).unwrap();
        let a: Vec<_> = grid.times().iter().map(|&t| a0 + a1 * t).collect();
        let w = controllability_gramians(&grid, &a, &vec![b; grid.len]).unwrap();
        let mut phi = Matrix3::<f64>::identity();
        let mut prev = Matrix3::<f64>::zeros();
        for k in 0..grid.len - 1 {
            phi = rk4_step(grid.time(k), grid.dt, &phi, |t, p| Ok::<_, ()>((a0 + a1 * t) * p)).unwrap();
            let inv = phi.try_inverse().unwrap();
            let g = inv * w[k + 1] * inv.transpose();
            let d = g - prev;
            assert!(d.symmetric_eigenvalues().min() >= -1e-9 * g.trace(), "step {k}");
            prev = g;
        }
    }

    #[test]
    fn gain_scales_with_output_map() {
        let (ext, _) = random_extended(5);
        let g = ext.gains(&[1.0]).unwrap()[0];
        for s in [0.0, 0.5, 3.0] {
            let mut scaled = ext.clone();
            scaled.c_state.iter_mut().for_each(|c| *c *= s);
            scaled.c_filter.iter_mut().for_each(|c| *c *= s);
            let gs = scaled.gains(&[1.0]).unwrap()[0];
            assert!((gs - s * g).abs() <= 1e-10 * g.max(1.0));
        }
    }

    #[test]
    fn block_structure_and_output_weights() {
        let (ext, _) = random_extended(2);
        for k in [0, 50, 100] {
            let a = ext.a_bar(k);
            assert_eq!(a.fixed_view::<12, 6>(6, 0).norm(), 0.0);
            assert_eq!(ext.b_bar().fixed_view::<6, 12>(0, 0).norm(), 0.0);
        }
        let grid = UniformGrid::<f64>::over(1.0, 3).unwrap();
        let ltv = LtvSystem {
            grid,
            times: grid.times(),
            a: vec![Matrix6::from_fn(|i, j| (i + 2 * j) as f64); 3],
            b1: vec![Matrix6x12::from_fn(|i, j| (i * j) as f64 + 1.0); 3],
            b2: vec![SMatrix::<f64, 6, 4>::from_fn(|i, j| (i + j) as f64); 3],
            c: vec![Matrix6::from_fn(|i, j| i as f64 - j as f64); 3],
            d1: vec![Matrix6x12::from_fn(|i, j| (i + j) as f64 * 0.1); 3],
        };
        let k0 = GainSchedule::zeros(grid);
        let mut filt = build_parameter_filter(&ParameterBox::<f64>::standard(), 10.0).unwrap();
        filt.c_d = Matrix12::zeros();
        let ones = SVector::<f64, 6>::repeat(1.0);
        let ext = assemble_extended_ltv(&ltv, &k0, &filt, &ones).unwrap();
        assert_eq!(ext.a_bar(1).fixed_view::<6, 6>(0, 0).into_owned(), ltv.a[1]);
        assert_eq!(ext.a_bar(1).fixed_view::<6, 12>(0, 6).norm(), 0.0);

        let filt = build_parameter_filter(&ParameterBox::<f64>::standard(), 10.0).unwrap();
        let we = SVector::<f64, 6>::from_column_slice(&DEFAULT_OUTPUT_WEIGHTS);
        let plain = assemble_extended_ltv(&ltv, &k0, &filt, &ones).unwrap();
        let weighted = assemble_extended_ltv(&ltv, &k0, &filt, &we).unwrap();
        let (cp, cw) = (plain.c_bar(2), weighted.c_bar(2));
        for i in 0..6 {
            let f = if i < 3 { 1.0 } else { 10.0 };
            assert!((cw.row(i) - cp.row(i) * f).norm() <= 1e-12 * cw.row(i).norm());
        }
        let short = GainSchedule::zeros(UniformGrid::over(1.0, 4).unwrap());
        assert!(matches!(
            assemble_extended_ltv(&ltv, &short, &filt, &ones),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn rejects_horizons_outside_grid() {
        let (ext, _) = random_extended(1);
        assert!(ext.gains(&[0.0]).is_err());
        assert!(ext.gains(&[1.5]).is_err());
        let _ = Vector1::new(0.0);
    }
}

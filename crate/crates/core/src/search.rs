//! Brute-force LQR weight selection over a Latin hypercube of candidates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearizer::LtvSystem;
use crate::lqr::{self, LqrWeights};
use crate::num::Real;
use crate::robust::{GainReport, RobustSettings};

/// Number of weight entries per candidate: 6 for `Q`, 4 for `R`, 6 for `S`.
pub const WEIGHT_DIMS: usize = 16;

/// Substitute for the open lower endpoint 0 of every weight range.
pub const RANGE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub n_candidates: usize,
    pub q_range: (f64, f64),
    pub r_range: (f64, f64),
    pub s_range: (f64, f64),
    pub seed: u64,
    /// Stratify `log10` of each weight instead of its raw value.
    pub log_space: bool,
}

impl Default for SearchSpace {
    /// 1350 candidates, `Q, S ∈ [1e-6, 1e4)`, `R ∈ [1e-6, 1)`.
    fn default() -> Self {
        Self {
            n_candidates: 1350,
            q_range: (RANGE_FLOOR, 1e4),
            r_range: (RANGE_FLOOR, 1.0),
            s_range: (RANGE_FLOOR, 1e4),
            seed: 2019,
            log_space: false,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::InvalidInput("the search needs at least one candidate".into()));
        }
        for (name, (lo, hi)) in [("Q", self.q_range), ("R", self.r_range), ("S", self.s_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidInput(format!("{name} range must satisfy lower < upper")));
            }
            let floor = if name == "R" { lo > 0.0 } else { lo >= 0.0 };
            if !floor {
                return Err(Error::InvalidInput(format!("{name} range lower bound out of domain")));
            }
        }
        if self.log_space && self.q_range.0.min(self.s_range.0) <= 0.0 {
            return Err(Error::InvalidInput("log-space sampling needs positive lower bounds".into()));
        }
        Ok(())
    }

    fn ranges(&self) -> [(f64, f64); WEIGHT_DIMS] {
        let mut out = [self.q_range; WEIGHT_DIMS];
        out[6..10].fill(self.r_range);
        out
    }
}

/// `n` points in `[0, 1)^dims`, one per equal-width bin along every axis.
///
/// Point `i` on axis `j` lies in bin `perm_j[i]` at a uniform offset; each
/// axis uses an independent permutation.
pub fn unit_latin_hypercube<R: Rng + ?Sized>(n: usize, dims: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dims]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..dims {
        perm.shuffle(rng);
        for (i, point) in points.iter_mut().enumerate() {
            let u: f64 = rng.gen();
            point[j] = ((perm[i] as f64 + u) / n as f64).min(prev_float(1.0));
        }
    }
    points
}

fn prev_float(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

/// Candidate weight triples; deterministic in `space.seed`.
pub fn latin_hypercube<T: Real>(space: &SearchSpace) -> Result<Vec<LqrWeights<T>>> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    let unit = unit_latin_hypercube(space.n_candidates, WEIGHT_DIMS, &mut rng);
    let ranges = space.ranges();
    unit.iter()
        .map(|u| {
            let mut values = [T::zero(); WEIGHT_DIMS];
            for (j, (lo, hi)) in ranges.iter().enumerate() {
                let v = if space.log_space {
                    let (a, b) = (lo.log10(), hi.log10());
                    10f64.powf(a + u[j] * (b - a))
                } else {
                    lo + u[j] * (hi - lo)
                };
                values[j] = T::lit(v);
            }
            LqrWeights::from_array(&values)
        })
        .collect()
}

/// Inputs to the metric that do not depend on the candidate.
#[derive(Debug, Clone, Copy)]
pub struct SearchContext<'a, T: Real> {
    pub ltv: &'a LtvSystem<T>,
    pub settings: &'a RobustSettings<T>,
}

/// Riccati → gain → extended system → `J_RP` for one weight triple.
pub fn evaluate_candidate<T: Real>(ctx: &SearchContext<'_, T>, w: &LqrWeights<T>) -> Result<GainReport<T>> {
    let gains = lqr::design(ctx.ltv, w)?;
    ctx.settings.evaluate(ctx.ltv, &gains)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct CandidateMetric<T: Real> {
    pub index: usize,
    pub weights: LqrWeights<T>,
    /// `None` when the Riccati or Gramian integration diverged.
    pub gamma_tm: Option<T>,
    pub gamma_tf: Option<T>,
    /// `+∞` for divergent candidates.
    pub j_rp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct SearchResult<T: Real> {
    pub best_index: usize,
    pub best_weights: LqrWeights<T>,
    pub best_metric: GainReport<T>,
    pub all_metrics: Vec<CandidateMetric<T>>,
    pub seed: Option<u64>,
}

impl<T: Real> SearchResult<T> {
    /// Best `J_RP` among the first `k + 1` candidates, for every `k`.
    pub fn running_best(&self) -> Vec<f64> {
        self.all_metrics
            .iter()
            .scan(f64::INFINITY, |best, m| {
                *best = best.min(m.j_rp);
                Some(*best)
            })
            .collect()
    }

    pub fn diverged(&self) -> usize {
        self.all_metrics.iter().filter(|m| m.gamma_tf.is_none()).count()
    }
}

/// Evaluates every candidate (in parallel on the current rayon pool) and
/// returns the one with the smallest `J_RP`; ties go to the lowest index.
pub fn select_weights<T: Real>(
    candidates: &[LqrWeights<T>],
    ctx: &SearchContext<'_, T>,
    seed: Option<u64>,
) -> Result<SearchResult<T>> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates to search".into()));
    }
    let reports: Vec<Option<GainReport<T>>> = candidates
        .par_iter()
        .map(|w| match evaluate_candidate(ctx, w) {
            Ok(r) => Ok(Some(r)),
            Err(Error::RiccatiDiverged { .. } | Error::GramianDiverged { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(usize, f64)> = None;
    let all_metrics: Vec<_> = candidates
        .iter()
        .zip(&reports)
        .enumerate()
        .map(|(index, (w, r))| {
            let j_rp = r.as_ref().map_or(f64::INFINITY, |r| r.j_rp.as_f64());
            let j_rp = if j_rp.is_nan() { f64::INFINITY } else { j_rp };
            if j_rp.is_finite() && best.is_none_or(|(_, b)| j_rp < b) {
                best = Some((index, j_rp));
            }
            CandidateMetric {
                index,
                weights: *w,
                gamma_tm: r.as_ref().map(|r| r.gamma_tm),
                gamma_tf: r.as_ref().map(|r| r.gamma_tf),
                j_rp,
            }
        })
        .collect();
    let (best_index, _) = best.ok_or(Error::SearchFailed { candidates: candidates.len() })?;
    Ok(SearchResult {
        best_index,
        best_weights: candidates[best_index],
        best_metric: reports[best_index].clone().expect("best candidate converged"),
        all_metrics,
        seed,
    })
}

//! JSON run configuration. Angles are given in degrees here and nowhere else.

use std::path::Path;

use anyhow::{anyhow, Context};
use nalgebra::{SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use sts_core::model::N_PARAMS;
use sts_core::planner;
use sts_core::robust::{self, build_parameter_filter};
use sts_core::search::SearchSpace;
use sts_core::simulator::{SafetyThresholds, DEFAULT_POSITION_TOL, DEFAULT_SPEED_TOL};
use sts_core::{AllocationSpec, LqrWeights, ManeuverSpec, ParameterBox, ParameterVector, RobustSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Maneuver {
    /// Dynamic strategy: starts at θ = (90°, −90°, 90°).
    Sts1,
    /// Quasi-static strategy: starts with the CoM above the ankle.
    Sts2,
    Custom(CustomManeuver),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomManeuver {
    pub theta0_deg: [f64; 3],
    pub theta2_final_deg: f64,
    pub x_com_final: f64,
    pub y_com_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParametersConfig {
    /// `m1 m2 m3 I1 I2 I3 l1 l2 l3 lc1 lc2 lc3`.
    pub nominal: [f64; N_PARAMS],
    pub half_widths: [f64; N_PARAMS],
}

impl Default for ParametersConfig {
    fn default() -> Self {
        let b = ParameterBox::standard();
        let mut nominal = [0.0; N_PARAMS];
        let mut half_widths = [0.0; N_PARAMS];
        nominal.copy_from_slice(b.nominal.as_vector().as_slice());
        half_widths.copy_from_slice(b.half_widths.as_slice());
        Self { nominal, half_widths }
    }
}

/// Bounds use `null` for "unbounded".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationConfig {
    /// Diagonal of `W_u` for `(τ1, τ2, Fx, Fy)`.
    pub weights: [f64; 4],
    pub lower: [Option<f64>; 4],
    pub upper: [Option<f64>; 4],
}

impl Default for AllocationConfig {
    fn default() -> Self {
        Self {
            weights: [1.0, 1.0, 10.0, 1.0],
            lower: [None, None, None, Some(0.0)],
            upper: [None; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    /// Filter bandwidth `a` (rad/s).
    pub bandwidth: f64,
    pub output_weights: [f64; 6],
    pub alpha: f64,
    pub t_m: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            bandwidth: robust::DEFAULT_BANDWIDTH,
            output_weights: robust::DEFAULT_OUTPUT_WEIGHTS,
            alpha: robust::DEFAULT_ALPHA,
            t_m: robust::DEFAULT_T_M,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub q: [f64; 6],
    pub r: [f64; 4],
    pub s: [f64; 6],
}

impl WeightsConfig {
    /// Reference weights for the dynamic strategy.
    pub fn tuned_sts1() -> Self {
        Self {
            q: [3237.0, 5534.0, 6546.0, 7918.0, 4003.0, 8516.0],
            r: [0.3659, 0.0155, 0.1433, 0.1553],
            s: [1068.0, 5396.0, 1324.0, 9467.0, 3975.0, 5819.0],
        }
    }

    /// Reference weights for the quasi-static strategy.
    pub fn tuned_sts2() -> Self {
        Self {
            q: [3766.0, 9550.0, 2932.0, 8378.0, 9552.0, 9242.0],
            r: [0.1119, 0.0252, 0.3600, 0.3045],
            s: [9565.0, 820.0, 5316.0, 5779.0, 6083.0, 8877.0],
        }
    }

    pub fn to_weights(&self) -> sts_core::Result<LqrWeights> {
        LqrWeights::new(SVector::from(self.q), Vector4::from(self.r), SVector::from(self.s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub draws: usize,
    pub seed: u64,
    /// Final `|x_CoM|` threshold (m).
    pub position_tol: f64,
    /// Final CoM speed threshold (m/s).
    pub speed_tol: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self { draws: 200, seed: 7, position_tol: DEFAULT_POSITION_TOL, speed_tol: DEFAULT_SPEED_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub maneuver: Maneuver,
    pub t_final: f64,
    pub grid_points: usize,
    pub parameters: ParametersConfig,
    pub allocation: AllocationConfig,
    pub robust: RobustConfig,
    /// Weights for the `gains` stage; defaults to the reference weights of
    /// the chosen preset maneuver.
    pub gains: Option<WeightsConfig>,
    pub search: SearchSpace,
    pub monte_carlo: MonteCarloConfig,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            maneuver: Maneuver::Sts1,
            t_final: 3.5,
            grid_points: 701,
            parameters: ParametersConfig::default(),
            allocation: AllocationConfig::default(),
            robust: RobustConfig::default(),
            gains: None,
            search: SearchSpace::default(),
            monte_carlo: MonteCarloConfig::default(),
            output_dir: "out".into(),
        }
    }
}

fn at(path: &str) -> impl Fn(sts_core::Error) -> anyhow::Error + '_ {
    move |e| anyhow!("config `{path}`: {e}")
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("parsing run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies a command-line seed to both the search and the Monte Carlo draws.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.search.seed = seed;
        self.monte_carlo.seed = seed;
        self
    }

    /// Checks every section against its owning module's validation.
    pub fn validate(&self) -> anyhow::Result<()> {
        let p = self.nominal_parameters()?;
        let spec = self.maneuver_spec()?;
        spec.validate(&p).map_err(at("maneuver"))?;
        self.parameter_box()?;
        self.allocation_spec()?;
        self.robust_settings()?;
        self.search.validate().map_err(at("search"))?;
        if let Some(w) = &self.gains {
            w.to_weights().map_err(at("gains"))?;
        }
        if self.monte_carlo.draws == 0 {
            return Err(anyhow!("config `monte_carlo.draws`: at least one draw is required"));
        }
        if !(self.monte_carlo.position_tol > 0.0 && self.monte_carlo.speed_tol > 0.0) {
            return Err(anyhow!("config `monte_carlo`: thresholds must be positive"));
        }
        Ok(())
    }

    pub fn nominal_parameters(&self) -> anyhow::Result<ParameterVector> {
        ParameterVector::from_slice(&self.parameters.nominal).map_err(at("parameters.nominal"))
    }

    pub fn parameter_box(&self) -> anyhow::Result<ParameterBox> {
        ParameterBox::new(self.nominal_parameters()?, SVector::from(self.parameters.half_widths))
            .map_err(at("parameters.half_widths"))
    }

    pub fn maneuver_spec(&self) -> anyhow::Result<ManeuverSpec> {
        let base = match &self.maneuver {
            Maneuver::Sts1 => ManeuverSpec::sts1(),
            Maneuver::Sts2 => ManeuverSpec::sts2(),
            Maneuver::Custom(c) => planner::ManeuverSpec {
                theta0: Vector3::from(c.theta0_deg.map(f64::to_radians)),
                z_final: Vector3::new(c.theta2_final_deg.to_radians(), c.x_com_final, c.y_com_final),
                ..ManeuverSpec::sts1()
            },
        };
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(anyhow!("config `t_final`: must be positive"));
        }
        if self.grid_points < 3 {
            return Err(anyhow!("config `grid_points`: at least 3 points are required"));
        }
        Ok(ManeuverSpec { t_final: self.t_final, grid_points: self.grid_points, ..base })
    }

    pub fn allocation_spec(&self) -> anyhow::Result<AllocationSpec> {
        let a = &self.allocation;
        let spec = planner::AllocationSpec {
            weights: Vector4::from(a.weights),
            lower: Vector4::from(a.lower.map(|b| b.unwrap_or(f64::NEG_INFINITY))),
            upper: Vector4::from(a.upper.map(|b| b.unwrap_or(f64::INFINITY))),
        };
        spec.validate().map_err(at("allocation"))?;
        Ok(spec)
    }

    pub fn robust_settings(&self) -> anyhow::Result<RobustSettings> {
        let r = &self.robust;
        let settings = robust::RobustSettings {
            filter: build_parameter_filter(&self.parameter_box()?, r.bandwidth).map_err(at("robust.bandwidth"))?,
            output_weights: SVector::from(r.output_weights),
            alpha: r.alpha,
            t_m: r.t_m,
        };
        settings.validate().map_err(at("robust"))?;
        if !r.output_weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
            return Err(anyhow!("config `robust.output_weights`: must be positive"));
        }
        if r.t_m > self.t_final {
            return Err(anyhow!("config `robust.t_m`: must not exceed t_final"));
        }
        Ok(settings)
    }

    /// Weights for the `gains` stage.
    pub fn fixed_weights(&self) -> anyhow::Result<LqrWeights> {
        let w = match (&self.gains, &self.maneuver) {
            (Some(w), _) => w.clone(),
            (None, Maneuver::Sts1) => WeightsConfig::tuned_sts1(),
            (None, Maneuver::Sts2) => WeightsConfig::tuned_sts2(),
            (None, Maneuver::Custom(_)) => {
                return Err(anyhow!("config `gains`: custom maneuvers need explicit weights"))
            }
        };
        w.to_weights().map_err(at("gains"))
    }

    pub fn thresholds(&self) -> SafetyThresholds {
        SafetyThresholds { position: self.monte_carlo.position_tol, speed: self.monte_carlo.speed_tol }
    }
}

//! Stage runner. Every stage reads what it needs from the output directory and
//! writes its own artifacts there; nothing is recomputed implicitly.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use sts_core::io;
use sts_core::linearizer::linearize;
use sts_core::lqr::{design, GainSchedule};
use sts_core::model::JointState;
use sts_core::planner::build_reference;
use sts_core::search::{latin_hypercube, select_weights, SearchContext};
use sts_core::simulator::{feedback_benefit, monte_carlo, monte_carlo_with, simulate_closed_loop, MonteCarloReport};
use sts_core::{GainReport, LqrWeights, LtvSystem, ReferenceTrajectory, SimulationResult};

use crate::config::RunConfig;
use crate::plot::{self, Panel, Series};

pub const REFERENCE_CSV: &str = "reference.csv";
pub const PLAN_JSON: &str = "plan.json";
pub const GAINS_CSV: &str = "gains.csv";
pub const GAINS_JSON: &str = "gains.json";
pub const SEARCH_LOG_CSV: &str = "search_log.csv";
pub const SEARCH_JSON: &str = "search.json";
pub const NOMINAL_CSV: &str = "nominal.csv";
pub const MONTE_CARLO_CSV: &str = "monte_carlo.csv";
pub const SIMULATE_JSON: &str = "simulate.json";
pub const STATES_SVG: &str = "states.svg";
pub const INPUTS_SVG: &str = "inputs.svg";
pub const COM_SVG: &str = "com.svg";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Plan,
    Gains,
    Search,
    Simulate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Plan => "plan",
            Stage::Gains => "gains",
            Stage::Search => "search",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PlanSummary {
    pub maneuver: String,
    pub grid_points: usize,
    pub t_final: f64,
    pub theta0_deg: [f64; 3],
    /// `(θ₂ [deg], x_CoM, y_CoM)` at both ends.
    pub z_initial: [f64; 3],
    pub z_final: [f64; 3],
    pub min_fy: f64,
    pub max_abs_input: [f64; 4],
}

#[derive(Debug, Serialize)]
pub struct SearchSummary {
    pub n_candidates: usize,
    pub seed: u64,
    pub log_space: bool,
    pub best_index: usize,
    pub best: GainReport,
    pub diverged: usize,
}

#[derive(Debug, Serialize)]
pub struct SimulateSummary {
    pub draws: usize,
    pub seed: u64,
    pub position_tol: f64,
    pub speed_tol: f64,
    pub position_pass: usize,
    pub speed_pass: usize,
    pub both_pass: usize,
    pub diverged: usize,
    pub position_pass_rate: f64,
    pub speed_pass_rate: f64,
    pub max_final_com_error: Option<f64>,
    pub max_final_com_speed: Option<f64>,
    pub nominal_final_com_error: f64,
    pub nominal_final_com_speed: f64,
    pub open_loop_both_pass: usize,
    pub open_loop_diverged: usize,
    /// Draws where feedback ends no further from the reference than open loop.
    pub feedback_benefit: usize,
}

/// Runs one stage against `out`, on a dedicated pool when `workers` is set.
pub fn run_stage(cfg: &RunConfig, out: &Path, stage: Stage, workers: Option<usize>) -> anyhow::Result<String> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let run = || match stage {
        Stage::Plan => plan(cfg, out),
        Stage::Gains => gains(cfg, out),
        Stage::Search => search(cfg, out),
        Stage::Simulate => simulate(cfg, out),
        Stage::Report => report(cfg, out),
    };
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .context("building worker pool")?;
            pool.install(run)
        }
        None => run(),
    }
    .with_context(|| format!("stage `{}`", stage.name()))
}

fn create(out: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = out.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("writing {}", path.display()))?))
}

fn open(out: &Path, name: &str, producers: &str) -> anyhow::Result<BufReader<File>> {
    let path = out.join(name);
    match File::open(&path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(anyhow!(
            "missing artifact {}: run the {producers} stage first",
            path.display()
        )),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

fn write_json<S: Serialize>(out: &Path, name: &str, value: &S) -> anyhow::Result<()> {
    let mut w = create(out, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_text(out: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    fs::write(out.join(name), text).with_context(|| format!("writing {}", out.join(name).display()))
}

pub fn load_reference(out: &Path) -> anyhow::Result<ReferenceTrajectory> {
    Ok(io::read_reference_csv(open(out, REFERENCE_CSV, "`plan`")?)?)
}

pub fn load_gains(out: &Path) -> anyhow::Result<GainSchedule<f64>> {
    Ok(io::read_gains_csv(open(out, GAINS_CSV, "`gains` or `search`")?)?)
}

fn plan(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let spec = cfg.maneuver_spec()?;
    let traj = build_reference(&spec, &cfg.allocation_spec()?, &cfg.nominal_parameters()?)?;
    let mut w = create(out, REFERENCE_CSV)?;
    io::write_reference_csv(&traj, &mut w)?;
    w.flush()?;

    let task = |k: usize| {
        let z = traj.z_bar[k];
        [z[0].to_degrees(), z[1], z[2]]
    };
    let mut max_abs_input = [0.0f64; 4];
    for u in &traj.u_bar {
        for (m, v) in max_abs_input.iter_mut().zip(u.iter()) {
            *m = m.max(v.abs());
        }
    }
    let summary = PlanSummary {
        maneuver: maneuver_name(cfg),
        grid_points: traj.len(),
        t_final: traj.t_final(),
        theta0_deg: [0, 1, 2].map(|i| spec.theta0[i].to_degrees()),
        z_initial: task(0),
        z_final: task(traj.len() - 1),
        min_fy: traj.u_bar.iter().map(|u| u[3]).fold(f64::INFINITY, f64::min),
        max_abs_input,
    };
    write_json(out, PLAN_JSON, &summary)?;
    Ok(format!(
        "plan: {} points, z(t_f) = ({:.3} deg, {:.4} m, {:.4} m), min Fy = {:.3} N",
        summary.grid_points, summary.z_final[0], summary.z_final[1], summary.z_final[2], summary.min_fy
    ))
}

fn maneuver_name(cfg: &RunConfig) -> String {
    match &cfg.maneuver {
        crate::config::Maneuver::Sts1 => "sts1".into(),
        crate::config::Maneuver::Sts2 => "sts2".into(),
        crate::config::Maneuver::Custom(_) => "custom".into(),
    }
}

fn linearized(cfg: &RunConfig, out: &Path) -> anyhow::Result<(ReferenceTrajectory, LtvSystem)> {
    let traj = load_reference(out)?;
    let ltv = linearize(&traj, &cfg.nominal_parameters()?)?;
    Ok((traj, ltv))
}

fn write_gain_artifacts(out: &Path, gains: &GainSchedule<f64>, report: &GainReport) -> anyhow::Result<()> {
    let mut w = create(out, GAINS_CSV)?;
    io::write_gains_csv(gains, &mut w)?;
    w.flush()?;
    write_json(out, GAINS_JSON, report)
}

fn gains(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let (_, ltv) = linearized(cfg, out)?;
    let weights = cfg.fixed_weights()?;
    let schedule = design(&ltv, &weights)?;
    let report = cfg.robust_settings()?.evaluate(&ltv, &schedule)?;
    write_gain_artifacts(out, &schedule, &report)?;
    Ok(format!(
        "gains: J_RP = {:.4} (gamma(t_m) = {:.4}, gamma(t_f) = {:.4})",
        report.j_rp, report.gamma_tm, report.gamma_tf
    ))
}

fn search(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let (_, ltv) = linearized(cfg, out)?;
    let settings = cfg.robust_settings()?;
    let candidates: Vec<LqrWeights> = latin_hypercube(&cfg.search)?;
    let ctx = SearchContext { ltv: &ltv, settings: &settings };
    let result = select_weights(&candidates, &ctx, Some(cfg.search.seed))?;

    let mut w = create(out, SEARCH_LOG_CSV)?;
    io::write_search_log(&result, &mut w)?;
    w.flush()?;
    let summary = SearchSummary {
        n_candidates: candidates.len(),
        seed: cfg.search.seed,
        log_space: cfg.search.log_space,
        best_index: result.best_index,
        best: result.best_metric.clone(),
        diverged: result.diverged(),
    };
    write_json(out, SEARCH_JSON, &summary)?;

    let schedule = design(&ltv, &result.best_weights)?;
    write_gain_artifacts(out, &schedule, &result.best_metric)?;
    Ok(format!(
        "search: best candidate {} of {} with J_RP = {:.4} ({} diverged)",
        result.best_index,
        candidates.len(),
        result.best_metric.j_rp,
        summary.diverged
    ))
}

fn max_metric(report: &MonteCarloReport, f: impl Fn(&sts_core::simulator::DrawOutcome) -> Option<f64>) -> Option<f64> {
    if report.diverged > 0 {
        return None;
    }
    report.draws.iter().filter_map(f).reduce(f64::max)
}

fn simulate(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let traj = load_reference(out)?;
    let schedule = load_gains(out)?;
    let p = cfg.nominal_parameters()?;
    let bounds = cfg.parameter_box()?;
    let w_e = cfg.robust_settings()?.output_weights;
    let mc = &cfg.monte_carlo;

    let nominal = simulate_closed_loop(&JointState::from_vector(&traj.x_bar[0]), &p, &traj, &schedule)?;
    let mut w = create(out, NOMINAL_CSV)?;
    io::write_simulation_csv(&nominal, &mut w)?;
    w.flush()?;

    let closed = monte_carlo(&traj, &schedule, &bounds, mc.draws, mc.seed, cfg.thresholds(), &w_e)?;
    let params = sts_core::simulator::sample_parameters(&bounds, mc.draws, mc.seed);
    let open = monte_carlo_with(&traj, &GainSchedule::zeros(traj.grid), &params, mc.seed, cfg.thresholds(), &w_e)?;
    let mut w = create(out, MONTE_CARLO_CSV)?;
    io::write_monte_carlo_csv(&closed, &mut w)?;
    w.flush()?;

    let n = closed.draws.len() as f64;
    let summary = SimulateSummary {
        draws: closed.draws.len(),
        seed: mc.seed,
        position_tol: mc.position_tol,
        speed_tol: mc.speed_tol,
        position_pass: closed.position_pass,
        speed_pass: closed.speed_pass,
        both_pass: closed.both_pass,
        diverged: closed.diverged,
        position_pass_rate: closed.position_pass as f64 / n,
        speed_pass_rate: closed.speed_pass as f64 / n,
        max_final_com_error: max_metric(&closed, |d| d.final_com_error),
        max_final_com_speed: max_metric(&closed, |d| d.final_com_speed),
        nominal_final_com_error: nominal.final_com_error(),
        nominal_final_com_speed: nominal.final_com_speed(),
        open_loop_both_pass: open.both_pass,
        open_loop_diverged: open.diverged,
        feedback_benefit: feedback_benefit(&closed, &open).into_iter().filter(|b| *b).count(),
    };
    write_json(out, SIMULATE_JSON, &summary)?;
    Ok(format!(
        "simulate: {}/{} draws within {} m, {}/{} within {} m/s; feedback no worse than open loop on {}/{}",
        summary.position_pass,
        summary.draws,
        mc.position_tol,
        summary.speed_pass,
        summary.draws,
        mc.speed_tol,
        summary.feedback_benefit,
        summary.draws
    ))
}

/// Plotted points per curve are thinned to every `PLOT_STRIDE`-th sample.
const PLOT_STRIDE: usize = 5;

fn thinned(times: &[f64], values: impl Fn(usize) -> f64) -> Vec<(f64, f64)> {
    let last = times.len() - 1;
    (0..times.len())
        .filter(|k| k % PLOT_STRIDE == 0 || *k == last)
        .map(|k| (times[k], values(k)))
        .collect()
}

fn ensemble_series(points: Vec<(f64, f64)>) -> Series {
    Series { points, color: "#1f77b4", width: 0.8, opacity: 0.25, dashed: false }
}

fn nominal_series(points: Vec<(f64, f64)>) -> Series {
    Series { points, color: "#000000", width: 2.0, opacity: 1.0, dashed: true }
}

fn report(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    let traj = load_reference(out)?;
    let schedule = load_gains(out)?;
    let params = io::read_monte_carlo_params(open(out, MONTE_CARLO_CSV, "`simulate`")?)?;
    let x0 = JointState::from_vector(&traj.x_bar[0]);
    use rayon::prelude::*;
    let runs: Vec<SimulationResult> = params
        .par_iter()
        .filter_map(|p| simulate_closed_loop(&x0, p, &traj, &schedule).ok())
        .collect();
    let t = &traj.times;

    let state_names = ["θ1 [deg]", "θ2 [deg]", "θ3 [deg]", "θ̇1 [deg/s]", "θ̇2 [deg/s]", "θ̇3 [deg/s]"];
    let states: Vec<Panel> = (0..6)
        .map(|i| {
            let mut series: Vec<Series> =
                runs.iter().map(|r| ensemble_series(thinned(&r.times, |k| r.states[k][i].to_degrees()))).collect();
            series.push(nominal_series(thinned(t, |k| traj.x_bar[k][i].to_degrees())));
            Panel { title: state_names[i].into(), x_label: "t [s]".into(), series }
        })
        .collect();

    let input_names = ["τ1 [N·m]", "τ2 [N·m]", "Fx [N]", "Fy [N]"];
    let inputs: Vec<Panel> = (0..4)
        .map(|i| {
            let mut series: Vec<Series> =
                runs.iter().map(|r| ensemble_series(thinned(&r.times, |k| r.inputs[k][i]))).collect();
            series.push(nominal_series(thinned(t, |k| traj.u_bar[k][i])));
            Panel { title: input_names[i].into(), x_label: "t [s]".into(), series }
        })
        .collect();

    let last = traj.len() - 1;
    let path_of = |f: &dyn Fn(usize) -> (f64, f64)| -> Vec<(f64, f64)> {
        (0..=last).filter(|k| k % PLOT_STRIDE == 0 || *k == last).map(f).collect()
    };
    let mut com_path: Vec<Series> = runs.iter().map(|r| ensemble_series(path_of(&|k| (r.outputs[k][1], r.outputs[k][2])))).collect();
    com_path.push(nominal_series(path_of(&|k| (traj.z_bar[k][1], traj.z_bar[k][2]))));
    let mut com = vec![Panel { title: "CoM path: y [m] vs x [m]".into(), x_label: "x_CoM [m]".into(), series: com_path }];
    for (i, name) in [(1, "x_CoM [m]"), (2, "y_CoM [m]")] {
        let mut series: Vec<Series> =
            runs.iter().map(|r| ensemble_series(thinned(&r.times, |k| r.outputs[k][i]))).collect();
        series.push(nominal_series(thinned(t, |k| traj.z_bar[k][i])));
        com.push(Panel { title: name.into(), x_label: "t [s]".into(), series });
    }

    let label = maneuver_name(cfg).to_uppercase();
    write_text(out, STATES_SVG, &plot::render(&format!("{label} joint states"), &states, 3))?;
    write_text(out, INPUTS_SVG, &plot::render(&format!("{label} inputs"), &inputs, 2))?;
    write_text(out, COM_SVG, &plot::render(&format!("{label} centre of mass"), &com, 3))?;
    Ok(format!(
        "report: {} ensemble runs plotted ({} diverged and omitted)",
        runs.len(),
        params.len() - runs.len()
    ))
}

/// Resolves the output directory: command line first, then the config.
pub fn output_dir(cfg: &RunConfig, cli: Option<PathBuf>) -> PathBuf {
    cli.unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
}

//! CSV serialization of the pipeline's gridded artifacts.
//!
//! Floats are written in shortest round-trip form, so a write/read cycle is
//! lossless and repeated writes are byte-identical.

use std::io::{Read, Write};

use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::grid::UniformGrid;
use crate::lqr::{GainMatrix, GainSchedule};
use crate::model::{ParameterVector, StateVector, N_PARAMS};
use crate::num::Real;
use crate::planner::ReferenceTrajectory;
use crate::search::SearchResult;
use crate::simulator::{MonteCarloReport, SimulationResult};

fn format_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, row: &[f64]) -> Result<()> {
    w.write_record(row.iter().map(|v| v.to_string())).map_err(format_err)
}

/// Parses every data row as a vector of `width` floats.
fn read_rows<R: Read>(r: R, header: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(r);
    let found: Vec<String> = rdr.headers().map_err(format_err)?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Format(format!("unexpected header {found:?}")));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(format_err)?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("row {}: {e}", line + 1)))?;
        if row.len() != header.len() {
            return Err(Error::Format(format!("row {} has {} fields", line + 1, row.len())));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn grid_from_rows<T: Real>(rows: &[Vec<f64>]) -> Result<(UniformGrid<T>, Vec<T>)> {
    let times: Vec<T> = rows.iter().map(|r| T::lit(r[0])).collect();
    let grid = UniformGrid::from_times(&times)?;
    Ok((grid, grid.times()))
}

pub fn reference_header() -> Vec<String> {
    [
        "t", "theta1", "theta2", "theta3", "theta1_dot", "theta2_dot", "theta3_dot", "tau1", "tau2", "fx", "fy",
        "z1", "z2", "z3", "z1_dot", "z2_dot", "z3_dot",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// One row per grid point: `t, θ, θ̇, u, z, ż` (SI units, radians).
pub fn write_reference_csv<T: Real, W: Write>(traj: &ReferenceTrajectory<T>, out: W) -> Result<()> {
    let mut w = writer(out);
    w.write_record(reference_header()).map_err(format_err)?;
    for k in 0..traj.len() {
        let mut row = vec![traj.times[k].as_f64()];
        row.extend(traj.x_bar[k].iter().map(|v| v.as_f64()));
        row.extend(traj.u_bar[k].iter().map(|v| v.as_f64()));
        row.extend(traj.z_bar[k].iter().map(|v| v.as_f64()));
        row.extend(traj.z_bar_dot[k].iter().map(|v| v.as_f64()));
        write_row(&mut w, &row)?;
    }
    w.flush().map_err(format_err)
}

/// Reads a reference written by [`write_reference_csv`]. `z̈`, which the file
/// does not carry, is rebuilt from `ż` by second-order finite differences.
pub fn read_reference_csv<T: Real, R: Read>(input: R) -> Result<ReferenceTrajectory<T>> {
    let rows = read_rows(input, &reference_header())?;
    if rows.len() < 3 {
        return Err(Error::Format("a reference needs at least 3 rows".into()));
    }
    let (grid, times) = grid_from_rows::<T>(&rows)?;
    let col = |r: &Vec<f64>, i: usize| T::lit(r[i]);
    let x_bar: Vec<StateVector<T>> = rows.iter().map(|r| StateVector::from_fn(|i, _| col(r, 1 + i))).collect();
    let u_bar = rows.iter().map(|r| Vector4::from_fn(|i, _| col(r, 7 + i))).collect();
    let z_bar = rows.iter().map(|r| Vector3::from_fn(|i, _| col(r, 11 + i))).collect();
    let z_bar_dot: Vec<Vector3<T>> = rows.iter().map(|r| Vector3::from_fn(|i, _| col(r, 14 + i))).collect();
    let n = rows.len();
    let h = grid.dt;
    let two = T::lit(2.0);
    let z_bar_ddot = (0..n)
        .map(|k| {
            let d = &z_bar_dot;
            if k == 0 {
                (d[1] * T::lit(4.0) - d[0] * T::lit(3.0) - d[2]) / (two * h)
            } else if k == n - 1 {
                (d[n - 1] * T::lit(3.0) - d[n - 2] * T::lit(4.0) + d[n - 3]) / (two * h)
            } else {
                (d[k + 1] - d[k - 1]) / (two * h)
            }
        })
        .collect();
    let traj = ReferenceTrajectory { grid, times, x_bar, u_bar, z_bar, z_bar_dot, z_bar_ddot };
    traj.check_consistent()?;
    Ok(traj)
}

pub fn gains_header() -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for i in 0..4 {
        for j in 0..6 {
            h.push(format!("k{}{}", i + 1, j + 1));
        }
    }
    h
}

/// `t` plus the 24 gain entries in row-major order.
pub fn write_gains_csv<T: Real, W: Write>(gains: &GainSchedule<T>, out: W) -> Result<()> {
    let mut w = writer(out);
    w.write_record(gains_header()).map_err(format_err)?;
    for (t, k) in gains.times.iter().zip(&gains.k) {
        let mut row = vec![t.as_f64()];
        for i in 0..4 {
            row.extend((0..6).map(|j| k[(i, j)].as_f64()));
        }
        write_row(&mut w, &row)?;
    }
    w.flush().map_err(format_err)
}

/// Gain schedule without weight provenance (that lives in the JSON record).
pub fn read_gains_csv<T: Real, R: Read>(input: R) -> Result<GainSchedule<T>> {
    let rows = read_rows(input, &gains_header())?;
    if rows.len() < 2 {
        return Err(Error::Format("a gain schedule needs at least 2 rows".into()));
    }
    let (grid, times) = grid_from_rows::<T>(&rows)?;
    let k = rows
        .iter()
        .map(|r| GainMatrix::from_fn(|i, j| T::lit(r[1 + 6 * i + j])))
        .collect();
    Ok(GainSchedule { grid, times, k, weights: None })
}

/// Candidate index, 16 weights, `γ(t_m)`, `γ(t_f)`, `J_RP` (empty gammas and
/// `inf` for divergent candidates).
pub fn write_search_log<T: Real, W: Write>(result: &SearchResult<T>, out: W) -> Result<()> {
    let mut w = writer(out);
    let mut header = vec!["index".to_string()];
    header.extend((1..=6).map(|i| format!("q{i}")));
    header.extend((1..=4).map(|i| format!("r{i}")));
    header.extend((1..=6).map(|i| format!("s{i}")));
    header.extend(["gamma_tm", "gamma_tf", "j_rp"].map(String::from));
    w.write_record(&header).map_err(format_err)?;
    for m in &result.all_metrics {
        let mut row = vec![m.index.to_string()];
        row.extend(m.weights.to_array().iter().map(|v| v.as_f64().to_string()));
        let opt = |v: Option<T>| v.map_or(String::new(), |v| v.as_f64().to_string());
        row.push(opt(m.gamma_tm));
        row.push(opt(m.gamma_tf));
        row.push(m.j_rp.to_string());
        w.write_record(&row).map_err(format_err)?;
    }
    w.flush().map_err(format_err)
}

/// Draw index, 12 parameters and the end-state metrics (empty when diverged).
pub fn write_monte_carlo_csv<W: Write>(report: &MonteCarloReport, out: W) -> Result<()> {
    let mut w = writer(out);
    let mut header = vec!["draw".to_string()];
    header.extend(ParameterVector::<f64>::names().iter().map(|s| s.to_string()));
    header.extend(
        ["final_x_com_error", "final_com_speed", "max_dev_tau1", "max_dev_tau2", "max_dev_fx", "max_dev_fy"]
            .map(String::from),
    );
    header.push("final_output_deviation".into());
    w.write_record(&header).map_err(format_err)?;
    for d in &report.draws {
        let mut row = vec![d.index.to_string()];
        row.extend(d.params.iter().map(|v| v.to_string()));
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        row.push(opt(d.final_com_error));
        row.push(opt(d.final_com_speed));
        for i in 0..4 {
            row.push(opt(d.max_input_deviation.map(|m| m[i])));
        }
        row.push(opt(d.final_output_deviation));
        w.write_record(&row).map_err(format_err)?;
    }
    w.flush().map_err(format_err)
}

/// Parameter vectors of a Monte Carlo CSV, in draw order.
pub fn read_monte_carlo_params<R: Read>(input: R) -> Result<Vec<ParameterVector<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(format_err)?;
        let values = (1..=N_PARAMS)
            .map(|i| rec.get(i).unwrap_or("").parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(format_err)?;
        out.push(ParameterVector::from_slice(&values)?);
    }
    Ok(out)
}

/// State, input and output histories of one simulation.
pub fn write_simulation_csv<T: Real, W: Write>(sim: &SimulationResult<T>, out: W) -> Result<()> {
    let mut w = writer(out);
    let mut header = vec!["t".to_string()];
    header.extend(["theta1", "theta2", "theta3", "theta1_dot", "theta2_dot", "theta3_dot"].map(String::from));
    header.extend(["tau1", "tau2", "fx", "fy"].map(String::from));
    header.extend(["theta2_out", "x_com", "y_com", "theta2_dot_out", "x_com_dot", "y_com_dot"].map(String::from));
    w.write_record(&header).map_err(format_err)?;
    for k in 0..sim.states.len() {
        let mut row = vec![sim.times[k].as_f64()];
        row.extend(sim.states[k].iter().map(|v| v.as_f64()));
        row.extend(sim.inputs[k].iter().map(|v| v.as_f64()));
        row.extend(sim.outputs[k].iter().map(|v| v.as_f64()));
        write_row(&mut w, &row)?;
    }
    w.flush().map_err(format_err)
}

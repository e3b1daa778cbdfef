//! Scenario parsing, run orchestration, and result emission.
//!
//! Scenarios are TOML documents (see `scenarios/canonical.toml`). Each run
//! produces a per-step CSV with a fixed column order, a JSON metrics summary,
//! and an echo of the fully resolved scenario; comparison runs add a
//! `comparison.json` with both summaries and their deltas.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::sim::{self, Metrics, Scenario, SimLog, VehicleKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehicleOverride {
    Omni,
    Under,
    Both,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario_path: PathBuf,
    pub output_dir: PathBuf,
    pub vehicle: VehicleOverride,
    pub seed: Option<u64>,
    pub emit_csv: bool,
    pub emit_json: bool,
    pub verbosity: u8,
}

impl RunConfig {
    pub fn new(scenario_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario_path: scenario_path.into(),
            output_dir: output_dir.into(),
            vehicle: VehicleOverride::Omni,
            seed: None,
            emit_csv: true,
            emit_json: true,
            verbosity: 0,
        }
    }
}

/// Parses and fully validates a scenario document, applying documented
/// defaults for omitted optional fields.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let scenario: Scenario = toml::from_str(text)?;
    scenario.resolved()
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    parse_scenario(&text)
}

fn check_finite(name: &str, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Validation(format!(
            "non-finite value in output column `{name}` — pipeline bug"
        )));
    }
    Ok(value)
}

/// Fixed, documented column order:
/// t, px..pz, vx..vz, qw..qz, wx..wz, thrust_1..n, rate_1..n,
/// misalign_bs_rad, misalign_uav2_rad, margin_bs, margin_uav2,
/// snr_bs_db, snr_uav2_db, rate_bps_hz, cost, kkt, iters, converged.
pub fn csv_header(rotor_count: usize) -> String {
    let mut header = String::from("t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz");
    for i in 1..=rotor_count {
        write!(header, ",thrust_{i}").unwrap();
    }
    for i in 1..=rotor_count {
        write!(header, ",rate_{i}").unwrap();
    }
    header.push_str(
        ",misalign_bs_rad,misalign_uav2_rad,margin_bs,margin_uav2,\
         snr_bs_db,snr_uav2_db,rate_bps_hz,cost,kkt,iters,converged",
    );
    header
}

pub fn log_to_csv(log: &SimLog) -> Result<String> {
    let rotor_count = log
        .entries
        .first()
        .map(|e| e.state.actuator_values.len())
        .ok_or_else(|| Error::InvalidInput("cannot emit an empty log".into()))?;
    let mut out = csv_header(rotor_count);
    out.push('\n');
    for e in &log.entries {
        let q = e.state.attitude.as_ref();
        let mut fields: Vec<f64> = vec![
            e.t,
            e.state.position.x,
            e.state.position.y,
            e.state.position.z,
            e.state.velocity.x,
            e.state.velocity.y,
            e.state.velocity.z,
            q.w,
            q.i,
            q.j,
            q.k,
            e.state.angular_velocity.x,
            e.state.angular_velocity.y,
            e.state.angular_velocity.z,
        ];
        fields.extend(e.state.actuator_values.iter());
        fields.extend(e.commanded_rates.iter());
        fields.extend([
            e.link_bs.misalignment_tx,
            e.link_uav2.misalignment_tx,
            e.margins[0],
            e.margins[1],
            e.link_bs.snr_db,
            e.link_uav2.snr_db,
            e.end_to_end_rate,
            e.cost,
            e.kkt_residual,
            e.iterations as f64,
        ]);
        let mut row = String::new();
        for (i, v) in fields.iter().enumerate() {
            check_finite("row", *v)?;
            if i > 0 {
                row.push(',');
            }
            write!(row, "{v}").unwrap();
        }
        write!(row, ",{}", if e.converged { 1 } else { 0 }).unwrap();
        out.push_str(&row);
        out.push('\n');
    }
    Ok(out)
}

fn metrics_to_value(m: &Metrics) -> Value {
    serde_json::to_value(m).expect("metrics serialize")
}

fn check_metrics_finite(m: &Metrics) -> Result<()> {
    if let Value::Object(map) = metrics_to_value(m) {
        for (k, v) in map {
            check_finite(&k, v.as_f64().unwrap_or(f64::NAN))?;
        }
    }
    Ok(())
}

fn run_one(scenario: &Scenario, kind: VehicleKind) -> Result<(SimLog, Metrics)> {
    let mut sc = scenario.clone();
    sc.vehicle.kind = kind;
    let log = sim::run_closed_loop(&sc)?;
    let m = sim::metrics(&log)?;
    check_metrics_finite(&m)?;
    Ok((log, m))
}

fn write_outputs(
    config: &RunConfig,
    kind: VehicleKind,
    log: &SimLog,
    m: &Metrics,
) -> Result<()> {
    if config.emit_csv {
        let path = config.output_dir.join(format!("run_{kind}.csv"));
        fs::write(path, log_to_csv(log)?)?;
    }
    if config.emit_json {
        let path = config.output_dir.join(format!("metrics_{kind}.json"));
        fs::write(path, serde_json::to_string_pretty(&m).expect("metrics serialize"))?;
    }
    Ok(())
}

fn delta_metrics(omni: &Metrics, under: &Metrics) -> Value {
    let a = metrics_to_value(omni);
    let b = metrics_to_value(under);
    let mut delta = Map::new();
    if let (Value::Object(a), Value::Object(b)) = (a, b) {
        for (key, va) in a {
            let d = va.as_f64().unwrap_or(f64::NAN) - b[&key].as_f64().unwrap_or(f64::NAN);
            delta.insert(key, json!(d));
        }
    }
    Value::Object(delta)
}

fn comparison_value(omni: &Metrics, under: &Metrics) -> Value {
    json!({
        "omni": metrics_to_value(omni),
        "under": metrics_to_value(under),
        "delta": delta_metrics(omni, under),
    })
}

fn print_comparison_table(omni: &Metrics, under: &Metrics) {
    let (o, u, d) = (
        metrics_to_value(omni),
        metrics_to_value(under),
        delta_metrics(omni, under),
    );
    println!("{:<36} {:>14} {:>14} {:>14}", "metric", "omni", "under", "delta");
    if let (Value::Object(o), Value::Object(u), Value::Object(d)) = (o, u, d) {
        for (key, vo) in &o {
            println!(
                "{:<36} {:>14.6} {:>14.6} {:>14.6}",
                key,
                vo.as_f64().unwrap_or(f64::NAN),
                u[key].as_f64().unwrap_or(f64::NAN),
                d[key].as_f64().unwrap_or(f64::NAN),
            );
        }
    }
}

fn prepare(config: &RunConfig) -> Result<Scenario> {
    let mut scenario = load_scenario(&config.scenario_path)?;
    if let Some(seed) = config.seed {
        scenario.rng_seed = seed;
    }
    fs::create_dir_all(&config.output_dir)?;
    fs::write(
        config.output_dir.join("scenario_resolved.json"),
        serde_json::to_string_pretty(&scenario).expect("scenario serialize"),
    )?;
    Ok(scenario)
}

/// Runs the requested vehicle(s) and writes CSV/JSON artifacts. Solver
/// non-convergence shows up in the metrics, not in the exit status.
pub fn cmd_run(config: &RunConfig) -> Result<()> {
    let scenario = prepare(config)?;
    match config.vehicle {
        VehicleOverride::Omni => {
            let (log, m) = run_one(&scenario, VehicleKind::Omni)?;
            write_outputs(config, VehicleKind::Omni, &log, &m)?;
        }
        VehicleOverride::Under => {
            let (log, m) = run_one(&scenario, VehicleKind::Under)?;
            write_outputs(config, VehicleKind::Under, &log, &m)?;
        }
        VehicleOverride::Both => {
            let (log_o, m_o) = run_one(&scenario, VehicleKind::Omni)?;
            write_outputs(config, VehicleKind::Omni, &log_o, &m_o)?;
            let (log_u, m_u) = run_one(&scenario, VehicleKind::Under)?;
            write_outputs(config, VehicleKind::Under, &log_u, &m_u)?;
            fs::write(
                config.output_dir.join("comparison.json"),
                serde_json::to_string_pretty(&comparison_value(&m_o, &m_u))
                    .expect("comparison serialize"),
            )?;
        }
    }
    Ok(())
}

/// Runs both vehicles on the identical scenario and seed, emits
/// `comparison.json`, and prints a fixed-format metric table.
pub fn cmd_compare(config: &RunConfig) -> Result<()> {
    let scenario = prepare(config)?;
    let (log_o, m_o) = run_one(&scenario, VehicleKind::Omni)?;
    write_outputs(config, VehicleKind::Omni, &log_o, &m_o)?;
    let (log_u, m_u) = run_one(&scenario, VehicleKind::Under)?;
    write_outputs(config, VehicleKind::Under, &log_u, &m_u)?;
    fs::write(
        config.output_dir.join("comparison.json"),
        serde_json::to_string_pretty(&comparison_value(&m_o, &m_u)).expect("comparison serialize"),
    )?;
    print_comparison_table(&m_o, &m_u);
    Ok(())
}

/// Debug helper: solves the finite-horizon problem at time `t` from the
/// scenario's initial state and prints a one-solution summary.
pub fn cmd_solve_ocp(scenario_path: &Path, t: f64) -> Result<()> {
    let scenario = load_scenario(scenario_path)?;
    if t < 0.0 || t > scenario.duration {
        return Err(Error::InvalidInput(format!(
            "--at {t} outside [0, {}]",
            scenario.duration
        )));
    }
    let params = scenario.vehicle.params();
    let state = scenario.initial_mrav_state(&params)?;
    let horizon = scenario.nmpc.horizon;
    let step_dt = scenario.nmpc.step_dt;
    let mut references = Vec::with_capacity(horizon + 1);
    let mut predictions = Vec::with_capacity(horizon + 1);
    for i in 0..=horizon {
        let ti = (t + i as f64 * step_dt).min(scenario.duration);
        let r = scenario.relay_reference_position(ti);
        references.push(crate::comms::OutputVec::new(r.x, r.y, r.z, 0.0, 0.0));
        predictions.push(scenario.uav2_position(ti.min(scenario.duration))?);
    }
    let problem = crate::nmpc::OcpProblem {
        initial_state: state,
        references,
        vehicle: params,
        comm: scenario.comm.clone(),
        bs_position: scenario.bs_position,
        uav2_positions: predictions,
        config: scenario.nmpc.clone(),
    };
    let solution = crate::nmpc::solve(&problem, None)?;
    println!("t = {t} s, horizon N = {horizon}, step_dt = {step_dt} s");
    println!("cost                     {:.6e}", solution.cost);
    println!("kkt residual             {:.6e}", solution.kkt_residual);
    println!("max constraint violation {:.6e}", solution.max_constraint_violation);
    println!("iterations               {}", solution.iterations);
    println!("converged                {}", solution.converged);
    println!(
        "first rate command       [{}]",
        solution
            .thrust_rates
            .row(0)
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

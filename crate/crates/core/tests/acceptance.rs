//! Acceptance gate: nine criteria, each printed as one PASS/FAIL line.
//!
//! The criteria run sequentially inside a single test so the per-criterion
//! runtime budgets are measured without interference from parallel tests.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines
//! on success; on failure they appear in the captured output.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use omav_relay::cli::{self, RunConfig, VehicleOverride};
use omav_relay::comms::{
    antenna_gain, db_to_linear, free_space_path_loss, output_map, OutputVec,
};
use omav_relay::nmpc::{cost_gradient, finite_difference_jacobian, rollout, solve, OcpProblem};
use omav_relay::sim::{
    metrics, run_closed_loop, ReferenceSpec, Scenario, TrajectorySpec, VehicleKind, Waypoint,
};
use omav_relay::vehicle::{allocation_matrix, hover_trim, step, MravParams, MravState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn canonical_scenario() -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/canonical.toml");
    cli::load_scenario(&path).expect("canonical scenario loads")
}

fn assert_budget(start: Instant, budget: Duration, what: &str) {
    let elapsed = start.elapsed();
    assert!(
        elapsed <= budget,
        "{what} took {elapsed:?}, budget {budget:?}"
    );
}

fn state_distance(a: &MravState, b: &MravState) -> f64 {
    let dq = a.attitude.as_ref().coords - b.attitude.as_ref().coords;
    ((a.position - b.position).norm_squared()
        + (a.velocity - b.velocity).norm_squared()
        + dq.norm_squared()
        + (a.angular_velocity - b.angular_velocity).norm_squared())
    .sqrt()
}

fn integrate(params: &MravParams, state: &MravState, thrusts: &DVector<f64>, dt: f64, steps: usize) -> MravState {
    let mut s = state.clone();
    for _ in 0..steps {
        s = step(params, &s, thrusts, dt).expect("step");
    }
    s
}

fn criterion_1_dynamics_order() {
    let start = Instant::now();
    let params = MravParams::default_hexarotor();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let thrusts = DVector::from_fn(6, |_, _| rng.gen_range(1.0..5.0));
    let mut state = MravState::at_rest(Vector3::new(0.0, 0.0, 10.0), thrusts.clone());
    state.velocity = Vector3::new(0.3, -0.2, 0.1);
    state.angular_velocity = Vector3::new(2.0, -1.5, 1.0);
    state.attitude = UnitQuaternion::from_euler_angles(0.2, -0.1, 0.4);

    // order-4 convergence: halving dt divides the global error by ~16
    let t_final = 0.5;
    let coarse = integrate(&params, &state, &thrusts, 0.025, 20);
    let fine = integrate(&params, &state, &thrusts, 0.0125, 40);
    let reference = integrate(&params, &state, &thrusts, 0.00025, 2000);
    let e_coarse = state_distance(&coarse, &reference);
    let e_fine = state_distance(&fine, &reference);
    let ratio = e_coarse / e_fine;
    assert!(
        (12.0..=20.0).contains(&ratio),
        "convergence ratio {ratio} outside [12, 20] (errors {e_coarse:.3e} / {e_fine:.3e} over {t_final} s)"
    );

    // free fall: 1 s in 100 steps, analytic drop g/2
    let rest = MravState::at_rest(Vector3::zeros(), DVector::zeros(6));
    let zero = DVector::zeros(6);
    let fallen = integrate(&params, &rest, &zero, 0.01, 100);
    let dz = fallen.position.z;
    assert!(
        (dz + 4.905).abs() < 1e-6,
        "free-fall drop {dz} != -4.905 within 1e-6"
    );
    assert_budget(start, Duration::from_secs(1), "criterion 1");
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    sv.iter().filter(|s| **s > 1e-8 * max).count()
}

fn criterion_2_allocation() {
    let start = Instant::now();
    let hexa = MravParams::default_hexarotor();
    let quad = MravParams::default_quadrotor();
    assert_eq!(numerical_rank(&allocation_matrix(&hexa)), 6, "hexarotor rank");
    assert_eq!(numerical_rank(&allocation_matrix(&quad)), 4, "quadrotor rank");

    let untilted = MravParams::hexarotor(2.0, Vector3::new(0.02, 0.02, 0.04), 0.4, 0.0);
    let cases = [
        (hover_trim(&untilted).expect("untilted trim"), 3.27),
        (hover_trim(&hexa).expect("tilted trim"), 3.480),
        (hover_trim(&quad).expect("quad trim"), 3.679),
    ];
    for (trim, expect) in &cases {
        for value in trim.iter() {
            assert!(
                (value - expect).abs() < 1e-3,
                "hover trim {value} != {expect} within 1e-3"
            );
        }
    }
    assert_budget(start, Duration::from_secs(1), "criterion 2");
}

fn criterion_3_link_budget() {
    let start = Instant::now();
    let fspl = free_space_path_loss(100.0, 2.4e9).expect("fspl");
    assert!((fspl - 80.05).abs() < 0.01, "FSPL(100 m, 2.4 GHz) = {fspl}");

    let doubled = free_space_path_loss(200.0, 2.4e9).expect("fspl");
    let delta = doubled - fspl;
    let expect = 20.0 * 2.0_f64.log10();
    assert!(
        (delta - expect).abs() < 1e-9,
        "distance doubling added {delta} dB, expected {expect}"
    );

    let comm = canonical_scenario().comm;
    let antenna = &comm.relay_antenna_bs;
    let gain = antenna_gain(antenna, antenna.half_power_beamwidth / 2.0);
    let half_peak = db_to_linear(antenna.peak_gain_db) / 2.0;
    assert!(
        (gain - half_peak).abs() < 1e-12,
        "gain at half-power point {gain} != peak/2 = {half_peak}"
    );
    assert_budget(start, Duration::from_secs(1), "criterion 3");
}

/// Finite-horizon problem at the canonical scenario's initial state.
fn canonical_problem(scenario: &Scenario) -> OcpProblem {
    let params = scenario.vehicle.params();
    let initial_state = scenario.initial_mrav_state(&params).expect("initial state");
    let horizon = scenario.nmpc.horizon;
    let step_dt = scenario.nmpc.step_dt;
    let mut references = Vec::with_capacity(horizon + 1);
    let mut uav2_positions = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let t = (k as f64 * step_dt).min(scenario.duration);
        let r = scenario.relay_reference_position(t);
        references.push(OutputVec::new(r.x, r.y, r.z, 0.0, 0.0));
        uav2_positions.push(scenario.uav2_position(t).expect("uav2 position"));
    }
    OcpProblem {
        initial_state,
        references,
        vehicle: params,
        comm: scenario.comm.clone(),
        bs_position: scenario.bs_position,
        uav2_positions,
        config: scenario.nmpc.clone(),
    }
}

fn criterion_4_derivatives() {
    let start = Instant::now();
    let scenario = canonical_scenario();
    let problem = canonical_problem(&scenario);
    let n = 6;
    let horizon = problem.config.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for point in 0..20 {
        let rates = DMatrix::from_fn(horizon, n, |_, _| rng.gen_range(-5.0..5.0));
        let gn = cost_gradient(&problem, &rates).expect("gradient");

        let z = DVector::from_iterator(
            horizon * n,
            (0..horizon).flat_map(|k| (0..n).map(move |i| (k, i))).map(|(k, i)| rates[(k, i)]),
        );
        let scalar_cost = |x: &DVector<f64>| {
            let m = DMatrix::from_fn(horizon, n, |k, i| x[k * n + i]);
            DVector::from_element(1, rollout(&problem, &m).expect("rollout").cost)
        };
        let fd = finite_difference_jacobian(scalar_cost, &z, 1e-6);
        let fd = fd.row(0).transpose();
        let rel = (&gn - &fd).norm() / fd.norm().max(1e-12);
        assert!(
            rel < 1e-4,
            "point {point}: gradient relative error {rel} >= 1e-4"
        );
    }
    assert_budget(start, Duration::from_secs(30), "criterion 4");
}

fn criterion_5_solver_sanity() {
    let start = Instant::now();
    let scenario = canonical_scenario();
    let mut problem = canonical_problem(&scenario);

    // at-reference: hover state whose exact outputs are the reference
    let trim = hover_trim(&problem.vehicle).expect("trim");
    let hover = MravState::at_rest(Vector3::new(30.0, 0.0, 15.0), trim);
    let y0 = output_map(&hover, &problem.comm, &problem.bs_position, &problem.uav2_positions[0])
        .expect("output map");
    problem.initial_state = hover.clone();
    problem.references = vec![y0; problem.config.horizon + 1];
    problem.uav2_positions = vec![problem.uav2_positions[0]; problem.config.horizon + 1];
    let at_ref = solve(&problem, None).expect("at-reference solve");
    assert!(at_ref.converged, "at-reference problem did not converge");
    assert!(at_ref.cost < 1e-10, "at-reference cost {} >= 1e-10", at_ref.cost);

    // 1 m offset hover: returned cost below the zero-rate rollout
    let mut offset = problem.clone();
    offset.initial_state.position.x += 1.0;
    let r = scenario.relay_reference_position(0.0);
    offset.references =
        vec![OutputVec::new(r.x, r.y, r.z, 0.0, 0.0); offset.config.horizon + 1];
    let sol = solve(&offset, None).expect("offset solve");
    let zero_cost = rollout(&offset, &DMatrix::zeros(offset.config.horizon, 6))
        .expect("zero rollout")
        .cost;
    assert!(
        sol.cost < zero_cost,
        "offset-hover cost {} not below zero-rate cost {zero_cost}",
        sol.cost
    );

    // rate bounds hold exactly on every returned plan
    let lo = offset.vehicle.thrust_rate_min;
    let hi = offset.vehicle.thrust_rate_max;
    for plan in [&at_ref, &sol] {
        for rate in plan.thrust_rates.iter() {
            assert!(
                (lo..=hi).contains(rate),
                "returned rate {rate} outside [{lo}, {hi}]"
            );
        }
        if plan.converged {
            assert!(
                plan.max_constraint_violation < offset.config.solver.constraint_tolerance,
                "converged run violates constraints by {}",
                plan.max_constraint_violation
            );
        }
    }
    assert_budget(start, Duration::from_secs(30), "criterion 5");
}

/// Canonical scenario reduced to a regulation task: stationary peer, fixed
/// reference 1 m away from the initial hover position, tight solver settings
/// (the 12 s run affords them).
fn hover_scenario() -> Scenario {
    let mut sc = canonical_scenario();
    sc.duration = 12.0;
    sc.uav2 = TrajectorySpec::Waypoints(vec![Waypoint {
        t: 0.0,
        position: Vector3::new(60.0, 0.0, 20.0),
    }]);
    sc.relay_reference = ReferenceSpec::Fixed(Vector3::new(30.0, 0.0, 15.0));
    sc.initial_state.position = Vector3::new(31.0, 0.0, 15.0);
    sc.nmpc.solver.kkt_tolerance = 0.01;
    sc.nmpc.solver.constraint_tolerance = 0.01;
    sc.nmpc.solver.max_inner_iterations = 30;
    sc.nmpc.solver.max_outer_iterations = 6;
    sc
}

fn criterion_6_regulation() {
    let start = Instant::now();
    let sc = hover_scenario();
    let target = Vector3::new(30.0, 0.0, 15.0);
    let log = run_closed_loop(&sc).expect("hover run");
    for entry in &log.entries {
        if entry.t < 8.0 {
            continue;
        }
        let err = (entry.state.position - target).norm();
        assert!(
            err < 0.02,
            "t = {}: position error {err} m >= 2 cm",
            entry.t
        );
        for (i, margin) in entry.margins.iter().enumerate() {
            assert!(
                *margin > 0.0,
                "t = {}: alignment margin {i} = {margin} not positive",
                entry.t
            );
        }
    }
    assert_budget(start, Duration::from_secs(120), "criterion 6");
}

fn criterion_7_comparative() {
    let start = Instant::now();
    let sc = canonical_scenario();
    let mut under_sc = sc.clone();
    under_sc.vehicle.kind = VehicleKind::Under;

    let omni = metrics(&run_closed_loop(&sc).expect("omni run")).expect("omni metrics");
    let under = metrics(&run_closed_loop(&under_sc).expect("under run")).expect("under metrics");

    assert!(
        omni.alignment_satisfaction_fraction > under.alignment_satisfaction_fraction,
        "omni satisfaction {} not strictly above under {}",
        omni.alignment_satisfaction_fraction,
        under.alignment_satisfaction_fraction
    );
    assert!(
        omni.mean_end_to_end_rate_bps_hz >= under.mean_end_to_end_rate_bps_hz,
        "omni mean rate {} below under {}",
        omni.mean_end_to_end_rate_bps_hz,
        under.mean_end_to_end_rate_bps_hz
    );
    assert!(
        omni.alignment_satisfaction_fraction > 0.9,
        "omni satisfaction {} <= 0.9",
        omni.alignment_satisfaction_fraction
    );
    assert_budget(start, Duration::from_secs(300), "criterion 7");
}

fn criterion_8_reproducibility() {
    let dir = tempfile::tempdir().expect("tempdir");
    // shortened copy of the canonical scenario keeps the double run cheap
    let canonical = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/canonical.toml");
    let text = std::fs::read_to_string(canonical)
        .expect("read canonical")
        .replace("duration = 60.0", "duration = 6.0");
    let scenario_path = dir.path().join("short.toml");
    std::fs::write(&scenario_path, text).expect("write scenario");

    let mut bytes = Vec::new();
    for run in ["first", "second"] {
        let out = dir.path().join(run);
        std::fs::create_dir_all(&out).expect("out dir");
        let mut config = RunConfig::new(&scenario_path, &out);
        config.vehicle = VehicleOverride::Omni;
        cli::cmd_run(&config).expect("cmd_run");
        bytes.push(std::fs::read(out.join("run_omni.csv")).expect("csv"));
    }
    assert!(
        bytes[0] == bytes[1],
        "rerun produced different CSV bytes ({} vs {})",
        bytes[0].len(),
        bytes[1].len()
    );
}

fn criterion_9_wind_robustness() {
    let mut sc = canonical_scenario();
    sc.wind.enabled = true;
    sc.wind.sigma = Vector3::new(1.0, 1.0, 1.0);
    sc.wind.correlation_time = 2.0;

    let log = run_closed_loop(&sc).expect("wind run");
    for entry in &log.entries {
        let finite = entry.state.position.iter().all(|v| v.is_finite())
            && entry.state.velocity.iter().all(|v| v.is_finite())
            && entry.state.angular_velocity.iter().all(|v| v.is_finite())
            && entry.state.attitude.as_ref().coords.iter().all(|v| v.is_finite())
            && entry.margins.iter().all(|v| v.is_finite())
            && entry.end_to_end_rate.is_finite()
            && entry.cost.is_finite();
        assert!(finite, "non-finite value at t = {}", entry.t);
    }
    let m = metrics(&log).expect("wind metrics");
    assert!(
        m.solver_convergence_rate > 0.8,
        "convergence rate {} <= 0.8 under wind",
        m.solver_convergence_rate
    );
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn()); 9] = [
        ("1 dynamics order", criterion_1_dynamics_order),
        ("2 allocation structure", criterion_2_allocation),
        ("3 link-budget oracle", criterion_3_link_budget),
        ("4 derivative correctness", criterion_4_derivatives),
        ("5 solver sanity", criterion_5_solver_sanity),
        ("6 closed-loop regulation", criterion_6_regulation),
        ("7 comparative thesis", criterion_7_comparative),
        ("8 reproducibility", criterion_8_reproducibility),
        ("9 wind robustness", criterion_9_wind_robustness),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(()) => println!("acceptance {name}: PASS"),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| panic.downcast_ref::<&str>().copied())
                    .unwrap_or("panic");
                println!("acceptance {name}: FAIL ({msg})");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

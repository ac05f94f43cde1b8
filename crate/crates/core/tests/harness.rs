mod common;

use std::sync::{Arc, OnceLock};

use stint_core::controller::{ControllerConfig, PlanningContext, Variant};
use stint_core::harness::{
    compare_variants, oracle_solve, run_closed_loop, sweep_strategy, DisturbanceScenario, DriverModel, SweepSetup,
    FCY_SPEED,
};
use stint_core::liftcoast::CoastRules;
use stint_core::nominal::ChargeModel;
use stint_core::track::{max_kinetic_energy, GripState};

fn two_laps() -> Arc<PlanningContext> {
    static CTX: OnceLock<Arc<PlanningContext>> = OnceLock::new();
    CTX.get_or_init(|| common::setup(2, 20.0).context()).clone()
}

fn three_laps() -> Arc<PlanningContext> {
    static CTX: OnceLock<Arc<PlanningContext>> = OnceLock::new();
    CTX.get_or_init(|| common::setup(3, 30.0).context()).clone()
}

fn config(variant: Variant, k_p: f64, k_i: f64) -> ControllerConfig {
    ControllerConfig { variant, k_p, k_i, ..ControllerConfig::default() }
}

#[test]
fn undisturbed_open_loop_run_tracks_the_plan() {
    let ctx = two_laps();
    let log = run_closed_loop(
        config(Variant::FullyOnline, 0.0, 0.0),
        &DisturbanceScenario::none(),
        ctx.clone(),
        DriverModel::default(),
        0,
    )
    .unwrap();
    let m = &log.metrics;
    assert!(m.completed);
    let target = ctx.boundary.e_b_target;
    assert!((m.terminal_e_b - target).abs() <= 0.005 * target, "{} vs {}", m.terminal_e_b, target);
    let planned = ctx.plan.maps[0].cost;
    assert!((m.t_stint - planned).abs() <= 0.002 * planned, "{} vs {}", m.t_stint, planned);
    assert!(m.audit.residual < 1e-9);
}

#[test]
fn drafting_saves_energy_and_feedback_raises_the_threshold() {
    let ctx = two_laps();
    let s_stint = ctx.boundary.s_stint;
    let run = |scenario: &DisturbanceScenario, k_p| {
        run_closed_loop(config(Variant::FixedCostate, k_p, 0.0), scenario, ctx.clone(), DriverModel::default(), 0)
            .unwrap()
    };
    let nominal = run(&DisturbanceScenario::none(), 0.0);
    let draft = run(&DisturbanceScenario::drafting(s_stint), 0.0);
    // same coast points, less drag
    let first_lap = |log: &stint_core::harness::StintLog| log.laps[0].e_b_used;
    assert!(first_lap(&draft) < first_lap(&nominal));
    let fed = run(&DisturbanceScenario::drafting(s_stint), 0.5);
    let lambda_star = ctx.plan.maps[0].lambda_star;
    let row = fed.telemetry.iter().find(|r| r.s >= 1500.0).unwrap();
    assert!(row.lambda_star_adj > lambda_star, "{} vs {}", row.lambda_star_adj, lambda_star);
}

#[test]
fn oracle_without_disturbances_is_the_nominal_plan() {
    let ctx = two_laps();
    let oracle = oracle_solve(&DisturbanceScenario::none(), &ctx, CoastRules::default()).unwrap();
    assert_eq!(*oracle.plan, *ctx.plan);
    assert_eq!(oracle.convex.e_kin_max, ctx.convex.e_kin_max);
}

#[test]
fn oracle_caps_only_the_yellow_lap() {
    let ctx = three_laps();
    let oracle = oracle_solve(&DisturbanceScenario::full_course_yellow(), &ctx, CoastRules::default()).unwrap();
    let cap = ctx.params.kinetic_energy(FCY_SPEED);
    assert!((cap - 2.469e5).abs() < 1e2);
    let grid = &oracle.convex.grid;
    let free = max_kinetic_energy(&ctx.track, &ctx.params, &GripState::default(), grid).unwrap();
    let s_lap = ctx.track.s_lap;
    for (k, &s) in grid.nodes.iter().enumerate() {
        let got = oracle.convex.e_kin_max[k];
        if s >= s_lap && s < 2.0 * s_lap {
            assert_eq!(got, free[k].min(cap), "node at {s}");
        } else {
            assert_eq!(got, free[k], "node at {s}");
        }
    }
    assert!(grid.nodes.iter().any(|&s| s == s_lap) && grid.nodes.iter().any(|&s| s == 2.0 * s_lap));
}

#[test]
fn closed_loop_never_beats_the_oracle_under_a_yellow() {
    let ctx = three_laps();
    let scenario = DisturbanceScenario::full_course_yellow();
    let rows = compare_variants(
        &[scenario],
        &[Variant::FullyOnline],
        ControllerConfig::default(),
        ctx,
        DriverModel::default(),
        0,
    )
    .unwrap();
    assert_eq!(rows.len(), 1);
    let (row, log) = &rows[0];
    assert!(row.error.is_none(), "{:?}", row.error);
    assert!(row.loss_pct >= 0.0, "loss {}", row.loss_pct);
    assert!(log.as_ref().unwrap().metrics.energy_ok);
}

#[test]
fn closed_loop_runs_are_deterministic() {
    let ctx = two_laps();
    let scenario = DisturbanceScenario::tire_degradation(ctx.boundary.s_stint);
    let run = || {
        run_closed_loop(ControllerConfig::default(), &scenario, ctx.clone(), DriverModel::default(), 3).unwrap()
    };
    assert_eq!(run(), run());
}

fn sweep(n_laps: &[usize], t_charge: &[f64], charge: ChargeModel) -> Vec<stint_core::harness::SweepRow> {
    let s = common::setup(1, 0.0);
    let setup = SweepSetup { v0: s.config.v0, charge, rules: CoastRules::default() };
    sweep_strategy(n_laps, t_charge, &setup, s.track.clone(), &s.params, &s.config.maps()).unwrap()
}

#[test]
fn sweep_properties() {
    let t_charge = [0.0, 10.0, 20.0, 30.0, 45.0];
    let n_laps = [1, 2, 3];
    let base = sweep(&n_laps, &t_charge, ChargeModel::default());
    let fast = sweep(&n_laps, &t_charge, ChargeModel { p_charge: 2.0 * ChargeModel::default().p_charge, ..Default::default() });
    assert_eq!(base.len(), n_laps.len() * t_charge.len());
    let mut best_charge = Vec::new();
    for rows in base.chunks(t_charge.len()) {
        assert_eq!(rows.iter().filter(|r| r.optimal).count(), 1);
        best_charge.push(rows.iter().find(|r| r.optimal).unwrap().t_charge);
    }
    // longer stints want at least as much charge
    assert!(best_charge.windows(2).all(|w| w[1] >= w[0]), "{best_charge:?}");
    for (b, f) in base.iter().zip(&fast) {
        if b.feasible {
            assert!(f.feasible && f.avg <= b.avg + 1e-6, "{b:?} vs {f:?}");
        }
    }
}

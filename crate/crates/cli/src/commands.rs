//! The batch commands. Each writes its files into the output directory and
//! a `manifest.json` naming them together with the configuration hash.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use stint_core::controller::{PlanningContext, Variant};
use stint_core::harness::{
    compare_variants, oracle_solve, run_closed_loop, sweep_strategy, time_loss_pct, write_comparison, write_sweep,
    DisturbanceScenario, SweepSetup,
};
use stint_core::liftcoast::{simulate_stint, CoastPlan, SimOptions, ThrottleMap};
use stint_core::socp::{solve_horizon, HorizonModel, PlanSolution};
use stint_core::track::{build_grid, GridMode, GripState};

use crate::config::Resolved;
use crate::{CliError, CliResult};

/// Files written by one command.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(r: &Resolved) -> CliResult<Self> {
        fs::create_dir_all(&r.config.out)?;
        Ok(Self { dir: r.config.out.clone(), files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn json(&mut self, name: &str, value: &Value) -> CliResult<()> {
        let path = self.path(name);
        fs::write(path, serde_json::to_string_pretty(value)?)?;
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> CliResult<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn finish(self, command: &str, r: &Resolved) -> CliResult<()> {
        let mut stamp = r.stamp();
        stamp["command"] = json!(command);
        stamp["files"] = json!(self.files);
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&stamp)?)?;
        Ok(())
    }
}

fn with_stamp(r: &Resolved, mut body: Value) -> Value {
    if let (Value::Object(map), Value::Object(stamp)) = (&mut body, r.stamp()) {
        map.extend(stamp);
    }
    body
}

#[derive(Serialize)]
struct NodeRow {
    s: f64,
    e_kin: f64,
    e_kin_max: f64,
    v: f64,
    lethargy: f64,
    #[serde(rename = "F_m")]
    f_m: f64,
    #[serde(rename = "F_brake")]
    f_brake: f64,
    #[serde(rename = "F_dc")]
    f_dc: f64,
    #[serde(rename = "E_b")]
    e_b: f64,
    theta_m: f64,
    theta_b: f64,
    lambda_kin: f64,
}

#[derive(Serialize)]
struct PlotRow {
    s: f64,
    /// Motor power at the wheel [kW].
    power_kw: f64,
    #[serde(rename = "E_kin_MJ")]
    e_kin_mj: f64,
    #[serde(rename = "E_b_MJ")]
    e_b_mj: f64,
    theta_m: f64,
    theta_b: f64,
    lambda_kin: f64,
}

/// Solves the convex stint problem on the configured horizon.
pub fn optimize(r: &Resolved) -> CliResult<PlanSolution> {
    let grid = build_grid(&r.track, r.boundary.s0, r.boundary.s_stint, GridMode::Optimizer)?;
    let model = HorizonModel::new(&r.track, &r.params, &grid, &|_| GripState::default())?;
    let plan = solve_horizon(&model, &r.params, &r.boundary, None, 1)?;
    log::info!("{} after {} iterations in {:.2} s", plan.status, plan.iterations, plan.solve_time);
    let mut out = Outputs::new(r)?;
    out.json(
        "solution.json",
        &with_stamp(
            r,
            json!({
                "status": plan.status,
                "iterations": plan.iterations,
                "nodes": plan.grid.len(),
                "t_pred": plan.t_pred,
                "tightness_warning": plan.tightness_warning,
                "solution": plan,
            }),
        ),
    )?;
    let n = plan.grid.len();
    out.csv(
        "nodes.csv",
        (0..n).map(|k| NodeRow {
            s: plan.grid.nodes[k],
            e_kin: plan.e_kin[k],
            e_kin_max: plan.e_kin_max[k],
            v: plan.v[k],
            lethargy: plan.lethargy[k],
            f_m: plan.f_m[k],
            f_brake: plan.f_brake[k],
            f_dc: plan.f_dc[k],
            e_b: plan.e_b[k],
            theta_m: plan.theta_m[k],
            theta_b: plan.theta_b[k],
            lambda_kin: plan.lambda_kin[k],
        }),
    )?;
    out.csv(
        "plot.csv",
        (0..n).map(|k| PlotRow {
            s: plan.grid.nodes[k],
            power_kw: plan.f_m[k] * plan.v[k] / 1e3,
            e_kin_mj: plan.e_kin[k] / 1e6,
            e_b_mj: plan.e_b[k] / 1e6,
            theta_m: plan.theta_m[k],
            theta_b: plan.theta_b[k],
            lambda_kin: plan.lambda_kin[k],
        }),
    )?;
    out.finish("optimize", r)?;
    Ok(plan)
}

/// Per-map check that the stored bracket still straddles feasibility.
#[derive(Debug, Clone, Serialize)]
pub struct WitnessCheck {
    pub map: usize,
    pub lower: f64,
    pub upper: f64,
    pub lower_feasible: bool,
    pub upper_feasible: bool,
}

impl WitnessCheck {
    pub fn holds(&self) -> bool {
        self.lower_feasible && !self.upper_feasible
    }
}

/// Re-simulates both ends of every stored witness pair.
pub fn verify_witnesses(ctx: &PlanningContext, rules: stint_core::liftcoast::CoastRules) -> CliResult<Vec<WitnessCheck>> {
    let opts = SimOptions { rules, record: false, early_exit: true };
    let mut out = Vec::new();
    for m in &ctx.plan.maps {
        let Some((lower, upper)) = m.witness else { continue };
        let map = ThrottleMap { id: m.id, p_full: m.p_full };
        let run = |c: f64| simulate_stint(c, &ctx.plan.lambda_kin, &map, &ctx.boundary, &ctx.course, &ctx.params, opts);
        out.push(WitnessCheck {
            map: m.id,
            lower,
            upper,
            lower_feasible: run(lower)?.constraints_ok,
            upper_feasible: run(upper)?.constraints_ok,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct CostateRow {
    s: f64,
    lambda_kin: f64,
}

/// Solves both planning problems and writes the coast plan.
pub fn adapt(r: &Resolved) -> CliResult<Arc<PlanningContext>> {
    let ctx = Arc::new(r.prepare()?);
    let checks = verify_witnesses(&ctx, r.config.controller.rules())?;
    let mut out = Outputs::new(r)?;
    out.json(
        "coast_plan.json",
        &with_stamp(
            r,
            json!({
                "t_convex": ctx.convex.t_pred,
                "convex_status": ctx.convex.status,
                "maps": ctx.plan.maps,
                "witness_checks": checks,
            }),
        ),
    )?;
    write_costate(&mut out, &ctx.plan)?;
    out.finish("adapt", r)?;
    if let Some(bad) = checks.iter().find(|c| !c.holds()) {
        return Err(CliError::Runtime(format!(
            "witness pair for map {} does not bracket feasibility ({:e}, {:e})",
            bad.map, bad.lower, bad.upper
        )));
    }
    Ok(ctx)
}

fn write_costate(out: &mut Outputs, plan: &CoastPlan) -> CliResult<()> {
    out.csv(
        "costate.csv",
        plan.grid.nodes.iter().zip(&plan.lambda_kin).map(|(&s, &l)| CostateRow { s, lambda_kin: l }),
    )
}

/// Closed-loop run of one scenario, or the full comparison grid when the
/// scenario is `suite` or the variant list is requested.
pub fn simulate(r: &Resolved, all_variants: bool) -> CliResult<()> {
    let ctx = Arc::new(r.prepare()?);
    let cfg = &r.config;
    let scenarios = if cfg.scenario == "suite" {
        DisturbanceScenario::suite(r.boundary.s_stint)
    } else {
        vec![r.scenario()?]
    };
    let mut out = Outputs::new(r)?;
    if scenarios.len() > 1 || all_variants {
        let variants: Vec<Variant> = if all_variants {
            vec![Variant::FullyOnline, Variant::FixedCostate, Variant::FixedCostateAndThreshold]
        } else {
            vec![cfg.controller.variant]
        };
        let results = compare_variants(&scenarios, &variants, cfg.controller, ctx, cfg.driver, cfg.seed)?;
        let rows: Vec<_> = results.iter().map(|(row, _)| row.clone()).collect();
        write_comparison(&out.path("comparison.csv"), &rows)?;
        for (row, log) in &results {
            if let Some(log) = log {
                let name = format!("{}_{}", row.scenario.replace('+', "_"), row.variant);
                log.write(&out.path(&name), with_stamp(r, json!({})))?;
            }
        }
        out.json("comparison.json", &with_stamp(r, json!({ "rows": rows })))?;
        out.finish("simulate", r)?;
        if let Some(failed) = rows.iter().find(|row| row.error.is_some()) {
            return Err(CliError::Runtime(format!(
                "{} / {}: {}",
                failed.scenario,
                failed.variant,
                failed.error.as_deref().unwrap_or_default()
            )));
        }
        return Ok(());
    }
    let scenario = &scenarios[0];
    let oracle = oracle_solve(scenario, &ctx, cfg.controller.rules())?;
    let t_oracle = oracle.plan.map(cfg.controller.active_map).map(|m| m.cost);
    let mut log = run_closed_loop(cfg.controller, scenario, ctx, cfg.driver, cfg.seed)?;
    log.metrics.time_loss_vs_oracle = t_oracle.filter(|t| t.is_finite()).map(|t| time_loss_pct(log.metrics.t_stint, t));
    log.write(&out.path("log"), with_stamp(r, json!({ "t_oracle": t_oracle })))?;
    out.finish("simulate", r)?;
    if !log.metrics.completed {
        return Err(CliError::Runtime(format!("stint aborted: {:?}", log.metrics.violations)));
    }
    Ok(())
}

/// Average stint time over the configured grid of lap counts and charging
/// times.
pub fn sweep(r: &Resolved) -> CliResult<()> {
    let cfg = &r.config;
    let setup = SweepSetup { v0: cfg.boundary.v0, charge: cfg.charge, rules: cfg.controller.rules() };
    let rows = sweep_strategy(&cfg.sweep.n_laps, &cfg.sweep.t_charge, &setup, r.track.clone(), &r.params, &cfg.maps)?;
    let mut out = Outputs::new(r)?;
    write_sweep(&out.path("sweep.csv"), &rows)?;
    out.json("sweep.json", &with_stamp(r, json!({ "rows": rows })))?;
    out.finish("sweep", r)?;
    Ok(())
}

pub fn manifest(dir: &Path) -> CliResult<Value> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?)
}

//! Full-throttle-or-coast adaptation of the convex solution.
//!
//! The driver either holds full throttle (through a fixed throttle map) or
//! coasts, except where the braking envelope forces partial inputs. Coasting
//! happens where the robustified kinetic-energy co-state is at or above a
//! threshold, and the threshold is pushed as high as the energy and thermal
//! constraints allow by bisection over forward stint simulations.

use serde::{Deserialize, Serialize};

use crate::model::{
    braking_envelope, Ab2Stepper, ControlInput, Derivative, StepOutcome, VehicleParams,
    VehicleState,
};
use crate::socp::{robustify_costate, PlanSolution, StintBoundary};
use crate::track::{build_grid, max_kinetic_energy_with, Grid, GridMode, GripState, TrackProfile};
use crate::{Error, Result};

/// Default bisection tolerance as a fraction of the initial bracket width.
pub const DEFAULT_TOL_FRACTION: f64 = 1e-4;
/// Speed below which a simulated car counts as stalled [m/s].
const STALL_SPEED: f64 = 1.0;

/// Velocity-independent throttle map: full throttle is a fixed power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrottleMap {
    pub id: usize,
    #[serde(rename = "P_full")]
    pub p_full: f64,
}

impl ThrottleMap {
    pub fn validate(&self, params: &VehicleParams) -> Result<()> {
        if !(self.p_full > 0.0 && self.p_full <= params.p_max) {
            return Err(Error::InvalidInput(format!(
                "throttle map {} power {} W outside (0, P_max]",
                self.id, self.p_full
            )));
        }
        Ok(())
    }
}

/// Motor force requested by throttle position `u_th` at kinetic energy `e_kin`.
pub fn throttle_force(map: &ThrottleMap, u_th: f64, e_kin: f64, params: &VehicleParams) -> f64 {
    if u_th == 0.0 {
        return 0.0;
    }
    let v = params.speed(e_kin);
    u_th * params.f_m_max.min(map.p_full / v)
}

/// Extra conditions that suppress a coast instruction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CoastRules {
    /// No coasting below this speed [m/s].
    pub v_coast_min: Option<f64>,
    /// No coasting where the corner radius is below this value [m]
    /// (lift-off oversteer guard).
    pub min_coast_radius: Option<f64>,
}

impl CoastRules {
    pub fn allows(&self, speed: f64, kappa: f64) -> bool {
        if let Some(v) = self.v_coast_min {
            if speed < v {
                return false;
            }
        }
        if let Some(r) = self.min_coast_radius {
            if kappa.abs() * r > 1.0 {
                return false;
            }
        }
        true
    }
}

/// Coast decision of the threshold rule: ties coast.
pub fn coast_by_threshold(lambda: f64, threshold: f64) -> bool {
    lambda >= threshold
}

/// Takes a tentative full-throttle step from `stepper` without committing it.
///
/// The returned outcome is grip limited when full throttle would cross
/// `bound`; in that case its inputs come from the analytic inversion.
pub fn full_throttle_probe(
    stepper: &Ab2Stepper,
    map: &ThrottleMap,
    h: f64,
    bound: f64,
    params: &VehicleParams,
    grip: &GripState,
    grade: f64,
) -> Result<(Ab2Stepper, StepOutcome)> {
    let mut probe = stepper.clone();
    let input = ControlInput {
        f_m: throttle_force(map, 1.0, stepper.state.e_kin, params),
        f_brake: 0.0,
        u_th: 1.0,
    };
    let out = probe.step_bounded(input, h, bound, params, grip, grade)?;
    Ok((probe, out))
}

/// Per-node plant data on the 1 m simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Course {
    pub grid: Grid,
    pub e_kin_max: Vec<f64>,
    pub envelope: Vec<f64>,
    pub grip: Vec<GripState>,
    pub grade: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl Course {
    pub fn new(
        track: &TrackProfile,
        params: &VehicleParams,
        s0: f64,
        s_stint: f64,
        grip_at: impl Fn(f64) -> GripState,
    ) -> Result<Self> {
        let grid = build_grid(track, s0, s_stint, GridMode::Simulation)?;
        let e_kin_max = max_kinetic_energy_with(track, params, &grid, &grip_at)?;
        let envelope = braking_envelope(&e_kin_max, &grid, params, &grip_at);
        let grip = grid.nodes.iter().map(|&s| grip_at(s)).collect();
        let grade = grid.nodes.iter().map(|&s| track.grade_at(s)).collect();
        let kappa = grid.nodes.iter().map(|&s| track.kappa_at(s)).collect();
        Ok(Self {
            grid,
            e_kin_max,
            envelope,
            grip,
            grade,
            kappa,
        })
    }

    /// Same course restricted to `[s0, end]` (s0 snapped to the grid).
    pub fn tail(&self, s0: f64) -> Course {
        let k = self.grid.locate(s0);
        let k = if (self.grid.nodes[k + 1] - s0).abs() < 1e-9 {
            k + 1
        } else {
            k
        };
        let k = k.min(self.grid.len() - 2);
        Course {
            grid: Grid {
                nodes: self.grid.nodes[k..].to_vec(),
            },
            e_kin_max: self.e_kin_max[k..].to_vec(),
            envelope: self.envelope[k..].to_vec(),
            grip: self.grip[k..].to_vec(),
            grade: self.grade[k..].to_vec(),
            kappa: self.kappa[k..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Violations {
    /// First position where the battery dropped below E_b_min.
    pub battery_floor: Option<f64>,
    pub terminal_energy: bool,
    pub motor_temperature: Option<f64>,
    pub battery_temperature: Option<f64>,
    pub terminal_temperature: bool,
    pub stall: Option<f64>,
}

impl Violations {
    pub fn any(&self) -> bool {
        self.battery_floor.is_some()
            || self.terminal_energy
            || self.motor_temperature.is_some()
            || self.battery_temperature.is_some()
            || self.terminal_temperature
            || self.stall.is_some()
    }
}

/// One simulated node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub state: VehicleState,
    pub input: ControlInput,
    pub coast: bool,
    pub grip_limited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StintOutcome {
    pub t_stint: f64,
    pub constraints_ok: bool,
    pub violations: Violations,
    pub terminal: VehicleState,
    /// Filled only when recording was requested.
    pub trajectory: Vec<TrajectoryPoint>,
    /// Derivative applied on each interval (recording only).
    pub derivatives: Vec<Derivative>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimOptions {
    pub rules: CoastRules,
    pub record: bool,
    /// Stop at the first violated path constraint.
    pub early_exit: bool,
}

/// Forward full-throttle-or-coast simulation of the remaining stint with
/// coast threshold `lambda_c`. `lambda` is the co-state on `course.grid`.
pub fn simulate_stint(
    lambda_c: f64,
    lambda: &[f64],
    map: &ThrottleMap,
    boundary: &StintBoundary,
    course: &Course,
    params: &VehicleParams,
    opts: SimOptions,
) -> Result<StintOutcome> {
    let grid = &course.grid;
    if lambda.len() != grid.len() {
        return Err(Error::InvalidInput(format!(
            "co-state has {} entries for {} simulation nodes",
            lambda.len(),
            grid.len()
        )));
    }
    let mut stepper = Ab2Stepper::new(VehicleState {
        s: grid.nodes[0],
        ..boundary.x0
    });
    let mut violations = Violations::default();
    let mut trajectory = Vec::new();
    let mut derivs = Vec::new();
    let stall_energy = params.kinetic_energy(STALL_SPEED);

    for k in 0..grid.intervals() {
        let st = stepper.state;
        let step = (|| {
            let (probe, full) = full_throttle_probe(
                &stepper,
                map,
                grid.step(k),
                course.envelope[k + 1],
                params,
                &course.grip[k],
                course.grade[k],
            )?;
            let coast = !full.grip_limited
                && coast_by_threshold(lambda[k], lambda_c)
                && opts.rules.allows(params.speed(st.e_kin), course.kappa[k]);
            if coast {
                let out = stepper.step_bounded(
                    ControlInput::COAST,
                    grid.step(k),
                    course.envelope[k + 1],
                    params,
                    &course.grip[k],
                    course.grade[k],
                )?;
                Ok((out, true))
            } else {
                stepper = probe;
                Ok((full, false))
            }
        })();
        let (out, coast) = match step {
            Ok(v) => v,
            Err(Error::Stalled { s }) => {
                violations.stall = Some(s);
                break;
            }
            Err(e) => return Err(e),
        };
        if opts.record {
            trajectory.push(TrajectoryPoint {
                state: st,
                input: out.input,
                coast,
                grip_limited: out.grip_limited,
            });
            derivs.push(out.derivative);
        }
        let next = stepper.state;
        if next.e_kin < stall_energy {
            violations.stall = Some(next.s);
            break;
        }
        if next.e_b < params.e_b_min && violations.battery_floor.is_none() {
            violations.battery_floor = Some(next.s);
        }
        if next.theta_m > params.theta_m_max && violations.motor_temperature.is_none() {
            violations.motor_temperature = Some(next.s);
        }
        if next.theta_b > params.theta_b_max && violations.battery_temperature.is_none() {
            violations.battery_temperature = Some(next.s);
        }
        if opts.early_exit && violations.any() {
            break;
        }
    }
    let terminal = stepper.state;
    let finished = (terminal.s - grid.end()).abs() < 1e-6;
    if finished {
        violations.terminal_energy = terminal.e_b < boundary.e_b_target;
        violations.terminal_temperature = terminal.theta_b > boundary.theta_b_target;
    }
    if opts.record {
        trajectory.push(TrajectoryPoint {
            state: terminal,
            input: ControlInput::COAST,
            coast: false,
            grip_limited: false,
        });
    }
    Ok(StintOutcome {
        t_stint: terminal.t - boundary.x0.t,
        constraints_ok: finished && !violations.any(),
        violations,
        terminal,
        trajectory,
        derivatives: derivs,
    })
}

/// Result of maximizing a monotone feasibility threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bisection {
    /// Largest feasible threshold found (`None` when nothing was feasible).
    pub best: Option<f64>,
    pub cost: Option<f64>,
    /// Number of loop iterations (midpoint evaluations).
    pub iterations: usize,
    /// Total evaluations including the upper-endpoint probe.
    pub evaluations: usize,
    /// Final bracket: `lower` feasible (when `best` is set), `upper`
    /// infeasible unless the upper endpoint itself was feasible.
    pub lower: f64,
    pub upper: f64,
}

/// Outcome of one threshold evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probe {
    Feasible(f64),
    /// A limit is violated; the threshold must come down.
    Infeasible,
    /// The threshold is so low that the car stalls; it must go up.
    TooLow,
}

impl From<Option<f64>> for Probe {
    fn from(cost: Option<f64>) -> Self {
        cost.map_or(Probe::Infeasible, Probe::Feasible)
    }
}

/// Bisection on `[lo, hi]` for the largest `x` with `eval(x)` feasible.
///
/// The upper endpoint is probed first; the lower endpoint is never
/// evaluated.
pub fn bisect_max_feasible<P: Into<Probe>>(
    lo: f64,
    hi: f64,
    tol: f64,
    mut eval: impl FnMut(f64) -> Result<P>,
) -> Result<Bisection> {
    let mut evaluations = 1;
    if let Probe::Feasible(cost) = eval(hi)?.into() {
        return Ok(Bisection {
            best: Some(hi),
            cost: Some(cost),
            iterations: 0,
            evaluations,
            lower: hi,
            upper: hi,
        });
    }
    let (mut l, mut u) = (lo, hi);
    let mut best = None;
    let mut best_cost = None;
    let mut iterations = 0;
    while u - l > tol {
        let c = 0.5 * (l + u);
        iterations += 1;
        evaluations += 1;
        match eval(c)?.into() {
            Probe::Feasible(cost) => {
                l = c;
                best = Some(c);
                best_cost = Some(cost);
            }
            Probe::Infeasible => u = c,
            Probe::TooLow => l = c,
        }
    }
    Ok(Bisection {
        best,
        cost: best_cost,
        iterations,
        evaluations,
        lower: l,
        upper: u,
    })
}

/// Per-map outcome of the threshold search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPlan {
    pub id: usize,
    #[serde(rename = "P_full")]
    pub p_full: f64,
    pub lambda_star: f64,
    pub cost: f64,
    pub feasible: bool,
    pub evaluations: usize,
    /// Feasible/infeasible threshold pair bracketing `lambda_star`.
    pub witness: Option<(f64, f64)>,
}

/// Threshold search for one throttle map.
pub fn bisect_threshold(
    lambda: &[f64],
    map: &ThrottleMap,
    boundary: &StintBoundary,
    course: &Course,
    params: &VehicleParams,
    rules: CoastRules,
    tol_fraction: f64,
) -> Result<MapPlan> {
    let lo = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = tol_fraction * (hi - lo);
    let opts = SimOptions {
        rules,
        record: false,
        early_exit: true,
    };
    let b = bisect_max_feasible(lo, hi, tol, |c| {
        let out = simulate_stint(c, lambda, map, boundary, course, params, opts)?;
        let v = &out.violations;
        let stalled_only = v.stall.is_some()
            && v.battery_floor.is_none()
            && v.motor_temperature.is_none()
            && v.battery_temperature.is_none();
        Ok(match out.constraints_ok {
            true => Probe::Feasible(out.t_stint),
            false if stalled_only => Probe::TooLow,
            false => Probe::Infeasible,
        })
    })?;
    let feasible = b.best.is_some();
    let witness = match b.best {
        Some(best) if best < hi => Some((b.lower, b.upper)),
        _ => None,
    };
    Ok(MapPlan {
        id: map.id,
        p_full: map.p_full,
        lambda_star: b.best.unwrap_or(lo),
        cost: b.cost.unwrap_or(f64::INFINITY),
        feasible,
        evaluations: b.evaluations,
        witness,
    })
}

/// Lift-and-coast plan for a horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoastPlan {
    /// Robustified co-state on the 1 m simulation grid.
    pub grid: Grid,
    pub lambda_kin: Vec<f64>,
    pub maps: Vec<MapPlan>,
    /// Objective of the convex problem this plan adapts [s].
    pub t_pred: f64,
}

impl CoastPlan {
    pub fn map(&self, id: usize) -> Option<&MapPlan> {
        self.maps.iter().find(|m| m.id == id)
    }

    pub fn lambda_at(&self, s: f64) -> f64 {
        self.grid.interpolate(&self.lambda_kin, s)
    }

    pub fn bracket_width(&self) -> f64 {
        let lo = self
            .lambda_kin
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .lambda_kin
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }

    /// Exchange format: co-state and per-map thresholds only.
    pub fn to_dump(&self) -> serde_json::Value {
        serde_json::json!({
            "lambda_kin": self.lambda_kin,
            "maps": self.maps.iter().map(|m| serde_json::json!({
                "id": m.id,
                "P_full": m.p_full,
                "lambda_star": m.lambda_star,
                "cost": m.cost,
                "feasible": m.feasible,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Runs the threshold search for every map on a prepared course and
/// co-state. Maps are searched concurrently.
pub fn plan_maps(
    lambda: &[f64],
    maps: &[ThrottleMap],
    boundary: &StintBoundary,
    course: &Course,
    params: &VehicleParams,
    rules: CoastRules,
    tol_fraction: f64,
) -> Result<Vec<MapPlan>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = maps
            .iter()
            .map(|map| {
                scope.spawn(move || {
                    bisect_threshold(lambda, map, boundary, course, params, rules, tol_fraction)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bisection thread panicked"))
            .collect()
    })
}

/// Problem 2: robustify the convex co-state, resample it onto the course
/// grid and search a coast threshold for every throttle map.
pub fn solve_problem2(
    plan: &PlanSolution,
    maps: &[ThrottleMap],
    boundary: &StintBoundary,
    course: &Course,
    params: &VehicleParams,
    rules: CoastRules,
) -> Result<CoastPlan> {
    for m in maps {
        m.validate(params)?;
    }
    let robust = robustify_costate(plan);
    let lambda = plan.grid.resample(&robust, &course.grid);
    let results = plan_maps(
        &lambda,
        maps,
        boundary,
        course,
        params,
        rules,
        DEFAULT_TOL_FRACTION,
    )?;
    if !results.iter().any(|m| m.feasible) {
        return Err(Error::AllMapsInfeasible);
    }
    Ok(CoastPlan {
        grid: course.grid.clone(),
        lambda_kin: lambda,
        maps: results,
        t_pred: plan.t_pred,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn throttle_force_power_and_force_limits() {
        let p = VehicleParams {
            f_m_max: 8000.0,
            ..VehicleParams::default()
        };
        let map = ThrottleMap {
            id: 0,
            p_full: 300e3,
        };
        let e50 = p.kinetic_energy(50.0);
        assert_relative_eq!(
            throttle_force(&map, 1.0, e50, &p),
            6000.0,
            max_relative = 1e-12
        );
        assert_eq!(throttle_force(&map, 0.0, e50, &p), 0.0);
        let e10 = p.kinetic_energy(10.0);
        assert_eq!(throttle_force(&map, 1.0, e10, &p), 8000.0);
    }

    #[test]
    fn threshold_tie_coasts() {
        assert!(coast_by_threshold(-0.2, -0.2));
        assert!(coast_by_threshold(-0.1, -0.2));
        assert!(!coast_by_threshold(-0.3, -0.2));
    }

    #[test]
    fn synthetic_monotone_oracle() {
        let b = bisect_max_feasible(-1.0, 0.0, 1e-3, |x| Ok((x <= -0.25).then_some(1.0))).unwrap();
        let best = b.best.unwrap();
        assert!((-0.251..=-0.25).contains(&best), "{best}");
        assert_eq!(b.iterations, (1.0f64 / 1e-3).log2().ceil() as usize);
        assert!(b.upper - b.lower <= 1e-3);
        assert!(b.upper > -0.25);
    }

    #[test]
    fn feasible_upper_endpoint_returned() {
        let b = bisect_max_feasible(-1.0, 0.0, 1e-3, |_| Ok(Some(2.0))).unwrap();
        assert_eq!(b.best, Some(0.0));
        assert_eq!(b.evaluations, 1);
    }

    #[test]
    fn stall_band_pushes_bracket_up() {
        // stalls below -0.6, infeasible above -0.25
        let probe = |x: f64| {
            Ok(if x < -0.6 {
                Probe::TooLow
            } else if x <= -0.25 {
                Probe::Feasible(1.0)
            } else {
                Probe::Infeasible
            })
        };
        let b = bisect_max_feasible(-4.0, 0.0, 1e-3, probe).unwrap();
        let best = b.best.unwrap();
        assert!((-0.251..=-0.25).contains(&best), "{best}");
    }

    #[test]
    fn nothing_feasible() {
        let b = bisect_max_feasible(-1.0, 0.0, 1e-2, |_| Ok(None)).unwrap();
        assert!(b.best.is_none());
    }

    #[test]
    fn coast_rules() {
        let r = CoastRules {
            v_coast_min: Some(30.0),
            min_coast_radius: Some(100.0),
        };
        assert!(!r.allows(29.0, 0.0));
        assert!(r.allows(31.0, 0.005));
        assert!(!r.allows(31.0, 0.02));
        assert!(CoastRules::default().allows(1.0, 1.0));
    }
}

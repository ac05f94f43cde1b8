//! Shrinking-horizon MPC with PI threshold feedback.
//!
//! Three deployment variants share the same coast rule and differ in what is
//! recomputed on the car:
//!
//! * [`Variant::FullyOnline`] re-solves the convex problem and the threshold
//!   bisection from measured states every MPC period.
//! * [`Variant::FixedCostate`] keeps the initial co-state and only re-runs the
//!   bisection.
//! * [`Variant::FixedCostateAndThreshold`] keeps both and corrects the
//!   threshold from the measured energy-use rate.
//!
//! Feedback gains are dimensionless: corrections are expressed as fractions
//! of the width of the current plan's co-state range.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::liftcoast::{
    bisect_threshold, coast_by_threshold, simulate_stint, solve_problem2, CoastPlan, CoastRules, Course,
    MapPlan, SimOptions, ThrottleMap, DEFAULT_TOL_FRACTION,
};
use crate::model::{VehicleParams, VehicleState};
use crate::socp::{solve_horizon, HorizonModel, PlanSolution, StintBoundary};
use crate::track::{build_grid, GridMode, GripState, Grid, TrackProfile};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullyOnline,
    FixedCostate,
    FixedCostateAndThreshold,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::FullyOnline, Variant::FixedCostate, Variant::FixedCostateAndThreshold];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::FullyOnline => "fully_online",
            Variant::FixedCostate => "fixed_costate",
            Variant::FixedCostateAndThreshold => "fixed_costate_and_threshold",
        }
    }

    /// Whether the variant runs an MPC update at all.
    pub fn resolves(&self) -> bool {
        !matches!(self, Variant::FixedCostateAndThreshold)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub variant: Variant,
    /// Re-solve interval [s].
    pub mpc_period: f64,
    /// Simulated time between an MPC trigger and plan delivery [s].
    pub mpc_latency: f64,
    #[serde(rename = "K_p")]
    pub k_p: f64,
    /// Integral gain per kilometre.
    #[serde(rename = "K_i")]
    pub k_i: f64,
    /// Energy-rate measurement window [m].
    pub delta_s_window: f64,
    pub anti_windup_fcy: bool,
    pub v_coast_min: Option<f64>,
    pub min_coast_radius: Option<f64>,
    pub active_map: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FullyOnline,
            mpc_period: 20.0,
            mpc_latency: 2.5,
            k_p: 0.5,
            k_i: 0.01,
            delta_s_window: 4200.0,
            anti_windup_fcy: true,
            v_coast_min: None,
            min_coast_radius: None,
            active_map: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mpc_latency >= 0.0 && self.mpc_period > self.mpc_latency) {
            return Err(Error::InvalidInput(format!(
                "mpc_period {} must exceed the solve latency {}",
                self.mpc_period, self.mpc_latency
            )));
        }
        if !(self.k_p >= 0.0 && self.k_i >= 0.0) {
            return Err(Error::InvalidInput("feedback gains must be non-negative".into()));
        }
        if !(self.delta_s_window > 0.0) {
            return Err(Error::InvalidInput("delta_s_window must be positive".into()));
        }
        Ok(())
    }

    pub fn rules(&self) -> CoastRules {
        CoastRules { v_coast_min: self.v_coast_min, min_coast_radius: self.min_coast_radius }
    }
}

/// Predicted state trajectories of the active map's lift-and-coast plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub grid: Grid,
    pub e_kin: Vec<f64>,
    pub e_b: Vec<f64>,
    pub theta_m: Vec<f64>,
    pub theta_b: Vec<f64>,
}

impl Reference {
    /// Re-simulates `plan` for `map` on `course` from `boundary.x0`.
    pub fn simulate(
        plan: &CoastPlan,
        map: &MapPlan,
        boundary: &StintBoundary,
        course: &Course,
        params: &VehicleParams,
        rules: CoastRules,
    ) -> Result<Self> {
        let throttle = ThrottleMap { id: map.id, p_full: map.p_full };
        let opts = SimOptions { rules, record: true, early_exit: false };
        let out = simulate_stint(map.lambda_star, &plan.lambda_kin, &throttle, boundary, course, params, opts)?;
        let n = out.trajectory.len();
        let nodes = course.grid.nodes[..n].to_vec();
        let grid = if n >= 2 { Grid { nodes } } else { course.grid.clone() };
        let pick = |f: fn(&VehicleState) -> f64| out.trajectory.iter().map(|p| f(&p.state)).collect::<Vec<_>>();
        Ok(Self {
            grid,
            e_kin: pick(|s| s.e_kin),
            e_b: pick(|s| s.e_b),
            theta_m: pick(|s| s.theta_m),
            theta_b: pick(|s| s.theta_b),
        })
    }

    pub fn e_b_at(&self, s: f64) -> f64 {
        self.grid.interpolate(&self.e_b, s)
    }
}

/// A complete plan as installed in the controller.
#[derive(Debug, Clone)]
pub struct PlanSnapshot {
    pub plan: CoastPlan,
    pub reference: Reference,
    /// Measured state the plan starts from.
    pub x0: VehicleState,
    /// Width of the plan's co-state range, the unit of feedback corrections.
    pub costate_scale: f64,
    /// Course the plan was computed on.
    pub course: Arc<Course>,
    /// Lethargy of the convex solution, used to warm-start the next solve.
    pub lethargy: Option<(Grid, Vec<f64>)>,
}

impl PlanSnapshot {
    pub fn threshold(&self, map: usize) -> Option<f64> {
        self.plan.map(map).map(|m| m.lambda_star)
    }
}

/// Ring buffer of combined kinetic and battery energy over a distance window.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyWindow {
    samples: VecDeque<(f64, f64)>,
    first_s: Option<f64>,
}

impl EnergyWindow {
    pub fn push(&mut self, s: f64, energy: f64, window: f64) {
        self.first_s.get_or_insert(s);
        self.samples.push_back((s, energy));
        // keep the oldest sample at least one window back
        while self.samples.len() > 1 && s - self.samples[1].0 >= window {
            self.samples.pop_front();
        }
    }

    pub fn filled(&self, window: f64) -> bool {
        match (self.first_s, self.samples.back()) {
            (Some(a), Some(&(b, _))) => b - a >= window,
            _ => false,
        }
    }

    /// Measured energy use per metre over the buffered span.
    pub fn rate(&self) -> Option<f64> {
        let (&(s0, e0), &(s1, e1)) = (self.samples.front()?, self.samples.back()?);
        (s1 > s0).then(|| (e0 - e1) / (s1 - s0))
    }

    pub fn clear(&mut self) {
        self.samples.clear();
        self.first_s = None;
    }
}

/// Energy-rate error of the threshold-only variant [J/m]: measured use over
/// `ds` minus the energy still available spread over the remaining distance.
pub fn delta_x(measured_drop: f64, ds: f64, available: f64, remaining: f64) -> f64 {
    measured_drop / ds - available / remaining
}

/// PI law on the battery-energy error; `scale` converts the dimensionless
/// correction into co-state units.
pub fn feedback_threshold(lambda_star: f64, scale: f64, e: f64, integral: f64, config: &ControllerConfig) -> f64 {
    lambda_star + scale * (config.k_p * e + config.k_i * integral)
}

/// PI law on the normalized energy-rate error; over-consumption lowers the
/// threshold.
pub fn energy_rate_feedback(
    lambda_fixed: f64,
    scale: f64,
    delta: f64,
    integral: f64,
    config: &ControllerConfig,
) -> f64 {
    lambda_fixed - scale * (config.k_p * delta + config.k_i * integral)
}

/// Driver coast signal.
pub fn decide_signal(
    lambda_kin: f64,
    lambda_adj: f64,
    speed: f64,
    kappa: f64,
    grip_limited: bool,
    rules: &CoastRules,
) -> bool {
    !grip_limited && coast_by_threshold(lambda_kin, lambda_adj) && rules.allows(speed, kappa)
}

/// Mutable controller state.
#[derive(Debug, Clone, Default)]
pub struct ControllerState {
    pub snapshot: Option<Arc<PlanSnapshot>>,
    /// Plan delivered at a later simulated time.
    pub pending: Option<(f64, Arc<PlanSnapshot>)>,
    pub integral: f64,
    pub last_signal: bool,
    pub window: EnergyWindow,
    /// Allowed energy use per metre, frozen once less than a window remains.
    pub target_rate: Option<f64>,
    pub terminal: bool,
    pub last_error: f64,
    pub last_lambda_adj: f64,
}

/// What the controller knows about the current conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub grip: GripState,
    /// End of the current speed-cap window, when a cap is active.
    pub cap_until: Option<f64>,
}

impl Observation {
    pub fn nominal() -> Self {
        Self { grip: GripState::default(), cap_until: None }
    }

    /// Conditions assumed for the rest of the stint: the observed scales
    /// persist, a cap lasts until its announced end.
    pub fn assumed(&self, s: f64) -> GripState {
        let v_cap = match self.cap_until {
            Some(end) if s < end => self.grip.v_cap,
            _ => None,
        };
        GripState { v_cap, ..self.grip }
    }
}

/// Per-step controller output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub lambda_kin: f64,
    pub lambda_star_adj: f64,
    /// Battery-energy error (e) or normalized energy-rate error (δx).
    pub error: f64,
    pub coast: bool,
}

/// Everything the controller needs to plan: the stint, the model and the
/// initial nominal plan.
#[derive(Debug, Clone)]
pub struct PlanningContext {
    pub track: Arc<TrackProfile>,
    pub params: VehicleParams,
    pub maps: Vec<ThrottleMap>,
    pub boundary: StintBoundary,
    /// Nominal-condition course over the full stint.
    pub course: Arc<Course>,
    pub convex: Arc<PlanSolution>,
    pub plan: Arc<CoastPlan>,
}

impl PlanningContext {
    /// Solves the nominal problem (convex program plus threshold search).
    pub fn prepare(
        track: Arc<TrackProfile>,
        params: VehicleParams,
        maps: Vec<ThrottleMap>,
        boundary: StintBoundary,
        rules: CoastRules,
    ) -> Result<Self> {
        Self::prepare_with(track, params, maps, boundary, rules, |_| GripState::default(), &[])
    }

    /// Same as [`PlanningContext::prepare`] under known conditions `grip_at`,
    /// with optimizer nodes forced at the `breakpoints` where they change.
    pub fn prepare_with(
        track: Arc<TrackProfile>,
        params: VehicleParams,
        maps: Vec<ThrottleMap>,
        boundary: StintBoundary,
        rules: CoastRules,
        grip_at: impl Fn(f64) -> GripState + Sync,
        breakpoints: &[f64],
    ) -> Result<Self> {
        params.validate()?;
        boundary.validate(&params)?;
        let grid = build_grid(&track, boundary.s0, boundary.s_stint, GridMode::Optimizer)?.with_breakpoints(breakpoints);
        let model = HorizonModel::new(&track, &params, &grid, &grip_at)?;
        let convex = solve_horizon(&model, &params, &boundary, None, 1)?;
        let course = Course::new(&track, &params, boundary.s0, boundary.s_stint, &grip_at)?;
        let plan = solve_problem2(&convex, &maps, &boundary, &course, &params, rules)?;
        Ok(Self {
            track,
            params,
            maps,
            boundary,
            course: Arc::new(course),
            convex: Arc::new(convex),
            plan: Arc::new(plan),
        })
    }

    pub fn map(&self, id: usize) -> Result<&ThrottleMap> {
        self.maps
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown throttle map {id}")))
    }
}

#[derive(Clone)]
pub struct Controller {
    pub config: ControllerConfig,
    pub state: ControllerState,
    pub ctx: Arc<PlanningContext>,
}

impl Controller {
    pub fn new(config: ControllerConfig, ctx: Arc<PlanningContext>) -> Result<Self> {
        config.validate()?;
        ctx.map(config.active_map)?;
        let initial = Self::initial_snapshot(&config, &ctx)?;
        Ok(Self { config, state: ControllerState { snapshot: Some(Arc::new(initial)), ..Default::default() }, ctx })
    }

    fn initial_snapshot(config: &ControllerConfig, ctx: &PlanningContext) -> Result<PlanSnapshot> {
        let plan = (*ctx.plan).clone();
        let map = *plan
            .map(config.active_map)
            .ok_or_else(|| Error::InvalidInput(format!("no plan for map {}", config.active_map)))?;
        let reference = Reference::simulate(&plan, &map, &ctx.boundary, &ctx.course, &ctx.params, config.rules())?;
        Ok(PlanSnapshot {
            costate_scale: plan.bracket_width(),
            reference,
            x0: ctx.boundary.x0,
            course: ctx.course.clone(),
            lethargy: Some((ctx.convex.grid.clone(), ctx.convex.lethargy.clone())),
            plan,
        })
    }

    pub fn snapshot(&self) -> Option<&PlanSnapshot> {
        self.state.snapshot.as_deref()
    }

    /// Computes a new plan from `measured` (does not install it).
    ///
    /// `obs` is what the car currently senses; only the fully online variant
    /// uses it, the fixed variants plan on the nominal model.
    pub fn mpc_update(&self, measured: &VehicleState, obs: &Observation) -> Result<Option<PlanSnapshot>> {
        let ctx = &self.ctx;
        let s_end = ctx.boundary.s_stint;
        // a plan the car cannot receive before the line is not computed
        let v = ctx.params.speed(measured.e_kin);
        if s_end - measured.s <= (v * self.config.mpc_latency).max(1.0) || !self.config.variant.resolves() {
            return Ok(None);
        }
        let boundary = StintBoundary { s0: measured.s, x0: *measured, ..ctx.boundary };
        let rules = self.config.rules();
        let (plan, course, lethargy) = match self.config.variant {
            Variant::FullyOnline => {
                let grip_at = |s: f64| obs.assumed(s);
                let breaks: Vec<f64> = obs.cap_until.into_iter().collect();
                let grid = build_grid(&ctx.track, measured.s, s_end, GridMode::Optimizer)?.with_breakpoints(&breaks);
                let model = HorizonModel::new(&ctx.track, &ctx.params, &grid, &grip_at)?;
                let warm = self.snapshot().and_then(|snap| snap.lethargy.as_ref()).map(|(g, l)| g.resample(l, &grid));
                let refinements = if warm.is_some() { 0 } else { 1 };
                let convex = solve_horizon(&model, &ctx.params, &boundary, warm.as_deref(), refinements)?;
                let course = Course::new(&ctx.track, &ctx.params, measured.s, s_end, &grip_at)?;
                let plan = solve_problem2(&convex, &ctx.maps, &boundary, &course, &ctx.params, rules)?;
                (plan, course, Some((convex.grid.clone(), convex.lethargy.clone())))
            }
            Variant::FixedCostate => {
                let course = ctx.course.tail(measured.s);
                let offset = ctx.course.grid.nodes.len() - course.grid.nodes.len();
                let lambda = ctx.plan.lambda_kin[offset..].to_vec();
                let mut maps = Vec::with_capacity(ctx.maps.len());
                for m in &ctx.maps {
                    maps.push(bisect_threshold(&lambda, m, &boundary, &course, &ctx.params, rules, DEFAULT_TOL_FRACTION)?);
                }
                if !maps.iter().any(|m| m.feasible) {
                    return Err(Error::AllMapsInfeasible);
                }
                let plan = CoastPlan { grid: course.grid.clone(), lambda_kin: lambda, maps, t_pred: ctx.plan.t_pred };
                let lethargy = self.snapshot().and_then(|s| s.lethargy.clone());
                (plan, course, lethargy)
            }
            Variant::FixedCostateAndThreshold => unreachable!(),
        };
        let map = *plan
            .map(self.config.active_map)
            .ok_or_else(|| Error::InvalidInput(format!("no plan for map {}", self.config.active_map)))?;
        let reference = Reference::simulate(&plan, &map, &boundary, &course, &ctx.params, rules)?;
        let costate_scale = match self.config.variant {
            // the fixed co-state keeps the scale of the initial plan
            Variant::FixedCostate => self.snapshot().map(|s| s.costate_scale).unwrap_or(plan.bracket_width()),
            _ => plan.bracket_width(),
        };
        Ok(Some(PlanSnapshot {
            plan,
            reference,
            x0: *measured,
            costate_scale,
            course: Arc::new(course),
            lethargy,
        }))
    }

    /// Installs a plan and resets the integral error.
    pub fn install(&mut self, snapshot: PlanSnapshot) {
        self.state.snapshot = Some(Arc::new(snapshot));
        self.state.integral = 0.0;
    }

    /// Switches the active throttle map and rebuilds the reference
    /// trajectories of the current plan.
    pub fn set_map(&mut self, id: usize) -> Result<()> {
        self.ctx.map(id)?;
        if let Some(snap) = self.snapshot().cloned() {
            let map = *snap.plan.map(id).ok_or_else(|| Error::InvalidInput(format!("no plan for map {id}")))?;
            let boundary = StintBoundary { s0: snap.x0.s, x0: snap.x0, ..self.ctx.boundary };
            let reference =
                Reference::simulate(&snap.plan, &map, &boundary, &snap.course, &self.ctx.params, self.config.rules())?;
            self.install(PlanSnapshot { reference, ..snap });
        }
        self.config.active_map = id;
        Ok(())
    }

    /// Evaluates the feedback law and the coast rule at `measured`, after
    /// travelling `h` metres since the previous call.
    pub fn control(
        &mut self,
        measured: &VehicleState,
        obs: &Observation,
        kappa: f64,
        grip_limited: bool,
        h: f64,
        params: &VehicleParams,
    ) -> Decision {
        if measured.s >= self.ctx.boundary.s_stint {
            self.state.terminal = true;
        }
        let Some(snap) = self.state.snapshot.clone() else {
            return Decision { lambda_kin: f64::NAN, lambda_star_adj: f64::NAN, error: 0.0, coast: false };
        };
        let lambda_kin = snap.plan.lambda_at(measured.s);
        let lambda_star = snap.threshold(self.config.active_map).unwrap_or(f64::INFINITY);
        let (error, lambda_adj) = match self.config.variant {
            Variant::FullyOnline | Variant::FixedCostate => {
                let e = (measured.e_b - snap.reference.e_b_at(measured.s)) / params.e_b_max;
                self.state.integral += e * h / 1000.0;
                (e, feedback_threshold(lambda_star, snap.costate_scale, e, self.state.integral, &self.config))
            }
            Variant::FixedCostateAndThreshold => {
                let b = &self.ctx.boundary;
                let window = self.config.delta_s_window;
                self.state.window.push(measured.s, measured.e_kin + measured.e_b, window);
                // the car still carries its planned kinetic energy at the line
                let e_kin_end = snap.reference.e_kin.last().copied().unwrap_or(0.0);
                let available = measured.e_kin + measured.e_b - b.e_b_target - e_kin_end;
                let remaining = b.s_stint - measured.s;
                let target_rate = match self.state.target_rate {
                    Some(rate) if remaining < window => rate,
                    _ => {
                        let rate = available / remaining.max(window);
                        self.state.target_rate = Some(rate);
                        rate
                    }
                };
                let delta = match self.state.window.rate() {
                    Some(rate) => (rate - target_rate) / target_rate,
                    None => 0.0,
                };
                let capped = obs.grip.v_cap.is_some() && self.config.anti_windup_fcy;
                if self.state.window.filled(window) && !capped {
                    self.state.integral += delta * h / 1000.0;
                }
                (delta, energy_rate_feedback(lambda_star, snap.costate_scale, delta, self.state.integral, &self.config))
            }
        };
        let coast = !self.state.terminal
            && decide_signal(lambda_kin, lambda_adj, params.speed(measured.e_kin), kappa, grip_limited, &self.config.rules());
        self.state.last_signal = coast;
        self.state.last_error = error;
        self.state.last_lambda_adj = lambda_adj;
        Decision { lambda_kin, lambda_star_adj: lambda_adj, error, coast }
    }
}

/// One line of the controller trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub s: f64,
    pub t: f64,
    pub variant: Variant,
    pub lambda_kin_at_s: f64,
    pub lambda_star_adj: f64,
    pub error: f64,
    pub coast_signal: bool,
    pub grip_limited: bool,
}

//! Closed-loop stint simulation, disturbance injection, the a-priori oracle
//! and experiment tables.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig, Observation, PlanSnapshot, PlanningContext, TraceRecord, Variant};
use crate::liftcoast::{full_throttle_probe, CoastRules, Course, ThrottleMap, Violations};
use crate::model::{Ab2Stepper, ControlInput, Derivative, VehicleParams, VehicleState};
use crate::nominal::{stint_boundary, ChargeModel};
use crate::socp::StintBoundary;
use crate::track::{GripState, TrackProfile};
use crate::{Error, Result};

/// Stall speed of the closed-loop plant [m/s].
const STALL_SPEED: f64 = 1.0;

/// A single disturbance with its activation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Disturbance {
    /// Reduced drag and downforce while following another car.
    Drafting { aero_scale: f64, s_start: f64, s_end: f64 },
    /// Grip scale falling linearly from `mu_start` to `mu_end` over the window.
    TireDegradation { mu_start: f64, mu_end: f64, s_start: f64, s_end: f64 },
    /// Speed cap over one full lap (1-based lap number).
    FullCourseYellow { lap: usize, v_cap: f64 },
}

impl Disturbance {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Disturbance::Drafting { aero_scale, s_start, s_end } => {
                aero_scale > 0.0 && aero_scale <= 1.0 && s_end > s_start
            }
            Disturbance::TireDegradation { mu_start, mu_end, s_start, s_end } => {
                mu_start > 0.0 && mu_start <= 1.0 && mu_end > 0.0 && mu_end <= 1.0 && s_end > s_start
            }
            Disturbance::FullCourseYellow { lap, v_cap } => lap >= 1 && v_cap > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid disturbance {self:?}")))
        }
    }

    /// Speed-cap window `[start, end)` in stint coordinates.
    pub fn cap_window(&self, s_lap: f64) -> Option<(f64, f64)> {
        match *self {
            Disturbance::FullCourseYellow { lap, .. } => Some(((lap - 1) as f64 * s_lap, lap as f64 * s_lap)),
            _ => None,
        }
    }

    pub fn active(&self, s: f64, s_lap: f64) -> bool {
        match *self {
            Disturbance::Drafting { s_start, s_end, .. } | Disturbance::TireDegradation { s_start, s_end, .. } => {
                s >= s_start && s < s_end
            }
            Disturbance::FullCourseYellow { .. } => {
                let (a, b) = self.cap_window(s_lap).unwrap();
                s >= a && s < b
            }
        }
    }

    fn apply(&self, s: f64, s_lap: f64, g: &mut GripState) {
        match *self {
            Disturbance::Drafting { aero_scale, .. } => {
                if self.active(s, s_lap) {
                    g.aero_scale *= aero_scale;
                }
            }
            Disturbance::TireDegradation { mu_start, mu_end, s_start, s_end } => {
                // holds the end value after the window
                if s >= s_start {
                    let w = ((s - s_start) / (s_end - s_start)).min(1.0);
                    g.mu_scale *= mu_start + w * (mu_end - mu_start);
                }
            }
            Disturbance::FullCourseYellow { v_cap, .. } => {
                if self.active(s, s_lap) {
                    g.v_cap = Some(g.v_cap.map_or(v_cap, |c| c.min(v_cap)));
                }
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Disturbance::Drafting { .. } => "drafting",
            Disturbance::TireDegradation { .. } => "degradation",
            Disturbance::FullCourseYellow { .. } => "fcy",
        }
    }
}

/// Named set of disturbances applied to the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceScenario {
    pub name: String,
    pub disturbances: Vec<Disturbance>,
}

/// 80 km/h.
pub const FCY_SPEED: f64 = 80.0 / 3.6;

impl DisturbanceScenario {
    pub fn none() -> Self {
        Self { name: "none".into(), disturbances: Vec::new() }
    }

    pub fn drafting(s_stint: f64) -> Self {
        Self {
            name: "drafting".into(),
            disturbances: vec![Disturbance::Drafting { aero_scale: 0.9, s_start: 0.0, s_end: s_stint }],
        }
    }

    pub fn tire_degradation(s_stint: f64) -> Self {
        Self {
            name: "degradation".into(),
            disturbances: vec![Disturbance::TireDegradation { mu_start: 1.0, mu_end: 0.9, s_start: 0.0, s_end: s_stint }],
        }
    }

    pub fn full_course_yellow() -> Self {
        Self { name: "fcy".into(), disturbances: vec![Disturbance::FullCourseYellow { lap: 2, v_cap: FCY_SPEED }] }
    }

    pub fn composite(parts: &[DisturbanceScenario]) -> Self {
        Self {
            name: parts.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join("+"),
            disturbances: parts.iter().flat_map(|p| p.disturbances.iter().copied()).collect(),
        }
    }

    /// Scenario by name: `none`, `drafting`, `degradation`, `fcy`, or a
    /// `+`-joined combination.
    pub fn by_name(name: &str, s_stint: f64) -> Result<Self> {
        let parts: Result<Vec<_>> = name
            .split('+')
            .map(|n| match n.trim() {
                "none" => Ok(Self::none()),
                "drafting" => Ok(Self::drafting(s_stint)),
                "degradation" | "tire_degradation" => Ok(Self::tire_degradation(s_stint)),
                "fcy" | "full_course_yellow" => Ok(Self::full_course_yellow()),
                other => Err(Error::InvalidInput(format!("unknown scenario '{other}'"))),
            })
            .collect();
        let parts = parts?;
        Ok(if parts.len() == 1 { parts.into_iter().next().unwrap() } else { Self::composite(&parts) })
    }

    /// The three disturbance scenarios of the comparison suite.
    pub fn suite(s_stint: f64) -> Vec<Self> {
        vec![Self::drafting(s_stint), Self::tire_degradation(s_stint), Self::full_course_yellow()]
    }

    pub fn validate(&self) -> Result<()> {
        self.disturbances.iter().try_for_each(|d| d.validate())
    }

    pub fn grip_at(&self, s: f64, s_lap: f64) -> GripState {
        let mut g = GripState::default();
        for d in &self.disturbances {
            d.apply(s, s_lap, &mut g);
        }
        g
    }

    /// End of the speed-cap window covering `s`, if any.
    pub fn cap_until(&self, s: f64, s_lap: f64) -> Option<f64> {
        self.disturbances
            .iter()
            .filter_map(|d| d.cap_window(s_lap))
            .filter(|&(a, b)| s >= a && s < b)
            .map(|(_, b)| b)
            .reduce(f64::max)
    }

    pub fn active_labels(&self, s: f64, s_lap: f64) -> Vec<&'static str> {
        self.disturbances.iter().filter(|d| d.active(s, s_lap)).map(|d| d.label()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DriverMode {
    #[default]
    Automated,
    /// Throttle on/off supplied from outside (live sessions).
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DriverModel {
    pub mode: DriverMode,
    /// Distance between a coast signal and the driver lifting [m].
    pub reaction_delay: f64,
}

impl DriverModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.reaction_delay >= 0.0) {
            return Err(Error::InvalidInput("reaction delay must be non-negative".into()));
        }
        Ok(())
    }
}

/// One telemetry row: state at `s` and the inputs applied over the
/// following step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub s: f64,
    pub t: f64,
    pub lap: usize,
    pub e_kin: f64,
    pub v: f64,
    pub e_b: f64,
    pub theta_m: f64,
    pub theta_b: f64,
    pub h: f64,
    pub f_m: f64,
    pub f_brake: f64,
    pub u_th: f64,
    pub grip_limited: bool,
    pub coast_signal: bool,
    pub coast_applied: bool,
    pub driver_coast: bool,
    pub lambda_kin: f64,
    pub lambda_star_adj: f64,
    pub feedback_error: f64,
    pub mu_scale: f64,
    pub aero_scale: f64,
    pub v_cap: Option<f64>,
    pub d_e_kin: f64,
    pub d_e_b: f64,
    pub d_theta_m: f64,
    pub d_theta_b: f64,
    pub d_t: f64,
    pub wheel: f64,
    pub loss_m: f64,
    pub aux: f64,
    pub loss_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapSummary {
    pub lap: usize,
    pub t_lap: f64,
    pub e_b_used: f64,
    /// Lap-relative positions where coasting started.
    pub coast_onsets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub s: f64,
    pub t: f64,
    pub kind: String,
    pub message: String,
}

/// Battery-energy balance of a run: the logged drop against the
/// step-weighted sum of its components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyAudit {
    pub traction: f64,
    pub motor_loss: f64,
    pub aux: f64,
    pub battery_loss: f64,
    pub e_b_drop: f64,
    pub residual: f64,
}

impl EnergyAudit {
    /// Recomputes the audit from telemetry rows and the terminal state.
    pub fn from_telemetry(rows: &[TelemetryRow], terminal_e_b: f64) -> Self {
        let mut a = EnergyAudit::default();
        let mut prev: Option<&TelemetryRow> = None;
        for r in rows.iter().filter(|r| r.h > 0.0) {
            let w = |f: fn(&TelemetryRow) -> f64| match prev {
                Some(p) => r.h * (1.5 * f(r) - 0.5 * f(p)),
                None => r.h * f(r),
            };
            a.traction += w(|x| x.wheel);
            a.motor_loss += w(|x| x.loss_m);
            a.aux += w(|x| x.aux);
            a.battery_loss += w(|x| x.loss_b);
            prev = Some(r);
        }
        a.e_b_drop = rows.first().map_or(0.0, |r| r.e_b) - terminal_e_b;
        let sum = a.traction + a.motor_loss + a.aux + a.battery_loss;
        a.residual = (a.e_b_drop - sum).abs() / a.e_b_drop.abs().max(1.0);
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StintMetrics {
    pub variant: Variant,
    pub scenario: String,
    pub map: usize,
    pub seed: u64,
    pub completed: bool,
    pub t_stint: f64,
    pub terminal_e_b: f64,
    pub e_b_target: f64,
    pub terminal_e_b_err: f64,
    pub terminal_theta_b: f64,
    pub theta_b_target: f64,
    pub max_theta_m: f64,
    pub max_theta_b: f64,
    pub violations: Violations,
    pub energy_ok: bool,
    pub thermal_ok: bool,
    pub time_loss_vs_oracle: Option<f64>,
    pub plan_updates: usize,
    pub plan_failures: usize,
    pub audit: EnergyAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StintLog {
    pub telemetry: Vec<TelemetryRow>,
    pub laps: Vec<LapSummary>,
    pub events: Vec<Event>,
    pub metrics: StintMetrics,
    pub terminal: VehicleState,
}

impl StintLog {
    pub fn trace(&self) -> Vec<TraceRecord> {
        self.telemetry
            .iter()
            .map(|r| TraceRecord {
                s: r.s,
                t: r.t,
                variant: self.metrics.variant,
                lambda_kin_at_s: r.lambda_kin,
                lambda_star_adj: r.lambda_star_adj,
                error: r.feedback_error,
                coast_signal: r.coast_signal,
                grip_limited: r.grip_limited,
            })
            .collect()
    }

    /// Coast onsets (absolute positions) in the applied coast flag.
    pub fn coast_onsets(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut prev = false;
        for r in &self.telemetry {
            if r.coast_applied && !prev {
                out.push(r.s);
            }
            prev = r.coast_applied;
        }
        out
    }

    /// Writes `telemetry.csv`, `trace.csv`, `laps.json`, `events.json` and
    /// `metrics.json` (with `extra` merged into the metrics object).
    pub fn write(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("telemetry.csv"))?;
        for r in &self.telemetry {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
        for r in self.trace() {
            w.serialize(r)?;
        }
        w.flush()?;
        fs::write(dir.join("laps.json"), serde_json::to_string_pretty(&self.laps)?)?;
        fs::write(dir.join("events.json"), serde_json::to_string_pretty(&self.events)?)?;
        let mut metrics = serde_json::to_value(&self.metrics)?;
        if let (Some(m), serde_json::Value::Object(x)) = (metrics.as_object_mut(), extra) {
            m.extend(x);
        }
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
        Ok(())
    }
}

/// Builds the plant course for `scenario` over the stint.
pub fn plant_course(
    track: &TrackProfile,
    params: &VehicleParams,
    boundary: &StintBoundary,
    scenario: &DisturbanceScenario,
) -> Result<Course> {
    let s_lap = track.s_lap;
    Course::new(track, params, boundary.s0, boundary.s_stint, |s| scenario.grip_at(s, s_lap))
}

/// Stepwise closed-loop simulation: plant, driver and controller.
pub struct Session {
    pub controller: Controller,
    pub scenario: DisturbanceScenario,
    pub driver: DriverModel,
    pub seed: u64,
    plant: Arc<Course>,
    stepper: Ab2Stepper,
    k: usize,
    last_h: f64,
    next_mpc_t: f64,
    signals: VecDeque<bool>,
    /// Throttle state commanded from outside in external driver mode.
    pub external_throttle: bool,
    telemetry: Vec<TelemetryRow>,
    events: Vec<Event>,
    violations: Violations,
    plan_updates: usize,
    plan_failures: usize,
    finished: bool,
    capped: bool,
    /// Solve MPC updates on a worker thread; results are still installed at
    /// their simulated delivery time.
    pub background_planning: bool,
    inflight: Option<(f64, JoinHandle<Result<Option<PlanSnapshot>>>)>,
}

impl Session {
    pub fn new(
        config: ControllerConfig,
        scenario: DisturbanceScenario,
        ctx: Arc<PlanningContext>,
        driver: DriverModel,
        seed: u64,
    ) -> Result<Self> {
        scenario.validate()?;
        driver.validate()?;
        let plant = plant_course(&ctx.track, &ctx.params, &ctx.boundary, &scenario)?;
        let x0 = ctx.boundary.x0;
        let next_mpc_t = x0.t + config.mpc_period;
        let controller = Controller::new(config, ctx)?;
        Ok(Self {
            controller,
            scenario,
            driver,
            seed,
            plant: Arc::new(plant),
            stepper: Ab2Stepper::new(VehicleState { s: x0.s, ..x0 }),
            k: 0,
            last_h: 0.0,
            next_mpc_t,
            signals: VecDeque::new(),
            external_throttle: true,
            telemetry: Vec::new(),
            events: Vec::new(),
            violations: Violations::default(),
            plan_updates: 0,
            plan_failures: 0,
            finished: false,
            capped: false,
            background_planning: false,
            inflight: None,
        })
    }

    pub fn state(&self) -> &VehicleState {
        &self.stepper.state
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn ctx(&self) -> &Arc<PlanningContext> {
        &self.controller.ctx
    }

    fn event(&mut self, kind: &str, message: String) {
        let st = self.stepper.state;
        self.events.push(Event { s: st.s, t: st.t, kind: kind.into(), message });
    }

    /// Adds a disturbance to the plant from now on.
    pub fn add_disturbance(&mut self, d: Disturbance) -> Result<()> {
        d.validate()?;
        self.scenario.disturbances.push(d);
        self.scenario.name = format!("{}+{}", self.scenario.name, d.label());
        let ctx = self.controller.ctx.clone();
        self.plant = Arc::new(plant_course(&ctx.track, &ctx.params, &ctx.boundary, &self.scenario)?);
        self.event("disturbance", format!("{} added", d.label()));
        Ok(())
    }

    pub fn set_variant(&mut self, variant: Variant) {
        self.controller.config.variant = variant;
        self.controller.state.integral = 0.0;
        self.controller.state.window.clear();
        self.event("variant", format!("variant set to {variant}"));
    }

    pub fn set_map(&mut self, id: usize) -> Result<()> {
        self.controller.set_map(id)?;
        self.event("map", format!("throttle map {id} active"));
        Ok(())
    }

    /// Requests an immediate MPC update.
    pub fn trigger_update(&mut self) {
        self.next_mpc_t = self.stepper.state.t;
    }

    fn observation(&self, s: f64) -> Observation {
        let s_lap = self.controller.ctx.track.s_lap;
        Observation { grip: self.plant.grip[self.k], cap_until: self.scenario.cap_until(s, s_lap) }
    }

    fn collect_inflight(&mut self, now: f64, force: bool) {
        let due = matches!(&self.inflight, Some((t, _)) if force || now >= *t);
        if !due {
            return;
        }
        let (t_deliver, handle) = self.inflight.take().unwrap();
        let result = handle.join().unwrap_or_else(|_| Err(Error::InvalidInput("planner thread panicked".into())));
        self.planned(t_deliver, result);
    }

    fn planned(&mut self, t_deliver: f64, result: Result<Option<PlanSnapshot>>) {
        match result {
            Ok(Some(snap)) => self.controller.state.pending = Some((t_deliver, Arc::new(snap))),
            Ok(None) => {}
            Err(e) => {
                self.plan_failures += 1;
                log::warn!("plan update failed: {e}");
                self.event("plan_failed", e.to_string());
            }
        }
    }

    fn run_mpc(&mut self) {
        let st = self.stepper.state;
        let config = self.controller.config;
        self.collect_inflight(st.t, false);
        if let Some((t_deliver, _)) = &self.controller.state.pending {
            if st.t >= *t_deliver {
                let (_, snap) = self.controller.state.pending.take().unwrap();
                let lambda = snap.threshold(config.active_map).unwrap_or(f64::NAN);
                self.controller.install(Arc::try_unwrap(snap).unwrap_or_else(|a| (*a).clone()));
                self.plan_updates += 1;
                self.event("plan_updated", format!("lambda_star {lambda:e}"));
            }
        }
        if !config.variant.resolves() || st.t < self.next_mpc_t {
            return;
        }
        while self.next_mpc_t <= st.t {
            self.next_mpc_t += config.mpc_period;
        }
        let obs = self.observation(st.s);
        let t_deliver = st.t + config.mpc_latency;
        if self.background_planning {
            self.collect_inflight(st.t, true);
            let controller = self.controller.clone();
            let handle = thread::spawn(move || controller.mpc_update(&st, &obs));
            self.inflight = Some((t_deliver, handle));
        } else {
            let result = self.controller.mpc_update(&st, &obs);
            self.planned(t_deliver, result);
        }
    }

    /// Advances one simulation step; returns the row logged for it, or
    /// `None` once the stint is over.
    pub fn step(&mut self) -> Result<Option<TelemetryRow>> {
        if self.finished {
            return Ok(None);
        }
        let plant = self.plant.clone();
        let k = self.k;
        if k >= plant.grid.intervals() {
            self.finish();
            return Ok(None);
        }
        self.run_mpc();
        let params = self.controller.ctx.params;
        let map = *self.controller.ctx.map(self.controller.config.active_map)?;
        let st = self.stepper.state;
        let h = plant.grid.step(k);
        let grip = plant.grip[k];
        if grip.v_cap.is_some() != self.capped {
            self.capped = grip.v_cap.is_some();
            let kind = if self.capped { "fcy_start" } else { "fcy_end" };
            self.event(kind, format!("speed cap {:?} m/s", grip.v_cap));
        }
        let obs = self.observation(st.s);
        let probe = full_throttle_probe(&self.stepper, &map, h, plant.envelope[k + 1], &params, &grip, plant.grade[k]);
        let (probe, full) = match probe {
            Ok(p) => p,
            Err(Error::Stalled { s }) => return self.abort_stall(s),
            Err(e) => return Err(e),
        };
        let decision = self.controller.control(&st, &obs, plant.kappa[k], full.grip_limited, self.last_h, &params);

        self.signals.push_back(decision.coast);
        let delay = self.driver.reaction_delay.round() as usize;
        while self.signals.len() > delay + 1 {
            self.signals.pop_front();
        }
        let delayed = if self.signals.len() == delay + 1 { self.signals[0] } else { false };
        let (lift, driver_coast) = match self.driver.mode {
            DriverMode::Automated => (delayed, false),
            DriverMode::External => (!self.external_throttle, !self.external_throttle),
        };
        let (out, coast_applied) = if lift && !full.grip_limited {
            match self.stepper.step_bounded(ControlInput::COAST, h, plant.envelope[k + 1], &params, &grip, plant.grade[k]) {
                Ok(out) => (out, true),
                Err(Error::Stalled { s }) => return self.abort_stall(s),
                Err(e) => return Err(e),
            }
        } else {
            self.stepper = probe;
            (full, false)
        };
        let row = telemetry_row(&st, h, &params, track_lap(&self.controller.ctx.track, st.s), &out.input, &out.derivative, &grip)
            .with_flags(out.grip_limited, decision.coast, coast_applied, driver_coast)
            .with_controller(decision.lambda_kin, decision.lambda_star_adj, decision.error);
        self.telemetry.push(row);
        self.k += 1;
        self.last_h = h;
        self.check_limits(&params);
        if self.k >= plant.grid.intervals() {
            self.finish();
        }
        Ok(Some(row))
    }

    fn abort_stall(&mut self, s: f64) -> Result<Option<TelemetryRow>> {
        self.violations.stall = Some(s);
        self.event("violation", format!("stalled at s = {s:.1} m"));
        self.finish();
        Ok(None)
    }

    fn check_limits(&mut self, params: &VehicleParams) {
        let st = self.stepper.state;
        if st.e_kin < params.kinetic_energy(STALL_SPEED) {
            self.violations.stall = Some(st.s);
            self.event("violation", format!("stalled at s = {:.1} m", st.s));
            self.finish();
            return;
        }
        if st.theta_m > params.theta_m_max && self.violations.motor_temperature.is_none() {
            self.violations.motor_temperature = Some(st.s);
            self.event("violation", format!("motor temperature {:.1} K", st.theta_m));
        }
        if st.theta_b > params.theta_b_max && self.violations.battery_temperature.is_none() {
            self.violations.battery_temperature = Some(st.s);
            self.event("violation", format!("battery temperature {:.1} K", st.theta_b));
        }
        if st.e_b < params.e_b_min {
            self.violations.battery_floor = Some(st.s);
            self.event("violation", format!("battery below E_b_min at s = {:.1} m", st.s));
            self.finish();
        }
    }

    fn finish(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        let b = self.controller.ctx.boundary;
        let st = self.stepper.state;
        if (st.s - b.s_stint).abs() < 1e-6 {
            self.violations.terminal_energy = st.e_b < b.e_b_target;
            self.violations.terminal_temperature = st.theta_b > b.theta_b_target;
        }
        self.event("finished", format!("s = {:.1} m, t = {:.3} s", st.s, st.t));
    }

    /// Runs to the end of the stint.
    pub fn run(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        Ok(())
    }

    /// Assembles the log of everything simulated so far.
    pub fn log(&self) -> StintLog {
        let ctx = &self.controller.ctx;
        let params = &ctx.params;
        let b = &ctx.boundary;
        let terminal = self.stepper.state;
        let max_theta_m = self.telemetry.iter().map(|r| r.theta_m).chain([terminal.theta_m]).fold(f64::MIN, f64::max);
        let max_theta_b = self.telemetry.iter().map(|r| r.theta_b).chain([terminal.theta_b]).fold(f64::MIN, f64::max);
        let completed = (terminal.s - b.s_stint).abs() < 1e-6;
        let tol = 0.005 * params.e_b_max;
        let metrics = StintMetrics {
            variant: self.controller.config.variant,
            scenario: self.scenario.name.clone(),
            map: self.controller.config.active_map,
            seed: self.seed,
            completed,
            t_stint: terminal.t - b.x0.t,
            terminal_e_b: terminal.e_b,
            e_b_target: b.e_b_target,
            terminal_e_b_err: terminal.e_b - b.e_b_target,
            terminal_theta_b: terminal.theta_b,
            theta_b_target: b.theta_b_target,
            max_theta_m,
            max_theta_b,
            violations: self.violations.clone(),
            energy_ok: completed && self.violations.battery_floor.is_none() && terminal.e_b >= b.e_b_target - tol,
            thermal_ok: max_theta_m <= params.theta_m_max
                && max_theta_b <= params.theta_b_max
                && terminal.theta_b <= b.theta_b_target,
            time_loss_vs_oracle: None,
            plan_updates: self.plan_updates,
            plan_failures: self.plan_failures,
            audit: EnergyAudit::from_telemetry(&self.telemetry, terminal.e_b),
        };
        StintLog {
            laps: lap_summaries(&self.telemetry, &terminal, ctx.track.s_lap),
            telemetry: self.telemetry.clone(),
            events: self.events.clone(),
            metrics,
            terminal,
        }
    }
}

fn track_lap(track: &TrackProfile, s: f64) -> usize {
    track.lap_index(s) + 1
}

fn telemetry_row(
    st: &VehicleState,
    h: f64,
    params: &VehicleParams,
    lap: usize,
    input: &ControlInput,
    d: &Derivative,
    grip: &GripState,
) -> TelemetryRow {
    TelemetryRow {
        s: st.s,
        t: st.t,
        lap,
        e_kin: st.e_kin,
        v: params.speed(st.e_kin),
        e_b: st.e_b,
        theta_m: st.theta_m,
        theta_b: st.theta_b,
        h,
        f_m: input.f_m,
        f_brake: input.f_brake,
        u_th: input.u_th,
        grip_limited: false,
        coast_signal: false,
        coast_applied: false,
        driver_coast: false,
        lambda_kin: f64::NAN,
        lambda_star_adj: f64::NAN,
        feedback_error: 0.0,
        mu_scale: grip.mu_scale,
        aero_scale: grip.aero_scale,
        v_cap: grip.v_cap,
        d_e_kin: d.e_kin,
        d_e_b: d.e_b,
        d_theta_m: d.theta_m,
        d_theta_b: d.theta_b,
        d_t: d.t,
        wheel: d.wheel,
        loss_m: d.loss_m,
        aux: d.aux,
        loss_b: d.loss_b,
    }
}

impl TelemetryRow {
    fn with_flags(mut self, grip_limited: bool, signal: bool, applied: bool, driver: bool) -> Self {
        self.grip_limited = grip_limited;
        self.coast_signal = signal;
        self.coast_applied = applied;
        self.driver_coast = driver;
        self
    }

    fn with_controller(mut self, lambda_kin: f64, lambda_adj: f64, error: f64) -> Self {
        self.lambda_kin = lambda_kin;
        self.lambda_star_adj = lambda_adj;
        self.feedback_error = error;
        self
    }
}

fn lap_summaries(rows: &[TelemetryRow], terminal: &VehicleState, s_lap: f64) -> Vec<LapSummary> {
    let mut laps: Vec<LapSummary> = Vec::new();
    let mut start: Option<(usize, f64, f64)> = None;
    let mut prev_coast = false;
    for r in rows {
        if start.map_or(true, |(lap, _, _)| lap != r.lap) {
            if let Some((lap, t0, e0)) = start {
                let last = laps.last_mut().filter(|l| l.lap == lap).unwrap();
                last.t_lap = r.t - t0;
                last.e_b_used = e0 - r.e_b;
            }
            laps.push(LapSummary { lap: r.lap, t_lap: 0.0, e_b_used: 0.0, coast_onsets: Vec::new() });
            start = Some((r.lap, r.t, r.e_b));
        }
        if r.coast_applied && !prev_coast {
            let pos = r.s - (r.lap - 1) as f64 * s_lap;
            laps.last_mut().unwrap().coast_onsets.push(pos);
        }
        prev_coast = r.coast_applied;
    }
    if let (Some((_, t0, e0)), Some(last)) = (start, laps.last_mut()) {
        last.t_lap = terminal.t - t0;
        last.e_b_used = e0 - terminal.e_b;
    }
    laps
}

/// Runs a full closed-loop stint.
pub fn run_closed_loop(
    config: ControllerConfig,
    scenario: &DisturbanceScenario,
    ctx: Arc<PlanningContext>,
    driver: DriverModel,
    seed: u64,
) -> Result<StintLog> {
    let mut session = Session::new(config, scenario.clone(), ctx, driver, seed)?;
    session.run()?;
    Ok(session.log())
}

/// The non-causal benchmark: both problems solved with the disturbances
/// known in advance.
pub fn oracle_solve(
    scenario: &DisturbanceScenario,
    ctx: &PlanningContext,
    rules: CoastRules,
) -> Result<PlanningContext> {
    if scenario.disturbances.is_empty() {
        return Ok(ctx.clone());
    }
    let s_lap = ctx.track.s_lap;
    let breaks: Vec<f64> = scenario
        .disturbances
        .iter()
        .filter_map(|d| d.cap_window(s_lap))
        .flat_map(|(a, b)| [a, b])
        .collect();
    PlanningContext::prepare_with(
        ctx.track.clone(),
        ctx.params,
        ctx.maps.clone(),
        ctx.boundary,
        rules,
        |s| scenario.grip_at(s, s_lap),
        &breaks,
    )
}

/// Time loss in percent.
pub fn time_loss_pct(t: f64, t_oracle: f64) -> f64 {
    100.0 * (t - t_oracle) / t_oracle
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub variant: Variant,
    pub t_stint: f64,
    pub t_oracle: f64,
    pub loss_pct: f64,
    #[serde(rename = "terminal_Eb_err")]
    pub terminal_eb_err: f64,
    pub max_theta_m: f64,
    pub max_theta_b: f64,
    pub energy_ok: bool,
    pub thermal_ok: bool,
    pub error: Option<String>,
}

/// Runs every (scenario, variant) pair against the scenario's oracle.
///
/// Failed runs appear as rows with `error` set. Logs are returned alongside
/// the rows in the same order.
pub fn compare_variants(
    scenarios: &[DisturbanceScenario],
    variants: &[Variant],
    base: ControllerConfig,
    ctx: Arc<PlanningContext>,
    driver: DriverModel,
    seed: u64,
) -> Result<Vec<(ComparisonRow, Option<StintLog>)>> {
    let mut sorted: Vec<&DisturbanceScenario> = scenarios.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut out = Vec::new();
    for scenario in sorted {
        let oracle = oracle_solve(scenario, &ctx, base.rules());
        for &variant in variants {
            let config = ControllerConfig { variant, ..base };
            let failed = |msg: String| ComparisonRow {
                scenario: scenario.name.clone(),
                variant,
                t_stint: f64::NAN,
                t_oracle: f64::NAN,
                loss_pct: f64::NAN,
                terminal_eb_err: f64::NAN,
                max_theta_m: f64::NAN,
                max_theta_b: f64::NAN,
                energy_ok: false,
                thermal_ok: false,
                error: Some(msg),
            };
            let oracle = match &oracle {
                Ok(o) => o,
                Err(e) => {
                    out.push((failed(format!("oracle: {e}")), None));
                    continue;
                }
            };
            let t_oracle = oracle.plan.map(config.active_map).map(|m| m.cost).unwrap_or(f64::NAN);
            match run_closed_loop(config, scenario, ctx.clone(), driver, seed) {
                Ok(mut log) => {
                    let m = &mut log.metrics;
                    let loss = time_loss_pct(m.t_stint, t_oracle);
                    m.time_loss_vs_oracle = Some(loss);
                    let row = ComparisonRow {
                        scenario: scenario.name.clone(),
                        variant,
                        t_stint: m.t_stint,
                        t_oracle,
                        loss_pct: loss,
                        terminal_eb_err: m.terminal_e_b_err,
                        max_theta_m: m.max_theta_m,
                        max_theta_b: m.max_theta_b,
                        energy_ok: m.energy_ok,
                        thermal_ok: m.thermal_ok,
                        error: (!m.completed).then(|| "run aborted".to_string()),
                    };
                    out.push((row, Some(log)));
                }
                Err(e) => out.push((failed(e.to_string()), None)),
            }
        }
    }
    Ok(out)
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "scenario",
        "variant",
        "t_stint",
        "t_oracle",
        "loss_pct",
        "terminal_Eb_err",
        "max_theta_m",
        "max_theta_b",
        "energy_ok",
        "thermal_ok",
        "error",
    ])?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.variant.to_string(),
            r.t_stint.to_string(),
            r.t_oracle.to_string(),
            r.loss_pct.to_string(),
            r.terminal_eb_err.to_string(),
            r.max_theta_m.to_string(),
            r.max_theta_b.to_string(),
            r.energy_ok.to_string(),
            r.thermal_ok.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_laps: usize,
    pub t_charge: f64,
    pub feasible: bool,
    /// Best lift-and-coast stint time over the maps [s].
    pub t_stint: f64,
    pub t_convex: f64,
    /// (t_stint + t_charge) / n_laps [s].
    pub avg: f64,
    pub optimal: bool,
    pub e_b_target: f64,
    /// The charge would need to go below the pack's minimum energy.
    pub capacity_limited: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSetup {
    pub v0: f64,
    pub charge: ChargeModel,
    pub rules: CoastRules,
}

/// Average stint time over a grid of stint lengths and charging times.
pub fn sweep_strategy(
    stint_lengths: &[usize],
    charge_times: &[f64],
    setup: &SweepSetup,
    track: Arc<TrackProfile>,
    params: &VehicleParams,
    maps: &[ThrottleMap],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &n_laps in stint_lengths {
        let start = rows.len();
        for &t_charge in charge_times {
            let boundary = stint_boundary(params, track.s_lap, n_laps, setup.v0, &setup.charge, t_charge)?;
            let capacity_limited = params.e_b_max - setup.charge.p_charge * t_charge < params.e_b_min;
            let solved =
                PlanningContext::prepare(track.clone(), *params, maps.to_vec(), boundary, setup.rules);
            let row = match solved {
                Ok(ctx) => {
                    let best = ctx
                        .plan
                        .maps
                        .iter()
                        .filter(|m| m.feasible)
                        .map(|m| m.cost)
                        .fold(f64::INFINITY, f64::min);
                    SweepRow {
                        n_laps,
                        t_charge,
                        feasible: best.is_finite(),
                        t_stint: best,
                        t_convex: ctx.convex.t_pred,
                        avg: (best + t_charge) / n_laps as f64,
                        optimal: false,
                        e_b_target: boundary.e_b_target,
                        capacity_limited,
                        error: None,
                    }
                }
                Err(e) if e.is_infeasible() => SweepRow {
                    n_laps,
                    t_charge,
                    feasible: false,
                    t_stint: f64::NAN,
                    t_convex: f64::NAN,
                    avg: f64::NAN,
                    optimal: false,
                    e_b_target: boundary.e_b_target,
                    capacity_limited,
                    error: Some(e.to_string()),
                },
                Err(e) => return Err(e),
            };
            rows.push(row);
        }
        let best = rows[start..]
            .iter()
            .enumerate()
            .filter(|(_, r)| r.feasible)
            .min_by(|a, b| a.1.avg.total_cmp(&b.1.avg))
            .map(|(i, _)| start + i);
        if let Some(i) = best {
            rows[i].optimal = true;
        }
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

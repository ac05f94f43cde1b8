//! Longitudinal vehicle, powertrain and thermal model in the space domain.
//!
//! All energy flows are expressed as forces (J/m). The same equations are
//! used by the convex optimizer (with relaxed losses and frozen cooling
//! lethargy) and, exactly, by the stint simulator below.

use serde::{Deserialize, Serialize};

use crate::track::{Grid, GripState};
use crate::{Error, Result, GRAVITY};

/// Vehicle, powertrain and thermal parameters in SI units.
///
/// The [`Default`] set is synthetic: physically plausible for a GT-class
/// electric endurance car but not taken from any real vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// Equivalent mass including rotating inertia [kg].
    pub m_eq: f64,
    /// Vehicle mass [kg].
    pub m: f64,
    /// ρ·c_d·A [kg/m].
    #[serde(rename = "rho_cd_A")]
    pub rho_cd_a: f64,
    /// ρ·c_l·A [kg/m].
    #[serde(rename = "rho_cl_A")]
    pub rho_cl_a: f64,
    pub c_r: f64,
    pub mu0: f64,
    /// Straight-line speed cap [m/s].
    pub v_max: f64,
    #[serde(rename = "P_max")]
    pub p_max: f64,
    #[serde(rename = "P_regen")]
    pub p_regen: f64,
    #[serde(rename = "F_m_max")]
    pub f_m_max: f64,
    #[serde(rename = "F_brake_max")]
    pub f_brake_max: f64,
    /// Motor + inverter loss curvature [1/N].
    pub alpha_m: f64,
    /// Motor constant loss force [N].
    pub beta_m: f64,
    /// Battery loss curvature [1/N].
    pub alpha_b: f64,
    #[serde(rename = "P_aux")]
    pub p_aux: f64,
    #[serde(rename = "C_m")]
    pub c_m: f64,
    #[serde(rename = "C_b")]
    pub c_b: f64,
    pub h_m: f64,
    pub h_b: f64,
    pub theta_cool: f64,
    pub theta_m_max: f64,
    pub theta_b_max: f64,
    #[serde(rename = "E_b_min")]
    pub e_b_min: f64,
    #[serde(rename = "E_b_max")]
    pub e_b_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m_eq: 1000.0,
            m: 960.0,
            rho_cd_a: 1.1,
            rho_cl_a: 3.0,
            c_r: 0.012,
            mu0: 1.6,
            v_max: 75.0,
            p_max: 250e3,
            p_regen: 200e3,
            f_m_max: 7000.0,
            f_brake_max: 15000.0,
            alpha_m: 7e-6,
            beta_m: 30.0,
            alpha_b: 4e-6,
            p_aux: 3000.0,
            c_m: 30e3,
            c_b: 300e3,
            h_m: 800.0,
            h_b: 300.0,
            theta_cool: 313.15,
            theta_m_max: 413.15,
            theta_b_max: 333.15,
            e_b_min: 10e6,
            e_b_max: 180e6,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m_eq", self.m_eq),
            ("m", self.m),
            ("v_max", self.v_max),
            ("P_max", self.p_max),
            ("P_regen", self.p_regen),
            ("F_m_max", self.f_m_max),
            ("F_brake_max", self.f_brake_max),
            ("mu0", self.mu0),
            ("C_m", self.c_m),
            ("C_b", self.c_b),
            ("h_m", self.h_m),
            ("h_b", self.h_b),
            ("theta_cool", self.theta_cool),
            ("theta_m_max", self.theta_m_max),
            ("theta_b_max", self.theta_b_max),
            ("E_b_max", self.e_b_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        let non_negative = [
            ("rho_cd_A", self.rho_cd_a),
            ("rho_cl_A", self.rho_cl_a),
            ("c_r", self.c_r),
            ("alpha_m", self.alpha_m),
            ("beta_m", self.beta_m),
            ("alpha_b", self.alpha_b),
            ("P_aux", self.p_aux),
            ("E_b_min", self.e_b_min),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(self.e_b_min < self.e_b_max) {
            return Err(Error::InvalidInput("E_b_min must be below E_b_max".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn speed(&self, e_kin: f64) -> f64 {
        (2.0 * e_kin / self.m_eq).sqrt()
    }

    pub fn kinetic_energy(&self, v: f64) -> f64 {
        0.5 * self.m_eq * v * v
    }

    /// Drag coefficient on kinetic energy, c_a [1/m].
    pub fn drag_coefficient(&self, grip: &GripState) -> f64 {
        grip.aero_scale * self.rho_cd_a / self.m_eq
    }

    /// Rolling plus grade resistance [N].
    pub fn resistance(&self, grade: f64) -> f64 {
        self.c_r * self.m * GRAVITY * grade.cos() + self.m * GRAVITY * grade.sin()
    }

    pub fn motor_loss(&self, f_m: f64) -> f64 {
        self.alpha_m * f_m * f_m + self.beta_m
    }

    pub fn battery_loss(&self, f_dc: f64) -> f64 {
        self.alpha_b * f_dc * f_dc
    }

    /// Admissible motor force range at lethargy `lethargy`.
    pub fn motor_force_range(&self, lethargy: f64) -> (f64, f64) {
        let lo = -(self.p_regen * lethargy).min(self.f_m_max);
        let hi = (self.p_max * lethargy).min(self.f_m_max);
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub e_kin: f64,
    pub e_b: f64,
    pub theta_m: f64,
    pub theta_b: f64,
    pub s: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Motor force at the wheels [N], negative when recuperating.
    pub f_m: f64,
    /// Mechanical brake force [N], never positive.
    pub f_brake: f64,
    /// Throttle position in [0, 1].
    pub u_th: f64,
}

impl ControlInput {
    pub const COAST: ControlInput = ControlInput {
        f_m: 0.0,
        f_brake: 0.0,
        u_th: 0.0,
    };
}

/// Per-metre state derivatives plus the power-flow breakdown behind the
/// battery derivative.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Derivative {
    pub e_kin: f64,
    pub e_b: f64,
    pub theta_m: f64,
    pub theta_b: f64,
    /// Lethargy dt/ds [s/m].
    pub t: f64,
    /// Wheel energy delivered by the motor [J/m].
    pub wheel: f64,
    pub loss_m: f64,
    pub aux: f64,
    pub loss_b: f64,
}

/// Exact (non-relaxed) model right-hand side at `state` under `input`.
pub fn derivatives(
    state: &VehicleState,
    input: &ControlInput,
    grip: &GripState,
    params: &VehicleParams,
    grade: f64,
) -> Result<Derivative> {
    if !(state.e_kin > 0.0) {
        return Err(Error::NonPositiveKineticEnergy {
            e_kin: state.e_kin,
            s: state.s,
        });
    }
    let lethargy = 1.0 / params.speed(state.e_kin);
    let c_a = params.drag_coefficient(grip);
    let loss_m = params.motor_loss(input.f_m);
    let aux = params.p_aux * lethargy;
    let f_dc = input.f_m + loss_m + aux;
    let loss_b = params.battery_loss(f_dc);
    Ok(Derivative {
        e_kin: input.f_m + input.f_brake - c_a * state.e_kin - params.resistance(grade),
        e_b: -(f_dc + loss_b),
        theta_m: (loss_m - params.h_m * (state.theta_m - params.theta_cool) * lethargy)
            / params.c_m,
        theta_b: (loss_b - params.h_b * (state.theta_b - params.theta_cool) * lethargy)
            / params.c_b,
        t: lethargy,
        wheel: input.f_m,
        loss_m,
        aux,
        loss_b,
    })
}

/// AB2 increment weights: `h·(3/2·f[k] − 1/2·f[k−1])`, or explicit Euler
/// when there is no history.
fn ab2_increment(h: f64, curr: f64, prev: Option<f64>) -> f64 {
    match prev {
        Some(p) => h * (1.5 * curr - 0.5 * p),
        None => h * curr,
    }
}

/// Second-order Adams–Bashforth step (Euler bootstrap when `prev` is absent).
pub fn step_ab2(
    prev: Option<&Derivative>,
    curr: &Derivative,
    state: &VehicleState,
    h: f64,
) -> Result<VehicleState> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step {h} must be positive")));
    }
    let next = VehicleState {
        e_kin: state.e_kin + ab2_increment(h, curr.e_kin, prev.map(|p| p.e_kin)),
        e_b: state.e_b + ab2_increment(h, curr.e_b, prev.map(|p| p.e_b)),
        theta_m: state.theta_m + ab2_increment(h, curr.theta_m, prev.map(|p| p.theta_m)),
        theta_b: state.theta_b + ab2_increment(h, curr.theta_b, prev.map(|p| p.theta_b)),
        s: state.s + h,
        t: state.t + ab2_increment(h, curr.t, prev.map(|p| p.t)),
    };
    if !(next.e_kin > 0.0) {
        return Err(Error::Stalled { s: next.s });
    }
    Ok(next)
}

/// Inputs that make the next AB2 step land exactly on `e_kin_target`.
///
/// The total longitudinal force goes to the motor first (regen-then-friction)
/// and the remainder to the mechanical brake.
pub fn invert_for_bound(
    state: &VehicleState,
    e_kin_target: f64,
    prev: Option<&Derivative>,
    h: f64,
    params: &VehicleParams,
    grip: &GripState,
    grade: f64,
) -> Result<ControlInput> {
    if !(e_kin_target > 0.0) {
        return Err(Error::InvalidInput(format!(
            "target {e_kin_target} J must be positive"
        )));
    }
    if !(state.e_kin > 0.0) {
        return Err(Error::NonPositiveKineticEnergy {
            e_kin: state.e_kin,
            s: state.s,
        });
    }
    let required_rate = match prev {
        Some(p) => (e_kin_target - state.e_kin + 0.5 * h * p.e_kin) / (1.5 * h),
        None => (e_kin_target - state.e_kin) / h,
    };
    let passive = params.drag_coefficient(grip) * state.e_kin + params.resistance(grade);
    let total = required_rate + passive;
    let lethargy = 1.0 / params.speed(state.e_kin);
    let (lo, hi) = params.motor_force_range(lethargy);
    // round-off slack so a target computed from a full-throttle step inverts
    if total > hi + 1e-9 * hi.abs().max(1.0) {
        let reachable = state.e_kin + ab2_increment(h, hi - passive, prev.map(|p| p.e_kin));
        return Err(Error::TargetUnreachable {
            s: state.s + h,
            target: e_kin_target,
            reachable,
        });
    }
    let f_m = total.clamp(lo, hi);
    let f_brake = (total - f_m).min(0.0);
    if f_brake < -params.f_brake_max {
        return Err(Error::InfeasibleBraking {
            s: state.s,
            shortfall: -params.f_brake_max - f_brake,
        });
    }
    let u_th = if f_m > 0.0 && hi > 0.0 {
        (f_m / hi).min(1.0)
    } else {
        0.0
    };
    Ok(ControlInput { f_m, f_brake, u_th })
}

/// Largest deceleration force available at kinetic energy `e_kin` when the
/// drag is evaluated at `e_drag` [N].
fn decel_capability(params: &VehicleParams, grip: &GripState, e_kin: f64, e_drag: f64) -> f64 {
    let regen = (params.p_regen / params.speed(e_kin)).min(params.f_m_max);
    params.f_brake_max
        + regen
        + params.drag_coefficient(grip) * e_drag
        + params.c_r * params.m * GRAVITY
}

/// Backward recurrence `bound[k] = min(upper[k], bound[k+1] + h_k·slope(k, bound[k+1]))`.
pub fn backward_envelope(
    upper: &[f64],
    steps: &[f64],
    mut slope: impl FnMut(usize, f64) -> f64,
) -> Vec<f64> {
    debug_assert_eq!(upper.len(), steps.len() + 1);
    let mut out = upper.to_vec();
    for k in (0..steps.len()).rev() {
        let reach = out[k + 1] + steps[k] * slope(k, out[k + 1]);
        out[k] = upper[k].min(reach);
    }
    out
}

/// Kinetic-energy bound honouring deceleration limits, so that a forward
/// simulation can always brake in time for the next corner.
pub fn braking_envelope(
    upper: &[f64],
    grid: &Grid,
    params: &VehicleParams,
    grip_at: impl Fn(f64) -> GripState,
) -> Vec<f64> {
    let steps = grid.steps();
    backward_envelope(upper, &steps, |k, e_next| {
        let grip = grip_at(grid.nodes[k]);
        // regen evaluated at the (faster) candidate speed, drag at the slower one
        let first = decel_capability(params, &grip, e_next, e_next);
        let candidate = e_next + steps[k] * first;
        decel_capability(params, &grip, candidate, e_next)
    })
}

/// Result of a bounded AB2 step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub input: ControlInput,
    pub derivative: Derivative,
    /// The requested input would have exceeded the bound and was replaced by
    /// the analytic inversion.
    pub grip_limited: bool,
}

/// Owns the integrator state of a forward simulation.
#[derive(Debug, Clone)]
pub struct Ab2Stepper {
    pub state: VehicleState,
    prev: Option<Derivative>,
}

impl Ab2Stepper {
    pub fn new(state: VehicleState) -> Self {
        Self { state, prev: None }
    }

    pub fn previous(&self) -> Option<&Derivative> {
        self.prev.as_ref()
    }

    /// Applies `input` for one step of length `h`; when the predicted kinetic
    /// energy exceeds `bound`, recomputes the inputs so that it lands on it.
    pub fn step_bounded(
        &mut self,
        input: ControlInput,
        h: f64,
        bound: f64,
        params: &VehicleParams,
        grip: &GripState,
        grade: f64,
    ) -> Result<StepOutcome> {
        let mut input = input;
        let mut derivative = derivatives(&self.state, &input, grip, params, grade)?;
        let mut next = step_ab2(self.prev.as_ref(), &derivative, &self.state, h);
        let mut grip_limited = false;
        let overshoot = match &next {
            Ok(n) => n.e_kin > bound,
            Err(_) => false,
        };
        if overshoot {
            input = invert_for_bound(
                &self.state,
                bound,
                self.prev.as_ref(),
                h,
                params,
                grip,
                grade,
            )?;
            derivative = derivatives(&self.state, &input, grip, params, grade)?;
            next = step_ab2(self.prev.as_ref(), &derivative, &self.state, h);
            grip_limited = true;
        }
        let mut next = next?;
        if grip_limited {
            // remove rounding so the bound is met exactly
            next.e_kin = next.e_kin.min(bound);
        }
        self.prev = Some(derivative);
        self.state = next;
        Ok(StepOutcome {
            input,
            derivative,
            grip_limited,
        })
    }
}

//! Convex minimum-stint-time problem as a second-order cone program.
//!
//! Decision variables per node: kinetic energy, speed, lethargy, motor and
//! brake force, motor loss, DC force, battery loss, battery energy and the two
//! temperatures. Dynamics are trapezoidal collocation rows written per metre.
//! Speed and lethargy are coupled through two rotated cones
//! (`v² ≤ 2·E_kin/m_eq`, `ℓ·v ≥ 1`), and the quadratic losses through one cone
//! each. The kinetic-energy co-state is read from the duals of the
//! kinetic-energy collocation rows.

use std::ops::Range;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use serde::{Deserialize, Serialize};

use crate::model::{VehicleParams, VehicleState};
use crate::track::{max_kinetic_energy_with, Grid, GripState, TrackProfile};
use crate::{Error, Result};

/// Relative residual above which a relaxed cone is reported as loose.
pub const TIGHTNESS_WARNING: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StintBoundary {
    pub s0: f64,
    pub s_stint: f64,
    pub x0: VehicleState,
    pub e_b_target: f64,
    pub theta_b_target: f64,
}

impl StintBoundary {
    pub fn validate(&self, params: &VehicleParams) -> Result<()> {
        if !(self.s_stint > self.s0) {
            return Err(Error::EmptyHorizon {
                s0: self.s0,
                s_stint: self.s_stint,
            });
        }
        if !(self.x0.e_kin > 0.0) {
            return Err(Error::NonPositiveKineticEnergy {
                e_kin: self.x0.e_kin,
                s: self.s0,
            });
        }
        if self.e_b_target > params.e_b_max {
            return Err(Error::InfeasibleBoundary(format!(
                "terminal battery energy target {} J exceeds E_b_max {} J",
                self.e_b_target, params.e_b_max
            )));
        }
        if self.e_b_target < params.e_b_min {
            return Err(Error::InvalidInput(format!(
                "terminal battery energy target {} J below E_b_min {} J",
                self.e_b_target, params.e_b_min
            )));
        }
        if self.theta_b_target > params.theta_b_max {
            return Err(Error::InvalidInput(format!(
                "terminal battery temperature target {} K above theta_b_max {} K",
                self.theta_b_target, params.theta_b_max
            )));
        }
        Ok(())
    }
}

/// Per-node model data along a horizon: the kinetic-energy bound, drag
/// coefficient and rolling/grade resistance under a (possibly
/// position-dependent) grip state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonModel {
    pub grid: Grid,
    pub e_kin_max: Vec<f64>,
    pub drag: Vec<f64>,
    pub resistance: Vec<f64>,
}

impl HorizonModel {
    pub fn new(
        track: &TrackProfile,
        params: &VehicleParams,
        grid: &Grid,
        grip_at: impl Fn(f64) -> GripState,
    ) -> Result<Self> {
        let e_kin_max = max_kinetic_energy_with(track, params, grid, &grip_at)?;
        let drag = grid
            .nodes
            .iter()
            .map(|&s| params.drag_coefficient(&grip_at(s)))
            .collect();
        let resistance = grid
            .nodes
            .iter()
            .map(|&s| params.resistance(track.grade_at(s)))
            .collect();
        Ok(Self {
            grid: grid.clone(),
            e_kin_max,
            drag,
            resistance,
        })
    }
}

/// Variable slots per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
enum Var {
    EKin,
    Speed,
    Lethargy,
    MotorForce,
    BrakeForce,
    MotorLoss,
    DcForce,
    BatteryLoss,
    BatteryEnergy,
    MotorTemp,
    BatteryTemp,
}

const VARS_PER_NODE: usize = 11;

/// Physical value = scale × solver value.
const fn var_scale(v: Var) -> f64 {
    match v {
        Var::EKin => 1e5,
        Var::Speed => 10.0,
        Var::Lethargy => 1e-2,
        Var::MotorForce | Var::BrakeForce | Var::DcForce => 1e3,
        Var::MotorLoss | Var::BatteryLoss => 1e2,
        Var::BatteryEnergy => 1e6,
        Var::MotorTemp | Var::BatteryTemp => 10.0,
    }
}

fn idx(node: usize, v: Var) -> usize {
    node * VARS_PER_NODE + v as usize
}

/// Row scale for per-metre force rows.
const FORCE_ROW: f64 = 1e-3;
/// Objective scale (solver objective = scale × seconds).
const OBJECTIVE_SCALE: f64 = 1e-2;
/// Scale of the quadratic-loss cones.
const LOSS_CONE: f64 = 10.0;

/// Named block of constraint rows, used to report infeasibility.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowFamily {
    pub name: String,
    pub rows: Range<usize>,
}

/// Counts of the conic problem's building blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSize {
    pub variables: usize,
    pub equalities: usize,
    pub inequalities: usize,
    pub second_order_cones: usize,
}

impl ProblemSize {
    /// Sizes implied by the construction rules for a grid of `nodes` nodes:
    /// 11 variables per node; 4 initial pins, 4 collocation rows per interval
    /// and one DC-force definition per node; 7 input and kinetic-energy limits
    /// per node, 4 state bounds per node except the pinned first node, 2
    /// terminal rows; 4 cones per node.
    pub fn for_nodes(nodes: usize) -> Self {
        Self {
            variables: VARS_PER_NODE * nodes,
            equalities: 3 + 4 * (nodes - 1) + nodes,
            inequalities: 1 + 7 * nodes + 4 * (nodes - 1) + 2,
            second_order_cones: 4 * nodes,
        }
    }
}

/// Conic problem in Clarabel's form `min q'x  s.t.  Ax + s = b, s ∈ K`.
#[derive(Debug, Clone)]
pub struct ConicProblem {
    pub grid: Grid,
    pub e_kin_max: Vec<f64>,
    pub size: ProblemSize,
    pub families: Vec<RowFamily>,
    a: CscMatrix<f64>,
    b: Vec<f64>,
    q: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
    /// First row of the kinetic-energy collocation block.
    ekin_rows: usize,
    /// Row of the initial kinetic-energy pin.
    ekin_pin_row: usize,
    m_eq: f64,
}

/// Row-oriented triplet builder that applies variable and row scaling.
struct Builder {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
    families: Vec<RowFamily>,
}

impl Builder {
    fn new() -> Self {
        Self {
            rows: vec![],
            cols: vec![],
            vals: vec![],
            b: vec![],
            families: vec![],
        }
    }

    fn row_count(&self) -> usize {
        self.b.len()
    }

    /// Adds `Σ coeff·x_phys (+ s) = rhs`, all multiplied by `row_scale`.
    fn push(&mut self, terms: &[(usize, Var, f64)], rhs: f64, row_scale: f64) {
        let r = self.b.len();
        for &(node, var, coeff) in terms {
            if coeff != 0.0 {
                self.rows.push(r);
                self.cols.push(idx(node, var));
                self.vals.push(coeff * var_scale(var) * row_scale);
            }
        }
        self.b.push(rhs * row_scale);
    }

    fn family<F: FnOnce(&mut Self)>(&mut self, name: &str, f: F) {
        let start = self.row_count();
        f(self);
        let end = self.row_count();
        self.families.push(RowFamily {
            name: name.to_string(),
            rows: start..end,
        });
    }

    /// Rotated cone `x² ≤ y·z` expressed as `(y + z, 2x, y − z) ∈ SOC`, where
    /// each of x, y, z is an affine function `Σ coeff·x_phys + const`.
    fn rotated_cone(
        &mut self,
        x: (&[(usize, Var, f64)], f64),
        y: (&[(usize, Var, f64)], f64),
        z: (&[(usize, Var, f64)], f64),
    ) {
        // s = b − A·x, so A holds the negated affine coefficients
        let neg = |t: &[(usize, Var, f64)], sign: f64| -> Vec<(usize, Var, f64)> {
            t.iter().map(|&(n, v, c)| (n, v, -sign * c)).collect()
        };
        let mut first = neg(y.0, 1.0);
        first.extend(neg(z.0, 1.0));
        self.push(&first, y.1 + z.1, 1.0);
        self.push(&neg(x.0, 2.0), 2.0 * x.1, 1.0);
        let mut third = neg(y.0, 1.0);
        third.extend(neg(z.0, -1.0));
        self.push(&third, y.1 - z.1, 1.0);
    }
}

/// Lethargy guess for the first solve: constant speed at 2/3 of the
/// straight-line cap.
pub fn initial_lethargy_ref(params: &VehicleParams, grid: &Grid) -> Vec<f64> {
    vec![1.5 / params.v_max; grid.len()]
}

fn presolve_checks(
    params: &VehicleParams,
    boundary: &StintBoundary,
    grid: &Grid,
    lethargy_ref: &[f64],
) -> Result<()> {
    boundary.validate(params)?;
    if (grid.start() - boundary.s0).abs() > 1e-6 || (grid.end() - boundary.s_stint).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "grid [{}, {}] does not match horizon [{}, {}]",
            grid.start(),
            grid.end(),
            boundary.s0,
            boundary.s_stint
        )));
    }
    if lethargy_ref.len() != grid.len() {
        return Err(Error::InvalidInput(format!(
            "lethargy reference has {} entries for {} nodes",
            lethargy_ref.len(),
            grid.len()
        )));
    }
    if lethargy_ref.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidInput(
            "lethargy reference must be positive".into(),
        ));
    }
    let reachable = (boundary.x0.e_b + boundary.x0.e_kin).min(params.e_b_max);
    if boundary.e_b_target > reachable {
        return Err(Error::InfeasibleBoundary(format!(
            "terminal battery energy target {:.0} J exceeds the {:.0} J reachable from the initial state",
            boundary.e_b_target, reachable
        )));
    }
    if boundary.theta_b_target < params.theta_cool {
        return Err(Error::InfeasibleBoundary(format!(
            "terminal battery temperature target {} K is below the coolant temperature {} K",
            boundary.theta_b_target, params.theta_cool
        )));
    }
    Ok(())
}

/// Builds the conic program over `grid` for a constant grip state.
pub fn build_problem(
    track: &TrackProfile,
    params: &VehicleParams,
    grip: &GripState,
    boundary: &StintBoundary,
    grid: &Grid,
    lethargy_ref: &[f64],
) -> Result<ConicProblem> {
    let model = HorizonModel::new(track, params, grid, |_| *grip)?;
    build_problem_on(&model, params, boundary, lethargy_ref)
}

/// Builds the conic program from precomputed per-node horizon data.
pub fn build_problem_on(
    model: &HorizonModel,
    params: &VehicleParams,
    boundary: &StintBoundary,
    lethargy_ref: &[f64],
) -> Result<ConicProblem> {
    let grid = &model.grid;
    presolve_checks(params, boundary, grid, lethargy_ref)?;
    let n = grid.len();
    let steps = grid.steps();
    let x0 = &boundary.x0;
    let mut bld = Builder::new();

    // ---- equalities
    bld.family("initial conditions", |b| {
        b.push(
            &[(0, Var::BatteryEnergy, 1.0)],
            x0.e_b,
            1.0 / var_scale(Var::BatteryEnergy),
        );
        b.push(
            &[(0, Var::MotorTemp, 1.0)],
            x0.theta_m,
            1.0 / var_scale(Var::MotorTemp),
        );
        b.push(
            &[(0, Var::BatteryTemp, 1.0)],
            x0.theta_b,
            1.0 / var_scale(Var::BatteryTemp),
        );
    });
    let ekin_rows = bld.row_count();
    bld.family("vehicle dynamics", |b| {
        for k in 0..n - 1 {
            let h = steps[k];
            let (j0, j1) = (k, k + 1);
            b.push(
                &[
                    (j1, Var::EKin, 1.0 / h + 0.5 * model.drag[j1]),
                    (j0, Var::EKin, -1.0 / h + 0.5 * model.drag[j0]),
                    (j0, Var::MotorForce, -0.5),
                    (j1, Var::MotorForce, -0.5),
                    (j0, Var::BrakeForce, -0.5),
                    (j1, Var::BrakeForce, -0.5),
                ],
                -0.5 * (model.resistance[j0] + model.resistance[j1]),
                FORCE_ROW,
            );
        }
    });
    bld.family("battery", |b| {
        for k in 0..n - 1 {
            let h = steps[k];
            b.push(
                &[
                    (k + 1, Var::BatteryEnergy, 1.0 / h),
                    (k, Var::BatteryEnergy, -1.0 / h),
                    (k, Var::DcForce, 0.5),
                    (k + 1, Var::DcForce, 0.5),
                    (k, Var::BatteryLoss, 0.5),
                    (k + 1, Var::BatteryLoss, 0.5),
                ],
                0.0,
                FORCE_ROW,
            );
        }
    });
    bld.family("electric machine thermal", |b| {
        for k in 0..n - 1 {
            let h = steps[k];
            let (g0, g1) = (
                params.h_m * lethargy_ref[k],
                params.h_m * lethargy_ref[k + 1],
            );
            b.push(
                &[
                    (k + 1, Var::MotorTemp, params.c_m / h + 0.5 * g1),
                    (k, Var::MotorTemp, -params.c_m / h + 0.5 * g0),
                    (k, Var::MotorLoss, -0.5),
                    (k + 1, Var::MotorLoss, -0.5),
                ],
                0.5 * (g0 + g1) * params.theta_cool,
                FORCE_ROW,
            );
        }
    });
    bld.family("battery thermal", |b| {
        for k in 0..n - 1 {
            let h = steps[k];
            let (g0, g1) = (
                params.h_b * lethargy_ref[k],
                params.h_b * lethargy_ref[k + 1],
            );
            b.push(
                &[
                    (k + 1, Var::BatteryTemp, params.c_b / h + 0.5 * g1),
                    (k, Var::BatteryTemp, -params.c_b / h + 0.5 * g0),
                    (k, Var::BatteryLoss, -0.5),
                    (k + 1, Var::BatteryLoss, -0.5),
                ],
                0.5 * (g0 + g1) * params.theta_cool,
                FORCE_ROW,
            );
        }
    });
    bld.family("inverter", |b| {
        for k in 0..n {
            b.push(
                &[
                    (k, Var::DcForce, 1.0),
                    (k, Var::MotorForce, -1.0),
                    (k, Var::MotorLoss, -1.0),
                    (k, Var::Lethargy, -params.p_aux),
                ],
                0.0,
                FORCE_ROW,
            );
        }
    });
    let equalities = bld.row_count();

    // ---- linear inequalities (A·x ≤ b)
    // The start may shed kinetic energy: a measured state just above what the
    // discretized braking can absorb would otherwise make the program
    // (nearly) infeasible.
    let ekin_pin_row = bld.row_count();
    bld.family("initial conditions", |b| {
        b.push(&[(0, Var::EKin, 1.0)], x0.e_kin, 1.0 / var_scale(Var::EKin));
    });
    bld.family("electric machine limits", |b| {
        for k in 0..n {
            b.push(
                &[(k, Var::MotorForce, 1.0), (k, Var::Lethargy, -params.p_max)],
                0.0,
                FORCE_ROW,
            );
            b.push(
                &[
                    (k, Var::MotorForce, -1.0),
                    (k, Var::Lethargy, -params.p_regen),
                ],
                0.0,
                FORCE_ROW,
            );
            b.push(&[(k, Var::MotorForce, 1.0)], params.f_m_max, FORCE_ROW);
            b.push(&[(k, Var::MotorForce, -1.0)], params.f_m_max, FORCE_ROW);
        }
    });
    bld.family("brake limits", |b| {
        for k in 0..n {
            b.push(&[(k, Var::BrakeForce, 1.0)], 0.0, FORCE_ROW);
            b.push(&[(k, Var::BrakeForce, -1.0)], params.f_brake_max, FORCE_ROW);
        }
    });
    bld.family("maximum kinetic energy", |b| {
        for k in 0..n {
            let bound = if k == 0 {
                model.e_kin_max[0].max(x0.e_kin)
            } else {
                model.e_kin_max[k]
            };
            b.push(&[(k, Var::EKin, 1.0)], bound, 1.0 / var_scale(Var::EKin));
        }
    });
    bld.family("battery energy limits", |b| {
        for k in 1..n {
            let s = 1.0 / var_scale(Var::BatteryEnergy);
            b.push(&[(k, Var::BatteryEnergy, -1.0)], -params.e_b_min, s);
            b.push(&[(k, Var::BatteryEnergy, 1.0)], params.e_b_max, s);
        }
    });
    bld.family("temperature limits", |b| {
        for k in 1..n {
            b.push(
                &[(k, Var::MotorTemp, 1.0)],
                params.theta_m_max,
                1.0 / var_scale(Var::MotorTemp),
            );
            b.push(
                &[(k, Var::BatteryTemp, 1.0)],
                params.theta_b_max,
                1.0 / var_scale(Var::BatteryTemp),
            );
        }
    });
    bld.family("terminal battery energy", |b| {
        b.push(
            &[(n - 1, Var::BatteryEnergy, -1.0)],
            -boundary.e_b_target,
            1.0 / var_scale(Var::BatteryEnergy),
        );
    });
    bld.family("terminal battery temperature", |b| {
        b.push(
            &[(n - 1, Var::BatteryTemp, 1.0)],
            boundary.theta_b_target,
            1.0 / var_scale(Var::BatteryTemp),
        );
    });
    let inequalities = bld.row_count() - equalities;

    // ---- second-order cones
    let speed_unit = var_scale(Var::Speed);
    let lethargy_product = 1.0 / (var_scale(Var::Lethargy) * var_scale(Var::Speed));
    bld.family("speed relaxation", |b| {
        for k in 0..n {
            // (v/σ)² ≤ (2E/(m_eq σ²))·1
            b.rotated_cone(
                (&[(k, Var::Speed, 1.0 / speed_unit)], 0.0),
                (
                    &[(k, Var::EKin, 2.0 / (params.m_eq * speed_unit * speed_unit))],
                    0.0,
                ),
                (&[], 1.0),
            );
        }
    });
    bld.family("lethargy relaxation", |b| {
        for k in 0..n {
            // (ℓ/σ_ℓ)(v/σ_v) ≥ 1/(σ_ℓ σ_v)
            b.rotated_cone(
                (&[], lethargy_product.sqrt()),
                (&[(k, Var::Lethargy, 1.0 / var_scale(Var::Lethargy))], 0.0),
                (&[(k, Var::Speed, 1.0 / var_scale(Var::Speed))], 0.0),
            );
        }
    });
    let sq = LOSS_CONE * LOSS_CONE;
    bld.family("electric machine losses", |b| {
        for k in 0..n {
            b.rotated_cone(
                (
                    &[(k, Var::MotorForce, params.alpha_m.sqrt() / LOSS_CONE)],
                    0.0,
                ),
                (&[(k, Var::MotorLoss, 1.0 / sq)], -params.beta_m / sq),
                (&[], 1.0),
            );
        }
    });
    bld.family("battery losses", |b| {
        for k in 0..n {
            b.rotated_cone(
                (&[(k, Var::DcForce, params.alpha_b.sqrt() / LOSS_CONE)], 0.0),
                (&[(k, Var::BatteryLoss, 1.0 / sq)], 0.0),
                (&[], 1.0),
            );
        }
    });

    let m = bld.row_count();
    let nvar = VARS_PER_NODE * n;
    let a = CscMatrix::new_from_triplets(m, nvar, bld.rows, bld.cols, bld.vals);

    let mut q = vec![0.0; nvar];
    for k in 0..n - 1 {
        let w = 0.5 * steps[k] * var_scale(Var::Lethargy) * OBJECTIVE_SCALE;
        q[idx(k, Var::Lethargy)] += w;
        q[idx(k + 1, Var::Lethargy)] += w;
    }

    let mut cones = vec![
        SupportedConeT::ZeroConeT(equalities),
        SupportedConeT::NonnegativeConeT(inequalities),
    ];
    cones.extend(std::iter::repeat(SupportedConeT::SecondOrderConeT(3)).take(4 * n));

    let size = ProblemSize {
        variables: nvar,
        equalities,
        inequalities,
        second_order_cones: 4 * n,
    };
    Ok(ConicProblem {
        grid: grid.clone(),
        e_kin_max: model.e_kin_max.clone(),
        size,
        families: bld.families,
        a,
        b: bld.b,
        q,
        cones,
        ekin_rows,
        ekin_pin_row,
        m_eq: params.m_eq,
    })
}

impl ConicProblem {
    pub fn rows(&self) -> usize {
        self.b.len()
    }

    fn family_of(&self, row: usize) -> &str {
        self.families
            .iter()
            .find(|f| f.rows.contains(&row))
            .map(|f| f.name.as_str())
            .unwrap_or("unknown")
    }

    /// Trapezoidal objective for a lethargy profile [s].
    pub fn objective_of(&self, lethargy: &[f64]) -> f64 {
        self.grid
            .steps()
            .iter()
            .enumerate()
            .map(|(k, h)| 0.5 * h * (lethargy[k] + lethargy[k + 1]))
            .sum()
    }
}

/// Solver outcome of Problem 1 on one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSolution {
    pub grid: Grid,
    pub e_kin: Vec<f64>,
    pub e_kin_max: Vec<f64>,
    pub v: Vec<f64>,
    pub lethargy: Vec<f64>,
    #[serde(rename = "F_m")]
    pub f_m: Vec<f64>,
    #[serde(rename = "F_brake")]
    pub f_brake: Vec<f64>,
    #[serde(rename = "F_loss_m")]
    pub f_loss_m: Vec<f64>,
    #[serde(rename = "F_dc")]
    pub f_dc: Vec<f64>,
    #[serde(rename = "F_loss_b")]
    pub f_loss_b: Vec<f64>,
    #[serde(rename = "E_b")]
    pub e_b: Vec<f64>,
    pub theta_m: Vec<f64>,
    pub theta_b: Vec<f64>,
    /// Kinetic-energy co-state per node [s/J], ≤ 0.
    pub lambda_kin: Vec<f64>,
    /// Predicted remaining stint time [s].
    pub t_pred: f64,
    pub status: String,
    pub iterations: u32,
    /// Wall-clock solve time [s]; not serialized so outputs stay reproducible.
    #[serde(skip)]
    pub solve_time: f64,
    /// Set when a relaxed cone is loose by more than [`TIGHTNESS_WARNING`].
    pub tightness_warning: bool,
}

/// Relative residuals of the two speed-related relaxations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tightness {
    /// `ℓ·v − 1` per node.
    pub lethargy: Vec<f64>,
    /// `(v²·m_eq/2 − E_kin)/E_kin` per node.
    pub speed: Vec<f64>,
}

impl Tightness {
    /// Fraction of nodes where both residuals are within `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        let ok = self
            .lethargy
            .iter()
            .zip(&self.speed)
            .filter(|(l, s)| l.abs() <= tol && s.abs() <= tol)
            .count();
        ok as f64 / self.lethargy.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.lethargy
            .iter()
            .chain(&self.speed)
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl PlanSolution {
    pub fn tightness(&self, m_eq: f64) -> Tightness {
        let lethargy = self
            .lethargy
            .iter()
            .zip(&self.v)
            .map(|(l, v)| l * v - 1.0)
            .collect();
        let speed = self
            .v
            .iter()
            .zip(&self.e_kin)
            .map(|(v, e)| (0.5 * m_eq * v * v - e) / e)
            .collect();
        Tightness { lethargy, speed }
    }

    pub fn speed_at(&self, s: f64) -> f64 {
        self.grid.interpolate(&self.v, s)
    }
}

fn status_name(status: SolverStatus) -> String {
    format!("{status:?}")
}

/// Solves the conic program and extracts the step-normalized co-state.
pub fn solve(problem: &ConicProblem) -> Result<PlanSolution> {
    let started = Instant::now();
    let n = problem.grid.len();
    let nvar = problem.size.variables;
    let p = CscMatrix::<f64>::zeros((nvar, nvar));
    let settings = DefaultSettings {
        verbose: false,
        max_iter: 300,
        tol_gap_rel: 1e-6,
        tol_feas: 1e-7,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(
        &p,
        &problem.q,
        &problem.a,
        &problem.b,
        &problem.cones,
        settings,
    )
    .map_err(|e| Error::InvalidInput(format!("conic problem rejected: {e}")))?;
    solver.solve();
    let sol = &solver.solution;
    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            // the Farkas certificate is largest on the rows that cannot be met
            let (row, _) = sol
                .z
                .iter()
                .enumerate()
                .fold(
                    (0, 0.0),
                    |(bi, bv), (i, &z)| if z.abs() > bv { (i, z.abs()) } else { (bi, bv) },
                );
            return Err(Error::SolverFailed {
                status: status_name(sol.status),
                family: problem.family_of(row).to_string(),
            });
        }
        other => {
            return Err(Error::SolverFailed {
                status: status_name(other),
                family: "unknown".into(),
            })
        }
    }

    let get = |k: usize, v: Var| sol.x[idx(k, v)] * var_scale(v);
    let col = |v: Var| (0..n).map(|k| get(k, v)).collect::<Vec<f64>>();
    let steps = problem.grid.steps();

    let mut lambda_kin = Vec::with_capacity(n);
    let pin_scale = 1.0 / var_scale(Var::EKin);
    lambda_kin.push(-sol.z[problem.ekin_pin_row] * pin_scale / OBJECTIVE_SCALE);
    for k in 0..n - 1 {
        let z = sol.z[problem.ekin_rows + k];
        lambda_kin.push(-z * FORCE_ROW / (OBJECTIVE_SCALE * steps[k]));
    }

    let lethargy = col(Var::Lethargy);
    let mut plan = PlanSolution {
        grid: problem.grid.clone(),
        e_kin: col(Var::EKin),
        e_kin_max: problem.e_kin_max.clone(),
        v: col(Var::Speed),
        t_pred: problem.objective_of(&lethargy),
        lethargy,
        f_m: col(Var::MotorForce),
        f_brake: col(Var::BrakeForce),
        f_loss_m: col(Var::MotorLoss),
        f_dc: col(Var::DcForce),
        f_loss_b: col(Var::BatteryLoss),
        e_b: col(Var::BatteryEnergy),
        theta_m: col(Var::MotorTemp),
        theta_b: col(Var::BatteryTemp),
        lambda_kin,
        status: if sol.status == SolverStatus::Solved {
            "optimal".into()
        } else {
            "almost_optimal".into()
        },
        iterations: sol.iterations,
        solve_time: 0.0,
        tightness_warning: false,
    };
    let worst = plan.tightness(problem.m_eq).max();
    if worst > TIGHTNESS_WARNING {
        log::warn!("relaxation loose by {worst:.2e} (relative)");
        plan.tightness_warning = true;
    }
    plan.solve_time = started.elapsed().as_secs_f64();
    Ok(plan)
}

/// Solves Problem 1, re-solving `refinements` more times with the lethargy
/// reference taken from the previous solution.
pub fn solve_horizon(
    model: &HorizonModel,
    params: &VehicleParams,
    boundary: &StintBoundary,
    lethargy_ref: Option<&[f64]>,
    refinements: usize,
) -> Result<PlanSolution> {
    let mut reference = match lethargy_ref {
        Some(l) => l.to_vec(),
        None => initial_lethargy_ref(params, &model.grid),
    };
    let mut plan = solve(&build_problem_on(model, params, boundary, &reference)?)?;
    for _ in 0..refinements {
        reference = plan.lethargy.clone();
        plan = solve(&build_problem_on(model, params, boundary, &reference)?)?;
    }
    Ok(plan)
}

/// Relative rise that separates two kinetic-energy minima into distinct corners.
const APEX_SEPARATION: f64 = 0.01;
/// Half-width of the window an apex must be the minimum of [m].
pub const APEX_WINDOW: f64 = 10.0;

/// Corner apexes: nodes whose planned kinetic energy is the minimum within
/// ±[`APEX_WINDOW`] metres, entered from above, with a clear rise between
/// consecutive apexes. Horizon endpoints are never apexes.
pub fn detect_apexes(e_kin: &[f64], grid: &Grid) -> Vec<usize> {
    let n = e_kin.len();
    let mut candidates = Vec::new();
    for k in 1..n.saturating_sub(1) {
        let e = e_kin[k];
        let tol = 1e-6 * e;
        if !(e_kin[k - 1] > e + tol) {
            continue;
        }
        let s = grid.nodes[k];
        let in_window = (0..n).filter(|&j| (grid.nodes[j] - s).abs() <= APEX_WINDOW);
        if in_window.clone().all(|j| e_kin[j] >= e - tol) {
            candidates.push(k);
        }
    }
    let mut apexes: Vec<usize> = Vec::new();
    for k in candidates {
        if let Some(&last) = apexes.last() {
            let peak = e_kin[last..=k].iter().cloned().fold(f64::MIN, f64::max);
            let floor = e_kin[last].min(e_kin[k]);
            if peak < floor * (1.0 + APEX_SEPARATION) {
                if e_kin[k] < e_kin[last] * (1.0 - 1e-6) {
                    *apexes.last_mut().unwrap() = k;
                }
                continue;
            }
        }
        apexes.push(k);
    }
    apexes
}

/// Overwrites the co-state between each apex and the co-state minimum that
/// follows it (before the next apex) with that minimum.
pub fn flatten_costate(lambda: &[f64], apexes: &[usize]) -> Vec<f64> {
    let mut out = lambda.to_vec();
    for (i, &a) in apexes.iter().enumerate() {
        let end = apexes.get(i + 1).copied().unwrap_or(lambda.len());
        let (argmin, min) =
            (a..end)
                .map(|j| (j, lambda[j]))
                .fold(
                    (a, f64::INFINITY),
                    |(bj, bv), (j, v)| if v < bv { (j, v) } else { (bj, bv) },
                );
        for x in &mut out[a..=argmin] {
            *x = min;
        }
    }
    out
}

/// Robustified co-state of a solved plan.
pub fn robustify_costate(plan: &PlanSolution) -> Vec<f64> {
    let apexes = detect_apexes(&plan.e_kin, &plan.grid);
    flatten_costate(&plan.lambda_kin, &apexes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_hand_example() {
        assert_eq!(
            flatten_costate(&[-5.0, -3.0, -8.0, -2.0], &[0]),
            vec![-8.0, -8.0, -8.0, -2.0]
        );
    }

    #[test]
    fn flatten_monotone_after_apex_unchanged() {
        let l = [-9.0, -7.0, -4.0, -1.0];
        assert_eq!(flatten_costate(&l, &[0]), l.to_vec());
        assert_eq!(flatten_costate(&l, &[]), l.to_vec());
    }

    #[test]
    fn apex_detection_on_two_dips() {
        let nodes: Vec<f64> = (0..40).map(|i| i as f64 * 5.0).collect();
        let grid = Grid::new(nodes).unwrap();
        let e: Vec<f64> = (0..40)
            .map(|i| {
                let x = i as f64;
                4e5 - 1.5e5 * (-(x - 10.0).powi(2) / 4.0).exp()
                    - 1e5 * (-(x - 30.0).powi(2) / 4.0).exp()
            })
            .collect();
        assert_eq!(detect_apexes(&e, &grid), vec![10, 30]);
        // a pure straight has none
        let flat: Vec<f64> = (0..40).map(|i| 2e5 + 1e3 * i as f64).collect();
        assert!(detect_apexes(&flat, &grid).is_empty());
    }

    #[test]
    fn apex_plateau_uses_first_node() {
        let grid = Grid::new((0..12).map(|i| i as f64 * 5.0).collect()).unwrap();
        let e = [5e5, 4e5, 3e5, 2e5, 2e5, 2e5, 2e5, 2e5, 3e5, 4e5, 5e5, 6e5];
        assert_eq!(detect_apexes(&e, &grid), vec![3]);
    }

    #[test]
    fn problem_size_formula() {
        let s = ProblemSize::for_nodes(2);
        assert_eq!(s.variables, 22);
        assert_eq!(s.equalities, 3 + 4 + 2);
        assert_eq!(s.inequalities, 1 + 14 + 4 + 2);
        assert_eq!(s.second_order_cones, 8);
    }
}

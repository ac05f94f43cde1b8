use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty horizon: s0 = {s0} m, s_stint = {s_stint} m")]
    EmptyHorizon { s0: f64, s_stint: f64 },

    #[error("track sampling of {spacing} m is coarser than the requested {step} m step")]
    CoarseTrack { spacing: f64, step: f64 },

    #[error("downforce-unbounded corner at node {node} (s = {s} m)")]
    DownforceUnboundedCorner { node: usize, s: f64 },

    #[error("cannot close the lap: {0}")]
    LapClosure(String),

    #[error("non-positive kinetic energy {e_kin} J at s = {s} m")]
    NonPositiveKineticEnergy { e_kin: f64, s: f64 },

    #[error("vehicle stalled at s = {s} m")]
    Stalled { s: f64 },

    #[error("infeasible braking at s = {s} m: shortfall {shortfall} N")]
    InfeasibleBraking { s: f64, shortfall: f64 },

    #[error("kinetic-energy target {target} J above reachable {reachable} J at s = {s} m")]
    TargetUnreachable { s: f64, target: f64, reachable: f64 },

    #[error("infeasible boundary: {0}")]
    InfeasibleBoundary(String),

    #[error("solver reported {status}; first violated constraint family: {family}")]
    SolverFailed { status: String, family: String },

    #[error("no throttle map yields a feasible stint; relax the charge or stint targets")]
    AllMapsInfeasible,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors meaning "the requested problem has no solution", as
    /// opposed to malformed input or runtime failures.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Error::InfeasibleBoundary(_) | Error::SolverFailed { .. } | Error::AllMapsInfeasible
        )
    }
}

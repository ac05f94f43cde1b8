//! Run configuration: everything a command needs, loaded from one JSON file
//! and overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stint_core::controller::{ControllerConfig, PlanningContext, Variant};
use stint_core::harness::{DisturbanceScenario, DriverModel};
use stint_core::liftcoast::ThrottleMap;
use stint_core::model::{VehicleParams, VehicleState};
use stint_core::nominal::{ChargeModel, NominalConfig};
use stint_core::socp::StintBoundary;
use stint_core::track::{generate_synthetic_track, TrackProfile};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TrackSource {
    /// Track CSV with columns `s,kappa,grade`.
    Csv(PathBuf),
    Synthetic { seed: u64, n_corners: usize, s_lap: f64 },
}

impl Default for TrackSource {
    fn default() -> Self {
        let n = NominalConfig::default();
        TrackSource::Synthetic { seed: n.track_seed, n_corners: n.n_corners, s_lap: n.s_lap }
    }
}

/// Explicit terminal targets, used instead of a charging time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Targets {
    pub e_b_target: f64,
    pub theta_b_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryConfig {
    pub n_laps: usize,
    pub s0: f64,
    /// Speed at `s0` [m/s].
    pub v0: f64,
    /// Charging time that sets the terminal targets [s].
    pub t_charge: f64,
    /// Explicit terminal targets; take precedence over `t_charge`.
    pub targets: Option<Targets>,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        let n = NominalConfig::default();
        Self { n_laps: n.n_laps, s0: 0.0, v0: n.v0, t_charge: n.t_charge, targets: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub n_laps: Vec<usize>,
    pub t_charge: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { n_laps: vec![9, 10, 11, 12], t_charge: vec![90.0, 120.0, 150.0, 180.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub track: TrackSource,
    /// Vehicle parameter JSON; built-in parameters when absent.
    pub vehicle: Option<PathBuf>,
    pub boundary: BoundaryConfig,
    pub charge: ChargeModel,
    pub maps: Vec<ThrottleMap>,
    pub controller: ControllerConfig,
    /// Scenario name: `none`, `drafting`, `degradation`, `fcy`, a
    /// `+`-joined combination, or `suite` for all three.
    pub scenario: String,
    pub driver: DriverModel,
    pub sweep: SweepConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let n = NominalConfig::default();
        Self {
            track: TrackSource::default(),
            vehicle: None,
            boundary: BoundaryConfig::default(),
            charge: n.charge,
            maps: n.maps(),
            controller: ControllerConfig::default(),
            scenario: "none".into(),
            driver: DriverModel::default(),
            sweep: SweepConfig::default(),
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub scenario: Option<String>,
}

/// A validated configuration with its inputs loaded.
pub struct Resolved {
    pub config: RunConfig,
    pub hash: String,
    pub track: Arc<TrackProfile>,
    pub params: VehicleParams,
    pub boundary: StintBoundary,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut config: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        // relative input paths are taken from the config file's directory
        if let Some(base) = path.and_then(Path::parent) {
            if let TrackSource::Csv(p) = &mut config.track {
                *p = base.join(&*p);
            }
            if let Some(v) = &mut config.vehicle {
                *v = base.join(&*v);
            }
        }
        if let Some(out) = &overrides.out {
            config.out = out.clone();
        }
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(v) = overrides.variant {
            config.controller.variant = v;
        }
        if let Some(s) = &overrides.scenario {
            config.scenario = s.clone();
        }
        Ok(config)
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        let b = &self.boundary;
        if b.n_laps == 0 {
            return Err(CliError::Config("boundary.n_laps must be at least 1".into()));
        }
        if !(b.s0 >= 0.0) || !(b.v0 > 0.0) {
            return Err(CliError::Config("boundary needs s0 >= 0 and v0 > 0".into()));
        }
        if self.maps.is_empty() {
            return Err(CliError::Config("at least one throttle map is required".into()));
        }
        if let TrackSource::Csv(p) = &self.track {
            if !p.is_file() {
                return Err(CliError::Config(format!("track file {} not found", p.display())));
            }
        }
        if let Some(p) = &self.vehicle {
            if !p.is_file() {
                return Err(CliError::Config(format!("vehicle file {} not found", p.display())));
            }
        }
        self.controller.validate()?;
        self.driver.validate()?;
        Ok(())
    }

    pub fn resolve(self) -> CliResult<Resolved> {
        self.validate()?;
        let track = match &self.track {
            TrackSource::Csv(p) => TrackProfile::from_csv(fs::File::open(p)?)?,
            TrackSource::Synthetic { seed, n_corners, s_lap } => generate_synthetic_track(*seed, *n_corners, *s_lap)?,
        };
        let params = match &self.vehicle {
            Some(p) => VehicleParams::from_json(&fs::read_to_string(p)?)?,
            None => VehicleParams::default(),
        };
        params.validate()?;
        let b = &self.boundary;
        let (e_b_target, theta_b_target) = match b.targets {
            Some(t) => (t.e_b_target, t.theta_b_target),
            None => self.charge.targets(&params, b.t_charge)?,
        };
        let boundary = StintBoundary {
            s0: b.s0,
            s_stint: b.s0 + b.n_laps as f64 * track.s_lap,
            x0: VehicleState {
                e_kin: params.kinetic_energy(b.v0),
                e_b: params.e_b_max,
                theta_m: params.theta_cool,
                theta_b: params.theta_cool,
                s: b.s0,
                t: 0.0,
            },
            e_b_target,
            theta_b_target,
        };
        boundary.validate(&params)?;
        let hash = self.hash();
        Ok(Resolved { config: self, hash, track: Arc::new(track), params, boundary })
    }
}

impl Resolved {
    pub fn scenario(&self) -> CliResult<DisturbanceScenario> {
        Ok(DisturbanceScenario::by_name(&self.config.scenario, self.boundary.s_stint)?)
    }

    /// Solves the nominal planning problems.
    pub fn prepare(&self) -> CliResult<PlanningContext> {
        Ok(PlanningContext::prepare(
            self.track.clone(),
            self.params,
            self.config.maps.clone(),
            self.boundary,
            self.config.controller.rules(),
        )?)
    }

    /// Fields stamped into every JSON output.
    pub fn stamp(&self) -> serde_json::Value {
        serde_json::json!({
            "config_hash": self.hash,
            "seed": self.config.seed,
            "config": self.config,
        })
    }
}

#![allow(dead_code)]

use std::sync::Arc;

use stint_core::controller::PlanningContext;
use stint_core::liftcoast::CoastRules;
use stint_core::model::{VehicleParams, VehicleState};
use stint_core::nominal::NominalConfig;
use stint_core::socp::StintBoundary;
use stint_core::track::{TrackProfile, TrackSample};

/// The reference configuration shortened to `n_laps` laps with a charging
/// time of `t_charge` seconds.
pub fn short_config(n_laps: usize, t_charge: f64) -> NominalConfig {
    NominalConfig { n_laps, t_charge, ..NominalConfig::default() }
}

pub struct Setup {
    pub config: NominalConfig,
    pub track: Arc<TrackProfile>,
    pub params: VehicleParams,
    pub boundary: StintBoundary,
}

pub fn setup(n_laps: usize, t_charge: f64) -> Setup {
    let config = short_config(n_laps, t_charge);
    let track = Arc::new(config.track().unwrap());
    let params = config.params();
    let boundary = config.boundary(&params).unwrap();
    Setup { config, track, params, boundary }
}

impl Setup {
    pub fn context(&self) -> Arc<PlanningContext> {
        Arc::new(
            PlanningContext::prepare(
                self.track.clone(),
                self.params,
                self.config.maps(),
                self.boundary,
                CoastRules::default(),
            )
            .unwrap(),
        )
    }
}

pub fn straight_track(len: f64) -> TrackProfile {
    let samples = (0..=len as usize).map(|i| TrackSample { s: i as f64, kappa: 0.0, grade: 0.0 }).collect();
    TrackProfile::new(samples, Vec::new()).unwrap()
}

/// Boundary on `[0, len]` from `v0` with a full, cool pack and the given
/// terminal battery energy.
pub fn straight_boundary(params: &VehicleParams, len: f64, v0: f64, e_b_target: f64) -> StintBoundary {
    StintBoundary {
        s0: 0.0,
        s_stint: len,
        x0: VehicleState {
            e_kin: params.kinetic_energy(v0),
            e_b: params.e_b_max,
            theta_m: params.theta_cool,
            theta_b: params.theta_cool,
            s: 0.0,
            t: 0.0,
        },
        e_b_target,
        theta_b_target: params.theta_b_max,
    }
}

//! The synthetic reference configuration: track, vehicle, stint boundary,
//! throttle maps and charging model.

use serde::{Deserialize, Serialize};

use crate::liftcoast::ThrottleMap;
use crate::model::{VehicleParams, VehicleState};
use crate::socp::StintBoundary;
use crate::track::{generate_synthetic_track, TrackProfile};
use crate::{Error, Result};

/// Charging stop model: constant charging power with a fixed fraction of the
/// charged energy heating the pack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChargeModel {
    /// Charging power [W].
    pub p_charge: f64,
    /// Heat deposited in the pack per joule charged [-].
    pub q_ch: f64,
}

impl Default for ChargeModel {
    fn default() -> Self {
        Self {
            p_charge: 1.0e6,
            q_ch: 0.01,
        }
    }
}

impl ChargeModel {
    /// Terminal battery energy and temperature that let a charge of
    /// `t_charge` seconds refill the pack without overheating it.
    pub fn targets(&self, params: &VehicleParams, t_charge: f64) -> Result<(f64, f64)> {
        if !(t_charge >= 0.0) || !(self.p_charge > 0.0) || !(self.q_ch >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "charge model needs t_charge >= 0, P_charge > 0, q_ch >= 0 (got {t_charge}, {}, {})",
                self.p_charge, self.q_ch
            )));
        }
        let e_b_target = (params.e_b_max - self.p_charge * t_charge).max(params.e_b_min);
        let charged = params.e_b_max - e_b_target;
        let theta_b_target = params.theta_b_max - self.q_ch * charged / params.c_b;
        Ok((e_b_target, theta_b_target))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalConfig {
    pub track_seed: u64,
    pub n_corners: usize,
    pub s_lap: f64,
    pub n_laps: usize,
    /// Speed when crossing the start line [m/s].
    pub v0: f64,
    pub t_charge: f64,
    pub charge: ChargeModel,
    /// Full-throttle power of each throttle map [W].
    pub map_powers: Vec<f64>,
}

impl Default for NominalConfig {
    fn default() -> Self {
        Self {
            track_seed: 7,
            n_corners: 7,
            s_lap: 4200.0,
            n_laps: 11,
            v0: 40.0,
            t_charge: 150.0,
            charge: ChargeModel::default(),
            map_powers: vec![250e3, 246e3, 242e3],
        }
    }
}

impl NominalConfig {
    pub fn track(&self) -> Result<TrackProfile> {
        generate_synthetic_track(self.track_seed, self.n_corners, self.s_lap)
    }

    pub fn params(&self) -> VehicleParams {
        VehicleParams::default()
    }

    pub fn maps(&self) -> Vec<ThrottleMap> {
        self.map_powers
            .iter()
            .enumerate()
            .map(|(id, &p_full)| ThrottleMap { id, p_full })
            .collect()
    }

    /// Full-stint boundary from a flying start with a full, cool pack.
    pub fn boundary(&self, params: &VehicleParams) -> Result<StintBoundary> {
        stint_boundary(
            params,
            self.s_lap,
            self.n_laps,
            self.v0,
            &self.charge,
            self.t_charge,
        )
    }
}

/// Boundary for `n_laps` laps starting at the line with speed `v0`, a full
/// pack at coolant temperature, and charge-model terminal targets.
pub fn stint_boundary(
    params: &VehicleParams,
    s_lap: f64,
    n_laps: usize,
    v0: f64,
    charge: &ChargeModel,
    t_charge: f64,
) -> Result<StintBoundary> {
    if n_laps == 0 {
        return Err(Error::InvalidInput("n_laps must be at least 1".into()));
    }
    let (e_b_target, theta_b_target) = charge.targets(params, t_charge)?;
    Ok(StintBoundary {
        s0: 0.0,
        s_stint: n_laps as f64 * s_lap,
        x0: VehicleState {
            e_kin: params.kinetic_energy(v0),
            e_b: params.e_b_max,
            theta_m: params.theta_cool,
            theta_b: params.theta_cool,
            s: 0.0,
            t: 0.0,
        },
        e_b_target,
        theta_b_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charge_targets() {
        let p = VehicleParams::default();
        let c = ChargeModel {
            p_charge: 100e3,
            q_ch: 0.03,
        };
        let (e, th) = c.targets(&p, 50.0).unwrap();
        assert_eq!(e, p.e_b_max - 5e6);
        assert!((th - (p.theta_b_max - 0.03 * 5e6 / p.c_b)).abs() < 1e-12);
        let (e, _) = c.targets(&p, 1e6).unwrap();
        assert_eq!(e, p.e_b_min);
    }

    #[test]
    fn nominal_boundary_is_valid() {
        let cfg = NominalConfig::default();
        let p = cfg.params();
        let b = cfg.boundary(&p).unwrap();
        b.validate(&p).unwrap();
        assert_eq!(b.s_stint, 11.0 * 4200.0);
    }
}

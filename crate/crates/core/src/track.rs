//! Circuit representation in the space domain.
//!
//! A [`TrackProfile`] holds one lap of curvature and grade samples. Multi-lap
//! horizons tile that lap. The grip-limited kinetic-energy bound is derived
//! from curvature with a point-mass lateral-grip model plus linear downforce,
//! so that grip and aero disturbances reshape it.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::VehicleParams;
use crate::{Error, Result, GRAVITY};

/// |κ| at or above which a sample counts as a corner [1/m].
pub const CORNER_CURVATURE: f64 = 1.0 / 200.0;
/// Optimizer step inside corners [m].
pub const CORNER_STEP: f64 = 5.0;
/// Optimizer step on straights [m].
pub const STRAIGHT_STEP: f64 = 25.0;
/// Distance over which the optimizer step blends from corner to straight [m].
pub const TRANSITION_BAND: f64 = 50.0;
/// Simulation step [m].
pub const SIMULATION_STEP: f64 = 1.0;
/// Coarsest accepted spacing of source track samples [m].
pub const MAX_SAMPLE_SPACING: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub s: f64,
    pub kappa: f64,
    pub grade: f64,
}

/// Speed-limited section of the lap (pit lane).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitZone {
    pub s_start: f64,
    pub s_end: f64,
    pub v_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackProfile {
    pub s_lap: f64,
    pub samples: Vec<TrackSample>,
    #[serde(default)]
    pub pit_zones: Vec<PitZone>,
}

impl TrackProfile {
    pub fn new(samples: Vec<TrackSample>, pit_zones: Vec<PitZone>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidInput(
                "track needs at least two samples".into(),
            ));
        }
        if samples[0].s != 0.0 {
            return Err(Error::InvalidInput(format!(
                "track must start at s = 0, got {}",
                samples[0].s
            )));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].s == w[0].s {
                return Err(Error::InvalidInput(format!(
                    "duplicate s = {} at row {}",
                    w[1].s,
                    i + 1
                )));
            }
            if w[1].s < w[0].s {
                return Err(Error::InvalidInput(format!(
                    "s not increasing at row {}",
                    i + 1
                )));
            }
        }
        if let Some(bad) = samples
            .iter()
            .find(|p| !p.kappa.is_finite() || !p.grade.is_finite())
        {
            return Err(Error::InvalidInput(format!(
                "non-finite sample at s = {}",
                bad.s
            )));
        }
        for z in &pit_zones {
            if !(z.s_end > z.s_start) || z.v_limit <= 0.0 {
                return Err(Error::InvalidInput(format!("bad pit zone {z:?}")));
            }
        }
        let s_lap = samples.last().unwrap().s;
        Ok(Self {
            s_lap,
            samples,
            pit_zones,
        })
    }

    /// Reads a `s,kappa,grade` CSV.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["s", "kappa", "grade"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::InvalidInput(format!(
                "track header must be `s,kappa,grade`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut samples = Vec::new();
        for row in rdr.deserialize() {
            let sample: TrackSample = row?;
            samples.push(sample);
        }
        Self::new(samples, Vec::new())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.samples {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn max_spacing(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| w[1].s - w[0].s)
            .fold(0.0, f64::max)
    }

    /// Position within the lap for a horizon coordinate.
    pub fn lap_position(&self, s: f64) -> f64 {
        let r = s.rem_euclid(self.s_lap);
        // rem_euclid may return s_lap itself for tiny negative inputs
        if r >= self.s_lap {
            0.0
        } else {
            r
        }
    }

    pub fn lap_index(&self, s: f64) -> usize {
        (s / self.s_lap).floor().max(0.0) as usize
    }

    fn interpolate(&self, s: f64, field: impl Fn(&TrackSample) -> f64) -> f64 {
        let x = self.lap_position(s);
        let idx = self.samples.partition_point(|p| p.s <= x);
        if idx == 0 {
            return field(&self.samples[0]);
        }
        if idx >= self.samples.len() {
            return field(self.samples.last().unwrap());
        }
        let (a, b) = (&self.samples[idx - 1], &self.samples[idx]);
        let w = (x - a.s) / (b.s - a.s);
        field(a) + w * (field(b) - field(a))
    }

    pub fn kappa_at(&self, s: f64) -> f64 {
        self.interpolate(s, |p| p.kappa)
    }

    pub fn grade_at(&self, s: f64) -> f64 {
        self.interpolate(s, |p| p.grade)
    }

    /// Lowest pit-lane speed limit covering `s`, if any.
    pub fn pit_limit_at(&self, s: f64) -> Option<f64> {
        let x = self.lap_position(s);
        self.pit_zones
            .iter()
            .filter(|z| x >= z.s_start && x <= z.s_end)
            .map(|z| z.v_limit)
            .reduce(f64::min)
    }

    /// Corner intervals `[start, end]` within one lap where the interpolated
    /// |κ| is at or above [`CORNER_CURVATURE`].
    fn corner_intervals(&self) -> Vec<(f64, f64)> {
        let thr = CORNER_CURVATURE;
        let mut pieces: Vec<(f64, f64)> = Vec::new();
        let last = self.samples.last().unwrap();
        if last.kappa.abs() >= thr {
            pieces.push((last.s, self.s_lap));
        }
        for w in self.samples.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            for sign in [1.0, -1.0] {
                let (ka, kb) = (sign * a.kappa - thr, sign * b.kappa - thr);
                if ka < 0.0 && kb < 0.0 {
                    continue;
                }
                let cross = a.s + (b.s - a.s) * ka / (ka - kb);
                let lo = if ka >= 0.0 { a.s } else { cross };
                let hi = if kb >= 0.0 { b.s } else { cross };
                pieces.push((lo, hi));
            }
        }
        pieces.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (lo, hi) in pieces {
            match out.last_mut() {
                Some(prev) if lo <= prev.1 => prev.1 = prev.1.max(hi),
                _ => out.push((lo, hi)),
            }
        }
        out
    }
}

/// Grip and aero multipliers plus an optional global speed cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripState {
    pub mu_scale: f64,
    pub aero_scale: f64,
    pub v_cap: Option<f64>,
}

impl Default for GripState {
    fn default() -> Self {
        Self {
            mu_scale: 1.0,
            aero_scale: 1.0,
            v_cap: None,
        }
    }
}

impl GripState {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_scale > 0.0 && self.mu_scale <= 1.5) {
            return Err(Error::InvalidInput(format!(
                "mu_scale {} outside (0, 1.5]",
                self.mu_scale
            )));
        }
        if !(self.aero_scale > 0.0 && self.aero_scale <= 1.5) {
            return Err(Error::InvalidInput(format!(
                "aero_scale {} outside (0, 1.5]",
                self.aero_scale
            )));
        }
        if let Some(v) = self.v_cap {
            if !(v > 0.0) {
                return Err(Error::InvalidInput(format!("v_cap {v} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    Optimizer,
    Simulation,
}

/// Cumulative distances over a horizon `[s0, s_stint]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nodes: Vec<f64>,
}

impl Grid {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidInput("grid needs at least two nodes".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput(
                "grid nodes must increase strictly".into(),
            ));
        }
        Ok(Self { nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Places a node at each interior point, moving the nearest node when it
    /// is closer than `SIMULATION_STEP`.
    pub fn with_breakpoints(&self, points: &[f64]) -> Self {
        let mut nodes = self.nodes.clone();
        let (first, last) = (nodes[0], nodes[nodes.len() - 1]);
        for &p in points {
            if !(p > first + SIMULATION_STEP && p < last - SIMULATION_STEP) {
                continue;
            }
            let i = nodes.partition_point(|&x| x < p);
            let nearest = if p - nodes[i - 1] < nodes[i] - p { i - 1 } else { i };
            if (nodes[nearest] - p).abs() < SIMULATION_STEP && nearest > 0 && nearest < nodes.len() - 1 {
                nodes[nearest] = p;
            } else if (nodes[nearest] - p).abs() >= SIMULATION_STEP {
                nodes.insert(i, p);
            }
        }
        Self { nodes }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn step(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    pub fn steps(&self) -> Vec<f64> {
        self.nodes.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn start(&self) -> f64 {
        self.nodes[0]
    }

    pub fn end(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Index of the last node at or before `s` (clamped to the grid).
    pub fn locate(&self, s: f64) -> usize {
        let idx = self.nodes.partition_point(|&x| x <= s);
        idx.saturating_sub(1).min(self.nodes.len() - 2)
    }

    /// Linear interpolation of per-node `values` at `s`.
    pub fn interpolate(&self, values: &[f64], s: f64) -> f64 {
        debug_assert_eq!(values.len(), self.nodes.len());
        let k = self.locate(s);
        let (a, b) = (self.nodes[k], self.nodes[k + 1]);
        let w = ((s - a) / (b - a)).clamp(0.0, 1.0);
        values[k] + w * (values[k + 1] - values[k])
    }

    /// Resamples per-node `values` onto another grid.
    pub fn resample(&self, values: &[f64], target: &Grid) -> Vec<f64> {
        target
            .nodes
            .iter()
            .map(|&s| self.interpolate(values, s))
            .collect()
    }
}

/// Corner intervals in horizon coordinates covering `[lo, hi]`.
fn tiled_corners(track: &TrackProfile, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let lap = track.corner_intervals();
    let mut out = Vec::new();
    if lap.is_empty() {
        return out;
    }
    let first = (lo / track.s_lap).floor() as i64 - 1;
    let last = (hi / track.s_lap).floor() as i64 + 1;
    for n in first..=last {
        let off = n as f64 * track.s_lap;
        for &(a, b) in &lap {
            out.push((a + off, b + off));
        }
    }
    out
}

/// Distance from interval `[a, b]` to the nearest corner interval.
fn distance_to_corners(corners: &[(f64, f64)], a: f64, b: f64) -> f64 {
    corners
        .iter()
        .map(|&(c0, c1)| {
            if c1 < a {
                a - c1
            } else if c0 > b {
                c0 - b
            } else {
                0.0
            }
        })
        .fold(f64::INFINITY, f64::min)
}

fn desired_step(distance: f64) -> f64 {
    let w = (distance / TRANSITION_BAND).clamp(0.0, 1.0);
    CORNER_STEP + w * (STRAIGHT_STEP - CORNER_STEP)
}

/// Largest `h` with `h` no longer than the desired step anywhere on
/// `[x, x + h]`. The admissibility test is monotone in `h`.
fn largest_step(corners: &[(f64, f64)], x: f64) -> f64 {
    let ok = |h: f64| desired_step(distance_to_corners(corners, x, x + h)) >= h;
    if ok(STRAIGHT_STEP) {
        return STRAIGHT_STEP;
    }
    let (mut lo, mut hi) = (CORNER_STEP, STRAIGHT_STEP);
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Builds the optimizer (5–25 m, curvature adaptive) or simulation (1 m) grid
/// over `[s0, s_stint]`.
///
/// The final interval may be shorter than the nominal step so that the grid
/// ends exactly on `s_stint`.
pub fn build_grid(track: &TrackProfile, s0: f64, s_stint: f64, mode: GridMode) -> Result<Grid> {
    if !(s0 >= 0.0) || !(s_stint > s0) {
        return Err(Error::EmptyHorizon { s0, s_stint });
    }
    let spacing = track.max_spacing();
    if spacing > MAX_SAMPLE_SPACING + 1e-9 {
        let step = match mode {
            GridMode::Optimizer => CORNER_STEP,
            GridMode::Simulation => SIMULATION_STEP,
        };
        return Err(Error::CoarseTrack { spacing, step });
    }
    let nodes = match mode {
        GridMode::Simulation => {
            let n = ((s_stint - s0) / SIMULATION_STEP).floor() as usize;
            let mut nodes: Vec<f64> = (0..=n).map(|i| s0 + i as f64 * SIMULATION_STEP).collect();
            if s_stint - nodes[n] > 1e-9 {
                nodes.push(s_stint);
            } else {
                nodes[n] = s_stint;
            }
            if nodes.len() < 2 {
                nodes.push(s_stint);
            }
            nodes
        }
        GridMode::Optimizer => {
            let corners = tiled_corners(track, s0, s_stint);
            let mut nodes = vec![s0];
            let mut x = s0;
            loop {
                let remaining = s_stint - x;
                let h = largest_step(&corners, x);
                if remaining <= h + 1e-9 {
                    nodes.push(s_stint);
                    break;
                }
                x += h;
                nodes.push(x);
            }
            // split a sliver last interval with its predecessor
            let n = nodes.len();
            if n >= 3 && nodes[n - 1] - nodes[n - 2] < SIMULATION_STEP {
                nodes[n - 2] = 0.5 * (nodes[n - 3] + nodes[n - 1]);
            }
            nodes
        }
    };
    Grid::new(nodes)
}

/// Grip-limited speed at curvature `kappa` (`None` when the lateral limit
/// does not bind at any speed).
fn lateral_speed_limit(params: &VehicleParams, grip: &GripState, kappa: f64) -> Option<f64> {
    let mu = params.mu0 * grip.mu_scale;
    let denom = params.m * kappa.abs() - mu * 0.5 * params.rho_cl_a * grip.aero_scale;
    if kappa.abs() > 0.0 && denom > 0.0 {
        Some((mu * params.m * GRAVITY / denom).sqrt())
    } else {
        None
    }
}

/// Upper kinetic-energy bound at every grid node for a constant grip state.
pub fn max_kinetic_energy(
    track: &TrackProfile,
    params: &VehicleParams,
    grip: &GripState,
    grid: &Grid,
) -> Result<Vec<f64>> {
    max_kinetic_energy_with(track, params, grid, |_| *grip)
}

/// Upper kinetic-energy bound with a position-dependent grip state.
pub fn max_kinetic_energy_with(
    track: &TrackProfile,
    params: &VehicleParams,
    grid: &Grid,
    grip_at: impl Fn(f64) -> GripState,
) -> Result<Vec<f64>> {
    grid.nodes
        .iter()
        .enumerate()
        .map(|(node, &s)| {
            let grip = grip_at(s);
            let kappa = track.kappa_at(s);
            let mut v = match lateral_speed_limit(params, &grip, kappa) {
                Some(v) => v.min(params.v_max),
                None if kappa.abs() >= CORNER_CURVATURE => {
                    return Err(Error::DownforceUnboundedCorner { node, s })
                }
                None => params.v_max,
            };
            if let Some(cap) = grip.v_cap {
                v = v.min(cap);
            }
            if let Some(cap) = track.pit_limit_at(s) {
                v = v.min(cap);
            }
            Ok(0.5 * params.m_eq * v * v)
        })
        .collect()
}

/// One corner of the synthetic circuit: clothoid-like entry ramp, constant
/// radius arc, exit ramp.
#[derive(Debug, Clone, Copy)]
struct Corner {
    kappa: f64,
    ramp: f64,
    arc: f64,
}

impl Corner {
    fn length(&self) -> f64 {
        2.0 * self.ramp + self.arc
    }

    fn kappa_at(&self, x: f64) -> f64 {
        if x < self.ramp {
            self.kappa * x / self.ramp
        } else if x < self.ramp + self.arc {
            self.kappa
        } else {
            self.kappa * (self.length() - x).max(0.0) / self.ramp
        }
    }
}

const SYNTH_RAMP: f64 = 25.0;
const SYNTH_MIN_STRAIGHT: f64 = 50.0;
/// Fraction of the first straight that precedes the start line.
const SYNTH_START_OFFSET: f64 = 0.35;

/// Deterministic desk-scale circuit: alternating straights and constant-radius
/// corners whose turning angles sum to one full revolution.
pub fn generate_synthetic_track(seed: u64, n_corners: usize, s_lap: f64) -> Result<TrackProfile> {
    if n_corners == 0 {
        return Err(Error::InvalidInput("n_corners must be at least 1".into()));
    }
    if !(s_lap >= 500.0) {
        return Err(Error::InvalidInput(format!("s_lap {s_lap} below 500 m")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // one right-hander when there are enough corners to compensate
    let reverse = if n_corners >= 4 {
        Some(rng.gen_range(0..n_corners))
    } else {
        None
    };
    let weights: Vec<f64> = (0..n_corners)
        .map(|i| {
            if Some(i) == reverse {
                -rng.gen_range(0.3..0.6)
            } else {
                rng.gen_range(0.6..1.4)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let corners: Vec<Corner> = weights
        .iter()
        .map(|w| {
            let angle = std::f64::consts::TAU * w / total;
            let radius = rng
                .gen_range(35.0..140.0f64)
                .max((SYNTH_RAMP + 5.0) / angle.abs());
            Corner {
                kappa: angle.signum() / radius,
                ramp: SYNTH_RAMP,
                arc: angle.abs() * radius - SYNTH_RAMP,
            }
        })
        .collect();

    let corner_length: f64 = corners.iter().map(Corner::length).sum();
    let straight_total = s_lap - corner_length;
    if straight_total < SYNTH_MIN_STRAIGHT * n_corners as f64 {
        return Err(Error::LapClosure(format!(
            "corners need {corner_length:.1} m of a {s_lap} m lap"
        )));
    }
    let sw: Vec<f64> = (0..n_corners).map(|_| rng.gen_range(0.4..1.6)).collect();
    let sw_total: f64 = sw.iter().sum();
    let spare = straight_total - SYNTH_MIN_STRAIGHT * n_corners as f64;
    let straights: Vec<f64> = sw
        .iter()
        .map(|w| SYNTH_MIN_STRAIGHT + spare * w / sw_total)
        .collect();

    // segment start positions, shifting the start line into straight 0
    let mut segments = Vec::with_capacity(2 * n_corners);
    let mut s = -SYNTH_START_OFFSET * straights[0];
    for (straight, corner) in straights.iter().zip(&corners) {
        s += straight;
        segments.push((s, *corner));
        s += corner.length();
    }
    let kappa_at = |x: f64| -> f64 {
        for &(start, corner) in &segments {
            if x >= start && x < start + corner.length() {
                return corner.kappa_at(x - start);
            }
        }
        0.0
    };

    let n = s_lap.floor() as usize;
    let mut samples: Vec<TrackSample> = (0..=n)
        .map(|i| TrackSample {
            s: i as f64,
            kappa: kappa_at(i as f64),
            grade: 0.0,
        })
        .collect();
    if s_lap - n as f64 > 1e-9 {
        samples.push(TrackSample {
            s: s_lap,
            kappa: kappa_at(s_lap),
            grade: 0.0,
        });
    }
    TrackProfile::new(samples, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight(len: f64) -> TrackProfile {
        let samples = (0..=len as usize)
            .map(|i| TrackSample {
                s: i as f64,
                kappa: 0.0,
                grade: 0.0,
            })
            .collect();
        TrackProfile::new(samples, Vec::new()).unwrap()
    }

    /// 1000 m lap with a hairpin of |κ| = 0.05 on [400, 460].
    fn hairpin() -> TrackProfile {
        let samples = (0..=1000)
            .map(|i| {
                let s = i as f64;
                let kappa = if (400.0..=460.0).contains(&s) {
                    0.05
                } else {
                    0.0
                };
                TrackSample {
                    s,
                    kappa,
                    grade: 0.0,
                }
            })
            .collect();
        TrackProfile::new(samples, Vec::new()).unwrap()
    }

    fn params_1000() -> VehicleParams {
        VehicleParams {
            m: 1000.0,
            m_eq: 1000.0,
            mu0: 1.5,
            rho_cl_a: 0.0,
            ..VehicleParams::default()
        }
    }

    #[test]
    fn straight_track_optimizer_grid_uses_long_steps() {
        let g = build_grid(&straight(500.0), 0.0, 100.0, GridMode::Optimizer).unwrap();
        assert_eq!(g.nodes, vec![0.0, 25.0, 50.0, 75.0, 100.0]);
    }

    #[test]
    fn simulation_grid_is_one_metre() {
        let g = build_grid(&straight(500.0), 0.0, 100.0, GridMode::Simulation).unwrap();
        assert_eq!(g.intervals(), 100);
        assert!(g.steps().iter().all(|&h| (h - 1.0).abs() < 1e-12));
        let g = build_grid(&straight(500.0), 3.0, 10.5, GridMode::Simulation).unwrap();
        assert_eq!(g.start(), 3.0);
        assert_eq!(g.end(), 10.5);
    }

    /// Largest admissible step from `a`: walk a 0.01 m scan of the desired
    /// step (distance measured to densely sampled corner points) until the
    /// walked distance reaches the smallest desired step seen so far.
    fn scan_step(track: &TrackProfile, a: f64, s1: f64) -> f64 {
        let res = 0.01;
        let corners: Vec<f64> = (0..=(track.s_lap / res) as usize)
            .map(|i| i as f64 * res)
            .filter(|&x| track.kappa_at(x).abs() >= CORNER_CURVATURE)
            .collect();
        let dist = |x: f64| {
            corners
                .iter()
                .flat_map(|&c| [c - track.s_lap, c, c + track.s_lap])
                .map(|c| (x - c).abs())
                .fold(f64::INFINITY, f64::min)
        };
        let want = |x: f64| 5.0 + 20.0 * (dist(x) / 50.0).clamp(0.0, 1.0);
        let mut min_want = want(a);
        let mut x = a;
        while x - a < min_want && x < s1 {
            x += res;
            min_want = min_want.min(want(x));
        }
        min_want.min(s1 - a)
    }

    #[test]
    fn hairpin_grid_refines_near_corner() {
        let t = hairpin();
        let g = build_grid(&t, 0.0, 1000.0, GridMode::Optimizer).unwrap();
        for k in 0..g.intervals() {
            let (a, b) = (g.nodes[k], g.nodes[k + 1]);
            if (400.0..=460.0).contains(&a) || (400.0..=460.0).contains(&b) {
                assert!(b - a <= 5.0 + 1e-9, "step {} at {}", b - a, a);
            }
            if b < 300.0 || a > 560.0 {
                assert!((b - a - 25.0).abs() < 1e-9 || k == g.intervals() - 1);
            }
        }
        // every step except the (possibly truncated) last two is admissible
        // and maximal
        for k in 0..g.intervals() - 2 {
            let a = g.nodes[k];
            let h = g.nodes[k + 1] - a;
            let largest = scan_step(&t, a, 1000.0);
            assert!(h <= largest + 0.02, "at {a}: {h} exceeds {largest}");
            assert!(h >= largest - 0.02, "at {a}: {h} shorter than {largest}");
        }
    }

    #[test]
    fn grid_errors() {
        let t = straight(500.0);
        assert!(matches!(
            build_grid(&t, 10.0, 10.0, GridMode::Optimizer),
            Err(Error::EmptyHorizon { .. })
        ));
        let coarse = TrackProfile::new(
            vec![
                TrackSample {
                    s: 0.0,
                    kappa: 0.0,
                    grade: 0.0,
                },
                TrackSample {
                    s: 10.0,
                    kappa: 0.0,
                    grade: 0.0,
                },
            ],
            vec![],
        )
        .unwrap();
        assert!(matches!(
            build_grid(&coarse, 0.0, 5.0, GridMode::Simulation),
            Err(Error::CoarseTrack { .. })
        ));
    }

    #[test]
    fn lateral_limit_closed_form() {
        let samples = (0..=10)
            .map(|i| TrackSample {
                s: i as f64,
                kappa: 0.05,
                grade: 0.0,
            })
            .collect();
        let t = TrackProfile::new(samples, vec![]).unwrap();
        let g = Grid::new(vec![0.0, 5.0, 10.0]).unwrap();
        let e = max_kinetic_energy(&t, &params_1000(), &GripState::default(), &g).unwrap();
        for x in e {
            assert_relative_eq!(x, 147_150.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn straight_bound_is_configured_cap() {
        let p = params_1000();
        let g = Grid::new(vec![0.0, 50.0, 100.0]).unwrap();
        let e = max_kinetic_energy(&straight(200.0), &p, &GripState::default(), &g).unwrap();
        for x in e {
            assert_relative_eq!(x, 0.5 * p.m_eq * p.v_max * p.v_max);
        }
    }

    #[test]
    fn speed_cap_80_kmh() {
        let p = params_1000();
        let g = Grid::new(vec![0.0, 50.0, 100.0]).unwrap();
        let grip = GripState {
            v_cap: Some(80.0 / 3.6),
            ..GripState::default()
        };
        let e = max_kinetic_energy(&straight(200.0), &p, &grip, &g).unwrap();
        for x in e {
            assert_relative_eq!(x, 2.469e5, max_relative = 1e-3);
        }
    }

    #[test]
    fn downforce_unbounded_corner_is_reported() {
        let samples = (0..=10)
            .map(|i| TrackSample {
                s: i as f64,
                kappa: 0.006,
                grade: 0.0,
            })
            .collect();
        let t = TrackProfile::new(samples, vec![]).unwrap();
        let p = VehicleParams {
            m: 100.0,
            rho_cl_a: 5.0,
            ..VehicleParams::default()
        };
        let g = Grid::new(vec![0.0, 5.0, 10.0]).unwrap();
        let err = max_kinetic_energy(&t, &p, &GripState::default(), &g).unwrap_err();
        assert!(matches!(
            err,
            Error::DownforceUnboundedCorner { node: 0, .. }
        ));
    }

    #[test]
    fn pit_zone_limits_speed() {
        let mut t = straight(200.0);
        t.pit_zones.push(PitZone {
            s_start: 50.0,
            s_end: 150.0,
            v_limit: 16.0,
        });
        let g = Grid::new(vec![0.0, 100.0, 200.0]).unwrap();
        let p = params_1000();
        let e = max_kinetic_energy(&t, &p, &GripState::default(), &g).unwrap();
        assert_relative_eq!(e[1], 0.5 * 1000.0 * 256.0);
        assert!(e[0] > e[1]);
    }

    #[test]
    fn synthetic_track_is_deterministic() {
        let a = generate_synthetic_track(1, 4, 4000.0).unwrap();
        let b = generate_synthetic_track(1, 4, 4000.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_track(2, 4, 4000.0).unwrap());
    }

    #[test]
    fn single_corner_has_one_bump() {
        let t = generate_synthetic_track(3, 1, 2000.0).unwrap();
        let rising = t
            .samples
            .windows(2)
            .filter(|w| w[0].kappa.abs() < 1e-12 && w[1].kappa.abs() > 1e-12)
            .count();
        assert_eq!(rising, 1);
    }

    #[test]
    fn synthetic_track_closes_heading() {
        for seed in 0..5 {
            let t = generate_synthetic_track(seed, 7, 4200.0).unwrap();
            let integral: f64 = t
                .samples
                .windows(2)
                .map(|w| 0.5 * (w[0].kappa + w[1].kappa) * (w[1].s - w[0].s))
                .sum();
            assert!(
                (integral - std::f64::consts::TAU).abs() < 1e-2,
                "seed {seed}: {integral}"
            );
        }
    }

    #[test]
    fn synthetic_track_rejects_short_laps() {
        assert!(matches!(
            generate_synthetic_track(0, 30, 600.0),
            Err(Error::LapClosure(_))
        ));
        assert!(generate_synthetic_track(0, 0, 1000.0).is_err());
        assert!(generate_synthetic_track(0, 2, 100.0).is_err());
    }

    #[test]
    fn csv_round_trip_and_duplicates() {
        let t = generate_synthetic_track(5, 3, 1200.0).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"s,kappa,grade\n"));
        let back = TrackProfile::from_csv(buf.as_slice()).unwrap();
        assert_eq!(back.samples.len(), t.samples.len());
        let dup = "s,kappa,grade\n0,0,0\n1,0,0\n1,0.01,0\n";
        assert!(TrackProfile::from_csv(dup.as_bytes()).is_err());
        let bad_header = "s,k,grade\n0,0,0\n1,0,0\n";
        assert!(TrackProfile::from_csv(bad_header.as_bytes()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bound_monotone_in_grip_and_curvature(
                k1 in 0.0f64..0.05, k2 in 0.0f64..0.05, mu1 in 0.3f64..1.5, mu2 in 0.3f64..1.5,
            ) {
                let p = VehicleParams::default();
                let g = Grid::new(vec![0.0, 1.0]).unwrap();
                let track_with = |k: f64| TrackProfile::new(
                    vec![TrackSample { s: 0.0, kappa: k, grade: 0.0 }, TrackSample { s: 1.0, kappa: k, grade: 0.0 }],
                    vec![],
                ).unwrap();
                // keep away from the downforce-unbounded regime
                let p = VehicleParams { rho_cl_a: 0.0, ..p };
                let (klo, khi) = if k1 < k2 { (k1, k2) } else { (k2, k1) };
                let (mlo, mhi) = if mu1 < mu2 { (mu1, mu2) } else { (mu2, mu1) };
                let grip = |mu: f64| GripState { mu_scale: mu, ..GripState::default() };
                let e = |k: f64, mu: f64| max_kinetic_energy(&track_with(k), &p, &grip(mu), &g).unwrap()[0];
                prop_assert!(e(klo, mlo) >= e(khi, mlo));
                prop_assert!(e(khi, mhi) >= e(khi, mlo));
            }

            #[test]
            fn reduced_aero_never_raises_bound(k in 0.006f64..0.05) {
                let p = VehicleParams::default();
                let t = TrackProfile::new(
                    vec![TrackSample { s: 0.0, kappa: k, grade: 0.0 }, TrackSample { s: 1.0, kappa: k, grade: 0.0 }],
                    vec![],
                ).unwrap();
                let g = Grid::new(vec![0.0, 1.0]).unwrap();
                let nominal = max_kinetic_energy(&t, &p, &GripState::default(), &g).unwrap()[0];
                let draft = GripState { aero_scale: 0.9, ..GripState::default() };
                let drafted = max_kinetic_energy(&t, &p, &draft, &g).unwrap()[0];
                prop_assert!(drafted <= nominal);
            }
        }
    }
}

//! Whole-robot experiments: payload sag, self-support threshold and rolling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{snapshot, ExperimentError, ExperimentResult, REFERENCE_BAR_LENGTH};
use crate::control::{CableMode, Face, GaitRunner, GaitScript};
use crate::dynamics::{bar_angles, centroid, ground_face, robot_height, Simulation};
use crate::model::{RobotConfig, Vec3, WorldState};

/// Length-mode setpoints holding the prism in its nominal shape with a
/// self-stress proportional to the cable stiffness.
///
/// At `design_stiffness` the triangle cables carry `force_density · l` and
/// the saddle cables `√3 · force_density · l` in the nominal pose, which is
/// the self-stress of a 150° twisted 3-prism. Other stiffnesses scale the
/// excess over `feed_forward` proportionally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeHold {
    pub design_stiffness: f64,
    /// N/m
    pub force_density: f64,
    pub kd: f64,
    pub feed_forward: f64,
}

impl Default for ShapeHold {
    fn default() -> Self {
        Self {
            design_stiffness: 200.0,
            force_density: 40.0,
            kd: 50.0,
            feed_forward: 5.0,
        }
    }
}

impl ShapeHold {
    /// Setpoint of each cable, from its homed (nominal) length.
    pub fn setpoints(&self, config: &RobotConfig) -> Vec<f64> {
        let nominal = WorldState::nominal(config);
        config
            .cables
            .iter()
            .enumerate()
            .map(|(c, link)| {
                let l = nominal.actuators[c].home_length;
                let anchor = |r: crate::model::AnchorRef| {
                    nominal.rods[r.rod].point(&config.rods[r.rod].anchor_offsets[r.anchor])
                };
                let span = anchor(link.to) - anchor(link.from);
                // saddle cables run mostly vertically
                let q = if span.z.abs() > 0.1 * span.norm() {
                    3f64.sqrt() * self.force_density
                } else {
                    self.force_density
                };
                let excess = (q * l - self.feed_forward).max(0.0);
                l - excess / self.design_stiffness
            })
            .collect()
    }

    pub fn modes(&self, config: &RobotConfig, stiffness: f64) -> Vec<CableMode<f64>> {
        self.setpoints(config)
            .into_iter()
            .map(|setpoint| CableMode::Length {
                setpoint,
                kp: stiffness,
                kd: self.kd,
                feed_forward: self.feed_forward,
            })
            .collect()
    }
}

/// Criteria for a quasi-static settle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettleCriteria {
    /// Longest simulated time to wait, s.
    pub max_time: f64,
    /// Largest window-averaged rod speed still considered at rest, m/s.
    pub speed: f64,
    /// Per-rod net force bound, N.
    pub residual: f64,
    /// Window over which the net force is averaged, s.
    pub window: f64,
}

impl Default for SettleCriteria {
    fn default() -> Self {
        Self {
            max_time: 30.0,
            speed: 2e-3,
            residual: 0.5,
            window: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettleReport {
    pub settled: bool,
    pub time: f64,
    pub height: f64,
    pub min_bar_angle: f64,
    /// Per-rod net force averaged over the final window, N (largest rod).
    pub residual: f64,
    pub max_speed: f64,
}

/// Steps until the robot is at rest or `max_time` elapses.
///
/// Motion is judged over consecutive windows of `window` seconds: the rod
/// speed is the net displacement of centre and bar tips across the window
/// divided by its length, and the residual is the net force averaged over it
/// (momentum change divided by window length). Two passing windows in a row
/// count as settled.
pub fn settle(sim: &mut Simulation, criteria: &SettleCriteria) -> Result<SettleReport, ExperimentError> {
    let window_steps = ((criteria.window / sim.dt).round() as usize).max(1);
    let start = sim.time();
    let snapshot = |sim: &Simulation| -> Vec<(Vec3, Vec3, Vec3)> {
        sim.state
            .rods
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let half = sim.config.rods[i].length / 2.0;
                (r.position, r.axis() * half, r.linear_velocity * sim.config.rod_mass(i))
            })
            .collect()
    };
    let mut passes = 0;
    loop {
        let before = snapshot(sim);
        for _ in 0..window_steps {
            sim.step()?;
        }
        let after = snapshot(sim);
        let span = window_steps as f64 * sim.dt;
        let mut speed = 0.0f64;
        let mut residual = 0.0f64;
        for (a, b) in before.iter().zip(&after) {
            speed = speed.max(((b.0 - a.0).norm() + (b.1 - a.1).norm()) / span);
            residual = residual.max((b.2 - a.2).norm() / span);
        }
        let elapsed = sim.time() - start;
        if speed < criteria.speed && residual < criteria.residual {
            passes += 1;
        } else {
            passes = 0;
        }
        let settled = passes >= 2;
        if settled || elapsed >= criteria.max_time {
            return Ok(SettleReport {
                settled,
                time: elapsed,
                height: sim.height(),
                min_bar_angle: bar_angles(&sim.state).into_iter().fold(f64::INFINITY, f64::min),
                residual,
                max_speed: speed,
            });
        }
    }
}

/// Standing robot with every cable holding the nominal shape at `stiffness`.
pub fn standing_robot(
    config: &RobotConfig,
    hold: &ShapeHold,
    stiffness: f64,
    seed: u64,
) -> Result<Simulation, ExperimentError> {
    let mut sim = Simulation::nominal(config.clone(), 1e-3, seed)?;
    sim.set_modes(&hold.modes(config, stiffness))?;
    Ok(sim)
}

/// Height of the nominal pose.
pub fn nominal_height(config: &RobotConfig) -> f64 {
    robot_height(config, &WorldState::nominal(config))
}

const DEFAULT_GAIT: &str = include_str!("../../data/default_gait.toml");

/// Cyclic rolling gait for the default robot: a tip from the standing face
/// onto a side face, then alternating easy and hard rolls between side
/// faces, each pair relabelled by a third of a turn of the prism.
pub fn default_gait() -> GaitScript {
    GaitScript::from_toml_str(DEFAULT_GAIT).expect("bundled gait parses")
}

/// Rolling run driven by a gait script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocomotionExperiment {
    pub script: GaitScript,
    pub duration: f64,
    /// Total payload split over the bar midpoints, kg.
    pub payload: f64,
    /// Outer-loop rate at which the gait is evaluated, Hz.
    pub gait_rate: f64,
    /// Height above rest within which an endcap counts as touching, m.
    pub face_tolerance: f64,
    /// Gait ticks a face must persist before it counts as reached.
    pub face_debounce: usize,
}

impl LocomotionExperiment {
    pub fn new(script: GaitScript, duration: f64, payload: f64) -> Self {
        Self {
            script,
            duration,
            payload,
            gait_rate: 20.0,
            face_tolerance: 0.02,
            face_debounce: 5,
        }
    }
}

pub const LOCOMOTION_COLUMNS: [&str; 7] = [
    "time_s",
    "centroid_x_m",
    "centroid_y_m",
    "height_m",
    "face",
    "phase",
    "face_transitions",
];

fn face_code(face: Option<Face>) -> f64 {
    face.map_or(-1.0, |f| (f[0] * 100 + f[1] * 10 + f[2]) as f64)
}

/// Counts changes between successive ground faces. A face must be seen on
/// `debounce` consecutive observations before it counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceCounter {
    pub debounce: usize,
    pub current: Option<Face>,
    pub transitions: usize,
    candidate: Option<Face>,
    seen: usize,
}

impl FaceCounter {
    pub fn new(debounce: usize) -> Self {
        Self {
            debounce: debounce.max(1),
            current: None,
            transitions: 0,
            candidate: None,
            seen: 0,
        }
    }

    pub fn observe(&mut self, face: Option<Face>) {
        if face.is_some() && face == self.candidate {
            self.seen += 1;
        } else {
            self.candidate = face;
            self.seen = usize::from(face.is_some());
        }
        if let Some(f) = self.candidate {
            if self.seen >= self.debounce && self.current != Some(f) {
                if self.current.is_some() {
                    self.transitions += 1;
                }
                self.current = Some(f);
            }
        }
    }
}

/// Runs `script` on the standing robot from its nominal pose.
pub fn run_locomotion(
    config: &RobotConfig,
    params: &LocomotionExperiment,
    seed: u64,
) -> Result<ExperimentResult, ExperimentError> {
    run_locomotion_observed(config, params, seed, |_| {})
}

/// As [`run_locomotion`], calling `observe` on the initial state and after
/// every physics step.
pub fn run_locomotion_observed(
    config: &RobotConfig,
    params: &LocomotionExperiment,
    seed: u64,
    mut observe: impl FnMut(&Simulation),
) -> Result<ExperimentResult, ExperimentError> {
    let cfg = config.clone().with_payload(params.payload);
    params.script.validate(cfg.cables.len())?;
    let mut sim = Simulation::nominal(cfg, 1e-3, seed)?;
    let mut result = ExperimentResult::new("locomotion", seed, snapshot(&(params, config)), &LOCOMOTION_COLUMNS);
    let ticks_per_gait = ((1.0 / params.gait_rate) / sim.dt).round().max(1.0) as usize;
    let steps = (params.duration / sim.dt).round() as usize;
    let mut runner = GaitRunner::new();
    let mut faces = FaceCounter::new(params.face_debounce);
    observe(&sim);
    for step in 0..=steps {
        if step % ticks_per_gait == 0 {
            let face = ground_face(&sim.config, &sim.state, params.face_tolerance);
            faces.observe(face);
            let (modes, phase) = runner.tick(&params.script, faces.current, sim.time());
            if modes != sim.modes() {
                sim.set_modes(&modes)?;
            }
            let c = centroid(&sim.config, &sim.state);
            result.rows.push(vec![
                sim.time(),
                c.x,
                c.y,
                sim.height(),
                face_code(face),
                phase as f64,
                faces.transitions as f64,
            ]);
        }
        if step < steps {
            sim.step()?;
            observe(&sim);
        }
    }
    result.summary = locomotion_summary(&result);
    Ok(result)
}

pub(super) fn locomotion_summary(r: &ExperimentResult) -> BTreeMap<String, f64> {
    let mut s = BTreeMap::new();
    let (Some(first), Some(last)) = (r.rows.first(), r.rows.last()) else {
        return s;
    };
    let displacement = ((last[1] - first[1]).powi(2) + (last[2] - first[2]).powi(2)).sqrt();
    let duration = last[0] - first[0];
    let bar = r.config[1]["rods"][0]["length"]
        .as_f64()
        .unwrap_or(REFERENCE_BAR_LENGTH);
    s.insert("displacement_m".into(), displacement);
    s.insert("duration_s".into(), duration);
    s.insert("face_transitions".into(), last[6]);
    s.insert(
        "body_lengths_per_second".into(),
        if duration > 0.0 {
            displacement / bar / duration
        } else {
            0.0
        },
    );
    s
}

/// One step of the payload sequence: the robot is re-tuned to `stiffness`
/// while carrying `payload` kg, then left to settle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayloadStage {
    pub stiffness: f64,
    pub payload: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadExperiment {
    pub stages: Vec<PayloadStage>,
    pub hold: ShapeHold,
    pub settle: SettleCriteria,
}

impl Default for PayloadExperiment {
    fn default() -> Self {
        let stage = |stiffness, payload| PayloadStage { stiffness, payload };
        Self {
            stages: vec![
                stage(200.0, 0.0),
                stage(200.0, 9.0),
                stage(450.0, 9.0),
                stage(100.0, 9.0),
            ],
            hold: ShapeHold::default(),
            settle: SettleCriteria::default(),
        }
    }
}

pub const PAYLOAD_COLUMNS: [&str; 8] = [
    "stage",
    "stiffness_n_per_m",
    "payload_kg",
    "height_m",
    "min_bar_angle_deg",
    "residual_n",
    "settled",
    "settle_time_s",
];

/// Runs the stages in order on one continuing simulation, so each stage
/// starts from where the previous one came to rest.
pub fn run_payload_stiffness(
    config: &RobotConfig,
    params: &PayloadExperiment,
    seed: u64,
) -> Result<ExperimentResult, ExperimentError> {
    if params.stages.is_empty() {
        return Err(ExperimentError::Invalid("payload sequence has no stages".into()));
    }
    let mut result = ExperimentResult::new("payload", seed, snapshot(&(params, config)), &PAYLOAD_COLUMNS);
    let mut sim = Simulation::nominal(config.clone(), 1e-3, seed)?;
    for (k, stage) in params.stages.iter().enumerate() {
        if !(stage.stiffness > 0.0 && stage.payload >= 0.0) {
            return Err(ExperimentError::Invalid(format!("stage {k}: {stage:?}")));
        }
        sim.config = config.clone().with_payload(stage.payload);
        sim.set_modes(&params.hold.modes(&sim.config, stage.stiffness))?;
        let r = settle(&mut sim, &params.settle)?;
        result.rows.push(vec![
            k as f64,
            stage.stiffness,
            stage.payload,
            r.height,
            r.min_bar_angle.to_degrees(),
            r.residual,
            f64::from(u8::from(r.settled)),
            r.time,
        ]);
    }
    result.summary = payload_summary(&result);
    Ok(result)
}

pub(super) fn payload_summary(r: &ExperimentResult) -> BTreeMap<String, f64> {
    let mut s = BTreeMap::new();
    for row in &r.rows {
        s.insert(format!("height_m_stage{}", row[0]), row[3]);
    }
    s.insert(
        "all_settled".into(),
        f64::from(u8::from(r.rows.iter().all(|row| row[6] == 1.0))),
    );
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinStiffnessExperiment {
    /// Initial bracket, N/m. The low end must fail and the high end hold.
    pub low: f64,
    pub high: f64,
    /// Stop when `high / low` is within `1 + tolerance`.
    pub tolerance: f64,
    /// Smallest bar-to-ground angle of a self-supporting robot, degrees.
    pub min_bar_angle: f64,
    /// Fraction of the nominal height a self-supporting robot keeps.
    pub height_fraction: f64,
    /// The check is repeated at this multiple of the threshold.
    pub verify_factor: f64,
    pub hold: ShapeHold,
    pub settle: SettleCriteria,
}

impl Default for MinStiffnessExperiment {
    fn default() -> Self {
        Self {
            low: 5.0,
            high: 400.0,
            tolerance: 0.01,
            min_bar_angle: 8.0,
            height_fraction: 0.9,
            verify_factor: 7.0,
            hold: ShapeHold::default(),
            settle: SettleCriteria::default(),
        }
    }
}

pub const MIN_STIFFNESS_COLUMNS: [&str; 8] = [
    "role",
    "stiffness_n_per_m",
    "settled",
    "height_m",
    "min_bar_angle_deg",
    "residual_n",
    "supported",
    "max_tension_n",
];

/// Row roles in a min-stiffness result.
pub const ROLE_SEARCH: f64 = 0.0;
pub const ROLE_VERIFY: f64 = 1.0;
pub const ROLE_RERUN: f64 = 2.0;

fn support_trial(
    config: &RobotConfig,
    params: &MinStiffnessExperiment,
    k: f64,
    seed: u64,
) -> Result<Vec<f64>, ExperimentError> {
    let mut sim = standing_robot(config, &params.hold, k, seed)?;
    let r = settle(&mut sim, &params.settle)?;
    let angle = r.min_bar_angle.to_degrees();
    let supported =
        r.settled && angle >= params.min_bar_angle && r.height >= params.height_fraction * nominal_height(config);
    let tmax = sim.records.iter().map(|c| c.tension).fold(0.0, f64::max);
    Ok(vec![
        ROLE_SEARCH,
        k,
        f64::from(u8::from(r.settled)),
        r.height,
        angle,
        r.residual,
        f64::from(u8::from(supported)),
        tmax,
    ])
}

/// Geometric bisection for the least uniform stiffness at which the robot
/// stands on its own. Every trial is appended to `rows`.
fn bisect_support(
    config: &RobotConfig,
    params: &MinStiffnessExperiment,
    low: f64,
    high: f64,
    seed: u64,
    role: f64,
    rows: &mut Vec<Vec<f64>>,
) -> Result<f64, ExperimentError> {
    let mut trial = |k: f64| -> Result<bool, ExperimentError> {
        let mut row = support_trial(config, params, k, seed)?;
        row[0] = role;
        let ok = row[6] == 1.0;
        rows.push(row);
        Ok(ok)
    };
    if !(low > 0.0 && high > low) || trial(low)? || !trial(high)? {
        return Err(ExperimentError::Bracket { low, high });
    }
    let (mut lo, mut hi) = (low, high);
    while hi / lo > 1.0 + params.tolerance {
        let mid = (lo * hi).sqrt();
        if trial(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Finds the self-support threshold, checks that the robot settles at
/// `verify_factor` times it, and repeats the search from a bracket of
/// `[k/2, 2k]` to confirm the result does not depend on the start.
pub fn find_min_self_support_stiffness(
    config: &RobotConfig,
    params: &MinStiffnessExperiment,
    seed: u64,
) -> Result<ExperimentResult, ExperimentError> {
    let mut result = ExperimentResult::new(
        "min-stiffness",
        seed,
        snapshot(&(params, config)),
        &MIN_STIFFNESS_COLUMNS,
    );
    let k_min = bisect_support(
        config,
        params,
        params.low,
        params.high,
        seed,
        ROLE_SEARCH,
        &mut result.rows,
    )?;
    let mut verify = support_trial(config, params, params.verify_factor * k_min, seed)?;
    verify[0] = ROLE_VERIFY;
    result.rows.push(verify);
    bisect_support(
        config,
        params,
        k_min / 2.0,
        k_min * 2.0,
        seed,
        ROLE_RERUN,
        &mut result.rows,
    )?;
    result.summary = min_stiffness_summary(&result);
    Ok(result)
}

pub(super) fn min_stiffness_summary(r: &ExperimentResult) -> BTreeMap<String, f64> {
    let mut s = BTreeMap::new();
    let least_supported = |role: f64| {
        r.rows
            .iter()
            .filter(|row| row[0] == role && row[6] == 1.0)
            .map(|row| row[1])
            .fold(f64::INFINITY, f64::min)
    };
    let k_min = least_supported(ROLE_SEARCH);
    let rerun = least_supported(ROLE_RERUN);
    s.insert("k_min_n_per_m".into(), k_min);
    s.insert("rerun_k_min_n_per_m".into(), rerun);
    s.insert("rerun_relative_change".into(), (rerun - k_min).abs() / k_min);
    if let Some(v) = r.rows.iter().find(|row| row[0] == ROLE_VERIFY) {
        s.insert("verify_stiffness_n_per_m".into(), v[1]);
        s.insert("verify_settled".into(), v[2]);
        s.insert("verify_residual_n".into(), v[5]);
        s.insert("verify_height_m".into(), v[3]);
    }
    s
}

//! Fixed-step rigid-body simulation of rods, unilateral elastic cables,
//! gravity and penalty ground contact.
//!
//! Integration is semi-implicit Euler. Rotation is advanced through the world
//! angular momentum so that a torque-free body conserves it to round-off.

use nalgebra::{Matrix3, UnitQuaternion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::ActuatorError;
use crate::cable::CableElasticity;
use crate::control::{CableController, CableMode, ControlError, Face};
use crate::model::{CableSpec, ModelError, RobotConfig, Vec3, WorldState};

pub use crate::model::ContactModel;

/// Largest accepted integration step.
pub const MAX_DT: f64 = 2e-3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("time step {0} s outside (0, {MAX_DT}]")]
    BadTimeStep(f64),
    #[error("simulation diverged at t = {time:.4} s: {detail}")]
    Diverged { time: f64, detail: String },
    #[error("expected {expected} per-cable inputs, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// State of one cable after a force evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CableForceRecord {
    pub cable: usize,
    pub tension: f64,
    pub taut: bool,
    /// Anchor-to-anchor distance.
    pub stretched_length: f64,
    /// Cable length off the spool.
    pub unstretched_length: f64,
}

/// Elastic tension of a cable of `paid_out` unstretched length spanning the
/// anchors `a`–`b`. Zero when slack.
pub fn cable_tension(cable: usize, a: Vec3, b: Vec3, paid_out: f64, spec: &CableSpec) -> CableForceRecord {
    let d = (b - a).norm();
    let p = paid_out.max(0.0);
    let (tension, taut) = if d > p && p > 0.0 {
        let el = CableElasticity::<f64>::from_spec(spec);
        (el.force_at_strain(d / p - 1.0), true)
    } else if d > p {
        // an empty spool cannot be stretched to a finite force; treat as
        // maximally stiff
        (f64::INFINITY, true)
    } else {
        (0.0, false)
    };
    CableForceRecord {
        cable,
        tension,
        taut,
        stretched_length: d,
        unstretched_length: p,
    }
}

/// Viscous coefficient of a taut cable: `ratio` of critical damping for the
/// tangent stiffness acting on `mass`.
pub fn cable_damping_coefficient(spec: &CableSpec, paid_out: f64, strain: f64, ratio: f64, mass: f64) -> f64 {
    if ratio <= 0.0 || paid_out <= 0.0 {
        return 0.0;
    }
    let el = CableElasticity::<f64>::from_spec(spec);
    let k = el.tangent_modulus(strain) / paid_out;
    2.0 * ratio * (k * mass).sqrt()
}

/// Fixed point attached to a rod by a stiff spring-damper (test rigs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pin {
    pub rod: usize,
    pub offset: Vec3,
    pub world_point: Vec3,
    pub stiffness: f64,
    pub damping: f64,
}

/// Constant world-frame force applied at a rod point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalLoad {
    pub rod: usize,
    pub offset: Vec3,
    pub force: Vec3,
}

/// Test-rig additions to a robot: pins, external loads, ground on/off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixtures {
    pub ground: bool,
    pub pins: Vec<Pin>,
    pub loads: Vec<ExternalLoad>,
}

impl Default for Fixtures {
    fn default() -> Self {
        Self {
            ground: true,
            pins: Vec::new(),
            loads: Vec::new(),
        }
    }
}

/// Net force and torque (about the centre of mass) on one rod.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RodWrench {
    pub force: Vec3,
    pub torque: Vec3,
}

impl RodWrench {
    fn apply(&mut self, centre: &Vec3, point: &Vec3, force: Vec3) {
        self.force += force;
        self.torque += (point - centre).cross(&force);
    }
}

/// Forces acting at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceEvaluation {
    pub wrenches: Vec<RodWrench>,
    pub cables: Vec<CableForceRecord>,
    /// Normal contact force at each endcap (`2 · rod + end`).
    pub contact_normal: Vec<f64>,
}

fn paid_out(config: &RobotConfig, state: &WorldState, cable: usize) -> (f64, f64) {
    let link = &config.cables[cable];
    let act = &state.actuators[cable];
    match &link.actuator {
        Some(spec) => (act.paid_out(spec), act.paid_out_rate(spec)),
        None => (link.rest_length, 0.0),
    }
}

fn world_inertia(config: &RobotConfig, rod: usize, q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let r = q.to_rotation_matrix();
    let body = Matrix3::from_diagonal(&config.rods[rod].principal_inertia());
    r.matrix() * body * r.matrix().transpose()
}

/// Effective mass of a rod at `point` along unit direction `dir`.
fn effective_mass(config: &RobotConfig, state: &WorldState, rod: usize, point: &Vec3, dir: &Vec3) -> f64 {
    let rs = &state.rods[rod];
    let inv_i = world_inertia(config, rod, &rs.orientation)
        .try_inverse()
        .unwrap_or_else(Matrix3::zeros);
    let r = point - rs.position;
    let rxd = r.cross(dir);
    let inv = 1.0 / config.rod_mass(rod) + rxd.dot(&(inv_i * rxd));
    1.0 / inv
}

/// Evaluates every force on the rods for the given state. `dt` bounds the
/// friction impulse so that it cannot reverse the slip velocity in one step.
pub fn evaluate_forces(config: &RobotConfig, fixtures: &Fixtures, state: &WorldState, dt: f64) -> ForceEvaluation {
    let n = config.rods.len();
    let mut wrenches = vec![RodWrench::default(); n];
    let mut cables = Vec::with_capacity(config.cables.len());
    let mut contact_normal = vec![0.0; 2 * n];

    for (i, w) in wrenches.iter_mut().enumerate() {
        w.force.z -= config.rod_mass(i) * config.gravity;
    }

    let ref_mass = (0..n).map(|i| config.rod_mass(i)).fold(f64::INFINITY, f64::min) / 4.0;
    for (c, link) in config.cables.iter().enumerate() {
        let ra = &state.rods[link.from.rod];
        let rb = &state.rods[link.to.rod];
        let a = ra.point(&config.rods[link.from.rod].anchor_offsets[link.from.anchor]);
        let b = rb.point(&config.rods[link.to.rod].anchor_offsets[link.to.anchor]);
        let (p, p_rate) = paid_out(config, state, c);
        let mut rec = cable_tension(c, a, b, p, &link.spec);
        if rec.taut {
            let u = (b - a) / rec.stretched_length;
            let d_rate = (rb.point_velocity(&b) - ra.point_velocity(&a)).dot(&u);
            let strain = rec.stretched_length / p - 1.0;
            let c_damp = cable_damping_coefficient(&link.spec, p, strain, config.cable_damping_ratio, ref_mass);
            rec.tension = (rec.tension + c_damp * (d_rate - p_rate)).max(0.0);
            let f = u * rec.tension;
            wrenches[link.from.rod].apply(&ra.position, &a, f);
            wrenches[link.to.rod].apply(&rb.position, &b, -f);
        }
        cables.push(rec);
    }

    if fixtures.ground {
        let g = &config.ground;
        for (i, rs) in state.rods.iter().enumerate() {
            let spec = &config.rods[i];
            for (e, off) in spec.endcap_offsets().iter().enumerate() {
                let centre = rs.point(off);
                let depth = spec.cap_radius - centre.z;
                if depth <= 0.0 {
                    continue;
                }
                let contact = Vec3::new(centre.x, centre.y, 0.0);
                let v = rs.point_velocity(&contact);
                let normal = (g.normal_stiffness * depth - g.normal_damping * v.z).max(0.0);
                contact_normal[2 * i + e] = normal;
                let mut force = Vec3::new(0.0, 0.0, normal);
                let vt = Vec3::new(v.x, v.y, 0.0);
                let speed = vt.norm();
                if speed > 0.0 && normal > 0.0 && g.friction_coefficient > 0.0 {
                    let dir = vt / speed;
                    let reg = g.slip_regularization_velocity;
                    let coulomb = g.friction_coefficient * normal * speed / (speed * speed + reg * reg).sqrt();
                    let stop = effective_mass(config, state, i, &contact, &dir) * speed / dt;
                    force -= dir * coulomb.min(stop);
                }
                wrenches[i].apply(&rs.position, &contact, force);
            }
        }
    }

    for pin in &fixtures.pins {
        let rs = &state.rods[pin.rod];
        let p = rs.point(&pin.offset);
        let v = rs.point_velocity(&p);
        let f = (pin.world_point - p) * pin.stiffness - v * pin.damping;
        wrenches[pin.rod].apply(&rs.position, &p, f);
    }
    for load in &fixtures.loads {
        let rs = &state.rods[load.rod];
        let p = rs.point(&load.offset);
        wrenches[load.rod].apply(&rs.position, &p, load.force);
    }

    ForceEvaluation {
        wrenches,
        cables,
        contact_normal,
    }
}

/// Largest `ω·h` accepted per physics substep.
const STABILITY_LIMIT: f64 = 1.0;
/// Upper bound on substeps per control tick.
pub const MAX_SUBSTEPS: usize = 64;

/// Number of equal substeps of `dt` that keep the stiffest element stable
/// under semi-implicit Euler.
///
/// Each taut cable and each ground contact is treated as a spring acting on
/// the effective mass of the rod point it loads. Short cables of a stiff
/// material are what usually drive this above one.
pub fn stable_substeps(config: &RobotConfig, fixtures: &Fixtures, state: &WorldState, dt: f64) -> usize {
    let n = config.rods.len();
    // per rod: largest stiffness/mass ratio seen at any of its points
    let mut omega_sq = vec![0.0f64; n];
    for (c, link) in config.cables.iter().enumerate() {
        let ra = &state.rods[link.from.rod];
        let rb = &state.rods[link.to.rod];
        let a = ra.point(&config.rods[link.from.rod].anchor_offsets[link.from.anchor]);
        let b = rb.point(&config.rods[link.to.rod].anchor_offsets[link.to.anchor]);
        let (p, _) = paid_out(config, state, c);
        let d = (b - a).norm();
        if !(d > p && p > 0.0) {
            continue;
        }
        let el = CableElasticity::<f64>::from_spec(&link.spec);
        let k = el.tangent_modulus(d / p - 1.0) / p;
        let u = (b - a) / d;
        for (rod, point) in [(link.from.rod, a), (link.to.rod, b)] {
            let m = effective_mass(config, state, rod, &point, &u);
            omega_sq[rod] += k / m;
        }
        if let Some(spec) = &link.actuator {
            let spool = spec.reflected_inertia / (spec.spool_radius * spec.spool_radius);
            omega_sq.push(k / spool);
        }
    }
    if fixtures.ground {
        let kn = config.ground.normal_stiffness;
        for (i, rs) in state.rods.iter().enumerate() {
            let spec = &config.rods[i];
            for off in spec.endcap_offsets() {
                let centre = rs.point(&off);
                if centre.z < spec.cap_radius {
                    omega_sq[i] += kn / effective_mass(config, state, i, &centre, &Vec3::z());
                }
            }
        }
    }
    let omega = omega_sq.into_iter().fold(0.0, f64::max).sqrt();
    ((omega * dt / STABILITY_LIMIT).ceil() as usize).clamp(1, MAX_SUBSTEPS)
}

/// Advances the world by `dt`.
///
/// `torques` are the spool torque commands and `torque_noise` the realised
/// deviation per cable (entries for passive cables are ignored).
pub fn step_world(
    config: &RobotConfig,
    fixtures: &Fixtures,
    state: &WorldState,
    torques: &[f64],
    torque_noise: &[f64],
    dt: f64,
) -> Result<(WorldState, Vec<CableForceRecord>), SimError> {
    let mut next = state.clone();
    let records = advance_world(config, fixtures, &mut next, torques, torque_noise, dt)?;
    Ok((next, records))
}

/// In-place form of [`step_world`]. On error `state` is left part-way
/// through the update.
pub fn advance_world(
    config: &RobotConfig,
    fixtures: &Fixtures,
    state: &mut WorldState,
    torques: &[f64],
    torque_noise: &[f64],
    dt: f64,
) -> Result<Vec<CableForceRecord>, SimError> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(SimError::BadTimeStep(dt));
    }
    let nc = config.cables.len();
    for len in [torques.len(), torque_noise.len()] {
        if len != nc {
            return Err(SimError::InputLength { expected: nc, got: len });
        }
    }
    let forces = evaluate_forces(config, fixtures, state, dt);
    let start = state.sim_time;

    for (i, rs) in state.rods.iter_mut().enumerate() {
        let w = &forces.wrenches[i];
        let m = config.rod_mass(i);
        rs.linear_velocity += w.force / m * dt;

        let inertia = world_inertia(config, i, &rs.orientation);
        let momentum = inertia * rs.angular_velocity + w.torque * dt;
        let omega_mid = inertia.try_inverse().unwrap_or_else(Matrix3::zeros) * momentum;
        let mut q = UnitQuaternion::from_scaled_axis(omega_mid * dt) * rs.orientation;
        q.renormalize();
        rs.orientation = q;
        let inertia_next = world_inertia(config, i, &rs.orientation);
        rs.angular_velocity = inertia_next.try_inverse().unwrap_or_else(Matrix3::zeros) * momentum;
        rs.position += rs.linear_velocity * dt;

        let finite = rs
            .position
            .iter()
            .chain(rs.linear_velocity.iter())
            .chain(rs.angular_velocity.iter())
            .all(|x| x.is_finite());
        if !finite || rs.linear_velocity.norm() > 1e3 || rs.angular_velocity.norm() > 1e4 {
            return Err(SimError::Diverged {
                time: start,
                detail: format!(
                    "rod {i} state non-finite or runaway: v = {:?}",
                    rs.linear_velocity.as_slice()
                ),
            });
        }
    }

    for (c, link) in config.cables.iter().enumerate() {
        if let Some(spec) = &link.actuator {
            let tension = forces.cables[c].tension;
            if !tension.is_finite() {
                return Err(SimError::Diverged {
                    time: start,
                    detail: format!("cable {c} tension non-finite"),
                });
            }
            state.actuators[c].step(torques[c], tension, dt, spec, torque_noise[c])?;
        }
    }
    state.sim_time = start + dt;
    Ok(forces.cables)
}

/// Net force and torque on each rod under the current state.
pub fn equilibrium_residual(config: &RobotConfig, fixtures: &Fixtures, state: &WorldState) -> Vec<RodWrench> {
    evaluate_forces(config, fixtures, state, 1e-3).wrenches
}

/// Largest per-rod net force magnitude.
pub fn max_force_residual(residual: &[RodWrench]) -> f64 {
    residual.iter().map(|w| w.force.norm()).fold(0.0, f64::max)
}

/// Highest point of the robot (top of the highest endcap sphere).
pub fn robot_height(config: &RobotConfig, state: &WorldState) -> f64 {
    endcap_positions(config, state)
        .iter()
        .enumerate()
        .map(|(k, p)| p.z + config.rods[k / 2].cap_radius)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Endcap sphere centres, indexed `2 · rod + end` (end 0 bottom, 1 top).
pub fn endcap_positions(config: &RobotConfig, state: &WorldState) -> Vec<Vec3> {
    state
        .rods
        .iter()
        .zip(&config.rods)
        .flat_map(|(rs, spec)| spec.endcap_offsets().map(|o| rs.point(&o)))
        .collect()
}

/// Angle of each bar above the ground plane, rad.
pub fn bar_angles(state: &WorldState) -> Vec<f64> {
    state
        .rods
        .iter()
        .map(|r| r.axis().z.abs().clamp(0.0, 1.0).asin())
        .collect()
}

/// Horizontal centroid of the rod centres of mass.
pub fn centroid(config: &RobotConfig, state: &WorldState) -> Vec3 {
    let total = config.total_mass();
    state
        .rods
        .iter()
        .enumerate()
        .map(|(i, r)| r.position * config.rod_mass(i))
        .sum::<Vec3>()
        / total
}

/// The three endcaps resting on the ground, if the robot sits on a face.
/// Returns `None` unless exactly three endcaps are within `tolerance` of
/// their resting height (mid-roll, or lying flat).
pub fn ground_face(config: &RobotConfig, state: &WorldState, tolerance: f64) -> Option<Face> {
    let caps = endcap_positions(config, state);
    let mut order: Vec<(usize, f64)> = caps
        .iter()
        .enumerate()
        .map(|(k, p)| (k, p.z - config.rods[k / 2].cap_radius))
        .collect();
    if order.len() < 3 {
        return None;
    }
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    if order[2].1 > tolerance || order.get(3).is_some_and(|o| o.1 <= tolerance) {
        return None;
    }
    let mut face = [order[0].0, order[1].0, order[2].0];
    face.sort_unstable();
    Some(face)
}

/// Kinetic, gravitational and elastic energy, J.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyAudit {
    pub kinetic: f64,
    pub gravitational: f64,
    pub elastic: f64,
}

impl EnergyAudit {
    pub fn total(&self) -> f64 {
        self.kinetic + self.gravitational + self.elastic
    }
}

pub fn energy(config: &RobotConfig, state: &WorldState) -> EnergyAudit {
    let mut kinetic = 0.0;
    let mut gravitational = 0.0;
    for (i, rs) in state.rods.iter().enumerate() {
        let m = config.rod_mass(i);
        let inertia = world_inertia(config, i, &rs.orientation);
        kinetic += 0.5 * m * rs.linear_velocity.norm_squared();
        kinetic += 0.5 * rs.angular_velocity.dot(&(inertia * rs.angular_velocity));
        gravitational += m * config.gravity * rs.position.z;
    }
    let mut elastic = 0.0;
    for (c, link) in config.cables.iter().enumerate() {
        let a = state.rods[link.from.rod].point(&config.rods[link.from.rod].anchor_offsets[link.from.anchor]);
        let b = state.rods[link.to.rod].point(&config.rods[link.to.rod].anchor_offsets[link.to.anchor]);
        let (p, _) = paid_out(config, state, c);
        elastic += CableElasticity::<f64>::from_spec(&link.spec).stored_energy(p, (b - a).norm());
    }
    EnergyAudit {
        kinetic,
        gravitational,
        elastic,
    }
}

/// Total linear and angular momentum (angular about the world origin).
pub fn momentum(config: &RobotConfig, state: &WorldState) -> (Vec3, Vec3) {
    let mut p = Vec3::zeros();
    let mut l = Vec3::zeros();
    for (i, rs) in state.rods.iter().enumerate() {
        let m = config.rod_mass(i);
        let lin = rs.linear_velocity * m;
        p += lin;
        l += rs.position.cross(&lin) + world_inertia(config, i, &rs.orientation) * rs.angular_velocity;
    }
    (p, l)
}

/// A robot, its cable controllers and a seeded noise source, stepped at a
/// fixed `dt`.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: RobotConfig,
    pub fixtures: Fixtures,
    pub state: WorldState,
    pub controllers: Vec<CableController>,
    pub dt: f64,
    pub records: Vec<CableForceRecord>,
    rng: ChaCha8Rng,
    torques: Vec<f64>,
    noise: Vec<f64>,
}

impl Simulation {
    pub fn new(config: RobotConfig, state: WorldState, dt: f64, seed: u64) -> Result<Self, SimError> {
        config.validate()?;
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(SimError::BadTimeStep(dt));
        }
        if state.actuators.len() != config.cables.len() {
            return Err(SimError::InputLength {
                expected: config.cables.len(),
                got: state.actuators.len(),
            });
        }
        let nc = config.cables.len();
        let fixtures = Fixtures::default();
        let records = evaluate_forces(&config, &fixtures, &state, dt).cables;
        Ok(Self {
            controllers: vec![CableController::default(); nc],
            config,
            fixtures,
            state,
            dt,
            records,
            rng: ChaCha8Rng::seed_from_u64(seed),
            torques: vec![0.0; nc],
            noise: vec![0.0; nc],
        })
    }

    /// Robot at rest in its nominal pose with every cable in `mode`.
    pub fn nominal(config: RobotConfig, dt: f64, seed: u64) -> Result<Self, SimError> {
        let state = WorldState::nominal(&config);
        Self::new(config, state, dt, seed)
    }

    pub fn with_fixtures(mut self, fixtures: Fixtures) -> Self {
        self.fixtures = fixtures;
        self.records = evaluate_forces(&self.config, &self.fixtures, &self.state, self.dt).cables;
        self
    }

    pub fn set_modes(&mut self, modes: &[CableMode<f64>]) -> Result<(), SimError> {
        if modes.len() != self.controllers.len() {
            return Err(SimError::InputLength {
                expected: self.controllers.len(),
                got: modes.len(),
            });
        }
        for (c, m) in self.controllers.iter_mut().zip(modes) {
            m.validate()?;
            c.set_mode(*m);
        }
        Ok(())
    }

    pub fn modes(&self) -> Vec<CableMode<f64>> {
        self.controllers.iter().map(|c| c.mode).collect()
    }

    /// One inner-loop control tick followed by one physics step.
    pub fn step(&mut self) -> Result<(), SimError> {
        for (c, link) in self.config.cables.iter().enumerate() {
            match &link.actuator {
                Some(spec) => {
                    self.torques[c] = self.controllers[c].tick(&self.state.actuators[c], spec, self.dt)?;
                    self.noise[c] = if spec.torque_noise_sigma > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        z * spec.torque_noise_sigma
                    } else {
                        0.0
                    };
                }
                None => {
                    self.torques[c] = 0.0;
                    self.noise[c] = 0.0;
                }
            }
        }
        let start = self.state.sim_time;
        let n = stable_substeps(&self.config, &self.fixtures, &self.state, self.dt);
        let h = self.dt / n as f64;
        for _ in 0..n {
            self.records = advance_world(
                &self.config,
                &self.fixtures,
                &mut self.state,
                &self.torques,
                &self.noise,
                h,
            )?;
        }
        self.state.sim_time = start + self.dt;
        Ok(())
    }

    /// Steps for `duration` seconds (rounded to whole steps).
    pub fn run(&mut self, duration: f64) -> Result<(), SimError> {
        let steps = (duration / self.dt).round() as usize;
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.state.sim_time
    }

    pub fn height(&self) -> f64 {
        robot_height(&self.config, &self.state)
    }

    pub fn residual(&self) -> Vec<RodWrench> {
        equilibrium_residual(&self.config, &self.fixtures, &self.state)
    }

    /// Cable lengths as each actuator's encoder reports them.
    pub fn estimated_lengths(&self) -> Result<Vec<f64>, SimError> {
        self.config
            .cables
            .iter()
            .zip(&self.state.actuators)
            .map(|(link, a)| match &link.actuator {
                Some(spec) => Ok(a.estimated_cable_length(spec)?),
                None => Ok(link.rest_length),
            })
            .collect()
    }
}

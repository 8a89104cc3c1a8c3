//! Robot description and world state.
//!
//! Every rod uses a local frame whose `z` axis runs along the bar; the rod
//! centre of mass is the local origin. Node numbering for the default 3-prism:
//! rod `i` carries the bottom node `B_i` at local `z = -length/2` and the top
//! node `T_i` at `z = +length/2`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::ActuatorState;
use crate::cable::MaterialTable;

pub type Vec3 = Vector3<f64>;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{kind} index {index} out of range (len {len})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid robot configuration: {0}")]
    InvalidConfig(String),
    #[error("config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::InvalidConfig(msg.into())
}

/// One rigid bar of the robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RodSpec {
    pub length: f64,
    pub mass: f64,
    /// Outer radius of the exoskeleton tube.
    pub radius: f64,
    /// Radius of the compliant endcap sphere centred on each bar tip.
    pub cap_radius: f64,
    /// Cable attachment points in the rod frame (radial `x`, `y`; axial `z`).
    pub anchor_offsets: Vec<Vec3>,
}

impl RodSpec {
    /// Endcap sphere centres in the rod frame, bottom first.
    pub fn endcap_offsets(&self) -> [Vec3; 2] {
        let h = self.length / 2.0;
        [Vec3::new(0.0, 0.0, -h), Vec3::new(0.0, 0.0, h)]
    }

    /// Principal moments about the centre: thin uniform rod across the bar,
    /// thin-walled tube about the bar axis.
    pub fn principal_inertia(&self) -> Vec3 {
        let transverse = self.mass * self.length * self.length / 12.0;
        let axial = self.mass * self.radius * self.radius;
        Vec3::new(transverse, transverse, axial)
    }

    fn validate(&self, index: usize) -> Result<(), ModelError> {
        if !(self.length > 0.0) {
            return Err(invalid(format!("rod {index}: length must be positive")));
        }
        if !(self.mass > 0.0) {
            return Err(invalid(format!("rod {index}: mass must be positive")));
        }
        if !(self.radius > 0.0 && self.cap_radius >= 0.0) {
            return Err(invalid(format!("rod {index}: radii must be positive")));
        }
        for (k, a) in self.anchor_offsets.iter().enumerate() {
            if a.norm() > self.length / 2.0 + 1e-12 {
                return Err(invalid(format!(
                    "rod {index}: anchor {k} lies {:.4} m from the centre, beyond half length",
                    a.norm()
                )));
            }
        }
        Ok(())
    }
}

/// Cable material and cross-section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CableSpec {
    pub material_name: String,
    pub diameter: f64,
    /// Maximum breaking load, N.
    pub mbl: f64,
    /// Strain at 30 % of the maximum breaking load.
    pub elongation_at_30pct: f64,
    /// 1 for a linear force–strain law.
    pub strain_exponent: f64,
    /// kg/m
    pub linear_density: f64,
}

impl CableSpec {
    fn validate(&self) -> Result<(), ModelError> {
        if !(self.mbl > 0.0) {
            return Err(invalid(format!("{}: mbl must be positive", self.material_name)));
        }
        if !(self.elongation_at_30pct > 0.0 && self.elongation_at_30pct < 1.0) {
            return Err(invalid(format!(
                "{}: elongation at 30% MBL must lie in (0, 1)",
                self.material_name
            )));
        }
        if !(self.strain_exponent > 0.0) {
            return Err(invalid(format!(
                "{}: strain exponent must be positive",
                self.material_name
            )));
        }
        Ok(())
    }
}

/// QDD spool actuator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorSpec {
    pub gear_ratio: f64,
    /// Motor speed constant, rad/s per volt.
    pub kv: f64,
    pub continuous_torque: f64,
    pub stall_torque: f64,
    pub spool_radius: f64,
    pub encoder_counts_per_rev: u32,
    pub inner_loop_rate: f64,
    pub coulomb_friction_torque: f64,
    /// Rotor + spool inertia reflected to the spool shaft, kg·m².
    pub reflected_inertia: f64,
    /// Standard deviation of the torque realised around the commanded value, N·m.
    pub torque_noise_sigma: f64,
    /// Rolling window for the continuous-torque limit, s.
    pub thermal_window: f64,
    /// Maximum cable length the spool can hold, m.
    pub spool_capacity: f64,
}

impl Default for ActuatorSpec {
    fn default() -> Self {
        Self {
            gear_ratio: 10.0,
            // GIM4310 constant not published; the tests are kv-invariant.
            kv: 10.0,
            continuous_torque: 3.0,
            stall_torque: 6.0,
            spool_radius: 0.015,
            encoder_counts_per_rev: 16384,
            inner_loop_rate: 1000.0,
            coulomb_friction_torque: 0.05,
            reflected_inertia: 0.005,
            torque_noise_sigma: 0.02,
            thermal_window: 2.0,
            spool_capacity: 1.2,
        }
    }
}

impl ActuatorSpec {
    /// Noise-free, friction-free plant used by oracle tests.
    pub fn ideal(mut self) -> Self {
        self.coulomb_friction_torque = 0.0;
        self.torque_noise_sigma = 0.0;
        self
    }

    pub fn max_cable_force(&self) -> f64 {
        self.stall_torque / self.spool_radius
    }

    fn validate(&self) -> Result<(), ModelError> {
        if !(self.continuous_torque > 0.0 && self.continuous_torque <= self.stall_torque) {
            return Err(invalid("actuator: need 0 < continuous_torque <= stall_torque"));
        }
        if !(self.spool_radius > 0.0) {
            return Err(invalid("actuator: spool radius must be positive"));
        }
        if !(self.gear_ratio >= 1.0) {
            return Err(invalid("actuator: gear ratio must be >= 1"));
        }
        if !self.encoder_counts_per_rev.is_power_of_two() {
            return Err(invalid("actuator: encoder counts per rev must be a power of two"));
        }
        if !(self.kv > 0.0 && self.reflected_inertia > 0.0 && self.inner_loop_rate > 0.0) {
            return Err(invalid("actuator: kv, inertia and loop rate must be positive"));
        }
        if self.coulomb_friction_torque < 0.0 || self.torque_noise_sigma < 0.0 {
            return Err(invalid("actuator: friction and noise must be non-negative"));
        }
        if !(self.thermal_window > 0.0 && self.spool_capacity > 0.0) {
            return Err(invalid("actuator: thermal window and spool capacity must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorRef {
    pub rod: usize,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CableLink {
    pub spec: CableSpec,
    pub from: AnchorRef,
    pub to: AnchorRef,
    /// Drive unit reeling this cable; `None` for a passive cable of fixed length.
    pub actuator: Option<ActuatorSpec>,
    /// Unstretched length used when the cable is passive, and the initial
    /// paid-out length otherwise.
    pub rest_length: f64,
}

/// Penalty ground contact at the endcap spheres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactModel {
    pub normal_stiffness: f64,
    pub normal_damping: f64,
    pub friction_coefficient: f64,
    pub slip_regularization_velocity: f64,
}

impl Default for ContactModel {
    fn default() -> Self {
        Self {
            normal_stiffness: 5.0e4,
            normal_damping: 500.0,
            friction_coefficient: 0.8,
            slip_regularization_velocity: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub rods: Vec<RodSpec>,
    pub cables: Vec<CableLink>,
    pub gravity: f64,
    pub ground: ContactModel,
    /// Parallel damping on taut cables as a fraction of critical damping.
    pub cable_damping_ratio: f64,
    /// Point masses fixed at each rod midpoint, kg.
    pub payload: Vec<f64>,
    /// Bar mass assumed by the actuator sizing estimate, kg.
    pub design_bar_mass: f64,
    /// Base circumradius and twist of the nominal standing prism.
    pub nominal: PrismGeometry,
}

/// Nominal standing 3-prism: bottom endcap centres on a circle of
/// `base_radius`, top endcap centres rotated by `twist` around the vertical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrismGeometry {
    pub base_radius: f64,
    /// Angle between a bar's bottom and top node around the prism axis, rad.
    pub twist: f64,
}

impl Default for PrismGeometry {
    fn default() -> Self {
        Self {
            base_radius: 0.4,
            twist: 5.0 * PI / 6.0,
        }
    }
}

/// Axial inset of the cable anchors from the bar tips.
pub const ANCHOR_INSET: f64 = 0.03;
/// Radial offset of the cable anchors (endcap router position).
pub const ANCHOR_RADIAL: f64 = 0.038;

impl RobotConfig {
    pub fn rod_mass(&self, rod: usize) -> f64 {
        self.rods[rod].mass + self.payload.get(rod).copied().unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        (0..self.rods.len()).map(|i| self.rod_mass(i)).sum()
    }

    /// Same robot carrying `total_kg` split evenly over the bar midpoints.
    pub fn with_payload(mut self, total_kg: f64) -> Self {
        let share = total_kg / self.rods.len() as f64;
        self.payload = vec![share; self.rods.len()];
        self
    }

    /// Replaces every actuator with its noise-free, friction-free variant.
    pub fn with_ideal_actuators(mut self) -> Self {
        for c in &mut self.cables {
            if let Some(a) = c.actuator.take() {
                c.actuator = Some(a.ideal());
            }
        }
        self
    }

    pub fn anchor_offset(&self, anchor: AnchorRef) -> Result<Vec3, ModelError> {
        let rod = self.rods.get(anchor.rod).ok_or(ModelError::IndexOutOfRange {
            kind: "rod",
            index: anchor.rod,
            len: self.rods.len(),
        })?;
        rod.anchor_offsets
            .get(anchor.anchor)
            .copied()
            .ok_or(ModelError::IndexOutOfRange {
                kind: "anchor",
                index: anchor.anchor,
                len: rod.anchor_offsets.len(),
            })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rods.is_empty() {
            return Err(invalid("no rods"));
        }
        for (i, r) in self.rods.iter().enumerate() {
            r.validate(i)?;
        }
        if self.payload.len() != self.rods.len() || self.payload.iter().any(|m| *m < 0.0) {
            return Err(invalid("payload needs one non-negative mass per rod"));
        }
        for (i, c) in self.cables.iter().enumerate() {
            c.spec.validate()?;
            self.anchor_offset(c.from)?;
            self.anchor_offset(c.to)?;
            if c.from.rod == c.to.rod {
                return Err(invalid(format!("cable {i} connects rod {} to itself", c.from.rod)));
            }
            if !(c.rest_length >= 0.0) {
                return Err(invalid(format!("cable {i}: negative rest length")));
            }
            if let Some(a) = &c.actuator {
                a.validate()?;
            }
        }
        if !cable_graph_connected(self.rods.len(), self.cables.iter().map(|c| (c.from.rod, c.to.rod))) {
            return Err(invalid("cable graph is not connected"));
        }
        let g = &self.ground;
        if g.normal_stiffness < 0.0
            || g.normal_damping < 0.0
            || g.friction_coefficient < 0.0
            || g.slip_regularization_velocity < 0.0
        {
            return Err(invalid("contact parameters must be non-negative"));
        }
        if self.cable_damping_ratio < 0.0 {
            return Err(invalid("cable damping ratio must be non-negative"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, ModelError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

/// True when every rod is reachable from rod 0 through cables.
pub fn cable_graph_connected(rods: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> bool {
    if rods == 0 {
        return false;
    }
    let mut adjacency = vec![Vec::new(); rods];
    for (a, b) in edges {
        if a >= rods || b >= rods {
            return false;
        }
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let mut seen = vec![false; rods];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(r) = stack.pop() {
        for &n in &adjacency[r] {
            if !seen[n] {
                seen[n] = true;
                stack.push(n);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Node endpoints `(rod, top_end)` of the nine 3-prism cables: bottom
/// triangle, top triangle, then the saddle cables `B_i – T_{i-1}`.
pub const PRISM_CABLES: [((usize, bool), (usize, bool)); 9] = [
    ((0, false), (1, false)),
    ((1, false), (2, false)),
    ((2, false), (0, false)),
    ((0, true), (1, true)),
    ((1, true), (2, true)),
    ((2, true), (0, true)),
    ((0, false), (2, true)),
    ((1, false), (0, true)),
    ((2, false), (1, true)),
];

impl PrismGeometry {
    /// Height of the top nodes above the bottom nodes for bars of `length`.
    pub fn height(&self, length: f64) -> f64 {
        let chord2 = 2.0 * self.base_radius * self.base_radius * (1.0 - self.twist.cos());
        (length * length - chord2).max(0.0).sqrt()
    }

    /// Endcap centres `(bottom, top)` of each rod, bottom caps resting on the
    /// ground plane at height `cap_radius`.
    pub fn nodes(&self, length: f64, cap_radius: f64) -> [(Vec3, Vec3); 3] {
        let h = self.height(length);
        let r = self.base_radius;
        std::array::from_fn(|i| {
            let a = 2.0 * PI * i as f64 / 3.0;
            let b = a + self.twist;
            (
                Vec3::new(r * a.cos(), r * a.sin(), cap_radius),
                Vec3::new(r * b.cos(), r * b.sin(), cap_radius + h),
            )
        })
    }
}

/// Pose of a bar whose bottom and top endcap centres are given.
pub fn rod_pose_from_ends(bottom: Vec3, top: Vec3) -> (Vec3, UnitQuaternion<f64>) {
    let axis = top - bottom;
    let q = UnitQuaternion::rotation_between(&Vec3::z(), &axis)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vec3::x_axis(), PI));
    ((bottom + top) / 2.0, q)
}

/// The canonical robot: three 1.2 m / 4.0 kg bars, nine actuated Dyneema
/// cables in the 3-prism pattern.
pub fn default_robot() -> RobotConfig {
    let dyneema = MaterialTable::builtin()
        .get("Dyneema")
        .expect("builtin table has Dyneema")
        .to_cable_spec();
    let rod_template = RodSpec {
        length: 1.2,
        mass: 4.0,
        radius: 0.038,
        cap_radius: 0.06,
        anchor_offsets: Vec::new(),
    };
    let nominal = PrismGeometry::default();
    let nodes = nominal.nodes(rod_template.length, rod_template.cap_radius);
    let poses: Vec<_> = nodes.iter().map(|(b, t)| rod_pose_from_ends(*b, *t)).collect();
    let node_pos = |(rod, top): (usize, bool)| if top { nodes[rod].1 } else { nodes[rod].0 };

    let mut rods = vec![rod_template; 3];
    let mut cables = Vec::with_capacity(PRISM_CABLES.len());
    let actuator = ActuatorSpec::default();
    let half = rods[0].length / 2.0;

    let place_anchor = |rods: &mut Vec<RodSpec>, (rod, top): (usize, bool), toward: Vec3| {
        let (centre, q) = poses[rod];
        let local_target = q.inverse_transform_vector(&(toward - centre));
        let radial = Vec3::new(local_target.x, local_target.y, 0.0);
        let radial = if radial.norm() > 1e-9 {
            radial.normalize() * ANCHOR_RADIAL
        } else {
            Vec3::new(ANCHOR_RADIAL, 0.0, 0.0)
        };
        let axial = if top {
            half - ANCHOR_INSET
        } else {
            -(half - ANCHOR_INSET)
        };
        let offsets = &mut rods[rod].anchor_offsets;
        offsets.push(Vec3::new(radial.x, radial.y, axial));
        AnchorRef {
            rod,
            anchor: offsets.len() - 1,
        }
    };

    let mut anchor_world = Vec::new();
    for &(a, b) in PRISM_CABLES.iter() {
        let from = place_anchor(&mut rods, a, node_pos(b));
        let to = place_anchor(&mut rods, b, node_pos(a));
        let world = |r: AnchorRef, rods: &Vec<RodSpec>| {
            let (c, q) = poses[r.rod];
            c + q * rods[r.rod].anchor_offsets[r.anchor]
        };
        let rest = (world(from, &rods) - world(to, &rods)).norm();
        anchor_world.push(rest);
        cables.push(CableLink {
            spec: dyneema.clone(),
            from,
            to,
            actuator: Some(actuator.clone()),
            rest_length: rest,
        });
    }

    RobotConfig {
        payload: vec![0.0; rods.len()],
        rods,
        cables,
        gravity: GRAVITY,
        ground: ContactModel::default(),
        cable_damping_ratio: 0.05,
        design_bar_mass: 5.0,
        nominal,
    }
}

/// Kinematic state of one rod. Velocities are in the world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RodState {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
}

impl RodState {
    pub fn at_rest(position: Vec3, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
            linear_velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
        }
    }

    pub fn point(&self, offset: &Vec3) -> Vec3 {
        self.position + self.orientation * offset
    }

    pub fn point_velocity(&self, world_point: &Vec3) -> Vec3 {
        self.linear_velocity + self.angular_velocity.cross(&(world_point - self.position))
    }

    /// Unit bar axis in the world frame.
    pub fn axis(&self) -> Vec3 {
        self.orientation * Vec3::z()
    }
}

/// The simulated truth: rod poses, actuator states, time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub rods: Vec<RodState>,
    /// One entry per cable; passive cables keep a homed state with zero turns.
    pub actuators: Vec<ActuatorState>,
    pub sim_time: f64,
}

impl WorldState {
    /// Robot at rest in its nominal standing pose, spools homed at the
    /// anchor-to-anchor distances (all cables exactly at the taut boundary).
    pub fn nominal(config: &RobotConfig) -> Self {
        let mut rods = Vec::with_capacity(config.rods.len());
        let rod0 = &config.rods[0];
        let nodes = config.nominal.nodes(rod0.length, rod0.cap_radius);
        for (b, t) in nodes.iter().take(config.rods.len()) {
            let (c, q) = rod_pose_from_ends(*b, *t);
            rods.push(RodState::at_rest(c, q));
        }
        let mut world = Self {
            rods,
            actuators: Vec::new(),
            sim_time: 0.0,
        };
        world.home_at_current_lengths(config);
        world
    }

    /// Re-homes every spool at the current geometric anchor distance.
    pub fn home_at_current_lengths(&mut self, config: &RobotConfig) {
        self.actuators = config
            .cables
            .iter()
            .map(|c| {
                let a = self.rods[c.from.rod].point(&config.rods[c.from.rod].anchor_offsets[c.from.anchor]);
                let b = self.rods[c.to.rod].point(&config.rods[c.to.rod].anchor_offsets[c.to.anchor]);
                let length = if c.actuator.is_some() {
                    (a - b).norm()
                } else {
                    c.rest_length
                };
                ActuatorState::homed_at(length)
            })
            .collect();
    }

    /// Quaternion norm check (they are stored normalized; this guards
    /// against states assembled by hand).
    pub fn max_quaternion_norm_error(&self) -> f64 {
        self.rods
            .iter()
            .map(|r| (r.orientation.quaternion().norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// World position of an anchor given the rod pose.
pub fn anchor_world_position(
    config: &RobotConfig,
    state: &WorldState,
    rod: usize,
    anchor: usize,
) -> Result<Vec3, ModelError> {
    let offset = config.anchor_offset(AnchorRef { rod, anchor })?;
    let rod_state = state.rods.get(rod).ok_or(ModelError::IndexOutOfRange {
        kind: "rod state",
        index: rod,
        len: state.rods.len(),
    })?;
    Ok(rod_state.point(&offset))
}

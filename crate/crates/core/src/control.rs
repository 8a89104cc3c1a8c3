//! Cable control modes, stiffness tuning and the gait scheduler.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{ActuatorError, ActuatorState};
use crate::model::ActuatorSpec;
use crate::num::{clamp, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("invalid mode parameters: {0}")]
    InvalidMode(String),
    #[error("power-law spring undefined at zero length with negative exponent")]
    SingularSpring,
    #[error("stiffness must be positive, got {0}")]
    NonPositiveStiffness(f64),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
    #[error("invalid gait script: {0}")]
    InvalidScript(String),
    #[error("gait file: {0}")]
    File(String),
}

/// Control law applied by one cable actuator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CableMode<T> {
    #[default]
    Idle,
    /// PD length tracking with a minimum (feed-forward) force.
    Length {
        setpoint: T,
        kp: T,
        kd: T,
        feed_forward: T,
    },
    /// `F = ks · l`
    SpringLinear {
        ks: T,
    },
    /// `F = k1 · l^k2 + k3`
    SpringPower {
        k1: T,
        k2: T,
        k3: T,
    },
    ConstantForce {
        force: T,
    },
}

impl<T: Scalar> CableMode<T> {
    pub const IDLE: u8 = 0;
    pub const LENGTH: u8 = 1;
    pub const SPRING_LINEAR: u8 = 2;
    pub const SPRING_POWER: u8 = 3;
    pub const CONSTANT_FORCE: u8 = 4;

    /// Length mode with the default gains (2000 N/m, 50 N·s/m, 5 N).
    pub fn length(setpoint: T) -> Self {
        Self::Length {
            setpoint,
            kp: T::lit(2000.0),
            kd: T::lit(50.0),
            feed_forward: T::lit(5.0),
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Self::Idle => Self::IDLE,
            Self::Length { .. } => Self::LENGTH,
            Self::SpringLinear { .. } => Self::SPRING_LINEAR,
            Self::SpringPower { .. } => Self::SPRING_POWER,
            Self::ConstantForce { .. } => Self::CONSTANT_FORCE,
        }
    }

    /// Mode parameters in wire order; unused slots are zero.
    pub fn params(&self) -> [T; 4] {
        let z = T::zero();
        match *self {
            Self::Idle => [z; 4],
            Self::Length {
                setpoint,
                kp,
                kd,
                feed_forward,
            } => [setpoint, kp, kd, feed_forward],
            Self::SpringLinear { ks } => [ks, z, z, z],
            Self::SpringPower { k1, k2, k3 } => [k1, k2, k3, z],
            Self::ConstantForce { force } => [force, z, z, z],
        }
    }

    /// Inverse of [`code`](Self::code) + [`params`](Self::params). Returns
    /// `None` for an unknown code; unused parameter slots are ignored.
    pub fn from_code(code: u8, p: [T; 4]) -> Option<Self> {
        Some(match code {
            Self::IDLE => Self::Idle,
            Self::LENGTH => Self::Length {
                setpoint: p[0],
                kp: p[1],
                kd: p[2],
                feed_forward: p[3],
            },
            Self::SPRING_LINEAR => Self::SpringLinear { ks: p[0] },
            Self::SPRING_POWER => Self::SpringPower {
                k1: p[0],
                k2: p[1],
                k3: p[2],
            },
            Self::CONSTANT_FORCE => Self::ConstantForce { force: p[0] },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |what: &str| Err(ControlError::InvalidMode(what.to_string()));
        if self.params().iter().any(|p| !p.is_finite()) {
            return bad("non-finite parameter");
        }
        match *self {
            Self::Idle => Ok(()),
            Self::Length {
                setpoint,
                kp,
                kd,
                feed_forward,
            } => {
                if setpoint < T::zero() {
                    bad("negative length setpoint")
                } else if kp < T::zero() || kd < T::zero() {
                    bad("negative gain")
                } else if feed_forward < T::zero() {
                    bad("negative feed-forward force")
                } else {
                    Ok(())
                }
            }
            Self::SpringLinear { ks } if ks < T::zero() => bad("negative spring constant"),
            Self::SpringLinear { .. } => Ok(()),
            Self::SpringPower { k1, k3, .. } if k1 < T::zero() || k3 < T::zero() => bad("negative k1 or k3"),
            Self::SpringPower { .. } => Ok(()),
            Self::ConstantForce { force } if force < T::zero() => bad("negative force"),
            Self::ConstantForce { .. } => Ok(()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> CableMode<U> {
        let p = self.params().map(|x| U::lit(x.to_f64_lossy()));
        CableMode::from_code(self.code(), p).expect("own code is valid")
    }

    /// Stiffness of the law (kp or ks), if it has one that can be retuned.
    pub fn stiffness(&self) -> Option<T> {
        match *self {
            Self::Length { kp, .. } => Some(kp),
            Self::SpringLinear { ks } => Some(ks),
            _ => None,
        }
    }
}

/// Length mode law: PD on the length excess plus the minimum force; only the
/// minimum force when the cable is shorter than the setpoint.
pub fn length_mode_force<T: Scalar>(l_c: T, dl_dt: T, setpoint: T, kp: T, kd: T, feed_forward: T) -> T {
    if l_c >= setpoint {
        (kp * (l_c - setpoint) + kd * dl_dt + feed_forward).max(feed_forward)
    } else {
        feed_forward
    }
}

/// Spring-mode laws; other modes are rejected.
pub fn spring_force<T: Scalar>(l_c: T, mode: &CableMode<T>) -> Result<T, ControlError> {
    match *mode {
        CableMode::SpringLinear { ks } => Ok((ks * l_c).max(T::zero())),
        CableMode::SpringPower { k1, k2, k3 } => {
            if l_c == T::zero() && k2 < T::zero() {
                return Err(ControlError::SingularSpring);
            }
            let shaped = if k2 == T::zero() {
                T::one()
            } else {
                l_c.max(T::zero()).powf(k2)
            };
            Ok((k1 * shaped + k3).max(T::zero()))
        }
        _ => Err(ControlError::InvalidMode("not a spring mode".into())),
    }
}

pub fn constant_force<T: Scalar>(force: T) -> Result<T, ControlError> {
    if force < T::zero() {
        return Err(ControlError::InvalidMode("negative force".into()));
    }
    Ok(force)
}

/// Cable force demanded by `mode` at length `l_c` moving at `dl_dt`.
pub fn target_force<T: Scalar>(mode: &CableMode<T>, l_c: T, dl_dt: T) -> Result<T, ControlError> {
    match *mode {
        CableMode::Idle => Ok(T::zero()),
        CableMode::Length {
            setpoint,
            kp,
            kd,
            feed_forward,
        } => Ok(length_mode_force(l_c, dl_dt, setpoint, kp, kd, feed_forward)),
        CableMode::SpringLinear { .. } | CableMode::SpringPower { .. } => spring_force(l_c, mode),
        CableMode::ConstantForce { force } => constant_force(force),
    }
}

/// Spool torque realising `mode` from the actuator's own length estimate.
pub fn mode_to_torque(
    mode: &CableMode<f64>,
    actuator: &ActuatorState,
    spec: &ActuatorSpec,
    dl_dt: f64,
) -> Result<f64, ControlError> {
    let l_c = actuator.estimated_cable_length(spec)?;
    let force = target_force(mode, l_c, dl_dt)?;
    Ok(clamp(force * spec.spool_radius, 0.0, spec.stall_torque))
}

/// Replaces the stiffness of every length or linear-spring mode. Returns the
/// number of modes changed.
pub fn set_stiffness<T: Scalar>(modes: &mut [CableMode<T>], stiffness: T) -> Result<usize, ControlError> {
    if !(stiffness > T::zero()) {
        return Err(ControlError::NonPositiveStiffness(stiffness.to_f64_lossy()));
    }
    let mut changed = 0;
    for m in modes.iter_mut() {
        changed += usize::from(set_mode_stiffness(m, stiffness)?);
    }
    Ok(changed)
}

/// Per-cable form of [`set_stiffness`]. Returns whether the mode changed.
pub fn set_mode_stiffness<T: Scalar>(mode: &mut CableMode<T>, stiffness: T) -> Result<bool, ControlError> {
    if !(stiffness > T::zero()) {
        return Err(ControlError::NonPositiveStiffness(stiffness.to_f64_lossy()));
    }
    let slot = match mode {
        CableMode::Length { kp, .. } => kp,
        CableMode::SpringLinear { ks } => ks,
        _ => return Ok(false),
    };
    let changed = *slot != stiffness;
    *slot = stiffness;
    Ok(changed)
}

/// Backward-difference length rate through a first-order low-pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFilter {
    cutoff_hz: f64,
    previous: Option<f64>,
    rate: f64,
}

impl RateFilter {
    pub fn new(cutoff_hz: f64) -> Self {
        Self {
            cutoff_hz,
            previous: None,
            rate: 0.0,
        }
    }

    pub fn update(&mut self, value: f64, dt: f64) -> f64 {
        if let Some(prev) = self.previous {
            let raw = (value - prev) / dt;
            let tau = 1.0 / (std::f64::consts::TAU * self.cutoff_hz);
            let alpha = dt / (dt + tau);
            self.rate += alpha * (raw - self.rate);
        }
        self.previous = Some(value);
        self.rate
    }

    pub fn reset(&mut self) {
        self.previous = None;
        self.rate = 0.0;
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

impl Default for RateFilter {
    fn default() -> Self {
        Self::new(50.0)
    }
}

/// Inner-loop controller of one cable actuator.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CableController {
    pub mode: CableMode<f64>,
    filter: RateFilter,
}

impl CableController {
    pub fn new(mode: CableMode<f64>) -> Self {
        Self {
            mode,
            filter: RateFilter::default(),
        }
    }

    pub fn set_mode(&mut self, mode: CableMode<f64>) {
        self.mode = mode;
    }

    /// Runs one inner-loop tick and returns the torque command.
    pub fn tick(&mut self, actuator: &ActuatorState, spec: &ActuatorSpec, dt: f64) -> Result<f64, ControlError> {
        let l = actuator.estimated_cable_length(spec)?;
        let rate = self.filter.update(l, dt);
        mode_to_torque(&self.mode, actuator, spec, rate)
    }

    /// Force the current mode asks for, given the latest filtered rate.
    pub fn demanded_force(&self, actuator: &ActuatorState, spec: &ActuatorSpec) -> Result<f64, ControlError> {
        let l = actuator.estimated_cable_length(spec)?;
        target_force(&self.mode, l, self.filter.rate())
    }
}

/// Per-cable override applied during one gait phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CableAssignment {
    pub cable: usize,
    #[serde(flatten)]
    pub mode: CableMode<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitPhase {
    pub name: String,
    /// Phase timeout, s.
    pub duration: f64,
    /// Leave the phase as soon as the ground face changes.
    #[serde(default)]
    pub advance_on_face_change: bool,
    #[serde(default)]
    pub assignments: Vec<CableAssignment>,
}

/// Data-driven gait: a base mode per cable plus ordered phase overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitScript {
    pub name: String,
    #[serde(default = "default_true")]
    pub cyclic: bool,
    /// Phase a cyclic script returns to after its last phase.
    #[serde(default)]
    pub repeat_from: usize,
    pub base: Vec<CableMode<f64>>,
    pub phases: Vec<GaitPhase>,
}

fn default_true() -> bool {
    true
}

impl GaitScript {
    /// A single never-ending phase with every cable idle.
    pub fn null(cables: usize) -> Self {
        Self {
            name: "null".into(),
            cyclic: true,
            repeat_from: 0,
            base: vec![CableMode::Idle; cables],
            phases: vec![GaitPhase {
                name: "idle".into(),
                duration: f64::INFINITY,
                advance_on_face_change: false,
                assignments: Vec::new(),
            }],
        }
    }

    /// A single phase holding `modes`.
    pub fn hold(name: &str, modes: Vec<CableMode<f64>>) -> Self {
        Self {
            name: name.into(),
            cyclic: true,
            repeat_from: 0,
            base: modes,
            phases: vec![GaitPhase {
                name: "hold".into(),
                duration: f64::INFINITY,
                advance_on_face_change: false,
                assignments: Vec::new(),
            }],
        }
    }

    pub fn validate(&self, cables: usize) -> Result<(), ControlError> {
        let bad = |m: String| Err(ControlError::InvalidScript(m));
        if self.phases.is_empty() {
            return bad("no phases".into());
        }
        if self.repeat_from >= self.phases.len() {
            return bad(format!("repeat_from {} past the last phase", self.repeat_from));
        }
        if self.base.len() != cables {
            return bad(format!("base has {} modes for {cables} cables", self.base.len()));
        }
        for m in &self.base {
            m.validate()?;
        }
        for p in &self.phases {
            if !(p.duration > 0.0) {
                return bad(format!("phase `{}` has non-positive duration", p.name));
            }
            for a in &p.assignments {
                if a.cable >= cables {
                    return bad(format!("phase `{}` references cable {}", p.name, a.cable));
                }
                a.mode.validate()?;
            }
        }
        Ok(())
    }

    /// Full per-cable mode vector of a phase.
    pub fn modes_for(&self, phase: usize) -> Vec<CableMode<f64>> {
        let mut modes = self.base.clone();
        for a in &self.phases[phase].assignments {
            modes[a.cable] = a.mode;
        }
        modes
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ControlError> {
        toml::from_str(text).map_err(|e| ControlError::File(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String, ControlError> {
        toml::to_string_pretty(self).map_err(|e| ControlError::File(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ControlError> {
        let text = std::fs::read_to_string(path).map_err(|e| ControlError::File(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

/// Identifier of the ground-contact face: sorted endcap node ids.
pub type Face = [usize; 3];

/// Scheduler state of a running gait.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaitRunner {
    pub phase: usize,
    pub phase_start: f64,
    face_at_start: Option<Face>,
    last_face: Option<Face>,
    started: bool,
    pub transitions: usize,
}

impl GaitRunner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluates the exit condition of the current phase at time `now` given
    /// the current ground face, advancing at most one phase per tick.
    /// A face change takes priority over the timeout.
    pub fn tick(&mut self, script: &GaitScript, face: Option<Face>, now: f64) -> (Vec<CableMode<f64>>, usize) {
        // while rolling no face is defined; keep the last one seen
        let face = face.or(self.last_face);
        self.last_face = face;
        if !self.started {
            self.started = true;
            self.phase = 0;
            self.phase_start = now;
            self.face_at_start = face;
        } else {
            let current = &script.phases[self.phase];
            let face_changed =
                current.advance_on_face_change && matches!((self.face_at_start, face), (Some(a), Some(b)) if a != b);
            let timed_out = now - self.phase_start >= current.duration - 1e-12;
            if face_changed || timed_out {
                let next = self.phase + 1;
                let next = if next < script.phases.len() {
                    Some(next)
                } else if script.cyclic {
                    Some(script.repeat_from.min(script.phases.len() - 1))
                } else {
                    None
                };
                if let Some(next) = next {
                    self.phase = next;
                    self.phase_start = now;
                    self.face_at_start = face;
                    self.transitions += 1;
                }
            }
        }
        (script.modes_for(self.phase), self.phase)
    }
}

/// One-shot form of [`GaitRunner::tick`].
pub fn gait_tick(
    script: &GaitScript,
    runner: &mut GaitRunner,
    face: Option<Face>,
    now: f64,
) -> (Vec<CableMode<f64>>, usize) {
    runner.tick(script, face, now)
}

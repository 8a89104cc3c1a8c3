//! QDD spool actuator: torque sensing from current, homing, proprioceptive
//! length, and the discrete-time plant.
//!
//! Sign conventions: `spool_turns` and `spool_velocity` are positive when the
//! spool pays cable out. Motor torque is positive when it reels cable in, so a
//! positive torque balances a positive cable tension.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cable::{length_from_turns, quantize_turns};
use crate::model::ActuatorSpec;
use crate::num::{clamp, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum ActuatorError {
    #[error("actuator has not been homed")]
    NotHomed,
    #[error("time step must be positive, got {0} s")]
    BadTimeStep(f64),
}

/// Output torque from armature current: `τ_m = (i_a / K_v) · n_r`.
pub fn torque_from_current<T: Scalar>(current: T, kv: T, gear_ratio: T) -> T {
    current / kv * gear_ratio
}

pub fn current_from_torque<T: Scalar>(torque: T, kv: T, gear_ratio: T) -> T {
    torque * kv / gear_ratio
}

/// Rolling record of `|τ|·dt` used to enforce the continuous-torque rating.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThermalWindow {
    samples: VecDeque<(f64, f64)>,
    span: f64,
    impulse: f64,
}

impl ThermalWindow {
    /// Largest torque magnitude allowed for the next `dt` so that no
    /// `window`-long interval averages above `continuous`.
    fn allowance(&mut self, window: f64, continuous: f64, dt: f64) -> f64 {
        let keep = (window - dt).max(0.0);
        while self.span > keep + 1e-12 {
            let Some((d, tau)) = self.samples.pop_front() else {
                break;
            };
            self.span -= d;
            self.impulse -= d * tau;
        }
        if self.samples.is_empty() {
            self.span = 0.0;
            self.impulse = 0.0;
        }
        ((continuous * window - self.impulse) / dt).max(0.0)
    }

    fn record(&mut self, dt: f64, torque: f64) {
        self.samples.push_back((dt, torque.abs()));
        self.span += dt;
        self.impulse += dt * torque.abs();
    }

    /// Mean `|τ|` over the retained history.
    pub fn mean_torque(&self) -> f64 {
        if self.span > 0.0 {
            self.impulse / self.span
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorState {
    /// Revolutions paid out since homing.
    pub spool_turns: f64,
    /// rev/s, positive when paying out.
    pub spool_velocity: f64,
    /// Command after the stall clamp, N·m.
    pub commanded_torque: f64,
    /// Torque delivered at the spool after all limits (friction excluded), N·m.
    pub applied_torque: f64,
    pub armature_current: f64,
    pub homed: bool,
    pub home_length: f64,
    #[serde(skip)]
    pub thermal: ThermalWindow,
}

impl Default for ActuatorState {
    fn default() -> Self {
        Self {
            spool_turns: 0.0,
            spool_velocity: 0.0,
            commanded_torque: 0.0,
            applied_torque: 0.0,
            armature_current: 0.0,
            homed: false,
            home_length: 0.0,
            thermal: ThermalWindow::default(),
        }
    }
}

impl ActuatorState {
    pub fn homed_at(length: f64) -> Self {
        Self::default().home(length)
    }

    /// Declares the current spool position to correspond to `known_length`.
    pub fn home(&self, known_length: f64) -> Self {
        Self {
            spool_turns: 0.0,
            home_length: known_length,
            homed: true,
            ..self.clone()
        }
    }

    /// True cable length off the spool (continuous, unquantized).
    pub fn paid_out(&self, spec: &ActuatorSpec) -> f64 {
        self.home_length + length_from_turns(self.spool_turns, spec.spool_radius)
    }

    /// Spool surface speed, m/s (positive paying out).
    pub fn paid_out_rate(&self, spec: &ActuatorSpec) -> f64 {
        length_from_turns(self.spool_velocity, spec.spool_radius)
    }

    /// Cable length as the encoder sees it. Blind to cable stretch.
    pub fn estimated_cable_length(&self, spec: &ActuatorSpec) -> Result<f64, ActuatorError> {
        if !self.homed {
            return Err(ActuatorError::NotHomed);
        }
        let counted = quantize_turns(self.spool_turns, spec.encoder_counts_per_rev);
        Ok(self.home_length + length_from_turns(counted, spec.spool_radius))
    }

    /// Advances the spool by `dt`.
    ///
    /// `torque_noise` is the deviation of the realised torque from the
    /// command (drawn by the caller so that this stays deterministic).
    pub fn step(
        &mut self,
        torque_command: f64,
        cable_tension: f64,
        dt: f64,
        spec: &ActuatorSpec,
        torque_noise: f64,
    ) -> Result<(), ActuatorError> {
        if !(dt > 0.0) {
            return Err(ActuatorError::BadTimeStep(dt));
        }
        if !self.homed {
            return Err(ActuatorError::NotHomed);
        }
        let stall = spec.stall_torque;
        self.commanded_torque = clamp(torque_command, -stall, stall);
        let limit = self
            .thermal
            .allowance(spec.thermal_window, spec.continuous_torque, dt)
            .min(stall);
        let applied = clamp(self.commanded_torque + torque_noise, -limit, limit);
        self.thermal.record(dt, applied);
        self.applied_torque = applied;
        self.armature_current = current_from_torque(applied, spec.kv, spec.gear_ratio);

        // rad/s, pay-out positive
        let omega = self.spool_velocity * std::f64::consts::TAU;
        let net = cable_tension.max(0.0) * spec.spool_radius - applied;
        let mut next = omega + net / spec.reflected_inertia * dt;
        let friction_dv = spec.coulomb_friction_torque / spec.reflected_inertia * dt;
        if next.abs() <= friction_dv {
            next = 0.0;
        } else {
            next -= friction_dv.copysign(next);
        }
        let mut turns = self.spool_turns + next / std::f64::consts::TAU * dt;

        // hard stops: empty spool and full spool
        let min_turns = crate::cable::turns_from_length(-self.home_length, spec.spool_radius);
        let max_turns = crate::cable::turns_from_length(spec.spool_capacity - self.home_length, spec.spool_radius);
        if turns < min_turns {
            turns = min_turns;
            next = next.max(0.0);
        } else if turns > max_turns {
            turns = max_turns;
            next = next.min(0.0);
        }
        self.spool_turns = turns;
        self.spool_velocity = next / std::f64::consts::TAU;
        Ok(())
    }
}

/// Value-returning form of [`ActuatorState::step`].
pub fn plant_step(
    state: &ActuatorState,
    torque_command: f64,
    cable_tension: f64,
    dt: f64,
    spec: &ActuatorSpec,
    torque_noise: f64,
) -> Result<ActuatorState, ActuatorError> {
    let mut next = state.clone();
    next.step(torque_command, cable_tension, dt, spec, torque_noise)?;
    Ok(next)
}

//! Single-cable tensile rig: one actuator on a fixed half-bar, its cable
//! clipped to a position-controlled crosshead that measures tension.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::actuator::ActuatorState;
use crate::control::{CableController, CableMode};
use crate::dynamics::{cable_damping_coefficient, cable_tension, CableForceRecord, SimError};
use crate::model::{ActuatorSpec, CableSpec, Vec3};

#[derive(Debug, Clone)]
pub struct TensileRig {
    pub cable: CableSpec,
    pub actuator: ActuatorSpec,
    pub state: ActuatorState,
    pub controller: CableController,
    /// Anchor-to-crosshead distance, m.
    pub crosshead: f64,
    pub crosshead_velocity: f64,
    pub damping_ratio: f64,
    pub dt: f64,
    pub time: f64,
    pub last: CableForceRecord,
    rng: ChaCha8Rng,
}

impl TensileRig {
    /// Rig with the spool homed at `start` m under no load.
    pub fn new(cable: CableSpec, actuator: ActuatorSpec, start: f64, seed: u64) -> Self {
        let last = cable_tension(0, Vec3::zeros(), Vec3::new(0.0, 0.0, start), start, &cable);
        Self {
            cable,
            actuator,
            state: ActuatorState::homed_at(start),
            controller: CableController::default(),
            crosshead: start,
            crosshead_velocity: 0.0,
            damping_ratio: 0.05,
            dt: 1e-3,
            time: 0.0,
            last,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn set_mode(&mut self, mode: CableMode<f64>) {
        self.controller.set_mode(mode);
    }

    /// Spool inertia seen at the cable, kg.
    pub fn spool_mass(&self) -> f64 {
        self.actuator.reflected_inertia / (self.actuator.spool_radius * self.actuator.spool_radius)
    }

    fn tension(&self) -> CableForceRecord {
        let p = self.state.paid_out(&self.actuator);
        let mut rec = cable_tension(0, Vec3::zeros(), Vec3::new(0.0, 0.0, self.crosshead), p, &self.cable);
        if rec.taut {
            let strain = rec.stretched_length / p - 1.0;
            let c = cable_damping_coefficient(&self.cable, p, strain, self.damping_ratio, self.spool_mass());
            let rate = self.crosshead_velocity - self.state.paid_out_rate(&self.actuator);
            rec.tension = (rec.tension + c * rate).max(0.0);
        }
        rec
    }

    /// One control tick and plant step with the crosshead moving at `velocity`.
    pub fn step(&mut self, velocity: f64) -> Result<CableForceRecord, SimError> {
        let torque = self.controller.tick(&self.state, &self.actuator, self.dt)?;
        let noise = if self.actuator.torque_noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            z * self.actuator.torque_noise_sigma
        } else {
            0.0
        };
        self.crosshead_velocity = velocity;
        let rec = self.tension();
        if !rec.tension.is_finite() {
            return Err(SimError::Diverged {
                time: self.time,
                detail: "rig cable tension non-finite".into(),
            });
        }
        self.state.step(torque, rec.tension, self.dt, &self.actuator, noise)?;
        self.crosshead += velocity * self.dt;
        self.time += self.dt;
        self.last = self.tension();
        Ok(self.last)
    }

    /// Moves the crosshead to `target` with a smooth velocity profile
    /// capped at `speed`, then holds it for `settle` seconds.
    pub fn move_to(&mut self, target: f64, speed: f64, settle: f64) -> Result<(), SimError> {
        let accel = 2.0;
        let dv = accel * self.dt;
        let mut v = 0.0f64;
        loop {
            let remaining = target - self.crosshead;
            if remaining.abs() <= 1e-12 {
                break;
            }
            let want = speed.min((2.0 * accel * remaining.abs()).sqrt()).copysign(remaining);
            v += (want - v).clamp(-dv, dv);
            if (v * self.dt).abs() >= remaining.abs() || v * remaining <= 0.0 {
                v = remaining / self.dt;
            }
            self.step(v)?;
        }
        self.crosshead = target;
        self.hold(settle)
    }

    pub fn hold(&mut self, seconds: f64) -> Result<(), SimError> {
        for _ in 0..(seconds / self.dt).round() as usize {
            self.step(0.0)?;
        }
        Ok(())
    }

    /// Cable length as the encoder reports it.
    pub fn estimated_length(&self) -> Result<f64, SimError> {
        Ok(self.state.estimated_cable_length(&self.actuator)?)
    }

    /// Physical cable length: stretched span when taut, paid-out length
    /// when slack.
    pub fn true_length(&self) -> f64 {
        if self.last.taut {
            self.last.stretched_length
        } else {
            self.last.unstretched_length
        }
    }
}

//! Planar equilibrium of a single bar and actuator sizing.
//!
//! A bar of weight `F_g` rests on one tip and is held at angle `θ` above the
//! ground by a horizontal cable at the other tip. The bar weight is treated as
//! a point load at mid-length.

use serde::Serialize;
use thiserror::Error;

use crate::model::RobotConfig;
use crate::num::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum StaticsError {
    #[error("bar angle must lie in (0, π/2], got {0} rad")]
    AngleOutOfRange(f64),
    #[error("robot has no actuated cable to size")]
    NoActuator,
}

fn check_angle<T: Scalar>(angle: T) -> Result<(), StaticsError> {
    if angle > T::zero() && angle <= T::frac_pi_2() + T::lit(1e-12) {
        Ok(())
    } else {
        Err(StaticsError::AngleOutOfRange(angle.to_f64_lossy()))
    }
}

/// Gravity torque about the resting tip: `F_g · (l_b / 2) · cos θ`.
pub fn bar_torque<T: Scalar>(weight: T, bar_length: T, angle: T) -> T {
    weight * bar_length / T::lit(2.0) * angle.cos()
}

/// Horizontal cable force balancing a given bar torque: `τ_b / (l_b sin θ)`.
pub fn cable_force_from_torque<T: Scalar>(torque: T, bar_length: T, angle: T) -> T {
    torque / bar_length / angle.sin()
}

/// Cable force holding the bar at `angle`: `(F_g / 2) · cot θ`.
pub fn equilibrium_cable_force<T: Scalar>(weight: T, angle: T) -> Result<T, StaticsError> {
    check_angle(angle)?;
    Ok(weight / T::lit(2.0) * angle.cos() / angle.sin())
}

/// Spool torque for a cable force: `τ_m = F_c · r_s`.
pub fn required_motor_torque<T: Scalar>(cable_force: T, spool_radius: T) -> T {
    cable_force * spool_radius
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizingReport {
    pub max_cable_force: f64,
    pub required_motor_torque: f64,
    pub continuous_torque: f64,
    pub satisfied: bool,
}

/// Checks the first actuator of `config` against the flattest bar angle,
/// using the design bar mass.
pub fn size_actuator(config: &RobotConfig, min_angle: f64) -> Result<SizingReport, StaticsError> {
    let actuator = config
        .cables
        .iter()
        .find_map(|c| c.actuator.as_ref())
        .ok_or(StaticsError::NoActuator)?;
    let weight = config.design_bar_mass * config.gravity;
    let max_cable_force = equilibrium_cable_force(weight, min_angle)?;
    let required = required_motor_torque(max_cable_force, actuator.spool_radius);
    Ok(SizingReport {
        max_cable_force,
        required_motor_torque: required,
        continuous_torque: actuator.continuous_torque,
        satisfied: required <= actuator.continuous_torque,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_robot;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const W: f64 = 49.05;

    #[test]
    fn bar_torque_examples() {
        assert!(bar_torque(W, 1.2, 90f64.to_radians()).abs() < 1e-12);
        assert_relative_eq!(bar_torque(W, 1.2, 0.0), 29.43, epsilon = 1e-12);
        // 49.05 * 0.6 * cos(8°), evaluated with mpmath at 30 digits.
        assert_relative_eq!(
            bar_torque(W, 1.2, 8f64.to_radians()),
            29.143589263064414,
            epsilon = 1e-12
        );
    }

    #[test]
    fn equilibrium_force_examples() {
        let f8 = equilibrium_cable_force(W, 8f64.to_radians()).unwrap();
        assert!((f8 - 174.0).abs() <= 1.0, "{f8}");
        assert_relative_eq!(
            equilibrium_cable_force(W, 45f64.to_radians()).unwrap(),
            24.525,
            epsilon = 1e-12
        );
        assert!(equilibrium_cable_force(W, 90f64.to_radians()).unwrap().abs() < 1e-12);
        assert!(equilibrium_cable_force(W, 0.0).is_err());
        assert!(equilibrium_cable_force(W, -0.1).is_err());
        assert!(equilibrium_cable_force(W, 1.7).is_err());
    }

    #[test]
    fn motor_torque_examples() {
        assert_relative_eq!(required_motor_torque(174.0, 0.015), 2.61, epsilon = 1e-12);
        assert_eq!(required_motor_torque(0.0, 0.015), 0.0);
        assert_relative_eq!(required_motor_torque(200.0, 0.015), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn sizing_examples() {
        let cfg = default_robot();
        let r = size_actuator(&cfg, 8f64.to_radians()).unwrap();
        assert!(r.satisfied);
        assert!((r.required_motor_torque - 2.61).abs() < 0.02);
        assert_relative_eq!(r.required_motor_torque, r.max_cable_force * 0.015, epsilon = 1e-12);

        let r = size_actuator(&cfg, 1f64.to_radians()).unwrap();
        assert!(!r.satisfied);
        assert!((r.max_cable_force - 1405.0).abs() < 1.0);
        assert!((r.required_motor_torque - 21.08).abs() < 0.01);

        assert!(size_actuator(&cfg, 45f64.to_radians()).unwrap().satisfied);
    }

    #[test]
    fn works_in_single_precision() {
        let f = equilibrium_cable_force(W as f32, 8f32.to_radians()).unwrap();
        assert!((f - 174.5).abs() < 0.1);
    }

    proptest! {
        #[test]
        fn composed_route_matches_closed_form(weight in 0.1f64..500.0, deg in 0.5f64..90.0, length in 0.1f64..3.0) {
            let angle = deg.to_radians();
            let via_torque = cable_force_from_torque(bar_torque(weight, length, angle), length, angle);
            let direct = equilibrium_cable_force(weight, angle).unwrap();
            let scale = direct.abs().max(1e-300);
            prop_assert!((via_torque - direct).abs() / scale < 1e-12 || (via_torque - direct).abs() < 1e-12);
        }

        #[test]
        fn equilibrium_force_decreases_with_angle(weight in 0.1f64..500.0, a in 0.01f64..1.5, da in 1e-4f64..0.05) {
            let b = (a + da).min(std::f64::consts::FRAC_PI_2);
            prop_assume!(b > a);
            prop_assert!(equilibrium_cable_force(weight, b).unwrap() < equilibrium_cable_force(weight, a).unwrap());
        }
    }
}

//! Software twin of a three-bar tensegrity robot driven by quasi-direct-drive
//! cable actuators.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actuator;
pub mod bus;
pub mod cable;
pub mod control;
pub mod dynamics;
pub mod estimation;
pub mod experiments;
pub mod model;
pub mod num;
pub mod serve;
pub mod statics;
pub mod trajectory;

pub use num::Scalar;

pub type CableElasticity = cable::CableElasticity<f64>;
pub type CableMode = control::CableMode<f64>;
/// Single-precision mode as carried on the wire.
pub type WireMode = control::CableMode<f32>;

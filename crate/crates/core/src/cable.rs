//! Cable elasticity, spool geometry and encoder quantization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::CableSpec;
use crate::num::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum CableError {
    #[error("cable force must be non-negative, got {0} N")]
    NegativeForce(f64),
    #[error("length must be non-negative, got {0} m")]
    NegativeLength(f64),
    #[error("unknown cable material `{0}`")]
    UnknownMaterial(String),
    #[error("material table: {0}")]
    Table(String),
}

/// Power-law force–strain curve through the origin, pinned at the
/// 30 %-of-breaking-load point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CableElasticity<T> {
    pub reference_force: T,
    pub reference_strain: T,
    pub exponent: T,
}

impl<T: Scalar> CableElasticity<T> {
    pub fn new(reference_force: T, reference_strain: T, exponent: T) -> Self {
        Self {
            reference_force,
            reference_strain,
            exponent,
        }
    }

    pub fn from_spec(spec: &CableSpec) -> Self {
        Self {
            reference_force: T::lit(0.3 * spec.mbl),
            reference_strain: T::lit(spec.elongation_at_30pct),
            exponent: T::lit(spec.strain_exponent),
        }
    }

    /// `ε_ref · (F / F_ref)^n`.
    pub fn strain(&self, force: T) -> Result<T, CableError> {
        if force < T::zero() {
            return Err(CableError::NegativeForce(force.to_f64_lossy()));
        }
        Ok(self.strain_unchecked(force))
    }

    fn strain_unchecked(&self, force: T) -> T {
        if force == T::zero() {
            return T::zero();
        }
        let ratio = force / self.reference_force;
        if self.exponent == T::one() {
            self.reference_strain * ratio
        } else {
            self.reference_strain * ratio.powf(self.exponent)
        }
    }

    /// Inverse of [`strain`](Self::strain): the tension producing `strain`.
    /// Zero for non-positive strain (a cable cannot push).
    pub fn force_at_strain(&self, strain: T) -> T {
        if strain <= T::zero() {
            return T::zero();
        }
        let ratio = strain / self.reference_strain;
        if self.exponent == T::one() {
            self.reference_force * ratio
        } else {
            self.reference_force * ratio.powf(T::one() / self.exponent)
        }
    }

    /// `dF/dε` at a given strain; the linearised axial stiffness `EA`.
    pub fn tangent_modulus(&self, strain: T) -> T {
        let s = strain.max(T::zero());
        if self.exponent == T::one() {
            return self.reference_force / self.reference_strain;
        }
        if s == T::zero() {
            // The sub-linear laws have zero slope at the origin and
            // super-linear ones diverge; use the secant through the reference.
            return self.reference_force / self.reference_strain;
        }
        self.force_at_strain(s) / (self.exponent * s)
    }

    /// `unstretched · (1 + ε(F))`.
    pub fn stretched_length(&self, unstretched: T, force: T) -> Result<T, CableError> {
        if unstretched < T::zero() {
            return Err(CableError::NegativeLength(unstretched.to_f64_lossy()));
        }
        Ok(unstretched * (T::one() + self.strain(force)?))
    }

    /// Elastic energy stored when `unstretched` is pulled to `stretched`.
    pub fn stored_energy(&self, unstretched: T, stretched: T) -> T {
        if stretched <= unstretched || unstretched <= T::zero() {
            return T::zero();
        }
        let s = stretched / unstretched - T::one();
        // ∫ F dx = L0 ∫ F(ε) dε, F = F_ref (ε/ε_ref)^(1/n)
        let p = T::one() / self.exponent;
        unstretched * self.reference_force * self.reference_strain * (s / self.reference_strain).powf(p + T::one())
            / (p + T::one())
    }
}

/// Cable paid out by `turns` spool revolutions: `2π · r_s · n`.
pub fn length_from_turns<T: Scalar>(turns: T, spool_radius: T) -> T {
    T::two_pi() * spool_radius * turns
}

/// Inverse of [`length_from_turns`].
pub fn turns_from_length<T: Scalar>(length: T, spool_radius: T) -> T {
    length / (T::two_pi() * spool_radius)
}

/// Turn count as reported by a relative encoder with `counts_per_rev`
/// resolution (floor to whole counts).
pub fn quantize_turns<T: Scalar>(turns: T, counts_per_rev: u32) -> T {
    let counts = T::lit(counts_per_rev as f64);
    (turns * counts).floor() / counts
}

/// Length resolution of one encoder count.
pub fn quantization_step(spool_radius: f64, counts_per_rev: u32) -> f64 {
    length_from_turns(1.0 / counts_per_rev as f64, spool_radius)
}

/// One row of the cable material table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    pub diameter_mm: f64,
    pub mbl_kn: f64,
    pub weight_g_per_m: f64,
    pub elongation_pct_at_30pct_mbl: f64,
    pub strain_exponent: f64,
}

impl Material {
    pub fn to_cable_spec(&self) -> CableSpec {
        CableSpec {
            material_name: self.name.clone(),
            diameter: self.diameter_mm * 1e-3,
            mbl: self.mbl_kn * 1e3,
            elongation_at_30pct: self.elongation_pct_at_30pct_mbl / 100.0,
            strain_exponent: self.strain_exponent,
            linear_density: self.weight_g_per_m * 1e-3,
        }
    }

    pub fn elasticity<T: Scalar>(&self) -> CableElasticity<T> {
        CableElasticity::from_spec(&self.to_cable_spec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialTable {
    pub materials: Vec<Material>,
}

const BUILTIN_TABLE: &str = include_str!("../data/materials.csv");

impl MaterialTable {
    /// The table shipped in `data/materials.csv`.
    pub fn builtin() -> Self {
        Self::from_csv(BUILTIN_TABLE.as_bytes()).expect("builtin material table parses")
    }

    pub fn from_csv(reader: impl std::io::Read) -> Result<Self, CableError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let materials = rdr
            .deserialize()
            .collect::<Result<Vec<Material>, _>>()
            .map_err(|e| CableError::Table(e.to_string()))?;
        Ok(Self { materials })
    }

    pub fn get(&self, name: &str) -> Result<&Material, CableError> {
        self.materials
            .iter()
            .find(|m| m.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| CableError::UnknownMaterial(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dyneema() -> CableElasticity<f64> {
        CableElasticity::new(1350.0, 0.007, 1.0)
    }

    fn nylon_linear() -> CableElasticity<f64> {
        CableElasticity::new(1020.0, 0.14, 1.0)
    }

    #[test]
    fn strain_examples() {
        assert_eq!(dyneema().strain(1350.0).unwrap(), 0.007);
        assert_eq!(dyneema().strain(0.0).unwrap(), 0.0);
        assert_eq!(CableElasticity::new(1020.0, 0.14, 0.55).strain(0.0).unwrap(), 0.0);
        assert_relative_eq!(dyneema().strain(200.0).unwrap(), 1.037037037037037e-3, epsilon = 1e-15);
        assert!(matches!(dyneema().strain(-1.0), Err(CableError::NegativeForce(_))));
    }

    #[test]
    fn stretched_length_examples() {
        assert_relative_eq!(
            dyneema().stretched_length(0.65, 200.0).unwrap(),
            0.650674074074074,
            epsilon = 1e-14
        );
        assert_eq!(dyneema().stretched_length(0.0, 150.0).unwrap(), 0.0);
        assert_relative_eq!(
            nylon_linear().stretched_length(0.65, 200.0).unwrap(),
            0.667843137254902,
            epsilon = 1e-14
        );
        assert!(dyneema().stretched_length(-0.1, 1.0).is_err());
    }

    #[test]
    fn reference_point_is_exact_for_every_exponent() {
        for n in [0.45, 0.55, 1.0, 2.0] {
            let e = CableElasticity::new(1020.0, 0.14, n);
            assert_relative_eq!(e.strain(1020.0).unwrap(), 0.14, epsilon = 1e-15);
        }
    }

    #[test]
    fn spool_length_examples() {
        assert_relative_eq!(length_from_turns(1.0, 0.015), 0.0942477796076938, epsilon = 1e-15);
        assert_eq!(length_from_turns(0.0, 0.015), 0.0);
        assert_relative_eq!(length_from_turns(12.732395447351627, 0.015), 1.2, epsilon = 1e-12);
        assert_relative_eq!(turns_from_length(1.2, 0.015), 12.732395447351627, epsilon = 1e-12);
    }

    #[test]
    fn quantization_examples() {
        assert_eq!(quantize_turns(0.5, 16384), 0.5);
        let turns = 3.7 / 16384.0;
        assert_eq!(quantize_turns(turns, 16384) * 16384.0, 3.0);
        assert_relative_eq!(quantization_step(0.015, 16384), 5.752427954571155e-6, epsilon = 1e-18);
        assert_eq!(quantize_turns(0.25f32, 16384), 0.25f32);
    }

    #[test]
    fn builtin_table_mirrors_published_rows() {
        let t = MaterialTable::builtin();
        assert_eq!(t.materials.len(), 4);
        let d = t.get("dyneema").unwrap().to_cable_spec();
        assert_relative_eq!(d.mbl, 4500.0);
        assert_relative_eq!(d.elongation_at_30pct, 0.007);
        assert_relative_eq!(d.linear_density, 3.72e-3);
        let n = t.get("Nylon").unwrap();
        assert_eq!(n.strain_exponent, 0.55);
        let e: CableElasticity<f64> = n.elasticity();
        assert_relative_eq!(e.reference_force, 1020.0, epsilon = 1e-9);
        assert!(t.get("hemp").is_err());
    }

    #[test]
    fn energy_matches_force_integral() {
        for n in [0.55, 1.0] {
            let e = CableElasticity::new(1020.0, 0.14, n);
            let (l0, l1) = (0.6, 0.63);
            let steps = 20000;
            let h = (l1 - l0) / steps as f64;
            let mut acc = 0.0;
            for i in 0..steps {
                let x = l0 + (i as f64 + 0.5) * h;
                acc += e.force_at_strain(x / l0 - 1.0) * h;
            }
            assert_relative_eq!(e.stored_energy(l0, l1), acc, max_relative = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn turns_to_length_is_linear(a in 0.0f64..20.0, b in 0.0f64..20.0) {
            let lhs = length_from_turns(a + b, 0.015);
            let rhs = length_from_turns(a, 0.015) + length_from_turns(b, 0.015);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn strain_strictly_increasing(f in 0.0f64..4000.0, df in 1e-3f64..100.0, n in 0.3f64..3.0) {
            let e = CableElasticity::new(1020.0, 0.14, n);
            prop_assert!(e.strain(f + df).unwrap() > e.strain(f).unwrap());
        }

        #[test]
        fn stretch_never_shortens(l in 0.01f64..1.2, f in 0.0f64..2000.0) {
            let e = dyneema();
            let s = e.stretched_length(l, f).unwrap();
            if f == 0.0 { prop_assert_eq!(s, l); } else { prop_assert!(s > l); }
        }

        #[test]
        fn force_inverts_strain(f in 0.1f64..3000.0, n in 0.4f64..2.5) {
            let e = CableElasticity::new(1350.0, 0.007, n);
            let back = e.force_at_strain(e.strain(f).unwrap());
            prop_assert!((back - f).abs() / f < 1e-10);
        }

        #[test]
        fn quantization_error_below_one_count(t in 0.0f64..12.0) {
            let q = quantize_turns(t, 16384);
            prop_assert!(q <= t && t - q < 1.0 / 16384.0 + 1e-15);
        }
    }
}

//! End-to-end experiment runners producing tabular, re-runnable results.

mod rig;
mod robot;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cable::{CableError, MaterialTable};
use crate::control::{CableMode, ControlError};
use crate::dynamics::SimError;
use crate::model::{ActuatorSpec, ModelError};

pub use rig::TensileRig;
pub use robot::*;

/// Bar length used to express length errors as a percentage.
pub const REFERENCE_BAR_LENGTH: f64 = 1.22;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cable(#[from] CableError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("stiffness bracket [{low}, {high}] N/m does not contain the self-support threshold")]
    Bracket { low: f64, high: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("output: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Rows of named SI columns plus summary metrics and the parameters needed
/// to re-run the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub summary: BTreeMap<String, f64>,
}

impl ExperimentResult {
    fn new(experiment: &str, seed: u64, config: serde_json::Value, columns: &[&str]) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            config,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Summary metrics derived from `rows` alone.
    pub fn recompute_summary(&self) -> BTreeMap<String, f64> {
        match self.experiment.as_str() {
            "length" => length_summary(self),
            "stiffness" => stiffness_summary(self),
            "locomotion" => robot::locomotion_summary(self),
            "payload" => robot::payload_summary(self),
            "min-stiffness" => robot::min_stiffness_summary(self),
            _ => BTreeMap::new(),
        }
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)
            .map_err(|e| ExperimentError::Format(e.to_string()))?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format!("{v:?}")))
                .map_err(|e| ExperimentError::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ExperimentError> {
        serde_json::to_string_pretty(self).map_err(|e| ExperimentError::Format(e.to_string()))
    }

    /// Writes `<experiment>.csv` plus `<experiment>.summary.json`, or a
    /// single `<experiment>.json`. Returns the paths written.
    pub fn write_to(&self, dir: impl AsRef<Path>, format: OutputFormat) -> Result<Vec<PathBuf>, ExperimentError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        match format {
            OutputFormat::Csv => {
                let rows = dir.join(format!("{}.csv", self.experiment));
                self.write_csv(std::fs::File::create(&rows)?)?;
                let meta = dir.join(format!("{}.summary.json", self.experiment));
                let header = serde_json::json!({
                    "experiment": self.experiment,
                    "seed": self.seed,
                    "config": self.config,
                    "summary": self.summary,
                });
                std::fs::write(
                    &meta,
                    serde_json::to_string_pretty(&header).map_err(|e| ExperimentError::Format(e.to_string()))?,
                )?;
                Ok(vec![rows, meta])
            }
            OutputFormat::Json => {
                let path = dir.join(format!("{}.json", self.experiment));
                std::fs::write(&path, self.to_json()?)?;
                Ok(vec![path])
            }
        }
    }
}

/// Root mean square of a residual sequence.
pub fn rmse(errors: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = errors.into_iter().fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

fn snapshot<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("experiment parameters serialize")
}

/// Static length-estimation sweep on the tensile rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthExperiment {
    pub material: String,
    pub heights: Vec<f64>,
    pub loads: Vec<f64>,
    pub actuator: ActuatorSpec,
    /// Crosshead travel speed between heights, m/s.
    pub speed: f64,
    /// Hold time before each reading, s.
    pub settle: f64,
}

impl LengthExperiment {
    pub fn new(material: &str) -> Self {
        Self {
            material: material.to_string(),
            heights: (1..=13).map(|i| 0.05 * i as f64).collect(),
            loads: vec![50.0, 100.0, 150.0, 200.0],
            actuator: ActuatorSpec::default(),
            speed: 0.2,
            settle: 0.5,
        }
    }
}

pub const LENGTH_COLUMNS: [&str; 6] = [
    "load_n",
    "height_m",
    "true_length_m",
    "estimated_length_m",
    "error_m",
    "error_pct_bar",
];

/// Homes the spool once at the lowest height under no load, then for each
/// load holds the cable in constant-force mode and steps the crosshead
/// through the heights, reading the encoder estimate against the physical
/// cable length.
pub fn run_length_experiment(params: &LengthExperiment, seed: u64) -> Result<ExperimentResult, ExperimentError> {
    let cable = MaterialTable::builtin().get(&params.material)?.to_cable_spec();
    let start = params
        .heights
        .first()
        .copied()
        .ok_or_else(|| ExperimentError::Invalid("no heights".into()))?;
    let mut rig = TensileRig::new(cable, params.actuator.clone(), start, seed);
    let mut result = ExperimentResult::new("length", seed, snapshot(params), &LENGTH_COLUMNS);
    for &load in &params.loads {
        let mode = CableMode::ConstantForce { force: load };
        mode.validate()?;
        rig.set_mode(mode);
        for &h in &params.heights {
            rig.move_to(h, params.speed, params.settle)?;
            let truth = rig.true_length();
            let est = rig.estimated_length()?;
            let err = truth - est;
            result
                .rows
                .push(vec![load, h, truth, est, err, err.abs() / REFERENCE_BAR_LENGTH * 100.0]);
        }
        rig.move_to(start, params.speed, params.settle)?;
    }
    result.summary = length_summary(&result);
    Ok(result)
}

fn length_summary(r: &ExperimentResult) -> BTreeMap<String, f64> {
    let mut s = BTreeMap::new();
    let pct = r.column("error_pct_bar").unwrap_or_default();
    let abs: Vec<f64> = r
        .column("error_m")
        .unwrap_or_default()
        .iter()
        .map(|e| e.abs())
        .collect();
    s.insert("max_error_pct_bar".into(), pct.iter().copied().fold(0.0, f64::max));
    s.insert("max_error_m".into(), abs.iter().copied().fold(0.0, f64::max));
    if !pct.is_empty() {
        s.insert("mean_error_pct_bar".into(), pct.iter().sum::<f64>() / pct.len() as f64);
    }
    s
}

/// Commanded force–length curve for the stiffness test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StiffnessCurve {
    Linear { ks: f64 },
    Power { k1: f64, k2: f64, k3: f64 },
}

impl StiffnessCurve {
    /// Power curve with exponent `k2` through `force_at` N at `length` m,
    /// offset by `k3`.
    pub fn power_through(k2: f64, length: f64, force_at: f64, k3: f64) -> Self {
        Self::Power {
            k1: (force_at - k3) / length.powf(k2),
            k2,
            k3,
        }
    }

    pub fn mode(&self) -> CableMode<f64> {
        match *self {
            Self::Linear { ks } => CableMode::SpringLinear { ks },
            Self::Power { k1, k2, k3 } => CableMode::SpringPower { k1, k2, k3 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StiffnessExperiment {
    pub curves: Vec<StiffnessCurve>,
    pub material: String,
    pub actuator: ActuatorSpec,
    pub pull_rate: f64,
    pub start: f64,
    pub end: f64,
    /// Span over which tracking error is scored.
    pub window: (f64, f64),
    pub settle: f64,
    /// Duration of the speed-up to `pull_rate`, s.
    pub ramp_time: f64,
    /// Rows kept every this many control ticks.
    pub decimation: usize,
}

impl Default for StiffnessExperiment {
    fn default() -> Self {
        let mut curves: Vec<StiffnessCurve> = [75.0, 140.0, 210.0, 280.0]
            .into_iter()
            .map(|ks| StiffnessCurve::Linear { ks })
            .collect();
        curves.extend(
            [8.0, 5.5, 0.55, 0.45]
                .into_iter()
                .map(|k2| StiffnessCurve::power_through(k2, 0.6, 150.0, 5.0)),
        );
        Self {
            curves,
            material: "Dyneema".into(),
            actuator: ActuatorSpec::default(),
            pull_rate: 0.2,
            start: 0.05,
            end: 0.62,
            window: (0.1, 0.6),
            settle: 0.5,
            ramp_time: 0.25,
            decimation: 5,
        }
    }
}

impl StiffnessExperiment {
    pub fn ideal() -> Self {
        Self {
            actuator: ActuatorSpec::default().ideal(),
            ..Self::default()
        }
    }
}

pub const STIFFNESS_COLUMNS: [&str; 5] = ["curve", "time_s", "length_m", "commanded_n", "realized_n"];

/// Pulls the cable out at a constant rate with the actuator in spring mode
/// and scores realised crosshead tension against the commanded curve.
pub fn run_stiffness_experiment(params: &StiffnessExperiment, seed: u64) -> Result<ExperimentResult, ExperimentError> {
    let cable = MaterialTable::builtin().get(&params.material)?.to_cable_spec();
    let mut result = ExperimentResult::new("stiffness", seed, snapshot(params), &STIFFNESS_COLUMNS);
    for (i, curve) in params.curves.iter().enumerate() {
        let mode = curve.mode();
        mode.validate()?;
        let curve_seed = seed.wrapping_add(i as u64);
        let mut rig = TensileRig::new(cable.clone(), params.actuator.clone(), params.start, curve_seed);
        rig.set_mode(mode);
        rig.hold(params.settle)?;
        let mut tick = 0usize;
        let t0 = rig.time;
        while rig.crosshead < params.end {
            // raised-cosine speed-up, gentle on the spool–cable resonance
            let t = rig.time - t0;
            let v = if t < params.ramp_time {
                params.pull_rate * 0.5 * (1.0 - (std::f64::consts::PI * t / params.ramp_time).cos())
            } else {
                params.pull_rate
            };
            let rec = rig.step(v)?;
            tick += 1;
            let l = rig.crosshead;
            if tick.is_multiple_of(params.decimation.max(1)) && l >= params.window.0 && l <= params.window.1 {
                let commanded = crate::control::spring_force(l, &mode)?;
                result
                    .rows
                    .push(vec![i as f64, rig.time - t0, l, commanded, rec.tension]);
            }
        }
    }
    result.summary = stiffness_summary(&result);
    Ok(result)
}

fn stiffness_summary(r: &ExperimentResult) -> BTreeMap<String, f64> {
    let mut per_curve: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for row in &r.rows {
        per_curve.entry(row[0] as usize).or_default().push(row[4] - row[3]);
    }
    let mut s = BTreeMap::new();
    let mut worst = 0.0f64;
    for (curve, errs) in per_curve {
        let e = rmse(errs);
        worst = worst.max(e);
        s.insert(format!("rmse_curve_{curve}"), e);
    }
    s.insert("max_rmse".into(), worst);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_of_constant_offset() {
        assert_eq!(rmse(vec![3.0; 100]), 3.0);
        assert_eq!(rmse(Vec::<f64>::new()), 0.0);
        let offset: Vec<f64> = (0..50).map(|_| -3.0).collect();
        assert_eq!(rmse(offset), 3.0);
    }

    #[test]
    fn zero_load_error_within_one_count() {
        let mut p = LengthExperiment::new("Nylon");
        p.loads = vec![0.0];
        p.actuator = ActuatorSpec::default().ideal();
        let r = run_length_experiment(&p, 1).unwrap();
        let step = crate::cable::quantization_step(0.015, 16384);
        for row in &r.rows {
            assert!(row[4].abs() <= step, "{row:?}");
        }
    }

    #[test]
    fn rig_constant_force_holds_load() {
        let cable = MaterialTable::builtin().get("Dyneema").unwrap().to_cable_spec();
        let mut rig = TensileRig::new(cable, ActuatorSpec::default().ideal(), 0.05, 0);
        rig.set_mode(CableMode::ConstantForce { force: 100.0 });
        rig.move_to(0.4, 0.2, 1.0).unwrap();
        assert!((rig.crosshead - 0.4).abs() < 1e-12);
        assert!((rig.last.tension - 100.0).abs() < 1.0, "{}", rig.last.tension);
    }

    #[test]
    fn summary_recomputes_from_rows() {
        let mut p = LengthExperiment::new("Dyneema");
        p.heights = vec![0.05, 0.3];
        p.loads = vec![100.0];
        let r = run_length_experiment(&p, 3).unwrap();
        assert_eq!(r.recompute_summary(), r.summary);
    }
}

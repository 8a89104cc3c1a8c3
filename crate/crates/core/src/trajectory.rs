//! Decimated trajectory log with CSV and compact binary output.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! header (32 bytes)
//!   0..4    magic  b"TGTJ"
//!   4..6    format version, u16 (1)
//!   6..8    rods, u16
//!   8..10   cables, u16
//!   10..12  reserved, zero
//!   12..16  record length in bytes, u32
//!   16..20  decimation, u32
//!   20..28  physics time step, f64 (s)
//!   28..32  reserved, zero
//! records, each `8 · (1 + 7·rods + 3·cables)` bytes of f64:
//!   time;
//!   per rod: x, y, z, qw, qx, qy, qz;
//!   per cable: tension (N), estimated length (m, NaN if unavailable), true length (m)
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use crate::dynamics::Simulation;
use crate::estimation::true_lengths;

pub const MAGIC: [u8; 4] = *b"TGTJ";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("not a trajectory log: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub time: f64,
    /// Position then `[w, x, y, z]` orientation per rod.
    pub rods: Vec<[f64; 7]>,
    pub tensions: Vec<f64>,
    pub estimated_lengths: Vec<f64>,
    pub true_lengths: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub rods: usize,
    pub cables: usize,
    /// Keep one sample in every `decimation` offered.
    pub decimation: usize,
    pub dt: f64,
    pub records: Vec<TrajectoryRecord>,
    offered: usize,
}

impl TrajectoryLog {
    pub fn new(rods: usize, cables: usize, decimation: usize, dt: f64) -> Self {
        Self {
            rods,
            cables,
            decimation: decimation.max(1),
            dt,
            records: Vec::new(),
            offered: 0,
        }
    }

    pub fn for_simulation(sim: &Simulation, decimation: usize) -> Self {
        Self::new(sim.config.rods.len(), sim.config.cables.len(), decimation, sim.dt)
    }

    /// Offers the current state; every `decimation`-th offer is kept,
    /// starting with the first.
    pub fn offer(&mut self, sim: &Simulation) {
        if self.offered.is_multiple_of(self.decimation) {
            self.records.push(Self::sample(sim));
        }
        self.offered += 1;
    }

    pub fn sample(sim: &Simulation) -> TrajectoryRecord {
        let estimated = sim.estimated_lengths().unwrap_or_else(|_| {
            // per cable, so one unhomed actuator does not hide the rest
            sim.config
                .cables
                .iter()
                .zip(&sim.state.actuators)
                .map(|(link, a)| match &link.actuator {
                    Some(spec) => a.estimated_cable_length(spec).unwrap_or(f64::NAN),
                    None => link.rest_length,
                })
                .collect()
        });
        TrajectoryRecord {
            time: sim.time(),
            rods: sim
                .state
                .rods
                .iter()
                .map(|r| {
                    let q = r.orientation.quaternion();
                    [r.position.x, r.position.y, r.position.z, q.w, q.i, q.j, q.k]
                })
                .collect(),
            tensions: sim.records.iter().map(|c| c.tension).collect(),
            estimated_lengths: estimated,
            true_lengths: true_lengths(&sim.config, &sim.state),
        }
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols = vec!["time_s".to_string()];
        for i in 0..self.rods {
            for f in ["x_m", "y_m", "z_m", "qw", "qx", "qy", "qz"] {
                cols.push(format!("rod{i}_{f}"));
            }
        }
        for c in 0..self.cables {
            cols.push(format!("cable{c}_tension_n"));
            cols.push(format!("cable{c}_estimated_length_m"));
            cols.push(format!("cable{c}_true_length_m"));
        }
        cols
    }

    fn flatten(&self, r: &TrajectoryRecord) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.record_values());
        v.push(r.time);
        for p in &r.rods {
            v.extend_from_slice(p);
        }
        for c in 0..self.cables {
            v.push(r.tensions[c]);
            v.push(r.estimated_lengths[c]);
            v.push(r.true_lengths[c]);
        }
        v
    }

    fn record_values(&self) -> usize {
        1 + 7 * self.rods + 3 * self.cables
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), TrajectoryError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.columns())?;
        for r in &self.records {
            w.write_record(self.flatten(r).iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_binary(&self, mut out: impl Write) -> Result<(), TrajectoryError> {
        let narrow =
            |n: usize, what: &str| u16::try_from(n).map_err(|_| TrajectoryError::Format(format!("too many {what}")));
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4..6].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        h[6..8].copy_from_slice(&narrow(self.rods, "rods")?.to_le_bytes());
        h[8..10].copy_from_slice(&narrow(self.cables, "cables")?.to_le_bytes());
        h[12..16].copy_from_slice(&((8 * self.record_values()) as u32).to_le_bytes());
        h[16..20].copy_from_slice(&(self.decimation as u32).to_le_bytes());
        h[20..28].copy_from_slice(&self.dt.to_le_bytes());
        out.write_all(&h)?;
        for r in &self.records {
            for v in self.flatten(r) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_binary(mut input: impl Read) -> Result<Self, TrajectoryError> {
        let mut h = [0u8; HEADER_LEN];
        input.read_exact(&mut h)?;
        if h[0..4] != MAGIC {
            return Err(TrajectoryError::Format("bad magic".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([h[i], h[i + 1]]) as usize;
        if u16_at(4) != FORMAT_VERSION as usize {
            return Err(TrajectoryError::Format(format!("version {}", u16_at(4))));
        }
        let mut log = Self::new(
            u16_at(6),
            u16_at(8),
            u32::from_le_bytes(h[16..20].try_into().expect("4 bytes")) as usize,
            f64::from_le_bytes(h[20..28].try_into().expect("8 bytes")),
        );
        let record_len = u32::from_le_bytes(h[12..16].try_into().expect("4 bytes")) as usize;
        if record_len != 8 * log.record_values() {
            return Err(TrajectoryError::Format(format!("record length {record_len}")));
        }
        let mut body = Vec::new();
        input.read_to_end(&mut body)?;
        if body.len() % record_len != 0 {
            return Err(TrajectoryError::Format("truncated record".into()));
        }
        for chunk in body.chunks_exact(record_len) {
            let v: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let rods = (0..log.rods)
                .map(|i| v[1 + 7 * i..8 + 7 * i].try_into().expect("7 values"))
                .collect();
            let base = 1 + 7 * log.rods;
            let cable = |k: usize| (0..log.cables).map(|c| v[base + 3 * c + k]).collect();
            log.records.push(TrajectoryRecord {
                time: v[0],
                rods,
                tensions: cable(0),
                estimated_lengths: cable(1),
                true_lengths: cable(2),
            });
        }
        log.offered = log.records.len() * log.decimation;
        Ok(log)
    }
}

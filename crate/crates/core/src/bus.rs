//! Wire protocol between host, robot controller and actuators, a simulated
//! lossy daisy-chain transport, and the 20 Hz controller loop.
//!
//! Frames are 32 bytes, little-endian:
//!
//! | bytes  | command                     | status                         |
//! |--------|-----------------------------|--------------------------------|
//! | 0..2   | magic `0x54 0x47`           | same                           |
//! | 2      | version (1)                 | same                           |
//! | 3      | type 0                      | type 1                         |
//! | 4..12  | timestamp, µs (u64)         | same                           |
//! | 12     | actuator id                 | same                           |
//! | 13     | mode code                   | active mode code               |
//! | 14..30 | four f32 mode parameters    | length m, force N, current A (f32), fault flags (u8), zero padding |
//! | 30..32 | CRC-16/CCITT-FALSE of 0..30 | same                           |

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::ActuatorState;
use crate::control::{mode_to_torque, CableMode, Face, GaitRunner, GaitScript};
use crate::model::ActuatorSpec;

pub const FRAME_LEN: usize = 32;
pub const MAGIC: [u8; 2] = [0x54, 0x47];
pub const VERSION: u8 = 1;
pub const MSG_COMMAND: u8 = 0;
pub const MSG_STATUS: u8 = 1;

pub type Frame = [u8; FRAME_LEN];

/// Fault flag bits of a status report.
pub mod fault {
    /// At least one undecodable frame arrived during the tick.
    pub const DECODE_ERROR: u8 = 0x01;
    /// A command older than the staleness window was dropped.
    pub const STALE_COMMAND: u8 = 0x02;
    /// The actuator cannot report a length.
    pub const NOT_HOMED: u8 = 0x04;
    /// The demanded torque exceeded the stall limit.
    pub const TORQUE_SATURATED: u8 = 0x08;
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum CodecError {
    #[error("frame is {0} bytes, expected 32")]
    BadLength(usize),
    #[error("CRC mismatch: computed {computed:#06x}, frame carries {carried:#06x}")]
    BadCrc { computed: u16, carried: u16 },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unexpected message type {0}")]
    BadType(u8),
    #[error("unknown mode code {0}")]
    BadMode(u8),
    #[error("mode parameters rejected")]
    BadParams,
}

/// CRC-16/CCITT-FALSE: polynomial 0x1021, initial value 0xFFFF, no
/// reflection, no final xor.
pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in data {
        crc ^= (byte as u16) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
        }
    }
    crc
}

/// Host-to-actuator command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub timestamp_us: u64,
    pub actuator_id: u8,
    pub mode: CableMode<f32>,
}

/// Actuator-to-host status.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub timestamp_us: u64,
    pub actuator_id: u8,
    pub mode: u8,
    pub length: f32,
    pub force: f32,
    pub current: f32,
    pub faults: u8,
}

fn header(frame: &mut Frame, msg_type: u8, timestamp_us: u64, actuator_id: u8, mode: u8) {
    frame[0..2].copy_from_slice(&MAGIC);
    frame[2] = VERSION;
    frame[3] = msg_type;
    frame[4..12].copy_from_slice(&timestamp_us.to_le_bytes());
    frame[12] = actuator_id;
    frame[13] = mode;
}

fn seal(frame: &mut Frame) {
    let crc = crc16_ccitt_false(&frame[..30]);
    frame[30..32].copy_from_slice(&crc.to_le_bytes());
}

fn f32_at(frame: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(frame[at..at + 4].try_into().expect("4-byte slice"))
}

/// Length, CRC, magic, version and type checks shared by both messages.
fn open(bytes: &[u8], msg_type: u8) -> Result<Frame, CodecError> {
    let frame: Frame = bytes.try_into().map_err(|_| CodecError::BadLength(bytes.len()))?;
    let computed = crc16_ccitt_false(&frame[..30]);
    let carried = u16::from_le_bytes([frame[30], frame[31]]);
    if computed != carried {
        return Err(CodecError::BadCrc { computed, carried });
    }
    if frame[0..2] != MAGIC {
        return Err(CodecError::BadMagic([frame[0], frame[1]]));
    }
    if frame[2] != VERSION {
        return Err(CodecError::BadVersion(frame[2]));
    }
    if frame[3] != msg_type {
        return Err(CodecError::BadType(frame[3]));
    }
    Ok(frame)
}

pub fn encode_command(cmd: &ControlCommand) -> Result<Frame, CodecError> {
    cmd.mode.validate().map_err(|_| CodecError::BadParams)?;
    let mut f = [0u8; FRAME_LEN];
    header(&mut f, MSG_COMMAND, cmd.timestamp_us, cmd.actuator_id, cmd.mode.code());
    for (k, p) in cmd.mode.params().iter().enumerate() {
        f[14 + 4 * k..18 + 4 * k].copy_from_slice(&p.to_le_bytes());
    }
    seal(&mut f);
    Ok(f)
}

pub fn decode_command(bytes: &[u8]) -> Result<ControlCommand, CodecError> {
    let f = open(bytes, MSG_COMMAND)?;
    let params = [f32_at(&f, 14), f32_at(&f, 18), f32_at(&f, 22), f32_at(&f, 26)];
    let mode = CableMode::from_code(f[13], params).ok_or(CodecError::BadMode(f[13]))?;
    // slots the mode does not use must be zero so that the encoding is unique
    if mode.params().map(f32::to_bits) != params.map(f32::to_bits) || mode.validate().is_err() {
        return Err(CodecError::BadParams);
    }
    Ok(ControlCommand {
        timestamp_us: u64::from_le_bytes(f[4..12].try_into().expect("8-byte slice")),
        actuator_id: f[12],
        mode,
    })
}

pub fn encode_status(s: &StatusReport) -> Frame {
    let mut f = [0u8; FRAME_LEN];
    header(&mut f, MSG_STATUS, s.timestamp_us, s.actuator_id, s.mode);
    f[14..18].copy_from_slice(&s.length.to_le_bytes());
    f[18..22].copy_from_slice(&s.force.to_le_bytes());
    f[22..26].copy_from_slice(&s.current.to_le_bytes());
    f[26] = s.faults;
    seal(&mut f);
    f
}

pub fn decode_status(bytes: &[u8]) -> Result<StatusReport, CodecError> {
    let f = open(bytes, MSG_STATUS)?;
    if f[13] > CableMode::<f32>::CONSTANT_FORCE {
        return Err(CodecError::BadMode(f[13]));
    }
    if f[27..30] != [0, 0, 0] {
        return Err(CodecError::BadParams);
    }
    Ok(StatusReport {
        timestamp_us: u64::from_le_bytes(f[4..12].try_into().expect("8-byte slice")),
        actuator_id: f[12],
        mode: f[13],
        length: f32_at(&f, 14),
        force: f32_at(&f, 18),
        current: f32_at(&f, 22),
        faults: f[26],
    })
}

pub fn seconds_to_us(t: f64) -> u64 {
    (t * 1e6).round().max(0.0) as u64
}

/// Delay and loss of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    /// s
    pub latency: f64,
    /// Extra uniform delay in `[0, jitter)`, s.
    pub jitter: f64,
    pub drop_probability: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            latency: 0.0,
            jitter: 0.0,
            drop_probability: 0.0,
        }
    }
}

/// One-way link delivering frames in send order. Times are integer
/// microseconds so that delivery instants are exact.
#[derive(Debug, Clone)]
pub struct Link {
    pub config: LinkConfig,
    rng: ChaCha8Rng,
    queue: VecDeque<(u64, Frame)>,
    last_delivery: u64,
    pub sent: usize,
    pub dropped: usize,
}

impl Link {
    pub fn new(config: LinkConfig, seed: u64) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: VecDeque::new(),
            last_delivery: 0,
            sent: 0,
            dropped: 0,
        }
    }

    pub fn send(&mut self, now_us: u64, frame: Frame) {
        self.sent += 1;
        if self.config.drop_probability > 0.0 && self.rng.random::<f64>() < self.config.drop_probability {
            self.dropped += 1;
            return;
        }
        let jitter = if self.config.jitter > 0.0 {
            self.rng.random::<f64>() * self.config.jitter
        } else {
            0.0
        };
        // a later frame never overtakes an earlier one
        let at = (now_us + seconds_to_us(self.config.latency + jitter)).max(self.last_delivery);
        self.last_delivery = at;
        self.queue.push_back((at, frame));
    }

    /// Frames due at or before `now_us`, oldest first.
    pub fn recv(&mut self, now_us: u64) -> Vec<Frame> {
        let mut out = Vec::new();
        while let Some(&(at, f)) = self.queue.front() {
            if at > now_us {
                break;
            }
            out.push(f);
            self.queue.pop_front();
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

/// Actuators chained one after another behind the host. Actuator `i` sits
/// `i + 1` hops away; each hop adds `hop_latency`.
#[derive(Debug, Clone)]
pub struct DaisyChain {
    pub downstream: Vec<Link>,
    pub upstream: Vec<Link>,
}

pub const DEFAULT_HOP_LATENCY: f64 = 1e-4;

impl DaisyChain {
    pub fn new(actuators: usize, hop_latency: f64, base: LinkConfig, seed: u64) -> Self {
        let link = |i: usize, salt: u64| {
            let cfg = LinkConfig {
                latency: base.latency + hop_latency * (i + 1) as f64,
                ..base
            };
            Link::new(cfg, seed.wrapping_mul(0x9E37_79B9).wrapping_add(2 * i as u64 + salt))
        };
        Self {
            downstream: (0..actuators).map(|i| link(i, 0)).collect(),
            upstream: (0..actuators).map(|i| link(i, 1)).collect(),
        }
    }

    /// Routes a host frame by its actuator id byte. Frames for unknown ids
    /// fall off the end of the chain.
    pub fn send_down(&mut self, now_us: u64, frame: Frame) {
        if let Some(l) = self.downstream.get_mut(frame[12] as usize) {
            l.send(now_us, frame);
        }
    }

    pub fn send_up(&mut self, now_us: u64, frame: Frame) {
        if let Some(l) = self.upstream.get_mut(frame[12] as usize) {
            l.send(now_us, frame);
        }
    }

    pub fn recv_down(&mut self, now_us: u64) -> Vec<Frame> {
        self.downstream.iter_mut().flat_map(|l| l.recv(now_us)).collect()
    }

    pub fn recv_up(&mut self, now_us: u64) -> Vec<Frame> {
        self.upstream.iter_mut().flat_map(|l| l.recv(now_us)).collect()
    }
}

/// What the controller sees of the robot at a tick.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotSnapshot {
    pub time_us: u64,
    pub actuators: Vec<ActuatorState>,
    pub tensions: Vec<f64>,
    pub face: Option<Face>,
}

impl RobotSnapshot {
    pub fn of(sim: &crate::dynamics::Simulation) -> Self {
        Self {
            time_us: seconds_to_us(sim.time()),
            actuators: sim.state.actuators.clone(),
            tensions: sim.records.iter().map(|r| r.tension).collect(),
            face: crate::dynamics::ground_face(&sim.config, &sim.state, 0.02),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    /// Mode each actuator runs until the next tick.
    pub modes: Vec<CableMode<f64>>,
    /// Spool torque setpoint at the tick, N·m.
    pub torques: Vec<f64>,
    pub outbox: Vec<Frame>,
    pub decode_errors: usize,
}

/// Commands older than this, relative to the newest timestamp seen, are
/// ignored.
pub const STALE_AFTER_US: u64 = 500_000;
pub const CONTROL_RATE_HZ: f64 = 20.0;

/// Robot-side controller: decodes host commands, keeps the active mode per
/// actuator, optionally runs a gait, and answers with status frames.
#[derive(Debug, Clone)]
pub struct RobotController {
    specs: Vec<Option<ActuatorSpec>>,
    active: Vec<CableMode<f64>>,
    applied_at: Vec<Option<u64>>,
    newest_us: u64,
    gait: Option<(GaitScript, GaitRunner)>,
    pub total_decode_errors: usize,
}

impl RobotController {
    pub fn new(specs: Vec<Option<ActuatorSpec>>) -> Self {
        let n = specs.len();
        Self {
            specs,
            active: vec![CableMode::Idle; n],
            applied_at: vec![None; n],
            newest_us: 0,
            gait: None,
            total_decode_errors: 0,
        }
    }

    pub fn for_robot(config: &crate::model::RobotConfig) -> Self {
        Self::new(config.cables.iter().map(|c| c.actuator.clone()).collect())
    }

    pub fn active_modes(&self) -> &[CableMode<f64>] {
        &self.active
    }

    /// Sets every mode directly (local operator action, not over the wire).
    pub fn set_modes(&mut self, modes: &[CableMode<f64>]) {
        for (a, m) in self.active.iter_mut().zip(modes) {
            *a = *m;
        }
    }

    pub fn start_gait(&mut self, script: GaitScript) {
        self.gait = Some((script, GaitRunner::new()));
    }

    /// Stops the gait; the modes it last set stay active.
    pub fn stop_gait(&mut self) {
        self.gait = None;
    }

    pub fn gait(&self) -> Option<(&GaitScript, &GaitRunner)> {
        self.gait.as_ref().map(|(s, r)| (s, r))
    }

    /// Applies a decoded command. Returns false for a stale or superseded
    /// command. Re-applying the same command changes nothing.
    pub fn apply(&mut self, cmd: &ControlCommand) -> bool {
        let id = cmd.actuator_id as usize;
        if id >= self.active.len() {
            return false;
        }
        self.newest_us = self.newest_us.max(cmd.timestamp_us);
        if cmd.timestamp_us + STALE_AFTER_US < self.newest_us {
            return false;
        }
        if self.applied_at[id].is_some_and(|t| t > cmd.timestamp_us) {
            return false;
        }
        self.applied_at[id] = Some(cmd.timestamp_us);
        self.active[id] = cmd.mode.cast();
        true
    }

    /// One 20 Hz tick.
    pub fn tick(&mut self, inbox: &[Frame], snapshot: &RobotSnapshot) -> TickOutput {
        let mut decode_errors = 0;
        let mut commands = Vec::new();
        for f in inbox {
            match decode_command(f) {
                Ok(c) => commands.push(c),
                Err(_) => decode_errors += 1,
            }
        }
        self.total_decode_errors += decode_errors;
        // newest first within the tick so that an older one cannot win
        commands.sort_by_key(|c| std::cmp::Reverse(c.timestamp_us));
        let newest = commands
            .iter()
            .map(|c| c.timestamp_us)
            .max()
            .unwrap_or(0)
            .max(self.newest_us);
        let mut stale = vec![false; self.active.len()];
        for c in &commands {
            let id = c.actuator_id as usize;
            if c.timestamp_us + STALE_AFTER_US < newest {
                if let Some(s) = stale.get_mut(id) {
                    *s = true;
                }
                continue;
            }
            self.apply(c);
        }
        if let Some((script, runner)) = &mut self.gait {
            let (modes, _) = runner.tick(script, snapshot.face, snapshot.time_us as f64 * 1e-6);
            self.active = modes;
        }

        let mut torques = vec![0.0; self.active.len()];
        let mut outbox = Vec::with_capacity(self.active.len());
        for (i, spec) in self.specs.iter().enumerate() {
            let mut faults = 0;
            if decode_errors > 0 {
                faults |= fault::DECODE_ERROR;
            }
            if stale[i] {
                faults |= fault::STALE_COMMAND;
            }
            let st = &snapshot.actuators[i];
            let mut length = f32::NAN;
            if let Some(spec) = spec {
                match mode_to_torque(&self.active[i], st, spec, 0.0) {
                    Ok(t) => {
                        torques[i] = t;
                        if t >= spec.stall_torque {
                            faults |= fault::TORQUE_SATURATED;
                        }
                    }
                    Err(_) => faults |= fault::NOT_HOMED,
                }
                if let Ok(l) = st.estimated_cable_length(spec) {
                    length = l as f32;
                }
            }
            outbox.push(encode_status(&StatusReport {
                timestamp_us: snapshot.time_us,
                actuator_id: i as u8,
                mode: self.active[i].code(),
                length,
                force: snapshot.tensions.get(i).copied().unwrap_or(0.0) as f32,
                current: st.armature_current as f32,
                faults,
            }));
        }
        TickOutput {
            modes: self.active.clone(),
            torques,
            outbox,
            decode_errors,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_robot;
    use crate::model::WorldState;

    fn cmd(ts: u64, id: u8, mode: CableMode<f32>) -> ControlCommand {
        ControlCommand {
            timestamp_us: ts,
            actuator_id: id,
            mode,
        }
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc16_ccitt_false(b"123456789"), 0x29B1);
    }

    #[test]
    fn command_round_trip() {
        let c = cmd(123_456_789, 4, CableMode::SpringLinear { ks: 200.0 });
        let f = encode_command(&c).unwrap();
        assert_eq!(decode_command(&f).unwrap(), c);
        let c = cmd(
            u64::MAX,
            255,
            CableMode::Length {
                setpoint: 0.61,
                kp: 400.0,
                kd: 50.0,
                feed_forward: 5.0,
            },
        );
        assert_eq!(decode_command(&encode_command(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn each_check_has_its_own_error() {
        let f = encode_command(&cmd(1, 0, CableMode::Idle)).unwrap();
        assert_eq!(decode_command(&f[..31]), Err(CodecError::BadLength(31)));
        let mut g = f;
        g[12] ^= 1;
        assert!(matches!(decode_command(&g), Err(CodecError::BadCrc { .. })));
        let reseal = |mut g: Frame| {
            seal(&mut g);
            g
        };
        let mut g = f;
        g[0] = 0;
        assert_eq!(decode_command(&reseal(g)), Err(CodecError::BadMagic([0, 0x47])));
        let mut g = f;
        g[2] = 2;
        assert_eq!(decode_command(&reseal(g)), Err(CodecError::BadVersion(2)));
        let mut g = f;
        g[3] = 1;
        assert_eq!(decode_command(&reseal(g)), Err(CodecError::BadType(1)));
        let mut g = f;
        g[13] = 9;
        assert_eq!(decode_command(&reseal(g)), Err(CodecError::BadMode(9)));
        let mut g = f;
        g[14..18].copy_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(decode_command(&reseal(g)), Err(CodecError::BadParams));
        assert_eq!(
            encode_command(&cmd(0, 0, CableMode::ConstantForce { force: f32::NAN })),
            Err(CodecError::BadParams)
        );
    }

    #[test]
    fn status_round_trip() {
        let s = StatusReport {
            timestamp_us: 50_000,
            actuator_id: 2,
            mode: 1,
            length: 0.597,
            force: 120.5,
            current: 3.25,
            faults: fault::STALE_COMMAND,
        };
        let f = encode_status(&s);
        assert_eq!(decode_status(&f).unwrap(), s);
        assert_eq!(&f[27..30], &[0, 0, 0]);
        assert_eq!(decode_command(&f), Err(CodecError::BadType(1)));
    }

    #[test]
    fn link_delivers_in_order_after_latency() {
        let mut l = Link::new(
            LinkConfig {
                latency: 0.01,
                jitter: 0.005,
                drop_probability: 0.0,
            },
            3,
        );
        for k in 0..100u64 {
            let mut f = [0u8; FRAME_LEN];
            f[4..12].copy_from_slice(&k.to_le_bytes());
            l.send(k * 100, f);
        }
        assert!(l.recv(9_999).is_empty());
        let got = l.recv(1_000_000);
        assert_eq!(got.len(), 100);
        for (k, f) in got.iter().enumerate() {
            assert_eq!(u64::from_le_bytes(f[4..12].try_into().unwrap()), k as u64);
        }
    }

    #[test]
    fn link_drop_extremes() {
        let f = [0u8; FRAME_LEN];
        let mut l = Link::new(LinkConfig::default(), 1);
        l.send(5, f);
        assert_eq!(l.recv(5), vec![f]);
        let mut l = Link::new(
            LinkConfig {
                drop_probability: 1.0,
                ..LinkConfig::default()
            },
            1,
        );
        for _ in 0..1000 {
            l.send(0, f);
        }
        assert!(l.recv(u64::MAX).is_empty());
    }

    #[test]
    fn drop_rate_is_binomial() {
        let mut l = Link::new(
            LinkConfig {
                drop_probability: 0.1,
                ..LinkConfig::default()
            },
            42,
        );
        let f = [0u8; FRAME_LEN];
        for _ in 0..10_000 {
            l.send(0, f);
        }
        let n = l.recv(0).len() as f64;
        let sigma = (10_000.0f64 * 0.1 * 0.9).sqrt();
        assert!((n - 9000.0).abs() <= 3.0 * sigma, "{n}");
    }

    #[test]
    fn daisy_chain_adds_hop_latency() {
        let mut chain = DaisyChain::new(3, DEFAULT_HOP_LATENCY, LinkConfig::default(), 0);
        let f = encode_command(&cmd(0, 2, CableMode::Idle)).unwrap();
        chain.send_down(0, f);
        assert!(chain.recv_down(299).is_empty());
        assert_eq!(chain.recv_down(300), vec![f]);
    }

    fn snapshot() -> RobotSnapshot {
        let cfg = default_robot();
        let s = WorldState::nominal(&cfg);
        RobotSnapshot {
            time_us: 0,
            actuators: s.actuators,
            tensions: vec![0.0; 9],
            face: None,
        }
    }

    #[test]
    fn no_commands_means_idle_and_zero_torque() {
        let mut c = RobotController::for_robot(&default_robot());
        let out = c.tick(&[], &snapshot());
        assert!(out.modes.iter().all(|m| *m == CableMode::Idle));
        assert!(out.torques.iter().all(|&t| t == 0.0));
        assert_eq!(out.outbox.len(), 9);
        for (i, f) in out.outbox.iter().enumerate() {
            let s = decode_status(f).unwrap();
            assert_eq!(s.actuator_id as usize, i);
            assert_eq!(s.faults, 0);
        }
    }

    #[test]
    fn later_timestamp_wins() {
        let mut c = RobotController::for_robot(&default_robot());
        let a = encode_command(&cmd(2_000, 3, CableMode::ConstantForce { force: 20.0 })).unwrap();
        let b = encode_command(&cmd(1_000, 3, CableMode::ConstantForce { force: 10.0 })).unwrap();
        let out = c.tick(&[a, b], &snapshot());
        assert_eq!(out.modes[3], CableMode::ConstantForce { force: 20.0 });
        // an older command arriving later does not roll the mode back
        let out = c.tick(&[b], &snapshot());
        assert_eq!(out.modes[3], CableMode::ConstantForce { force: 20.0 });
    }

    #[test]
    fn stale_and_malformed_frames_are_ignored_and_flagged() {
        let mut c = RobotController::for_robot(&default_robot());
        let fresh = encode_command(&cmd(1_000_000, 1, CableMode::ConstantForce { force: 30.0 })).unwrap();
        let old = encode_command(&cmd(400_000, 2, CableMode::ConstantForce { force: 30.0 })).unwrap();
        let mut bad = fresh;
        bad[20] ^= 0x10;
        let out = c.tick(&[fresh, old, bad], &snapshot());
        assert_eq!(out.modes[1], CableMode::ConstantForce { force: 30.0 });
        assert_eq!(out.modes[2], CableMode::Idle);
        assert_eq!(out.decode_errors, 1);
        let s2 = decode_status(&out.outbox[2]).unwrap();
        assert_eq!(s2.faults, fault::DECODE_ERROR | fault::STALE_COMMAND);
        // a malformed stream alone changes nothing
        let before = c.active_modes().to_vec();
        c.tick(&[bad, bad], &snapshot());
        assert_eq!(c.active_modes(), &before[..]);
    }

    #[test]
    fn reapplying_a_command_is_idempotent() {
        let mut once = RobotController::for_robot(&default_robot());
        let mut twice = once.clone();
        let f = encode_command(&cmd(10, 5, CableMode::SpringLinear { ks: 300.0 })).unwrap();
        once.tick(&[f], &snapshot());
        twice.tick(&[f, f], &snapshot());
        twice.tick(&[f], &snapshot());
        assert_eq!(once.active_modes(), twice.active_modes());
    }

    #[test]
    fn fifty_ms_latency_lags_one_tick() {
        let mut chain = DaisyChain::new(
            9,
            0.0,
            LinkConfig {
                latency: 0.05,
                ..LinkConfig::default()
            },
            1,
        );
        let mut c = RobotController::for_robot(&default_robot());
        let mut snap = snapshot();
        let tick_us = seconds_to_us(1.0 / CONTROL_RATE_HZ);
        let mut seen = Vec::new();
        for k in 0..10u64 {
            let now = k * tick_us;
            let force = 10.0 + k as f32;
            chain.send_down(
                now,
                encode_command(&cmd(now, 0, CableMode::ConstantForce { force })).unwrap(),
            );
            snap.time_us = now;
            let inbox = chain.recv_down(now);
            let out = c.tick(&inbox, &snap);
            seen.push(out.modes[0]);
        }
        assert_eq!(seen[0], CableMode::Idle);
        for (k, mode) in seen.iter().enumerate().take(10).skip(1) {
            assert_eq!(
                *mode,
                CableMode::ConstantForce {
                    force: 10.0 + (k - 1) as f64
                }
            );
        }
    }
}

//! Live teleoperation endpoint: newline-delimited JSON over TCP.
//!
//! The server streams one [`StateSnapshot`] per control tick (20 Hz) and
//! accepts one [`OperatorCommand`] object per line. Commands for individual
//! cables are encoded into wire frames and travel through the simulated
//! daisy chain, so the robot side only ever sees bus traffic.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{
    decode_status, encode_command, seconds_to_us, ControlCommand, DaisyChain, LinkConfig, RobotController,
    RobotSnapshot, StatusReport, CONTROL_RATE_HZ, DEFAULT_HOP_LATENCY,
};
use crate::control::{CableMode, Face, GaitScript};
use crate::dynamics::{centroid, endcap_positions, ground_face, SimError, Simulation};
use crate::experiments::{default_gait, nominal_height, ShapeHold};
use crate::model::RobotConfig;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One inbound line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum OperatorCommand {
    /// Sends one cable a new mode over the bus.
    SetMode {
        cable: u8,
        mode: CableMode<f32>,
    },
    /// Re-tunes every cable to hold the nominal shape at this stiffness, N/m.
    SetStiffness {
        stiffness: f64,
    },
    /// Runs a gait script on the robot controller; the bundled one if absent.
    StartGait {
        #[serde(default)]
        script: Option<GaitScript>,
    },
    StopGait,
    /// Puts the robot back in its standing pose at the last stiffness.
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RodView {
    pub position: [f64; 3],
    /// `[w, x, y, z]`
    pub orientation: [f64; 4],
    pub endcaps: [[f64; 3]; 2],
}

/// One outbound line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub time: f64,
    pub rods: Vec<RodView>,
    /// Cable tensions from the physics, N.
    pub tensions: Vec<f64>,
    /// Latest length each actuator reported over the bus, m.
    pub estimated_lengths: Vec<Option<f64>>,
    pub faults: Vec<u8>,
    pub modes: Vec<CableMode<f64>>,
    pub face: Option<Face>,
    pub height: f64,
    pub centroid: [f64; 3],
    /// Standing height the shape controller aims for, m.
    pub target_height: f64,
    pub gait_phase: Option<usize>,
    /// Problems with the operator's last lines since the previous snapshot.
    pub errors: Vec<String>,
}

/// Host, bus and robot advanced together one control tick at a time.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: RobotConfig,
    pub sim: Simulation,
    pub controller: RobotController,
    pub chain: DaisyChain,
    pub stiffness: f64,
    pub hold: ShapeHold,
    seed: u64,
    link: LinkConfig,
    pending: Vec<ControlCommand>,
    status: Vec<Option<StatusReport>>,
    errors: Vec<String>,
}

impl Session {
    pub fn new(config: RobotConfig, link: LinkConfig, seed: u64) -> Result<Self, ServeError> {
        let hold = ShapeHold::default();
        let stiffness = hold.design_stiffness;
        let sim = Simulation::nominal(config.clone(), 1e-3, seed)?;
        let n = config.cables.len();
        let mut s = Self {
            controller: RobotController::for_robot(&config),
            chain: DaisyChain::new(n, DEFAULT_HOP_LATENCY, link, seed),
            config,
            sim,
            stiffness,
            hold,
            seed,
            link,
            pending: Vec::new(),
            status: vec![None; n],
            errors: Vec::new(),
        };
        s.queue_shape_hold();
        Ok(s)
    }

    fn queue_shape_hold(&mut self) {
        let modes = self.hold.modes(&self.config, self.stiffness);
        for (c, m) in modes.iter().enumerate() {
            self.pending.push(ControlCommand {
                timestamp_us: 0,
                actuator_id: c as u8,
                mode: m.cast(),
            });
        }
    }

    pub fn handle(&mut self, cmd: OperatorCommand) {
        match cmd {
            OperatorCommand::SetMode { cable, mode } => {
                if (cable as usize) < self.config.cables.len() {
                    self.pending.push(ControlCommand {
                        timestamp_us: 0,
                        actuator_id: cable,
                        mode,
                    });
                } else {
                    self.errors.push(format!("no cable {cable}"));
                }
            }
            OperatorCommand::SetStiffness { stiffness } => {
                if stiffness.is_finite() && stiffness > 0.0 {
                    self.stiffness = stiffness;
                    self.controller.stop_gait();
                    self.queue_shape_hold();
                } else {
                    self.errors.push(format!("stiffness must be positive, got {stiffness}"));
                }
            }
            OperatorCommand::StartGait { script } => {
                let script = script.unwrap_or_else(default_gait);
                match script.validate(self.config.cables.len()) {
                    Ok(()) => self.controller.start_gait(script),
                    Err(e) => self.errors.push(e.to_string()),
                }
            }
            OperatorCommand::StopGait => self.controller.stop_gait(),
            OperatorCommand::Reset => match Simulation::nominal(self.config.clone(), 1e-3, self.seed) {
                Ok(sim) => {
                    self.sim = sim;
                    self.controller = RobotController::for_robot(&self.config);
                    self.chain = DaisyChain::new(self.config.cables.len(), DEFAULT_HOP_LATENCY, self.link, self.seed);
                    self.status.iter_mut().for_each(|s| *s = None);
                    self.queue_shape_hold();
                }
                Err(e) => self.errors.push(e.to_string()),
            },
        }
    }

    /// Parses and applies one inbound line; malformed lines are reported in
    /// the next snapshot.
    pub fn handle_line(&mut self, line: &str) {
        if line.trim().is_empty() {
            return;
        }
        match serde_json::from_str::<OperatorCommand>(line) {
            Ok(cmd) => self.handle(cmd),
            Err(e) => self.errors.push(format!("bad command: {e}")),
        }
    }

    /// One 20 Hz tick: host frames go down the chain, the robot controller
    /// runs, status frames come back and the physics advances to the next
    /// tick.
    pub fn tick(&mut self) -> Result<StateSnapshot, ServeError> {
        let now = seconds_to_us(self.sim.time());
        for mut cmd in std::mem::take(&mut self.pending) {
            cmd.timestamp_us = now;
            match encode_command(&cmd) {
                Ok(f) => self.chain.send_down(now, f),
                Err(e) => self.errors.push(format!("cable {}: {e}", cmd.actuator_id)),
            }
        }
        let inbox = self.chain.recv_down(now);
        let out = self.controller.tick(&inbox, &RobotSnapshot::of(&self.sim));
        if out.modes != self.sim.modes() {
            self.sim.set_modes(&out.modes)?;
        }
        for f in out.outbox {
            self.chain.send_up(now, f);
        }
        for f in self.chain.recv_up(now) {
            if let Ok(s) = decode_status(&f) {
                if let Some(slot) = self.status.get_mut(s.actuator_id as usize) {
                    *slot = Some(s);
                }
            }
        }
        let steps = ((1.0 / CONTROL_RATE_HZ) / self.sim.dt).round() as usize;
        for _ in 0..steps {
            self.sim.step()?;
        }
        Ok(self.snapshot())
    }

    pub fn snapshot(&mut self) -> StateSnapshot {
        let caps = endcap_positions(&self.config, &self.sim.state);
        let c = centroid(&self.config, &self.sim.state);
        StateSnapshot {
            time: self.sim.time(),
            rods: self
                .sim
                .state
                .rods
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let q = r.orientation.quaternion();
                    RodView {
                        position: r.position.into(),
                        orientation: [q.w, q.i, q.j, q.k],
                        endcaps: [caps[2 * i].into(), caps[2 * i + 1].into()],
                    }
                })
                .collect(),
            tensions: self.sim.records.iter().map(|r| r.tension).collect(),
            estimated_lengths: self
                .status
                .iter()
                .map(|s| s.and_then(|s| s.length.is_finite().then_some(s.length as f64)))
                .collect(),
            faults: self.status.iter().map(|s| s.map_or(0, |s| s.faults)).collect(),
            modes: self.sim.modes(),
            face: ground_face(&self.config, &self.sim.state, 0.02),
            height: self.sim.height(),
            centroid: c.into(),
            target_height: nominal_height(&self.config),
            gait_phase: self.controller.gait().map(|(_, r)| r.phase),
            errors: std::mem::take(&mut self.errors),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServeOptions {
    /// Pace ticks to the wall clock; otherwise run as fast as possible.
    pub realtime: bool,
    /// Stop after this many ticks per connection.
    pub max_ticks: Option<usize>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            realtime: true,
            max_ticks: None,
        }
    }
}

/// Drives `session` for one client until it disconnects or `max_ticks`.
pub fn run_connection(session: &mut Session, stream: TcpStream, options: ServeOptions) -> Result<(), ServeError> {
    stream.set_nodelay(true)?;
    let control = stream.try_clone()?;
    let result = stream_ticks(session, stream, options);
    // the reader thread holds a clone, so close both directions explicitly
    let _ = control.shutdown(Shutdown::Both);
    result
}

fn stream_ticks(session: &mut Session, stream: TcpStream, options: ServeOptions) -> Result<(), ServeError> {
    let reader = BufReader::new(stream.try_clone()?);
    let (tx, rx) = mpsc::channel::<String>();
    std::thread::spawn(move || {
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let mut out = std::io::BufWriter::new(stream);
    let period = Duration::from_secs_f64(1.0 / CONTROL_RATE_HZ);
    let mut deadline = Instant::now();
    let mut ticks = 0;
    loop {
        while let Ok(line) = rx.try_recv() {
            session.handle_line(&line);
        }
        let snap = session.tick()?;
        let sent = serde_json::to_writer(&mut out, &snap)
            .map_err(std::io::Error::from)
            .and_then(|_| out.write_all(b"\n"))
            .and_then(|_| out.flush());
        if sent.is_err() {
            // client went away
            return Ok(());
        }
        ticks += 1;
        if options.max_ticks.is_some_and(|m| ticks >= m) {
            return Ok(());
        }
        if options.realtime {
            deadline += period;
            if let Some(wait) = deadline.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
    }
}

/// Serves clients one at a time; the robot state carries over between
/// connections.
pub fn serve(addr: impl ToSocketAddrs, mut session: Session, options: ServeOptions) -> Result<(), ServeError> {
    let listener = TcpListener::bind(addr)?;
    serve_on(listener, &mut session, options)
}

pub fn serve_on(listener: TcpListener, session: &mut Session, options: ServeOptions) -> Result<(), ServeError> {
    for stream in listener.incoming() {
        run_connection(session, stream?, options)?;
    }
    Ok(())
}

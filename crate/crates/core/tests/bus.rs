use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};

use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensegrity_core::bus::*;
use tensegrity_core::control::CableMode;
use tensegrity_core::model::{default_robot, WorldState};
use tensegrity_core::serve::{run_connection, ServeOptions, Session, StateSnapshot};

fn golden(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn command(timestamp_us: u64, actuator_id: u8, mode: CableMode<f32>) -> ControlCommand {
    ControlCommand {
        timestamp_us,
        actuator_id,
        mode,
    }
}

#[test]
fn golden_command_frames() {
    let cases = [
        ("command_idle.bin", command(0, 0, CableMode::Idle)),
        (
            "command_spring_linear.bin",
            command(1_000_000, 3, CableMode::SpringLinear { ks: 200.0 }),
        ),
        (
            "command_length.bin",
            command(
                123_456_789,
                8,
                CableMode::Length {
                    setpoint: 0.5,
                    kp: 400.0,
                    kd: 50.0,
                    feed_forward: 5.0,
                },
            ),
        ),
        (
            "command_spring_power.bin",
            command(
                50_000,
                1,
                CableMode::SpringPower {
                    k1: 2.0,
                    k2: 5.5,
                    k3: 10.0,
                },
            ),
        ),
        (
            "command_constant_force.bin",
            command(1 << 40, 7, CableMode::ConstantForce { force: 30.0 }),
        ),
    ];
    for (file, cmd) in cases {
        let bytes = golden(file);
        assert_eq!(encode_command(&cmd).unwrap().as_slice(), bytes.as_slice(), "{file}");
        assert_eq!(decode_command(&bytes).unwrap(), cmd, "{file}");
    }
}

#[test]
fn golden_status_frame() {
    let s = StatusReport {
        timestamp_us: 250_000,
        actuator_id: 2,
        mode: 1,
        length: 0.625,
        force: 120.5,
        current: 3.25,
        faults: fault::STALE_COMMAND,
    };
    let bytes = golden("status_length.bin");
    assert_eq!(encode_status(&s).as_slice(), bytes.as_slice());
    assert_eq!(decode_status(&bytes).unwrap(), s);
}

#[test]
fn fuzzed_frames_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5447);
    let mut accepted = 0;
    let mut frame = [0u8; FRAME_LEN];
    for k in 0..1_000_000 {
        rng.fill_bytes(&mut frame);
        if k % 2 == 1 {
            // a valid header and CRC drive decoding past the integrity checks
            frame[0..2].copy_from_slice(&MAGIC);
            frame[2] = VERSION;
            frame[3] = (k % 4 == 1) as u8;
            frame[13] %= 6;
            let crc = crc16_ccitt_false(&frame[..30]);
            frame[30..32].copy_from_slice(&crc.to_le_bytes());
        }
        if let Ok(cmd) = decode_command(&frame) {
            // whatever is accepted is the one canonical encoding of its value
            assert_eq!(encode_command(&cmd).unwrap(), frame);
            accepted += 1;
        }
        if let Ok(s) = decode_status(&frame) {
            assert_eq!(encode_status(&s), frame);
        }
    }
    assert!(accepted > 0);
    for len in [0, 1, 31, 33, 64] {
        assert_eq!(decode_command(&vec![0u8; len]), Err(CodecError::BadLength(len)));
    }
}

#[test]
fn every_single_bit_flip_is_a_crc_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let cmd = command(
            rng.random(),
            rng.random(),
            CableMode::Length {
                setpoint: rng.random_range(0.0..1.5),
                kp: rng.random_range(0.0..3000.0),
                kd: rng.random_range(0.0..100.0),
                feed_forward: rng.random_range(0.0..20.0),
            },
        );
        let mut f = encode_command(&cmd).unwrap();
        let bit = rng.random_range(0..8 * FRAME_LEN);
        f[bit / 8] ^= 1 << (bit % 8);
        assert!(
            matches!(decode_command(&f), Err(CodecError::BadCrc { .. })),
            "bit {bit}"
        );
    }
}

const REFERENCE_CRC: crc::Crc<u16> = crc::Crc::<u16>::new(&crc::CRC_16_IBM_3740);

fn any_mode() -> impl Strategy<Value = CableMode<f32>> {
    prop_oneof![
        Just(CableMode::Idle),
        (0.0f32..2.0, 0.0f32..5000.0, 0.0f32..200.0, 0.0f32..50.0).prop_map(|(setpoint, kp, kd, feed_forward)| {
            CableMode::Length {
                setpoint,
                kp,
                kd,
                feed_forward,
            }
        }),
        (0.0f32..2000.0).prop_map(|ks| CableMode::SpringLinear { ks }),
        (0.0f32..50.0, 0.1f32..10.0, 0.0f32..200.0).prop_map(|(k1, k2, k3)| CableMode::SpringPower { k1, k2, k3 }),
        (0.0f32..400.0).prop_map(|force| CableMode::ConstantForce { force }),
    ]
}

proptest! {
    #[test]
    fn crc_matches_reference(data in prop::collection::vec(any::<u8>(), 0..64)) {
        prop_assert_eq!(crc16_ccitt_false(&data), REFERENCE_CRC.checksum(&data));
    }

    #[test]
    fn command_round_trip(ts in any::<u64>(), id in any::<u8>(), mode in any_mode()) {
        let cmd = command(ts, id, mode);
        let f = encode_command(&cmd).unwrap();
        prop_assert_eq!(decode_command(&f).unwrap(), cmd);
        prop_assert_eq!(REFERENCE_CRC.checksum(&f[..30]).to_le_bytes(), [f[30], f[31]]);
    }

    #[test]
    fn status_round_trip(ts in any::<u64>(), id in any::<u8>(), mode in 0u8..5, length in -1.0f32..2.0,
                         force in 0.0f32..500.0, current in -40.0f32..40.0, faults in 0u8..16) {
        let s = StatusReport { timestamp_us: ts, actuator_id: id, mode, length, force, current, faults };
        prop_assert_eq!(decode_status(&encode_status(&s)).unwrap(), s);
    }

    #[test]
    fn redelivery_is_idempotent(cmds in prop::collection::vec((0u64..2_000_000, 0u8..9, any_mode()), 1..20)) {
        let frames: Vec<Frame> = cmds.iter().map(|(t, id, m)| encode_command(&command(*t, *id, *m)).unwrap()).collect();
        let cfg = default_robot();
        let snap = RobotSnapshot {
            time_us: 0,
            actuators: WorldState::nominal(&cfg).actuators,
            tensions: vec![0.0; 9],
            face: None,
        };
        let mut once = RobotController::for_robot(&cfg);
        once.tick(&frames, &snap);
        let mut twice = RobotController::for_robot(&cfg);
        let doubled: Vec<Frame> = frames.iter().flat_map(|f| [*f, *f]).collect();
        twice.tick(&doubled, &snap);
        twice.tick(&frames, &snap);
        prop_assert_eq!(once.active_modes(), twice.active_modes());
    }

    #[test]
    fn garbage_never_changes_actuator_state(seed in any::<u64>(), n in 1usize..50) {
        let cfg = default_robot();
        let snap = RobotSnapshot {
            time_us: 0,
            actuators: WorldState::nominal(&cfg).actuators,
            tensions: vec![0.0; 9],
            face: None,
        };
        let mut c = RobotController::for_robot(&cfg);
        c.tick(&[encode_command(&command(10, 4, CableMode::SpringLinear { ks: 150.0 })).unwrap()], &snap);
        let before = c.active_modes().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut junk = vec![[0u8; FRAME_LEN]; n];
        for f in &mut junk {
            rng.fill_bytes(f);
        }
        let out = c.tick(&junk, &snap);
        prop_assert_eq!(c.active_modes(), &before[..]);
        prop_assert!(out.decode_errors <= n);
    }
}

#[test]
fn lost_stream_keeps_last_mode() {
    let cfg = default_robot();
    let mut chain = DaisyChain::new(9, DEFAULT_HOP_LATENCY, LinkConfig::default(), 5);
    let mut c = RobotController::for_robot(&cfg);
    let mut snap = RobotSnapshot {
        time_us: 0,
        actuators: WorldState::nominal(&cfg).actuators,
        tensions: vec![0.0; 9],
        face: None,
    };
    let mode = CableMode::ConstantForce { force: 40.0 };
    chain.send_down(0, encode_command(&command(0, 6, mode)).unwrap());
    for k in 1..40u64 {
        snap.time_us = k * 50_000;
        let inbox = chain.recv_down(snap.time_us);
        let out = c.tick(&inbox, &snap);
        assert_eq!(out.modes[6], CableMode::ConstantForce { force: 40.0 });
        assert!(out.torques[6] > 0.0);
    }
}

#[test]
fn lossy_chain_delivers_in_order() {
    let mut chain = DaisyChain::new(
        3,
        DEFAULT_HOP_LATENCY,
        LinkConfig {
            latency: 0.02,
            jitter: 0.01,
            drop_probability: 0.2,
        },
        11,
    );
    for k in 0..3000u64 {
        chain.send_down(
            k * 100,
            encode_command(&command(k, (k % 3) as u8, CableMode::Idle)).unwrap(),
        );
    }
    let got: Vec<ControlCommand> = chain
        .recv_down(u64::MAX)
        .iter()
        .map(|f| decode_command(f).unwrap())
        .collect();
    for id in 0..3u8 {
        let ts: Vec<u64> = got
            .iter()
            .filter(|c| c.actuator_id == id)
            .map(|c| c.timestamp_us)
            .collect();
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        let share = ts.len() as f64 / 1000.0;
        assert!((share - 0.8).abs() < 0.05, "{share}");
    }
}

#[test]
fn serve_endpoint_streams_snapshots_and_takes_commands() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let mut session = Session::new(default_robot(), LinkConfig::default(), 1).unwrap();
        let options = ServeOptions {
            realtime: false,
            max_ticks: Some(60),
        };
        // one connection, then return
        let (stream, _) = listener.accept().unwrap();
        run_connection(&mut session, stream, options).unwrap();
    });
    let mut stream = TcpStream::connect(addr).unwrap();
    stream
        .write_all(b"{\"cmd\":\"set_stiffness\",\"stiffness\":450}\n")
        .unwrap();
    stream.flush().unwrap();
    let snaps: Vec<StateSnapshot> = BufReader::new(stream)
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect();
    server.join().unwrap();
    assert_eq!(snaps.len(), 60);
    for w in snaps.windows(2) {
        assert!((w[1].time - w[0].time - 0.05).abs() < 1e-9);
    }
    let last = snaps.last().unwrap();
    assert!(last
        .modes
        .iter()
        .all(|m| matches!(m, CableMode::Length { kp, .. } if *kp == 450.0)));
    assert!(last.estimated_lengths.iter().all(Option::is_some));
    assert_eq!(last.rods.len(), 3);
    assert!(last.height > 0.6);
}

use nalgebra::UnitQuaternion;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensegrity_core::control::CableMode;
use tensegrity_core::dynamics::*;
use tensegrity_core::experiments::{default_gait, settle, standing_robot, SettleCriteria, ShapeHold};
use tensegrity_core::model::{default_robot, RobotConfig, RodSpec, RodState, Vec3, WorldState};
use tensegrity_core::statics::equilibrium_cable_force;
use tensegrity_core::trajectory::{TrajectoryLog, HEADER_LEN, MAGIC};

/// One bar of design mass with its lower endcap pinned at the origin and a
/// horizontal pull at the upper endcap.
fn pinned_bar(angle_deg: f64, pull: f64) -> (RobotConfig, Fixtures, WorldState) {
    let mut cfg = default_robot();
    let mass = cfg.design_bar_mass;
    cfg.rods = vec![RodSpec {
        mass,
        anchor_offsets: vec![],
        ..cfg.rods[0].clone()
    }];
    cfg.cables.clear();
    cfg.payload = vec![0.0];
    let rod = &cfg.rods[0];
    let [bottom, top] = rod.endcap_offsets();
    let theta = angle_deg.to_radians();
    let q = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), std::f64::consts::FRAC_PI_2 - theta);
    let position = -(q * bottom);
    let fixtures = Fixtures {
        ground: false,
        pins: vec![Pin {
            rod: 0,
            offset: bottom,
            world_point: Vec3::zeros(),
            stiffness: 1e5,
            damping: 100.0,
        }],
        loads: vec![ExternalLoad {
            rod: 0,
            offset: top,
            force: Vec3::new(-pull, 0.0, 0.0),
        }],
    };
    let state = WorldState {
        rods: vec![RodState::at_rest(position, q)],
        actuators: vec![],
        sim_time: 0.0,
    };
    (cfg, fixtures, state)
}

#[test]
fn pinned_bar_at_eight_degrees_needs_174_newtons() {
    let cfg = default_robot();
    let weight = cfg.design_bar_mass * cfg.gravity;
    let pull = equilibrium_cable_force(weight, 8f64.to_radians()).unwrap();
    assert!((pull - 174.0).abs() < 1.0, "{pull}");

    let (cfg, fixtures, state) = pinned_bar(8.0, pull);
    let w = equilibrium_residual(&cfg, &fixtures, &state)[0];
    // angular acceleration about the pin
    let rod = &cfg.rods[0];
    let pin_to_centre = state.rods[0].position;
    let torque_at_pin = w.torque + pin_to_centre.cross(&w.force);
    let inertia_at_pin = rod.mass * rod.length * rod.length / 3.0;
    let alpha = torque_at_pin.y / inertia_at_pin;
    assert!(alpha.abs() < 1e-2, "{alpha}");
}

/// Net torque about the pin, positive when it raises the bar.
fn raising_torque(angle_deg: f64, pull: f64) -> f64 {
    let (cfg, fixtures, state) = pinned_bar(angle_deg, pull);
    let w = equilibrium_residual(&cfg, &fixtures, &state)[0];
    // the bar leans towards +x, so raising it is a negative turn about y
    -(w.torque + state.rods[0].position.cross(&w.force)).y
}

#[test]
fn simulated_pinned_bar_balances_where_statics_predicts() {
    // a constant horizontal pull gives an unstable balance point, so locate
    // it from the simulator's own force model rather than by waiting
    for angle in [8.0, 20.0, 45.0, 70.0] {
        let cfg = default_robot();
        let pull = equilibrium_cable_force(cfg.design_bar_mass * cfg.gravity, f64::to_radians(angle)).unwrap();
        let (mut lo, mut hi) = (angle - 5.0, angle + 5.0);
        assert!(raising_torque(lo, pull) < 0.0 && raising_torque(hi, pull) > 0.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if raising_torque(mid, pull) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((lo - angle).abs() < 0.5, "{angle}°: balances at {lo}°");
    }
}

/// Robot with passive, undamped cables 0.5 % shorter than the anchor
/// spacing, spinning in free space.
fn passive_robot(gravity: f64, toss: f64) -> (RobotConfig, Fixtures, WorldState) {
    let mut cfg = default_robot();
    let nominal = WorldState::nominal(&cfg);
    for (c, link) in cfg.cables.iter_mut().enumerate() {
        link.rest_length = nominal.actuators[c].home_length * 0.995;
        link.actuator = None;
    }
    cfg.cable_damping_ratio = 0.0;
    cfg.gravity = gravity;
    let mut state = WorldState::nominal(&cfg);
    for (i, r) in state.rods.iter_mut().enumerate() {
        r.angular_velocity = Vec3::new(0.3 * i as f64, -0.2, 0.5);
        r.linear_velocity.z = toss;
    }
    let fixtures = Fixtures {
        ground: false,
        ..Fixtures::default()
    };
    (cfg, fixtures, state)
}

#[test]
fn energy_does_not_drift_without_contact_or_actuation() {
    for (gravity, toss) in [(0.0, 0.0), (9.81, 12.0)] {
        let (cfg, fixtures, state) = passive_robot(gravity, toss);
        let mut sim = Simulation::new(cfg.clone(), state, 1e-3, 0)
            .unwrap()
            .with_fixtures(fixtures);
        let mut e = Vec::with_capacity(5000);
        for _ in 0..5000 {
            sim.step().unwrap();
            e.push(energy(&cfg, &sim.state).total());
        }
        // semi-implicit Euler conserves a nearby energy, so the audited one
        // oscillates within each cable period; drift is the change in its
        // 0.1 s mean from the first to the last window
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&e[..100]), mean(&e[4900..]));
        let drift = (last - first).abs() / first.abs();
        assert!(drift < 0.01, "g = {gravity}: drift {drift}");
        let spread = e.iter().fold(0.0f64, |m, x| m.max((x - first).abs())) / first.abs();
        assert!(spread < 0.1, "g = {gravity}: spread {spread}");
    }
}

#[test]
fn free_robot_conserves_momentum() {
    let (cfg, fixtures, mut state) = passive_robot(0.0, 0.0);
    for (i, r) in state.rods.iter_mut().enumerate() {
        r.linear_velocity = Vec3::new(0.2, -0.1 * i as f64, 0.05);
    }
    let mut sim = Simulation::new(cfg.clone(), state, 1e-3, 0)
        .unwrap()
        .with_fixtures(fixtures);
    let (p0, l0) = momentum(&cfg, &sim.state);
    let (mut dp, mut dl) = (0.0f64, 0.0f64);
    for _ in 0..5000 {
        sim.step().unwrap();
        let (p, l) = momentum(&cfg, &sim.state);
        dp = dp.max((p - p0).norm());
        dl = dl.max((l - l0).norm());
    }
    assert!(dp < 1e-9, "{dp}");
    assert!(dl < 1e-9, "{dl}");
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let cfg = default_robot();
        let mut sim = Simulation::nominal(cfg, 1e-3, 7).unwrap();
        let gait = default_gait();
        let mut runner = tensegrity_core::control::GaitRunner::new();
        let mut trace = Vec::new();
        for step in 0..4000 {
            if step % 50 == 0 {
                let face = ground_face(&sim.config, &sim.state, 0.02);
                let (modes, _) = runner.tick(&gait, face, sim.time());
                sim.set_modes(&modes).unwrap();
            }
            sim.step().unwrap();
            trace.push(
                sim.state
                    .rods
                    .iter()
                    .map(|r| r.position.x.to_bits())
                    .collect::<Vec<_>>(),
            );
        }
        (sim.state, sim.records, trace)
    };
    let (a, ra, ta) = run();
    let (b, rb, tb) = run();
    assert_eq!(ta, tb);
    assert_eq!(ra, rb);
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}

#[test]
fn different_seeds_differ_only_through_noise() {
    let cfg = default_robot();
    let mut a = standing_robot(&cfg, &ShapeHold::default(), 200.0, 1).unwrap();
    let mut b = standing_robot(&cfg, &ShapeHold::default(), 200.0, 2).unwrap();
    a.run(0.5).unwrap();
    b.run(0.5).unwrap();
    assert_ne!(a.state.rods[0].position, b.state.rods[0].position);
    assert!((a.state.rods[0].position - b.state.rods[0].position).norm() < 1e-2);
}

#[test]
fn settled_robot_is_in_equilibrium() {
    let cfg = default_robot();
    let mut sim = standing_robot(&cfg, &ShapeHold::default(), 200.0, 3).unwrap();
    let r = settle(&mut sim, &SettleCriteria::default()).unwrap();
    assert!(r.settled);
    assert!(r.residual < 0.5, "{}", r.residual);
    let h = sim.height();
    assert!(h > 0.6 && h < 1.2 + 2.0 * cfg.rods[0].cap_radius, "{h}");
}

#[test]
fn payload_never_raises_a_settled_robot() {
    let mut last = f64::INFINITY;
    for payload in [0.0, 3.0, 6.0, 9.0] {
        let cfg = default_robot().with_payload(payload);
        let mut sim = standing_robot(&cfg, &ShapeHold::default(), 200.0, 1).unwrap();
        let r = settle(&mut sim, &SettleCriteria::default()).unwrap();
        assert!(r.settled);
        assert!(r.height <= last + 1e-6, "{payload} kg: {} after {last}", r.height);
        last = r.height;
    }
}

fn random_mode(rng: &mut ChaCha8Rng, home: f64) -> CableMode<f64> {
    match rng.random_range(0..5) {
        0 => CableMode::Idle,
        1 => CableMode::Length {
            setpoint: home * rng.random_range(0.6..1.2),
            kp: rng.random_range(0.0..1000.0),
            kd: rng.random_range(0.0..80.0),
            feed_forward: rng.random_range(0.0..20.0),
        },
        2 => CableMode::SpringLinear {
            ks: rng.random_range(0.0..600.0),
        },
        3 => CableMode::SpringPower {
            k1: rng.random_range(0.0..20.0),
            k2: rng.random_range(0.2..8.0),
            k3: rng.random_range(0.0..100.0),
        },
        _ => CableMode::ConstantForce {
            force: rng.random_range(0.0..150.0),
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cables_only_pull(seed in 0u64..10_000, tilt in 0.0f64..0.6, drop in 0.0f64..0.3) {
        let cfg = default_robot();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = WorldState::nominal(&cfg);
        let homes: Vec<f64> = state.actuators.iter().map(|a| a.home_length).collect();
        let q = UnitQuaternion::from_euler_angles(tilt, -0.5 * tilt, 0.0);
        for r in &mut state.rods {
            r.position = q * r.position + Vec3::new(0.0, 0.0, drop + 0.1);
            r.orientation = q * r.orientation;
        }
        let mut sim = Simulation::new(cfg, state, 1e-3, seed).unwrap();
        for step in 0..600 {
            if step % 200 == 0 {
                let modes: Vec<_> = homes.iter().map(|h| random_mode(&mut rng, *h)).collect();
                sim.set_modes(&modes).unwrap();
            }
            sim.step().unwrap();
            for r in &sim.records {
                prop_assert!(r.tension >= 0.0);
                prop_assert_eq!(r.taut, r.stretched_length > r.unstretched_length);
            }
        }
    }
}

#[test]
fn trajectory_log_round_trips() {
    let cfg = default_robot();
    let mut sim = standing_robot(&cfg, &ShapeHold::default(), 200.0, 1).unwrap();
    let mut log = TrajectoryLog::for_simulation(&sim, 10);
    for _ in 0..=200 {
        log.offer(&sim);
        sim.step().unwrap();
    }
    assert_eq!(log.records.len(), 21);
    assert!((log.records[1].time - 0.01).abs() < 1e-12);
    let r = &log.records[20];
    for c in 0..9 {
        // encoders are stretch-blind, so a loaded cable reads short
        assert!(r.estimated_lengths[c] <= r.true_lengths[c] + 1e-5);
    }

    let mut bin = Vec::new();
    log.write_binary(&mut bin).unwrap();
    assert_eq!(&bin[..4], &MAGIC);
    assert_eq!(bin.len(), HEADER_LEN + 21 * 8 * (1 + 7 * 3 + 3 * 9));
    let back = TrajectoryLog::read_binary(&bin[..]).unwrap();
    assert_eq!(back.records, log.records);
    assert_eq!(back.decimation, 10);
    assert!(TrajectoryLog::read_binary(&bin[..bin.len() - 3]).is_err());

    let mut csv = Vec::new();
    log.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 1 + 7 * 3 + 3 * 9);
    assert_eq!(lines.count(), 21);
}

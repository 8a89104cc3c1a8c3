//! Proprioceptive cable lengths and shape reconstruction from lengths plus
//! per-bar IMU axes.
//!
//! The reconstruction parameterizes each rod by its centre and a roll angle
//! about the axis reported by its IMU. Cable residuals are minimized with
//! Levenberg-Marquardt; the translation gauge is removed by keeping the mean
//! rod centre at the origin.

use nalgebra::{DMatrix, DVector, Unit, UnitQuaternion};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::ActuatorError;
use crate::model::{cable_graph_connected, RobotConfig, RodState, Vec3, WorldState};

#[derive(Debug, Error, PartialEq)]
pub enum EstimationError {
    #[error("cable {0} has no actuator to read a length from")]
    Passive(usize),
    #[error("cable {cable}: {source}")]
    Actuator { cable: usize, source: ActuatorError },
    #[error("cable graph is not connected")]
    Disconnected,
    #[error("cable {cable}: length {length} must be positive and finite")]
    BadLength { cable: usize, length: f64 },
    #[error("expected {expected} {what}, got {got}")]
    InputLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("bar length must be positive, got {0}")]
    BadBarLength(f64),
}

/// Orientation reading of the IMU mounted on one bar. The sensor z-axis is
/// the bar axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub rod: usize,
    pub orientation: UnitQuaternion<f64>,
    pub angular_velocity: Vec3,
    /// Axis-angle standard deviation of the orientation error, rad.
    pub noise_sigma: f64,
}

impl ImuSample {
    /// Exact reading of a rod's pose.
    pub fn exact(rod: usize, state: &RodState) -> Self {
        Self {
            rod,
            orientation: state.orientation,
            angular_velocity: state.angular_velocity,
            noise_sigma: 0.0,
        }
    }

    /// Reading corrupted by an isotropic axis-angle error of `sigma` rad per
    /// component.
    pub fn measure<R: Rng + ?Sized>(rod: usize, state: &RodState, sigma: f64, rng: &mut R) -> Self {
        let mut draw = || -> f64 { StandardNormal.sample(rng) };
        let err = Vec3::new(draw(), draw(), draw()) * sigma;
        Self {
            rod,
            orientation: UnitQuaternion::from_scaled_axis(err) * state.orientation,
            angular_velocity: state.angular_velocity,
            noise_sigma: sigma,
        }
    }

    /// Bar axis in the world frame.
    pub fn axis(&self) -> Vec3 {
        self.orientation * Vec3::z()
    }
}

/// Readings for every rod of `state`.
pub fn exact_imu(state: &WorldState) -> Vec<ImuSample> {
    state
        .rods
        .iter()
        .enumerate()
        .map(|(i, r)| ImuSample::exact(i, r))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RodPose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEstimate {
    pub rods: Vec<RodPose>,
    /// Euclidean norm of the cable residuals, m.
    pub residual_norm: f64,
    pub iterations: usize,
    /// The residual norm stopped changing within tolerance.
    pub converged: bool,
}

impl ShapeEstimate {
    /// World positions of the endcap centres, in endcap index order.
    pub fn endcaps(&self, config: &RobotConfig) -> Vec<Vec3> {
        self.rods
            .iter()
            .zip(&config.rods)
            .flat_map(|(p, spec)| spec.endcap_offsets().map(|o| p.position + p.orientation * o))
            .collect()
    }

    pub fn anchors(&self, config: &RobotConfig) -> Vec<(Vec3, Vec3)> {
        config
            .cables
            .iter()
            .map(|c| {
                let a = &self.rods[c.from.rod];
                let b = &self.rods[c.to.rod];
                (
                    a.position + a.orientation * config.rods[c.from.rod].anchor_offsets[c.from.anchor],
                    b.position + b.orientation * config.rods[c.to.rod].anchor_offsets[c.to.anchor],
                )
            })
            .collect()
    }
}

/// Cable lengths as the actuator encoders report them (stretch-blind).
pub fn proprioceptive_lengths(config: &RobotConfig, world: &WorldState) -> Result<Vec<f64>, EstimationError> {
    if world.actuators.len() != config.cables.len() {
        return Err(EstimationError::InputLength {
            what: "actuator states",
            expected: config.cables.len(),
            got: world.actuators.len(),
        });
    }
    config
        .cables
        .iter()
        .zip(&world.actuators)
        .enumerate()
        .map(|(c, (link, st))| {
            let spec = link.actuator.as_ref().ok_or(EstimationError::Passive(c))?;
            st.estimated_cable_length(spec)
                .map_err(|source| EstimationError::Actuator { cable: c, source })
        })
        .collect()
}

/// `100 · |estimate − truth| / bar_length`
pub fn length_error_pct_of_bar(estimate: f64, truth: f64, bar_length: f64) -> Result<f64, EstimationError> {
    if !(bar_length > 0.0) {
        return Err(EstimationError::BadBarLength(bar_length));
    }
    Ok(100.0 * (estimate - truth).abs() / bar_length)
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop once the residual norm changes by less than this, m, and the
    /// parameter step is below `1e-3 · √tolerance`.
    pub tolerance: f64,
    /// Fixed damping on the roll angles in the normal equations. A roll the
    /// cables cannot observe therefore stays at its initial guess.
    pub roll_damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-9,
            roll_damping: 1e-6,
        }
    }
}

/// Least-squares problem over rod centres and roll angles.
///
/// Parameters are laid out as `[p_0, …, p_{n-1}, ψ_0, …, ψ_{n-1}]`; rod `i`
/// has orientation `base_i · Rz(ψ_i)` where `base_i` is the shortest rotation
/// taking the z-axis onto the IMU axis.
#[derive(Debug, Clone)]
pub struct ShapeProblem<'a> {
    config: &'a RobotConfig,
    lengths: &'a [f64],
    axes: Vec<Vec3>,
    bases: Vec<UnitQuaternion<f64>>,
}

fn base_rotation(axis: &Vec3) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(&Vec3::z(), axis)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI))
}

impl<'a> ShapeProblem<'a> {
    pub fn new(
        config: &'a RobotConfig,
        lengths: &'a [f64],
        imu: &[ImuSample],
        initial: &WorldState,
    ) -> Result<(Self, DVector<f64>), EstimationError> {
        let n = config.rods.len();
        if lengths.len() != config.cables.len() {
            return Err(EstimationError::InputLength {
                what: "cable lengths",
                expected: config.cables.len(),
                got: lengths.len(),
            });
        }
        if initial.rods.len() != n {
            return Err(EstimationError::InputLength {
                what: "rods in the initial guess",
                expected: n,
                got: initial.rods.len(),
            });
        }
        for (cable, &length) in lengths.iter().enumerate() {
            if !(length > 0.0 && length.is_finite()) {
                return Err(EstimationError::BadLength { cable, length });
            }
        }
        if !cable_graph_connected(n, config.cables.iter().map(|c| (c.from.rod, c.to.rod))) {
            return Err(EstimationError::Disconnected);
        }
        let mut axes = vec![None; n];
        for s in imu {
            if let Some(slot) = axes.get_mut(s.rod) {
                *slot = Some(s.axis());
            }
        }
        let axes: Vec<Vec3> = axes.into_iter().flatten().collect();
        if axes.len() != n {
            return Err(EstimationError::InputLength {
                what: "IMU samples covering every rod",
                expected: n,
                got: axes.len(),
            });
        }
        let bases: Vec<_> = axes.iter().map(base_rotation).collect();
        let mut x = DVector::zeros(4 * n);
        let mean = initial.rods.iter().map(|r| r.position).sum::<Vec3>() / n as f64;
        for i in 0..n {
            let p = initial.rods[i].position - mean;
            x.fixed_rows_mut::<3>(3 * i).copy_from(&p);
            // roll that best matches the initial orientation
            let rel = bases[i].inverse() * initial.rods[i].orientation;
            let v = rel * Vec3::x();
            x[3 * n + i] = v.y.atan2(v.x);
        }
        Ok((
            Self {
                config,
                lengths,
                axes,
                bases,
            },
            x,
        ))
    }

    fn rods(&self) -> usize {
        self.config.rods.len()
    }

    pub fn pose(&self, x: &DVector<f64>, rod: usize) -> RodPose {
        let n = self.rods();
        let roll = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), x[3 * n + rod]);
        RodPose {
            position: Vec3::new(x[3 * rod], x[3 * rod + 1], x[3 * rod + 2]),
            orientation: self.bases[rod] * roll,
        }
    }

    /// Stretched-minus-measured length of every cable.
    pub fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let nc = self.config.cables.len();
        let mut r = DVector::zeros(nc);
        for c in 0..nc {
            let (a, b) = self.anchor_pair(x, c);
            r[c] = (b - a).norm() - self.lengths[c];
        }
        r
    }

    fn anchor_pair(&self, x: &DVector<f64>, c: usize) -> (Vec3, Vec3) {
        let link = &self.config.cables[c];
        let pa = self.pose(x, link.from.rod);
        let pb = self.pose(x, link.to.rod);
        (
            pa.position + pa.orientation * self.config.rods[link.from.rod].anchor_offsets[link.from.anchor],
            pb.position + pb.orientation * self.config.rods[link.to.rod].anchor_offsets[link.to.anchor],
        )
    }

    /// Analytic Jacobian of [`residuals`](Self::residuals).
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.rods();
        let nc = self.config.cables.len();
        let mut j = DMatrix::zeros(nc, 4 * n);
        for (c, link) in self.config.cables.iter().enumerate() {
            let (a, b) = self.anchor_pair(x, c);
            let d = b - a;
            let len = d.norm();
            if len == 0.0 {
                continue;
            }
            let u = d / len;
            // d(anchor)/d(roll) = axis × (R · offset)
            for (rod, anchor, sign) in [(link.from.rod, a, -1.0), (link.to.rod, b, 1.0)] {
                for k in 0..3 {
                    j[(c, 3 * rod + k)] += sign * u[k];
                }
                let lever = anchor - Vec3::new(x[3 * rod], x[3 * rod + 1], x[3 * rod + 2]);
                j[(c, 3 * n + rod)] += sign * u.dot(&self.axes[rod].cross(&lever));
            }
        }
        j
    }

    fn recentre(&self, x: &mut DVector<f64>) {
        let n = self.rods();
        let mut mean = Vec3::zeros();
        for i in 0..n {
            mean += Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]);
        }
        mean /= n as f64;
        for i in 0..n {
            for k in 0..3 {
                x[3 * i + k] -= mean[k];
            }
        }
    }
}

/// Recovers rod poses from cable lengths and IMU bar axes, starting from
/// `initial`. The result has its mean rod centre at the origin.
pub fn reconstruct_shape(
    lengths: &[f64],
    imu: &[ImuSample],
    config: &RobotConfig,
    initial: &WorldState,
) -> Result<ShapeEstimate, EstimationError> {
    reconstruct_shape_with(lengths, imu, config, initial, &SolverOptions::default())
}

pub fn reconstruct_shape_with(
    lengths: &[f64],
    imu: &[ImuSample],
    config: &RobotConfig,
    initial: &WorldState,
    options: &SolverOptions,
) -> Result<ShapeEstimate, EstimationError> {
    let (problem, mut x) = ShapeProblem::new(config, lengths, imu, initial)?;
    let n = config.rods.len();
    let mut r = problem.residuals(&x);
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        let j = problem.jacobian(&x);
        let jt = j.transpose();
        let jtj = &jt * &j;
        let g = &jt * &r;
        // Marquardt scaling, isotropic within each rod's position block so
        // that the iterates do not depend on the orientation of the world frame
        let mut scale: Vec<f64> = (0..4 * n).map(|k| jtj[(k, k)]).collect();
        for i in 0..n {
            let t = (scale[3 * i] + scale[3 * i + 1] + scale[3 * i + 2]) / 3.0;
            scale[3 * i..3 * i + 3].fill(t);
        }
        let mut accepted = false;
        // raise the damping until a step lowers the cost
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += mu * (scale[k] + 1e-9);
            }
            // pin only the rolls the cables do not see at all
            for k in 3 * n..4 * n {
                if jtj[(k, k)] < options.roll_damping {
                    a[(k, k)] += options.roll_damping;
                }
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&-&g)) else {
                mu *= 10.0;
                continue;
            };
            let step_norm = step.norm();
            let mut trial = &x + step;
            problem.recentre(&mut trial);
            let r_trial = problem.residuals(&trial);
            let c_trial = r_trial.norm_squared();
            if c_trial <= cost {
                let change = (r_trial.norm() - r.norm()).abs();
                x = trial;
                r = r_trial;
                cost = c_trial;
                mu = (mu / 3.0).max(1e-15);
                accepted = true;
                // an ill-conditioned pose can sit at a tiny residual while
                // still moving, so the parameters must settle as well
                if change < options.tolerance && step_norm < options.tolerance.sqrt() * 1e-3 {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            // no descent direction left: the minimum is reached to round-off
            converged = true;
        }
        if converged {
            break;
        }
    }
    // Undamped Gauss-Newton polish. The roll damping slows progress along
    // weakly observed roll modes; a truncated pseudo-inverse finishes them
    // while leaving fully unobservable directions where they are.
    for _ in 0..10 {
        let j = problem.jacobian(&x);
        let svd = j.svd(true, true);
        let cutoff = 1e-9 * svd.singular_values.max();
        let Ok(step) = svd.solve(&-&r, cutoff) else { break };
        let mut trial = &x + &step;
        problem.recentre(&mut trial);
        let r_trial = problem.residuals(&trial);
        if r_trial.norm_squared() >= cost {
            break;
        }
        x = trial;
        r = r_trial;
        cost = r.norm_squared();
    }
    Ok(ShapeEstimate {
        rods: (0..config.rods.len()).map(|i| problem.pose(&x, i)).collect(),
        residual_norm: r.norm(),
        iterations,
        converged,
    })
}

/// Largest endcap position error after removing the mean translation, m.
pub fn node_error(config: &RobotConfig, estimate: &ShapeEstimate, truth: &WorldState) -> f64 {
    let est = estimate.endcaps(config);
    let tru = crate::dynamics::endcap_positions(config, truth);
    let n = est.len() as f64;
    let shift = (tru.iter().sum::<Vec3>() - est.iter().sum::<Vec3>()) / n;
    est.iter()
        .zip(&tru)
        .map(|(e, t)| (e + shift - t).norm())
        .fold(0.0, f64::max)
}

/// Random pose near the nominal one: every rod rotated by up to
/// `max_angle` rad and shifted by up to `max_shift` m.
pub fn perturbed_pose<R: Rng + ?Sized>(
    config: &RobotConfig,
    max_angle: f64,
    max_shift: f64,
    rng: &mut R,
) -> WorldState {
    let mut s = WorldState::nominal(config);
    for rod in &mut s.rods {
        let axis = Unit::new_normalize(Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let angle = rng.random_range(-max_angle..max_angle);
        rod.orientation = UnitQuaternion::from_axis_angle(&axis, angle) * rod.orientation;
        rod.position += Vec3::new(
            rng.random_range(-max_shift..max_shift),
            rng.random_range(-max_shift..max_shift),
            rng.random_range(-max_shift..max_shift),
        );
    }
    s
}

/// Anchor-to-anchor distance of every cable.
pub fn true_lengths(config: &RobotConfig, state: &WorldState) -> Vec<f64> {
    config
        .cables
        .iter()
        .map(|c| {
            let a = state.rods[c.from.rod].point(&config.rods[c.from.rod].anchor_offsets[c.from.anchor]);
            let b = state.rods[c.to.rod].point(&config.rods[c.to.rod].anchor_offsets[c.to.anchor]);
            (b - a).norm()
        })
        .collect()
}

/// Reconstruction accuracy under Gaussian length noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepRow {
    /// Length noise standard deviation, m.
    pub sigma: f64,
    /// Median over trials of the largest endcap error, m.
    pub median_error: f64,
    pub max_error: f64,
}

/// Monte-Carlo over `trials` random poses for each noise level. The same
/// poses and unit noise draws are reused at every level.
pub fn noise_sweep<R: Rng + ?Sized>(
    config: &RobotConfig,
    sigmas: &[f64],
    trials: usize,
    rng: &mut R,
) -> Result<Vec<NoiseSweepRow>, EstimationError> {
    let initial = WorldState::nominal(config);
    let cases: Vec<(WorldState, Vec<f64>)> = (0..trials)
        .map(|_| {
            let pose = perturbed_pose(config, 0.15, 0.05, rng);
            let unit: Vec<f64> = (0..config.cables.len()).map(|_| StandardNormal.sample(rng)).collect();
            (pose, unit)
        })
        .collect();
    sigmas
        .iter()
        .map(|&sigma| {
            let mut errors = Vec::with_capacity(trials);
            for (pose, unit) in &cases {
                let lengths: Vec<f64> = true_lengths(config, pose)
                    .iter()
                    .zip(unit)
                    .map(|(l, z)| (l + sigma * z).max(1e-6))
                    .collect();
                let est = reconstruct_shape(&lengths, &exact_imu(pose), config, &initial)?;
                errors.push(node_error(config, &est, pose));
            }
            errors.sort_by(f64::total_cmp);
            Ok(NoiseSweepRow {
                sigma,
                median_error: if errors.is_empty() {
                    0.0
                } else {
                    errors[errors.len() / 2]
                },
                max_error: errors.last().copied().unwrap_or(0.0),
            })
        })
        .collect()
}

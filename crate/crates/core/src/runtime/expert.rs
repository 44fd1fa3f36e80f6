//! Scripted demonstrator for pick-and-place.
//!
//! The expert never actuates the follower. It moves a virtual hand that pulls
//! the leader arm toward joint targets through a spring-damper, and the
//! bilateral coupling carries that motion to the follower. Grip closure is
//! decided from the reaction torque felt on the leader gripper.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ObjectSpec, SimConfig};
use crate::dynamics::JointState;
use crate::error::{Error, Result};
use crate::kinematics::inverse_kinematics_chain;

pub const APPROACH_S: f64 = 2.0;
pub const SETTLE_S: f64 = 0.3;
pub const LIFT_S: f64 = 0.5;
pub const TRANSPORT_S: f64 = 2.5;
pub const OPEN_S: f64 = 0.4;
pub const RETREAT_S: f64 = 1.5;
/// Gripper closing speed of the hand (rad/s).
pub const CLOSE_RATE: f64 = 0.8;
/// Lower bound on the commanded squeeze (N).
pub const MIN_GRIP_FORCE: f64 = 3.0;
/// Squeeze target as a multiple of the hold threshold.
pub const GRIP_MARGIN: f64 = 3.0;
/// Extra hand closure once the squeeze target is felt (rad).
pub const SQUEEZE_RAD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Settle,
    Close,
    Lift,
    Transport,
    Release,
    Open,
    Retreat,
    Done,
}

/// Joint angles with the end effector at `point` and the gripper at `grip`.
pub fn pose_at(cfg: &SimConfig, point: [f64; 2], grip: f64) -> Result<Vec<f64>> {
    let mut q = inverse_kinematics_chain(point, &cfg.arm.link_lengths)?;
    q.push(grip);
    Ok(q)
}

/// Start configuration shared by the expert and the executor.
pub fn home_angles(cfg: &SimConfig) -> Vec<f64> {
    pose_at(cfg, cfg.scene.home_position, 0.0).unwrap_or_else(|_| {
        let mut q = vec![0.3; cfg.arm.dof];
        q.push(0.0);
        q
    })
}

/// `10s³ − 15s⁴ + 6s⁵`, clamped to `[0, 1]`.
pub fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 + s * (6.0 * s - 15.0))
}

/// Seeded per-episode variation: object start and place point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoints {
    pub home: [f64; 2],
    pub pick: [f64; 2],
    pub place: [f64; 2],
}

impl Waypoints {
    pub fn jittered(cfg: &SimConfig, nominal_pick: [f64; 2], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = cfg.scene.waypoint_jitter;
        let mut jit = |p: [f64; 2]| {
            if j > 0.0 {
                [p[0] + rng.random_range(-j..=j), p[1] + rng.random_range(-j..=j)]
            } else {
                p
            }
        };
        Self {
            home: cfg.scene.home_position,
            pick: jit(nominal_pick),
            place: jit(cfg.scene.place_center),
        }
    }
}

/// Finite-state waypoint policy producing leader joint targets.
#[derive(Clone, Debug)]
pub struct ScriptedExpert {
    cfg: SimConfig,
    pub waypoints: Waypoints,
    /// Squeeze force at which closing stops (N).
    pub grip_force: f64,
    phase: Phase,
    phase_start: f64,
    grip: f64,
    grip_closed: f64,
    from: [f64; 2],
}

impl ScriptedExpert {
    pub fn new(cfg: &SimConfig, object: &ObjectSpec, waypoints: Waypoints) -> Result<Self> {
        for p in [waypoints.home, waypoints.pick, waypoints.place] {
            inverse_kinematics_chain(p, &cfg.arm.link_lengths)?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            waypoints,
            grip_force: (GRIP_MARGIN * object.hold_force(cfg.scene.mu_hold)).max(MIN_GRIP_FORCE),
            phase: Phase::Approach,
            phase_start: 0.0,
            grip: 0.0,
            grip_closed: 0.0,
            from: waypoints.home,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    fn enter(&mut self, phase: Phase, t: f64) {
        log::trace!("expert {:?} -> {:?} at {t:.3} s", self.phase, phase);
        self.phase = phase;
        self.phase_start = t;
    }

    /// Leader joint targets at time `t`. `felt_force` is the squeeze the hand
    /// feels through the leader gripper (N) and `leader_grip` the leader
    /// gripper angle; once the target squeeze is felt, the hand settles at the
    /// spring offset that sustains it plus [`SQUEEZE_RAD`].
    pub fn step(&mut self, t: f64, felt_force: f64, leader_grip: f64) -> Result<Vec<f64>> {
        let w = self.waypoints;
        let grip_max = self.cfg.arm.joint_limits[self.cfg.arm.dof][1];
        loop {
            let el = t - self.phase_start;
            let next = match self.phase {
                Phase::Approach if el >= APPROACH_S => Phase::Settle,
                Phase::Settle if el >= SETTLE_S => Phase::Close,
                Phase::Close if felt_force >= self.grip_force => {
                    let hold = self.grip_force * self.cfg.arm.gripper_gap_per_rad / self.cfg.scene.operator_stiffness;
                    self.grip_closed = (leader_grip + hold + SQUEEZE_RAD).min(grip_max);
                    self.grip = self.grip_closed;
                    Phase::Lift
                }
                Phase::Close if self.grip >= grip_max => {
                    return Err(Error::Invariant(format!(
                        "gripper fully closed without reaching {:.2} N",
                        self.grip_force
                    )))
                }
                Phase::Lift if el >= LIFT_S => Phase::Transport,
                Phase::Transport if el >= TRANSPORT_S => Phase::Release,
                Phase::Release if el >= SETTLE_S => Phase::Open,
                Phase::Open if el >= OPEN_S => {
                    self.from = w.place;
                    Phase::Retreat
                }
                Phase::Retreat if el >= RETREAT_S => Phase::Done,
                _ => break,
            };
            self.enter(next, t);
        }
        let el = t - self.phase_start;
        let point = match self.phase {
            Phase::Approach => lerp(w.home, w.pick, min_jerk(el / APPROACH_S)),
            Phase::Settle | Phase::Close | Phase::Lift => w.pick,
            Phase::Transport => lerp(w.pick, w.place, min_jerk(el / TRANSPORT_S)),
            Phase::Release | Phase::Open => w.place,
            Phase::Retreat => lerp(self.from, w.home, min_jerk(el / RETREAT_S)),
            Phase::Done => w.home,
        };
        self.grip = match self.phase {
            Phase::Close => (self.grip + CLOSE_RATE * self.cfg.scene.dt).min(grip_max),
            Phase::Open => self.grip_closed * (1.0 - min_jerk(el / OPEN_S)),
            Phase::Retreat | Phase::Done => 0.0,
            _ => self.grip,
        };
        pose_at(&self.cfg, point, self.grip)
    }
}

fn lerp(a: [f64; 2], b: [f64; 2], s: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s]
}

/// Spring-damper hand on the leader, returned as a resisting load.
pub fn operator_load(cfg: &SimConfig, targets: &[f64], leader: &[JointState]) -> Vec<f64> {
    let (k, b) = (cfg.scene.operator_stiffness, cfg.scene.operator_damping);
    targets
        .iter()
        .zip(leader)
        .map(|(&q, j)| -(k * (q - j.angle) - b * j.velocity))
        .collect()
}

/// Squeeze felt through the leader gripper, from its reaction estimate.
pub fn felt_grip_force(cfg: &SimConfig, leader_tau_res: &[f64]) -> f64 {
    (-leader_tau_res[cfg.arm.dof]).max(0.0) / cfg.arm.gripper_gap_per_rad
}

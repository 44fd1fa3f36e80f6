//! Fixed-step simulation of the leader/follower arm pair.
//!
//! Each joint is an independent rotor (no inertia coupling):
//!
//! ```text
//! J·ω̇ = τ_motor − D·ω − τ_c·sign(ω) − τ_g(θ) − τ_load
//! ```
//!
//! integrated with semi-implicit Euler. `τ_load` collects everything the
//! environment pushes back with: gripper contact, the weight of a held
//! object and any caller-supplied load (an operator's hand, a wall). Loads
//! follow the resisting convention, so an operator pushing the joint forward
//! is a negative load.

use serde::{Deserialize, Serialize};

use crate::config::{ArmConfig, ObjectSpec, SceneConfig, GRAVITY};
use crate::error::{ensure_finite, Error, Result};
use crate::kinematics::{chain_points, fk_unchecked};

/// Angle, velocity and applied motor torque of one joint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub angle: f64,
    pub velocity: f64,
    pub torque: f64,
}

/// Complete simulation state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    /// Number of plant steps taken; `time = step_index · dt`.
    pub step_index: u64,
    pub time: f64,
    pub leader: Vec<JointState>,
    pub follower: Vec<JointState>,
    pub object_position: [f64; 2],
    pub object_present: bool,
    pub object_held: bool,
    pub object_crushed: bool,
    /// Object centre minus end effector, frozen at the moment of grasp.
    pub grasp_offset: [f64; 2],
    /// Gripper squeeze force (N) resolved at the last step.
    pub contact_force: f64,
    /// Only present in the drawer scene, which this simulator does not build.
    pub drawer_open_fraction: Option<f64>,
}

impl SceneState {
    pub fn leader_angles(&self) -> Vec<f64> {
        self.leader.iter().map(|j| j.angle).collect()
    }

    pub fn follower_angles(&self) -> Vec<f64> {
        self.follower.iter().map(|j| j.angle).collect()
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Squeeze force of the gripper on an object (N).
///
/// The finger gap shrinks linearly with the gripper angle; the force is
/// `k · max(0, 2r − gap)` while the object centre lies within
/// `capture_radius` of the end effector (or is already held), else zero.
pub fn gripper_contact(
    arm: &ArmConfig,
    gripper_angle: f64,
    object: &ObjectSpec,
    object_position: [f64; 2],
    ee_position: [f64; 2],
    capture_radius: f64,
    held: bool,
) -> f64 {
    let dx = object_position[0] - ee_position[0];
    let dy = object_position[1] - ee_position[1];
    if !held && dx.hypot(dy) > capture_radius {
        return 0.0;
    }
    let gap = finger_gap(arm, gripper_angle);
    object.contact_stiffness * (2.0 * object.radius - gap).max(0.0)
}

pub fn finger_gap(arm: &ArmConfig, gripper_angle: f64) -> f64 {
    (arm.gripper_max_gap - arm.gripper_gap_per_rad * gripper_angle).max(0.0)
}

fn check_len(what: &'static str, v: &[f64], n: usize) -> Result<()> {
    if v.len() == n {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected: n,
            got: v.len(),
        })
    }
}

/// Kinetic energy of both arms.
pub fn kinetic_energy(arm: &ArmConfig, s: &SceneState) -> f64 {
    let arm_ke = |js: &[JointState]| {
        js.iter()
            .zip(&arm.inertia)
            .map(|(j, &inertia)| 0.5 * inertia * j.velocity * j.velocity)
            .sum::<f64>()
    };
    arm_ke(&s.leader) + arm_ke(&s.follower)
}

/// The simulated world: two identical arms and one object.
#[derive(Clone, Debug)]
pub struct Plant {
    pub arm: ArmConfig,
    pub object: ObjectSpec,
    pub mu_hold: f64,
    pub capture_radius: f64,
}

impl Plant {
    pub fn new(arm: ArmConfig, object: ObjectSpec, scene: &SceneConfig) -> Result<Self> {
        arm.validate()?;
        object.validate()?;
        Ok(Self {
            arm,
            object,
            mu_hold: scene.mu_hold,
            capture_radius: scene.capture_radius,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.arm.n_joints()
    }

    /// Both arms at rest in the same configuration, object at its start position.
    pub fn initial_state(&self, angles: &[f64]) -> Result<SceneState> {
        let n = self.n_joints();
        if angles.len() != n {
            return Err(Error::Dimension {
                what: "initial joint angles",
                expected: n,
                got: angles.len(),
            });
        }
        ensure_finite(angles, "initial joint angles")?;
        let joints: Vec<JointState> = angles
            .iter()
            .zip(&self.arm.joint_limits)
            .map(|(&a, l)| JointState {
                angle: a.clamp(l[0], l[1]),
                ..Default::default()
            })
            .collect();
        Ok(SceneState {
            step_index: 0,
            time: 0.0,
            leader: joints.clone(),
            follower: joints,
            object_position: self.object.initial_position,
            object_present: true,
            object_held: false,
            object_crushed: false,
            grasp_offset: [0.0, 0.0],
            contact_force: 0.0,
            drawer_open_fraction: None,
        })
    }

    pub fn end_effector(&self, joints: &[JointState]) -> [f64; 2] {
        let angles: Vec<f64> = joints[..self.arm.dof].iter().map(|j| j.angle).collect();
        fk_unchecked(&angles, &self.arm.link_lengths)
    }

    pub fn chain(&self, joints: &[JointState]) -> Vec<[f64; 2]> {
        let angles: Vec<f64> = joints[..self.arm.dof].iter().map(|j| j.angle).collect();
        chain_points(&angles, &self.arm.link_lengths)
    }

    /// Advances one step with only the environment's own loads.
    pub fn step(
        &self,
        scene: &SceneState,
        leader_torques: &[f64],
        follower_torques: &[f64],
        dt: f64,
    ) -> Result<SceneState> {
        let zero = vec![0.0; self.n_joints()];
        self.step_with_loads(scene, leader_torques, follower_torques, &zero, &zero, dt)
    }

    /// Advances one step; `leader_load` / `follower_load` are extra resisting
    /// torques on top of contact and object weight.
    pub fn step_with_loads(
        &self,
        scene: &SceneState,
        leader_torques: &[f64],
        follower_torques: &[f64],
        leader_load: &[f64],
        follower_load: &[f64],
        dt: f64,
    ) -> Result<SceneState> {
        let n = self.n_joints();
        check_len("leader torques", leader_torques, n)?;
        check_len("leader load", leader_load, n)?;
        if scene.leader.len() != n {
            return Err(Error::Dimension {
                what: "scene leader joints",
                expected: n,
                got: scene.leader.len(),
            });
        }
        ensure_finite(leader_torques, "leader torques")?;
        ensure_finite(leader_load, "leader load")?;
        self.advance(scene, Some((leader_torques, leader_load)), follower_torques, follower_load, dt)
    }

    /// Advances only the follower; the leader entries of the scene are left
    /// untouched and never read.
    pub fn step_follower(
        &self,
        scene: &SceneState,
        follower_torques: &[f64],
        follower_load: &[f64],
        dt: f64,
    ) -> Result<SceneState> {
        self.advance(scene, None, follower_torques, follower_load, dt)
    }

    fn advance(
        &self,
        scene: &SceneState,
        leader: Option<(&[f64], &[f64])>,
        follower_torques: &[f64],
        follower_load: &[f64],
        dt: f64,
    ) -> Result<SceneState> {
        let n = self.n_joints();
        check_len("follower torques", follower_torques, n)?;
        check_len("follower load", follower_load, n)?;
        if scene.follower.len() != n {
            return Err(Error::Dimension {
                what: "scene follower joints",
                expected: n,
                got: scene.follower.len(),
            });
        }
        ensure_finite(follower_torques, "follower torques")?;
        ensure_finite(follower_load, "follower load")?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
        }

        let mut next = scene.clone();
        let dof = self.arm.dof;
        let g = dof;

        // Contact and grasp are resolved on the pre-step configuration.
        let ee = self.end_effector(&scene.follower);
        let mut force = 0.0;
        if scene.object_present && !scene.object_crushed {
            force = gripper_contact(
                &self.arm,
                scene.follower[g].angle,
                &self.object,
                scene.object_position,
                ee,
                self.capture_radius,
                scene.object_held,
            );
            if force > self.object.crush_force {
                next.object_crushed = true;
                next.object_held = false;
                force = 0.0;
            } else {
                let holds = force >= self.object.hold_force(self.mu_hold);
                if holds && !scene.object_held {
                    next.grasp_offset = [
                        scene.object_position[0] - ee[0],
                        scene.object_position[1] - ee[1],
                    ];
                }
                next.object_held = holds;
            }
        }
        next.contact_force = force;

        let mut f_load = follower_load.to_vec();
        f_load[g] += force * self.arm.gripper_gap_per_rad;
        if next.object_held {
            let w = self.object.mass * GRAVITY;
            let mut abs = 0.0;
            let mut x_proj = Vec::with_capacity(dof);
            for (j, &l) in scene.follower[..dof].iter().zip(&self.arm.link_lengths) {
                abs += j.angle;
                x_proj.push(l * abs.cos());
            }
            for i in 0..dof {
                f_load[i] += w * x_proj[i..].iter().sum::<f64>();
            }
        }

        if let Some((torques, load)) = leader {
            self.integrate_arm(&scene.leader, &mut next.leader, torques, load, dt);
        }
        self.integrate_arm(&scene.follower, &mut next.follower, follower_torques, &f_load, dt);

        if next.object_held {
            let ee = self.end_effector(&next.follower);
            next.object_position = [ee[0] + next.grasp_offset[0], ee[1] + next.grasp_offset[1]];
        }
        next.step_index = scene.step_index + 1;
        next.time = next.step_index as f64 * dt;
        Ok(next)
    }

    fn integrate_arm(
        &self,
        prev: &[JointState],
        out: &mut [JointState],
        torques: &[f64],
        loads: &[f64],
        dt: f64,
    ) {
        let arm = &self.arm;
        let mut abs = 0.0;
        for i in 0..prev.len() {
            let j = prev[i];
            let tau = torques[i].clamp(-arm.torque_limit, arm.torque_limit);
            let gravity = if i < arm.dof {
                abs += j.angle;
                arm.gravity_torque_scale[i] * abs.cos()
            } else {
                0.0
            };
            let inertia = arm.inertia[i];
            let drive = tau - gravity - loads[i];
            let coulomb = arm.coulomb_friction[i];
            let friction = arm.viscous_friction[i] * j.velocity + coulomb * sign0(j.velocity);
            let mut w = j.velocity + dt * (drive - friction) / inertia;
            if j.velocity == 0.0 && drive.abs() <= coulomb {
                // static friction holds a joint at rest
                w = 0.0;
            } else if j.velocity != 0.0 && w * j.velocity < 0.0 && drive.abs() <= coulomb {
                // friction alone cannot reverse the motion
                w = 0.0;
            }
            let mut q = j.angle + dt * w;
            let [lo, hi] = arm.joint_limits[i];
            if q < lo {
                q = lo;
                w = w.max(0.0);
            } else if q > hi {
                q = hi;
                w = w.min(0.0);
            }
            out[i] = JointState {
                angle: q,
                velocity: w,
                torque: tau,
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_joint(inertia: f64, viscous: f64) -> Plant {
        let arm = ArmConfig {
            dof: 1,
            link_lengths: vec![0.1],
            inertia: vec![inertia, 0.02],
            viscous_friction: vec![viscous, 0.0],
            coulomb_friction: vec![0.0, 0.0],
            gravity_torque_scale: vec![0.0, 0.0],
            joint_limits: vec![[-100.0, 100.0], [-0.1, 1.2]],
            torque_limit: 10.0,
            ..ArmConfig::default()
        };
        let mut obj = ObjectSpec::default();
        obj.initial_position = [5.0, 5.0];
        Plant::new(arm, obj, &SceneConfig::default()).unwrap()
    }

    fn zero_gravity_plant() -> Plant {
        let mut arm = ArmConfig::default();
        arm.gravity_torque_scale = vec![0.0; 3];
        let mut obj = ObjectSpec::default();
        obj.initial_position = [5.0, 5.0];
        Plant::new(arm, obj, &SceneConfig::default()).unwrap()
    }

    #[test]
    fn equilibrium_only_advances_time() {
        let p = zero_gravity_plant();
        let s0 = p.initial_state(&[0.3, -0.2, 0.1]).unwrap();
        let s1 = p.step(&s0, &[0.0; 3], &[0.0; 3], 0.001).unwrap();
        assert_eq!(s1.leader, s0.leader);
        assert_eq!(s1.follower, s0.follower);
        assert_eq!(s1.time, 0.001);
    }

    #[test]
    fn one_euler_step_by_hand() {
        let p = single_joint(0.1, 0.0);
        let s0 = p.initial_state(&[0.0, 0.0]).unwrap();
        let s1 = p.step(&s0, &[1.0, 0.0], &[0.0, 0.0], 0.001).unwrap();
        assert!((s1.leader[0].velocity - 0.01).abs() < 1e-15);
        assert!((s1.leader[0].angle - 1e-5).abs() < 1e-18);
        assert_eq!(s1.leader[0].torque, 1.0);
    }

    #[test]
    fn first_order_response_reaches_terminal_velocity() {
        // closed form: ω(t) = τ/D · (1 − e^{−D t / J})
        let (inertia, viscous, tau, dt) = (0.1, 1.0, 1.0, 0.001);
        let p = single_joint(inertia, viscous);
        let mut s = p.initial_state(&[0.0, 0.0]).unwrap();
        for _ in 0..5000 {
            s = p.step(&s, &[tau, 0.0], &[0.0, 0.0], dt).unwrap();
        }
        let analytic = tau / viscous * (1.0 - (-viscous * 5.0 / inertia).exp());
        let w = s.leader[0].velocity;
        assert!((w - 1.0).abs() < 0.01, "ω = {w}");
        assert!((w - analytic).abs() < 1e-6);
    }

    #[test]
    fn torque_is_clamped() {
        let p = single_joint(0.1, 0.0);
        let s0 = p.initial_state(&[0.0, 0.0]).unwrap();
        let s1 = p.step(&s0, &[1e3, 0.0], &[0.0, 0.0], 0.001).unwrap();
        assert_eq!(s1.leader[0].torque, 10.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = zero_gravity_plant();
        let s0 = p.initial_state(&[0.0; 3]).unwrap();
        assert!(matches!(
            p.step(&s0, &[0.0; 2], &[0.0; 3], 0.001),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            p.step(&s0, &[f64::NAN, 0.0, 0.0], &[0.0; 3], 0.001),
            Err(Error::NonFinite(_))
        ));
        assert!(p.step(&s0, &[0.0; 3], &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn contact_force_examples() {
        let arm = ArmConfig::default();
        let mut obj = ObjectSpec::default();
        obj.contact_stiffness = 500.0;
        obj.radius = 0.02;
        // gap = 0.04 - 0.002 → 2 mm past the surface
        let angle = (arm.gripper_max_gap - 0.038) / arm.gripper_gap_per_rad;
        let f = gripper_contact(&arm, angle, &obj, [0.1, 0.0], [0.1, 0.0], 0.02, false);
        assert!((f - 1.0).abs() < 1e-9, "{f}");
        assert_eq!(gripper_contact(&arm, 0.0, &obj, [0.1, 0.0], [0.1, 0.0], 0.02, false), 0.0);
        // out of reach of the fingers
        assert_eq!(gripper_contact(&arm, angle, &obj, [0.2, 0.0], [0.1, 0.0], 0.02, false), 0.0);
    }

    #[test]
    fn grasp_hold_and_crush() {
        let scene = SceneConfig::default();
        let arm = ArmConfig::default();
        let ee = crate::kinematics::fk_unchecked(&[0.0, 0.0], &arm.link_lengths);
        let mut obj = ObjectSpec::preset("softball").unwrap();
        obj.initial_position = ee;
        let plant = Plant::new(arm.clone(), obj.clone(), &scene).unwrap();
        let hold = obj.hold_force(scene.mu_hold);
        // squeeze just past the hold threshold
        let pen = 1.5 * hold / obj.contact_stiffness;
        let angle = (arm.gripper_max_gap - (2.0 * obj.radius - pen)) / arm.gripper_gap_per_rad;
        let mut s = plant.initial_state(&[0.0, 0.0, angle]).unwrap();
        s = plant.step(&s, &[0.0; 3], &[0.0, 0.0, 0.0], 0.001).unwrap();
        assert!(s.object_held);
        assert!(s.contact_force >= hold);

        // crush: squeeze far past the crush force
        let mut crushed = obj.clone();
        crushed.crush_force = 0.5;
        let plant = Plant::new(arm, crushed, &scene).unwrap();
        let s = plant.initial_state(&[0.0, 0.0, angle]).unwrap();
        let s = plant.step(&s, &[0.0; 3], &[0.0; 3], 0.001).unwrap();
        assert!(s.object_crushed && !s.object_held);
    }

    proptest! {
        #[test]
        fn kinetic_energy_non_increasing_without_drive(
            w in proptest::collection::vec(-3.0f64..3.0, 6),
            q in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let p = zero_gravity_plant();
            let mut s = p.initial_state(&[q[0], q[1], 0.5]).unwrap();
            for i in 0..3 {
                s.leader[i].velocity = w[i];
                s.follower[i].velocity = w[3 + i];
            }
            let mut ke = kinetic_energy(&p.arm, &s);
            for _ in 0..300 {
                s = p.step(&s, &[0.0; 3], &[0.0; 3], 0.001).unwrap();
                let k = kinetic_energy(&p.arm, &s);
                prop_assert!(k <= ke + 1e-15, "{} > {}", k, ke);
                ke = k;
            }
        }

        #[test]
        fn joint_limits_never_violated(
            torques in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            let p = zero_gravity_plant();
            let mut s = p.initial_state(&[0.0, 0.0, 0.0]).unwrap();
            for _ in 0..2000 {
                s = p.step(&s, &torques[..3], &torques[3..], 0.001).unwrap();
                for (j, l) in s.leader.iter().chain(&s.follower).zip(p.arm.joint_limits.iter().cycle()) {
                    prop_assert!(j.angle >= l[0] && j.angle <= l[1]);
                }
            }
        }

        #[test]
        fn stepping_is_deterministic(
            torques in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let p = Plant::new(ArmConfig::default(), ObjectSpec::default(), &SceneConfig::default()).unwrap();
            let run = || {
                let mut s = p.initial_state(&[0.2, 0.4, 0.0]).unwrap();
                let mut out = Vec::new();
                for _ in 0..200 {
                    s = p.step(&s, &torques[..3], &torques[3..], 0.001).unwrap();
                    out.push(s.clone());
                }
                out
            };
            let a = run();
            let b = run();
            for (x, y) in a.iter().zip(&b) {
                for (u, v) in x.follower.iter().zip(&y.follower) {
                    prop_assert_eq!(u.angle.to_bits(), v.angle.to_bits());
                    prop_assert_eq!(u.velocity.to_bits(), v.velocity.to_bits());
                }
            }
        }
    }
}

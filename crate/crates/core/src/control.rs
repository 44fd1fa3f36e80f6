//! Per-axis position/force control with disturbance and reaction-force
//! observers, and the four-channel bilateral coupling built on top of it.
//!
//! Torque sign convention: `tau_dis_hat` estimates everything that resists the
//! motor (friction, gravity, external load), and `tau_res` is that estimate
//! with the modelled internal terms removed, i.e. the external load alone.
//! An operator pushing the leader forward therefore shows up as a negative
//! `tau_res`, and a follower pressing on an object as a positive one, so the
//! two cancel when forces balance.

use serde::{Deserialize, Serialize};

use crate::config::{ArmConfig, ControlConfig};
use crate::dynamics::{sign0, JointState};
use crate::error::{ensure_finite, Error, Result};

/// DOB/RFOB state of one joint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObserverState {
    /// Low-pass integrator state (N·m).
    pub z: f64,
    /// Disturbance estimate, always `z − g_dob·J_n·ω` for the last ω seen.
    pub tau_dis_hat: f64,
    /// External (reaction) torque estimate.
    pub tau_res: f64,
}

/// Gains and controller-side plant model for one joint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlGains {
    pub kp: f64,
    pub kd: f64,
    pub kf: f64,
    pub g_dob: f64,
    pub j_nominal: f64,
    pub d_nominal: f64,
    pub coulomb_nominal: f64,
    pub gravity_nominal_scale: f64,
}

impl ControlGains {
    /// One entry per joint; nominal values default to the true plant.
    pub fn for_arm(cfg: &ControlConfig, arm: &ArmConfig) -> Result<Vec<ControlGains>> {
        let n = arm.n_joints();
        let pick = |nominal: &Vec<f64>, truth: &Vec<f64>, what: &'static str| -> Result<Vec<f64>> {
            if nominal.is_empty() {
                Ok(truth.clone())
            } else if nominal.len() == n {
                Ok(nominal.clone())
            } else {
                Err(Error::Dimension {
                    what,
                    expected: n,
                    got: nominal.len(),
                })
            }
        };
        let j = pick(&cfg.inertia_nominal, &arm.inertia, "control.inertia_nominal")?;
        let d = pick(&cfg.viscous_nominal, &arm.viscous_friction, "control.viscous_nominal")?;
        let c = pick(&cfg.coulomb_nominal, &arm.coulomb_friction, "control.coulomb_nominal")?;
        let g = pick(&cfg.gravity_nominal, &arm.gravity_torque_scale, "control.gravity_nominal")?;
        Ok((0..n)
            .map(|i| ControlGains {
                kp: cfg.kp,
                kd: cfg.kd,
                kf: cfg.kf,
                g_dob: cfg.g_dob,
                j_nominal: j[i],
                d_nominal: d[i],
                coulomb_nominal: c[i],
                gravity_nominal_scale: g[i],
            })
            .collect())
    }
}

/// Leader-side reference for the follower: either the real leader's state
/// or a policy's prediction of it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeaderCommand {
    pub angle: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Stands in for the leader's reaction torque `tau_res`.
    pub torque: Vec<f64>,
}

impl LeaderCommand {
    pub fn len(&self) -> usize {
        self.angle.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angle.is_empty()
    }

    /// Splits a packed `[angles, velocities, torques]` row.
    pub fn from_packed(row: &[f64]) -> Self {
        let n = row.len() / 3;
        LeaderCommand {
            angle: row[..n].to_vec(),
            velocity: row[n..2 * n].to_vec(),
            torque: row[2 * n..3 * n].to_vec(),
        }
    }
}

/// One forward-Euler step of the momentum-form disturbance observer.
pub fn dob_update(
    obs: ObserverState,
    tau_ref: f64,
    omega: f64,
    gains: &ControlGains,
    dt: f64,
) -> Result<ObserverState> {
    if !(tau_ref.is_finite() && omega.is_finite()) {
        return Err(Error::NonFinite("dob_update input"));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    let g = gains.g_dob;
    let momentum = g * gains.j_nominal * omega;
    let z = obs.z + dt * g * (tau_ref + momentum - obs.z);
    Ok(ObserverState {
        z,
        tau_dis_hat: z - momentum,
        tau_res: obs.tau_res,
    })
}

/// Removes the modelled friction and gravity from the disturbance estimate.
/// `theta` is the absolute link angle seen by the gravity model.
pub fn rfob_update(obs: ObserverState, theta: f64, omega: f64, gains: &ControlGains) -> ObserverState {
    ObserverState {
        tau_res: obs.tau_dis_hat
            - gains.d_nominal * omega
            - gains.coulomb_nominal * sign0(omega)
            - gains.gravity_nominal_scale * theta.cos(),
        ..obs
    }
}

/// Re-evaluates the observer outputs against a fresh velocity measurement
/// without advancing the integrator.
pub fn observe(obs: ObserverState, theta: f64, omega: f64, gains: &ControlGains) -> ObserverState {
    let dis = ObserverState {
        tau_dis_hat: obs.z - gains.g_dob * gains.j_nominal * omega,
        ..obs
    };
    rfob_update(dis, theta, omega, gains)
}

/// Position-servo part of the coupling, `J_n·(kp·e_p + kd·e_v)/2`.
pub fn position_term(gains: &ControlGains, e_p: f64, e_v: f64) -> f64 {
    gains.j_nominal * (gains.kp * e_p + gains.kd * e_v) / 2.0
}

/// Force-servo part, `−(kf/2)·(τ^res_l + τ^res_f)`.
pub fn force_term(gains: &ControlGains, e_f: f64) -> f64 {
    -(gains.kf / 2.0) * e_f
}

/// Absolute link angles of a planar chain; joints past `dof` keep their own angle.
pub fn absolute_angles(joints: &[JointState], dof: usize) -> Vec<f64> {
    let mut abs = 0.0;
    joints
        .iter()
        .enumerate()
        .map(|(i, j)| {
            if i < dof {
                abs += j.angle;
                abs
            } else {
                j.angle
            }
        })
        .collect()
}

/// Four-channel bilateral law for one arm pair.
///
/// Torques are computed from the observer outputs in `obs_l` / `obs_f`, then
/// both observers are advanced with the emitted torques.
pub fn bilateral_step(
    leader: &[JointState],
    follower: &[JointState],
    obs_l: &mut [ObserverState],
    obs_f: &mut [ObserverState],
    gains: &[ControlGains],
    dof: usize,
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = gains.len();
    for (what, got) in [
        ("leader joints", leader.len()),
        ("follower joints", follower.len()),
        ("leader observers", obs_l.len()),
        ("follower observers", obs_f.len()),
    ] {
        if got != n {
            return Err(Error::Dimension {
                what,
                expected: n,
                got,
            });
        }
    }
    let mut tau_l = Vec::with_capacity(n);
    let mut tau_f = Vec::with_capacity(n);
    for i in 0..n {
        let g = &gains[i];
        let pos = position_term(g, leader[i].angle - follower[i].angle, leader[i].velocity - follower[i].velocity);
        let force = force_term(g, obs_l[i].tau_res + obs_f[i].tau_res);
        tau_l.push(-pos + force + obs_l[i].tau_dis_hat);
        tau_f.push(pos + force + obs_f[i].tau_dis_hat);
    }
    advance_observers(leader, obs_l, &tau_l, gains, dof, dt)?;
    advance_observers(follower, obs_f, &tau_f, gains, dof, dt)?;
    Ok((tau_l, tau_f))
}

/// The follower half of [`bilateral_step`] with the leader replaced by `command`.
pub fn follower_autonomous_step(
    command: &LeaderCommand,
    follower: &[JointState],
    obs_f: &mut [ObserverState],
    gains: &[ControlGains],
    dof: usize,
    dt: f64,
) -> Result<Vec<f64>> {
    let n = gains.len();
    for (what, got) in [
        ("command angles", command.angle.len()),
        ("command velocities", command.velocity.len()),
        ("command torques", command.torque.len()),
        ("follower joints", follower.len()),
        ("follower observers", obs_f.len()),
    ] {
        if got != n {
            return Err(Error::Dimension {
                what,
                expected: n,
                got,
            });
        }
    }
    ensure_finite(&command.angle, "command angles")?;
    ensure_finite(&command.velocity, "command velocities")?;
    ensure_finite(&command.torque, "command torques")?;
    let tau_f: Vec<f64> = (0..n)
        .map(|i| {
            let g = &gains[i];
            position_term(
                g,
                command.angle[i] - follower[i].angle,
                command.velocity[i] - follower[i].velocity,
            ) + force_term(g, command.torque[i] + obs_f[i].tau_res)
                + obs_f[i].tau_dis_hat
        })
        .collect();
    advance_observers(follower, obs_f, &tau_f, gains, dof, dt)?;
    Ok(tau_f)
}

fn advance_observers(
    joints: &[JointState],
    obs: &mut [ObserverState],
    torques: &[f64],
    gains: &[ControlGains],
    dof: usize,
    dt: f64,
) -> Result<()> {
    let abs = absolute_angles(joints, dof);
    for i in 0..joints.len() {
        let o = dob_update(obs[i], torques[i], joints[i].velocity, &gains[i], dt)?;
        obs[i] = rfob_update(o, abs[i], joints[i].velocity, &gains[i]);
    }
    Ok(())
}

/// Observer bank for one arm: refreshes outputs on each new measurement,
/// optionally differentiating the encoder angle instead of reading velocity.
#[derive(Clone, Debug)]
pub struct ArmObserver {
    pub obs: Vec<ObserverState>,
    differenced: bool,
    prev_angles: Option<Vec<f64>>,
}

impl ArmObserver {
    pub fn new(n: usize, differenced: bool) -> Self {
        Self {
            obs: vec![ObserverState::default(); n],
            differenced,
            prev_angles: None,
        }
    }

    /// Starts the observers at the modelled static load of `joints`, so a
    /// resting arm begins with `tau_res = 0`.
    pub fn prime(&mut self, joints: &[JointState], gains: &[ControlGains], dof: usize) {
        let abs = absolute_angles(joints, dof);
        for (i, o) in self.obs.iter_mut().enumerate() {
            let g = &gains[i];
            let load = g.gravity_nominal_scale * abs[i].cos();
            o.z = load + g.g_dob * g.j_nominal * joints[i].velocity;
            *o = observe(*o, abs[i], joints[i].velocity, g);
        }
        self.prev_angles = Some(joints.iter().map(|j| j.angle).collect());
    }

    /// Measured joint states, with velocity replaced by a backward difference
    /// when differencing is on.
    pub fn measure(&mut self, joints: &[JointState], dt: f64) -> Vec<JointState> {
        if !self.differenced {
            return joints.to_vec();
        }
        let prev = self
            .prev_angles
            .replace(joints.iter().map(|j| j.angle).collect());
        joints
            .iter()
            .enumerate()
            .map(|(i, j)| JointState {
                velocity: prev.as_ref().map_or(0.0, |p| (j.angle - p[i]) / dt),
                ..*j
            })
            .collect()
    }

    pub fn refresh(&mut self, measured: &[JointState], gains: &[ControlGains], dof: usize) {
        let abs = absolute_angles(measured, dof);
        for (i, o) in self.obs.iter_mut().enumerate() {
            *o = observe(*o, abs[i], measured[i].velocity, &gains[i]);
        }
    }
}

//! A plant plus controller pair stepped at the control rate.

use crate::config::{ObjectSpec, SimConfig};
use crate::control::{bilateral_step, follower_autonomous_step, ArmObserver, ControlGains, LeaderCommand};
use crate::dynamics::{JointState, Plant, SceneState};
use crate::error::Result;

/// One control period of a rig, as seen by loggers.
///
/// `leader` / `follower` are the measured states at the start of the period
/// with `torque` holding the reaction estimate `tau_res`.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub leader_torques: Vec<f64>,
    pub follower_torques: Vec<f64>,
    pub leader: Vec<JointState>,
    pub follower: Vec<JointState>,
}

fn with_tau_res(measured: &[JointState], obs: &ArmObserver) -> Vec<JointState> {
    measured
        .iter()
        .zip(&obs.obs)
        .map(|(j, o)| JointState { torque: o.tau_res, ..*j })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Rig {
    pub plant: Plant,
    pub gains: Vec<ControlGains>,
    pub leader_obs: ArmObserver,
    pub follower_obs: ArmObserver,
    pub scene: SceneState,
    pub dt: f64,
}

impl Rig {
    pub fn new(cfg: &SimConfig, object: ObjectSpec, initial_angles: &[f64]) -> Result<Self> {
        let plant = Plant::new(cfg.arm.clone(), object, &cfg.scene)?;
        let gains = ControlGains::for_arm(&cfg.control, &cfg.arm)?;
        let scene = plant.initial_state(initial_angles)?;
        let n = plant.n_joints();
        let dof = plant.arm.dof;
        let mut leader_obs = ArmObserver::new(n, cfg.control.differenced_velocity);
        let mut follower_obs = ArmObserver::new(n, cfg.control.differenced_velocity);
        leader_obs.prime(&scene.leader, &gains, dof);
        follower_obs.prime(&scene.follower, &gains, dof);
        Ok(Self {
            plant,
            gains,
            leader_obs,
            follower_obs,
            scene,
            dt: cfg.scene.dt,
        })
    }

    pub fn dof(&self) -> usize {
        self.plant.arm.dof
    }

    pub fn n_joints(&self) -> usize {
        self.plant.n_joints()
    }

    /// Leader reaction-torque estimates from the latest refresh.
    pub fn leader_tau_res(&self) -> Vec<f64> {
        self.leader_obs.obs.iter().map(|o| o.tau_res).collect()
    }

    pub fn follower_tau_res(&self) -> Vec<f64> {
        self.follower_obs.obs.iter().map(|o| o.tau_res).collect()
    }

    /// Refreshes both observer banks against the current plant state.
    pub fn sense(&mut self) -> (Vec<JointState>, Vec<JointState>) {
        let dof = self.dof();
        let l = self.leader_obs.measure(&self.scene.leader, self.dt);
        let f = self.follower_obs.measure(&self.scene.follower, self.dt);
        self.leader_obs.refresh(&l, &self.gains, dof);
        self.follower_obs.refresh(&f, &self.gains, dof);
        (l, f)
    }

    /// One bilateral control period: sense, control, advance the plant.
    /// Loads are resisting torques (an operator pushing forward is negative).
    pub fn step_bilateral(&mut self, leader_load: &[f64], follower_load: &[f64]) -> Result<StepRecord> {
        let dof = self.dof();
        let (l, f) = self.sense();
        let leader = with_tau_res(&l, &self.leader_obs);
        let follower = with_tau_res(&f, &self.follower_obs);
        let (tl, tf) = bilateral_step(
            &l,
            &f,
            &mut self.leader_obs.obs,
            &mut self.follower_obs.obs,
            &self.gains,
            dof,
            self.dt,
        )?;
        self.scene = self
            .plant
            .step_with_loads(&self.scene, &tl, &tf, leader_load, follower_load, self.dt)?;
        Ok(StepRecord {
            leader_torques: tl,
            follower_torques: tf,
            leader,
            follower,
        })
    }

    /// Measures the follower and refreshes its observers. The returned states
    /// carry `tau_res` in `torque`.
    pub fn sense_follower(&mut self) -> Vec<JointState> {
        let dof = self.dof();
        let f = self.follower_obs.measure(&self.scene.follower, self.dt);
        self.follower_obs.refresh(&f, &self.gains, dof);
        with_tau_res(&f, &self.follower_obs)
    }

    /// Applies the autonomous law against a measurement from
    /// [`Rig::sense_follower`] and advances the follower only.
    pub fn actuate_follower(
        &mut self,
        command: &LeaderCommand,
        measured: &[JointState],
        follower_load: &[f64],
    ) -> Result<Vec<f64>> {
        let dof = self.dof();
        let tf = follower_autonomous_step(command, measured, &mut self.follower_obs.obs, &self.gains, dof, self.dt)?;
        self.scene = self.plant.step_follower(&self.scene, &tf, follower_load, self.dt)?;
        Ok(tf)
    }

    /// One autonomous control period; the leader arm is not read or advanced.
    pub fn step_autonomous(&mut self, command: &LeaderCommand, follower_load: &[f64]) -> Result<Vec<f64>> {
        let f = self.sense_follower();
        self.actuate_follower(command, &f, follower_load)
    }
}

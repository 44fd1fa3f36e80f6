//! The simulation side of the bridge, free of any I/O timing.

use std::path::{Path, PathBuf};

use crate::config::SimConfig;
use crate::dynamics::SceneState;
use crate::episode::{Episode, EpisodeInfo};
use crate::error::{Error, Result};
use crate::observation::pack_state;
use crate::runtime::collect::{episode_path, render_snapshots, QualityGate};
use crate::runtime::expert::{home_angles, operator_load, pose_at};
use crate::runtime::Rig;

use super::protocol::{wire_round, ClientMessage, RecordAction, StateFrame};

#[derive(Default)]
struct Take {
    follower: Vec<Vec<f64>>,
    leader: Vec<Vec<f64>>,
    snapshots: Vec<SceneState>,
}

/// A bilateral rig whose leader is pulled toward client targets.
pub struct TeleopSession {
    cfg: SimConfig,
    rig: Rig,
    targets: Vec<f64>,
    take: Option<Take>,
    out_dir: Option<PathBuf>,
    gate: QualityGate,
    steps: u64,
    saved: Vec<PathBuf>,
}

impl TeleopSession {
    /// `out_dir` of `None` disables recording.
    pub fn new(cfg: &SimConfig, out_dir: Option<PathBuf>, gate: QualityGate) -> Result<Self> {
        cfg.validate()?;
        let home = home_angles(cfg);
        Ok(Self {
            rig: Rig::new(cfg, cfg.object.clone(), &home)?,
            cfg: cfg.clone(),
            targets: home,
            take: None,
            out_dir,
            gate,
            steps: 0,
            saved: Vec::new(),
        })
    }

    pub fn scene(&self) -> &SceneState {
        &self.rig.scene
    }

    pub fn rig(&self) -> &Rig {
        &self.rig
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn is_recording(&self) -> bool {
        self.take.is_some()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Episodes written so far.
    pub fn saved(&self) -> &[PathBuf] {
        &self.saved
    }

    /// Applies one client message. Errors are reported to the client and
    /// leave the session running.
    pub fn handle(&mut self, msg: &ClientMessage) -> Result<()> {
        match *msg {
            ClientMessage::Target { x, y, grip } => {
                let g = self.cfg.arm.dof;
                let grip_max = self.cfg.arm.joint_limits[g][1];
                self.targets = pose_at(&self.cfg, [x, y], grip * grip_max)?;
            }
            ClientMessage::Record { action } => match action {
                RecordAction::Start => {
                    if self.out_dir.is_none() {
                        return Err(Error::InvalidArgument("recording is disabled (no output directory)".into()));
                    }
                    if self.take.is_some() {
                        return Err(Error::InvalidArgument("already recording".into()));
                    }
                    self.take = Some(Take::default());
                }
                RecordAction::Stop => {
                    let take = self
                        .take
                        .take()
                        .ok_or_else(|| Error::InvalidArgument("not recording".into()))?;
                    let path = self.finish(take)?;
                    log::info!("saved teleop episode {}", path.display());
                    self.saved.push(path);
                }
                RecordAction::Discard => {
                    if self.take.take().is_none() {
                        return Err(Error::InvalidArgument("not recording".into()));
                    }
                }
            },
            ClientMessage::Reset => {
                let home = home_angles(&self.cfg);
                self.rig = Rig::new(&self.cfg, self.cfg.object.clone(), &home)?;
                self.targets = home;
                self.take = None;
            }
        }
        Ok(())
    }

    fn finish(&self, take: Take) -> Result<PathBuf> {
        if take.follower.is_empty() {
            return Err(Error::Invariant("episode rejected: no ticks recorded".into()));
        }
        self.gate
            .check(&self.gate.metrics(&take.follower, &take.leader, self.cfg.scene.sample_rate))
            .map_err(|e| Error::Invariant(format!("episode rejected: {e}")))?;
        let (overhead, gripper) = render_snapshots(&self.cfg, &self.cfg.object, &take.snapshots);
        let ep = Episode::new(
            EpisodeInfo {
                control_rate: 1.0 / self.cfg.scene.dt,
                sample_rate: self.cfg.scene.sample_rate,
                object_spec: self.cfg.object.clone(),
                task: self.cfg.scene.task,
                expert: "teleop".into(),
                seed: 0,
            },
            take.follower,
            take.leader,
            overhead,
            gripper,
        )?;
        let dir = self.out_dir.as_deref().expect("recording implies an output directory");
        let path = next_free(dir);
        ep.save(&path)?;
        Ok(path)
    }

    /// One control period of the bilateral loop.
    pub fn step(&mut self) -> Result<()> {
        let n = self.rig.n_joints();
        let sample = self.take.is_some() && self.steps % self.cfg.scene.substeps() as u64 == 0;
        let load = operator_load(&self.cfg, &self.targets, &self.rig.scene.leader);
        let before = sample.then(|| self.rig.scene.clone());
        let r = self.rig.step_bilateral(&load, &vec![0.0; n])?;
        if let (Some(s), Some(take)) = (before, self.take.as_mut()) {
            take.follower.push(pack_state(&r.follower));
            take.leader.push(pack_state(&r.leader));
            take.snapshots.push(s);
        }
        self.steps += 1;
        Ok(())
    }

    pub fn state(&self) -> StateFrame {
        let s = &self.rig.scene;
        let round = |v: Vec<f64>| v.into_iter().map(wire_round).collect::<Vec<_>>();
        StateFrame {
            t: wire_round(s.time),
            leader: round(s.leader.iter().map(|j| j.angle).collect()),
            follower: round(s.follower.iter().map(|j| j.angle).collect()),
            tau_res_l: round(self.rig.leader_tau_res()),
            tau_res_f: round(self.rig.follower_tau_res()),
            object: s.object_position.map(wire_round),
            held: s.object_held,
            recording: self.take.is_some(),
        }
    }
}

fn next_free(dir: &Path) -> PathBuf {
    (0..)
        .map(|i| episode_path(dir, i))
        .find(|p| !p.exists())
        .expect("some index is free")
}

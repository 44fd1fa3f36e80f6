//! Autonomous execution: a chunk source stands in for the leader arm.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ObjectSpec, SimConfig};
use crate::control::LeaderCommand;
use crate::dynamics::SceneState;
use crate::error::{Error, Result};
use crate::observation::{pack_state, Frame, Renderer, View};
use crate::policy::Policy;

use super::expert::home_angles;
use super::rig::Rig;
use super::task::{Outcome, PhaseTracker, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    ChunkSerial,
    TemporalEnsemble,
}

impl std::str::FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chunk_serial" | "serial" => Ok(ExecMode::ChunkSerial),
            "temporal_ensemble" | "ensemble" => Ok(ExecMode::TemporalEnsemble),
            _ => Err(Error::InvalidArgument(format!(
                "unknown execution mode '{s}' (chunk_serial | ensemble)"
            ))),
        }
    }
}

/// How predicted chunks become per-tick commands. Commands are held over
/// the plant substeps of each tick.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkSchedule {
    pub k: usize,
    pub mode: ExecMode,
    /// `m` in `exp(−m·age)`; ensemble mode only.
    pub decay: f64,
}

impl ChunkSchedule {
    pub fn chunk_serial(k: usize) -> Self {
        Self {
            k,
            mode: ExecMode::ChunkSerial,
            decay: 0.0,
        }
    }

    pub fn temporal_ensemble(k: usize, decay: f64) -> Self {
        Self {
            k,
            mode: ExecMode::TemporalEnsemble,
            decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("chunk length k must be >= 1".into()));
        }
        if self.mode == ExecMode::TemporalEnsemble && !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::InvalidArgument("ensemble decay m must be > 0".into()));
        }
        Ok(())
    }

    pub fn infers_at(&self, tick: usize) -> bool {
        match self.mode {
            ExecMode::ChunkSerial => tick % self.k == 0,
            ExecMode::TemporalEnsemble => true,
        }
    }
}

/// Normalized `exp(−m·age)` weights; age 0 is the newest chunk.
pub fn ensemble_weights(ages: &[usize], m: f64) -> Vec<f64> {
    let raw: Vec<f64> = ages.iter().map(|&a| (-m * a as f64).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Anything that maps an observation to `k` packed leader rows.
pub trait ChunkSource {
    /// `follower` is the packed follower state; frames are `None` when
    /// [`ChunkSource::uses_frames`] is false.
    fn predict(&mut self, tick: usize, follower: &[f64], frames: Option<(&Frame, &Frame)>) -> Result<Vec<Vec<f64>>>;

    fn uses_frames(&self) -> bool {
        true
    }
}

/// A trained policy as a chunk source.
pub struct PolicySource<'a> {
    policy: &'a Policy,
}

impl<'a> PolicySource<'a> {
    pub fn new(policy: &'a Policy, n_joints: usize) -> Result<Self> {
        policy.check_joints(n_joints)?;
        Ok(Self { policy })
    }
}

impl ChunkSource for PolicySource<'_> {
    fn predict(&mut self, _tick: usize, follower: &[f64], frames: Option<(&Frame, &Frame)>) -> Result<Vec<Vec<f64>>> {
        let (o, g) = frames.ok_or_else(|| Error::InvalidArgument("policy needs camera frames".into()))?;
        self.policy.act(follower, o, g)
    }
}

/// Emits a recorded leader log, repeating its last row past the end.
pub struct ReplaySource {
    pub leader: Vec<Vec<f64>>,
    pub k: usize,
}

impl ChunkSource for ReplaySource {
    fn predict(&mut self, tick: usize, _follower: &[f64], _frames: Option<(&Frame, &Frame)>) -> Result<Vec<Vec<f64>>> {
        let last = self.leader.len() - 1;
        Ok((tick..tick + self.k).map(|t| self.leader[t.min(last)].clone()).collect())
    }

    fn uses_frames(&self) -> bool {
        false
    }
}

/// One logged tick of an autonomous run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub tick: usize,
    pub time: f64,
    /// Packed follower state with `tau_res` as torque.
    pub follower: Vec<f64>,
    pub end_effector: [f64; 2],
    pub command: Vec<f64>,
    pub object: [f64; 2],
    pub held: bool,
    pub contact_force: f64,
}

pub fn trajectory_csv_header(n: usize) -> String {
    let mut cols = vec!["tick".to_string(), "t".to_string()];
    for p in ["q", "dq", "tau_res"] {
        cols.extend((0..n).map(|i| format!("{p}{i}")));
    }
    cols.extend(["ee_x", "ee_y"].map(String::from));
    for p in ["cmd_q", "cmd_dq", "cmd_tau"] {
        cols.extend((0..n).map(|i| format!("{p}{i}")));
    }
    cols.extend(["object_x", "object_y", "held", "contact_force"].map(String::from));
    cols.join(",")
}

impl TrajectoryRow {
    pub fn to_csv(&self) -> String {
        let mut cols = vec![self.tick.to_string(), format!("{:.3}", self.time)];
        cols.extend(self.follower.iter().map(|v| format!("{v:.6}")));
        cols.extend(self.end_effector.iter().map(|v| format!("{v:.6}")));
        cols.extend(self.command.iter().map(|v| format!("{v:.6}")));
        cols.extend(self.object.iter().map(|v| format!("{v:.6}")));
        cols.push((self.held as u8).to_string());
        cols.push(format!("{:.4}", self.contact_force));
        cols.join(",")
    }
}

#[derive(Clone, Debug)]
pub struct ExecutionLog {
    pub rows: Vec<TrajectoryRow>,
    /// Ticks at which the source was queried.
    pub inference_ticks: Vec<usize>,
    /// Plant substeps run at each tick.
    pub substeps_per_tick: Vec<usize>,
    pub final_scene: SceneState,
    pub outcome: Outcome,
    pub success: bool,
    /// Set when the run stopped on a non-finite command.
    pub aborted: Option<String>,
    /// Slowest single query (ms).
    pub max_inference_ms: f64,
}

impl ExecutionLog {
    pub fn write_csv(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let n = self.rows.first().map_or(0, |r| r.follower.len() / 3);
        writeln!(w, "{}", trajectory_csv_header(n))?;
        for r in &self.rows {
            writeln!(w, "{}", r.to_csv())?;
        }
        Ok(())
    }
}

struct LiveChunk {
    start: usize,
    rows: Vec<Vec<f64>>,
}

/// Runs `ticks` policy ticks (default: the task time limit) of autonomous
/// control. `object.initial_position` fixes the scene.
pub fn execute_autonomous(
    cfg: &SimConfig,
    object: &ObjectSpec,
    task: &TaskSpec,
    source: &mut dyn ChunkSource,
    schedule: ChunkSchedule,
    ticks: Option<usize>,
) -> Result<ExecutionLog> {
    cfg.validate()?;
    schedule.validate()?;
    task.validate()?;
    let mut rig = Rig::new(cfg, object.clone(), &home_angles(cfg))?;
    // the leader arm does not exist in autonomous mode
    rig.scene.leader.clear();
    let n = rig.n_joints();
    let s = 3 * n;
    let zero = vec![0.0; n];
    let sub = cfg.scene.substeps();
    let total = ticks.unwrap_or((task.time_limit * cfg.scene.sample_rate).round() as usize);
    let renderer = source.uses_frames().then(|| Renderer::new(&cfg.arm, object, &cfg.scene));
    let mut log = ExecutionLog {
        rows: Vec::with_capacity(total),
        inference_ticks: Vec::new(),
        substeps_per_tick: Vec::with_capacity(total),
        final_scene: rig.scene.clone(),
        outcome: Outcome::default(),
        success: false,
        aborted: None,
        max_inference_ms: 0.0,
    };
    let mut tracker = PhaseTracker::default();
    let mut live: Vec<LiveChunk> = Vec::new();
    'ticks: for tick in 0..total {
        let measured = rig.sense_follower();
        let packed = pack_state(&measured);
        if schedule.infers_at(tick) {
            let frames = renderer
                .as_ref()
                .map(|r| (r.render(&rig.scene, View::Overhead), r.render(&rig.scene, View::Gripper)));
            let start = Instant::now();
            let rows = match source.predict(tick, &packed, frames.as_ref().map(|(o, g)| (o, g))) {
                Ok(rows) => rows,
                Err(Error::NonFinite(what)) => {
                    log.aborted = Some(format!("non-finite {what} at tick {tick}"));
                    break 'ticks;
                }
                Err(e) => return Err(e),
            };
            log.max_inference_ms = log.max_inference_ms.max(start.elapsed().as_secs_f64() * 1e3);
            log.inference_ticks.push(tick);
            if rows.is_empty() || rows.iter().any(|r| r.len() != s) {
                return Err(Error::Dimension {
                    what: "predicted chunk row",
                    expected: s,
                    got: rows.first().map_or(0, |r| r.len()),
                });
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                log.aborted = Some(format!("non-finite command at tick {tick}"));
                break 'ticks;
            }
            if schedule.mode == ExecMode::ChunkSerial {
                live.clear();
            }
            live.push(LiveChunk { start: tick, rows });
        }
        live.retain(|c| tick < c.start + schedule.k.max(1));
        let row = command_row(&live, tick, &schedule, s);
        let command = LeaderCommand::from_packed(&row);
        let mut steps = 0;
        for j in 0..sub {
            let m = if j == 0 { measured.clone() } else { rig.sense_follower() };
            rig.actuate_follower(&command, &m, &zero)?;
            steps += 1;
            tracker.observe(&rig.scene, task);
        }
        log.substeps_per_tick.push(steps);
        log.rows.push(TrajectoryRow {
            tick,
            time: tick as f64 / cfg.scene.sample_rate,
            end_effector: rig.plant.end_effector(&measured),
            follower: packed,
            command: row,
            object: rig.scene.object_position,
            held: rig.scene.object_held,
            contact_force: rig.scene.contact_force,
        });
    }
    log.outcome = tracker.finish(&rig.scene, task);
    if log.aborted.is_some() {
        log.outcome.place = false;
    }
    log.success = log.outcome.place;
    log.final_scene = rig.scene;
    Ok(log)
}

/// The command for `tick` from the live chunks.
fn command_row(live: &[LiveChunk], tick: usize, schedule: &ChunkSchedule, s: usize) -> Vec<f64> {
    fn row_of(c: &LiveChunk, tick: usize) -> &[f64] {
        &c.rows[(tick - c.start).min(c.rows.len() - 1)]
    }
    match schedule.mode {
        ExecMode::ChunkSerial => row_of(live.last().expect("a chunk is live"), tick).to_vec(),
        ExecMode::TemporalEnsemble => {
            let ages: Vec<usize> = live.iter().map(|c| tick - c.start).collect();
            let w = ensemble_weights(&ages, schedule.decay);
            let mut out = vec![0.0; s];
            for (c, wi) in live.iter().zip(w) {
                for (o, v) in out.iter_mut().zip(row_of(c, tick)) {
                    *o += wi * v;
                }
            }
            out
        }
    }
}

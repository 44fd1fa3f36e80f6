//! Demonstration recording and the collection loop.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ArmConfig, ObjectSpec, SimConfig};
use crate::dynamics::SceneState;
use crate::episode::{Episode, EpisodeInfo};
use crate::error::{Error, Result};
use crate::observation::{pack_state, Frame, Renderer, View};

use super::expert::{felt_grip_force, home_angles, operator_load, Phase, ScriptedExpert, Waypoints};
use super::rig::Rig;
use super::task::{Outcome, PhaseTracker, TaskSpec};

/// Joint speed (rad/s) and acceleration (rad/s²) below which a joint counts
/// as quasi-static.
pub const STATIC_SPEED: f64 = 0.05;
pub const STATIC_ACCEL: f64 = 0.5;

/// Bilateral-coupling quality of a recorded episode.
///
/// The action-reaction residual is taken per joint over ticks where that
/// joint is quasi-static and the follower feels at least `contact` N·m, less
/// the static friction both arms can absorb at rest. In free motion the
/// hand's torque also pays for inertia, which the coupling cannot hand back.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateMetrics {
    /// `max |θ_l − θ_f|` over ticks and joints (rad).
    pub tracking: f64,
    /// Worst `|τres_l + τres_f|` beyond the stiction band (N·m).
    pub reaction_excess: f64,
    /// `reaction_excess` relative to the largest follower reaction.
    pub reaction_ratio: f64,
    /// Ticks × joints that entered the residual.
    pub contact_samples: usize,
}

impl GateMetrics {
    /// From packed `[angles, velocities, torques]` rows of both arms sampled
    /// at `rate` Hz.
    pub fn from_rows(follower: &[Vec<f64>], leader: &[Vec<f64>], rate: f64, contact: f64, stiction: &[f64]) -> Self {
        let len = follower.len().min(leader.len());
        let n = follower.first().map_or(0, |r| r.len() / 3);
        let mut tracking: f64 = 0.0;
        let mut sum = vec![0.0f64; n];
        let mut peak = vec![0.0f64; n];
        let mut samples = 0;
        for t in 0..len {
            let (f, l) = (&follower[t], &leader[t]);
            let (prev, next) = (&follower[t.saturating_sub(1)], &follower[(t + 1).min(len - 1)]);
            for i in 0..n {
                tracking = tracking.max((l[i] - f[i]).abs());
                let tau_f = f[2 * n + i];
                peak[i] = peak[i].max(tau_f.abs());
                let accel = (next[n + i] - prev[n + i]) * rate / 2.0;
                let quiet = f[n + i].abs() < STATIC_SPEED && l[n + i].abs() < STATIC_SPEED && accel.abs() < STATIC_ACCEL;
                if quiet && tau_f.abs() >= contact {
                    let band = stiction.get(i).copied().unwrap_or(0.0);
                    sum[i] = sum[i].max(((l[2 * n + i] + tau_f).abs() - band).max(0.0));
                    samples += 1;
                }
            }
        }
        let excess = sum.iter().copied().fold(0.0, f64::max);
        let top = peak.iter().copied().fold(0.0, f64::max);
        GateMetrics {
            tracking,
            reaction_excess: excess,
            reaction_ratio: if top > 0.0 { excess / top } else { 0.0 },
            contact_samples: samples,
        }
    }
}

/// Demonstration quality gate on [`GateMetrics`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityGate {
    pub max_tracking: f64,
    /// Bound on [`GateMetrics::reaction_excess`] (N·m).
    pub max_reaction_excess: f64,
    /// Follower reaction (N·m) above which a joint is in contact.
    pub contact: f64,
    /// Per joint, the Coulomb friction of both arms together (N·m).
    pub stiction: Vec<f64>,
}

impl Default for QualityGate {
    fn default() -> Self {
        Self::for_arm(&ArmConfig::default())
    }
}

impl QualityGate {
    pub fn for_arm(arm: &ArmConfig) -> Self {
        Self {
            max_tracking: 0.05,
            max_reaction_excess: 0.1,
            contact: 0.1,
            stiction: arm.coulomb_friction.iter().map(|c| 2.0 * c).collect(),
        }
    }

    pub fn metrics(&self, follower: &[Vec<f64>], leader: &[Vec<f64>], rate: f64) -> GateMetrics {
        GateMetrics::from_rows(follower, leader, rate, self.contact, &self.stiction)
    }

    /// `Err` with a diagnostic when the episode fails the gate.
    pub fn check(&self, m: &GateMetrics) -> Result<()> {
        if !(m.tracking < self.max_tracking) {
            return Err(Error::Invariant(format!(
                "position tracking {:.4} rad exceeds {}",
                m.tracking, self.max_tracking
            )));
        }
        if m.contact_samples == 0 {
            return Err(Error::Invariant("no quasi-static contact to check action-reaction on".into()));
        }
        if !(m.reaction_excess < self.max_reaction_excess) {
            return Err(Error::Invariant(format!(
                "action-reaction residual {:.4} N·m beyond stiction exceeds {} N·m",
                m.reaction_excess, self.max_reaction_excess
            )));
        }
        Ok(())
    }
}

/// Joint series, scene snapshots and outcome of one recorded run.
#[derive(Clone, Debug)]
pub struct Recording {
    pub object: ObjectSpec,
    pub follower: Vec<Vec<f64>>,
    pub leader: Vec<Vec<f64>>,
    /// Scene at each sample tick, used to render frames.
    pub snapshots: Vec<SceneState>,
    pub final_scene: SceneState,
    pub outcome: Outcome,
    /// Tick at which each expert phase began.
    pub phase_ticks: Vec<(Phase, usize)>,
    pub seed: u64,
    pub sample_rate: f64,
}

impl Recording {
    pub fn gate_metrics(&self, gate: &QualityGate) -> GateMetrics {
        gate.metrics(&self.follower, &self.leader, self.sample_rate)
    }

    /// Renders both views at every tick and builds the episode.
    pub fn into_episode(self, cfg: &SimConfig, expert: &str) -> Result<Episode> {
        let (overhead, gripper) = render_snapshots(cfg, &self.object, &self.snapshots);
        Episode::new(
            EpisodeInfo {
                control_rate: 1.0 / cfg.scene.dt,
                sample_rate: cfg.scene.sample_rate,
                object_spec: self.object,
                task: cfg.scene.task,
                expert: expert.into(),
                seed: self.seed,
            },
            self.follower,
            self.leader,
            overhead,
            gripper,
        )
    }
}

pub fn render_snapshots(cfg: &SimConfig, object: &ObjectSpec, snapshots: &[SceneState]) -> (Vec<Frame>, Vec<Frame>) {
    let renderer = Renderer::new(&cfg.arm, object, &cfg.scene);
    snapshots
        .iter()
        .map(|s| (renderer.render(s, View::Overhead), renderer.render(s, View::Gripper)))
        .unzip()
}

/// `object` with its start moved to the seeded pick waypoint.
pub fn jittered_object(cfg: &SimConfig, object: &ObjectSpec, seed: u64) -> (ObjectSpec, Waypoints) {
    let w = Waypoints::jittered(cfg, object.initial_position, seed);
    let mut obj = object.clone();
    obj.initial_position = w.pick;
    (obj, w)
}

/// Runs the scripted expert through the bilateral rig until it finishes or
/// the time limit passes. Samples every `substeps` control periods.
pub fn demonstrate(cfg: &SimConfig, object: &ObjectSpec, seed: u64) -> Result<Recording> {
    cfg.validate()?;
    let (obj, waypoints) = jittered_object(cfg, object, seed);
    let task = TaskSpec::from_config(cfg, &obj);
    let mut rig = Rig::new(cfg, obj.clone(), &home_angles(cfg))?;
    let mut expert = ScriptedExpert::new(cfg, &obj, waypoints)?;
    let n = rig.n_joints();
    let zero = vec![0.0; n];
    let sub = cfg.scene.substeps();
    let max_steps = (cfg.scene.time_limit / cfg.scene.dt).round() as usize;
    let mut rec = Recording {
        object: obj,
        follower: Vec::new(),
        leader: Vec::new(),
        snapshots: Vec::new(),
        final_scene: rig.scene.clone(),
        outcome: Outcome::default(),
        phase_ticks: vec![(Phase::Approach, 0)],
        seed,
        sample_rate: cfg.scene.sample_rate,
    };
    let mut tracker = PhaseTracker::default();
    for step in 0..max_steps {
        let tick = step % sub == 0;
        if tick && expert.phase() == Phase::Done {
            break;
        }
        let felt = felt_grip_force(cfg, &rig.leader_tau_res());
        let targets = expert.step(rig.scene.time, felt, rig.scene.leader[cfg.arm.dof].angle)?;
        if rec.phase_ticks.last().map(|p| p.0) != Some(expert.phase()) {
            rec.phase_ticks.push((expert.phase(), rec.follower.len()));
        }
        let load = operator_load(cfg, &targets, &rig.scene.leader);
        let before = tick.then(|| rig.scene.clone());
        let r = rig.step_bilateral(&load, &zero)?;
        if let Some(s) = before {
            rec.follower.push(pack_state(&r.follower));
            rec.leader.push(pack_state(&r.leader));
            rec.snapshots.push(s);
        }
        tracker.observe(&rig.scene, &task);
    }
    if expert.phase() != Phase::Done {
        return Err(Error::Invariant(format!(
            "expert stuck in {:?} at the {} s time limit",
            expert.phase(),
            cfg.scene.time_limit
        )));
    }
    rec.outcome = tracker.finish(&rig.scene, &task);
    rec.final_scene = rig.scene;
    Ok(rec)
}

pub struct CollectOptions {
    pub episodes: usize,
    pub objects: Vec<ObjectSpec>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Give up after this many discarded attempts.
    pub max_discards: usize,
    pub gate: QualityGate,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CollectReport {
    pub saved: Vec<PathBuf>,
    /// `(seed, object, reason)` of every discarded attempt.
    pub discarded: Vec<(u64, String, String)>,
    pub total_ticks: usize,
}

pub fn episode_seed(base: u64, attempt: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt)
}

/// One scripted episode: recorded, scored and gated, but not saved.
pub fn scripted_episode(cfg: &SimConfig, object: &ObjectSpec, seed: u64, gate: &QualityGate) -> Result<Episode> {
    let rec = demonstrate(cfg, object, seed)?;
    if !rec.outcome.place {
        return Err(Error::Invariant(format!("expert failed the task: {:?}", rec.outcome)));
    }
    gate.check(&rec.gate_metrics(gate))?;
    rec.into_episode(cfg, "scripted")
}

/// Collects `episodes` scripted demonstrations into `out_dir/episode_NNNN`,
/// cycling through `objects`. Failed or gated attempts are logged and skipped.
pub fn collect(cfg: &SimConfig, opts: &CollectOptions) -> Result<CollectReport> {
    if opts.objects.is_empty() {
        return Err(Error::InvalidArgument("collect needs at least one object".into()));
    }
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let mut report = CollectReport::default();
    let mut attempt = 0u64;
    while report.saved.len() < opts.episodes {
        let object = &opts.objects[report.saved.len() % opts.objects.len()];
        let seed = episode_seed(opts.seed, attempt);
        attempt += 1;
        match scripted_episode(cfg, object, seed, &opts.gate) {
            Ok(ep) => {
                let path = episode_path(&opts.out_dir, report.saved.len());
                ep.save(&path)?;
                log::info!("saved {} ({}, {} ticks)", path.display(), object.name, ep.len());
                report.total_ticks += ep.len();
                report.saved.push(path);
            }
            Err(e) => {
                log::warn!("discarded episode seed {seed} ({}): {e}", object.name);
                report.discarded.push((seed, object.name.clone(), e.to_string()));
                if report.discarded.len() > opts.max_discards {
                    return Err(Error::Invariant(format!(
                        "{} attempts discarded; last: {e}",
                        report.discarded.len()
                    )));
                }
            }
        }
    }
    Ok(report)
}

pub fn episode_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("episode_{index:04}"))
}

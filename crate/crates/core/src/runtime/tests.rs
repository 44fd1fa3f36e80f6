use super::collect::{demonstrate, jittered_object, scripted_episode};
use super::executor::TrajectoryRow;
use super::*;
use crate::config::{ObjectSpec, SimConfig};
use crate::kinematics::forward_kinematics;
use crate::observation::Frame;

/// Counts queries and returns a constant chunk of the home pose.
struct Counting {
    calls: Vec<usize>,
    row: Vec<f64>,
    k: usize,
}

impl ChunkSource for Counting {
    fn predict(&mut self, tick: usize, _f: &[f64], _fr: Option<(&Frame, &Frame)>) -> crate::Result<Vec<Vec<f64>>> {
        self.calls.push(tick);
        Ok(vec![self.row.clone(); self.k])
    }

    fn uses_frames(&self) -> bool {
        false
    }
}

fn home_row(cfg: &SimConfig) -> Vec<f64> {
    let q = home_angles(cfg);
    let n = q.len();
    let mut row = q;
    row.extend(vec![0.0; 2 * n]);
    row
}

#[test]
fn chunk_serial_schedule_counts() {
    let cfg = SimConfig::default();
    let obj = cfg.object.clone();
    let task = TaskSpec::from_config(&cfg, &obj);
    let mut src = Counting {
        calls: vec![],
        row: home_row(&cfg),
        k: 20,
    };
    let log = execute_autonomous(&cfg, &obj, &task, &mut src, ChunkSchedule::chunk_serial(20), Some(100)).unwrap();
    assert_eq!(src.calls, vec![0, 20, 40, 60, 80]);
    assert_eq!(log.inference_ticks, src.calls);
    assert_eq!(log.substeps_per_tick.len(), 100);
    assert!(log.substeps_per_tick.iter().all(|&s| s == 10));
    assert!((log.final_scene.time - 1.0).abs() < 1e-9);
}

#[test]
fn serial_inference_count_is_ceil() {
    let cfg = SimConfig::default();
    let obj = cfg.object.clone();
    let task = TaskSpec::from_config(&cfg, &obj);
    for (t, k) in [(7, 3), (10, 1), (5, 8)] {
        let mut src = Counting {
            calls: vec![],
            row: home_row(&cfg),
            k,
        };
        execute_autonomous(&cfg, &obj, &task, &mut src, ChunkSchedule::chunk_serial(k), Some(t)).unwrap();
        assert_eq!(src.calls.len(), t.div_ceil(k));
    }
}

#[test]
fn ensemble_weights_closed_form() {
    let w = ensemble_weights(&[0, 1], std::f64::consts::LN_2);
    assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((w[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn ensemble_queries_every_tick() {
    let cfg = SimConfig::default();
    let obj = cfg.object.clone();
    let task = TaskSpec::from_config(&cfg, &obj);
    let mut src = Counting {
        calls: vec![],
        row: home_row(&cfg),
        k: 4,
    };
    let log = execute_autonomous(&cfg, &obj, &task, &mut src, ChunkSchedule::temporal_ensemble(4, 0.1), Some(12)).unwrap();
    assert_eq!(src.calls, (0..12).collect::<Vec<_>>());
    // identical chunks average to the same command
    assert_eq!(log.rows[5].command, home_row(&cfg));
}

#[test]
fn schedule_validation() {
    assert!(ChunkSchedule::chunk_serial(0).validate().is_err());
    assert!(ChunkSchedule::temporal_ensemble(5, 0.0).validate().is_err());
    assert!(ChunkSchedule::temporal_ensemble(5, 0.01).validate().is_ok());
    assert_eq!("ensemble".parse::<ExecMode>().unwrap(), ExecMode::TemporalEnsemble);
    assert!("bogus".parse::<ExecMode>().is_err());
}

struct Poison;

impl ChunkSource for Poison {
    fn predict(&mut self, _t: usize, f: &[f64], _fr: Option<(&Frame, &Frame)>) -> crate::Result<Vec<Vec<f64>>> {
        let mut r = f.to_vec();
        r[0] = f64::NAN;
        Ok(vec![r])
    }

    fn uses_frames(&self) -> bool {
        false
    }
}

#[test]
fn non_finite_output_aborts_episode() {
    let cfg = SimConfig::default();
    let obj = cfg.object.clone();
    let task = TaskSpec::from_config(&cfg, &obj);
    let log = execute_autonomous(&cfg, &obj, &task, &mut Poison, ChunkSchedule::chunk_serial(1), Some(10)).unwrap();
    assert!(log.aborted.is_some());
    assert!(!log.success);
    assert!(log.rows.is_empty());
}

#[test]
fn approach_starts_toward_the_pick_pose() {
    let cfg = SimConfig::default();
    let obj = cfg.object.clone();
    let w = Waypoints::jittered(&cfg, obj.initial_position, 3);
    let mut ex = ScriptedExpert::new(&cfg, &obj, w).unwrap();
    let q0 = ex.step(0.0, 0.0, 0.0).unwrap();
    let home = forward_kinematics(&q0[..2], &cfg.arm.link_lengths).unwrap();
    assert!((home[0] - w.home[0]).abs() < 1e-12 && (home[1] - w.home[1]).abs() < 1e-12);
    let q = ex.step(expert::APPROACH_S - 1e-9, 0.0, 0.0).unwrap();
    assert_eq!(ex.phase(), Phase::Approach);
    let p = forward_kinematics(&q[..2], &cfg.arm.link_lengths).unwrap();
    assert!((p[0] - w.pick[0]).abs() < 1e-9 && (p[1] - w.pick[1]).abs() < 1e-9, "{p:?} vs {:?}", w.pick);
}

#[test]
fn unreachable_waypoint_is_an_error() {
    let cfg = SimConfig::default();
    let w = Waypoints {
        home: cfg.scene.home_position,
        pick: [0.5, 0.0],
        place: cfg.scene.place_center,
    };
    assert!(matches!(
        ScriptedExpert::new(&cfg, &cfg.object, w),
        Err(crate::Error::Unreachable { .. })
    ));
}

#[test]
fn expert_succeeds_on_both_training_objects() {
    let cfg = SimConfig::default();
    for name in ["foam_ball", "softball"] {
        let obj = ObjectSpec::preset(name).unwrap();
        let rec = demonstrate(&cfg, &obj, 11).unwrap();
        assert!(rec.outcome.place, "{name}: {:?}", rec.outcome);
        assert!(rec.outcome.pick && rec.outcome.moved);
        assert!(rec.follower.len() as f64 / cfg.scene.sample_rate <= 10.0, "{name}: {} ticks", rec.follower.len());
        let gate = QualityGate::default();
        gate.check(&rec.gate_metrics(&gate)).unwrap();
    }
}

fn lift_phase_mean_reaction(rec: &Recording) -> f64 {
    let start = rec.phase_ticks.iter().find(|p| p.0 == Phase::Lift).unwrap().1;
    let end = rec.phase_ticks.iter().find(|p| p.0 == Phase::Transport).unwrap().1;
    let n = rec.follower[0].len() / 3;
    let rows = &rec.follower[start..end];
    rows.iter().map(|r| r[2 * n..2 * n + 2].iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() / rows.len() as f64
}

#[test]
fn doubled_mass_still_succeeds_with_larger_lift_torques() {
    let cfg = SimConfig::default();
    let light = ObjectSpec::preset("softball").unwrap();
    let mut heavy = light.clone();
    heavy.mass *= 2.0;
    let a = demonstrate(&cfg, &light, 5).unwrap();
    let b = demonstrate(&cfg, &heavy, 5).unwrap();
    assert!(a.outcome.place && b.outcome.place);
    assert!(lift_phase_mean_reaction(&b) > lift_phase_mean_reaction(&a));
    let grip = |r: &Recording| {
        let g = cfg.arm.dof;
        let t = r.phase_ticks.iter().find(|p| p.0 == Phase::Transport).unwrap().1;
        r.leader[t][g]
    };
    assert!(grip(&b) > grip(&a), "heavy {} light {}", grip(&b), grip(&a));
}

#[test]
fn demonstration_is_deterministic() {
    let cfg = SimConfig::default();
    let a = demonstrate(&cfg, &cfg.object, 9).unwrap();
    let b = demonstrate(&cfg, &cfg.object, 9).unwrap();
    assert_eq!(a.follower, b.follower);
    assert_eq!(a.leader, b.leader);
    let c = demonstrate(&cfg, &cfg.object, 10).unwrap();
    assert_ne!(a.follower, c.follower);
}

fn ee_rms(cfg: &SimConfig, rows: &[TrajectoryRow], recorded: &[Vec<f64>]) -> f64 {
    let dof = cfg.arm.dof;
    let sum: f64 = rows
        .iter()
        .zip(recorded)
        .map(|(r, f)| {
            let p = forward_kinematics(&f[..dof], &cfg.arm.link_lengths).unwrap();
            (r.end_effector[0] - p[0]).powi(2) + (r.end_effector[1] - p[1]).powi(2)
        })
        .sum();
    (sum / rows.len() as f64).sqrt()
}

#[test]
fn replay_oracle_reproduces_the_follower() {
    let cfg = SimConfig::default();
    let ep = scripted_episode(&cfg, &cfg.object, 21, &QualityGate::default()).unwrap();
    let obj = ep.meta.object_spec.clone();
    let task = TaskSpec::from_config(&cfg, &obj);
    let mut src = ReplaySource {
        leader: ep.leader.clone(),
        k: 20,
    };
    let log =
        execute_autonomous(&cfg, &obj, &task, &mut src, ChunkSchedule::chunk_serial(20), Some(ep.len())).unwrap();
    let rms = ee_rms(&cfg, &log.rows, &ep.follower);
    assert!(rms < 0.01, "rms {rms}");
    assert!(log.success, "{:?}", log.outcome);
}

#[test]
fn executor_is_deterministic_and_never_touches_the_leader() {
    let cfg = SimConfig::default();
    let (obj, _) = jittered_object(&cfg, &cfg.object, 4);
    let task = TaskSpec::from_config(&cfg, &obj);
    let run = || {
        let mut src = Counting {
            calls: vec![],
            row: home_row(&cfg),
            k: 5,
        };
        execute_autonomous(&cfg, &obj, &task, &mut src, ChunkSchedule::chunk_serial(5), Some(30)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.rows, b.rows);
    assert!(a.final_scene.leader.is_empty());
}

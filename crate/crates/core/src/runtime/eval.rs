//! Seeded evaluation sweeps and the force ablation.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ObjectSpec, PolicyConfig, SimConfig};
use crate::episode::Dataset;
use crate::error::{Error, Result};
use crate::policy::{train, HeadInit, Policy, Trainer};

use super::collect::{episode_seed, jittered_object};
use super::executor::{execute_autonomous, ChunkSchedule, PolicySource};
use super::task::{Outcome, TaskSpec};

/// Offset separating evaluation scene seeds from collection seeds.
pub const EVAL_SEED_SALT: u64 = 0x5EED_E7A1;

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub objects: Vec<ObjectSpec>,
    pub trials: usize,
    pub schedule: ChunkSchedule,
    pub seed: u64,
    pub jobs: usize,
    /// One CSV trajectory per trial is written here when set.
    pub trajectory_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialResult {
    pub object: String,
    pub trial: usize,
    pub seed: u64,
    pub start: [f64; 2],
    pub outcome: Outcome,
    pub final_distance: f64,
    pub crushed: bool,
    pub aborted: Option<String>,
    pub inferences: usize,
    pub max_inference_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectSummary {
    pub object: String,
    pub mass_g: f64,
    pub trials: usize,
    pub pick: usize,
    #[serde(rename = "move")]
    pub moved: usize,
    pub place: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub schedule: ChunkSchedule,
    pub seed: u64,
    pub use_force: bool,
    pub objects: Vec<ObjectSummary>,
    pub trials: Vec<TrialResult>,
}

impl EvalReport {
    pub fn successes(&self) -> usize {
        self.objects.iter().map(|o| o.place).sum()
    }

    pub fn total_trials(&self) -> usize {
        self.objects.iter().map(|o| o.trials).sum()
    }
}

pub fn trial_seed(base: u64, object: usize, trial: usize) -> u64 {
    episode_seed(base ^ EVAL_SEED_SALT, ((object as u64) << 32) | trial as u64)
}

fn run_trial(cfg: &SimConfig, policy: &Policy, opts: &EvalOptions, oi: usize, trial: usize) -> Result<TrialResult> {
    let seed = trial_seed(opts.seed, oi, trial);
    let (object, _) = jittered_object(cfg, &opts.objects[oi], seed);
    let task = TaskSpec::from_config(cfg, &object);
    let mut source = PolicySource::new(policy, cfg.arm.n_joints())?;
    let log = execute_autonomous(cfg, &object, &task, &mut source, opts.schedule, None)?;
    if let Some(dir) = &opts.trajectory_dir {
        let path = dir.join(format!("{}_{trial:03}.csv", object.name));
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        log.write_csv(&mut f).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrialResult {
        object: object.name.clone(),
        trial,
        seed,
        start: object.initial_position,
        outcome: log.outcome,
        final_distance: task.distance_to_place(log.final_scene.object_position),
        crushed: log.final_scene.object_crushed,
        aborted: log.aborted,
        inferences: log.inference_ticks.len(),
        max_inference_ms: log.max_inference_ms,
    })
}

/// `trials` seeded runs per object, fanned out over `jobs` threads. Results
/// do not depend on `jobs`.
pub fn evaluate(cfg: &SimConfig, policy: &Policy, opts: &EvalOptions) -> Result<EvalReport> {
    opts.schedule.validate()?;
    policy.check_joints(cfg.arm.n_joints())?;
    if let Some(dir) = &opts.trajectory_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..opts.objects.len())
        .flat_map(|o| (0..opts.trials).map(move |t| (o, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let trials: Vec<TrialResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(o, t)| run_trial(cfg, policy, opts, o, t))
            .collect::<Result<_>>()
    })?;
    let objects = opts
        .objects
        .iter()
        .map(|obj| {
            let mine: Vec<&TrialResult> = trials.iter().filter(|t| t.object == obj.name).collect();
            let count = |f: fn(&Outcome) -> bool| mine.iter().filter(|t| f(&t.outcome)).count();
            let place = count(|o| o.place);
            ObjectSummary {
                object: obj.name.clone(),
                mass_g: obj.mass * 1e3,
                trials: mine.len(),
                pick: count(|o| o.pick),
                moved: count(|o| o.moved),
                place,
                success_rate: place as f64 / mine.len().max(1) as f64,
            }
        })
        .collect();
    Ok(EvalReport {
        schedule: opts.schedule,
        seed: opts.seed,
        use_force: policy.use_force,
        objects,
        trials,
    })
}

/// Trains a fresh policy on `dataset`.
pub fn train_policy(model: &PolicyConfig, dataset: &Dataset, use_force: bool, steps: u64, seed: u64) -> Result<Policy> {
    let policy = Policy::new(model.clone(), dataset.stats.clone(), use_force, HeadInit::Zero, seed)?;
    let mut trainer = Trainer::new(policy, seed);
    let m = train(&mut trainer, dataset, steps, seed, None)?;
    if let (Some(a), Some(b)) = (m.first(), m.last()) {
        log::info!(
            "trained {} steps (force={use_force}): l1 {:.4} -> {:.4}",
            m.len(),
            a.loss_l1,
            b.loss_l1
        );
    }
    Ok(trainer.policy)
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub model: PolicyConfig,
    pub steps: u64,
    pub seed: u64,
    pub eval: EvalOptions,
}

/// One line of the Pick / Move / Place / Total table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub object: String,
    pub trials: usize,
    pub pick: usize,
    #[serde(rename = "move")]
    pub moved: usize,
    pub place: usize,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub full: EvalReport,
    pub without_force: EvalReport,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:<14} {:>6} {:>6} {:>6} {:>6} {:>7}\n",
            "variant", "object", "trials", "pick", "move", "place", "total"
        );
        for r in &self.rows {
            out += &format!(
                "{:<16} {:<14} {:>6} {:>6} {:>6} {:>6} {:>6.0}%\n",
                r.variant,
                r.object,
                r.trials,
                r.pick,
                r.moved,
                r.place,
                100.0 * r.total
            );
        }
        out
    }
}

fn rows(variant: &str, report: &EvalReport) -> Vec<AblationRow> {
    report
        .objects
        .iter()
        .map(|o| AblationRow {
            variant: variant.into(),
            object: o.object.clone(),
            trials: o.trials,
            pick: o.pick,
            moved: o.moved,
            place: o.place,
            total: o.success_rate,
        })
        .collect()
}

/// Distinct object masses in a dataset (g, rounded to 0.1 g).
pub fn dataset_masses(dataset: &Dataset) -> Vec<f64> {
    let mut m: Vec<f64> = dataset
        .episodes
        .iter()
        .map(|e| (e.meta.object_spec.mass * 1e4).round() / 10.0)
        .collect();
    m.sort_by(f64::total_cmp);
    m.dedup();
    m
}

/// Trains the full and the w/o-force variants identically and evaluates both
/// on the same seeded scenes. A pre-trained full policy may be supplied; it
/// must come from [`train_policy`] with the same options.
pub fn ablation_run(
    cfg: &SimConfig,
    dataset: &Dataset,
    opts: &AblationOptions,
    full: Option<Policy>,
) -> Result<AblationReport> {
    if dataset_masses(dataset).len() < 2 {
        return Err(Error::InvalidArgument(
            "the ablation needs episodes with at least two object masses".into(),
        ));
    }
    let full = match full {
        Some(p) if p.use_force && p.config == opts.model => p,
        Some(_) => return Err(Error::InvalidArgument("supplied policy is not a full variant of this model".into())),
        None => train_policy(&opts.model, dataset, true, opts.steps, opts.seed)?,
    };
    let ablated = train_policy(&opts.model, dataset, false, opts.steps, opts.seed)?;
    let full_report = evaluate(cfg, &full, &opts.eval)?;
    let ablated_report = evaluate(cfg, &ablated, &opts.eval)?;
    let mut r = rows("bi-act", &full_report);
    r.extend(rows("bi-act w/o force", &ablated_report));
    Ok(AblationReport {
        rows: r,
        full: full_report,
        without_force: ablated_report,
    })
}

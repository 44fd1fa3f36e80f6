use serde::{Deserialize, Serialize};

use crate::config::{ObjectSpec, SimConfig, TaskKind};
use crate::dynamics::SceneState;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub pick_position: [f64; 2],
    pub place_center: [f64; 2],
    pub place_radius: f64,
    pub time_limit: f64,
}

impl TaskSpec {
    pub fn from_config(cfg: &SimConfig, object: &ObjectSpec) -> Self {
        Self {
            task: cfg.scene.task,
            pick_position: object.initial_position,
            place_center: cfg.scene.place_center,
            place_radius: cfg.scene.place_radius,
            time_limit: cfg.scene.time_limit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.place_radius > 0.0) {
            return Err(Error::InvalidArgument("place radius must be > 0".into()));
        }
        if !(self.time_limit > 0.0) {
            return Err(Error::InvalidArgument("time limit must be > 0".into()));
        }
        if self.task != TaskKind::PickPlace {
            return Err(Error::InvalidArgument(format!("task {} is not simulated", self.task)));
        }
        Ok(())
    }

    pub fn distance_to_place(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.place_center[0]).hypot(p[1] - self.place_center[1])
    }

    fn in_area(&self, p: [f64; 2]) -> bool {
        self.distance_to_place(p) <= self.place_radius
    }
}

/// Object intact, released, and inside the place circle.
pub fn evaluate_success(scene: &SceneState, task: &TaskSpec) -> bool {
    scene.object_present && !scene.object_crushed && !scene.object_held && task.in_area(scene.object_position)
}

/// Per-phase booleans of one trial.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    /// The object was held at some point.
    pub pick: bool,
    /// The object was carried into the place circle.
    pub moved: bool,
    /// Final success.
    pub place: bool,
}

/// Accumulates phase flags over a run.
#[derive(Clone, Debug, Default)]
pub struct PhaseTracker {
    outcome: Outcome,
}

impl PhaseTracker {
    pub fn observe(&mut self, scene: &SceneState, task: &TaskSpec) {
        if scene.object_held && !scene.object_crushed {
            self.outcome.pick = true;
            if task.in_area(scene.object_position) {
                self.outcome.moved = true;
            }
        }
    }

    pub fn finish(mut self, scene: &SceneState, task: &TaskSpec) -> Outcome {
        self.observe(scene, task);
        self.outcome.place = evaluate_success(scene, task);
        self.outcome
    }
}

//! Bilateral leader/follower simulation, imitation data pipeline and a
//! chunked-action transformer policy trained with a small reverse-mode
//! autodiff engine.

pub mod checks;
pub mod config;
pub mod control;
pub mod dynamics;
pub mod episode;
pub mod error;
pub mod kinematics;
pub mod observation;
pub mod policy;
pub mod runtime;
pub mod teleop;
pub mod tensor;

pub use config::{ArmConfig, ControlConfig, ObjectSpec, PolicyConfig, SceneConfig, SimConfig, TaskKind};
pub use control::{ControlGains, LeaderCommand, ObserverState};
pub use dynamics::{JointState, Plant, SceneState};
pub use episode::{Batch, Dataset, Episode, EpisodeMeta, NormStats};
pub use error::{Error, Result};
pub use observation::{Frame, Renderer, SampledObservation, View};
pub use policy::{HeadInit, Policy, Trainer};
pub use tensor::{Tape, Tensor};

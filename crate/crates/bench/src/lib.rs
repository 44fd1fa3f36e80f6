//! Shared fixtures for the criterion benches.

use biact_core::runtime::collect::scripted_episode;
use biact_core::runtime::QualityGate;
use biact_core::{Dataset, HeadInit, ObjectSpec, Policy, SimConfig};

/// One scripted episode per training object.
pub fn small_dataset(cfg: &SimConfig) -> Dataset {
    let episodes = ["foam_ball", "softball"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let obj = ObjectSpec::preset(name).expect("preset");
            scripted_episode(cfg, &obj, i as u64, &QualityGate::for_arm(&cfg.arm)).expect("expert succeeds")
        })
        .collect();
    Dataset::new(episodes).expect("consistent episodes")
}

/// An untrained policy with the default model.
pub fn fresh_policy(cfg: &SimConfig, dataset: &Dataset) -> Policy {
    Policy::new(cfg.model.clone(), dataset.stats.clone(), true, HeadInit::Random, 1).expect("valid model")
}

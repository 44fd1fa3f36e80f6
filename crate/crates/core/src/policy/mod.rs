//! Chunked-action transformer policy with a CVAE latent.
//!
//! Observation tokens are built from two camera frames (patch embedding plus
//! learned row/column and camera terms) and one follower-state token. A
//! transformer encoder runs over those tokens plus a latent token, and a
//! decoder with `k` learned queries emits `k` leader rows. During training a
//! separate encoder maps the target chunk and state to `(mu, logvar)`; at
//! inference the latent is the prior mean `z = 0`.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{cvae_encode, encode_observation, patchify, predict_chunk, Net, ObsInput};
pub use train::{cosine_lr, train, StepMetrics, Trainer, METRICS_HEADER};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PolicyConfig;
use crate::episode::SeriesStats;
use crate::error::{Error, Result};
use crate::observation::Frame;
use crate::tensor::{Tape, Tensor};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    fn from_pairs(pairs: Vec<(String, Tensor)>) -> Self {
        let index = pairs.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let (names, tensors) = pairs.into_iter().unzip();
        Self { names, tensors, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// How the output heads (action, mu, logvar) start.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInit {
    Zero,
    Random,
}

/// Which parameter names exist for a config, with their shapes.
pub fn param_layout(cfg: &PolicyConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let s = cfg.action_dim();
    let f = cfg.ffn_dim;
    let l = cfg.latent_dim;
    let sp = cfg.frame_size / cfg.patch_size;
    let p2 = cfg.patch_size * cfg.patch_size;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: &[usize]| out.push((name, shape.to_vec()));
    let linear = |push: &mut dyn FnMut(String, &[usize]), name: &str, i: usize, o: usize| {
        push(format!("{name}.w"), &[i, o]);
        push(format!("{name}.b"), &[o]);
    };
    let norm = |push: &mut dyn FnMut(String, &[usize]), name: &str| {
        push(format!("{name}.g"), &[d]);
        push(format!("{name}.b"), &[d]);
    };
    let attn = |push: &mut dyn FnMut(String, &[usize]), name: &str| {
        for m in ["q", "k", "v", "o"] {
            push(format!("{name}.{m}.w"), &[d, d]);
            if m != "k" {
                push(format!("{name}.{m}.b"), &[d]);
            }
        }
    };
    let ffn = |push: &mut dyn FnMut(String, &[usize]), name: &str| {
        push(format!("{name}.1.w"), &[d, f]);
        push(format!("{name}.1.b"), &[f]);
        push(format!("{name}.2.w"), &[f, d]);
        push(format!("{name}.2.b"), &[d]);
    };

    linear(&mut push, "obs.patch", p2, d);
    push("obs.pos_row".into(), &[sp, d]);
    push("obs.pos_col".into(), &[sp, d]);
    push("obs.camera".into(), &[2, d]);
    linear(&mut push, "obs.state", s, d);
    linear(&mut push, "enc.latent", l, d);
    for i in 0..cfg.encoder_layers {
        norm(&mut push, &format!("enc.{i}.ln1"));
        attn(&mut push, &format!("enc.{i}.attn"));
        norm(&mut push, &format!("enc.{i}.ln2"));
        ffn(&mut push, &format!("enc.{i}.ffn"));
    }
    norm(&mut push, "enc.ln");
    push("dec.query".into(), &[cfg.chunk_k, d]);
    for i in 0..cfg.decoder_layers {
        norm(&mut push, &format!("dec.{i}.ln1"));
        attn(&mut push, &format!("dec.{i}.self"));
        norm(&mut push, &format!("dec.{i}.ln2"));
        attn(&mut push, &format!("dec.{i}.cross"));
        norm(&mut push, &format!("dec.{i}.ln3"));
        ffn(&mut push, &format!("dec.{i}.ffn"));
    }
    norm(&mut push, "dec.ln");
    linear(&mut push, "dec.head", d, s);
    linear(&mut push, "cvae.action", s, d);
    linear(&mut push, "cvae.state", s, d);
    push("cvae.pos".into(), &[cfg.chunk_k + 1, d]);
    for i in 0..cfg.latent_encoder_layers {
        norm(&mut push, &format!("cvae.{i}.ln1"));
        attn(&mut push, &format!("cvae.{i}.attn"));
        norm(&mut push, &format!("cvae.{i}.ln2"));
        ffn(&mut push, &format!("cvae.{i}.ffn"));
    }
    norm(&mut push, "cvae.ln");
    linear(&mut push, "cvae.mu", d, l);
    linear(&mut push, "cvae.logvar", d, l);
    out
}

fn is_head(name: &str) -> bool {
    name.starts_with("dec.head.") || name.starts_with("cvae.mu.") || name.starts_with("cvae.logvar.")
}

/// A policy: configuration, normalization statistics and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub stats: SeriesStats,
    /// False for the w/o-force variant: torque inputs are zeroed and torque
    /// commands replaced by 0.
    pub use_force: bool,
    pub params: ParamSet,
}

impl Policy {
    pub fn new(config: PolicyConfig, stats: SeriesStats, use_force: bool, init: HeadInit, seed: u64) -> Result<Self> {
        config.validate()?;
        stats.follower.validate(config.action_dim())?;
        stats.leader.validate(config.action_dim())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = param_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".g") {
                    Tensor::full(&shape, 1.0)
                } else if is_head(&name) && init == HeadInit::Zero {
                    Tensor::zeros(&shape)
                } else if name.ends_with(".w") {
                    Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
                } else if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, 0.1, &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            stats,
            use_force,
            params: ParamSet::from_pairs(pairs),
        })
    }

    /// Checks that `params` matches the layout implied by `config`.
    pub fn check_layout(config: &PolicyConfig, params: &ParamSet) -> Result<()> {
        let layout = param_layout(config);
        if layout.len() != params.len() {
            return Err(Error::Invariant(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in layout.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != pn {
                return Err(Error::Invariant(format!("expected parameter '{name}', found '{pn}'")));
            }
            if *shape != pt.shape {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    lhs: shape.clone(),
                    rhs: pt.shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// Errors unless the policy acts on arms with `n_joints` joints.
    pub fn check_joints(&self, n_joints: usize) -> Result<()> {
        if self.config.n_joints != n_joints {
            return Err(Error::Shape {
                op: "policy state",
                lhs: vec![3 * self.config.n_joints],
                rhs: vec![3 * n_joints],
            });
        }
        Ok(())
    }

    /// Normalized model input for one follower state; torque channels are
    /// zeroed for the w/o-force variant.
    pub fn normalize_state(&self, follower: &[f64]) -> Vec<f64> {
        let mut v = self.stats.follower.normalize(follower);
        if !self.use_force {
            let n = self.config.n_joints;
            v[2 * n..].iter_mut().for_each(|x| *x = 0.0);
        }
        v
    }

    /// Predicted leader chunk in normalized units, `[B, k, S]`, with `z = 0`
    /// on a tape that records nothing for backward.
    pub fn infer(&self, obs: &ObsInput) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let mut net = Net::bind(&mut tape, self);
        let tokens = encode_observation(&mut net, obs)?;
        let z = net.tape.constant(Tensor::zeros(&[obs.batch, self.config.latent_dim]));
        let pred = predict_chunk(&mut net, tokens, z)?;
        Ok(tape.value(pred).clone())
    }

    /// `k` leader rows in physical units for a single observation.
    pub fn act(&self, follower: &[f64], overhead: &Frame, gripper: &Frame) -> Result<Vec<Vec<f64>>> {
        let s = self.config.action_dim();
        if follower.len() != s {
            return Err(Error::Dimension {
                what: "policy state",
                expected: s,
                got: follower.len(),
            });
        }
        let obs = ObsInput::single(&self.config, &self.normalize_state(follower), overhead, gripper)?;
        let pred = self.infer(&obs)?;
        if !pred.is_finite() {
            return Err(Error::NonFinite("policy output"));
        }
        let n = self.config.n_joints;
        Ok(pred
            .data
            .chunks(s)
            .map(|row| {
                let mut r = self.stats.leader.denormalize(row);
                if !self.use_force {
                    r[2 * n..].iter_mut().for_each(|x| *x = 0.0);
                }
                r
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;

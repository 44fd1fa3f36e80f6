use std::io::Write;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::episode::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{finite_difference_check, Adam, GradCheckReport, Tape, Tensor, Var};

use super::model::{cvae_encode, encode_observation, predict_chunk, Net, ObsInput};
use super::Policy;

pub const METRICS_HEADER: &str = "step,loss_total,loss_l1,loss_kl,wall_ms";

/// Scalars reported by one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_l1: f64,
    pub loss_kl: f64,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.step, self.loss_total, self.loss_l1, self.loss_kl, self.wall_ms
        )
    }
}

/// Training-mode graph: `(total, l1, kl)` for `batch` with latent noise `eps [B, L]`.
pub(crate) fn loss_graph(net: &mut Net, obs: &ObsInput, batch: &Batch, eps: &Tensor, beta: f64) -> Result<(Var, Var, Var)> {
    let (b, k, s) = (batch.batch_size, batch.chunk_k, batch.state_dim);
    let target = Tensor::new(vec![b, k, s], batch.target.clone())?;
    let mask = Tensor::new(vec![b, k, s], batch.loss_mask.clone())?;
    let tokens = encode_observation(net, obs)?;
    let chunk = net.tape.constant(target.clone());
    let state = net.tape.constant(obs.state.clone());
    let (mu, logvar) = cvae_encode(net, chunk, state)?;
    let half = net.tape.scale(logvar, 0.5);
    let sigma = net.tape.exp(half);
    let e = net.tape.constant(eps.clone());
    let noise = net.tape.mul(sigma, e)?;
    let z = net.tape.add(mu, noise)?;
    let pred = predict_chunk(net, tokens, z)?;
    let l1 = net.tape.l1_loss(pred, &target, &mask)?;
    let kl = net.tape.gaussian_kl(mu, logvar)?;
    let weighted = net.tape.scale(kl, beta);
    let total = net.tape.add(l1, weighted)?;
    Ok((total, l1, kl))
}

/// A policy plus optimizer state.
pub struct Trainer {
    pub policy: Policy,
    pub optimizer: Adam,
    pub step: u64,
    seed: u64,
}

impl Trainer {
    pub fn new(policy: Policy, seed: u64) -> Self {
        let optimizer = Adam::new(policy.params.tensors(), policy.config.lr);
        Self {
            policy,
            optimizer,
            step: 0,
            seed,
        }
    }

    /// Applies the w/o-force transform when the policy has no force channels.
    pub fn prepare(&self, batch: &Batch) -> Batch {
        let mut b = batch.clone();
        if !self.policy.use_force {
            b.zero_torque_inputs();
            b.mask_torque_targets();
        }
        b
    }

    /// Latent noise for the current step.
    fn noise(&self, batch: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Tensor::randn(&[batch, self.policy.config.latent_dim], 1.0, &mut rng)
    }

    /// Losses and gradients without an update.
    pub fn gradients(&self, batch: &Batch) -> Result<(StepMetrics, Vec<Tensor>)> {
        let start = Instant::now();
        let batch = self.prepare(batch);
        let obs = ObsInput::from_batch(&self.policy.config, &batch)?;
        let eps = self.noise(batch.batch_size);
        let mut tape = Tape::new();
        let mut net = Net::bind(&mut tape, &self.policy);
        let vars = net.vars.clone();
        let (total, l1, kl) = loss_graph(&mut net, &obs, &batch, &eps, self.policy.config.kl_weight)?;
        let (lt, ll, lk) = (tape.value(total).item(), tape.value(l1).item(), tape.value(kl).item());
        if !(lt.is_finite() && ll.is_finite() && lk.is_finite()) {
            return Err(Error::NonFinite("training loss"));
        }
        if lk < -1e-12 {
            return Err(Error::Invariant(format!("negative KL {lk}")));
        }
        let grads = tape.backward(total)?;
        let grads = vars
            .iter()
            .zip(self.policy.params.tensors())
            .map(|(&v, p)| grads.get_or_zeros(v, &p.shape))
            .collect();
        Ok((
            StepMetrics {
                step: self.step,
                loss_total: lt,
                loss_l1: ll,
                loss_kl: lk.max(0.0),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            },
            grads,
        ))
    }

    /// Compares the full training-loss gradient against central differences
    /// with step `eps`, using this step's latent noise.
    pub fn gradient_check(&self, batch: &Batch, eps: f64, floor: f64) -> Result<GradCheckReport> {
        let batch = self.prepare(batch);
        let obs = ObsInput::from_batch(&self.policy.config, &batch)?;
        let noise = self.noise(batch.batch_size);
        let beta = self.policy.config.kl_weight;
        let mut params = self.policy.params.tensors().to_vec();
        finite_difference_check(&mut params, eps, floor, |tape, vars| {
            let mut net = Net::with_vars(tape, &self.policy, vars.to_vec());
            Ok(loss_graph(&mut net, &obs, &batch, &noise, beta)?.0)
        })
    }

    /// One forward/backward pass and one Adam update.
    pub fn training_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let start = Instant::now();
        let (mut m, grads) = self.gradients(batch)?;
        self.optimizer.step(self.policy.params.tensors_mut(), &grads)?;
        self.step += 1;
        m.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(m)
    }
}

/// `lr` at step 0 falling to `lr_final` at step `steps - 1`.
pub fn cosine_lr(lr: f64, lr_final: f64, step: u64, steps: u64) -> f64 {
    if steps < 2 {
        return lr;
    }
    let s = step.min(steps - 1) as f64 / (steps - 1) as f64;
    lr_final + 0.5 * (lr - lr_final) * (1.0 + (std::f64::consts::PI * s).cos())
}

/// Runs `steps` updates on batches drawn from `dataset`. Batches are built on a
/// producer thread, at most two ahead. One CSV row per step goes to `metrics`.
pub fn train(
    trainer: &mut Trainer,
    dataset: &Dataset,
    steps: u64,
    seed: u64,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<StepMetrics>> {
    let cfg = trainer.policy.config.clone();
    if dataset.state_dim() != cfg.action_dim() {
        return Err(Error::Shape {
            op: "train",
            lhs: vec![cfg.action_dim()],
            rhs: vec![dataset.state_dim()],
        });
    }
    if let Some(w) = metrics.as_mut() {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io("metrics", e))?;
    }
    let first = trainer.step;
    let mut out = Vec::with_capacity(steps as usize);
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch>>(2);
        scope.spawn(move || {
            for i in 0..steps {
                let s = seed.wrapping_add((first + i).wrapping_mul(0x2545_F491_4F6C_DD1D));
                if tx.send(dataset.sample_batch(cfg.batch_size, cfg.chunk_k, s)).is_err() {
                    break;
                }
            }
        });
        for (i, batch) in rx.iter().take(steps as usize).enumerate() {
            trainer.optimizer.lr = cosine_lr(cfg.lr, cfg.lr_final, i as u64, steps);
            let m = trainer.training_step(&batch?)?;
            if let Some(w) = metrics.as_mut() {
                writeln!(w, "{}", m.to_csv()).map_err(|e| Error::io("metrics", e))?;
            }
            if m.step % 100 == 0 {
                log::debug!("step {} loss {:.4} l1 {:.4} kl {:.4}", m.step, m.loss_total, m.loss_l1, m.loss_kl);
            }
            out.push(m);
        }
        Ok(())
    })?;
    Ok(out)
}

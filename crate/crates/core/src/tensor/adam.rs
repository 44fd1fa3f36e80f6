use super::Tensor;
use crate::error::{Error, Result};

/// One bias-corrected Adam update of `params` in place. `t` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    m: &mut [Tensor],
    v: &mut [Tensor],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) -> Result<()> {
    if t < 1 {
        return Err(Error::InvalidArgument("adam step counter starts at 1".into()));
    }
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Dimension {
            what: "adam parameter list",
            expected: params.len(),
            got: grads.len().min(m.len()).min(v.len()),
        });
    }
    for i in 0..params.len() {
        for other in [&grads[i].shape, &m[i].shape, &v[i].shape] {
            if *other != params[i].shape {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: params[i].shape.clone(),
                    rhs: other.clone(),
                });
            }
        }
    }
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        let (p, g, mi, vi) = (&mut params[i].data, &grads[i].data, &mut m[i].data, &mut v[i].data);
        for j in 0..p.len() {
            mi[j] = beta1 * mi[j] + (1.0 - beta1) * g[j];
            vi[j] = beta2 * vi[j] + (1.0 - beta2) * g[j] * g[j];
            let mhat = mi[j] / c1;
            let vhat = vi[j] / c2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam optimizer state for a fixed parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        self.t += 1;
        adam_step(params, grads, &mut self.m, &mut self.v, self.lr, self.beta1, self.beta2, self.eps, self.t)
    }
}

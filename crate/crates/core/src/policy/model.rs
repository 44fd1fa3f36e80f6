use crate::config::PolicyConfig;
use crate::episode::Batch;
use crate::error::{Error, Result};
use crate::observation::Frame;
use crate::tensor::{Tape, Tensor, Var};

use super::{ParamSet, Policy};

/// Parameters bound to a tape for one forward pass.
pub struct Net<'a> {
    pub tape: &'a mut Tape,
    pub vars: Vec<Var>,
    params: &'a ParamSet,
    cfg: &'a PolicyConfig,
}

impl<'a> Net<'a> {
    pub fn bind(tape: &'a mut Tape, policy: &'a Policy) -> Self {
        let vars = policy.params.tensors().iter().map(|t| tape.param(t)).collect();
        Self {
            tape,
            vars,
            params: &policy.params,
            cfg: &policy.config,
        }
    }

    /// Binds externally created variables (used by gradient checks).
    pub fn with_vars(tape: &'a mut Tape, policy: &'a Policy, vars: Vec<Var>) -> Self {
        Self {
            tape,
            vars,
            params: &policy.params,
            cfg: &policy.config,
        }
    }

    fn p(&self, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing from layout"));
        self.vars[i]
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.w")), self.p(&format!("{name}.b")));
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let (g, b) = (self.p(&format!("{name}.g")), self.p(&format!("{name}.b")));
        self.tape.layer_norm(x, g, b)
    }

    /// Multi-head attention of `q_in [B, Tq, d]` over `kv_in [B, Tk, d]`.
    fn attention(&mut self, q_in: Var, kv_in: Var, name: &str) -> Result<Var> {
        let d = self.cfg.d_model;
        let h = self.cfg.heads;
        let dh = d / h;
        let q = self.linear(q_in, &format!("{name}.q"))?;
        // a key bias only shifts every score of a query equally
        let wk = self.p(&format!("{name}.k.w"));
        let k = self.tape.matmul(kv_in, wk)?;
        let v = self.linear(kv_in, &format!("{name}.v"))?;
        let last = self.tape.shape(q).len() - 1;
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = self.tape.slice(q, last, i * dh, (i + 1) * dh)?;
            let kh = self.tape.slice(k, last, i * dh, (i + 1) * dh)?;
            let vh = self.tape.slice(v, last, i * dh, (i + 1) * dh)?;
            let kt = self.tape.transpose(kh)?;
            let scores = self.tape.matmul(qh, kt)?;
            let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let att = self.tape.softmax(scores)?;
            heads.push(self.tape.matmul(att, vh)?);
        }
        let cat = if h == 1 { heads[0] } else { self.tape.concat(&heads, last)? };
        self.linear(cat, &format!("{name}.o"))
    }

    fn ffn(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{name}.1"))?;
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{name}.2"))
    }

    /// Pre-norm encoder block.
    fn encoder_block(&mut self, x: Var, name: &str) -> Result<Var> {
        let n = self.norm(x, &format!("{name}.ln1"))?;
        let a = self.attention(n, n, &format!("{name}.attn"))?;
        let x = self.tape.add(x, a)?;
        let n = self.norm(x, &format!("{name}.ln2"))?;
        let f = self.ffn(n, &format!("{name}.ffn"))?;
        self.tape.add(x, f)
    }

    fn decoder_block(&mut self, y: Var, memory: Var, name: &str) -> Result<Var> {
        let n = self.norm(y, &format!("{name}.ln1"))?;
        let a = self.attention(n, n, &format!("{name}.self"))?;
        let y = self.tape.add(y, a)?;
        let n = self.norm(y, &format!("{name}.ln2"))?;
        let c = self.attention(n, memory, &format!("{name}.cross"))?;
        let y = self.tape.add(y, c)?;
        let n = self.norm(y, &format!("{name}.ln3"))?;
        let f = self.ffn(n, &format!("{name}.ffn"))?;
        self.tape.add(y, f)
    }

    /// `[B, n]` to a `[B, 1, d]` token through a linear map.
    fn token(&mut self, x: Var, name: &str) -> Result<Var> {
        let b = self.tape.shape(x)[0];
        let t = self.linear(x, name)?;
        self.tape.reshape(t, &[b, 1, self.cfg.d_model])
    }
}

/// Model inputs: patchified frames and normalized follower state.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsInput {
    pub batch: usize,
    /// `[B, patches, patch²]`
    pub overhead: Tensor,
    pub gripper: Tensor,
    /// `[B, S]`
    pub state: Tensor,
}

/// Splits `b` square frames of side `side` (row-major, flattened) into
/// `[b, (side/p)², p²]` patches, patch index `row · (side/p) + col`.
pub fn patchify(pixels: &[f64], b: usize, side: usize, p: usize) -> Result<Tensor> {
    if side % p != 0 || pixels.len() != b * side * side {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![b, side, side],
            rhs: vec![pixels.len(), p],
        });
    }
    let sp = side / p;
    let mut data = Vec::with_capacity(pixels.len());
    for f in pixels.chunks_exact(side * side) {
        for pr in 0..sp {
            for pc in 0..sp {
                for r in 0..p {
                    let start = (pr * p + r) * side + pc * p;
                    data.extend_from_slice(&f[start..start + p]);
                }
            }
        }
    }
    Tensor::new(vec![b, sp * sp, p * p], data)
}

impl ObsInput {
    pub fn from_batch(cfg: &PolicyConfig, batch: &Batch) -> Result<Self> {
        check_side(cfg, batch.frame_side)?;
        if batch.state_dim != cfg.action_dim() {
            return Err(Error::Shape {
                op: "encode_observation",
                lhs: vec![cfg.action_dim()],
                rhs: vec![batch.state_dim],
            });
        }
        let b = batch.batch_size;
        Ok(Self {
            batch: b,
            overhead: patchify(&batch.overhead, b, batch.frame_side, cfg.patch_size)?,
            gripper: patchify(&batch.gripper, b, batch.frame_side, cfg.patch_size)?,
            state: Tensor::new(vec![b, batch.state_dim], batch.state.clone())?,
        })
    }

    /// One observation from a normalized state and two frames.
    pub fn single(cfg: &PolicyConfig, state: &[f64], overhead: &Frame, gripper: &Frame) -> Result<Self> {
        for f in [overhead, gripper] {
            if f.width != f.height {
                return Err(Error::Shape {
                    op: "encode_observation",
                    lhs: vec![cfg.frame_size, cfg.frame_size],
                    rhs: vec![f.height, f.width],
                });
            }
            check_side(cfg, f.width)?;
        }
        let px = |f: &Frame| f.pixels.iter().map(|&v| v as f64 / 255.0).collect::<Vec<_>>();
        Ok(Self {
            batch: 1,
            overhead: patchify(&px(overhead), 1, overhead.width, cfg.patch_size)?,
            gripper: patchify(&px(gripper), 1, gripper.width, cfg.patch_size)?,
            state: Tensor::new(vec![1, state.len()], state.to_vec())?,
        })
    }
}

fn check_side(cfg: &PolicyConfig, side: usize) -> Result<()> {
    if side != cfg.frame_size {
        return Err(Error::Shape {
            op: "encode_observation",
            lhs: vec![cfg.frame_size, cfg.frame_size],
            rhs: vec![side, side],
        });
    }
    Ok(())
}

/// `[patches, d]` positional term: row embedding plus column embedding.
fn positional(net: &mut Net) -> Result<Var> {
    let sp = net.cfg.frame_size / net.cfg.patch_size;
    let n = sp * sp;
    let rows = net
        .tape
        .constant(Tensor::from_fn(&[n, sp], |i| ((i / sp) / sp == i % sp) as u8 as f64));
    let cols = net
        .tape
        .constant(Tensor::from_fn(&[n, sp], |i| ((i / sp) % sp == i % sp) as u8 as f64));
    let (pr, pc) = (net.p("obs.pos_row"), net.p("obs.pos_col"));
    let r = net.tape.matmul(rows, pr)?;
    let c = net.tape.matmul(cols, pc)?;
    net.tape.add(r, c)
}

/// `[B, 2·patches + 1, d]`: overhead tokens, gripper tokens, state token.
pub fn encode_observation(net: &mut Net, obs: &ObsInput) -> Result<Var> {
    let cfg = net.cfg;
    let expect = [obs.batch, cfg.patches_per_frame(), cfg.patch_size * cfg.patch_size];
    for frames in [&obs.overhead, &obs.gripper] {
        if frames.shape != expect {
            return Err(Error::Shape {
                op: "encode_observation",
                lhs: expect.to_vec(),
                rhs: frames.shape.clone(),
            });
        }
    }
    if obs.state.shape != [obs.batch, cfg.action_dim()] {
        return Err(Error::Shape {
            op: "encode_observation",
            lhs: vec![obs.batch, cfg.action_dim()],
            rhs: obs.state.shape.clone(),
        });
    }
    let pos = positional(net)?;
    let cams = net.p("obs.camera");
    let mut parts = Vec::with_capacity(3);
    for (slot, frames) in [&obs.overhead, &obs.gripper].into_iter().enumerate() {
        let x = net.tape.constant(frames.clone());
        let t = net.linear(x, "obs.patch")?;
        let t = net.tape.add(t, pos)?;
        let cam = net.tape.slice(cams, 0, slot, slot + 1)?;
        let cam = net.tape.reshape(cam, &[cfg.d_model])?;
        parts.push(net.tape.add(t, cam)?);
    }
    let s = net.tape.constant(obs.state.clone());
    parts.push(net.token(s, "obs.state")?);
    net.tape.concat(&parts, 1)
}

/// Chunk encoder over `[target rows, state]`, mean-pooled to `(mu, logvar)`.
pub fn cvae_encode(net: &mut Net, chunk: Var, state: Var) -> Result<(Var, Var)> {
    let cfg = net.cfg;
    let cs = net.tape.shape(chunk).to_vec();
    if cs.len() != 3 || cs[1] != cfg.chunk_k || cs[2] != cfg.action_dim() {
        return Err(Error::Shape {
            op: "cvae_encode",
            lhs: vec![cs.first().copied().unwrap_or(0), cfg.chunk_k, cfg.action_dim()],
            rhs: cs,
        });
    }
    let a = net.linear(chunk, "cvae.action")?;
    let s = net.token(state, "cvae.state")?;
    let x = net.tape.concat(&[a, s], 1)?;
    let pos = net.p("cvae.pos");
    let mut x = net.tape.add(x, pos)?;
    for i in 0..cfg.latent_encoder_layers {
        x = net.encoder_block(x, &format!("cvae.{i}"))?;
    }
    let x = net.norm(x, "cvae.ln")?;
    let pooled = net.tape.mean(x, 1)?;
    let mu = net.linear(pooled, "cvae.mu")?;
    let logvar = net.linear(pooled, "cvae.logvar")?;
    Ok((mu, logvar))
}

/// `[B, k, S]` normalized leader rows from observation tokens and latent `z [B, L]`.
pub fn predict_chunk(net: &mut Net, tokens: Var, z: Var) -> Result<Var> {
    let cfg = net.cfg;
    let b = net.tape.shape(tokens)[0];
    if net.tape.shape(z) != [b, cfg.latent_dim] {
        return Err(Error::Shape {
            op: "predict_chunk",
            lhs: vec![b, cfg.latent_dim],
            rhs: net.tape.shape(z).to_vec(),
        });
    }
    let zt = net.token(z, "enc.latent")?;
    let mut x = net.tape.concat(&[tokens, zt], 1)?;
    for i in 0..cfg.encoder_layers {
        x = net.encoder_block(x, &format!("enc.{i}"))?;
    }
    let memory = net.norm(x, "enc.ln")?;
    let q = net.p("dec.query");
    let mut y = net.tape.expand(q, &[b, cfg.chunk_k, cfg.d_model])?;
    for i in 0..cfg.decoder_layers {
        y = net.decoder_block(y, memory, &format!("dec.{i}"))?;
    }
    let y = net.norm(y, "dec.ln")?;
    net.linear(y, "dec.head")
}

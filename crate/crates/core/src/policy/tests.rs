use super::*;
use crate::episode::tests::synthetic;
use crate::episode::{Batch, Dataset, NormStats};

fn unit_stats(s: usize) -> SeriesStats {
    let n = NormStats {
        mean: vec![0.0; s],
        std: vec![1.0; s],
    };
    SeriesStats {
        follower: n.clone(),
        leader: n,
    }
}

fn tiny_dataset() -> Dataset {
    Dataset::new(vec![synthetic(12, 3, 8, 0.0), synthetic(9, 3, 8, 1.5)]).unwrap()
}

fn tiny_policy(init: HeadInit, seed: u64) -> Policy {
    let ds = tiny_dataset();
    Policy::new(PolicyConfig::tiny(3), ds.stats.clone(), true, init, seed).unwrap()
}

fn frame(side: usize, f: impl Fn(usize) -> u8) -> Frame {
    Frame {
        width: side,
        height: side,
        pixels: (0..side * side).map(f).collect(),
        timestamp_us: 0,
    }
}

fn tokens(policy: &Policy, obs: &ObsInput) -> Tensor {
    let mut tape = Tape::inference();
    let mut net = Net::bind(&mut tape, policy);
    let t = encode_observation(&mut net, obs).unwrap();
    tape.value(t).clone()
}

#[test]
fn default_config_token_count() {
    let cfg = PolicyConfig::default();
    let p = Policy::new(cfg.clone(), unit_stats(9), true, HeadInit::Zero, 1).unwrap();
    let f = frame(64, |i| (i % 251) as u8);
    let obs = ObsInput::single(&cfg, &[0.1; 9], &f, &f).unwrap();
    assert_eq!(tokens(&p, &obs).shape, vec![1, 33, 32]);
}

#[test]
fn resolution_mismatch_is_an_error() {
    let p = tiny_policy(HeadInit::Zero, 1);
    let f = frame(16, |_| 0);
    let g = frame(8, |_| 0);
    let err = p.act(&[0.0; 9], &f, &g).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "encode_observation", .. }), "{err}");
}

#[test]
fn patchify_layout() {
    // 4×4 frame, patch 2: patch 1 is the top-right block
    let px: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let t = patchify(&px, 1, 4, 2).unwrap();
    assert_eq!(t.shape, vec![1, 4, 4]);
    assert_eq!(&t.data[4..8], &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(&t.data[12..16], &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn zero_projections_leave_positional_terms() {
    let mut p = tiny_policy(HeadInit::Zero, 2);
    for name in ["obs.patch.w", "obs.patch.b", "obs.state.w", "obs.state.b"] {
        let t = p.params.get_mut(name).unwrap();
        *t = Tensor::zeros(&t.shape);
    }
    let cfg = p.config.clone();
    let blank = frame(8, |_| 0);
    let obs = ObsInput::single(&cfg, &[0.0; 9], &blank, &blank).unwrap();
    let tok = tokens(&p, &obs);
    let d = cfg.d_model;
    let sp = cfg.frame_size / cfg.patch_size;
    let row = p.params.get("obs.pos_row").unwrap();
    let col = p.params.get("obs.pos_col").unwrap();
    let cam = p.params.get("obs.camera").unwrap();
    for slot in 0..2 {
        for i in 0..sp * sp {
            for c in 0..d {
                let want = row.data[(i / sp) * d + c] + col.data[(i % sp) * d + c] + cam.data[slot * d + c];
                let got = tok.data[((slot * sp * sp) + i) * d + c];
                assert_eq!(got, want);
            }
        }
    }
    assert!(tok.data[2 * sp * sp * d..].iter().all(|&v| v == 0.0));
}

#[test]
fn camera_swap_changes_tokens_only_by_camera_terms() {
    let p = tiny_policy(HeadInit::Random, 3);
    let cfg = p.config.clone();
    let a = frame(8, |i| (i * 13 % 256) as u8);
    let b = frame(8, |i| (255 - i * 7 % 256) as u8);
    let ab = tokens(&p, &ObsInput::single(&cfg, &[0.3; 9], &a, &b).unwrap());
    let ba = tokens(&p, &ObsInput::single(&cfg, &[0.3; 9], &b, &a).unwrap());
    let d = cfg.d_model;
    let n = cfg.patches_per_frame() * d;
    let cam = p.params.get("obs.camera").unwrap();
    // frame a sits in slot 0 of `ab` and slot 1 of `ba`
    for i in 0..n {
        let c = i % d;
        let diff = ab.data[i] - ba.data[n + i];
        assert!((diff - (cam.data[c] - cam.data[d + c])).abs() < 1e-12);
    }
    assert_eq!(ab.data[2 * n..], ba.data[2 * n..]);
}

fn batch(p: &Policy) -> Batch {
    tiny_dataset()
        .sample_at(&[(0, 0), (0, 5), (1, 3), (1, 8)], p.config.chunk_k)
        .unwrap()
}

fn run_cvae(p: &Policy, b: &Batch) -> (Tensor, Tensor) {
    let mut tape = Tape::inference();
    let mut net = Net::bind(&mut tape, p);
    let chunk = net
        .tape
        .constant(Tensor::new(vec![b.batch_size, b.chunk_k, b.state_dim], b.target.clone()).unwrap());
    let state = net
        .tape
        .constant(Tensor::new(vec![b.batch_size, b.state_dim], b.state.clone()).unwrap());
    let (mu, lv) = cvae_encode(&mut net, chunk, state).unwrap();
    (tape.value(mu).clone(), tape.value(lv).clone())
}

#[test]
fn zero_heads_give_zero_latent_and_kl() {
    let p = tiny_policy(HeadInit::Zero, 4);
    let b = batch(&p);
    let (mu, lv) = run_cvae(&p, &b);
    assert!(mu.data.iter().chain(&lv.data).all(|&v| v == 0.0));
    let mut tr = Trainer::new(p, 9);
    let m = tr.training_step(&b).unwrap();
    assert_eq!(m.loss_kl, 0.0);
}

#[test]
fn cvae_is_deterministic() {
    let p = tiny_policy(HeadInit::Random, 5);
    let b = batch(&p);
    assert_eq!(run_cvae(&p, &b), run_cvae(&p, &b));
}

#[test]
fn cvae_rejects_wrong_chunk_length() {
    let p = tiny_policy(HeadInit::Random, 5);
    let mut tape = Tape::inference();
    let mut net = Net::bind(&mut tape, &p);
    let chunk = net.tape.constant(Tensor::zeros(&[1, 3, 9]));
    let state = net.tape.constant(Tensor::zeros(&[1, 9]));
    assert!(matches!(cvae_encode(&mut net, chunk, state), Err(Error::Shape { op: "cvae_encode", .. })));
}

fn chunk_with_z(p: &Policy, obs: &ObsInput, z: Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let mut net = Net::bind(&mut tape, p);
    let t = encode_observation(&mut net, obs).unwrap();
    let zv = net.tape.constant(z);
    let y = predict_chunk(&mut net, t, zv).unwrap();
    tape.value(y).clone()
}

#[test]
fn predict_chunk_shapes_and_latent_path() {
    let mut cfg = PolicyConfig::tiny(3);
    cfg.chunk_k = 1;
    let p = Policy::new(cfg.clone(), unit_stats(9), true, HeadInit::Random, 6).unwrap();
    let f = frame(8, |i| i as u8);
    let obs = ObsInput::single(&cfg, &[0.2; 9], &f, &f).unwrap();
    let z0 = chunk_with_z(&p, &obs, Tensor::zeros(&[1, cfg.latent_dim]));
    assert_eq!(z0.shape, vec![1, 1, 9]);
    assert_eq!(z0, chunk_with_z(&p, &obs, Tensor::zeros(&[1, cfg.latent_dim])));
    let big = Tensor::from_fn(&[1, cfg.latent_dim], |i| 5.0 * (i as f64 - 1.5));
    let zb = chunk_with_z(&p, &obs, big);
    let diff = z0.data.iter().zip(&zb.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff > 0.0);
    assert_eq!(p.infer(&obs).unwrap(), z0);
}

#[test]
fn inference_never_runs_the_chunk_encoder() {
    let mut p = tiny_policy(HeadInit::Random, 7);
    let f = frame(8, |i| (i * 3) as u8);
    let before = p.act(&[0.5; 9], &f, &f).unwrap();
    let names: Vec<String> = p.params.names().iter().filter(|n| n.starts_with("cvae.")).cloned().collect();
    for n in names {
        let t = p.params.get_mut(&n).unwrap();
        t.data.iter_mut().for_each(|v| *v = f64::NAN);
    }
    assert_eq!(p.act(&[0.5; 9], &f, &f).unwrap(), before);
    assert_eq!(before.len(), p.config.chunk_k);
}

#[test]
fn lr_zero_keeps_params() {
    let mut p = tiny_policy(HeadInit::Random, 8);
    p.config.lr = 0.0;
    let b = batch(&p);
    let mut tr = Trainer::new(p.clone(), 1);
    let m = tr.training_step(&b).unwrap();
    assert_eq!(tr.policy.params, p.params);
    assert!(m.loss_l1 > 0.0 && m.loss_total.is_finite());
}

#[test]
fn zero_target_zero_head_fixed_point() {
    let mut p = tiny_policy(HeadInit::Zero, 9);
    p.config.kl_weight = 0.0;
    let mut b = batch(&p);
    b.target.iter_mut().for_each(|v| *v = 0.0);
    let mut tr = Trainer::new(p, 2);
    let m = tr.training_step(&b).unwrap();
    assert_eq!(m.loss_l1, 0.0);
    assert_eq!(m.loss_total, 0.0);
}

#[test]
fn batch_order_does_not_change_loss() {
    let p = tiny_policy(HeadInit::Random, 10);
    let mut cfg_p = p.clone();
    cfg_p.config.kl_weight = 0.0;
    let ds = tiny_dataset();
    let picks = [(0, 1), (1, 2), (0, 7), (1, 0)];
    let a = ds.sample_at(&picks, 2).unwrap();
    let rev: Vec<_> = picks.iter().rev().copied().collect();
    let b = ds.sample_at(&rev, 2).unwrap();
    // with z = mu and no KL the loss is a mean of per-sample terms
    let loss = |batch: &Batch| {
        let obs = ObsInput::from_batch(&cfg_p.config, batch).unwrap();
        let mut tape = Tape::inference();
        let mut net = Net::bind(&mut tape, &cfg_p);
        let eps = Tensor::zeros(&[4, cfg_p.config.latent_dim]);
        let (t, _, _) = train::loss_graph(&mut net, &obs, batch, &eps, 0.0).unwrap();
        tape.value(t).item()
    };
    assert!((loss(&a) - loss(&b)).abs() < 1e-12);
}

#[test]
fn end_to_end_gradient_check() {
    let p = tiny_policy(HeadInit::Random, 11);
    let b = batch(&p);
    let tr = Trainer::new(p, 3);
    let r = tr.gradient_check(&b, 1e-5, 1e-5).unwrap();
    assert!(r.entries == tr.policy.params.numel());
    assert!(
        r.max_rel_err < 1e-4,
        "{} at {}[{}]: {} vs {}",
        r.max_rel_err,
        tr.policy.params.names()[r.worst_param],
        r.worst_index,
        r.worst_analytic,
        r.worst_numeric
    );
}

#[test]
fn overfits_one_batch() {
    let mut cfg = PolicyConfig::tiny(3);
    cfg.d_model = 16;
    cfg.ffn_dim = 32;
    cfg.chunk_k = 4;
    let ds = tiny_dataset();
    let p = Policy::new(cfg, ds.stats.clone(), true, HeadInit::Zero, 12).unwrap();
    let b = ds.sample_at(&[(0, 0), (0, 4), (1, 2), (1, 6)], 4).unwrap();
    let mut tr = Trainer::new(p, 4);
    let first = tr.training_step(&b).unwrap().loss_l1;
    let mut last = first;
    for _ in 1..200 {
        last = tr.training_step(&b).unwrap().loss_l1;
    }
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn no_force_variant_zeroes_torque_inputs() {
    let ds = tiny_dataset();
    let full = Policy::new(PolicyConfig::tiny(3), ds.stats.clone(), true, HeadInit::Zero, 1).unwrap();
    let mut nf = full.clone();
    nf.use_force = false;
    assert_eq!(full.params.numel(), nf.params.numel());
    let tr = Trainer::new(nf.clone(), 1);
    let b = tr.prepare(&batch(&nf));
    for row in b.state.chunks(9) {
        assert!(row[6..].iter().all(|&v| v == 0.0));
    }
    for row in b.loss_mask.chunks(9) {
        assert!(row[6..].iter().all(|&v| v == 0.0));
    }
    let f = frame(8, |_| 9);
    let rows = nf.act(&[0.1; 9], &f, &f).unwrap();
    assert!(rows.iter().all(|r| r[6..].iter().all(|&v| v == 0.0)));
    assert_eq!(nf.normalize_state(&[3.0; 9])[6..], [0.0; 3]);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = tiny_policy(HeadInit::Random, 13);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&p, &a).unwrap();
    let back = load_checkpoint(&a).unwrap();
    assert_eq!(back, p);
    save_checkpoint(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let f = frame(8, |i| i as u8);
    assert_eq!(back.act(&[0.0; 9], &f, &f).unwrap().len(), 2);
}

#[test]
fn checkpoint_errors() {
    let p = tiny_policy(HeadInit::Random, 14);
    assert!(matches!(p.check_joints(5), Err(Error::Shape { .. })));
    let mut bytes = checkpoint::to_bytes(&p).unwrap();
    let path = std::path::Path::new("x.ckpt");
    let mut v = bytes.clone();
    v[8] = 9;
    assert!(matches!(checkpoint::from_bytes(&v, path), Err(Error::Version { found: 9, .. })));
    bytes.truncate(bytes.len() - 8);
    assert!(checkpoint::from_bytes(&bytes, path).is_err());
    assert!(checkpoint::from_bytes(b"not a checkpoint at all", path).is_err());

    // a header claiming four joints over three-joint tensors
    let mut q = p.clone();
    q.config.n_joints = 4;
    let forged = checkpoint::to_bytes(&q).unwrap();
    let err = checkpoint::from_bytes(&forged, path).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "load_checkpoint", .. }), "{err}");
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(1e-3, 1e-4, 0, 100), 1e-3);
    assert!((cosine_lr(1e-3, 1e-4, 99, 100) - 1e-4).abs() < 1e-18);
    let mid = cosine_lr(1.0, 0.0, 50, 101);
    assert!((mid - 0.5).abs() < 1e-12);
    assert_eq!(cosine_lr(2.0, 2.0, 7, 10), 2.0);
    assert_eq!(cosine_lr(1.0, 0.0, 0, 1), 1.0);
}

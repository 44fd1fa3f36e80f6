//! On-disk demonstration episodes and the training sampler.
//!
//! Layout of one episode directory:
//!
//! ```text
//! meta.json                 EpisodeMeta, UTF-8 JSON
//! joints.bin                per tick: follower block then leader block,
//!                           each 3·(dof+1) little-endian f32
//!                           [angles…, velocities…, torques…]
//! frames/overhead_000000.pgm
//! frames/gripper_000000.pgm ...
//! ```
//!
//! Series are held in memory as f64 but quantized to f32 on construction, so
//! a loaded episode compares equal to the one that was saved.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ObjectSpec, TaskKind};
use crate::error::{Error, Result};
use crate::observation::{Frame, SampledObservation};

pub const EPISODE_FORMAT_VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over rows, std floored at [`STD_FLOOR`].
    pub fn compute<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for r in &rows {
            if sum.is_empty() {
                sum = vec![0.0; r.len()];
            }
            if r.len() != sum.len() {
                return Err(Error::Dimension {
                    what: "stats row",
                    expected: sum.len(),
                    got: r.len(),
                });
            }
            for (s, v) in sum.iter_mut().zip(r.iter()) {
                *s += v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Invariant("statistics over an empty series".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        sq.resize(mean.len(), 0.0);
        for r in &rows {
            for ((q, v), m) in sq.iter_mut().zip(r.iter()).zip(&mean) {
                *q += (v - m) * (v - m);
            }
        }
        let std = sq.iter().map(|q| (q / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| x * s + m).collect()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.mean.len() != n || self.std.len() != n {
            return Err(Error::Invariant(format!("stats must have {n} channels")));
        }
        if !self.mean.iter().chain(&self.std).all(|v| v.is_finite()) || self.std.iter().any(|&s| s < STD_FLOOR) {
            return Err(Error::Invariant("stats must be finite with std ≥ 1e-6".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub follower: NormStats,
    pub leader: NormStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    pub format_version: u32,
    pub dof_plus_gripper: usize,
    pub control_rate: f64,
    pub sample_rate: f64,
    pub chunk_capable_length: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub object_spec: ObjectSpec,
    pub task: TaskKind,
    /// The torque channel holds reaction-torque estimates, not motor torques.
    pub torque_channel: String,
    pub expert: String,
    pub seed: u64,
    pub normalization_stats: SeriesStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub follower: Vec<Vec<f64>>,
    pub leader: Vec<Vec<f64>>,
    pub overhead: Vec<Frame>,
    pub gripper: Vec<Frame>,
}

/// Recording context that is not derived from the data itself.
#[derive(Clone, Debug)]
pub struct EpisodeInfo {
    pub control_rate: f64,
    pub sample_rate: f64,
    pub object_spec: ObjectSpec,
    pub task: TaskKind,
    pub expert: String,
    pub seed: u64,
}

fn quantize(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl Episode {
    /// Builds an episode, quantizing series to f32 and deriving statistics.
    pub fn new(
        info: EpisodeInfo,
        mut follower: Vec<Vec<f64>>,
        mut leader: Vec<Vec<f64>>,
        overhead: Vec<Frame>,
        gripper: Vec<Frame>,
    ) -> Result<Self> {
        if follower.is_empty() {
            return Err(Error::Invariant("episode has no ticks".into()));
        }
        let width = follower[0].len();
        if width == 0 || width % 3 != 0 {
            return Err(Error::Invariant(format!("state width {width} is not 3·(dof+1)")));
        }
        for r in follower.iter_mut().chain(leader.iter_mut()) {
            quantize(r);
        }
        let stats = SeriesStats {
            follower: NormStats::compute(follower.iter().map(|r| r.as_slice()))?,
            leader: NormStats::compute(leader.iter().map(|r| r.as_slice()))?,
        };
        let (fw, fh) = overhead.first().map_or((0, 0), |f| (f.width, f.height));
        let ep = Episode {
            meta: EpisodeMeta {
                format_version: EPISODE_FORMAT_VERSION,
                dof_plus_gripper: width / 3,
                control_rate: info.control_rate,
                sample_rate: info.sample_rate,
                chunk_capable_length: follower.len(),
                frame_width: fw,
                frame_height: fh,
                object_spec: info.object_spec,
                task: info.task,
                torque_channel: "reaction_estimate".into(),
                expert: info.expert,
                seed: info.seed,
                normalization_stats: stats,
            },
            follower,
            leader,
            overhead,
            gripper,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn len(&self) -> usize {
        self.follower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.follower.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        3 * self.meta.dof_plus_gripper
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.format_version != EPISODE_FORMAT_VERSION {
            return Err(Error::Version {
                found: m.format_version,
                expected: EPISODE_FORMAT_VERSION,
            });
        }
        let t = self.follower.len();
        if t == 0 {
            return Err(Error::Invariant("episode has no ticks".into()));
        }
        if [self.leader.len(), self.overhead.len(), self.gripper.len()] != [t, t, t] {
            return Err(Error::Invariant(format!(
                "series lengths differ: follower {t}, leader {}, overhead {}, gripper {}",
                self.leader.len(),
                self.overhead.len(),
                self.gripper.len()
            )));
        }
        if m.chunk_capable_length != t {
            return Err(Error::Invariant(format!(
                "chunk_capable_length {} but {t} ticks",
                m.chunk_capable_length
            )));
        }
        if !(m.control_rate > 0.0 && m.sample_rate > 0.0) {
            return Err(Error::Invariant("rates must be positive".into()));
        }
        let s = self.state_dim();
        for r in self.follower.iter().chain(&self.leader) {
            if r.len() != s {
                return Err(Error::Invariant(format!("state row of {} values, expected {s}", r.len())));
            }
            if !r.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("episode series"));
            }
        }
        for f in self.overhead.iter().chain(&self.gripper) {
            if f.width != m.frame_width || f.height != m.frame_height || f.pixels.len() != f.width * f.height {
                return Err(Error::Invariant(format!(
                    "frame of {}x{} in a {}x{} episode",
                    f.width, f.height, m.frame_width, m.frame_height
                )));
            }
        }
        m.normalization_stats.follower.validate(s)?;
        m.normalization_stats.leader.validate(s)?;
        Ok(())
    }

    pub fn observation(&self, t: usize) -> SampledObservation {
        SampledObservation {
            timestamp: t as f64 / self.meta.sample_rate,
            follower_state: self.follower[t].clone(),
            overhead: self.overhead[t].clone(),
            gripper_view: self.gripper[t].clone(),
        }
    }

    /// Joint series as CSV: `tick,t`, then follower and leader
    /// `q`, `dq`, `tau_res` columns.
    pub fn write_csv(&self, w: &mut dyn std::io::Write) -> std::io::Result<()> {
        let n = self.meta.dof_plus_gripper;
        let mut cols = vec!["tick".to_string(), "t".to_string()];
        for side in ["f", "l"] {
            for p in ["q", "dq", "tau_res"] {
                cols.extend((0..n).map(|i| format!("{side}_{p}{i}")));
            }
        }
        writeln!(w, "{}", cols.join(","))?;
        for (t, (f, l)) in self.follower.iter().zip(&self.leader).enumerate() {
            write!(w, "{t},{:.3}", t as f64 / self.meta.sample_rate)?;
            for v in f.iter().chain(l) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn joints_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * 2 * self.state_dim() * 4);
        for (f, l) in self.follower.iter().zip(&self.leader) {
            for v in f.iter().chain(l) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Writes the episode into a fresh directory `path`, atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if path.exists() {
            return Err(Error::format(path, "destination already exists"));
        }
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = path
            .file_name()
            .ok_or_else(|| Error::format(path, "episode path has no final component"))?;
        let tmp = parent.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let result = self.write_into(&tmp).and_then(|_| fs::rename(&tmp, path).map_err(|e| Error::io(path, e)));
        if result.is_err() {
            let _ = fs::remove_dir_all(&tmp);
        }
        result
    }

    fn write_into(&self, dir: &Path) -> Result<()> {
        let frames = dir.join("frames");
        fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
        let meta = serde_json::to_string_pretty(&self.meta)? + "\n";
        let p = dir.join("meta.json");
        fs::write(&p, meta).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("joints.bin");
        fs::write(&p, self.joints_bytes()).map_err(|e| Error::io(&p, e))?;
        for (i, (o, g)) in self.overhead.iter().zip(&self.gripper).enumerate() {
            o.write_pgm(&frames.join(format!("overhead_{i:06}.pgm")))?;
            g.write_pgm(&frames.join(format!("gripper_{i:06}.pgm")))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = path.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        match version {
            Some(v) if v == EPISODE_FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v.min(u32::MAX as u64) as u32,
                    expected: EPISODE_FORMAT_VERSION,
                })
            }
            None => return Err(Error::format(&meta_path, "missing format_version")),
        }
        let meta: EpisodeMeta =
            serde_json::from_value(raw).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let t = meta.chunk_capable_length;
        let s = 3 * meta.dof_plus_gripper;

        let jp = path.join("joints.bin");
        let bytes = fs::read(&jp).map_err(|e| Error::io(&jp, e))?;
        let expected = t * 2 * s * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                &jp,
                format!(
                    "expected {expected} bytes ({t} ticks x 2 arms x {s} values x 4), found {}",
                    bytes.len()
                ),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::format(&jp, "non-finite value"));
        }
        let mut follower = Vec::with_capacity(t);
        let mut leader = Vec::with_capacity(t);
        for tick in values.chunks_exact(2 * s) {
            follower.push(tick[..s].to_vec());
            leader.push(tick[s..].to_vec());
        }

        let frames_dir = path.join("frames");
        let listing = fs::read_dir(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        let (mut n_over, mut n_grip) = (0usize, 0usize);
        for entry in listing {
            let name = entry.map_err(|e| Error::io(&frames_dir, e))?.file_name();
            let name = name.to_string_lossy();
            if name.starts_with("overhead_") && name.ends_with(".pgm") {
                n_over += 1;
            } else if name.starts_with("gripper_") && name.ends_with(".pgm") {
                n_grip += 1;
            }
        }
        if n_over != t || n_grip != t {
            return Err(Error::format(
                &frames_dir,
                format!("{t} ticks but {n_over} overhead and {n_grip} gripper frames"),
            ));
        }
        let read = |name: String, tick: usize| -> Result<Frame> {
            let p: PathBuf = frames_dir.join(name);
            let b = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let mut f = Frame::from_pgm(&b, &p)?;
            f.timestamp_us = (tick as f64 * 1e6 / meta.sample_rate).round() as i64;
            Ok(f)
        };
        let mut overhead = Vec::with_capacity(t);
        let mut gripper = Vec::with_capacity(t);
        for i in 0..t {
            overhead.push(read(format!("overhead_{i:06}.pgm"), i)?);
            gripper.push(read(format!("gripper_{i:06}.pgm"), i)?);
        }
        let ep = Episode {
            meta,
            follower,
            leader,
            overhead,
            gripper,
        };
        ep.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(ep)
    }
}

/// Finished episode directories under `dir`, sorted. Dot-prefixed
/// directories are saves still in progress and are skipped.
pub fn list_episodes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let hidden = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if !hidden && p.join("meta.json").is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// One training batch. Row-major flat buffers, `B` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub chunk_k: usize,
    pub state_dim: usize,
    pub frame_side: usize,
    /// `B × S`, normalized.
    pub state: Vec<f64>,
    /// `B × side²` each, pixel / 255.
    pub overhead: Vec<f64>,
    pub gripper: Vec<f64>,
    /// `B × k × S`, normalized.
    pub target: Vec<f64>,
    /// `B × k`, true where the row repeats the final tick.
    pub pad_mask: Vec<bool>,
    /// `B × k × S`, 1 where the entry counts toward the loss.
    pub loss_mask: Vec<f64>,
    /// `(episode, tick)` of every sample.
    pub origin: Vec<(usize, usize)>,
}

impl Batch {
    /// Zeroes the torque channels of the observation state (normalized units).
    pub fn zero_torque_inputs(&mut self) {
        let n = self.state_dim / 3;
        for row in self.state.chunks_mut(self.state_dim) {
            row[2 * n..].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Removes torque targets from the loss.
    pub fn mask_torque_targets(&mut self) {
        let n = self.state_dim / 3;
        for row in self.loss_mask.chunks_mut(self.state_dim) {
            row[2 * n..].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Episodes plus pooled normalization statistics.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub stats: SeriesStats,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset has no episodes".into()))?;
        let s = first.state_dim();
        let side = first.meta.frame_width;
        for e in &episodes {
            if e.state_dim() != s || e.meta.frame_width != side || e.meta.frame_height != side {
                return Err(Error::Invariant("episodes disagree on state size or frame size".into()));
            }
        }
        let stats = SeriesStats {
            follower: NormStats::compute(episodes.iter().flat_map(|e| e.follower.iter().map(|r| r.as_slice())))?,
            leader: NormStats::compute(episodes.iter().flat_map(|e| e.leader.iter().map(|r| r.as_slice())))?,
        };
        Ok(Self { episodes, stats })
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let paths = list_episodes(dir)?;
        if paths.is_empty() {
            return Err(Error::InvalidArgument(format!("no episodes under {}", dir.display())));
        }
        Self::new(paths.iter().map(|p| Episode::load(p)).collect::<Result<_>>()?)
    }

    pub fn total_ticks(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    pub fn state_dim(&self) -> usize {
        self.episodes[0].state_dim()
    }

    pub fn frame_side(&self) -> usize {
        self.episodes[0].meta.frame_width
    }

    /// Sample `(episode, tick)` at `k` with repeat padding past the episode end.
    pub fn sample_at(&self, picks: &[(usize, usize)], k: usize) -> Result<Batch> {
        if k < 1 {
            return Err(Error::InvalidArgument("chunk length must be ≥ 1".into()));
        }
        let s = self.state_dim();
        let side = self.frame_side();
        let b = picks.len();
        let mut batch = Batch {
            batch_size: b,
            chunk_k: k,
            state_dim: s,
            frame_side: side,
            state: Vec::with_capacity(b * s),
            overhead: Vec::with_capacity(b * side * side),
            gripper: Vec::with_capacity(b * side * side),
            target: Vec::with_capacity(b * k * s),
            pad_mask: Vec::with_capacity(b * k),
            loss_mask: Vec::with_capacity(b * k * s),
            origin: picks.to_vec(),
        };
        for &(e, t) in picks {
            let ep = self
                .episodes
                .get(e)
                .ok_or_else(|| Error::InvalidArgument(format!("episode index {e} out of range")))?;
            if t >= ep.len() {
                return Err(Error::InvalidArgument(format!("tick {t} past episode {e} end")));
            }
            batch.state.extend(self.stats.follower.normalize(&ep.follower[t]));
            batch.overhead.extend(ep.overhead[t].pixels.iter().map(|&p| p as f64 / 255.0));
            batch.gripper.extend(ep.gripper[t].pixels.iter().map(|&p| p as f64 / 255.0));
            let last = ep.len() - 1;
            for j in 0..k {
                let padded = t + j > last;
                let row = &ep.leader[(t + j).min(last)];
                batch.target.extend(self.stats.leader.normalize(row));
                batch.pad_mask.push(padded);
                batch.loss_mask.extend(std::iter::repeat_n(if padded { 0.0 } else { 1.0 }, s));
            }
        }
        Ok(batch)
    }

    /// Uniform over all ticks of all episodes; deterministic in `seed`.
    pub fn sample_batch(&self, batch_size: usize, k: usize, seed: u64) -> Result<Batch> {
        if k < 1 {
            return Err(Error::InvalidArgument("chunk length must be ≥ 1".into()));
        }
        if self.episodes.iter().all(|e| e.len() < k) {
            return Err(Error::InvalidArgument(format!(
                "chunk length {k} exceeds every episode length"
            )));
        }
        let total = self.total_ticks();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<(usize, usize)> = (0..batch_size)
            .map(|_| {
                let mut g = rng.random_range(0..total);
                let mut e = 0;
                while g >= self.episodes[e].len() {
                    g -= self.episodes[e].len();
                    e += 1;
                }
                (e, g)
            })
            .collect();
        self.sample_at(&picks, k)
    }
}

//! Synthetic cameras and multi-rate sampling.
//!
//! Both cameras are orthographic and axis-aligned. A view with centre `c`,
//! width `w` (m) and side `n` (px) maps a world point to continuous pixel
//! coordinates
//!
//! ```text
//! col = (x − c.x)·n/w + n/2
//! row = n/2 − (y − c.y)·n/w
//! ```
//!
//! so pixel `(row, col)` covers the square whose centre is
//! `(row + 0.5, col + 0.5)`. A pixel is painted by a primitive when its
//! centre lies inside it; there is no anti-aliasing. The overhead camera is
//! fixed; the gripper camera is centred on the follower's end effector.
//!
//! Pixel values: background 0, place ring 80, links 140, fingers 200,
//! object 255 (a crushed object is drawn at 60).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ArmConfig, ObjectSpec, SceneConfig};
use crate::dynamics::{finger_gap, JointState, SceneState};
use crate::error::{Error, Result};
use crate::kinematics::chain_points;

pub const RING_VALUE: u8 = 80;
pub const LINK_VALUE: u8 = 140;
pub const FINGER_VALUE: u8 = 200;
pub const OBJECT_VALUE: u8 = 255;
pub const CRUSHED_VALUE: u8 = 60;

const LINK_HALF_WIDTH: f64 = 0.008;
const FINGER_HALF_WIDTH: f64 = 0.002;
const FINGER_LENGTH: f64 = 0.025;
const RING_WIDTH: f64 = 0.004;

/// Grayscale image, row-major, one byte per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    /// Microseconds; used by the sampler, not stored in PGM files.
    pub timestamp_us: i64,
}

impl Frame {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
            timestamp_us: 0,
        }
    }

    pub fn channels(&self) -> usize {
        1
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp_us as f64 * 1e-6
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Binary PGM (P5) encoding.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg.to_string());
        // header: magic, width, height, maxval separated by single whitespace
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PGM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary PGM (P5)"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimension"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("PGM maxval must be 255"));
        }
        let data = &bytes[pos + 1..];
        if data.len() != w * h {
            return Err(Error::format(
                path,
                format!("expected {} pixel bytes for {w}x{h}, found {}", w * h, data.len()),
            ));
        }
        Ok(Self {
            width: w,
            height: h,
            pixels: data.to_vec(),
            timestamp_us: 0,
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Overhead,
    Gripper,
}

/// Orthographic square window onto the table plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub center: [f64; 2],
    pub width: f64,
    pub size: usize,
}

impl Camera {
    pub fn scale(&self) -> f64 {
        self.size as f64 / self.width
    }

    /// Continuous `(row, col)` of a world point.
    pub fn project(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.scale();
        let half = self.size as f64 / 2.0;
        [half - (p[1] - self.center[1]) * s, (p[0] - self.center[0]) * s + half]
    }

    /// World point at the centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let s = self.scale();
        let half = self.size as f64 / 2.0;
        [
            self.center[0] + (col as f64 + 0.5 - half) / s,
            self.center[1] - (row as f64 + 0.5 - half) / s,
        ]
    }
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

enum Shape {
    Segment { a: [f64; 2], b: [f64; 2], half_width: f64 },
    Disc { c: [f64; 2], r: f64 },
    Ring { c: [f64; 2], r: f64, width: f64 },
}

impl Shape {
    fn contains(&self, p: [f64; 2], min_half: f64) -> bool {
        match *self {
            Shape::Segment { a, b, half_width } => dist_to_segment(p, a, b) <= half_width.max(min_half),
            Shape::Disc { c, r } => (p[0] - c[0]).hypot(p[1] - c[1]) <= r,
            Shape::Ring { c, r, width } => {
                let d = (p[0] - c[0]).hypot(p[1] - c[1]);
                d <= r && d >= r - width.max(2.0 * min_half)
            }
        }
    }

    /// Conservative bounding box (x0, y0, x1, y1) in world units.
    fn bounds(&self, min_half: f64) -> [f64; 4] {
        match *self {
            Shape::Segment { a, b, half_width } => {
                let h = half_width.max(min_half);
                [a[0].min(b[0]) - h, a[1].min(b[1]) - h, a[0].max(b[0]) + h, a[1].max(b[1]) + h]
            }
            Shape::Disc { c, r } | Shape::Ring { c, r, .. } => [c[0] - r, c[1] - r, c[0] + r, c[1] + r],
        }
    }
}

/// Renders follower-side camera images of a scene.
#[derive(Clone, Debug)]
pub struct Renderer {
    pub arm: ArmConfig,
    pub object_radius: f64,
    pub place_center: [f64; 2],
    pub place_radius: f64,
    pub overhead: Camera,
    pub gripper_width: f64,
    pub size: usize,
}

impl Renderer {
    pub fn new(arm: &ArmConfig, object: &ObjectSpec, scene: &SceneConfig) -> Self {
        Self {
            arm: arm.clone(),
            object_radius: object.radius,
            place_center: scene.place_center,
            place_radius: scene.place_radius,
            overhead: Camera {
                center: scene.overhead_center,
                width: scene.overhead_width,
                size: scene.frame_size,
            },
            gripper_width: scene.gripper_view_width,
            size: scene.frame_size,
        }
    }

    pub fn end_effector(&self, joints: &[JointState]) -> [f64; 2] {
        *self.chain(joints).last().unwrap()
    }

    fn chain(&self, joints: &[JointState]) -> Vec<[f64; 2]> {
        let angles: Vec<f64> = joints[..self.arm.dof].iter().map(|j| j.angle).collect();
        chain_points(&angles, &self.arm.link_lengths)
    }

    pub fn camera(&self, scene: &SceneState, view: View) -> Camera {
        match view {
            View::Overhead => self.overhead,
            View::Gripper => Camera {
                center: self.end_effector(&scene.follower),
                width: self.gripper_width,
                size: self.size,
            },
        }
    }

    fn shapes(&self, scene: &SceneState) -> Vec<(Shape, u8)> {
        let mut out = vec![(
            Shape::Ring {
                c: self.place_center,
                r: self.place_radius,
                width: RING_WIDTH,
            },
            RING_VALUE,
        )];
        let pts = self.chain(&scene.follower);
        for w in pts.windows(2) {
            out.push((
                Shape::Segment {
                    a: w[0],
                    b: w[1],
                    half_width: LINK_HALF_WIDTH,
                },
                LINK_VALUE,
            ));
        }
        let ee = *pts.last().unwrap();
        let heading: f64 = scene.follower[..self.arm.dof].iter().map(|j| j.angle).sum();
        let (u, n) = ([heading.cos(), heading.sin()], [-heading.sin(), heading.cos()]);
        let half_gap = finger_gap(&self.arm, scene.follower[self.arm.dof].angle) / 2.0;
        for side in [-1.0, 1.0] {
            let o = [ee[0] + side * half_gap * n[0], ee[1] + side * half_gap * n[1]];
            out.push((
                Shape::Segment {
                    a: [o[0] - 0.2 * FINGER_LENGTH * u[0], o[1] - 0.2 * FINGER_LENGTH * u[1]],
                    b: [o[0] + 0.8 * FINGER_LENGTH * u[0], o[1] + 0.8 * FINGER_LENGTH * u[1]],
                    half_width: FINGER_HALF_WIDTH,
                },
                FINGER_VALUE,
            ));
        }
        if scene.object_present {
            let value = if scene.object_crushed { CRUSHED_VALUE } else { OBJECT_VALUE };
            out.push((
                Shape::Disc {
                    c: scene.object_position,
                    r: self.object_radius,
                },
                value,
            ));
        }
        out
    }

    /// Draws one view; later primitives overwrite earlier ones.
    pub fn render(&self, scene: &SceneState, view: View) -> Frame {
        let cam = self.camera(scene, view);
        let mut frame = Frame::blank(cam.size, cam.size);
        frame.timestamp_us = (scene.time * 1e6).round() as i64;
        // thin primitives stay at least about one pixel wide
        let min_half = 0.6 / cam.scale();
        for (shape, value) in self.shapes(scene) {
            let [x0, y0, x1, y1] = shape.bounds(min_half);
            let a = cam.project([x0, y1]);
            let b = cam.project([x1, y0]);
            let n = cam.size as f64;
            let r0 = a[0].floor().clamp(0.0, n) as usize;
            let r1 = b[0].ceil().clamp(0.0, n) as usize;
            let c0 = a[1].floor().clamp(0.0, n) as usize;
            let c1 = b[1].ceil().clamp(0.0, n) as usize;
            for row in r0..r1 {
                for col in c0..c1 {
                    if shape.contains(cam.pixel_center(row, col), min_half) {
                        frame.pixels[row * cam.size + col] = value;
                    }
                }
            }
        }
        frame
    }
}

/// Point decimation: samples `0, factor, 2·factor, …`.
pub fn decimate<T: Clone>(series: &[T], factor: usize) -> Result<Vec<T>> {
    if factor < 1 {
        return Err(Error::InvalidArgument("decimation factor must be ≥ 1".into()));
    }
    Ok(series.iter().step_by(factor).cloned().collect())
}

/// For each tick, the index of the latest timestamp `≤ tick` (zero-order hold).
/// Timestamps are in microseconds so exact hits stay exact.
pub fn align_indices(timestamps_us: &[i64], ticks_us: &[i64]) -> Result<Vec<usize>> {
    if timestamps_us.is_empty() {
        return Err(Error::InvalidArgument("empty frame stream".into()));
    }
    if timestamps_us.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("frame timestamps must be nondecreasing".into()));
    }
    let mut out = Vec::with_capacity(ticks_us.len());
    let mut i = 0;
    for &t in ticks_us {
        if t < timestamps_us[0] {
            return Err(Error::InvalidArgument(format!(
                "tick at {t} µs precedes the first frame at {} µs",
                timestamps_us[0]
            )));
        }
        // ticks are usually increasing; restart the scan when they are not
        if timestamps_us[i] > t {
            i = 0;
        }
        while i + 1 < timestamps_us.len() && timestamps_us[i + 1] <= t {
            i += 1;
        }
        out.push(i);
    }
    Ok(out)
}

pub fn align_frames(frames: &[Frame], ticks_us: &[i64]) -> Result<Vec<Frame>> {
    let ts: Vec<i64> = frames.iter().map(|f| f.timestamp_us).collect();
    Ok(align_indices(&ts, ticks_us)?.into_iter().map(|i| frames[i].clone()).collect())
}

/// `[all angles, all velocities, all torques]`.
pub fn pack_state(joints: &[JointState]) -> Vec<f64> {
    let mut v = Vec::with_capacity(3 * joints.len());
    v.extend(joints.iter().map(|j| j.angle));
    v.extend(joints.iter().map(|j| j.velocity));
    v.extend(joints.iter().map(|j| j.torque));
    v
}

pub fn unpack_state(v: &[f64]) -> Result<Vec<JointState>> {
    if v.len() % 3 != 0 {
        return Err(Error::InvalidArgument(format!(
            "packed state length {} is not a multiple of 3",
            v.len()
        )));
    }
    let n = v.len() / 3;
    Ok((0..n)
        .map(|i| JointState {
            angle: v[i],
            velocity: v[n + i],
            torque: v[2 * n + i],
        })
        .collect())
}

/// Follower state plus both camera images at one sample tick.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledObservation {
    pub timestamp: f64,
    pub follower_state: Vec<f64>,
    pub overhead: Frame,
    pub gripper_view: Frame,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;
    use crate::dynamics::Plant;
    use proptest::prelude::*;

    fn setup() -> (Renderer, Plant, SimConfig) {
        let cfg = SimConfig::default();
        let plant = Plant::new(cfg.arm.clone(), cfg.object.clone(), &cfg.scene).unwrap();
        (Renderer::new(&cfg.arm, &cfg.object, &cfg.scene), plant, cfg)
    }

    #[test]
    fn empty_scene_is_background_except_arm_and_ring() {
        let (r, plant, _) = setup();
        let mut s = plant.initial_state(&[0.4, 0.6, 0.0]).unwrap();
        s.object_present = false;
        let f = r.render(&s, View::Overhead);
        let values: std::collections::BTreeSet<u8> = f.pixels.iter().copied().collect();
        assert!(values.iter().all(|v| [0, RING_VALUE, LINK_VALUE, FINGER_VALUE].contains(v)));
        assert!(values.contains(&LINK_VALUE));
        assert!(!values.contains(&OBJECT_VALUE));
        let bg = f.pixels.iter().filter(|&&p| p == 0).count();
        assert!(bg > f.pixels.len() / 2);
    }

    #[test]
    fn object_centroid_matches_projection() {
        let (r, plant, cfg) = setup();
        let mut s = plant.initial_state(&[-1.5, 0.3, 0.0]).unwrap();
        // park the arm out of the way and put the object at the view centre
        s.object_position = cfg.scene.overhead_center;
        let f = r.render(&s, View::Overhead);
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
        for row in 0..f.height {
            for col in 0..f.width {
                if f.at(row, col) == OBJECT_VALUE {
                    sr += row as f64 + 0.5;
                    sc += col as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        assert!(n > 0.0);
        // independent projection: centre of a 64 px window is pixel (32, 32)
        let side = cfg.scene.frame_size as f64;
        let expect = [side / 2.0, side / 2.0];
        assert!((sr / n - expect[0]).abs() < 1.0 && (sc / n - expect[1]).abs() < 1.0);
        let px_r = cfg.object.radius * side / cfg.scene.overhead_width;
        let area = std::f64::consts::PI * px_r * px_r;
        assert!((n - area).abs() < 0.35 * area, "{n} vs {area}");
    }

    #[test]
    fn gripper_view_is_centred_on_end_effector() {
        let (r, plant, _) = setup();
        let s = plant.initial_state(&[0.2, 0.5, 0.0]).unwrap();
        let cam = r.camera(&s, View::Gripper);
        let ee = plant.end_effector(&s.follower);
        let p = cam.project(ee);
        assert!((p[0] - 32.0).abs() < 1e-9 && (p[1] - 32.0).abs() < 1e-9);
        let f = r.render(&s, View::Gripper);
        assert!(f.pixels.iter().any(|&v| v == FINGER_VALUE));
    }

    #[test]
    fn pgm_round_trip() {
        let (r, plant, _) = setup();
        let s = plant.initial_state(&[0.3, 0.3, 0.5]).unwrap();
        let f = r.render(&s, View::Overhead);
        let bytes = f.to_pgm();
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        let g = Frame::from_pgm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(g.pixels, f.pixels);
        assert!(Frame::from_pgm(&bytes[..bytes.len() - 1], Path::new("x.pgm")).is_err());
    }

    #[test]
    fn decimate_examples() {
        let v: Vec<usize> = (0..1000).collect();
        let d = decimate(&v, 10).unwrap();
        assert_eq!(d.len(), 100);
        assert_eq!(d[1], 10);
        assert_eq!(*d.last().unwrap(), 990);
        assert_eq!(decimate(&v, 1).unwrap(), v);
        assert!(decimate(&v, 0).is_err());
        assert_eq!(decimate(&v[..7], 3).unwrap(), vec![0, 3, 6]);
    }

    #[test]
    fn align_examples() {
        assert_eq!(align_indices(&[0, 5000, 10000], &[10000]).unwrap(), vec![2]);
        assert_eq!(align_indices(&[0, 7000], &[10000]).unwrap(), vec![1]);
        assert!(align_indices(&[0, 7000], &[-1000]).is_err());
        assert!(align_indices(&[], &[0]).is_err());
        assert!(align_indices(&[5, 3], &[6]).is_err());
    }

    #[test]
    fn pack_unpack_round_trip() {
        let js = vec![
            JointState { angle: 0.1, velocity: 0.2, torque: 0.3 },
            JointState { angle: 1.1, velocity: 1.2, torque: 1.3 },
        ];
        let v = pack_state(&js);
        assert_eq!(v, vec![0.1, 1.1, 0.2, 1.2, 0.3, 1.3]);
        assert_eq!(unpack_state(&v).unwrap(), js);
        assert!(unpack_state(&v[..5]).is_err());
    }

    proptest! {
        #[test]
        fn decimation_composes(n in 0usize..500, a in 1usize..7, b in 1usize..7) {
            let v: Vec<usize> = (0..n).collect();
            let ab = decimate(&decimate(&v, a).unwrap(), b).unwrap();
            prop_assert_eq!(ab, decimate(&v, a * b).unwrap());
        }

        #[test]
        fn render_is_pure(
            q in proptest::collection::vec(-2.5f64..2.5, 2),
            g in -0.1f64..1.2,
            ox in -0.1f64..0.4,
            oy in -0.2f64..0.3,
            gripper in proptest::bool::ANY,
        ) {
            let (r, plant, _) = setup();
            let mut s = plant.initial_state(&[q[0], q[1], g]).unwrap();
            s.object_position = [ox, oy];
            let view = if gripper { View::Gripper } else { View::Overhead };
            prop_assert_eq!(r.render(&s, view), r.render(&s.clone(), view));
        }

        #[test]
        fn unpack_inverts_pack(v in proptest::collection::vec(-10.0f64..10.0, 1..6)) {
            let js: Vec<JointState> = v.iter().map(|&x| JointState { angle: x, velocity: -x, torque: 2.0 * x }).collect();
            prop_assert_eq!(unpack_state(&pack_state(&js)).unwrap(), js);
        }
    }
}

//! Simulation, controller and model configuration.
//!
//! Everything is read from one TOML file with flat sections `[arm]`,
//! `[object]`, `[scene]`, `[control]` and `[model]`. Missing keys fall back
//! to the embedded defaults, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard gravity (m/s²).
pub const GRAVITY: f64 = 9.81;

/// Physical description of one planar arm: `dof` revolute joints plus a
/// one-DOF gripper, which is always the last joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmConfig {
    pub dof: usize,
    /// Link lengths (m), one per revolute joint.
    pub link_lengths: Vec<f64>,
    /// Rotor + link inertia (kg·m²), one per joint including the gripper.
    pub inertia: Vec<f64>,
    /// Viscous friction (N·m·s/rad) per joint.
    pub viscous_friction: Vec<f64>,
    /// Coulomb friction (N·m) per joint.
    pub coulomb_friction: Vec<f64>,
    /// Simplified gravity load: `scale · cos(absolute link angle)` (N·m).
    pub gravity_torque_scale: Vec<f64>,
    /// `[min, max]` angle per joint (rad).
    pub joint_limits: Vec<[f64; 2]>,
    /// Symmetric motor torque saturation (N·m).
    pub torque_limit: f64,
    /// Finger gap with the gripper joint at 0 rad (m).
    pub gripper_max_gap: f64,
    /// Gap reduction per radian of gripper closure (m/rad).
    pub gripper_gap_per_rad: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            dof: 2,
            link_lengths: vec![0.15, 0.15],
            inertia: vec![0.1, 0.1, 0.02],
            viscous_friction: vec![0.5, 0.5, 0.05],
            coulomb_friction: vec![0.05, 0.05, 0.005],
            gravity_torque_scale: vec![0.3, 0.1, 0.0],
            joint_limits: vec![[-2.6, 2.6], [-2.6, 2.6], [-0.1, 1.2]],
            torque_limit: 10.0,
            gripper_max_gap: 0.08,
            gripper_gap_per_rad: 0.08 / 1.2,
        }
    }
}

impl ArmConfig {
    /// Joints including the gripper.
    pub fn n_joints(&self) -> usize {
        self.dof + 1
    }

    /// Length of the `[angles, velocities, torques]` vector for one arm.
    pub fn state_dim(&self) -> usize {
        3 * self.n_joints()
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Arm with `dof` revolute joints, each a copy of the default first joint.
    pub fn with_dof(dof: usize) -> Self {
        let base = Self::default();
        let rev = |v: &Vec<f64>, g: f64| {
            let mut out = vec![v[0]; dof];
            out.push(g);
            out
        };
        let mut limits = vec![base.joint_limits[0]; dof];
        limits.push(base.joint_limits[2]);
        let total = base.reach();
        Self {
            dof,
            link_lengths: vec![total / dof as f64; dof],
            inertia: rev(&base.inertia, base.inertia[2]),
            viscous_friction: rev(&base.viscous_friction, base.viscous_friction[2]),
            coulomb_friction: rev(&base.coulomb_friction, base.coulomb_friction[2]),
            gravity_torque_scale: {
                let mut g: Vec<f64> = (0..dof).map(|i| 0.3 / (i + 1) as f64).collect();
                g.push(0.0);
                g
            },
            joint_limits: limits,
            torque_limit: base.torque_limit,
            gripper_max_gap: base.gripper_max_gap,
            gripper_gap_per_rad: base.gripper_gap_per_rad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_joints();
        if self.dof < 1 {
            return Err(Error::Config("arm.dof must be >= 1".into()));
        }
        if self.link_lengths.len() != self.dof {
            return Err(Error::Config(format!(
                "arm.link_lengths has {} entries, dof is {}",
                self.link_lengths.len(),
                self.dof
            )));
        }
        for (name, v) in [
            ("inertia", &self.inertia),
            ("viscous_friction", &self.viscous_friction),
            ("coulomb_friction", &self.coulomb_friction),
            ("gravity_torque_scale", &self.gravity_torque_scale),
        ] {
            if v.len() != n {
                return Err(Error::Config(format!(
                    "arm.{name} has {} entries, expected dof+1 = {n}",
                    v.len()
                )));
            }
        }
        if self.joint_limits.len() != n {
            return Err(Error::Config(format!(
                "arm.joint_limits has {} entries, expected {n}",
                self.joint_limits.len()
            )));
        }
        let positive = self.link_lengths.iter().chain(&self.inertia).all(|&v| v > 0.0)
            && self.torque_limit > 0.0
            && self.gripper_max_gap > 0.0
            && self.gripper_gap_per_rad > 0.0;
        if !positive {
            return Err(Error::Config(
                "arm lengths, inertias, torque limit and gripper geometry must be > 0".into(),
            ));
        }
        if self
            .viscous_friction
            .iter()
            .chain(&self.coulomb_friction)
            .any(|&v| v < 0.0 || !v.is_finite())
        {
            return Err(Error::Config("arm frictions must be >= 0".into()));
        }
        if self.joint_limits.iter().any(|l| !(l[0] < l[1])) {
            return Err(Error::Config("arm.joint_limits need min < max".into()));
        }
        Ok(())
    }
}

/// Qualitative hardness labels mapped onto contact stiffness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hardness {
    VeryLow,
    Low,
    Medium,
    High,
    VeryHigh,
}

impl Hardness {
    /// Contact stiffness in N/m.
    pub fn stiffness(self) -> f64 {
        match self {
            Hardness::VeryLow => 150.0,
            Hardness::Low => 400.0,
            Hardness::Medium => 1000.0,
            Hardness::High => 2000.0,
            Hardness::VeryHigh => 5000.0,
        }
    }
}

/// A graspable disc-shaped object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    /// kg
    pub mass: f64,
    /// N/m
    pub contact_stiffness: f64,
    /// m
    pub radius: f64,
    /// Squeeze force (N) above which the object is destroyed.
    pub crush_force: f64,
    /// m, in the arm base frame.
    pub initial_position: [f64; 2],
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self::preset("foam_ball").expect("builtin preset")
    }
}

/// `(name, diameter mm, hardness, grams)` for the built-in object set.
const PRESETS: &[(&str, f64, Hardness, f64)] = &[
    ("foam_ball", 40.0, Hardness::High, 3.0),
    ("softball", 66.0, Hardness::VeryLow, 30.0),
    ("table_tennis", 40.0, Hardness::VeryHigh, 2.0),
    ("eye_cream", 40.0, Hardness::VeryHigh, 24.0),
    ("canele", 50.0, Hardness::Low, 86.0),
    ("soccer", 61.0, Hardness::Low, 21.0),
    ("honey_bottle", 40.0, Hardness::VeryHigh, 79.0),
    ("bell_pepper", 49.0, Hardness::VeryHigh, 15.0),
    ("glue_jar", 45.0, Hardness::Medium, 63.0),
];

pub const DEFAULT_PICK_POSITION: [f64; 2] = [0.2, -0.12];

impl ObjectSpec {
    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|p| p.0)
    }

    pub fn preset(name: &str) -> Option<Self> {
        PRESETS
            .iter()
            .find(|p| p.0 == name)
            .map(|&(name, diameter_mm, hardness, grams)| ObjectSpec {
                name: name.to_string(),
                mass: grams * 1e-3,
                contact_stiffness: hardness.stiffness(),
                radius: diameter_mm * 0.5e-3,
                crush_force: 20.0,
                initial_position: DEFAULT_PICK_POSITION,
            })
    }

    /// Parses `name` or `name:key=value:...` with keys `mass_g`, `stiffness`,
    /// `radius_mm` and `crush`. A bare custom spec starts from `foam_ball`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (head, tail) = match spec.split_once(':') {
            Some((h, t)) => (h, Some(t)),
            None => (spec, None),
        };
        let mut obj = match Self::preset(head) {
            Some(o) => o,
            None if tail.is_some() => {
                let mut o = Self::default();
                o.name = head.to_string();
                o
            }
            None => {
                return Err(Error::Config(format!(
                    "unknown object '{head}'; known: {}",
                    Self::preset_names().collect::<Vec<_>>().join(", ")
                )))
            }
        };
        for kv in tail.into_iter().flat_map(|t| t.split(':')).filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("object override '{kv}' is not key=value")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Config(format!("object override '{kv}': not a number")))?;
            match k {
                "mass_g" => obj.mass = v * 1e-3,
                "stiffness" => obj.contact_stiffness = v,
                "radius_mm" => obj.radius = v * 1e-3,
                "crush" => obj.crush_force = v,
                _ => return Err(Error::Config(format!("unknown object key '{k}'"))),
            }
        }
        obj.validate()?;
        Ok(obj)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.mass, self.contact_stiffness, self.radius, self.crush_force]
            .iter()
            .all(|&v| v > 0.0 && v.is_finite())
            && self.initial_position.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "object '{}': mass, stiffness, radius and crush force must be > 0",
                self.name
            )))
        }
    }

    /// Minimum squeeze force that keeps the object in the gripper.
    pub fn hold_force(&self, mu_hold: f64) -> f64 {
        mu_hold * self.mass * GRAVITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PickPlace,
    PutInDrawer,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::PickPlace => "pick_place",
            TaskKind::PutInDrawer => "put_in_drawer",
        })
    }
}

/// Scene layout, rates and contact constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub task: TaskKind,
    /// Plant and controller period (s).
    pub dt: f64,
    /// Recording / policy rate (Hz).
    pub sample_rate: f64,
    /// Camera rate (Hz).
    pub camera_rate: f64,
    /// Square frame side (px).
    pub frame_size: usize,
    /// Hold threshold multiplier on object weight.
    pub mu_hold: f64,
    /// Max distance between end effector and object centre for the object to
    /// sit between the fingers (m).
    pub capture_radius: f64,
    pub home_position: [f64; 2],
    pub place_center: [f64; 2],
    pub place_radius: f64,
    pub time_limit: f64,
    /// Half-width of the uniform jitter applied to pick/place waypoints (m).
    pub waypoint_jitter: f64,
    /// Stiffness of the scripted operator's hand on the leader (N·m/rad).
    pub operator_stiffness: f64,
    /// Damping of the scripted operator's hand (N·m·s/rad).
    pub operator_damping: f64,
    /// Overhead camera window: centre (m) and width (m).
    pub overhead_center: [f64; 2],
    pub overhead_width: f64,
    /// Gripper camera window width (m), centred on the end effector.
    pub gripper_view_width: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::PickPlace,
            dt: 0.001,
            sample_rate: 100.0,
            camera_rate: 200.0,
            frame_size: 64,
            mu_hold: 3.0,
            capture_radius: 0.02,
            home_position: [0.14, 0.0],
            place_center: [0.2, 0.165],
            place_radius: 0.035,
            time_limit: 12.0,
            waypoint_jitter: 0.005,
            operator_stiffness: 10.0,
            operator_damping: 2.0,
            overhead_center: [0.16, 0.02],
            overhead_width: 0.48,
            gripper_view_width: 0.16,
        }
    }
}

impl SceneConfig {
    /// Plant substeps per recorded sample (10 at the defaults).
    pub fn substeps(&self) -> usize {
        (1.0 / (self.dt * self.sample_rate)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.sample_rate > 0.0 && self.camera_rate > 0.0) {
            return Err(Error::Config("scene rates and dt must be > 0".into()));
        }
        let ratio = 1.0 / (self.dt * self.sample_rate);
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(Error::Config(
                "scene.sample_rate must divide the control rate 1/dt".into(),
            ));
        }
        if self.frame_size == 0 || self.place_radius <= 0.0 || self.mu_hold <= 0.0 {
            return Err(Error::Config(
                "scene.frame_size, place_radius and mu_hold must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Controller gains and the controller-side plant model.
///
/// `*_nominal` vectors default to the true plant values when empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub kp: f64,
    pub kd: f64,
    pub kf: f64,
    pub g_dob: f64,
    pub inertia_nominal: Vec<f64>,
    pub viscous_nominal: Vec<f64>,
    pub coulomb_nominal: Vec<f64>,
    pub gravity_nominal: Vec<f64>,
    /// Take velocity from a differenced encoder instead of the plant state.
    pub differenced_velocity: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            kp: 400.0,
            kd: 40.0,
            kf: 1.0,
            g_dob: 100.0,
            inertia_nominal: Vec::new(),
            viscous_nominal: Vec::new(),
            coulomb_nominal: Vec::new(),
            gravity_nominal: Vec::new(),
            differenced_velocity: false,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.kp, self.kd, self.kf, self.g_dob].iter().all(|&g| g > 0.0 && g.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("control.kp, kd, kf and g_dob must be > 0".into()))
        }
    }
}

/// Transformer policy hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Layers of the latent (chunk) encoder used during training.
    pub latent_encoder_layers: usize,
    pub ffn_dim: usize,
    pub patch_size: usize,
    pub frame_size: usize,
    pub latent_dim: usize,
    pub chunk_k: usize,
    pub kl_weight: f64,
    pub lr: f64,
    /// Rate reached at the last training step by cosine decay from `lr`;
    /// equal to `lr` for a constant rate.
    pub lr_final: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Joints including the gripper; the action width is `3 * n_joints`.
    pub n_joints: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 1,
            latent_encoder_layers: 1,
            ffn_dim: 64,
            patch_size: 16,
            frame_size: 64,
            latent_dim: 8,
            chunk_k: 20,
            kl_weight: 10.0,
            lr: 1e-3,
            lr_final: 1e-3,
            batch_size: 8,
            dropout: 0.0,
            n_joints: 3,
        }
    }
}

impl PolicyConfig {
    /// The smallest useful model: 8×8 frames, patch 4, one layer each,
    /// `d_model = 8`, `k = 2`.
    pub fn tiny(n_joints: usize) -> Self {
        Self {
            d_model: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            latent_encoder_layers: 1,
            ffn_dim: 16,
            patch_size: 4,
            frame_size: 8,
            latent_dim: 4,
            chunk_k: 2,
            kl_weight: 10.0,
            lr: 1e-2,
            lr_final: 1e-2,
            batch_size: 4,
            dropout: 0.0,
            n_joints,
        }
    }

    pub fn action_dim(&self) -> usize {
        3 * self.n_joints
    }

    pub fn patches_per_frame(&self) -> usize {
        let side = self.frame_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail("d_model must be a positive multiple of heads");
        }
        if self.patch_size == 0 || self.frame_size % self.patch_size != 0 {
            return fail("patch_size must divide frame_size");
        }
        if self.chunk_k < 1 {
            return fail("chunk_k must be >= 1");
        }
        if self.latent_dim == 0 || self.ffn_dim == 0 || self.n_joints == 0 || self.batch_size == 0 {
            return fail("latent_dim, ffn_dim, n_joints and batch_size must be >= 1");
        }
        if !(self.kl_weight >= 0.0 && self.lr >= 0.0 && self.lr_final >= 0.0) {
            return fail("kl_weight, lr and lr_final must be >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// The whole configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub arm: ArmConfig,
    pub object: ObjectSpec,
    pub scene: SceneConfig,
    pub control: ControlConfig,
    pub model: PolicyConfig,
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg = Self::parse_toml(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating, for callers that overlay overrides first.
    pub fn parse_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::load_unchecked(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_toml(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.arm.validate()?;
        self.object.validate()?;
        self.scene.validate()?;
        self.control.validate()?;
        self.model.validate()?;
        if self.model.n_joints != self.arm.n_joints() {
            return Err(Error::Config(format!(
                "model.n_joints = {} but the arm has {} joints",
                self.model.n_joints,
                self.arm.n_joints()
            )));
        }
        if self.model.frame_size != self.scene.frame_size {
            return Err(Error::Config(format!(
                "model.frame_size = {} but scene.frame_size = {}",
                self.model.frame_size, self.scene.frame_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        for section in ["[arm]", "[object]", "[scene]", "[control]", "[model]"] {
            assert!(text.contains(section), "missing {section}");
        }
        assert_eq!(SimConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(SimConfig::from_toml_str("").unwrap(), SimConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = SimConfig::from_toml_str("[control]\nkpp = 3.0\n").unwrap_err();
        assert!(err.to_string().contains("kpp"), "{err}");
    }

    #[test]
    fn default_gains_are_critically_damped() {
        let c = ControlConfig::default();
        assert_eq!(c.kd, 2.0 * c.kp.sqrt());
    }

    #[test]
    fn fifteen_dim_state_with_four_dof() {
        let arm = ArmConfig::with_dof(4);
        arm.validate().unwrap();
        assert_eq!(arm.state_dim(), 15);
    }

    #[test]
    fn hold_force_for_softball_mass() {
        let mut o = ObjectSpec::preset("softball").unwrap();
        o.mass = 0.03;
        assert!((o.hold_force(3.0) - 0.8829).abs() < 1e-12);
    }

    #[test]
    fn object_spec_parsing() {
        let o = ObjectSpec::parse("softball").unwrap();
        assert_eq!(o.mass, 0.03);
        let o = ObjectSpec::parse("foam_ball:mass_g=9:stiffness=5000").unwrap();
        assert!((o.mass - 0.009).abs() < 1e-15);
        assert_eq!(o.contact_stiffness, 5000.0);
        assert!(ObjectSpec::parse("anvil").is_err());
        assert!(ObjectSpec::parse("foam_ball:mass_g=-1").is_err());
    }
}

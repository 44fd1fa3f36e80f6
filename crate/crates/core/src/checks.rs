//! Closed-loop invariant checks for the plant, observers and bilateral
//! coupling. Shared by `sim-check` and the acceptance suite.

use std::f64::consts::TAU;

use serde::Serialize;

use crate::config::{ControlConfig, SimConfig};
use crate::control::{
    bilateral_step, dob_update, ControlGains, LeaderCommand, ObserverState,
};
use crate::dynamics::{kinetic_energy, JointState, Plant};
use crate::error::Result;
use crate::runtime::{home_angles, Rig};

/// Outcome of one named invariant.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Measured value the threshold applies to.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &'static str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name,
            passed: value < threshold,
            value,
            threshold,
            detail,
        }
    }
}

/// One row of the free-space trace: time plus per-joint signals.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub t: f64,
    pub theta_l: Vec<f64>,
    pub theta_f: Vec<f64>,
    pub tau_res_l: Vec<f64>,
    pub tau_res_f: Vec<f64>,
    pub tau_dis_l: Vec<f64>,
    pub tau_dis_f: Vec<f64>,
}

pub fn trace_csv_header(n: usize) -> String {
    let mut cols = vec!["t".to_string()];
    for name in ["theta_l", "theta_f", "tau_res_l", "tau_res_f", "tau_dis_l", "tau_dis_f"] {
        cols.extend((0..n).map(|i| format!("{name}{i}")));
    }
    cols.join(",")
}

impl TraceRow {
    pub fn to_csv(&self) -> String {
        let mut cols = vec![format!("{:.4}", self.t)];
        for v in [
            &self.theta_l,
            &self.theta_f,
            &self.tau_res_l,
            &self.tau_res_f,
            &self.tau_dis_l,
            &self.tau_dis_f,
        ] {
            cols.extend(v.iter().map(|x| format!("{x:.6}")));
        }
        cols.join(",")
    }
}

/// Sinusoidal operator torque on each leader joint.
pub fn operator_torque(t: f64, joint: usize, dof: usize) -> f64 {
    if joint >= dof {
        return 0.02 * (TAU * 0.5 * t).cos();
    }
    let amp = 0.3 / (joint + 1) as f64;
    let freq = 0.4 + 0.2 * joint as f64;
    amp * (TAU * freq * t).cos()
}

fn free_space_rig(cfg: &SimConfig) -> Result<Rig> {
    let mut rig = Rig::new(cfg, cfg.object.clone(), &home_angles(cfg))?;
    rig.scene.object_present = false;
    Ok(rig)
}

/// Free-space bilateral session driven by [`operator_torque`] for `seconds`.
pub fn free_space_session(cfg: &SimConfig, seconds: f64) -> Result<Vec<TraceRow>> {
    let mut rig = free_space_rig(cfg)?;
    let n = rig.n_joints();
    let dof = rig.dof();
    let steps = (seconds / rig.dt).round() as usize;
    let zero = vec![0.0; n];
    let mut rows = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = rig.scene.time;
        let load: Vec<f64> = (0..n).map(|i| -operator_torque(t, i, dof)).collect();
        rig.step_bilateral(&load, &zero)?;
        rows.push(TraceRow {
            t: rig.scene.time,
            theta_l: rig.scene.leader_angles(),
            theta_f: rig.scene.follower_angles(),
            tau_res_l: rig.leader_tau_res(),
            tau_res_f: rig.follower_tau_res(),
            tau_dis_l: rig.leader_obs.obs.iter().map(|o| o.tau_dis_hat).collect(),
            tau_dis_f: rig.follower_obs.obs.iter().map(|o| o.tau_dis_hat).collect(),
        });
    }
    Ok(rows)
}

/// Steady-state `max |θ_l − θ_f|` over all joints after `settle` seconds.
pub fn position_tracking(cfg: &SimConfig) -> Result<CheckResult> {
    let rows = free_space_session(cfg, 5.0)?;
    let settle = 0.2;
    let err = rows
        .iter()
        .filter(|r| r.t > settle)
        .flat_map(|r| r.theta_l.iter().zip(&r.theta_f).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let travel = rows
        .iter()
        .map(|r| (r.theta_l[0] - rows[0].theta_l[0]).abs())
        .fold(0.0, f64::max);
    Ok(CheckResult::below(
        "position_tracking",
        err,
        0.01,
        format!("max|θl−θf| after {settle} s = {err:.2e} rad (joint-0 travel {travel:.2} rad)"),
    ))
}

/// Wall contact: the follower's first joint presses into a stiff spring
/// while the operator pushes the leader; returns (steady |τl+τf|, peak contact).
pub fn wall_session(cfg: &SimConfig) -> Result<(f64, f64)> {
    let mut rig = free_space_rig(cfg)?;
    let n = rig.n_joints();
    let wall = rig.scene.follower[0].angle + 0.05;
    let (k_wall, b_wall) = (2000.0, 5.0);
    let push = 1.0;
    let total = 4.0;
    let steps = (total / rig.dt).round() as usize;
    let mut peak: f64 = 0.0;
    let mut steady: f64 = 0.0;
    for _ in 0..steps {
        let t = rig.scene.time;
        let mut l_load = vec![0.0; n];
        l_load[0] = -push * t.min(1.0);
        let f = rig.scene.follower[0];
        let mut f_load = vec![0.0; n];
        let pen = f.angle - wall;
        if pen > 0.0 {
            f_load[0] = (k_wall * pen + b_wall * f.velocity).max(0.0);
        }
        peak = peak.max(f_load[0].abs());
        rig.step_bilateral(&l_load, &f_load)?;
        if rig.scene.time > total - 1.0 {
            let sum = rig.leader_obs.obs[0].tau_res + rig.follower_obs.obs[0].tau_res;
            steady = steady.max(sum.abs());
        }
    }
    Ok((steady, peak))
}

pub fn action_reaction(cfg: &SimConfig) -> Result<CheckResult> {
    let (steady, peak) = wall_session(cfg)?;
    Ok(CheckResult::below(
        "action_reaction",
        steady / peak,
        0.05,
        format!("steady |τres_l+τres_f| = {steady:.2e} N·m, peak contact {peak:.3} N·m"),
    ))
}

/// Held joint under a constant disturbance: estimate within 2 % after
/// `5/g_dob` seconds, and equal to the discrete closed form
/// `d·(1 − (1 − g·dt)^n)` at every step.
pub fn dob_convergence(control: &ControlConfig, dt: f64) -> Result<CheckResult> {
    let d = 0.5;
    let gains = ControlGains {
        kp: control.kp,
        kd: control.kd,
        kf: control.kf,
        g_dob: control.g_dob,
        j_nominal: 0.1,
        d_nominal: 0.0,
        coulomb_nominal: 0.0,
        gravity_nominal_scale: 0.0,
    };
    let steps = (5.0 / control.g_dob / dt).round() as i32;
    let mut o = ObserverState::default();
    let mut closed_err: f64 = 0.0;
    for n in 1..=steps {
        o = dob_update(o, d, 0.0, &gains, dt)?;
        let closed = d * (1.0 - (1.0 - control.g_dob * dt).powi(n));
        closed_err = closed_err.max((o.tau_dis_hat - closed).abs());
    }
    let rel = (o.tau_dis_hat - d).abs() / d;
    Ok(CheckResult {
        name: "dob_convergence",
        passed: rel < 0.02 && closed_err < 1e-9,
        value: rel,
        threshold: 0.02,
        detail: format!(
            "relative error {rel:.2e} after {steps} steps; max deviation from closed form {closed_err:.1e}"
        ),
    })
}

/// Follower ramping at constant speed under an injected external load; the
/// reaction estimate must recover the load.
pub fn rfob_session(cfg: &SimConfig, external: f64) -> Result<f64> {
    let mut rig = free_space_rig(cfg)?;
    let n = rig.n_joints();
    let q0 = rig.scene.follower_angles();
    let speed = 0.2;
    let total = 2.0;
    let steps = (total / rig.dt).round() as usize;
    let mut load = vec![0.0; n];
    load[0] = external;
    let mut acc = 0.0;
    let mut count = 0usize;
    for _ in 0..steps {
        let t = rig.scene.time;
        let mut cmd = LeaderCommand {
            angle: q0.clone(),
            velocity: vec![0.0; n],
            torque: vec![0.0; n],
        };
        cmd.angle[0] = q0[0] + speed * t;
        cmd.velocity[0] = speed;
        // command the observed reaction back so the force channel stays neutral
        cmd.torque[0] = -external;
        rig.step_autonomous(&cmd, &load)?;
        if rig.scene.time > 1.0 {
            acc += rig.follower_obs.obs[0].tau_res;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

pub fn rfob_exactness(cfg: &SimConfig) -> Result<CheckResult> {
    let external = 0.3;
    let est = rfob_session(cfg, external)?;
    let rel = (est - external).abs() / external;
    Ok(CheckResult::below(
        "rfob_exactness",
        rel,
        0.05,
        format!("injected {external} N·m, estimated {est:.4} N·m"),
    ))
}

/// `tau_dis_hat == z − g·J_n·ω` after every observer update in a live session.
pub fn dob_identity(cfg: &SimConfig) -> Result<CheckResult> {
    let mut rig = free_space_rig(cfg)?;
    let n = rig.n_joints();
    let dof = rig.dof();
    let zero = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = rig.scene.time;
        let load: Vec<f64> = (0..n).map(|i| -operator_torque(t, i, dof)).collect();
        rig.step_bilateral(&load, &zero)?;
        rig.sense();
        for (arm, obs) in [(&rig.scene.leader, &rig.leader_obs), (&rig.scene.follower, &rig.follower_obs)] {
            for ((o, g), j) in obs.obs.iter().zip(&rig.gains).zip(arm) {
                worst = worst.max((o.tau_dis_hat - (o.z - g.g_dob * g.j_nominal * j.velocity)).abs());
            }
        }
    }
    Ok(CheckResult {
        name: "dob_identity",
        passed: worst == 0.0,
        value: worst,
        threshold: 0.0,
        detail: format!("max |τ̂dis − (z − g·Jn·ω)| = {worst:.1e}"),
    })
}

/// Swapping leader and follower inputs negates the position-error torques.
pub fn swap_symmetry(cfg: &SimConfig) -> Result<CheckResult> {
    let gains = ControlGains::for_arm(&cfg.control, &cfg.arm)?;
    let n = gains.len();
    let dof = cfg.arm.dof;
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let a: Vec<JointState> = (0..n)
            .map(|i| JointState {
                angle: ((k * 7 + i * 3) as f64 * 0.37).sin(),
                velocity: ((k * 5 + i) as f64 * 0.61).cos(),
                torque: 0.0,
            })
            .collect();
        let b: Vec<JointState> = (0..n)
            .map(|i| JointState {
                angle: ((k * 11 + i * 5) as f64 * 0.23).cos(),
                velocity: ((k * 3 + i * 2) as f64 * 0.41).sin(),
                torque: 0.0,
            })
            .collect();
        let zero = vec![ObserverState::default(); n];
        let (mut o1, mut o2) = (zero.clone(), zero.clone());
        let (tl, tf) = bilateral_step(&a, &b, &mut o1, &mut o2, &gains, dof, cfg.scene.dt)?;
        let (mut o1, mut o2) = (zero.clone(), zero);
        let (sl, sf) = bilateral_step(&b, &a, &mut o1, &mut o2, &gains, dof, cfg.scene.dt)?;
        for i in 0..n {
            worst = worst.max((tl[i] + sl[i]).abs()).max((tf[i] + sf[i]).abs());
        }
    }
    Ok(CheckResult {
        name: "swap_symmetry",
        passed: worst == 0.0,
        value: worst,
        threshold: 0.0,
        detail: format!("max |τ(a,b) + τ(b,a)| = {worst:.1e}"),
    })
}

/// Two identical sessions produce bit-identical state streams.
pub fn determinism(cfg: &SimConfig) -> Result<CheckResult> {
    let a = free_space_session(cfg, 0.5)?;
    let b = free_space_session(cfg, 0.5)?;
    let same = a.iter().zip(&b).all(|(x, y)| {
        x.theta_l.iter().zip(&y.theta_l).all(|(u, v)| u.to_bits() == v.to_bits())
            && x.theta_f.iter().zip(&y.theta_f).all(|(u, v)| u.to_bits() == v.to_bits())
            && x.tau_res_f.iter().zip(&y.tau_res_f).all(|(u, v)| u.to_bits() == v.to_bits())
    });
    Ok(CheckResult {
        name: "determinism",
        passed: same && a.len() == b.len(),
        value: if same { 0.0 } else { 1.0 },
        threshold: 0.0,
        detail: format!("{} steps compared bit-for-bit", a.len()),
    })
}

/// Unforced, gravity-free arms with friction never gain kinetic energy.
pub fn energy_decay(cfg: &SimConfig) -> Result<CheckResult> {
    let mut arm = cfg.arm.clone();
    arm.gravity_torque_scale = vec![0.0; arm.n_joints()];
    let plant = Plant::new(arm, cfg.object.clone(), &cfg.scene)?;
    let n = plant.n_joints();
    let mut s = plant.initial_state(&vec![0.2; n])?;
    s.object_present = false;
    for (i, j) in s.leader.iter_mut().chain(s.follower.iter_mut()).enumerate() {
        j.velocity = 1.5 * ((i as f64) * 1.3).sin();
    }
    let zero = vec![0.0; n];
    let mut ke = kinetic_energy(&plant.arm, &s);
    let mut worst_rise: f64 = 0.0;
    for _ in 0..3000 {
        s = plant.step(&s, &zero, &zero, cfg.scene.dt)?;
        let k = kinetic_energy(&plant.arm, &s);
        worst_rise = worst_rise.max(k - ke);
        ke = k;
    }
    Ok(CheckResult {
        name: "energy_non_increasing",
        passed: worst_rise <= 0.0,
        value: worst_rise,
        threshold: 0.0,
        detail: format!("largest step-over-step KE increase {worst_rise:.1e} J, final KE {ke:.2e} J"),
    })
}

/// Saturating torques never drive a joint past its limits.
pub fn joint_limits(cfg: &SimConfig) -> Result<CheckResult> {
    let plant = Plant::new(cfg.arm.clone(), cfg.object.clone(), &cfg.scene)?;
    let n = plant.n_joints();
    let mut s = plant.initial_state(&vec![0.0; n])?;
    let mut violations = 0usize;
    for k in 0..4000 {
        let sign = if (k / 1000) % 2 == 0 { 1.0 } else { -1.0 };
        let tau: Vec<f64> = (0..n).map(|i| sign * plant.arm.torque_limit * (1.0 + i as f64)).collect();
        s = plant.step(&s, &tau, &tau, cfg.scene.dt)?;
        for (j, l) in s.leader.iter().chain(&s.follower).zip(plant.arm.joint_limits.iter().cycle()) {
            if j.angle < l[0] || j.angle > l[1] {
                violations += 1;
            }
        }
    }
    Ok(CheckResult {
        name: "joint_limits",
        passed: violations == 0,
        value: violations as f64,
        threshold: 0.0,
        detail: format!("{violations} limit violations over 4000 saturated steps"),
    })
}

/// The full invariant suite in a fixed order.
pub fn run_all(cfg: &SimConfig) -> Result<Vec<CheckResult>> {
    Ok(vec![
        dob_convergence(&cfg.control, cfg.scene.dt)?,
        dob_identity(cfg)?,
        rfob_exactness(cfg)?,
        position_tracking(cfg)?,
        action_reaction(cfg)?,
        swap_symmetry(cfg)?,
        determinism(cfg)?,
        energy_decay(cfg)?,
        joint_limits(cfg)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_build_passes_every_invariant() {
        let results = run_all(&SimConfig::default()).unwrap();
        for r in &results {
            println!("{:<24} {} {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
        }
        assert!(results.len() >= 6);
        assert!(results.iter().all(|r| r.passed));
    }
}

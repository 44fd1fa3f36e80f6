//! Planar serial-chain kinematics.

use crate::error::{Error, Result};

/// End-effector position of a planar chain.
///
/// `x = Σ Lᵢ·cos(Σ_{j≤i} θⱼ)`, `y = Σ Lᵢ·sin(Σ_{j≤i} θⱼ)`.
pub fn forward_kinematics(angles: &[f64], link_lengths: &[f64]) -> Result<[f64; 2]> {
    if angles.len() != link_lengths.len() {
        return Err(Error::Dimension {
            what: "forward_kinematics angles",
            expected: link_lengths.len(),
            got: angles.len(),
        });
    }
    Ok(fk_unchecked(angles, link_lengths))
}

pub(crate) fn fk_unchecked(angles: &[f64], link_lengths: &[f64]) -> [f64; 2] {
    let mut abs = 0.0;
    let mut p = [0.0, 0.0];
    for (&q, &l) in angles.iter().zip(link_lengths) {
        abs += q;
        p[0] += l * abs.cos();
        p[1] += l * abs.sin();
    }
    p
}

/// Positions of every joint followed by the end effector, starting at the base.
pub fn chain_points(angles: &[f64], link_lengths: &[f64]) -> Vec<[f64; 2]> {
    let mut abs = 0.0;
    let mut p = [0.0, 0.0];
    let mut out = Vec::with_capacity(angles.len() + 1);
    out.push(p);
    for (&q, &l) in angles.iter().zip(link_lengths) {
        abs += q;
        p = [p[0] + l * abs.cos(), p[1] + l * abs.sin()];
        out.push(p);
    }
    out
}

/// Closed-form elbow-down solution of a two-link chain, `θ2 ≥ 0`.
pub fn inverse_kinematics_2link(x: f64, y: f64, l1: f64, l2: f64) -> Result<(f64, f64)> {
    let r2 = x * x + y * y;
    let tol = 1e-12;
    if r2 > (l1 + l2).powi(2) * (1.0 + tol) || r2 < (l1 - l2).powi(2) * (1.0 - tol) || !r2.is_finite()
    {
        return Err(Error::Unreachable { x, y });
    }
    let c2 = ((r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q2 = c2.acos();
    let q1 = y.atan2(x) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    Ok((wrap_angle(q1), q2))
}

/// IK for an arbitrary planar chain with every joint past the second held at
/// zero, i.e. a two-link problem with the distal links lumped together.
pub fn inverse_kinematics_chain(target: [f64; 2], link_lengths: &[f64]) -> Result<Vec<f64>> {
    match link_lengths {
        [] => Err(Error::InvalidArgument("empty chain".into())),
        [l] => {
            let r = (target[0].hypot(target[1]) - l).abs();
            if r > 1e-9 * l {
                return Err(Error::Unreachable {
                    x: target[0],
                    y: target[1],
                });
            }
            Ok(vec![target[1].atan2(target[0])])
        }
        [l1, rest @ ..] => {
            let (q1, q2) = inverse_kinematics_2link(target[0], target[1], *l1, rest.iter().sum())?;
            let mut q = vec![0.0; link_lengths.len()];
            q[0] = q1;
            q[1] = q2;
            Ok(q)
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = a % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a < -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    const L: [f64; 2] = [0.1, 0.1];

    fn close(a: [f64; 2], b: [f64; 2]) -> bool {
        (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
    }

    #[test]
    fn fk_examples() {
        assert!(close(forward_kinematics(&[0.0, 0.0], &L).unwrap(), [0.2, 0.0]));
        assert!(close(forward_kinematics(&[FRAC_PI_2, 0.0], &L).unwrap(), [0.0, 0.2]));
        assert!(close(
            forward_kinematics(&[FRAC_PI_2, -FRAC_PI_2], &L).unwrap(),
            [0.1, 0.1]
        ));
    }

    #[test]
    fn fk_dimension_mismatch() {
        assert!(matches!(
            forward_kinematics(&[0.0], &L),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn ik_examples() {
        let (a, b) = inverse_kinematics_2link(0.2, 0.0, 0.1, 0.1).unwrap();
        assert!(a.abs() < 1e-7 && b.abs() < 1e-7);
        let (a, b) = inverse_kinematics_2link(0.0, 0.2, 0.1, 0.1).unwrap();
        assert!((a - FRAC_PI_2).abs() < 1e-7 && b.abs() < 1e-7);
        assert!(matches!(
            inverse_kinematics_2link(0.3, 0.0, 0.1, 0.1),
            Err(Error::Unreachable { .. })
        ));
        assert!(matches!(
            inverse_kinematics_2link(0.01, 0.0, 0.15, 0.1),
            Err(Error::Unreachable { .. })
        ));
    }

    proptest! {
        #[test]
        fn ik_inverts_fk(x in 0.02f64..0.28, y in -0.2f64..0.2) {
            prop_assume!((x * x + y * y).sqrt() < 0.29);
            let l = [0.15, 0.15];
            let (a, b) = inverse_kinematics_2link(x, y, l[0], l[1]).unwrap();
            prop_assert!(b >= 0.0);
            let p = forward_kinematics(&[a, b], &l).unwrap();
            prop_assert!((p[0] - x).abs() < 1e-9 && (p[1] - y).abs() < 1e-9);
        }

        #[test]
        fn chain_ik_inverts_fk(x in 0.16f64..0.25, y in -0.15f64..0.15) {
            prop_assume!((x * x + y * y).sqrt() < 0.29);
            let l = [0.075, 0.075, 0.075, 0.075];
            let q = inverse_kinematics_chain([x, y], &l).unwrap();
            let p = forward_kinematics(&q, &l).unwrap();
            prop_assert!((p[0] - x).abs() < 1e-9 && (p[1] - y).abs() < 1e-9);
        }
    }
}

//! Rotation-matrix helpers. Angles are in degrees unless a name says otherwise.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{MocapError, Result};

pub fn rot_x(deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), deg.to_radians()).into_inner()
}

pub fn rot_y(deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), deg.to_radians()).into_inner()
}

pub fn rot_z(deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).into_inner()
}

/// Orthonormalizes the first two columns and rebuilds the third as their
/// cross product, so the result is a proper rotation.
pub fn gram_schmidt_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let c1 = m.column(0).into_owned();
    let c2 = m.column(1).into_owned();
    let (n1, n2) = (c1.norm(), c2.norm());
    if !(n1.is_finite() && n2.is_finite()) || n1 == 0.0 || n2 == 0.0 || c1.cross(&c2).norm() <= 1e-9 * n1 * n2 {
        return Err(MocapError::Degenerate(
            "first two columns are parallel or zero".into(),
        ));
    }
    let e1 = c1 / n1;
    let u2 = c2 - e1 * e1.dot(&c2);
    let e2 = u2 / u2.norm();
    let e3 = e1.cross(&e2);
    Ok(Matrix3::from_columns(&[e1, e2, e3]))
}

/// Geodesic distance on SO(3): `acos((tr(R₁ᵀR₂) − 1)/2)` in degrees.
///
/// Evaluated through `atan2(sin, cos)` of the relative rotation, which is the
/// same angle with better conditioning near 0° and 180°.
pub fn geodesic_angle(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let rel = r1.transpose() * r2;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
    let sin = (axis.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

/// True when `RᵀR = I` and `det R = 1` within `tol`.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    err <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Euler angles `(z, x, y)` in degrees with `R = Rz·Rx·Ry`, the channel order
/// written to BVH files.
pub fn euler_zxy(r: &Matrix3<f64>) -> [f64; 3] {
    let x = r[(2, 1)].clamp(-1.0, 1.0).asin();
    let (z, y) = if x.cos().abs() > 1e-12 {
        ((-r[(0, 1)]).atan2(r[(1, 1)]), (-r[(2, 0)]).atan2(r[(2, 2)]))
    } else {
        // Gimbal lock: fold everything into z.
        (r[(1, 0)].atan2(r[(0, 0)]), 0.0)
    };
    [z.to_degrees(), x.to_degrees(), y.to_degrees()]
}

pub fn from_euler_zxy(angles: [f64; 3]) -> Matrix3<f64> {
    rot_z(angles[0]) * rot_x(angles[1]) * rot_y(angles[2])
}

/// Spherical interpolation between two rotations, `u ∈ [0, 1]`.
pub fn slerp(a: &Matrix3<f64>, b: &Matrix3<f64>, u: f64) -> Matrix3<f64> {
    let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*a));
    let qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*b));
    qa.slerp(&qb, u).to_rotation_matrix().into_inner()
}

/// Row-major flattening used by the motion file format and the networks.
pub fn to_row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = m[(i, j)];
        }
    }
    out
}

pub fn from_row_major(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&v[..9])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_rotation(a: f64, b: f64, c: f64) -> Matrix3<f64> {
        rot_z(a) * rot_x(b) * rot_y(c)
    }

    #[test]
    fn identity_is_fixed_by_gram_schmidt() {
        assert_eq!(gram_schmidt_rotation(&Matrix3::identity()).unwrap(), Matrix3::identity());
    }

    #[test]
    fn rotation_is_fixed_by_gram_schmidt() {
        let r = random_rotation(33.0, -71.0, 128.0);
        let q = gram_schmidt_rotation(&r).unwrap();
        assert!((q - r).abs().max() < 1e-12);
    }

    #[test]
    fn perturbed_rotation_becomes_orthonormal() {
        let r = random_rotation(10.0, 20.0, 30.0);
        let noisy = r + Matrix3::from_fn(|i, j| 0.01 * ((i * 3 + j) as f64 * 0.7).sin());
        let q = gram_schmidt_rotation(&noisy).unwrap();
        assert!((q.transpose() * q - Matrix3::identity()).abs().max() < 1e-12);
        assert!((q.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_columns_are_degenerate() {
        let m = Matrix3::new(1.0, 2.0, 0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 1.0);
        assert!(gram_schmidt_rotation(&m).is_err());
        assert!(gram_schmidt_rotation(&Matrix3::zeros()).is_err());
    }

    #[test]
    fn geodesic_examples() {
        let r = random_rotation(5.0, 6.0, 7.0);
        assert!(geodesic_angle(&r, &r).abs() < 1e-12);
        assert!((geodesic_angle(&Matrix3::identity(), &rot_z(90.0)) - 90.0).abs() < 1e-12);
        assert!((geodesic_angle(&rot_x(10.0), &rot_x(55.0)) - 45.0).abs() < 1e-12);
        assert!((geodesic_angle(&Matrix3::identity(), &rot_y(180.0)) - 180.0).abs() < 1e-9);
    }

    #[test]
    fn geodesic_matches_axis_angle_of_relative_rotation() {
        // Oracle: nalgebra's axis-angle extraction of R₁ᵀR₂.
        let (a, b) = (random_rotation(12.0, 40.0, -20.0), random_rotation(-50.0, 3.0, 77.0));
        let rel = Rotation3::from_matrix_unchecked(a.transpose() * b);
        assert!((geodesic_angle(&a, &b) - rel.angle().to_degrees()).abs() < 1e-10);
    }

    #[test]
    fn euler_round_trip() {
        for angles in [[10.0, 20.0, 30.0], [-170.0, 80.0, 5.0], [0.0, 0.0, 0.0], [45.0, -30.0, 179.0]] {
            let r = from_euler_zxy(angles);
            let back = euler_zxy(&r);
            assert!((from_euler_zxy(back) - r).abs().max() < 1e-12);
            for k in 0..3 {
                assert!((back[k] - angles[k]).abs() < 1e-9, "{back:?} vs {angles:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn gram_schmidt_is_idempotent(vals in proptest::array::uniform9(-2.0f64..2.0)) {
            let m = Matrix3::from_row_slice(&vals);
            if let Ok(q) = gram_schmidt_rotation(&m) {
                let qq = gram_schmidt_rotation(&q).unwrap();
                prop_assert!((qq - q).abs().max() < 1e-12);
                prop_assert!(is_rotation(&q, 1e-12));
            }
        }

        #[test]
        fn geodesic_is_symmetric_and_satisfies_triangle_inequality(
            a in proptest::array::uniform3(-180.0f64..180.0),
            b in proptest::array::uniform3(-180.0f64..180.0),
            c in proptest::array::uniform3(-180.0f64..180.0),
        ) {
            let (ra, rb, rc) = (from_euler_zxy(a), from_euler_zxy(b), from_euler_zxy(c));
            prop_assert!((geodesic_angle(&ra, &rb) - geodesic_angle(&rb, &ra)).abs() < 1e-9);
            prop_assert!(geodesic_angle(&ra, &rc) <= geodesic_angle(&ra, &rb) + geodesic_angle(&rb, &rc) + 1e-9);
        }
    }
}

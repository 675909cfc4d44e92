//! Small geometric helpers shared across modules.

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation vector (axis * angle) of `q`, with the angle in [0, pi].
pub fn quat_log(q: &Quat) -> Vec3 {
    // pick the short way round
    let q = if q.w < 0.0 {
        Quat::new_unchecked(-q.into_inner())
    } else {
        *q
    };
    q.scaled_axis()
}

pub fn quat_exp(v: &Vec3) -> Quat {
    Quat::from_scaled_axis(*v)
}

/// Orthonormal pair spanning the plane orthogonal to `up`.
///
/// The first vector is the world x axis projected onto the plane (or y if x
/// is parallel to `up`), so that for `up = z` the planar frame is (x, y).
pub fn planar_basis(up: &Unit<Vec3>) -> (Vec3, Vec3) {
    let up = up.into_inner();
    let mut seed = Vec3::x();
    if up.cross(&seed).norm() < 1e-6 {
        seed = Vec3::y();
    }
    let e1 = (seed - up * up.dot(&seed)).normalize();
    let e2 = up.cross(&e1);
    (e1, e2)
}

/// Spherical linear interpolation that always takes the short arc.
pub fn slerp(a: &Quat, b: &Quat, s: f64) -> Quat {
    let b = if a.coords.dot(&b.coords) < 0.0 {
        Quat::new_unchecked(-b.into_inner())
    } else {
        *b
    };
    a.try_slerp(&b, s, 1e-12).unwrap_or(b)
}

pub fn quat_from_wxyz(v: [f64; 4]) -> Quat {
    Quat::new_normalize(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]))
}

pub fn quat_to_wxyz(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_exp_round_trip() {
        let v = Vec3::new(0.3, -1.1, 0.4);
        let back = quat_log(&quat_exp(&v));
        assert!((back - v).norm() < 1e-12);
    }

    #[test]
    fn log_uses_short_arc() {
        let q = Quat::new_unchecked(-quat_exp(&Vec3::new(0.0, 0.0, 0.5)).into_inner());
        assert!((quat_log(&q) - Vec3::new(0.0, 0.0, 0.5)).norm() < 1e-12);
    }

    #[test]
    fn planar_basis_for_z_is_xy() {
        let (e1, e2) = planar_basis(&Vec3::z_axis());
        assert!((e1 - Vec3::x()).norm() < 1e-15);
        assert!((e2 - Vec3::y()).norm() < 1e-15);
    }

    #[test]
    fn skew_matches_cross() {
        let a = Vec3::new(1.0, 2.0, 3.0);
        let b = Vec3::new(-0.5, 0.1, 2.0);
        assert!((skew(&a) * b - a.cross(&b)).norm() < 1e-15);
    }
}

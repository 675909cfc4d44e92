//! Whole-body center of mass and its reduced Jacobian.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::model::{reduce_jacobian, AvatarModel, Kinematics};

fn total_mass(model: &AvatarModel) -> Result<f64> {
    let m = model.total_mass();
    if m <= 0.0 {
        return Err(Error::DegenerateModel("total mass is zero".into()));
    }
    Ok(m)
}

/// Mass-weighted mean of the segment centers of mass, world frame.
pub fn com_position(model: &AvatarModel, q: &DVector<f64>) -> Result<Vec3> {
    let kin = Kinematics::new(model, q)?;
    com_position_with(&kin)
}

pub fn com_position_with(kin: &Kinematics<'_>) -> Result<Vec3> {
    let model = kin.model();
    let total = total_mass(model)?;
    let weighted = model
        .segments()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.mass > 0.0)
        .fold(Vec3::zeros(), |acc, (i, s)| acc + kin.segment_com(i) * s.mass);
    Ok(weighted / total)
}

/// 3 x n_dof Jacobian of the center of mass: the mass-weighted mean of the
/// reduced Jacobians taken at each segment's own center of mass.
pub fn com_jacobian(model: &AvatarModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let kin = Kinematics::new(model, q)?;
    com_jacobian_with(&kin)
}

pub fn com_jacobian_with(kin: &Kinematics<'_>) -> Result<DMatrix<f64>> {
    let model = kin.model();
    let total = total_mass(model)?;
    let mut acc = DMatrix::zeros(3, model.n_dof());
    for (i, seg) in model.segments().iter().enumerate() {
        if seg.mass == 0.0 {
            continue;
        }
        let reduced = reduce_jacobian(&kin.point_jacobian(i, &seg.local_com))?;
        acc += reduced * seg.mass;
    }
    Ok(acc / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat3;
    use crate::model::{JointKind, JointSpec, Segment};
    use nalgebra::{Isometry3, Unit};

    fn body(name: &str, parent: Option<usize>, mass: f64, x: f64) -> Segment {
        Segment {
            name: name.into(),
            parent,
            mass,
            local_com: Vec3::zeros(),
            inertia: Mat3::identity() * 0.1,
            joint_origin: Isometry3::translation(x, 0.0, 0.0),
            collision_points: vec![],
        }
    }

    fn fixed(name: &str) -> JointSpec {
        JointSpec {
            name: name.into(),
            kind: JointKind::Fixed,
        }
    }

    #[test]
    fn midpoint_of_two_equal_masses() {
        let model = AvatarModel::new(
            "pair",
            vec![body("a", None, 1.0, 0.0), body("b", Some(0), 1.0, 2.0)],
            vec![fixed("a"), fixed("b")],
            vec![],
        )
        .unwrap();
        let c = com_position(&model, &DVector::zeros(0)).unwrap();
        assert!((c - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn massless_model_is_degenerate() {
        let model = AvatarModel::new("ghost", vec![body("a", None, 0.0, 0.0)], vec![fixed("a")], vec![])
            .unwrap();
        assert!(matches!(
            com_position(&model, &DVector::zeros(0)),
            Err(Error::DegenerateModel(_))
        ));
        assert!(matches!(
            com_jacobian(&model, &DVector::zeros(0)),
            Err(Error::DegenerateModel(_))
        ));
    }

    #[test]
    fn single_segment_jacobian_is_its_own() {
        let mut seg = body("a", None, 3.0, 0.0);
        seg.local_com = Vec3::new(0.4, 0.1, 0.0);
        let model = AvatarModel::new(
            "arm",
            vec![seg.clone()],
            vec![JointSpec {
                name: "j".into(),
                kind: JointKind::Revolute {
                    axis: Unit::new_normalize(Vec3::z()),
                    limits: None,
                },
            }],
            vec![],
        )
        .unwrap();
        let q = DVector::from_element(1, 0.7);
        let jc = com_jacobian(&model, &q).unwrap();
        let direct = crate::model::body_jacobian(&model, &q, 0, &seg.local_com).unwrap();
        assert!((jc - direct.rows(3, 3)).norm() < 1e-15);
    }
}

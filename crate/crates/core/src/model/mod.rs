//! Kinematic tree, forward kinematics and world-frame Jacobians.
//!
//! Configuration vectors `q` and velocity vectors `v` have different lengths
//! when quaternion-parameterized joints are present: a `free6` root stores
//! position + unit quaternion (7 numbers) and moves with 6 velocity
//! coordinates (world linear velocity of the root origin, then body angular
//! velocity). A spherical joint stores a quaternion and moves with the child
//! frame angular velocity. Use [`AvatarModel::integrate`] and
//! [`AvatarModel::difference`] to move between the two spaces.
//!
//! Jacobians are `6 x n_dof`, rows ordered (angular; linear), expressed in
//! the world frame.

mod file;
pub mod humanoid;

pub use file::{AvatarFile, JointFile, SegmentFile, TaskFrameFile, TransformFile};

use nalgebra::{DMatrix, DVector, Isometry3, Translation3, Unit};

use crate::error::{Error, Result};
use crate::math::{quat_exp, quat_log, Mat3, Quat, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct JointLimits {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum JointKind {
    Revolute {
        axis: Unit<Vec3>,
        limits: Option<JointLimits>,
    },
    Spherical,
    /// Rigidly welded to the parent. Used for fixed-base models.
    Fixed,
    /// Floating base; only allowed on the root segment.
    Free6,
}

impl JointKind {
    pub fn dof(&self) -> usize {
        match self {
            JointKind::Revolute { .. } => 1,
            JointKind::Spherical => 3,
            JointKind::Fixed => 0,
            JointKind::Free6 => 6,
        }
    }

    pub fn nq(&self) -> usize {
        match self {
            JointKind::Revolute { .. } => 1,
            JointKind::Spherical => 4,
            JointKind::Fixed => 0,
            JointKind::Free6 => 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    /// Index of the first velocity coordinate of this joint.
    pub dof_offset: usize,
    /// Index of the first configuration coordinate of this joint.
    pub q_offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub parent: Option<usize>,
    pub mass: f64,
    /// Center of mass in the segment frame.
    pub local_com: Vec3,
    /// Rotational inertia about the local center of mass, segment axes.
    pub inertia: Mat3,
    /// Placement of the joint frame relative to the parent segment frame.
    pub joint_origin: Isometry3<f64>,
    pub collision_points: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFrame {
    pub name: String,
    pub segment: usize,
    pub local: Isometry3<f64>,
}

/// A validated articulated body.
#[derive(Clone, Debug, PartialEq)]
pub struct AvatarModel {
    pub name: String,
    segments: Vec<Segment>,
    joints: Vec<Joint>,
    task_frames: Vec<TaskFrame>,
    n_dof: usize,
    n_q: usize,
}

/// Joint description before offsets are assigned.
#[derive(Clone, Debug)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
}

impl AvatarModel {
    pub fn new(
        name: impl Into<String>,
        segments: Vec<Segment>,
        joints: Vec<JointSpec>,
        task_frames: Vec<TaskFrame>,
    ) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::DegenerateModel("model has no segments".into()));
        }
        if segments.len() != joints.len() {
            return Err(Error::arg(format!(
                "{} segments but {} joints",
                segments.len(),
                joints.len()
            )));
        }
        for (i, seg) in segments.iter().enumerate() {
            match seg.parent {
                Some(p) if p >= i => {
                    return Err(Error::arg(format!(
                        "segment {i} has parent {p}; parents must precede children"
                    )))
                }
                None if i != 0 => {
                    return Err(Error::arg(format!("segment {i} has no parent; only the root may")))
                }
                _ => {}
            }
            if !(seg.mass >= 0.0) || !seg.mass.is_finite() {
                return Err(Error::arg(format!("segment {i} has invalid mass {}", seg.mass)));
            }
            let sym = (seg.inertia - seg.inertia.transpose()).abs().max();
            if sym > 1e-9 * (1.0 + seg.inertia.abs().max()) {
                return Err(Error::arg(format!("segment {i} inertia is not symmetric")));
            }
            let eig = seg.inertia.symmetric_eigenvalues();
            if eig.min() < -1e-12 * (1.0 + eig.abs().max()) {
                return Err(Error::arg(format!(
                    "segment {i} inertia is not positive semidefinite"
                )));
            }
        }
        let mut offsets = Vec::with_capacity(joints.len());
        let (mut dof, mut nq) = (0, 0);
        for (i, j) in joints.iter().enumerate() {
            match &j.kind {
                JointKind::Free6 if i != 0 => {
                    return Err(Error::arg(format!(
                        "joint {i} is free6; only the root joint may float"
                    )))
                }
                JointKind::Revolute { axis, limits } => {
                    if (axis.norm() - 1.0).abs() > 1e-9 {
                        return Err(Error::arg(format!("joint {i} axis is not unit length")));
                    }
                    if let Some(l) = limits {
                        if !(l.lower <= l.upper) {
                            return Err(Error::arg(format!(
                                "joint {i} has lower limit above upper limit"
                            )));
                        }
                    }
                }
                _ => {}
            }
            offsets.push((dof, nq));
            dof += j.kind.dof();
            nq += j.kind.nq();
        }
        let mut names = std::collections::BTreeSet::new();
        for tf in &task_frames {
            if tf.segment >= segments.len() {
                return Err(Error::arg(format!(
                    "task frame `{}` references missing segment {}",
                    tf.name, tf.segment
                )));
            }
            if !names.insert(tf.name.clone()) {
                return Err(Error::arg(format!("duplicate task frame `{}`", tf.name)));
            }
        }
        let joints = joints
            .into_iter()
            .zip(offsets)
            .map(|(j, (dof_offset, q_offset))| Joint {
                name: j.name,
                kind: j.kind,
                dof_offset,
                q_offset,
            })
            .collect();
        Ok(Self {
            name: name.into(),
            segments,
            joints,
            task_frames,
            n_dof: dof,
            n_q: nq,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn task_frames(&self) -> &[TaskFrame] {
        &self.task_frames
    }

    pub fn n_dof(&self) -> usize {
        self.n_dof
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn total_mass(&self) -> f64 {
        self.segments.iter().map(|s| s.mass).sum()
    }

    pub fn is_floating(&self) -> bool {
        matches!(self.joints[0].kind, JointKind::Free6)
    }

    /// Number of leading velocity coordinates that belong to a floating root.
    pub fn root_dof(&self) -> usize {
        if self.is_floating() {
            6
        } else {
            0
        }
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn task_frame(&self, name: &str) -> Option<&TaskFrame> {
        self.task_frames.iter().find(|t| t.name == name)
    }

    /// True when segment `ancestor` lies on the path from the root to `seg`.
    pub fn is_ancestor_or_self(&self, ancestor: usize, mut seg: usize) -> bool {
        loop {
            if seg == ancestor {
                return true;
            }
            match self.segments[seg].parent {
                Some(p) => seg = p,
                None => return false,
            }
        }
    }

    /// Reference configuration: zero joint angles, identity quaternions.
    pub fn neutral_q(&self) -> DVector<f64> {
        let mut q = DVector::zeros(self.n_q);
        for j in &self.joints {
            match j.kind {
                JointKind::Spherical => q[j.q_offset] = 1.0,
                JointKind::Free6 => q[j.q_offset + 3] = 1.0,
                _ => {}
            }
        }
        q
    }

    pub fn check_q(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.n_q {
            return Err(Error::arg(format!(
                "configuration has length {}, expected {}",
                q.len(),
                self.n_q
            )));
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("configuration has non-finite entries"));
        }
        Ok(())
    }

    pub fn check_v(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.n_dof {
            return Err(Error::arg(format!(
                "velocity has length {}, expected {}",
                v.len(),
                self.n_dof
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("velocity has non-finite entries"));
        }
        Ok(())
    }

    /// `q (+) h*v`: advance a configuration along a constant velocity.
    ///
    /// This is the exact flow for constant `v` under the chosen
    /// parameterization, which makes it usable both as the integrator and as
    /// the perturbation map for finite differences.
    pub fn integrate(&self, q: &DVector<f64>, v: &DVector<f64>, h: f64) -> DVector<f64> {
        let mut out = q.clone();
        for j in &self.joints {
            let (qo, vo) = (j.q_offset, j.dof_offset);
            match j.kind {
                JointKind::Revolute { .. } => out[qo] += h * v[vo],
                JointKind::Fixed => {}
                JointKind::Spherical => {
                    let r = read_quat(q, qo);
                    let w = Vec3::new(v[vo], v[vo + 1], v[vo + 2]) * h;
                    write_quat(&mut out, qo, &(r * quat_exp(&w)));
                }
                JointKind::Free6 => {
                    for k in 0..3 {
                        out[qo + k] += h * v[vo + k];
                    }
                    let r = read_quat(q, qo + 3);
                    let w = Vec3::new(v[vo + 3], v[vo + 4], v[vo + 5]) * h;
                    write_quat(&mut out, qo + 3, &(r * quat_exp(&w)));
                }
            }
        }
        out
    }

    /// `target (-) base`: the velocity that carries `base` to `target` in unit time.
    pub fn difference(&self, target: &DVector<f64>, base: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_dof);
        for j in &self.joints {
            let (qo, vo) = (j.q_offset, j.dof_offset);
            match j.kind {
                JointKind::Revolute { .. } => out[vo] = target[qo] - base[qo],
                JointKind::Fixed => {}
                JointKind::Spherical => {
                    let w = quat_log(&(read_quat(base, qo).inverse() * read_quat(target, qo)));
                    out.fixed_rows_mut::<3>(vo).copy_from(&w);
                }
                JointKind::Free6 => {
                    for k in 0..3 {
                        out[vo + k] = target[qo + k] - base[qo + k];
                    }
                    let w = quat_log(
                        &(read_quat(base, qo + 3).inverse() * read_quat(target, qo + 3)),
                    );
                    out.fixed_rows_mut::<3>(vo + 3).copy_from(&w);
                }
            }
        }
        out
    }

    /// Renormalizes every quaternion block in place.
    pub fn normalize_q(&self, q: &mut DVector<f64>) {
        for j in &self.joints {
            let off = match j.kind {
                JointKind::Spherical => j.q_offset,
                JointKind::Free6 => j.q_offset + 3,
                _ => continue,
            };
            let r = read_quat(q, off);
            write_quat(q, off, &r);
        }
    }

    /// Configuration index of a revolute joint coordinate, if `dof` is one.
    pub fn revolute_q_index(&self, dof: usize) -> Option<usize> {
        self.joints.iter().find_map(|j| match j.kind {
            JointKind::Revolute { .. } if j.dof_offset == dof => Some(j.q_offset),
            _ => None,
        })
    }
}

pub(crate) fn read_quat(q: &DVector<f64>, off: usize) -> Quat {
    Quat::new_normalize(nalgebra::Quaternion::new(
        q[off],
        q[off + 1],
        q[off + 2],
        q[off + 3],
    ))
}

pub(crate) fn write_quat(q: &mut DVector<f64>, off: usize, r: &Quat) {
    q[off] = r.w;
    q[off + 1] = r.i;
    q[off + 2] = r.j;
    q[off + 3] = r.k;
}

/// Generalized coordinates, velocities and time of one simulation instant.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub t: f64,
}

impl SimState {
    pub fn at_rest(model: &AvatarModel, q: DVector<f64>) -> Result<Self> {
        model.check_q(&q)?;
        Ok(Self {
            q,
            qdot: DVector::zeros(model.n_dof()),
            t: 0.0,
        })
    }

    pub fn validate(&self, model: &AvatarModel) -> Result<()> {
        model.check_q(&self.q)?;
        model.check_v(&self.qdot)?;
        if !self.t.is_finite() {
            return Err(Error::arg("non-finite simulation time"));
        }
        Ok(())
    }
}

/// World placement of every segment for one configuration, with the
/// per-joint motion axes needed to assemble Jacobians.
#[derive(Clone, Debug)]
pub struct Kinematics<'m> {
    model: &'m AvatarModel,
    transforms: Vec<Isometry3<f64>>,
    /// World rotation of each joint frame's parent side (origin included).
    joint_frames: Vec<Isometry3<f64>>,
}

impl<'m> Kinematics<'m> {
    pub fn new(model: &'m AvatarModel, q: &DVector<f64>) -> Result<Self> {
        model.check_q(q)?;
        let n = model.segments.len();
        let mut transforms: Vec<Isometry3<f64>> = Vec::with_capacity(n);
        let mut joint_frames = Vec::with_capacity(n);
        for (seg, joint) in model.segments.iter().zip(&model.joints) {
            let parent = seg
                .parent
                .map(|p| transforms[p])
                .unwrap_or_else(Isometry3::identity);
            let frame = parent * seg.joint_origin;
            let motion = joint_motion(&joint.kind, q, joint.q_offset);
            joint_frames.push(frame);
            transforms.push(frame * motion);
        }
        Ok(Self {
            model,
            transforms,
            joint_frames,
        })
    }

    pub fn model(&self) -> &'m AvatarModel {
        self.model
    }

    pub fn transforms(&self) -> &[Isometry3<f64>] {
        &self.transforms
    }

    pub fn transform(&self, segment: usize) -> &Isometry3<f64> {
        &self.transforms[segment]
    }

    pub fn point(&self, segment: usize, local: &Vec3) -> Vec3 {
        self.transforms[segment].transform_point(&(*local).into()).coords
    }

    pub fn segment_com(&self, segment: usize) -> Vec3 {
        self.point(segment, &self.model.segments[segment].local_com)
    }

    pub fn task_frame_pose(&self, frame: &TaskFrame) -> Isometry3<f64> {
        self.transforms[frame.segment] * frame.local
    }

    /// Columns `[omega; v_point]` contributed by joint `j` for a world point.
    fn joint_columns(&self, j: usize, point: &Vec3, out: &mut DMatrix<f64>) {
        let joint = &self.model.joints[j];
        let col = joint.dof_offset;
        let tf = &self.transforms[j];
        let anchor = tf.translation.vector;
        let r = point - anchor;
        let mut put = |c: usize, w: Vec3, lin: Vec3| {
            out.fixed_view_mut::<3, 1>(0, c).copy_from(&w);
            out.fixed_view_mut::<3, 1>(3, c).copy_from(&lin);
        };
        match &joint.kind {
            JointKind::Fixed => {}
            JointKind::Revolute { axis, .. } => {
                let a = tf.rotation * axis.into_inner();
                put(col, a, a.cross(&r));
            }
            JointKind::Spherical => {
                for k in 0..3 {
                    let a = tf.rotation * Vec3::ith(k, 1.0);
                    put(col + k, a, a.cross(&r));
                }
            }
            JointKind::Free6 => {
                let parent_rot = self.joint_frames[j].rotation;
                for k in 0..3 {
                    put(col + k, Vec3::zeros(), parent_rot * Vec3::ith(k, 1.0));
                }
                for k in 0..3 {
                    let a = tf.rotation * Vec3::ith(k, 1.0);
                    put(col + 3 + k, a, a.cross(&r));
                }
            }
        }
    }

    /// 6 x n_dof Jacobian of a point fixed in `segment`, rows (angular; linear).
    pub fn point_jacobian(&self, segment: usize, local: &Vec3) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(6, self.model.n_dof);
        let p = self.point(segment, local);
        let mut s = Some(segment);
        while let Some(i) = s {
            self.joint_columns(i, &p, &mut jac);
            s = self.model.segments[i].parent;
        }
        jac
    }

    /// 3 x n_dof linear-velocity Jacobian of a point fixed in `segment`.
    pub fn linear_jacobian(&self, segment: usize, local: &Vec3) -> DMatrix<f64> {
        self.point_jacobian(segment, local).rows(3, 3).into_owned()
    }

    /// Spatial motion subspace of joint `j` about the world origin.
    ///
    /// Columns are `[omega; v_O]` where `v_O` is the velocity of the body
    /// point currently at the world origin.
    pub(crate) fn motion_subspace(&self, j: usize) -> DMatrix<f64> {
        let dof = self.model.joints[j].kind.dof();
        let mut cols = DMatrix::zeros(6, self.model.n_dof);
        self.joint_columns(j, &Vec3::zeros(), &mut cols);
        let off = self.model.joints[j].dof_offset;
        cols.columns(off, dof).into_owned()
    }
}

fn joint_motion(kind: &JointKind, q: &DVector<f64>, off: usize) -> Isometry3<f64> {
    match kind {
        JointKind::Fixed => Isometry3::identity(),
        JointKind::Revolute { axis, .. } => {
            Isometry3::from_parts(Translation3::identity(), Quat::from_axis_angle(axis, q[off]))
        }
        JointKind::Spherical => Isometry3::from_parts(Translation3::identity(), read_quat(q, off)),
        JointKind::Free6 => Isometry3::from_parts(
            Translation3::new(q[off], q[off + 1], q[off + 2]),
            read_quat(q, off + 3),
        ),
    }
}

/// World placement of every segment.
pub fn forward_kinematics(model: &AvatarModel, q: &DVector<f64>) -> Result<Vec<Isometry3<f64>>> {
    Ok(Kinematics::new(model, q)?.transforms)
}

/// 6 x n_dof world-frame Jacobian of `local_point` on `segment`, rows (angular; linear).
pub fn body_jacobian(
    model: &AvatarModel,
    q: &DVector<f64>,
    segment: usize,
    local_point: &Vec3,
) -> Result<DMatrix<f64>> {
    if segment >= model.segments.len() {
        return Err(Error::arg(format!(
            "segment index {segment} out of range ({} segments)",
            model.segments.len()
        )));
    }
    Ok(Kinematics::new(model, q)?.point_jacobian(segment, local_point))
}

/// Selects the linear (bottom) three rows of a 6-row Jacobian.
pub fn reduce_jacobian(j6: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if j6.nrows() != 6 {
        return Err(Error::arg(format!(
            "expected a 6-row Jacobian, got {} rows",
            j6.nrows()
        )));
    }
    Ok(j6.rows(3, 3).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn link(name: &str, parent: Option<usize>, origin: Vec3, mass: f64) -> Segment {
        Segment {
            name: name.into(),
            parent,
            mass,
            local_com: Vec3::new(0.5, 0.0, 0.0),
            inertia: Mat3::identity() * 0.01,
            joint_origin: Isometry3::translation(origin.x, origin.y, origin.z),
            collision_points: vec![],
        }
    }

    fn revolute(name: &str, axis: Vec3) -> JointSpec {
        JointSpec {
            name: name.into(),
            kind: JointKind::Revolute {
                axis: Unit::new_normalize(axis),
                limits: None,
            },
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let model = AvatarModel::new(
            "one",
            vec![link("a", None, Vec3::zeros(), 1.0)],
            vec![revolute("j", Vec3::z())],
            vec![],
        )
        .unwrap();
        let q = DVector::from_element(1, FRAC_PI_2);
        let kin = Kinematics::new(&model, &q).unwrap();
        let p = kin.point(0, &Vec3::new(1.0, 0.0, 0.0));
        assert!((p - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_q_composes_origins() {
        let model = AvatarModel::new(
            "chain",
            vec![
                link("a", None, Vec3::new(0.0, 0.0, 1.0), 1.0),
                link("b", Some(0), Vec3::new(1.0, 0.0, 0.0), 1.0),
                link("c", Some(1), Vec3::new(0.0, 2.0, 0.0), 1.0),
            ],
            vec![
                revolute("j0", Vec3::z()),
                revolute("j1", Vec3::y()),
                revolute("j2", Vec3::x()),
            ],
            vec![],
        )
        .unwrap();
        let tfs = forward_kinematics(&model, &DVector::zeros(3)).unwrap();
        assert!((tfs[2].translation.vector - Vec3::new(1.0, 2.0, 1.0)).norm() < 1e-15);
        assert!(tfs[2].rotation.angle() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        let model = AvatarModel::new(
            "one",
            vec![link("a", None, Vec3::zeros(), 1.0)],
            vec![revolute("j", Vec3::z())],
            vec![],
        )
        .unwrap();
        assert!(matches!(
            forward_kinematics(&model, &DVector::zeros(2)),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            forward_kinematics(&model, &DVector::from_element(1, f64::NAN)),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            body_jacobian(&model, &DVector::zeros(1), 3, &Vec3::zeros()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn rejects_free6_below_root() {
        let err = AvatarModel::new(
            "bad",
            vec![
                link("a", None, Vec3::zeros(), 1.0),
                link("b", Some(0), Vec3::zeros(), 1.0),
            ],
            vec![
                revolute("j0", Vec3::z()),
                JointSpec {
                    name: "f".into(),
                    kind: JointKind::Free6,
                },
            ],
            vec![],
        );
        assert!(err.is_err());
    }

    #[test]
    fn reduce_selects_bottom_rows() {
        let id = DMatrix::<f64>::identity(6, 6);
        let r = reduce_jacobian(&id).unwrap();
        assert_eq!(r.nrows(), 3);
        for i in 0..3 {
            for j in 0..6 {
                let expected = if j == i + 3 { 1.0 } else { 0.0 };
                assert_eq!(r[(i, j)], expected);
            }
        }
        assert!(reduce_jacobian(&DMatrix::zeros(4, 2)).is_err());
        assert_eq!(reduce_jacobian(&DMatrix::zeros(6, 5)).unwrap(), DMatrix::zeros(3, 5));
    }

    #[test]
    fn integrate_and_difference_are_inverse() {
        let model = humanoid::reference().unwrap();
        let mut rng_q = model.neutral_q();
        rng_q[0] = 0.3;
        let v = DVector::from_fn(model.n_dof(), |i, _| ((i * 37 % 11) as f64 - 5.0) * 0.07);
        let moved = model.integrate(&rng_q, &v, 0.8);
        let back = model.difference(&moved, &rng_q);
        assert!((back - v * 0.8).norm() < 1e-12);
    }
}

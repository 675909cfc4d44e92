//! Task-space control with virtual guides, null-space posture control,
//! contact-consistent gravity compensation and morphology retargeting.
//!
//! Spring terms are applied as explicit torques. Damper terms are returned
//! as a symmetric positive semidefinite matrix `D` so the integrator can
//! apply `-D v` at the end-of-step velocity, which keeps stiff rotational
//! dampers on light segments stable at millisecond steps.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Unit, Vector6};
use serde::{Deserialize, Serialize};

use crate::balance::{build_balance_row_with, BalanceConstraintRow, SupportEllipse};
use crate::dynamics::{gravity_forces_with, mass_matrix_with};
use crate::error::{Error, Result};
use crate::math::{quat_log, Quat, Vec3};
use crate::model::{AvatarModel, Kinematics, SimState};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TaskGains {
    /// N/m
    pub kp: f64,
    /// N s/m
    pub kd: f64,
    /// N m/rad
    pub kp_rot: f64,
    /// N m s/rad
    pub kd_rot: f64,
    /// Cap on the norm of the linear spring force, N.
    pub force_cap: f64,
    /// Cap on the norm of the angular spring torque, N m.
    pub torque_cap: f64,
}

impl Default for TaskGains {
    fn default() -> Self {
        Self {
            kp: 500.0,
            kd: 50.0,
            kp_rot: 50.0,
            kd_rot: 5.0,
            force_cap: 400.0,
            torque_cap: 60.0,
        }
    }
}

impl TaskGains {
    pub fn validate(&self) -> Result<()> {
        let all = [self.kp, self.kd, self.kp_rot, self.kd_rot, self.force_cap, self.torque_cap];
        if all.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::validation("gains", "task gains and caps must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskTarget {
    pub task_frame: String,
    pub desired_position: Vec3,
    pub desired_orientation: Option<Quat>,
    pub gains: TaskGains,
    pub enabled: bool,
}

impl TaskTarget {
    pub fn new(task_frame: impl Into<String>, desired_position: Vec3) -> Self {
        Self {
            task_frame: task_frame.into(),
            desired_position,
            desired_orientation: None,
            gains: TaskGains::default(),
            enabled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GuideKind {
    /// Free to slide along `direction` through `point`.
    Axis { point: Vec3, direction: Unit<Vec3> },
    /// Free to move within the plane through `point`.
    Plane { point: Vec3, normal: Unit<Vec3> },
    /// Held at `position`.
    Point { position: Vec3 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualGuide {
    pub name: String,
    pub kind: GuideKind,
    pub task_frame: String,
    /// Reference orientation; when present all three rotations are guided.
    pub orientation: Option<Quat>,
    /// N/m along the constrained directions.
    pub stiffness: f64,
    /// N s/m along the constrained directions.
    pub damping: f64,
    pub angular_stiffness: f64,
    pub angular_damping: f64,
    pub enabled: bool,
}

impl VirtualGuide {
    /// Projector onto the constrained linear directions.
    pub fn linear_projector(&self) -> Matrix3<f64> {
        match &self.kind {
            GuideKind::Axis { direction, .. } => {
                Matrix3::identity() - direction.into_inner() * direction.transpose()
            }
            GuideKind::Plane { normal, .. } => normal.into_inner() * normal.transpose(),
            GuideKind::Point { .. } => Matrix3::identity(),
        }
    }

    pub fn angular_projector(&self) -> Matrix3<f64> {
        if self.orientation.is_some() {
            Matrix3::identity()
        } else {
            Matrix3::zeros()
        }
    }

    fn reference_point(&self) -> Vec3 {
        match &self.kind {
            GuideKind::Axis { point, .. } | GuideKind::Plane { point, .. } => *point,
            GuideKind::Point { position } => *position,
        }
    }

    /// Error (angular; linear) from a frame pose to the guide, before
    /// projection.
    pub fn pose_error(&self, pose: &Isometry3<f64>) -> Vector6<f64> {
        let ang = self
            .orientation
            .map(|r| quat_log(&(r * pose.rotation.inverse())))
            .unwrap_or_else(Vec3::zeros);
        let lin = self.reference_point() - pose.translation.vector;
        stack(&ang, &lin)
    }

    /// Distance from a point to the guide manifold.
    pub fn distance(&self, p: &Vec3) -> f64 {
        (self.linear_projector() * (self.reference_point() - p)).norm()
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.stiffness, self.damping, self.angular_stiffness, self.angular_damping];
        if all.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::validation(
                format!("guides.{}", self.name),
                "stiffness and damping must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

fn stack(ang: &Vec3, lin: &Vec3) -> Vector6<f64> {
    Vector6::new(ang.x, ang.y, ang.z, lin.x, lin.y, lin.z)
}

fn block_diag(ang: &Matrix3<f64>, lin: &Matrix3<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(6, 6);
    out.view_mut((0, 0), (3, 3)).copy_from(ang);
    out.view_mut((3, 3), (3, 3)).copy_from(lin);
    out
}

/// Spring-damper toward the guide manifold: `K P e - D P v`, zero along the
/// free directions.
pub fn apply_guide(g: &VirtualGuide, pose_error: &Vector6<f64>, frame_velocity: &Vector6<f64>) -> Vector6<f64> {
    let (pl, pa) = (g.linear_projector(), g.angular_projector());
    let e_ang = pa * pose_error.fixed_rows::<3>(0);
    let e_lin = pl * pose_error.fixed_rows::<3>(3);
    let v_ang = pa * frame_velocity.fixed_rows::<3>(0);
    let v_lin = pl * frame_velocity.fixed_rows::<3>(3);
    stack(
        &(e_ang * g.angular_stiffness - v_ang * g.angular_damping),
        &(e_lin * g.stiffness - v_lin * g.damping),
    )
}

fn clamp_norm(v: Vec3, cap: f64) -> Vec3 {
    let n = v.norm();
    if n > cap {
        v * (cap / n)
    } else {
        v
    }
}

/// Frame Jacobian (angular; linear) at the task frame origin.
fn frame_jacobian(kin: &Kinematics<'_>, model: &AvatarModel, name: &str) -> Result<(Isometry3<f64>, DMatrix<f64>)> {
    let frame = model
        .task_frame(name)
        .ok_or_else(|| Error::config(format!("unknown task frame `{name}`")))?;
    let pose = kin.task_frame_pose(frame);
    let local = frame.local.translation.vector;
    Ok((pose, kin.point_jacobian(frame.segment, &local)))
}

/// Split contributions of targets and guides: explicit spring torques,
/// the implicit damping matrix, and the stacked task rows used for the
/// null-space projection.
#[derive(Clone, Debug)]
pub struct TaskTerms {
    pub spring: DVector<f64>,
    pub damping: DMatrix<f64>,
    pub stack: DMatrix<f64>,
}

/// Projector onto the linear directions a target may drive, given the guides
/// attached to the same frame.
fn free_projectors(guides: &[&VirtualGuide]) -> (Matrix3<f64>, Matrix3<f64>) {
    let mut lin = Matrix3::identity();
    let mut ang = Matrix3::identity();
    for g in guides {
        lin -= g.linear_projector();
        ang -= g.angular_projector();
    }
    // overlapping guides: keep it a projector-like PSD operator
    let clip = |m: Matrix3<f64>| {
        let e = m.symmetric_eigen();
        let d = e.eigenvalues.map(|x| x.clamp(0.0, 1.0));
        e.eigenvectors * Matrix3::from_diagonal(&d) * e.eigenvectors.transpose()
    };
    (clip(ang), clip(lin))
}

pub fn task_terms(
    kin: &Kinematics<'_>,
    targets: &[TaskTarget],
    guides: &[VirtualGuide],
) -> Result<TaskTerms> {
    let model = kin.model();
    let n = model.n_dof();
    let mut spring = DVector::zeros(n);
    let mut damping = DMatrix::zeros(n, n);
    let mut rows: BTreeMap<String, (DMatrix<f64>, bool)> = BTreeMap::new();

    for t in targets.iter().filter(|t| t.enabled) {
        t.gains.validate()?;
        let (pose, jac) = frame_jacobian(kin, model, &t.task_frame)?;
        let attached: Vec<&VirtualGuide> = guides
            .iter()
            .filter(|g| g.enabled && g.task_frame == t.task_frame)
            .collect();
        let (pa, pl) = free_projectors(&attached);
        let pa = if t.desired_orientation.is_some() { pa } else { Matrix3::zeros() };
        let e_lin = pl * (t.desired_position - pose.translation.vector);
        let e_ang = t
            .desired_orientation
            .map(|r| pa * quat_log(&(r * pose.rotation.inverse())))
            .unwrap_or_else(Vec3::zeros);
        let w = stack(
            &clamp_norm(e_ang * t.gains.kp_rot, t.gains.torque_cap),
            &clamp_norm(e_lin * t.gains.kp, t.gains.force_cap),
        );
        spring += jac.transpose() * DVector::from_column_slice(w.as_slice());
        let d = block_diag(&(pa * t.gains.kd_rot), &(pl * t.gains.kd));
        damping += jac.transpose() * d * &jac;
        let entry = rows.entry(t.task_frame.clone()).or_insert((jac.clone(), false));
        entry.1 |= t.desired_orientation.is_some();
    }

    for g in guides.iter().filter(|g| g.enabled) {
        g.validate()?;
        let (pose, jac) = frame_jacobian(kin, model, &g.task_frame)?;
        let e = g.pose_error(&pose);
        let w = apply_guide(g, &e, &Vector6::zeros());
        spring += jac.transpose() * DVector::from_column_slice(w.as_slice());
        let d = block_diag(
            &(g.angular_projector() * g.angular_damping),
            &(g.linear_projector() * g.damping),
        );
        damping += jac.transpose() * d * &jac;
        let entry = rows.entry(g.task_frame.clone()).or_insert((jac.clone(), false));
        entry.1 |= g.orientation.is_some();
    }

    let mut stacked: Vec<DMatrix<f64>> = Vec::new();
    for (_, (jac, with_rotation)) in rows {
        stacked.push(if with_rotation { jac } else { jac.rows(3, 3).into_owned() });
    }
    let total: usize = stacked.iter().map(|m| m.nrows()).sum();
    let mut stack_rows = DMatrix::zeros(total, n);
    let mut r = 0;
    for m in stacked {
        stack_rows.view_mut((r, 0), (m.nrows(), n)).copy_from(&m);
        r += m.nrows();
    }
    damping = (&damping + damping.transpose()) * 0.5;
    Ok(TaskTerms {
        spring,
        damping,
        stack: stack_rows,
    })
}

/// `sum J^T w` with `w = Kp e - Kd v` per enabled target (spring capped),
/// plus the guide wrenches, all evaluated at the current velocity.
pub fn task_torques(
    model: &AvatarModel,
    state: &SimState,
    targets: &[TaskTarget],
    guides: &[VirtualGuide],
) -> Result<DVector<f64>> {
    state.validate(model)?;
    let kin = Kinematics::new(model, &state.q)?;
    let terms = task_terms(&kin, targets, guides)?;
    Ok(terms.spring - terms.damping * &state.qdot)
}

/// Posture gains per velocity coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct PostureGains {
    pub kp: DVector<f64>,
    pub kd: DVector<f64>,
}

impl PostureGains {
    pub fn uniform(model: &AvatarModel, kp: f64, kd: f64) -> Self {
        let n = model.n_dof();
        let mut g = Self {
            kp: DVector::from_element(n, kp),
            kd: DVector::from_element(n, kd),
        };
        for i in 0..model.root_dof() {
            g.kp[i] = 0.0;
            g.kd[i] = 0.0;
        }
        g
    }
}

/// Regularization of the task-space pseudo-inverse.
pub const PSEUDO_INVERSE_DAMPING: f64 = 1e-6;

/// `N^T`-style projection `G - J^T (J M^-1 J^T)^+ J M^-1 G` with a damped
/// eigen-decomposition pseudo-inverse.
pub fn null_space_project(
    mass: &DMatrix<f64>,
    stack: &DMatrix<f64>,
    torque: &DVector<f64>,
) -> Result<DVector<f64>> {
    if stack.nrows() == 0 {
        return Ok(torque.clone());
    }
    let chol = mass
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateModel("mass matrix is not positive definite".into()))?;
    let minv_jt = chol.solve(&stack.transpose());
    let lambda_inv = stack * &minv_jt;
    let lambda_inv = (&lambda_inv + lambda_inv.transpose()) * 0.5;
    let eig = lambda_inv.symmetric_eigen();
    let l2 = PSEUDO_INVERSE_DAMPING * PSEUDO_INVERSE_DAMPING;
    let inv = eig.eigenvalues.map(|s| s / (s * s + l2));
    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    let task_acc = minv_jt.transpose() * torque;
    Ok(torque - stack.transpose() * (pinv * task_acc))
}

/// `N (Kp (q_ref - q) - Kd qdot)`, root coordinates excluded from the
/// unprojected term.
pub fn posture_torques(
    model: &AvatarModel,
    state: &SimState,
    q_ref: &DVector<f64>,
    gains: &PostureGains,
    task_stack: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    state.validate(model)?;
    model.check_q(q_ref)?;
    let kin = Kinematics::new(model, &state.q)?;
    let mass = mass_matrix_with(&kin);
    let raw = posture_raw(model, state, q_ref, gains);
    null_space_project(&mass, task_stack, &raw)
}

fn posture_raw(model: &AvatarModel, state: &SimState, q_ref: &DVector<f64>, gains: &PostureGains) -> DVector<f64> {
    let err = model.difference(q_ref, &state.q);
    let mut raw = gains.kp.component_mul(&err) - gains.kd.component_mul(&state.qdot);
    for i in 0..model.root_dof() {
        raw[i] = 0.0;
    }
    raw
}

/// Joint torques that hold the current posture against gravity, with the
/// floating-base share carried by the support wrenches. The support wrenches
/// are the minimum-norm set that balances the root rows of `g(q)`.
pub fn gravity_compensation(
    kin: &Kinematics<'_>,
    gravity: &Vec3,
    supports: &[(usize, Vec3)],
) -> Result<DVector<f64>> {
    let model = kin.model();
    let mut tau = gravity_forces_with(kin, gravity);
    let r = model.root_dof();
    if r > 0 && !supports.is_empty() {
        let n = model.n_dof();
        let mut jc = DMatrix::zeros(6 * supports.len(), n);
        for (k, (seg, local)) in supports.iter().enumerate() {
            jc.view_mut((6 * k, 0), (6, n))
                .copy_from(&kin.point_jacobian(*seg, local));
        }
        let jr = jc.columns(0, r).into_owned();
        let gram = jr.transpose() * &jr;
        let g_root = tau.rows(0, r).into_owned();
        let y = gram
            .lu()
            .solve(&g_root)
            .ok_or_else(|| Error::DegenerateSupport("support wrenches cannot balance the base".into()))?;
        let f = &jr * y;
        tau -= jc.transpose() * f;
    }
    for i in 0..r {
        tau[i] = 0.0;
    }
    Ok(tau)
}

/// Everything the controller needs besides the state.
#[derive(Clone, Debug, PartialEq)]
pub struct Controller {
    pub targets: Vec<TaskTarget>,
    pub guides: Vec<VirtualGuide>,
    pub q_ref: DVector<f64>,
    pub posture: PostureGains,
    /// Additional damping per velocity coordinate, N m s/rad.
    pub joint_damping: DVector<f64>,
    pub gravity: Vec3,
    pub gravity_compensation: bool,
    /// (segment, local point) pairs carrying the body.
    pub supports: Vec<(usize, Vec3)>,
    pub ellipse: Option<SupportEllipse>,
}

#[derive(Clone, Debug)]
pub struct ControlOutput {
    /// Explicit generalized torques, zero on the root coordinates.
    pub torques: DVector<f64>,
    /// Symmetric positive semidefinite damping matrix, zero root rows and
    /// columns.
    pub damping: DMatrix<f64>,
    pub balance: Option<BalanceConstraintRow>,
    pub task_stack: DMatrix<f64>,
}

pub fn control_step(
    model: &AvatarModel,
    state: &SimState,
    ctrl: &Controller,
    balance_enabled: bool,
) -> Result<ControlOutput> {
    state.validate(model)?;
    let kin = Kinematics::new(model, &state.q)?;
    let n = model.n_dof();
    let terms = task_terms(&kin, &ctrl.targets, &ctrl.guides)?;
    let mass = mass_matrix_with(&kin);

    let stiffness_only = PostureGains {
        kp: ctrl.posture.kp.clone(),
        kd: DVector::zeros(n),
    };
    let posture = null_space_project(&mass, &terms.stack, &posture_raw(model, state, &ctrl.q_ref, &stiffness_only))?;

    let mut torques = terms.spring + posture;
    if ctrl.gravity_compensation {
        torques += gravity_compensation(&kin, &ctrl.gravity, &ctrl.supports)?;
    }
    let mut damping = terms.damping;
    for i in 0..n {
        damping[(i, i)] += ctrl.posture.kd[i] + ctrl.joint_damping[i];
    }
    let r = model.root_dof();
    for i in 0..r {
        torques[i] = 0.0;
        damping.row_mut(i).fill(0.0);
        damping.column_mut(i).fill(0.0);
    }

    let balance = match (&ctrl.ellipse, balance_enabled) {
        (Some(e), true) => Some(build_balance_row_with(&kin, &state.qdot, e)?),
        _ => None,
    };
    Ok(ControlOutput {
        torques,
        damping,
        balance,
        task_stack: terms.stack,
    })
}

/// Limb lengths and root height of a performer or an avatar.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Morphology {
    pub limbs: BTreeMap<String, f64>,
    pub root_height: f64,
}

impl Morphology {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.limbs.values().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::validation(field, "limb lengths must be positive"));
        }
        if !self.root_height.is_finite() {
            return Err(Error::validation(field, "root height must be finite"));
        }
        Ok(())
    }

    fn chain_length(&self, limbs: &[String], which: &str) -> Result<f64> {
        limbs
            .iter()
            .map(|l| {
                self.limbs
                    .get(l)
                    .copied()
                    .ok_or_else(|| Error::config(format!("{which} morphology has no limb `{l}`")))
            })
            .sum()
    }
}

/// Re-expresses each target relative to the actor's root, scales it by the
/// avatar/actor length ratio of the limbs listed for its task in
/// `task_limbs`, and re-anchors it at the avatar's root. Both roots sit at
/// the horizontal origin. Orientations pass through.
pub fn retarget_targets(
    actor_targets: &[TaskTarget],
    actor: &Morphology,
    avatar: &Morphology,
    task_limbs: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<TaskTarget>> {
    actor_targets
        .iter()
        .map(|t| {
            let limbs = task_limbs
                .get(&t.task_frame)
                .ok_or_else(|| Error::config(format!("no limb chain for task `{}`", t.task_frame)))?;
            let scale = avatar.chain_length(limbs, "avatar")? / actor.chain_length(limbs, "actor")?;
            let mut out = t.clone();
            out.desired_position = retarget_point(&t.desired_position, scale, actor, avatar);
            Ok(out)
        })
        .collect()
}

/// `avatar_root + s (x - actor_root)`, written so that `s = 1` with equal
/// roots returns `x` bit for bit.
pub fn retarget_point(x: &Vec3, scale: f64, actor: &Morphology, avatar: &Morphology) -> Vec3 {
    let actor_root = Vec3::new(0.0, 0.0, actor.root_height);
    let avatar_root = Vec3::new(0.0, 0.0, avatar.root_height);
    x + (x - actor_root) * (scale - 1.0) + (avatar_root - actor_root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat3;
    use crate::model::{humanoid, JointKind, JointSpec, Segment};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_guide(stiffness: f64) -> VirtualGuide {
        VirtualGuide {
            name: "axis".into(),
            kind: GuideKind::Axis {
                point: Vec3::zeros(),
                direction: Vec3::x_axis(),
            },
            task_frame: "tip".into(),
            orientation: None,
            stiffness,
            damping: 0.0,
            angular_stiffness: 0.0,
            angular_damping: 0.0,
            enabled: true,
        }
    }

    #[test]
    fn guide_ignores_free_direction() {
        let g = axis_guide(100.0);
        let e = stack(&Vec3::zeros(), &Vec3::new(0.7, 0.0, 0.0));
        assert_eq!(apply_guide(&g, &e, &Vector6::zeros()), Vector6::zeros());
    }

    #[test]
    fn guide_pulls_back_to_axis() {
        let g = axis_guide(100.0);
        // frame at (0, 1, 0): error toward the axis is (0, -1, 0)
        let pose = Isometry3::translation(0.3, 1.0, 0.0);
        let w = apply_guide(&g, &g.pose_error(&pose), &Vector6::zeros());
        let lin = w.fixed_rows::<3>(3);
        assert!((lin.norm() - 100.0).abs() < 1e-12);
        assert!((lin - Vec3::new(0.0, -100.0, 0.0)).norm() < 1e-12);
        assert_eq!(lin.x, 0.0);
    }

    fn three_dof_arm() -> AvatarModel {
        let link = |name: &str, parent: Option<usize>, z: f64| Segment {
            name: name.into(),
            parent,
            mass: 1.0,
            local_com: Vec3::new(0.0, 0.0, -0.15),
            inertia: Mat3::identity() * 0.01,
            joint_origin: Isometry3::translation(0.0, 0.0, z),
            collision_points: vec![],
        };
        let rev = |name: &str, axis: Unit<Vec3>| JointSpec {
            name: name.into(),
            kind: JointKind::Revolute { axis, limits: None },
        };
        AvatarModel::new(
            "arm",
            vec![link("a", None, 0.0), link("b", Some(0), -0.3), link("c", Some(1), -0.3)],
            vec![rev("a", Vec3::z_axis()), rev("b", Vec3::y_axis()), rev("c", Vec3::y_axis())],
            vec![crate::model::TaskFrame {
                name: "tip".into(),
                segment: 2,
                local: Isometry3::translation(0.0, 0.0, -0.3),
            }],
        )
        .unwrap()
    }

    #[test]
    fn at_target_at_rest_gives_zero() {
        let model = three_dof_arm();
        let q = DVector::from_column_slice(&[0.2, 0.4, 0.6]);
        let state = SimState::at_rest(&model, q.clone()).unwrap();
        let kin = Kinematics::new(&model, &q).unwrap();
        let pose = kin.task_frame_pose(model.task_frame("tip").unwrap());
        let mut t = TaskTarget::new("tip", pose.translation.vector);
        t.desired_orientation = Some(pose.rotation);
        let tau = task_torques(&model, &state, &[t], &[]).unwrap();
        assert!(tau.amax() < 1e-12);
    }

    #[test]
    fn small_displacement_is_jacobian_transpose() {
        let model = three_dof_arm();
        let q = DVector::from_column_slice(&[0.2, 0.4, 0.6]);
        let state = SimState::at_rest(&model, q.clone()).unwrap();
        let kin = Kinematics::new(&model, &q).unwrap();
        let pose = kin.task_frame_pose(model.task_frame("tip").unwrap());
        let e = Vec3::new(1e-4, -2e-4, 5e-5);
        let t = TaskTarget::new("tip", pose.translation.vector + e);
        let tau = task_torques(&model, &state, &[t], &[]).unwrap();
        let jl = kin.linear_jacobian(2, &Vec3::new(0.0, 0.0, -0.3));
        let expected = jl.transpose() * (e * 500.0);
        assert!((tau - expected).amax() < 1e-6);
    }

    #[test]
    fn wrench_cap_preserves_direction() {
        let model = three_dof_arm();
        let q = DVector::from_column_slice(&[0.2, 0.4, 0.6]);
        let kin = Kinematics::new(&model, &q).unwrap();
        let pose = kin.task_frame_pose(model.task_frame("tip").unwrap());
        let e = Vec3::new(3.0, 4.0, 0.0);
        let mut t = TaskTarget::new("tip", pose.translation.vector + e);
        t.gains.force_cap = 10.0;
        let terms = task_terms(&kin, &[t], &[]).unwrap();
        let jl = kin.linear_jacobian(2, &Vec3::new(0.0, 0.0, -0.3));
        let expected = jl.transpose() * (e.normalize() * 10.0);
        assert!((terms.spring - expected).amax() < 1e-12);
    }

    #[test]
    fn posture_without_tasks_is_raw_and_vanishes_at_reference() {
        let model = three_dof_arm();
        let gains = PostureGains::uniform(&model, 20.0, 2.0);
        let q_ref = DVector::from_column_slice(&[0.1, 0.2, 0.3]);
        let mut state = SimState::at_rest(&model, DVector::from_column_slice(&[0.0, 0.5, 0.1])).unwrap();
        state.qdot = DVector::from_column_slice(&[0.1, -0.2, 0.3]);
        let none = DMatrix::zeros(0, 3);
        let tau = posture_torques(&model, &state, &q_ref, &gains, &none).unwrap();
        let expected = (&q_ref - &state.q) * 20.0 - &state.qdot * 2.0;
        assert!((tau - expected).amax() < 1e-12);
        let still = SimState::at_rest(&model, q_ref.clone()).unwrap();
        assert!(posture_torques(&model, &still, &q_ref, &gains, &none).unwrap().amax() < 1e-15);
    }

    #[test]
    fn posture_does_not_disturb_tasks() {
        let model = humanoid::reference().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let v = DVector::from_fn(model.n_dof(), |_, _| rng.random_range(-0.6..0.6));
            let q = model.integrate(&model.neutral_q(), &v, 1.0);
            let mut state = SimState::at_rest(&model, q.clone()).unwrap();
            state.qdot = DVector::from_fn(model.n_dof(), |_, _| rng.random_range(-1.0..1.0));
            let kin = Kinematics::new(&model, &q).unwrap();
            let frame = model.task_frame("r_hand").unwrap();
            let stack = kin.point_jacobian(frame.segment, &frame.local.translation.vector);
            let gains = PostureGains::uniform(&model, 20.0, 2.0);
            let q_ref = model.neutral_q();
            let raw = posture_raw(&model, &state, &q_ref, &gains);
            let tau = posture_torques(&model, &state, &q_ref, &gains, &stack).unwrap();
            let mass = mass_matrix_with(&kin);
            let acc = &stack * mass.cholesky().unwrap().solve(&tau);
            assert!(acc.norm() < 1e-8 * raw.norm(), "{} vs {}", acc.norm(), raw.norm());
        }
    }

    #[test]
    fn gravity_compensation_zeroes_root_and_balances() {
        let params = humanoid::HumanoidParams::new("reference", 1.8, 75.0);
        let model = humanoid::build(&params).unwrap();
        let q = humanoid::standing_q(&model, &params);
        let kin = Kinematics::new(&model, &q).unwrap();
        let supports: Vec<(usize, Vec3)> = ["l_sole", "r_sole"]
            .iter()
            .map(|n| {
                let f = model.task_frame(n).unwrap();
                (f.segment, f.local.translation.vector)
            })
            .collect();
        let g = Vec3::new(0.0, 0.0, -9.81);
        let tau = gravity_compensation(&kin, &g, &supports).unwrap();
        assert!(tau.rows(0, 6).amax() == 0.0);
        // the residual generalized force is a pure support wrench: no joint acceleration at rest
        let full = gravity_forces_with(&kin, &g);
        let residual = &full - &tau;
        let mut jc = DMatrix::zeros(12, model.n_dof());
        for (k, (seg, local)) in supports.iter().enumerate() {
            jc.view_mut((6 * k, 0), (6, model.n_dof())).copy_from(&kin.point_jacobian(*seg, local));
        }
        let f = jc.transpose().svd(true, true).solve(&residual, 1e-12).unwrap();
        assert!((jc.transpose() * f - residual).amax() < 1e-8);
    }

    fn morph(scale: f64) -> Morphology {
        Morphology {
            limbs: BTreeMap::from([("arm".to_string(), 0.6 * scale), ("torso".to_string(), 0.5 * scale)]),
            root_height: 0.9 * scale,
        }
    }

    #[test]
    fn retarget_identity_is_exact() {
        let limbs = BTreeMap::from([("r_hand".to_string(), vec!["arm".to_string(), "torso".to_string()])]);
        let t = TaskTarget::new("r_hand", Vec3::new(0.123456789, -0.3, 1.1));
        let out = retarget_targets(std::slice::from_ref(&t), &morph(1.0), &morph(1.0), &limbs).unwrap();
        assert_eq!(out[0], t);
    }

    #[test]
    fn retarget_half_size_halves_offsets() {
        let limbs = BTreeMap::from([("r_hand".to_string(), vec!["arm".to_string()])]);
        let t = TaskTarget::new("r_hand", Vec3::new(0.4, -0.2, 1.3));
        let out = retarget_targets(&[t], &morph(1.0), &morph(0.5), &limbs).unwrap();
        let actor_off = Vec3::new(0.4, -0.2, 1.3 - 0.9);
        let avatar_off = out[0].desired_position - Vec3::new(0.0, 0.0, 0.45);
        assert!((avatar_off - actor_off * 0.5).norm() < 1e-15);
    }

    #[test]
    fn retarget_missing_limb_is_config_error() {
        let limbs = BTreeMap::from([("r_hand".to_string(), vec!["leg".to_string()])]);
        let t = TaskTarget::new("r_hand", Vec3::zeros());
        assert!(matches!(
            retarget_targets(std::slice::from_ref(&t), &morph(1.0), &morph(0.5), &limbs),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            retarget_targets(&[t], &morph(1.0), &morph(0.5), &BTreeMap::new()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn control_step_leaves_root_unactuated() {
        let params = humanoid::HumanoidParams::new("reference", 1.8, 75.0);
        let model = humanoid::build(&params).unwrap();
        let q = humanoid::standing_q(&model, &params);
        let state = SimState::at_rest(&model, q.clone()).unwrap();
        let ctrl = Controller {
            targets: vec![TaskTarget::new("r_hand", Vec3::new(0.5, -0.2, 1.2))],
            guides: vec![],
            q_ref: q,
            posture: PostureGains::uniform(&model, 20.0, 2.0),
            joint_damping: DVector::zeros(model.n_dof()),
            gravity: Vec3::new(0.0, 0.0, -9.81),
            gravity_compensation: true,
            supports: vec![],
            ellipse: None,
        };
        let out = control_step(&model, &state, &ctrl, true).unwrap();
        assert!(out.torques.rows(0, 6).iter().all(|x| *x == 0.0));
        assert!(out.damping.rows(0, 6).iter().all(|x| *x == 0.0));
        assert!(out.balance.is_none());
        assert!(out.damping.clone().symmetric_eigenvalues().min() > -1e-9);
    }
}

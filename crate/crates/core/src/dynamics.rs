//! Equations of motion and constrained time stepping.
//!
//! `M(q) v' + c(q, v) = tau + J^T lambda` is discretized with semi-implicit
//! Euler at the velocity level. Joint damping is integrated implicitly.
//! Unilateral rows (contacts, joint limits, balance) become one LCP in the
//! row impulses; bilateral anchor rows are eliminated beforehand through a
//! Schur complement so the LCP operator stays symmetric positive
//! semidefinite.
//!
//! Spatial quantities are 6-vectors ordered (angular; linear), expressed in
//! the world frame about the world origin.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Unit, Vector6};
use serde::{Deserialize, Serialize};

use crate::balance::BalanceConstraintRow;
use crate::error::{Error, Result};
use crate::lcp::{solve_lcp, LcpMethod, LcpOptions, LcpProblem, LcpSolution};
use crate::math::{planar_basis, quat_log, skew, Vec3};
use crate::model::{AvatarModel, JointKind, Kinematics, SimState};

pub const STANDARD_GRAVITY: f64 = 9.81;

fn crm(v: &Vector6<f64>, x: &Vector6<f64>) -> Vector6<f64> {
    let (w, lin) = (v.fixed_rows::<3>(0), v.fixed_rows::<3>(3));
    let (xw, xl) = (x.fixed_rows::<3>(0), x.fixed_rows::<3>(3));
    let a = w.cross(&xw);
    let b = w.cross(&xl) + lin.cross(&xw);
    Vector6::new(a.x, a.y, a.z, b.x, b.y, b.z)
}

fn crf(v: &Vector6<f64>, f: &Vector6<f64>) -> Vector6<f64> {
    let (w, lin) = (v.fixed_rows::<3>(0), v.fixed_rows::<3>(3));
    let (n, fl) = (f.fixed_rows::<3>(0), f.fixed_rows::<3>(3));
    let a = w.cross(&n) + lin.cross(&fl);
    let b = w.cross(&fl);
    Vector6::new(a.x, a.y, a.z, b.x, b.y, b.z)
}

/// Spatial inertia of segment `i` about the world origin.
fn spatial_inertia(kin: &Kinematics<'_>, i: usize) -> Matrix6<f64> {
    let seg = &kin.model().segments()[i];
    let mut out = Matrix6::zeros();
    if seg.mass == 0.0 && seg.inertia == Matrix3::zeros() {
        return out;
    }
    let rot = kin.transform(i).rotation.to_rotation_matrix();
    let ic = rot.matrix() * seg.inertia * rot.matrix().transpose();
    let c = skew(&kin.segment_com(i));
    let m = seg.mass;
    out.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(ic + c * c.transpose() * m));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(c * m));
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(c.transpose() * m));
    out.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() * m));
    out
}

/// Joint-space inertia matrix by the composite-rigid-body algorithm.
pub fn mass_matrix(model: &AvatarModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(mass_matrix_with(&Kinematics::new(model, q)?))
}

pub fn mass_matrix_with(kin: &Kinematics<'_>) -> DMatrix<f64> {
    let model = kin.model();
    let n_seg = model.segments().len();
    let mut composite: Vec<Matrix6<f64>> = (0..n_seg).map(|i| spatial_inertia(kin, i)).collect();
    for i in (1..n_seg).rev() {
        if let Some(p) = model.segments()[i].parent {
            let ci = composite[i];
            composite[p] += ci;
        }
    }
    let subspaces: Vec<DMatrix<f64>> = (0..n_seg).map(|j| kin.motion_subspace(j)).collect();
    let mut m = DMatrix::zeros(model.n_dof(), model.n_dof());
    for i in 0..n_seg {
        let ji = &model.joints()[i];
        let di = ji.kind.dof();
        if di == 0 {
            continue;
        }
        let ic = DMatrix::from_column_slice(6, 6, composite[i].as_slice());
        let f = &ic * &subspaces[i];
        let oi = ji.dof_offset;
        m.view_mut((oi, oi), (di, di))
            .copy_from(&(subspaces[i].transpose() * &f));
        let mut j = model.segments()[i].parent;
        while let Some(k) = j {
            let jk = &model.joints()[k];
            let dk = jk.kind.dof();
            if dk > 0 {
                let block = subspaces[k].transpose() * &f;
                let ok = jk.dof_offset;
                m.view_mut((ok, oi), (dk, di)).copy_from(&block);
                m.view_mut((oi, ok), (di, dk)).copy_from(&block.transpose());
            }
            j = model.segments()[k].parent;
        }
    }
    m
}

/// Coriolis, centrifugal and gravity generalized forces `c(q, v)` by the
/// recursive Newton-Euler algorithm with zero joint acceleration.
pub fn bias_forces(
    model: &AvatarModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    gravity: &Vec3,
) -> Result<DVector<f64>> {
    model.check_v(qdot)?;
    Ok(bias_forces_with(&Kinematics::new(model, q)?, qdot, gravity))
}

pub fn bias_forces_with(kin: &Kinematics<'_>, qdot: &DVector<f64>, gravity: &Vec3) -> DVector<f64> {
    let model = kin.model();
    let n_seg = model.segments().len();
    let mut vel = vec![Vector6::zeros(); n_seg];
    let mut acc = vec![Vector6::zeros(); n_seg];
    let mut force = vec![Vector6::zeros(); n_seg];
    let base_acc = Vector6::new(0.0, 0.0, 0.0, -gravity.x, -gravity.y, -gravity.z);
    let subspaces: Vec<DMatrix<f64>> = (0..n_seg).map(|j| kin.motion_subspace(j)).collect();
    for i in 0..n_seg {
        let joint = &model.joints()[i];
        let (vp, ap) = match model.segments()[i].parent {
            Some(p) => (vel[p], acc[p]),
            None => (Vector6::zeros(), base_acc),
        };
        let dof = joint.kind.dof();
        let qd = qdot.rows(joint.dof_offset, dof);
        let vj: Vector6<f64> = if dof == 0 {
            Vector6::zeros()
        } else {
            Vector6::from_column_slice((&subspaces[i] * qd).as_slice())
        };
        let vi = vp + vj;
        // Only motion axes carried by the body contribute a velocity-product
        // term; the translational axes of a floating root are world-fixed.
        let moving = match joint.kind {
            JointKind::Free6 => {
                let s_ang = subspaces[i].columns(3, 3);
                Vector6::from_column_slice((s_ang * qdot.rows(joint.dof_offset + 3, 3)).as_slice())
            }
            _ => vj,
        };
        let ai = ap + crm(&vi, &moving);
        let inertia = spatial_inertia(kin, i);
        vel[i] = vi;
        acc[i] = ai;
        force[i] = inertia * ai + crf(&vi, &(inertia * vi));
    }
    let mut tau = DVector::zeros(model.n_dof());
    for i in (0..n_seg).rev() {
        let joint = &model.joints()[i];
        let dof = joint.kind.dof();
        if dof > 0 {
            let f = DVector::from_column_slice(force[i].as_slice());
            tau.rows_mut(joint.dof_offset, dof)
                .copy_from(&(subspaces[i].transpose() * f));
        }
        if let Some(p) = model.segments()[i].parent {
            let fi = force[i];
            force[p] += fi;
        }
    }
    tau
}

/// Generalized gravity forces `g(q)` (the bias at zero velocity).
pub fn gravity_forces_with(kin: &Kinematics<'_>, gravity: &Vec3) -> DVector<f64> {
    bias_forces_with(kin, &DVector::zeros(kin.model().n_dof()), gravity)
}

/// Kinetic plus gravitational potential energy, with zero potential at the
/// world origin.
pub fn mechanical_energy(kin: &Kinematics<'_>, qdot: &DVector<f64>, gravity: &Vec3) -> f64 {
    let m = mass_matrix_with(kin);
    let kinetic = 0.5 * qdot.dot(&(&m * qdot));
    let potential: f64 = kin
        .model()
        .segments()
        .iter()
        .enumerate()
        .map(|(i, s)| -s.mass * gravity.dot(&kin.segment_com(i)))
        .sum();
    kinetic + potential
}

/// Rectangular bounds of a plane, in the plane's own planar frame relative
/// to its `point`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlaneExtent {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentPlane {
    pub name: String,
    pub point: Vec3,
    pub normal: Unit<Vec3>,
    pub extent: Option<PlaneExtent>,
    /// Slab thickness below the surface; points deeper than this are
    /// considered past the obstacle rather than inside it.
    pub thickness: Option<f64>,
}

impl EnvironmentPlane {
    pub fn new(name: impl Into<String>, point: Vec3, normal: Vec3) -> Result<Self> {
        if !(normal.norm() > 0.0) || !normal.iter().all(|x| x.is_finite()) {
            return Err(Error::arg("plane normal must be a non-zero finite vector"));
        }
        Ok(Self {
            name: name.into(),
            point,
            normal: Unit::new_normalize(normal),
            extent: None,
            thickness: None,
        })
    }

    pub fn floor() -> Self {
        Self::new("floor", Vec3::zeros(), Vec3::z()).expect("unit normal")
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.point))
    }

    /// Whether `p` projects inside the plane's extent (always, if unbounded).
    pub fn covers(&self, p: &Vec3) -> bool {
        let Some(ext) = &self.extent else {
            return true;
        };
        let (e1, e2) = planar_basis(&self.normal);
        let r = p - self.point;
        let (u, w) = (e1.dot(&r), e2.dot(&r));
        u >= ext.min[0] && u <= ext.max[0] && w >= ext.min[1] && w <= ext.max[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Contact {
    pub segment: usize,
    pub local_point: Vec3,
    pub plane: usize,
    /// Signed distance, positive when separated.
    pub gap: f64,
    pub normal: Unit<Vec3>,
}

/// Every (collision point, plane) pair closer than `activation`.
pub fn detect_contacts(
    model: &AvatarModel,
    q: &DVector<f64>,
    planes: &[EnvironmentPlane],
    activation: f64,
) -> Result<Vec<Contact>> {
    Ok(detect_contacts_with(&Kinematics::new(model, q)?, planes, activation))
}

pub fn detect_contacts_with(
    kin: &Kinematics<'_>,
    planes: &[EnvironmentPlane],
    activation: f64,
) -> Vec<Contact> {
    let mut out = Vec::new();
    for (si, seg) in kin.model().segments().iter().enumerate() {
        for local in &seg.collision_points {
            let p = kin.point(si, local);
            for (pi, plane) in planes.iter().enumerate() {
                let gap = plane.signed_distance(&p);
                if gap >= activation || !plane.covers(&p) {
                    continue;
                }
                if plane.thickness.is_some_and(|t| gap < -t) {
                    continue;
                }
                out.push(Contact {
                    segment: si,
                    local_point: *local,
                    plane: pi,
                    gap,
                    normal: plane.normal,
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Balance,
    JointLimitLower { dof: usize },
    JointLimitUpper { dof: usize },
    /// Index into the contact list the system was built from.
    Contact { contact: usize },
}

/// Stacked unilateral rows `J v >= ...` with their current values.
#[derive(Clone, Debug, PartialEq)]
pub struct UnilateralSystem {
    pub rows: DMatrix<f64>,
    pub gaps: DVector<f64>,
    pub kinds: Vec<RowKind>,
    /// Clearance each row should keep after the step (non-negative).
    pub clearances: DVector<f64>,
}

impl UnilateralSystem {
    pub fn empty(n_dof: usize) -> Self {
        Self {
            rows: DMatrix::zeros(0, n_dof),
            gaps: DVector::zeros(0),
            kinds: vec![],
            clearances: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn push(&mut self, row: &DVector<f64>, gap: f64, kind: RowKind, clearance: f64) {
        let k = self.len();
        let n = self.rows.ncols();
        assert_eq!(row.len(), n, "row length must equal n_dof");
        self.rows = std::mem::replace(&mut self.rows, DMatrix::zeros(0, 0)).insert_row(k, 0.0);
        self.rows.row_mut(k).copy_from(&row.transpose());
        self.gaps = std::mem::replace(&mut self.gaps, DVector::zeros(0)).push(gap);
        self.clearances = std::mem::replace(&mut self.clearances, DVector::zeros(0)).push(clearance);
        self.kinds.push(kind);
    }

    pub fn extend(&mut self, other: UnilateralSystem) {
        for i in 0..other.len() {
            self.push(
                &other.rows.row(i).transpose(),
                other.gaps[i],
                other.kinds[i],
                other.clearances[i],
            );
        }
    }
}

/// Rows `+e_i` (lower) and `-e_i` (upper) for every limited revolute
/// coordinate within `margin` of a bound.
pub fn joint_limit_rows(model: &AvatarModel, q: &DVector<f64>, margin: f64) -> Result<UnilateralSystem> {
    model.check_q(q)?;
    let mut sys = UnilateralSystem::empty(model.n_dof());
    for joint in model.joints() {
        let JointKind::Revolute { limits: Some(lim), .. } = &joint.kind else {
            continue;
        };
        let x = q[joint.q_offset];
        let dof = joint.dof_offset;
        let mut row = DVector::zeros(model.n_dof());
        if x - lim.lower < margin {
            row[dof] = 1.0;
            sys.push(&row, x - lim.lower, RowKind::JointLimitLower { dof }, 0.0);
        }
        if lim.upper - x < margin {
            row[dof] = -1.0;
            sys.push(&row, lim.upper - x, RowKind::JointLimitUpper { dof }, 0.0);
        }
    }
    Ok(sys)
}

/// Unilateral rows for a list of contacts.
pub fn contact_rows(kin: &Kinematics<'_>, contacts: &[Contact]) -> UnilateralSystem {
    let mut sys = UnilateralSystem::empty(kin.model().n_dof());
    for (ci, c) in contacts.iter().enumerate() {
        let lin = kin.linear_jacobian(c.segment, &c.local_point);
        let row = lin.transpose() * c.normal.into_inner();
        sys.push(&row, c.gap, RowKind::Contact { contact: ci }, 0.0);
    }
    sys
}

/// Holds a segment's reference point in place along the ground plane and
/// its heading about the up axis. Normal motion and tilting stay free.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub segment: usize,
    pub local_point: Vec3,
    pub target: Vec3,
    pub target_rotation: nalgebra::UnitQuaternion<f64>,
}

impl Anchor {
    /// Anchors `segment` at its current placement.
    pub fn at_current(kin: &Kinematics<'_>, segment: usize, local_point: Vec3) -> Self {
        Self {
            segment,
            local_point,
            target: kin.point(segment, &local_point),
            target_rotation: kin.transform(segment).rotation,
        }
    }
}

/// Bilateral rows `A v = -beta/h * err`.
#[derive(Clone, Debug, PartialEq)]
pub struct BilateralSystem {
    pub rows: DMatrix<f64>,
    pub errors: DVector<f64>,
}

pub fn anchor_rows(kin: &Kinematics<'_>, anchors: &[Anchor], up: &Unit<Vec3>) -> BilateralSystem {
    let n = kin.model().n_dof();
    let mut rows = DMatrix::zeros(3 * anchors.len(), n);
    let mut errors = DVector::zeros(3 * anchors.len());
    let (e1, e2) = planar_basis(up);
    for (k, a) in anchors.iter().enumerate() {
        let jac = kin.point_jacobian(a.segment, &a.local_point);
        let lin = jac.rows(3, 3);
        let ang = jac.rows(0, 3);
        let offset = kin.point(a.segment, &a.local_point) - a.target;
        let rot_err = quat_log(&(kin.transform(a.segment).rotation * a.target_rotation.inverse()));
        for (r, (dir, e)) in [(e1, offset.dot(&e1)), (e2, offset.dot(&e2))].into_iter().enumerate() {
            rows.row_mut(3 * k + r).copy_from(&(dir.transpose() * lin));
            errors[3 * k + r] = e;
        }
        rows.row_mut(3 * k + 2)
            .copy_from(&(up.into_inner().transpose() * ang));
        errors[3 * k + 2] = rot_err.dot(up);
    }
    BilateralSystem { rows, errors }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub h: f64,
    pub gravity: Vec3,
    /// Fraction of a constraint violation corrected per step.
    pub baumgarte: f64,
    /// Extra slowing of the approach to the balance boundary (0 = none).
    pub balance_stabilization: f64,
    pub contact_activation: f64,
    pub limit_activation: f64,
    /// Sanity clamp on root linear speed, m/s; joint rates use ten times
    /// this value in rad/s.
    pub velocity_cap: f64,
    /// Diagonal regularization of the LCP operator, relative to its largest
    /// diagonal entry.
    pub regularization: f64,
    pub lcp: LcpOptions,
}

impl Default for StepParams {
    fn default() -> Self {
        Self {
            h: 1e-3,
            gravity: Vec3::new(0.0, 0.0, -STANDARD_GRAVITY),
            baumgarte: 0.2,
            balance_stabilization: 0.0,
            contact_activation: 5e-3,
            limit_activation: 0.05,
            velocity_cap: 10.0,
            regularization: 1e-10,
            lcp: LcpOptions::default(),
        }
    }
}

impl StepParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h <= 0.02) {
            return Err(Error::validation("timestep", format!("must lie in (0, 0.02], got {}", self.h)));
        }
        if !(0.0..=1.0).contains(&self.baumgarte) {
            return Err(Error::validation("baumgarte", "must lie in [0, 1]"));
        }
        if !(self.balance_stabilization >= 0.0) {
            return Err(Error::validation("balance.stabilization", "must be >= 0"));
        }
        Ok(())
    }

    fn effective_gap(&self, kind: RowKind, gap: f64, clearance: f64) -> f64 {
        let g = gap - clearance;
        if g < 0.0 {
            self.baumgarte * g
        } else if kind == RowKind::Balance {
            g / (1.0 + self.balance_stabilization)
        } else {
            g
        }
    }
}

/// A velocity-level LCP together with what is needed to map its solution
/// back to post-step velocities.
#[derive(Clone, Debug)]
pub struct LcpAssembly {
    pub problem: LcpProblem,
    /// Post-step velocity with zero unilateral impulse (bilateral rows
    /// already satisfied).
    pub v_free: DVector<f64>,
    /// `n_dof x k`: velocity change per unit impulse on each row.
    pub response: DMatrix<f64>,
}

impl LcpAssembly {
    pub fn velocity(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.v_free + &self.response * z
    }
}

/// Builds the step LCP.
///
/// `forces` are the explicit generalized forces `tau - c(q, v)`; `damping` is
/// a symmetric positive semidefinite matrix whose force `-D v` is integrated
/// implicitly.
pub fn assemble_lcp(
    qdot: &DVector<f64>,
    mass: &DMatrix<f64>,
    forces: &DVector<f64>,
    damping: &DMatrix<f64>,
    unilateral: &UnilateralSystem,
    bilateral: Option<&BilateralSystem>,
    params: &StepParams,
) -> Result<LcpAssembly> {
    let h = params.h;
    let n = mass.nrows();
    if damping.nrows() != n || damping.ncols() != n {
        return Err(Error::arg("damping matrix must be n_dof x n_dof"));
    }
    let eff = mass + damping * h;
    let chol = eff
        .cholesky()
        .ok_or_else(|| Error::DegenerateModel("mass matrix is not positive definite".into()))?;
    let rhs = forces - damping * qdot;
    let mut v_free = qdot + chol.solve(&rhs) * h;
    let mut response = chol.solve(&unilateral.rows.transpose());

    if let Some(bi) = bilateral.filter(|b| b.rows.nrows() > 0) {
        let wa = chol.solve(&bi.rows.transpose());
        let mut schur = &bi.rows * &wa;
        let scale = schur.diagonal().amax().max(f64::MIN_POSITIVE);
        for i in 0..schur.nrows() {
            schur[(i, i)] += 1e-12 * scale;
        }
        let s = schur
            .cholesky()
            .ok_or_else(|| Error::DegenerateModel("anchor rows are degenerate".into()))?;
        let target = -&bi.errors * (params.baumgarte / h);
        let mu = s.solve(&(target - &bi.rows * &v_free));
        v_free += &wa * mu;
        let coupling = s.solve(&(&bi.rows * &response));
        response -= &wa * coupling;
    }

    let k = unilateral.len();
    let mut m = &unilateral.rows * &response;
    m = (&m + m.transpose()) * 0.5;
    let reg = params.regularization * m.diagonal().amax().max(f64::MIN_POSITIVE);
    for i in 0..k {
        m[(i, i)] += reg;
    }
    let mut q_hat = &unilateral.rows * &v_free;
    for i in 0..k {
        q_hat[i] += params.effective_gap(unilateral.kinds[i], unilateral.gaps[i], unilateral.clearances[i]) / h;
    }
    Ok(LcpAssembly {
        problem: LcpProblem::new(m, q_hat)?,
        v_free,
        response,
    })
}

/// Inputs of one step besides the state.
#[derive(Clone, Debug)]
pub struct StepInput<'a> {
    pub torques: &'a DVector<f64>,
    pub damping: &'a DMatrix<f64>,
    pub balance: Option<&'a BalanceConstraintRow>,
    pub anchors: &'a [Anchor],
}

/// Per-step constraint telemetry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub contacts: Vec<Contact>,
    /// Normal impulse per contact, N s.
    pub contact_impulses: Vec<f64>,
    /// Sum of contact impulses projected on the up axis, N s.
    pub vertical_impulse: f64,
    pub active_limits: usize,
    /// Balance row impulse, or zero when the row is absent.
    pub balance_impulse: f64,
    pub lcp_size: usize,
    pub lcp_residual: f64,
    pub lcp_iterations: usize,
    pub velocity_clamped: bool,
}

/// One semi-implicit step: assemble, solve, integrate.
pub fn step(
    model: &AvatarModel,
    state: &SimState,
    input: &StepInput<'_>,
    planes: &[EnvironmentPlane],
    params: &StepParams,
) -> Result<(SimState, StepReport)> {
    state.validate(model)?;
    model.check_v(input.torques)?;
    if input.damping.nrows() != model.n_dof() || input.damping.ncols() != model.n_dof() {
        return Err(Error::arg("damping matrix must be n_dof x n_dof"));
    }
    let kin = Kinematics::new(model, &state.q)?;
    let mass = mass_matrix_with(&kin);
    let bias = bias_forces_with(&kin, &state.qdot, &params.gravity);
    let forces = input.torques - bias;

    let contacts = detect_contacts_with(&kin, planes, params.contact_activation);
    let mut sys = UnilateralSystem::empty(model.n_dof());
    if let Some(b) = input.balance {
        let clearance = 2.0 * params.h * params.h * b.rate_curvature;
        sys.push(&b.jacobian, b.delta, RowKind::Balance, clearance);
    }
    sys.extend(joint_limit_rows(model, &state.q, params.limit_activation)?);
    sys.extend(contact_rows(&kin, &contacts));

    let up = Unit::new_normalize(-params.gravity);
    let bilateral = anchor_rows(&kin, input.anchors, &up);
    let asm = assemble_lcp(
        &state.qdot,
        &mass,
        &forces,
        input.damping,
        &sys,
        Some(&bilateral),
        params,
    )?;
    let sol = solve_constraints(&asm.problem, &params.lcp)?;
    let mut v = asm.velocity(&sol.z);

    let mut clamped = false;
    let cap = params.velocity_cap;
    for (i, x) in v.iter_mut().enumerate() {
        let limit = if model.is_floating() && i < 3 { cap } else { 10.0 * cap };
        if x.abs() > limit {
            *x = x.signum() * limit;
            clamped = true;
        }
    }
    if clamped {
        log::debug!("t = {:.4}: velocity clamped to the sanity cap", state.t);
    }

    let mut q = model.integrate(&state.q, &v, params.h);
    model.normalize_q(&mut q);
    if q.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Lcp("step produced non-finite state".into()));
    }

    let mut report = StepReport {
        contact_impulses: vec![0.0; contacts.len()],
        lcp_size: sys.len(),
        lcp_residual: sol.residual,
        lcp_iterations: sol.iterations,
        velocity_clamped: clamped,
        ..Default::default()
    };
    for (r, kind) in sys.kinds.iter().enumerate() {
        match *kind {
            RowKind::Balance => report.balance_impulse = sol.z[r],
            RowKind::JointLimitLower { .. } | RowKind::JointLimitUpper { .. } => {
                if sol.z[r] > 0.0 {
                    report.active_limits += 1;
                }
            }
            RowKind::Contact { contact } => {
                report.contact_impulses[contact] = sol.z[r];
                report.vertical_impulse += sol.z[r] * contacts[contact].normal.dot(&up);
            }
        }
    }
    report.contacts = contacts;
    Ok((
        SimState {
            q,
            qdot: v,
            t: state.t + params.h,
        },
        report,
    ))
}

/// Solves with the configured method, falling back to Lemke when the
/// iterative solver does not reach tolerance.
pub fn solve_constraints(p: &LcpProblem, opts: &LcpOptions) -> Result<LcpSolution> {
    let first = solve_lcp(p, opts);
    if first.is_solved() {
        return Ok(first);
    }
    if opts.method != LcpMethod::Lemke {
        let second = solve_lcp(p, &LcpOptions { method: LcpMethod::Lemke, ..*opts });
        if second.is_solved() {
            return Ok(second);
        }
    }
    Err(Error::Lcp(format!(
        "constraint LCP of size {} not solved: {} (residual {:.3e})",
        p.size(),
        first.status,
        first.residual
    )))
}

//! Self-tests run by `balsim check`: analytic Jacobians against central
//! differences, and the LCP solver against exhaustive enumeration.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::balance::{balance_distance, balance_jacobian_with};
use crate::com::{com_jacobian_with, com_position_with};
use crate::error::Result;
use crate::harness::Simulation;
use crate::lcp::{enumerate_lcp_oracle, solve_lcp, LcpOptions, LcpProblem};
use crate::math::{quat_log, Quat, Vec3};
use crate::model::{AvatarModel, JointKind, Kinematics};

pub const FD_STEP: f64 = 1e-6;
pub const JACOBIAN_TOL: f64 = 1e-5;
pub const LCP_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "[{}] {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail)?;
        }
        Ok(())
    }
}

/// A configuration with joint angles drawn inside their limits (or within
/// ±1 rad), random root orientation and position.
pub fn random_configuration(model: &AvatarModel, rng: &mut impl Rng) -> DVector<f64> {
    let mut q = model.neutral_q();
    for j in model.joints() {
        let o = j.q_offset;
        match &j.kind {
            JointKind::Revolute { limits, .. } => {
                let (lo, hi) = limits.as_ref().map_or((-1.0, 1.0), |l| (l.lower, l.upper));
                q[o] = rng.random_range(lo..=hi);
            }
            JointKind::Spherical => {
                let r = random_rotation(rng, 0.8);
                q.fixed_rows_mut::<4>(o).copy_from(&nalgebra::Vector4::new(r.w, r.i, r.j, r.k));
            }
            JointKind::Free6 => {
                for k in 0..3 {
                    q[o + k] = rng.random_range(-1.0..1.0);
                }
                let r = random_rotation(rng, std::f64::consts::PI);
                q.fixed_rows_mut::<4>(o + 3).copy_from(&nalgebra::Vector4::new(r.w, r.i, r.j, r.k));
            }
            JointKind::Fixed => {}
        }
    }
    q
}

fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Quat {
    let axis = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-3 { Vec3::z() } else { axis.normalize() };
    Quat::from_scaled_axis(axis * rng.random_range(0.0..max_angle))
}

fn relative_error(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    (analytic - fd).norm() / fd.norm().max(analytic.norm()).max(1e-12)
}

/// Central difference of a point and its frame orientation along every
/// velocity coordinate, stacked (angular; linear) like the analytic body
/// Jacobian.
pub fn fd_point_jacobian(model: &AvatarModel, q: &DVector<f64>, segment: usize, local: &Vec3) -> Result<DMatrix<f64>> {
    let n = model.n_dof();
    let mut out = DMatrix::zeros(6, n);
    for k in 0..n {
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        let qp = model.integrate(q, &e, FD_STEP);
        let qm = model.integrate(q, &e, -FD_STEP);
        let kp = Kinematics::new(model, &qp)?;
        let km = Kinematics::new(model, &qm)?;
        let w = quat_log(&(kp.transform(segment).rotation * km.transform(segment).rotation.inverse()));
        let v = kp.point(segment, local) - km.point(segment, local);
        for r in 0..3 {
            out[(r, k)] = w[r] / (2.0 * FD_STEP);
            out[(r + 3, k)] = v[r] / (2.0 * FD_STEP);
        }
    }
    Ok(out)
}

pub fn fd_gradient(
    model: &AvatarModel,
    q: &DVector<f64>,
    mut f: impl FnMut(&Kinematics<'_>) -> Result<DVector<f64>>,
) -> Result<DMatrix<f64>> {
    let n = model.n_dof();
    let mut cols = Vec::with_capacity(n);
    for k in 0..n {
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        let fp = f(&Kinematics::new(model, &model.integrate(q, &e, FD_STEP))?)?;
        let fm = f(&Kinematics::new(model, &model.integrate(q, &e, -FD_STEP))?)?;
        cols.push((fp - fm) / (2.0 * FD_STEP));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Worst relative errors of body, COM and balance Jacobians over `samples`
/// random configurations.
pub fn jacobian_check(sim: &Simulation, samples: usize, seed: u64) -> Result<[f64; 3]> {
    let model = sim.model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..samples {
        let q = random_configuration(model, &mut rng);
        let kin = Kinematics::new(model, &q)?;
        let seg = rng.random_range(0..model.segments().len());
        let local = model.segments()[seg].local_com;
        let j = kin.point_jacobian(seg, &local);
        worst[0] = worst[0].max(relative_error(&j, &fd_point_jacobian(model, &q, seg, &local)?));

        let jc = com_jacobian_with(&kin)?;
        let fd = fd_gradient(model, &q, |k| Ok(DVector::from_column_slice(com_position_with(k)?.as_slice())))?;
        worst[1] = worst[1].max(relative_error(&jc, &fd));

        if let Some(e) = sim.ellipse() {
            let jb = DMatrix::from_row_slice(1, model.n_dof(), balance_jacobian_with(&kin, e)?.as_slice());
            let fd = fd_gradient(model, &q, |k| Ok(DVector::from_element(1, balance_distance(e, &com_position_with(k)?))))?;
            worst[2] = worst[2].max(relative_error(&jb, &fd));
        }
    }
    Ok(worst)
}

/// Random SPD problem `M = A^T A + 0.1 I`, `k` in 1..=8.
pub fn random_lcp(rng: &mut impl Rng) -> LcpProblem {
    let k = rng.random_range(1..=8);
    let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    let m = a.transpose() * &a + DMatrix::identity(k, k) * 0.1;
    let q = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
    LcpProblem::new(m, q).expect("square by construction")
}

/// Largest solver/oracle disagreement and largest solver residual.
pub fn lcp_check(problems: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = LcpOptions::default();
    let (mut diff, mut resid) = (0.0f64, 0.0f64);
    for _ in 0..problems {
        let p = random_lcp(&mut rng);
        let s = solve_lcp(&p, &opts);
        let o = enumerate_lcp_oracle(&p);
        diff = diff.max((&s.z - &o.z).amax());
        resid = resid.max(s.residual);
        if !s.is_solved() {
            resid = f64::INFINITY;
        }
    }
    (diff, resid)
}

/// Runs every self-test against a scenario's avatar and support region.
pub fn self_check(sim: &Simulation, samples: usize, problems: usize) -> Result<CheckReport> {
    let seed = sim.scenario().file.seed;
    let worst = jacobian_check(sim, samples, seed)?;
    let mut report = CheckReport::default();
    for (name, err) in ["body jacobian", "com jacobian", "balance jacobian"].iter().zip(worst) {
        report.lines.push(CheckLine {
            name: name.to_string(),
            passed: err < JACOBIAN_TOL,
            detail: format!("max relative error {err:.3e} over {samples} configurations (tol {JACOBIAN_TOL:e})"),
        });
    }
    let (diff, resid) = lcp_check(problems, seed);
    report.lines.push(CheckLine {
        name: "lcp vs enumeration".into(),
        passed: diff <= LCP_TOL && resid <= LCP_TOL,
        detail: format!("max |z - z_oracle| {diff:.3e}, max residual {resid:.3e} over {problems} problems"),
    });
    Ok(report)
}

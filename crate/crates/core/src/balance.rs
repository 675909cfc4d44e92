//! Static balance as a unilateral constraint.
//!
//! The support region is an ellipse on the ground plane. The balance
//! distance
//!
//! ```text
//! delta = d^2 - |P (x_com - x_c)|_Q^2
//! ```
//!
//! is positive while the vertical projection of the center of mass lies
//! strictly inside the ellipse, zero on its boundary and negative outside.
//! Its gradient with respect to the generalized velocities is
//!
//! ```text
//! -(x_com - x_c)^T P^T (Q + Q^T) P J_com
//! ```
//!
//! with the support held fixed while differentiating.

use nalgebra::{DVector, Matrix2, Matrix2x3, Unit, Vector2};
use serde::{Deserialize, Serialize};

use crate::com::{com_jacobian_with, com_position_with};
use crate::error::{Error, Result};
use crate::math::{planar_basis, Vec3};
use crate::model::{AvatarModel, Kinematics, SimState};

/// Elliptical approximation of the support polygon.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportEllipse {
    /// Region center, on the ground plane.
    pub center: Vec3,
    /// 2x2 symmetric positive definite metric in the planar frame.
    pub metric: Matrix2<f64>,
    /// Limit distance; the boundary is `v^T Q v = d^2`.
    pub d: f64,
    pub up: Unit<Vec3>,
    /// Planar frame: rows are the two ground-plane axes.
    projection: Matrix2x3<f64>,
}

/// Explicit ellipse as written in scenario files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EllipseSpec {
    pub center: [f64; 3],
    /// Semi-axis lengths, meters.
    pub axes: [f64; 2],
    /// Angle of the first semi-axis from the first planar axis, radians.
    #[serde(default)]
    pub angle: f64,
}

fn projection_for(up: &Unit<Vec3>) -> Matrix2x3<f64> {
    let (e1, e2) = planar_basis(up);
    Matrix2x3::from_rows(&[e1.transpose(), e2.transpose()])
}

impl SupportEllipse {
    /// Builds an ellipse from a raw metric. `metric` is symmetrized.
    pub fn new(center: Vec3, metric: Matrix2<f64>, d: f64, up: Vec3) -> Result<Self> {
        if !(up.norm() > 0.0) {
            return Err(Error::arg("up axis must be non-zero"));
        }
        let up = Unit::new_normalize(up);
        let metric = (metric + metric.transpose()) * 0.5;
        let e = Self {
            center,
            metric,
            d,
            projection: projection_for(&up),
            up,
        };
        e.validate()?;
        Ok(e)
    }

    /// Ellipse with semi-axes `axes` whose first axis makes `angle` with the
    /// first planar axis. Normalized so that `d` is the major semi-axis.
    pub fn from_axes(center: Vec3, axes: [f64; 2], angle: f64, up: Vec3) -> Result<Self> {
        let [a, b] = axes;
        if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::DegenerateSupport(format!(
                "ellipse semi-axes must be positive, got ({a}, {b})"
            )));
        }
        let d = a.max(b);
        let (s, c) = angle.sin_cos();
        let rot = Matrix2::new(c, -s, s, c);
        let diag = Matrix2::from_diagonal(&Vector2::new((d / a).powi(2), (d / b).powi(2)));
        Self::new(center, rot * diag * rot.transpose(), d, up)
    }

    pub fn from_spec(spec: &EllipseSpec, up: Vec3) -> Result<Self> {
        Self::from_axes(Vec3::from(spec.center), spec.axes, spec.angle, up)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0) || !self.d.is_finite() {
            return Err(Error::DegenerateSupport(format!(
                "limit distance must be positive, got {}",
                self.d
            )));
        }
        if self.metric.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateSupport("metric has non-finite entries".into()));
        }
        let eig = self.metric.symmetric_eigenvalues();
        if eig.min() <= 0.0 {
            return Err(Error::DegenerateSupport("metric is not positive definite".into()));
        }
        Ok(())
    }

    /// The 2x3 vertical projection onto the planar frame.
    pub fn projection(&self) -> &Matrix2x3<f64> {
        &self.projection
    }

    /// Semi-axis lengths and the angle of the first one in the planar frame.
    pub fn axes(&self) -> ([f64; 2], f64) {
        let eig = self.metric.symmetric_eigen();
        let (i, j) = if eig.eigenvalues[0] <= eig.eigenvalues[1] {
            (0, 1)
        } else {
            (1, 0)
        };
        let major = eig.eigenvectors.column(i);
        let a = self.d / eig.eigenvalues[i].sqrt();
        let b = self.d / eig.eigenvalues[j].sqrt();
        let mut angle = major[1].atan2(major[0]);
        if angle > std::f64::consts::FRAC_PI_2 {
            angle -= std::f64::consts::PI;
        } else if angle <= -std::f64::consts::FRAC_PI_2 {
            angle += std::f64::consts::PI;
        }
        ([a, b], angle)
    }

    pub fn to_spec(&self) -> EllipseSpec {
        let (axes, angle) = self.axes();
        EllipseSpec {
            center: self.center.into(),
            axes,
            angle,
        }
    }

    pub fn planar_offset(&self, x: &Vec3) -> Vector2<f64> {
        self.projection * (x - self.center)
    }

    /// Point on the ground plane at planar coordinates `v` from the center.
    pub fn point_at(&self, v: &Vector2<f64>) -> Vec3 {
        self.center + self.projection.transpose() * v
    }
}

/// Fits the support ellipse to a set of contact points.
///
/// The center is the area centroid of the projected convex hull. The axes
/// come from the hull's principal frame (second moments of area; the planar
/// frame is used when the hull is isotropic) and span the hull's bounding
/// box in that frame, then are scaled by `safety` and, if needed, shrunk
/// further so the ellipse stays inside the hull.
pub fn fit_support_ellipse(points: &[Vec3], up: Vec3, safety: f64) -> Result<SupportEllipse> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::arg(format!("safety must lie in (0, 1], got {safety}")));
    }
    if points.len() < 3 {
        return Err(Error::DegenerateSupport(format!(
            "need at least 3 contact points, got {}",
            points.len()
        )));
    }
    if !(up.norm() > 0.0) {
        return Err(Error::arg("up axis must be non-zero"));
    }
    let up_unit = Unit::new_normalize(up);
    let proj = projection_for(&up_unit);
    let planar: Vec<Vector2<f64>> = points.iter().map(|p| proj * p).collect();
    let height = points.iter().map(|p| p.dot(&up_unit)).sum::<f64>() / points.len() as f64;

    let hull = convex_hull(&planar);
    let extent = planar
        .iter()
        .flat_map(|p| [p.x.abs(), p.y.abs()])
        .fold(1.0_f64, f64::max);
    let area = polygon_area(&hull);
    if hull.len() < 3 || area <= 1e-12 * extent * extent {
        return Err(Error::DegenerateSupport(
            "contact points are collinear after projection".into(),
        ));
    }
    let (centroid, second) = polygon_moments(&hull, area);

    let eig = second.symmetric_eigen();
    let (l0, l1) = (eig.eigenvalues[0], eig.eigenvalues[1]);
    let axes_frame = if (l0 - l1).abs() <= 1e-9 * (l0.abs() + l1.abs()) {
        Matrix2::identity()
    } else {
        let (i, j) = if l0 >= l1 { (0, 1) } else { (1, 0) };
        let mut u0: Vector2<f64> = eig.eigenvectors.column(i).into();
        if u0.x < 0.0 || (u0.x == 0.0 && u0.y < 0.0) {
            u0 = -u0;
        }
        let _ = j;
        Matrix2::from_columns(&[u0, Vector2::new(-u0.y, u0.x)])
    };

    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for p in &hull {
        let local = axes_frame.transpose() * (p - centroid);
        lo = lo.inf(&local);
        hi = hi.sup(&local);
    }
    let mut semi = (hi - lo) * 0.5 * safety;

    // keep the ellipse inside the hull
    let shape = axes_frame
        * Matrix2::from_diagonal(&Vector2::new(semi.x * semi.x, semi.y * semi.y))
        * axes_frame.transpose();
    let mut shrink = 1.0_f64;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let edge = b - a;
        let normal = Vector2::new(edge.y, -edge.x).normalize();
        let room = normal.dot(&(a - centroid));
        let reach = (normal.transpose() * shape * normal)[0].sqrt();
        if reach > room {
            shrink = shrink.min(room / reach);
        }
    }
    semi *= shrink;

    let angle = axes_frame[(1, 0)].atan2(axes_frame[(0, 0)]);
    let center = proj.transpose() * centroid + up_unit.into_inner() * height;
    SupportEllipse::from_axes(center, [semi.x, semi.y], angle, up)
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let mut lower: Vec<Vector2<f64>> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Vector2<f64>> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        twice += a.x * b.y - b.x * a.y;
    }
    0.5 * twice
}

/// Area centroid and central second-moment matrix of a CCW polygon.
fn polygon_moments(poly: &[Vector2<f64>], area: f64) -> (Vector2<f64>, Matrix2<f64>) {
    let mut c = Vector2::zeros();
    let (mut ixx, mut iyy, mut ixy) = (0.0, 0.0, 0.0);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let cr = a.x * b.y - b.x * a.y;
        c += (a + b) * cr;
        ixx += (a.x * a.x + a.x * b.x + b.x * b.x) * cr;
        iyy += (a.y * a.y + a.y * b.y + b.y * b.y) * cr;
        ixy += (a.x * b.y + 2.0 * a.x * a.y + 2.0 * b.x * b.y + b.x * a.y) * cr;
    }
    let c = c / (6.0 * area);
    let ixx = ixx / 12.0 - area * c.x * c.x;
    let iyy = iyy / 12.0 - area * c.y * c.y;
    let ixy = ixy / 24.0 - area * c.x * c.y;
    (c, Matrix2::new(ixx, ixy, ixy, iyy))
}

/// `d^2 - |P (x_com - x_c)|_Q^2`.
pub fn balance_distance(e: &SupportEllipse, x_com: &Vec3) -> f64 {
    let v = e.planar_offset(x_com);
    e.d * e.d - (v.transpose() * e.metric * v)[0]
}

/// Balance distance scaled by `d^2`; 1 at the center, 0 on the boundary.
pub fn normalized_distance(e: &SupportEllipse, delta: f64) -> f64 {
    delta / (e.d * e.d)
}

/// `sign(delta) sqrt(|delta|) / d`, the other reading of "multiples of d".
pub fn signed_root_distance(e: &SupportEllipse, delta: f64) -> f64 {
    delta.signum() * delta.abs().sqrt() / e.d
}

/// Row gradient of the balance distance with respect to the generalized velocities.
pub fn balance_jacobian(
    model: &AvatarModel,
    q: &DVector<f64>,
    e: &SupportEllipse,
) -> Result<DVector<f64>> {
    e.validate()?;
    let kin = Kinematics::new(model, q)?;
    balance_jacobian_with(&kin, e)
}

pub fn balance_jacobian_with(kin: &Kinematics<'_>, e: &SupportEllipse) -> Result<DVector<f64>> {
    let x_com = com_position_with(kin)?;
    let j_com = com_jacobian_with(kin)?;
    Ok(jacobian_from_parts(e, &x_com, &j_com))
}

fn jacobian_from_parts(e: &SupportEllipse, x_com: &Vec3, j_com: &nalgebra::DMatrix<f64>) -> DVector<f64> {
    let offset = x_com - e.center;
    let p = e.projection();
    let sym = e.metric + e.metric.transpose();
    // 1x3 row: -(x_com - x_c)^T P^T (Q + Q^T) P
    let lead = -(offset.transpose() * p.transpose() * sym * p);
    (lead * j_com).transpose()
}

/// The balance constraint for one instant: value and gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceConstraintRow {
    /// Current balance distance, m^2.
    pub delta: f64,
    /// Gradient of `delta` with respect to the generalized velocities.
    pub jacobian: DVector<f64>,
    /// `d^2` of the ellipse the row was built against.
    pub d_squared: f64,
    /// `|P v_com|_Q^2`, m^2/s^2: the second-order change of `delta` per
    /// unit time squared along the current velocity. Linearizing over a
    /// step of length `h` misses about `h^2` times this.
    pub rate_curvature: f64,
}

pub fn build_balance_row(
    model: &AvatarModel,
    state: &SimState,
    e: &SupportEllipse,
) -> Result<BalanceConstraintRow> {
    e.validate()?;
    state.validate(model)?;
    let kin = Kinematics::new(model, &state.q)?;
    build_balance_row_with(&kin, &state.qdot, e)
}

pub fn build_balance_row_with(
    kin: &Kinematics<'_>,
    qdot: &DVector<f64>,
    e: &SupportEllipse,
) -> Result<BalanceConstraintRow> {
    let x_com = com_position_with(kin)?;
    let j_com = com_jacobian_with(kin)?;
    let delta = balance_distance(e, &x_com);
    if !delta.is_finite() {
        return Err(Error::arg("balance distance is not finite"));
    }
    let u = e.projection() * (&j_com * qdot);
    Ok(BalanceConstraintRow {
        delta,
        jacobian: jacobian_from_parts(e, &x_com, &j_com),
        d_squared: e.d * e.d,
        rate_curvature: (u.transpose() * e.metric * u)[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(side: f64) -> Vec<Vec3> {
        let h = side / 2.0;
        vec![
            Vec3::new(-h, -h, 0.0),
            Vec3::new(h, -h, 0.0),
            Vec3::new(h, h, 0.0),
            Vec3::new(-h, h, 0.0),
        ]
    }

    #[test]
    fn square_gives_unit_circle() {
        let e = fit_support_ellipse(&square(2.0), Vec3::z(), 1.0).unwrap();
        assert!((e.d - 1.0).abs() < 1e-12);
        assert!((e.metric - Matrix2::identity()).norm() < 1e-12);
        assert!(e.center.norm() < 1e-12);
        assert!(balance_distance(&e, &Vec3::new(1.0, 0.0, 0.7)).abs() < 1e-12);
    }

    #[test]
    fn rectangle_semi_axes() {
        let pts = vec![
            Vec3::new(-1.0, -0.5, 0.0),
            Vec3::new(1.0, -0.5, 0.0),
            Vec3::new(1.0, 0.5, 0.0),
            Vec3::new(-1.0, 0.5, 0.0),
            Vec3::new(0.2, 0.1, 0.0),
        ];
        let e = fit_support_ellipse(&pts, Vec3::z(), 0.9).unwrap();
        let ([a, b], angle) = e.axes();
        assert!((a - 0.9).abs() < 1e-12 && (b - 0.45).abs() < 1e-12, "{a} {b}");
        assert!(angle.abs() < 1e-12);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(
            fit_support_ellipse(&pts, Vec3::z(), 0.9),
            Err(Error::DegenerateSupport(_))
        ));
        assert!(matches!(
            fit_support_ellipse(&pts[..2], Vec3::z(), 0.9),
            Err(Error::DegenerateSupport(_))
        ));
    }

    #[test]
    fn triangle_ellipse_stays_inside_hull() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let e = fit_support_ellipse(&pts, Vec3::z(), 1.0).unwrap();
        for k in 0..360 {
            let th = (k as f64).to_radians();
            let dir = Vector2::new(th.cos(), th.sin());
            // boundary point along dir
            let s = e.d / (dir.transpose() * e.metric * dir)[0].sqrt();
            let p = e.point_at(&(dir * s));
            assert!(p.x >= -1e-9 && p.y >= -1e-9 && p.x + p.y <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn distance_examples() {
        let e = SupportEllipse::new(Vec3::zeros(), Matrix2::identity(), 1.0, Vec3::z()).unwrap();
        assert!((balance_distance(&e, &Vec3::new(0.0, 0.0, 3.0)) - 1.0).abs() < 1e-15);
        assert!(balance_distance(&e, &Vec3::new(0.6, 0.8, 1.0)).abs() < 1e-15);
        assert!((balance_distance(&e, &Vec3::new(0.3, 0.4, 1.0)) - 0.75).abs() < 1e-15);
        assert!(balance_distance(&e, &Vec3::new(1.5, 0.0, 0.0)) < 0.0);
    }

    #[test]
    fn metric_is_symmetrized() {
        let e = SupportEllipse::new(Vec3::zeros(), Matrix2::new(1.0, 0.4, 0.0, 1.0), 1.0, Vec3::z())
            .unwrap();
        assert_eq!(e.metric[(0, 1)], e.metric[(1, 0)]);
        assert!(SupportEllipse::new(Vec3::zeros(), Matrix2::identity(), 0.0, Vec3::z()).is_err());
        assert!(SupportEllipse::new(Vec3::zeros(), -Matrix2::identity(), 1.0, Vec3::z()).is_err());
    }

    #[test]
    fn spec_round_trip() {
        let e = SupportEllipse::from_axes(Vec3::new(0.1, 0.2, 0.0), [0.3, 0.1], 0.4, Vec3::z()).unwrap();
        let s = e.to_spec();
        assert!((s.axes[0] - 0.3).abs() < 1e-12 && (s.axes[1] - 0.1).abs() < 1e-12);
        assert!((s.angle - 0.4).abs() < 1e-12);
    }
}

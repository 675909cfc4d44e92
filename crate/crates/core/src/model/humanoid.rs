//! Parametric humanoid used by the bundled avatars and the test-suite.
//!
//! Segment proportions and mass fractions follow standard anthropometric
//! tables, scaled by body height and total mass. Multi-axis joints (hips,
//! ankles, waist, shoulders, wrists) are chains of revolute joints through
//! massless intermediate links so that every coordinate carries its own limit.
//! The reference posture (all joint angles zero) is upright with the arms
//! hanging, facing +x, with +z up.

use nalgebra::{DVector, Isometry3, Translation3, Unit};

use super::{AvatarModel, JointKind, JointLimits, JointSpec, Segment, TaskFrame};
use crate::error::Result;
use crate::math::{Mat3, Quat, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct HumanoidParams {
    pub name: String,
    pub height: f64,
    pub mass: f64,
}

impl HumanoidParams {
    pub fn new(name: impl Into<String>, height: f64, mass: f64) -> Self {
        Self {
            name: name.into(),
            height,
            mass,
        }
    }

    pub fn thigh_length(&self) -> f64 {
        0.245 * self.height
    }

    pub fn shank_length(&self) -> f64 {
        0.246 * self.height
    }

    pub fn ankle_height(&self) -> f64 {
        0.039 * self.height
    }

    pub fn upper_arm_length(&self) -> f64 {
        0.186 * self.height
    }

    pub fn forearm_length(&self) -> f64 {
        0.146 * self.height
    }

    /// Distance from the wrist to the hand task frame.
    pub fn hand_reach(&self) -> f64 {
        0.04 * self.height
    }

    /// Height of the root (hip center) when standing in the reference posture.
    pub fn stance_height(&self) -> f64 {
        self.thigh_length() + self.shank_length() + self.ankle_height()
    }

    pub fn lumbar_height(&self) -> f64 {
        0.09 * self.height
    }

    pub fn shoulder_offset(&self) -> (f64, f64) {
        (0.1 * self.height, 0.198 * self.height)
    }
}

fn cylinder(mass: f64, radius: f64, length: f64) -> Mat3 {
    let t = mass * (3.0 * radius * radius + length * length) / 12.0;
    Mat3::from_diagonal(&Vec3::new(t, t, 0.5 * mass * radius * radius))
}

fn cuboid(mass: f64, x: f64, y: f64, z: f64) -> Mat3 {
    Mat3::from_diagonal(&Vec3::new(
        mass * (y * y + z * z) / 12.0,
        mass * (x * x + z * z) / 12.0,
        mass * (x * x + y * y) / 12.0,
    ))
}

struct Builder {
    segments: Vec<Segment>,
    joints: Vec<JointSpec>,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn add(
        &mut self,
        name: String,
        parent: Option<usize>,
        origin: Vec3,
        kind: JointKind,
        mass: f64,
        com: Vec3,
        inertia: Mat3,
        collision_points: Vec<Vec3>,
    ) -> usize {
        self.segments.push(Segment {
            name: name.clone(),
            parent,
            mass,
            local_com: com,
            inertia,
            joint_origin: Isometry3::from_parts(
                Translation3::new(origin.x, origin.y, origin.z),
                Quat::identity(),
            ),
            collision_points,
        });
        self.joints.push(JointSpec { name, kind });
        self.segments.len() - 1
    }

    fn link(&mut self, name: String, parent: usize, origin: Vec3, kind: JointKind) -> usize {
        self.add(
            name,
            Some(parent),
            origin,
            kind,
            0.0,
            Vec3::zeros(),
            Mat3::zeros(),
            vec![],
        )
    }
}

fn rev(axis: Vec3, lower: f64, upper: f64) -> JointKind {
    JointKind::Revolute {
        axis: Unit::new_normalize(axis),
        limits: Some(JointLimits { lower, upper }),
    }
}

pub fn build(p: &HumanoidParams) -> Result<AvatarModel> {
    let h = p.height;
    let m = p.mass;
    let mut b = Builder {
        segments: vec![],
        joints: vec![],
    };
    let pelvis = b.add(
        "pelvis".into(),
        None,
        Vec3::zeros(),
        JointKind::Free6,
        0.142 * m,
        Vec3::new(0.0, 0.0, 0.04 * h),
        cuboid(0.142 * m, 0.12 * h, 0.17 * h, 0.1 * h),
        vec![
            Vec3::new(0.06 * h, 0.085 * h, 0.0),
            Vec3::new(0.06 * h, -0.085 * h, 0.0),
            Vec3::new(-0.06 * h, 0.085 * h, 0.0),
            Vec3::new(-0.06 * h, -0.085 * h, 0.0),
        ],
    );

    let (lt, ls, ah) = (p.thigh_length(), p.shank_length(), p.ankle_height());
    let (heel, toe, half_width) = (-0.028 * h, 0.11 * h, 0.028 * h);
    let mut feet = vec![];
    for (side, s) in [("l", 1.0), ("r", -1.0)] {
        let yaw = b.link(
            format!("{side}_hip_yaw"),
            pelvis,
            Vec3::new(0.0, s * 0.05 * h, 0.0),
            rev(Vec3::z(), -0.6, 0.6),
        );
        let (ab_lo, ab_hi) = if s > 0.0 { (-0.4, 0.8) } else { (-0.8, 0.4) };
        let roll = b.link(format!("{side}_hip_roll"), yaw, Vec3::zeros(), rev(Vec3::x(), ab_lo, ab_hi));
        let thigh = b.add(
            format!("{side}_thigh"),
            Some(roll),
            Vec3::zeros(),
            rev(Vec3::y(), -1.8, 0.5),
            0.1 * m,
            Vec3::new(0.0, 0.0, -0.433 * lt),
            cylinder(0.1 * m, 0.035 * h, lt),
            vec![],
        );
        let shank = b.add(
            format!("{side}_shank"),
            Some(thigh),
            Vec3::new(0.0, 0.0, -lt),
            rev(Vec3::y(), 0.0, 2.4),
            0.0465 * m,
            Vec3::new(0.0, 0.0, -0.433 * ls),
            cylinder(0.0465 * m, 0.025 * h, ls),
            // kneecap
            vec![Vec3::new(0.025 * h, 0.0, 0.0)],
        );
        let ankle = b.link(
            format!("{side}_ankle"),
            shank,
            Vec3::new(0.0, 0.0, -ls),
            rev(Vec3::y(), -0.7, 0.9),
        );
        let foot_len = toe - heel;
        let foot = b.add(
            format!("{side}_foot"),
            Some(ankle),
            Vec3::zeros(),
            rev(Vec3::x(), -0.4, 0.4),
            0.0145 * m,
            Vec3::new(0.5 * (toe + heel), 0.0, -0.5 * ah),
            cuboid(0.0145 * m, foot_len, 2.0 * half_width, ah),
            vec![
                Vec3::new(heel, half_width, -ah),
                Vec3::new(heel, -half_width, -ah),
                Vec3::new(toe, half_width, -ah),
                Vec3::new(toe, -half_width, -ah),
            ],
        );
        feet.push((side, foot));
    }

    let waist_pitch = b.link(
        "waist_pitch".into(),
        pelvis,
        Vec3::new(0.0, 0.0, p.lumbar_height()),
        rev(Vec3::y(), -0.4, 1.3),
    );
    let waist_roll = b.link("waist_roll".into(), waist_pitch, Vec3::zeros(), rev(Vec3::x(), -0.4, 0.4));
    let torso = b.add(
        "torso".into(),
        Some(waist_roll),
        Vec3::zeros(),
        rev(Vec3::z(), -0.7, 0.7),
        0.436 * m,
        Vec3::new(0.0, 0.0, 0.155 * h),
        cuboid(0.436 * m, 0.11 * h, 0.2 * h, 0.36 * h),
        vec![
            Vec3::new(0.055 * h, 0.1 * h, 0.28 * h),
            Vec3::new(0.055 * h, -0.1 * h, 0.28 * h),
            Vec3::new(-0.055 * h, 0.1 * h, 0.28 * h),
            Vec3::new(-0.055 * h, -0.1 * h, 0.28 * h),
            // face, back of the head, crown
            Vec3::new(0.06 * h, 0.0, 0.31 * h),
            Vec3::new(-0.06 * h, 0.0, 0.31 * h),
            Vec3::new(0.0, 0.0, 0.37 * h),
        ],
    );

    let (lua, lfa) = (p.upper_arm_length(), p.forearm_length());
    let (sy, sz) = p.shoulder_offset();
    let mut hands = vec![];
    for (side, s) in [("l", 1.0), ("r", -1.0)] {
        let pitch = b.link(
            format!("{side}_shoulder_pitch"),
            torso,
            Vec3::new(0.0, s * sy, sz),
            rev(Vec3::y(), -3.0, 1.0),
        );
        let (lo, hi) = if s > 0.0 { (-0.3, 2.6) } else { (-2.6, 0.3) };
        let roll = b.link(format!("{side}_shoulder_roll"), pitch, Vec3::zeros(), rev(Vec3::x(), lo, hi));
        let upper = b.add(
            format!("{side}_upper_arm"),
            Some(roll),
            Vec3::zeros(),
            rev(Vec3::z(), -1.3, 1.3),
            0.028 * m,
            Vec3::new(0.0, 0.0, -0.436 * lua),
            cylinder(0.028 * m, 0.025 * h, lua),
            vec![],
        );
        let fore = b.add(
            format!("{side}_forearm"),
            Some(upper),
            Vec3::new(0.0, 0.0, -lua),
            rev(Vec3::y(), -2.5, 0.0),
            0.016 * m,
            Vec3::new(0.0, 0.0, -0.43 * lfa),
            cylinder(0.016 * m, 0.02 * h, lfa),
            // elbow
            vec![Vec3::new(-0.02 * h, 0.0, 0.0)],
        );
        let wrist = b.link(
            format!("{side}_wrist"),
            fore,
            Vec3::new(0.0, 0.0, -lfa),
            rev(Vec3::y(), -1.2, 1.2),
        );
        let hr = p.hand_reach();
        let hand = b.add(
            format!("{side}_hand"),
            Some(wrist),
            Vec3::zeros(),
            rev(Vec3::x(), -0.6, 0.6),
            0.006 * m,
            Vec3::new(0.0, 0.0, -hr),
            cuboid(0.006 * m, 0.02 * h, 0.05 * h, 0.1 * h),
            vec![
                Vec3::new(0.0, 0.0, -2.0 * hr),
                Vec3::new(0.01 * h, 0.0, -hr),
                Vec3::new(-0.01 * h, 0.0, -hr),
            ],
        );
        hands.push((side, hand));
    }

    let mut frames = vec![];
    for (side, hand) in &hands {
        frames.push(TaskFrame {
            name: format!("{side}_hand"),
            segment: *hand,
            local: Isometry3::translation(0.0, 0.0, -p.hand_reach()),
        });
    }
    // Tool frame held in the right hand: its x axis runs along the hand's -z.
    let r_hand = hands[1].1;
    frames.push(TaskFrame {
        name: "drill".into(),
        segment: r_hand,
        local: Isometry3::from_parts(
            Translation3::new(0.0, 0.0, -p.hand_reach()),
            Quat::from_axis_angle(&Vec3::y_axis(), std::f64::consts::FRAC_PI_2),
        ),
    });
    for (side, foot) in &feet {
        frames.push(TaskFrame {
            name: format!("{side}_sole"),
            segment: *foot,
            local: Isometry3::translation(0.5 * (toe + heel), 0.0, -ah),
        });
    }
    frames.push(TaskFrame {
        name: "head".into(),
        segment: torso,
        local: Isometry3::translation(0.0, 0.0, 0.31 * h),
    });

    AvatarModel::new(p.name.clone(), b.segments, b.joints, frames)
}

/// The 1.8 m, 75 kg reference avatar.
pub fn reference() -> Result<AvatarModel> {
    build(&HumanoidParams::new("reference", 1.8, 75.0))
}

/// Reference posture with the soles resting on the z = 0 plane.
pub fn standing_q(model: &AvatarModel, params: &HumanoidParams) -> DVector<f64> {
    let mut q = model.neutral_q();
    q[2] = params.stance_height();
    q
}

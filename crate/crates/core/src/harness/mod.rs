//! Scenario files, the stepping loop, metrics output and self-checks.

pub mod check;
pub mod metrics;
pub mod scenario;
pub mod stream;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use nalgebra::{DVector, Unit};
use serde::Serialize;

use crate::balance::{
    balance_distance, fit_support_ellipse, normalized_distance, signed_root_distance, SupportEllipse,
};
use crate::com::com_position_with;
use crate::control::{
    control_step, retarget_targets, Controller, GuideKind, PostureGains, TaskTarget, VirtualGuide,
};
use crate::dynamics::{self, detect_contacts_with, mechanical_energy, Anchor, StepParams, StepReport};
use crate::error::{Error, Result};
use crate::math::{quat_from_wxyz, quat_log, quat_to_wxyz, Vec3};
use crate::model::{AvatarModel, JointKind, Kinematics, SimState};

pub use metrics::{MetricsLayout, MetricsRecord, MetricsWriter};
pub use scenario::{load_scenario, EllipseMode, GuideShape, Scenario, ScenarioFile};
pub use stream::TargetStream;

/// A scenario being stepped.
#[derive(Clone, Debug)]
pub struct Simulation {
    scenario: Scenario,
    params: StepParams,
    controller: Controller,
    base_targets: Vec<TaskTarget>,
    base_guides: Vec<VirtualGuide>,
    tool_axes: Vec<Vec3>,
    /// Foot anchors; `None` while the foot is off the ground.
    anchors: Vec<Option<Anchor>>,
    base_anchors: Vec<Option<Anchor>>,
    initial: SimState,
    state: SimState,
    balance_on: bool,
    overrides: BTreeMap<String, Vec3>,
    steps: usize,
    clamped_steps: usize,
    last: StepReport,
}

/// Initial configuration: scenario joint angles, root at the origin lifted
/// so that the lowest support collision point sits `drop` above `z = 0`.
fn initial_q(model: &AvatarModel, file: &ScenarioFile) -> Result<DVector<f64>> {
    let mut q = model.neutral_q();
    for (name, angle) in &file.initial.joints {
        let j = &model.joints()[model.joint_index(name).expect("checked on load")];
        match j.kind {
            JointKind::Revolute { .. } => q[j.q_offset] = *angle,
            _ => return Err(Error::config(format!("initial angle given for non-revolute joint `{name}`"))),
        }
    }
    if !model.is_floating() {
        return Ok(q);
    }
    let kin = Kinematics::new(model, &q)?;
    let segs: Vec<usize> = if file.supports.is_empty() {
        (0..model.segments().len()).collect()
    } else {
        file.supports
            .iter()
            .map(|s| model.task_frame(s).expect("checked on load").segment)
            .collect()
    };
    let lowest = segs
        .iter()
        .flat_map(|&s| model.segments()[s].collision_points.iter().map(move |p| (s, p)))
        .map(|(s, p)| kin.point(s, p).z)
        .fold(f64::INFINITY, f64::min);
    if lowest.is_finite() {
        q[2] += file.initial.drop - lowest;
    }
    Ok(q)
}

fn support_points(kin: &Kinematics<'_>, file: &ScenarioFile) -> Vec<Vec3> {
    let model = kin.model();
    file.supports
        .iter()
        .map(|s| model.task_frame(s).expect("checked on load").segment)
        .flat_map(|seg| {
            model.segments()[seg]
                .collision_points
                .iter()
                .map(move |p| kin.point(seg, p))
        })
        .collect()
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self> {
        let file = &scenario.file;
        let model = &scenario.model;
        let params = file.step_params();
        params.validate()?;
        let q0 = initial_q(model, file)?;
        let initial = SimState::at_rest(model, q0)?;
        let kin = Kinematics::new(model, &initial.q)?;
        let up = -params.gravity;

        // defaults come from the grounded pose, so a drop only perturbs the start
        let mut grounded = initial.q.clone();
        if model.is_floating() {
            grounded[2] -= file.initial.drop;
        }
        let ground_kin = Kinematics::new(model, &grounded)?;
        let pose_of = |task: &str| ground_kin.task_frame_pose(model.task_frame(task).expect("checked on load"));

        let mut targets = Vec::with_capacity(file.targets.len());
        for t in &file.targets {
            let pose = pose_of(&t.task);
            let mut target = TaskTarget::new(
                t.task.clone(),
                t.position.map(Vec3::from).unwrap_or(pose.translation.vector),
            );
            target.desired_orientation = match (t.orientation, t.hold_orientation) {
                (Some(w), _) => Some(quat_from_wxyz(w)),
                (None, true) => Some(pose.rotation),
                (None, false) => None,
            };
            target.gains = t.gains.clone().unwrap_or_else(|| file.gains.task.clone());
            target.enabled = t.enabled;
            targets.push(target);
        }

        let mut guides = Vec::with_capacity(file.guides.len());
        let mut tool_axes = Vec::with_capacity(file.guides.len());
        for g in &file.guides {
            let pose = pose_of(&g.task);
            let here = pose.translation.vector;
            let unit = |v: [f64; 3], field: &str| {
                Unit::try_new(Vec3::from(v), 1e-12)
                    .ok_or_else(|| Error::validation(format!("guides.{}.{field}", g.name), "must be non-zero"))
            };
            let kind = match &g.shape {
                GuideShape::Axis { point, direction } => GuideKind::Axis {
                    point: point.map(Vec3::from).unwrap_or(here),
                    direction: unit(*direction, "direction")?,
                },
                GuideShape::Plane { point, normal } => GuideKind::Plane {
                    point: point.map(Vec3::from).unwrap_or(here),
                    normal: unit(*normal, "normal")?,
                },
                GuideShape::Point { position } => GuideKind::Point {
                    position: position.map(Vec3::from).unwrap_or(here),
                },
            };
            let guide = VirtualGuide {
                name: g.name.clone(),
                kind,
                task_frame: g.task.clone(),
                orientation: g.hold_orientation.then_some(pose.rotation),
                stiffness: g.stiffness,
                damping: g.damping,
                angular_stiffness: g.angular_stiffness,
                angular_damping: g.angular_damping,
                enabled: g.enabled,
            };
            guide.validate()?;
            guides.push(guide);
            tool_axes.push(unit(g.tool_axis, "tool_axis")?.into_inner());
        }

        let mut supports = Vec::new();
        let mut anchors = Vec::new();
        for s in &file.supports {
            let f = model.task_frame(s).expect("checked on load");
            let local = f.local.translation.vector;
            supports.push((f.segment, local));
            anchors.push(Some(Anchor::at_current(&kin, f.segment, local)));
        }

        let ellipse = match file.balance.mode {
            EllipseMode::Explicit => Some(SupportEllipse::from_spec(
                file.balance.ellipse.as_ref().expect("checked on load"),
                up,
            )?),
            EllipseMode::Auto if file.supports.is_empty() => None,
            EllipseMode::Auto => Some(fit_support_ellipse(&support_points(&kin, file), up, file.balance.safety)?),
        };

        let n = model.n_dof();
        let mut posture = PostureGains::uniform(model, file.gains.posture.kp, file.gains.posture.kd);
        for (name, [kp, kd]) in &file.gains.posture.joints {
            let j = &model.joints()[model.joint_index(name).expect("checked on load")];
            for i in j.dof_offset..j.dof_offset + j.kind.dof() {
                posture.kp[i] = *kp;
                posture.kd[i] = *kd;
            }
        }
        let mut joint_damping = DVector::from_element(n, file.gains.joint_damping);
        for i in 0..model.root_dof() {
            joint_damping[i] = 0.0;
        }

        let controller = Controller {
            targets: targets.clone(),
            guides: guides.clone(),
            q_ref: initial.q.clone(),
            posture,
            joint_damping,
            gravity: params.gravity,
            gravity_compensation: file.gains.gravity_compensation,
            supports,
            ellipse,
        };
        let balance_on = file.balance.enabled;
        Ok(Self {
            params,
            controller,
            base_targets: targets,
            base_guides: guides,
            tool_axes,
            base_anchors: anchors.clone(),
            anchors,
            state: initial.clone(),
            initial,
            balance_on,
            overrides: BTreeMap::new(),
            steps: 0,
            clamped_steps: 0,
            last: StepReport::default(),
            scenario,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn model(&self) -> &AvatarModel {
        &self.scenario.model
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn params(&self) -> &StepParams {
        &self.params
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn ellipse(&self) -> Option<&SupportEllipse> {
        self.controller.ellipse.as_ref()
    }

    pub fn last_report(&self) -> &StepReport {
        &self.last
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Steps since the last reset whose velocities hit the sanity cap.
    pub fn clamped_steps(&self) -> usize {
        self.clamped_steps
    }

    pub fn balance_enabled(&self) -> bool {
        self.balance_on
    }

    pub fn set_balance(&mut self, on: bool) {
        self.balance_on = on;
    }

    pub fn set_guide(&mut self, name: &str, on: bool) -> Result<()> {
        let g = self
            .controller
            .guides
            .iter_mut()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::config(format!("unknown guide `{name}`")))?;
        g.enabled = on;
        Ok(())
    }

    pub fn set_all_guides(&mut self, on: bool) {
        for g in &mut self.controller.guides {
            g.enabled = on;
        }
    }

    /// Replaces the desired position of a task, overriding the stream.
    pub fn set_target(&mut self, task: &str, position: Vec3) -> Result<()> {
        if !position.iter().all(|x| x.is_finite()) {
            return Err(Error::arg("target position must be finite"));
        }
        if !self.controller.targets.iter().any(|t| t.task_frame == task) {
            return Err(Error::config(format!("unknown task `{task}`")));
        }
        self.overrides.insert(task.to_owned(), position);
        Ok(())
    }

    /// Back to the initial state, targets, guides and balance setting.
    pub fn reset(&mut self) {
        self.state = self.initial.clone();
        self.anchors = self.base_anchors.clone();
        self.controller.targets = self.base_targets.clone();
        self.controller.guides = self.base_guides.clone();
        self.balance_on = self.scenario.file.balance.enabled;
        self.overrides.clear();
        self.steps = 0;
        self.clamped_steps = 0;
        self.last = StepReport::default();
    }

    pub fn layout(&self) -> MetricsLayout {
        MetricsLayout {
            tasks: self.controller.targets.iter().map(|t| t.task_frame.clone()).collect(),
            planes: self.scenario.planes.iter().map(|p| p.name.clone()).collect(),
            track: self.scenario.file.track.is_some(),
            guides: self.controller.guides.iter().map(|g| g.name.clone()).collect(),
        }
    }

    fn update_targets(&mut self) -> Result<()> {
        let t = self.state.t;
        if let Some(stream) = &self.scenario.stream {
            let mut streamed = Vec::new();
            for (i, base) in self.base_targets.iter().enumerate() {
                if let Some((p, r)) = stream.sample(&base.task_frame, t) {
                    let mut tt = base.clone();
                    tt.desired_position = p;
                    if r.is_some() {
                        tt.desired_orientation = r;
                    }
                    streamed.push((i, tt));
                }
            }
            let retargeted = match &self.scenario.file.retarget {
                Some(r) => {
                    let raw: Vec<TaskTarget> = streamed.iter().map(|(_, t)| t.clone()).collect();
                    retarget_targets(&raw, &r.actor_morphology, &r.avatar_morphology, &r.task_limbs)?
                }
                None => streamed.iter().map(|(_, t)| t.clone()).collect(),
            };
            for ((i, _), tt) in streamed.iter().zip(retargeted) {
                let slot = &mut self.controller.targets[*i];
                slot.desired_position = tt.desired_position;
                slot.desired_orientation = tt.desired_orientation;
            }
        }
        for target in &mut self.controller.targets {
            if let Some(p) = self.overrides.get(&target.task_frame) {
                target.desired_position = *p;
            }
        }
        Ok(())
    }

    /// A foot sticks where it touches down and slides freely in the air.
    fn update_anchors(&mut self) -> Result<()> {
        let model = &self.scenario.model;
        let kin = Kinematics::new(model, &self.state.q)?;
        let contacts = detect_contacts_with(&kin, &self.scenario.planes, self.params.contact_activation);
        for (slot, (seg, local)) in self.anchors.iter_mut().zip(&self.controller.supports) {
            let touching = contacts.iter().any(|c| c.segment == *seg);
            match (touching, slot.is_some()) {
                (true, false) => *slot = Some(Anchor::at_current(&kin, *seg, *local)),
                (false, true) => *slot = None,
                _ => {}
            }
        }
        Ok(())
    }

    /// Advances one timestep and reports metrics for the new state.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let wrap = |step: usize| move |e: Error| Error::Simulation { step, message: e.to_string() };
        self.update_targets().map_err(wrap(self.steps))?;
        self.update_anchors().map_err(wrap(self.steps))?;
        let model = &self.scenario.model;
        let out = control_step(model, &self.state, &self.controller, self.balance_on).map_err(wrap(self.steps))?;
        let anchors: Vec<Anchor> = self.anchors.iter().flatten().cloned().collect();
        let input = dynamics::StepInput {
            torques: &out.torques,
            damping: &out.damping,
            balance: out.balance.as_ref(),
            anchors: &anchors,
        };
        let (next, report) =
            dynamics::step(model, &self.state, &input, &self.scenario.planes, &self.params).map_err(wrap(self.steps))?;
        if report.velocity_clamped {
            if self.clamped_steps == 0 {
                log::warn!("t = {:.4}: velocity clamped to the sanity cap", self.state.t);
            }
            self.clamped_steps += 1;
        }
        self.state = next;
        self.last = report;
        self.steps += 1;
        self.metrics()
    }

    /// Metrics of the current state and the last step's constraint report.
    pub fn metrics(&self) -> Result<MetricsRecord> {
        let model = &self.scenario.model;
        let kin = Kinematics::new(model, &self.state.q)?;
        let com = com_position_with(&kin)?;
        let (delta, delta_norm, delta_root) = match self.ellipse() {
            Some(e) => {
                let d = balance_distance(e, &com);
                (d, normalized_distance(e, d), signed_root_distance(e, d))
            }
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        let max_penetration = detect_contacts_with(&kin, &self.scenario.planes, 0.0)
            .iter()
            .map(|c| -c.gap)
            .fold(0.0, f64::max);
        let task_errors = self
            .controller
            .targets
            .iter()
            .map(|t| {
                let f = model.task_frame(&t.task_frame).expect("checked on load");
                (kin.task_frame_pose(f).translation.vector - t.desired_position).norm()
            })
            .collect();
        let mut plane_impulses = vec![0.0; self.scenario.planes.len()];
        for (c, z) in self.last.contacts.iter().zip(&self.last.contact_impulses) {
            plane_impulses[c.plane] += z;
        }
        let track = self.scenario.file.track.as_ref().map(|tr| {
            let seg = model.segment_index(&tr.segment).expect("checked on load");
            let plane = self
                .scenario
                .planes
                .iter()
                .find(|p| p.name == tr.plane)
                .expect("checked on load");
            let lowest = model.segments()[seg]
                .collision_points
                .iter()
                .map(|p| kin.point(seg, p).z)
                .fold(f64::INFINITY, f64::min);
            (lowest, plane.point.z)
        });
        let mut guide_angles = Vec::with_capacity(self.controller.guides.len());
        let mut guide_lateral = Vec::with_capacity(self.controller.guides.len());
        for (g, axis) in self.controller.guides.iter().zip(&self.tool_axes) {
            let f = model.task_frame(&g.task_frame).expect("checked on load");
            let pose = kin.task_frame_pose(f);
            let angle = match (&g.kind, &g.orientation) {
                (GuideKind::Axis { direction, .. }, _) => {
                    let a = pose.rotation * axis;
                    a.cross(direction).norm().atan2(a.dot(direction))
                }
                (_, Some(r)) => quat_log(&(r * pose.rotation.inverse())).norm(),
                _ => 0.0,
            };
            guide_angles.push(angle);
            guide_lateral.push(g.distance(&pose.translation.vector));
        }
        Ok(MetricsRecord {
            t: self.state.t,
            delta,
            delta_norm,
            delta_root,
            com,
            max_penetration,
            vertical_impulse: self.last.vertical_impulse,
            contacts: self.last.contacts.len(),
            active_limits: self.last.active_limits,
            balance_impulse: self.last.balance_impulse,
            lcp_size: self.last.lcp_size,
            lcp_residual: self.last.lcp_residual,
            energy: mechanical_energy(&kin, &self.state.qdot, &self.params.gravity),
            task_errors,
            plane_impulses,
            track,
            guide_angles,
            guide_lateral,
        })
    }

    /// Snapshot for viewers.
    pub fn frame(&self) -> Result<StateFrame> {
        let model = &self.scenario.model;
        let kin = Kinematics::new(model, &self.state.q)?;
        let joints = model
            .segments()
            .iter()
            .zip(kin.transforms())
            .map(|(s, x)| SegmentPose {
                name: s.name.clone(),
                p: x.translation.vector.into(),
                q: quat_to_wxyz(&x.rotation),
            })
            .collect();
        let com = com_position_with(&kin)?;
        let (delta, delta_norm) = match self.ellipse() {
            Some(e) => {
                let d = balance_distance(e, &com);
                (d, normalized_distance(e, d))
            }
            None => (f64::NAN, f64::NAN),
        };
        let ellipse = self.ellipse().map(|e| {
            let (axes, angle) = e.axes();
            EllipseFrame {
                center: e.center.into(),
                axes,
                angle,
            }
        });
        let contacts = self
            .last
            .contacts
            .iter()
            .zip(&self.last.contact_impulses)
            .map(|(c, z)| ContactFrame {
                p: kin.point(c.segment, &c.local_point).into(),
                impulse: *z,
            })
            .collect();
        let targets = self
            .controller
            .targets
            .iter()
            .map(|t| (t.task_frame.clone(), t.desired_position.into()))
            .collect();
        Ok(StateFrame {
            kind: "state",
            t: self.state.t,
            joints,
            com: com.into(),
            delta: finite_or_none(delta),
            delta_norm: finite_or_none(delta_norm),
            ellipse,
            contacts,
            targets,
            balance: self.balance_on,
        })
    }
}

fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SegmentPose {
    pub name: String,
    pub p: [f64; 3],
    /// (w, x, y, z)
    pub q: [f64; 4],
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EllipseFrame {
    pub center: [f64; 3],
    /// Semi-axes of the `delta = 0` boundary, m.
    pub axes: [f64; 2],
    pub angle: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ContactFrame {
    pub p: [f64; 3],
    pub impulse: f64,
}

/// The `state` message streamed to viewers.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct StateFrame {
    #[serde(rename = "type")]
    pub kind: &'static str,
    pub t: f64,
    pub joints: Vec<SegmentPose>,
    pub com: [f64; 3],
    pub delta: Option<f64>,
    pub delta_norm: Option<f64>,
    pub ellipse: Option<EllipseFrame>,
    pub contacts: Vec<ContactFrame>,
    pub targets: BTreeMap<String, [f64; 3]>,
    pub balance: bool,
}

/// Overrides applied on top of a scenario for one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub balance: Option<bool>,
    pub guides: Option<bool>,
    pub duration: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub min_delta: f64,
    pub min_delta_norm: f64,
    pub max_penetration: f64,
    pub max_guide_angle: f64,
    pub max_guide_lateral: f64,
    /// Root mean square of the guide lateral error over the run.
    pub guide_lateral_rms: f64,
    /// Smallest `track_z - track_plane_z`.
    pub min_track_clearance: Option<f64>,
    /// Steps where the joint velocity cap had to intervene.
    pub clamped_steps: usize,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "steps:              {}", self.steps)?;
        writeln!(f, "min delta:          {:.6e} (normalized {:.6e})", self.min_delta, self.min_delta_norm)?;
        writeln!(f, "max penetration:    {:.6e} m", self.max_penetration)?;
        writeln!(f, "max guide angle:    {:.6e} rad", self.max_guide_angle)?;
        writeln!(f, "guide lateral rms:  {:.6e} m", self.guide_lateral_rms)?;
        write!(f, "clamped steps:      {}", self.clamped_steps)?;
        if let Some(c) = self.min_track_clearance {
            write!(f, "\nmin track clearance: {c:.6e} m")?;
        }
        Ok(())
    }
}

/// Steps a scenario to the end, writing one metrics row per step.
pub fn run<W: Write>(scenario: Scenario, opts: &RunOptions, out: W) -> Result<(RunSummary, W)> {
    let duration = opts.duration.unwrap_or(scenario.file.duration);
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::validation("duration", format!("must be > 0, got {duration}")));
    }
    let mut sim = Simulation::new(scenario)?;
    if let Some(b) = opts.balance {
        sim.set_balance(b);
    }
    if let Some(g) = opts.guides {
        sim.set_all_guides(g);
    }
    let steps = (duration / sim.params.h).round() as usize;
    let mut writer = MetricsWriter::new(out, &sim.scenario.file.name, &sim.layout())?;
    let mut s = RunSummary {
        steps,
        min_delta: f64::INFINITY,
        min_delta_norm: f64::INFINITY,
        max_penetration: 0.0,
        max_guide_angle: 0.0,
        max_guide_lateral: 0.0,
        guide_lateral_rms: 0.0,
        min_track_clearance: None,
        clamped_steps: 0,
    };
    let mut lateral_sq = 0.0;
    let mut lateral_n = 0usize;
    for _ in 0..steps {
        let m = sim.step()?;
        writer.write(&m)?;
        if m.delta.is_finite() {
            s.min_delta = s.min_delta.min(m.delta);
            s.min_delta_norm = s.min_delta_norm.min(m.delta_norm);
        }
        s.max_penetration = s.max_penetration.max(m.max_penetration);
        for (a, l) in m.guide_angles.iter().zip(&m.guide_lateral) {
            s.max_guide_angle = s.max_guide_angle.max(*a);
            s.max_guide_lateral = s.max_guide_lateral.max(*l);
            lateral_sq += l * l;
            lateral_n += 1;
        }
        if let Some((z, plane)) = m.track {
            let c = z - plane;
            s.min_track_clearance = Some(s.min_track_clearance.map_or(c, |x: f64| x.min(c)));
        }
    }
    if lateral_n > 0 {
        s.guide_lateral_rms = (lateral_sq / lateral_n as f64).sqrt();
    }
    s.clamped_steps = sim.clamped_steps();
    Ok((s, writer.finish()?))
}

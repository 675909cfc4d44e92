//! Scenario documents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balance::EllipseSpec;
use crate::control::{Morphology, TaskGains};
use crate::dynamics::{EnvironmentPlane, PlaneExtent, StepParams, STANDARD_GRAVITY};
use crate::error::{Error, Result};
use crate::harness::stream::TargetStream;
use crate::math::Vec3;
use crate::model::{humanoid, AvatarFile, AvatarModel};

fn default_timestep() -> f64 {
    1e-3
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -STANDARD_GRAVITY]
}

fn default_planes() -> Vec<PlaneFile> {
    vec![PlaneFile {
        name: "floor".into(),
        point: [0.0; 3],
        normal: [0.0, 0.0, 1.0],
        extent: None,
        thickness: None,
    }]
}

fn yes() -> bool {
    true
}

/// Either a path to an avatar JSON document (relative to the scenario file)
/// or parameters for the built-in humanoid generator.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum AvatarRef {
    File(String),
    Humanoid { humanoid: HumanoidFile },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HumanoidFile {
    pub name: String,
    pub height: f64,
    pub mass: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InitialPosture {
    /// Joint angles by joint name, radians. Unlisted joints start at zero.
    pub joints: BTreeMap<String, f64>,
    /// Start this far above the floor, m.
    pub drop: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlaneFile {
    pub name: String,
    pub point: [f64; 3],
    pub normal: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<PlaneExtent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thickness: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TargetFile {
    pub task: String,
    /// Desired position; the frame's initial position when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 3]>,
    /// Desired orientation (w, x, y, z).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<[f64; 4]>,
    /// Use the frame's initial orientation as the desired orientation.
    #[serde(default)]
    pub hold_orientation: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<TaskGains>,
    #[serde(default = "yes")]
    pub enabled: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuideShape {
    Axis {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        point: Option<[f64; 3]>,
        direction: [f64; 3],
    },
    Plane {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        point: Option<[f64; 3]>,
        normal: [f64; 3],
    },
    Point {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        position: Option<[f64; 3]>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GuideFile {
    pub name: String,
    pub task: String,
    /// Points left out default to the frame's initial position.
    pub shape: GuideShape,
    /// Guide the orientation to the frame's initial orientation.
    #[serde(default)]
    pub hold_orientation: bool,
    /// Frame axis expected to line up with an axis guide, for the angle metric.
    #[serde(default = "tool_x")]
    pub tool_axis: [f64; 3],
    pub stiffness: f64,
    pub damping: f64,
    #[serde(default)]
    pub angular_stiffness: f64,
    #[serde(default)]
    pub angular_damping: f64,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn tool_x() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PostureFile {
    pub kp: f64,
    pub kd: f64,
    /// Per-joint `[kp, kd]` overrides by joint name.
    pub joints: BTreeMap<String, [f64; 2]>,
}

impl Default for PostureFile {
    fn default() -> Self {
        Self {
            kp: 20.0,
            kd: 2.0,
            joints: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GainsFile {
    pub task: TaskGains,
    pub posture: PostureFile,
    /// Damping on every actuated coordinate, N m s/rad.
    pub joint_damping: f64,
    pub gravity_compensation: bool,
}

impl Default for GainsFile {
    fn default() -> Self {
        Self {
            task: TaskGains::default(),
            posture: PostureFile::default(),
            joint_damping: 0.5,
            gravity_compensation: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum EllipseMode {
    #[default]
    Auto,
    Explicit,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceFile {
    pub enabled: bool,
    pub mode: EllipseMode,
    pub safety: f64,
    pub stabilization: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ellipse: Option<EllipseSpec>,
}

impl Default for BalanceFile {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: EllipseMode::Auto,
            safety: 0.9,
            stabilization: 0.0,
            ellipse: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RetargetFile {
    pub actor_morphology: Morphology,
    pub avatar_morphology: Morphology,
    /// Limbs whose summed length sets the scale of each task.
    pub task_limbs: BTreeMap<String, Vec<String>>,
}

/// Heights logged every step: the lowest collision point of `segment` and
/// the surface height of `plane`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrackFile {
    pub segment: String,
    pub plane: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolverFile {
    pub baumgarte: f64,
    pub contact_activation: f64,
    pub limit_activation: f64,
    pub velocity_cap: f64,
    pub lcp_tol: f64,
    pub lcp_max_iter: usize,
}

impl Default for SolverFile {
    fn default() -> Self {
        let p = StepParams::default();
        Self {
            baumgarte: p.baumgarte,
            contact_activation: p.contact_activation,
            limit_activation: p.limit_activation,
            velocity_cap: p.velocity_cap,
            lcp_tol: p.lcp.tol,
            lcp_max_iter: p.lcp.max_iter,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub avatar: AvatarRef,
    #[serde(default = "default_timestep")]
    pub timestep: f64,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    #[serde(default)]
    pub initial: InitialPosture,
    #[serde(default = "default_planes")]
    pub planes: Vec<PlaneFile>,
    /// Task frames the avatar stands on. Their segments' collision points
    /// define the support region and they are held in place along the floor.
    #[serde(default)]
    pub supports: Vec<String>,
    #[serde(default)]
    pub targets: Vec<TargetFile>,
    #[serde(default)]
    pub guides: Vec<GuideFile>,
    #[serde(default)]
    pub gains: GainsFile,
    #[serde(default)]
    pub balance: BalanceFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retarget: Option<RetargetFile>,
    /// CSV target recording, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_stream: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track: Option<TrackFile>,
    #[serde(default)]
    pub solver: SolverFile,
}

/// A loaded scenario with its avatar and target stream resolved.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub source: Option<PathBuf>,
    pub model: AvatarModel,
    pub planes: Vec<EnvironmentPlane>,
    pub stream: Option<TargetStream>,
}

fn finite(field: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation(field, "must be finite"));
    }
    Ok(())
}

impl ScenarioFile {
    pub fn validate(&self) -> Result<()> {
        if !(self.timestep > 0.0 && self.timestep <= 0.02) {
            return Err(Error::validation(
                "timestep",
                format!("must lie in (0, 0.02] s, got {}", self.timestep),
            ));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::validation("duration", format!("must be > 0, got {}", self.duration)));
        }
        finite("gravity", &self.gravity)?;
        if !(self.initial.drop >= 0.0) || !self.initial.drop.is_finite() {
            return Err(Error::validation("initial.drop", "must be finite and >= 0"));
        }
        let b = &self.balance;
        if !(b.safety > 0.0 && b.safety <= 1.0) {
            return Err(Error::validation("balance.safety", "must lie in (0, 1]"));
        }
        if !(b.stabilization >= 0.0) {
            return Err(Error::validation("balance.stabilization", "must be >= 0"));
        }
        if b.mode == EllipseMode::Explicit && b.ellipse.is_none() {
            return Err(Error::validation("balance.ellipse", "required when mode is `explicit`"));
        }
        for (i, p) in self.planes.iter().enumerate() {
            finite(&format!("planes[{i}]"), &[p.point, p.normal].concat())?;
            if Vec3::from(p.normal).norm() == 0.0 {
                return Err(Error::validation(format!("planes[{i}].normal"), "must be non-zero"));
            }
            if p.thickness.is_some_and(|t| !(t > 0.0)) {
                return Err(Error::validation(format!("planes[{i}].thickness"), "must be > 0"));
            }
        }
        self.gains
            .task
            .validate()
            .map_err(|_| Error::validation("gains.task", "gains and caps must be finite and >= 0"))?;
        if !(self.gains.joint_damping >= 0.0) {
            return Err(Error::validation("gains.joint_damping", "must be >= 0"));
        }
        let s = &self.solver;
        if !(0.0..=1.0).contains(&s.baumgarte) {
            return Err(Error::validation("solver.baumgarte", "must lie in [0, 1]"));
        }
        if !(s.lcp_tol > 0.0) || s.lcp_max_iter == 0 {
            return Err(Error::validation("solver", "lcp_tol and lcp_max_iter must be positive"));
        }
        if let Some(r) = &self.retarget {
            r.actor_morphology.validate("retarget.actor_morphology")?;
            r.avatar_morphology.validate("retarget.avatar_morphology")?;
        }
        Ok(())
    }

    pub fn step_params(&self) -> StepParams {
        let mut p = StepParams {
            h: self.timestep,
            gravity: Vec3::from(self.gravity),
            baumgarte: self.solver.baumgarte,
            balance_stabilization: self.balance.stabilization,
            contact_activation: self.solver.contact_activation,
            limit_activation: self.solver.limit_activation,
            velocity_cap: self.solver.velocity_cap,
            ..Default::default()
        };
        p.lcp.tol = self.solver.lcp_tol;
        p.lcp.max_iter = self.solver.lcp_max_iter;
        p
    }
}

fn resolve(base: Option<&Path>, rel: &str) -> PathBuf {
    match base {
        Some(dir) => dir.join(rel),
        None => PathBuf::from(rel),
    }
}

impl Scenario {
    /// Resolves a parsed document. Relative paths are taken from `base_dir`.
    pub fn from_file(file: ScenarioFile, base_dir: Option<&Path>) -> Result<Self> {
        file.validate()?;
        let model = match &file.avatar {
            AvatarRef::File(rel) => AvatarFile::load(resolve(base_dir, rel))?,
            AvatarRef::Humanoid { humanoid: h } => {
                if !(h.height > 0.0 && h.mass > 0.0) {
                    return Err(Error::validation("avatar.humanoid", "height and mass must be > 0"));
                }
                humanoid::build(&humanoid::HumanoidParams::new(h.name.clone(), h.height, h.mass))?
            }
        };
        for name in file.initial.joints.keys() {
            if model.joint_index(name).is_none() {
                return Err(Error::config(format!("initial posture names unknown joint `{name}`")));
            }
        }
        for name in file.gains.posture.joints.keys() {
            if model.joint_index(name).is_none() {
                return Err(Error::config(format!("posture gains name unknown joint `{name}`")));
            }
        }
        let frames = file
            .supports
            .iter()
            .chain(file.targets.iter().map(|t| &t.task))
            .chain(file.guides.iter().map(|g| &g.task));
        for name in frames {
            if model.task_frame(name).is_none() {
                return Err(Error::config(format!("unknown task frame `{name}`")));
            }
        }
        let planes = file
            .planes
            .iter()
            .map(|p| {
                let mut plane = EnvironmentPlane::new(p.name.clone(), Vec3::from(p.point), Vec3::from(p.normal))?;
                plane.extent = p.extent.clone();
                plane.thickness = p.thickness;
                Ok(plane)
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(track) = &file.track {
            if model.segment_index(&track.segment).is_none() {
                return Err(Error::config(format!("track names unknown segment `{}`", track.segment)));
            }
            if !planes.iter().any(|p| p.name == track.plane) {
                return Err(Error::config(format!("track names unknown plane `{}`", track.plane)));
            }
        }
        let stream = match &file.target_stream {
            Some(rel) => {
                let s = TargetStream::load(resolve(base_dir, rel))?;
                for task in s.tasks() {
                    if !file.targets.iter().any(|t| &t.task == task) {
                        return Err(Error::config(format!(
                            "target stream drives task `{task}` which has no target"
                        )));
                    }
                }
                if let Some(r) = &file.retarget {
                    for task in s.tasks() {
                        if !r.task_limbs.contains_key(task) {
                            return Err(Error::config(format!("no limb chain for task `{task}`")));
                        }
                    }
                }
                Some(s)
            }
            None => None,
        };
        Ok(Self {
            file,
            source: None,
            model,
            planes,
            stream,
        })
    }
}

/// Reads, validates and resolves a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut s = Scenario::from_file(file, path.parent())?;
    s.source = Some(path.to_path_buf());
    Ok(s)
}

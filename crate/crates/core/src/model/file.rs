//! JSON avatar description.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Isometry3, Translation3, Unit};
use serde::{Deserialize, Serialize};

use super::{AvatarModel, JointKind, JointLimits, JointSpec, Segment, TaskFrame};
use crate::error::{Error, Result};
use crate::math::{quat_from_wxyz, quat_to_wxyz, Mat3, Vec3};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TransformFile {
    #[serde(default)]
    pub translation: [f64; 3],
    /// Unit quaternion, (w, x, y, z).
    #[serde(default = "identity_wxyz")]
    pub rotation: [f64; 4],
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl Default for TransformFile {
    fn default() -> Self {
        Self {
            translation: [0.0; 3],
            rotation: identity_wxyz(),
        }
    }
}

impl TransformFile {
    fn to_isometry(&self) -> Isometry3<f64> {
        let t = self.translation;
        Isometry3::from_parts(Translation3::new(t[0], t[1], t[2]), quat_from_wxyz(self.rotation))
    }

    fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let t = iso.translation.vector;
        Self {
            translation: [t.x, t.y, t.z],
            rotation: quat_to_wxyz(&iso.rotation),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SegmentFile {
    pub name: String,
    pub parent: Option<usize>,
    pub mass: f64,
    pub com: [f64; 3],
    pub inertia: [[f64; 3]; 3],
    #[serde(default)]
    pub origin: TransformFile,
    #[serde(default)]
    pub collision_points: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JointFile {
    Revolute {
        name: String,
        axis: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limits: Option<[f64; 2]>,
    },
    Spherical {
        name: String,
    },
    Fixed {
        name: String,
    },
    Free6 {
        name: String,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskFrameFile {
    pub segment: String,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default = "identity_wxyz")]
    pub rotation: [f64; 4],
}

/// On-disk avatar document: `segments[]`, `joints[]` (index-aligned) and
/// named `task_frames{}`. Lengths in meters, masses in kg, angles in radians.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AvatarFile {
    pub name: String,
    pub segments: Vec<SegmentFile>,
    pub joints: Vec<JointFile>,
    #[serde(default)]
    pub task_frames: BTreeMap<String, TaskFrameFile>,
}

impl AvatarFile {
    pub fn load(path: impl AsRef<Path>) -> Result<AvatarModel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: AvatarFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        file.into_model()
    }

    pub fn into_model(self) -> Result<AvatarModel> {
        let segments: Vec<Segment> = self
            .segments
            .iter()
            .map(|s| Segment {
                name: s.name.clone(),
                parent: s.parent,
                mass: s.mass,
                local_com: Vec3::from(s.com),
                inertia: Mat3::from_fn(|r, c| s.inertia[r][c]),
                joint_origin: s.origin.to_isometry(),
                collision_points: s.collision_points.iter().map(|p| Vec3::from(*p)).collect(),
            })
            .collect();
        let joints = self
            .joints
            .iter()
            .map(|j| -> Result<JointSpec> {
                Ok(match j {
                    JointFile::Revolute { name, axis, limits } => {
                        let axis = Vec3::from(*axis);
                        if axis.norm() < 1e-12 {
                            return Err(Error::arg(format!("joint `{name}` has a zero axis")));
                        }
                        JointSpec {
                            name: name.clone(),
                            kind: JointKind::Revolute {
                                axis: Unit::new_normalize(axis),
                                limits: limits.map(|[lower, upper]| JointLimits { lower, upper }),
                            },
                        }
                    }
                    JointFile::Spherical { name } => JointSpec {
                        name: name.clone(),
                        kind: JointKind::Spherical,
                    },
                    JointFile::Fixed { name } => JointSpec {
                        name: name.clone(),
                        kind: JointKind::Fixed,
                    },
                    JointFile::Free6 { name } => JointSpec {
                        name: name.clone(),
                        kind: JointKind::Free6,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut frames = Vec::new();
        for (name, tf) in &self.task_frames {
            let segment = segments
                .iter()
                .position(|s| s.name == tf.segment)
                .ok_or_else(|| {
                    Error::arg(format!(
                        "task frame `{name}` references unknown segment `{}`",
                        tf.segment
                    ))
                })?;
            frames.push(TaskFrame {
                name: name.clone(),
                segment,
                local: TransformFile {
                    translation: tf.translation,
                    rotation: tf.rotation,
                }
                .to_isometry(),
            });
        }
        AvatarModel::new(self.name, segments, joints, frames)
    }

    pub fn from_model(model: &AvatarModel) -> Self {
        let segments = model
            .segments()
            .iter()
            .map(|s| SegmentFile {
                name: s.name.clone(),
                parent: s.parent,
                mass: s.mass,
                com: s.local_com.into(),
                inertia: [0, 1, 2].map(|r| [0, 1, 2].map(|c| s.inertia[(r, c)])),
                origin: TransformFile::from_isometry(&s.joint_origin),
                collision_points: s.collision_points.iter().map(|p| (*p).into()).collect(),
            })
            .collect();
        let joints = model
            .joints()
            .iter()
            .map(|j| {
                let name = j.name.clone();
                match &j.kind {
                    JointKind::Revolute { axis, limits } => JointFile::Revolute {
                        name,
                        axis: axis.into_inner().into(),
                        limits: limits.as_ref().map(|l| [l.lower, l.upper]),
                    },
                    JointKind::Spherical => JointFile::Spherical { name },
                    JointKind::Fixed => JointFile::Fixed { name },
                    JointKind::Free6 => JointFile::Free6 { name },
                }
            })
            .collect();
        let task_frames = model
            .task_frames()
            .iter()
            .map(|t| {
                let tf = TransformFile::from_isometry(&t.local);
                (
                    t.name.clone(),
                    TaskFrameFile {
                        segment: model.segments()[t.segment].name.clone(),
                        translation: tf.translation,
                        rotation: tf.rotation,
                    },
                )
            })
            .collect();
        Self {
            name: model.name.clone(),
            segments,
            joints,
            task_frames,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn humanoid_survives_json() {
        let model = super::super::humanoid::reference().unwrap();
        let text = serde_json::to_string(&AvatarFile::from_model(&model)).unwrap();
        let back: AvatarFile = serde_json::from_str(&text).unwrap();
        let back = back.into_model().unwrap();
        assert_eq!(back.n_dof(), model.n_dof());
        assert_eq!(back.segments().len(), model.segments().len());
        assert!((back.total_mass() - model.total_mass()).abs() < 1e-12);
    }

    #[test]
    fn unknown_task_segment_is_rejected() {
        let text = r#"{
            "name": "x",
            "segments": [{"name": "a", "parent": null, "mass": 1.0, "com": [0,0,0],
                          "inertia": [[1,0,0],[0,1,0],[0,0,1]]}],
            "joints": [{"kind": "free6", "name": "root"}],
            "task_frames": {"hand": {"segment": "nope"}}
        }"#;
        let file: AvatarFile = serde_json::from_str(text).unwrap();
        assert!(file.into_model().is_err());
    }
}

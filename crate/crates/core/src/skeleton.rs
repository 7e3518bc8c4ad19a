//! Toy articulated body: 16 joints, 120 rigidly attached vertices.
//!
//! Coordinates follow the camera convention (y down, the body faces -z in its
//! rest pose). The root sits at the origin; callers add the body translation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3;

pub const NUM_JOINTS: usize = 16;
pub const NUM_VERTICES: usize = 120;
pub const NUM_SHAPE: usize = 4;
pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("expected {expected} {what}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    /// Per-joint axis-angle; entry 0 is the global orientation in the camera frame.
    pub pose: Vec<[f64; 3]>,
    /// Limb-group length scales.
    pub shape: [f64; NUM_SHAPE],
}

impl BodyState {
    pub fn rest() -> Self {
        Self { pose: vec![[0.0; 3]; NUM_JOINTS], shape: [1.0; NUM_SHAPE] }
    }

    pub fn is_valid(&self) -> bool {
        self.pose.len() == NUM_JOINTS
            && self.pose.iter().all(|w| Vector3::from(*w).norm() < std::f64::consts::PI)
            && self.shape.iter().all(|b| (0.5..=1.5).contains(b))
    }

    pub fn global_orientation(&self) -> Matrix3<f64> {
        so3::exp_map(&Vector3::from(self.pose[0]))
    }

    /// Rotation matrices of every joint, row-major, 9 values per joint.
    pub fn rotation_matrices(&self) -> Vec<f64> {
        self.pose.iter().flat_map(|w| so3::flatten(&so3::exp_map(&Vector3::from(*w)))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VertexBinding {
    /// Joint whose frame carries the vertex.
    pub bone: usize,
    /// Shape group whose scale stretches the local offset.
    pub group: usize,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Sparse,
    Coarse,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonTemplate {
    pub version: u32,
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<[f64; 3]>,
    pub joint_group: Vec<usize>,
    pub vertices: Vec<VertexBinding>,
    /// Sparse rows of (vertex, weight).
    pub regressor: Vec<Vec<(usize, f64)>>,
    pub sparse: Vec<usize>,
    pub coarse: Vec<usize>,
    pub complete: Vec<usize>,
}

const NAMES: [&str; NUM_JOINTS] = [
    "pelvis", "spine", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow",
    "r_wrist", "l_knee", "l_ankle", "l_toe", "r_knee", "r_ankle", "r_toe",
];
const PARENTS: [i32; NUM_JOINTS] = [-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14];
// Forearms and feet point forward so front and back views project differently.
const OFFSETS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, -0.25, 0.0],
    [0.0, -0.25, 0.0],
    [0.0, -0.18, -0.08],
    [0.17, 0.0, 0.0],
    [0.05, 0.26, 0.0],
    [0.0, 0.03, -0.25],
    [-0.17, 0.0, 0.0],
    [-0.05, 0.26, 0.0],
    [0.0, 0.03, -0.25],
    [0.1, 0.45, 0.0],
    [0.0, 0.42, 0.0],
    [0.0, 0.06, -0.14],
    [-0.1, 0.45, 0.0],
    [0.0, 0.42, 0.0],
    [0.0, 0.06, -0.14],
];
// 0 torso, 1 head, 2 arms, 3 legs.
const GROUPS: [usize; NUM_JOINTS] = [0, 0, 0, 1, 2, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3, 3];
const RING: f64 = 0.04;

impl SkeletonTemplate {
    /// The canonical toy body.
    pub fn toy() -> Self {
        let parents: Vec<Option<usize>> =
            PARENTS.iter().map(|&p| if p < 0 { None } else { Some(p as usize) }).collect();
        let mut vertices = Vec::with_capacity(NUM_VERTICES);
        // One lateral pair per joint; the regressor averages each pair.
        for j in 0..NUM_JOINTS {
            for sign in [1.0, -1.0] {
                vertices.push(VertexBinding { bone: j, group: GROUPS[j], offset: [sign * RING, 0.0, 0.0] });
            }
        }
        // Four points along every bone segment, carried by the parent frame.
        for j in 1..NUM_JOINTS {
            let p = parents[j].unwrap();
            for (k, a) in [0.2, 0.4, 0.6, 0.8].into_iter().enumerate() {
                let side = if k % 2 == 0 { RING } else { -RING };
                let o = OFFSETS[j];
                vertices.push(VertexBinding { bone: p, group: GROUPS[j], offset: [a * o[0], a * o[1], a * o[2] + side] });
            }
        }
        // Torso and head shell.
        let shell = NUM_VERTICES - vertices.len();
        for k in 0..shell {
            let bone = k % 4;
            let ang = 2.0 * std::f64::consts::PI * k as f64 / shell as f64;
            vertices.push(VertexBinding {
                bone,
                group: GROUPS[bone],
                offset: [0.12 * ang.cos(), -0.06 * (k % 3) as f64, 0.1 * ang.sin()],
            });
        }
        let regressor = (0..NUM_JOINTS).map(|j| vec![(2 * j, 0.5), (2 * j + 1, 0.5)]).collect();
        let complete: Vec<usize> = (0..NUM_VERTICES).collect();
        let coarse: Vec<usize> = (0..NUM_VERTICES).step_by(2).collect();
        let sparse: Vec<usize> = (0..24).map(|k| coarse[k * 5 / 2]).collect();
        Self {
            version: TEMPLATE_VERSION,
            joint_names: NAMES.iter().map(|s| s.to_string()).collect(),
            parents,
            offsets: OFFSETS.to_vec(),
            joint_group: GROUPS.to_vec(),
            vertices,
            regressor,
            sparse,
            coarse,
            complete,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn level(&self, level: Level) -> &[usize] {
        match level {
            Level::Sparse => &self.sparse,
            Level::Coarse => &self.coarse,
            Level::Complete => &self.complete,
        }
    }

    /// Dense joint regressor, `num_vertices × num_joints` in row-major order, so
    /// that `joints = vertices · M` per coordinate.
    pub fn dense_regressor(&self) -> Vec<f64> {
        let (nv, nj) = (self.num_vertices(), self.num_joints());
        let mut m = vec![0.0; nv * nj];
        for (j, row) in self.regressor.iter().enumerate() {
            for &(v, w) in row {
                m[v * nj + j] += w;
            }
        }
        m
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        let bad = |m: String| Err(SkeletonError::InvalidTemplate(m));
        let nj = self.num_joints();
        let nv = self.num_vertices();
        if self.version != TEMPLATE_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if nj == 0 || self.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        if self.offsets.len() != nj || self.joint_group.len() != nj || self.regressor.len() != nj || self.joint_names.len() != nj {
            return bad("per-joint tables disagree in length".into());
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return bad(format!("joint {j} must have an earlier parent")),
            }
        }
        if self.offsets.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite offset".into());
        }
        if self.joint_group.iter().chain(self.vertices.iter().map(|v| &v.group)).any(|&g| g >= NUM_SHAPE) {
            return bad("shape group out of range".into());
        }
        if self.vertices.iter().any(|v| v.bone >= nj || v.offset.iter().any(|x| !x.is_finite())) {
            return bad("vertex binding out of range".into());
        }
        for row in &self.regressor {
            let sum: f64 = row.iter().map(|r| r.1).sum();
            if (sum - 1.0).abs() > 1e-12 || row.iter().any(|r| r.0 >= nv) {
                return bad("regressor rows must sum to 1 over valid vertices".into());
            }
        }
        for list in [&self.sparse, &self.coarse, &self.complete] {
            if list.windows(2).any(|w| w[0] >= w[1]) || list.iter().any(|&i| i >= nv) {
                return bad("index lists must be strictly increasing vertex indices".into());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("template serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SkeletonError> {
        let t: Self = serde_json::from_str(s).map_err(|e| SkeletonError::InvalidTemplate(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }
}

/// Shared instance of [`SkeletonTemplate::toy`].
pub fn toy_template() -> &'static SkeletonTemplate {
    static TEMPLATE: std::sync::OnceLock<SkeletonTemplate> = std::sync::OnceLock::new();
    TEMPLATE.get_or_init(SkeletonTemplate::toy)
}

#[derive(Debug, Clone)]
pub struct Posed {
    pub joints: Vec<Vector3<f64>>,
    pub vertices: Vec<Vector3<f64>>,
    /// Global rotation of every joint frame.
    pub frames: Vec<Matrix3<f64>>,
}

pub fn forward_kinematics(state: &BodyState, template: &SkeletonTemplate) -> Posed {
    let nj = template.num_joints();
    let mut frames = Vec::with_capacity(nj);
    let mut joints = Vec::with_capacity(nj);
    for j in 0..nj {
        let r = so3::exp_map(&Vector3::from(state.pose[j]));
        match template.parents[j] {
            None => {
                frames.push(r);
                joints.push(Vector3::zeros());
            }
            Some(p) => {
                let scale = state.shape[template.joint_group[j]];
                let pos = joints[p] + frames[p] * (Vector3::from(template.offsets[j]) * scale);
                frames.push(frames[p] * r);
                joints.push(pos);
            }
        }
    }
    let vertices = template
        .vertices
        .iter()
        .map(|v| joints[v.bone] + frames[v.bone] * (Vector3::from(v.offset) * state.shape[v.group]))
        .collect();
    Posed { joints, vertices, frames }
}

pub fn regress_joints(vertices: &[Vector3<f64>], template: &SkeletonTemplate) -> Result<Vec<Vector3<f64>>, SkeletonError> {
    if vertices.len() != template.num_vertices() {
        return Err(SkeletonError::ShapeMismatch { what: "vertices", expected: template.num_vertices(), got: vertices.len() });
    }
    Ok(template
        .regressor
        .iter()
        .map(|row| row.iter().fold(Vector3::zeros(), |acc, &(v, w)| acc + vertices[v] * w))
        .collect())
}

pub fn downsample(vertices: &[Vector3<f64>], level: Level, template: &SkeletonTemplate) -> Result<Vec<Vector3<f64>>, SkeletonError> {
    if vertices.len() != template.num_vertices() {
        return Err(SkeletonError::ShapeMismatch { what: "vertices", expected: template.num_vertices(), got: vertices.len() });
    }
    Ok(template.level(level).iter().map(|&i| vertices[i]).collect())
}

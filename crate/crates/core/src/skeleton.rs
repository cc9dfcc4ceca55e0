//! 17-joint skeleton topology, pose types and evaluation metrics.
//!
//! Joint order follows the Human3.6M convention:
//!
//! | idx | joint      | idx | joint       |
//! |-----|------------|-----|-------------|
//! | 0   | pelvis     | 9   | neck        |
//! | 1   | r_hip      | 10  | head        |
//! | 2   | r_knee     | 11  | l_shoulder  |
//! | 3   | r_foot     | 12  | l_elbow     |
//! | 4   | l_hip      | 13  | l_wrist     |
//! | 5   | l_knee     | 14  | r_shoulder  |
//! | 6   | l_foot     | 15  | r_elbow     |
//! | 7   | spine      | 16  | r_wrist     |
//! | 8   | thorax     |     |             |

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 17;
pub const NUM_BONES: usize = NUM_JOINTS - 1;
pub const POSE_DIM: usize = NUM_JOINTS * 3;
pub const PELVIS: usize = 0;

/// Identifier written into checkpoints and pose files.
pub const TOPOLOGY_ID: &str = "h36m-17";

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_foot",
    "l_hip",
    "l_knee",
    "l_foot",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

pub const PARENTS: [i32; NUM_JOINTS] = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];

/// Named joint sets used for completion experiments. "hip" in the spine
/// group is the H36M root joint (pelvis).
pub const PART_GROUPS: [(&str, &[usize]); 7] = [
    ("right_leg", &[1, 2, 3]),
    ("left_leg", &[4, 5, 6]),
    ("right_arm", &[14, 15, 16]),
    ("left_arm", &[11, 12, 13]),
    ("spine", &[0, 8, 9]),
    ("legs", &[1, 2, 3, 4, 5, 6]),
    ("arms", &[11, 12, 13, 14, 15, 16]),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonTopology {
    pub joint_names: Vec<&'static str>,
    pub parent: Vec<i32>,
    pub bones: Vec<(usize, usize)>,
}

impl SkeletonTopology {
    pub fn h36m() -> Self {
        let bones = (1..NUM_JOINTS).map(|j| (PARENTS[j] as usize, j)).collect();
        Self {
            joint_names: JOINT_NAMES.to_vec(),
            parent: PARENTS.to_vec(),
            bones,
        }
    }

    pub fn part_group(&self, name: &str) -> Result<&'static [usize]> {
        PART_GROUPS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, j)| *j)
            .ok_or_else(|| {
                let valid: Vec<&str> = PART_GROUPS.iter().map(|(n, _)| *n).collect();
                Error::invalid(format!(
                    "unknown part group {name:?}; valid groups: {}",
                    valid.join(", ")
                ))
            })
    }

    pub fn part_group_names() -> impl Iterator<Item = &'static str> {
        PART_GROUPS.iter().map(|(n, _)| *n)
    }
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        Self::h36m()
    }
}

/// 3D joint positions in millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub joints: [[f64; 3]; NUM_JOINTS],
}

/// 2D joint positions in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub joints: [[f64; 2]; NUM_JOINTS],
}

impl Pose3D {
    pub fn zeros() -> Self {
        Self {
            joints: [[0.0; 3]; NUM_JOINTS],
        }
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != POSE_DIM {
            return Err(Error::invalid(format!("expected {POSE_DIM} values, got {}", v.len())));
        }
        let mut p = Self::zeros();
        for (j, c) in v.chunks_exact(3).enumerate() {
            p.joints[j] = [c[0], c[1], c[2]];
        }
        Ok(p)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        let mut p = *self;
        for j in &mut p.joints {
            for k in 0..3 {
                j[k] += d[k];
            }
        }
        p
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut p = *self;
        p.joints.iter_mut().flatten().for_each(|v| *v *= s);
        p
    }
}

impl Pose2D {
    pub fn zeros() -> Self {
        Self {
            joints: [[0.0; 2]; NUM_JOINTS],
        }
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != NUM_JOINTS * 2 {
            return Err(Error::invalid(format!(
                "expected {} values, got {}",
                NUM_JOINTS * 2,
                v.len()
            )));
        }
        let mut p = Self::zeros();
        for (j, c) in v.chunks_exact(2).enumerate() {
            p.joints[j] = [c[0], c[1]];
        }
        Ok(p)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::invalid(format!("focal lengths must be positive, got fx={fx}, fy={fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 1145.0,
            fy: 1145.0,
            cx: 500.0,
            cy: 500.0,
        }
    }
}

/// Pelvis position in the camera frame, millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub pelvis_position: [f64; 3],
}

impl Trajectory {
    pub fn new(pelvis_position: [f64; 3]) -> Result<Self> {
        if !(pelvis_position[2] > 0.0) || pelvis_position.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "trajectory must lie in front of the camera, got {pelvis_position:?}"
            )));
        }
        Ok(Self { pelvis_position })
    }

    pub fn norm(&self) -> f64 {
        self.pelvis_position.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            pelvis_position: self.pelvis_position.map(|v| v * s),
        }
    }
}

/// Translates the pose so the pelvis sits at the origin.
pub fn root_center(pose: &Pose3D) -> Pose3D {
    let p = pose.joints[PELVIS];
    let mut out = pose.translated([-p[0], -p[1], -p[2]]);
    out.joints[PELVIS] = [0.0; 3];
    out
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Bone lengths in the order of `topo.bones`.
pub fn bone_lengths(pose: &Pose3D, topo: &SkeletonTopology) -> Vec<f64> {
    topo.bones
        .iter()
        .map(|&(p, c)| dist3(&pose.joints[p], &pose.joints[c]))
        .collect()
}

/// Per-joint Euclidean errors.
pub fn joint_errors(pred: &Pose3D, gt: &Pose3D) -> [f64; NUM_JOINTS] {
    std::array::from_fn(|j| dist3(&pred.joints[j], &gt.joints[j]))
}

pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> f64 {
    joint_errors(pred, gt).iter().sum::<f64>() / NUM_JOINTS as f64
}

/// MPJPE restricted to a subset of joints.
pub fn mpjpe_subset(pred: &Pose3D, gt: &Pose3D, joints: &[usize]) -> f64 {
    if joints.is_empty() {
        return 0.0;
    }
    let e = joint_errors(pred, gt);
    joints.iter().map(|&j| e[j]).sum::<f64>() / joints.len() as f64
}

/// Aligns `pred` onto `gt` with the optimal rotation, translation and
/// uniform scale (reflections excluded).
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<Pose3D> {
    let to_vecs = |p: &Pose3D| -> Vec<Vector3<f64>> {
        p.joints.iter().map(|j| Vector3::new(j[0], j[1], j[2])).collect()
    };
    let (x, y) = (to_vecs(pred), to_vecs(gt));
    let n = NUM_JOINTS as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let xc: Vec<_> = x.iter().map(|v| v - mx).collect();
    let yc: Vec<_> = y.iter().map(|v| v - my).collect();
    let var_y: f64 = yc.iter().map(|v| v.norm_squared()).sum();
    if var_y <= 1e-12 {
        return Err(Error::invalid("ground-truth pose has zero spread"));
    }
    let var_x: f64 = xc.iter().map(|v| v.norm_squared()).sum();
    if var_x <= 1e-300 {
        // A collapsed prediction aligns to the ground-truth centroid.
        let c = [my.x, my.y, my.z];
        return Ok(Pose3D {
            joints: [c; NUM_JOINTS],
        });
    }
    // Cross-covariance: gt (rows) against pred (cols).
    let mut h = Matrix3::zeros();
    for (a, b) in yc.iter().zip(&xc) {
        h += a * b.transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = svd.singular_values;
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
        s[2] = -s[2];
    }
    let rot = u * d * v_t;
    let scale = s.sum() / var_x;
    let mut out = Pose3D::zeros();
    for (j, v) in xc.iter().enumerate() {
        let w = rot * v * scale + my;
        out.joints[j] = [w.x, w.y, w.z];
    }
    Ok(out)
}

pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    Ok(mpjpe(&procrustes_align(pred, gt)?, gt))
}

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const AUC_STEP_MM: f64 = 5.0;

/// PCK at 150 mm and AUC over thresholds `0, 5, ..., threshold_max`.
/// Both are percentages.
pub fn pck_auc(preds: &[Pose3D], gts: &[Pose3D], threshold_max: f64) -> Result<(f64, f64)> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "pck_auc needs equal nonempty lists, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let errors: Vec<f64> = preds
        .iter()
        .zip(gts)
        .flat_map(|(p, g)| joint_errors(p, g))
        .collect();
    Ok(pck_auc_from_errors(&errors, threshold_max))
}

/// Same as [`pck_auc`] from a flat list of per-joint errors.
pub fn pck_auc_from_errors(errors: &[f64], threshold_max: f64) -> (f64, f64) {
    let frac_below = |thr: f64| -> f64 {
        // Strict threshold; an exact match counts as correct even at 0 mm.
        100.0 * errors.iter().filter(|&&e| e < thr || e == 0.0).count() as f64 / errors.len().max(1) as f64
    };
    let steps = (threshold_max / AUC_STEP_MM).round() as usize;
    let auc = (0..=steps).map(|i| frac_below(i as f64 * AUC_STEP_MM)).sum::<f64>() / (steps + 1) as f64;
    (frac_below(PCK_THRESHOLD_MM), auc)
}

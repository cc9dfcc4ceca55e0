//! Synthetic skeleton data, normalization and pose-file I/O.
//!
//! The generator samples joint rotations down the kinematic tree with fixed
//! segment lengths, so the resulting pose distribution carries exact bone
//! length and joint-limit constraints for the prior to learn.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{
    apply_mask, apply_noise, inverse_project_init, project_perspective, JointMask, Measurement,
    MeasurementOperator, NoiseKind,
};
use crate::skeleton::{
    bone_lengths, root_center, CameraIntrinsics, Pose2D, Pose3D, SkeletonTopology, Trajectory,
    NUM_BONES, NUM_JOINTS, PARENTS, PELVIS, POSE_DIM,
};
use crate::solvers::{Init, ProblemSpec};

/// Rest direction of each joint's incoming bone in its parent's frame.
/// Body frame: +x subject's left, +y up, +z subject's front.
const REST_DIRECTIONS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
];

/// Default segment lengths (mm), indexed by child joint 1..=16.
pub const DEFAULT_SEGMENT_LENGTHS_MM: [f64; NUM_BONES] = [
    130.0, // pelvis -> r_hip
    450.0, // thigh
    440.0, // shin
    130.0, // pelvis -> l_hip
    450.0, 440.0, //
    230.0, // pelvis -> spine
    250.0, // spine -> thorax
    120.0, // thorax -> neck
    115.0, // neck -> head
    150.0, // thorax -> l_shoulder
    280.0, // upper arm
    250.0, // forearm
    150.0, // thorax -> r_shoulder
    280.0, 250.0,
];

/// `(min, max)` of the x, y and z Euler angles (radians). The local
/// rotation is `Rz * Ry * Rx`. Joint 0 holds the global body orientation.
pub type AngleLimits = [(f64, f64); 3];

const Z: (f64, f64) = (0.0, 0.0);

pub fn default_angle_limits() -> Vec<AngleLimits> {
    use std::f64::consts::PI;
    vec![
        [(-0.2, 0.2), (-PI, PI), (-0.15, 0.15)], // global: pitch, yaw, roll
        [Z, Z, Z],
        [(-1.6, 0.5), (-0.5, 0.5), (-0.6, 0.15)], // r thigh
        [(0.0, 2.2), Z, Z],                       // r knee hinge
        [Z, Z, Z],
        [(-1.6, 0.5), (-0.5, 0.5), (-0.15, 0.6)], // l thigh
        [(0.0, 2.2), Z, Z],
        [(-0.2, 0.5), (-0.4, 0.4), (-0.25, 0.25)], // lower spine
        [(-0.2, 0.4), (-0.3, 0.3), (-0.2, 0.2)],
        [(-0.3, 0.5), (-0.5, 0.5), (-0.3, 0.3)],
        [(-0.4, 0.5), Z, (-0.3, 0.3)],
        [Z, (-0.2, 0.2), (-0.15, 0.3)],           // l shoulder girdle
        [(-2.4, 0.8), (-0.8, 0.8), (-0.2, 2.0)],  // l upper arm
        [(-2.4, 0.0), Z, Z],                      // l elbow hinge
        [Z, (-0.2, 0.2), (-0.3, 0.15)],           // r shoulder girdle
        [(-2.4, 0.8), (-0.8, 0.8), (-2.0, 0.2)],  // r upper arm
        [(-2.4, 0.0), Z, Z],                      // r elbow hinge
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticGenConfig {
    pub n_poses: usize,
    pub segment_lengths_mm: Vec<f64>,
    pub joint_angle_limits: Vec<AngleLimits>,
    pub trajectory_depth_range_mm: (f64, f64),
    /// Lateral pelvis offset as a fraction of depth, uniform in `±fraction`.
    pub lateral_fraction: f64,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        Self {
            n_poses: 5000,
            segment_lengths_mm: DEFAULT_SEGMENT_LENGTHS_MM.to_vec(),
            joint_angle_limits: default_angle_limits(),
            trajectory_depth_range_mm: (4000.0, 7000.0),
            lateral_fraction: 0.1,
            intrinsics: CameraIntrinsics::default(),
            seed: 0,
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_lengths_mm.len() != NUM_BONES || self.segment_lengths_mm.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::invalid(format!("need {NUM_BONES} positive segment lengths")));
        }
        if self.joint_angle_limits.len() != NUM_JOINTS
            || self.joint_angle_limits.iter().flatten().any(|(lo, hi)| !(lo <= hi))
        {
            return Err(Error::invalid(format!("need {NUM_JOINTS} angle-limit triples with min <= max")));
        }
        let (lo, hi) = self.trajectory_depth_range_mm;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid(format!("depth range must satisfy 0 < min <= max, got ({lo}, {hi})")));
        }
        if !(self.lateral_fraction >= 0.0) {
            return Err(Error::invalid("lateral_fraction must be non-negative"));
        }
        CameraIntrinsics::new(self.intrinsics.fx, self.intrinsics.fy, self.intrinsics.cx, self.intrinsics.cy)?;
        Ok(())
    }

    pub fn average_bone_mm(&self) -> f64 {
        self.segment_lengths_mm.iter().sum::<f64>() / NUM_BONES as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseRecord {
    pub id: u64,
    /// Absolute camera-frame joints.
    pub pose3d: Pose3D,
    pub trajectory: Trajectory,
    pub intrinsics: CameraIntrinsics,
    pub pose2d: Option<Pose2D>,
}

impl PoseRecord {
    pub fn rooted(&self) -> Pose3D {
        root_center(&self.pose3d)
    }
}

/// Body frame to camera frame: subject facing the camera, image y down.
fn body_to_camera(v: Vector3<f64>) -> [f64; 3] {
    [v.x, -v.y, -v.z]
}

/// Pelvis-rooted camera-frame pose from per-joint Euler angles.
pub fn pose_from_angles(angles: &[[f64; 3]; NUM_JOINTS], lengths: &[f64]) -> Pose3D {
    let mut frames = [Rotation3::identity(); NUM_JOINTS];
    let mut pos = [Vector3::zeros(); NUM_JOINTS];
    let local = |a: &[f64; 3]| Rotation3::from_euler_angles(a[0], a[1], a[2]);
    frames[PELVIS] = local(&angles[PELVIS]);
    // Parents precede children in joint order.
    for j in 1..NUM_JOINTS {
        let p = PARENTS[j] as usize;
        let frame = frames[p] * local(&angles[j]);
        let dir = Vector3::from(REST_DIRECTIONS[j]);
        pos[j] = pos[p] + frame * dir * lengths[j - 1];
        frames[j] = frame;
    }
    let mut out = Pose3D::zeros();
    for j in 0..NUM_JOINTS {
        out.joints[j] = body_to_camera(pos[j]);
    }
    out
}

fn sample_angles(limits: &[AngleLimits], rng: &mut impl Rng) -> [[f64; 3]; NUM_JOINTS] {
    std::array::from_fn(|j| {
        std::array::from_fn(|k| {
            let (lo, hi) = limits[j][k];
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        })
    })
}

/// Generates records together with the joint angles that produced them.
pub fn generate_with_angles(cfg: &SyntheticGenConfig) -> Result<Vec<(PoseRecord, [[f64; 3]; NUM_JOINTS])>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dmin, dmax) = cfg.trajectory_depth_range_mm;
    let mut out = Vec::with_capacity(cfg.n_poses);
    for id in 0..cfg.n_poses as u64 {
        let angles = sample_angles(&cfg.joint_angle_limits, &mut rng);
        let rooted = pose_from_angles(&angles, &cfg.segment_lengths_mm);
        let z = if dmin == dmax { dmin } else { rng.random_range(dmin..=dmax) };
        let lat = cfg.lateral_fraction * z;
        let (x, y) = if lat > 0.0 {
            (rng.random_range(-lat..=lat), rng.random_range(-lat..=lat))
        } else {
            (0.0, 0.0)
        };
        let trajectory = Trajectory::new([x, y, z])?;
        let pose2d = project_perspective(&rooted, &trajectory, &cfg.intrinsics)?;
        let record = PoseRecord {
            id,
            pose3d: rooted.translated(trajectory.pelvis_position),
            trajectory,
            intrinsics: cfg.intrinsics,
            pose2d: Some(pose2d),
        };
        out.push((record, angles));
    }
    Ok(out)
}

/// Forward-kinematics sampling of a synthetic dataset; deterministic given
/// `cfg.seed`.
pub fn generate_synthetic_dataset(cfg: &SyntheticGenConfig) -> Result<Vec<PoseRecord>> {
    Ok(generate_with_angles(cfg)?.into_iter().map(|(r, _)| r).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationInfo {
    pub scale_mm: f64,
}

impl NormalizationInfo {
    pub fn new(scale_mm: f64) -> Result<Self> {
        if !(scale_mm > 0.0 && scale_mm.is_finite()) {
            return Err(Error::invalid(format!("normalization scale must be positive, got {scale_mm}")));
        }
        Ok(Self { scale_mm })
    }

    /// Millimeters to model units (no re-rooting).
    pub fn to_model(&self, pose: &Pose3D) -> Vec<f64> {
        pose.to_flat().iter().map(|v| v / self.scale_mm).collect()
    }

    pub fn from_model(&self, v: &[f64]) -> Result<Pose3D> {
        let mm: Vec<f64> = v.iter().map(|x| x * self.scale_mm).collect();
        Pose3D::from_flat(&mm)
    }

    /// Pelvis-rooted pose in model units.
    pub fn normalize(&self, pose: &Pose3D) -> Vec<f64> {
        self.to_model(&root_center(pose))
    }
}

/// RMS of the rooted non-pelvis joint coordinates.
pub fn compute_normalization(records: &[PoseRecord]) -> Result<NormalizationInfo> {
    if records.is_empty() {
        return Err(Error::invalid("cannot normalize an empty dataset"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in records {
        let p = r.rooted();
        for j in (0..NUM_JOINTS).filter(|&j| j != PELVIS) {
            sum += p.joints[j].iter().map(|v| v * v).sum::<f64>();
            n += 3;
        }
    }
    NormalizationInfo::new((sum / n as f64).sqrt())
}

/// Mean of the rooted poses.
pub fn mean_rooted_pose(records: &[PoseRecord]) -> Result<Pose3D> {
    if records.is_empty() {
        return Err(Error::invalid("cannot average an empty dataset"));
    }
    let mut acc = [0.0; POSE_DIM];
    for r in records {
        for (a, v) in acc.iter_mut().zip(r.rooted().to_flat()) {
            *a += v;
        }
    }
    let n = records.len() as f64;
    Pose3D::from_flat(&acc.map(|a| a / n))
}

/// Mean bone length over a dataset.
pub fn average_bone_length(records: &[PoseRecord]) -> f64 {
    let topo = SkeletonTopology::h36m();
    let total: f64 = records.iter().map(|r| bone_lengths(&r.pose3d, &topo).iter().sum::<f64>()).sum();
    total / (records.len().max(1) * NUM_BONES) as f64
}

pub const POSE_FILE_HEADER: &str = "# pads-pose-file v1 topology=h36m-17";

/// Field layout of the pose file, printed by `pads format-spec`.
pub fn pose_file_format_spec() -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{POSE_FILE_HEADER}");
    let _ = writeln!(s, "# one record per line, comma separated, no spaces");
    let _ = writeln!(s, "# field 1        id            unsigned integer");
    let _ = writeln!(s, "# fields 2-52    pose3d        17 joints x (x,y,z), mm, camera frame, absolute");
    let _ = writeln!(s, "# fields 53-55   trajectory    pelvis (x,y,z), mm, camera frame");
    let _ = writeln!(s, "# fields 56-59   intrinsics    fx, fy, cx, cy (pixels)");
    let _ = writeln!(s, "# fields 60-93   pose2d        optional; 17 joints x (u,v), pixels");
    let _ = writeln!(s, "# joint order    {}", crate::skeleton::JOINT_NAMES.join(","));
    let _ = writeln!(s, "# numbers use scientific notation with 17 significant digits");
    s
}

fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_pose_records(records: &[PoseRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "{POSE_FILE_HEADER}")?;
    for r in records {
        let mut fields = vec![r.id.to_string()];
        fields.extend(r.pose3d.to_flat().into_iter().map(fmt_num));
        fields.extend(r.trajectory.pelvis_position.iter().copied().map(fmt_num));
        let k = r.intrinsics;
        fields.extend([k.fx, k.fy, k.cx, k.cy].into_iter().map(fmt_num));
        if let Some(p2) = &r.pose2d {
            fields.extend(p2.to_flat().into_iter().map(fmt_num));
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn save_pose_file(records: &[PoseRecord], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_pose_records(records, &mut w)?;
    w.flush()?;
    Ok(())
}

fn parse_record(line: &str, lineno: usize) -> Result<PoseRecord> {
    let err = |msg: String| Error::Parse { line: lineno, msg };
    let fields: Vec<&str> = line.split(',').collect();
    let n_values = fields.len() - 1;
    let with_2d = 51 + 3 + 4 + 34;
    if n_values != 51 + 3 + 4 && n_values != with_2d {
        return Err(err(format!(
            "expected 58 or 92 numeric fields after the id, found {n_values}"
        )));
    }
    let id = fields[0]
        .trim()
        .parse::<u64>()
        .map_err(|e| err(format!("bad id {:?}: {e}", fields[0])))?;
    let mut vals = Vec::with_capacity(n_values);
    for (i, f) in fields[1..].iter().enumerate() {
        let v = f
            .trim()
            .parse::<f64>()
            .map_err(|e| err(format!("field {}: {e}", i + 2)))?;
        if !v.is_finite() {
            return Err(err(format!("field {} is not finite", i + 2)));
        }
        vals.push(v);
    }
    let pose3d = Pose3D::from_flat(&vals[..51]).map_err(|e| err(e.to_string()))?;
    let trajectory =
        Trajectory::new([vals[51], vals[52], vals[53]]).map_err(|e| err(e.to_string()))?;
    let intrinsics =
        CameraIntrinsics::new(vals[54], vals[55], vals[56], vals[57]).map_err(|e| err(e.to_string()))?;
    let pose2d = if n_values == with_2d {
        Some(Pose2D::from_flat(&vals[58..]).map_err(|e| err(e.to_string()))?)
    } else {
        None
    };
    Ok(PoseRecord {
        id,
        pose3d,
        trajectory,
        intrinsics,
        pose2d,
    })
}

pub fn read_pose_records(r: impl BufRead) -> Result<Vec<PoseRecord>> {
    let mut out = Vec::new();
    let mut saw_header = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("# pads-pose-file ") {
            let version = rest.split_whitespace().next().unwrap_or("");
            if version != "v1" {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unsupported pose file version {version:?}"),
                });
            }
            saw_header = true;
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        if !saw_header {
            return Err(Error::Parse {
                line: lineno,
                msg: "missing pose file header".into(),
            });
        }
        out.push(parse_record(trimmed, lineno)?);
    }
    Ok(out)
}

pub fn load_pose_file(path: impl AsRef<Path>) -> Result<Vec<PoseRecord>> {
    let file = std::fs::File::open(path)?;
    read_pose_records(BufReader::new(file))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateInit {
    InverseProjection,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskParams {
    /// `depth_scale` multiplies the trajectory handed to the solver.
    Estimate { init: EstimateInit, depth_scale: f64 },
    Denoise { kind: NoiseKind, intensity: f64 },
    Complete { group: String },
}

/// One benchmark problem with its answer.
#[derive(Clone, Debug)]
pub struct TaskSample {
    pub id: u64,
    pub problem: ProblemSpec,
    /// Pelvis-rooted.
    pub ground_truth: Pose3D,
    /// Joints hidden from the solver (completion only).
    pub masked_joints: Vec<usize>,
}

/// Builds solver problems from records.
///
/// `mean_pose` fills masked joints for completion; `avg_bone_mm` sets the
/// denoising noise scale.
pub fn make_task_dataset(
    records: &[PoseRecord],
    task: &TaskParams,
    mean_pose: &Pose3D,
    avg_bone_mm: f64,
    rng: &mut impl Rng,
) -> Result<Vec<TaskSample>> {
    let topo = SkeletonTopology::h36m();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let gt = r.rooted();
        let sample = match task {
            TaskParams::Estimate { init, depth_scale } => {
                if !(*depth_scale > 0.0) {
                    return Err(Error::invalid(format!("depth_scale must be positive, got {depth_scale}")));
                }
                let y = match r.pose2d {
                    Some(p) => p,
                    None => project_perspective(&gt, &r.trajectory, &r.intrinsics)?,
                };
                let traj = r.trajectory.scaled(*depth_scale);
                let init = match init {
                    EstimateInit::InverseProjection => Init::Pose(inverse_project_init(&y, &r.intrinsics, &traj)?),
                    EstimateInit::Random => Init::Gaussian,
                };
                TaskSample {
                    id: r.id,
                    problem: ProblemSpec::new(
                        MeasurementOperator::projection(r.intrinsics, traj)?,
                        Measurement::Points2D(y),
                        init,
                    )?,
                    ground_truth: gt,
                    masked_joints: vec![],
                }
            }
            TaskParams::Denoise { kind, intensity } => {
                let noisy = apply_noise(&gt, *kind, *intensity, avg_bone_mm, rng)?;
                TaskSample {
                    id: r.id,
                    problem: ProblemSpec::new(
                        MeasurementOperator::additive_noise(*kind, intensity * avg_bone_mm)?,
                        Measurement::Points3D {
                            pose: noisy,
                            mask: JointMask::all(),
                        },
                        Init::Pose(noisy),
                    )?,
                    ground_truth: gt,
                    masked_joints: vec![],
                }
            }
            TaskParams::Complete { group } => {
                let hidden = topo.part_group(group)?;
                let mask = JointMask::hiding(hidden)?;
                let y = apply_mask(&gt, &mask)?;
                let mut init = gt;
                for &j in hidden {
                    init.joints[j] = mean_pose.joints[j];
                }
                TaskSample {
                    id: r.id,
                    problem: ProblemSpec::new(MeasurementOperator::masking(mask)?, y, Init::Pose(init))?,
                    ground_truth: gt,
                    masked_joints: hidden.to_vec(),
                }
            }
        };
        out.push(sample);
    }
    Ok(out)
}

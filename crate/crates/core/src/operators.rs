//! Measurement operators: perspective projection, additive noise and joint
//! masking, with plain and on-tape residuals.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::skeleton::{CameraIntrinsics, Pose2D, Pose3D, Trajectory, NUM_JOINTS, PELVIS, POSE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::invalid(format!("unknown noise kind {s:?} (expected gaussian or uniform)"))),
        }
    }
}

/// `true` marks an observed joint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JointMask(pub [bool; NUM_JOINTS]);

impl JointMask {
    pub fn all() -> Self {
        Self([true; NUM_JOINTS])
    }

    /// Observes everything except `hidden`.
    pub fn hiding(hidden: &[usize]) -> Result<Self> {
        let mut m = [true; NUM_JOINTS];
        for &j in hidden {
            if j >= NUM_JOINTS {
                return Err(Error::invalid(format!("joint index {j} out of range")));
            }
            m[j] = false;
        }
        Ok(Self(m))
    }

    pub fn observed(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn n_observed(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Per-coordinate 0/1 weights, length 51.
    pub fn coord_weights(&self) -> [f64; POSE_DIM] {
        std::array::from_fn(|i| if self.0[i / 3] { 1.0 } else { 0.0 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MeasurementOperator {
    Projection {
        intrinsics: CameraIntrinsics,
        trajectory: Trajectory,
    },
    AdditiveNoise {
        kind: NoiseKind,
        sigma_mm: f64,
    },
    Masking {
        mask: JointMask,
    },
}

impl MeasurementOperator {
    pub fn projection(intrinsics: CameraIntrinsics, trajectory: Trajectory) -> Result<Self> {
        if !(trajectory.pelvis_position[2] > 0.0) {
            return Err(Error::invalid("projection trajectory must have positive depth"));
        }
        Ok(Self::Projection { intrinsics, trajectory })
    }

    pub fn additive_noise(kind: NoiseKind, sigma_mm: f64) -> Result<Self> {
        if !(sigma_mm >= 0.0 && sigma_mm.is_finite()) {
            return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma_mm}")));
        }
        Ok(Self::AdditiveNoise { kind, sigma_mm })
    }

    pub fn masking(mask: JointMask) -> Result<Self> {
        if mask.n_observed() == 0 {
            return Err(Error::invalid("mask must observe at least one joint"));
        }
        Ok(Self::Masking { mask })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Projection { .. } => "projection",
            Self::AdditiveNoise { .. } => "additive_noise",
            Self::Masking { .. } => "masking",
        }
    }

    /// Noise-free forward model `f(x)` on a rooted pose.
    pub fn forward(&self, x: &Pose3D) -> Result<Measurement> {
        match self {
            Self::Projection { intrinsics, trajectory } => {
                Ok(Measurement::Points2D(project_perspective(x, trajectory, intrinsics)?))
            }
            Self::AdditiveNoise { .. } => Ok(Measurement::Points3D {
                pose: *x,
                mask: JointMask::all(),
            }),
            Self::Masking { mask } => apply_mask(x, mask),
        }
    }

    /// Coordinates the measurement pins exactly, as 0/1 weights.
    pub fn observed_coords(&self) -> Option<[f64; POSE_DIM]> {
        match self {
            Self::Projection { .. } => None,
            Self::AdditiveNoise { .. } => Some([1.0; POSE_DIM]),
            Self::Masking { mask } => Some(mask.coord_weights()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Measurement {
    Points2D(Pose2D),
    /// Unobserved joints are zero.
    Points3D { pose: Pose3D, mask: JointMask },
}

/// Pinhole projection of a rooted pose placed at `traj`.
pub fn project_perspective(pose: &Pose3D, traj: &Trajectory, k: &CameraIntrinsics) -> Result<Pose2D> {
    let mut out = Pose2D::zeros();
    for (j, p) in pose.joints.iter().enumerate() {
        let w = [
            p[0] + traj.pelvis_position[0],
            p[1] + traj.pelvis_position[1],
            p[2] + traj.pelvis_position[2],
        ];
        if !(w[2] > 0.0) {
            return Err(Error::NonFinite(format!(
                "joint {j} has non-positive camera depth {}",
                w[2]
            )));
        }
        out.joints[j] = [k.fx * w[0] / w[2] + k.cx, k.fy * w[1] / w[2] + k.cy];
    }
    Ok(out)
}

/// Perturbs every coordinate with noise of scale `intensity * avg_bone_mm`.
/// Uniform noise is drawn from `[-s, s]` with `s` that scale.
pub fn apply_noise(
    pose: &Pose3D,
    kind: NoiseKind,
    intensity: f64,
    avg_bone_mm: f64,
    rng: &mut impl Rng,
) -> Result<Pose3D> {
    if !(intensity >= 0.0) || !(avg_bone_mm > 0.0) {
        return Err(Error::invalid(format!(
            "noise intensity must be >= 0 and bone length > 0, got {intensity}, {avg_bone_mm}"
        )));
    }
    let s = intensity * avg_bone_mm;
    let mut out = *pose;
    for j in out.joints.iter_mut() {
        for c in j.iter_mut() {
            let n = match kind {
                NoiseKind::Gaussian => {
                    let z: f64 = StandardNormal.sample(rng);
                    z
                }
                NoiseKind::Uniform => rng.random_range(-1.0..=1.0),
            };
            *c += s * n;
        }
    }
    Ok(out)
}

/// Zeroes unobserved joints.
pub fn apply_mask(pose: &Pose3D, mask: &JointMask) -> Result<Measurement> {
    if mask.n_observed() == 0 {
        return Err(Error::invalid("mask must observe at least one joint"));
    }
    let mut out = *pose;
    for (j, p) in out.joints.iter_mut().enumerate() {
        if !mask.observed(j) {
            *p = [0.0; 3];
        }
    }
    Ok(Measurement::Points3D { pose: out, mask: *mask })
}

/// Places each joint on its pixel ray at distance `||T||` from the camera,
/// then re-centers on the pelvis.
pub fn inverse_project_init(p2d: &Pose2D, k: &CameraIntrinsics, traj: &Trajectory) -> Result<Pose3D> {
    let dist = traj.norm();
    if !(dist > 0.0) {
        return Err(Error::invalid("trajectory must be nonzero"));
    }
    let mut pts = [[0.0; 3]; NUM_JOINTS];
    for (j, uv) in p2d.joints.iter().enumerate() {
        let ray = [(uv[0] - k.cx) / k.fx, (uv[1] - k.cy) / k.fy, 1.0];
        let n = (ray[0] * ray[0] + ray[1] * ray[1] + 1.0).sqrt();
        pts[j] = ray.map(|r| r / n * dist);
    }
    let mut out = Pose3D::zeros();
    for j in 0..NUM_JOINTS {
        for c in 0..3 {
            out.joints[j][c] = pts[j][c] - pts[PELVIS][c];
        }
    }
    Ok(out)
}

fn check_pair(op: &MeasurementOperator, y: &Measurement) -> Result<()> {
    match (op, y) {
        (MeasurementOperator::Projection { .. }, Measurement::Points2D(_)) => Ok(()),
        (MeasurementOperator::AdditiveNoise { .. } | MeasurementOperator::Masking { .. }, Measurement::Points3D { .. }) => {
            Ok(())
        }
        _ => Err(Error::invalid(format!(
            "measurement type does not match {} operator",
            op.kind_name()
        ))),
    }
}

/// Squared residual `||y - f(x)||^2` in the measurement's units (pixels or mm).
pub fn residual(op: &MeasurementOperator, x: &Pose3D, y: &Measurement) -> Result<f64> {
    check_pair(op, y)?;
    let fx = op.forward(x)?;
    Ok(match (&fx, y) {
        (Measurement::Points2D(a), Measurement::Points2D(b)) => a
            .to_flat()
            .iter()
            .zip(b.to_flat())
            .map(|(p, q)| (p - q).powi(2))
            .sum(),
        (Measurement::Points3D { pose: a, .. }, Measurement::Points3D { pose: b, .. }) => {
            let w = op.observed_coords().unwrap_or([1.0; POSE_DIM]);
            a.to_flat()
                .iter()
                .zip(b.to_flat())
                .zip(w)
                .map(|((p, q), w)| w * (p - q).powi(2))
                .sum()
        }
        _ => unreachable!("checked pair"),
    })
}

/// Pseudo-inverse of the linearized operator applied to `y - f(x)`, in mm.
///
/// Projection uses the per-joint 2x3 Jacobian at `x`; 3D operators use the
/// observation mask.
pub fn pinv_residual(op: &MeasurementOperator, x: &Pose3D, y: &Measurement) -> Result<[f64; POSE_DIM]> {
    check_pair(op, y)?;
    let mut out = [0.0; POSE_DIM];
    match (op, y) {
        (MeasurementOperator::Projection { intrinsics: k, trajectory }, Measurement::Points2D(obs)) => {
            let pred = project_perspective(x, trajectory, k)?;
            for j in 0..NUM_JOINTS {
                let t = trajectory.pelvis_position;
                let w = [x.joints[j][0] + t[0], x.joints[j][1] + t[1], x.joints[j][2] + t[2]];
                let jac = [
                    [k.fx / w[2], 0.0, -k.fx * w[0] / (w[2] * w[2])],
                    [0.0, k.fy / w[2], -k.fy * w[1] / (w[2] * w[2])],
                ];
                let r = [obs.joints[j][0] - pred.joints[j][0], obs.joints[j][1] - pred.joints[j][1]];
                // J^T (J J^T)^{-1} r
                let g = |a: usize, b: usize| (0..3).map(|c| jac[a][c] * jac[b][c]).sum::<f64>();
                let (a, b, d) = (g(0, 0), g(0, 1), g(1, 1));
                let det = a * d - b * b;
                if !(det.abs() > 0.0) {
                    return Err(Error::NonFinite(format!("singular projection Jacobian at joint {j}")));
                }
                let s = [(d * r[0] - b * r[1]) / det, (a * r[1] - b * r[0]) / det];
                for c in 0..3 {
                    out[3 * j + c] = jac[0][c] * s[0] + jac[1][c] * s[1];
                }
            }
        }
        (_, Measurement::Points3D { pose, .. }) => {
            let w = op.observed_coords().expect("3D operator");
            let (xf, yf) = (x.to_flat(), pose.to_flat());
            for i in 0..POSE_DIM {
                out[i] = w[i] * (yf[i] - xf[i]);
            }
        }
        _ => unreachable!("checked pair"),
    }
    Ok(out)
}

/// Summed squared residual of a batch on the tape.
///
/// `x0` is `[B, 51]` in model units (mm divided by `scale_mm`). Projection
/// residuals are in pixels; 3D residuals are in model units. All operators
/// in the batch must be of the same kind.
pub fn batch_residual(
    tape: &mut Tape,
    ops: &[&MeasurementOperator],
    ys: &[&Measurement],
    x0: Var,
    scale_mm: f64,
) -> Result<Var> {
    let b = ops.len();
    if b == 0 || ys.len() != b || tape.shape(x0) != [b, POSE_DIM] {
        return Err(Error::Shape {
            op: "batch_residual",
            lhs: tape.shape(x0).to_vec(),
            rhs: vec![b, POSE_DIM],
        });
    }
    for (op, y) in ops.iter().zip(ys) {
        check_pair(op, y)?;
        if std::mem::discriminant(*op) != std::mem::discriminant(ops[0]) {
            return Err(Error::Unsupported("mixed operator kinds in one batch".into()));
        }
    }
    match ops[0] {
        MeasurementOperator::Projection { .. } => {
            let n = b * NUM_JOINTS;
            let mut tvals = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            let (mut f, mut c, mut obs) = ([vec![0.0; n], vec![0.0; n]], [vec![0.0; n], vec![0.0; n]], [
                vec![0.0; n],
                vec![0.0; n],
            ]);
            for (i, (op, y)) in ops.iter().zip(ys).enumerate() {
                let (MeasurementOperator::Projection { intrinsics: k, trajectory }, Measurement::Points2D(p)) = (op, y)
                else {
                    unreachable!("checked pair")
                };
                for j in 0..NUM_JOINTS {
                    let r = i * NUM_JOINTS + j;
                    for a in 0..3 {
                        tvals[a][r] = trajectory.pelvis_position[a] / scale_mm;
                    }
                    f[0][r] = k.fx;
                    f[1][r] = k.fy;
                    c[0][r] = k.cx;
                    c[1][r] = k.cy;
                    obs[0][r] = p.joints[j][0];
                    obs[1][r] = p.joints[j][1];
                }
            }
            let shape = vec![b, NUM_JOINTS, 1];
            let cst = |tape: &mut Tape, v: Vec<f64>| -> Result<Var> {
                Ok(tape.constant(Tensor::new(shape.clone(), v)?))
            };
            let pts = tape.reshape(x0, &[b, NUM_JOINTS, 3])?;
            let xyz = tape.split_last(pts, &[1, 1, 1])?;
            let [tx, ty, tz] = tvals;
            let (tx, ty, tz) = (cst(tape, tx)?, cst(tape, ty)?, cst(tape, tz)?);
            let wx = tape.add(xyz[0], tx)?;
            let wy = tape.add(xyz[1], ty)?;
            let wz = tape.add(xyz[2], tz)?;
            if let Some(z) = tape.value(wz).data().iter().find(|&&z| !(z > 0.0)) {
                return Err(Error::NonFinite(format!(
                    "estimate has non-positive camera depth {} mm",
                    z * scale_mm
                )));
            }
            let [fx, fy] = f;
            let [cx, cy] = c;
            let [ou, ov] = obs;
            let mut total = None;
            for (w, fv, cv, ov) in [(wx, fx, cx, ou), (wy, fy, cy, ov)] {
                let q = tape.div(w, wz)?;
                let fv = cst(tape, fv)?;
                let q = tape.mul(q, fv)?;
                let off: Vec<f64> = cv.iter().zip(&ov).map(|(c, o)| c - o).collect();
                let off = cst(tape, off)?;
                let r = tape.add(q, off)?;
                let s = tape.sum_square(r);
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
            Ok(total.expect("two image axes"))
        }
        _ => {
            let mut target = Vec::with_capacity(b * POSE_DIM);
            let mut weights = Vec::with_capacity(b * POSE_DIM);
            for (op, y) in ops.iter().zip(ys) {
                let Measurement::Points3D { pose, .. } = y else { unreachable!("checked pair") };
                target.extend(pose.to_flat().iter().map(|v| v / scale_mm));
                weights.extend(op.observed_coords().expect("3D operator"));
            }
            let target = tape.constant(Tensor::new(vec![b, POSE_DIM], target)?);
            let weights = tape.constant(Tensor::new(vec![b, POSE_DIM], weights)?);
            let d = tape.sub(x0, target)?;
            let d = tape.mul(d, weights)?;
            Ok(tape.sum_square(d))
        }
    }
}

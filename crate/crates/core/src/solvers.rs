//! Guided reverse-diffusion solvers (DPS, MCG, PiGDM) and unconditional
//! sampling.
//!
//! All solvers share one batched loop. Samples in a batch never interact:
//! the network treats rows independently, so the gradient of the summed
//! residual is the per-sample gradient, and each sample draws its noise from
//! its own generator keyed by `(seed, sample id)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::denoiser::{forward, noise_key, PoseModel};
use crate::diffusion::{ddim_step_from_x0, ddpm_step_from_x0, make_step_plan, StepPlan};
use crate::error::{Error, Result};
use crate::operators::{batch_residual, pinv_residual, Measurement, MeasurementOperator};
use crate::skeleton::{root_center, Pose3D, POSE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Dps,
    Mcg,
    Pigdm,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dps => "dps",
            Self::Mcg => "mcg",
            Self::Pigdm => "pigdm",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dps" => Ok(Self::Dps),
            "mcg" => Ok(Self::Mcg),
            "pigdm" => Ok(Self::Pigdm),
            _ => Err(Error::invalid(format!("unknown solver {s:?} (expected dps, mcg or pigdm)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Ancestral steps; requires consecutive timesteps.
    Ddpm,
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            _ => Err(Error::invalid(format!("unknown sampler {s:?} (expected ddpm or ddim)"))),
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "diffused" => Ok(Self::Diffused),
            _ => Err(Error::invalid(format!("unknown init mode {s:?} (expected direct or diffused)"))),
        }
    }
}

/// How a pose init enters the chain at the truncation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// `x_N = init`.
    Direct,
    /// `x_N = q_sample(init, N)`.
    Diffused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub solver: SolverKind,
    pub sampler: SamplerKind,
    pub truncation: usize,
    pub n_steps: usize,
    pub eta: f64,
    pub rho: f64,
    /// Per-step guidance scales, one per planned step; overrides `rho`.
    pub rho_schedule: Option<Vec<f64>>,
    /// Treat the predicted noise as constant when differentiating.
    pub freeze_eps: bool,
    pub init_mode: InitMode,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Dps,
            sampler: SamplerKind::Ddpm,
            truncation: 450,
            n_steps: 450,
            eta: 1.0,
            rho: 0.003,
            rho_schedule: None,
            freeze_eps: false,
            init_mode: InitMode::Direct,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn plan(&self, model: &PoseModel) -> Result<StepPlan> {
        if !(self.rho >= 0.0) {
            return Err(Error::invalid(format!("rho must be >= 0, got {}", self.rho)));
        }
        let plan = make_step_plan(self.truncation, self.n_steps, self.eta, &model.schedule)?;
        if self.sampler == SamplerKind::Ddpm && !plan.is_consecutive() {
            return Err(Error::invalid(format!(
                "ddpm sampler needs n_steps == truncation, got {} and {}",
                self.n_steps, self.truncation
            )));
        }
        if let Some(s) = &self.rho_schedule {
            if s.len() != self.n_steps || s.iter().any(|r| !(*r >= 0.0)) {
                return Err(Error::invalid(format!(
                    "rho_schedule needs {} non-negative entries, got {}",
                    self.n_steps,
                    s.len()
                )));
            }
        }
        Ok(plan)
    }

    fn rho_at(&self, step: usize) -> f64 {
        self.rho_schedule.as_ref().map_or(self.rho, |s| s[step])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Rooted pose in millimeters.
    Pose(Pose3D),
    /// Standard normal in model space.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub operator: MeasurementOperator,
    pub measurement: Measurement,
    pub init: Init,
}

impl ProblemSpec {
    pub fn new(operator: MeasurementOperator, measurement: Measurement, init: Init) -> Result<Self> {
        let ok = matches!(
            (&operator, &measurement),
            (MeasurementOperator::Projection { .. }, Measurement::Points2D(_))
                | (
                    MeasurementOperator::AdditiveNoise { .. } | MeasurementOperator::Masking { .. },
                    Measurement::Points3D { .. }
                )
        );
        if !ok {
            return Err(Error::invalid(format!(
                "measurement type does not match {} operator",
                operator.kind_name()
            )));
        }
        Ok(Self {
            operator,
            measurement,
            init,
        })
    }

    /// The init as a pose, if it is one.
    pub fn init_pose(&self) -> Option<&Pose3D> {
        match &self.init {
            Init::Pose(p) => Some(p),
            Init::Gaussian => None,
        }
    }
}

/// Fails early for solver/operator pairs that cannot run.
pub fn check_compatible(solver: SolverKind, op: &MeasurementOperator) -> Result<()> {
    if solver == SolverKind::Mcg && matches!(op, MeasurementOperator::Projection { .. }) {
        return Err(Error::Unsupported(
            "mcg needs a linear operator; projection is nonlinear".into(),
        ));
    }
    Ok(())
}

fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(noise_key(seed, 0x5017_E500, id))
}

fn normals(rng: &mut ChaCha8Rng) -> [f64; POSE_DIM] {
    std::array::from_fn(|_| StandardNormal.sample(rng))
}

/// Posterior mean `x0_hat(x_t)` on the tape.
fn x0_on_tape(tape: &mut Tape, model: &PoseModel, x: Var, t: &[usize], freeze_eps: bool) -> Result<(Var, Var)> {
    let bound = model.params.bind(tape, false);
    let mut eps = forward(tape, &bound, &model.config, x, t)?;
    if freeze_eps {
        eps = tape.constant(tape.value(eps).clone());
    }
    let b = t.len();
    let mut a = Vec::with_capacity(b * POSE_DIM);
    let mut c = Vec::with_capacity(b * POSE_DIM);
    for &ti in t {
        let ab = model.schedule.alpha_bar(ti);
        a.extend(std::iter::repeat_n(1.0 / ab.sqrt(), POSE_DIM));
        c.extend(std::iter::repeat_n(-(1.0 - ab).sqrt() / ab.sqrt(), POSE_DIM));
    }
    let a = tape.constant(Tensor::new(vec![b, POSE_DIM], a)?);
    let c = tape.constant(Tensor::new(vec![b, POSE_DIM], c)?);
    let xa = tape.mul(x, a)?;
    let ec = tape.mul(eps, c)?;
    Ok((tape.add(xa, ec)?, eps))
}

/// DPS guidance objective and its gradient with respect to `x_t`.
///
/// `x_t` is `[B, 51]` in model units; returns the summed residual of
/// `f(x0_hat(x_t))` and `d residual / d x_t`.
pub fn dps_guidance(
    model: &PoseModel,
    problems: &[&ProblemSpec],
    x_t: &Tensor,
    t: usize,
    freeze_eps: bool,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.leaf(x_t.clone());
    let ts = vec![t; problems.len()];
    let (x0, _) = x0_on_tape(&mut tape, model, x, &ts, freeze_eps)?;
    let ops: Vec<&MeasurementOperator> = problems.iter().map(|p| &p.operator).collect();
    let ys: Vec<&Measurement> = problems.iter().map(|p| &p.measurement).collect();
    let r = batch_residual(&mut tape, &ops, &ys, x0, model.normalization.scale_mm)?;
    let g = tape.backward(r)?.wrt(x);
    Ok((tape.value(r).item()?, g))
}

/// Solves a batch of problems with the configured solver. `ids` key each
/// sample's noise, so results do not depend on batch composition.
pub fn solve_batch(model: &PoseModel, problems: &[ProblemSpec], cfg: &SolverConfig, ids: &[u64]) -> Result<Vec<Pose3D>> {
    if problems.len() != ids.len() {
        return Err(Error::invalid("one id per problem required"));
    }
    for p in problems {
        check_compatible(cfg.solver, &p.operator)?;
    }
    if let Some(first) = problems.first() {
        if problems
            .iter()
            .any(|p| std::mem::discriminant(&p.operator) != std::mem::discriminant(&first.operator))
        {
            return Err(Error::Unsupported("mixed operator kinds in one batch".into()));
        }
    }
    let plan = cfg.plan(model)?;
    let inits: Vec<&Init> = problems.iter().map(|p| &p.init).collect();
    run_chain(model, Some(problems), &inits, &plan, cfg, ids)
}

fn run_chain(
    model: &PoseModel,
    problems: Option<&[ProblemSpec]>,
    inits: &[&Init],
    plan: &StepPlan,
    cfg: &SolverConfig,
    ids: &[u64],
) -> Result<Vec<Pose3D>> {
    let b = inits.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    let sched = &model.schedule;
    let norm = &model.normalization;
    let scale = norm.scale_mm;
    let mut rngs: Vec<ChaCha8Rng> = ids.iter().map(|&id| sample_rng(cfg.seed, id)).collect();

    let start = plan.timesteps[0];
    let mut x = Vec::with_capacity(b * POSE_DIM);
    for (init, rng) in inits.iter().zip(rngs.iter_mut()) {
        match init {
            Init::Gaussian => x.extend(normals(rng)),
            Init::Pose(p) => {
                let v = norm.to_model(p);
                match cfg.init_mode {
                    InitMode::Direct => x.extend(v),
                    InitMode::Diffused => {
                        let z = normals(rng);
                        x.extend(crate::diffusion::q_sample(&v, start, &z, sched)?);
                    }
                }
            }
        }
    }

    // Observed model-space targets for replacement.
    let targets: Option<Vec<([f64; POSE_DIM], Vec<f64>)>> = match (problems, cfg.solver) {
        (Some(ps), SolverKind::Mcg) => Some(
            ps.iter()
                .map(|p| {
                    let w = p.operator.observed_coords().expect("checked linear");
                    let Measurement::Points3D { pose, .. } = &p.measurement else { unreachable!("checked pair") };
                    (w, norm.to_model(pose))
                })
                .collect(),
        ),
        _ => None,
    };
    let replace = |x0: &mut [f64]| {
        if let Some(tg) = &targets {
            for (row, (w, y)) in x0.chunks_mut(POSE_DIM).zip(tg) {
                for i in 0..POSE_DIM {
                    if w[i] > 0.0 {
                        row[i] = y[i];
                    }
                }
            }
        }
    };

    for (step, (t, t_prev)) in plan.transitions().enumerate() {
        let rho = cfg.rho_at(step);
        let guided = problems.is_some() && rho > 0.0;
        let ts = vec![t; b];
        let mut tape = Tape::new();
        let xt = Tensor::new(vec![b, POSE_DIM], x.clone())?;
        let xv = if guided { tape.leaf(xt) } else { tape.constant(xt) };
        let (x0v, epsv) = x0_on_tape(&mut tape, model, xv, &ts, cfg.freeze_eps)?;

        let grad = if guided {
            let ps = problems.expect("guided implies problems");
            let obj = match cfg.solver {
                SolverKind::Dps | SolverKind::Mcg => {
                    let ops: Vec<&MeasurementOperator> = ps.iter().map(|p| &p.operator).collect();
                    let ys: Vec<&Measurement> = ps.iter().map(|p| &p.measurement).collect();
                    batch_residual(&mut tape, &ops, &ys, x0v, scale)?
                }
                SolverKind::Pigdm => {
                    let x0_vals = tape.value(x0v).data().to_vec();
                    let mut v = Vec::with_capacity(b * POSE_DIM);
                    for (p, row) in ps.iter().zip(x0_vals.chunks(POSE_DIM)) {
                        let est = norm.from_model(row)?;
                        let d = pinv_residual(&p.operator, &est, &p.measurement)
                            .map_err(|e| step_error(step, t, e))?;
                        v.extend(d.iter().map(|d| d / scale));
                    }
                    let vc = tape.constant(Tensor::new(vec![b, POSE_DIM], v)?);
                    let m = tape.mul(x0v, vc)?;
                    tape.sum(m)
                }
            };
            let obj_val = tape.value(obj).item()?;
            if !obj_val.is_finite() {
                return Err(Error::NonFinite(format!("step {step} (t={t}): guidance objective {obj_val}")));
            }
            Some(tape.backward(obj)?.wrt(xv))
        } else {
            None
        };

        let mut x0 = tape.value(x0v).data().to_vec();
        let eps = tape.value(epsv).data().to_vec();
        replace(&mut x0);

        let mut next = Vec::with_capacity(b * POSE_DIM);
        for (i, rng) in rngs.iter_mut().enumerate() {
            let r = i * POSE_DIM..(i + 1) * POSE_DIM;
            let z = normals(rng);
            let row = match cfg.sampler {
                SamplerKind::Ddpm => ddpm_step_from_x0(&x[r.clone()], &x0[r.clone()], t, &z, sched),
                SamplerKind::Ddim => ddim_step_from_x0(&x0[r.clone()], &eps[r], t, t_prev, cfg.eta, &z, sched),
            };
            next.extend(row);
        }
        if let Some(g) = grad {
            let ab = sched.alpha_bar(t);
            let w = match cfg.solver {
                SolverKind::Dps | SolverKind::Mcg => -rho,
                SolverKind::Pigdm => rho * (1.0 - ab) / (1.0 + (1.0 - ab)),
            };
            for (n, g) in next.iter_mut().zip(g.data()) {
                *n += w * g;
            }
        }
        if let Some(i) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "step {step} (t={t}): state of sample {} is not finite",
                ids[i / POSE_DIM]
            )));
        }
        x = next;
    }
    replace(&mut x);
    x.chunks(POSE_DIM)
        .map(|row| Ok(root_center(&norm.from_model(row)?)))
        .collect()
}

fn step_error(step: usize, t: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("step {step} (t={t}): {m}")),
        other => other,
    }
}

fn single(model: &PoseModel, problem: &ProblemSpec, cfg: &SolverConfig, solver: SolverKind) -> Result<Pose3D> {
    let cfg = SolverConfig { solver, ..cfg.clone() };
    Ok(solve_batch(model, std::slice::from_ref(problem), &cfg, &[0])?.remove(0))
}

/// Diffusion posterior sampling: reverse step, then `-rho * grad` of the
/// residual of `f(x0_hat)` taken through the network.
pub fn dps_sample(model: &PoseModel, problem: &ProblemSpec, cfg: &SolverConfig) -> Result<Pose3D> {
    single(model, problem, cfg, SolverKind::Dps)
}

/// DPS plus replacement of observed coordinates of `x0_hat` by the
/// measurement. Linear operators only.
pub fn mcg_sample(model: &PoseModel, problem: &ProblemSpec, cfg: &SolverConfig) -> Result<Pose3D> {
    single(model, problem, cfg, SolverKind::Mcg)
}

/// Pseudoinverse-guided sampling.
pub fn pigdm_sample(model: &PoseModel, problem: &ProblemSpec, cfg: &SolverConfig) -> Result<Pose3D> {
    single(model, problem, cfg, SolverKind::Pigdm)
}

/// Full-chain sampling from standard normal noise at `t = T`.
pub fn unconditional_sample(
    model: &PoseModel,
    n: usize,
    seed: u64,
    sampler: SamplerKind,
    n_steps: usize,
    eta: f64,
) -> Result<Vec<Pose3D>> {
    let cfg = SolverConfig {
        sampler,
        truncation: model.schedule.steps(),
        n_steps,
        eta,
        rho: 0.0,
        seed,
        ..Default::default()
    };
    let plan = cfg.plan(model)?;
    let inits = vec![&Init::Gaussian; n];
    let ids: Vec<u64> = (0..n as u64).collect();
    run_chain(model, None, &inits, &plan, &cfg, &ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NormalizationInfo;
    use crate::denoiser::{DenoiserParams, ModelConfig};
    use crate::diffusion::ScheduleParams;
    use crate::operators::{apply_mask, JointMask, NoiseKind};
    use crate::skeleton::{CameraIntrinsics, Trajectory, NUM_JOINTS};
    use rand::Rng;

    fn toy_model(seed: u64) -> PoseModel {
        let cfg = ModelConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            time_dim: 8,
        };
        let mut p = DenoiserParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        p.head.weight = p.head.weight.map(|w| w * 30.0);
        PoseModel::new(
            cfg,
            p,
            &ScheduleParams { steps: 100, ..Default::default() },
            NormalizationInfo::new(250.0).unwrap(),
            Pose3D::zeros(),
        )
        .unwrap()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose3D {
        let mut p = Pose3D::zeros();
        for j in 1..NUM_JOINTS {
            for c in 0..3 {
                p.joints[j][c] = rng.random_range(-400.0..400.0);
            }
        }
        p
    }

    fn cfg(solver: SolverKind, rho: f64) -> SolverConfig {
        SolverConfig {
            solver,
            sampler: SamplerKind::Ddim,
            truncation: 40,
            n_steps: 10,
            eta: 0.5,
            rho,
            seed: 3,
            ..Default::default()
        }
    }

    fn projection_problem(rng: &mut impl Rng, init: Init) -> (ProblemSpec, Pose3D) {
        let gt = random_pose(rng);
        let op = MeasurementOperator::projection(
            CameraIntrinsics::default(),
            Trajectory::new([0.0, 0.0, 5000.0]).unwrap(),
        )
        .unwrap();
        let y = op.forward(&gt).unwrap();
        (ProblemSpec::new(op, y, init).unwrap(), gt)
    }

    fn mask_problem(gt: &Pose3D, mask: JointMask) -> ProblemSpec {
        let op = MeasurementOperator::masking(mask).unwrap();
        let y = apply_mask(gt, &mask).unwrap();
        ProblemSpec::new(op, y, Init::Pose(*gt)).unwrap()
    }

    #[test]
    fn rho_zero_matches_unconditional() {
        let model = toy_model(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, _) = projection_problem(&mut rng, Init::Gaussian);
        let mut c = cfg(SolverKind::Dps, 0.0);
        c.truncation = 100;
        let uncond = unconditional_sample(&model, 1, c.seed, c.sampler, c.n_steps, c.eta).unwrap();
        for solver in [SolverKind::Dps, SolverKind::Pigdm] {
            let out = solve_batch(&model, std::slice::from_ref(&p), &SolverConfig { solver, ..c.clone() }, &[0]).unwrap();
            assert_eq!(out[0], uncond[0], "{solver:?}");
        }
    }

    #[test]
    fn solvers_are_deterministic_and_batch_independent() {
        let model = toy_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs: Vec<ProblemSpec> = (0..3)
            .map(|_| {
                let gt = random_pose(&mut rng);
                mask_problem(&gt, JointMask::hiding(&[1, 2, 3]).unwrap())
            })
            .collect();
        for solver in [SolverKind::Dps, SolverKind::Mcg, SolverKind::Pigdm] {
            let c = cfg(solver, 0.01);
            let a = solve_batch(&model, &probs, &c, &[10, 11, 12]).unwrap();
            let b = solve_batch(&model, &probs, &c, &[10, 11, 12]).unwrap();
            assert_eq!(a, b);
            let one = solve_batch(&model, &probs[1..2], &c, &[11]).unwrap();
            for (u, v) in one[0].to_flat().iter().zip(a[1].to_flat()) {
                assert!((u - v).abs() < 1e-9, "{solver:?}");
            }
        }
    }

    #[test]
    fn mcg_output_is_consistent_with_observations() {
        let model = toy_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_pose(&mut rng);
        for rho in [0.0, 0.01] {
            let p = mask_problem(&gt, JointMask::all());
            let out = mcg_sample(&model, &p, &cfg(SolverKind::Mcg, rho)).unwrap();
            for (a, b) in out.to_flat().iter().zip(gt.to_flat()) {
                assert!((a - b).abs() < 1e-9);
            }
            let legs = JointMask::hiding(&[1, 2, 3, 4, 5, 6]).unwrap();
            let out = mcg_sample(&model, &mask_problem(&gt, legs), &cfg(SolverKind::Mcg, rho)).unwrap();
            for j in (0..NUM_JOINTS).filter(|&j| legs.observed(j)) {
                for c in 0..3 {
                    assert!((out.joints[j][c] - gt.joints[j][c]).abs() < 1e-9);
                }
            }
            assert!(out.is_finite());
        }
    }

    #[test]
    fn mcg_rejects_projection_before_work() {
        let model = toy_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, _) = projection_problem(&mut rng, Init::Gaussian);
        assert!(matches!(mcg_sample(&model, &p, &cfg(SolverKind::Mcg, 0.1)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn guidance_gradient_matches_finite_differences() {
        let model = toy_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, _) = projection_problem(&mut rng, Init::Gaussian);
        let x = Tensor::new(vec![1, POSE_DIM], (0..POSE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let err = crate::autodiff::finite_diff_check(|t| dps_guidance(&model, &[&p], t, 30, false), &x, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn small_guidance_step_decreases_residual() {
        let model = toy_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..10 {
            let problem = if trial % 2 == 0 {
                projection_problem(&mut rng, Init::Gaussian).0
            } else {
                let gt = random_pose(&mut rng);
                mask_problem(&gt, JointMask::hiding(&[7, 8]).unwrap())
            };
            let x = Tensor::new(vec![1, POSE_DIM], (0..POSE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let (r0, g) = dps_guidance(&model, &[&problem], &x, 20, false).unwrap();
            let gn: f64 = g.data().iter().map(|v| v * v).sum::<f64>();
            let delta = 1e-4 / gn.sqrt().max(1e-12);
            let moved = Tensor::new(
                vec![1, POSE_DIM],
                x.data().iter().zip(g.data()).map(|(a, b)| a - delta * b).collect(),
            )
            .unwrap();
            let (r1, _) = dps_guidance(&model, &[&problem], &moved, 20, false).unwrap();
            assert!(r1 < r0, "trial {trial}: {r1} >= {r0}");
        }
    }

    #[test]
    fn pigdm_guidance_vanishes_at_exact_identity_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = random_pose(&mut rng);
        let op = MeasurementOperator::additive_noise(NoiseKind::Gaussian, 0.0).unwrap();
        let y = op.forward(&gt).unwrap();
        assert!(pinv_residual(&op, &gt, &y).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn config_validation() {
        let model = toy_model(6);
        let mut c = cfg(SolverKind::Dps, -1.0);
        assert!(c.plan(&model).is_err());
        c.rho = 0.1;
        c.sampler = SamplerKind::Ddpm;
        assert!(c.plan(&model).is_err());
        c.n_steps = 40;
        assert!(c.plan(&model).is_ok());
        c.rho_schedule = Some(vec![0.1; 3]);
        assert!(c.plan(&model).is_err());
        c.truncation = 101;
        c.rho_schedule = None;
        assert!(c.plan(&model).is_err());
    }

    #[test]
    fn unconditional_sampling_edge_cases() {
        let model = toy_model(7);
        assert!(unconditional_sample(&model, 0, 0, SamplerKind::Ddim, 10, 1.0).unwrap().is_empty());
        let a = unconditional_sample(&model, 3, 9, SamplerKind::Ddim, 10, 1.0).unwrap();
        let b = unconditional_sample(&model, 3, 9, SamplerKind::Ddim, 10, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.joints[0] == [0.0; 3]));
        assert_ne!(a, unconditional_sample(&model, 3, 10, SamplerKind::Ddim, 10, 1.0).unwrap());
    }
}

use std::path::{Path, PathBuf};
use std::time::Instant;

use pads_core::data::{
    average_bone_length, compute_normalization, generate_synthetic_dataset, load_pose_file, make_task_dataset,
    mean_rooted_pose, pose_file_format_spec, save_pose_file, TaskParams, TaskSample,
};
use pads_core::denoiser::{train_loop, DenoiserParams, EpochLog};
use pads_core::operators::project_perspective;
use pads_core::skeleton::{
    bone_lengths, joint_errors, mpjpe, mpjpe_subset, pa_mpjpe, pck_auc_from_errors, PCK_THRESHOLD_MM, TOPOLOGY_ID,
};
use pads_core::solvers::{check_compatible, solve_batch, unconditional_sample};
use pads_core::{
    CameraIntrinsics, Checkpoint, Init, Pose3D, PoseModel, PoseRecord, SkeletonTopology, SyntheticGenConfig,
    Trajectory,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{InitChoice, RunConfig};
use crate::report::{Comparison, Report};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Estimate,
    Denoise,
    Complete,
    Generate,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::Estimate => "estimate",
            Self::Denoise => "denoise",
            Self::Complete => "complete",
            Self::Generate => "generate",
        }
    }
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

pub fn train_records(cfg: &RunConfig) -> Result<Vec<PoseRecord>, CliError> {
    Ok(match &cfg.data.train_file {
        Some(p) => load_pose_file(p)?,
        None => generate_synthetic_dataset(&cfg.data.synthetic)?,
    })
}

pub fn test_records(cfg: &RunConfig) -> Result<Vec<PoseRecord>, CliError> {
    Ok(match &cfg.data.test_file {
        Some(p) => load_pose_file(p)?,
        None => generate_synthetic_dataset(&SyntheticGenConfig {
            n_poses: cfg.data.n_test,
            seed: cfg.data.test_seed,
            ..cfg.data.synthetic.clone()
        })?,
    })
}

/// Writes `train.poses` and `test.poses`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(out)?;
    let train = out.join("train.poses");
    let test = out.join("test.poses");
    save_pose_file(&train_records(cfg)?, &train)?;
    save_pose_file(&test_records(cfg)?, &test)?;
    Ok(vec![train, test])
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub initial_loss: f64,
    pub log: Vec<EpochLog>,
}

pub fn loss_log_text(initial_loss: f64, log: &[EpochLog]) -> String {
    let mut s = format!("# initial_loss = {initial_loss}\nepoch,mean_loss,steps\n");
    for e in log {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.steps));
    }
    s
}

/// Trains from scratch; writes the checkpoint and the per-epoch loss log.
pub fn cmd_train(cfg: &RunConfig, out: &Path, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainSummary, CliError> {
    ensure_dir(out)?;
    let records = train_records(cfg)?;
    let norm = compute_normalization(&records)?;
    let mean_pose = mean_rooted_pose(&records)?;
    let dataset: Vec<Vec<f64>> = records.iter().map(|r| norm.normalize(&r.pose3d)).collect();
    let sched = cfg.schedule.build()?;
    let outcome = train_loop(&dataset, &cfg.model, &cfg.train, &sched, &mut on_epoch)?;
    let ck = Checkpoint {
        model: cfg.model,
        schedule: cfg.schedule,
        normalization: norm,
        mean_pose,
        params: outcome.params,
        ema: outcome.ema,
    };
    let path = out.join(CHECKPOINT_FILE);
    ck.save(&path)?;
    std::fs::write(out.join(LOSS_FILE), loss_log_text(outcome.initial_loss, &outcome.log))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(TrainSummary {
        checkpoint: path,
        initial_loss: outcome.initial_loss,
        log: outcome.log,
    })
}

pub fn load_model(path: &Path) -> Result<PoseModel, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?.into_model()?)
}

/// Builds the benchmark problems for a solve task.
pub fn build_task(cfg: &RunConfig, task: Task, model: &PoseModel, records: &[PoseRecord]) -> Result<Vec<TaskSample>, CliError> {
    let t = &cfg.task;
    let params = match task {
        Task::Estimate => TaskParams::Estimate {
            init: t.estimate_init()?,
            depth_scale: t.depth_scale,
        },
        Task::Denoise => TaskParams::Denoise {
            kind: t.noise_kind,
            intensity: t.intensity,
        },
        Task::Complete => TaskParams::Complete {
            group: t.mask_group.clone(),
        },
        Task::Generate => return Err(CliError::Config("generate has no problems".into())),
    };
    if task != Task::Estimate && t.init == Some(InitChoice::InverseProj) {
        return Err(CliError::Config(format!("task.init: inverse-proj applies to estimation, not {}", task.name())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.solver.seed ^ 0x7A5C_0000);
    let mut samples = make_task_dataset(records, &params, &model.mean_pose, average_bone_length(records), &mut rng)
        .map_err(|e| match e {
            pads_core::Error::InvalidParam(m) => CliError::Config(format!("task: {m}")),
            other => other.into(),
        })?;
    if task != Task::Estimate && t.init == Some(InitChoice::Random) {
        for s in &mut samples {
            s.problem.init = Init::Gaussian;
        }
    }
    Ok(samples)
}

/// Solves samples on a bounded worker pool; results come back in input order.
pub fn solve_samples(cfg: &RunConfig, model: &PoseModel, samples: &[TaskSample]) -> Result<Vec<Pose3D>, CliError> {
    let workers = match cfg.runtime.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let chunks: Vec<&[TaskSample]> = samples.chunks(cfg.runtime.batch_size).collect();
    let solved: Vec<Vec<Pose3D>> = pool.install(|| {
        chunks
            .par_iter()
            .map(|chunk| {
                let problems: Vec<_> = chunk.iter().map(|s| s.problem.clone()).collect();
                let ids: Vec<u64> = chunk.iter().map(|s| s.id).collect();
                solve_batch(model, &problems, &cfg.solver, &ids)
            })
            .collect::<pads_core::Result<_>>()
    })?;
    Ok(solved.into_iter().flatten().collect())
}

pub const SOLVE_COLUMNS: [&str; 5] = ["mpjpe_before", "mpjpe_after", "pa_mpjpe_after", "pck150_after", "auc_after"];
pub const MASKED_COLUMNS: [&str; 2] = ["masked_mpjpe_before", "masked_mpjpe_after"];

/// One report row per sample. `mpjpe_before` scores the solver init and is
/// NaN for random inits.
pub fn score(task: Task, samples: &[TaskSample], preds: &[Pose3D]) -> Result<Vec<(u64, Vec<f64>)>, CliError> {
    samples
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let gt = &s.ground_truth;
            let before = s.problem.init_pose().map_or(f64::NAN, |i| mpjpe(i, gt));
            let (pck, auc) = pck_auc_from_errors(&joint_errors(p, gt), PCK_THRESHOLD_MM);
            let mut row = vec![before, mpjpe(p, gt), pa_mpjpe(p, gt)?, pck, auc];
            if task == Task::Complete {
                let mb = s.problem.init_pose().map_or(f64::NAN, |i| mpjpe_subset(i, gt, &s.masked_joints));
                row.push(mb);
                row.push(mpjpe_subset(p, gt, &s.masked_joints));
            }
            Ok((s.id, row))
        })
        .collect()
}

fn base_meta(cfg: &RunConfig, task: Task) -> Vec<(String, String)> {
    let mut meta = vec![
        ("topology".to_string(), TOPOLOGY_ID.to_string()),
        ("task".to_string(), task.name().to_string()),
        ("solver".to_string(), cfg.solver.solver.name().to_string()),
        ("seed".to_string(), cfg.solver.seed.to_string()),
    ];
    meta.extend(cfg.echo().into_iter().filter_map(|l| {
        let (k, v) = l.split_once(" = ")?;
        Some((format!("config.{k}"), v.to_string()))
    }));
    meta
}

pub fn report_path(out: &Path, task: Task, cfg: &RunConfig) -> PathBuf {
    match task {
        Task::Generate => out.join("generate.report"),
        _ => out.join(format!("{}-{}.report", task.name(), cfg.solver.solver.name())),
    }
}

/// Runs one task end to end and writes its report.
pub fn cmd_solve(cfg: &RunConfig, task: Task, checkpoint: &Path, out: &Path) -> Result<Report, CliError> {
    let start = Instant::now();
    let cfg = &cfg.for_task(task.name());
    let model = load_model(checkpoint)?;
    ensure_dir(out)?;
    let report = if task == Task::Generate {
        generate(cfg, &model, out)?
    } else {
        let records = test_records(cfg)?;
        let samples = build_task(cfg, task, &model, &records)?;
        if let Some(s) = samples.first() {
            check_compatible(cfg.solver.solver, &s.problem.operator)
                .map_err(|e| CliError::Config(format!("solver: {e}")))?;
        }
        cfg.solver.plan(&model).map_err(|e| CliError::Config(format!("solver: {e}")))?;
        let preds = solve_samples(cfg, &model, &samples)?;
        let mut columns: Vec<String> = SOLVE_COLUMNS.iter().map(|s| s.to_string()).collect();
        if task == Task::Complete {
            columns.extend(MASKED_COLUMNS.iter().map(|s| s.to_string()));
        }
        let mut report = Report::new(base_meta(cfg, task), columns);
        for (id, row) in score(task, &samples, &preds)? {
            report.push(id, row);
        }
        report
    };
    let mut report = report;
    report.wall_clock_s = Some(start.elapsed().as_secs_f64());
    report.save(&report_path(out, task, cfg))?;
    Ok(report)
}

/// Mean relative deviation (%) of each bone from the reference lengths.
pub fn bone_deviation_pct(pose: &Pose3D, reference: &[f64]) -> f64 {
    let topo = SkeletonTopology::h36m();
    let lens = bone_lengths(pose, &topo);
    100.0 * lens.iter().zip(reference).map(|(l, r)| (l - r).abs() / r).sum::<f64>() / lens.len() as f64
}

fn generate(cfg: &RunConfig, model: &PoseModel, out: &Path) -> Result<Report, CliError> {
    let s = &cfg.solver;
    let n = cfg.task.n_generate;
    let poses = unconditional_sample(model, n, s.seed, s.sampler, s.n_steps, s.eta)
        .map_err(|e| match e {
            pads_core::Error::InvalidParam(m) => CliError::Config(format!("solver: {m}")),
            other => other.into(),
        })?;
    let traj = Trajectory::new([0.0, 0.0, 5000.0])?;
    let k = CameraIntrinsics::default();
    let records: Vec<PoseRecord> = poses
        .iter()
        .enumerate()
        .map(|(i, p)| PoseRecord {
            id: i as u64,
            pose3d: p.translated(traj.pelvis_position),
            trajectory: traj,
            intrinsics: k,
            pose2d: project_perspective(p, &traj, &k).ok(),
        })
        .collect();
    save_pose_file(&records, out.join("generated.poses"))?;
    let reference = &cfg.data.synthetic.segment_lengths_mm;
    let mut report = Report::new(base_meta(cfg, Task::Generate), vec!["bone_dev_pct".into()]);
    for (i, p) in poses.iter().enumerate() {
        report.push(i as u64, vec![bone_deviation_pct(p, reference)]);
    }
    Ok(report)
}

/// Loads reports (each audited on load) and builds the comparison.
pub fn cmd_eval(paths: &[PathBuf], only: &[String]) -> Result<Comparison, CliError> {
    let reports = paths
        .iter()
        .map(|p| {
            let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((label, Report::load(p)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Comparison::build(&reports, only)
}

pub fn format_spec() -> String {
    let mut s = String::new();
    s.push_str("== pose file ==\n");
    s.push_str(&pose_file_format_spec());
    s.push_str("\n== checkpoint ==\n");
    s.push_str("magic 'PADSCKPT' (8 bytes), u32 LE format version, u64 LE header length H,\n");
    s.push_str("H bytes of JSON header {topology, model, schedule, scale_mm, mean_pose, tensors: [[name, shape]]},\n");
    s.push_str("then every tensor as f64 LE in header order, then the EMA copy in the same order.\n");
    s.push_str("\n== report ==\n");
    s.push_str("'# pads-report v1', '# key = value' metadata lines, 'id,<columns>' header,\n");
    s.push_str("one comma-separated row per sample, then '[summary]' with 'n' and the column means.\n");
    s
}

/// Parameter count of a config, for progress messages.
pub fn parameter_count(cfg: &RunConfig) -> Result<usize, CliError> {
    Ok(DenoiserParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(0))?.num_scalars())
}

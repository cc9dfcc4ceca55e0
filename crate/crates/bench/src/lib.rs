//! Fixtures shared by the criterion benchmarks.

use pads_core::data::{compute_normalization, generate_synthetic_dataset, mean_rooted_pose};
use pads_core::denoiser::DenoiserParams;
use pads_core::{ModelConfig, PoseModel, PoseRecord, Result, ScheduleParams, SyntheticGenConfig};
use rand::SeedableRng;

/// Synthetic records with the default generator settings.
pub fn records(n: usize, seed: u64) -> Result<Vec<PoseRecord>> {
    generate_synthetic_dataset(&SyntheticGenConfig {
        n_poses: n,
        seed,
        ..Default::default()
    })
}

/// An untrained model; timing does not depend on the weights.
pub fn untrained_model(cfg: ModelConfig, recs: &[PoseRecord]) -> Result<PoseModel> {
    let params = DenoiserParams::init(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    PoseModel::new(
        cfg,
        params,
        &ScheduleParams::default(),
        compute_normalization(recs)?,
        mean_rooted_pose(recs)?,
    )
}

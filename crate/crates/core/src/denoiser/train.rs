use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{forward, DenoiserParams, ModelConfig, Params};
use crate::autodiff::{Tape, Tensor};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::skeleton::POSE_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_ratio: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

/// Learning-rate shape over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine if total <= 1 => 1.0,
            Self::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1024,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            ema_ratio: 0.9999,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.ema_ratio > 0.0 && self.ema_ratio < 1.0) {
            return Err(Error::invalid(format!("ema_ratio must be in (0, 1), got {}", self.ema_ratio)));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning_rate must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Params<Tensor>,
    v: Params<Tensor>,
}

impl AdamW {
    pub fn new(params: &DenoiserParams, lr: f64, weight_decay: f64) -> Self {
        let zeros = params.map(&mut |t| Tensor::zeros(t.shape().to_vec()));
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update given gradients in the order of `Params::visit`.
    pub fn update(&mut self, params: &mut DenoiserParams, grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        let leaves = params.leaves_mut().into_iter().zip(self.m.leaves_mut()).zip(self.v.leaves_mut());
        for (((p, m), v), g) in leaves.zip(grads) {
            for (((w, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            }
        }
    }
}

/// `shadow <- ratio * shadow + (1 - ratio) * params`, elementwise.
pub fn ema_update(shadow: &mut DenoiserParams, params: &DenoiserParams, ratio: f64) {
    for (s, p) in shadow.leaves_mut().into_iter().zip(params.leaves()) {
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = ratio * *a + (1.0 - ratio) * b;
        }
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based key for the noise of one training example.
pub fn noise_key(seed: u64, epoch: u64, example: u64) -> u64 {
    mix(mix(mix(seed) ^ epoch) ^ example)
}

/// Timestep uniform in `[1, T]` and standard-normal noise for one example.
pub fn draw_noise(key: u64, sched: &NoiseSchedule) -> (usize, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let t = rng.random_range(1..=sched.steps());
    let eps = (0..POSE_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    (t, eps)
}

/// Mean-square noise-prediction error and its parameter gradients for a
/// batch of normalized poses.
pub fn loss_and_grads(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    x0: &[&[f64]],
    keys: &[u64],
    sched: &NoiseSchedule,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    if x0.is_empty() || x0.len() != keys.len() {
        return Err(Error::invalid("training batch must be nonempty with one key per example"));
    }
    let b = x0.len();
    let mut xt = Vec::with_capacity(b * POSE_DIM);
    let mut eps = Vec::with_capacity(b * POSE_DIM);
    let mut ts = Vec::with_capacity(b);
    for (x, &key) in x0.iter().zip(keys) {
        let (t, e) = draw_noise(key, sched);
        xt.extend(q_sample(x, t, &e, sched)?);
        eps.extend(e);
        ts.push(t);
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, with_grads);
    let x = tape.constant(Tensor::new(vec![b, POSE_DIM], xt)?);
    let target = tape.constant(Tensor::new(vec![b, POSE_DIM], eps)?);
    let pred = forward(&mut tape, &bound, cfg, x, &ts)?;
    let diff = tape.sub(pred, target)?;
    let loss = tape.mean_square(diff);
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {value} (timesteps {:?})",
            &ts[..ts.len().min(8)]
        )));
    }
    if !with_grads {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    let out = bound.leaves().iter().map(|&&v| grads.wrt(v)).collect();
    Ok((value, Some(out)))
}

/// One optimizer step on a batch; returns the pre-update loss.
pub fn training_step(
    params: &mut DenoiserParams,
    opt: &mut AdamW,
    cfg: &ModelConfig,
    x0: &[&[f64]],
    keys: &[u64],
    sched: &NoiseSchedule,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(params, cfg, x0, keys, sched, true)?;
    let grads = grads.expect("gradients requested");
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient at loss {loss}")));
    }
    opt.update(params, &grads);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub ema: DenoiserParams,
    /// Loss of the initial weights over the first epoch's noise draws.
    pub initial_loss: f64,
    pub log: Vec<EpochLog>,
}

/// Trains from scratch. Deterministic given `cfg.seed`; the returned EMA
/// weights are the inference model.
pub fn train_loop(
    dataset: &[Vec<f64>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0xA5A5));
    let mut params = DenoiserParams::init(model_cfg, &mut init_rng)?;
    let mut ema = params.clone();
    let mut opt = AdamW::new(&params, cfg.learning_rate, cfg.weight_decay);

    let initial_loss = {
        let n = dataset.len().min(1024);
        let xs: Vec<&[f64]> = dataset[..n].iter().map(|v| v.as_slice()).collect();
        let keys: Vec<u64> = (0..n as u64).map(|i| noise_key(cfg.seed, 0, i)).collect();
        loss_and_grads(&params, model_cfg, &xs, &keys, sched, false)?.0
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let total_steps = cfg.epochs * dataset.len().div_ceil(cfg.batch_size);
    let mut global_step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ mix(epoch as u64 + 1)));
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| dataset[i].as_slice()).collect();
            let keys: Vec<u64> = chunk
                .iter()
                .map(|&i| noise_key(cfg.seed, epoch as u64, i as u64))
                .collect();
            opt.lr = cfg.learning_rate * cfg.lr_schedule.factor(global_step, total_steps);
            global_step += 1;
            let loss = training_step(&mut params, &mut opt, model_cfg, &xs, &keys, sched)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => {
                        Error::NonFinite(format!("epoch {epoch} step {steps}: {msg}"))
                    }
                    other => other,
                })?;
            ema_update(&mut ema, &params, cfg.ema_ratio);
            total += loss;
            steps += 1;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: total / steps as f64,
            steps,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        ema,
        initial_loss,
        log,
    })
}

//! Base-model training: ε-prediction on freshly drawn data.

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::data::{sample_truth, ToyDistribution};
use crate::error::{LabError, Result};
use crate::nn::{
    cosine_lr, opt_step, AdamState, Architecture, DenoiserModel, ModelRole, TrainExample, Trainable,
};
use crate::numerics::RngStream;

const DATA_STREAM: u64 = 0xda7a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub iterations: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Probability of replacing the label with the null condition.
    pub cond_dropout: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::default(),
            iterations: 10_000,
            batch: 256,
            lr_max: 1e-3,
            lr_min: 1e-4,
            cond_dropout: 0.1,
            log_every: 100,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.batch == 0 || self.log_every == 0 {
            return Err(LabError::InvalidParameter(
                "batch and log_every must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(LabError::InvalidParameter(
                "cond_dropout must lie in [0, 1]".into(),
            ));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0) {
            return Err(LabError::InvalidParameter(
                "learning rates must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mean loss over each logging window, keyed by the iteration that closes it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub entries: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.1)
    }
}

/// Draws one training batch: `x0` from the distribution, `t` uniform in
/// `1..=T`, target `ε`.
pub(crate) fn noised_batch(
    dist: &ToyDistribution,
    schedule: &NoiseSchedule,
    n: usize,
    use_labels: bool,
    cond_dropout: f64,
    rng: &mut RngStream,
) -> Result<Vec<TrainExample>> {
    let data = sample_truth(dist, n, rng)?;
    let t_max = schedule.t_max();
    Ok(data
        .into_iter()
        .map(|s| {
            let t = 1 + rng.below(t_max);
            let eps = rng.gaussian_pair();
            let dropped = rng.uniform() < cond_dropout;
            let cond =
                (use_labels && !dropped && s.mode_label >= 0).then_some(s.mode_label as usize);
            TrainExample {
                x: schedule.noise_with(s.point, t, eps),
                t_frac: schedule.t_frac(t),
                cond,
                target: eps,
            }
        })
        .collect())
}

/// Trains a fresh base model. When the architecture is conditional its
/// condition count must match the distribution's label count.
pub fn train_base(
    dist: &ToyDistribution,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(DenoiserModel, TrainLog)> {
    config.validate()?;
    dist.validate()?;
    let n_cond = config.architecture.n_conditions;
    if n_cond > 0 && n_cond != dist.n_labels() {
        return Err(LabError::InvalidParameter(format!(
            "model has {n_cond} conditions but the distribution has {} labels",
            dist.n_labels()
        )));
    }
    let mut model = DenoiserModel::init(config.architecture.clone(), ModelRole::Base, config.seed)?;
    let mut adam = AdamState::new(model.params.len());
    let mut rng = RngStream::new(config.seed, DATA_STREAM);
    let mut log = TrainLog::default();
    let mut window = 0.0;
    for it in 0..config.iterations {
        let batch = noised_batch(
            dist,
            schedule,
            config.batch,
            n_cond > 0,
            config.cond_dropout,
            &mut rng,
        )?;
        let (loss, tape) = model.backward(None, &batch, Trainable::ModelParams)?;
        if it == 0 {
            log.initial_loss = loss;
        }
        window += loss;
        let lr = cosine_lr(it, config.iterations, config.lr_max, config.lr_min);
        opt_step(&mut model.params, &tape.model, &mut adam, lr)?;
        if (it + 1) % config.log_every == 0 {
            log.entries.push((it + 1, window / config.log_every as f64));
            window = 0.0;
        }
    }
    Ok((model, log))
}

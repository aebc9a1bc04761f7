//! Attribute sliders: a LoRA adapter fine-tuned on a translated copy of the
//! data, then applied unchanged to another model.

use serde::{Deserialize, Serialize};

use crate::data::{attribute_value, sample_truth, ToyDistribution};
use crate::diffusion::{sample_endpoints, NetPredictor, NoiseSchedule, SamplerConfig, StepGrid};
use crate::error::{LabError, Result};
use crate::io::{fmt_f64, CsvTable};
use crate::nn::{
    cosine_lr, hidden_layer_targets, opt_step, AdamState, DenoiserModel, LoraAdapter, ModelRole,
    TrainExample, Trainable,
};
use crate::numerics::RngStream;

const DATA_STREAM: u64 = 0x511d;

pub const TRANSFER_SCALES: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliderConfig {
    pub rank: usize,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for SliderConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            iterations: 3_000,
            batch: 256,
            lr: 1e-3,
            lr_min: 1e-4,
            seed: 42,
        }
    }
}

/// Trains only the adapter, with the ε-prediction loss on data translated
/// by `delta` along the attribute direction. Returns the adapter at scale 1
/// and the first and last batch losses.
pub fn train_slider(
    model: &DenoiserModel,
    dist: &ToyDistribution,
    schedule: &NoiseSchedule,
    delta: f64,
    cfg: &SliderConfig,
) -> Result<(LoraAdapter, (f64, f64))> {
    if delta == 0.0 || !delta.is_finite() {
        return Err(LabError::InvalidParameter(
            "slider delta must be finite and non-zero".into(),
        ));
    }
    if cfg.batch == 0 {
        return Err(LabError::InvalidParameter("batch must be positive".into()));
    }
    dist.validate()?;
    let mut adapter = LoraAdapter::new(
        &model.arch,
        cfg.rank,
        &hidden_layer_targets(&model.arch),
        cfg.seed,
    )?;
    let mut adam = AdamState::new(adapter.params.len());
    let mut rng = RngStream::new(cfg.seed, DATA_STREAM);
    let shift = delta * dist.attribute_direction;
    let t_max = schedule.t_max();
    let mut losses = (f64::NAN, f64::NAN);
    for it in 0..cfg.iterations {
        let data = sample_truth(dist, cfg.batch, &mut rng)?;
        let batch: Vec<TrainExample> = data
            .iter()
            .map(|d| {
                let t = 1 + rng.below(t_max);
                let eps = rng.gaussian_pair();
                TrainExample {
                    x: schedule.noise_with(d.point + shift, t, eps),
                    t_frac: schedule.t_frac(t),
                    cond: None,
                    target: eps,
                }
            })
            .collect();
        let (loss, tape) = model.backward(Some(&adapter), &batch, Trainable::AdapterParams)?;
        if it == 0 {
            losses.0 = loss;
        }
        losses.1 = loss;
        let lr = cosine_lr(it, cfg.iterations, cfg.lr, cfg.lr_min);
        let grads = tape.adapter.expect("adapter tape");
        opt_step(&mut adapter.params, &grads, &mut adam, lr)?;
    }
    Ok((adapter, losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub scale: f64,
    pub source_mean: f64,
    pub target_mean: f64,
    /// Mean attribute minus that of the unadapted model, same noises.
    pub source_shift: f64,
    pub target_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source_role: ModelRole,
    pub target_role: ModelRole,
    pub n: usize,
    pub source_shift: f64,
    pub target_shift: f64,
    /// `None` when the source shift is zero.
    pub transfer_ratio: Option<f64>,
    pub rows: Vec<ScaleRow>,
}

impl TransferReport {
    pub fn to_csv(&self) -> String {
        let mut t = CsvTable::new(&[
            "scale",
            "source_mean",
            "target_mean",
            "source_shift",
            "target_shift",
        ]);
        for r in &self.rows {
            t.row(&[
                fmt_f64(r.scale),
                fmt_f64(r.source_mean),
                fmt_f64(r.target_mean),
                fmt_f64(r.source_shift),
                fmt_f64(r.target_shift),
            ]);
        }
        t.finish()
    }

    pub fn row(&self, scale: f64) -> Option<&ScaleRow> {
        self.rows.iter().find(|r| r.scale == scale)
    }
}

/// A model and the grid it is sampled on.
#[derive(Clone, Copy)]
pub struct Arm<'a> {
    pub model: &'a DenoiserModel,
    pub grid: &'a StepGrid,
}

fn mean_attribute(
    arm: Arm<'_>,
    adapter: Option<&LoraAdapter>,
    dist: &ToyDistribution,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let p = NetPredictor::new(arm.model, adapter)?;
    let cfg = SamplerConfig::deterministic(arm.grid.clone());
    let pts = sample_endpoints(&p, schedule, &cfg, seed, n)?;
    Ok(pts.iter().map(|p| attribute_value(dist, *p)).sum::<f64>() / n as f64)
}

/// Samples `n` shared-noise chains per (model, scale) cell and reports the
/// attribute shift the adapter causes on each model.
pub fn transfer_slider(
    adapter: &LoraAdapter,
    source: Arm<'_>,
    target: Arm<'_>,
    dist: &ToyDistribution,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<TransferReport> {
    adapter.check_compatible(&source.model.arch)?;
    adapter.check_compatible(&target.model.arch)?;
    if n == 0 {
        return Err(LabError::InvalidParameter(
            "need at least one sample per cell".into(),
        ));
    }
    let src0 = mean_attribute(source, None, dist, schedule, n, seed)?;
    let tgt0 = mean_attribute(target, None, dist, schedule, n, seed)?;
    let mut rows = Vec::with_capacity(TRANSFER_SCALES.len());
    for &scale in &TRANSFER_SCALES {
        let a = adapter.with_scale(scale);
        let source_mean = mean_attribute(source, Some(&a), dist, schedule, n, seed)?;
        let target_mean = mean_attribute(target, Some(&a), dist, schedule, n, seed)?;
        rows.push(ScaleRow {
            scale,
            source_mean,
            target_mean,
            source_shift: source_mean - src0,
            target_shift: target_mean - tgt0,
        });
    }
    let unit = rows
        .iter()
        .find(|r| r.scale == 1.0)
        .expect("scale 1 present");
    let (source_shift, target_shift) = (unit.source_shift, unit.target_shift);
    Ok(TransferReport {
        source_role: source.model.role,
        target_role: target.model.role,
        n,
        source_shift,
        target_shift,
        transfer_ratio: (source_shift != 0.0).then(|| target_shift / source_shift),
        rows,
    })
}

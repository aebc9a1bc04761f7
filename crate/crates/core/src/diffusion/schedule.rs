use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::OutputParam;
use crate::numerics::{RngStream, Vec2};

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Lower bound on each per-step α.
pub const MIN_ALPHA: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
}

/// Discretized noise levels: `alpha_bar[0..=T]` with `alpha_bar[0]` at the
/// data end, and per-step `α_t = ᾱ_t / ᾱ_{t-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, t_max: usize) -> Result<NoiseSchedule> {
    if t_max < 4 {
        return Err(LabError::InvalidParameter(format!(
            "schedule needs T >= 4, got {t_max}"
        )));
    }
    let s = COSINE_OFFSET;
    let f = |t: usize| {
        let u = ((t as f64 / t_max as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        u.cos().powi(2)
    };
    let f0 = f(0);
    let raw: Vec<f64> = (0..=t_max).map(|t| f(t) / f0).collect();
    let mut alpha = Vec::with_capacity(t_max);
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    for t in 1..=t_max {
        let a = (raw[t] / raw[t - 1]).clamp(MIN_ALPHA, 1.0);
        alpha.push(a);
        alpha_bar.push(alpha_bar[t - 1] * a);
    }
    Ok(NoiseSchedule {
        kind,
        alpha_bar,
        alpha,
    })
}

impl NoiseSchedule {
    /// Builds a schedule from an explicit non-increasing ᾱ sequence in
    /// `(0, 1]`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(LabError::InvalidParameter(
                "need at least two levels".into(),
            ));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(LabError::InvalidParameter(
                "alpha_bar must lie in (0, 1]".into(),
            ));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(LabError::InvalidParameter(
                "alpha_bar must be non-increasing".into(),
            ));
        }
        let alpha = alpha_bar.windows(2).map(|w| w[1] / w[0]).collect();
        Ok(Self {
            kind: ScheduleKind::Cosine,
            alpha_bar,
            alpha,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of discrete training steps `T`.
    pub fn t_max(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step α for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Network time input for schedule index `t`.
    pub fn t_frac(&self, t: usize) -> f64 {
        t as f64 / self.t_max() as f64
    }

    /// Velocity output parameterization tied to this schedule's `ᾱ` table.
    pub fn velocity_output(&self) -> OutputParam {
        OutputParam::Velocity {
            alpha_bar: self.alpha_bar.clone(),
        }
    }

    /// Identifier stored in checkpoint headers.
    pub fn id(&self) -> String {
        format!("cosine-{}", self.t_max())
    }

    pub fn check_index(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(LabError::IndexOutOfRange {
                index: t,
                max: self.t_max(),
            });
        }
        Ok(())
    }

    /// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`
    pub fn noise_with(&self, x0: Vec2, t: usize, eps: Vec2) -> Vec2 {
        let ab = self.alpha_bar[t];
        ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    }

    /// One-shot data estimate `(x_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t`.
    pub fn predict_x0(&self, x: Vec2, eps: Vec2, t: usize) -> Vec2 {
        let ab = self.alpha_bar[t];
        (1.0 / ab.sqrt()) * (x - (1.0 - ab).sqrt() * eps)
    }
}

/// Corrupts `x0` to level `t`, returning `(x_t, ε)`.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: Vec2,
    t: usize,
    rng: &mut RngStream,
) -> Result<(Vec2, Vec2)> {
    schedule.check_index(t)?;
    let eps = rng.gaussian_pair();
    Ok((schedule.noise_with(x0, t, eps), eps))
}

/// Inference time grid `t_N > … > t_1 > t_0 = 0`, stored with the final 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGrid {
    points: Vec<usize>,
}

impl StepGrid {
    /// `n` uniformly spaced steps from `T` down to 0.
    pub fn uniform(t_max: usize, n: usize) -> Result<Self> {
        if n == 0 || n > t_max {
            return Err(LabError::InvalidParameter(format!(
                "cannot place {n} steps on a schedule of {t_max}"
            )));
        }
        let points = (0..=n)
            .rev()
            .map(|i| ((i * t_max) as f64 / n as f64).round() as usize)
            .collect();
        Self::from_points(points, t_max)
    }

    pub fn from_points(points: Vec<usize>, t_max: usize) -> Result<Self> {
        if points.len() < 2
            || points[0] != t_max
            || *points.last().expect("non-empty") != 0
            || points.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(LabError::InvalidParameter(format!(
                "grid {points:?} must decrease strictly from {t_max} to 0"
            )));
        }
        Ok(Self { points })
    }

    /// Number of sampler steps `N`.
    pub fn len(&self) -> usize {
        self.points.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points including the terminal 0.
    pub fn points(&self) -> &[usize] {
        &self.points
    }

    /// `(t_from, t_to)` for each step.
    pub fn intervals(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }
}

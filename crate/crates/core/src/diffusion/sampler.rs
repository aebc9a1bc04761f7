//! Deterministic (DDIM) and ancestral samplers, classifier-free guidance,
//! the base/student hybrid and the skip-first-step variant.

use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, StepGrid};
use crate::error::{LabError, Result};
use crate::nn::{DenoiserInput, DenoiserModel, EffectiveWeights, LoraAdapter, ModelRole};
use crate::numerics::{RngStream, Vec2};

/// Chains advanced together per batched network call.
const BLOCK: usize = 2048;

/// Condition and guidance weight for one network evaluation.
///
/// `cond = None` evaluates the null condition once. With a condition, the
/// prediction is `ε_null + w·(ε_cond − ε_null)`; `w = 1` and `w = 0` need a
/// single evaluation, anything else two.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub cond: Option<usize>,
    pub scale: f64,
}

impl Guidance {
    pub const UNCONDITIONAL: Guidance = Guidance {
        cond: None,
        scale: 1.0,
    };

    pub fn new(cond: Option<usize>, scale: f64) -> Self {
        Self { cond, scale }
    }

    pub fn evals(&self) -> u32 {
        match self.cond {
            Some(_) if self.scale != 0.0 && self.scale != 1.0 => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub t: usize,
    pub t_frac: f64,
    pub alpha_bar: f64,
}

impl StepInfo {
    pub fn at(schedule: &NoiseSchedule, t: usize) -> Self {
        Self {
            t,
            t_frac: schedule.t_frac(t),
            alpha_bar: schedule.alpha_bar(t),
        }
    }
}

/// Anything that predicts ε for a batch of states.
pub trait NoisePredictor {
    fn role(&self) -> ModelRole;
    fn predict(&self, xs: &[Vec2], step: StepInfo, guidance: Guidance) -> Result<Vec<Vec2>>;
}

/// A network with an optional adapter folded into its weights once.
pub struct NetPredictor<'a> {
    model: &'a DenoiserModel,
    weights: EffectiveWeights<'a>,
}

impl<'a> NetPredictor<'a> {
    pub fn new(model: &'a DenoiserModel, adapter: Option<&LoraAdapter>) -> Result<Self> {
        Ok(Self {
            model,
            weights: model.weights(adapter)?,
        })
    }

    fn eval(&self, xs: &[Vec2], t_frac: f64, cond: Option<usize>) -> Result<Vec<Vec2>> {
        let inputs: Vec<DenoiserInput> = xs
            .iter()
            .map(|&x| DenoiserInput { x, t_frac, cond })
            .collect();
        self.model.forward_with(&self.weights, &inputs)
    }
}

impl NoisePredictor for NetPredictor<'_> {
    fn role(&self) -> ModelRole {
        self.model.role
    }

    fn predict(&self, xs: &[Vec2], step: StepInfo, g: Guidance) -> Result<Vec<Vec2>> {
        let Some(c) = g.cond else {
            return self.eval(xs, step.t_frac, None);
        };
        if self.model.n_conditions() == 0 {
            return Err(LabError::UnconditionalModel);
        }
        self.model.check_cond(Some(c))?;
        if g.scale == 1.0 {
            return self.eval(xs, step.t_frac, Some(c));
        }
        let null = self.eval(xs, step.t_frac, None)?;
        if g.scale == 0.0 {
            return Ok(null);
        }
        let cond = self.eval(xs, step.t_frac, Some(c))?;
        Ok(null
            .iter()
            .zip(&cond)
            .map(|(n, c)| *n + g.scale * (*c - *n))
            .collect())
    }
}

/// Classifier-free guided noise prediction for one state.
pub fn guided_eval(
    model: &DenoiserModel,
    adapter: Option<&LoraAdapter>,
    x: Vec2,
    t_frac: f64,
    cond: Option<usize>,
    w: f64,
) -> Result<Vec2> {
    let p = NetPredictor::new(model, adapter)?;
    let step = StepInfo {
        t: 0,
        t_frac,
        alpha_bar: f64::NAN,
    };
    Ok(p.predict(&[x], step, Guidance::new(cond, w))?[0])
}

/// DDIM update from `t_from` to `t_to` given ε̂; also returns the data
/// estimate x̃0 it passes through.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    x: Vec2,
    eps: Vec2,
    t_from: usize,
    t_to: usize,
) -> (Vec2, Vec2) {
    let x0 = schedule.predict_x0(x, eps, t_from);
    let ab_to = schedule.alpha_bar(t_to);
    (ab_to.sqrt() * x0 + (1.0 - ab_to).sqrt() * eps, x0)
}

/// Noise variance of the ancestral step `t → s`, with `a = ᾱ_t/ᾱ_s`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AncestralVariance {
    /// `1 − a`. Keeps `N(0, I)` data exactly stationary under the optimal
    /// predictor.
    #[default]
    Beta,
    /// `β̃ = (1 − ᾱ_s)/(1 − ᾱ_t)·(1 − a)`, the forward posterior variance.
    /// Under-disperses by `(1 − a)²ᾱ_s/(1 − aᾱ_s)` per step on `N(0, I)` data.
    PosteriorTilde,
}

/// Posterior-mean step from `t_from` to `t_to` plus noise; with
/// `t_to = t_from − 1` this is the DDPM ancestral step. No noise is added
/// when landing on 0.
pub fn ancestral_update(
    schedule: &NoiseSchedule,
    x: Vec2,
    eps: Vec2,
    t_from: usize,
    t_to: usize,
    z: Vec2,
    variance: AncestralVariance,
) -> Vec2 {
    let ab_t = schedule.alpha_bar(t_from);
    let ab_s = schedule.alpha_bar(t_to);
    let a = ab_t / ab_s;
    let mean = (1.0 / a.sqrt()) * (x - ((1.0 - a) / (1.0 - ab_t).sqrt()) * eps);
    if t_to == 0 {
        return mean;
    }
    let var = match variance {
        AncestralVariance::Beta => 1.0 - a,
        AncestralVariance::PosteriorTilde => (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - a),
    };
    mean + var.sqrt() * z
}

fn check_order(schedule: &NoiseSchedule, t_from: usize, t_to: usize) -> Result<()> {
    if t_from <= t_to {
        return Err(LabError::InvalidStepOrder {
            from: t_from,
            to: t_to,
        });
    }
    schedule.check_index(t_from)
}

/// One deterministic step for a single state. Returns `(x_next, ε̂)`.
pub fn ddim_step(
    pred: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x: Vec2,
    t_from: usize,
    t_to: usize,
    guidance: Guidance,
) -> Result<(Vec2, Vec2)> {
    check_order(schedule, t_from, t_to)?;
    let eps = pred.predict(&[x], StepInfo::at(schedule, t_from), guidance)?[0];
    Ok((ddim_update(schedule, x, eps, t_from, t_to).0, eps))
}

/// One ancestral step `t → t − 1`.
pub fn ancestral_step(
    pred: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x: Vec2,
    t: usize,
    guidance: Guidance,
    variance: AncestralVariance,
    rng: &mut RngStream,
) -> Result<Vec2> {
    schedule.check_index(t)?;
    let eps = pred.predict(&[x], StepInfo::at(schedule, t), guidance)?[0];
    let z = if t > 1 {
        rng.gaussian_pair()
    } else {
        Vec2::ZERO
    };
    Ok(ancestral_update(schedule, x, eps, t, t - 1, z, variance))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub grid: StepGrid,
    pub stochastic: bool,
    #[serde(default)]
    pub ancestral_variance: AncestralVariance,
    pub guidance_scale: f64,
    pub cond: Option<usize>,
    /// Hybrid: number of leading grid steps handled by the base model.
    pub transition_point: usize,
    /// Hybrid: base-model substeps per handed-over grid interval.
    pub base_substeps: usize,
    pub skip_first: bool,
    /// Hybrid: whether student steps see `cond` (at `w = 1`) or the null
    /// condition.
    #[serde(default)]
    pub student_cond: bool,
}

impl SamplerConfig {
    pub fn deterministic(grid: StepGrid) -> Self {
        Self {
            grid,
            stochastic: false,
            ancestral_variance: AncestralVariance::Beta,
            guidance_scale: 1.0,
            cond: None,
            transition_point: 0,
            base_substeps: 1,
            skip_first: false,
            student_cond: false,
        }
    }

    fn noise(&self) -> Option<AncestralVariance> {
        self.stochastic.then_some(self.ancestral_variance)
    }

    pub fn guidance(&self) -> Guidance {
        Guidance::new(self.cond, self.guidance_scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_substeps == 0 {
            return Err(LabError::InvalidParameter(
                "base_substeps must be >= 1".into(),
            ));
        }
        if self.transition_point > self.grid.len() {
            return Err(LabError::GridTooShort {
                len: self.grid.len(),
                needed: self.transition_point,
            });
        }
        if !self.guidance_scale.is_finite() {
            return Err(LabError::InvalidParameter(
                "guidance scale must be finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Schedule index the prediction was made at.
    pub t: usize,
    pub x: Vec2,
    pub eps: Vec2,
    /// One-shot data estimate x̃0 at this step.
    pub dt: Vec2,
    pub role: ModelRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub final_x: Vec2,
    /// Network evaluations spent on this chain.
    pub evals: u32,
}

impl Trajectory {
    /// Largest deviation between stored and recomputed x̃0.
    pub fn dt_residual(&self, schedule: &NoiseSchedule) -> f64 {
        self.records
            .iter()
            .map(|r| (schedule.predict_x0(r.x, r.eps, r.t) - r.dt).norm())
            .fold(0.0, f64::max)
    }

    pub fn roles(&self) -> Vec<ModelRole> {
        self.records.iter().map(|r| r.role).collect()
    }
}

/// The recorded `(t, x̃0)` sequence of a trajectory.
pub fn dt_visualize(traj: &Trajectory) -> Vec<(usize, Vec2)> {
    traj.records.iter().map(|r| (r.t, r.dt)).collect()
}

#[derive(Clone, Copy, Debug)]
struct PlannedStep {
    t_from: usize,
    t_to: usize,
    model: usize,
    guidance: Guidance,
}

fn run_plan(
    models: &[&dyn NoisePredictor],
    schedule: &NoiseSchedule,
    plan: &[PlannedStep],
    stochastic: Option<AncestralVariance>,
    rngs: &mut [RngStream],
) -> Result<Vec<Trajectory>> {
    for s in plan {
        check_order(schedule, s.t_from, s.t_to)?;
    }
    let mut out = Vec::with_capacity(rngs.len());
    for block in rngs.chunks_mut(BLOCK) {
        let mut xs: Vec<Vec2> = block.iter_mut().map(|r| r.gaussian_pair()).collect();
        let mut trajs: Vec<Trajectory> = (0..block.len())
            .map(|_| Trajectory {
                records: Vec::with_capacity(plan.len()),
                final_x: Vec2::ZERO,
                evals: 0,
            })
            .collect();
        for s in plan {
            let pred = models[s.model];
            let eps = pred.predict(&xs, StepInfo::at(schedule, s.t_from), s.guidance)?;
            let evals = s.guidance.evals();
            for (i, x) in xs.iter_mut().enumerate() {
                let (det, x0) = ddim_update(schedule, *x, eps[i], s.t_from, s.t_to);
                trajs[i].records.push(StepRecord {
                    t: s.t_from,
                    x: *x,
                    eps: eps[i],
                    dt: x0,
                    role: pred.role(),
                });
                trajs[i].evals += evals;
                *x = if let Some(variance) = stochastic {
                    let z = if s.t_to > 0 {
                        block[i].gaussian_pair()
                    } else {
                        Vec2::ZERO
                    };
                    ancestral_update(schedule, *x, eps[i], s.t_from, s.t_to, z, variance)
                } else {
                    det
                };
            }
        }
        for (t, x) in trajs.iter_mut().zip(xs) {
            t.final_x = x;
        }
        out.extend(trajs);
    }
    Ok(out)
}

fn single_model_plan(
    grid_steps: impl Iterator<Item = (usize, usize)>,
    g: Guidance,
) -> Vec<PlannedStep> {
    grid_steps
        .map(|(t_from, t_to)| PlannedStep {
            t_from,
            t_to,
            model: 0,
            guidance: g,
        })
        .collect()
}

/// Per-chain streams with `stream_id = chain index`.
pub fn chain_streams(seed: u64, n: usize) -> Vec<RngStream> {
    (0..n as u64).map(|i| RngStream::new(seed, i)).collect()
}

/// Runs the sampler for each stream, starting from `x_T ~ N(0, I)` drawn
/// from that stream. Honors `skip_first`.
pub fn sample_with(
    pred: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rngs: &mut [RngStream],
) -> Result<Vec<Trajectory>> {
    config.validate()?;
    if config.skip_first {
        return skip_first_with(pred, schedule, config, rngs);
    }
    let plan = single_model_plan(config.grid.intervals(), config.guidance());
    run_plan(&[pred], schedule, &plan, config.noise(), rngs)
}

pub fn sample(
    pred: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let mut v = sample_with(pred, schedule, config, std::slice::from_mut(rng))?;
    Ok(v.remove(0))
}

pub fn sample_chains(
    pred: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<Trajectory>> {
    sample_with(pred, schedule, config, &mut chain_streams(seed, n))
}

/// Hybrid inference on the student's grid: the first `transition_point`
/// grid intervals are each split into `base_substeps` base-model steps
/// (with the configured guidance); the rest use the student at `w = 1`, on
/// the configured condition only if `student_cond` is set. The state passes
/// between models unchanged.
pub fn hybrid_with(
    base: &dyn NoisePredictor,
    distilled: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rngs: &mut [RngStream],
) -> Result<Vec<Trajectory>> {
    config.validate()?;
    let m = config.base_substeps;
    let mut plan = Vec::new();
    for (i, (t_from, t_to)) in config.grid.intervals().enumerate() {
        if i < config.transition_point {
            let span = t_from - t_to;
            if m > span {
                return Err(LabError::InvalidParameter(format!(
                    "cannot split interval {t_from}->{t_to} into {m} substeps"
                )));
            }
            let pts: Vec<usize> = (0..=m)
                .map(|j| t_from - ((j * span) as f64 / m as f64).round() as usize)
                .collect();
            for w in pts.windows(2) {
                plan.push(PlannedStep {
                    t_from: w[0],
                    t_to: w[1],
                    model: 0,
                    guidance: config.guidance(),
                });
            }
        } else {
            plan.push(PlannedStep {
                t_from,
                t_to,
                model: 1,
                guidance: if config.student_cond {
                    Guidance::new(config.cond, 1.0)
                } else {
                    Guidance::UNCONDITIONAL
                },
            });
        }
    }
    run_plan(&[base, distilled], schedule, &plan, config.noise(), rngs)
}

pub fn hybrid_sample(
    base: &dyn NoisePredictor,
    distilled: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let mut v = hybrid_with(base, distilled, schedule, config, std::slice::from_mut(rng))?;
    Ok(v.remove(0))
}

pub fn hybrid_chains(
    base: &dyn NoisePredictor,
    distilled: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<Trajectory>> {
    hybrid_with(
        base,
        distilled,
        schedule,
        config,
        &mut chain_streams(seed, n),
    )
}

/// Starts from fresh `N(0, I)` noise at the second grid point and runs the
/// remaining `N − 1` steps.
pub fn skip_first_with(
    pred: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rngs: &mut [RngStream],
) -> Result<Vec<Trajectory>> {
    if config.grid.len() < 2 {
        return Err(LabError::GridTooShort {
            len: config.grid.len(),
            needed: 2,
        });
    }
    let plan = single_model_plan(config.grid.intervals().skip(1), config.guidance());
    run_plan(&[pred], schedule, &plan, config.noise(), rngs)
}

pub fn skip_first_sample(
    pred: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let mut v = skip_first_with(pred, schedule, config, std::slice::from_mut(rng))?;
    Ok(v.remove(0))
}

pub fn skip_first_chains(
    pred: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<Trajectory>> {
    skip_first_with(pred, schedule, config, &mut chain_streams(seed, n))
}

/// Final samples only, for `n` chains with per-chain streams; keeps memory
/// bounded by one block of trajectories.
pub fn sample_endpoints(
    pred: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<Vec2>> {
    let mut rngs = chain_streams(seed, n);
    let mut out = Vec::with_capacity(n);
    for block in rngs.chunks_mut(BLOCK) {
        out.extend(final_points(&sample_with(pred, schedule, config, block)?));
    }
    Ok(out)
}

pub fn final_points(trajs: &[Trajectory]) -> Vec<Vec2> {
    trajs.iter().map(|t| t.final_x).collect()
}

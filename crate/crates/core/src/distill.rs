//! Few-step students: progressive halving and endpoint regression through
//! an unrolled rollout.

use serde::{Deserialize, Serialize};

use crate::data::{sample_truth, ToyDistribution};
use crate::diffusion::{
    ddim_update, sample_chains, sample_endpoints, NetPredictor, NoiseSchedule, SamplerConfig,
    StepGrid,
};
use crate::error::{LabError, Result};
use crate::metrics::{dt_curve, DtCurve};
use crate::nn::{
    cosine_lr, opt_step, AdamState, DenoiserInput, DenoiserModel, EffectiveWeights, GradientTape,
    ModelRole, TrainExample, Trainable,
};
use crate::numerics::{RngStream, Vec2};

const DATA_STREAM: u64 = 0xd157;
const POOL_PURPOSE: u64 = 0x9001;
const PROBE_PURPOSE: u64 = 0x9002;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMethod {
    Progressive,
    Regression,
}

impl DistillMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DistillMethod::Progressive => "progressive",
            DistillMethod::Regression => "regression",
        }
    }
}

impl std::str::FromStr for DistillMethod {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(DistillMethod::Progressive),
            "regression" => Ok(DistillMethod::Regression),
            other => Err(LabError::InvalidParameter(format!(
                "unknown distillation method '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub method: DistillMethod,
    /// Steps of the teacher's sampling grid.
    pub teacher_steps: usize,
    pub target_steps: usize,
    /// Per halving round for progressive, total for regression.
    pub iterations: usize,
    pub lr: f64,
    /// Cosine decay floor.
    pub lr_min: f64,
    pub batch: usize,
    /// Teacher endpoints precomputed for regression.
    pub teacher_pool: usize,
    /// Shared noises for the progressive validation endpoint error.
    pub val_probes: usize,
    pub log_every: usize,
    pub seed: u64,
    /// Regression targets come from ancestral rather than DDIM teacher
    /// rollouts, so each initial noise maps to one random endpoint draw.
    #[serde(default)]
    pub stochastic_teacher: bool,
}

impl DistillConfig {
    pub fn progressive() -> Self {
        Self {
            method: DistillMethod::Progressive,
            teacher_steps: 32,
            target_steps: 4,
            iterations: 4_000,
            lr: 3e-4,
            lr_min: 3e-5,
            batch: 256,
            teacher_pool: 32_768,
            val_probes: 1_000,
            log_every: 500,
            seed: 42,
            stochastic_teacher: false,
        }
    }

    pub fn regression() -> Self {
        Self {
            method: DistillMethod::Regression,
            iterations: 8_000,
            ..Self::progressive()
        }
    }

    pub fn for_method(method: DistillMethod) -> Self {
        match method {
            DistillMethod::Progressive => Self::progressive(),
            DistillMethod::Regression => Self::regression(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_steps == 0 || !self.teacher_steps.is_multiple_of(self.target_steps) {
            return Err(LabError::NonDivisibleGrid {
                base: self.teacher_steps,
                target: self.target_steps,
            });
        }
        if self.batch == 0 || self.log_every == 0 || self.teacher_pool == 0 || self.val_probes < 2 {
            return Err(LabError::InvalidParameter(
                "batch, log_every, teacher_pool and val_probes must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0) {
            return Err(LabError::InvalidParameter(
                "learning rates must be positive".into(),
            ));
        }
        if self.method == DistillMethod::Progressive {
            self.rounds()?;
        }
        Ok(())
    }

    /// Student step counts of the halving rounds, e.g. `[16, 8, 4]`.
    pub fn rounds(&self) -> Result<Vec<usize>> {
        let ratio = self.teacher_steps / self.target_steps.max(1);
        if self.target_steps == 0
            || !self.teacher_steps.is_multiple_of(self.target_steps)
            || !ratio.is_power_of_two()
        {
            return Err(LabError::NonDivisibleGrid {
                base: self.teacher_steps,
                target: self.target_steps,
            });
        }
        let mut out = Vec::new();
        let mut n = self.teacher_steps;
        while n > self.target_steps {
            n /= 2;
            out.push(n);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    /// Mean training loss over the window closing at `iteration`; the first
    /// batch's loss at iteration 0.
    pub loss: f64,
    /// Endpoint MSE against the round's teacher on held-out noises.
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub student_steps: usize,
    pub entries: Vec<LogEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    pub method: DistillMethod,
    pub rounds: Vec<RoundLog>,
}

fn check_teacher(
    teacher: &DenoiserModel,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
) -> Result<()> {
    cfg.validate()?;
    if cfg.teacher_steps > schedule.t_max() {
        return Err(LabError::GridTooShort {
            len: schedule.t_max(),
            needed: cfg.teacher_steps,
        });
    }
    if !teacher.is_finite() {
        return Err(LabError::InvalidParameter(
            "teacher has non-finite parameters".into(),
        ));
    }
    Ok(())
}

/// ε̂ for rows at individual schedule indices, null condition.
fn eps_rows(
    model: &DenoiserModel,
    w: &EffectiveWeights<'_>,
    schedule: &NoiseSchedule,
    xs: &[Vec2],
    ts: &[usize],
) -> Result<Vec<Vec2>> {
    let inputs: Vec<DenoiserInput> = xs
        .iter()
        .zip(ts)
        .map(|(&x, &t)| DenoiserInput {
            x,
            t_frac: schedule.t_frac(t),
            cond: None,
        })
        .collect();
    model.forward_with(w, &inputs)
}

/// Coefficients of the one-step update `x_to = a·x + b·ε`.
fn ddim_coefficients(schedule: &NoiseSchedule, t_from: usize, t_to: usize) -> (f64, f64) {
    let (af, at) = (schedule.alpha_bar(t_from), schedule.alpha_bar(t_to));
    let a = at.sqrt() / af.sqrt();
    let b = (1.0 - at).sqrt() - at.sqrt() * (1.0 - af).sqrt() / af.sqrt();
    (a, b)
}

/// The ε that carries `x` from `t_from` to `target` at `t_to` in one DDIM
/// step.
pub fn epsilon_target(
    schedule: &NoiseSchedule,
    x: Vec2,
    target: Vec2,
    t_from: usize,
    t_to: usize,
) -> Vec2 {
    let (a, b) = ddim_coefficients(schedule, t_from, t_to);
    (1.0 / b) * (target - a * x)
}

fn endpoint_mse(a: &[Vec2], b: &[Vec2]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (*p - *q).norm_sq())
        .sum::<f64>()
        / a.len() as f64
}

fn deterministic(grid: StepGrid) -> SamplerConfig {
    SamplerConfig::deterministic(grid)
}

/// Halves the sampling grid each round: the student (initialized from the
/// current teacher) learns to cover two teacher DDIM steps in one, then
/// becomes the next round's teacher.
pub fn distill_progressive(
    teacher: &DenoiserModel,
    dist: &ToyDistribution,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
) -> Result<(DenoiserModel, DistillLog)> {
    check_teacher(teacher, schedule, cfg)?;
    let t_max = schedule.t_max();
    let mut current = teacher.clone();
    let mut teacher_steps = cfg.teacher_steps;
    let mut log = DistillLog {
        method: DistillMethod::Progressive,
        rounds: Vec::new(),
    };
    for (round, &steps) in cfg.rounds()?.iter().enumerate() {
        let t_grid = StepGrid::uniform(t_max, teacher_steps)?;
        let s_grid = StepGrid::uniform(t_max, steps)?;
        let mut student = current.clone().with_role(ModelRole::Distilled);
        let mut adam = AdamState::new(student.params.len());
        let mut rng = RngStream::new(cfg.seed, DATA_STREAM + round as u64);
        let probe_seed = RngStream::child(cfg.seed, PROBE_PURPOSE, round as u64).next_u64();
        let t_pred = NetPredictor::new(&current, None)?;
        let val_target = sample_endpoints(
            &t_pred,
            schedule,
            &deterministic(t_grid.clone()),
            probe_seed,
            cfg.val_probes,
        )?;
        let validate = |m: &DenoiserModel| -> Result<f64> {
            let p = NetPredictor::new(m, None)?;
            let got = sample_endpoints(
                &p,
                schedule,
                &deterministic(s_grid.clone()),
                probe_seed,
                cfg.val_probes,
            )?;
            Ok(endpoint_mse(&got, &val_target))
        };
        let tw = current.weights(None)?;
        let sp = s_grid.points();
        let tp = t_grid.points();
        let mut entries = vec![];
        let mut window = 0.0;
        for it in 0..cfg.iterations {
            let data = sample_truth(dist, cfg.batch, &mut rng)?;
            let mut xs = Vec::with_capacity(cfg.batch);
            let mut froms = Vec::with_capacity(cfg.batch);
            let mut mids = Vec::with_capacity(cfg.batch);
            let mut tos = Vec::with_capacity(cfg.batch);
            for d in &data {
                let i = rng.below(steps);
                let z = rng.gaussian_pair();
                debug_assert_eq!(tp[2 * i], sp[i]);
                xs.push(schedule.noise_with(d.point, sp[i], z));
                froms.push(sp[i]);
                mids.push(tp[2 * i + 1]);
                tos.push(sp[i + 1]);
            }
            let e1 = eps_rows(&current, &tw, schedule, &xs, &froms)?;
            let x_mid: Vec<Vec2> = (0..xs.len())
                .map(|j| ddim_update(schedule, xs[j], e1[j], froms[j], mids[j]).0)
                .collect();
            let e2 = eps_rows(&current, &tw, schedule, &x_mid, &mids)?;
            let batch: Vec<TrainExample> = (0..xs.len())
                .map(|j| {
                    let target = ddim_update(schedule, x_mid[j], e2[j], mids[j], tos[j]).0;
                    TrainExample {
                        x: xs[j],
                        t_frac: schedule.t_frac(froms[j]),
                        cond: None,
                        target: epsilon_target(schedule, xs[j], target, froms[j], tos[j]),
                    }
                })
                .collect();
            let (loss, tape) = student.backward(None, &batch, Trainable::ModelParams)?;
            if it == 0 {
                entries.push(LogEntry {
                    iteration: 0,
                    loss,
                    val_mse: Some(validate(&student)?),
                });
            }
            window += loss;
            let lr = cosine_lr(it, cfg.iterations, cfg.lr, cfg.lr_min);
            opt_step(&mut student.params, &tape.model, &mut adam, lr)?;
            if (it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations {
                let span = (it + 1) - entries.last().map_or(0, |e: &LogEntry| e.iteration);
                entries.push(LogEntry {
                    iteration: it + 1,
                    loss: window / span as f64,
                    val_mse: Some(validate(&student)?),
                });
                window = 0.0;
            }
        }
        if cfg.iterations == 0 {
            entries.push(LogEntry {
                iteration: 0,
                loss: f64::NAN,
                val_mse: Some(validate(&student)?),
            });
        }
        log.rounds.push(RoundLog {
            student_steps: steps,
            entries,
        });
        drop(tw);
        current = student;
        teacher_steps = steps;
    }
    Ok((current.with_role(ModelRole::Distilled), log))
}

/// Endpoint loss `Σ‖x_N − y‖²/(2B)` of a deterministic student rollout from
/// `noises` over `grid`, with its gradient in the student's parameters
/// (backpropagated through every step).
pub fn rollout_loss_grad(
    student: &DenoiserModel,
    schedule: &NoiseSchedule,
    grid: &StepGrid,
    noises: &[Vec2],
    targets: &[Vec2],
) -> Result<(f64, Vec<f64>)> {
    if noises.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    if noises.len() != targets.len() {
        return Err(LabError::LengthMismatch(format!(
            "{} noises, {} targets",
            noises.len(),
            targets.len()
        )));
    }
    let w = student.weights(None)?;
    let mut x = noises.to_vec();
    let mut caches = Vec::with_capacity(grid.len());
    let mut coefs = Vec::with_capacity(grid.len());
    for (t_from, t_to) in grid.intervals() {
        let inputs: Vec<DenoiserInput> = x
            .iter()
            .map(|&x| DenoiserInput {
                x,
                t_frac: schedule.t_frac(t_from),
                cond: None,
            })
            .collect();
        let cache = student.forward_cached(&w, &inputs)?;
        let (a, b) = ddim_coefficients(schedule, t_from, t_to);
        for (xi, e) in x.iter_mut().zip(cache.outputs()) {
            *xi = a * *xi + b * e;
        }
        caches.push(cache);
        coefs.push((a, b));
    }
    let n = noises.len() as f64;
    let mut loss = 0.0;
    let mut g: Vec<Vec2> = x
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let r = *p - *y;
            loss += r.norm_sq();
            (1.0 / n) * r
        })
        .collect();
    let mut tape = GradientTape::zeros(student, None);
    for (cache, (a, b)) in caches.iter().zip(&coefs).rev() {
        let d_out: Vec<Vec2> = g.iter().map(|v| *b * *v).collect();
        let dx = student.backprop(None, &w, cache, &d_out, Trainable::ModelParams, &mut tape)?;
        for (gi, d) in g.iter_mut().zip(dx) {
            *gi = *a * *gi + d;
        }
    }
    Ok((loss / (2.0 * n), tape.model))
}

/// Trains a `target_steps` student whose deterministic rollout endpoint
/// regresses onto the teacher's full-grid endpoint from the same noise.
pub fn distill_regression(
    teacher: &DenoiserModel,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
) -> Result<(DenoiserModel, DistillLog)> {
    check_teacher(teacher, schedule, cfg)?;
    let t_max = schedule.t_max();
    let t_grid = StepGrid::uniform(t_max, cfg.teacher_steps)?;
    let s_grid = StepGrid::uniform(t_max, cfg.target_steps)?;
    let pool_seed = RngStream::child(cfg.seed, POOL_PURPOSE, 0).next_u64();
    let t_pred = NetPredictor::new(teacher, None)?;
    let t_cfg = SamplerConfig {
        stochastic: cfg.stochastic_teacher,
        ..deterministic(t_grid)
    };
    let targets = sample_endpoints(&t_pred, schedule, &t_cfg, pool_seed, cfg.teacher_pool)?;
    // the initial noise of chain i is the first pair of its stream
    let noises: Vec<Vec2> = (0..cfg.teacher_pool as u64)
        .map(|i| RngStream::new(pool_seed, i).gaussian_pair())
        .collect();
    let mut student = teacher.clone().with_role(ModelRole::Distilled);
    let mut adam = AdamState::new(student.params.len());
    let mut rng = RngStream::new(cfg.seed, DATA_STREAM + 0x100);
    let mut entries = Vec::new();
    let mut window = 0.0;
    let mut last = 0;
    for it in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.below(cfg.teacher_pool))
            .collect();
        let z: Vec<Vec2> = idx.iter().map(|&i| noises[i]).collect();
        let y: Vec<Vec2> = idx.iter().map(|&i| targets[i]).collect();
        let (loss, grad) = rollout_loss_grad(&student, schedule, &s_grid, &z, &y)?;
        if it == 0 {
            entries.push(LogEntry {
                iteration: 0,
                loss,
                val_mse: None,
            });
        }
        window += loss;
        let lr = cosine_lr(it, cfg.iterations, cfg.lr, cfg.lr_min);
        opt_step(&mut student.params, &grad, &mut adam, lr)?;
        if (it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations {
            entries.push(LogEntry {
                iteration: it + 1,
                loss: window / (it + 1 - last) as f64,
                val_mse: None,
            });
            last = it + 1;
            window = 0.0;
        }
    }
    let log = DistillLog {
        method: DistillMethod::Regression,
        rounds: vec![RoundLog {
            student_steps: cfg.target_steps,
            entries,
        }],
    };
    Ok((student, log))
}

pub fn distill(
    teacher: &DenoiserModel,
    dist: &ToyDistribution,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
) -> Result<(DenoiserModel, DistillLog)> {
    match cfg.method {
        DistillMethod::Progressive => distill_progressive(teacher, dist, schedule, cfg),
        DistillMethod::Regression => distill_regression(teacher, schedule, cfg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub n_probes: usize,
    pub endpoint_mse: f64,
    pub student_curve: DtCurve,
    pub teacher_curve: DtCurve,
}

/// Compares deterministic student and teacher rollouts from shared noises.
pub fn eval_distillation(
    student: &DenoiserModel,
    student_grid: &StepGrid,
    teacher: &DenoiserModel,
    teacher_grid: &StepGrid,
    schedule: &NoiseSchedule,
    n_probes: usize,
    seed: u64,
) -> Result<DistillReport> {
    let run = |m: &DenoiserModel, g: &StepGrid| -> Result<(Vec<Vec2>, DtCurve)> {
        let p = NetPredictor::new(m, None)?;
        let trajs = sample_chains(&p, schedule, &deterministic(g.clone()), seed, n_probes)?;
        let finals: Vec<Vec2> = trajs.iter().map(|t| t.final_x).collect();
        let curve = dt_curve(&trajs, &finals)?;
        Ok((finals, curve))
    };
    let (s_end, student_curve) = run(student, student_grid)?;
    let (t_end, teacher_curve) = run(teacher, teacher_grid)?;
    Ok(DistillReport {
        n_probes,
        endpoint_mse: endpoint_mse(&s_end, &t_end),
        student_curve,
        teacher_curve,
    })
}

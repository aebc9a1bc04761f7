//! Run configuration: one JSON document, optionally patched with
//! `dotted.path=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ddlab_core::control::SliderConfig;
use ddlab_core::data::ToyDistribution;
use ddlab_core::diffusion::{
    make_schedule, AncestralVariance, NoiseSchedule, SamplerConfig, ScheduleKind, StepGrid,
    TrainConfig,
};
use ddlab_core::distill::{DistillConfig, DistillMethod};
use ddlab_core::nn::{Activation, Architecture, OutputParam};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Offsets added to the master seed, one per purpose.
pub const SEED_OFFSETS: [(&str, u64); 8] = [
    ("train", 0),
    ("distill", 1),
    ("slider", 2),
    ("eval", 3),
    ("reference", 4),
    ("dt", 5),
    ("data", 6),
    ("fidelity", 7),
];

pub fn seed_offset(purpose: &str) -> u64 {
    SEED_OFFSETS
        .iter()
        .find(|(p, _)| *p == purpose)
        .map(|(_, o)| *o)
        .unwrap_or_else(|| panic!("unknown seed purpose {purpose}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub distribution: ToyDistribution,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub distillation: DistillSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub metrics: MetricSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub control: ControlSpec,
}

fn default_seed() -> u64 {
    42
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub t_max: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Epsilon,
    Velocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    /// Condition on the distribution's mode labels (with a null row).
    pub conditional: bool,
    pub output: OutputKind,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            time_embed_dim: 32,
            cond_embed_dim: 8,
            conditional: true,
            output: OutputKind::Velocity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    pub iterations: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub cond_dropout: f64,
    pub log_every: usize,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iterations: t.iterations,
            batch: t.batch,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            cond_dropout: t.cond_dropout,
            log_every: t.log_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSpec {
    pub method: String,
    /// Per round for progressive, total for regression; `None` takes the
    /// method's default.
    pub iterations: Option<usize>,
    pub lr: f64,
    pub lr_min: f64,
    pub batch: usize,
    pub teacher_pool: usize,
    pub val_probes: usize,
    pub log_every: usize,
    /// Shared noises for the fidelity report.
    pub fidelity_probes: usize,
    /// Regression targets from ancestral teacher rollouts.
    pub stochastic_teacher: bool,
}

impl Default for DistillSpec {
    fn default() -> Self {
        let d = DistillConfig::regression();
        Self {
            method: d.method.as_str().to_string(),
            iterations: None,
            lr: d.lr,
            lr_min: d.lr_min,
            batch: d.batch,
            teacher_pool: d.teacher_pool,
            val_probes: d.val_probes,
            log_every: d.log_every,
            fidelity_probes: 1_000,
            stochastic_teacher: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleArm {
    Base,
    Distilled,
    Hybrid,
    SkipFirst,
}

impl SampleArm {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Distilled => "distilled",
            Self::Hybrid => "hybrid",
            Self::SkipFirst => "skip_first",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub base_steps: usize,
    pub distilled_steps: usize,
    /// Hybrid transition point k.
    pub k: usize,
    /// Hybrid base substeps m.
    pub m: usize,
    /// Guidance scale for base-model steps.
    pub w: f64,
    pub cond: Option<usize>,
    /// Student steps of the hybrid see `cond` instead of the null condition.
    pub student_cond: bool,
    /// Arm used by the `sample` subcommand.
    pub arm: SampleArm,
    pub skip_first: bool,
    /// Ancestral sampling for the base arm.
    pub stochastic_base: bool,
    pub ancestral_variance: AncestralVariance,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            base_steps: 32,
            distilled_steps: 4,
            k: 1,
            m: 1,
            w: 1.0,
            cond: None,
            student_cond: false,
            arm: SampleArm::Hybrid,
            skip_first: false,
            stochastic_base: true,
            ancestral_variance: AncestralVariance::Beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSpec {
    pub n_samples: usize,
    pub n_reference: usize,
    pub n_dt: usize,
    pub n_control: usize,
    /// Points drawn per series in scatter SVGs.
    pub n_plot: usize,
    /// Trajectories drawn per DT panel.
    pub n_panels: usize,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            n_reference: 10_000,
            n_dt: 256,
            n_control: 2_000,
            n_plot: 2_000,
            n_panels: 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Guidance,
    K,
    Substeps,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 3] = [SweepAxis::Guidance, SweepAxis::K, SweepAxis::Substeps];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Guidance => "guidance",
            Self::K => "k",
            Self::Substeps => "substeps",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| CliError::config("axis", format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub guidance: Vec<f64>,
    pub k: Vec<usize>,
    pub substeps: Vec<usize>,
    /// Condition used by the guidance sweep.
    pub guidance_cond: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            guidance: vec![-1.0, 0.0, 0.5, 1.0, 2.0, 4.0],
            k: vec![0, 1, 2, 3, 4],
            substeps: vec![1, 2, 4, 8],
            guidance_cond: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    BaseToDistilled,
    DistilledToBase,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BaseToDistilled => "base_to_distilled",
            Self::DistilledToBase => "distilled_to_base",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "base_to_distilled" => Ok(Self::BaseToDistilled),
            "distilled_to_base" => Ok(Self::DistilledToBase),
            _ => Err(CliError::config(
                "direction",
                format!("unknown direction `{s}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSpec {
    /// Translation applied to the slider's training data along the
    /// attribute direction.
    pub delta: f64,
    pub rank: usize,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub direction: Direction,
}

impl Default for ControlSpec {
    fn default() -> Self {
        let s = SliderConfig::default();
        Self {
            delta: 2.0,
            rank: s.rank,
            iterations: s.iterations,
            batch: s.batch,
            lr: s.lr,
            lr_min: s.lr_min,
            direction: Direction::BaseToDistilled,
        }
    }
}

/// Applies `path=value` to a JSON tree. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(assignment, "override must look like path=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(CliError::config(path, "empty path segment"));
        }
        let obj = match node {
            Value::Object(m) => m,
            _ => {
                return Err(CliError::config(
                    keys[..i].join("."),
                    "cannot set a field inside a non-object value",
                ))
            }
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl RunConfig {
    /// The default laboratory setup on the 8-mode ring.
    pub fn gmm_ring_default() -> Self {
        Self {
            seed: default_seed(),
            out_dir: default_out_dir(),
            distribution: ToyDistribution::default(),
            schedule: ScheduleSpec {
                kind: ScheduleKind::Cosine,
                t_max: 64,
            },
            model: ModelSpec::default(),
            training: TrainingSpec::default(),
            distillation: DistillSpec::default(),
            sampler: SamplerSpec::default(),
            metrics: MetricSpec::default(),
            sweep: SweepSpec::default(),
            control: ControlSpec::default(),
        }
    }

    pub fn from_value(doc: Value) -> CliResult<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            // Missing fields are reported against the parent; name them.
            let field = match inner.strip_prefix("missing field `") {
                Some(rest) => {
                    let name = rest.split('`').next().unwrap_or_default();
                    if path == "." {
                        name.to_string()
                    } else {
                        format!("{path}.{name}")
                    }
                }
                None => path,
            };
            CliError::config(field, inner)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| CliError::config("config", e))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.distribution
            .validate()
            .map_err(|e| CliError::config("distribution", e))?;
        let schedule = self.noise_schedule()?;
        self.architecture(&schedule)?
            .validate()
            .map_err(|e| CliError::config("model", e))?;
        self.train_config(&schedule)?
            .validate()
            .map_err(|e| CliError::config("training", e))?;
        self.distill_config()?
            .validate()
            .map_err(|e| CliError::config("distillation", e))?;
        let s = &self.sampler;
        self.base_grid()?;
        let sc = self.hybrid_config(s.k, s.m, s.w, s.cond)?;
        sc.validate().map_err(|e| CliError::config("sampler", e))?;
        if s.m > 1 && s.k > 0 {
            let (from, to) = sc.grid.intervals().next().expect("grid has intervals");
            if s.m > from - to {
                return Err(CliError::config(
                    "sampler.m",
                    format!("cannot split interval {from}->{to} into {} substeps", s.m),
                ));
            }
        }
        if let Some(c) = s.cond {
            if !self.model.conditional || c >= self.distribution.n_labels() {
                return Err(CliError::config(
                    "sampler.cond",
                    "condition not available for this model",
                ));
            }
        }
        let m = &self.metrics;
        for (name, v) in [
            ("metrics.n_samples", m.n_samples),
            ("metrics.n_reference", m.n_reference),
            ("metrics.n_dt", m.n_dt),
            ("metrics.n_control", m.n_control),
        ] {
            if v < 2 {
                return Err(CliError::config(name, "need at least 2 samples"));
            }
        }
        if self.sweep.k.iter().any(|&k| k > s.distilled_steps) {
            return Err(CliError::config(
                "sweep.k",
                "transition point beyond the distilled grid",
            ));
        }
        if self.sweep.substeps.contains(&0) {
            return Err(CliError::config("sweep.substeps", "substeps must be >= 1"));
        }
        if self.sweep.guidance.iter().any(|w| !w.is_finite()) {
            return Err(CliError::config(
                "sweep.guidance",
                "guidance scales must be finite",
            ));
        }
        let c = &self.control;
        if c.delta == 0.0 || !c.delta.is_finite() {
            return Err(CliError::config(
                "control.delta",
                "must be finite and non-zero",
            ));
        }
        if c.rank == 0 || c.batch == 0 || c.iterations == 0 {
            return Err(CliError::config(
                "control",
                "rank, batch and iterations must be positive",
            ));
        }
        Ok(())
    }

    pub fn seed_for(&self, purpose: &str) -> u64 {
        self.seed.wrapping_add(seed_offset(purpose))
    }

    pub fn seed_table(&self) -> BTreeMap<String, u64> {
        SEED_OFFSETS
            .iter()
            .map(|(p, o)| (p.to_string(), *o))
            .collect()
    }

    /// SHA-256 over the canonical JSON of every field except `out_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out_dir");
        }
        let bytes = serde_json::to_vec(&v).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn noise_schedule(&self) -> CliResult<NoiseSchedule> {
        make_schedule(self.schedule.kind, self.schedule.t_max)
            .map_err(|e| CliError::config("schedule", e))
    }

    pub fn architecture(&self, schedule: &NoiseSchedule) -> CliResult<Architecture> {
        let m = &self.model;
        let n_conditions = if m.conditional {
            let n = self.distribution.n_labels();
            if n == 0 {
                return Err(CliError::config(
                    "model.conditional",
                    "distribution has no labels to condition on",
                ));
            }
            n
        } else {
            0
        };
        Ok(Architecture {
            hidden: m.hidden.clone(),
            time_embed_dim: m.time_embed_dim,
            cond_embed_dim: m.cond_embed_dim,
            n_conditions,
            activation: Activation::Silu,
            output: match m.output {
                OutputKind::Epsilon => OutputParam::Epsilon,
                OutputKind::Velocity => schedule.velocity_output(),
            },
        })
    }

    pub fn train_config(&self, schedule: &NoiseSchedule) -> CliResult<TrainConfig> {
        let t = &self.training;
        Ok(TrainConfig {
            architecture: self.architecture(schedule)?,
            iterations: t.iterations,
            batch: t.batch,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            cond_dropout: t.cond_dropout,
            log_every: t.log_every,
            seed: self.seed_for("train"),
        })
    }

    pub fn distill_method(&self) -> CliResult<DistillMethod> {
        self.distillation
            .method
            .parse()
            .map_err(|e| CliError::config("distillation.method", e))
    }

    pub fn distill_config(&self) -> CliResult<DistillConfig> {
        let d = &self.distillation;
        let base = DistillConfig::for_method(self.distill_method()?);
        Ok(DistillConfig {
            teacher_steps: self.sampler.base_steps,
            target_steps: self.sampler.distilled_steps,
            iterations: d.iterations.unwrap_or(base.iterations),
            lr: d.lr,
            lr_min: d.lr_min,
            batch: d.batch,
            teacher_pool: d.teacher_pool,
            val_probes: d.val_probes,
            log_every: d.log_every,
            seed: self.seed_for("distill"),
            stochastic_teacher: d.stochastic_teacher,
            ..base
        })
    }

    pub fn slider_config(&self) -> SliderConfig {
        let c = &self.control;
        SliderConfig {
            rank: c.rank,
            iterations: c.iterations,
            batch: c.batch,
            lr: c.lr,
            lr_min: c.lr_min,
            seed: self.seed_for("slider"),
        }
    }

    pub fn base_grid(&self) -> CliResult<StepGrid> {
        StepGrid::uniform(self.schedule.t_max, self.sampler.base_steps)
            .map_err(|e| CliError::config("sampler.base_steps", e))
    }

    pub fn distilled_grid(&self) -> CliResult<StepGrid> {
        StepGrid::uniform(self.schedule.t_max, self.sampler.distilled_steps)
            .map_err(|e| CliError::config("sampler.distilled_steps", e))
    }

    /// Base arm: the full base grid, ancestral if configured, unconditional.
    pub fn base_sampler(&self) -> CliResult<SamplerConfig> {
        Ok(SamplerConfig {
            stochastic: self.sampler.stochastic_base,
            ancestral_variance: self.sampler.ancestral_variance,
            ..SamplerConfig::deterministic(self.base_grid()?)
        })
    }

    pub fn distilled_sampler(&self, skip_first: bool) -> CliResult<SamplerConfig> {
        Ok(SamplerConfig {
            skip_first,
            ..SamplerConfig::deterministic(self.distilled_grid()?)
        })
    }

    pub fn hybrid_config(
        &self,
        k: usize,
        m: usize,
        w: f64,
        cond: Option<usize>,
    ) -> CliResult<SamplerConfig> {
        Ok(SamplerConfig {
            transition_point: k,
            base_substeps: m,
            guidance_scale: w,
            cond,
            student_cond: self.sampler.student_cond,
            ..SamplerConfig::deterministic(self.distilled_grid()?)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"distribution": {"kind": "gmm_ring", "params": {"n_modes": 8, "ring_radius": 4.0, "mode_std": 0.15}, "attribute_direction": {"x": 1.0, "y": 0.0}},
            "schedule": {"kind": "cosine", "t_max": 64}}"#
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::parse(minimal(), &[]).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.sampler.base_steps, 32);
        assert_eq!(c.sweep.k, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn missing_required_field_is_named() {
        let err = RunConfig::parse(r#"{"distribution": {"kind": "gmm_ring", "params": {}, "attribute_direction": {"x": 1.0, "y": 0.0}}}"#, &[])
            .unwrap_err();
        match err {
            CliError::ConfigInvalid { field, .. } => assert_eq!(field, "schedule"),
            e => panic!("{e}"),
        }
        let err = RunConfig::parse(r#"{"distribution": {"kind": "gmm_ring", "params": {}, "attribute_direction": {"x": 1.0, "y": 0.0}}, "schedule": {"kind": "cosine"}}"#, &[])
            .unwrap_err();
        match err {
            CliError::ConfigInvalid { field, .. } => assert_eq!(field, "schedule.t_max"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let err = RunConfig::parse(minimal(), &["sampler.bogus=3".into()]).unwrap_err();
        match err {
            CliError::ConfigInvalid { field, message } => {
                assert_eq!(field, "sampler.bogus");
                assert!(message.contains("bogus"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn overrides_parse_json_then_string() {
        let c = RunConfig::parse(
            minimal(),
            &[
                "sampler.k=2".into(),
                "distillation.method=progressive".into(),
                "sampler.cond=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.sampler.k, 2);
        assert_eq!(c.distillation.method, "progressive");
        assert_eq!(c.sampler.cond, Some(3));
    }

    #[test]
    fn unknown_method_is_config_error() {
        let err =
            RunConfig::parse(minimal(), &["distillation.method=adversarial".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("distillation.method"));
    }

    #[test]
    fn indivisible_grid_rejected() {
        let err = RunConfig::parse(minimal(), &["sampler.distilled_steps=5".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = RunConfig::gmm_ring_default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.sampler.w = 2.0;
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.seed = 43;
        assert_ne!(a.hash(), d.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn default_round_trips() {
        let a = RunConfig::gmm_ring_default();
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(RunConfig::parse(&text, &[]).unwrap(), a);
    }

    #[test]
    fn seed_offsets_distinct() {
        let mut seen: Vec<u64> = SEED_OFFSETS.iter().map(|(_, o)| *o).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), SEED_OFFSETS.len());
    }
}

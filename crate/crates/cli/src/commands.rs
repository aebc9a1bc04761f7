//! One function per subcommand. Each reads its inputs from the run
//! directory, writes its artifacts atomically and updates the manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ddlab_core::control::{train_slider, transfer_slider, Arm, TransferReport, TRANSFER_SCALES};
use ddlab_core::data::sample_truth;
use ddlab_core::diffusion::{
    final_points, hybrid_chains, sample_chains, sample_endpoints, train_base, NetPredictor,
    NoiseSchedule, SamplerConfig, StepGrid, TrainLog, Trajectory,
};
use ddlab_core::distill::{distill, eval_distillation, DistillLog, DistillReport};
use ddlab_core::io::{
    fmt_f64, render_line_svg, render_svg, CsvTable, PathSeries, ScatterSeries, PALETTE,
};
use ddlab_core::metrics::{dt_curve, DtCurve, MetricsReport};
use ddlab_core::nn::checkpoint::{load_model, save_adapter, save_model};
use ddlab_core::nn::{CheckpointMeta, DenoiserModel, LoraAdapter, ModelRole};
use ddlab_core::{RngStream, Vec2};
use serde::Serialize;

use crate::config::{Direction, RunConfig, SampleArm, SweepAxis};
use crate::error::{CliError, CliResult};
use crate::manifest::{RunManifest, Stage, MANIFEST_FILE};

pub const BASE_CHECKPOINT: &str = "checkpoints/base.ddlab";
pub const REPORT_FILE: &str = "report.md";

const TRUTH_COLOR: &str = PALETTE[5];

fn role_color(role: ModelRole) -> &'static str {
    match role {
        ModelRole::Base => PALETTE[0],
        ModelRole::Distilled => PALETTE[1],
    }
}

pub fn student_checkpoint(cfg: &RunConfig) -> String {
    format!("checkpoints/distilled_{}.ddlab", cfg.distillation.method)
}

fn meta(
    cfg: &RunConfig,
    seed: u64,
    training: serde_json::Value,
    method: Option<String>,
) -> CheckpointMeta {
    CheckpointMeta {
        schedule: Some(format!("cosine-{}", cfg.schedule.t_max)),
        seed,
        training,
        method,
    }
}

fn load_checkpoint(cfg: &RunConfig, rel: &str, stage: &'static str) -> CliResult<DenoiserModel> {
    let path = cfg.out_dir.join(rel);
    if !path.exists() {
        return Err(CliError::MissingArtifact { path, stage });
    }
    Ok(load_model(&path)?.0)
}

pub fn load_base(cfg: &RunConfig) -> CliResult<DenoiserModel> {
    load_checkpoint(cfg, BASE_CHECKPOINT, "train-base")
}

pub fn load_student(cfg: &RunConfig) -> CliResult<DenoiserModel> {
    load_checkpoint(cfg, &student_checkpoint(cfg), "distill")
}

/// Ground-truth points used as the Fréchet reference.
pub fn reference_points(cfg: &RunConfig) -> CliResult<Vec<Vec2>> {
    let mut rng = RngStream::new(cfg.seed_for("reference"), 0);
    Ok(
        sample_truth(&cfg.distribution, cfg.metrics.n_reference, &mut rng)?
            .iter()
            .map(|s| s.point)
            .collect(),
    )
}

fn points_csv(points: &[Vec2]) -> String {
    let mut t = CsvTable::new(&["chain", "x", "y"]);
    for (i, p) in points.iter().enumerate() {
        t.row(&[i.to_string(), fmt_f64(p.x), fmt_f64(p.y)]);
    }
    t.finish()
}

fn scatter_svg(
    title: &str,
    label: &str,
    color: &str,
    points: &[Vec2],
    truth: &[Vec2],
    n_plot: usize,
) -> String {
    let n = n_plot.min(points.len());
    let m = n_plot.min(truth.len());
    render_svg(
        title,
        &[
            ScatterSeries {
                label: "truth",
                color: TRUTH_COLOR,
                points: &truth[..m],
            },
            ScatterSeries {
                label,
                color,
                points: &points[..n],
            },
        ],
        &[],
    )
}

pub fn cmd_gen_data(cfg: &RunConfig) -> CliResult<usize> {
    let mut st = Stage::begin("gen-data", &cfg.out_dir);
    let mut rng = RngStream::new(cfg.seed_for("data"), 0);
    let samples = sample_truth(&cfg.distribution, cfg.metrics.n_reference, &mut rng)?;
    let mut t = CsvTable::new(&["x", "y", "mode_label"]);
    for s in &samples {
        t.row(&[
            fmt_f64(s.point.x),
            fmt_f64(s.point.y),
            s.mode_label.to_string(),
        ]);
    }
    st.write("data/truth.csv", t.finish().as_bytes())?;
    let pts: Vec<Vec2> = samples.iter().map(|s| s.point).collect();
    let n = cfg.metrics.n_plot.min(pts.len());
    let svg = render_svg(
        &format!("{} samples", cfg.distribution.kind),
        &[ScatterSeries {
            label: "truth",
            color: TRUTH_COLOR,
            points: &pts[..n],
        }],
        &[],
    );
    st.write("data/truth.svg", svg.as_bytes())?;
    st.finish(cfg)?;
    Ok(samples.len())
}

pub fn cmd_train_base(cfg: &RunConfig) -> CliResult<TrainLog> {
    let schedule = cfg.noise_schedule()?;
    let tc = cfg.train_config(&schedule)?;
    let mut st = Stage::begin("train-base", &cfg.out_dir);
    let (model, log) = train_base(&cfg.distribution, &schedule, &tc)?;
    let m = meta(
        cfg,
        tc.seed,
        serde_json::to_value(&cfg.training).expect("serializes"),
        None,
    );
    save_model(&st.path(BASE_CHECKPOINT), &model, &m)?;
    st.record_file(BASE_CHECKPOINT);
    let mut t = CsvTable::new(&["iteration", "loss"]);
    t.row(&["0".to_string(), fmt_f64(log.initial_loss)]);
    for (it, loss) in &log.entries {
        t.row(&[it.to_string(), fmt_f64(*loss)]);
    }
    st.write("train/base_loss.csv", t.finish().as_bytes())?;
    st.finish(cfg)?;
    Ok(log)
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillOutcome {
    pub log: DistillLog,
    pub fidelity: DistillReport,
}

pub fn cmd_distill(cfg: &RunConfig) -> CliResult<DistillOutcome> {
    let schedule = cfg.noise_schedule()?;
    let dc = cfg.distill_config()?;
    let teacher = load_base(cfg)?;
    let mut st = Stage::begin("distill", &cfg.out_dir);
    let (student, log) = distill(&teacher, &cfg.distribution, &schedule, &dc)?;
    let method = dc.method.as_str();
    let rel = student_checkpoint(cfg);
    let m = meta(
        cfg,
        dc.seed,
        serde_json::to_value(&dc).expect("serializes"),
        Some(method.to_string()),
    );
    save_model(&st.path(&rel), &student, &m)?;
    st.record_file(&rel);

    let mut t = CsvTable::new(&["round", "student_steps", "iteration", "loss", "val_mse"]);
    for (r, round) in log.rounds.iter().enumerate() {
        for e in &round.entries {
            t.row(&[
                r.to_string(),
                round.student_steps.to_string(),
                e.iteration.to_string(),
                fmt_f64(e.loss),
                e.val_mse.map(fmt_f64).unwrap_or_default(),
            ]);
        }
    }
    st.write(&format!("distill/{method}_log.csv"), t.finish().as_bytes())?;

    let fidelity = eval_distillation(
        &student,
        &cfg.distilled_grid()?,
        &teacher,
        &cfg.base_grid()?,
        &schedule,
        cfg.distillation.fidelity_probes,
        cfg.seed_for("fidelity"),
    )?;
    let mut json = serde_json::to_string_pretty(&fidelity).expect("serializes");
    json.push('\n');
    st.write(&format!("distill/{method}_fidelity.json"), json.as_bytes())?;
    st.write(
        &format!("distill/{method}_dt_student.csv"),
        fidelity.student_curve.to_csv().as_bytes(),
    )?;
    st.write(
        &format!("distill/{method}_dt_teacher.csv"),
        fidelity.teacher_curve.to_csv().as_bytes(),
    )?;
    st.finish(cfg)?;
    Ok(DistillOutcome { log, fidelity })
}

/// One sampled arm: its samples' metrics and per-chain evaluation count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmResult {
    pub name: String,
    pub role: ModelRole,
    pub steps: usize,
    pub evals: u32,
    pub report: MetricsReport,
    #[serde(skip)]
    pub points: Vec<Vec2>,
}

/// Shared state for sampling arms against the two checkpoints.
struct Models {
    schedule: NoiseSchedule,
    base: DenoiserModel,
    student: Option<DenoiserModel>,
    reference: Vec<Vec2>,
}

impl Models {
    fn load(cfg: &RunConfig, need_student: bool) -> CliResult<Self> {
        let base = load_base(cfg)?;
        let student = if need_student {
            Some(load_student(cfg)?)
        } else {
            None
        };
        Ok(Self {
            schedule: cfg.noise_schedule()?,
            base,
            student,
            reference: reference_points(cfg)?,
        })
    }

    fn student(&self) -> &DenoiserModel {
        self.student.as_ref().expect("student loaded")
    }

    fn finish(
        &self,
        cfg: &RunConfig,
        name: String,
        role: ModelRole,
        trajs: Vec<Trajectory>,
    ) -> CliResult<ArmResult> {
        let points = final_points(&trajs);
        let evals = trajs.first().map(|t| t.evals).unwrap_or(0);
        let steps = trajs.first().map(|t| t.records.len()).unwrap_or(0);
        drop(trajs);
        let report = MetricsReport::compute(&cfg.distribution, &points, &self.reference)?;
        Ok(ArmResult {
            name,
            role,
            steps,
            evals,
            report,
            points,
        })
    }

    fn base_arm(&self, cfg: &RunConfig) -> CliResult<ArmResult> {
        let sc = cfg.base_sampler()?;
        let p = NetPredictor::new(&self.base, None)?;
        let trajs = sample_chains(
            &p,
            &self.schedule,
            &sc,
            cfg.seed_for("eval"),
            cfg.metrics.n_samples,
        )?;
        self.finish(
            cfg,
            format!("base-{}", sc.grid.len()),
            ModelRole::Base,
            trajs,
        )
    }

    fn distilled_arm(&self, cfg: &RunConfig, skip_first: bool) -> CliResult<ArmResult> {
        let sc = cfg.distilled_sampler(skip_first)?;
        let p = NetPredictor::new(self.student(), None)?;
        let trajs = sample_chains(
            &p,
            &self.schedule,
            &sc,
            cfg.seed_for("eval"),
            cfg.metrics.n_samples,
        )?;
        let name = if skip_first {
            format!("skip-first-{}", sc.grid.len() - 1)
        } else {
            format!("distilled-{}", sc.grid.len())
        };
        self.finish(cfg, name, ModelRole::Distilled, trajs)
    }

    fn hybrid_arm(
        &self,
        cfg: &RunConfig,
        name: String,
        sc: &SamplerConfig,
    ) -> CliResult<ArmResult> {
        let pb = NetPredictor::new(&self.base, None)?;
        let pd = NetPredictor::new(self.student(), None)?;
        let trajs = hybrid_chains(
            &pb,
            &pd,
            &self.schedule,
            sc,
            cfg.seed_for("eval"),
            cfg.metrics.n_samples,
        )?;
        self.finish(cfg, name, ModelRole::Distilled, trajs)
    }

    fn configured_hybrid(&self, cfg: &RunConfig) -> CliResult<ArmResult> {
        let s = &cfg.sampler;
        let sc = cfg.hybrid_config(s.k, s.m, s.w, s.cond)?;
        let name = if s.m > 1 {
            format!("hybrid-k{}-m{}", s.k, s.m)
        } else {
            format!("hybrid-k{}", s.k)
        };
        self.hybrid_arm(cfg, name, &sc)
    }
}

fn metrics_table(first: &[&str]) -> CsvTable {
    let mut header: Vec<&str> = first.to_vec();
    header.extend(MetricsReport::HEADER);
    CsvTable::new(&header)
}

pub fn cmd_sample(cfg: &RunConfig) -> CliResult<ArmResult> {
    let arm = if cfg.sampler.skip_first {
        SampleArm::SkipFirst
    } else {
        cfg.sampler.arm
    };
    let models = Models::load(cfg, arm != SampleArm::Base)?;
    let mut st = Stage::begin("sample", &cfg.out_dir);
    let res = match arm {
        SampleArm::Base => models.base_arm(cfg)?,
        SampleArm::Distilled => models.distilled_arm(cfg, false)?,
        SampleArm::SkipFirst => models.distilled_arm(cfg, true)?,
        SampleArm::Hybrid => models.configured_hybrid(cfg)?,
    };
    let stem = format!("samples/{}", arm.as_str());
    st.write(&format!("{stem}.csv"), points_csv(&res.points).as_bytes())?;
    st.write(
        &format!("{stem}_metrics.csv"),
        res.report.to_csv().as_bytes(),
    )?;
    let svg = scatter_svg(
        &res.name,
        &res.name,
        role_color(res.role),
        &res.points,
        &models.reference,
        cfg.metrics.n_plot,
    );
    st.write(&format!("{stem}.svg"), svg.as_bytes())?;
    st.evals(&res.name, res.evals);
    st.finish(cfg)?;
    Ok(res)
}

/// Runs the four comparison arms on shared noises and writes one metrics
/// row per arm plus a combined comparison table.
pub fn cmd_eval(cfg: &RunConfig) -> CliResult<Vec<ArmResult>> {
    let models = Models::load(cfg, true)?;
    let mut st = Stage::begin("eval", &cfg.out_dir);
    let arms = vec![
        models.base_arm(cfg)?,
        models.distilled_arm(cfg, false)?,
        models.configured_hybrid(cfg)?,
        models.distilled_arm(cfg, true)?,
    ];
    let mut t = metrics_table(&["arm", "steps", "evals"]);
    for (i, a) in arms.iter().enumerate() {
        let mut row = vec![a.name.clone(), a.steps.to_string(), a.evals.to_string()];
        row.extend(a.report.cells());
        t.row(&row);
        st.write(
            &format!("eval/{}_metrics.csv", a.name),
            a.report.to_csv().as_bytes(),
        )?;
        let svg = scatter_svg(
            &a.name,
            &a.name,
            PALETTE[i],
            &a.points,
            &models.reference,
            cfg.metrics.n_plot,
        );
        st.write(&format!("eval/{}.svg", a.name), svg.as_bytes())?;
        st.evals(&a.name, a.evals);
    }
    st.write("eval/comparison.csv", t.finish().as_bytes())?;
    st.finish(cfg)?;
    Ok(arms)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DtViz {
    pub base: DtCurve,
    pub distilled: DtCurve,
}

fn trajectory_panel(title: &str, role: ModelRole, trajs: &[Trajectory], n: usize) -> String {
    let color = role_color(role);
    let states: Vec<Vec<Vec2>> = trajs
        .iter()
        .take(n)
        .map(|t| {
            let mut v: Vec<Vec2> = t.records.iter().map(|r| r.x).collect();
            v.push(t.final_x);
            v
        })
        .collect();
    let estimates: Vec<Vec<Vec2>> = trajs
        .iter()
        .take(n)
        .map(|t| t.records.iter().map(|r| r.dt).collect())
        .collect();
    let finals: Vec<Vec2> = trajs.iter().take(n).map(|t| t.final_x).collect();
    let mut paths = Vec::new();
    for (s, e) in states.iter().zip(&estimates) {
        paths.push(PathSeries {
            color,
            points: s,
            dashed: false,
        });
        paths.push(PathSeries {
            color: TRUTH_COLOR,
            points: e,
            dashed: true,
        });
    }
    render_svg(
        title,
        &[ScatterSeries {
            label: "final sample",
            color,
            points: &finals,
        }],
        &paths,
    )
}

/// DT-distance curves for both models from shared deterministic rollouts,
/// plus trajectory panels contrasting `x_t` with the one-shot estimates.
pub fn cmd_dtviz(cfg: &RunConfig) -> CliResult<DtViz> {
    let models = Models::load(cfg, true)?;
    let mut st = Stage::begin("dt-viz", &cfg.out_dir);
    let seed = cfg.seed_for("dt");
    let n = cfg.metrics.n_dt;
    let mut curves = Vec::new();
    let mut tcsv = CsvTable::new(&["model", "chain", "record", "t", "x", "y", "dt_x", "dt_y"]);
    for (model, grid, name) in [
        (&models.base, cfg.base_grid()?, "base"),
        (models.student(), cfg.distilled_grid()?, "distilled"),
    ] {
        let p = NetPredictor::new(model, None)?;
        let sc = SamplerConfig::deterministic(grid);
        let trajs = sample_chains(&p, &models.schedule, &sc, seed, n)?;
        let curve = dt_curve(&trajs, &final_points(&trajs))?;
        st.write(&format!("dtviz/dt_{name}.csv"), curve.to_csv().as_bytes())?;
        for (c, t) in trajs.iter().take(cfg.metrics.n_panels).enumerate() {
            for (i, r) in t.records.iter().enumerate() {
                tcsv.row(&[
                    name.to_string(),
                    c.to_string(),
                    i.to_string(),
                    r.t.to_string(),
                    fmt_f64(r.x.x),
                    fmt_f64(r.x.y),
                    fmt_f64(r.dt.x),
                    fmt_f64(r.dt.y),
                ]);
            }
        }
        let svg = trajectory_panel(
            &format!("{name}: x_t (solid) and DT estimates (dashed)"),
            model.role,
            &trajs,
            cfg.metrics.n_panels,
        );
        st.write(&format!("dtviz/trajectories_{name}.svg"), svg.as_bytes())?;
        st.evals(name, trajs.first().map(|t| t.evals).unwrap_or(0));
        curves.push(curve);
    }
    st.write("dtviz/trajectories.csv", tcsv.finish().as_bytes())?;
    let distilled = curves.pop().expect("two curves");
    let base = curves.pop().expect("two curves");
    let svg = render_line_svg(
        "normalized DT distance",
        "step fraction",
        &[("base", &base.points), ("distilled", &distilled.points)],
    );
    st.write("dtviz/dt_curves.svg", svg.as_bytes())?;
    st.finish(cfg)?;
    Ok(DtViz { base, distilled })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    /// `(axis value, arm)` in config order.
    pub rows: Vec<(f64, ArmResult)>,
}

impl SweepResult {
    pub fn at(&self, value: f64) -> Option<&ArmResult> {
        self.rows.iter().find(|(v, _)| *v == value).map(|(_, a)| a)
    }
}

fn sweep_axis(cfg: &RunConfig, models: &Models, axis: SweepAxis) -> CliResult<SweepResult> {
    let s = &cfg.sampler;
    let cells: Vec<(f64, SamplerConfig)> = match axis {
        SweepAxis::K => cfg
            .sweep
            .k
            .iter()
            .map(|&k| Ok((k as f64, cfg.hybrid_config(k, 1, s.w, s.cond)?)))
            .collect::<CliResult<_>>()?,
        SweepAxis::Substeps => cfg
            .sweep
            .substeps
            .iter()
            .map(|&m| Ok((m as f64, cfg.hybrid_config(s.k.max(1), m, s.w, s.cond)?)))
            .collect::<CliResult<_>>()?,
        SweepAxis::Guidance => {
            let c = cfg.sweep.guidance_cond;
            if models.base.n_conditions() <= c {
                return Err(CliError::config(
                    "sweep.guidance_cond",
                    "base model has no such condition",
                ));
            }
            cfg.sweep
                .guidance
                .iter()
                .map(|&w| Ok((w, cfg.hybrid_config(s.k.max(1), s.m, w, Some(c))?)))
                .collect::<CliResult<_>>()?
        }
    };
    let mut rows = Vec::with_capacity(cells.len());
    for (v, sc) in cells {
        let name = format!("{}={}", axis.as_str(), fmt_f64(v));
        rows.push((v, models.hybrid_arm(cfg, name, &sc)?));
    }
    Ok(SweepResult { axis, rows })
}

/// Hybrid sweeps over the transition point, base guidance scale or base
/// substep count. `None` runs every axis.
pub fn cmd_sweep(cfg: &RunConfig, axis: Option<SweepAxis>) -> CliResult<Vec<SweepResult>> {
    let models = Models::load(cfg, true)?;
    let mut st = Stage::begin("sweep", &cfg.out_dir);
    let axes: Vec<SweepAxis> = match axis {
        Some(a) => vec![a],
        None => SweepAxis::ALL.to_vec(),
    };
    let mut out = Vec::new();
    for a in axes {
        let res = sweep_axis(cfg, &models, a)?;
        let mut t = metrics_table(&["value", "evals"]);
        for (v, arm) in &res.rows {
            let mut row = vec![fmt_f64(*v), arm.evals.to_string()];
            row.extend(arm.report.cells());
            t.row(&row);
            st.evals(&arm.name, arm.evals);
        }
        st.write(&format!("sweep/{}.csv", a.as_str()), t.finish().as_bytes())?;
        let div: Vec<(f64, f64)> = res
            .rows
            .iter()
            .map(|(v, r)| (*v, r.report.sample_diversity))
            .collect();
        let fd: Vec<(f64, f64)> = res
            .rows
            .iter()
            .map(|(v, r)| (*v, r.report.frechet))
            .collect();
        let svg = render_line_svg(
            &format!("hybrid sweep over {}", a.as_str()),
            a.as_str(),
            &[("sample_diversity", &div), ("frechet", &fd)],
        );
        st.write(&format!("sweep/{}.svg", a.as_str()), svg.as_bytes())?;
        out.push(res);
    }
    st.finish(cfg)?;
    Ok(out)
}

fn slider_source(
    cfg: &RunConfig,
    direction: Direction,
) -> CliResult<(DenoiserModel, StepGrid, DenoiserModel, StepGrid)> {
    let base = load_base(cfg)?;
    let student = load_student(cfg)?;
    Ok(match direction {
        Direction::BaseToDistilled => (base, cfg.base_grid()?, student, cfg.distilled_grid()?),
        Direction::DistilledToBase => (student, cfg.distilled_grid()?, base, cfg.base_grid()?),
    })
}

fn adapter_path(role: ModelRole) -> String {
    format!("adapters/slider_{}.ddlab", role.as_str())
}

fn train_and_save_slider(
    cfg: &RunConfig,
    st: &mut Stage,
    source: &DenoiserModel,
) -> CliResult<(LoraAdapter, (f64, f64))> {
    let schedule = cfg.noise_schedule()?;
    let sc = cfg.slider_config();
    let (adapter, losses) =
        train_slider(source, &cfg.distribution, &schedule, cfg.control.delta, &sc)?;
    let rel = adapter_path(source.role);
    let m = meta(
        cfg,
        sc.seed,
        serde_json::to_value(&cfg.control).expect("serializes"),
        None,
    );
    save_adapter(&st.path(&rel), &adapter, &source.arch, &m)?;
    st.record_file(&rel);
    let mut t = CsvTable::new(&["first_loss", "last_loss"]);
    t.row(&[fmt_f64(losses.0), fmt_f64(losses.1)]);
    st.write(
        &format!("adapters/slider_{}_loss.csv", source.role.as_str()),
        t.finish().as_bytes(),
    )?;
    Ok((adapter, losses))
}

/// Trains the attribute slider on the configured direction's source model.
pub fn cmd_train_lora(cfg: &RunConfig) -> CliResult<(f64, f64)> {
    let (source, ..) = slider_source(cfg, cfg.control.direction)?;
    let mut st = Stage::begin("train-lora", &cfg.out_dir);
    let (_, losses) = train_and_save_slider(cfg, &mut st, &source)?;
    st.finish(cfg)?;
    Ok(losses)
}

/// Trains a slider on the source model and measures its attribute shift on
/// both models at every transfer scale.
pub fn cmd_control(cfg: &RunConfig) -> CliResult<TransferReport> {
    let direction = cfg.control.direction;
    let (source, sgrid, target, tgrid) = slider_source(cfg, direction)?;
    let schedule = cfg.noise_schedule()?;
    let mut st = Stage::begin(
        &format!("control-transfer/{}", direction.as_str()),
        &cfg.out_dir,
    );
    let (adapter, _) = train_and_save_slider(cfg, &mut st, &source)?;
    let seed = cfg.seed_for("eval");
    let report = transfer_slider(
        &adapter,
        Arm {
            model: &source,
            grid: &sgrid,
        },
        Arm {
            model: &target,
            grid: &tgrid,
        },
        &cfg.distribution,
        &schedule,
        cfg.metrics.n_control,
        seed,
    )?;
    let stem = format!("control/{}", direction.as_str());
    st.write(&format!("{stem}.csv"), report.to_csv().as_bytes())?;
    let mut json = serde_json::to_string_pretty(&report).expect("serializes");
    json.push('\n');
    st.write(&format!("{stem}.json"), json.as_bytes())?;

    let n = cfg.metrics.n_plot.min(cfg.metrics.n_control);
    let sc = SamplerConfig::deterministic(tgrid.clone());
    let mut per_scale = Vec::new();
    for &s in &TRANSFER_SCALES {
        let scaled = adapter.with_scale(s);
        let p = NetPredictor::new(&target, Some(&scaled))?;
        per_scale.push((
            format!("scale {s}"),
            sample_endpoints(&p, &schedule, &sc, seed, n)?,
        ));
    }
    let series: Vec<ScatterSeries<'_>> = per_scale
        .iter()
        .enumerate()
        .map(|(i, (label, pts))| ScatterSeries {
            label,
            color: PALETTE[i],
            points: pts,
        })
        .collect();
    let svg = render_svg(
        &format!("slider on {} at each scale", target.role.as_str()),
        &series,
        &[],
    );
    st.write(&format!("{stem}.svg"), svg.as_bytes())?;
    st.finish(cfg)?;
    Ok(report)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

const REPORT_ROWS: usize = 20;

fn csv_as_markdown(text: &str) -> String {
    let mut out = String::new();
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return out;
    };
    let cols = header.split(',').count();
    let _ = writeln!(
        out,
        "| {} |",
        header.split(',').collect::<Vec<_>>().join(" | ")
    );
    let _ = writeln!(out, "|{}", " --- |".repeat(cols));
    let rows: Vec<&str> = lines.collect();
    for r in rows.iter().take(REPORT_ROWS) {
        let _ = writeln!(out, "| {} |", r.split(',').collect::<Vec<_>>().join(" | "));
    }
    if rows.len() > REPORT_ROWS {
        let _ = writeln!(out, "\n{} more rows not shown.", rows.len() - REPORT_ROWS);
    }
    out
}

/// Collates every CSV under `dir` into `report.md`, with links to the SVGs.
pub fn cmd_report(dir: &Path) -> CliResult<PathBuf> {
    let mut files = Vec::new();
    if dir.is_dir() {
        collect_files(dir, dir, &mut files)?;
    }
    files.sort();
    let csvs: Vec<&String> = files.iter().filter(|f| f.ends_with(".csv")).collect();
    if csvs.is_empty() {
        return Err(CliError::EmptyRunDir(dir.to_path_buf()));
    }
    let manifest: Option<RunManifest> = std::fs::read(dir.join(MANIFEST_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());

    let mut md = String::from("# ddlab run report\n\n");
    if let Some(m) = &manifest {
        let _ = writeln!(
            md,
            "Config hash `{}`, master seed {}, {}.\n",
            m.config_hash, m.seed, m.version
        );
        let _ = writeln!(
            md,
            "## Evaluations per chain\n\n| stage | arm | evals |\n| --- | --- | --- |"
        );
        for (stage, rec) in &m.stages {
            for (arm, n) in &rec.evals {
                let _ = writeln!(md, "| {stage} | {arm} | {n} |");
            }
        }
        md.push('\n');
    }
    md.push_str("## Tables\n\n");
    for f in &csvs {
        let text = std::fs::read_to_string(dir.join(f))?;
        let _ = writeln!(md, "### [{f}]({f})\n");
        md.push_str(&csv_as_markdown(&text));
        md.push('\n');
    }
    let svgs: Vec<&String> = files.iter().filter(|f| f.ends_with(".svg")).collect();
    if !svgs.is_empty() {
        md.push_str("## Figures\n\n");
        for f in svgs {
            let _ = writeln!(md, "- [{f}]({f})");
        }
    }
    let path = dir.join(REPORT_FILE);
    ddlab_core::io::atomic_write(&path, md.as_bytes())?;
    if let Some(mut m) = manifest {
        if m.files.insert(REPORT_FILE.to_string()) {
            let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
            text.push('\n');
            ddlab_core::io::atomic_write(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        }
    }
    Ok(path)
}

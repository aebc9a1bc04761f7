//! End-to-end command checks on a small, fast configuration.

use std::path::Path;
use std::process::Command;

use ddlab_cli::commands::*;
use ddlab_cli::config::{Direction, SweepAxis};
use ddlab_cli::{CliError, RunConfig, RunManifest};

fn tiny(dir: &Path) -> RunConfig {
    let mut c = RunConfig::gmm_ring_default();
    c.out_dir = dir.to_path_buf();
    c.model.hidden = vec![16, 16];
    c.model.time_embed_dim = 8;
    c.training.iterations = 150;
    c.training.batch = 64;
    c.training.log_every = 50;
    c.distillation.iterations = Some(40);
    c.distillation.batch = 32;
    c.distillation.teacher_pool = 256;
    c.distillation.val_probes = 32;
    c.distillation.log_every = 20;
    c.distillation.fidelity_probes = 64;
    c.metrics.n_samples = 300;
    c.metrics.n_reference = 300;
    c.metrics.n_dt = 32;
    c.metrics.n_control = 64;
    c.metrics.n_plot = 100;
    c.control.iterations = 30;
    c.control.batch = 32;
    c.control.rank = 2;
    c.sweep.guidance = vec![0.0, 4.0];
    c.sweep.substeps = vec![1, 2, 4];
    c
}

fn trained(dir: &Path) -> RunConfig {
    let c = tiny(dir);
    cmd_train_base(&c).unwrap();
    cmd_distill(&c).unwrap();
    c
}

#[test]
fn train_base_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_train_base(&tiny(a.path())).unwrap();
    cmd_train_base(&tiny(b.path())).unwrap();
    for f in [BASE_CHECKPOINT, "train/base_loss.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn commands_need_their_checkpoints() {
    let d = tempfile::tempdir().unwrap();
    let c = tiny(d.path());
    let err = cmd_eval(&c).unwrap_err();
    assert!(matches!(err, CliError::MissingArtifact { .. }));
    assert_eq!(err.exit_code(), 3);
    cmd_train_base(&c).unwrap();
    assert!(matches!(
        cmd_dtviz(&c).unwrap_err(),
        CliError::MissingArtifact {
            stage: "distill",
            ..
        }
    ));
}

#[test]
fn distill_logs_rounds_per_method() {
    let d = tempfile::tempdir().unwrap();
    let mut c = tiny(d.path());
    cmd_train_base(&c).unwrap();
    let reg = cmd_distill(&c).unwrap();
    assert_eq!(reg.log.rounds.len(), 1);
    assert_eq!(reg.log.rounds[0].student_steps, 4);
    c.distillation.method = "progressive".into();
    let prog = cmd_distill(&c).unwrap();
    let steps: Vec<usize> = prog.log.rounds.iter().map(|r| r.student_steps).collect();
    assert_eq!(steps, [16, 8, 4]);
    assert!(d
        .path()
        .join("checkpoints/distilled_progressive.ddlab")
        .exists());
    assert!(d
        .path()
        .join("checkpoints/distilled_regression.ddlab")
        .exists());
    let log = std::fs::read_to_string(d.path().join("distill/progressive_log.csv")).unwrap();
    assert!(log.starts_with("round,student_steps,iteration,loss,val_mse\n"));
}

#[test]
fn pipeline_outputs_and_bookkeeping() {
    let d = tempfile::tempdir().unwrap();
    let c = trained(d.path());
    cmd_gen_data(&c).unwrap();

    let arms = cmd_eval(&c).unwrap();
    let evals: Vec<u32> = arms.iter().map(|a| a.evals).collect();
    assert_eq!(evals, [32, 4, 4, 3]);
    let table = std::fs::read_to_string(d.path().join("eval/comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(!table.contains('\r'));

    let sweeps = cmd_sweep(&c, None).unwrap();
    let k = sweeps.iter().find(|s| s.axis == SweepAxis::K).unwrap();
    assert_eq!(k.at(0.0).unwrap().points, arms[1].points);
    assert_eq!(k.at(0.0).unwrap().report, arms[1].report);
    let m = sweeps
        .iter()
        .find(|s| s.axis == SweepAxis::Substeps)
        .unwrap();
    let counts: Vec<u32> = m.rows.iter().map(|(_, a)| a.evals).collect();
    assert_eq!(counts, [4, 5, 7]);
    let w = sweeps
        .iter()
        .find(|s| s.axis == SweepAxis::Guidance)
        .unwrap();
    let counts: Vec<u32> = w.rows.iter().map(|(_, a)| a.evals).collect();
    assert_eq!(counts, [4, 5]);

    let dt = cmd_dtviz(&c).unwrap();
    for curve in [&dt.base, &dt.distilled] {
        assert_eq!(curve.points[0].1, 1.0);
        assert!(curve.points.last().unwrap().1 <= 0.05);
    }

    for dir in [Direction::BaseToDistilled, Direction::DistilledToBase] {
        let mut cc = c.clone();
        cc.control.direction = dir;
        let r = cmd_control(&cc).unwrap();
        let zero = r.row(0.0).unwrap();
        assert_eq!(zero.source_shift, 0.0);
        assert_eq!(zero.target_shift, 0.0);
        assert!(r.transfer_ratio.is_some_and(f64::is_finite));
    }

    let report = cmd_report(d.path()).unwrap();
    let first = std::fs::read(&report).unwrap();
    let again = std::fs::read(cmd_report(d.path()).unwrap()).unwrap();
    assert_eq!(first, again);

    let text = String::from_utf8(first).unwrap();
    let m = RunManifest::open(d.path(), &c);
    let mut on_disk = Vec::new();
    walk(d.path(), d.path(), &mut on_disk);
    for f in &on_disk {
        assert!(m.files.contains(f), "manifest misses {f}");
        if f.ends_with(".csv") {
            assert!(text.contains(f.as_str()), "report misses {f}");
        }
    }
    assert_eq!(m.stages["eval"].evals["base-32"], 32);
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            walk(root, &p, out);
        } else {
            out.push(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
        }
    }
}

#[test]
fn eval_csvs_are_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let c = trained(d.path());
    cmd_eval(&c).unwrap();
    let a = std::fs::read(d.path().join("eval/comparison.csv")).unwrap();
    cmd_eval(&c).unwrap();
    assert_eq!(
        a,
        std::fs::read(d.path().join("eval/comparison.csv")).unwrap()
    );
}

#[test]
fn report_rejects_empty_dir() {
    let d = tempfile::tempdir().unwrap();
    let err = cmd_report(d.path()).unwrap_err();
    assert!(matches!(err, CliError::EmptyRunDir(_)));
    assert_eq!(err.exit_code(), 3);
}

fn ddlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ddlab"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, r#"{"schedule": {"kind": "cosine", "t_max": 64}}"#).unwrap();
    let out = ddlab(&["train-base", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("distribution"));

    let good = d.path().join("good.json");
    let cfg = tiny(&d.path().join("run"));
    std::fs::write(&good, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let g = good.to_str().unwrap();
    assert_eq!(ddlab(&["eval", "--config", g]).status.code(), Some(3));
    assert_eq!(
        ddlab(&["distill", "--config", g, "--method", "adversarial"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        ddlab(&["eval", "--config", g, "--set", "sampler.nope=1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        ddlab(&["report", "--out", d.path().join("empty").to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );

    let out = ddlab(&["gen-data", "--config", g, "--set", "metrics.n_reference=50"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(d.path().join("run/data/truth.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let ring = RunConfig::load(&root.join("gmm_ring.json"), &[]).unwrap();
    let mut expect = RunConfig::gmm_ring_default();
    expect.out_dir = ring.out_dir.clone();
    assert_eq!(ring, expect);
    let moons = RunConfig::load(&root.join("two_moons.json"), &[]).unwrap();
    assert!(!moons.model.conditional);
}

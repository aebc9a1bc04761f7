use ddlab_core::data::ToyDistribution;
use ddlab_core::diffusion::*;
use ddlab_core::distill::*;
use ddlab_core::nn::{Architecture, DenoiserModel, ModelRole, OutputParam};
use ddlab_core::{LabError, RngStream, Vec2};

fn schedule() -> NoiseSchedule {
    make_schedule(ScheduleKind::Cosine, 64).unwrap()
}

fn tiny(output: OutputParam, seed: u64) -> DenoiserModel {
    let arch = Architecture {
        hidden: vec![8, 8],
        time_embed_dim: 6,
        cond_embed_dim: 3,
        n_conditions: 8,
        output,
        ..Architecture::default()
    };
    DenoiserModel::init(arch, ModelRole::Base, seed).unwrap()
}

fn quick(method: DistillMethod) -> DistillConfig {
    DistillConfig {
        iterations: 30,
        batch: 32,
        teacher_pool: 256,
        val_probes: 64,
        log_every: 10,
        ..DistillConfig::for_method(method)
    }
}

#[test]
fn halving_rounds() {
    let cfg = DistillConfig::progressive();
    assert_eq!(cfg.rounds().unwrap(), vec![16, 8, 4]);
    let odd = DistillConfig {
        target_steps: 3,
        ..cfg.clone()
    };
    assert!(matches!(
        odd.validate(),
        Err(LabError::NonDivisibleGrid { .. })
    ));
    let not_pow2 = DistillConfig {
        teacher_steps: 24,
        ..cfg
    };
    assert!(not_pow2.rounds().is_err());
    assert!("distill-me".parse::<DistillMethod>().is_err());
    assert_eq!(
        "regression".parse::<DistillMethod>().unwrap(),
        DistillMethod::Regression
    );
}

#[test]
fn epsilon_target_lands_on_target() {
    let s = schedule();
    let x = Vec2::new(0.7, -1.1);
    let target = Vec2::new(2.0, 3.0);
    for (from, to) in [(64, 48), (48, 32), (16, 0), (2, 1)] {
        let eps = epsilon_target(&s, x, target, from, to);
        let (next, _) = ddim_update(&s, x, eps, from, to);
        assert!(
            (next - target).norm() < 1e-9 * (1.0 + target.norm()),
            "{from}->{to}"
        );
    }
}

#[test]
fn rollout_gradient_matches_central_differences() {
    let s = schedule();
    let grid = StepGrid::uniform(64, 4).unwrap();
    let mut rng = RngStream::new(3, 3);
    let z: Vec<Vec2> = (0..5).map(|_| rng.gaussian_pair()).collect();
    for output in [OutputParam::Epsilon, s.velocity_output()] {
        let m = tiny(output, 9);
        // targets near the current endpoints keep the loss O(1) even though
        // epsilon output amplifies the first step ~500×
        let p = NetPredictor::new(&m, None).unwrap();
        let y: Vec<Vec2> = z
            .iter()
            .map(|&x| {
                let mut x = x;
                for (a, b) in grid.intervals() {
                    x = ddim_step(&p, &s, x, a, b, Guidance::UNCONDITIONAL)
                        .unwrap()
                        .0;
                }
                x + rng.gaussian_pair()
            })
            .collect();
        let (loss, grad) = rollout_loss_grad(&m, &s, &grid, &z, &y).unwrap();
        assert!(loss.is_finite());
        let loss_at = |m: &DenoiserModel| rollout_loss_grad(m, &s, &grid, &z, &y).unwrap().0;
        let mut worst = 0.0f64;
        for i in 0..m.params.len() {
            let h = 1e-5 * m.params[i].abs().max(1e-2);
            let mut plus = m.clone();
            plus.params[i] += h;
            let mut minus = m.clone();
            minus.params[i] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6 * loss.max(1.0));
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}

#[test]
fn rollout_loss_matches_sampler_endpoints() {
    let s = schedule();
    let m = tiny(s.velocity_output(), 4);
    let grid = StepGrid::uniform(64, 4).unwrap();
    let p = NetPredictor::new(&m, None).unwrap();
    let ends =
        sample_endpoints(&p, &s, &SamplerConfig::deterministic(grid.clone()), 8, 10).unwrap();
    let z: Vec<Vec2> = (0..10)
        .map(|i| RngStream::new(8, i).gaussian_pair())
        .collect();
    let (loss, _) = rollout_loss_grad(&m, &s, &grid, &z, &ends).unwrap();
    assert!(loss < 1e-24, "{loss}");
    assert!(rollout_loss_grad(&m, &s, &grid, &z, &ends[..3]).is_err());
    assert!(matches!(
        rollout_loss_grad(&m, &s, &grid, &[], &[]),
        Err(LabError::EmptyBatch)
    ));
}

#[test]
fn untrained_student_is_teacher_copy() {
    let s = schedule();
    let teacher = tiny(s.velocity_output(), 5);
    let cfg = DistillConfig {
        iterations: 0,
        ..quick(DistillMethod::Progressive)
    };
    let (student, log) =
        distill_progressive(&teacher, &ToyDistribution::default(), &s, &cfg).unwrap();
    assert_eq!(student.params, teacher.params);
    assert_eq!(student.role, ModelRole::Distilled);
    assert_eq!(log.rounds.len(), 3);

    let p = NetPredictor::new(&teacher, None).unwrap();
    let x = Vec2::new(0.4, 0.9);
    let g = Guidance::UNCONDITIONAL;
    let (one, _) = ddim_step(&p, &s, x, 64, 48, g).unwrap();
    let (mid, _) = ddim_step(&p, &s, x, 64, 56, g).unwrap();
    let (two, _) = ddim_step(&p, &s, mid, 56, 48, g).unwrap();
    assert!((one - two).norm() > 1e-6);
}

#[test]
fn progressive_is_deterministic_and_shape_preserving() {
    let s = schedule();
    let teacher = tiny(s.velocity_output(), 6);
    let dist = ToyDistribution::default();
    let cfg = quick(DistillMethod::Progressive);
    let (a, log) = distill_progressive(&teacher, &dist, &s, &cfg).unwrap();
    let (b, _) = distill_progressive(&teacher, &dist, &s, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.same_shape(&teacher));
    let steps: Vec<usize> = log.rounds.iter().map(|r| r.student_steps).collect();
    assert_eq!(steps, vec![16, 8, 4]);
    for r in &log.rounds {
        assert_eq!(r.entries.first().unwrap().iteration, 0);
        assert_eq!(r.entries.last().unwrap().iteration, 30);
        assert!(r.entries.iter().all(|e| e.val_mse.unwrap().is_finite()));
    }
}

#[test]
fn regression_reduces_rollout_loss() {
    let s = schedule();
    let teacher = tiny(s.velocity_output(), 7);
    let cfg = DistillConfig {
        iterations: 200,
        lr: 3e-3,
        log_every: 50,
        ..quick(DistillMethod::Regression)
    };
    let (student, log) = distill_regression(&teacher, &s, &cfg).unwrap();
    assert!(student.same_shape(&teacher));
    let e = &log.rounds[0].entries;
    assert_eq!(e.len(), 5);
    assert!(e.last().unwrap().loss < e[0].loss, "{e:?}");
}

#[test]
fn eval_of_teacher_against_itself() {
    let s = schedule();
    let m = tiny(s.velocity_output(), 8);
    let g = StepGrid::uniform(64, 8).unwrap();
    let r = eval_distillation(&m, &g, &m, &g, &s, 50, 1).unwrap();
    assert_eq!(r.endpoint_mse, 0.0);
    assert_eq!(r.student_curve, r.teacher_curve);
    assert_eq!(r.student_curve.value_at(0), Some(1.0));
    let again = eval_distillation(&m, &g, &m, &g, &s, 50, 1).unwrap();
    assert_eq!(r, again);
}

use ddlab_core::nn::{
    hidden_layer_targets, merge_adapter, Architecture, DenoiserInput, DenoiserModel, GradientTape,
    LoraAdapter, ModelRole, OutputParam, TrainExample, Trainable,
};
use ddlab_core::{LabError, RngStream, Vec2};

fn small_arch() -> Architecture {
    Architecture {
        hidden: vec![8, 8, 8],
        time_embed_dim: 6,
        cond_embed_dim: 3,
        n_conditions: 3,
        ..Architecture::default()
    }
}

fn velocity_arch() -> Architecture {
    Architecture {
        output: OutputParam::Velocity {
            alpha_bar: vec![1.0, 0.9, 0.5, 0.1, 1e-6],
        },
        ..small_arch()
    }
}

fn random_batch(n: usize, n_conditions: usize, seed: u64) -> Vec<TrainExample> {
    let mut rng = RngStream::new(seed, 0);
    (0..n)
        .map(|i| {
            let x = 2.0 * rng.gaussian_pair();
            let target = rng.gaussian_pair();
            let cond = if i % 3 == 0 {
                None
            } else {
                Some(rng.below(n_conditions))
            };
            TrainExample {
                x,
                t_frac: rng.uniform(),
                cond,
                target,
            }
        })
        .collect()
}

/// Forward-only loss, independent of the reverse pass.
fn mse(model: &DenoiserModel, adapter: Option<&LoraAdapter>, batch: &[TrainExample]) -> f64 {
    let inputs: Vec<DenoiserInput> = batch
        .iter()
        .map(|e| DenoiserInput {
            x: e.x,
            t_frac: e.t_frac,
            cond: e.cond,
        })
        .collect();
    let out = model.forward_batch(adapter, &inputs).unwrap();
    out.iter()
        .zip(batch)
        .map(|(o, e)| (*o - e.target).norm_sq())
        .sum::<f64>()
        / (2 * batch.len()) as f64
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn model_gradients_match_central_differences() {
    let model = DenoiserModel::init(small_arch(), ModelRole::Base, 3).unwrap();
    let batch = random_batch(7, 3, 1);
    let (loss, tape) = model
        .backward(None, &batch, Trainable::ModelParams)
        .unwrap();
    assert!((loss - mse(&model, None, &batch)).abs() < 1e-12);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..model.params.len() {
        let mut plus = model.clone();
        plus.params[i] += h;
        let mut minus = model.clone();
        minus.params[i] -= h;
        let fd = (mse(&plus, None, &batch) - mse(&minus, None, &batch)) / (2.0 * h);
        worst = worst.max(rel_err(tape.model[i], fd));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn velocity_output_gradients_match_central_differences() {
    let model = DenoiserModel::init(velocity_arch(), ModelRole::Base, 5).unwrap();
    let batch = random_batch(7, 3, 11);
    let (_, tape) = model
        .backward(None, &batch, Trainable::ModelParams)
        .unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..model.params.len() {
        let mut plus = model.clone();
        plus.params[i] += h;
        let mut minus = model.clone();
        minus.params[i] -= h;
        let fd = (mse(&plus, None, &batch) - mse(&minus, None, &batch)) / (2.0 * h);
        worst = worst.max(rel_err(tape.model[i], fd));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn velocity_output_coefficients() {
    let arch = velocity_arch();
    let (skip, scale) = arch.output.coefficients(0.5);
    assert!((skip - 0.5f64.sqrt()).abs() < 1e-15 && (scale - 0.5f64.sqrt()).abs() < 1e-15);
    let (skip, scale) = arch.output.coefficients(0.125);
    assert!((scale * scale - 0.95).abs() < 1e-12 && (skip * skip - 0.05).abs() < 1e-12);
    assert_eq!(OutputParam::Epsilon.coefficients(0.3), (0.0, 1.0));
    let bad = Architecture {
        output: OutputParam::Velocity {
            alpha_bar: vec![1.0],
        },
        ..small_arch()
    };
    assert!(DenoiserModel::init(bad, ModelRole::Base, 1).is_err());
}

#[test]
fn input_gradients_match_central_differences() {
    for arch in [small_arch(), velocity_arch()] {
        let model = DenoiserModel::init(arch, ModelRole::Base, 6).unwrap();
        let batch = random_batch(6, 3, 12);
        let inputs: Vec<DenoiserInput> = batch
            .iter()
            .map(|e| DenoiserInput {
                x: e.x,
                t_frac: e.t_frac,
                cond: e.cond,
            })
            .collect();
        let w = model.weights(None).unwrap();
        let cache = model.forward_cached(&w, &inputs).unwrap();
        // probe loss: Σ gᵢ·ε̂ᵢ with fixed random gᵢ
        let mut rng = RngStream::new(13, 0);
        let g: Vec<Vec2> = (0..batch.len()).map(|_| rng.gaussian_pair()).collect();
        let mut tape = GradientTape::zeros(&model, None);
        let dx = model
            .backprop(None, &w, &cache, &g, Trainable::ModelParams, &mut tape)
            .unwrap();
        let h = 1e-6;
        for (i, e) in batch.iter().enumerate() {
            for axis in 0..2 {
                let shift = if axis == 0 {
                    Vec2::new(h, 0.0)
                } else {
                    Vec2::new(0.0, h)
                };
                let f = |x: Vec2| model.forward(None, x, e.t_frac, e.cond).unwrap().dot(g[i]);
                let fd = (f(e.x + shift) - f(e.x - shift)) / (2.0 * h);
                let an = if axis == 0 { dx[i].x } else { dx[i].y };
                assert!(rel_err(an, fd) < 1e-4, "row {i} axis {axis}: {an} vs {fd}");
            }
        }
    }
}

#[test]
fn adapter_gradients_match_central_differences() {
    let model = DenoiserModel::init(small_arch(), ModelRole::Base, 3).unwrap();
    let mut adapter =
        LoraAdapter::new(&model.arch, 2, &hidden_layer_targets(&model.arch), 4).unwrap();
    let mut rng = RngStream::new(8, 8);
    for p in adapter.params.iter_mut() {
        *p = 0.3 * rng.gaussian_pair().x;
    }
    adapter.scale = 0.7;
    let batch = random_batch(5, 3, 2);
    let (_, tape) = model
        .backward(Some(&adapter), &batch, Trainable::AdapterParams)
        .unwrap();
    assert!(tape.model.iter().all(|&g| g == 0.0));
    let grads = tape.adapter.unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..adapter.params.len() {
        let mut plus = adapter.clone();
        plus.params[i] += h;
        let mut minus = adapter.clone();
        minus.params[i] -= h;
        let fd = (mse(&model, Some(&plus), &batch) - mse(&model, Some(&minus), &batch)) / (2.0 * h);
        worst = worst.max(rel_err(grads[i], fd));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn zero_residual_gives_zero_gradient() {
    let model = DenoiserModel::init(small_arch(), ModelRole::Base, 3).unwrap();
    let mut batch = random_batch(4, 3, 3);
    for e in batch.iter_mut() {
        e.target = model.forward(None, e.x, e.t_frac, e.cond).unwrap();
    }
    let (loss, tape) = model
        .backward(None, &batch, Trainable::ModelParams)
        .unwrap();
    assert_eq!(loss, 0.0);
    assert!(tape.model.iter().all(|&g| g == 0.0));
}

#[test]
fn empty_batch_is_rejected() {
    let model = DenoiserModel::init(small_arch(), ModelRole::Base, 3).unwrap();
    assert!(matches!(
        model.backward(None, &[], Trainable::ModelParams),
        Err(LabError::EmptyBatch)
    ));
}

#[test]
fn condition_range_is_checked() {
    let model = DenoiserModel::init(small_arch(), ModelRole::Base, 3).unwrap();
    assert!(matches!(
        model.forward(None, Vec2::ZERO, 0.5, Some(3)),
        Err(LabError::ConditionOutOfRange { .. })
    ));
    assert!(model.forward(None, Vec2::ZERO, 0.5, None).is_ok());
}

#[test]
fn forward_is_deterministic() {
    let model = DenoiserModel::init(Architecture::default(), ModelRole::Base, 1).unwrap();
    let a = model
        .forward(None, Vec2::new(0.3, -1.2), 0.4, Some(2))
        .unwrap();
    let b = model
        .forward(None, Vec2::new(0.3, -1.2), 0.4, Some(2))
        .unwrap();
    assert_eq!(a.x.to_bits(), b.x.to_bits());
    assert_eq!(a.y.to_bits(), b.y.to_bits());
}

#[test]
fn lora_neutrality() {
    let model = DenoiserModel::init(Architecture::default(), ModelRole::Base, 1).unwrap();
    let fresh = LoraAdapter::new(&model.arch, 4, &hidden_layer_targets(&model.arch), 2).unwrap();
    let mut trained = fresh.clone();
    let mut rng = RngStream::new(1, 1);
    trained
        .params
        .iter_mut()
        .for_each(|p| *p = rng.gaussian_pair().x);
    let zero_scale = trained.with_scale(0.0);
    let mut rng = RngStream::new(2, 2);
    for _ in 0..50 {
        let x = 3.0 * rng.gaussian_pair();
        let t = rng.uniform();
        let plain = model.forward(None, x, t, None).unwrap();
        for a in [&fresh.with_scale(5.0), &zero_scale] {
            let out = model.forward(Some(a), x, t, None).unwrap();
            assert_eq!(out.x.to_bits(), plain.x.to_bits());
            assert_eq!(out.y.to_bits(), plain.y.to_bits());
        }
    }
}

#[test]
fn merge_matches_attached_adapter() {
    let model = DenoiserModel::init(Architecture::default(), ModelRole::Base, 1).unwrap();
    let mut adapter =
        LoraAdapter::new(&model.arch, 4, &hidden_layer_targets(&model.arch), 2).unwrap();
    let mut rng = RngStream::new(3, 3);
    adapter
        .params
        .iter_mut()
        .for_each(|p| *p = 0.1 * rng.gaussian_pair().x);
    let scaled = adapter.with_scale(1.5);
    let merged = merge_adapter(&model, &adapter, 1.5).unwrap();
    let mut max_diff = 0.0f64;
    for _ in 0..100 {
        let x = 3.0 * rng.gaussian_pair();
        let t = rng.uniform();
        let c = Some(rng.below(8));
        let a = model.forward(Some(&scaled), x, t, c).unwrap();
        let b = merged.forward(None, x, t, c).unwrap();
        max_diff = max_diff.max((a - b).norm());
    }
    assert!(max_diff < 1e-12);
    assert_eq!(
        merge_adapter(&model, &adapter, 0.0).unwrap().params,
        model.params
    );
}

#[test]
fn adapter_attaches_to_any_same_shape_model() {
    let base = DenoiserModel::init(Architecture::default(), ModelRole::Base, 1).unwrap();
    let student = DenoiserModel::init(Architecture::default(), ModelRole::Distilled, 9).unwrap();
    let adapter = LoraAdapter::new(&base.arch, 4, &hidden_layer_targets(&base.arch), 2).unwrap();
    assert!(merge_adapter(&base, &adapter, 1.0).is_ok());
    assert!(merge_adapter(&student, &adapter, 1.0).is_ok());
    let other = DenoiserModel::init(small_arch(), ModelRole::Base, 1).unwrap();
    assert!(matches!(
        merge_adapter(&other, &adapter, 1.0),
        Err(LabError::ShapeMismatch(_))
    ));
}

#[test]
fn adapter_rank_bounds() {
    let arch = small_arch();
    assert!(LoraAdapter::new(&arch, 0, &[0], 1).is_err());
    assert!(LoraAdapter::new(&arch, 9, &[1], 1).is_err());
    assert!(LoraAdapter::new(&arch, 8, &[1], 1).is_ok());
}

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::kernels::{dense_forward, dense_input_grad, dense_param_grad, silu, silu_grad};
use super::lora::LoraAdapter;
use crate::error::{LabError, Result};
use crate::numerics::{RngStream, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Base,
    Distilled,
}

impl ModelRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Base => "base",
            ModelRole::Distilled => "distilled",
        }
    }
}

/// How the last layer's output becomes ε̂.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputParam {
    /// The last layer is ε̂ directly.
    #[default]
    Epsilon,
    /// `ε̂ = √(1−ᾱ)·x + √ᾱ·out`, i.e. the network predicts velocity. `ᾱ` is
    /// read from the table at position `t_frac·(len − 1)`, linearly
    /// interpolated. Keeps x̃0 well conditioned where `ᾱ` is tiny.
    Velocity { alpha_bar: Vec<f64> },
}

impl OutputParam {
    /// `(skip, scale)` such that `ε̂ = skip·x + scale·out`.
    pub fn coefficients(&self, t_frac: f64) -> (f64, f64) {
        match self {
            OutputParam::Epsilon => (0.0, 1.0),
            OutputParam::Velocity { alpha_bar } => {
                let pos = t_frac * (alpha_bar.len() - 1) as f64;
                let i = (pos.floor() as usize).min(alpha_bar.len() - 2);
                let f = pos - i as f64;
                let ab = alpha_bar[i] + f * (alpha_bar[i + 1] - alpha_bar[i]);
                ((1.0 - ab).sqrt(), ab.sqrt())
            }
        }
    }
}

/// Shape of the noise-prediction MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    /// 0 means unconditional; otherwise the embedding table has one extra
    /// row for the null condition.
    pub n_conditions: usize,
    pub activation: Activation,
    #[serde(default)]
    pub output: OutputParam,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            time_embed_dim: 32,
            cond_embed_dim: 8,
            n_conditions: 8,
            activation: Activation::Silu,
            output: OutputParam::Epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct LayerSpan {
    pub w_off: usize,
    pub b_off: usize,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ParamLayout {
    pub layers: Vec<LayerSpan>,
    pub embed_off: usize,
    pub embed_rows: usize,
    pub total: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(LabError::InvalidParameter(
                "hidden widths must be non-empty and positive".into(),
            ));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(LabError::InvalidParameter(
                "time_embed_dim must be an even number >= 2".into(),
            ));
        }
        if let OutputParam::Velocity { alpha_bar } = &self.output {
            if alpha_bar.len() < 2 || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(LabError::InvalidParameter(
                    "velocity output needs at least two alpha_bar values in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn effective_cond_dim(&self) -> usize {
        if self.n_conditions == 0 {
            0
        } else {
            self.cond_embed_dim
        }
    }

    pub fn input_dim(&self) -> usize {
        2 + self.time_embed_dim + self.effective_cond_dim()
    }

    /// `(n_in, n_out)` per dense layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut n_in = self.input_dim();
        for &h in &self.hidden {
            dims.push((n_in, h));
            n_in = h;
        }
        dims.push((n_in, 2));
        dims
    }

    pub(crate) fn layout(&self) -> ParamLayout {
        let mut off = 0;
        let layers = self
            .layer_dims()
            .into_iter()
            .map(|(n_in, n_out)| {
                let span = LayerSpan {
                    w_off: off,
                    b_off: off + n_in * n_out,
                    n_in,
                    n_out,
                };
                off += n_in * n_out + n_out;
                span
            })
            .collect();
        let embed_rows = if self.n_conditions == 0 {
            0
        } else {
            self.n_conditions + 1
        };
        let embed_off = off;
        off += embed_rows * self.effective_cond_dim();
        ParamLayout {
            layers,
            embed_off,
            embed_rows,
            total: off,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }

    /// Names and lengths of the parameter blocks, in storage order.
    pub fn param_blocks(&self) -> Vec<(String, usize)> {
        let layout = self.layout();
        let mut blocks = Vec::new();
        for (l, s) in layout.layers.iter().enumerate() {
            blocks.push((format!("layer{l}.weight"), s.n_in * s.n_out));
            blocks.push((format!("layer{l}.bias"), s.n_out));
        }
        if layout.embed_rows > 0 {
            blocks.push((
                "cond_embedding".into(),
                layout.embed_rows * self.effective_cond_dim(),
            ));
        }
        blocks
    }
}

/// Sinusoidal embedding of `t_frac` with frequencies spaced geometrically
/// from 1 to 1000: `[sin(f_k t), ..., cos(f_k t), ...]`.
pub fn time_embedding(t_frac: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    for k in 0..half {
        let freq = if half > 1 {
            1000f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        let (s, c) = (t_frac * freq).sin_cos();
        out[k] = s;
        out[half + k] = c;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserInput {
    pub x: Vec2,
    pub t_frac: f64,
    pub cond: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainExample {
    pub x: Vec2,
    pub t_frac: f64,
    pub cond: Option<usize>,
    pub target: Vec2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    ModelParams,
    AdapterParams,
}

/// Gradient accumulators mirroring the model (and, when present, adapter)
/// parameter vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTape {
    pub model: Vec<f64>,
    pub adapter: Option<Vec<f64>>,
}

impl GradientTape {
    pub fn zeros(model: &DenoiserModel, adapter: Option<&LoraAdapter>) -> Self {
        Self {
            model: vec![0.0; model.params.len()],
            adapter: adapter.map(|a| vec![0.0; a.params.len()]),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.model.iter_mut().for_each(|g| *g *= s);
        if let Some(a) = &mut self.adapter {
            a.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Gradient vector for the selected parameter set.
    pub fn selected(&self, trainable: Trainable) -> &[f64] {
        match trainable {
            Trainable::ModelParams => &self.model,
            Trainable::AdapterParams => self.adapter.as_deref().unwrap_or(&[]),
        }
    }
}

/// Layer activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    /// `acts[0]` is the input matrix; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    cond_rows: Vec<usize>,
    /// Per-row `(skip, scale)` output coefficients.
    out_coef: Vec<(f64, f64)>,
}

impl ForwardCache {
    pub fn outputs(&self) -> Vec<Vec2> {
        self.acts
            .last()
            .expect("cache has an output layer")
            .chunks_exact(2)
            .map(|c| Vec2::new(c[0], c[1]))
            .collect()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Effective dense weights, with any adapter already folded in.
pub struct EffectiveWeights<'a> {
    w: Vec<Cow<'a, [f64]>>,
}

/// The ε-prediction network.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub arch: Architecture,
    pub role: ModelRole,
    pub params: Vec<f64>,
    layout: ParamLayout,
}

impl DenoiserModel {
    /// Kaiming-normal weights (std `sqrt(2 / fan_in)`), zero biases and
    /// standard-normal condition embeddings.
    pub fn init(arch: Architecture, role: ModelRole, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.total];
        let mut rng = RngStream::new(seed, 0x1417);
        let mut normal = || {
            // one value per call keeps the draw order independent of parity
            rng.gaussian_pair().x
        };
        for s in &layout.layers {
            let std = (2.0 / s.n_in as f64).sqrt();
            for w in &mut params[s.w_off..s.w_off + s.n_in * s.n_out] {
                *w = std * normal();
            }
        }
        for e in &mut params[layout.embed_off..layout.total] {
            *e = normal();
        }
        Ok(Self {
            arch,
            role,
            params,
            layout,
        })
    }

    pub fn from_params(arch: Architecture, role: ModelRole, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if params.len() != layout.total {
            return Err(LabError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            arch,
            role,
            params,
            layout,
        })
    }

    pub fn with_role(mut self, role: ModelRole) -> Self {
        self.role = role;
        self
    }

    pub fn n_conditions(&self) -> usize {
        self.arch.n_conditions
    }

    pub fn n_layers(&self) -> usize {
        self.layout.layers.len()
    }

    pub(crate) fn layer_span(&self, l: usize) -> LayerSpan {
        self.layout.layers[l]
    }

    pub fn layer_weight(&self, l: usize) -> &[f64] {
        let s = self.layout.layers[l];
        &self.params[s.w_off..s.w_off + s.n_in * s.n_out]
    }

    pub fn same_shape(&self, other: &DenoiserModel) -> bool {
        self.arch == other.arch
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn check_cond(&self, cond: Option<usize>) -> Result<usize> {
        match cond {
            None => Ok(self.arch.n_conditions),
            Some(c) if c < self.arch.n_conditions => Ok(c),
            Some(c) => Err(LabError::ConditionOutOfRange {
                cond: c,
                n_conditions: self.arch.n_conditions,
            }),
        }
    }

    pub fn weights<'a>(&'a self, adapter: Option<&LoraAdapter>) -> Result<EffectiveWeights<'a>> {
        if let Some(a) = adapter {
            a.check_compatible(&self.arch)?;
        }
        let w = (0..self.layout.layers.len())
            .map(|l| {
                let base = self.layer_weight(l);
                match adapter.and_then(|a| a.merged_weight(l, base)) {
                    Some(merged) => Cow::Owned(merged),
                    None => Cow::Borrowed(base),
                }
            })
            .collect();
        Ok(EffectiveWeights { w })
    }

    fn build_inputs(&self, inputs: &[DenoiserInput]) -> Result<(Vec<f64>, Vec<usize>)> {
        let d = self.arch.input_dim();
        let te = self.arch.time_embed_dim;
        let ce = self.arch.effective_cond_dim();
        let mut x = vec![0.0; inputs.len() * d];
        let mut rows = Vec::with_capacity(inputs.len());
        for (inp, row) in inputs.iter().zip(x.chunks_exact_mut(d)) {
            if !(0.0..=1.0).contains(&inp.t_frac) {
                return Err(LabError::InvalidParameter(format!(
                    "t_frac {} outside [0, 1]",
                    inp.t_frac
                )));
            }
            let c = self.check_cond(inp.cond)?;
            row[0] = inp.x.x;
            row[1] = inp.x.y;
            time_embedding(inp.t_frac, &mut row[2..2 + te]);
            if ce > 0 {
                let e = self.layout.embed_off + c * ce;
                row[2 + te..].copy_from_slice(&self.params[e..e + ce]);
            }
            rows.push(c);
        }
        Ok((x, rows))
    }

    fn output_coefficients(&self, inputs: &[DenoiserInput]) -> Vec<(f64, f64)> {
        inputs
            .iter()
            .map(|i| self.arch.output.coefficients(i.t_frac))
            .collect()
    }

    /// Batched forward pass keeping activations for [`Self::backprop`].
    pub fn forward_cached(
        &self,
        weights: &EffectiveWeights<'_>,
        inputs: &[DenoiserInput],
    ) -> Result<ForwardCache> {
        let (input, cond_rows) = self.build_inputs(inputs)?;
        let batch = inputs.len();
        let n_layers = self.layout.layers.len();
        let mut acts = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers - 1);
        acts.push(input);
        for (l, s) in self.layout.layers.iter().enumerate() {
            let b = &self.params[s.b_off..s.b_off + s.n_out];
            let mut z = vec![0.0; batch * s.n_out];
            dense_forward(&weights.w[l], b, &acts[l], s.n_in, &mut z);
            if l + 1 < n_layers {
                let a: Vec<f64> = z.iter().map(|&v| silu(v)).collect();
                pre.push(z);
                acts.push(a);
            } else {
                acts.push(z);
            }
        }
        let out_coef = self.output_coefficients(inputs);
        if self.arch.output != OutputParam::Epsilon {
            let out = acts.last_mut().expect("output layer");
            for ((o, inp), (skip, scale)) in out.chunks_exact_mut(2).zip(inputs).zip(&out_coef) {
                o[0] = skip * inp.x.x + scale * o[0];
                o[1] = skip * inp.x.y + scale * o[1];
            }
        }
        Ok(ForwardCache {
            batch,
            acts,
            pre,
            cond_rows,
            out_coef,
        })
    }

    pub fn forward_batch(
        &self,
        adapter: Option<&LoraAdapter>,
        inputs: &[DenoiserInput],
    ) -> Result<Vec<Vec2>> {
        let w = self.weights(adapter)?;
        self.forward_with(&w, inputs)
    }

    pub fn forward_with(
        &self,
        weights: &EffectiveWeights<'_>,
        inputs: &[DenoiserInput],
    ) -> Result<Vec<Vec2>> {
        Ok(self.forward_cached(weights, inputs)?.outputs())
    }

    /// Predicted noise for a single input.
    pub fn forward(
        &self,
        adapter: Option<&LoraAdapter>,
        x: Vec2,
        t_frac: f64,
        cond: Option<usize>,
    ) -> Result<Vec2> {
        let out = self.forward_batch(adapter, &[DenoiserInput { x, t_frac, cond }])?;
        Ok(out[0])
    }

    /// Reverse pass from output gradients `d_out` (one per batch row).
    ///
    /// Accumulates parameter gradients for the selected set into `tape` and
    /// returns the gradient with respect to each row's `x` input.
    pub fn backprop(
        &self,
        adapter: Option<&LoraAdapter>,
        weights: &EffectiveWeights<'_>,
        cache: &ForwardCache,
        d_out: &[Vec2],
        trainable: Trainable,
        tape: &mut GradientTape,
    ) -> Result<Vec<Vec2>> {
        if d_out.len() != cache.batch {
            return Err(LabError::LengthMismatch(format!(
                "{} output gradients for batch of {}",
                d_out.len(),
                cache.batch
            )));
        }
        if trainable == Trainable::AdapterParams && (adapter.is_none() || tape.adapter.is_none()) {
            return Err(LabError::ShapeMismatch(
                "adapter training requires an adapter and an adapter tape".into(),
            ));
        }
        let batch = cache.batch;
        let n_layers = self.layout.layers.len();
        let mut dz: Vec<f64> = d_out
            .iter()
            .zip(&cache.out_coef)
            .flat_map(|(g, (_, scale))| [scale * g.x, scale * g.y])
            .collect();
        let mut dw_tmp = Vec::new();
        for l in (0..n_layers).rev() {
            let s = self.layout.layers[l];
            let x = &cache.acts[l];
            match trainable {
                Trainable::ModelParams => {
                    let (head, tail) = tape.model.split_at_mut(s.b_off);
                    dense_param_grad(&dz, x, s.n_in, &mut head[s.w_off..], &mut tail[..s.n_out]);
                }
                Trainable::AdapterParams => {
                    let a = adapter.expect("checked above");
                    if let Some(k) = a.target_index(l) {
                        dw_tmp.clear();
                        dw_tmp.resize(s.n_in * s.n_out, 0.0);
                        let mut db = vec![0.0; s.n_out];
                        dense_param_grad(&dz, x, s.n_in, &mut dw_tmp, &mut db);
                        a.project_weight_grad(k, &dw_tmp, tape.adapter.as_mut().expect("checked"));
                    }
                }
            }
            let mut dx = vec![0.0; batch * s.n_in];
            dense_input_grad(&dz, &weights.w[l], s.n_in, s.n_out, &mut dx);
            if l > 0 {
                for (g, &z) in dx.iter_mut().zip(&cache.pre[l - 1]) {
                    *g *= silu_grad(z);
                }
            }
            dz = dx;
        }
        // dz now holds gradients w.r.t. the input rows.
        let d = self.arch.input_dim();
        let ce = self.arch.effective_cond_dim();
        if trainable == Trainable::ModelParams && ce > 0 {
            let off = d - ce;
            for (row, &c) in dz.chunks_exact(d).zip(&cache.cond_rows) {
                let e = self.layout.embed_off + c * ce;
                for (acc, g) in tape.model[e..e + ce].iter_mut().zip(&row[off..]) {
                    *acc += g;
                }
            }
        }
        Ok(dz
            .chunks_exact(d)
            .zip(d_out.iter().zip(&cache.out_coef))
            .map(|(r, (g, (skip, _)))| Vec2::new(r[0], r[1]) + *skip * *g)
            .collect())
    }

    /// Mean-squared-error loss over all output entries and its gradient with
    /// respect to the selected parameter set.
    pub fn backward(
        &self,
        adapter: Option<&LoraAdapter>,
        batch: &[TrainExample],
        trainable: Trainable,
    ) -> Result<(f64, GradientTape)> {
        if batch.is_empty() {
            return Err(LabError::EmptyBatch);
        }
        let w = self.weights(adapter)?;
        let inputs: Vec<DenoiserInput> = batch
            .iter()
            .map(|e| DenoiserInput {
                x: e.x,
                t_frac: e.t_frac,
                cond: e.cond,
            })
            .collect();
        let cache = self.forward_cached(&w, &inputs)?;
        let out = cache.outputs();
        let norm = 1.0 / (2 * batch.len()) as f64;
        let mut loss = 0.0;
        let d_out: Vec<Vec2> = out
            .iter()
            .zip(batch)
            .map(|(o, e)| {
                let r = *o - e.target;
                loss += r.norm_sq();
                (2.0 * norm) * r
            })
            .collect();
        let mut tape = GradientTape::zeros(self, adapter);
        self.backprop(adapter, &w, &cache, &d_out, trainable, &mut tape)?;
        Ok((loss * norm, tape))
    }
}

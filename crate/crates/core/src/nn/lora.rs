//! Low-rank adapters: each targeted dense layer's weight is used as
//! `W + scale · up · down`, with `down: rank × n_in` and `up: n_out × rank`.

use serde::{Deserialize, Serialize};

use super::kernels::{axpy, dot};
use super::model::{Architecture, DenoiserModel};
use crate::error::{LabError, Result};
use crate::numerics::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraTarget {
    pub layer: usize,
    pub n_in: usize,
    pub n_out: usize,
    /// Offset of the `down` factor in the flat parameter vector; `up`
    /// follows immediately.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f64,
    pub targets: Vec<LoraTarget>,
    pub params: Vec<f64>,
}

/// Default targets: every layer that produces a hidden activation.
pub fn hidden_layer_targets(arch: &Architecture) -> Vec<usize> {
    (0..arch.hidden.len()).collect()
}

impl LoraAdapter {
    /// Zero `up` factors and `down` factors drawn from N(0, 0.01²), so a
    /// fresh adapter is an exact no-op.
    pub fn new(arch: &Architecture, rank: usize, layers: &[usize], seed: u64) -> Result<Self> {
        let dims = arch.layer_dims();
        if layers.is_empty() {
            return Err(LabError::InvalidParameter(
                "adapter needs at least one target layer".into(),
            ));
        }
        let mut targets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for &layer in layers {
            let &(n_in, n_out) = dims
                .get(layer)
                .ok_or_else(|| LabError::ShapeMismatch(format!("layer {layer} does not exist")))?;
            if rank == 0 || rank > n_in.min(n_out) {
                return Err(LabError::InvalidParameter(format!(
                    "rank {rank} not in 1..={} for layer {layer}",
                    n_in.min(n_out)
                )));
            }
            if targets.iter().any(|t: &LoraTarget| t.layer == layer) {
                return Err(LabError::InvalidParameter(format!(
                    "layer {layer} targeted twice"
                )));
            }
            targets.push(LoraTarget {
                layer,
                n_in,
                n_out,
                offset: off,
            });
            off += rank * (n_in + n_out);
        }
        let mut params = vec![0.0; off];
        let mut rng = RngStream::new(seed, 0x10a4);
        for t in &targets {
            for d in &mut params[t.offset..t.offset + rank * t.n_in] {
                *d = 0.01 * rng.gaussian_pair().x;
            }
        }
        Ok(Self {
            rank,
            scale: 1.0,
            targets,
            params,
        })
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        let mut a = self.clone();
        a.scale = scale;
        a
    }

    pub fn target_index(&self, layer: usize) -> Option<usize> {
        self.targets.iter().position(|t| t.layer == layer)
    }

    pub fn down(&self, k: usize) -> &[f64] {
        let t = &self.targets[k];
        &self.params[t.offset..t.offset + self.rank * t.n_in]
    }

    pub fn up(&self, k: usize) -> &[f64] {
        let t = &self.targets[k];
        let start = t.offset + self.rank * t.n_in;
        &self.params[start..start + t.n_out * self.rank]
    }

    pub fn check_compatible(&self, arch: &Architecture) -> Result<()> {
        let dims = arch.layer_dims();
        for t in &self.targets {
            match dims.get(t.layer) {
                Some(&(n_in, n_out)) if n_in == t.n_in && n_out == t.n_out => {}
                _ => {
                    return Err(LabError::ShapeMismatch(format!(
                        "adapter layer {} ({}x{}) does not fit the model",
                        t.layer, t.n_out, t.n_in
                    )))
                }
            }
        }
        Ok(())
    }

    /// `W + scale · up · down` for a targeted layer, `None` otherwise or when
    /// the scale is exactly zero.
    pub fn merged_weight(&self, layer: usize, w: &[f64]) -> Option<Vec<f64>> {
        let k = self.target_index(layer)?;
        if self.scale == 0.0 {
            return None;
        }
        let t = &self.targets[k];
        let (down, up) = (self.down(k), self.up(k));
        let mut out = w.to_vec();
        for o in 0..t.n_out {
            let row = &mut out[o * t.n_in..(o + 1) * t.n_in];
            for r in 0..self.rank {
                let c = self.scale * up[o * self.rank + r];
                if c != 0.0 {
                    axpy(c, &down[r * t.n_in..(r + 1) * t.n_in], row);
                }
            }
        }
        Some(out)
    }

    /// Chain rule from an effective-weight gradient `dw` of target `k` onto
    /// its factors, accumulated into `grad`.
    pub fn project_weight_grad(&self, k: usize, dw: &[f64], grad: &mut [f64]) {
        let t = &self.targets[k];
        let rank = self.rank;
        let (down, up) = (self.down(k), self.up(k));
        let s = self.scale;
        let up_off = t.offset + rank * t.n_in;
        for o in 0..t.n_out {
            let dw_row = &dw[o * t.n_in..(o + 1) * t.n_in];
            for r in 0..rank {
                grad[up_off + o * rank + r] += s * dot(dw_row, &down[r * t.n_in..(r + 1) * t.n_in]);
            }
        }
        for r in 0..rank {
            let (head, _) = grad.split_at_mut(t.offset + (r + 1) * t.n_in);
            let dd = &mut head[t.offset + r * t.n_in..];
            for o in 0..t.n_out {
                let c = s * up[o * rank + r];
                if c != 0.0 {
                    axpy(c, &dw[o * t.n_in..(o + 1) * t.n_in], dd);
                }
            }
        }
    }

    pub fn is_zero_effect(&self) -> bool {
        self.scale == 0.0 || (0..self.targets.len()).all(|k| self.up(k).iter().all(|&u| u == 0.0))
    }
}

/// Folds an adapter into a copy of `model` at the given scale.
pub fn merge_adapter(
    model: &DenoiserModel,
    adapter: &LoraAdapter,
    scale: f64,
) -> Result<DenoiserModel> {
    adapter.check_compatible(&model.arch)?;
    let scaled = adapter.with_scale(scale);
    let mut merged = model.clone();
    for t in &adapter.targets {
        if let Some(w) = scaled.merged_weight(t.layer, model.layer_weight(t.layer)) {
            let span = model.layer_span(t.layer);
            merged.params[span.w_off..span.w_off + w.len()].copy_from_slice(&w);
        }
    }
    Ok(merged)
}

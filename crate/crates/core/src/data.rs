//! Ground-truth 2-D distributions with exact samplers and an oracle
//! mode classifier for the mixture ring.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{RngStream, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    GmmRing,
    TwoMoons,
    Spiral,
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistributionKind::GmmRing => "gmm_ring",
            DistributionKind::TwoMoons => "two_moons",
            DistributionKind::Spiral => "spiral",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDistribution {
    pub kind: DistributionKind,
    /// Named parameters: `n_modes`, `ring_radius`, `mode_std` for the ring,
    /// `noise_std` for the others.
    pub params: BTreeMap<String, f64>,
    pub attribute_direction: Vec2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub point: Vec2,
    /// Generating component for the ring, `-1` for unlabeled kinds.
    pub mode_label: i64,
}

impl Default for ToyDistribution {
    fn default() -> Self {
        Self::gmm_ring(8, 4.0, 0.15)
    }
}

impl ToyDistribution {
    pub fn gmm_ring(n_modes: usize, ring_radius: f64, mode_std: f64) -> Self {
        let params = BTreeMap::from([
            ("n_modes".to_string(), n_modes as f64),
            ("ring_radius".to_string(), ring_radius),
            ("mode_std".to_string(), mode_std),
        ]);
        Self {
            kind: DistributionKind::GmmRing,
            params,
            attribute_direction: Vec2::new(1.0, 0.0),
        }
    }

    pub fn two_moons(noise_std: f64) -> Self {
        Self {
            kind: DistributionKind::TwoMoons,
            params: BTreeMap::from([("noise_std".to_string(), noise_std)]),
            attribute_direction: Vec2::new(1.0, 0.0),
        }
    }

    pub fn spiral(noise_std: f64) -> Self {
        Self {
            kind: DistributionKind::Spiral,
            params: BTreeMap::from([("noise_std".to_string(), noise_std)]),
            attribute_direction: Vec2::new(1.0, 0.0),
        }
    }

    fn param(&self, name: &str) -> Result<f64> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| LabError::InvalidParameter(format!("{} requires `{name}`", self.kind)))
    }

    fn param_or(&self, name: &str, default: f64) -> f64 {
        self.params.get(name).copied().unwrap_or(default)
    }

    pub fn validate(&self) -> Result<()> {
        if ((self.attribute_direction.norm()) - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidParameter(
                "attribute_direction must have unit norm".into(),
            ));
        }
        match self.kind {
            DistributionKind::GmmRing => {
                let n = self.param("n_modes")?;
                if n < 2.0 || n.fract() != 0.0 {
                    return Err(LabError::InvalidParameter(
                        "n_modes must be an integer >= 2".into(),
                    ));
                }
                if self.param("ring_radius")? <= 0.0 {
                    return Err(LabError::InvalidParameter("ring_radius must be > 0".into()));
                }
                if self.param("mode_std")? <= 0.0 {
                    return Err(LabError::InvalidParameter("mode_std must be > 0".into()));
                }
            }
            DistributionKind::TwoMoons | DistributionKind::Spiral => {
                if self.param_or("noise_std", 0.1) < 0.0 {
                    return Err(LabError::InvalidParameter("noise_std must be >= 0".into()));
                }
            }
        }
        Ok(())
    }

    fn require_ring(&self) -> Result<()> {
        if self.kind != DistributionKind::GmmRing {
            return Err(LabError::UnsupportedKind(self.kind.to_string()));
        }
        Ok(())
    }

    pub fn n_modes(&self) -> Result<usize> {
        self.require_ring()?;
        Ok(self.param("n_modes")? as usize)
    }

    pub fn mode_std(&self) -> Result<f64> {
        self.require_ring()?;
        self.param("mode_std")
    }

    /// Mixture centers, at angle `2πj/n` on the ring.
    pub fn centers(&self) -> Result<Vec<Vec2>> {
        let n = self.n_modes()?;
        let r = self.param("ring_radius")?;
        Ok((0..n)
            .map(|j| {
                let a = TAU * j as f64 / n as f64;
                Vec2::new(r * a.cos(), r * a.sin())
            })
            .collect())
    }

    /// Number of condition labels a model trained on this data should accept.
    pub fn n_labels(&self) -> usize {
        self.n_modes().unwrap_or(0)
    }
}

/// Draws `n` i.i.d. samples.
pub fn sample_truth(
    dist: &ToyDistribution,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<LabeledSample>> {
    dist.validate()?;
    let mut out = Vec::with_capacity(n);
    match dist.kind {
        DistributionKind::GmmRing => {
            let centers = dist.centers()?;
            let std = dist.mode_std()?;
            for _ in 0..n {
                let j = rng.below(centers.len());
                let z = rng.gaussian_pair();
                out.push(LabeledSample {
                    point: centers[j] + std * z,
                    mode_label: j as i64,
                });
            }
        }
        DistributionKind::TwoMoons => {
            let noise = dist.param_or("noise_std", 0.1);
            for _ in 0..n {
                let upper = rng.uniform() < 0.5;
                let theta = PI * rng.uniform();
                let base = if upper {
                    Vec2::new(theta.cos(), theta.sin())
                } else {
                    Vec2::new(1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let z = rng.gaussian_pair();
                // centre the pair of moons and stretch to the ring's scale
                let p = 2.5 * (base - Vec2::new(0.5, 0.25));
                out.push(LabeledSample {
                    point: p + noise * z,
                    mode_label: -1,
                });
            }
        }
        DistributionKind::Spiral => {
            let noise = dist.param_or("noise_std", 0.1);
            for _ in 0..n {
                let theta = 3.0 * PI * rng.uniform().sqrt();
                let r = 4.5 * theta / (3.0 * PI);
                let z = rng.gaussian_pair();
                out.push(LabeledSample {
                    point: Vec2::new(r * theta.cos(), r * theta.sin()) + noise * z,
                    mode_label: -1,
                });
            }
        }
    }
    Ok(out)
}

/// Exact mixture posterior `p(mode | p)` for the ring (uniform weights,
/// isotropic components).
pub fn oracle_posterior(dist: &ToyDistribution, p: Vec2) -> Result<Vec<f64>> {
    let centers = dist.centers()?;
    let std = dist.mode_std()?;
    let inv = 1.0 / (2.0 * std * std);
    let logits: Vec<f64> = centers.iter().map(|c| -(p - *c).norm_sq() * inv).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    Ok(w)
}

/// Index of the most probable mode. Ties resolve to the lowest index.
pub fn oracle_argmax(dist: &ToyDistribution, p: Vec2) -> Result<usize> {
    let post = oracle_posterior(dist, p)?;
    Ok(argmax(&post))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Coordinate along the distribution's controllable attribute axis.
pub fn attribute_value(dist: &ToyDistribution, p: Vec2) -> f64 {
    p.dot(dist.attribute_direction)
}

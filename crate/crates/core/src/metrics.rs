//! Sample-set metrics: Fréchet distance on raw coordinates, mean pairwise
//! distance, mode coverage, an oracle-classifier IS analogue and the
//! DT-distance curve.

use serde::{Deserialize, Serialize};

use crate::data::{argmax, oracle_posterior, ToyDistribution};
use crate::diffusion::Trajectory;
use crate::error::{LabError, Result};
use crate::io::{fmt_f64, CsvTable};
use crate::numerics::{batch_stats, psd_sqrt, RngStream, Vec2};

/// Above this size pairwise distances are estimated from sampled pairs.
pub const EXACT_PAIRS_MAX: usize = 2_000;
pub const SAMPLED_PAIRS: usize = 100_000;
pub const PAIR_SEED: u64 = 1234;

fn need(n: usize, needed: usize) -> Result<()> {
    if n < needed {
        return Err(LabError::TooFewPoints { needed, got: n });
    }
    Ok(())
}

/// Fréchet distance between Gaussians fitted to the two sets.
pub fn frechet_distance(gen: &[Vec2], reference: &[Vec2]) -> Result<f64> {
    let (m1, s1) = batch_stats(gen)?;
    let (m2, s2) = batch_stats(reference)?;
    let r1 = psd_sqrt(s1)?;
    let cross = psd_sqrt(r1 * s2 * r1)?;
    let d = (m1 - m2).norm_sq() + (s1 + s2 - cross.scale(2.0)).trace();
    Ok(d.max(0.0))
}

/// Mean Euclidean distance over unordered pairs.
pub fn sample_diversity(points: &[Vec2]) -> Result<f64> {
    let n = points.len();
    need(n, 2)?;
    if n <= EXACT_PAIRS_MAX {
        let mut sum = 0.0;
        for (i, p) in points.iter().enumerate() {
            sum += points[i + 1..]
                .iter()
                .map(|q| (*p - *q).norm())
                .sum::<f64>();
        }
        return Ok(sum / (n * (n - 1) / 2) as f64);
    }
    let mut rng = RngStream::new(PAIR_SEED, 0);
    let mut sum = 0.0;
    for _ in 0..SAMPLED_PAIRS {
        let i = rng.below(n);
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        sum += (points[i] - points[j]).norm();
    }
    Ok(sum / SAMPLED_PAIRS as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub coverage: f64,
    /// Mean over covered modes of the per-axis RMS spread about the center.
    pub within_mode_std: f64,
    pub histogram: Vec<usize>,
}

/// Assigns each point to its most probable ring mode.
pub fn mode_stats(dist: &ToyDistribution, points: &[Vec2]) -> Result<ModeStats> {
    let centers = dist.centers()?;
    need(points.len(), 1)?;
    let k = centers.len();
    let mut histogram = vec![0usize; k];
    let mut sq = vec![0.0; k];
    for p in points {
        let j = argmax(&oracle_posterior(dist, *p)?);
        histogram[j] += 1;
        sq[j] += (*p - centers[j]).norm_sq();
    }
    let threshold = points.len() as f64 / (4 * k) as f64;
    let covered: Vec<usize> = (0..k)
        .filter(|&j| histogram[j] as f64 >= threshold)
        .collect();
    let within_mode_std = if covered.is_empty() {
        0.0
    } else {
        covered
            .iter()
            .map(|&j| (sq[j] / (2 * histogram[j]) as f64).sqrt())
            .sum::<f64>()
            / covered.len() as f64
    };
    Ok(ModeStats {
        coverage: covered.len() as f64 / k as f64,
        within_mode_std,
        histogram,
    })
}

/// `exp(mean KL(p(y|x) ‖ p̄(y)))` with the exact mixture posterior as the
/// classifier.
pub fn is_analogue(dist: &ToyDistribution, points: &[Vec2]) -> Result<f64> {
    dist.centers()?;
    need(points.len(), 1)?;
    let posts = points
        .iter()
        .map(|p| oracle_posterior(dist, *p))
        .collect::<Result<Vec<_>>>()?;
    let k = posts[0].len();
    let mut marginal = vec![0.0; k];
    for p in &posts {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v;
        }
    }
    marginal.iter_mut().for_each(|m| *m /= posts.len() as f64);
    let mean_kl = posts
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(v, _)| **v > 0.0)
                .map(|(v, m)| v * (v / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / posts.len() as f64;
    Ok(mean_kl.max(0.0).exp())
}

/// Mean distance from each recorded x̃0 to the chain's final sample, as a
/// fraction of the first step's mean distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtCurve {
    /// `(steps completed / total steps, normalized distance)`.
    pub points: Vec<(f64, f64)>,
}

impl DtCurve {
    pub fn value_at(&self, i: usize) -> Option<f64> {
        self.points.get(i).map(|p| p.1)
    }

    /// First step fraction whose distance is at or below `level`.
    pub fn first_reaching(&self, level: f64) -> Option<f64> {
        self.points.iter().find(|p| p.1 <= level).map(|p| p.0)
    }

    /// Centered moving average; windows shrink at the ends.
    pub fn smoothed(&self, window: usize) -> DtCurve {
        let h = window / 2;
        let n = self.points.len();
        let points = (0..n)
            .map(|i| {
                let (lo, hi) = (i.saturating_sub(h), (i + h + 1).min(n));
                let mean = self.points[lo..hi].iter().map(|p| p.1).sum::<f64>() / (hi - lo) as f64;
                (self.points[i].0, mean)
            })
            .collect();
        DtCurve { points }
    }

    pub fn to_csv(&self) -> String {
        let mut t = CsvTable::new(&["step_fraction", "dt_distance"]);
        for (f, d) in &self.points {
            t.row(&[fmt_f64(*f), fmt_f64(*d)]);
        }
        t.finish()
    }
}

pub fn dt_curve(trajectories: &[Trajectory], finals: &[Vec2]) -> Result<DtCurve> {
    if trajectories.len() != finals.len() {
        return Err(LabError::LengthMismatch(format!(
            "{} trajectories, {} final points",
            trajectories.len(),
            finals.len()
        )));
    }
    need(trajectories.len(), 1)?;
    let steps = trajectories[0].records.len();
    if steps == 0 || trajectories.iter().any(|t| t.records.len() != steps) {
        return Err(LabError::LengthMismatch(
            "trajectories differ in step count".into(),
        ));
    }
    let mut mean = vec![0.0; steps];
    for (tr, fin) in trajectories.iter().zip(finals) {
        for (m, r) in mean.iter_mut().zip(&tr.records) {
            *m += (r.dt - *fin).norm();
        }
    }
    let norm = mean[0];
    let points = mean
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let d = if norm > 0.0 { m / norm } else { 0.0 };
            (i as f64 / steps as f64, d)
        })
        .collect();
    Ok(DtCurve { points })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frechet: f64,
    pub sample_diversity: f64,
    /// Mode metrics are defined only for the ring distribution.
    pub mode_coverage: Option<f64>,
    pub within_mode_std: Option<f64>,
    pub is_analogue: Option<f64>,
    pub n_samples: usize,
}

impl MetricsReport {
    pub const HEADER: [&'static str; 6] = [
        "frechet",
        "sample_diversity",
        "mode_coverage",
        "within_mode_std",
        "is_analogue",
        "n_samples",
    ];

    pub fn compute(dist: &ToyDistribution, points: &[Vec2], reference: &[Vec2]) -> Result<Self> {
        let ring = dist.centers().is_ok();
        let modes = if ring {
            Some(mode_stats(dist, points)?)
        } else {
            None
        };
        Ok(Self {
            frechet: frechet_distance(points, reference)?,
            sample_diversity: sample_diversity(points)?,
            mode_coverage: modes.as_ref().map(|m| m.coverage),
            within_mode_std: modes.as_ref().map(|m| m.within_mode_std),
            is_analogue: if ring {
                Some(is_analogue(dist, points)?)
            } else {
                None
            },
            n_samples: points.len(),
        })
    }

    pub fn cells(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        vec![
            fmt_f64(self.frechet),
            fmt_f64(self.sample_diversity),
            opt(self.mode_coverage),
            opt(self.within_mode_std),
            opt(self.is_analogue),
            self.n_samples.to_string(),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut t = CsvTable::new(&Self::HEADER);
        t.row(&self.cells());
        t.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_truth;
    use proptest::prelude::*;

    fn ring() -> ToyDistribution {
        ToyDistribution::gmm_ring(8, 4.0, 0.15)
    }

    fn normals(seed: u64, n: usize) -> Vec<Vec2> {
        let mut rng = RngStream::new(seed, 0);
        (0..n).map(|_| rng.gaussian_pair()).collect()
    }

    #[test]
    fn frechet_oracles() {
        let a = normals(1, 100_000);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
        let shifted: Vec<Vec2> = a.iter().map(|p| *p + Vec2::new(3.0, 0.0)).collect();
        assert!((frechet_distance(&a, &shifted).unwrap() - 9.0).abs() < 0.1);
        let half = &a[..50_000];
        let floor = frechet_distance(half, &a).unwrap();
        assert!(floor > 0.0 && floor < 0.05, "{floor}");
        assert!(matches!(
            frechet_distance(&a[..1], &a),
            Err(LabError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn frechet_matches_diagonal_closed_form() {
        // For commuting covariances the cross term is Σ sqrt(σ1ᵢ σ2ᵢ).
        let a = normals(2, 50_000);
        let b: Vec<Vec2> = normals(3, 50_000)
            .iter()
            .map(|p| Vec2::new(2.0 * p.x, 0.5 * p.y))
            .collect();
        let (ma, ca) = batch_stats(&a).unwrap();
        let (mb, cb) = batch_stats(&b).unwrap();
        // tiny off-diagonals make this approximate; keep the comparison loose
        let expect = (ma - mb).norm_sq()
            + (ca.m[0].sqrt() - cb.m[0].sqrt()).powi(2)
            + (ca.m[3].sqrt() - cb.m[3].sqrt()).powi(2);
        assert!((frechet_distance(&a, &b).unwrap() - expect).abs() < 1e-3);
    }

    #[test]
    fn diversity_small_cases() {
        assert_eq!(sample_diversity(&[Vec2::new(1.0, 1.0); 5]).unwrap(), 0.0);
        let d = sample_diversity(&[Vec2::ZERO, Vec2::new(3.0, 4.0)]).unwrap();
        assert!((d - 5.0).abs() < 1e-15);
        assert!(sample_diversity(&[Vec2::ZERO]).is_err());
    }

    #[test]
    fn diversity_of_standard_normal_is_sqrt_pi() {
        // Brute-force oracle first: ‖z1 − z2‖ for independent draws.
        let mut rng = RngStream::new(99, 5);
        let m = 1_000_000;
        let mc = (0..m)
            .map(|_| (rng.gaussian_pair() - rng.gaussian_pair()).norm())
            .sum::<f64>()
            / m as f64;
        let root_pi = std::f64::consts::PI.sqrt();
        assert!((mc - root_pi).abs() < 0.005, "{mc}");

        let d = sample_diversity(&normals(42, 10_000)).unwrap();
        assert!((d - root_pi).abs() < 0.02, "{d}");
        let d = sample_diversity(&normals(5, 2_000)).unwrap();
        assert!((d - root_pi).abs() < 0.05, "{d}");
    }

    #[test]
    fn mode_stats_cases() {
        let c = ring().centers().unwrap();
        let s = mode_stats(&ring(), &c).unwrap();
        assert_eq!(s.coverage, 1.0);
        assert_eq!(s.within_mode_std, 0.0);
        assert_eq!(s.histogram, vec![1; 8]);

        let s = mode_stats(&ring(), &vec![c[3]; 100]).unwrap();
        assert_eq!(s.coverage, 0.125);

        let truth: Vec<Vec2> = sample_truth(&ring(), 10_000, &mut RngStream::new(6, 0))
            .unwrap()
            .iter()
            .map(|s| s.point)
            .collect();
        let s = mode_stats(&ring(), &truth).unwrap();
        assert_eq!(s.coverage, 1.0);
        assert!(
            (s.within_mode_std - 0.15).abs() < 0.015,
            "{}",
            s.within_mode_std
        );
        assert!(mode_stats(&ToyDistribution::two_moons(0.1), &truth).is_err());
    }

    #[test]
    fn is_analogue_cases() {
        let c = ring().centers().unwrap();
        let one = is_analogue(&ring(), &vec![c[0]; 50]).unwrap();
        assert!((one - 1.0).abs() < 1e-9);
        let all: Vec<Vec2> = c
            .iter()
            .flat_map(|p| std::iter::repeat_n(*p, 10))
            .collect();
        assert!((is_analogue(&ring(), &all).unwrap() - 8.0).abs() < 1e-3);
        let origin = is_analogue(&ring(), &[Vec2::ZERO; 10]).unwrap();
        assert!((origin - 1.0).abs() < 1e-9);
        assert!(is_analogue(&ToyDistribution::spiral(0.1), &c).is_err());
    }

    fn traj(dts: &[Vec2], fin: Vec2) -> Trajectory {
        use crate::diffusion::StepRecord;
        use crate::nn::ModelRole;
        Trajectory {
            records: dts
                .iter()
                .enumerate()
                .map(|(i, d)| StepRecord {
                    t: 10 - i,
                    x: Vec2::ZERO,
                    eps: Vec2::ZERO,
                    dt: *d,
                    role: ModelRole::Base,
                })
                .collect(),
            final_x: fin,
            evals: dts.len() as u32,
        }
    }

    #[test]
    fn dt_curve_normalizes_and_checks_lengths() {
        let f = Vec2::new(1.0, 0.0);
        let a = traj(&[Vec2::new(3.0, 0.0), Vec2::new(2.0, 0.0), f], f);
        let b = traj(&[Vec2::new(1.0, 4.0), Vec2::new(1.0, 1.0), f], f);
        let c = dt_curve(&[a.clone(), b.clone()], &[f, f]).unwrap();
        let fr: Vec<f64> = c.points.iter().map(|p| p.0).collect();
        assert_eq!(fr, vec![0.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(c.value_at(0), Some(1.0));
        assert!((c.value_at(1).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(c.value_at(2), Some(0.0));
        assert_eq!(c.first_reaching(0.5), Some(1.0 / 3.0));
        assert!(dt_curve(std::slice::from_ref(&a), &[f, f]).is_err());
        let short = traj(&[f], f);
        assert!(dt_curve(&[a, short], &[f, f]).is_err());
    }

    #[test]
    fn report_csv_shape() {
        let c = ring().centers().unwrap();
        let r = MetricsReport::compute(&ring(), &c, &c).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], MetricsReport::HEADER.join(","));
        assert_eq!(lines[1].split(',').count(), 6);
        let moons = MetricsReport::compute(&ToyDistribution::two_moons(0.1), &c, &c).unwrap();
        assert!(moons.is_analogue.is_none());
    }

    proptest! {
        #[test]
        fn frechet_symmetric(seed in 0u64..1000, dx in -3.0f64..3.0, s in 0.2f64..3.0) {
            let a = normals(seed, 200);
            let b: Vec<Vec2> = normals(seed + 1, 300).iter().map(|p| Vec2::new(s * p.x + dx, p.y + 0.3 * p.x)).collect();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-8);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn diversity_translation_and_scale(seed in 0u64..1000, dx in -5.0f64..5.0, k in 0.1f64..4.0) {
            let a = normals(seed, 100);
            let d = sample_diversity(&a).unwrap();
            let moved: Vec<Vec2> = a.iter().map(|p| *p + Vec2::new(dx, -dx)).collect();
            let scaled: Vec<Vec2> = a.iter().map(|p| k * *p).collect();
            prop_assert!((sample_diversity(&moved).unwrap() - d).abs() < 1e-9);
            prop_assert!((sample_diversity(&scaled).unwrap() - k * d).abs() < 1e-9);
        }

        #[test]
        fn is_analogue_bounded_and_order_free(seed in 0u64..1000, n in 2usize..60) {
            let pts: Vec<Vec2> = normals(seed, n).iter().map(|p| 3.0 * *p).collect();
            let v = is_analogue(&ring(), &pts).unwrap();
            prop_assert!((1.0..=8.0 + 1e-9).contains(&v));
            let mut rev = pts.clone();
            rev.reverse();
            prop_assert!((is_analogue(&ring(), &rev).unwrap() - v).abs() < 1e-9);
        }
    }
}

//! Size-biased trees with a marked spine, and the ball functional
//! `I = E*[∫_{B(r)} (1 + Σ_k Y_k(y − S_{w_k}))^{−1} dy]`.
//!
//! At level `k` the spine particle `w_k` has a size-biased number of children.
//! One of them, chosen uniformly, continues the spine; each of the others (the
//! brothers of `w_{k+1}`) roots an ordinary tree that is grown `k − 1`
//! generations. `Y_k(z)` counts those descendants `p` of brothers `u` with
//! `p + X_u + z ∈ B(r)`.

use crate::engine::{run_tree, Caps, GenerationBuffer};
use crate::error::{Error, Result};
use crate::laws::{OffspringLaw, StepLaw};
use crate::parallel::fold_replicates;
use crate::rng::{tags, StreamKey};
use crate::special::ball_volume;
use crate::stats::MeanAcc;
use rand::Rng;
use serde::Serialize;

/// Draw from `p*_k = k p_k`.
pub fn sample_size_biased_offspring<R: Rng + ?Sized>(off: &OffspringLaw, rng: &mut R) -> u64 {
    off.sample_size_biased(rng)
}

#[derive(Debug, Clone)]
pub struct Brother {
    pub displacement: Vec<f64>,
    /// Generation-`(k−1)` descendants, relative to the brother.
    pub descendants: GenerationBuffer,
}

#[derive(Debug, Clone)]
pub struct SpineLevel {
    /// Position `S_{w_k}`.
    pub spine_position: Vec<f64>,
    /// Number of children of `w_k`.
    pub children: u64,
    /// Index of `w_{k+1}` among them.
    pub marked: u64,
    pub brothers: Vec<Brother>,
}

#[derive(Debug, Clone)]
pub struct SpineRealization {
    pub levels: Vec<SpineLevel>,
    /// Some brother subtree hit the progeny cap.
    pub truncated: bool,
}

impl SpineRealization {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// Spine levels `1..=k_max` from an ancestor `w_0` at the origin.
pub fn grow_spine<R: Rng + ?Sized>(off: &OffspringLaw, step: &StepLaw, k_max: usize, caps: &Caps, rng: &mut R) -> Result<SpineRealization> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("spine depth K must be at least 1".into()));
    }
    let mut levels = Vec::with_capacity(k_max);
    let mut truncated = false;
    let mut spine = vec![0.0; step.dim()];
    for k in 1..=k_max {
        step.add_step(rng, &mut spine);
        let level = grow_level(off, step, k, &spine, caps, rng);
        truncated |= level.1;
        levels.push(level.0);
    }
    Ok(SpineRealization { levels, truncated })
}

fn grow_level<R: Rng + ?Sized>(off: &OffspringLaw, step: &StepLaw, k: usize, spine: &[f64], caps: &Caps, rng: &mut R) -> (SpineLevel, bool) {
    let children = off.sample_size_biased(rng);
    let marked = rng.random_range(0..children);
    let mut truncated = false;
    let brothers = (0..children - 1)
        .map(|_| {
            let mut displacement = vec![0.0; step.dim()];
            step.add_step(rng, &mut displacement);
            let t = run_tree(off, step, k as u64 - 1, caps, rng, false);
            truncated |= t.truncated;
            Brother { displacement, descendants: t.final_buffer }
        })
        .collect();
    (SpineLevel { spine_position: spine.to_vec(), children, marked, brothers }, truncated)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationFit {
    /// `c` in `q_k ≈ c k^{−dβ/2}`, least squares over levels `K/2..K`.
    pub c: f64,
    pub exponent: f64,
    /// Free log-log slope over the same levels (None if too few active levels).
    pub fitted_exponent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IFunctionalEstimate {
    pub r: f64,
    pub k: usize,
    pub i_hat: f64,
    pub se: f64,
    /// Upper bound on `I_K − I` (truncating can only increase the integrand).
    pub truncation_bound: f64,
    pub samples: u64,
    pub fit: TruncationFit,
    /// Fraction of realizations with some `Ŷ_k ≥ 1`, `k ≤ K`.
    pub active_fraction: f64,
    /// `Q*(Ŷ_k ≥ 1)` for `k = 1..=K` (`Ŷ` uses the ball of radius 2r).
    pub activation: Vec<f64>,
    pub truncated: u64,
}

impl IFunctionalEstimate {
    pub fn exp_neg_i(&self) -> f64 {
        (-self.i_hat).exp()
    }
}

#[derive(Clone)]
struct IAcc {
    per_k: Vec<MeanAcc>,
    active_levels: Vec<u64>,
    active_any: Vec<u64>,
    truncated: u64,
}

/// `Σ_{k>K} k^{−p}` for `p > 1`.
fn tail_sum(k: usize, p: f64) -> f64 {
    let stop = k.max(1) * 64;
    let explicit: f64 = (k + 1..stop).map(|j| (j as f64).powf(-p)).sum();
    // Euler–Maclaurin for Σ_{j ≥ stop}.
    let n = stop as f64;
    explicit + n.powf(1.0 - p) / (p - 1.0) + 0.5 * n.powf(-p) + p * n.powf(-p - 1.0) / 12.0
        - p * (p + 1.0) * (p + 2.0) * n.powf(-p - 3.0) / 720.0
}

/// Estimates for each depth in `ks` from shared realizations grown to `max(ks)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_i_levels(
    off: &OffspringLaw,
    step: &StepLaw,
    r: f64,
    ks: &[usize],
    samples: u64,
    y_samples: usize,
    seed: u64,
    workers: usize,
    caps: &Caps,
) -> Result<Vec<IFunctionalEstimate>> {
    let beta = off.tail_index().beta();
    let d = step.dim();
    let p = d as f64 * beta / 2.0;
    if beta * d as f64 <= 2.0 {
        return Err(Error::InvalidArgument(format!(
            "the spine functional needs beta·d > 2, got {beta}·{d}; the level series is not summable"
        )));
    }
    if !(r > 0.0) || samples == 0 || y_samples == 0 || ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("need r > 0, samples, y-samples and depths ≥ 1".into()));
    }
    let k_max = *ks.iter().max().unwrap();
    let vol = ball_volume(d, r);
    let key = StreamKey::new(seed, tags::SPINE);
    let two_r2 = 4.0 * r * r;
    let r2 = r * r;
    let acc = fold_replicates(
        workers,
        samples,
        || IAcc { per_k: vec![MeanAcc::default(); ks.len()], active_levels: vec![0; k_max], active_any: vec![0; ks.len()], truncated: 0 },
        |acc, rep| {
            let mut rng = key.stream(rep);
            // Centres c = S_{w_k} − X_u − p within 2r of the origin, tagged with their level.
            let mut centres: Vec<(usize, Vec<f64>)> = Vec::new();
            let mut spine = vec![0.0; d];
            let mut truncated = false;
            let mut first_active = usize::MAX;
            for k in 1..=k_max {
                step.add_step(&mut rng, &mut spine);
                let (level, t) = grow_level(off, step, k, &spine, caps, &mut rng);
                truncated |= t;
                let mut active = false;
                for b in &level.brothers {
                    for q in b.descendants.points() {
                        let c: Vec<f64> = (0..d).map(|i| spine[i] - b.displacement[i] - q[i]).collect();
                        if c.iter().map(|x| x * x).sum::<f64>() < two_r2 {
                            active = true;
                            centres.push((k, c));
                        }
                    }
                }
                if active {
                    acc.active_levels[k - 1] += 1;
                    first_active = first_active.min(k);
                }
            }
            acc.truncated += truncated as u64;
            let mut sums = vec![0.0; ks.len()];
            let mut y = vec![0.0; d];
            for _ in 0..y_samples {
                crate::engine::uniform_in_ball(&mut rng, d, r, &mut y);
                let mut counts = vec![0u32; ks.len()];
                for (k, c) in &centres {
                    let dist2: f64 = c.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist2 < r2 {
                        for (cnt, &kk) in counts.iter_mut().zip(ks) {
                            *cnt += (*k <= kk) as u32;
                        }
                    }
                }
                for (s, &cnt) in sums.iter_mut().zip(&counts) {
                    *s += 1.0 / (1.0 + cnt as f64);
                }
            }
            for (i, &kk) in ks.iter().enumerate() {
                acc.per_k[i].push(vol * sums[i] / y_samples as f64);
                acc.active_any[i] += (first_active <= kk) as u64;
            }
        },
        |a, b| {
            for (x, y) in a.per_k.iter_mut().zip(&b.per_k) {
                x.merge(y);
            }
            for (x, y) in a.active_levels.iter_mut().zip(&b.active_levels) {
                *x += y;
            }
            for (x, y) in a.active_any.iter_mut().zip(&b.active_any) {
                *x += y;
            }
            a.truncated += b.truncated;
        },
    );
    let activation: Vec<f64> = acc.active_levels.iter().map(|&a| a as f64 / samples as f64).collect();
    Ok(ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let fit = fit_activation(&activation[..k], p);
            IFunctionalEstimate {
                r,
                k,
                i_hat: acc.per_k[i].mean(),
                se: acc.per_k[i].se(),
                truncation_bound: vol * fit.c * tail_sum(k, p),
                samples,
                fit,
                active_fraction: acc.active_any[i] as f64 / samples as f64,
                activation: activation[..k].to_vec(),
                truncated: acc.truncated,
            }
        })
        .collect())
}

/// Fits `q_k ≈ c k^{−p}` on levels `⌈K/2⌉..=K`.
fn fit_activation(q: &[f64], p: f64) -> TruncationFit {
    let k = q.len();
    let lo = k.div_ceil(2).max(1);
    let (mut num, mut den) = (0.0, 0.0);
    let mut logs = Vec::new();
    for j in lo..=k {
        let w = (j as f64).powf(-p);
        num += q[j - 1] * w;
        den += w * w;
        if q[j - 1] > 0.0 {
            logs.push(((j as f64).ln(), q[j - 1].ln()));
        }
    }
    let fitted_exponent = (logs.len() >= 3).then(|| {
        let n = logs.len() as f64;
        let mx = logs.iter().map(|l| l.0).sum::<f64>() / n;
        let my = logs.iter().map(|l| l.1).sum::<f64>() / n;
        let sxy: f64 = logs.iter().map(|l| (l.0 - mx) * (l.1 - my)).sum();
        let sxx: f64 = logs.iter().map(|l| (l.0 - mx).powi(2)).sum();
        -sxy / sxx
    });
    TruncationFit { c: num / den, exponent: p, fitted_exponent }
}

pub fn estimate_i(
    off: &OffspringLaw,
    step: &StepLaw,
    r: f64,
    k: usize,
    samples: u64,
    y_samples: usize,
    seed: u64,
    workers: usize,
) -> Result<IFunctionalEstimate> {
    Ok(estimate_i_levels(off, step, r, &[k], samples, y_samples, seed, workers, &Caps::default())?.remove(0))
}

#[derive(Debug, Clone, Serialize)]
pub struct SpineRow {
    pub r: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "I_hat")]
    pub i_hat: f64,
    pub se: f64,
    pub trunc_bound: f64,
    #[serde(rename = "exp_neg_I")]
    pub exp_neg_i: f64,
}

impl From<&IFunctionalEstimate> for SpineRow {
    fn from(e: &IFunctionalEstimate) -> Self {
        Self { r: e.r, k: e.k, i_hat: e.i_hat, se: e.se, trunc_bound: e.truncation_bound, exp_neg_i: e.exp_neg_i() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laws(o: &str, s: &str) -> (OffspringLaw, StepLaw) {
        (OffspringLaw::parse(o).unwrap(), StepLaw::parse(s).unwrap())
    }

    #[test]
    fn binary_levels_have_one_brother() {
        let (off, step) = laws("binary", "gauss:d=3,eta2=1");
        let key = StreamKey::new(1, tags::SPINE);
        let s = grow_spine(&off, &step, 3, &Caps::default(), &mut key.stream(0)).unwrap();
        assert_eq!(s.depth(), 3);
        for (k, l) in s.levels.iter().enumerate() {
            assert_eq!(l.children, 2);
            assert_eq!(l.brothers.len(), 1);
            let sub = &l.brothers[0].descendants;
            assert!(sub.generation() <= k as u64);
            if !sub.is_empty() {
                assert_eq!(sub.generation(), k as u64);
            }
        }
        assert!(grow_spine(&off, &step, 0, &Caps::default(), &mut key.stream(0)).is_err());
    }

    #[test]
    fn spine_marginal_and_marking() {
        let (off, step) = laws("binary", "gausscov:d=2,c11=2,c12=0.5,c22=1");
        let key = StreamKey::new(2, tags::SPINE);
        let reps = 100_000;
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        let mut first = 0u64;
        for i in 0..reps {
            let s = grow_spine(&off, &step, 1, &Caps::default(), &mut key.stream(i)).unwrap();
            let p = &s.levels[0].spine_position;
            sxx += p[0] * p[0];
            sxy += p[0] * p[1];
            syy += p[1] * p[1];
            first += (s.levels[0].marked == 0) as u64;
        }
        let n = reps as f64;
        assert!((sxx / n - 2.0).abs() < 0.1 && (sxy / n - 0.5).abs() < 0.05 && (syy / n - 1.0).abs() < 0.05);
        let ph = first as f64 / n;
        assert!((ph - 0.5).abs() < 3.0 * (0.25 / n).sqrt(), "{ph}");
    }

    #[test]
    fn size_biased_reweighting_identity() {
        // E*[g(Z)/Z] = E[g(Z); Z > 0] for g(k) = k² ∧ 10 and geometric offspring.
        let off = OffspringLaw::parse("geometric").unwrap();
        let g = |k: u64| ((k * k) as f64).min(10.0);
        let key = StreamKey::new(3, tags::SPINE);
        let reps = 400_000;
        let (mut a, mut b) = (MeanAcc::default(), MeanAcc::default());
        let mut r1 = key.stream(0);
        let mut r2 = key.stream(1);
        for _ in 0..reps {
            let z = sample_size_biased_offspring(&off, &mut r1);
            assert!(z >= 1);
            a.push(g(z) / z as f64);
            let z = off.sample(&mut r2);
            b.push(if z > 0 { g(z) } else { 0.0 });
        }
        let se = (a.se().powi(2) + b.se().powi(2)).sqrt();
        assert!((a.mean() - b.mean()).abs() < 4.0 * se, "{} vs {}", a.mean(), b.mean());
    }

    #[test]
    fn rejects_low_dimension() {
        let (off, step) = laws("binary", "gauss:d=2,eta2=1");
        assert!(estimate_i(&off, &step, 1.0, 8, 10, 4, 1, 1).is_err());
        let (off, step) = laws("stable:beta=0.5", "gauss:d=3,eta2=1");
        assert!(estimate_i(&off, &step, 1.0, 8, 10, 4, 1, 1).is_err());
    }

    #[test]
    fn small_ball_limit_and_bounds() {
        let (off, step) = laws("binary", "gauss:d=3,eta2=1");
        let e = estimate_i(&off, &step, 0.02, 16, 2000, 16, 1, 1).unwrap();
        let v = ball_volume(3, 0.02);
        assert!(e.i_hat <= v * (1.0 + 1e-12) && e.i_hat / v > 0.999, "{}", e.i_hat / v);
        let e = estimate_i(&off, &step, 1.0, 16, 4000, 64, 1, 1).unwrap();
        assert!(e.i_hat > 3.0 * e.se && e.i_hat <= ball_volume(3, 1.0));
        assert!(e.truncation_bound.is_finite() && e.truncation_bound > 0.0);
        assert_eq!(e.activation.len(), 16);
    }

    #[test]
    fn nested_depths_are_monotone() {
        // More levels can only add points, so I decreases in K on shared realizations.
        let (off, step) = laws("binary", "gauss:d=3,eta2=1");
        let est = estimate_i_levels(&off, &step, 1.0, &[4, 8, 16], 3000, 32, 4, 1, &Caps::default()).unwrap();
        assert!(est.windows(2).all(|w| w[1].i_hat <= w[0].i_hat));
        assert!(est.windows(2).all(|w| w[1].active_fraction >= w[0].active_fraction));
    }

    #[test]
    fn tail_sum_matches_zeta() {
        // Σ_{k≥1} k^{−2} = π²/6.
        let total = 1.0 + tail_sum(1, 2.0);
        assert!((total - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-9);
    }
}

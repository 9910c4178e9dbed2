//! All-time maximal displacement `M = sup_u S_u` of a one-dimensional tree and
//! the generation-`m` maximum `M_m = max_{u ∈ Z_m} S_u`.

use crate::engine::{survival_recursion, ConditionedTrees};
use crate::error::{Error, Result};
use crate::laws::{OffspringLaw, StepLaw, TailIndex};
use crate::parallel::fold_replicates;
use crate::rng::{tags, StreamKey};
use crate::special::gamma;
use crate::stats::proportion;
use serde::Serialize;

/// Per-tree progeny limit; trees hitting it are reported as censored.
pub const PROGENY_CAP: u64 = 50_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailEstimate {
    pub x: f64,
    pub p_hat: f64,
    pub se: f64,
    pub replicates: u64,
    /// `Q_cap`: probability that a tree is still alive at the generation cap.
    pub bias_bound: f64,
    /// `x^{2/β}·p̂`.
    pub scaled_value: f64,
    pub target_constant: f64,
    /// Trees stopped by the progeny cap before reaching `x`.
    pub censored: u64,
}

/// `lim x^{2/β} P(M ≥ x)`: `6η²/σ²`, or `((β+2)η²/(βκΓ(1−β)))^{1/β}` for stable tails.
pub fn tail_constant(off: &OffspringLaw, eta2: f64) -> Result<f64> {
    match off.tail_index() {
        TailIndex::FiniteVariance => {
            let s2 = off.variance().expect("finite variance");
            Ok(6.0 * eta2 / s2)
        }
        TailIndex::Stable(beta) => {
            let kg = off.kappa()? * gamma(1.0 - beta);
            Ok(((beta + 2.0) * eta2 / (beta * kg)).powf(1.0 / beta))
        }
    }
}

fn scaling_power(off: &OffspringLaw) -> f64 {
    2.0 / off.tail_index().beta()
}

fn one_dim_eta2(step: &StepLaw) -> Result<f64> {
    if step.dim() != 1 {
        return Err(Error::InvalidArgument(format!("maximal displacement needs a 1-dimensional step law, got d={}", step.dim())));
    }
    Ok(step.covariance()[0])
}

/// Default generation cap `100·x_max²`.
pub fn default_gen_cap(x_max: f64) -> u64 {
    (100.0 * x_max * x_max).ceil().max(1.0) as u64
}

/// Replicates `min(10⁷, 200/p)` for the predicted tail `p` at `x`.
pub fn default_replicates(off: &OffspringLaw, step: &StepLaw, x: f64) -> Result<u64> {
    let c = tail_constant(off, one_dim_eta2(step)?)?;
    let p = (c / x.powf(scaling_power(off))).min(1.0);
    Ok(((200.0 / p).ceil() as u64).min(10_000_000))
}

#[derive(Clone)]
struct TailAcc {
    hits: Vec<u64>,
    censored: u64,
}

/// Tail of `M` on `x_grid` from `replicates` single-ancestor trees, each run
/// to extinction, to `gen_cap` generations, or until its maximum passes the
/// largest threshold.
pub fn estimate_m_tail(
    off: &OffspringLaw,
    step: &StepLaw,
    x_grid: &[f64],
    replicates: u64,
    gen_cap: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<TailEstimate>> {
    let eta2 = one_dim_eta2(step)?;
    if replicates == 0 || x_grid.is_empty() {
        return Err(Error::InvalidArgument("need replicates and at least one threshold".into()));
    }
    if x_grid.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidArgument("thresholds must be finite and non-negative".into()));
    }
    let x_max = x_grid.iter().cloned().fold(0.0, f64::max);
    let target = tail_constant(off, eta2)?;
    let power = scaling_power(off);
    let q_cap = survival_recursion(off, gen_cap);
    if x_max > 0.0 {
        let expected = (target / x_max.powf(power)).min(1.0);
        if q_cap > 0.01 * expected {
            let needed = required_cap(off, 0.01 * expected);
            return Err(Error::Sizing(format!(
                "generation cap {gen_cap} leaves Q_cap = {q_cap:.3e}, above 1% of the expected tail {expected:.3e} at x = {x_max}; {}",
                match needed {
                    Some(n) => format!("need a cap of at least {n}"),
                    None => "need a much larger cap".into(),
                }
            )));
        }
    }
    let key = StreamKey::new(seed, tags::MAXDISP);
    let acc = fold_replicates(
        workers,
        replicates,
        || TailAcc { hits: vec![0; x_grid.len()], censored: 0 },
        |acc, rep| {
            let mut rng = key.stream(rep);
            let (m, censored) = running_max(off, step, gen_cap, x_max, &mut rng);
            for (h, &x) in acc.hits.iter_mut().zip(x_grid) {
                *h += (m >= x) as u64;
            }
            acc.censored += (censored && m < x_max) as u64;
        },
        |a, b| {
            for (x, y) in a.hits.iter_mut().zip(&b.hits) {
                *x += y;
            }
            a.censored += b.censored;
        },
    );
    Ok(x_grid
        .iter()
        .zip(&acc.hits)
        .map(|(&x, &h)| {
            let (p, se) = proportion(h, replicates);
            TailEstimate {
                x,
                p_hat: p,
                se,
                replicates,
                bias_bound: q_cap,
                scaled_value: x.powf(power) * p,
                target_constant: target,
                censored: acc.censored,
            }
        })
        .collect())
}

/// Smallest N with `Q_N ≤ target`, searched up to 10⁸ generations.
fn required_cap(off: &OffspringLaw, target: f64) -> Option<u64> {
    let mut q = 1.0f64;
    for k in 0..100_000_000u64 {
        if q <= target {
            return Some(k);
        }
        q *= 1.0 - off.h(q);
    }
    None
}

/// Running maximum of one tree; stops early once it reaches `stop_at`.
/// The flag reports a progeny-cap stop.
fn running_max<R: rand::Rng + ?Sized>(off: &OffspringLaw, step: &StepLaw, gen_cap: u64, stop_at: f64, rng: &mut R) -> (f64, bool) {
    let mut cur = vec![0.0f64];
    let mut next = Vec::new();
    let mut best = 0.0f64;
    let mut total = 1u64;
    let mut gen = 0;
    while !cur.is_empty() && gen < gen_cap && best < stop_at {
        next.clear();
        for &p in &cur {
            let k = off.sample(rng);
            total += k;
            if total > PROGENY_CAP {
                return (best, true);
            }
            for _ in 0..k {
                let mut x = [p];
                step.add_step(rng, &mut x);
                best = best.max(x[0]);
                next.push(x[0]);
            }
        }
        std::mem::swap(&mut cur, &mut next);
        gen += 1;
    }
    (best, false)
}

/// `(1 + σ y/(√6 η))^{−2}`.
pub fn phi_profile(y: f64, sigma2: f64, eta2: f64) -> Result<f64> {
    if !(y >= 0.0 && sigma2 > 0.0 && eta2 > 0.0) {
        return Err(Error::InvalidArgument(format!("phi_profile needs y ≥ 0 and positive variances (got {y}, {sigma2}, {eta2})")));
    }
    Ok((1.0 + (sigma2 / (6.0 * eta2)).sqrt() * y).powi(-2))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MnEstimate {
    pub n: u64,
    pub r: f64,
    pub x: f64,
    /// `n^{1/β}·P(M_{⌊nr⌋} > x√n)`.
    pub statistic: f64,
    pub se: f64,
    pub replicates: u64,
}

/// `n^{1/β} P(M_{⌊nr⌋} > x√n)` as `n^{1/β} Q_m P(M_m > x√n | Z_m ≠ ∅)`, the
/// conditional probability estimated from trees conditioned on survival.
pub fn estimate_mn_scaled(
    off: &OffspringLaw,
    step: &StepLaw,
    n: u64,
    r: f64,
    x: f64,
    replicates: u64,
    seed: u64,
    workers: usize,
) -> Result<MnEstimate> {
    one_dim_eta2(step)?;
    if n == 0 || !(r > 0.0) || !(x > 0.0) || replicates == 0 {
        return Err(Error::InvalidArgument(format!("need n ≥ 1, r > 0, x > 0, replicates > 0 (got {n}, {r}, {x}, {replicates})")));
    }
    let m = (n as f64 * r).floor() as u64;
    let beta = off.tail_index().beta();
    let scale = (n as f64).powf(1.0 / beta);
    let level = x * (n as f64).sqrt();
    let trees = ConditionedTrees::new(off, step, m);
    let qm = trees.survival();
    let key = StreamKey::new(seed, tags::MN);
    let hits = fold_replicates(
        workers,
        replicates,
        || 0u64,
        |acc, rep| {
            let mut rng = key.stream(rep);
            let mut best = f64::NEG_INFINITY;
            trees.visit(&[0.0], &mut rng, |p| best = best.max(p[0]));
            *acc += (best > level) as u64;
        },
        |a, b| *a += b,
    );
    let (p, se) = proportion(hits, replicates);
    Ok(MnEstimate { n, r, x, statistic: scale * qm * p, se: scale * qm * se, replicates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laws(o: &str, s: &str) -> (OffspringLaw, StepLaw) {
        (OffspringLaw::parse(o).unwrap(), StepLaw::parse(s).unwrap())
    }

    #[test]
    fn threshold_zero_and_monotone() {
        let (off, step) = laws("binary", "gauss:d=1,eta2=1");
        let est = estimate_m_tail(&off, &step, &[0.0, 1.0, 2.0, 3.0], 20_000, 5000, 1, 1).unwrap();
        assert_eq!(est[0].p_hat, 1.0);
        assert!(est.windows(2).all(|w| w[1].p_hat <= w[0].p_hat));
        assert!((est[0].bias_bound - survival_recursion(&off, 5000)).abs() < 1e-15);
    }

    #[test]
    fn one_generation_oracle() {
        // Cap 1, binary: two children with probability ½, so P(M ≥ x) = ½(1 − Φ(x)²) for x > 0.
        let (off, step) = laws("binary", "gauss:d=1,eta2=1");
        let x = 0.7;
        let phi = 0.5 * (1.0 + statrs::function::erf::erf(x / 2f64.sqrt()));
        let oracle = 0.5 * (1.0 - phi * phi);
        let est = estimate_m_tail_uncapped(&off, &step, x, 200_000, 1);
        assert!((est.p_hat - oracle).abs() < 4.0 * est.se, "{} vs {oracle}", est.p_hat);
    }

    fn estimate_m_tail_uncapped(off: &OffspringLaw, step: &StepLaw, x: f64, reps: u64, cap: u64) -> TailEstimate {
        let key = StreamKey::new(5, tags::MAXDISP);
        let hits: u64 = (0..reps).map(|i| (running_max(off, step, cap, x, &mut key.stream(i)).0 >= x) as u64).sum();
        let (p, se) = proportion(hits, reps);
        TailEstimate { x, p_hat: p, se, replicates: reps, bias_bound: 0.0, scaled_value: 0.0, target_constant: 0.0, censored: 0 }
    }

    #[test]
    fn sizing_error_names_cap() {
        let (off, step) = laws("binary", "gauss:d=1,eta2=1");
        let err = estimate_m_tail(&off, &step, &[10.0], 10, 100, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Sizing(_)) && msg.contains("at least"), "{msg}");
    }

    #[test]
    fn rejects_multidimensional_steps() {
        let (off, step) = laws("binary", "gauss:d=2,eta2=1");
        assert!(estimate_m_tail(&off, &step, &[1.0], 10, 100, 1, 1).is_err());
        assert!(estimate_mn_scaled(&off, &step, 10, 1.0, 1.0, 10, 1, 1).is_err());
    }

    #[test]
    fn constants() {
        let (b, s) = laws("binary", "gauss:d=1,eta2=1");
        assert!((tail_constant(&b, 1.0).unwrap() - 6.0).abs() < 1e-12);
        let st = OffspringLaw::parse("stable:beta=0.5").unwrap();
        assert!((tail_constant(&st, 1.0).unwrap() - 225.0).abs() < 1e-6);
        assert_eq!(default_gen_cap(10.0), 10_000);
        assert!(default_replicates(&b, &s, 10.0).unwrap() >= 3333);
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi_profile(0.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((phi_profile(6f64.sqrt(), 1.0, 1.0).unwrap() - 0.25).abs() < 1e-15);
        let ys: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let vals: Vec<f64> = ys.iter().map(|&y| phi_profile(y, 1.0, 2.0).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert!(phi_profile(1e8, 1.0, 1.0).unwrap() < 1e-15);
        assert!(phi_profile(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn mn_statistic_against_plain_trees() {
        // Conditioned estimator vs unconditioned counting.
        let (off, step) = laws("binary", "gauss:d=1,eta2=1");
        let (n, x) = (20u64, 1.0);
        let est = estimate_mn_scaled(&off, &step, n, 1.0, x, 50_000, 3, 1).unwrap();
        let key = StreamKey::new(11, tags::TREE);
        let caps = crate::engine::Caps::default();
        let reps = 400_000u64;
        let mut hits = 0;
        for i in 0..reps {
            let t = crate::engine::run_tree(&off, &step, n, &caps, &mut key.stream(i), false);
            if t.final_buffer.positions().iter().any(|&p| p > x * (n as f64).sqrt()) {
                hits += 1;
            }
        }
        let (p, se) = proportion(hits, reps);
        let (a, sa) = (n as f64 * p, n as f64 * se);
        let tol = 4.0 * (sa * sa + est.se * est.se).sqrt();
        assert!((a - est.statistic).abs() < tol, "{a} vs {}", est.statistic);
        let far = estimate_mn_scaled(&off, &step, 100, 1.0, 20.0, 2000, 3, 1).unwrap();
        assert!(far.statistic < 1e-6);
    }

    /// `P(max over the first `gens` generations ≥ x)` from the recursion
    /// `u_{k+1}(x) = 1 − f(1 − E u_k(x − X))`, binary offspring, N(0,1) steps, on a grid.
    fn fixed_point_oracle(x: f64, gens: usize) -> f64 {
        let (h, l) = (0.02f64, 40.0f64);
        let m = (l / h) as usize;
        let half = (8.0 / h) as isize;
        let cdf = |t: f64| 0.5 * (1.0 + statrs::function::erf::erf(t / 2f64.sqrt()));
        let w: Vec<f64> = (-half..=half).map(|j| cdf((j as f64 + 0.5) * h) - cdf((j as f64 - 0.5) * h)).collect();
        let mut u = vec![0.0f64; m + 1];
        u[0] = 1.0;
        for _ in 0..gens {
            let mut nu = vec![1.0; m + 1];
            for (i, slot) in nu.iter_mut().enumerate().skip(1) {
                let mut e = 0.0;
                for (jj, wj) in w.iter().enumerate() {
                    let y = i as isize - (jj as isize - half);
                    e += wj * if y <= 0 { 1.0 } else if y as usize > m { 0.0 } else { u[y as usize] };
                }
                let s = 1.0 - e;
                *slot = 1.0 - 0.5 * (1.0 + s * s);
            }
            u = nu;
        }
        // Nodes sit at the left edge of their cells; average the two neighbours.
        let i = (x / h).round() as usize;
        0.5 * (u[i] + u[i + 1])
    }

    #[test]
    fn tail_matches_fixed_point_recursion() {
        let (off, step) = laws("binary", "gauss:d=1,eta2=1");
        let gens = 150;
        let x = 4.0;
        let oracle = fixed_point_oracle(x, gens);
        let key = StreamKey::new(21, tags::MAXDISP);
        let reps = 200_000u64;
        let hits: u64 = (0..reps).map(|i| (running_max(&off, &step, gens as u64, x, &mut key.stream(i)).0 >= x) as u64).sum();
        let (p, se) = proportion(hits, reps);
        assert!((p - oracle).abs() < 4.0 * se + 0.01 * oracle, "{p} ± {se} vs {oracle}");
    }
}

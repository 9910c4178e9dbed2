//! Critical offspring laws.
//!
//! Every family has mean one. The stable family uses
//! `f(s) = s + c (1 − s)^{1+β}` with `c = 1/(1+β)`; its pmf, its tail
//! `P(Z ≥ n)` and the size-biased tail `Σ_{k≥n} k p_k` are all available in
//! closed form, which is what makes exact inversion in the far tail possible.

use crate::error::{Error, Result};
use crate::special::{gamma, ln_gamma_ratio, Dd};
use rand::Rng;
use rand_distr::{Distribution, Geometric, Poisson};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Prefix length for stable laws is chosen so that the stored tail mass is below this.
const STABLE_PREFIX_TAIL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OffspringSpec {
    Binary,
    Geometric,
    PoissonUnit,
    Stable { beta: f64 },
    /// Probabilities `p_0, p_1, ...` (index = number of children).
    Table(Vec<f64>),
}

impl fmt::Display for OffspringSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OffspringSpec::Binary => write!(f, "binary"),
            OffspringSpec::Geometric => write!(f, "geometric"),
            OffspringSpec::PoissonUnit => write!(f, "poisson1"),
            OffspringSpec::Stable { beta } => write!(f, "stable:beta={beta}"),
            OffspringSpec::Table(p) => {
                write!(f, "table:")?;
                let mut first = true;
                for (k, pk) in p.iter().enumerate() {
                    if *pk == 0.0 {
                        continue;
                    }
                    if !first {
                        write!(f, ",")?;
                    }
                    first = false;
                    write!(f, "p{k}={pk}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for OffspringSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = super::split_spec(s)?;
        match name {
            "binary" => Ok(OffspringSpec::Binary),
            "geometric" => Ok(OffspringSpec::Geometric),
            "poisson1" | "poisson" => Ok(OffspringSpec::PoissonUnit),
            "stable" => {
                let beta = params
                    .iter()
                    .find(|(k, _)| *k == "beta")
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::Parse(format!("stable law needs beta=..: {s}")))?;
                Ok(OffspringSpec::Stable { beta })
            }
            "table" => {
                let mut probs = Vec::new();
                for (k, v) in &params {
                    let idx: usize = k
                        .strip_prefix('p')
                        .and_then(|i| i.parse().ok())
                        .ok_or_else(|| Error::Parse(format!("bad table key {k:?} in {s}")))?;
                    if probs.len() <= idx {
                        probs.resize(idx + 1, 0.0);
                    }
                    probs[idx] = *v;
                }
                Ok(OffspringSpec::Table(probs))
            }
            other => Err(Error::Parse(format!("unknown offspring family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TailIndex {
    FiniteVariance,
    Stable(f64),
}

impl TailIndex {
    /// β of the small-s behaviour `H(s) ~ const · s^β` (1 for finite variance).
    pub fn beta(&self) -> f64 {
        match self {
            TailIndex::FiniteVariance => 1.0,
            TailIndex::Stable(b) => *b,
        }
    }
}

/// Survival-function table with an optional closed-form tail beyond it.
#[derive(Debug, Clone)]
struct TailSampler {
    /// `survival[n] = P(Z ≥ n)` for `n = 0..=prefix_end`; decreasing.
    survival: Vec<f64>,
    tail: TailForm,
}

#[derive(Debug, Clone, Copy)]
enum TailForm {
    /// Support ends inside the table.
    None,
    /// `ln P(Z ≥ n) = ln_scale + ln Γ(n + x_offset + a) − ln Γ(n + x_offset) − ln Γ(1−β)`.
    Gamma { ln_scale: f64, x_offset: f64, a: f64, ln_gamma_1mb: f64 },
}

impl TailSampler {
    fn ln_survival(&self, n: u64) -> f64 {
        if (n as usize) < self.survival.len() {
            return self.survival[n as usize].ln();
        }
        match self.tail {
            TailForm::None => f64::NEG_INFINITY,
            TailForm::Gamma { ln_scale, x_offset, a, ln_gamma_1mb } => {
                ln_scale + ln_gamma_ratio(n as f64 + x_offset, a) - ln_gamma_1mb
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.invert(1.0 - rng.random::<f64>())
    }

    /// `max{n : P(Z ≥ n) ≥ u}` for u in (0, 1].
    fn invert(&self, u: f64) -> u64 {
        let last = self.survival.len() - 1;
        if u > self.survival[last] || matches!(self.tail, TailForm::None) {
            // Largest index with survival >= u (survival[0] = 1 >= u).
            let idx = self.survival.partition_point(|&g| g >= u);
            return (idx - 1) as u64;
        }
        let ln_u = u.ln();
        // Bracket [lo, hi) with ln_survival(lo) >= ln_u > ln_survival(hi).
        let mut lo = last as u64;
        let mut hi = lo.max(1) * 2;
        while self.ln_survival(hi) >= ln_u {
            lo = hi;
            hi = hi.saturating_mul(2);
            if hi == u64::MAX {
                return lo;
            }
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.ln_survival(mid) >= ln_u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

#[derive(Debug, Clone)]
pub struct OffspringLaw {
    spec: OffspringSpec,
    /// Stored probabilities `p_0..p_K`.
    pmf: Vec<f64>,
    variance: Option<f64>,
    tail_index: TailIndex,
    kappa: Option<f64>,
    sampler: Option<TailSampler>,
    size_biased: Option<TailSampler>,
}

impl OffspringLaw {
    pub fn new(spec: OffspringSpec) -> Result<Self> {
        match &spec {
            OffspringSpec::Binary => Ok(Self::finite(spec, vec![0.5, 0.0, 0.5], Some(1.0))),
            OffspringSpec::Geometric => {
                let pmf: Vec<f64> = (0..60).map(|k| 0.5f64.powi(k + 1)).collect();
                Ok(Self::finite(spec, pmf, Some(2.0)))
            }
            OffspringSpec::PoissonUnit => {
                let mut pmf = vec![(-1.0f64).exp()];
                for k in 1..30 {
                    let prev = pmf[k - 1];
                    pmf.push(prev / k as f64);
                }
                Ok(Self::finite(spec, pmf, Some(1.0)))
            }
            OffspringSpec::Stable { beta } => Self::stable(*beta),
            OffspringSpec::Table(p) => Self::table(p.clone()),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::new(s.parse()?)
    }

    fn finite(spec: OffspringSpec, pmf: Vec<f64>, variance: Option<f64>) -> Self {
        Self { spec, pmf, variance, tail_index: TailIndex::FiniteVariance, kappa: None, sampler: None, size_biased: None }
    }

    fn table(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidLaw("negative or non-finite probability in table".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidLaw(format!("table probabilities sum to {total}, not 1")));
        }
        let mean: f64 = p.iter().enumerate().map(|(k, x)| k as f64 * x).sum();
        if (mean - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidLaw(format!("table mean is {mean}; only critical (mean 1) laws are supported")));
        }
        if p.get(1).copied().unwrap_or(0.0) >= 1.0 {
            return Err(Error::InvalidLaw("degenerate law p_1 = 1".into()));
        }
        let second: f64 = p.iter().enumerate().map(|(k, x)| (k * k) as f64 * x).sum();
        let survival = survival_table(&p);
        let biased: Vec<f64> = p.iter().enumerate().map(|(k, x)| k as f64 * x).collect();
        let mut law = Self::finite(OffspringSpec::Table(p.clone()), p, Some(second - 1.0));
        law.sampler = Some(TailSampler { survival, tail: TailForm::None });
        law.size_biased = Some(TailSampler { survival: survival_table(&biased), tail: TailForm::None });
        Ok(law)
    }

    fn stable(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidLaw(format!("stable law needs beta in (0,1), got {beta}")));
        }
        let alpha = 1.0 + beta;
        let c = 1.0 / alpha;
        // p_0 = c, p_1 = 0, p_2 = c·α(α−1)/2, p_{k+1} = p_k (k − α)/(k + 1).
        let mut pmf = vec![c, 0.0, c * alpha * beta / 2.0];
        // Survival P(Z ≥ n) = c·|C(β, n−1)| for n ≥ 2.
        let mut survival = vec![1.0, 1.0 - c, c * beta];
        loop {
            let k = pmf.len() - 1;
            let next = pmf[k] * (k as f64 - alpha) / (k as f64 + 1.0);
            pmf.push(next);
            let n = survival.len();
            // |C(β, n−1)| = |C(β, n−2)| (n−2−β)/(n−1)
            let g = survival[n - 1] * (n as f64 - 2.0 - beta) / (n as f64 - 1.0);
            survival.push(g);
            if g < STABLE_PREFIX_TAIL {
                break;
            }
        }
        let ln_gamma_1mb = gamma(1.0 - beta).ln();
        let sampler = TailSampler {
            survival,
            tail: TailForm::Gamma { ln_scale: (c * beta).ln(), x_offset: 0.0, a: -1.0 - beta, ln_gamma_1mb },
        };
        // Size-biased survival Σ_{k≥n} k p_k = |C(β−1, n−2)| for n ≥ 2 (= 1 for n ≤ 2).
        // Its tail decays only like n^{−β}, so the table stops where the pmf table does.
        let mut sb = vec![1.0, 1.0, 1.0];
        while sb.len() < pmf.len() {
            let n = sb.len();
            // |C(β−1, m)| = |C(β−1, m−1)| (m − β)/m with m = n − 2
            let m = (n - 2) as f64;
            sb.push(sb[n - 1] * (m - beta) / m);
        }
        let size_biased = TailSampler {
            survival: sb,
            tail: TailForm::Gamma { ln_scale: 0.0, x_offset: -1.0, a: -beta, ln_gamma_1mb },
        };
        let kappa = beta / (alpha * gamma(1.0 - beta));
        Ok(Self {
            spec: OffspringSpec::Stable { beta },
            pmf,
            variance: None,
            tail_index: TailIndex::Stable(beta),
            kappa: Some(kappa),
            sampler: Some(sampler),
            size_biased: Some(size_biased),
        })
    }

    pub fn spec(&self) -> &OffspringSpec {
        &self.spec
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// `p_k`, zero past the stored prefix for finite families.
    pub fn prob(&self, k: usize) -> f64 {
        match self.spec {
            OffspringSpec::Geometric => 0.5f64.powi(k as i32 + 1),
            _ => self.pmf.get(k).copied().unwrap_or(0.0),
        }
    }

    /// Offspring variance σ², `None` when infinite.
    pub fn variance(&self) -> Option<f64> {
        self.variance
    }

    pub fn tail_index(&self) -> TailIndex {
        self.tail_index
    }

    pub fn mean(&self) -> f64 {
        1.0
    }

    /// `P(Z ≥ n)`. Exact for every family.
    pub fn tail_probability(&self, n: u64) -> f64 {
        match &self.spec {
            OffspringSpec::Binary => [1.0, 0.5, 0.5].get(n as usize).copied().unwrap_or(0.0),
            OffspringSpec::Geometric => 0.5f64.powi(n as i32),
            OffspringSpec::PoissonUnit => {
                if n == 0 {
                    1.0
                } else {
                    1.0 - self.pmf.iter().take(n as usize).sum::<f64>()
                }
            }
            _ => self.sampler.as_ref().unwrap().ln_survival(n).exp(),
        }
    }

    /// Sum of the stored prefix plus the closed-form tail beyond it.
    pub fn total_mass(&self) -> f64 {
        let prefix: f64 = self.pmf.iter().sum();
        let rest = match &self.spec {
            OffspringSpec::Stable { .. } => self.tail_probability(self.pmf.len() as u64),
            OffspringSpec::Geometric => 0.5f64.powi(self.pmf.len() as i32),
            OffspringSpec::PoissonUnit => {
                // Σ_{k≥K} e^{-1}/k! bounded by twice the first term.
                let k = self.pmf.len();
                self.pmf[k - 1] / k as f64
            }
            _ => 0.0,
        };
        prefix + rest
    }

    /// Generating function `f(s) = E[s^Z]`.
    pub fn pgf(&self, s: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidArgument(format!("pgf argument {s} outside [0,1]")));
        }
        Ok(self.pgf_unchecked(s))
    }

    pub(crate) fn pgf_unchecked(&self, s: f64) -> f64 {
        match &self.spec {
            OffspringSpec::Binary => 0.5 + 0.5 * s * s,
            OffspringSpec::Geometric => 1.0 / (2.0 - s),
            OffspringSpec::PoissonUnit => (s - 1.0).exp(),
            OffspringSpec::Stable { beta } => s + (1.0 - s).powf(1.0 + beta) / (1.0 + beta),
            OffspringSpec::Table(p) => p.iter().rev().fold(0.0, |acc, &pk| acc * s + pk),
        }
    }

    /// `H(s) = [s − 1 + f(1−s)]/s`, with `H(0) = 0`, evaluated by the family's
    /// cancellation-free closed form.
    pub fn h(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match &self.spec {
            OffspringSpec::Binary => s / 2.0,
            OffspringSpec::Geometric => s / (1.0 + s),
            OffspringSpec::PoissonUnit => {
                if s < 0.1 {
                    // (s − 1 + e^{−s})/s = Σ_{j≥2} (−s)^j / (j! s)
                    let mut term = s / 2.0;
                    let mut sum = term;
                    for j in 3..30 {
                        term *= -s / j as f64;
                        sum += term;
                    }
                    sum
                } else {
                    (s + (-s).exp_m1()) / s
                }
            }
            OffspringSpec::Stable { beta } => s.powf(*beta) / (1.0 + beta),
            OffspringSpec::Table(_) => self.h_generic(s),
        }
    }

    /// `H` straight from the definition with the pgf evaluated in double-double
    /// arithmetic. Independent of the closed forms used by [`Self::h`].
    pub fn h_generic(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let one = Dd::new(1.0);
        let sd = Dd::new(s);
        let t = one.sub(sd);
        let f = match &self.spec {
            OffspringSpec::Binary => Dd::new(0.5).add(Dd::new(0.5).mul(t).mul(t)),
            OffspringSpec::Geometric => one.div(Dd::new(2.0).sub(t)),
            OffspringSpec::PoissonUnit => t.sub(one).exp_small(),
            OffspringSpec::Stable { beta } => {
                let x = one.sub(t).to_f64();
                t.add(Dd::new(x.powf(1.0 + beta) / (1.0 + beta)))
            }
            OffspringSpec::Table(p) => p.iter().rev().fold(Dd::new(0.0), |acc, &pk| acc.mul(t).add(Dd::new(pk))),
        };
        sd.sub(one).add(f).div(sd).to_f64()
    }

    /// κ(β) = lim n^{1+β} P(Z ≥ n) for stable laws.
    pub fn kappa(&self) -> Result<f64> {
        self.kappa
            .ok_or_else(|| Error::InvalidLaw(format!("{} has finite variance; kappa(beta) is undefined", self.spec)))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.spec {
            OffspringSpec::Binary => {
                if rng.random::<bool>() {
                    2
                } else {
                    0
                }
            }
            OffspringSpec::Geometric => Geometric::new(0.5).unwrap().sample(rng),
            OffspringSpec::PoissonUnit => Poisson::new(1.0).unwrap().sample(rng) as u64,
            _ => self.sampler.as_ref().unwrap().sample(rng),
        }
    }

    /// Draw from the size-biased law `p*_k = k p_k` (never zero).
    pub fn sample_size_biased<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.spec {
            OffspringSpec::Binary => 2,
            OffspringSpec::Geometric => {
                let g = Geometric::new(0.5).unwrap();
                1 + g.sample(rng) + g.sample(rng)
            }
            OffspringSpec::PoissonUnit => 1 + Poisson::new(1.0).unwrap().sample(rng) as u64,
            _ => self.size_biased.as_ref().unwrap().sample(rng),
        }
    }
}

fn survival_table(p: &[f64]) -> Vec<f64> {
    let mut survival = vec![0.0; p.len() + 1];
    let mut acc = 0.0;
    for k in (0..p.len()).rev() {
        acc += p[k];
        survival[k] = acc;
    }
    survival[0] = 1.0;
    // trailing zero entry keeps partition_point in range
    survival[p.len()] = 0.0;
    survival
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tags, StreamKey};

    fn law(s: &str) -> OffspringLaw {
        OffspringLaw::parse(s).unwrap()
    }

    #[test]
    fn binary_and_geometric_definitions() {
        let b = law("binary");
        assert_eq!(b.pmf(), &[0.5, 0.0, 0.5]);
        assert_eq!(b.variance(), Some(1.0));
        assert_eq!(b.pgf(0.0).unwrap(), 0.5);
        let g = law("geometric");
        assert_eq!(g.prob(3), 1.0 / 16.0);
        assert_eq!(g.variance(), Some(2.0));
        for &s in &[0.0, 0.3, 0.9, 1.0] {
            assert!((g.pgf(s).unwrap() - 1.0 / (2.0 - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn stable_half_leading_coefficients() {
        // Oracle: binomial series of (2/3)(1 − s)^{3/2} evaluated independently.
        let st = law("stable:beta=0.5");
        let oracle = |k: usize| {
            let mut coef = 1.0f64;
            for j in 0..k {
                coef *= (1.5 - j as f64) / (j as f64 + 1.0);
            }
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            (2.0 / 3.0) * sign * coef + if k == 1 { 1.0 } else { 0.0 }
        };
        assert!((st.prob(0) - 2.0 / 3.0).abs() < 1e-15);
        assert!(st.prob(1).abs() < 1e-15);
        assert!((st.prob(2) - 0.25).abs() < 1e-15);
        for k in 0..40 {
            assert!((st.prob(k) - oracle(k)).abs() < 1e-14, "k={k}");
        }
    }

    #[test]
    fn stable_mass_and_mean() {
        for beta in [0.2, 0.5, 0.8] {
            let st = OffspringLaw::new(OffspringSpec::Stable { beta }).unwrap();
            assert!((st.total_mass() - 1.0).abs() < 1e-12, "beta={beta}");
            // Mean = prefix Σ k p_k + size-biased tail Σ_{k>K} k p_k.
            let k_end = st.pmf().len() as u64;
            let prefix: f64 = st.pmf().iter().enumerate().map(|(k, p)| k as f64 * p).sum();
            let tail = st.size_biased.as_ref().unwrap().ln_survival(k_end).exp();
            assert!((prefix + tail - 1.0).abs() < 1e-10, "beta={beta}");
            assert!(st.pmf().iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn stable_tail_closed_form_agrees_with_prefix() {
        let st = law("stable:beta=0.5");
        let sampler = st.sampler.as_ref().unwrap();
        let k = sampler.survival.len() - 1;
        // Closed-form evaluation at an index inside the table.
        for n in [2u64, 10, 100, k as u64] {
            let direct = sampler.survival[n as usize];
            let TailForm::Gamma { ln_scale, x_offset, a, ln_gamma_1mb } = sampler.tail else { panic!() };
            let closed = (ln_scale + ln_gamma_ratio(n as f64 + x_offset, a) - ln_gamma_1mb).exp();
            assert!((direct - closed).abs() < 1e-12 * direct.max(1e-300) + 1e-16, "n={n}");
        }
    }

    #[test]
    fn rejects_bad_laws() {
        assert!(OffspringLaw::parse("table:p0=0.3,p2=0.7").is_err());
        assert!(OffspringLaw::parse("table:p0=0.6,p1=-0.2,p2=0.6").is_err());
        assert!(OffspringLaw::parse("stable:beta=1.0").is_err());
        assert!(OffspringLaw::parse("stable:beta=0").is_err());
        assert!(OffspringLaw::parse("table:p1=1").is_err());
        assert!(law("binary").pgf(1.5).is_err());
        assert!(law("binary").kappa().is_err());
    }

    #[test]
    fn h_closed_forms() {
        let b = law("binary");
        let g = law("geometric");
        let st = law("stable:beta=0.5");
        for i in 1..=100 {
            let s = i as f64 / 100.0;
            assert!((b.h(s) - s / 2.0).abs() < 1e-15);
            assert!((g.h(s) - s / (1.0 + s)).abs() < 1e-15);
            assert!((st.h(s) - s.sqrt() / 1.5).abs() < 1e-15);
        }
        assert_eq!(b.h(0.0), 0.0);
    }

    #[test]
    fn kappa_half_matches_numerical_limit() {
        // Oracle: H(r)/r^β as r ↓ 0 from the double-double definition, then κ = β·lim/Γ(1−β).
        let st = law("stable:beta=0.5");
        let r: f64 = 1e-10;
        let lim = st.h_generic(r) / r.sqrt();
        let kappa_numeric = 0.5 * lim / gamma(0.5);
        let kappa = st.kappa().unwrap();
        assert!((kappa - 1.0 / (3.0 * std::f64::consts::PI.sqrt())).abs() < 1e-14);
        assert!((kappa - kappa_numeric).abs() < 1e-9);
    }

    #[test]
    fn samplers_have_right_support() {
        let key = StreamKey::new(11, tags::LAWS);
        let mut rng = key.stream(0);
        let b = law("binary");
        for _ in 0..1000 {
            let k = b.sample(&mut rng);
            assert!(k == 0 || k == 2);
            assert_eq!(b.sample_size_biased(&mut rng), 2);
        }
        let st = law("stable:beta=0.5");
        for _ in 0..1000 {
            assert!(st.sample_size_biased(&mut rng) >= 2);
            assert_ne!(st.sample(&mut rng), 1);
        }
    }

    #[test]
    fn h_two_routes_agree() {
        let laws = ["binary", "geometric", "poisson1", "stable:beta=0.5", "stable:beta=0.3", "table:p0=0.3,p1=0.45,p2=0.2,p3=0.05"];
        for name in laws {
            let l = law(name);
            for i in 1..=1000 {
                let s = i as f64 / 1000.0;
                let (a, b) = (l.h(s), l.h_generic(s));
                assert!((a - b).abs() < 1e-14, "{name} s={s}: {a} vs {b}");
                assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn h_small_argument_limits() {
        for name in ["binary", "geometric", "poisson1", "table:p0=0.3,p1=0.45,p2=0.2,p3=0.05"] {
            let l = law(name);
            let s = 1e-4;
            let half_var = l.variance().unwrap() / 2.0;
            assert!((l.h_generic(s) / s - half_var).abs() < 1e-3, "{name}");
        }
        for beta in [0.3, 0.5, 0.8] {
            let l = OffspringLaw::new(OffspringSpec::Stable { beta }).unwrap();
            let s: f64 = 1e-6;
            assert!((l.h_generic(s) / s.powf(beta) - 1.0 / (1.0 + beta)).abs() < 1e-4);
            let k = l.kappa().unwrap();
            assert!((k * gamma(1.0 - beta) / beta - 1.0 / (1.0 + beta)).abs() < 1e-12);
        }
    }

    #[test]
    fn pgf_monotone_convex() {
        for name in ["binary", "geometric", "poisson1", "stable:beta=0.5", "table:p0=0.3,p1=0.45,p2=0.2,p3=0.05"] {
            let l = law(name);
            let f: Vec<f64> = (0..=200).map(|i| l.pgf(i as f64 / 200.0).unwrap()).collect();
            assert!((f[200] - 1.0).abs() < 1e-15);
            for w in f.windows(3) {
                assert!(w[1] >= w[0] && w[2] >= w[1], "{name}");
                assert!(w[0] + w[2] - 2.0 * w[1] >= -1e-15, "{name}");
            }
        }
    }

    #[test]
    fn stable_tail_constant_from_pmf_sums() {
        // Oracle: extend the pmf recursion to 10^6 terms and sum tails directly.
        let beta = 0.5;
        let alpha = 1.5;
        let mut p = vec![2.0 / 3.0, 0.0, 0.25];
        while p.len() < 1_000_000 {
            let k = p.len() - 1;
            let next = p[k] * (k as f64 - alpha) / (k as f64 + 1.0);
            p.push(next);
        }
        let st = law("stable:beta=0.5");
        let kappa = st.kappa().unwrap();
        for n in [100usize, 1000, 10_000] {
            // Remaining mass past 10^6 from the closed form.
            let rest = st.tail_probability(1_000_000);
            let tail: f64 = p[n..].iter().sum::<f64>() + rest;
            let exact = st.tail_probability(n as u64);
            assert!((tail - exact).abs() < 1e-9 * exact, "n={n}");
            let scaled = (n as f64).powf(1.0 + beta) * tail;
            assert!((scaled / kappa - 1.0).abs() < 0.25, "n={n}: {scaled} vs {kappa}");
        }
    }

    #[test]
    fn tail_inversion_brackets() {
        for beta in [0.3, 0.5, 0.8] {
            let st = OffspringLaw::new(OffspringSpec::Stable { beta }).unwrap();
            for sampler in [st.sampler.as_ref().unwrap(), st.size_biased.as_ref().unwrap()] {
                let last = sampler.survival[sampler.survival.len() - 1];
                for j in 1..200 {
                    let u = last * 0.999f64.powi(j * 40);
                    let z = sampler.invert(u);
                    assert!(sampler.ln_survival(z) >= u.ln());
                    assert!(sampler.ln_survival(z + 1) < u.ln());
                }
            }
        }
    }

    #[test]
    fn empirical_pmf_within_five_se() {
        const DRAWS: u64 = 10_000_000;
        for (idx, name) in ["binary", "geometric", "poisson1", "stable:beta=0.5"].into_iter().enumerate() {
            let l = law(name);
            let mut rng = StreamKey::new(5, tags::LAWS).stream(idx as u64);
            let mut counts = [0u64; 11];
            let mut sum = 0u64;
            let mut tail100 = 0u64;
            for _ in 0..DRAWS {
                let k = l.sample(&mut rng);
                if k <= 10 {
                    counts[k as usize] += 1;
                }
                if k >= 100 {
                    tail100 += 1;
                }
                sum += k.min(1 << 40);
            }
            for (k, &c) in counts.iter().enumerate() {
                let p = l.prob(k);
                let se = (p * (1.0 - p) / DRAWS as f64).sqrt().max(1e-12);
                let phat = c as f64 / DRAWS as f64;
                assert!((phat - p).abs() <= 5.0 * se, "{name} k={k}: {phat} vs {p}");
            }
            if name == "geometric" {
                let mean = sum as f64 / DRAWS as f64;
                assert!((mean - 1.0).abs() < 4.0 * (2.0 / DRAWS as f64).sqrt());
            }
            if name.starts_with("stable") {
                let phat = tail100 as f64 / DRAWS as f64;
                let scaled = phat * 100f64.powf(1.5);
                assert!((scaled / l.kappa().unwrap() - 1.0).abs() < 0.25);
            }
        }
    }

    #[test]
    fn size_biased_geometric_mean() {
        // E under k p_k is Σ k² p_k = σ² + 1 = 3.
        let g = law("geometric");
        let oracle: f64 = (1..200).map(|k| (k * k) as f64 * 0.5f64.powi(k + 1)).sum();
        assert!((oracle - 3.0).abs() < 1e-12);
        let mut rng = StreamKey::new(8, tags::LAWS).stream(0);
        let n = 400_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let k = g.sample_size_biased(&mut rng) as f64;
            assert!(k >= 1.0);
            s1 += k;
            s2 += k * k;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - oracle).abs() < 4.0 * se);
    }

    #[test]
    fn spec_strings_round_trip() {
        for s in ["binary", "geometric", "poisson1", "stable:beta=0.5", "table:p0=0.25,p1=0.5,p2=0.25"] {
            let spec: OffspringSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
    }
}

//! Centered step laws in d dimensions.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepSpec {
    Gauss { d: usize, eta2: f64 },
    /// Row-major covariance matrix.
    GaussCov { d: usize, cov: Vec<f64> },
    /// Independent ±1 coordinates.
    Rademacher { d: usize },
    /// Uniform on the ball with per-coordinate variance `eta2`.
    UniformBall { d: usize, eta2: f64 },
}

impl fmt::Display for StepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSpec::Gauss { d, eta2 } => write!(f, "gauss:d={d},eta2={eta2}"),
            StepSpec::GaussCov { d, cov } => {
                write!(f, "gausscov:d={d}")?;
                for i in 0..*d {
                    for j in i..*d {
                        write!(f, ",c{}{}={}", i + 1, j + 1, cov[i * d + j])?;
                    }
                }
                Ok(())
            }
            StepSpec::Rademacher { d } => write!(f, "rademacher:d={d}"),
            StepSpec::UniformBall { d, eta2 } => write!(f, "uniball:d={d},eta2={eta2}"),
        }
    }
}

impl FromStr for StepSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, params) = super::split_spec(s)?;
        let get = |key: &str| params.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let d = get("d").unwrap_or(1.0);
        if d < 1.0 || d.fract() != 0.0 || d > 16.0 {
            return Err(Error::Parse(format!("dimension must be an integer in 1..=16: {s}")));
        }
        let d = d as usize;
        match name {
            "gauss" => Ok(StepSpec::Gauss { d, eta2: get("eta2").unwrap_or(1.0) }),
            "rademacher" => Ok(StepSpec::Rademacher { d }),
            "uniball" => Ok(StepSpec::UniformBall { d, eta2: get("eta2").unwrap_or(1.0) }),
            "gausscov" => {
                if d > 9 {
                    return Err(Error::Parse("gausscov supports d ≤ 9".into()));
                }
                let mut cov = vec![0.0; d * d];
                for i in 0..d {
                    for j in i..d {
                        let v = get(&format!("c{}{}", i + 1, j + 1))
                            .or_else(|| get(&format!("c{}{}", j + 1, i + 1)))
                            .unwrap_or(if i == j { 1.0 } else { 0.0 });
                        cov[i * d + j] = v;
                        cov[j * d + i] = v;
                    }
                }
                Ok(StepSpec::GaussCov { d, cov })
            }
            other => Err(Error::Parse(format!("unknown step family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepLaw {
    spec: StepSpec,
    dim: usize,
    cov: Vec<f64>,
    /// Lower Cholesky factor, only for the covariance family.
    chol: Vec<f64>,
    lambda_max: f64,
}

impl StepLaw {
    pub fn new(spec: StepSpec) -> Result<Self> {
        let (dim, cov) = match &spec {
            StepSpec::Gauss { d, eta2 } | StepSpec::UniformBall { d, eta2 } => {
                if !(*eta2 > 0.0 && eta2.is_finite()) {
                    return Err(Error::InvalidLaw(format!("eta2 must be positive, got {eta2}")));
                }
                (*d, diagonal(*d, *eta2))
            }
            StepSpec::Rademacher { d } => (*d, diagonal(*d, 1.0)),
            StepSpec::GaussCov { d, cov } => {
                if cov.len() != d * d {
                    return Err(Error::InvalidLaw("covariance has wrong size".into()));
                }
                (*d, cov.clone())
            }
        };
        for i in 0..dim {
            for j in 0..dim {
                if (cov[i * dim + j] - cov[j * dim + i]).abs() > 1e-12 {
                    return Err(Error::InvalidLaw("covariance is not symmetric".into()));
                }
            }
        }
        let chol = cholesky(&cov, dim)
            .ok_or_else(|| Error::InvalidLaw("covariance is not positive definite".into()))?;
        let lambda_max = largest_eigenvalue(&cov, dim);
        Ok(Self { spec, dim, cov, chol, lambda_max })
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::new(s.parse()?)
    }

    pub fn spec(&self) -> &StepSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major covariance.
    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    /// Per-coordinate variance η² when the covariance is η²·I.
    pub fn eta2(&self) -> Option<f64> {
        let e = self.cov[0];
        let iso = (0..self.dim).all(|i| {
            (0..self.dim).all(|j| (self.cov[i * self.dim + j] - if i == j { e } else { 0.0 }).abs() < 1e-14)
        });
        iso.then_some(e)
    }

    /// Largest eigenvalue of the covariance.
    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// Adds one independent step to `x` in place.
    #[inline]
    pub fn add_step<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        match &self.spec {
            StepSpec::Gauss { eta2, .. } => {
                let s = eta2.sqrt();
                for xi in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *xi += s * z;
                }
            }
            StepSpec::GaussCov { .. } => {
                let d = self.dim;
                let mut z = [0.0f64; 9];
                for zi in z.iter_mut().take(d) {
                    *zi = StandardNormal.sample(rng);
                }
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += self.chol[i * d + j] * z[j];
                    }
                    x[i] += acc;
                }
            }
            StepSpec::Rademacher { .. } => {
                for xi in x.iter_mut() {
                    *xi += if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
            }
            StepSpec::UniformBall { d, eta2 } => {
                let a = ((*d as f64 + 2.0) * eta2).sqrt();
                if *d == 1 {
                    x[0] += a * (2.0 * rng.random::<f64>() - 1.0);
                    return;
                }
                let mut z = [0.0f64; 16];
                let mut norm2 = 0.0;
                for zi in z.iter_mut().take(*d) {
                    *zi = StandardNormal.sample(rng);
                    norm2 += *zi * *zi;
                }
                let radius = a * rng.random::<f64>().powf(1.0 / *d as f64) / norm2.sqrt();
                for (xi, zi) in x.iter_mut().zip(z.iter()) {
                    *xi += radius * zi;
                }
            }
        }
    }

    /// Adds the sum of `count` independent steps to `x`.
    pub fn add_steps<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [f64], count: u64) {
        match &self.spec {
            StepSpec::Gauss { eta2, .. } => {
                let s = (eta2 * count as f64).sqrt();
                for xi in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *xi += s * z;
                }
            }
            StepSpec::GaussCov { .. } => {
                let d = self.dim;
                let s = (count as f64).sqrt();
                let mut z = [0.0f64; 9];
                for zi in z.iter_mut().take(d) {
                    *zi = StandardNormal.sample(rng);
                }
                for i in 0..d {
                    let acc: f64 = (0..=i).map(|j| self.chol[i * d + j] * z[j]).sum();
                    x[i] += s * acc;
                }
            }
            _ => {
                for _ in 0..count {
                    self.add_step(rng, x);
                }
            }
        }
    }

    /// Upper bound on `P(|S_n| ≥ t)` for the n-step walk from the origin.
    pub fn displacement_tail_bound(&self, n: u64, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        if n == 0 {
            return 0.0;
        }
        let nf = n as f64;
        let d = self.dim as f64;
        let bound = match &self.spec {
            StepSpec::Gauss { eta2, .. } => chi2_sf(d, t * t / (nf * eta2)),
            StepSpec::GaussCov { .. } => chi2_sf(d, t * t / (nf * self.lambda_max)),
            StepSpec::Rademacher { .. } => 2.0 * d * (-t * t / (2.0 * d * nf)).exp(),
            StepSpec::UniformBall { d: di, eta2 } => {
                let a2 = (*di as f64 + 2.0) * eta2;
                2.0 * d * (-t * t / (2.0 * d * nf * a2)).exp()
            }
        };
        bound.min(1.0)
    }
}

fn chi2_sf(k: f64, x: f64) -> f64 {
    let dist = ChiSquared::new(k).expect("positive degrees of freedom");
    dist.sf(x)
}

fn diagonal(d: usize, v: f64) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = v;
    }
    m
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Power iteration; the matrix is symmetric positive definite and small.
fn largest_eigenvalue(a: &[f64], d: usize) -> f64 {
    let mut v = vec![1.0; d];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| a[i * d + j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let next = w.iter().zip(&v).map(|(wi, vi)| wi * vi).sum::<f64>() / v.iter().map(|x| x * x).sum::<f64>();
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-15 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // Gershgorin bound keeps the window estimate conservative if iteration stalls.
    let gersh = (0..d).map(|i| (0..d).map(|j| a[i * d + j].abs()).sum::<f64>()).fold(0.0, f64::max);
    (lambda * (1.0 + 1e-9)).min(gersh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tags, StreamKey};

    fn empirical_cov(law: &StepLaw, n: usize) -> (Vec<f64>, Vec<f64>) {
        let d = law.dim();
        let mut rng = StreamKey::new(3, tags::LAWS).stream(1);
        let mut mean = vec![0.0; d];
        let mut cov = vec![0.0; d * d];
        let mut x = vec![0.0; d];
        for _ in 0..n {
            x.iter_mut().for_each(|v| *v = 0.0);
            law.add_step(&mut rng, &mut x);
            for i in 0..d {
                mean[i] += x[i];
                for j in 0..d {
                    cov[i * d + j] += x[i] * x[j];
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for c in cov.iter_mut() {
            *c /= n as f64;
        }
        (mean, cov)
    }

    fn frobenius_rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn covariances_match() {
        for s in ["gauss:d=1,eta2=1", "gausscov:d=2,c11=2,c12=1,c22=2", "rademacher:d=2", "uniball:d=3,eta2=1", "uniball:d=1,eta2=2"] {
            let law = StepLaw::parse(s).unwrap();
            let (mean, cov) = empirical_cov(&law, 200_000);
            assert!(frobenius_rel(&cov, law.covariance()) < 0.05, "{s}: {cov:?}");
            let sd = law.covariance()[0].sqrt();
            for m in mean {
                assert!(m.abs() < 4.0 * sd / (200_000f64).sqrt(), "{s}");
            }
        }
    }

    #[test]
    fn rademacher_values() {
        let law = StepLaw::parse("rademacher:d=1").unwrap();
        let mut rng = StreamKey::new(1, tags::LAWS).stream(0);
        for _ in 0..100 {
            let mut x = [0.0];
            law.add_step(&mut rng, &mut x);
            assert!(x[0] == 1.0 || x[0] == -1.0);
        }
    }

    #[test]
    fn rejects_bad_covariance() {
        assert!(StepLaw::parse("gausscov:d=2,c11=1,c12=2,c22=1").is_err());
        assert!(StepLaw::parse("gauss:d=2,eta2=-1").is_err());
        assert!(StepLaw::parse("gauss:d=0").is_err());
    }

    #[test]
    fn eigenvalue_and_tail_bound() {
        let law = StepLaw::parse("gausscov:d=2,c11=2,c12=1,c22=2").unwrap();
        assert!((law.lambda_max() - 3.0).abs() < 1e-6);
        assert_eq!(law.eta2(), None);
        let g = StepLaw::parse("gauss:d=2,eta2=1").unwrap();
        // |S_1|² ~ χ²_2: P(|S| ≥ t) = exp(−t²/2).
        assert!((g.displacement_tail_bound(1, 2.0) - (-2.0f64).exp()).abs() < 1e-12);
        assert_eq!(g.eta2(), Some(1.0));
    }

    #[test]
    fn spec_strings_round_trip() {
        for s in ["gauss:d=2,eta2=1", "gausscov:d=2,c11=2,c12=1,c22=2", "rademacher:d=1", "uniball:d=3,eta2=1"] {
            let spec: StepSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
    }
}

//! Special functions and geometry constants.

use statrs::function::gamma as sgamma;
use std::f64::consts::PI;

pub fn gamma(x: f64) -> f64 {
    sgamma::gamma(x)
}

pub fn ln_gamma(x: f64) -> f64 {
    sgamma::ln_gamma(x)
}

/// Volume of the d-dimensional ball of radius `r`.
pub fn ball_volume(d: usize, r: f64) -> f64 {
    let h = d as f64 / 2.0;
    PI.powf(h) * r.powi(d as i32) / gamma(h + 1.0)
}

/// Surface area of the unit sphere in R^d.
pub fn sphere_area(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    2.0 * PI.powf(h) / gamma(h)
}

/// `ln Γ(x + a) − ln Γ(x)` without cancellation for large `x`.
///
/// Uses the difference of Stirling series once `x + a ≥ 20`, shifting
/// upward with the recurrence otherwise.
pub fn ln_gamma_ratio(x: f64, a: f64) -> f64 {
    debug_assert!(x > 0.0 && x + a > 0.0);
    let mut shift = 0.0;
    let mut x = x;
    while x + a < 20.0 || x < 20.0 {
        // Γ(x+a)/Γ(x) = [Γ(x+1+a)/Γ(x+1)] · x/(x+a)
        shift += x.ln() - (x + a).ln();
        x += 1.0;
    }
    let z = x + a;
    let main = a * x.ln() + (z - 0.5) * (a / x).ln_1p() - a;
    let corr = stirling_tail(z) - stirling_tail(x);
    shift + main + corr
}

fn stirling_tail(z: f64) -> f64 {
    let z2 = z * z;
    let inv = 1.0 / z;
    inv * (1.0 / 12.0 - (1.0 / 360.0) / z2 + (1.0 / 1260.0) / (z2 * z2) - (1.0 / 1680.0) / (z2 * z2 * z2))
}

/// Double-double arithmetic (unevaluated sum `hi + lo`), used where a
/// cancellation-free reference evaluation of a generating function is needed.
#[derive(Debug, Clone, Copy)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

impl Dd {
    pub fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        let err = (a - (s - bb)) + (b - bb);
        Self { hi: s, lo: err }
    }

    fn quick(a: f64, b: f64) -> Self {
        let s = a + b;
        Self { hi: s, lo: b - (s - a) }
    }

    pub fn add(self, o: Dd) -> Dd {
        let s = Self::two_sum(self.hi, o.hi);
        let t = Self::two_sum(self.lo, o.lo);
        let hi = Self::quick(s.hi, s.lo + t.hi);
        Self::quick(hi.hi, hi.lo + t.lo)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        Self::quick(p, e)
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::new(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::new(q2)));
        let q3 = r.hi / o.hi;
        Self::quick(q1, q2).add(Dd::new(q3))
    }

    /// exp of a small-magnitude argument by Taylor series (|x| ≤ 1).
    pub fn exp_small(self) -> Dd {
        let mut term = Dd::new(1.0);
        let mut sum = Dd::new(1.0);
        for k in 1..40 {
            term = term.mul(self).div(Dd::new(k as f64));
            sum = sum.add(term);
            if term.hi.abs() < 1e-34 {
                break;
            }
        }
        sum
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_volumes() {
        assert!((ball_volume(1, 2.0) - 4.0).abs() < 1e-12);
        assert!((ball_volume(2, 1.0) - PI).abs() < 1e-12);
        assert!((ball_volume(3, 1.0) - 4.0 * PI / 3.0).abs() < 1e-12);
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-12);
        assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn gamma_ratio_matches_direct_lgamma() {
        for &(x, a) in &[(3.0, -1.5), (25.0, -0.5), (200.0, -1.25), (7.5, 0.3), (1.0e4, -1.5)] {
            let direct = ln_gamma(x + a) - ln_gamma(x);
            assert!((ln_gamma_ratio(x, a) - direct).abs() < 1e-10, "x={x} a={a}");
        }
        // Large x: compare with product form Γ(x+a)/Γ(x) ≈ x^a (1 + a(a-1)/(2x)).
        let x: f64 = 1.0e12;
        let a: f64 = -1.5;
        let approx = a * x.ln() + (a * (a - 1.0) / (2.0 * x)).ln_1p();
        assert!((ln_gamma_ratio(x, a) - approx).abs() < 1e-14 * approx.abs());
    }

    #[test]
    fn double_double_cancellation() {
        let s = 1e-3;
        let t = Dd::new(1.0).sub(Dd::new(s));
        let back = Dd::new(1.0).sub(t);
        assert_eq!(back.to_f64(), s);
        let e = Dd::new(-s).exp_small();
        let want = (-s).exp_m1();
        assert!((e.sub(Dd::new(1.0)).to_f64() - want).abs() < 1e-19);
    }
}

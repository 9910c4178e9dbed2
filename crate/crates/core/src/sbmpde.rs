//! Radial log-Laplace equation `∂u/∂t = (η²/2)Δu − b u^{1+β}` with
//! indicator initial data `θ·1_{B(r)}`.
//!
//! Space: conservative finite volumes on nodes `ρ_i = i h`, Dirichlet zero at
//! `ρ_max`. Time: Strang splitting of the exact reaction flow
//! `u ↦ (u^{−β} + bβ τ)^{−1/β}` around a backward-Euler diffusion step.

use crate::error::{Error, Result};
use crate::laws::OffspringLaw;
use crate::special::sphere_area;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchingMechanism {
    pub b: f64,
    /// ψ(u) = b u^{1+β}.
    pub beta: f64,
}

impl BranchingMechanism {
    pub fn new(b: f64, beta: f64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::InvalidArgument(format!("mechanism coefficient must be positive, got {b}")));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidArgument(format!("mechanism exponent 1+beta needs beta in (0,1], got {beta}")));
        }
        Ok(Self { b, beta })
    }

    pub fn quadratic(b: f64) -> Result<Self> {
        Self::new(b, 1.0)
    }

    pub fn one_plus_beta(&self) -> f64 {
        1.0 + self.beta
    }

    pub fn psi(&self, u: f64) -> f64 {
        self.b * u.powf(1.0 + self.beta)
    }

    /// Parses `quad:b=0.5` or `stable:b=..,beta=..`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, params) = crate::laws::split_spec(s)?;
        let get = |k: &str| params.iter().find(|(key, _)| *key == k).map(|(_, v)| *v);
        match name {
            "quad" | "quadratic" => Self::quadratic(get("b").unwrap_or(1.0)),
            "stable" => Self::new(
                get("b").unwrap_or(1.0),
                get("beta").ok_or_else(|| Error::Parse(format!("stable mechanism needs beta: {s}")))?,
            ),
            other => Err(Error::Parse(format!("unknown mechanism {other:?}"))),
        }
    }

    /// Exact reaction flow over time `tau`.
    #[inline]
    fn react(&self, u: f64, tau: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if self.beta == 1.0 {
            u / (1.0 + self.b * tau * u)
        } else {
            (u.powf(-self.beta) + self.b * self.beta * tau).powf(-1.0 / self.beta)
        }
    }
}

/// `(bβt + θ^{−β})^{−1/β}`; `theta = ∞` allowed.
pub fn mass_ode(mech: &BranchingMechanism, t: f64, theta: f64) -> f64 {
    let inv = if theta.is_infinite() { 0.0 } else { theta.powf(-mech.beta) };
    (mech.b * mech.beta * t + inv).powf(-1.0 / mech.beta)
}

/// Coefficient `b` for which the total-mass solution matches the exact
/// survival probability of the offspring law: `(bβ)^{−1/β} = n^{1/β} Q_n`.
pub fn calibrate_b(off: &OffspringLaw, n: u64) -> f64 {
    let beta = off.tail_index().beta();
    let q = crate::engine::survival_recursion(off, n);
    let scaled = (n as f64).powf(1.0 / beta) * q;
    scaled.powf(-beta) / beta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub cells: usize,
    /// Default `r + 12√(η²T)`.
    pub rho_max: Option<f64>,
    /// Default `T/1000`.
    pub dt_max: Option<f64>,
    /// Reaction step rule `dt ≤ cfl/(b(1+β)ū^β)`.
    pub cfl: f64,
    /// θ used to build the shared time grid; every θ up to it sees the same steps.
    pub theta_ref: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self { cells: 16384, rho_max: None, dt_max: None, cfl: 0.1, theta_ref: 1e12 }
    }
}

impl GridParams {
    /// Halved Δρ and Δt.
    pub fn refined(&self, r: f64, eta2: f64, t: f64) -> Self {
        Self {
            cells: self.cells * 2,
            rho_max: Some(self.rho_max.unwrap_or(r + 12.0 * (eta2 * t).sqrt())),
            dt_max: Some(self.dt_max.unwrap_or(t / 1000.0) / 2.0),
            cfl: self.cfl / 2.0,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialProfile {
    pub d: usize,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub t: f64,
    /// `f64::INFINITY` for the extinction limit.
    pub theta: f64,
}

impl RadialProfile {
    pub fn rho_max(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Linear interpolation at radius `rho` (zero beyond the grid).
    pub fn at(&self, rho: f64) -> f64 {
        let h = self.grid[1];
        let x = rho / h;
        let i = x.floor() as usize;
        if i + 1 >= self.grid.len() {
            return 0.0;
        }
        let w = x - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }
}

struct Discretization {
    d: usize,
    h: f64,
    grid: Vec<f64>,
    /// Control-volume measure ∫ ρ^{d−1} dρ per node.
    vol: Vec<f64>,
    /// Face weight ρ_{i+1/2}^{d−1} between nodes i and i+1.
    face: Vec<f64>,
    times: Vec<f64>,
}

impl Discretization {
    fn new(d: usize, mech: &BranchingMechanism, eta2: f64, r: f64, t_end: f64, p: &GridParams) -> Result<Self> {
        if d < 1 {
            return Err(Error::InvalidArgument("dimension must be at least 1".into()));
        }
        if !(r > 0.0 && t_end > 0.0 && eta2 > 0.0) {
            return Err(Error::InvalidArgument(format!("need r, T, eta2 > 0 (got {r}, {t_end}, {eta2})")));
        }
        if p.cells < 16 || p.cells % 2 != 0 {
            return Err(Error::InvalidArgument("grid needs an even number of at least 16 cells".into()));
        }
        let rho_max = p.rho_max.unwrap_or(r + 12.0 * (eta2 * t_end).sqrt());
        if rho_max <= r {
            return Err(Error::Sizing(format!("rho_max {rho_max} must exceed the ball radius {r}")));
        }
        let m = p.cells;
        let h = rho_max / m as f64;
        let grid: Vec<f64> = (0..=m).map(|i| i as f64 * h).collect();
        let dd = d as f64;
        let measure = |a: f64, b: f64| (b.powf(dd) - a.powf(dd)) / dd;
        let vol: Vec<f64> = (0..=m)
            .map(|i| {
                let lo = ((i as f64 - 0.5) * h).max(0.0);
                let hi = ((i as f64 + 0.5) * h).min(rho_max);
                measure(lo, hi)
            })
            .collect();
        let face: Vec<f64> = (0..m).map(|i| ((i as f64 + 0.5) * h).powi(d as i32 - 1)).collect();
        // Time grid from the largest θ: dt ≤ min(dt_max, cfl/(b(1+β)ū(t)^β)).
        let dt_max = p.dt_max.unwrap_or(t_end / 1000.0);
        let mut times = vec![0.0];
        let mut t = 0.0;
        while t < t_end {
            let ubar = mass_ode(mech, t, p.theta_ref);
            let dt = dt_max.min(p.cfl / (mech.b * (1.0 + mech.beta) * ubar.powf(mech.beta)));
            t = (t + dt).min(t_end);
            if t_end - t < 1e-12 * t_end {
                t = t_end;
            }
            times.push(t);
        }
        Ok(Self { d, h, grid, vol, face, times })
    }

    fn initial(&self, theta: f64, r: f64) -> Vec<f64> {
        let dd = self.d as f64;
        let m = self.grid.len() - 1;
        (0..=m)
            .map(|i| {
                let lo = ((i as f64 - 0.5) * self.h).max(0.0);
                let hi = ((i as f64 + 0.5) * self.h).min(self.grid[m]);
                if hi <= r {
                    theta
                } else if lo >= r {
                    0.0
                } else {
                    theta * (r.powf(dd) - lo.powf(dd)) / dd / self.vol[i]
                }
            })
            .collect()
    }

    /// Solves `(I − τ L) x = rhs` in place, Dirichlet zero at the last node.
    fn implicit_diffusion(&self, u: &mut [f64], tau: f64, eta2: f64, scratch: &mut [f64]) {
        let m = u.len() - 1;
        let k = 0.5 * eta2 * tau / self.h;
        // Row i: diag = 1 + k(F_{i−½} + F_{i+½})/V_i, off-diagonals −k F/V_i.
        // Forward sweep of the Thomas algorithm on rows 0..m−1 (u_m = 0).
        let c = scratch;
        let mut prev_c = 0.0;
        let mut prev_d = 0.0;
        for i in 0..m {
            let left = if i == 0 { 0.0 } else { k * self.face[i - 1] / self.vol[i] };
            let right = k * self.face[i] / self.vol[i];
            let diag = 1.0 + left + right;
            let denom = diag + left * prev_c;
            let ci = -right / denom;
            let di = (u[i] + left * prev_d) / denom;
            c[i] = ci;
            u[i] = di;
            prev_c = ci;
            prev_d = di;
        }
        u[m] = 0.0;
        for i in (0..m).rev() {
            u[i] -= c[i] * u[i + 1];
        }
    }
}

fn check_state(u: &[f64], bound: f64, t: f64) -> Result<()> {
    for (i, &x) in u.iter().enumerate() {
        if !x.is_finite() || x < -1e-12 {
            return Err(Error::Unstable(format!("value {x} at node {i}, t = {t}; reduce the time step")));
        }
        if x > bound * (1.0 + 1e-10) + 1e-12 {
            return Err(Error::Unstable(format!("value {x} above the mass bound {bound} at node {i}, t = {t}")));
        }
    }
    Ok(())
}

pub fn solve_many(
    d: usize,
    mech: &BranchingMechanism,
    eta2: f64,
    r: f64,
    thetas: &[f64],
    grid: &GridParams,
    t_ends: &[f64],
) -> Result<Vec<Vec<RadialProfile>>> {
    let t_last = t_ends.iter().cloned().fold(0.0, f64::max);
    let mut p = *grid;
    for &th in thetas {
        if !(th > 0.0) || th > p.theta_ref {
            return Err(Error::InvalidArgument(format!("theta {th} outside (0, theta_ref = {}]", p.theta_ref)));
        }
    }
    if p.dt_max.is_none() {
        p.dt_max = Some(t_last / 1000.0);
    }
    if p.rho_max.is_none() {
        p.rho_max = Some(r + 12.0 * (eta2 * t_last).sqrt());
    }
    let mut disc = Discretization::new(d, mech, eta2, r, t_last, &p)?;
    // Make every requested output time a grid time.
    for &te in t_ends {
        if !disc.times.iter().any(|&t| (t - te).abs() <= 1e-12 * te) {
            let pos = disc.times.partition_point(|&t| t < te);
            disc.times.insert(pos, te);
        }
    }
    let mut out = Vec::with_capacity(thetas.len());
    let m = disc.grid.len() - 1;
    let mut scratch = vec![0.0; m + 1];
    for &theta in thetas {
        let mut u = disc.initial(theta, r);
        let mut profiles = Vec::new();
        for w in disc.times.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let tau = t1 - t0;
            u.iter_mut().for_each(|x| *x = mech.react(*x, tau / 2.0));
            disc.implicit_diffusion(&mut u, tau, eta2, &mut scratch);
            u.iter_mut().for_each(|x| *x = mech.react(*x, tau / 2.0));
            check_state(&u, mass_ode(mech, t1, theta), t1)?;
            if t_ends.iter().any(|&te| (te - t1).abs() <= 1e-12 * te) {
                profiles.push(RadialProfile { d, grid: disc.grid.clone(), values: u.clone(), t: t1, theta });
            }
        }
        // Order profiles as requested in t_ends.
        let ordered = t_ends
            .iter()
            .map(|&te| profiles.iter().find(|p| (p.t - te).abs() <= 1e-12 * te).cloned().expect("output time on grid"))
            .collect();
        out.push(ordered);
    }
    Ok(out)
}

/// Solution at time `t_end` for finite `theta`.
pub fn solve_log_laplace(
    d: usize,
    mech: &BranchingMechanism,
    eta2: f64,
    r: f64,
    theta: f64,
    grid: &GridParams,
    t_end: f64,
) -> Result<RadialProfile> {
    Ok(solve_many(d, mech, eta2, r, &[theta], grid, &[t_end])?.remove(0).remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaLadder {
    pub start: f64,
    pub factor: f64,
    /// Minimum number of rungs before convergence may be declared.
    pub min_rungs: usize,
    /// Relative to the mass-ODE bound `(bβT)^{−1/β}`.
    pub tol: f64,
}

impl Default for ThetaLadder {
    fn default() -> Self {
        Self { start: 1e2, factor: 10.0, min_rungs: 4, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtinctionProfile {
    pub profile: RadialProfile,
    pub ladder: Vec<f64>,
    /// Sup-norm change between consecutive rungs.
    pub changes: Vec<f64>,
}

/// θ → ∞ limit at each time in `t_ends`.
///
/// Near the ball edge u_θ approaches its limit like θ^{−β/2} (the initial
/// layer has width ∝ √(θ^{−β})), so each pair of rungs gives a Richardson
/// extrapolant in θ^{−β/2}. The ladder stops once consecutive extrapolants
/// differ in sup norm by less than `tol` times the mass-ODE bound at `T`.
pub fn extinction_profiles(
    d: usize,
    mech: &BranchingMechanism,
    eta2: f64,
    r: f64,
    t_ends: &[f64],
    grid: &GridParams,
    ladder: &ThetaLadder,
) -> Result<Vec<ExtinctionProfile>> {
    if !(ladder.factor > 1.0 && ladder.start > 0.0 && ladder.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid theta ladder {ladder:?}")));
    }
    let mut thetas = Vec::new();
    let mut th = ladder.start;
    while th <= grid.theta_ref * (1.0 + 1e-12) {
        thetas.push(th);
        th *= ladder.factor;
    }
    let min_rungs = ladder.min_rungs.max(3);
    let q = ladder.factor.powf(-mech.beta / 2.0);
    let weight = q / (1.0 - q);
    let extrapolate = |a: &RadialProfile, b: &RadialProfile| -> Vec<f64> {
        a.values.iter().zip(&b.values).map(|(x1, x2)| x2 + (x2 - x1).max(0.0) * weight).collect()
    };
    let mut solved: Vec<Vec<RadialProfile>> = Vec::new();
    let mut next = 0;
    loop {
        let want = if solved.is_empty() { min_rungs } else { 1 };
        let end = (next + want).min(thetas.len());
        if end == next {
            let changes = extrapolant_changes(&solved, 0, &extrapolate);
            return Err(Error::ThetaNonConvergence { ladder: thetas, changes });
        }
        solved.extend(solve_many(d, mech, eta2, r, &thetas[next..end], grid, t_ends)?);
        next = end;
        if solved.len() < min_rungs {
            continue;
        }
        let all: Vec<Vec<f64>> = (0..t_ends.len()).map(|ti| extrapolant_changes(&solved, ti, &extrapolate)).collect();
        let converged = all.iter().zip(t_ends).all(|(ch, &te)| {
            ch.last().is_some_and(|&c| c < ladder.tol * mass_ode(mech, te, f64::INFINITY))
        });
        if converged {
            break;
        }
        for ch in &all {
            let k = ch.len();
            if k >= 3 && ch[k - 1] >= ch[k - 2] && ch[k - 2] >= ch[k - 3] {
                return Err(Error::ThetaNonConvergence { ladder: thetas[..solved.len()].to_vec(), changes: ch.clone() });
            }
        }
    }
    let used = thetas[..solved.len()].to_vec();
    let last = solved.len() - 1;
    Ok((0..t_ends.len())
        .map(|ti| {
            let b = &solved[last][ti];
            ExtinctionProfile {
                profile: RadialProfile {
                    d,
                    grid: b.grid.clone(),
                    values: {
                        let cap = mass_ode(mech, b.t, f64::INFINITY);
                        extrapolate(&solved[last - 1][ti], b).into_iter().map(|v| v.min(cap)).collect()
                    },
                    t: b.t,
                    theta: f64::INFINITY,
                },
                ladder: used.clone(),
                changes: extrapolant_changes(&solved, ti, &extrapolate),
            }
        })
        .collect())
}

/// Sup-norm differences between consecutive extrapolants at output `ti`.
fn extrapolant_changes(
    solved: &[Vec<RadialProfile>],
    ti: usize,
    extrapolate: &dyn Fn(&RadialProfile, &RadialProfile) -> Vec<f64>,
) -> Vec<f64> {
    let ex: Vec<Vec<f64>> = solved.windows(2).map(|w| extrapolate(&w[0][ti], &w[1][ti])).collect();
    ex.windows(2).map(|w| w[0].iter().zip(&w[1]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)).collect()
}

pub fn extinction_profile(
    d: usize,
    mech: &BranchingMechanism,
    eta2: f64,
    r: f64,
    t_end: f64,
    grid: &GridParams,
    ladder: &ThetaLadder,
) -> Result<ExtinctionProfile> {
    Ok(extinction_profiles(d, mech, eta2, r, &[t_end], grid, ladder)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FValue {
    pub f: f64,
    /// Extrapolated contribution beyond ρ_max.
    pub tail: f64,
    /// Fitted decay exponent p of v ≈ A ρ^{−p} near the outer edge.
    pub decay_exponent: f64,
}

/// Power-law fit `v ≈ A ρ^{−p}` on the grid window `[lo, hi]` (least squares in log-log).
pub fn fit_power_tail(profile: &RadialProfile, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = profile
        .grid
        .iter()
        .zip(&profile.values)
        .filter(|(r, v)| **r >= lo && **r <= hi && **v > 0.0)
        .map(|(r, v)| (r.ln(), v.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Some((-slope, (my - slope * mx).exp()))
}

/// `F = S_d ∫ v(ρ) ρ^{d−1} dρ`: composite Simpson on the grid plus a power-law
/// tail beyond ρ_max fitted on the interior window `[0.5, 0.75]·ρ_max`.
pub fn compute_f(d: usize, profile: &RadialProfile) -> Result<FValue> {
    if !profile.theta.is_infinite() {
        return Err(Error::InvalidArgument("compute_f expects an extinction (theta = infinity) profile".into()));
    }
    let m = profile.grid.len() - 1;
    if m % 2 != 0 {
        return Err(Error::InvalidArgument("Simpson rule needs an even cell count".into()));
    }
    let h = profile.grid[1];
    let g = |i: usize| profile.values[i] * profile.grid[i].powi(d as i32 - 1);
    let mut s = g(0) + g(m);
    for i in 1..m {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i);
    }
    let area = sphere_area(d);
    let body = area * s * h / 3.0;
    let rho_max = profile.rho_max();
    let (p, tail) = match fit_power_tail(profile, 0.5 * rho_max, 0.75 * rho_max) {
        Some((p, a)) if p > d as f64 => (p, area * a * rho_max.powf(d as f64 - p) / (p - d as f64)),
        Some((p, _)) => (p, f64::INFINITY),
        None => (f64::INFINITY, 0.0),
    };
    if !(body > 0.0) {
        return Err(Error::Unstable(format!("non-positive functional {body}")));
    }
    if tail > 0.01 * body {
        return Err(Error::Sizing(format!(
            "tail beyond rho_max = {rho_max} is {tail:.3e}, over 1% of F = {body:.6}; enlarge the grid"
        )));
    }
    Ok(FValue { f: body + tail, tail, decay_exponent: p })
}

/// `F_d(r)` at time `t_end` from the extinction profile.
pub fn functional(
    d: usize,
    mech: &BranchingMechanism,
    eta2: f64,
    r: f64,
    t_end: f64,
    grid: &GridParams,
    ladder: &ThetaLadder,
) -> Result<FValue> {
    let ext = extinction_profile(d, mech, eta2, r, t_end, grid, ladder)?;
    compute_f(d, &ext.profile)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleInvariance {
    pub r: f64,
    /// Time 1, radius r.
    pub f_direct: f64,
    /// Time r^{−2}, radius 1.
    pub f_rescaled: f64,
    pub rel_diff: f64,
}

/// Two-route computation of the d=2 functional: `(t = 1, radius r)` against
/// `(t = r^{−2}, radius 1)`. The routes use their own default grids.
pub fn scale_invariance_check(
    mech: &BranchingMechanism,
    eta2: f64,
    radii: &[f64],
    grid: &GridParams,
    ladder: &ThetaLadder,
) -> Result<Vec<ScaleInvariance>> {
    if mech.beta != 1.0 {
        return Err(Error::InvalidArgument("scale invariance check needs a quadratic mechanism".into()));
    }
    radii
        .iter()
        .map(|&r| {
            let a = functional(2, mech, eta2, r, 1.0, grid, ladder)?.f;
            let b = functional(2, mech, eta2, 1.0, r.powi(-2), grid, ladder)?.f;
            Ok(ScaleInvariance { r, f_direct: a, f_rescaled: b, rel_diff: (a - b).abs() / a })
        })
        .collect()
}

/// One CSV row of the functional table.
#[derive(Debug, Clone, Serialize)]
pub struct FunctionalRow {
    pub d: usize,
    pub r: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub b: f64,
    pub beta: f64,
    #[serde(rename = "F")]
    pub f: f64,
    pub exp_neg_f: f64,
}

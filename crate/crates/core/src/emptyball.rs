//! Empty-ball probabilities `P(R_n ≥ ρ_n r)`.
//!
//! Two estimators. The occupation estimator uses
//! `P(R_n ≥ u) = exp(−F)`, `F = E[vol ∪_{u ∈ Z_n} B(S_u, u)]` for a single
//! ancestor at the origin. The direct estimator simulates the Poisson field of
//! ancestors in a finite window and reads off the nearest particle.

use crate::engine::{field_rmin_thinned, run_tree, Caps, ConditionedTrees, GenerationBuffer};
use crate::error::{Error, Result};
use crate::laws::{OffspringLaw, StepLaw, TailIndex};
use crate::parallel::fold_replicates;
use crate::rng::{tags, StreamKey};
use crate::special::ball_volume;
use crate::stats::{proportion, MeanAcc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::hash::{BuildHasherDefault, Hasher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeKind {
    /// ρ_n = √n.
    Diffusive,
    /// ρ_n = b_n.
    SmallBall,
    /// ρ_n = 1.
    Fixed,
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegimeKind::Diffusive => "diffusive",
            RegimeKind::SmallBall => "smallball",
            RegimeKind::Fixed => "fixed",
        })
    }
}

impl std::str::FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusive" => Ok(RegimeKind::Diffusive),
            "smallball" => Ok(RegimeKind::SmallBall),
            "fixed" => Ok(RegimeKind::Fixed),
            other => Err(Error::Parse(format!("unknown regime {other:?}"))),
        }
    }
}

impl RegimeKind {
    /// The regime matching the offspring tail and the dimension.
    pub fn natural(off: &OffspringLaw, dim: usize) -> Result<Self> {
        let bd = off.tail_index().beta() * dim as f64;
        if (bd - 2.0).abs() < 1e-12 {
            Ok(RegimeKind::Diffusive)
        } else if bd < 2.0 {
            match off.tail_index() {
                TailIndex::Stable(_) => Ok(RegimeKind::SmallBall),
                TailIndex::FiniteVariance => {
                    Err(Error::InvalidArgument(format!("no empty-ball scaling for finite variance in d={dim}")))
                }
            }
        } else {
            Ok(RegimeKind::Fixed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRegime {
    pub kind: RegimeKind,
    pub n: u64,
    pub dim: usize,
    /// Length scale ρ_n.
    pub rho: f64,
    /// Small-ball scale from the constant L = 1/(1+β).
    pub b_n: Option<f64>,
    /// Small-ball scale implied by the exact survival probability, for comparison.
    pub b_n_recursion: Option<f64>,
}

impl ScalingRegime {
    pub fn new(kind: RegimeKind, n: u64, off: &OffspringLaw, dim: usize) -> Result<Self> {
        let beta = off.tail_index().beta();
        let bd = beta * dim as f64;
        let (rho, b_n, b_rec) = match kind {
            RegimeKind::Diffusive => {
                if (bd - 2.0).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "diffusive scaling needs beta*d = 2 (finite variance in d=2), got beta*d = {bd}"
                    )));
                }
                ((n as f64).sqrt(), None, None)
            }
            RegimeKind::SmallBall => {
                let TailIndex::Stable(beta) = off.tail_index() else {
                    return Err(Error::InvalidArgument("small-ball scaling needs a stable offspring law".into()));
                };
                if bd >= 2.0 {
                    return Err(Error::InvalidArgument(format!("small-ball scaling needs beta*d < 2, got {bd}")));
                }
                let b = (n as f64 / (1.0 + beta)).powf(1.0 / bd);
                let q = crate::engine::survival_recursion(off, n);
                let rec = ((1.0 / beta).powf(1.0 / beta) / q).powf(1.0 / dim as f64);
                (b, Some(b), Some(rec))
            }
            RegimeKind::Fixed => {
                if bd <= 2.0 {
                    return Err(Error::InvalidArgument(format!("fixed-radius regime needs beta*d > 2, got {bd}")));
                }
                (1.0, None, None)
            }
        };
        Ok(Self { kind, n, dim, rho, b_n, b_n_recursion: b_rec })
    }

    /// Closed-form limit of `P(R_n ≥ b_n r)` in the small-ball regime.
    pub fn closed_form_limit(&self, off: &OffspringLaw, r: f64) -> Option<f64> {
        match (self.kind, off.tail_index()) {
            (RegimeKind::SmallBall, TailIndex::Stable(beta)) => {
                Some((-ball_volume(self.dim, r) * (1.0 / beta).powf(1.0 / beta)).exp())
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OccupationMethod {
    /// Exact in d = 1 and d = 2. Above, isolated balls are exact and each
    /// cluster of overlapping balls is sampled in its own bounding box.
    Auto,
    /// Uniform points in the bounding box of the union.
    BoundingBox,
    /// Uniform points in a uniformly chosen ball, weighted by 1/(cover count).
    BallSampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupationParams {
    pub method: OccupationMethod,
    /// Pilot points used to choose the main sample size.
    pub pilot: u64,
    pub min_samples: u64,
    pub max_samples: u64,
    pub target_rel_se: f64,
}

impl Default for OccupationParams {
    fn default() -> Self {
        Self { method: OccupationMethod::Auto, pilot: 1024, min_samples: 10_000, max_samples: 1 << 20, target_rel_se: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupationVolume {
    pub volume: f64,
    /// Relative standard error of the sampling (0 when exact).
    pub rel_se: f64,
    pub samples: u64,
}

#[derive(Default)]
struct MixHasher(u64);

impl Hasher for MixHasher {
    fn finish(&self) -> u64 {
        let mut z = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = self.0.rotate_left(8) ^ b as u64;
        }
    }

    fn write_u64(&mut self, x: u64) {
        self.0 = x;
    }
}

/// Hash grid with cell side equal to the ball radius.
struct BallGrid<'a> {
    dim: usize,
    points: &'a [f64],
    inv_cell: f64,
    r2: f64,
    cells: HashMap<u64, Vec<u32>, BuildHasherDefault<MixHasher>>,
}

fn cell_key(cell: &[i64]) -> u64 {
    cell.iter().fold(0x9e37_79b9_7f4a_7c15u64, |h, &c| {
        let mut z = (h ^ c as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

impl<'a> BallGrid<'a> {
    fn new(points: &'a [f64], dim: usize, radius: f64) -> Self {
        let inv_cell = 1.0 / radius;
        let mut cells: HashMap<u64, Vec<u32>, BuildHasherDefault<MixHasher>> = HashMap::default();
        let mut c = [0i64; 16];
        for (i, p) in points.chunks_exact(dim).enumerate() {
            for k in 0..dim {
                c[k] = (p[k] * inv_cell).floor() as i64;
            }
            cells.entry(cell_key(&c[..dim])).or_default().push(i as u32);
        }
        Self { dim, points, inv_cell, r2: radius * radius, cells }
    }

    /// Whether any particle lies within `reach` cells and distance² < `r2`.
    fn any_within(&self, x: &[f64], reach: i64, r2: f64, skip: Option<usize>) -> bool {
        let d = self.dim;
        let mut base = [0i64; 16];
        for k in 0..d {
            base[k] = (x[k] * self.inv_cell).floor() as i64;
        }
        let width = 2 * reach + 1;
        let total = (width as u64).pow(d as u32);
        let mut c = [0i64; 16];
        for idx in 0..total {
            let mut rem = idx;
            for k in 0..d {
                c[k] = base[k] + (rem % width as u64) as i64 - reach;
                rem /= width as u64;
            }
            if let Some(list) = self.cells.get(&cell_key(&c[..d])) {
                for &j in list {
                    if Some(j as usize) == skip {
                        continue;
                    }
                    let p = &self.points[j as usize * d..(j as usize + 1) * d];
                    let dist2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist2 < r2 {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Number of particles with distance² < r2 from `x` (3^d neighbourhood).
    fn cover_count(&self, x: &[f64]) -> u32 {
        let d = self.dim;
        let mut base = [0i64; 16];
        for k in 0..d {
            base[k] = (x[k] * self.inv_cell).floor() as i64;
        }
        let total = 3u64.pow(d as u32);
        let mut c = [0i64; 16];
        let mut count = 0;
        // Distinct cells may share a key; visit each key once.
        let mut seen: Vec<u64> = Vec::with_capacity(total as usize);
        for idx in 0..total {
            let mut rem = idx;
            for k in 0..d {
                c[k] = base[k] + (rem % 3) as i64 - 1;
                rem /= 3;
            }
            let key = cell_key(&c[..d]);
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            if let Some(list) = self.cells.get(&key) {
                for &j in list {
                    let p = &self.points[j as usize * d..(j as usize + 1) * d];
                    let dist2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    count += (dist2 < self.r2) as u32;
                }
            }
        }
        count
    }

    /// Indices of particles within distance² < r2 in the `reach` neighbourhood.
    fn neighbours(&self, x: &[f64], reach: i64, r2: f64, out: &mut Vec<usize>) {
        out.clear();
        let d = self.dim;
        let width = 2 * reach + 1;
        let total = (width as u64).pow(d as u32);
        let mut c = [0i64; 16];
        let mut seen: Vec<u64> = Vec::with_capacity(total as usize);
        for idx in 0..total {
            let mut rem = idx;
            for k in 0..d {
                c[k] = (x[k] * self.inv_cell).floor() as i64 + (rem % width as u64) as i64 - reach;
                rem /= width as u64;
            }
            let key = cell_key(&c[..d]);
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            if let Some(list) = self.cells.get(&key) {
                for &j in list {
                    let p = &self.points[j as usize * d..(j as usize + 1) * d];
                    let dist2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist2 < r2 {
                        out.push(j as usize);
                    }
                }
            }
        }
    }

    fn pairwise_disjoint(&self) -> bool {
        let r2 = 4.0 * self.r2;
        (0..self.points.len() / self.dim)
            .all(|i| !self.any_within(&self.points[i * self.dim..(i + 1) * self.dim], 2, r2, Some(i)))
    }
}

enum Subcell {
    Full,
    Empty,
    /// Balls meeting the subcell, nearest centre first.
    Partial(Vec<u32>),
}

/// Lazily classified subcells of side r/2 over a [`BallGrid`]. Dense interiors
/// and empty space then answer coverage queries without a neighbour scan.
struct CoverCache<'g, 'a> {
    grid: &'g BallGrid<'a>,
    half: f64,
    reach_in: f64,
    reach_out: f64,
    subs: HashMap<u64, Subcell, BuildHasherDefault<MixHasher>>,
}

impl<'g, 'a> CoverCache<'g, 'a> {
    fn new(grid: &'g BallGrid<'a>) -> Self {
        let r = grid.r2.sqrt();
        let h = 0.5 * r;
        let delta = 0.5 * h * (grid.dim as f64).sqrt() + 1e-9 * r;
        Self { grid, half: h, reach_in: (r - delta).max(0.0), reach_out: r + delta, subs: HashMap::default() }
    }

    fn covered(&mut self, x: &[f64]) -> bool {
        let g = self.grid;
        let d = g.dim;
        let mut sub = [0i64; 16];
        for k in 0..d {
            sub[k] = (x[k] * 2.0 * g.inv_cell).floor() as i64;
        }
        let key = cell_key(&sub[..d]);
        if !self.subs.contains_key(&key) {
            let c = self.classify(&sub[..d]);
            self.subs.insert(key, c);
        }
        match &self.subs[&key] {
            Subcell::Full => true,
            Subcell::Empty => false,
            Subcell::Partial(list) => list.iter().any(|&j| {
                let p = &g.points[j as usize * d..(j as usize + 1) * d];
                p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() < g.r2
            }),
        }
    }

    fn classify(&self, sub: &[i64]) -> Subcell {
        let g = self.grid;
        let d = sub.len();
        let mut centre = [0.0; 16];
        let mut base = [0i64; 16];
        for k in 0..d {
            centre[k] = (sub[k] as f64 + 0.5) * self.half;
            base[k] = sub[k].div_euclid(2);
        }
        let (in2, out2) = (self.reach_in * self.reach_in, self.reach_out * self.reach_out);
        let mut near: Vec<(f64, u32)> = Vec::new();
        let mut c = [0i64; 16];
        for idx in 0..3u64.pow(d as u32) {
            let mut rem = idx;
            for k in 0..d {
                c[k] = base[k] + (rem % 3) as i64 - 1;
                rem /= 3;
            }
            let Some(list) = g.cells.get(&cell_key(&c[..d])) else { continue };
            for &j in list {
                let p = &g.points[j as usize * d..(j as usize + 1) * d];
                let dist2: f64 = p.iter().zip(&centre[..d]).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist2 < in2 {
                    return Subcell::Full;
                }
                if dist2 < out2 {
                    near.push((dist2, j));
                }
            }
        }
        if near.is_empty() {
            return Subcell::Empty;
        }
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        Subcell::Partial(near.into_iter().map(|(_, j)| j).collect())
    }
}

fn brute_covered(points: &[f64], dim: usize, r2: f64, x: &[f64]) -> bool {
    points.chunks_exact(dim).any(|p| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() < r2)
}

/// Exact area of a union of equal discs: each disc contributes the boundary
/// integral `½∮(x dy − y dx)` over its arcs not covered by other discs.
fn disc_union_area(grid: &BallGrid<'_>, radius: f64) -> f64 {
    use std::f64::consts::TAU;
    let pts = grid.points;
    let n = pts.len() / 2;
    let mut near = Vec::new();
    let mut arcs: Vec<(f64, f64)> = Vec::new();
    let mut area = 0.0;
    let four_r2 = 4.0 * radius * radius;
    'disc: for i in 0..n {
        let (cx, cy) = (pts[2 * i], pts[2 * i + 1]);
        grid.neighbours(&pts[2 * i..2 * i + 2], 2, four_r2, &mut near);
        arcs.clear();
        for &j in &near {
            if j == i {
                continue;
            }
            let (dx, dy) = (pts[2 * j] - cx, pts[2 * j + 1] - cy);
            let dist = (dx * dx + dy * dy).sqrt();
            if dist == 0.0 {
                if j < i {
                    continue 'disc;
                }
                continue;
            }
            let phi = dy.atan2(dx).rem_euclid(TAU);
            let alpha = (dist / (2.0 * radius)).min(1.0).acos();
            let (a, b) = (phi - alpha, phi + alpha);
            if a < 0.0 {
                arcs.push((a + TAU, TAU));
                arcs.push((0.0, b));
            } else if b > TAU {
                arcs.push((a, TAU));
                arcs.push((0.0, b - TAU));
            } else {
                arcs.push((a, b));
            }
        }
        arcs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let contribution = |t1: f64, t2: f64| {
            0.5 * (radius * radius * (t2 - t1) + radius * cx * (t2.sin() - t1.sin()) - radius * cy * (t2.cos() - t1.cos()))
        };
        let mut at = 0.0;
        for &(a, b) in &arcs {
            if a > at {
                area += contribution(at, a);
            }
            at = at.max(b);
        }
        if at < TAU {
            area += contribution(at, TAU);
        }
    }
    area
}

/// `N v_d(r) E[1/c(X)]` with X uniform in a uniformly chosen ball and c the
/// number of balls covering X.
fn ball_sampling<R: Rng + ?Sized>(grid: &BallGrid<'_>, radius: f64, params: &OccupationParams, rng: &mut R) -> OccupationVolume {
    let dim = grid.dim;
    let n = grid.points.len() / dim;
    let total = n as f64 * ball_volume(dim, radius);
    let mut x = vec![0.0; dim];
    let mut draw = |m: u64, rng: &mut R| {
        let mut acc = MeanAcc::default();
        for _ in 0..m {
            let i = rng.random_range(0..n);
            crate::engine::uniform_in_ball(rng, dim, radius, &mut x);
            for k in 0..dim {
                x[k] += grid.points[i * dim + k];
            }
            acc.push(1.0 / grid.cover_count(&x).max(1) as f64);
        }
        acc
    };
    let pilot = draw(params.pilot, rng);
    let cv2 = pilot.variance() / pilot.mean().powi(2);
    let needed = (cv2 / params.target_rel_se.powi(2)).ceil() as u64;
    let m = needed.clamp(params.min_samples, params.max_samples.max(params.min_samples));
    let main = draw(m, rng);
    OccupationVolume { volume: total * main.mean(), rel_se: main.se() / main.mean(), samples: m }
}

/// Lebesgue volume of the union of radius-`radius` balls centred at the particles.
pub fn occupation_volume<R: Rng + ?Sized>(
    buf: &GenerationBuffer,
    radius: f64,
    params: &OccupationParams,
    rng: &mut R,
) -> OccupationVolume {
    let dim = buf.dim();
    let count = buf.len();
    if count == 0 || radius <= 0.0 {
        return OccupationVolume { volume: 0.0, rel_se: 0.0, samples: 0 };
    }
    let single = ball_volume(dim, radius);
    if count == 1 {
        return OccupationVolume { volume: single, rel_se: 0.0, samples: 0 };
    }
    if dim == 1 {
        let mut xs: Vec<f64> = buf.positions().to_vec();
        xs.sort_by(f64::total_cmp);
        let mut total = 0.0;
        let (mut lo, mut hi) = (xs[0] - radius, xs[0] + radius);
        for &x in &xs[1..] {
            if x - radius > hi {
                total += hi - lo;
                lo = x - radius;
            }
            hi = x + radius;
        }
        total += hi - lo;
        return OccupationVolume { volume: total, rel_se: 0.0, samples: 0 };
    }
    let pts = buf.positions();
    let grid = (dim <= 6).then(|| BallGrid::new(pts, dim, radius));
    if let Some(g) = &grid {
        if g.pairwise_disjoint() {
            return OccupationVolume { volume: count as f64 * single, rel_se: 0.0, samples: 0 };
        }
        match (params.method, dim) {
            (OccupationMethod::Auto, 2) => {
                return OccupationVolume { volume: disc_union_area(g, radius), rel_se: 0.0, samples: 0 };
            }
            (OccupationMethod::BallSampling, _) => return ball_sampling(g, radius, params, rng),
            _ => {}
        }
    }
    if let (Some(g), OccupationMethod::Auto) = (&grid, params.method) {
        let comps = overlap_components(g, radius);
        if comps.len() > 1 {
            return clusterwise_sampling(pts, dim, radius, &comps, params, rng);
        }
    }
    box_sampling(pts, dim, radius, grid, params, rng)
}

/// Groups of balls connected through pairwise overlaps.
fn overlap_components(grid: &BallGrid<'_>, radius: f64) -> Vec<Vec<usize>> {
    let d = grid.dim;
    let n = grid.points.len() / d;
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let union = |parent: &mut [usize], i: usize, j: usize| {
        let (a, b) = (root(parent, i), root(parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    };
    if d < 4 {
        // A cell's diagonal is below 2r, so its balls overlap pairwise. Cell pairs
        // are searched only while they are still apart.
        let r4 = 4.0 * radius * radius;
        let pt = |i: u32| &grid.points[i as usize * d..(i as usize + 1) * d];
        let mut base = [0i64; 16];
        let mut c = [0i64; 16];
        for list in grid.cells.values() {
            for &j in &list[1..] {
                union(&mut parent, list[0] as usize, j as usize);
            }
        }
        for list in grid.cells.values() {
            for (k, b) in base[..d].iter_mut().enumerate() {
                *b = (pt(list[0])[k] * grid.inv_cell).floor() as i64;
            }
            for idx in 0..5u64.pow(d as u32) {
                let mut rem = idx;
                for k in 0..d {
                    c[k] = base[k] + (rem % 5) as i64 - 2;
                    rem /= 5;
                }
                if c[..d] == base[..d] {
                    continue;
                }
                let Some(other) = grid.cells.get(&cell_key(&c[..d])) else { continue };
                if root(&mut parent, list[0] as usize) == root(&mut parent, other[0] as usize) {
                    continue;
                }
                let touching = list.iter().any(|&i| {
                    other.iter().any(|&j| pt(i).iter().zip(pt(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() < r4)
                });
                if touching {
                    union(&mut parent, list[0] as usize, other[0] as usize);
                }
            }
        }
    } else {
        let mut near = Vec::new();
        for i in 0..n {
            grid.neighbours(&grid.points[i * d..(i + 1) * d], 2, 4.0 * radius * radius, &mut near);
            for &j in &near {
                union(&mut parent, i, j);
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let r = root(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Clusters up to this size are checked against every ball directly.
const SMALL_CLUSTER: usize = 24;

/// Volume of the intersection of two radius-`r` balls at distance `t`:
/// `v_d(r)·I_{1−t²/4r²}((d+1)/2, 1/2)`.
fn lens_volume(dim: usize, r: f64, t: f64) -> f64 {
    if t >= 2.0 * r {
        return 0.0;
    }
    let x = 1.0 - (t / (2.0 * r)).powi(2);
    ball_volume(dim, r) * statrs::function::beta::beta_reg((dim as f64 + 1.0) / 2.0, 0.5, x)
}

/// Singletons and pairs exactly, every larger cluster in its own bounding box.
fn clusterwise_sampling<R: Rng + ?Sized>(
    pts: &[f64],
    dim: usize,
    radius: f64,
    comps: &[Vec<usize>],
    params: &OccupationParams,
    rng: &mut R,
) -> OccupationVolume {
    let single = ball_volume(dim, radius);
    let mut exact = 0.0;
    let mut boxes = Vec::new();
    for c in comps {
        match c.len() {
            1 => exact += single,
            2 => {
                let (a, b) = (&pts[c[0] * dim..(c[0] + 1) * dim], &pts[c[1] * dim..(c[1] + 1) * dim]);
                let t = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                exact += 2.0 * single - lens_volume(dim, radius, t);
            }
            _ => {
                let sub: Vec<f64> = c.iter().flat_map(|&i| pts[i * dim..(i + 1) * dim].iter().copied()).collect();
                boxes.push(BoxSampler::new(sub, dim, radius));
            }
        }
    }
    if boxes.is_empty() {
        return OccupationVolume { volume: exact, rel_se: 0.0, samples: 0 };
    }
    // Pilots size a joint allocation m_c ∝ V_c·sqrt((1 - p_c)/p_c) that meets
    // the relative target for the total. Main samples are fresh, so no bias.
    let pilots: Vec<f64> = boxes.iter_mut().map(|b| b.pilot_fraction(params.pilot, rng)).collect();
    let weights: Vec<f64> = boxes.iter().zip(&pilots).map(|(b, &p)| b.volume * ((1.0 - p) / p).sqrt()).collect();
    let total_guess = exact + boxes.iter().zip(&pilots).map(|(b, &p)| b.volume * p).sum::<f64>();
    let scale = weights.iter().sum::<f64>() / (params.target_rel_se * total_guess).powi(2);
    let floor = (params.min_samples / boxes.len() as u64).max(64);
    let (mut volume, mut var, mut samples) = (exact, 0.0, 0);
    for (b, w) in boxes.iter_mut().zip(&weights) {
        let m = ((w * scale).ceil() as u64).clamp(floor, params.max_samples.max(floor));
        let h = b.hits(m, rng);
        let p = h as f64 / m as f64;
        volume += b.volume * p;
        var += b.volume * b.volume * p * (1.0 - p) / m as f64;
        samples += m;
    }
    OccupationVolume { volume, rel_se: var.sqrt() / volume, samples }
}

/// Uniform points in the bounding box of a set of balls.
struct BoxSampler<'a> {
    pts: std::borrow::Cow<'a, [f64]>,
    dim: usize,
    r2: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
    volume: f64,
    grid: Option<BallGrid<'a>>,
}

impl<'a> BoxSampler<'a> {
    fn new(pts: Vec<f64>, dim: usize, radius: f64) -> Self {
        BoxSampler::bounds(std::borrow::Cow::Owned(pts), dim, radius)
    }

    fn borrowed(pts: &'a [f64], dim: usize, radius: f64, grid: Option<BallGrid<'a>>) -> Self {
        BoxSampler { grid, ..BoxSampler::bounds(std::borrow::Cow::Borrowed(pts), dim, radius) }
    }

    fn bounds(pts: std::borrow::Cow<'a, [f64]>, dim: usize, radius: f64) -> Self {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in pts.chunks_exact(dim) {
            for k in 0..dim {
                lo[k] = lo[k].min(p[k] - radius);
                hi[k] = hi[k].max(p[k] + radius);
            }
        }
        let volume = lo.iter().zip(&hi).map(|(a, b)| b - a).product();
        BoxSampler { pts, dim, r2: radius * radius, lo, hi, volume, grid: None }
    }

    fn hits<R: Rng + ?Sized>(&self, m: u64, rng: &mut R) -> u64 {
        let radius = self.r2.sqrt();
        let owned_grid;
        let grid = match &self.grid {
            Some(g) => Some(g),
            None if self.pts.len() / self.dim > SMALL_CLUSTER && self.dim <= 6 => {
                // Owned points cannot hold a grid borrowing them, so it lives per call.
                owned_grid = BallGrid::new(&self.pts, self.dim, radius);
                Some(&owned_grid)
            }
            None => None,
        };
        let mut cache = grid.map(CoverCache::new);
        let mut x = vec![0.0; self.dim];
        let mut h = 0;
        for _ in 0..m {
            for (k, xk) in x.iter_mut().enumerate() {
                *xk = self.lo[k] + (self.hi[k] - self.lo[k]) * rng.random::<f64>();
            }
            let c = match cache.as_mut() {
                Some(cc) => cc.covered(&x),
                None => brute_covered(&self.pts, self.dim, self.r2, &x),
            };
            h += c as u64;
        }
        h
    }

    /// Covered fraction from a pilot, kept away from 0 and 1.
    fn pilot_fraction<R: Rng + ?Sized>(&mut self, m: u64, rng: &mut R) -> f64 {
        (self.hits(m, rng) as f64 + 0.5) / (m as f64 + 1.0)
    }
}

/// One bounding box for the whole union.
fn box_sampling<R: Rng + ?Sized>(
    pts: &[f64],
    dim: usize,
    radius: f64,
    grid: Option<BallGrid<'_>>,
    params: &OccupationParams,
    rng: &mut R,
) -> OccupationVolume {
    let mut b = BoxSampler::borrowed(pts, dim, radius, grid);
    // The pilot only sizes the main sample, which keeps the estimate unbiased.
    let p_pilot = b.pilot_fraction(params.pilot, rng);
    let needed = ((1.0 - p_pilot) / (p_pilot * params.target_rel_se.powi(2))).ceil() as u64;
    let m = needed.clamp(params.min_samples, params.max_samples.max(params.min_samples));
    let h = b.hits(m, rng);
    let p = h as f64 / m as f64;
    let rel_se = if h == 0 { f64::INFINITY } else { ((1.0 - p) / (p * m as f64)).sqrt() };
    OccupationVolume { volume: b.volume * p, rel_se, samples: m }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeMode {
    /// Unconditioned trees; extinct ones contribute zero.
    Plain,
    /// Trees conditioned to survive, weighted by the exact `Q_n`.
    Conditioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FOptions {
    pub mode: TreeMode,
    pub occupation: OccupationParams,
    pub caps: Caps,
}

impl Default for FOptions {
    fn default() -> Self {
        Self { mode: TreeMode::Conditioned, occupation: OccupationParams::default(), caps: Caps::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FEstimate {
    pub r: f64,
    pub f_hat: f64,
    pub se: f64,
    pub replicates: u64,
    pub truncated: u64,
    pub bias_budget: f64,
    /// `exp(−F̂)` and its delta-method standard error.
    pub p_hat: f64,
    pub p_se: f64,
}

#[derive(Clone)]
struct FAcc {
    vol: Vec<MeanAcc>,
    truncated: u64,
    max_vol: f64,
}

/// Occupation-volume estimate of `F(r)` for every `r` in the grid.
#[allow(clippy::too_many_arguments)]
pub fn estimate_f(
    regime: &ScalingRegime,
    off: &OffspringLaw,
    step: &StepLaw,
    r_grid: &[f64],
    replicates: u64,
    seed: u64,
    workers: usize,
    opts: &FOptions,
) -> Result<Vec<FEstimate>> {
    if replicates == 0 {
        return Err(Error::InvalidArgument("need at least one replicate".into()));
    }
    if step.dim() != regime.dim {
        return Err(Error::InvalidArgument(format!("step law dimension {} vs regime d={}", step.dim(), regime.dim)));
    }
    let n = regime.n;
    let trees = ConditionedTrees::new(off, step, n);
    let qn = trees.survival();
    let tree_key = StreamKey::new(seed, tags::TREE);
    let occ_key = StreamKey::new(seed, tags::OCCUPATION);
    let radii: Vec<f64> = r_grid.iter().map(|r| r * regime.rho).collect();
    let acc = fold_replicates(
        workers,
        replicates,
        || FAcc { vol: vec![MeanAcc::default(); radii.len()], truncated: 0, max_vol: 0.0 },
        |acc, rep| {
            let mut rng = tree_key.stream(rep);
            let (buf, weight) = match opts.mode {
                TreeMode::Plain => {
                    let t = run_tree(off, step, n, &opts.caps, &mut rng, false);
                    if t.truncated {
                        acc.truncated += 1;
                    }
                    (t.final_buffer, 1.0)
                }
                TreeMode::Conditioned => (trees.sample(&vec![0.0; step.dim()], &mut rng), qn),
            };
            let mut occ_rng = occ_key.stream(rep);
            for (a, &rad) in acc.vol.iter_mut().zip(&radii) {
                let v = occupation_volume(&buf, rad, &opts.occupation, &mut occ_rng).volume * weight;
                acc.max_vol = acc.max_vol.max(v);
                a.push(v);
            }
        },
        |a, b| {
            for (x, y) in a.vol.iter_mut().zip(&b.vol) {
                x.merge(y);
            }
            a.truncated += b.truncated;
            a.max_vol = a.max_vol.max(b.max_vol);
        },
    );
    Ok(r_grid
        .iter()
        .zip(&acc.vol)
        .map(|(&r, m)| {
            let f = m.mean();
            let se = m.se();
            let bias = acc.truncated as f64 / replicates as f64 * acc.max_vol;
            let p = (-f).exp();
            FEstimate { r, f_hat: f, se, replicates, truncated: acc.truncated, bias_budget: bias, p_hat: p, p_se: p * se }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowPlan {
    pub radius: f64,
    pub slack: f64,
    /// Upper bound on `P_window − P_field` for each r.
    pub bias: Vec<f64>,
}

/// Chooses the window `B(0, ρ r_max + slack)` with the smallest slack for which
/// `v_d(ρ r_max)·P(|S_n| ≥ slack) ≤ ε/2`. That product bounds the probability
/// that a particle descended from outside the window enters the ball.
pub fn plan_window(regime: &ScalingRegime, step: &StepLaw, r_grid: &[f64], epsilon: f64) -> WindowPlan {
    let dim = step.dim();
    let r_max = r_grid.iter().cloned().fold(0.0, f64::max) * regime.rho;
    let bound = |s: f64, rr: f64| ball_volume(dim, rr) * step.displacement_tail_bound(regime.n, s);
    let target = epsilon / 2.0;
    let (mut lo, mut hi) = (0.0, ((regime.n.max(1)) as f64 * step.lambda_max()).sqrt());
    while bound(hi, r_max) > target {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if bound(mid, r_max) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let slack = hi.max(1e-9);
    let radius = r_max + slack;
    let bias = r_grid.iter().map(|&r| bound(radius - r * regime.rho, r * regime.rho)).collect();
    WindowPlan { radius, slack, bias }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredSource {
    Pde,
    Spine,
    ClosedForm,
}

impl fmt::Display for PredSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredSource::Pde => "pde",
            PredSource::Spine => "spine",
            PredSource::ClosedForm => "closed-form",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfEstimate {
    pub r: f64,
    pub p_hat: f64,
    pub se: f64,
    pub replicates: u64,
    pub bias_budget: f64,
    pub predicted: Option<(f64, PredSource)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectResult {
    pub window: WindowPlan,
    pub estimates: Vec<CdfEstimate>,
    pub mean_ancestors: f64,
}

/// Field-simulation estimate of `P(R_n ≥ ρ_n r)` for every `r` in the grid.
#[allow(clippy::too_many_arguments)]
pub fn estimate_direct(
    regime: &ScalingRegime,
    off: &OffspringLaw,
    step: &StepLaw,
    r_grid: &[f64],
    runs: u64,
    seed: u64,
    workers: usize,
    epsilon: f64,
    caps: &Caps,
) -> Result<DirectResult> {
    if runs == 0 {
        return Err(Error::InvalidArgument("need at least one field run".into()));
    }
    if step.dim() != regime.dim {
        return Err(Error::InvalidArgument(format!("step law dimension {} vs regime d={}", step.dim(), regime.dim)));
    }
    let plan = plan_window(regime, step, r_grid, epsilon);
    let trees = ConditionedTrees::new(off, step, regime.n);
    // Fail on sizing before any work is scheduled.
    let vol = ball_volume(step.dim(), plan.radius);
    if vol > caps.field_particles {
        return Err(Error::Sizing(format!(
            "window radius {:.3} holds about {vol:.3e} particles, above the budget {:.3e}",
            plan.radius, caps.field_particles
        )));
    }
    let key = StreamKey::new(seed, tags::FIELD);
    let thresholds: Vec<f64> = r_grid.iter().map(|r| r * regime.rho).collect();
    let (hits, ancestors, err) = fold_replicates(
        workers,
        runs,
        || (vec![0u64; thresholds.len()], 0u64, None::<String>),
        |acc, rep| {
            let mut rng = key.stream(rep);
            match field_rmin_thinned(&trees, plan.radius, caps, &mut rng) {
                Ok((count, rmin)) => {
                    acc.1 += count;
                    for (h, &t) in acc.0.iter_mut().zip(&thresholds) {
                        if rmin >= t {
                            *h += 1;
                        }
                    }
                }
                Err(e) => acc.2 = Some(e.to_string()),
            }
        },
        |a, b| {
            for (x, y) in a.0.iter_mut().zip(&b.0) {
                *x += y;
            }
            a.1 += b.1;
            if a.2.is_none() {
                a.2 = b.2;
            }
        },
    );
    if let Some(e) = err {
        return Err(Error::Sizing(e));
    }
    let estimates = r_grid
        .iter()
        .zip(&hits)
        .zip(&plan.bias)
        .map(|((&r, &h), &bias)| {
            let (p, se) = proportion(h, runs);
            CdfEstimate {
                r,
                p_hat: p,
                se,
                replicates: runs,
                bias_budget: bias,
                predicted: regime.closed_form_limit(off, r).map(|v| (v, PredSource::ClosedForm)),
            }
        })
        .collect();
    Ok(DirectResult { window: plan, estimates, mean_ancestors: ancestors as f64 / runs as f64 })
}

/// One CSV row of the empty-ball table.
#[derive(Debug, Clone, Serialize)]
pub struct EmptyBallRow {
    pub regime: String,
    pub d: usize,
    pub n: u64,
    pub r: f64,
    pub estimator: String,
    pub p_hat: f64,
    pub se: f64,
    pub bias_budget: f64,
    pub predicted: Option<f64>,
    pub pred_source: Option<String>,
}

impl EmptyBallRow {
    pub fn from_f(regime: &ScalingRegime, e: &FEstimate, predicted: Option<(f64, PredSource)>) -> Self {
        Self {
            regime: regime.kind.to_string(),
            d: regime.dim,
            n: regime.n,
            r: e.r,
            estimator: "occupation".into(),
            p_hat: e.p_hat,
            se: e.p_se,
            bias_budget: e.bias_budget,
            predicted: predicted.map(|p| p.0),
            pred_source: predicted.map(|p| p.1.to_string()),
        }
    }

    pub fn from_direct(regime: &ScalingRegime, e: &CdfEstimate) -> Self {
        Self {
            regime: regime.kind.to_string(),
            d: regime.dim,
            n: regime.n,
            r: e.r,
            estimator: "direct".into(),
            p_hat: e.p_hat,
            se: e.se,
            bias_budget: e.bias_budget,
            predicted: e.predicted.map(|p| p.0),
            pred_source: e.predicted.map(|p| p.1.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> crate::rng::StreamRng {
        StreamKey::new(1, tags::OCCUPATION).stream(0)
    }

    #[test]
    fn occupation_simple_configurations() {
        let p = OccupationParams::default();
        let empty = GenerationBuffer::empty(2, 0);
        assert_eq!(occupation_volume(&empty, 1.0, &p, &mut rng()).volume, 0.0);
        let one = GenerationBuffer::from_positions(2, vec![0.3, -0.2], 0);
        let v = occupation_volume(&one, 0.7, &p, &mut rng()).volume;
        assert!((v - std::f64::consts::PI * 0.49).abs() < 0.01 * v);
        let two = GenerationBuffer::from_positions(2, vec![0.0, 0.0, 2.5, 0.0], 0);
        let v = occupation_volume(&two, 1.0, &p, &mut rng()).volume;
        assert!((v - 2.0 * std::f64::consts::PI).abs() < 0.01 * v);
    }

    #[test]
    fn overlapping_discs_against_lens_formula() {
        // Two unit discs at distance 1: union = 2π − (2π/3 − √3/2).
        let p = OccupationParams { method: OccupationMethod::BoundingBox, ..OccupationParams::default() };
        let buf = GenerationBuffer::from_positions(2, vec![0.0, 0.0, 1.0, 0.0], 0);
        let exact = 2.0 * std::f64::consts::PI - (2.0 * std::f64::consts::PI / 3.0 - 3f64.sqrt() / 2.0);
        let mut acc = MeanAcc::default();
        for rep in 0..50 {
            let mut r = StreamKey::new(2, tags::OCCUPATION).stream(rep);
            let o = occupation_volume(&buf, 1.0, &p, &mut r);
            assert!(o.rel_se <= 0.0105, "{}", o.rel_se);
            acc.push(o.volume);
        }
        assert!((acc.mean() - exact).abs() < 4.0 * acc.se(), "{} vs {exact}", acc.mean());
    }

    #[test]
    fn exact_disc_union_against_sampling() {
        let key = StreamKey::new(3, tags::OCCUPATION);
        let mut r = key.stream(0);
        let mut pts = Vec::new();
        for _ in 0..60 {
            pts.push(3.0 * (r.random::<f64>() - 0.5));
            pts.push(3.0 * (r.random::<f64>() - 0.5));
        }
        let buf = GenerationBuffer::from_positions(2, pts, 0);
        let exact = occupation_volume(&buf, 0.4, &OccupationParams::default(), &mut r).volume;
        for method in [OccupationMethod::BoundingBox, OccupationMethod::BallSampling] {
            let params = OccupationParams { method, min_samples: 200_000, ..OccupationParams::default() };
            let est = occupation_volume(&buf, 0.4, &params, &mut key.stream(1));
            assert!((est.volume - exact).abs() < 4.0 * est.rel_se * est.volume, "{method:?}: {} vs {exact}", est.volume);
        }
        let lens = GenerationBuffer::from_positions(2, vec![0.0, 0.0, 1.0, 0.0], 0);
        let v = occupation_volume(&lens, 1.0, &OccupationParams::default(), &mut r).volume;
        let formula = 2.0 * std::f64::consts::PI - (2.0 * std::f64::consts::PI / 3.0 - 3f64.sqrt() / 2.0);
        assert!((v - formula).abs() < 1e-12);
    }

    #[test]
    fn lens_volume_closed_forms() {
        use std::f64::consts::PI;
        for t in [0.0, 0.3, 1.0, 1.7, 2.0] {
            let disc = 2.0 * (t / 2.0f64).acos() - 0.5 * t * (4.0 - t * t).sqrt();
            assert!((lens_volume(2, 1.0, t) - disc).abs() < 1e-12, "d=2 t={t}");
            let ball = PI * (2.0 - t).powi(2) * (t + 4.0) / 12.0;
            assert!((lens_volume(3, 1.0, t) - ball).abs() < 1e-12, "d=3 t={t}");
        }
        assert_eq!(lens_volume(4, 1.0, 2.5), 0.0);
        assert!((lens_volume(5, 2.0, 0.0) - ball_volume(5, 2.0)).abs() < 1e-12);
    }

    fn cloud(n: usize, dim: usize, spread: f64, r: &mut impl Rng) -> Vec<f64> {
        (0..n * dim).map(|_| spread * (r.random::<f64>() - 0.5)).collect()
    }

    #[test]
    fn cover_cache_matches_brute_force() {
        let mut r = rng();
        for (dim, n, spread) in [(2, 300, 6.0), (3, 400, 5.0), (3, 20, 8.0)] {
            let pts = cloud(n, dim, spread, &mut r);
            let grid = BallGrid::new(&pts, dim, 0.7);
            let mut cache = CoverCache::new(&grid);
            for _ in 0..20_000 {
                let x: Vec<f64> = (0..dim).map(|_| (spread + 2.0) * (r.random::<f64>() - 0.5)).collect();
                assert_eq!(cache.covered(&x), brute_covered(&pts, dim, 0.49, &x));
            }
        }
    }

    #[test]
    fn components_match_pairwise_union() {
        let mut r = rng();
        for (dim, n) in [(2, 150), (3, 200), (4, 120)] {
            let pts = cloud(n, dim, 10.0, &mut r);
            let radius = 0.6;
            let grid = BallGrid::new(&pts, dim, radius);
            let mut label: Vec<usize> = (0..n).collect();
            // Relabel to a fixed point over all overlapping pairs.
            loop {
                let mut changed = false;
                for i in 0..n {
                    for j in 0..n {
                        let d2: f64 = (0..dim).map(|k| (pts[i * dim + k] - pts[j * dim + k]).powi(2)).sum();
                        if d2 < 4.0 * radius * radius && label[j] < label[i] {
                            label[i] = label[j];
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            let mut expected: HashMap<usize, Vec<usize>> = HashMap::new();
            for (i, &l) in label.iter().enumerate() {
                expected.entry(l).or_default().push(i);
            }
            let mut expected: Vec<Vec<usize>> = expected.into_values().collect();
            expected.sort_by_key(|g| g[0]);
            assert_eq!(overlap_components(&grid, radius), expected, "d={dim}");
        }
    }

    #[test]
    fn clusters_sampled_separately() {
        use std::f64::consts::PI;
        let lens = |t: f64| PI * (2.0 - t).powi(2) * (t + 4.0) / 12.0;
        let pts = vec![0.0, 0.0, 0.0, 1.5, 0.0, 0.0, 20.0, 0.0, 0.0, 0.0, 30.0, 0.0, 0.0, 30.5, 0.0, 0.0, 60.0, 0.0, 0.0, 61.8, 0.0, 0.0, 63.6, 0.0];
        let buf = GenerationBuffer::from_positions(3, pts, 0);
        let v = 4.0 * PI / 3.0;
        // The triple at spacing 1.8 has no point in all three balls.
        let exact = 8.0 * v - lens(1.5) - lens(0.5) - 2.0 * lens(1.8);
        let est = occupation_volume(&buf, 1.0, &OccupationParams::default(), &mut rng());
        assert!(est.rel_se <= 0.011);
        assert!((est.volume - exact).abs() < 4.0 * est.rel_se * exact, "{} vs {exact}", est.volume);
        let whole = OccupationParams { method: OccupationMethod::BoundingBox, ..OccupationParams::default() };
        let est_box = occupation_volume(&buf, 1.0, &whole, &mut rng());
        assert!((est_box.volume - exact).abs() < 4.0 * est_box.rel_se * exact);
        assert!(est.samples < est_box.samples);
    }

    #[test]
    fn ball_sampling_three_dimensions() {
        // Two unit balls at distance t overlap in a lens of volume π(2 − t)²(t + 4)/12, 5π/12 at t = 1.
        let buf = GenerationBuffer::from_positions(3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0], 0);
        let exact = 8.0 * std::f64::consts::PI / 3.0 - 5.0 * std::f64::consts::PI / 12.0;
        for method in [OccupationMethod::Auto, OccupationMethod::BallSampling] {
            let params = OccupationParams { method, ..OccupationParams::default() };
            let est = occupation_volume(&buf, 1.0, &params, &mut rng());
            assert!(est.rel_se <= 0.011);
            assert!((est.volume - exact).abs() < 4.0 * est.rel_se * exact, "{method:?} {} {} {exact}", est.volume, est.rel_se);
        }
    }

    #[test]
    fn interval_union_exact() {
        let p = OccupationParams::default();
        let buf = GenerationBuffer::from_positions(1, vec![0.0, 0.5, 3.0], 0);
        let v = occupation_volume(&buf, 1.0, &p, &mut rng()).volume;
        assert!((v - (2.5 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn regime_validation() {
        let b = OffspringLaw::parse("binary").unwrap();
        let st = OffspringLaw::parse("stable:beta=0.5").unwrap();
        assert!(ScalingRegime::new(RegimeKind::Diffusive, 100, &b, 2).is_ok());
        assert!(ScalingRegime::new(RegimeKind::SmallBall, 100, &b, 2).is_err());
        assert!(ScalingRegime::new(RegimeKind::Fixed, 100, &b, 2).is_err());
        assert!(ScalingRegime::new(RegimeKind::Fixed, 100, &b, 3).is_ok());
        assert!(ScalingRegime::new(RegimeKind::Diffusive, 100, &st, 4).is_ok());
        let sb = ScalingRegime::new(RegimeKind::SmallBall, 64, &st, 3).unwrap();
        let b_n = sb.b_n.unwrap();
        assert!((b_n - (64.0f64 / 1.5).powf(1.0 / 1.5)).abs() < 1e-12);
        assert_eq!(RegimeKind::natural(&st, 3).unwrap(), RegimeKind::SmallBall);
        let pred = sb.closed_form_limit(&st, 0.3).unwrap();
        assert!((pred - 0.637).abs() < 1e-3, "{pred}");
    }

    #[test]
    fn zero_generation_f_is_ball_volume() {
        let off = OffspringLaw::parse("binary").unwrap();
        let step = StepLaw::parse("gauss:d=2,eta2=1").unwrap();
        let regime = ScalingRegime { kind: RegimeKind::Diffusive, n: 0, dim: 2, rho: 1.0, b_n: None, b_n_recursion: None };
        for mode in [TreeMode::Plain, TreeMode::Conditioned] {
            let opts = FOptions { mode, ..FOptions::default() };
            let est = estimate_f(&regime, &off, &step, &[0.5, 1.0], 10, 3, 1, &opts).unwrap();
            assert!((est[0].f_hat - std::f64::consts::PI * 0.25).abs() < 1e-12);
            assert!((est[1].f_hat - std::f64::consts::PI).abs() < 1e-12);
        }
    }

    #[test]
    fn window_bound_decreases_with_slack() {
        let off = OffspringLaw::parse("binary").unwrap();
        let step = StepLaw::parse("gauss:d=2,eta2=1").unwrap();
        let regime = ScalingRegime::new(RegimeKind::Diffusive, 100, &off, 2).unwrap();
        let plan = plan_window(&regime, &step, &[0.25, 0.5], 0.01);
        assert!(plan.bias.iter().all(|&b| b < 0.005));
        assert!(plan.bias[0] <= plan.bias[1]);
        assert!(plan.radius > 5.0);
    }
}

//! Generation-by-generation evolution of branching random walks.

use crate::error::{Error, Result};
use crate::laws::{OffspringLaw, StepLaw};
use crate::special::ball_volume;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use serde::Serialize;

/// Positions of one generation, stored flat with stride `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationBuffer {
    dim: usize,
    positions: Vec<f64>,
    generation: u64,
}

impl GenerationBuffer {
    pub fn empty(dim: usize, generation: u64) -> Self {
        Self { dim, positions: Vec::new(), generation }
    }

    /// A single particle at the origin, generation 0.
    pub fn origin(dim: usize) -> Self {
        Self { dim, positions: vec![0.0; dim], generation: 0 }
    }

    pub fn from_positions(dim: usize, positions: Vec<f64>, generation: u64) -> Self {
        assert_eq!(positions.len() % dim, 0, "position array length must be a multiple of dim");
        Self { dim, positions, generation }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn into_positions(self) -> Vec<f64> {
        self.positions
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.positions.chunks_exact(self.dim)
    }

    /// Smallest Euclidean norm over the particles, ∞ if empty.
    pub fn min_norm(&self) -> f64 {
        self.points().map(|p| p.iter().map(|x| x * x).sum::<f64>()).fold(f64::INFINITY, f64::min).sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.positions.iter_mut().for_each(|x| *x *= factor);
    }

    fn push_child<R: Rng + ?Sized>(&mut self, parent: &[f64], step: &StepLaw, rng: &mut R) {
        let start = self.positions.len();
        self.positions.extend_from_slice(parent);
        step.add_step(rng, &mut self.positions[start..]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct Caps {
    pub generations: u64,
    pub progeny: u64,
    /// Largest expected number of initial particles a field run may allocate.
    pub field_particles: f64,
}

impl Default for Caps {
    fn default() -> Self {
        Self { generations: 1_000_000, progeny: 1_000_000_000, field_particles: 5e7 }
    }
}

#[derive(Debug, Clone)]
pub struct Evolved {
    pub buffer: GenerationBuffer,
    /// Set when the child budget ran out part way.
    pub truncated: bool,
}

/// One generation step: each parent draws its offspring count and every child
/// takes an independent step from the parent's position.
pub fn evolve_generation<R: Rng + ?Sized>(
    buf: &GenerationBuffer,
    off: &OffspringLaw,
    step: &StepLaw,
    rng: &mut R,
    child_budget: u64,
) -> Evolved {
    let mut next = GenerationBuffer::empty(buf.dim, buf.generation + 1);
    let mut made = 0u64;
    for parent in buf.points() {
        let k = off.sample(rng);
        if made + k > child_budget {
            return Evolved { buffer: next, truncated: true };
        }
        made += k;
        for _ in 0..k {
            next.push_child(parent, step, rng);
        }
    }
    Evolved { buffer: next, truncated: false }
}

#[derive(Debug, Clone)]
pub struct TreeRunStats {
    /// Last generation index with at least one particle.
    pub generations_survived: u64,
    pub total_progeny: u64,
    pub final_buffer: GenerationBuffer,
    /// Per-coordinate maximum over every generation visited.
    pub running_max: Option<Vec<f64>>,
    pub truncated: bool,
}

/// Runs a tree from one particle at the origin for `n` generations or until it
/// dies out. The generation count is capped by `caps.generations` as well.
pub fn run_tree<R: Rng + ?Sized>(
    off: &OffspringLaw,
    step: &StepLaw,
    n: u64,
    caps: &Caps,
    rng: &mut R,
    track_max: bool,
) -> TreeRunStats {
    let dim = step.dim();
    let mut buf = GenerationBuffer::origin(dim);
    let mut total = 1u64;
    let mut running_max = track_max.then(|| vec![0.0; dim]);
    let target = n.min(caps.generations);
    let mut truncated = n > caps.generations;
    while buf.generation < target && !buf.is_empty() {
        let budget = caps.progeny.saturating_sub(total);
        let ev = evolve_generation(&buf, off, step, rng, budget);
        total += ev.buffer.len() as u64;
        if let Some(m) = running_max.as_mut() {
            for p in ev.buffer.points() {
                for (mi, &x) in m.iter_mut().zip(p) {
                    *mi = f64::max(*mi, x);
                }
            }
        }
        buf = ev.buffer;
        if ev.truncated {
            truncated = true;
            break;
        }
    }
    let generations_survived = if buf.is_empty() { buf.generation.saturating_sub(1) } else { buf.generation };
    TreeRunStats { generations_survived, total_progeny: total, final_buffer: buf, running_max, truncated }
}

/// `Q_n = P(|Z_n| > 0)` from `Q_{k+1} = Q_k (1 − H(Q_k))`, `Q_0 = 1`.
pub fn survival_recursion(off: &OffspringLaw, n: u64) -> f64 {
    let mut q = 1.0;
    for _ in 0..n {
        q *= 1.0 - off.h(q);
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurvivalEstimate {
    pub n: u64,
    pub q_hat: f64,
    pub se: f64,
    pub replicates: u64,
    /// Replicates stopped at the progeny cap; they count as survivors.
    pub truncated: u64,
}

/// Monte Carlo estimate of `Q_n` from population counts alone.
pub fn survival_mc(off: &OffspringLaw, n: u64, replicates: u64, progeny_cap: u64, seed: u64, workers: usize) -> Result<SurvivalEstimate> {
    if replicates == 0 {
        return Err(Error::InvalidArgument("need at least one replicate".into()));
    }
    let key = crate::rng::StreamKey::new(seed, crate::rng::tags::TREE);
    let (alive, truncated) = crate::parallel::fold_replicates(
        workers,
        replicates,
        || (0u64, 0u64),
        |acc, rep| {
            let mut rng = key.stream(rep);
            let mut z = 1u64;
            let mut total = 1u64;
            for _ in 0..n {
                let mut next = 0u64;
                for _ in 0..z {
                    next = next.saturating_add(off.sample(&mut rng));
                }
                z = next;
                total = total.saturating_add(z);
                if z == 0 || total > progeny_cap {
                    break;
                }
            }
            if z > 0 {
                acc.0 += 1;
                if total > progeny_cap {
                    acc.1 += 1;
                }
            }
        },
        |a, b| {
            a.0 += b.0;
            a.1 += b.1;
        },
    );
    let (q, se) = crate::stats::proportion(alive, replicates);
    Ok(SurvivalEstimate { n, q_hat: q, se, replicates, truncated })
}

/// `[Q_0, Q_1, ..., Q_n]`.
pub fn survival_table(off: &OffspringLaw, n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut q = 1.0;
    out.push(q);
    for _ in 0..n {
        q *= 1.0 - off.h(q);
        out.push(q);
    }
    out
}

/// Uniform point in the origin-centred ball of radius `w`.
pub fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, dim: usize, w: f64, out: &mut [f64]) {
    if dim == 1 {
        out[0] = w * (2.0 * rng.random::<f64>() - 1.0);
        return;
    }
    let mut norm2 = 0.0;
    for x in out.iter_mut() {
        *x = StandardNormal.sample(rng);
        norm2 += *x * *x;
    }
    let scale = w * rng.random::<f64>().powf(1.0 / dim as f64) / norm2.sqrt();
    out.iter_mut().for_each(|x| *x *= scale);
}

#[derive(Debug, Clone)]
pub struct FieldRun {
    pub window_radius: f64,
    /// Ancestors placed in the window (only surviving ones in thinned mode).
    pub initial_count: u64,
    pub final_buffer: GenerationBuffer,
    pub r_min: f64,
    pub truncated: bool,
}

fn window_count<R: Rng + ?Sized>(rng: &mut R, mean: f64, caps: &Caps) -> Result<u64> {
    if mean > caps.field_particles {
        return Err(Error::Sizing(format!(
            "field window needs about {mean:.3e} initial particles, above the budget {:.3e}",
            caps.field_particles
        )));
    }
    if mean <= 0.0 {
        return Ok(0);
    }
    Ok(Poisson::new(mean).expect("finite positive mean").sample(rng) as u64)
}

/// Literal field run: Poisson(vol) ancestors uniform on the ball `B(0, W)`,
/// every subtree evolved `n` generations.
pub fn run_field<R: Rng + ?Sized>(
    off: &OffspringLaw,
    step: &StepLaw,
    n: u64,
    w: f64,
    caps: &Caps,
    rng: &mut R,
) -> Result<FieldRun> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(format!("window radius must be positive and finite, got {w}")));
    }
    let dim = step.dim();
    let count = window_count(rng, ball_volume(dim, w), caps)?;
    let mut positions = vec![0.0; count as usize * dim];
    for p in positions.chunks_exact_mut(dim) {
        uniform_in_ball(rng, dim, w, p);
    }
    let mut buf = GenerationBuffer::from_positions(dim, positions, 0);
    let mut truncated = false;
    let mut total = count;
    while buf.generation < n {
        if buf.is_empty() {
            buf = GenerationBuffer::empty(dim, n);
            break;
        }
        let ev = evolve_generation(&buf, off, step, rng, caps.progeny.saturating_sub(total));
        total += ev.buffer.len() as u64;
        buf = ev.buffer;
        if ev.truncated {
            truncated = true;
            break;
        }
    }
    let r_min = buf.min_norm();
    Ok(FieldRun { window_radius: w, initial_count: count, final_buffer: buf, r_min, truncated })
}

/// Number of children of a node conditioned to have descendants `h` levels
/// down, that themselves have descendants, given `q = Q_{h−1}`. Never zero.
pub(crate) fn surviving_children<R: Rng + ?Sized>(off: &OffspringLaw, q: f64, rng: &mut R) -> u64 {
    if q >= 1.0 {
        // Every child survives zero further generations; condition on k ≥ 1.
        loop {
            let k = off.sample(rng);
            if k > 0 {
                return k;
            }
        }
    }
    let ln1q = (-q).ln_1p();
    // k from the size-biased law, accepted with P(Bin(k,q) ≥ 1)/(kq).
    let k = loop {
        let k = off.sample_size_biased(rng);
        let p_any = -(k as f64 * ln1q).exp_m1();
        if rng.random::<f64>() * k as f64 * q < p_any {
            break k;
        }
    };
    // First surviving child J among 1..=k, then independent survival of the rest.
    let p_any = -(k as f64 * ln1q).exp_m1();
    let u: f64 = rng.random();
    let j = (1.0 + ((-u * p_any).ln_1p() / ln1q).floor()).clamp(1.0, k as f64) as u64;
    let rest = k - j;
    if rest == 0 {
        1
    } else {
        1 + Binomial::new(rest, q).expect("valid binomial").sample(rng)
    }
}

/// Sampler for trees conditioned to survive `n` generations.
///
/// Only lineages with descendants at generation `n` are simulated. For binary
/// offspring a lineage branches into exactly two such lineages, so the height
/// of the next branching is drawn from a cumulative hazard and the steps along
/// the unbranched stretch are added in one call.
#[derive(Debug, Clone)]
pub struct ConditionedTrees<'a> {
    off: &'a OffspringLaw,
    step: &'a StepLaw,
    n: u64,
    q_table: Vec<f64>,
    /// `hazard[h] = Σ_{j=2..h} −ln(1 − π_j)`, π_j = P(two surviving children at height j).
    hazard: Option<Vec<f64>>,
}

impl<'a> ConditionedTrees<'a> {
    pub fn new(off: &'a OffspringLaw, step: &'a StepLaw, n: u64) -> Self {
        let q_table = survival_table(off, n);
        let hazard = matches!(off.spec(), crate::laws::OffspringSpec::Binary).then(|| {
            // Height 1 always branches (π_1 = 1) and is handled separately.
            let mut acc = 0.0;
            let mut out = vec![0.0, 0.0];
            for h in 2..=n as usize {
                let q = q_table[h - 1];
                let pi = q / (2.0 - q);
                acc += -(-pi).ln_1p();
                out.push(acc);
            }
            out.truncate(n as usize + 1);
            out
        });
        Self { off, step, n, q_table, hazard }
    }

    pub fn survival(&self) -> f64 {
        self.q_table[self.n as usize]
    }

    pub fn q_table(&self) -> &[f64] {
        &self.q_table
    }

    /// Generation-`n` positions of one conditioned tree rooted at `start`.
    pub fn sample<R: Rng + ?Sized>(&self, start: &[f64], rng: &mut R) -> GenerationBuffer {
        let mut out = Vec::new();
        self.visit(start, rng, |p| out.extend_from_slice(p));
        GenerationBuffer::from_positions(self.step.dim(), out, self.n)
    }

    /// Calls `f` on every generation-`n` position of one conditioned tree.
    pub fn visit<R: Rng + ?Sized, F: FnMut(&[f64])>(&self, start: &[f64], rng: &mut R, mut f: F) {
        match &self.hazard {
            Some(h) => self.visit_binary(start, h, rng, &mut f),
            None => {
                let buf = run_tree_conditioned(self.off, self.step, start, self.n, &self.q_table, rng);
                buf.points().for_each(f);
            }
        }
    }

    fn visit_binary<R: Rng + ?Sized, F: FnMut(&[f64])>(&self, start: &[f64], hazard: &[f64], rng: &mut R, f: &mut F) {
        let dim = self.step.dim();
        let mut positions: Vec<f64> = start.to_vec();
        let mut heights: Vec<u64> = vec![self.n];
        let mut pos = [0.0f64; 16];
        while let Some(h) = heights.pop() {
            let top = positions.len() - dim;
            pos[..dim].copy_from_slice(&positions[top..]);
            positions.truncate(top);
            let pos = &mut pos[..dim];
            if h == 0 {
                f(pos);
                continue;
            }
            // No branching at heights h, ..., j (j ≥ 2) has probability exp(−(hazard[h] − hazard[j−1])).
            let e = -(1.0 - rng.random::<f64>()).ln();
            let level = hazard[h as usize] - e;
            let j = if level < 0.0 { 1 } else { hazard[..h as usize].partition_point(|&x| x <= level) as u64 };
            self.step.add_steps(rng, pos, h - j);
            for _ in 0..2 {
                let at = positions.len();
                positions.extend_from_slice(pos);
                self.step.add_step(rng, &mut positions[at..]);
                heights.push(j - 1);
            }
        }
    }
}

/// Generation-`n` positions of a single tree conditioned to survive to `n`,
/// simulated level by level. `q_table[k] = Q_k`.
pub fn run_tree_conditioned<R: Rng + ?Sized>(
    off: &OffspringLaw,
    step: &StepLaw,
    start: &[f64],
    n: u64,
    q_table: &[f64],
    rng: &mut R,
) -> GenerationBuffer {
    let dim = step.dim();
    let mut buf = GenerationBuffer::from_positions(dim, start.to_vec(), 0);
    for level in 0..n {
        let q = q_table[(n - level - 1) as usize];
        let mut next = GenerationBuffer::empty(dim, level + 1);
        for parent in buf.points() {
            let m = surviving_children(off, q, rng);
            for _ in 0..m {
                next.push_child(parent, step, rng);
            }
        }
        buf = next;
    }
    buf
}

/// Field run that only places ancestors whose lineage survives to generation
/// `n`: Poisson(vol·Q_n) of them, each grown conditioned on survival. Its
/// generation-`n` point process has the same law as that of [`run_field`].
pub fn run_field_thinned<R: Rng + ?Sized>(
    trees: &ConditionedTrees<'_>,
    w: f64,
    caps: &Caps,
    rng: &mut R,
) -> Result<FieldRun> {
    if !(w > 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(format!("window radius must be positive and finite, got {w}")));
    }
    let dim = trees.step.dim();
    let n = trees.n;
    let qn = trees.survival();
    // Expected generation-n particles equal the window volume.
    let vol = ball_volume(dim, w);
    if vol > caps.field_particles {
        return Err(Error::Sizing(format!(
            "field window holds about {vol:.3e} generation-{n} particles, above the budget {:.3e}",
            caps.field_particles
        )));
    }
    let count = window_count(rng, vol * qn, caps)?;
    let mut all = Vec::new();
    let mut start = vec![0.0; dim];
    for _ in 0..count {
        uniform_in_ball(rng, dim, w, &mut start);
        let tree = trees.sample(&start, rng);
        all.extend_from_slice(tree.positions());
    }
    let buf = GenerationBuffer::from_positions(dim, all, n);
    let r_min = buf.min_norm();
    Ok(FieldRun { window_radius: w, initial_count: count, final_buffer: buf, r_min, truncated: false })
}

/// Same law as [`run_field_thinned`] but only the minimum norm over the
/// generation-`n` field is kept. Returns `(surviving ancestors, r_min)`.
pub fn field_rmin_thinned<R: Rng + ?Sized>(
    trees: &ConditionedTrees<'_>,
    w: f64,
    caps: &Caps,
    rng: &mut R,
) -> Result<(u64, f64)> {
    let dim = trees.step.dim();
    let vol = ball_volume(dim, w);
    if vol > caps.field_particles {
        return Err(Error::Sizing(format!(
            "field window holds about {vol:.3e} generation-{} particles, above the budget {:.3e}",
            trees.n, caps.field_particles
        )));
    }
    let count = window_count(rng, vol * trees.survival(), caps)?;
    let mut start = vec![0.0; dim];
    let mut best = f64::INFINITY;
    for _ in 0..count {
        uniform_in_ball(rng, dim, w, &mut start);
        trees.visit(&start, rng, |p| {
            let r2: f64 = p.iter().map(|x| x * x).sum();
            best = best.min(r2);
        });
    }
    Ok((count, best.sqrt()))
}

/// Per-replicate CSV summary row.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateSummary {
    pub replicate: u64,
    pub survived: u64,
    pub progeny: u64,
    pub rmin: f64,
    pub truncated: bool,
}

impl ReplicateSummary {
    pub fn from_tree(replicate: u64, stats: &TreeRunStats) -> Self {
        Self {
            replicate,
            survived: stats.generations_survived,
            progeny: stats.total_progeny,
            rmin: stats.final_buffer.min_norm(),
            truncated: stats.truncated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tags, StreamKey};

    fn laws(off: &str, step: &str) -> (OffspringLaw, StepLaw) {
        (OffspringLaw::parse(off).unwrap(), StepLaw::parse(step).unwrap())
    }

    #[test]
    fn survival_mc_matches_recursion() {
        for spec in ["binary", "geometric"] {
            let off = OffspringLaw::parse(spec).unwrap();
            let est = survival_mc(&off, 10, 100_000, 1 << 30, 3, 2).unwrap();
            let q = survival_recursion(&off, 10);
            assert!((est.q_hat - q).abs() < 4.0 * est.se, "{spec}: {est:?} vs {q}");
            assert_eq!(est.truncated, 0);
        }
        let off = OffspringLaw::parse("binary").unwrap();
        let a = survival_mc(&off, 10, 5000, 1 << 30, 9, 1).unwrap();
        let b = survival_mc(&off, 10, 5000, 1 << 30, 9, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_and_binary_generations() {
        let (off, step) = laws("binary", "gauss:d=2,eta2=1");
        let mut rng = StreamKey::new(1, tags::TREE).stream(0);
        let empty = GenerationBuffer::empty(2, 4);
        let ev = evolve_generation(&empty, &off, &step, &mut rng, u64::MAX);
        assert!(ev.buffer.is_empty());
        assert_eq!(ev.buffer.generation(), 5);
        for _ in 0..200 {
            let ev = evolve_generation(&GenerationBuffer::origin(2), &off, &step, &mut rng, u64::MAX);
            assert!(ev.buffer.len() == 0 || ev.buffer.len() == 2);
        }
    }

    #[test]
    fn million_parents_keep_mean() {
        let (off, step) = laws("geometric", "gauss:d=1,eta2=1");
        let mut rng = StreamKey::new(2, tags::TREE).stream(0);
        let parents = GenerationBuffer::from_positions(1, vec![0.0; 1_000_000], 0);
        let ev = evolve_generation(&parents, &off, &step, &mut rng, u64::MAX);
        let se = (2.0f64).sqrt() * 1e3;
        assert!((ev.buffer.len() as f64 - 1e6).abs() < 4.0 * se);
    }

    #[test]
    fn zero_generation_tree() {
        let (off, step) = laws("binary", "gauss:d=2,eta2=1");
        let mut rng = StreamKey::new(3, tags::TREE).stream(0);
        let t = run_tree(&off, &step, 0, &Caps::default(), &mut rng, false);
        assert_eq!(t.total_progeny, 1);
        assert_eq!(t.final_buffer.len(), 1);
        assert_eq!(t.final_buffer.positions(), &[0.0, 0.0]);
    }

    #[test]
    fn progeny_cap_truncates() {
        let (off, step) = laws("geometric", "gauss:d=1,eta2=1");
        let caps = Caps { progeny: 50, ..Caps::default() };
        let key = StreamKey::new(4, tags::TREE);
        let mut seen = false;
        for rep in 0..2000 {
            let t = run_tree(&off, &step, 1000, &caps, &mut key.stream(rep), false);
            if t.truncated {
                seen = true;
                assert!(t.total_progeny <= 50);
            }
        }
        assert!(seen);
    }

    #[test]
    fn survival_recursion_limits() {
        let (b, g) = (OffspringLaw::parse("binary").unwrap(), OffspringLaw::parse("geometric").unwrap());
        let st = OffspringLaw::parse("stable:beta=0.5").unwrap();
        assert_eq!(survival_recursion(&b, 0), 1.0);
        let n = 10_000u64;
        let nq = n as f64 * survival_recursion(&b, n);
        assert!((1.9..=2.1).contains(&nq), "{nq}");
        let nq = n as f64 * survival_recursion(&g, n);
        assert!((nq - 1.0).abs() < 0.05, "{nq}");
        let n2q = (n as f64).powi(2) * survival_recursion(&st, n);
        assert!((8.1..=9.9).contains(&n2q), "{n2q}");
        // Recursion against 1 − f(1 − Q) in plain arithmetic for early terms.
        let mut q = 1.0;
        let tab = survival_table(&b, 20);
        for k in 1..=20 {
            q = 1.0 - b.pgf(1.0 - q).unwrap();
            assert!((tab[k] - q).abs() < 1e-14);
            assert!(tab[k] < tab[k - 1]);
        }
    }

    #[test]
    fn conditioned_children_law() {
        // Oracle: P(M = m) ∝ Σ_k p_k C(k, m) q^m (1−q)^{k−m} for m ≥ 1.
        let off = OffspringLaw::parse("geometric").unwrap();
        let q: f64 = 0.3;
        let mut oracle = vec![0.0; 12];
        for k in 1..200usize {
            let pk = off.prob(k);
            let mut binom = 1.0;
            for m in 0..=k.min(11) {
                if m > 0 {
                    binom *= (k - m + 1) as f64 / m as f64;
                    oracle[m] += pk * binom * q.powi(m as i32) * (1.0 - q).powi((k - m) as i32);
                }
            }
        }
        let z: f64 = oracle.iter().sum::<f64>() + 1e-12;
        let mut rng = StreamKey::new(6, tags::TREE).stream(0);
        let draws = 400_000;
        let mut counts = vec![0u64; 12];
        for _ in 0..draws {
            let m = surviving_children(&off, q, &mut rng) as usize;
            assert!(m >= 1);
            if m < 12 {
                counts[m] += 1;
            }
        }
        for m in 1..8 {
            let p = oracle[m] / z;
            let phat = counts[m] as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((phat - p).abs() < 5.0 * se, "m={m}: {phat} vs {p}");
        }
    }

    fn mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn conditioned_tree_first_moments() {
        // Many-to-one: E[|Z_n| | survival] = 1/Q_n and E[Σ|S_u|² | survival] = n·d·η²/Q_n.
        for (off, step) in [("binary", "gauss:d=2,eta2=1"), ("binary", "rademacher:d=1"), ("geometric", "gauss:d=1,eta2=2"), ("stable:beta=0.5", "gauss:d=1,eta2=1")] {
            let (off, step) = laws(off, step);
            let n = 40;
            let trees = ConditionedTrees::new(&off, &step, n);
            let key = StreamKey::new(7, tags::TREE);
            let mut sizes = Vec::new();
            let mut second = Vec::new();
            for rep in 0..20_000 {
                let t = trees.sample(&vec![0.0; step.dim()], &mut key.stream(rep));
                assert!(!t.is_empty());
                sizes.push(t.len() as f64);
                second.push(t.positions().iter().map(|x| x * x).sum::<f64>());
            }
            let q = trees.survival();
            let (m, se) = mean_se(&sizes);
            assert!((m - 1.0 / q).abs() < 4.0 * se, "{:?}: {m} vs {}", off.spec(), 1.0 / q);
            let trace: f64 = (0..step.dim()).map(|i| step.covariance()[i * step.dim() + i]).sum();
            let (m, se) = mean_se(&second);
            let target = n as f64 * trace / q;
            assert!((m - target).abs() < 4.0 * se, "{:?}: {m} vs {target}", off.spec());
        }
    }

    #[test]
    fn binary_fast_path_matches_level_by_level() {
        // Compare the distribution of the particle count under the two samplers.
        let (off, step) = laws("binary", "gauss:d=1,eta2=1");
        let n = 25;
        let trees = ConditionedTrees::new(&off, &step, n);
        let key = StreamKey::new(9, tags::TREE);
        let reps = 40_000;
        let mut a = vec![0u64; 8];
        let mut b = vec![0u64; 8];
        for rep in 0..reps {
            let fast = trees.sample(&[0.0], &mut key.stream(rep)).len().min(7);
            let slow = run_tree_conditioned(&off, &step, &[0.0], n, trees.q_table(), &mut key.stream(reps + rep)).len().min(7);
            a[fast] += 1;
            b[slow] += 1;
        }
        for k in 1..8 {
            let (pa, pb) = (a[k] as f64 / reps as f64, b[k] as f64 / reps as f64);
            let se = ((pa * (1.0 - pa) + pb * (1.0 - pb)) / reps as f64).sqrt();
            assert!((pa - pb).abs() <= 4.5 * se, "k={k}: {pa} vs {pb}");
        }
    }
}

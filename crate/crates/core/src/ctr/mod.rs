//! Consistency-aware target rearrangement.
//!
//! Candidates are first matched to ground truth with a combined
//! classification + distance cost. The candidates inference would pick (the
//! top-|G| by probability) that this match leaves out become proxies: they
//! stay negatives for classification but are pulled, by distance only,
//! toward the ground-truth points whose matched candidates score lowest.

mod assignment;
mod focal;

use std::collections::BTreeSet;

use serde::Serialize;

pub use assignment::{brute_force_match, hungarian, CostMatrix, Matching, BRUTE_FORCE_LIMIT};
pub use focal::{focal_loss, focal_loss_grad, FocalParams, EPS};

use crate::aaps::Candidate;
use crate::scene::GroundTruthPoint;

/// Position and probability of one candidate, all the matcher needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredPoint {
    pub x: f64,
    pub y: f64,
    pub p: f64,
}

impl From<&Candidate> for ScoredPoint {
    fn from(c: &Candidate) -> Self {
        Self {
            x: c.x,
            y: c.y,
            p: c.p,
        }
    }
}

pub fn l2_distance(s: &ScoredPoint, g: &GroundTruthPoint) -> f64 {
    (s.x - g.x).hypot(s.y - g.y)
}

/// Pairwise matching cost: positive focal loss plus Euclidean distance.
pub fn dual_cost(
    candidates: &[ScoredPoint],
    gts: &[GroundTruthPoint],
    focal: FocalParams,
) -> CostMatrix {
    CostMatrix::from_fn(candidates.len(), gts.len(), |i, j| {
        let s = &candidates[i];
        focal_loss(s.p, true, focal) + l2_distance(s, &gts[j])
    })
}

pub fn distance_cost(candidates: &[ScoredPoint], gts: &[GroundTruthPoint]) -> CostMatrix {
    CostMatrix::from_fn(candidates.len(), gts.len(), |i, j| {
        l2_distance(&candidates[i], &gts[j])
    })
}

/// Outcome of the two-stage matching. All index sets are sorted ascending;
/// matchings pair candidate indices (rows) with ground-truth indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CtrResult {
    pub omega1: Vec<(usize, usize)>,
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub s_prime: Vec<usize>,
    pub g_prime: Vec<usize>,
    pub omega2: Vec<(usize, usize)>,
}

impl CtrResult {
    pub fn omega1_matching(&self) -> Matching {
        Matching::new(self.omega1.clone()).expect("omega1 is one-to-one")
    }

    pub fn omega2_matching(&self) -> Matching {
        Matching::new(self.omega2.clone()).expect("omega2 is one-to-one")
    }
}

/// Candidate indices ordered by descending probability, ascending index on ties.
fn rank_by_probability(candidates: &[ScoredPoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].p.total_cmp(&candidates[a].p).then(a.cmp(&b)));
    order
}

/// Runs the dual-cost match, the top-|G| selection and the proxy match.
///
/// Ground truth reassigned to proxies is taken from the matched candidates
/// ranking lowest in the same probability order that defines `s2`, i.e.
/// the matched candidates inference would drop.
pub fn ctr_match(
    candidates: &[ScoredPoint],
    gts: &[GroundTruthPoint],
    focal: FocalParams,
) -> crate::Result<CtrResult> {
    let omega1 = hungarian(&dual_cost(candidates, gts, focal))?;
    let s1: Vec<usize> = omega1.rows().collect();

    let ranking = rank_by_probability(candidates);
    let take = gts.len().min(candidates.len());
    let s2: BTreeSet<usize> = ranking[..take].iter().copied().collect();
    let s1_set: BTreeSet<usize> = s1.iter().copied().collect();
    let s_prime: Vec<usize> = s2.difference(&s1_set).copied().collect();

    let mut dropped: Vec<usize> = ranking
        .iter()
        .rev()
        .filter(|i| s1_set.contains(i))
        .take(s_prime.len())
        .copied()
        .collect();
    dropped.sort_unstable();
    let mut g_prime: Vec<usize> = dropped
        .iter()
        .map(|&i| omega1.col_of(i).expect("s1 members are matched"))
        .collect();
    g_prime.sort_unstable();

    let proxies: Vec<ScoredPoint> = s_prime.iter().map(|&i| candidates[i]).collect();
    let targets: Vec<GroundTruthPoint> = g_prime.iter().map(|&j| gts[j]).collect();
    let local = hungarian(&distance_cost(&proxies, &targets))?;
    let omega2 = local
        .pairs()
        .iter()
        .map(|&(a, b)| (s_prime[a], g_prime[b]))
        .collect();

    Ok(CtrResult {
        omega1: omega1.pairs().to_vec(),
        s1,
        s2: s2.into_iter().collect(),
        s_prime,
        g_prime,
        omega2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocateConfig {
    pub focal: FocalParams,
    /// Multiplier of the proxy distance term.
    pub proxy_scale: f64,
}

impl Default for LocateConfig {
    fn default() -> Self {
        Self {
            focal: FocalParams::default(),
            proxy_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocateLossOutput {
    pub cls: f64,
    pub dist: f64,
    pub total: f64,
    /// Per candidate: `[d/dx, d/dy, d/dp]` with the matchings held fixed.
    pub grads: Vec<[f64; 3]>,
}

fn add_distance_term(
    candidates: &[ScoredPoint],
    gts: &[GroundTruthPoint],
    pairs: &[(usize, usize)],
    scale: f64,
    grads: &mut [[f64; 3]],
) -> f64 {
    let mut sum = 0.0;
    for &(i, j) in pairs {
        let (s, g) = (&candidates[i], &gts[j]);
        let d = l2_distance(s, g);
        sum += d;
        if d > 0.0 {
            grads[i][0] += scale * (s.x - g.x) / d;
            grads[i][1] += scale * (s.y - g.y) / d;
        }
    }
    scale * sum
}

/// Locating loss: focal classification over every candidate (positives are
/// exactly the dual-matched ones) plus distances of dual-matched candidates,
/// plus, when `use_ctr` is set, distances of proxies to their reassigned
/// ground truth.
pub fn locate_loss(
    candidates: &[ScoredPoint],
    gts: &[GroundTruthPoint],
    ctr: &CtrResult,
    use_ctr: bool,
    cfg: LocateConfig,
) -> LocateLossOutput {
    let mut grads = vec![[0.0; 3]; candidates.len()];
    let mut positive = vec![false; candidates.len()];
    for &i in &ctr.s1 {
        positive[i] = true;
    }

    let mut cls = 0.0;
    for (i, s) in candidates.iter().enumerate() {
        cls += focal_loss(s.p, positive[i], cfg.focal);
        grads[i][2] = focal_loss_grad(s.p, positive[i], cfg.focal);
    }

    let mut dist = add_distance_term(candidates, gts, &ctr.omega1, 1.0, &mut grads);
    if use_ctr && !ctr.omega2.is_empty() {
        dist += add_distance_term(candidates, gts, &ctr.omega2, cfg.proxy_scale, &mut grads);
    }

    LocateLossOutput {
        cls,
        dist,
        total: cls + dist,
        grads,
    }
}

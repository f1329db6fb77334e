//! Agreement clustering of verifier reports and the closed-form acceptance
//! bounds for honest and dishonest verifiers.
//!
//! Reports are linked when their distance is at most `2δ`; clusters are the
//! connected components of that threshold graph (single linkage, built with
//! union-find over edges in distance order). With quorum `q > n/2` at most
//! one component can be proper.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusteringError {
    #[error("report {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("no reports")]
    Empty,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Mean absolute difference between two equally sized points.
pub fn mean_abs_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterOutcome {
    /// Partition of report indices; each cluster sorted, clusters ordered by
    /// their smallest member.
    pub clusters: Vec<Vec<usize>>,
    /// Index into `clusters` of the unique cluster of size `≥ q`, if any.
    pub proper: Option<usize>,
    /// `None` when no inferencer point was supplied or no consensus formed.
    pub inferencer_accepted: Option<bool>,
}

impl ClusterOutcome {
    pub fn consensus(&self) -> bool {
        self.proper.is_some()
    }

    pub fn accepted(&self) -> &[usize] {
        self.proper.map_or(&[], |p| &self.clusters[p])
    }

    pub fn cluster_of(&self, i: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.contains(&i))
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
    }
}

/// Clusters `points` under `distance` with link radius `2δ` and quorum `q`.
pub fn cluster_with(
    points: &[Vec<f64>],
    delta: f64,
    q: usize,
    inferencer: Option<&[f64]>,
    distance: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<ClusterOutcome, ClusteringError> {
    let n = points.len();
    let dim = points.first().ok_or(ClusteringError::Empty)?.len();
    for (index, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(ClusteringError::DimensionMismatch { index, expected: dim, got: p.len() });
        }
    }
    if let Some(x) = inferencer {
        if x.len() != dim {
            return Err(ClusteringError::DimensionMismatch { index: n, expected: dim, got: x.len() });
        }
    }
    let radius = 2.0 * delta;
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((distance(&points[i], &points[j]), i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut uf = UnionFind::new(n);
    for (d, i, j) in edges {
        if d > radius {
            break;
        }
        uf.union(i, j);
    }
    let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = uf.find(i);
        by_root[r].push(i);
    }
    let mut clusters: Vec<Vec<usize>> = by_root.into_iter().filter(|c| !c.is_empty()).collect();
    clusters.sort_by_key(|c| c[0]);
    let proper_all: Vec<usize> = (0..clusters.len()).filter(|&c| clusters[c].len() >= q).collect();
    debug_assert!(2 * q <= n || proper_all.len() <= 1);
    let proper = proper_all.first().copied();
    let inferencer_accepted = match (inferencer, proper) {
        (Some(x), Some(p)) => Some(clusters[p].iter().any(|&i| distance(x, &points[i]) <= radius)),
        _ => None,
    };
    Ok(ClusterOutcome {
        clusters,
        proper,
        inferencer_accepted,
    })
}

/// [`cluster_with`] under [`mean_abs_distance`].
pub fn cluster(points: &[Vec<f64>], delta: f64, q: usize, inferencer: Option<&[f64]>) -> Result<ClusterOutcome, ClusteringError> {
    cluster_with(points, delta, q, inferencer, mean_abs_distance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameParams {
    pub n: usize,
    pub q: usize,
    pub delta: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub r: f64,
    /// Verification cost; only the payoff accounting uses it.
    #[serde(default)]
    pub c: f64,
}

impl GameParams {
    pub fn baseline() -> Self {
        GameParams {
            n: 6,
            q: 4,
            delta: 1.0,
            eps1: 0.01,
            eps2: 0.01,
            r: 0.8,
            c: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ClusteringError> {
        let bad = |m: String| Err(ClusteringError::InvalidParams(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if 2 * self.q <= self.n || self.q > self.n {
            return bad(format!("quorum q = {} must satisfy n/2 < q <= n (n = {})", self.q, self.n));
        }
        for (name, v) in [("eps1", self.eps1), ("eps2", self.eps2), ("r", self.r)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return bad("delta must be positive".into());
        }
        Ok(())
    }

    pub fn p_in(&self) -> f64 {
        (1.0 - self.eps1) * self.r
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    binomial(n, k) * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// `(1 − ε1) · P(Bin(n − 1, p_in) ≥ q − 1)`.
pub fn honest_accept_lower_bound(p: &GameParams) -> f64 {
    let p_in = p.p_in();
    (1.0 - p.eps1) * (p.q - 1..p.n).map(|k| binomial_pmf(p.n - 1, k, p_in)).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DishonestBound {
    /// Accepted inside `B(x, δ)`.
    pub p_d1: f64,
    /// Accepted in a proper cluster outside `B(x, 3δ)`.
    pub p_d2: f64,
    /// Some report lies in the shell `B(x, 3δ) ∖ B(x, δ)`.
    pub p_d3: f64,
    /// `p_d2 + p_d3`. The first and third events both need the dishonest
    /// report inside `B(x, 3δ)`, which `p_d3`'s leading `ε2` already covers.
    pub total: f64,
    /// Plain union bound `p_d1 + p_d2 + p_d3`.
    pub naive_total: f64,
}

pub fn dishonest_accept_upper_bound(p: &GameParams) -> DishonestBound {
    let p_in = p.p_in();
    let p_d1 = p.eps2;
    let p_d2 = (0..=p.n - p.q).map(|k| binomial_pmf(p.n - 1, k, p_in)).sum::<f64>();
    let p_d3 = p.eps2 + (p.n - 1) as f64 * (p.eps1 * p.r + p.eps2 * (1.0 - p.r));
    DishonestBound {
        p_d1,
        p_d2,
        p_d3,
        total: (p_d2 + p_d3).min(1.0),
        naive_total: (p_d1 + p_d2 + p_d3).min(1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversaryPolicy {
    /// Mass `ε2` uniform in `B(x, 3δ)`, otherwise uniform in a far shell
    /// `[10δ, 1000δ]` with random sign.
    RandomGuess,
    /// Every adversary reports the same fabricated point `offset · δ`.
    Colluding { offset: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub honest: Vec<bool>,
    pub accepted: Vec<bool>,
    pub consensus: bool,
    pub inferencer_accepted: Option<bool>,
}

/// One committee vote on the line, with the honest result at `0`.
pub fn simulate_round<R: Rng>(p: &GameParams, policy: AdversaryPolicy, rng: &mut R) -> RoundOutcome {
    let d = p.delta;
    let mut honest = Vec::with_capacity(p.n);
    let mut points = Vec::with_capacity(p.n);
    for _ in 0..p.n {
        let is_honest = rng.gen_bool(p.r);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let x = if is_honest {
            if rng.gen_bool(1.0 - p.eps1) {
                rng.gen_range(-d..d)
            } else {
                sign * rng.gen_range(d..3.0 * d)
            }
        } else {
            match policy {
                AdversaryPolicy::RandomGuess if rng.gen_bool(p.eps2) => rng.gen_range(-3.0 * d..3.0 * d),
                AdversaryPolicy::RandomGuess => sign * rng.gen_range(10.0 * d..1000.0 * d),
                AdversaryPolicy::Colluding { offset } => offset * d,
            }
        };
        honest.push(is_honest);
        points.push(vec![x]);
    }
    let out = cluster(&points, d, p.q, Some(&[0.0])).expect("uniform one-dimensional points");
    let mut accepted = vec![false; p.n];
    for &i in out.accepted() {
        accepted[i] = true;
    }
    RoundOutcome {
        honest,
        accepted,
        consensus: out.consensus(),
        inferencer_accepted: out.inferencer_accepted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Connected components by depth-first search over the `≤ 2δ` graph.
    fn components(points: &[Vec<f64>], delta: f64) -> Vec<Vec<usize>> {
        let n = points.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut stack = vec![s];
            let mut comp = Vec::new();
            seen[s] = true;
            while let Some(u) = stack.pop() {
                comp.push(u);
                for v in 0..n {
                    if !seen[v] && mean_abs_distance(&points[u], &points[v]) <= 2.0 * delta {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out.sort_by_key(|c| c[0]);
        out
    }

    fn line(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = line(&[1.0; 6]);
        let o = cluster(&pts, 0.1, 4, None).unwrap();
        assert_eq!(o.clusters, vec![vec![0, 1, 2, 3, 4, 5]]);
        assert_eq!(o.proper, Some(0));
    }

    #[test]
    fn chained_cluster_with_outliers() {
        let pts = line(&[0.0, 0.1, 0.2, 0.3, 10.0, 20.0]);
        let o = cluster(&pts, 0.5, 4, Some(&[0.15])).unwrap();
        assert_eq!(o.clusters, components(&pts, 0.5));
        assert_eq!(o.accepted(), &[0, 1, 2, 3]);
        assert_eq!(o.inferencer_accepted, Some(true));
    }

    #[test]
    fn split_committee_has_no_consensus() {
        let pts = line(&[0.0, 0.0, 0.0, 50.0, 50.0, 50.0]);
        let o = cluster(&pts, 1.0, 4, Some(&[0.0])).unwrap();
        assert_eq!(o.clusters.len(), 2);
        assert!(!o.consensus());
        assert_eq!(o.inferencer_accepted, None);
    }

    #[test]
    fn dimension_mismatch() {
        let pts = vec![vec![0.0, 1.0], vec![0.0]];
        assert_eq!(
            cluster(&pts, 1.0, 2, None),
            Err(ClusteringError::DimensionMismatch { index: 1, expected: 2, got: 1 })
        );
    }

    #[test]
    fn baseline_parameter_bounds() {
        let p = GameParams::baseline();
        let h = honest_accept_lower_bound(&p);
        assert!(h > 0.926 && h < 0.927, "{h}");
        let d = dishonest_accept_upper_bound(&p);
        assert!((d.p_d1 - 0.01).abs() < 1e-15);
        assert!((d.p_d3 - 0.06).abs() < 1e-12);
        assert!(d.p_d2 < 0.065);
        assert!(d.total < 0.125);
        assert!(d.naive_total > d.total);
    }

    #[test]
    fn degenerate_bounds() {
        let p = GameParams {
            eps1: 0.0,
            eps2: 0.0,
            r: 1.0,
            ..GameParams::baseline()
        };
        assert_eq!(honest_accept_lower_bound(&p), 1.0);
        let d = dishonest_accept_upper_bound(&p);
        assert_eq!(d.p_d2, 0.0);
        let p = GameParams {
            eps2: 0.0,
            ..GameParams::baseline()
        };
        let d = dishonest_accept_upper_bound(&p);
        assert_eq!(d.p_d1, 0.0);
        assert!((d.p_d3 - 5.0 * 0.01 * 0.8).abs() < 1e-15);
    }

    /// Sum over all 2^(n−1) regular/irregular patterns of the other verifiers.
    fn honest_bound_by_enumeration(p: &GameParams) -> f64 {
        let p_in = p.p_in();
        let m = p.n - 1;
        let mut total = 0.0;
        for mask in 0u32..(1 << m) {
            let k = mask.count_ones() as usize;
            if k + 1 >= p.q {
                total += p_in.powi(k as i32) * (1.0 - p_in).powi((m - k) as i32);
            }
        }
        (1.0 - p.eps1) * total
    }

    #[test]
    fn honest_bound_matches_enumeration() {
        for r in [0.5, 0.8, 0.95] {
            for (n, q) in [(6, 4), (7, 5), (8, 5)] {
                let p = GameParams {
                    n,
                    q,
                    r,
                    ..GameParams::baseline()
                };
                assert!((honest_accept_lower_bound(&p) - honest_bound_by_enumeration(&p)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_validation() {
        let mut p = GameParams::baseline();
        assert!(p.validate().is_ok());
        p.q = 3;
        assert!(p.validate().is_err());
        p.q = 4;
        p.r = 1.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn all_honest_without_noise_accepts_everyone() {
        let p = GameParams {
            eps1: 0.0,
            r: 1.0,
            ..GameParams::baseline()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let o = simulate_round(&p, AdversaryPolicy::RandomGuess, &mut rng);
            assert!(o.consensus);
            assert!(o.accepted.iter().all(|&a| a));
            assert_eq!(o.inferencer_accepted, Some(true));
        }
    }

    proptest! {
        #[test]
        fn matches_threshold_graph(xs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..9), delta in 0.1f64..2.0) {
            let n = xs.len();
            let q = n / 2 + 1;
            let o = cluster(&xs, delta, q, None).unwrap();
            prop_assert_eq!(&o.clusters, &components(&xs, delta));
            let proper = o.clusters.iter().filter(|c| c.len() >= q).count();
            prop_assert!(proper <= 1);
            prop_assert_eq!(o.proper.is_some(), proper == 1);
        }

        #[test]
        fn clusters_respect_the_shell_gap(
            inner in prop::collection::vec(-0.999f64..0.999, 0..5),
            outer in prop::collection::vec((3.0f64..20.0, any::<bool>()), 0..5),
        ) {
            let delta = 1.0;
            let mut xs: Vec<f64> = inner.clone();
            xs.extend(outer.iter().map(|&(x, s)| if s { x } else { -x }));
            prop_assume!(!xs.is_empty());
            let pts = line(&xs);
            let o = cluster(&pts, delta, xs.len() / 2 + 1, None).unwrap();
            for c in &o.clusters {
                let inside = c.iter().filter(|&&i| xs[i].abs() < delta).count();
                prop_assert!(inside == 0 || inside == c.len());
            }
        }
    }
}

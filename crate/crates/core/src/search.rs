//! Maximum-cardinality hypothesis search over cliques of the
//! correspondence graph, as a binary inclusion tree with an adjacency-aware
//! upper bound and a compatibility gate on every include.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Symmetric adjacency over vertices `0..n`; neighbour lists sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn new(n: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); n],
        }
    }

    /// Builds from an edge list; duplicates and self-loops are ignored.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adj = Self::new(n);
        for (i, j) in edges {
            if i != j {
                adj.neighbors[i].push(j);
                adj.neighbors[j].push(i);
            }
        }
        for list in &mut adj.neighbors {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    pub fn complete(n: usize) -> Self {
        Self::from_edges(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_clique(&self, vertices: &[usize]) -> bool {
        vertices
            .iter()
            .enumerate()
            .all(|(k, &i)| vertices[k + 1..].iter().all(|&j| self.adjacent(i, j)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateOutcome {
    pub passed: bool,
    /// Compatibility distance of the hypothesis (smaller is better).
    pub score: f64,
}

impl GateOutcome {
    pub fn pass(score: f64) -> Self {
        Self { passed: true, score }
    }

    pub fn fail() -> Self {
        Self {
            passed: false,
            score: f64::INFINITY,
        }
    }
}

/// Compatibility test on a hypothesis given as vertex indices in inclusion
/// order. Expected to be monotone: a failing set has no passing superset.
pub trait Gate {
    fn evaluate(&mut self, hypothesis: &[usize]) -> GateOutcome;
}

impl<F: FnMut(&[usize]) -> GateOutcome> Gate for F {
    fn evaluate(&mut self, hypothesis: &[usize]) -> GateOutcome {
        self(hypothesis)
    }
}

/// Gate that accepts everything with score 0.
pub struct AcceptAll;

impl Gate for AcceptAll {
    fn evaluate(&mut self, _: &[usize]) -> GateOutcome {
        GateOutcome::pass(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BoundMode {
    /// `|C| + |S|` with `S` restricted to candidates adjacent to all of `C`.
    #[default]
    Adjacency,
    /// `|C|` plus the number of candidates left in the exploration order.
    DepthOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub m_min: usize,
    pub bound: BoundMode,
    /// When true, subtrees that can only tie the incumbent are still
    /// explored so that the smallest-score winner is found; when false they
    /// are pruned and ties are resolved among the hypotheses visited.
    pub explore_ties: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            m_min: 3,
            bound: BoundMode::Adjacency,
            explore_ties: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub nodes_expanded: u64,
    pub nodes_pruned_bound: u64,
    pub nodes_pruned_gate: u64,
    pub wall_time: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// Vertex indices of the winning hypothesis, ascending.
    pub best: Vec<usize>,
    pub best_score: f64,
    pub stats: SearchStats,
}

impl SearchResult {
    pub fn cardinality(&self) -> usize {
        self.best.len()
    }

    pub fn csv_header() -> &'static str {
        "nodes_expanded,nodes_pruned_bound,nodes_pruned_gate,best_cardinality,best_dgc,wall_time_us"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.stats.nodes_expanded,
            self.stats.nodes_pruned_bound,
            self.stats.nodes_pruned_gate,
            self.best.len(),
            if self.best.is_empty() { 0.0 } else { self.best_score },
            self.stats.wall_time.as_micros()
        )
    }
}

/// Reported for every expanded node: the upper bound used at the node and
/// the largest passing hypothesis found in its subtree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeReport {
    pub depth: usize,
    pub bound: usize,
    pub found: usize,
}

/// Exploration order: degree descending, then vertex index.
pub fn exploration_order(adj: &Adjacency) -> Vec<usize> {
    let mut order: Vec<usize> = (0..adj.len()).collect();
    order.sort_by(|&a, &b| adj.degree(b).cmp(&adj.degree(a)).then(a.cmp(&b)));
    order
}

fn better(card: usize, score: f64, set: &[usize], best: &(Vec<usize>, f64)) -> bool {
    if card != best.0.len() {
        return card > best.0.len();
    }
    match score.total_cmp(&best.1) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            let mut a = set.to_vec();
            a.sort_unstable();
            a < best.0
        }
    }
}

struct Searcher<'a, G: Gate + ?Sized> {
    adj: &'a Adjacency,
    rank: Vec<usize>,
    order: Vec<usize>,
    gate: &'a mut G,
    config: SearchConfig,
    stats: SearchStats,
    best: (Vec<usize>, f64),
    observer: Option<&'a mut dyn FnMut(NodeReport)>,
}

impl<G: Gate + ?Sized> Searcher<'_, G> {
    fn target(&self) -> usize {
        self.best.0.len().max(self.config.m_min.saturating_sub(1))
    }

    fn pruned(&self, bound: usize) -> bool {
        let target = self.target();
        if self.config.explore_ties && !self.best.0.is_empty() {
            bound < target
        } else {
            bound <= target
        }
    }

    /// `candidates` are ranks, ascending. Returns the largest passing
    /// hypothesis cardinality seen below this node.
    fn expand(&mut self, current: &mut Vec<usize>, candidates: &[usize]) -> usize {
        let mut found = current.len();
        for (k, &r) in candidates.iter().enumerate() {
            let remaining = candidates.len() - k;
            if self.pruned(current.len() + remaining) {
                self.stats.nodes_pruned_bound += 1;
                break;
            }
            let v = self.order[r];
            if self.config.bound == BoundMode::DepthOnly && !current.iter().all(|&c| self.adj.adjacent(c, v)) {
                continue;
            }
            current.push(v);
            let outcome = self.gate.evaluate(current);
            if !outcome.passed {
                self.stats.nodes_pruned_gate += 1;
                current.pop();
                continue;
            }
            self.stats.nodes_expanded += 1;
            debug_assert!(self.adj.is_clique(current));
            if current.len() >= self.config.m_min && better(current.len(), outcome.score, current, &self.best) {
                let mut set = current.clone();
                set.sort_unstable();
                self.best = (set, outcome.score);
            }
            let rest = &candidates[k + 1..];
            let next: Vec<usize> = match self.config.bound {
                BoundMode::Adjacency => {
                    let ns: Vec<usize> = self.adj.neighbors(v).iter().map(|&n| self.rank[n]).collect();
                    intersect_sorted(rest, &ns)
                }
                BoundMode::DepthOnly => rest.to_vec(),
            };
            let bound = current.len() + next.len();
            let below = self.expand(current, &next);
            if let Some(obs) = self.observer.as_mut() {
                obs(NodeReport {
                    depth: current.len(),
                    bound,
                    found: below,
                });
            }
            found = found.max(below);
            current.pop();
        }
        found
    }
}

fn intersect_sorted(a: &[usize], b_unsorted: &[usize]) -> Vec<usize> {
    let mut b = b_unsorted.to_vec();
    b.sort_unstable();
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Branch-and-bound maximum-cardinality search. Include branches are
/// explored before exclude branches; the gate is evaluated on every
/// include and a failure prunes that include branch only.
pub fn max_cardinality_search<G: Gate + ?Sized>(adj: &Adjacency, gate: &mut G, config: &SearchConfig) -> SearchResult {
    search_with_observer(adj, gate, config, None)
}

pub fn search_with_observer<'a, G: Gate + ?Sized>(
    adj: &'a Adjacency,
    gate: &'a mut G,
    config: &SearchConfig,
    observer: Option<&'a mut dyn FnMut(NodeReport)>,
) -> SearchResult {
    let start = Instant::now();
    let order = exploration_order(adj);
    let mut rank = vec![0; order.len()];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r;
    }
    let mut s = Searcher {
        adj,
        rank,
        order,
        gate,
        config: *config,
        stats: SearchStats::default(),
        best: (Vec::new(), f64::INFINITY),
        observer,
    };
    let all: Vec<usize> = (0..adj.len()).collect();
    s.expand(&mut Vec::new(), &all);
    let mut stats = s.stats;
    stats.wall_time = start.elapsed();
    SearchResult {
        best: s.best.0,
        best_score: s.best.1,
        stats,
    }
}

/// Largest graph accepted by [`brute_force_search`].
pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Exhaustive oracle: every vertex subset, cliques only, gate applied to
/// complete subsets (ascending index order).
pub fn brute_force_search<G: Gate + ?Sized>(adj: &Adjacency, gate: &mut G, m_min: usize) -> Result<SearchResult> {
    let n = adj.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchTooLarge {
            limit: BRUTE_FORCE_LIMIT,
            got: n,
        });
    }
    let start = Instant::now();
    let mut best: (Vec<usize>, f64) = (Vec::new(), f64::INFINITY);
    let mut stats = SearchStats::default();
    for mask in 1u32..(1u32 << n) {
        let set: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        if set.len() < m_min.max(1) || set.len() < best.0.len() || !adj.is_clique(&set) {
            continue;
        }
        stats.nodes_expanded += 1;
        let outcome = gate.evaluate(&set);
        if outcome.passed && better(set.len(), outcome.score, &set, &best) {
            best = (set, outcome.score);
        }
    }
    stats.wall_time = start.elapsed();
    Ok(SearchResult {
        best: best.0,
        best_score: best.1,
        stats,
    })
}

/// Every non-empty clique, each as the inclusion sequence of the binary
/// tree (no bound, no gate).
pub fn enumerate_cliques(adj: &Adjacency) -> Vec<Vec<usize>> {
    fn walk(adj: &Adjacency, current: &mut Vec<usize>, candidates: &[usize], out: &mut Vec<Vec<usize>>) {
        for (k, &v) in candidates.iter().enumerate() {
            current.push(v);
            out.push(current.clone());
            let next: Vec<usize> = candidates[k + 1..].iter().copied().filter(|&u| adj.adjacent(u, v)).collect();
            walk(adj, current, &next, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    let order = exploration_order(adj);
    walk(adj, &mut Vec::new(), &order, &mut out);
    out
}

//! The correspondence graph: unary-feasible candidate matches as vertices,
//! binary-feasible pairs of candidates as edges. Cliques of this graph are
//! the pairwise-compatible hypotheses handed to the search.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use nalgebra::Matrix3;

use crate::compatibility::{CandidateMatch, FrameSelection, MergeSet};
use crate::error::Result;
use crate::factor_graph::{observation_window, FactorGraph, LandmarkId, LocalMarginalCache, PoseId};
use crate::search::Adjacency;
use crate::stats::chi2_quantile;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintConfig {
    /// Poses required between the end of `a`'s window and the start of `b`'s.
    pub min_pose_gap: usize,
    /// Window length `N` used for `T_j`.
    pub max_poses: usize,
    pub distance_gate_quantile: f64,
    pub enable_distance_constraint: bool,
    pub frame_selection: FrameSelection,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            min_pose_gap: 20,
            max_poses: 10,
            distance_gate_quantile: 0.999,
            enable_distance_constraint: true,
            frame_selection: FrameSelection::MinTrace,
        }
    }
}

thread_local! {
    static BINARY_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`binary_feasible`] evaluations made on this thread.
pub fn binary_feasible_calls() -> u64 {
    BINARY_CALLS.with(Cell::get)
}

fn window_bounds(graph: &FactorGraph, landmark: LandmarkId, max_poses: usize) -> Option<(PoseId, PoseId)> {
    let w = observation_window(graph, landmark, max_poses);
    Some((*w.first()?, *w.last()?))
}

/// U1 (distinct), U2 (same class) and U3 (the window of `a` ends at least
/// `min_pose_gap` poses before the window of `b` starts).
pub fn unary_feasible(s: &CandidateMatch, graph: &FactorGraph, config: &ConstraintConfig) -> bool {
    if s.a == s.b {
        return false;
    }
    let (Ok(a), Ok(b)) = (graph.landmark(s.a), graph.landmark(s.b)) else {
        return false;
    };
    if a.class_label != b.class_label {
        return false;
    }
    match (
        window_bounds(graph, s.a, config.max_poses),
        window_bounds(graph, s.b, config.max_poses),
    ) {
        (Some(wa), Some(wb)) => wa.1 + config.min_pose_gap <= wb.0,
        _ => false,
    }
}

fn intervals_intersect(x: (PoseId, PoseId), y: (PoseId, PoseId)) -> bool {
    x.0 <= y.1 && y.0 <= x.1
}

/// Per-landmark data the binary test needs.
#[derive(Clone, Debug)]
struct LandmarkInfo {
    class_label: u32,
    window: (PoseId, PoseId),
}

/// Variance of `d = ‖p₁ − p₂‖` to first order, from the two local marginals
/// in the common frame minimizing the selection criterion.
fn distance_variance(
    graph: &FactorGraph,
    cache: &LocalMarginalCache,
    x: LandmarkId,
    y: LandmarkId,
    mode: FrameSelection,
) -> Option<f64> {
    let wx = cache.window(x)?;
    let wy = cache.window(y)?;
    let mut best: Option<(f64, PoseId, Matrix3<f64>, Matrix3<f64>)> = None;
    for &i in wx.iter().filter(|i| wy.contains(i)) {
        let (cx, cy) = (*cache.covariance(x, i)?, *cache.covariance(y, i)?);
        let score = match mode {
            FrameSelection::MinTrace => cx.trace() + cy.trace(),
            FrameSelection::MinDeterminant => cx.determinant() + cy.determinant(),
        };
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, i, cx, cy));
        }
    }
    let (_, frame, cx, cy) = best?;
    let pose = graph.pose(frame).ok()?;
    let diff = pose.rotation.inverse_rotate(&(graph.landmark(x).ok()?.position - graph.landmark(y).ok()?.position));
    let sum = cx + cy;
    let n = diff.norm();
    Some(if n > 1e-12 {
        let u = diff / n;
        u.dot(&(sum * u))
    } else {
        sum.trace() / 3.0
    })
}

/// B1 (four distinct landmarks), B2 (the A windows intersect and the B
/// windows intersect) and, when enabled, the distance-preservation gate
/// `(d_A − d_B)² / σ² < χ²₁(q)`.
pub fn binary_feasible(
    s1: &CandidateMatch,
    s2: &CandidateMatch,
    graph: &FactorGraph,
    cache: &LocalMarginalCache,
    config: &ConstraintConfig,
) -> bool {
    BINARY_CALLS.with(|c| c.set(c.get() + 1));
    let ids = [s1.a, s1.b, s2.a, s2.b];
    if (0..4).any(|i| (i + 1..4).any(|j| ids[i] == ids[j])) {
        return false;
    }
    let (Some(a1), Some(a2), Some(b1), Some(b2)) = (cache.window(s1.a), cache.window(s2.a), cache.window(s1.b), cache.window(s2.b)) else {
        return false;
    };
    let bounds = |w: &[PoseId]| (w[0], w[w.len() - 1]);
    if !intervals_intersect(bounds(a1), bounds(a2)) || !intervals_intersect(bounds(b1), bounds(b2)) {
        return false;
    }
    if !config.enable_distance_constraint {
        return true;
    }
    distance_consistent(s1, s2, graph, cache, config).unwrap_or(false)
}

fn distance_consistent(
    s1: &CandidateMatch,
    s2: &CandidateMatch,
    graph: &FactorGraph,
    cache: &LocalMarginalCache,
    config: &ConstraintConfig,
) -> Option<bool> {
    let pos = |l: LandmarkId| graph.landmark(l).ok().map(|l| l.position);
    let d_a = (pos(s1.a)? - pos(s2.a)?).norm();
    let d_b = (pos(s1.b)? - pos(s2.b)?).norm();
    let var = distance_variance(graph, cache, s1.a, s2.a, config.frame_selection)?
        + distance_variance(graph, cache, s1.b, s2.b, config.frame_selection)?;
    let gate = chi2_quantile(1, config.distance_gate_quantile).ok()?;
    Some((d_a - d_b) * (d_a - d_b) < gate * var)
}

/// Vertices are kept in ascending [`CandidateMatch`] order; vertex index
/// `k` refers to the `k`-th of them.
#[derive(Clone, Debug, Default)]
pub struct CorrespondenceGraph {
    config: ConstraintConfig,
    vertices: BTreeMap<CandidateMatch, BTreeSet<CandidateMatch>>,
    landmarks: BTreeMap<LandmarkId, LandmarkInfo>,
}

impl CorrespondenceGraph {
    pub fn new(config: ConstraintConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn config(&self) -> &ConstraintConfig {
        &self.config
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.vertices.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn vertices(&self) -> Vec<CandidateMatch> {
        self.vertices.keys().copied().collect()
    }

    pub fn contains(&self, s: &CandidateMatch) -> bool {
        self.vertices.contains_key(s)
    }

    pub fn has_edge(&self, s1: &CandidateMatch, s2: &CandidateMatch) -> bool {
        self.vertices.get(s1).is_some_and(|n| n.contains(s2))
    }

    pub fn neighbors(&self, s: &CandidateMatch) -> impl Iterator<Item = &CandidateMatch> {
        self.vertices.get(s).into_iter().flatten()
    }

    /// Sorted `(s₁, s₂)` edge list with `s₁ < s₂`.
    pub fn edges(&self) -> Vec<(CandidateMatch, CandidateMatch)> {
        self.vertices
            .iter()
            .flat_map(|(s, n)| n.iter().filter(move |t| s < *t).map(move |t| (*s, *t)))
            .collect()
    }

    /// Index-based adjacency in vertex order, for the search.
    pub fn adjacency(&self) -> Adjacency {
        let index: HashMap<CandidateMatch, usize> = self.vertices.keys().enumerate().map(|(i, s)| (*s, i)).collect();
        Adjacency::from_edges(
            self.vertices.len(),
            self.vertices
                .iter()
                .flat_map(|(s, n)| n.iter().map(|t| (index[s], index[t])))
                .collect::<Vec<_>>(),
        )
    }

    /// Merge set of the given vertex indices, in the given order.
    pub fn merge_set(&self, indices: &[usize]) -> Result<MergeSet> {
        let vertices = self.vertices();
        MergeSet::new(indices.iter().map(|&i| vertices[i]).collect())
    }

    /// Removes every vertex involving `landmark`.
    pub fn remove_landmark(&mut self, landmark: LandmarkId) {
        self.landmarks.remove(&landmark);
        let gone: Vec<CandidateMatch> = self
            .vertices
            .keys()
            .filter(|s| s.a == landmark || s.b == landmark)
            .copied()
            .collect();
        for s in gone {
            if let Some(n) = self.vertices.remove(&s) {
                for t in n {
                    if let Some(back) = self.vertices.get_mut(&t) {
                        back.remove(&s);
                    }
                }
            }
        }
    }

    /// Adds `landmark` (if matchable in `cache`) with all its unary-feasible
    /// vertices and their binary-feasible edges. Each new candidate pair is
    /// tested once.
    pub fn add_landmark(&mut self, graph: &FactorGraph, cache: &LocalMarginalCache, landmark: LandmarkId) {
        self.remove_landmark(landmark);
        let Some(info) = landmark_info(graph, cache, landmark) else {
            return;
        };
        self.landmarks.insert(landmark, info);
        let mut new_vertices = Vec::new();
        for &other in self.landmarks.keys() {
            for s in [CandidateMatch::new(landmark, other), CandidateMatch::new(other, landmark)] {
                if self.unary(&s) {
                    new_vertices.push(s);
                }
            }
        }
        for s in &new_vertices {
            self.vertices.insert(*s, BTreeSet::new());
        }
        let covisible = self.covisibility();
        let mut tested = BTreeSet::new();
        for s in &new_vertices {
            for t in self.edge_candidates(s, &covisible) {
                let key = if *s < t { (*s, t) } else { (t, *s) };
                if tested.insert(key) && binary_feasible(s, &t, graph, cache, &self.config) {
                    self.connect(*s, t);
                }
            }
        }
    }

    fn unary(&self, s: &CandidateMatch) -> bool {
        match (self.landmarks.get(&s.a), self.landmarks.get(&s.b)) {
            (Some(a), Some(b)) => s.a != s.b && a.class_label == b.class_label && a.window.1 + self.config.min_pose_gap <= b.window.0,
            _ => false,
        }
    }

    fn connect(&mut self, s: CandidateMatch, t: CandidateMatch) {
        self.vertices.entry(s).or_default().insert(t);
        self.vertices.entry(t).or_default().insert(s);
    }

    /// Landmark → co-visible landmarks (intersecting windows), by class.
    fn covisibility(&self) -> HashMap<LandmarkId, HashMap<u32, Vec<LandmarkId>>> {
        let mut by_start: Vec<(&LandmarkId, &LandmarkInfo)> = self.landmarks.iter().collect();
        by_start.sort_by_key(|(id, info)| (info.window.0, **id));
        let mut out: HashMap<LandmarkId, HashMap<u32, Vec<LandmarkId>>> = HashMap::new();
        for (k, (&x, ix)) in by_start.iter().enumerate() {
            for (&y, iy) in &by_start[k + 1..] {
                if iy.window.0 > ix.window.1 {
                    break;
                }
                out.entry(x).or_default().entry(iy.class_label).or_default().push(y);
                out.entry(y).or_default().entry(ix.class_label).or_default().push(x);
            }
        }
        out
    }

    /// Vertices `t` that could be adjacent to `s`: `t.a` co-visible with
    /// `s.a`, `t.b` co-visible with `s.b`, same class.
    fn edge_candidates(
        &self,
        s: &CandidateMatch,
        covisible: &HashMap<LandmarkId, HashMap<u32, Vec<LandmarkId>>>,
    ) -> Vec<CandidateMatch> {
        let (Some(ca), Some(cb)) = (covisible.get(&s.a), covisible.get(&s.b)) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (class, list_a) in ca {
            let Some(list_b) = cb.get(class) else {
                continue;
            };
            for &a2 in list_a {
                for &b2 in list_b {
                    let t = CandidateMatch::new(a2, b2);
                    if self.vertices.contains_key(&t) {
                        out.push(t);
                    }
                }
            }
        }
        out
    }

    /// `VERT idx a b` lines followed by `EDGE i j` lines (`i < j`).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let index: HashMap<CandidateMatch, usize> = self.vertices.keys().enumerate().map(|(i, s)| (*s, i)).collect();
        for (i, s) in self.vertices.keys().enumerate() {
            let _ = writeln!(out, "VERT {i} {} {}", s.a, s.b);
        }
        for (s, t) in self.edges() {
            let _ = writeln!(out, "EDGE {} {}", index[&s], index[&t]);
        }
        out
    }
}

fn landmark_info(graph: &FactorGraph, cache: &LocalMarginalCache, landmark: LandmarkId) -> Option<LandmarkInfo> {
    let l = graph.landmark(landmark).ok()?;
    let w = cache.window(landmark)?;
    Some(LandmarkInfo {
        class_label: l.class_label,
        window: (w[0], w[w.len() - 1]),
    })
}

/// Builds the correspondence graph over every landmark that is matchable in
/// `cache`. Candidate edges are enumerated through co-visible landmark
/// pairs, so each vertex pair that can satisfy B2 is tested exactly once.
pub fn build_graph(graph: &FactorGraph, cache: &LocalMarginalCache, config: &ConstraintConfig) -> CorrespondenceGraph {
    let mut cg = CorrespondenceGraph::new(*config);
    for id in graph.landmark_ids() {
        if let Some(info) = landmark_info(graph, cache, id) {
            cg.landmarks.insert(id, info);
        }
    }
    let mut by_class: BTreeMap<u32, Vec<(LandmarkId, (PoseId, PoseId))>> = BTreeMap::new();
    for (&id, info) in &cg.landmarks {
        by_class.entry(info.class_label).or_default().push((id, info.window));
    }
    for members in by_class.values() {
        for &(a, wa) in members {
            for &(b, wb) in members {
                if a != b && wa.1 + config.min_pose_gap <= wb.0 {
                    cg.vertices.insert(CandidateMatch::new(a, b), BTreeSet::new());
                }
            }
        }
    }
    let covisible = cg.covisibility();
    let vertices = cg.vertices();
    for s in &vertices {
        for t in cg.edge_candidates(s, &covisible) {
            if *s < t && binary_feasible(s, &t, graph, cache, config) {
                cg.connect(*s, t);
            }
        }
    }
    log::debug!(
        "correspondence graph: {} landmarks, {} vertices, {} edges",
        cg.landmarks.len(),
        cg.num_vertices(),
        cg.num_edges()
    );
    cg
}

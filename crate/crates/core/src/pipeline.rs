//! End-to-end merging: local-marginal refresh, correspondence graph, search,
//! optional JC verification and graph surgery, either in one batch or while
//! replaying a graph pose by pose.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::Vector3;

use crate::compatibility::{
    gc_for_merge_set, gc_gate_partial, jc_distance, CandidateMatch, GateConfig, LandmarkCovariances, MergeSet,
    MIN_GC_CARDINALITY,
};
use crate::correspondence::{build_graph, ConstraintConfig, CorrespondenceGraph};
use crate::error::{Error, Result};
use crate::factor_graph::{
    optimize, total_cost, CameraModel, CovarianceRecovery, FactorGraph, Landmark, LandmarkId, LocalConfig,
    LocalMarginalCache, ObservationFactor, OdometryFactor, OptimizeConfig, PoseId, PriorFactor,
};
use crate::geometry::RigidTransform;
use crate::search::{max_cardinality_search, GateOutcome, SearchConfig};

/// Compatibility test used inside the search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Gc,
    /// Joint compatibility against the global covariance of every
    /// matchable landmark, recovered before each search.
    Jc,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gc" => Ok(Self::Gc),
            "jc" => Ok(Self::Jc),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gc => "gc",
            Self::Jc => "jc",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum VerificationMode {
    #[default]
    None,
    Jc,
}

impl FromStr for VerificationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "jc" => Ok(Self::Jc),
            other => Err(Error::InvalidArgument(format!("unknown verification mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub method: Method,
    pub verification: VerificationMode,
    pub gate: GateConfig,
    pub m_min: usize,
    pub constraints: ConstraintConfig,
    pub local: LocalConfig,
    /// Lightly damped by default so that a bad merge cannot make the
    /// normal equations singular.
    pub optimize: OptimizeConfig,
    /// Replay runs a merge cycle every `cadence` poses.
    pub cadence: usize,
    /// During replay, landmarks still observed by the newest pose stay out
    /// of the correspondence graph until their track ends, so that a
    /// revisit is matched as a whole rather than piecemeal.
    pub defer_live_tracks: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::Gc,
            verification: VerificationMode::None,
            gate: GateConfig::default(),
            m_min: 3,
            constraints: ConstraintConfig::default(),
            local: LocalConfig::default(),
            optimize: OptimizeConfig {
                damping: 1e-6,
                ..OptimizeConfig::default()
            },
            cadence: 10,
            defer_live_tracks: true,
        }
    }
}

impl PipelineConfig {
    fn validate(&self) -> Result<()> {
        if self.m_min < MIN_GC_CARDINALITY {
            return Err(Error::InvalidArgument(format!("m_min must be at least {MIN_GC_CARDINALITY}")));
        }
        if self.cadence == 0 {
            return Err(Error::InvalidArgument("cadence must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeProposal {
    pub merge_set: MergeSet,
    /// NaN when the GC could not be evaluated (JC method only).
    pub d_gc: f64,
    pub d_jc: Option<f64>,
    pub verified: bool,
}

impl MergeProposal {
    fn sort_score(&self, method: Method) -> f64 {
        match method {
            Method::Gc => self.d_gc,
            Method::Jc => self.d_jc.unwrap_or(f64::INFINITY),
        }
    }
}

/// Wall time of one merge cycle, by phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepTimings {
    pub cache: Duration,
    pub cgraph: Duration,
    pub search: Duration,
    pub covariance: Duration,
}

impl StepTimings {
    pub fn total(&self) -> Duration {
        self.cache + self.cgraph + self.search + self.covariance
    }
}

impl std::ops::AddAssign for StepTimings {
    fn add_assign(&mut self, rhs: Self) {
        self.cache += rhs.cache;
        self.cgraph += rhs.cgraph;
        self.search += rhs.search;
        self.covariance += rhs.covariance;
    }
}

fn search_config(config: &PipelineConfig) -> SearchConfig {
    SearchConfig {
        m_min: config.m_min,
        ..SearchConfig::default()
    }
}

fn matches_of(vertices: &[CandidateMatch], indices: &[usize]) -> Vec<CandidateMatch> {
    indices.iter().map(|&i| vertices[i]).collect()
}

/// Covariances of every matchable landmark, for the JC method.
fn jc_covariances(graph: &FactorGraph, cache: &LocalMarginalCache) -> Result<LandmarkCovariances> {
    let ids: Vec<LandmarkId> = cache.matchable().filter(|&l| graph.has_landmark(l)).collect();
    LandmarkCovariances::compute(&CovarianceRecovery::new(graph)?, &ids)
}

/// Repeated maximum-cardinality search on `cgraph`, removing the winner's
/// landmarks after each round, until nothing of cardinality `m_min` is left.
fn search_rounds(
    graph: &FactorGraph,
    cache: &LocalMarginalCache,
    cgraph: &CorrespondenceGraph,
    covariances: Option<&LandmarkCovariances>,
    config: &PipelineConfig,
) -> Result<Vec<MergeProposal>> {
    let mut residual = cgraph.clone();
    let mut proposals = Vec::new();
    loop {
        let vertices = residual.vertices();
        if vertices.len() < config.m_min {
            break;
        }
        let adj = residual.adjacency();
        let result = match covariances {
            None => {
                let mut gate = |h: &[usize]| {
                    let (passed, d) = gc_gate_partial(graph, cache, &matches_of(&vertices, h), &config.gate);
                    if passed {
                        GateOutcome::pass(d)
                    } else {
                        GateOutcome::fail()
                    }
                };
                max_cardinality_search(&adj, &mut gate, &search_config(config))
            }
            Some(cov) => {
                let mut gate = |h: &[usize]| {
                    let set = MergeSet::new(matches_of(&vertices, h));
                    match set.and_then(|s| jc_distance(graph, cov, &s, config.gate.quantile)) {
                        Ok(r) if r.gate_passed => GateOutcome::pass(r.d_jc),
                        _ => GateOutcome::fail(),
                    }
                };
                max_cardinality_search(&adj, &mut gate, &search_config(config))
            }
        };
        if result.best.len() < config.m_min {
            break;
        }
        let merge_set = residual.merge_set(&result.best)?;
        let d_gc = gc_for_merge_set(graph, cache, &merge_set, &config.gate).map_or(f64::NAN, |r| r.d_gc);
        let d_jc = covariances.map(|_| result.best_score);
        for l in merge_set.landmarks() {
            residual.remove_landmark(l);
        }
        proposals.push(MergeProposal {
            merge_set,
            d_gc,
            d_jc,
            verified: d_jc.is_some(),
        });
    }
    Ok(proposals)
}

/// JC check of each proposal using a joint marginal over its landmarks only.
fn verify(graph: &FactorGraph, proposals: &mut [MergeProposal], quantile: f64) -> Result<()> {
    if proposals.is_empty() {
        return Ok(());
    }
    let recovery = CovarianceRecovery::new(graph)?;
    for p in proposals {
        let ids: Vec<LandmarkId> = p.merge_set.landmarks().collect();
        let cov = LandmarkCovariances::compute(&recovery, &ids)?;
        let jc = jc_distance(graph, &cov, &p.merge_set, quantile)?;
        p.d_jc = Some(jc.d_jc);
        p.verified = jc.gate_passed;
    }
    Ok(())
}

fn sort_proposals(proposals: &mut [MergeProposal], method: Method) {
    proposals.sort_by(|x, y| {
        y.merge_set
            .len()
            .cmp(&x.merge_set.len())
            .then(x.sort_score(method).total_cmp(&y.sort_score(method)))
            .then_with(|| x.merge_set.matches().cmp(y.merge_set.matches()))
    });
}

/// Search and verification on a prepared correspondence graph.
fn propose_on(
    graph: &FactorGraph,
    cache: &LocalMarginalCache,
    cgraph: &CorrespondenceGraph,
    config: &PipelineConfig,
    timings: &mut StepTimings,
) -> Result<Vec<MergeProposal>> {
    let covariances = match config.method {
        Method::Gc => None,
        Method::Jc => {
            let t = Instant::now();
            let cov = jc_covariances(graph, cache)?;
            timings.covariance += t.elapsed();
            Some(cov)
        }
    };
    let t = Instant::now();
    let mut proposals = search_rounds(graph, cache, cgraph, covariances.as_ref(), config)?;
    timings.search += t.elapsed();
    if config.verification == VerificationMode::Jc {
        let t = Instant::now();
        verify(graph, &mut proposals, config.gate.quantile)?;
        timings.covariance += t.elapsed();
    }
    sort_proposals(&mut proposals, config.method);
    Ok(proposals)
}

/// Refreshes stale entries of `cache`, builds the correspondence graph and
/// returns the disjoint proposals found by repeated search, largest first
/// and then by score. `graph` is expected to be optimized.
pub fn propose_merges(
    graph: &FactorGraph,
    cache: &mut LocalMarginalCache,
    config: &PipelineConfig,
) -> Result<(Vec<MergeProposal>, StepTimings)> {
    config.validate()?;
    let mut timings = StepTimings::default();
    let t = Instant::now();
    cache.refresh(graph);
    timings.cache = t.elapsed();
    let t = Instant::now();
    let cgraph = build_graph(graph, cache, &config.constraints);
    timings.cgraph = t.elapsed();
    let proposals = propose_on(graph, cache, &cgraph, config, &mut timings)?;
    Ok((proposals, timings))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApplyReport {
    /// Parallel to the proposals passed in.
    pub applied: Vec<bool>,
    /// Pairs `(kept, removed)` in application order.
    pub merged: Vec<CandidateMatch>,
    pub landmarks_before: usize,
    pub landmarks_after: usize,
    pub cost_before: f64,
    pub cost_after: f64,
}

fn acceptable(p: &MergeProposal, config: &PipelineConfig) -> bool {
    match config.verification {
        VerificationMode::None => true,
        VerificationMode::Jc => p.verified,
    }
}

/// Merges the pairs of every acceptable proposal in the given order, keeping
/// the older landmark of each pair, then re-optimizes once. A proposal that
/// touches a landmark already merged in this call is dropped.
pub fn apply_proposals(
    graph: &mut FactorGraph,
    cache: &mut LocalMarginalCache,
    proposals: &[MergeProposal],
    config: &PipelineConfig,
) -> Result<ApplyReport> {
    let landmarks_before = graph.num_landmarks();
    let cost_before = total_cost(graph);
    let snapshot = (graph.clone(), cache.clone());
    let mut used = BTreeSet::new();
    let mut applied = Vec::with_capacity(proposals.len());
    let mut merged = Vec::new();
    for (k, p) in proposals.iter().enumerate() {
        if !acceptable(p, config) {
            applied.push(false);
            continue;
        }
        if let Some(l) = p.merge_set.landmarks().find(|l| used.contains(l) || !graph.has_landmark(*l)) {
            log::info!("proposal {k} dropped: landmark {l} already merged");
            applied.push(false);
            continue;
        }
        for s in p.merge_set.matches() {
            graph.merge_landmark_into(s.a, s.b)?;
            cache.invalidate(s.a);
            cache.remove(s.b);
            merged.push(*s);
        }
        used.extend(p.merge_set.landmarks());
        applied.push(true);
    }
    let cost_after = if merged.is_empty() {
        cost_before
    } else {
        match optimize(graph, &config.optimize) {
            Ok(report) => {
                log::info!(
                    "merged {} pairs: cost {:.3} -> {:.3} after re-optimization",
                    merged.len(),
                    report.initial_cost,
                    report.final_cost
                );
                report.final_cost
            }
            Err(e) => {
                // A merge that leaves the problem unsolvable is rolled back
                // as a whole rather than aborting the run.
                log::warn!("re-optimization after merging failed ({e}); merges of this call reverted");
                (*graph, *cache) = snapshot;
                applied.iter_mut().for_each(|a| *a = false);
                merged.clear();
                cost_before
            }
        }
    };
    Ok(ApplyReport {
        applied,
        merged,
        landmarks_before,
        landmarks_after: graph.num_landmarks(),
        cost_before,
        cost_after,
    })
}

/// Landmark first seen by a pose, positioned in that pose's frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewLandmark {
    pub id: LandmarkId,
    pub class_label: u32,
    pub relative_position: Vector3<f64>,
}

/// Everything a pose adds to the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthEvent {
    pub pose: PoseId,
    /// Used when no odometry links the pose to an earlier one.
    pub estimate: RigidTransform,
    /// Odometry factors whose other end is an earlier pose.
    pub odometry: Vec<OdometryFactor>,
    pub priors: Vec<PriorFactor>,
    pub new_landmarks: Vec<NewLandmark>,
    pub observations: Vec<ObservationFactor>,
}

/// Splits `graph` into per-pose growth events in ascending pose order.
pub fn growth_events(graph: &FactorGraph) -> Vec<GrowthEvent> {
    let mut events: BTreeMap<PoseId, GrowthEvent> = graph
        .poses()
        .map(|(id, t)| {
            (
                id,
                GrowthEvent {
                    pose: id,
                    estimate: *t,
                    odometry: Vec::new(),
                    priors: Vec::new(),
                    new_landmarks: Vec::new(),
                    observations: Vec::new(),
                },
            )
        })
        .collect();
    for f in graph.odometry() {
        if let Some(e) = events.get_mut(&f.from.max(f.to)) {
            e.odometry.push(f.clone());
        }
    }
    for f in graph.priors() {
        if let Some(e) = events.get_mut(&f.pose) {
            e.priors.push(f.clone());
        }
    }
    for (id, l) in graph.landmarks() {
        let Some(first) = graph.observing_poses(id).first().copied() else {
            continue;
        };
        let frame = graph.pose(first).expect("observing pose exists");
        if let Some(e) = events.get_mut(&first) {
            e.new_landmarks.push(NewLandmark {
                id,
                class_label: l.class_label,
                relative_position: frame.apply_inverse(&l.position),
            });
        }
    }
    for f in graph.observations() {
        if let Some(e) = events.get_mut(&f.pose) {
            e.observations.push(f.clone());
        }
    }
    events.into_values().collect()
}

/// One merge cycle of a replay.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleLog {
    /// Pose id of the last event included.
    pub step: PoseId,
    pub timings: StepTimings,
    pub proposals: Vec<MergeProposal>,
    pub report: ApplyReport,
    pub num_poses: usize,
}

#[derive(Clone, Debug)]
pub struct SessionLog {
    pub cycles: Vec<CycleLog>,
    pub graph: FactorGraph,
}

impl SessionLog {
    pub fn merged_pairs(&self) -> impl Iterator<Item = &CandidateMatch> {
        self.cycles.iter().flat_map(|c| c.report.merged.iter())
    }

    pub fn merge_log_csv(&self) -> String {
        merge_log_csv(&self.cycles)
    }
}

pub const MERGE_LOG_HEADER: &str = "step,proposal_id,cardinality,d_gc,d_jc,verified,applied,landmarks_before,landmarks_after,t_cache_us,t_cgraph_us,t_search_us,t_cov_us";

/// One row per proposal; an empty log is the header alone.
pub fn merge_log_csv(cycles: &[CycleLog]) -> String {
    let mut out = String::from(MERGE_LOG_HEADER);
    out.push('\n');
    let mut id = 0;
    for c in cycles {
        for (p, &applied) in c.proposals.iter().zip(&c.report.applied) {
            let d_jc = p.d_jc.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{id},{},{},{d_jc},{},{applied},{},{},{},{},{},{}",
                c.step,
                p.merge_set.len(),
                p.d_gc,
                p.verified,
                c.report.landmarks_before,
                c.report.landmarks_after,
                c.timings.cache.as_micros(),
                c.timings.cgraph.as_micros(),
                c.timings.search.as_micros(),
                c.timings.covariance.as_micros()
            );
            id += 1;
        }
    }
    out
}

/// Replay state: the growing graph, its cache and correspondence graph.
struct Session {
    graph: FactorGraph,
    cache: LocalMarginalCache,
    cgraph: CorrespondenceGraph,
    /// Removed landmark → the landmark it was merged into.
    aliases: BTreeMap<LandmarkId, LandmarkId>,
    /// Landmarks held back until they have two observations, with the pose
    /// that first saw them.
    pending: BTreeMap<LandmarkId, (PoseId, NewLandmark, Vec<ObservationFactor>)>,
    /// Landmarks kept out of the correspondence graph while still tracked.
    deferred: BTreeSet<LandmarkId>,
    config: PipelineConfig,
}

/// Observations needed before a landmark enters the graph.
const MIN_INSERT_OBSERVATIONS: usize = 2;

impl Session {
    fn resolve(&self, mut id: LandmarkId) -> LandmarkId {
        while let Some(&next) = self.aliases.get(&id) {
            id = next;
        }
        id
    }

    fn add(&mut self, event: &GrowthEvent) -> Result<()> {
        let previous = event
            .odometry
            .iter()
            .filter(|f| f.to == event.pose && self.graph.has_pose(f.from))
            .max_by_key(|f| f.from);
        let estimate = match previous {
            Some(f) => self.graph.pose(f.from)?.compose(&f.measured),
            None => event.estimate,
        };
        self.graph.add_pose(event.pose, estimate)?;
        for f in &event.odometry {
            self.graph.add_odometry(f.clone())?;
        }
        for f in &event.priors {
            self.graph.add_prior(f.clone())?;
        }
        for l in &event.new_landmarks {
            self.pending.insert(l.id, (event.pose, *l, Vec::new()));
        }
        for f in &event.observations {
            let mut f = f.clone();
            f.landmark = self.resolve(f.landmark);
            if let Some((_, _, held)) = self.pending.get_mut(&f.landmark) {
                held.push(f);
                if held.len() >= MIN_INSERT_OBSERVATIONS {
                    let (first, l, held) = self.pending.remove(&f.landmark).expect("pending entry");
                    let landmark = Landmark {
                        position: self.graph.pose(first)?.apply(&l.relative_position),
                        class_label: l.class_label,
                    };
                    self.graph.add_landmark(f.landmark, landmark)?;
                    for f in held {
                        self.graph.add_observation(f)?;
                    }
                }
            } else {
                self.graph.add_observation(f)?;
            }
        }
        Ok(())
    }

    /// Re-initializes landmarks that sit behind one of their cameras, which
    /// happens when new poses arrive far from where the landmark was placed.
    fn repair_cheirality(&mut self) -> Result<()> {
        let graph = &self.graph;
        let broken: Vec<LandmarkId> = graph
            .landmarks()
            .filter(|(id, l)| {
                graph
                    .observations_of(*id)
                    .any(|o| graph.pose(o.pose).is_ok_and(|t| !graph.camera.in_front(t, &l.position)))
            })
            .map(|(id, _)| id)
            .collect();
        for id in broken {
            if let Some(p) = self.graph.triangulate(id) {
                self.graph.set_landmark_position(id, p)?;
            }
        }
        Ok(())
    }

    fn cycle(&mut self, step: PoseId, last: bool) -> Result<CycleLog> {
        self.repair_cheirality()?;
        optimize(&mut self.graph, &self.config.optimize)?;
        let mut timings = StepTimings::default();
        let t = Instant::now();
        let touched = self.cache.refresh(&self.graph);
        timings.cache = t.elapsed();
        let t = Instant::now();
        let mut pending: BTreeSet<LandmarkId> = std::mem::take(&mut self.deferred);
        pending.extend(touched);
        for &l in &pending {
            self.cgraph.remove_landmark(l);
        }
        for l in pending {
            if !self.graph.has_landmark(l) {
                continue;
            }
            let live = self.graph.observing_poses(l).last() == Some(&step);
            if live && !last && self.config.defer_live_tracks {
                self.deferred.insert(l);
            } else {
                self.cgraph.add_landmark(&self.graph, &self.cache, l);
            }
        }
        timings.cgraph = t.elapsed();
        let proposals = propose_on(&self.graph, &self.cache, &self.cgraph, &self.config, &mut timings)?;
        let report = apply_proposals(&mut self.graph, &mut self.cache, &proposals, &self.config)?;
        for s in &report.merged {
            self.aliases.insert(s.b, s.a);
            self.cgraph.remove_landmark(s.b);
        }
        Ok(CycleLog {
            step,
            timings,
            proposals,
            report,
            num_poses: self.graph.num_poses(),
        })
    }
}

/// Replays `events` into an empty graph, running a merge cycle (optimize,
/// cache refresh of stale landmarks, incremental correspondence-graph
/// update, search, apply) every `config.cadence` poses and after the last.
pub fn run_incremental(camera: CameraModel, events: &[GrowthEvent], config: &PipelineConfig) -> Result<SessionLog> {
    config.validate()?;
    let mut session = Session {
        graph: FactorGraph::new(camera),
        cache: LocalMarginalCache::new(config.local),
        cgraph: CorrespondenceGraph::new(config.constraints),
        aliases: BTreeMap::new(),
        pending: BTreeMap::new(),
        deferred: BTreeSet::new(),
        config: *config,
    };
    let mut cycles = Vec::new();
    for (k, event) in events.iter().enumerate() {
        session.add(event)?;
        if (k + 1) % config.cadence == 0 || k + 1 == events.len() {
            cycles.push(session.cycle(event.pose, k + 1 == events.len())?);
        }
    }
    Ok(SessionLog {
        cycles,
        graph: session.graph,
    })
}

/// Single batch cycle on a complete graph: optimize, propose, apply.
pub fn run_batch(graph: &mut FactorGraph, config: &PipelineConfig) -> Result<CycleLog> {
    config.validate()?;
    optimize(graph, &config.optimize)?;
    let mut cache = LocalMarginalCache::new(config.local);
    let (proposals, timings) = propose_merges(graph, &mut cache, config)?;
    let report = apply_proposals(graph, &mut cache, &proposals, config)?;
    Ok(CycleLog {
        step: graph.poses().map(|(id, _)| id).max().unwrap_or(0),
        timings,
        proposals,
        report,
        num_poses: graph.num_poses(),
    })
}

/// Repeats [`run_batch`] until a cycle applies nothing or `max_rounds`
/// cycles have run. A landmark takes part in at most one merge per cycle,
/// so landmarks duplicated more than once need several.
pub fn run_batch_rounds(graph: &mut FactorGraph, config: &PipelineConfig, max_rounds: usize) -> Result<Vec<CycleLog>> {
    let mut cycles = Vec::new();
    for _ in 0..max_rounds {
        let cycle = run_batch(graph, config)?;
        let done = cycle.report.merged.is_empty();
        cycles.push(cycle);
        if done {
            break;
        }
    }
    Ok(cycles)
}

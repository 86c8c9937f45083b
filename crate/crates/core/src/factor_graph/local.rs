//! Local-subgraph marginals: per-landmark 3×3 covariances expressed in the
//! frames of its observing poses, computed from the landmark's
//! neighbourhood only.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Matrix3;

use super::covariance::CovarianceRecovery;
use super::optimize::{optimize, OptimizeConfig};
use super::{FactorGraph, LandmarkId, PoseId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalConfig {
    /// Maximum number of observing poses (`N`) kept per landmark.
    pub max_poses: usize,
    /// Gauss-Newton iterations run on the local subgraph before its
    /// marginals are read off. Zero linearizes at the current estimate.
    pub local_iterations: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            max_poses: 10,
            local_iterations: 0,
        }
    }
}

/// The poses used as `T_j`: the most recent run of consecutive observing
/// pose ids, truncated to its last `max_poses` entries.
pub fn observation_window(graph: &FactorGraph, landmark: LandmarkId, max_poses: usize) -> Vec<PoseId> {
    let poses = graph.observing_poses(landmark);
    let Some(&last) = poses.last() else {
        return Vec::new();
    };
    let mut start = poses.len() - 1;
    let mut prev = last;
    while start > 0 && poses[start - 1] + 1 == prev && poses.len() - start < max_poses {
        start -= 1;
        prev = poses[start];
    }
    poses[start..].to_vec()
}

fn build_subgraph(
    graph: &FactorGraph,
    window: &[PoseId],
    keep_landmark: impl Fn(LandmarkId) -> bool,
) -> Result<FactorGraph> {
    let in_window: BTreeSet<PoseId> = window.iter().copied().collect();
    let mut sub = FactorGraph::new(graph.camera);
    for &i in window {
        sub.add_pose(i, *graph.pose(i)?)?;
    }
    let mut landmarks = BTreeSet::new();
    for &i in window {
        for obs in graph.observations_from(i) {
            if keep_landmark(obs.landmark) {
                landmarks.insert(obs.landmark);
            }
        }
    }
    for &l in &landmarks {
        sub.add_landmark(l, *graph.landmark(l)?)?;
    }
    for f in graph.odometry() {
        if in_window.contains(&f.from) && in_window.contains(&f.to) {
            sub.add_odometry(*f)?;
        }
    }
    for &i in window {
        for obs in graph.observations_from(i) {
            if landmarks.contains(&obs.landmark) {
                sub.add_observation(*obs)?;
            }
        }
    }
    Ok(sub)
}

/// The subgraph made of `T_j` (see [`observation_window`]), the odometry
/// between those poses, every landmark observed from them and those
/// observations. Carries no priors.
pub fn local_subgraph(graph: &FactorGraph, landmark: LandmarkId, max_poses: usize) -> Result<FactorGraph> {
    graph.landmark(landmark)?;
    let window = observation_window(graph, landmark, max_poses);
    build_subgraph(graph, &window, |_| true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalMarginals {
    pub landmark: LandmarkId,
    /// `T_j`, ascending.
    pub window: Vec<PoseId>,
    /// `Σⁱ_jj` for every `i` in the window.
    pub covariances: BTreeMap<PoseId, Matrix3<f64>>,
}

/// Computes `Σⁱ_jj` for each pose `i ∈ T_j` from the local subgraph.
///
/// Neighbouring landmarks seen from fewer than two window poses are
/// dropped first: a single bearing observation carries no information about
/// the poses once the landmark is marginalized. Fails with
/// [`Error::Unobservable`] when `j` itself is not triangulable locally.
pub fn local_marginals(graph: &FactorGraph, landmark: LandmarkId, config: &LocalConfig) -> Result<LocalMarginals> {
    graph.landmark(landmark)?;
    let window = observation_window(graph, landmark, config.max_poses);
    let in_window: BTreeSet<PoseId> = window.iter().copied().collect();
    let views = |l: LandmarkId| {
        let mut poses: Vec<PoseId> = graph
            .observations_of(l)
            .map(|o| o.pose)
            .filter(|p| in_window.contains(p))
            .collect();
        poses.sort_unstable();
        poses.dedup();
        poses.len()
    };
    if views(landmark) < 2 {
        return Err(Error::Unobservable(format!("landmark {landmark} (single local view)")));
    }
    let mut sub = build_subgraph(graph, &window, |l| views(l) >= 2)?;
    sub.add_gauge_prior(window[0])?;
    if config.local_iterations > 0 {
        let cfg = OptimizeConfig {
            max_iterations: config.local_iterations,
            ..OptimizeConfig::default()
        };
        optimize(&mut sub, &cfg)?;
    }
    let rec = CovarianceRecovery::new(&sub).map_err(|_| Error::Unobservable(format!("landmark {landmark} local subgraph")))?;
    let mut covariances = BTreeMap::new();
    for &i in &window {
        covariances.insert(i, rec.relative_marginal(&sub, i, landmark)?);
    }
    Ok(LocalMarginals {
        landmark,
        window,
        covariances,
    })
}

#[derive(Clone, Debug)]
enum CacheEntry {
    Matchable(LocalMarginals),
    Unmatchable,
}

#[derive(Clone, Debug)]
struct CacheSlot {
    entry: CacheEntry,
    observations: usize,
}

/// Per-landmark local marginals with dirty tracking. Entries are refreshed
/// lazily: a landmark is recomputed when invalidated, when its observation
/// count changed, or when it has no entry yet.
#[derive(Clone, Debug, Default)]
pub struct LocalMarginalCache {
    config: LocalConfig,
    slots: BTreeMap<LandmarkId, CacheSlot>,
    dirty: BTreeSet<LandmarkId>,
}

impl LocalMarginalCache {
    pub fn new(config: LocalConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
            dirty: BTreeSet::new(),
        }
    }

    pub fn config(&self) -> &LocalConfig {
        &self.config
    }

    pub fn invalidate(&mut self, landmark: LandmarkId) {
        self.dirty.insert(landmark);
    }

    pub fn remove(&mut self, landmark: LandmarkId) {
        self.slots.remove(&landmark);
        self.dirty.remove(&landmark);
    }

    /// Landmarks whose entries would be recomputed by [`Self::refresh`].
    pub fn stale(&self, graph: &FactorGraph) -> Vec<LandmarkId> {
        graph
            .landmarks()
            .map(|(id, _)| id)
            .filter(|id| {
                self.dirty.contains(id)
                    || match self.slots.get(id) {
                        None => true,
                        Some(slot) => slot.observations != graph.observations_of(*id).count(),
                    }
            })
            .collect()
    }

    /// Brings the cache up to date with `graph`; returns the recomputed landmarks.
    pub fn refresh(&mut self, graph: &FactorGraph) -> Vec<LandmarkId> {
        self.slots.retain(|id, _| graph.has_landmark(*id));
        let stale = self.stale(graph);
        for &id in &stale {
            let entry = match local_marginals(graph, id, &self.config) {
                Ok(m) => CacheEntry::Matchable(m),
                Err(e) => {
                    log::debug!("landmark {id} unmatchable: {e}");
                    CacheEntry::Unmatchable
                }
            };
            self.slots.insert(
                id,
                CacheSlot {
                    entry,
                    observations: graph.observations_of(id).count(),
                },
            );
        }
        self.dirty.clear();
        stale
    }

    /// Stores externally computed marginals. The entry is treated as stale
    /// by the next [`Self::refresh`] if the landmark's observation count
    /// differs from `observations`.
    pub fn insert(&mut self, marginals: LocalMarginals, observations: usize) {
        self.dirty.remove(&marginals.landmark);
        self.slots.insert(
            marginals.landmark,
            CacheSlot {
                entry: CacheEntry::Matchable(marginals),
                observations,
            },
        );
    }

    /// Landmark ids with a matchable entry, ascending.
    pub fn matchable(&self) -> impl Iterator<Item = LandmarkId> + '_ {
        self.slots
            .iter()
            .filter(|(_, s)| matches!(s.entry, CacheEntry::Matchable(_)))
            .map(|(&id, _)| id)
    }

    pub fn get(&self, landmark: LandmarkId) -> Option<&LocalMarginals> {
        match self.slots.get(&landmark).map(|s| &s.entry) {
            Some(CacheEntry::Matchable(m)) => Some(m),
            _ => None,
        }
    }

    pub fn is_matchable(&self, landmark: LandmarkId) -> bool {
        self.get(landmark).is_some()
    }

    pub fn covariance(&self, landmark: LandmarkId, pose: PoseId) -> Option<&Matrix3<f64>> {
        self.get(landmark).and_then(|m| m.covariances.get(&pose))
    }

    pub fn window(&self, landmark: LandmarkId) -> Option<&[PoseId]> {
        self.get(landmark).map(|m| m.window.as_slice())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

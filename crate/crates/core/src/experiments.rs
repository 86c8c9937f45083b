//! Measurement helpers shared by the command-line harness and the
//! acceptance tests: compatibility calibration on ground-truth matches,
//! merge accuracy, localization error and a GC micro-benchmark.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compatibility::{
    gc_distance, gc_for_merge_set, jc_distance, CandidateMatch, GateConfig, LandmarkCovariances,
};
use crate::error::Result;
use crate::factor_graph::{CovarianceRecovery, FactorGraph, LandmarkId, LocalConfig, LocalMarginalCache};
use crate::geometry::{RigidTransform, Rotation};
use crate::pipeline::{growth_events, run_incremental, PipelineConfig, StepTimings};
use crate::simulator::{ground_truth_matches, GroundTruth, MatchSampling};
use crate::stats::{chi2_cdf, chi2_quantile, exceedance, ks_test, median};

/// Compatibility distances of one ground-truth merge set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationSample {
    pub m: usize,
    pub d_gc: f64,
    pub d_jc: f64,
}

pub const CALIBRATION_HEADER: &str = "m,d_gc,d_jc";

/// GC and JC distances of sampled ground-truth matches of each cardinality
/// in `ms`. `graph` should be optimized. Sets whose distances cannot be
/// evaluated are skipped.
pub fn calibration_samples(
    graph: &FactorGraph,
    truth: &GroundTruth,
    ms: &[usize],
    sampling: &MatchSampling,
    local: &LocalConfig,
    gate: &GateConfig,
) -> Result<Vec<CalibrationSample>> {
    let mut cache = LocalMarginalCache::new(*local);
    cache.refresh(graph);
    let recovery = CovarianceRecovery::new(graph)?;
    let mut out = Vec::new();
    for &m in ms {
        let sets = ground_truth_matches(graph, truth, m, sampling)?;
        let ids: Vec<LandmarkId> = sets
            .iter()
            .flat_map(|s| s.landmarks())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if ids.is_empty() {
            continue;
        }
        let cov = LandmarkCovariances::compute(&recovery, &ids)?;
        for set in &sets {
            let Ok(gc) = gc_for_merge_set(graph, &cache, set, gate) else {
                continue;
            };
            let Ok(jc) = jc_distance(graph, &cov, set, gate.quantile) else {
                continue;
            };
            out.push(CalibrationSample {
                m,
                d_gc: gc.d_gc,
                d_jc: jc.d_jc,
            });
        }
    }
    Ok(out)
}

pub fn calibration_csv(samples: &[CalibrationSample]) -> String {
    let mut out = format!("{CALIBRATION_HEADER}\n");
    for s in samples {
        let _ = writeln!(out, "{},{},{}", s.m, s.d_gc, s.d_jc);
    }
    out
}

/// Empirical tail mass of both distances at one quantile of their
/// reference distributions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailSummary {
    pub m: usize,
    pub quantile: f64,
    pub count: usize,
    pub gc_threshold: f64,
    pub gc_exceedance: f64,
    pub jc_threshold: f64,
    pub jc_exceedance: f64,
    /// KS p-value of the JC distances against χ²(3m), repeated per row.
    pub jc_ks_p: f64,
}

pub const SUMMARY_HEADER: &str = "m,quantile,count,gc_threshold,gc_exceedance,jc_threshold,jc_exceedance,jc_ks_p";

/// Tail summary for each `m` and quantile. Rows for an `m` without samples
/// have `count = 0` and NaN statistics.
pub fn tail_summary(samples: &[CalibrationSample], ms: &[usize], quantiles: &[f64]) -> Result<Vec<TailSummary>> {
    let mut rows = Vec::new();
    for &m in ms {
        let gc: Vec<f64> = samples.iter().filter(|s| s.m == m).map(|s| s.d_gc).collect();
        let jc: Vec<f64> = samples.iter().filter(|s| s.m == m).map(|s| s.d_jc).collect();
        let ks_p = if jc.is_empty() {
            f64::NAN
        } else {
            ks_test(&jc, |x| chi2_cdf(3 * m, x)).1
        };
        for &q in quantiles {
            let gc_threshold = chi2_quantile(3 * m - 6, q)?;
            let jc_threshold = chi2_quantile(3 * m, q)?;
            let tail = |v: &[f64], t: f64| if v.is_empty() { f64::NAN } else { exceedance(v, t) };
            rows.push(TailSummary {
                m,
                quantile: q,
                count: gc.len(),
                gc_threshold,
                gc_exceedance: tail(&gc, gc_threshold),
                jc_threshold,
                jc_exceedance: tail(&jc, jc_threshold),
                jc_ks_p: ks_p,
            });
        }
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[TailSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.m, r.quantile, r.count, r.gc_threshold, r.gc_exceedance, r.jc_threshold, r.jc_exceedance, r.jc_ks_p
        );
    }
    out
}

/// `(correct, total)` over merged pairs, a pair being correct when both
/// landmarks belong to the same duplicate group.
pub fn merge_accuracy<'a>(pairs: impl IntoIterator<Item = &'a CandidateMatch>, truth: &GroundTruth) -> (usize, usize) {
    let owner = truth.true_landmark_of();
    let mut correct = 0;
    let mut total = 0;
    for s in pairs {
        total += 1;
        if owner.get(&s.a).is_some_and(|t| owner.get(&s.b) == Some(t)) {
            correct += 1;
        }
    }
    (correct, total)
}

/// Position error of the last pose against ground truth. The simulated
/// graph is anchored at the true first pose, so no alignment is needed.
pub fn final_pose_error(graph: &FactorGraph, truth: &GroundTruth) -> Option<f64> {
    let (id, estimate) = graph.poses().last()?;
    let true_pose = truth.poses.get(id)?;
    Some((estimate.translation - true_pose.translation).norm())
}

/// Timing CSV for the per-size phase decomposition.
pub const BENCH_HEADER: &str = "size,method,t_cache,t_cgraph,t_search,t_cov,t_total";

/// Phase times in microseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseMicros {
    pub cache: f64,
    pub cgraph: f64,
    pub search: f64,
    pub cov: f64,
}

impl PhaseMicros {
    pub fn total(&self) -> f64 {
        self.cache + self.cgraph + self.search + self.cov
    }

    /// Element-wise median over repetitions.
    pub fn median_of(runs: &[PhaseMicros]) -> PhaseMicros {
        let pick = |f: fn(&PhaseMicros) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        PhaseMicros {
            cache: pick(|p| p.cache),
            cgraph: pick(|p| p.cgraph),
            search: pick(|p| p.search),
            cov: pick(|p| p.cov),
        }
    }
}

/// One row under [`BENCH_HEADER`].
pub fn bench_row(size: usize, method: &str, t: &PhaseMicros) -> String {
    format!("{size},{method},{:.0},{:.0},{:.0},{:.0},{:.0}", t.cache, t.cgraph, t.search, t.cov, t.total())
}

pub const MICROBENCH_HEADER: &str = "m,t_gc_us";

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Wall time in microseconds of one GC evaluation on a random
/// constellation of each size in `ms`. Each repetition times `inner`
/// evaluations to get above the clock resolution; the fastest repetition
/// is kept, since scheduler interruptions only ever add time.
pub fn gc_microbench(ms: &[usize], repetitions: usize, inner: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(ms.len());
    for &m in ms {
        let a: Vec<Vector3<f64>> = (0..m)
            .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(2.0..10.0)))
            .collect();
        let t = RigidTransform::new(Rotation::about_z(rng.random_range(-1.0..1.0)), Vector3::new(1.0, -2.0, 0.5));
        let b: Vec<Vector3<f64>> = a.iter().map(|p| t.apply_inverse(p) + Vector3::repeat(0.01)).collect();
        let covs = vec![Matrix3::identity() * 0.01; m];
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            for _ in 0..inner {
                std::hint::black_box(gc_distance(&a, &b, &covs, &covs, 0.95)?);
            }
            times.push(micros(start.elapsed()) / inner as f64);
        }
        out.push((m, times.into_iter().fold(f64::INFINITY, f64::min)));
    }
    Ok(out)
}

pub fn microbench_csv(rows: &[(usize, f64)]) -> String {
    let mut out = format!("{MICROBENCH_HEADER}\n");
    for (m, t) in rows {
        let _ = writeln!(out, "{m},{t:.3}");
    }
    out
}

/// Phase times of the final merge cycle when replaying `graph` pose by
/// pose, median over `repetitions` replays.
pub fn replay_timing(graph: &FactorGraph, config: &PipelineConfig, repetitions: usize) -> Result<PhaseMicros> {
    let events = growth_events(graph);
    let mut runs = Vec::with_capacity(repetitions);
    for _ in 0..repetitions.max(1) {
        let log = run_incremental(graph.camera, &events, config)?;
        if let Some(last) = log.cycles.last() {
            runs.push(phase_micros(&last.timings));
        }
    }
    Ok(PhaseMicros::median_of(&runs))
}

pub fn phase_micros(t: &StepTimings) -> PhaseMicros {
    PhaseMicros {
        cache: micros(t.cache),
        cgraph: micros(t.cgraph),
        search: micros(t.search),
        cov: micros(t.covariance),
    }
}

//! Match residuals and the two compatibility metrics: joint compatibility
//! (JC, global covariance) and geometric compatibility (GC, local
//! covariances under the optimal rigid alignment).

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::factor_graph::{CovarianceRecovery, FactorGraph, LandmarkId, LocalMarginalCache, PoseId, VariableId};
use crate::geometry::{procrustes_align, skew, RigidTransform, TangentVector};
use crate::stats::chi2_quantile;

/// Default gate probability.
pub const DEFAULT_QUANTILE: f64 = 0.95;
/// Smallest constellation for which the GC gate has positive degrees of freedom.
pub const MIN_GC_CARDINALITY: usize = 3;

/// Ordered landmark pair `s = (a, b)`: `a` belongs to constellation A, `b` to B.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CandidateMatch {
    pub a: LandmarkId,
    pub b: LandmarkId,
}

impl CandidateMatch {
    pub fn new(a: LandmarkId, b: LandmarkId) -> Self {
        Self { a, b }
    }
}

/// Ordered set of candidate matches defining two constellations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct MergeSet(Vec<CandidateMatch>);

impl MergeSet {
    /// Validates that all `a`s are distinct, all `b`s are distinct and the
    /// two sides are disjoint.
    pub fn new(matches: Vec<CandidateMatch>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &matches {
            if s.a == s.b {
                return Err(Error::InvalidArgument(format!("self match ({}, {})", s.a, s.b)));
            }
            if !seen.insert(s.a) || !seen.insert(s.b) {
                return Err(Error::InvalidArgument("merge set reuses a landmark".into()));
            }
        }
        Ok(Self(matches))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn matches(&self) -> &[CandidateMatch] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn constellation_a(&self) -> Vec<LandmarkId> {
        self.0.iter().map(|s| s.a).collect()
    }

    pub fn constellation_b(&self) -> Vec<LandmarkId> {
        self.0.iter().map(|s| s.b).collect()
    }

    pub fn landmarks(&self) -> impl Iterator<Item = LandmarkId> + '_ {
        self.0.iter().flat_map(|s| [s.a, s.b])
    }
}

pub fn residual(p_a: &Vector3<f64>, p_b: &Vector3<f64>) -> Vector3<f64> {
    p_a - p_b
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GcResult {
    pub d_gc: f64,
    /// `ᴬT_B`, mapping frame-B points into frame A.
    pub alignment: RigidTransform,
    pub dof: usize,
    pub gate_passed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JcResult {
    pub d_jc: f64,
    pub dof: usize,
    pub gate_passed: bool,
}

fn combined_information(cov_a: &Matrix3<f64>, cov_b: &Matrix3<f64>, r: &Matrix3<f64>) -> Option<Cholesky<f64, nalgebra::U3>> {
    Cholesky::new(cov_a + r * cov_b * r.transpose())
}

/// Blockwise evaluation of `Σⱼ rⱼᵀ (Σᴬⱼⱼ + R Σᴮⱼⱼ Rᵀ)⁻¹ rⱼ` at `transform`.
/// `None` if some combined block is not positive definite.
pub fn gc_cost(
    estimates_a: &[Vector3<f64>],
    estimates_b: &[Vector3<f64>],
    covs_a: &[Matrix3<f64>],
    covs_b: &[Matrix3<f64>],
    transform: &RigidTransform,
) -> Option<f64> {
    let r_mat = transform.rotation.matrix();
    let mut total = 0.0;
    for j in 0..estimates_a.len() {
        let r = estimates_a[j] - transform.apply(&estimates_b[j]);
        let chol = combined_information(&covs_a[j], &covs_b[j], &r_mat)?;
        total += r.dot(&chol.solve(&r));
    }
    Some(total)
}

/// One Gauss-Newton step from `initial` with the combined covariances
/// locked at its rotation, halved until the cost does not increase.
fn refine_step(
    estimates_a: &[Vector3<f64>],
    estimates_b: &[Vector3<f64>],
    covs_a: &[Matrix3<f64>],
    covs_b: &[Matrix3<f64>],
    initial: &RigidTransform,
) -> Option<RigidTransform> {
    let r_bar = initial.rotation.matrix();
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for j in 0..estimates_a.len() {
        let w = combined_information(&covs_a[j], &covs_b[j], &r_bar)?.inverse();
        let r = estimates_a[j] - initial.apply(&estimates_b[j]);
        let mut jac = Matrix3x6::zeros();
        jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_bar * skew(&estimates_b[j])));
        jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&r_bar);
        let jtw = jac.transpose() * w;
        h += jtw * jac;
        g += jtw * r;
    }
    let base = gc_cost(estimates_a, estimates_b, covs_a, covs_b, initial)?;
    let mut delta = Cholesky::new(h)?.solve(&g);
    for _ in 0..6 {
        let candidate = initial.retract(&TangentVector(delta));
        if gc_cost(estimates_a, estimates_b, covs_a, covs_b, &candidate).is_some_and(|c| c <= base) {
            return Some(candidate);
        }
        delta *= 0.5;
    }
    None
}

/// Geometric compatibility of two corresponded constellations given in
/// their own frames.
///
/// Closed-form Procrustes alignment, then a single Gauss-Newton step in
/// the tangent space with the combined covariances held at the Procrustes
/// rotation. If no step lowers the cost the Procrustes alignment is kept.
pub fn gc_distance(
    estimates_a: &[Vector3<f64>],
    estimates_b: &[Vector3<f64>],
    covs_a: &[Matrix3<f64>],
    covs_b: &[Matrix3<f64>],
    quantile: f64,
) -> Result<GcResult> {
    let m = estimates_a.len();
    if estimates_b.len() != m || covs_a.len() != m || covs_b.len() != m {
        return Err(Error::InvalidArgument("constellation inputs have different lengths".into()));
    }
    if m < MIN_GC_CARDINALITY {
        return Err(Error::InsufficientDof(m));
    }
    let initial = procrustes_align(estimates_a, estimates_b)?;
    let base_cost = gc_cost(estimates_a, estimates_b, covs_a, covs_b, &initial)
        .ok_or_else(|| Error::InvalidArgument("covariance block is not positive definite".into()))?;
    let mut best = (base_cost, initial);
    // The locked step depends on which side is perturbed, so it is taken
    // from both sides and the lower cost kept; this keeps the distance
    // symmetric in (A, B).
    let forward = refine_step(estimates_a, estimates_b, covs_a, covs_b, &initial);
    let backward = refine_step(estimates_b, estimates_a, covs_b, covs_a, &initial.inverse()).map(|t| t.inverse());
    for candidate in [forward, backward].into_iter().flatten() {
        if let Some(c) = gc_cost(estimates_a, estimates_b, covs_a, covs_b, &candidate) {
            if c < best.0 {
                best = (c, candidate);
            }
        }
    }
    let dof = 3 * m - 6;
    let threshold = chi2_quantile(dof, quantile)?;
    Ok(GcResult {
        d_gc: best.0,
        alignment: best.1,
        dof,
        gate_passed: best.0 < threshold,
    })
}

/// Covariance blocks `Σʷ(a, b)` among a fixed set of landmarks, read from a
/// single joint marginal.
#[derive(Clone, Debug)]
pub struct LandmarkCovariances {
    index: BTreeMap<LandmarkId, usize>,
    joint: DMatrix<f64>,
}

impl LandmarkCovariances {
    pub fn compute(recovery: &CovarianceRecovery, landmarks: &[LandmarkId]) -> Result<Self> {
        let mut ids: Vec<LandmarkId> = landmarks.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let vars: Vec<VariableId> = ids.iter().map(|&l| VariableId::Landmark(l)).collect();
        let joint = recovery.marginal(&vars)?;
        let index = ids.into_iter().enumerate().map(|(i, l)| (l, i)).collect();
        Ok(Self { index, joint })
    }

    /// Wraps a joint covariance whose 3×3 blocks follow `landmarks` order.
    pub fn from_dense(landmarks: &[LandmarkId], joint: DMatrix<f64>) -> Result<Self> {
        if joint.nrows() != 3 * landmarks.len() || joint.ncols() != joint.nrows() {
            return Err(Error::InvalidArgument("joint covariance has the wrong size".into()));
        }
        let index: BTreeMap<_, _> = landmarks.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        if index.len() != landmarks.len() {
            return Err(Error::InvalidArgument("duplicate landmark id".into()));
        }
        Ok(Self { index, joint })
    }

    pub fn contains(&self, landmark: LandmarkId) -> bool {
        self.index.contains_key(&landmark)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn block(&self, a: LandmarkId, b: LandmarkId) -> Option<Matrix3<f64>> {
        let (i, j) = (*self.index.get(&a)?, *self.index.get(&b)?);
        Some(self.joint.fixed_view::<3, 3>(3 * i, 3 * j).into_owned())
    }
}

/// Joint compatibility of `merge_set` against the global covariance.
pub fn jc_distance(
    graph: &FactorGraph,
    covariances: &LandmarkCovariances,
    merge_set: &MergeSet,
    quantile: f64,
) -> Result<JcResult> {
    let m = merge_set.len();
    if m == 0 {
        return Err(Error::DegenerateGate);
    }
    let matches = merge_set.matches();
    let mut r = DVector::zeros(3 * m);
    for (k, s) in matches.iter().enumerate() {
        let pa = graph.landmark(s.a)?.position;
        let pb = graph.landmark(s.b)?.position;
        r.fixed_rows_mut::<3>(3 * k).copy_from(&residual(&pa, &pb));
    }
    let block = |x: LandmarkId, y: LandmarkId| covariances.block(x, y).ok_or(Error::InconsistentCovariance);
    let mut cov = DMatrix::zeros(3 * m, 3 * m);
    for (i, si) in matches.iter().enumerate() {
        for (k, sk) in matches.iter().enumerate() {
            let b = block(si.a, sk.a)? + block(si.b, sk.b)? - block(si.a, sk.b)? - block(si.b, sk.a)?;
            cov.fixed_view_mut::<3, 3>(3 * i, 3 * k).copy_from(&b);
        }
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    let chol = Cholesky::new(cov).ok_or(Error::InconsistentCovariance)?;
    let d_jc = r.dot(&chol.solve(&r));
    let dof = 3 * m;
    Ok(JcResult {
        d_jc,
        dof,
        gate_passed: d_jc < chi2_quantile(dof, quantile)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FrameSelection {
    #[default]
    MinTrace,
    MinDeterminant,
}

fn common_window<'a>(cache: &LocalMarginalCache, landmarks: impl Iterator<Item = &'a LandmarkId>) -> Result<BTreeSet<PoseId>> {
    let mut common: Option<BTreeSet<PoseId>> = None;
    for &l in landmarks {
        let w: BTreeSet<PoseId> = cache
            .window(l)
            .ok_or(Error::LocalityViolated)?
            .iter()
            .copied()
            .collect();
        common = Some(match common {
            None => w,
            Some(c) => c.intersection(&w).copied().collect(),
        });
    }
    common.filter(|c| !c.is_empty()).ok_or(Error::LocalityViolated)
}

fn best_frame(cache: &LocalMarginalCache, landmarks: &[LandmarkId], mode: FrameSelection) -> Result<PoseId> {
    let common = common_window(cache, landmarks.iter())?;
    let mut best: Option<(f64, PoseId)> = None;
    for &pose in &common {
        let mut score = 0.0;
        for &l in landmarks {
            let c = cache.covariance(l, pose).ok_or(Error::LocalityViolated)?;
            score += match mode {
                FrameSelection::MinTrace => c.trace(),
                FrameSelection::MinDeterminant => c.determinant(),
            };
        }
        if best.is_none_or(|(s, _)| score < s) {
            best = Some((score, pose));
        }
    }
    best.map(|(_, p)| p).ok_or(Error::LocalityViolated)
}

/// Picks the reference poses for constellations A and B among their common
/// observing poses, minimizing the summed trace (or determinant) of the
/// cached local marginals. Ties go to the smallest pose id.
pub fn select_frames(merge_set: &MergeSet, cache: &LocalMarginalCache, mode: FrameSelection) -> Result<(PoseId, PoseId)> {
    Ok((
        best_frame(cache, &merge_set.constellation_a(), mode)?,
        best_frame(cache, &merge_set.constellation_b(), mode)?,
    ))
}

/// Landmark estimates of a constellation expressed in the frame of `pose`,
/// with their cached local covariances.
pub fn constellation_in_frame(
    graph: &FactorGraph,
    cache: &LocalMarginalCache,
    landmarks: &[LandmarkId],
    pose: PoseId,
) -> Result<(Vec<Vector3<f64>>, Vec<Matrix3<f64>>)> {
    let frame = graph.pose(pose)?;
    let mut points = Vec::with_capacity(landmarks.len());
    let mut covs = Vec::with_capacity(landmarks.len());
    for &l in landmarks {
        points.push(frame.apply_inverse(&graph.landmark(l)?.position));
        covs.push(*cache.covariance(l, pose).ok_or(Error::LocalityViolated)?);
    }
    Ok((points, covs))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub quantile: f64,
    pub frame_selection: FrameSelection,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            quantile: DEFAULT_QUANTILE,
            frame_selection: FrameSelection::MinTrace,
        }
    }
}

/// Full GC evaluation of a merge set from graph estimates and the cache.
pub fn gc_for_merge_set(
    graph: &FactorGraph,
    cache: &LocalMarginalCache,
    merge_set: &MergeSet,
    config: &GateConfig,
) -> Result<GcResult> {
    let (frame_a, frame_b) = select_frames(merge_set, cache, config.frame_selection)?;
    let (pa, ca) = constellation_in_frame(graph, cache, &merge_set.constellation_a(), frame_a)?;
    let (pb, cb) = constellation_in_frame(graph, cache, &merge_set.constellation_b(), frame_b)?;
    gc_distance(&pa, &pb, &ca, &cb, config.quantile)
}

/// Gate applied to a search prefix: passes trivially below three matches,
/// otherwise evaluates GC. Any evaluation failure counts as a rejection.
/// Returns `(passed, d_gc)`.
pub fn gc_gate_partial(
    graph: &FactorGraph,
    cache: &LocalMarginalCache,
    prefix: &[CandidateMatch],
    config: &GateConfig,
) -> (bool, f64) {
    if prefix.len() < MIN_GC_CARDINALITY {
        return (true, 0.0);
    }
    let set = MergeSet(prefix.to_vec());
    match gc_for_merge_set(graph, cache, &set, config) {
        Ok(r) => (r.gate_passed, r.d_gc),
        Err(_) => (false, f64::INFINITY),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut impl Rng, m: usize) -> Vec<Vector3<f64>> {
        (0..m)
            .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect()
    }

    fn random_spd(rng: &mut impl Rng, scale: f64) -> Matrix3<f64> {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        (a * a.transpose() + Matrix3::identity() * 0.2) * scale
    }

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        RigidTransform::new(
            Rotation::from_axis_angle(&axis, rng.random_range(0.0..3.0)),
            Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)),
        )
    }

    #[test]
    fn residual_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(residual(&p, &p), Vector3::zeros());
        assert_eq!(residual(&Vector3::x(), &Vector3::zeros()), Vector3::x());
        let q = Vector3::new(-1.0, 0.5, 4.0);
        assert_eq!(residual(&p, &q), -residual(&q, &p));
    }

    #[test]
    fn merge_set_validation() {
        assert!(MergeSet::new(vec![CandidateMatch::new(1, 1)]).is_err());
        assert!(MergeSet::new(vec![CandidateMatch::new(1, 2), CandidateMatch::new(1, 3)]).is_err());
        assert!(MergeSet::new(vec![CandidateMatch::new(1, 2), CandidateMatch::new(2, 3)]).is_err());
        let s = MergeSet::new(vec![CandidateMatch::new(1, 2), CandidateMatch::new(3, 4)]).unwrap();
        assert_eq!(s.constellation_a(), vec![1, 3]);
        assert_eq!(s.constellation_b(), vec![2, 4]);
    }

    #[test]
    fn rigid_copy_has_zero_gc() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for m in 3..8 {
            let a = random_points(&mut rng, m);
            let t = random_transform(&mut rng);
            let b: Vec<_> = a.iter().map(|p| t.apply_inverse(p)).collect();
            let ca: Vec<_> = (0..m).map(|_| random_spd(&mut rng, 0.01)).collect();
            let cb: Vec<_> = (0..m).map(|_| random_spd(&mut rng, 0.01)).collect();
            let r = gc_distance(&a, &b, &ca, &cb, 0.95).unwrap();
            assert!(r.d_gc.abs() < 1e-9, "{}", r.d_gc);
            assert!((r.alignment.translation - t.translation).norm() < 1e-9);
            assert_eq!(r.dof, 3 * m - 6);
            assert!(r.gate_passed);
        }
    }

    #[test]
    fn isotropic_case_is_scaled_procrustes_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let a = random_points(&mut rng, 3);
            let b: Vec<_> = random_points(&mut rng, 3);
            let sigma2 = 0.3;
            let covs = vec![Matrix3::identity() * sigma2; 3];
            let r = gc_distance(&a, &b, &covs, &covs, 0.95).unwrap();
            let procrustes = procrustes_align(&a, &b).unwrap();
            let expect = crate::geometry::alignment_cost(&a, &b, &procrustes) / (2.0 * sigma2);
            assert!((r.d_gc - expect).abs() < 1e-9 * expect.max(1.0), "{} vs {}", r.d_gc, expect);
        }
    }

    fn dense_gc_cost(a: &[Vector3<f64>], b: &[Vector3<f64>], ca: &[Matrix3<f64>], cb: &[Matrix3<f64>], t: &RigidTransform) -> f64 {
        let m = a.len();
        let mut big_a = DMatrix::zeros(3 * m, 3 * m);
        let mut big_b = DMatrix::zeros(3 * m, 3 * m);
        let mut rot = DMatrix::zeros(3 * m, 3 * m);
        let mut r = DVector::zeros(3 * m);
        for j in 0..m {
            big_a.fixed_view_mut::<3, 3>(3 * j, 3 * j).copy_from(&ca[j]);
            big_b.fixed_view_mut::<3, 3>(3 * j, 3 * j).copy_from(&cb[j]);
            rot.fixed_view_mut::<3, 3>(3 * j, 3 * j).copy_from(&t.rotation.matrix());
            r.fixed_rows_mut::<3>(3 * j).copy_from(&(a[j] - t.apply(&b[j])));
        }
        let s = big_a + &rot * big_b * rot.transpose();
        r.dot(&(s.try_inverse().unwrap() * &r))
    }

    #[test]
    fn blockwise_cost_equals_dense_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for m in 3..10 {
            let a = random_points(&mut rng, m);
            let b = random_points(&mut rng, m);
            let ca: Vec<_> = (0..m).map(|_| random_spd(&mut rng, 0.1)).collect();
            let cb: Vec<_> = (0..m).map(|_| random_spd(&mut rng, 0.1)).collect();
            let t = random_transform(&mut rng);
            let block = gc_cost(&a, &b, &ca, &cb, &t).unwrap();
            let dense = dense_gc_cost(&a, &b, &ca, &cb, &t);
            assert!((block - dense).abs() < 1e-9 * dense.max(1.0));
        }
    }

    fn noisy_pair(rng: &mut impl Rng, m: usize, noise: f64) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<Matrix3<f64>>, Vec<Matrix3<f64>>) {
        let a = random_points(rng, m);
        let t = random_transform(rng);
        let b: Vec<_> = a
            .iter()
            .map(|p| t.apply_inverse(p) + Vector3::from_fn(|_, _| rng.random_range(-noise..noise)))
            .collect();
        let ca: Vec<_> = (0..m).map(|_| random_spd(rng, noise * noise)).collect();
        let cb: Vec<_> = (0..m).map(|_| random_spd(rng, noise * noise)).collect();
        (a, b, ca, cb)
    }

    #[test]
    fn refinement_never_increases_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..500 {
            let m = rng.random_range(3..9);
            let (a, b, ca, cb) = noisy_pair(&mut rng, m, 0.3);
            let r = gc_distance(&a, &b, &ca, &cb, 0.95).unwrap();
            let t0 = procrustes_align(&a, &b).unwrap();
            let at_procrustes = gc_cost(&a, &b, &ca, &cb, &t0).unwrap();
            assert!(r.d_gc <= at_procrustes + 1e-9);
        }
    }

    #[test]
    fn gc_is_symmetric_and_gauge_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..200 {
            let m = rng.random_range(3..8);
            let (a, b, ca, cb) = noisy_pair(&mut rng, m, 0.05);
            let ab = gc_distance(&a, &b, &ca, &cb, 0.95).unwrap().d_gc;
            let ba = gc_distance(&b, &a, &cb, &ca, 0.95).unwrap().d_gc;
            assert!((ab - ba).abs() < 1e-6 * ab.max(1.0), "{ab} vs {ba}");

            let g = random_transform(&mut rng);
            let rg = g.rotation.matrix();
            let ga: Vec<_> = a.iter().map(|p| g.apply(p)).collect();
            let gca: Vec<_> = ca.iter().map(|c| rg * c * rg.transpose()).collect();
            let moved = gc_distance(&ga, &b, &gca, &cb, 0.95).unwrap().d_gc;
            assert!((ab - moved).abs() < 1e-6 * ab.max(1.0), "{ab} vs {moved}");
        }
    }

    #[test]
    fn gc_rejects_small_constellations() {
        let p = vec![Vector3::zeros(), Vector3::x()];
        let c = vec![Matrix3::identity(); 2];
        assert!(matches!(gc_distance(&p, &p, &c, &c, 0.95), Err(Error::InsufficientDof(2))));
    }

    #[test]
    fn prefix_terms_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let (a, b, ca, cb) = noisy_pair(&mut rng, 7, 0.2);
        let t = procrustes_align(&a, &b).unwrap();
        let mut last = 0.0;
        for k in 3..=7 {
            let c = gc_cost(&a[..k], &b[..k], &ca[..k], &cb[..k], &t).unwrap();
            assert!(c >= last);
            last = c;
        }
    }
}

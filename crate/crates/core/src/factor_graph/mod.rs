//! SLAM factor graph: pose and landmark variables, odometry, pinhole
//! observation and prior factors, plus batch optimization and covariance
//! recovery services.

mod covariance;
mod factors;
pub mod io;
mod linear;
mod local;
mod optimize;
pub mod sparse;

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix6, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Rotation};

pub use covariance::{full_covariance, marginal_block, relative_marginal, CovarianceRecovery};
pub use factors::{observation_error, odometry_error, prior_error};
pub use linear::{linearize, total_cost, Linearization, VariableLayout};
pub use local::{local_marginals, local_subgraph, observation_window, LocalConfig, LocalMarginalCache, LocalMarginals};
pub use optimize::{optimize, OptimizeConfig, OptimizeReport};

pub type PoseId = usize;
pub type LandmarkId = usize;

/// Information weight used for gauge-fixing priors.
pub const GAUGE_INFORMATION: f64 = 1e12;

/// Closer points count as behind the camera: their projection Jacobians
/// are large enough to wreck the conditioning of the normal equations.
pub const MIN_DEPTH: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VariableId {
    Pose(PoseId),
    Landmark(LandmarkId),
}

impl std::fmt::Display for VariableId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VariableId::Pose(id) => write!(f, "pose {id}"),
            VariableId::Landmark(id) => write!(f, "landmark {id}"),
        }
    }
}

/// Pinhole camera rigidly mounted on the robot body.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    pub body_to_camera: RigidTransform,
}

impl CameraModel {
    /// Forward-looking camera (optical axis along body +x, image x along
    /// body −y, image y along body −z) with the given horizontal field of view.
    pub fn forward_looking(width: f64, height: f64, horizontal_fov_deg: f64) -> Self {
        let f = 0.5 * width / (0.5 * horizontal_fov_deg.to_radians()).tan();
        let r = nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width,
            cy: 0.5 * height,
            width,
            height,
            body_to_camera: RigidTransform::new(Rotation::from_matrix(&r), Vector3::zeros()),
        }
    }

    /// Projects a point given in the camera frame. `None` behind the camera.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p_cam.z <= 1e-9 {
            return None;
        }
        Some(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    pub fn in_image(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.x <= self.width && pixel.y >= 0.0 && pixel.y <= self.height
    }

    /// World-frame ray `(origin, unit direction)` through `pixel` from body
    /// pose `pose`.
    pub fn back_project(&self, pose: &RigidTransform, pixel: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let d_cam = Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0);
        let camera = pose.compose(&self.body_to_camera);
        (camera.translation, camera.rotation.rotate(&d_cam).normalize())
    }

    /// Camera-frame coordinates of a world point seen from body pose `pose`.
    pub fn to_camera(&self, pose: &RigidTransform, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.body_to_camera.apply_inverse(&pose.apply_inverse(p_world))
    }

    /// True when the point is at least [`MIN_DEPTH`] in front of the camera.
    pub fn in_front(&self, pose: &RigidTransform, p_world: &Vector3<f64>) -> bool {
        self.to_camera(pose, p_world).z > MIN_DEPTH
    }
}

impl Default for CameraModel {
    fn default() -> Self {
        Self::forward_looking(640.0, 480.0, 70.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
    pub class_label: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdometryFactor {
    pub from: PoseId,
    pub to: PoseId,
    /// Measured `T_fromᵀ ∘ T_to`.
    pub measured: RigidTransform,
    /// 6×6 information, ordered (rotation, translation).
    pub information: Matrix6<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservationFactor {
    pub pose: PoseId,
    pub landmark: LandmarkId,
    pub pixel: Vector2<f64>,
    pub information: Matrix2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorFactor {
    pub pose: PoseId,
    pub mean: RigidTransform,
    pub information: Matrix6<f64>,
}

#[derive(Clone, Debug)]
pub struct FactorGraph {
    pub camera: CameraModel,
    poses: BTreeMap<PoseId, RigidTransform>,
    landmarks: BTreeMap<LandmarkId, Landmark>,
    odometry: Vec<OdometryFactor>,
    observations: Vec<ObservationFactor>,
    priors: Vec<PriorFactor>,
    obs_by_landmark: BTreeMap<LandmarkId, Vec<usize>>,
    obs_by_pose: BTreeMap<PoseId, Vec<usize>>,
}

impl FactorGraph {
    pub fn new(camera: CameraModel) -> Self {
        Self {
            camera,
            poses: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            odometry: Vec::new(),
            observations: Vec::new(),
            priors: Vec::new(),
            obs_by_landmark: BTreeMap::new(),
            obs_by_pose: BTreeMap::new(),
        }
    }

    pub fn add_pose(&mut self, id: PoseId, estimate: RigidTransform) -> Result<()> {
        if self.poses.insert(id, estimate).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate pose id {id}")));
        }
        Ok(())
    }

    pub fn add_landmark(&mut self, id: LandmarkId, landmark: Landmark) -> Result<()> {
        if self.landmarks.insert(id, landmark).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate landmark id {id}")));
        }
        Ok(())
    }

    pub fn add_odometry(&mut self, factor: OdometryFactor) -> Result<()> {
        self.require_pose(factor.from)?;
        self.require_pose(factor.to)?;
        self.odometry.push(factor);
        Ok(())
    }

    pub fn add_observation(&mut self, factor: ObservationFactor) -> Result<()> {
        self.require_pose(factor.pose)?;
        self.require_landmark(factor.landmark)?;
        if !self.camera.in_image(&factor.pixel) {
            return Err(Error::InvalidArgument(format!(
                "pixel ({}, {}) outside the image",
                factor.pixel.x, factor.pixel.y
            )));
        }
        let idx = self.observations.len();
        self.observations.push(factor);
        self.obs_by_landmark.entry(factor.landmark).or_default().push(idx);
        self.obs_by_pose.entry(factor.pose).or_default().push(idx);
        Ok(())
    }

    pub fn add_prior(&mut self, factor: PriorFactor) -> Result<()> {
        self.require_pose(factor.pose)?;
        self.priors.push(factor);
        Ok(())
    }

    /// Adds an exact-style prior (`GAUGE_INFORMATION · I`) holding `pose` at
    /// its current estimate.
    pub fn add_gauge_prior(&mut self, pose: PoseId) -> Result<()> {
        let mean = *self.pose(pose)?;
        self.add_prior(PriorFactor {
            pose,
            mean,
            information: Matrix6::identity() * GAUGE_INFORMATION,
        })
    }

    pub fn clear_priors(&mut self) {
        self.priors.clear();
    }

    fn require_pose(&self, id: PoseId) -> Result<()> {
        if self.poses.contains_key(&id) {
            Ok(())
        } else {
            Err(Error::UnknownPose(id))
        }
    }

    fn require_landmark(&self, id: LandmarkId) -> Result<()> {
        if self.landmarks.contains_key(&id) {
            Ok(())
        } else {
            Err(Error::UnknownLandmark(id))
        }
    }

    pub fn pose(&self, id: PoseId) -> Result<&RigidTransform> {
        self.poses.get(&id).ok_or(Error::UnknownPose(id))
    }

    pub fn landmark(&self, id: LandmarkId) -> Result<&Landmark> {
        self.landmarks.get(&id).ok_or(Error::UnknownLandmark(id))
    }

    pub fn set_pose(&mut self, id: PoseId, estimate: RigidTransform) -> Result<()> {
        *self.poses.get_mut(&id).ok_or(Error::UnknownPose(id))? = estimate;
        Ok(())
    }

    pub fn set_landmark_position(&mut self, id: LandmarkId, position: Vector3<f64>) -> Result<()> {
        self.landmarks.get_mut(&id).ok_or(Error::UnknownLandmark(id))?.position = position;
        Ok(())
    }

    pub fn has_pose(&self, id: PoseId) -> bool {
        self.poses.contains_key(&id)
    }

    pub fn has_landmark(&self, id: LandmarkId) -> bool {
        self.landmarks.contains_key(&id)
    }

    pub fn poses(&self) -> impl Iterator<Item = (PoseId, &RigidTransform)> {
        self.poses.iter().map(|(k, v)| (*k, v))
    }

    pub fn landmarks(&self) -> impl Iterator<Item = (LandmarkId, &Landmark)> {
        self.landmarks.iter().map(|(k, v)| (*k, v))
    }

    pub fn landmark_ids(&self) -> Vec<LandmarkId> {
        self.landmarks.keys().copied().collect()
    }

    pub fn num_poses(&self) -> usize {
        self.poses.len()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn odometry(&self) -> &[OdometryFactor] {
        &self.odometry
    }

    pub fn observations(&self) -> &[ObservationFactor] {
        &self.observations
    }

    pub fn priors(&self) -> &[PriorFactor] {
        &self.priors
    }

    pub fn observations_of(&self, landmark: LandmarkId) -> impl Iterator<Item = &ObservationFactor> {
        self.obs_by_landmark
            .get(&landmark)
            .into_iter()
            .flatten()
            .map(|&i| &self.observations[i])
    }

    pub fn observations_from(&self, pose: PoseId) -> impl Iterator<Item = &ObservationFactor> {
        self.obs_by_pose
            .get(&pose)
            .into_iter()
            .flatten()
            .map(|&i| &self.observations[i])
    }

    /// Sorted, de-duplicated ids of the poses observing `landmark`.
    pub fn observing_poses(&self, landmark: LandmarkId) -> Vec<PoseId> {
        let mut v: Vec<PoseId> = self.observations_of(landmark).map(|o| o.pose).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Degrees of freedom `Σ residual dims − Σ variable dims`.
    pub fn degrees_of_freedom(&self) -> i64 {
        let meas = 2 * self.observations.len() + 6 * self.odometry.len() + 6 * self.priors.len();
        let vars = 6 * self.poses.len() + 3 * self.landmarks.len();
        meas as i64 - vars as i64
    }

    /// Re-targets every observation of `remove` to `keep` and deletes
    /// `remove`. No re-optimization.
    pub fn merge_landmark_into(&mut self, keep: LandmarkId, remove: LandmarkId) -> Result<()> {
        if keep == remove {
            return Err(Error::InvalidArgument("cannot merge a landmark with itself".into()));
        }
        let a = *self.landmark(keep)?;
        let b = *self.landmark(remove)?;
        if a.class_label != b.class_label {
            return Err(Error::ClassMismatch {
                a: keep,
                b: remove,
                class_a: a.class_label,
                class_b: b.class_label,
            });
        }
        let moved = self.obs_by_landmark.remove(&remove).unwrap_or_default();
        for &i in &moved {
            self.observations[i].landmark = keep;
        }
        let list = self.obs_by_landmark.entry(keep).or_default();
        list.extend(moved);
        list.sort_unstable();
        self.landmarks.remove(&remove);
        Ok(())
    }

    /// Least-squares intersection of the observation rays of `landmark` at
    /// the current pose estimates. `None` with fewer than two observations,
    /// near-parallel rays, or a point behind any observing camera.
    pub fn triangulate(&self, landmark: LandmarkId) -> Option<Vector3<f64>> {
        let mut a = nalgebra::Matrix3::zeros();
        let mut b = Vector3::zeros();
        let mut n = 0;
        for o in self.observations_of(landmark) {
            let (c, d) = self.camera.back_project(self.pose(o.pose).ok()?, &o.pixel);
            let proj = nalgebra::Matrix3::identity() - d * d.transpose();
            a += proj;
            b += proj * c;
            n += 1;
        }
        if n < 2 {
            return None;
        }
        let eig = a.symmetric_eigenvalues();
        if eig.min() < 1e-6 * eig.max() {
            return None;
        }
        let p = a.cholesky()?.solve(&b);
        self.observations_of(landmark)
            .all(|o| self.pose(o.pose).is_ok_and(|t| self.camera.in_front(t, &p)))
            .then_some(p)
    }

    /// Checks referential integrity and that every landmark is observed.
    pub fn validate(&self) -> Result<()> {
        for f in &self.odometry {
            self.require_pose(f.from)?;
            self.require_pose(f.to)?;
        }
        for f in &self.observations {
            self.require_pose(f.pose)?;
            self.require_landmark(f.landmark)?;
        }
        for f in &self.priors {
            self.require_pose(f.pose)?;
        }
        for id in self.landmarks.keys() {
            if self.obs_by_landmark.get(id).is_none_or(|v| v.is_empty()) {
                return Err(Error::InvalidArgument(format!("landmark {id} has no observations")));
            }
        }
        Ok(())
    }
}

/// Merges landmark `remove` into `keep` (re-targeting its observations),
/// re-optimizes, and invalidates the affected local-marginal cache entries.
pub fn merge_landmarks(
    graph: &mut FactorGraph,
    keep: LandmarkId,
    remove: LandmarkId,
    config: &OptimizeConfig,
    cache: Option<&mut LocalMarginalCache>,
) -> Result<OptimizeReport> {
    graph.merge_landmark_into(keep, remove)?;
    if let Some(cache) = cache {
        cache.invalidate(keep);
        cache.remove(remove);
    }
    optimize(graph, config)
}

#[cfg(test)]
mod tests;

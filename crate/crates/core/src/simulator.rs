//! Synthetic loopy trajectories with class-labelled landmarks, a forward
//! camera and a front-end that loses tracks whenever a landmark leaves the
//! view, spawning duplicate landmark ids on every revisit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix2, Matrix6, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::compatibility::{CandidateMatch, MergeSet};
use crate::error::{Error, Result};
use crate::factor_graph::{
    observation_window, CameraModel, FactorGraph, Landmark, LandmarkId, ObservationFactor, OdometryFactor, PoseId,
};
use crate::geometry::{RigidTransform, Rotation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoisePreset {
    #[default]
    Low,
    High,
}

impl FromStr for NoisePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Self::Low),
            "high" => Ok(Self::High),
            other => Err(Error::InvalidArgument(format!("unknown noise preset '{other}'"))),
        }
    }
}

impl std::fmt::Display for NoisePreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Low => "low",
            Self::High => "high",
        })
    }
}

/// Standard deviations of the simulated sensors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// Odometry translation, metres per axis.
    pub odom_translation: f64,
    /// Odometry rotation, radians per axis.
    pub odom_rotation: f64,
    /// Pixel noise per image axis.
    pub pixel: f64,
}

impl NoiseModel {
    pub fn preset(preset: NoisePreset) -> Self {
        let low = Self {
            odom_translation: 0.02,
            odom_rotation: 0.2_f64.to_radians(),
            pixel: 1.0,
        };
        match preset {
            NoisePreset::Low => low,
            NoisePreset::High => Self {
                odom_translation: 3.0 * low.odom_translation,
                odom_rotation: 3.0 * low.odom_rotation,
                pixel: 3.0 * low.pixel,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub num_landmarks: usize,
    pub num_classes: u32,
    pub loops: usize,
    pub poses_per_loop: usize,
    /// Rounded-rectangle extent along x and y, metres.
    pub loop_length: f64,
    pub loop_width: f64,
    pub corner_radius: f64,
    /// Landmarks are drawn in the loop's bounding box grown by this margin.
    pub landmark_margin: f64,
    /// Landmark heights are uniform in `[-h, h]`.
    pub landmark_height: f64,
    /// Minimum landmark distance to the path, metres.
    pub path_clearance: f64,
    pub fov_deg: f64,
    pub max_range: f64,
    pub noise: NoiseModel,
    /// When false the measurements are exact; the information matrices still
    /// follow `noise`.
    pub sample_noise: bool,
    /// Tracks with fewer observations are discarded by the front-end.
    pub min_track_length: usize,
    /// Standard deviation of the initial landmark guess, as a fraction of
    /// its depth at the first observation.
    pub init_depth_fraction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_landmarks: 120,
            num_classes: 3,
            loops: 3,
            poses_per_loop: 100,
            loop_length: 40.0,
            loop_width: 24.0,
            corner_radius: 6.0,
            landmark_margin: 8.0,
            landmark_height: 1.5,
            path_clearance: 1.5,
            fov_deg: 70.0,
            max_range: 15.0,
            noise: NoiseModel::preset(NoisePreset::Low),
            sample_noise: true,
            min_track_length: 3,
            init_depth_fraction: 0.05,
        }
    }
}

impl SimConfig {
    pub fn with_preset(seed: u64, preset: NoisePreset) -> Self {
        Self {
            seed,
            noise: NoiseModel::preset(preset),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be at least 1".into()));
        }
        let n = &self.noise;
        if !(n.odom_translation > 0.0 && n.odom_rotation > 0.0 && n.pixel > 0.0) {
            return Err(Error::InvalidArgument("noise standard deviations must be positive".into()));
        }
        if self.poses_per_loop < 4 || self.corner_radius <= 0.0 {
            return Err(Error::InvalidArgument("degenerate trajectory".into()));
        }
        if 2.0 * self.corner_radius > self.loop_length.min(self.loop_width) {
            return Err(Error::InvalidArgument("corner radius too large for the loop".into()));
        }
        Ok(())
    }
}

/// The true scene: trajectory, landmarks and sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub poses: Vec<RigidTransform>,
    pub landmarks: Vec<Landmark>,
    pub camera: CameraModel,
    pub max_range: f64,
}

/// Position and heading at arclength `s` along a counter-clockwise rounded
/// rectangle with corners at `(0, 0)` and `(length, width)`.
fn rounded_rectangle(s: f64, length: f64, width: f64, r: f64) -> (Vector2<f64>, f64) {
    use std::f64::consts::{FRAC_PI_2, PI};
    let straight_x = length - 2.0 * r;
    let straight_y = width - 2.0 * r;
    let arc = FRAC_PI_2 * r;
    let perimeter = 2.0 * (straight_x + straight_y) + 4.0 * arc;
    let mut s = s.rem_euclid(perimeter);
    // (segment length, start point, heading or arc centre)
    let corners = [
        (Vector2::new(length - r, r), -FRAC_PI_2),
        (Vector2::new(length - r, width - r), 0.0),
        (Vector2::new(r, width - r), FRAC_PI_2),
        (Vector2::new(r, r), PI),
    ];
    let straights = [
        (Vector2::new(r, 0.0), 0.0, straight_x),
        (Vector2::new(length, r), FRAC_PI_2, straight_y),
        (Vector2::new(length - r, width), PI, straight_x),
        (Vector2::new(0.0, width - r), -FRAC_PI_2, straight_y),
    ];
    for k in 0..4 {
        let (start, heading, len) = straights[k];
        if s < len {
            return (start + s * Vector2::new(heading.cos(), heading.sin()), heading);
        }
        s -= len;
        if s < arc || k == 3 {
            let (centre, a0) = corners[k];
            let a = a0 + s.min(arc) / r;
            return (centre + r * Vector2::new(a.cos(), a.sin()), a + FRAC_PI_2);
        }
        s -= arc;
    }
    unreachable!("arclength reduced modulo the perimeter")
}

fn loop_perimeter(config: &SimConfig) -> f64 {
    let r = config.corner_radius;
    2.0 * (config.loop_length + config.loop_width - 4.0 * r) + 2.0 * std::f64::consts::PI * r
}

/// Deterministic world for `config.seed`: the planar loop traversed
/// `config.loops` times and landmarks uniform in a box around it.
pub fn generate_world(config: &SimConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let perimeter = loop_perimeter(config);
    let step = perimeter / config.poses_per_loop as f64;
    let poses: Vec<RigidTransform> = (0..config.loops * config.poses_per_loop + 1)
        .map(|k| {
            let (p, heading) = rounded_rectangle(k as f64 * step, config.loop_length, config.loop_width, config.corner_radius);
            RigidTransform::new(Rotation::about_z(heading), Vector3::new(p.x, p.y, 0.0))
        })
        .collect();
    let path: Vec<Vector2<f64>> = (0..400)
        .map(|k| rounded_rectangle(k as f64 * perimeter / 400.0, config.loop_length, config.loop_width, config.corner_radius).0)
        .collect();
    let m = config.landmark_margin;
    let mut landmarks = Vec::with_capacity(config.num_landmarks);
    while landmarks.len() < config.num_landmarks {
        let p = Vector3::new(
            rng.random_range(-m..config.loop_length + m),
            rng.random_range(-m..config.loop_width + m),
            rng.random_range(-config.landmark_height..=config.landmark_height),
        );
        let clearance = path
            .iter()
            .map(|q| (p.xy() - q).norm())
            .fold(f64::INFINITY, f64::min);
        if clearance < config.path_clearance {
            continue;
        }
        landmarks.push(Landmark {
            position: p,
            class_label: rng.random_range(0..config.num_classes),
        });
    }
    Ok(World {
        poses,
        landmarks,
        camera: CameraModel::forward_looking(640.0, 480.0, config.fov_deg),
        max_range: config.max_range,
    })
}

/// Ground truth accompanying a simulated graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    /// True pose `k` is `poses[k]`.
    pub poses: Vec<RigidTransform>,
    /// Keyed by true landmark id.
    pub landmarks: BTreeMap<usize, Landmark>,
    /// True landmark id → estimated landmark ids, ascending. Only landmarks
    /// that produced at least one kept track appear.
    pub duplicate_groups: BTreeMap<usize, Vec<LandmarkId>>,
}

impl GroundTruth {
    pub fn true_landmark_of(&self) -> BTreeMap<LandmarkId, usize> {
        self.duplicate_groups
            .iter()
            .flat_map(|(&t, ids)| ids.iter().map(move |&e| (e, t)))
            .collect()
    }

    /// Number of true landmarks seen by the front-end.
    pub fn num_observed_landmarks(&self) -> usize {
        self.duplicate_groups.len()
    }

    pub fn num_estimated_landmarks(&self) -> usize {
        self.duplicate_groups.values().map(Vec::len).sum()
    }

    pub fn write(&self) -> String {
        let mut out = String::new();
        for (k, t) in self.poses.iter().enumerate() {
            let q = t.rotation.xyzw();
            let _ = writeln!(
                out,
                "TRUE_POSE {k} {} {} {} {} {} {} {}",
                t.translation.x, t.translation.y, t.translation.z, q[0], q[1], q[2], q[3]
            );
        }
        for (id, l) in &self.landmarks {
            let _ = writeln!(
                out,
                "TRUE_LM {id} {} {} {} {}",
                l.class_label, l.position.x, l.position.y, l.position.z
            );
        }
        for (id, group) in &self.duplicate_groups {
            let _ = write!(out, "DUP_GROUP {id}");
            for e in group {
                let _ = write!(out, " {e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut truth = GroundTruth::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let tokens: Vec<&str> = raw.split('#').next().unwrap_or("").split_whitespace().collect();
            let Some((&tag, rest)) = tokens.split_first() else {
                continue;
            };
            let err = |message: String| Error::Parse { line, message };
            let nums = |fields: &[&str]| -> Result<Vec<f64>> {
                fields
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| err(format!("invalid number '{s}'"))))
                    .collect()
            };
            let id = |s: &str| s.parse::<usize>().map_err(|_| err(format!("invalid id '{s}'")));
            match tag {
                "TRUE_POSE" => {
                    if rest.len() != 8 {
                        return Err(err("TRUE_POSE expects 8 fields".into()));
                    }
                    let k = id(rest[0])?;
                    if k != truth.poses.len() {
                        return Err(err(format!("TRUE_POSE {k} out of order")));
                    }
                    let v = nums(&rest[1..])?;
                    truth.poses.push(RigidTransform::new(
                        Rotation::from_xyzw(v[3], v[4], v[5], v[6]),
                        Vector3::new(v[0], v[1], v[2]),
                    ));
                }
                "TRUE_LM" => {
                    if rest.len() != 5 {
                        return Err(err("TRUE_LM expects 5 fields".into()));
                    }
                    let t = id(rest[0])?;
                    let class_label = rest[1]
                        .parse::<u32>()
                        .map_err(|_| err(format!("invalid class '{}'", rest[1])))?;
                    let v = nums(&rest[2..])?;
                    truth.landmarks.insert(
                        t,
                        Landmark {
                            position: Vector3::new(v[0], v[1], v[2]),
                            class_label,
                        },
                    );
                }
                "DUP_GROUP" => {
                    let Some((first, ids)) = rest.split_first() else {
                        return Err(err("DUP_GROUP expects a true id".into()));
                    };
                    let group = ids.iter().map(|s| id(s)).collect::<Result<Vec<_>>>()?;
                    truth.duplicate_groups.insert(id(first)?, group);
                }
                other => return Err(err(format!("unknown record type '{other}'"))),
            }
        }
        Ok(truth)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.write())?;
        Ok(())
    }
}

struct Track {
    truth: usize,
    observations: Vec<(PoseId, Vector2<f64>)>,
}

fn gaussian3(rng: &mut impl Rng, sigma: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal))
}

/// Noisy measurement of the relative motion `true_rel`, following the
/// odometry error convention: the error at the truth is zero-mean with
/// standard deviations `(σ_r, σ_t)` per axis.
fn noisy_odometry(rng: &mut impl Rng, true_rel: &RigidTransform, noise: &NoiseModel, sample: bool) -> RigidTransform {
    if !sample {
        return *true_rel;
    }
    let rotation = true_rel.rotation.compose(&Rotation::exp(&gaussian3(rng, noise.odom_rotation)));
    let translation = true_rel.translation + rotation.rotate(&gaussian3(rng, noise.odom_translation));
    RigidTransform::new(rotation, translation)
}

/// Runs the front-end over `world`: dead-reckoned poses from noisy
/// odometry, noisy pixel observations, and a new landmark id for every
/// track (a track ends as soon as its landmark is not observed at a pose).
pub fn simulate_run(world: &World, config: &SimConfig) -> Result<(FactorGraph, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let noise = &config.noise;
    let camera = world.camera;
    let pixel_noise = Normal::new(0.0, noise.pixel).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut graph = FactorGraph::new(camera);
    let mut estimate = world.poses.first().copied().unwrap_or_else(RigidTransform::identity);
    let mut estimates = Vec::with_capacity(world.poses.len());
    let odom_information = Matrix6::from_diagonal(&Vector6::new(
        noise.odom_rotation.powi(-2),
        noise.odom_rotation.powi(-2),
        noise.odom_rotation.powi(-2),
        noise.odom_translation.powi(-2),
        noise.odom_translation.powi(-2),
        noise.odom_translation.powi(-2),
    ));
    let mut odometry = Vec::new();
    for (k, truth) in world.poses.iter().enumerate() {
        if k > 0 {
            let true_rel = world.poses[k - 1].inverse().compose(truth);
            let measured = noisy_odometry(&mut rng, &true_rel, noise, config.sample_noise);
            estimate = estimate.compose(&measured);
            odometry.push(OdometryFactor {
                from: k - 1,
                to: k,
                measured,
                information: odom_information,
            });
        }
        estimates.push(estimate);
        graph.add_pose(k, estimate)?;
    }
    if !world.poses.is_empty() {
        graph.add_gauge_prior(0)?;
    }
    for f in odometry {
        graph.add_odometry(f)?;
    }

    let mut tracks: Vec<Track> = Vec::new();
    let mut open: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, pose) in world.poses.iter().enumerate() {
        let mut seen = BTreeMap::new();
        for (t, lm) in world.landmarks.iter().enumerate() {
            if (lm.position - pose.translation).norm() > world.max_range {
                continue;
            }
            let Some(pixel) = camera.project(&camera.to_camera(pose, &lm.position)) else {
                continue;
            };
            let pixel = if config.sample_noise {
                pixel + Vector2::new(pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng))
            } else {
                pixel
            };
            if camera.in_image(&pixel) {
                seen.insert(t, pixel);
            }
        }
        open.retain(|t, _| seen.contains_key(t));
        for (t, pixel) in seen {
            let idx = *open.entry(t).or_insert_with(|| {
                tracks.push(Track {
                    truth: t,
                    observations: Vec::new(),
                });
                tracks.len() - 1
            });
            tracks[idx].observations.push((k, pixel));
        }
    }

    let pixel_information = Matrix2::identity() / (noise.pixel * noise.pixel);
    let mut truth = GroundTruth {
        poses: world.poses.clone(),
        landmarks: world.landmarks.iter().copied().enumerate().collect(),
        duplicate_groups: BTreeMap::new(),
    };
    let mut next_id: LandmarkId = 0;
    for track in tracks.iter().filter(|t| t.observations.len() >= config.min_track_length) {
        let lm = &world.landmarks[track.truth];
        let (k0, _) = track.observations[0];
        let relative = world.poses[k0].apply_inverse(&lm.position);
        let relative = if config.sample_noise {
            relative + gaussian3(&mut rng, config.init_depth_fraction * relative.norm())
        } else {
            relative
        };
        let id = next_id;
        next_id += 1;
        graph.add_landmark(
            id,
            Landmark {
                position: estimates[k0].apply(&relative),
                class_label: lm.class_label,
            },
        )?;
        for &(pose, pixel) in &track.observations {
            graph.add_observation(ObservationFactor {
                pose,
                landmark: id,
                pixel,
                information: pixel_information,
            })?;
        }
        truth.duplicate_groups.entry(track.truth).or_default().push(id);
    }
    Ok((graph, truth))
}

/// Convenience: [`generate_world`] followed by [`simulate_run`].
pub fn simulate(config: &SimConfig) -> Result<(FactorGraph, GroundTruth)> {
    simulate_run(&generate_world(config)?, config)
}

/// A short, gently meandering straight-line run used for small test
/// graphs: `num_poses` poses one metre apart and `num_landmarks` landmarks
/// ahead of the start. Every landmark id is observed at least twice.
pub fn small_world(seed: u64, num_poses: usize, num_landmarks: usize) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pose = RigidTransform::identity();
    let mut poses = Vec::with_capacity(num_poses);
    for _ in 0..num_poses {
        poses.push(pose);
        let yaw = rng.random_range(-0.08..0.08);
        pose = pose.compose(&RigidTransform::new(Rotation::about_z(yaw), Vector3::new(1.0, 0.0, 0.0)));
    }
    let extent = num_poses as f64 + 8.0;
    let landmarks = (0..num_landmarks)
        .map(|_| Landmark {
            position: Vector3::new(
                rng.random_range(3.0..extent),
                rng.random_range(-6.0..6.0),
                rng.random_range(-1.5..1.5),
            ),
            class_label: rng.random_range(0..3),
        })
        .collect();
    World {
        poses,
        landmarks,
        camera: CameraModel::default(),
        max_range: 20.0,
    }
}

/// Sampling controls for [`ground_truth_matches`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchSampling {
    /// Window length used for the locality requirement.
    pub max_poses: usize,
    /// Required pose gap between the A and B windows.
    pub min_pose_gap: usize,
    /// Upper bound on the number of returned sets.
    pub max_sets: usize,
    pub seed: u64,
}

impl Default for MatchSampling {
    fn default() -> Self {
        Self {
            max_poses: 10,
            min_pose_gap: 20,
            max_sets: 1000,
            seed: 0,
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Ground-truth constellation matches of cardinality `m`: every pair lies
/// in one duplicate group, the A side is older than the B side by at least
/// `min_pose_gap` poses, and each side has a common observing pose within
/// its landmarks' windows. All such sets are returned when there are at
/// most `max_sets`; otherwise a uniform-ish random sample of `max_sets`.
pub fn ground_truth_matches(graph: &FactorGraph, truth: &GroundTruth, m: usize, sampling: &MatchSampling) -> Result<Vec<MergeSet>> {
    if m < 3 {
        return Err(Error::InsufficientDof(m));
    }
    let windows: BTreeMap<LandmarkId, (PoseId, PoseId)> = graph
        .landmark_ids()
        .into_iter()
        .filter_map(|l| {
            let w = observation_window(graph, l, sampling.max_poses);
            (w.len() >= 2).then(|| (l, (w[0], w[w.len() - 1])))
        })
        .collect();
    let mut by_frames: BTreeMap<(PoseId, PoseId), Vec<CandidateMatch>> = BTreeMap::new();
    for group in truth.duplicate_groups.values() {
        for &x in group {
            for &y in group {
                let (Some(&wa), Some(&wb)) = (windows.get(&x), windows.get(&y)) else {
                    continue;
                };
                if wa.1 + sampling.min_pose_gap > wb.0 {
                    continue;
                }
                for i in wa.0..=wa.1 {
                    for k in wb.0..=wb.1 {
                        by_frames.entry((i, k)).or_default().push(CandidateMatch::new(x, y));
                    }
                }
            }
        }
    }
    let groups: Vec<Vec<CandidateMatch>> = by_frames
        .into_values()
        .filter(|g| g.len() >= m)
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let total: f64 = groups.iter().map(|g| binomial(g.len(), m)).sum();
    let mut sets: BTreeSet<Vec<CandidateMatch>> = BTreeSet::new();
    if total <= 4.0 * sampling.max_sets as f64 {
        for g in &groups {
            let mut idx: Vec<usize> = (0..m).collect();
            loop {
                sets.insert(idx.iter().map(|&i| g[i]).collect());
                let Some(p) = (0..m).rev().find(|&p| idx[p] < g.len() - m + p) else {
                    break;
                };
                idx[p] += 1;
                for q in p + 1..m {
                    idx[q] = idx[q - 1] + 1;
                }
            }
        }
    }
    if sets.len() > sampling.max_sets || total > 4.0 * sampling.max_sets as f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let weights: Vec<f64> = groups.iter().map(|g| binomial(g.len(), m)).collect();
        let dist = rand::distr::weighted::WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut sampled = BTreeSet::new();
        let mut attempts = 0;
        while sampled.len() < sampling.max_sets && attempts < 50 * sampling.max_sets {
            attempts += 1;
            let g = &groups[dist.sample(&mut rng)];
            let mut pick: Vec<CandidateMatch> = sample(&mut rng, g.len(), m).into_iter().map(|i| g[i]).collect();
            pick.sort_unstable();
            sampled.insert(pick);
        }
        sets = sampled;
    }
    sets.into_iter().map(MergeSet::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::{optimize, OptimizeConfig};

    fn small_config() -> SimConfig {
        SimConfig {
            loops: 2,
            poses_per_loop: 60,
            num_landmarks: 60,
            ..SimConfig::default()
        }
    }

    #[test]
    fn trajectory_is_a_closed_loop() {
        let c = SimConfig::default();
        let w = generate_world(&c).unwrap();
        assert_eq!(w.poses.len(), 301);
        assert!((w.poses[0].translation - w.poses[100].translation).norm() < 1e-9);
        for pair in w.poses.windows(2) {
            let step = (pair[1].translation - pair[0].translation).norm();
            assert!(step > 0.9 && step < 1.3, "{step}");
            assert!(pair[0].translation.z.abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_world_and_graph() {
        let c = small_config();
        assert_eq!(generate_world(&c).unwrap(), generate_world(&c).unwrap());
        let (g1, t1) = simulate(&c).unwrap();
        let (g2, t2) = simulate(&c).unwrap();
        assert_eq!(crate::factor_graph::io::write_graph(&g1), crate::factor_graph::io::write_graph(&g2));
        assert_eq!(t1, t2);
        let other = SimConfig { seed: 1, ..c };
        assert_ne!(generate_world(&other).unwrap(), generate_world(&c).unwrap());
    }

    #[test]
    fn empty_landmark_world_is_valid() {
        let c = SimConfig {
            num_landmarks: 0,
            ..small_config()
        };
        let (g, t) = simulate(&c).unwrap();
        assert_eq!(g.num_landmarks(), 0);
        assert_eq!(g.num_poses(), 121);
        assert!(t.duplicate_groups.is_empty());
        g.validate().unwrap();
    }

    #[test]
    fn class_histogram_is_uniform() {
        let c = SimConfig {
            num_landmarks: 300,
            loops: 1,
            ..SimConfig::default()
        };
        let w = generate_world(&c).unwrap();
        let mut counts = [0.0; 3];
        for l in &w.landmarks {
            counts[l.class_label as usize] += 1.0;
        }
        let stat: f64 = counts.iter().map(|c| (c - 100.0) * (c - 100.0) / 100.0).sum();
        assert!(crate::stats::chi2_sf(2, stat) > 0.01, "{counts:?}");
    }

    fn scripted_world(visible: &[std::ops::Range<usize>]) -> World {
        // The landmark is straight ahead when the robot faces +x and out of
        // view when it faces -x.
        let poses = (0..30)
            .map(|k| {
                let facing = visible.iter().any(|r| r.contains(&k));
                let yaw = if facing { 0.0 } else { std::f64::consts::PI };
                RigidTransform::new(Rotation::about_z(yaw), Vector3::new(0.01 * k as f64, 0.0, 0.0))
            })
            .collect();
        World {
            poses,
            landmarks: vec![Landmark {
                position: Vector3::new(10.0, 0.5, 0.3),
                class_label: 1,
            }],
            camera: CameraModel::default(),
            max_range: 15.0,
        }
    }

    #[test]
    fn track_loss_spawns_duplicates() {
        let w = scripted_world(&[3..8, 20..25]);
        let c = SimConfig {
            sample_noise: false,
            ..SimConfig::default()
        };
        let (g, t) = simulate_run(&w, &c).unwrap();
        assert_eq!(g.num_landmarks(), 2);
        assert_eq!(t.duplicate_groups[&0], vec![0, 1]);
        assert_eq!(g.observing_poses(0), (3..8).collect::<Vec<_>>());
        assert_eq!(g.observing_poses(1), (20..25).collect::<Vec<_>>());
    }

    #[test]
    fn short_tracks_are_dropped() {
        let w = scripted_world(&[3..5, 20..25]);
        let (g, t) = simulate_run(&w, &SimConfig::default()).unwrap();
        assert_eq!(g.num_landmarks(), 1);
        assert_eq!(t.duplicate_groups[&0], vec![0]);
    }

    #[test]
    fn noiseless_run_optimizes_to_truth() {
        let c = SimConfig {
            sample_noise: false,
            loops: 1,
            num_landmarks: 40,
            ..SimConfig::default()
        };
        let (mut g, t) = simulate(&c).unwrap();
        optimize(&mut g, &OptimizeConfig::default()).unwrap();
        let owner = t.true_landmark_of();
        for (id, l) in g.landmarks() {
            let err = (l.position - t.landmarks[&owner[&id]].position).norm();
            assert!(err < 1e-6, "landmark {id}: {err}");
        }
    }

    #[test]
    fn odometry_residuals_match_configured_noise() {
        let c = SimConfig {
            loops: 100,
            num_landmarks: 0,
            noise: NoiseModel::preset(NoisePreset::High),
            ..SimConfig::default()
        };
        let w = generate_world(&c).unwrap();
        let (g, _) = simulate_run(&w, &c).unwrap();
        let mut sums = [0.0; 6];
        let n = g.odometry().len() as f64;
        assert!(n >= 1e4 - 1.0);
        for f in g.odometry() {
            let (e, _, _) = crate::factor_graph::odometry_error(f, &w.poses[f.from], &w.poses[f.to]);
            for (k, s) in sums.iter_mut().enumerate() {
                *s += e[k] * e[k];
            }
        }
        for (k, s) in sums.iter().enumerate() {
            let expected = if k < 3 { c.noise.odom_rotation } else { c.noise.odom_translation };
            let sigma = (s / n).sqrt();
            assert!((sigma / expected - 1.0).abs() < 0.05, "axis {k}: {sigma} vs {expected}");
        }
    }

    #[test]
    fn ground_truth_sidecar_round_trips() {
        let (_, t) = simulate(&small_config()).unwrap();
        let back = GroundTruth::parse(&t.write()).unwrap();
        assert_eq!(back.landmarks, t.landmarks);
        assert_eq!(back.duplicate_groups, t.duplicate_groups);
        for (p, q) in back.poses.iter().zip(&t.poses) {
            assert!((p.translation - q.translation).norm() < 1e-12);
            assert!(p.rotation.inverse().compose(&q.rotation).angle() < 1e-12);
        }
        assert!(matches!(GroundTruth::parse("TRUE_LM 0 x 1 2 3"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn no_revisits_means_no_matches() {
        let w = small_world(4, 40, 60);
        let (g, t) = simulate_run(&w, &SimConfig::default()).unwrap();
        assert!(g.num_landmarks() > 10);
        let sets = ground_truth_matches(&g, &t, 3, &MatchSampling::default()).unwrap();
        assert!(sets.is_empty());
    }

    #[test]
    fn ground_truth_matches_respect_constraints() {
        let (g, t) = simulate(&SimConfig::default()).unwrap();
        let owner = t.true_landmark_of();
        for m in 3..=6 {
            let sets = ground_truth_matches(&g, &t, m, &MatchSampling::default()).unwrap();
            assert!(!sets.is_empty(), "m={m}");
            for s in &sets {
                assert_eq!(s.len(), m);
                for c in s.matches() {
                    assert_ne!(c.a, c.b);
                    assert_eq!(owner[&c.a], owner[&c.b]);
                    assert_eq!(g.landmark(c.a).unwrap().class_label, g.landmark(c.b).unwrap().class_label);
                }
                for side in [s.constellation_a(), s.constellation_b()] {
                    let common = side
                        .iter()
                        .map(|&l| observation_window(&g, l, 10).into_iter().collect::<BTreeSet<_>>())
                        .reduce(|x, y| &x & &y)
                        .unwrap();
                    assert!(!common.is_empty());
                }
            }
        }
    }

    #[test]
    fn single_revisit_enumerates_all_subsets() {
        // Six landmarks seen together on two passes far apart in time.
        let mut poses = Vec::new();
        for k in 0..60 {
            let facing = (5..10).contains(&k) || (40..45).contains(&k);
            let yaw = if facing { 0.0 } else { std::f64::consts::PI };
            poses.push(RigidTransform::new(Rotation::about_z(yaw), Vector3::new(0.01 * k as f64, 0.0, 0.0)));
        }
        let landmarks = (0..6)
            .map(|j| Landmark {
                position: Vector3::new(8.0 + j as f64, -2.0 + 0.8 * j as f64, 0.5 * (j as f64 - 2.5)),
                class_label: 0,
            })
            .collect();
        let w = World {
            poses,
            landmarks,
            camera: CameraModel::default(),
            max_range: 15.0,
        };
        let (g, t) = simulate_run(&w, &SimConfig::default()).unwrap();
        assert_eq!(g.num_landmarks(), 12);
        let sets = ground_truth_matches(&g, &t, 3, &MatchSampling::default()).unwrap();
        assert_eq!(sets.len(), 20);
    }
}

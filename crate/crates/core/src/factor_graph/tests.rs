use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::geometry::{RigidTransform, Rotation};
use crate::simulator::{simulate, simulate_run, small_world, SimConfig};

fn centre_pixel() -> Vector2<f64> {
    Vector2::new(320.0, 240.0)
}

fn observe(g: &mut FactorGraph, pose: PoseId, landmark: LandmarkId) {
    g.add_observation(ObservationFactor {
        pose,
        landmark,
        pixel: centre_pixel(),
        information: Matrix2::identity(),
    })
    .unwrap();
}

fn unit_odometry(from: PoseId, to: PoseId) -> OdometryFactor {
    OdometryFactor {
        from,
        to,
        measured: RigidTransform::from_translation(Vector3::x()),
        information: Matrix6::identity(),
    }
}

fn small_graph(seed: u64, poses: usize, landmarks: usize) -> FactorGraph {
    let world = small_world(seed, poses, landmarks);
    let config = SimConfig {
        seed,
        min_track_length: 2,
        ..SimConfig::default()
    };
    simulate_run(&world, &config).unwrap().0
}

/// Poses 1..=5 along x; landmark 3 seen from poses 1-3 only.
fn figure_three_graph() -> FactorGraph {
    let mut g = FactorGraph::new(CameraModel::default());
    for i in 1..=5 {
        g.add_pose(i, RigidTransform::from_translation(Vector3::new(i as f64, 0.0, 0.0)))
            .unwrap();
    }
    for j in 1..=5 {
        g.add_landmark(
            j,
            Landmark {
                position: Vector3::new(10.0 + j as f64, 0.0, 0.0),
                class_label: 0,
            },
        )
        .unwrap();
    }
    for i in 1..5 {
        g.add_odometry(unit_odometry(i, i + 1)).unwrap();
    }
    for (pose, landmark) in [(1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3), (3, 4), (4, 4), (4, 5), (5, 5)] {
        observe(&mut g, pose, landmark);
    }
    g
}

#[test]
fn figure_three_local_subgraph() {
    let g = figure_three_graph();
    let sub = local_subgraph(&g, 3, 10).unwrap();
    assert_eq!(sub.poses().map(|(i, _)| i).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(sub.landmark_ids(), vec![1, 2, 3, 4]);
    assert_eq!(sub.odometry().len(), 2);
    assert!(sub.priors().is_empty());
    assert_eq!(sub.observations().len(), 7);
}

#[test]
fn single_pose_landmark_subgraph() {
    let g = figure_three_graph();
    let sub = local_subgraph(&g, 1, 10).unwrap();
    assert_eq!(sub.poses().map(|(i, _)| i).collect::<Vec<_>>(), vec![1]);
    assert_eq!(sub.landmark_ids(), vec![1, 2, 3]);
    assert!(sub.odometry().is_empty());
    assert_eq!(sub.observations().len(), 3);
}

#[test]
fn local_subgraphs_cover_every_observation() {
    let g = small_graph(3, 15, 40);
    let mut covered = BTreeSet::new();
    for l in g.landmark_ids() {
        let sub = local_subgraph(&g, l, 10).unwrap();
        for o in sub.observations() {
            covered.insert((o.pose, o.landmark));
        }
    }
    let all: BTreeSet<_> = g.observations().iter().map(|o| (o.pose, o.landmark)).collect();
    assert_eq!(covered, all);
}

#[test]
fn window_is_the_latest_contiguous_run() {
    let mut g = figure_three_graph();
    observe(&mut g, 5, 3);
    assert_eq!(observation_window(&g, 3, 10), vec![5]);
    assert_eq!(observation_window(&g, 5, 10), vec![4, 5]);
    assert_eq!(observation_window(&g, 5, 1), vec![5]);
}

#[test]
fn optimize_at_optimum_is_a_no_op() {
    let world = small_world(1, 10, 30);
    let config = SimConfig {
        sample_noise: false,
        min_track_length: 2,
        ..SimConfig::default()
    };
    let (mut g, _) = simulate_run(&world, &config).unwrap();
    optimize(&mut g, &OptimizeConfig::default()).unwrap();
    let before = total_cost(&g);
    let report = optimize(&mut g, &OptimizeConfig::default()).unwrap();
    assert!(report.iterations <= 1);
    assert!((report.final_cost - before).abs() < 1e-12);
}

/// Midpoint of the closest points of two rays.
fn triangulate(o1: &Vector3<f64>, d1: &Vector3<f64>, o2: &Vector3<f64>, d2: &Vector3<f64>) -> Vector3<f64> {
    let w = o1 - o2;
    let (a, b, c) = (d1.dot(d1), d1.dot(d2), d2.dot(d2));
    let (d, e) = (d1.dot(&w), d2.dot(&w));
    let den = a * c - b * b;
    let s = (b * e - c * d) / den;
    let t = (a * e - b * d) / den;
    0.5 * ((o1 + s * d1) + (o2 + t * d2))
}

#[test]
fn two_view_triangulation() {
    let camera = CameraModel::default();
    let truth = Vector3::new(8.0, 1.3, -0.4);
    let poses = [
        RigidTransform::identity(),
        RigidTransform::new(Rotation::about_z(0.1), Vector3::new(1.0, 0.5, 0.0)),
    ];
    let mut g = FactorGraph::new(camera);
    for (i, p) in poses.iter().enumerate() {
        g.add_pose(i, *p).unwrap();
        g.add_gauge_prior(i).unwrap();
    }
    g.add_landmark(
        0,
        Landmark {
            position: truth + Vector3::new(0.5, -0.3, 0.2),
            class_label: 0,
        },
    )
    .unwrap();
    let mut rays = Vec::new();
    for (i, p) in poses.iter().enumerate() {
        let pixel = camera.project(&camera.to_camera(p, &truth)).unwrap();
        g.add_observation(ObservationFactor {
            pose: i,
            landmark: 0,
            pixel,
            information: Matrix2::identity(),
        })
        .unwrap();
        let ray_cam = Vector3::new((pixel.x - camera.cx) / camera.fx, (pixel.y - camera.cy) / camera.fy, 1.0);
        let ray_body = camera.body_to_camera.rotation.rotate(&ray_cam);
        rays.push((p.translation, p.rotation.rotate(&ray_body)));
    }
    optimize(&mut g, &OptimizeConfig::default()).unwrap();
    let oracle = triangulate(&rays[0].0, &rays[0].1, &rays[1].0, &rays[1].1);
    let got = g.landmark(0).unwrap().position;
    assert!((got - oracle).norm() < 1e-6, "{got} vs {oracle}");
}

#[test]
fn chi_square_matches_degrees_of_freedom() {
    let (mut g, _) = simulate(&SimConfig::default()).unwrap();
    optimize(&mut g, &OptimizeConfig::default()).unwrap();
    let dof = g.degrees_of_freedom() as f64;
    let cost = total_cost(&g);
    assert!((cost - dof).abs() < 3.0 * (2.0 * dof).sqrt(), "cost {cost}, dof {dof}");
}

#[test]
fn unconstrained_pose_is_reported() {
    let mut g = FactorGraph::new(CameraModel::default());
    g.add_pose(0, RigidTransform::identity()).unwrap();
    g.add_pose(1, RigidTransform::identity()).unwrap();
    g.add_gauge_prior(0).unwrap();
    match optimize(&mut g, &OptimizeConfig::default()) {
        Err(Error::Unobservable(name)) => assert_eq!(name, "pose 1"),
        other => panic!("expected observability failure, got {other:?}"),
    }
    assert!(matches!(full_covariance(&g), Err(Error::SingularInformation)));
}

#[test]
fn single_prior_covariance_is_identity() {
    let mut g = FactorGraph::new(CameraModel::default());
    g.add_pose(0, RigidTransform::identity()).unwrap();
    g.add_prior(PriorFactor {
        pose: 0,
        mean: RigidTransform::identity(),
        information: Matrix6::identity(),
    })
    .unwrap();
    let (_, cov) = full_covariance(&g).unwrap();
    assert!((cov - DMatrix::<f64>::identity(6, 6)).norm() < 1e-12);
}

#[test]
fn two_pose_chain_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = FactorGraph::new(CameraModel::default());
    let p0 = RigidTransform::new(Rotation::about_z(0.3), Vector3::new(1.0, 2.0, 0.0));
    let p1 = RigidTransform::new(Rotation::from_axis_angle(&Vector3::new(0.2, 0.1, 1.0), 0.7), Vector3::new(2.0, 2.5, 0.3));
    g.add_pose(0, p0).unwrap();
    g.add_pose(1, p1).unwrap();
    let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let prior_info = a * a.transpose() + Matrix6::identity();
    let b = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let odom_info = b * b.transpose() + Matrix6::identity() * 0.5;
    let prior = PriorFactor {
        pose: 0,
        mean: p0,
        information: prior_info,
    };
    let odom = OdometryFactor {
        from: 0,
        to: 1,
        measured: p0.inverse().compose(&p1).compose(&RigidTransform::exp(&crate::geometry::TangentVector(
            Vector6::new(0.01, -0.02, 0.01, 0.05, 0.0, -0.03),
        ))),
        information: odom_info,
    };
    g.add_prior(prior).unwrap();
    g.add_odometry(odom).unwrap();

    let (_, jp) = prior_error(&prior, &p0);
    let (_, ji, jj) = odometry_error(&odom, &p0, &p1);
    let mut lambda = DMatrix::<f64>::zeros(12, 12);
    let h00 = jp.transpose() * prior_info * jp + ji.transpose() * odom_info * ji;
    let h01 = ji.transpose() * odom_info * jj;
    let h11 = jj.transpose() * odom_info * jj;
    lambda.fixed_view_mut::<6, 6>(0, 0).copy_from(&h00);
    lambda.fixed_view_mut::<6, 6>(0, 6).copy_from(&h01);
    lambda.fixed_view_mut::<6, 6>(6, 0).copy_from(&h01.transpose());
    lambda.fixed_view_mut::<6, 6>(6, 6).copy_from(&h11);
    let oracle = lambda.clone().try_inverse().unwrap();

    let (_, cov) = full_covariance(&g).unwrap();
    assert!((&cov - &oracle).norm() < 1e-9 * oracle.norm());
    assert!((&cov * &lambda - DMatrix::<f64>::identity(12, 12)).norm() < 1e-8);
}

#[test]
fn covariance_inverts_information() {
    let g = small_graph(7, 8, 20);
    let (_, cov) = full_covariance(&g).unwrap();
    let lambda = linearize(&g).hessian.to_dense();
    let n = lambda.nrows();
    let residual = &cov * &lambda - DMatrix::<f64>::identity(n, n);
    assert!(residual.norm() < 1e-8 * n as f64, "{}", residual.norm());
}

#[test]
fn marginal_blocks_match_dense_inverse() {
    let g = small_graph(8, 6, 15);
    let lin = linearize(&g);
    let dense = lin.hessian.to_dense().try_inverse().unwrap();
    let layout = &lin.layout;
    let all: Vec<VariableId> = (0..layout.num_blocks()).map(|b| layout.variable(b)).collect();
    let joint = marginal_block(&g, &all).unwrap();
    assert!((&joint - &dense).norm() < 1e-9 * dense.norm().max(1.0));

    let offsets: Vec<usize> = layout.dims().iter().scan(0, |acc, d| {
        let o = *acc;
        *acc += d;
        Some(o)
    }).collect();
    let landmark = g.landmark_ids()[0];
    let block = layout.landmark(landmark).unwrap();
    let single = marginal_block(&g, &[VariableId::Landmark(landmark)]).unwrap();
    let o = offsets[block];
    let expect = dense.view((o, o), (3, 3));
    assert!((&single - expect).norm() < 1e-9 * expect.norm().max(1e-3));

    let a = VariableId::Pose(2);
    let b = VariableId::Landmark(landmark);
    let pair = marginal_block(&g, &[a, b]).unwrap();
    let only_a = marginal_block(&g, &[a]).unwrap();
    assert!((pair.view((0, 0), (6, 6)) - &only_a).norm() < 1e-12 * only_a.norm());
    assert!((pair.view((6, 6), (3, 3)) - &single).norm() < 1e-12 * single.norm());

    assert!(matches!(marginal_block(&g, &[VariableId::Landmark(9999)]), Err(Error::UnknownLandmark(9999))));
}

#[test]
fn relative_marginal_in_a_fixed_frame_is_a_rotation() {
    let g = small_graph(9, 8, 20);
    let landmark = g.landmark_ids()[2];
    let pose = g.observing_poses(landmark)[0];
    let mut fixed = g.clone();
    fixed.add_gauge_prior(pose).unwrap();
    let world = marginal_block(&fixed, &[VariableId::Landmark(landmark)]).unwrap();
    let world = Matrix3::from_fn(|r, c| world[(r, c)]);
    let r = fixed.pose(pose).unwrap().rotation.matrix();
    let expect = r.transpose() * world * r;
    let got = relative_marginal(&fixed, pose, landmark).unwrap();
    assert!((got - expect).norm() < 1e-6 * expect.norm(), "{got} vs {expect}");
}

#[test]
fn relative_marginal_matches_monte_carlo() {
    let g = small_graph(10, 6, 15);
    let landmark = g.landmark_ids()[1];
    let pose = *g.observing_poses(landmark).last().unwrap();
    let joint = marginal_block(&g, &[VariableId::Pose(pose), VariableId::Landmark(landmark)]).unwrap();
    let joint = SMatrix::<f64, 9, 9>::from_fn(|r, c| joint[(r, c)]);
    let chol = joint.cholesky().unwrap();
    let t = *g.pose(pose).unwrap();
    let p = g.landmark(landmark).unwrap().position;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let z = SMatrix::<f64, 9, 1>::from_fn(|_, _| rng.sample(StandardNormal));
        let x = chol.l() * z;
        let pose_sample = factors::retract_pose(&t, &Vector6::from_fn(|r, _| x[r]));
        let point = p + Vector3::new(x[6], x[7], x[8]);
        samples.push(pose_sample.apply_inverse(&point));
    }
    let mean = samples.iter().fold(Vector3::zeros(), |a, s| a + s) / n as f64;
    let mc = samples
        .iter()
        .fold(Matrix3::zeros(), |a, s| a + (s - mean) * (s - mean).transpose())
        / (n - 1) as f64;
    let analytic = relative_marginal(&g, pose, landmark).unwrap();
    assert!((mc - analytic).norm() < 0.05 * analytic.norm(), "{mc} vs {analytic}");
}

#[test]
fn relative_marginal_is_invariant_to_reanchoring() {
    let g = small_graph(12, 8, 20);
    let shift = RigidTransform::new(Rotation::from_axis_angle(&Vector3::new(0.3, -0.2, 1.0), 1.1), Vector3::new(5.0, -3.0, 2.0));
    let mut moved = FactorGraph::new(g.camera);
    for (i, p) in g.poses() {
        moved.add_pose(i, shift.compose(p)).unwrap();
    }
    for (j, l) in g.landmarks() {
        moved
            .add_landmark(
                j,
                Landmark {
                    position: shift.apply(&l.position),
                    class_label: l.class_label,
                },
            )
            .unwrap();
    }
    for f in g.odometry() {
        moved.add_odometry(*f).unwrap();
    }
    for f in g.observations() {
        moved.add_observation(*f).unwrap();
    }
    moved.add_gauge_prior(0).unwrap();
    for j in g.landmark_ids().into_iter().take(5) {
        let i = g.observing_poses(j)[0];
        let a = relative_marginal(&g, i, j).unwrap();
        let b = relative_marginal(&moved, i, j).unwrap();
        assert!((a - b).norm() < 1e-9 * a.norm().max(1e-3), "{a} vs {b}");
    }
}

fn min_eigenvalue(m: &Matrix3<f64>) -> f64 {
    m.symmetric_eigenvalues().min()
}

#[test]
fn local_marginals_are_conservative() {
    for seed in 0..5 {
        let g = small_graph(100 + seed, 15, 35);
        let rec = CovarianceRecovery::new(&g).unwrap();
        let mut cache = LocalMarginalCache::default();
        cache.refresh(&g);
        let mut checked = 0;
        for j in g.landmark_ids() {
            let Some(local) = cache.get(j) else {
                continue;
            };
            for (&i, sigma) in &local.covariances {
                let global = rec.relative_marginal(&g, i, j).unwrap();
                assert!(min_eigenvalue(&(sigma - global)) >= -1e-9 * sigma.norm().max(1.0));
                assert!((sigma - sigma.transpose()).norm() == 0.0);
                assert!(min_eigenvalue(sigma) > 0.0);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}

#[test]
fn local_marginal_does_not_depend_on_window_gauge() {
    let g = small_graph(21, 12, 30);
    let config = LocalConfig::default();
    let j = g
        .landmark_ids()
        .into_iter()
        .find(|&j| observation_window(&g, j, 10).len() >= 3)
        .unwrap();
    let m = local_marginals(&g, j, &config).unwrap();
    let window = &m.window;
    let last = *window.last().unwrap();
    // Re-derive with the gauge on the last window pose instead of the first.
    let mut sub = local_subgraph(&g, j, 10).unwrap();
    let keep: Vec<LandmarkId> = sub
        .landmark_ids()
        .into_iter()
        .filter(|&l| sub.observing_poses(l).len() < 2)
        .collect();
    for l in keep {
        let obs: Vec<ObservationFactor> = sub.observations().iter().filter(|o| o.landmark != l).copied().collect();
        let mut rebuilt = FactorGraph::new(sub.camera);
        for (i, p) in sub.poses() {
            rebuilt.add_pose(i, *p).unwrap();
        }
        for (id, lm) in sub.landmarks().filter(|(id, _)| *id != l) {
            rebuilt.add_landmark(id, *lm).unwrap();
        }
        for f in sub.odometry() {
            rebuilt.add_odometry(*f).unwrap();
        }
        for o in obs {
            rebuilt.add_observation(o).unwrap();
        }
        sub = rebuilt;
    }
    sub.add_gauge_prior(last).unwrap();
    for &i in window {
        let other = relative_marginal(&sub, i, j).unwrap();
        let mine = m.covariances[&i];
        assert!((other - mine).norm() < 1e-9 * mine.norm().max(1e-3), "{other} vs {mine}");
    }
}

#[test]
fn cache_dirties_only_the_touched_landmark() {
    let mut g = small_graph(30, 12, 30);
    let mut cache = LocalMarginalCache::default();
    let first = cache.refresh(&g);
    assert_eq!(first.len(), g.num_landmarks());
    assert!(cache.refresh(&g).is_empty());
    let j = g.landmark_ids()[3];
    let pose = (0..g.num_poses()).find(|p| !g.observing_poses(j).contains(p)).unwrap();
    observe(&mut g, pose, j);
    assert_eq!(cache.stale(&g), vec![j]);
    assert_eq!(cache.refresh(&g), vec![j]);
    cache.invalidate(j);
    assert_eq!(cache.stale(&g), vec![j]);
}

#[test]
fn single_view_landmark_is_unmatchable() {
    let g = figure_three_graph();
    let mut cache = LocalMarginalCache::default();
    cache.refresh(&g);
    assert!(!cache.is_matchable(1));
    assert!(matches!(local_marginals(&g, 1, &LocalConfig::default()), Err(Error::Unobservable(_))));
}

#[test]
fn merge_counts_and_class_check() {
    let config = SimConfig {
        loops: 2,
        poses_per_loop: 60,
        num_landmarks: 40,
        ..SimConfig::default()
    };
    let (mut g, truth) = simulate(&config).unwrap();
    let group = truth.duplicate_groups.values().find(|v| v.len() >= 2).unwrap().clone();
    let (landmarks, observations) = (g.num_landmarks(), g.observations().len());
    merge_landmarks(&mut g, group[0], group[1], &OptimizeConfig::default(), None).unwrap();
    assert_eq!(g.num_landmarks(), landmarks - 1);
    assert_eq!(g.observations().len(), observations);
    assert!(!g.has_landmark(group[1]));

    let owner = truth.true_landmark_of();
    let (a, b) = g
        .landmark_ids()
        .into_iter()
        .flat_map(|a| g.landmark_ids().into_iter().map(move |b| (a, b)))
        .find(|&(a, b)| {
            g.landmark(a).unwrap().class_label != g.landmark(b).unwrap().class_label && owner[&a] != owner[&b]
        })
        .unwrap();
    assert!(matches!(
        merge_landmarks(&mut g, a, b, &OptimizeConfig::default(), None),
        Err(Error::ClassMismatch { .. })
    ));
}

#[test]
fn merging_true_duplicates_keeps_noiseless_cost_zero() {
    let config = SimConfig {
        loops: 2,
        poses_per_loop: 60,
        num_landmarks: 40,
        sample_noise: false,
        ..SimConfig::default()
    };
    let (mut g, truth) = simulate(&config).unwrap();
    optimize(&mut g, &OptimizeConfig::default()).unwrap();
    let group = truth.duplicate_groups.values().find(|v| v.len() >= 2).unwrap().clone();
    let before = total_cost(&g);
    let report = merge_landmarks(&mut g, group[0], group[1], &OptimizeConfig::default(), None).unwrap();
    assert!(report.final_cost - before < 1e-9);
}

#[test]
fn merging_distant_landmarks_breaks_consistency() {
    let config = SimConfig {
        loops: 2,
        poses_per_loop: 60,
        num_landmarks: 40,
        ..SimConfig::default()
    };
    let (mut g, _) = simulate(&config).unwrap();
    optimize(&mut g, &OptimizeConfig::default()).unwrap();
    let ids = g.landmark_ids();
    let (a, b) = ids
        .iter()
        .flat_map(|&a| ids.iter().map(move |&b| (a, b)))
        .filter(|&(a, b)| a != b && g.landmark(a).unwrap().class_label == g.landmark(b).unwrap().class_label)
        .max_by(|x, y| {
            let d = |(a, b): (usize, usize)| (g.landmark(a).unwrap().position - g.landmark(b).unwrap().position).norm();
            d(*x).total_cmp(&d(*y))
        })
        .unwrap();
    let mut cache = LocalMarginalCache::default();
    cache.refresh(&g);
    let report = merge_landmarks(&mut g, a, b, &OptimizeConfig::default(), Some(&mut cache)).unwrap();
    let dof = g.degrees_of_freedom() as usize;
    assert!(report.final_cost > crate::stats::chi2_quantile(dof, 0.95).unwrap());
    assert_eq!(cache.stale(&g), vec![a]);
}

#[test]
fn covariance_solve_is_consistent_with_gradient_step() {
    // The Gauss-Newton step at the optimum is zero.
    let world = small_world(40, 6, 12);
    let config = SimConfig {
        sample_noise: false,
        min_track_length: 2,
        ..SimConfig::default()
    };
    let (mut g, _) = simulate_run(&world, &config).unwrap();
    optimize(&mut g, &OptimizeConfig::default()).unwrap();
    let lin = linearize(&g);
    let step = full_covariance(&g).unwrap().1 * DVector::from_column_slice(lin.gradient.as_slice());
    assert!(step.norm() < 1e-6);
}

//! Residuals and Jacobians of the three factor types.
//!
//! Pose variables are perturbed on the right: `R ← R Exp(ω)`,
//! `t ← t + R ρ`, with the tangent ordered `(ω, ρ)`.

use nalgebra::{Matrix2x3, Matrix6, SMatrix, Vector2, Vector3, Vector6};

use super::{CameraModel, ObservationFactor, OdometryFactor, PriorFactor};
use crate::geometry::{skew, so3_right_jacobian_inv, RigidTransform, Rotation};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Predicted minus measured pixel, with Jacobians w.r.t. the observing
/// pose and the landmark position.
pub fn observation_error(
    camera: &CameraModel,
    factor: &ObservationFactor,
    pose: &RigidTransform,
    point: &Vector3<f64>,
) -> (Vector2<f64>, Matrix2x6, Matrix2x3<f64>) {
    let body = pose.apply_inverse(point);
    let r_bc = camera.body_to_camera.rotation.matrix();
    let pc = r_bc.transpose() * (body - camera.body_to_camera.translation);
    let z = if pc.z.abs() < 1e-6 { 1e-6f64.copysign(pc.z) } else { pc.z };
    let predicted = Vector2::new(camera.fx * pc.x / z + camera.cx, camera.fy * pc.y / z + camera.cy);
    let d_proj = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * pc.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * pc.y / (z * z),
    );
    let d_cam_body = d_proj * r_bc.transpose();
    let mut j_pose = Matrix2x6::zeros();
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(d_cam_body * skew(&body)));
    j_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-d_cam_body));
    let j_point = d_cam_body * pose.rotation.matrix().transpose();
    (predicted - factor.pixel, j_pose, j_point)
}

/// Relative-pose residual `[Log(Rzᵀ Rᵢᵀ Rⱼ); Rzᵀ(Rᵢᵀ(tⱼ − tᵢ) − tz)]` and
/// its Jacobians w.r.t. the `from` and `to` poses.
pub fn odometry_error(
    factor: &OdometryFactor,
    from: &RigidTransform,
    to: &RigidTransform,
) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let ri = from.rotation.matrix();
    let rj = to.rotation.matrix();
    let rz = factor.measured.rotation.matrix();
    let t_rel = ri.transpose() * (to.translation - from.translation);
    let e_r = factor
        .measured
        .rotation
        .inverse()
        .compose(&from.rotation.inverse())
        .compose(&to.rotation)
        .log();
    let e_t = rz.transpose() * (t_rel - factor.measured.translation);
    let jr_inv = so3_right_jacobian_inv(&e_r);

    let mut ji = Matrix6::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr_inv * rj.transpose() * ri));
    ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&(rz.transpose() * skew(&t_rel)));
    ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rz.transpose()));

    let mut jj = Matrix6::zeros();
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
    jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&(rz.transpose() * ri.transpose() * rj));

    let mut e = Vector6::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&e_r);
    e.fixed_rows_mut::<3>(3).copy_from(&e_t);
    (e, ji, jj)
}

/// Pose prior residual `[Log(R₀ᵀ R); R₀ᵀ(t − t₀)]` and its Jacobian.
pub fn prior_error(factor: &PriorFactor, pose: &RigidTransform) -> (Vector6<f64>, Matrix6<f64>) {
    let r0 = factor.mean.rotation.matrix();
    let r = pose.rotation.matrix();
    let e_r = factor.mean.rotation.inverse().compose(&pose.rotation).log();
    let e_t = r0.transpose() * (pose.translation - factor.mean.translation);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&so3_right_jacobian_inv(&e_r));
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&(r0.transpose() * r));
    let mut e = Vector6::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&e_r);
    e.fixed_rows_mut::<3>(3).copy_from(&e_t);
    (e, j)
}

/// Applies a tangent step to a pose using the optimizer's retraction.
pub fn retract_pose(pose: &RigidTransform, delta: &Vector6<f64>) -> RigidTransform {
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    let rho = Vector3::new(delta[3], delta[4], delta[5]);
    RigidTransform::new(
        pose.rotation.compose(&Rotation::exp(&omega)),
        pose.translation + pose.rotation.rotate(&rho),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> RigidTransform {
        let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        RigidTransform::new(Rotation::exp(&w), t)
    }

    fn numeric_jacobian<const R: usize, const C: usize>(
        f: impl Fn(&SMatrix<f64, C, 1>) -> SMatrix<f64, R, 1>,
    ) -> SMatrix<f64, R, C> {
        let h = 1e-6;
        let mut j = SMatrix::<f64, R, C>::zeros();
        for c in 0..C {
            let mut d = SMatrix::<f64, C, 1>::zeros();
            d[c] = h;
            let col = (f(&d) - f(&(-d))) / (2.0 * h);
            j.set_column(c, &col);
        }
        j
    }

    #[test]
    fn odometry_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let rel = a.inverse().compose(&b);
            let f = OdometryFactor {
                from: 0,
                to: 1,
                measured: RigidTransform::new(
                    rel.rotation.compose(&Rotation::exp(&Vector3::new(0.05, -0.02, 0.1))),
                    rel.translation + Vector3::new(0.1, 0.2, -0.1),
                ),
                information: Matrix6::identity(),
            };
            let (_, ji, jj) = odometry_error(&f, &a, &b);
            let ni = numeric_jacobian::<6, 6>(|d| odometry_error(&f, &retract_pose(&a, d), &b).0);
            let nj = numeric_jacobian::<6, 6>(|d| odometry_error(&f, &a, &retract_pose(&b, d)).0);
            assert!((ji - ni).norm() < 1e-6, "{}", (ji - ni).norm());
            assert!((jj - nj).norm() < 1e-6, "{}", (jj - nj).norm());
        }
    }

    #[test]
    fn observation_jacobians_match_finite_differences() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let p_cam = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..10.0));
            let p = pose.apply(&cam.body_to_camera.apply(&p_cam));
            let f = ObservationFactor { pose: 0, landmark: 0, pixel: Vector2::new(300.0, 200.0), information: nalgebra::Matrix2::identity() };
            let (_, jp, jl) = observation_error(&cam, &f, &pose, &p);
            let np = numeric_jacobian::<2, 6>(|d| observation_error(&cam, &f, &retract_pose(&pose, d), &p).0);
            let nl = numeric_jacobian::<2, 3>(|d| observation_error(&cam, &f, &pose, &(p + d)).0);
            assert!((jp - np).norm() < 1e-5 * jp.norm().max(1.0));
            assert!((jl - nl).norm() < 1e-5 * jl.norm().max(1.0));
        }
    }

    #[test]
    fn prior_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mean = random_pose(&mut rng);
        let pose = mean.compose(&RigidTransform::new(Rotation::exp(&Vector3::new(0.1, 0.2, -0.3)), Vector3::new(0.5, 0.0, 1.0)));
        let f = PriorFactor { pose: 0, mean, information: Matrix6::identity() };
        let (_, j) = prior_error(&f, &pose);
        let n = numeric_jacobian::<6, 6>(|d| prior_error(&f, &retract_pose(&pose, d)).0);
        assert!((j - n).norm() < 1e-6);
    }
}

use std::collections::BTreeMap;

use nalgebra::{DVector, Matrix3x6, Matrix6};

use super::factors::{observation_error, odometry_error, prior_error};
use super::sparse::SymmetricBlockMatrix;
use super::{FactorGraph, LandmarkId, PoseId, VariableId};

/// Maps graph variables to blocks of the linear system: poses first (in id
/// order), then landmarks.
#[derive(Clone, Debug)]
pub struct VariableLayout {
    pose_index: BTreeMap<PoseId, usize>,
    landmark_index: BTreeMap<LandmarkId, usize>,
    variables: Vec<VariableId>,
    dims: Vec<usize>,
}

impl VariableLayout {
    pub fn new(graph: &FactorGraph) -> Self {
        let mut pose_index = BTreeMap::new();
        let mut landmark_index = BTreeMap::new();
        let mut variables = Vec::new();
        let mut dims = Vec::new();
        for (id, _) in graph.poses() {
            pose_index.insert(id, variables.len());
            variables.push(VariableId::Pose(id));
            dims.push(6);
        }
        for (id, _) in graph.landmarks() {
            landmark_index.insert(id, variables.len());
            variables.push(VariableId::Landmark(id));
            dims.push(3);
        }
        Self {
            pose_index,
            landmark_index,
            variables,
            dims,
        }
    }

    pub fn pose(&self, id: PoseId) -> Option<usize> {
        self.pose_index.get(&id).copied()
    }

    pub fn landmark(&self, id: LandmarkId) -> Option<usize> {
        self.landmark_index.get(&id).copied()
    }

    pub fn index_of(&self, var: VariableId) -> Option<usize> {
        match var {
            VariableId::Pose(id) => self.pose(id),
            VariableId::Landmark(id) => self.landmark(id),
        }
    }

    pub fn variable(&self, block: usize) -> VariableId {
        self.variables[block]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_blocks(&self) -> usize {
        self.variables.len()
    }

    pub fn scalar_dim(&self) -> usize {
        self.dims.iter().sum()
    }
}

/// Gauss-Newton normal equations at the current estimate:
/// `H = Σ Jᵀ Ω J`, `g = Σ Jᵀ Ω e`, `cost = Σ eᵀ Ω e`.
pub struct Linearization {
    pub layout: VariableLayout,
    pub hessian: SymmetricBlockMatrix,
    pub gradient: DVector<f64>,
    pub cost: f64,
}

pub fn linearize(graph: &FactorGraph) -> Linearization {
    let layout = VariableLayout::new(graph);
    let mut hessian = SymmetricBlockMatrix::new(layout.dims().to_vec());
    let offsets = hessian.offsets().to_vec();
    let mut gradient = DVector::zeros(layout.scalar_dim());
    let mut cost = 0.0;

    for f in graph.odometry() {
        let (Ok(a), Ok(b)) = (graph.pose(f.from), graph.pose(f.to)) else {
            continue;
        };
        let (e, ji, jj) = odometry_error(f, a, b);
        let (bi, bj) = (layout.pose(f.from).unwrap(), layout.pose(f.to).unwrap());
        let wi = ji.transpose() * f.information;
        let wj = jj.transpose() * f.information;
        hessian.add_block(bi, bi, &(wi * ji));
        hessian.add_block(bj, bj, &(wj * jj));
        hessian.add_block(bi, bj, &(wi * jj));
        let mut gi = gradient.rows_mut(offsets[bi], 6);
        gi += wi * e;
        let mut gj = gradient.rows_mut(offsets[bj], 6);
        gj += wj * e;
        cost += e.dot(&(f.information * e));
    }

    for f in graph.observations() {
        let (Ok(pose), Ok(lm)) = (graph.pose(f.pose), graph.landmark(f.landmark)) else {
            continue;
        };
        let (e, jp, jl) = observation_error(&graph.camera, f, pose, &lm.position);
        let (bp, bl) = (layout.pose(f.pose).unwrap(), layout.landmark(f.landmark).unwrap());
        let wp = jp.transpose() * f.information;
        let wl = jl.transpose() * f.information;
        hessian.add_block(bp, bp, &(wp * jp));
        hessian.add_block(bl, bl, &(wl * jl));
        hessian.add_block(bl, bp, &(wl * jp));
        let mut gp = gradient.rows_mut(offsets[bp], 6);
        gp += wp * e;
        let mut gl = gradient.rows_mut(offsets[bl], 3);
        gl += wl * e;
        cost += e.dot(&(f.information * e));
    }

    for f in graph.priors() {
        let Ok(pose) = graph.pose(f.pose) else { continue };
        let (e, j) = prior_error(f, pose);
        let b = layout.pose(f.pose).unwrap();
        let w: Matrix6<f64> = j.transpose() * f.information;
        hessian.add_block(b, b, &(w * j));
        let mut g = gradient.rows_mut(offsets[b], 6);
        g += w * e;
        cost += e.dot(&(f.information * e));
    }

    Linearization {
        layout,
        hessian,
        gradient,
        cost,
    }
}

/// Total weighted squared error `Σ eᵀ Ω e` (the problem's chi-square).
pub fn total_cost(graph: &FactorGraph) -> f64 {
    let mut cost = 0.0;
    for f in graph.odometry() {
        if let (Ok(a), Ok(b)) = (graph.pose(f.from), graph.pose(f.to)) {
            let (e, _, _) = odometry_error(f, a, b);
            cost += e.dot(&(f.information * e));
        }
    }
    for f in graph.observations() {
        if let (Ok(p), Ok(l)) = (graph.pose(f.pose), graph.landmark(f.landmark)) {
            let (e, _, _) = observation_error(&graph.camera, f, p, &l.position);
            cost += e.dot(&(f.information * e));
        }
    }
    for f in graph.priors() {
        if let Ok(p) = graph.pose(f.pose) {
            let (e, _) = prior_error(f, p);
            cost += e.dot(&(f.information * e));
        }
    }
    cost
}

/// Jacobian of `r = Rᵢᵀ(p − tᵢ)` w.r.t. (pose tangent, point).
pub(crate) fn relative_point_jacobian(pose: &crate::geometry::RigidTransform, point: &nalgebra::Vector3<f64>) -> (Matrix3x6<f64>, nalgebra::Matrix3<f64>) {
    let r = pose.apply_inverse(point);
    let mut jp = Matrix3x6::zeros();
    jp.fixed_view_mut::<3, 3>(0, 0).copy_from(&crate::geometry::skew(&r));
    jp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-nalgebra::Matrix3::identity()));
    (jp, pose.rotation.matrix().transpose())
}

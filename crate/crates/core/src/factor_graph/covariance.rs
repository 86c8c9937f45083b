use nalgebra::{DMatrix, Matrix3, SMatrix};

use super::linear::{linearize, relative_point_jacobian, VariableLayout};
use super::optimize::factorization_error;
use super::sparse::BlockCholesky;
use super::{FactorGraph, LandmarkId, PoseId, VariableId};
use crate::error::{Error, Result};

/// A factored information matrix ready for marginal covariance queries.
pub struct CovarianceRecovery {
    layout: VariableLayout,
    factor: BlockCholesky,
}

impl CovarianceRecovery {
    /// Linearizes `graph` at its current estimate and factors the
    /// information matrix. The graph must be gauge-fixed.
    pub fn new(graph: &FactorGraph) -> Result<Self> {
        let lin = linearize(graph);
        let factor = BlockCholesky::factor(&lin.hessian).map_err(|e| match factorization_error(&lin.layout, e) {
            Error::Unobservable(_) => Error::SingularInformation,
            other => other,
        })?;
        Ok(Self {
            layout: lin.layout,
            factor,
        })
    }

    pub fn layout(&self) -> &VariableLayout {
        &self.layout
    }

    fn blocks(&self, vars: &[VariableId]) -> Result<Vec<usize>> {
        vars.iter()
            .map(|&v| {
                self.layout.index_of(v).ok_or(match v {
                    VariableId::Pose(id) => Error::UnknownPose(id),
                    VariableId::Landmark(id) => Error::UnknownLandmark(id),
                })
            })
            .collect()
    }

    /// Joint marginal covariance of `vars`, stacked in the given order.
    pub fn marginal(&self, vars: &[VariableId]) -> Result<DMatrix<f64>> {
        let blocks = self.blocks(vars)?;
        Ok(self.factor.inverse_block(&blocks))
    }

    /// The dense inverse of the information matrix (layout order).
    pub fn full(&self) -> DMatrix<f64> {
        let n = self.factor.scalar_dim();
        self.factor.solve(&DMatrix::identity(n, n))
    }
}

/// Dense `n × n` covariance of all variables, in [`VariableLayout`] order.
pub fn full_covariance(graph: &FactorGraph) -> Result<(VariableLayout, DMatrix<f64>)> {
    let rec = CovarianceRecovery::new(graph)?;
    let full = rec.full();
    Ok((rec.layout, (&full + full.transpose()) * 0.5))
}

/// Joint marginal covariance of `vars` via sparse factorization and
/// selective back-substitution.
pub fn marginal_block(graph: &FactorGraph, vars: &[VariableId]) -> Result<DMatrix<f64>> {
    CovarianceRecovery::new(graph)?.marginal(vars)
}

impl CovarianceRecovery {
    /// Covariance of `Rᵢᵀ(p_j − tᵢ)`, propagated from the joint marginal
    /// of (pose `i`, landmark `j`).
    pub fn relative_marginal(&self, graph: &FactorGraph, pose: PoseId, landmark: LandmarkId) -> Result<Matrix3<f64>> {
        let joint = self.marginal(&[VariableId::Pose(pose), VariableId::Landmark(landmark)])?;
        let t = graph.pose(pose)?;
        let p = graph.landmark(landmark)?.position;
        let (jp, jl) = relative_point_jacobian(t, &p);
        let mut j = SMatrix::<f64, 3, 9>::zeros();
        j.fixed_view_mut::<3, 6>(0, 0).copy_from(&jp);
        j.fixed_view_mut::<3, 3>(0, 6).copy_from(&jl);
        let joint = SMatrix::<f64, 9, 9>::from_fn(|r, c| joint[(r, c)]);
        let cov = j * joint * j.transpose();
        Ok((cov + cov.transpose()) * 0.5)
    }
}

pub fn relative_marginal(graph: &FactorGraph, pose: PoseId, landmark: LandmarkId) -> Result<Matrix3<f64>> {
    graph.pose(pose)?;
    graph.landmark(landmark)?;
    CovarianceRecovery::new(graph)?.relative_marginal(graph, pose, landmark)
}

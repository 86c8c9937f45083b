use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector3, Vector6};

use super::factors::retract_pose;
use super::linear::{linearize, total_cost, VariableLayout};
use super::sparse::{BlockCholesky, FactorizationError};
use super::{FactorGraph, LandmarkId, VariableId};
use crate::error::{Error, Result};

const MAX_DAMPING: f64 = 1e6;
const MAX_TRIALS: usize = 12;
const INITIAL_LAMBDA: f64 = 1e-4;
const MIN_LAMBDA: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizeConfig {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this.
    pub abs_tolerance: f64,
    /// Constant added to the diagonal of the normal equations. When
    /// positive it is raised as needed until the system can be factored.
    pub damping: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            abs_tolerance: 1e-6,
            damping: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

pub(crate) fn factorization_error(layout: &VariableLayout, e: FactorizationError) -> Error {
    match e {
        FactorizationError::NotPositiveDefinite(block) => Error::Unobservable(layout.variable(block).to_string()),
    }
}

fn apply_step(graph: &mut FactorGraph, layout: &VariableLayout, offsets: &[usize], step: &DMatrix<f64>, scale: f64) {
    for block in 0..layout.num_blocks() {
        let o = offsets[block];
        match layout.variable(block) {
            VariableId::Pose(id) => {
                let d = Vector6::from_fn(|r, _| scale * step[(o + r, 0)]);
                let pose = *graph.pose(id).expect("layout pose");
                graph.set_pose(id, retract_pose(&pose, &d)).expect("layout pose");
            }
            VariableId::Landmark(id) => {
                let d = Vector3::from_fn(|r, _| scale * step[(o + r, 0)]);
                let p = graph.landmark(id).expect("layout landmark").position;
                graph.set_landmark_position(id, p + d).expect("layout landmark");
            }
        }
    }
}

/// Per landmark, the number of its observations with the point behind the
/// camera (zero counts omitted).
fn behind_camera(graph: &FactorGraph) -> BTreeMap<LandmarkId, usize> {
    let mut out = BTreeMap::new();
    for o in graph.observations() {
        if let (Ok(pose), Ok(l)) = (graph.pose(o.pose), graph.landmark(o.landmark)) {
            if !graph.camera.in_front(pose, &l.position) {
                *out.entry(o.landmark).or_insert(0) += 1;
            }
        }
    }
    out
}

/// Undoes the update of every landmark that the step pushed behind more of
/// its cameras, which keeps points from passing through infinity.
fn enforce_cheirality(graph: &mut FactorGraph, backup: &FactorGraph, before: &BTreeMap<LandmarkId, usize>) {
    for (id, n) in behind_camera(graph) {
        if n > before.get(&id).copied().unwrap_or(0) {
            let p = backup.landmark(id).expect("landmark in backup").position;
            graph.set_landmark_position(id, p).expect("landmark in graph");
        }
    }
}

/// Levenberg-Marquardt on the batch problem, starting from plain
/// Gauss-Newton steps. Accepted iterations never increase the cost.
pub fn optimize(graph: &mut FactorGraph, config: &OptimizeConfig) -> Result<OptimizeReport> {
    let initial_cost = total_cost(graph);
    let mut cost = initial_cost;
    let mut iterations = 0;
    let mut lambda = 0.0;
    while iterations < config.max_iterations {
        iterations += 1;
        let lin = linearize(graph);
        let offsets = lin.hessian.offsets().to_vec();
        let backup = graph.clone();
        let behind = behind_camera(graph);
        let mut damping = config.damping;
        let mut accepted = None;
        for _ in 0..MAX_TRIALS {
            let mut hessian = lin.hessian.clone();
            if lambda > 0.0 {
                hessian.scale_diagonal(lambda);
            }
            if damping > 0.0 {
                hessian.add_to_diagonal(damping);
            }
            let chol = match BlockCholesky::factor(&hessian) {
                Ok(chol) => chol,
                Err(_) if damping > 0.0 && damping < MAX_DAMPING => {
                    damping *= 100.0;
                    continue;
                }
                Err(e) => return Err(factorization_error(&lin.layout, e)),
            };
            let mut step = DMatrix::from_column_slice(lin.gradient.len(), 1, lin.gradient.as_slice());
            chol.solve_in_place(&mut step);
            step.neg_mut();
            apply_step(graph, &lin.layout, &offsets, &step, 1.0);
            enforce_cheirality(graph, &backup, &behind);
            let new_cost = total_cost(graph);
            if new_cost.is_finite() && new_cost <= cost {
                accepted = Some(new_cost);
                lambda = if lambda > MIN_LAMBDA { lambda * 0.1 } else { 0.0 };
                break;
            }
            *graph = backup.clone();
            lambda = if lambda > 0.0 { lambda * 10.0 } else { INITIAL_LAMBDA };
        }
        let Some(new_cost) = accepted else {
            break;
        };
        let decrease = cost - new_cost;
        cost = new_cost;
        if decrease < config.abs_tolerance {
            break;
        }
    }
    log::debug!("optimize: cost {initial_cost:.6} -> {cost:.6} in {iterations} iterations");
    Ok(OptimizeReport {
        initial_cost,
        final_cost: cost,
        iterations,
    })
}

//! Small linear-programming feasibility helpers.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DVector;

use crate::{Error, Result};

/// Decide whether `target` lies in the Minkowski sum of the convex hull of
/// `vertices` and the axis-aligned box `[slack_lower, slack_upper]`.
///
/// Feasibility of: `sum_i alpha_i v_i + eta = target`, `alpha >= 0`,
/// `sum alpha = 1`, `slack_lower <= eta <= slack_upper`, with equalities
/// relaxed by `tol` in each coordinate.
pub fn minkowski_membership(
    vertices: &[DVector<f64>],
    slack_lower: &DVector<f64>,
    slack_upper: &DVector<f64>,
    target: &DVector<f64>,
    tol: f64,
) -> Result<bool> {
    if vertices.is_empty() {
        return Err(Error::config("membership test needs at least one vertex"));
    }
    let dim = target.len();
    for v in vertices {
        if v.len() != dim {
            return Err(Error::dimension(format!(
                "vertex dimension {} does not match target dimension {}",
                v.len(),
                dim
            )));
        }
    }
    if slack_lower.len() != dim || slack_upper.len() != dim {
        return Err(Error::dimension("slack bounds must match target dimension"));
    }
    for j in 0..dim {
        if !slack_lower[j].is_finite() || !slack_upper[j].is_finite() {
            return Err(Error::config("slack bounds must be finite"));
        }
        if slack_lower[j] > slack_upper[j] {
            return Err(Error::config("slack lower bound exceeds upper bound"));
        }
    }

    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let alphas: Vec<_> = vertices
        .iter()
        .map(|_| problem.add_var(0.0, (0.0, f64::INFINITY)))
        .collect();
    let etas: Vec<_> = (0..dim)
        .map(|j| problem.add_var(0.0, (slack_lower[j], slack_upper[j])))
        .collect();

    let simplex: Vec<_> = alphas.iter().map(|&a| (a, 1.0)).collect();
    problem.add_constraint(simplex, ComparisonOp::Eq, 1.0);

    for j in 0..dim {
        let mut row: Vec<_> = alphas
            .iter()
            .zip(vertices.iter())
            .map(|(&a, v)| (a, v[j]))
            .collect();
        row.push((etas[j], 1.0));
        problem.add_constraint(row.clone(), ComparisonOp::Le, target[j] + tol);
        problem.add_constraint(row, ComparisonOp::Ge, target[j] - tol);
    }

    match problem.solve() {
        Ok(_) => Ok(true),
        Err(minilp::Error::Infeasible) => Ok(false),
        Err(e) => Err(Error::Solver(format!("{e:?}"))),
    }
}

/// Convex-hull membership: `target in conv(vertices)` up to `tol`.
pub fn convex_hull_membership(
    vertices: &[DVector<f64>],
    target: &DVector<f64>,
    tol: f64,
) -> Result<bool> {
    let zero = DVector::zeros(target.len());
    minkowski_membership(vertices, &zero, &zero, target, tol)
}

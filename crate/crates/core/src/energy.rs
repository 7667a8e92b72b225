//! Discrete and relaxed energies.
//!
//! Each constraint kind has a continuous penalty `phi(X̃) >= 0` that vanishes
//! exactly when the discrete constraint holds on one-hot rows, so the relaxed
//! energy coincides with the discrete energy on one-hot inputs. The relaxed
//! AllDifferent penalty uses `|.|`, which is non-differentiable at 0; its
//! subgradient at the kink is taken as 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Constraint, ObjectiveKind, ProblemInstance};
use crate::state::RelaxedAssignment;

/// Decomposed energy of one assignment (relaxed or discrete).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyReport {
    /// `objective + sum_j lambda_j * phi_j`.
    pub total: f64,
    /// Objective term `f` (0 for pure CSPs).
    pub objective_term: f64,
    /// Unweighted penalty `phi_j` per constraint.
    pub penalties: Vec<f64>,
    /// Whether all discrete constraints hold under argmax decode.
    pub feasible: bool,
}

/// AllDifferent penalty `sum_k |1 - sum_{i in scope} x̃^(i,k)|`.
///
/// Requires the value-count formulation `|scope| = K`.
pub fn penalty_alldiff(x: &RelaxedAssignment, scope: &[usize]) -> Result<f64> {
    if scope.len() != x.k {
        return Err(Error::Formulation(format!(
            "AllDifferent penalty needs |scope| = K, got {} vs {}",
            scope.len(),
            x.k
        )));
    }
    let mut total = 0.0;
    for k in 0..x.k {
        let col_sum: f64 = scope.iter().map(|&i| x.row(i)[k]).sum();
        total += (1.0 - col_sum).abs();
    }
    Ok(total)
}

/// NotEqual penalty `sum_k x̃^(i,k) x̃^(j,k)` (row inner product).
pub fn penalty_not_equal(x: &RelaxedAssignment, i: usize, j: usize) -> f64 {
    x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum()
}

/// At-most-one-selected penalty `x̃^(i,1) x̃^(j,1)` for K = 2 domains
/// (column 1 means "selected").
pub fn penalty_at_most_one(x: &RelaxedAssignment, i: usize, j: usize) -> Result<f64> {
    if x.k != 2 {
        return Err(Error::Formulation(format!(
            "at-most-one penalty needs K = 2, got K = {}",
            x.k
        )));
    }
    Ok(x.row(i)[1] * x.row(j)[1])
}

fn penalty(x: &RelaxedAssignment, c: &Constraint) -> Result<f64> {
    match c {
        Constraint::AllDifferent { scope } => penalty_alldiff(x, scope),
        Constraint::NotEqual { i, j } => Ok(penalty_not_equal(x, *i, *j)),
        Constraint::AtMostOneSelected { i, j } => penalty_at_most_one(x, *i, *j),
    }
}

/// Relaxed objective; coincides with the discrete objective on one-hot rows.
///
/// MaxCut: `-sum_{(u,v) in E} (1 - <x̃_u, x̃_v>)` (minus the probability the
/// endpoints differ under independent rounding). MIS: `-sum_v x̃^(v,1)`.
pub fn objective_relaxed(x: &RelaxedAssignment, instance: &ProblemInstance) -> f64 {
    match instance.objective {
        ObjectiveKind::None => 0.0,
        ObjectiveKind::MisSetSize => -(0..instance.n_vars).map(|v| x.row(v)[1]).sum::<f64>(),
        ObjectiveKind::MaxCutEdges => {
            let mut obj = 0.0;
            for &(u, v) in &instance.edges {
                let same: f64 = x.row(u).iter().zip(x.row(v)).map(|(a, b)| a * b).sum();
                obj -= 1.0 - same;
            }
            obj
        }
    }
}

fn discrete_constraint_holds(assignment: &[usize], c: &Constraint) -> bool {
    match c {
        Constraint::AllDifferent { scope } => {
            let mut seen = vec![false; scope.len() + assignment.len()];
            scope.iter().all(|&i| {
                let v = assignment[i];
                if seen[v] {
                    false
                } else {
                    seen[v] = true;
                    true
                }
            })
        }
        Constraint::NotEqual { i, j } => assignment[*i] != assignment[*j],
        Constraint::AtMostOneSelected { i, j } => assignment[*i] != 1 || assignment[*j] != 1,
    }
}

/// Relaxed Eq.-1 energy with per-constraint breakdown; the feasibility flag
/// refers to the argmax decode of `x`.
pub fn energy_relaxed(x: &RelaxedAssignment, instance: &ProblemInstance) -> Result<EnergyReport> {
    let decoded = crate::state::argmax_assign(x);
    let mut penalties = Vec::with_capacity(instance.constraints.len());
    let mut weighted = 0.0;
    let mut feasible = true;
    for (c, &lam) in instance.constraints.iter().zip(&instance.lambda) {
        let p = penalty(x, c)?;
        weighted += lam * p;
        feasible &= discrete_constraint_holds(&decoded, c);
        penalties.push(p);
    }
    let objective_term = objective_relaxed(x, instance);
    Ok(EnergyReport { total: objective_term + weighted, objective_term, penalties, feasible })
}

/// Discrete Eq.-1 energy. Equals [`energy_relaxed`] on the one-hot embedding.
pub fn energy_discrete(assignment: &[usize], instance: &ProblemInstance) -> Result<EnergyReport> {
    if assignment.len() != instance.n_vars {
        return Err(Error::InvalidAssignment(format!(
            "expected {} values, got {}",
            instance.n_vars,
            assignment.len()
        )));
    }
    if let Some((i, &v)) = assignment.iter().enumerate().find(|(_, &v)| v >= instance.domain_size)
    {
        return Err(Error::InvalidAssignment(format!(
            "value {v} at variable {i} outside domain of size {}",
            instance.domain_size
        )));
    }
    let onehot = RelaxedAssignment::one_hot(assignment, instance.domain_size);
    energy_relaxed(&onehot, instance)
}

/// Discrete objective value (exact counts): `-cut` for MaxCut, `-|S|` for MIS.
pub fn objective_discrete(assignment: &[usize], instance: &ProblemInstance) -> f64 {
    match instance.objective {
        ObjectiveKind::None => 0.0,
        ObjectiveKind::MisSetSize => {
            -(assignment.iter().filter(|&&v| v == 1).count() as f64)
        }
        ObjectiveKind::MaxCutEdges => {
            -(instance
                .edges
                .iter()
                .filter(|&&(u, v)| assignment[u] != assignment[v])
                .count() as f64)
        }
    }
}

/// Whether the assignment satisfies every hard constraint.
pub fn is_feasible(assignment: &[usize], instance: &ProblemInstance) -> bool {
    instance.constraints.iter().all(|c| discrete_constraint_holds(assignment, c))
}

/// Per-variable violation scores: the number of violated constraints whose
/// scope contains the variable. For MaxCut, each uncut incident edge counts
/// as one violated (soft) constraint.
pub fn violation_scores(assignment: &[usize], instance: &ProblemInstance) -> Vec<f64> {
    let mut scores = vec![0.0; instance.n_vars];
    for c in &instance.constraints {
        if !discrete_constraint_holds(assignment, c) {
            for i in c.scope() {
                scores[i] += 1.0;
            }
        }
    }
    if instance.objective == ObjectiveKind::MaxCutEdges {
        for &(u, v) in &instance.edges {
            if assignment[u] == assignment[v] {
                scores[u] += 1.0;
                scores[v] += 1.0;
            }
        }
    }
    scores
}

/// Analytic gradient of the relaxed total energy with respect to every
/// `x̃^(i,k)` entry (row-major `n x K`). The AllDifferent kink at 0 uses
/// subgradient 0.
pub fn energy_relaxed_grad(
    x: &RelaxedAssignment,
    instance: &ProblemInstance,
) -> Result<Vec<f64>> {
    let k = x.k;
    let mut grad = vec![0.0; x.n * k];
    for (c, &lam) in instance.constraints.iter().zip(&instance.lambda) {
        match c {
            Constraint::AllDifferent { scope } => {
                if scope.len() != k {
                    return Err(Error::Formulation(
                        "AllDifferent gradient needs |scope| = K".into(),
                    ));
                }
                for kk in 0..k {
                    let col_sum: f64 = scope.iter().map(|&i| x.row(i)[kk]).sum();
                    let s = 1.0 - col_sum;
                    let d = if s > 0.0 {
                        -1.0
                    } else if s < 0.0 {
                        1.0
                    } else {
                        0.0
                    };
                    for &i in scope {
                        grad[i * k + kk] += lam * d;
                    }
                }
            }
            Constraint::NotEqual { i, j } => {
                for kk in 0..k {
                    grad[i * k + kk] += lam * x.row(*j)[kk];
                    grad[j * k + kk] += lam * x.row(*i)[kk];
                }
            }
            Constraint::AtMostOneSelected { i, j } => {
                grad[i * k + 1] += lam * x.row(*j)[1];
                grad[j * k + 1] += lam * x.row(*i)[1];
            }
        }
    }
    match instance.objective {
        ObjectiveKind::None => {}
        ObjectiveKind::MisSetSize => {
            for v in 0..instance.n_vars {
                grad[v * k + 1] -= 1.0;
            }
        }
        ObjectiveKind::MaxCutEdges => {
            for &(u, v) in &instance.edges {
                for kk in 0..k {
                    grad[u * k + kk] += x.row(v)[kk];
                    grad[v * k + kk] += x.row(u)[kk];
                }
            }
        }
    }
    Ok(grad)
}

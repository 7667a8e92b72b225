//! Exhaustive enumeration oracles over the free (unclamped) variables.
//!
//! Given variables stay fixed at their given values, matching the chain's
//! clamping semantics: the enumerated target is the Boltzmann distribution
//! conditioned on the givens.

use crate::energy::energy_discrete;
use crate::error::{Error, Result};
use crate::problem::ProblemInstance;
use crate::state::DiscreteAssignment;

/// Enumeration bound on the free-variable search space.
const MAX_BITS: f64 = 20.0;

fn check_enumerable(instance: &ProblemInstance) -> Result<Vec<usize>> {
    let free = instance.free_vars();
    let bits = free.len() as f64 * (instance.domain_size as f64).log2();
    if bits > MAX_BITS {
        return Err(Error::Refused(format!(
            "search space of {bits:.1} bits exceeds the {MAX_BITS}-bit enumeration bound"
        )));
    }
    Ok(free)
}

fn base_assignment(instance: &ProblemInstance) -> DiscreteAssignment {
    let mut a = vec![0usize; instance.n_vars];
    for (&i, &v) in &instance.givens {
        a[i] = v;
    }
    a
}

/// Visits every completion of the givens, in lexicographic order of the free
/// variables.
fn for_each_assignment<F: FnMut(&[usize]) -> Result<()>>(
    instance: &ProblemInstance,
    free: &[usize],
    mut f: F,
) -> Result<()> {
    let k = instance.domain_size;
    let mut assignment = base_assignment(instance);
    let total = k.pow(free.len() as u32);
    for combo in 0..total {
        let mut c = combo;
        for &i in free {
            assignment[i] = c % k;
            c /= k;
        }
        f(&assignment)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BruteForceResult {
    pub optimal_energy: f64,
    /// Every assignment attaining the optimum.
    pub optima: Vec<DiscreteAssignment>,
}

/// Exhaustive scan of all `K^n_free` completions under the discrete energy.
pub fn brute_force(instance: &ProblemInstance) -> Result<BruteForceResult> {
    let free = check_enumerable(instance)?;
    let mut best = f64::INFINITY;
    let mut optima: Vec<DiscreteAssignment> = Vec::new();
    for_each_assignment(instance, &free, |a| {
        let h = energy_discrete(a, instance)?.total;
        if h < best - 1e-12 {
            best = h;
            optima.clear();
            optima.push(a.to_vec());
        } else if (h - best).abs() <= 1e-12 {
            optima.push(a.to_vec());
        }
        Ok(())
    })?;
    Ok(BruteForceResult { optimal_energy: best, optima })
}

#[derive(Clone, Debug)]
pub struct BoltzmannTable {
    pub tau: f64,
    /// `(assignment, probability)` for every completion of the givens.
    pub probs: Vec<(DiscreteAssignment, f64)>,
    /// Partition function `Z(tau)` (computed stably via the energy minimum).
    pub partition: f64,
    pub log_partition: f64,
}

impl BoltzmannTable {
    /// Probability of one full assignment (0 if it contradicts the givens).
    pub fn prob_of(&self, assignment: &[usize]) -> f64 {
        self.probs
            .iter()
            .find(|(a, _)| a == assignment)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }
}

/// Normalized `exp(-H/tau)` table over all completions of the givens.
pub fn boltzmann_exact(instance: &ProblemInstance, tau: f64) -> Result<BoltzmannTable> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let free = check_enumerable(instance)?;
    let mut energies: Vec<(DiscreteAssignment, f64)> = Vec::new();
    let mut min_h = f64::INFINITY;
    for_each_assignment(instance, &free, |a| {
        let h = energy_discrete(a, instance)?.total;
        min_h = min_h.min(h);
        energies.push((a.to_vec(), h));
        Ok(())
    })?;
    let mut weight_sum = 0.0;
    let mut probs: Vec<(DiscreteAssignment, f64)> = energies
        .into_iter()
        .map(|(a, h)| {
            let w = (-(h - min_h) / tau).exp();
            weight_sum += w;
            (a, w)
        })
        .collect();
    for (_, p) in probs.iter_mut() {
        *p /= weight_sum;
    }
    let log_partition = -min_h / tau + weight_sum.ln();
    Ok(BoltzmannTable { tau, probs, partition: log_partition.exp(), log_partition })
}

//! Single-bit-flip Metropolis simulated annealing over a QUBO, with
//! geometric temperature decay and parallel restarts.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::qubo::Qubo;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SaConfig {
    pub sweeps: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self { sweeps: 200, t_start: 1.0, t_end: 0.01, restarts: 4, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SaResult {
    pub best_bits: Vec<u8>,
    pub best_energy: f64,
    /// Current energy at the end of each sweep, for the winning restart.
    pub trace: Vec<f64>,
}

struct Neighbors {
    /// Per bit: `(other_bit, weight)` pairs from the quadratic terms.
    adj: Vec<Vec<(usize, f64)>>,
    linear: Vec<f64>,
}

impl Neighbors {
    fn new(qubo: &Qubo) -> Self {
        let mut adj = vec![Vec::new(); qubo.n_bits];
        for (&(i, j), &w) in &qubo.quadratic {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        let mut linear = vec![0.0; qubo.n_bits];
        for (&i, &w) in &qubo.linear {
            linear[i] = w;
        }
        Self { adj, linear }
    }

    /// Energy change from flipping bit `i`.
    fn flip_delta(&self, bits: &[u8], i: usize) -> f64 {
        let mut field = self.linear[i];
        for &(j, w) in &self.adj[i] {
            if bits[j] == 1 {
                field += w;
            }
        }
        if bits[i] == 1 {
            -field
        } else {
            field
        }
    }
}

fn run_restart(qubo: &Qubo, neighbors: &Neighbors, config: &SaConfig, seed: u64) -> SaResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits: Vec<u8> = (0..qubo.n_bits).map(|_| u8::from(rng.random::<bool>())).collect();
    for (&i, &v) in &qubo.clamped {
        bits[i] = v;
    }
    let flippable: Vec<usize> =
        (0..qubo.n_bits).filter(|i| !qubo.clamped.contains_key(i)).collect();
    let mut energy = qubo.energy(&bits);
    let mut best_bits = bits.clone();
    let mut best_energy = energy;
    let mut trace = Vec::with_capacity(config.sweeps);

    let temp_at = |sweep: usize| -> f64 {
        if config.sweeps <= 1 {
            return config.t_end;
        }
        let frac = sweep as f64 / (config.sweeps - 1) as f64;
        config.t_start * (config.t_end / config.t_start).powf(frac)
    };

    for sweep in 0..config.sweeps {
        let temp = temp_at(sweep);
        for &i in &flippable {
            let delta = neighbors.flip_delta(&bits, i);
            if delta <= 0.0 || rng.random::<f64>() < (-delta / temp).exp() {
                bits[i] ^= 1;
                energy += delta;
                if energy < best_energy {
                    best_energy = energy;
                    best_bits.copy_from_slice(&bits);
                }
            }
        }
        trace.push(energy);
    }
    SaResult { best_bits, best_energy, trace }
}

/// Runs `restarts` independent annealing chains (in parallel, each with its
/// own seeded stream) and returns the best result. Clamped bits are set from
/// the QUBO and never flipped.
pub fn simulated_annealing(qubo: &Qubo, config: &SaConfig) -> Result<SaResult> {
    if config.sweeps == 0 {
        return Err(Error::Config("need at least one sweep".into()));
    }
    if config.restarts == 0 {
        return Err(Error::Config("need at least one restart".into()));
    }
    if !(config.t_start > 0.0 && config.t_end > 0.0) {
        return Err(Error::Config("temperatures must be positive".into()));
    }
    let neighbors = Neighbors::new(qubo);
    let results: Vec<(usize, SaResult)> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(r as u64 + 1));
            (r, run_restart(qubo, &neighbors, config, seed))
        })
        .collect();
    // Deterministic winner: lowest energy, ties to the lowest restart index.
    let (_, best) = results
        .into_iter()
        .min_by(|(ra, a), (rb, b)| {
            a.best_energy
                .partial_cmp(&b.best_energy)
                .unwrap()
                .then(ra.cmp(rb))
        })
        .unwrap();
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::qubo::{one_hot_bits, qubo_from_coloring, qubo_from_sudoku};
    use crate::problem::{instance_from_edges, load_sudoku, GraphFamily};
    use std::collections::BTreeMap;

    #[test]
    fn independent_bits_all_turn_on() {
        let qubo = Qubo {
            n_bits: 12,
            linear: (0..12).map(|i| (i, -1.0)).collect(),
            quadratic: BTreeMap::new(),
            clamped: BTreeMap::new(),
            constant: 0.0,
        };
        let res = simulated_annealing(&qubo, &SaConfig::default()).unwrap();
        assert_eq!(res.best_bits, vec![1u8; 12]);
        assert_eq!(res.best_energy, -12.0);
    }

    #[test]
    fn k4_coloring_qubo_reaches_exhaustive_minimum() {
        let k4 = instance_from_edges(
            GraphFamily::Coloring(2),
            4,
            vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
            "k4".into(),
            None,
        )
        .unwrap();
        let qubo = qubo_from_coloring(&k4).unwrap();
        // Exhaustive reference over all 2^8 bitstrings.
        let mut exact = f64::INFINITY;
        for bits in 0..256usize {
            let b: Vec<u8> = (0..8).map(|i| ((bits >> i) & 1) as u8).collect();
            exact = exact.min(qubo.energy(&b));
        }
        let config = SaConfig { sweeps: 500, restarts: 4, seed: 7, ..Default::default() };
        let res = simulated_annealing(&qubo, &config).unwrap();
        assert_eq!(res.best_energy, exact);
        assert_eq!(exact, 2.0);
    }

    #[test]
    fn fixed_seed_reproduces_trace() {
        let inst = load_sudoku("1234000000000000", 4).unwrap();
        let qubo = qubo_from_sudoku(&inst).unwrap();
        let config = SaConfig { sweeps: 50, restarts: 2, seed: 3, ..Default::default() };
        let a = simulated_annealing(&qubo, &config).unwrap();
        let b = simulated_annealing(&qubo, &config).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.best_bits, b.best_bits);
    }

    #[test]
    fn clamped_bits_never_flip() {
        let inst = load_sudoku("1234000000000000", 4).unwrap();
        let qubo = qubo_from_sudoku(&inst).unwrap();
        let config = SaConfig { sweeps: 100, restarts: 2, seed: 11, ..Default::default() };
        let res = simulated_annealing(&qubo, &config).unwrap();
        for (&i, &v) in &qubo.clamped {
            assert_eq!(res.best_bits[i], v);
        }
    }

    #[test]
    fn best_never_worse_than_trace_minimum() {
        let inst = load_sudoku(&"0".repeat(16), 4).unwrap();
        let qubo = qubo_from_sudoku(&inst).unwrap();
        let config = SaConfig { sweeps: 120, restarts: 3, seed: 5, ..Default::default() };
        let res = simulated_annealing(&qubo, &config).unwrap();
        let trace_min = res.trace.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(res.best_energy <= trace_min + 1e-12);
    }

    #[test]
    fn sa_solves_easy_sudoku_qubo() {
        // A solved board with 4 cells blanked; SA should recover energy -16.
        let inst = load_sudoku("1234341221430021", 4).unwrap();
        let qubo = qubo_from_sudoku(&inst).unwrap();
        let config =
            SaConfig { sweeps: 400, restarts: 4, seed: 1, t_start: 2.0, t_end: 0.05 };
        let res = simulated_annealing(&qubo, &config).unwrap();
        assert_eq!(res.best_energy, -16.0);
        let solved: Vec<usize> =
            load_sudoku("1234341221434321", 4).unwrap().givens.values().copied().collect();
        assert_eq!(res.best_bits, one_hot_bits(&solved, 4));
    }
}

//! Exact verification oracles and non-learned baselines: brute-force
//! enumeration, Boltzmann tables, QUBO encodings, a simulated-annealing
//! QUBO sampler, and greedy coloring.

pub mod exact;
pub mod greedy;
pub mod qubo;
pub mod sa;

pub use exact::{boltzmann_exact, brute_force, BoltzmannTable, BruteForceResult};
pub use greedy::greedy_coloring;
pub use qubo::{qubo_from_coloring, qubo_from_sudoku, Qubo, SUDOKU_QUBO_LAMBDA};
pub use sa::{simulated_annealing, SaConfig, SaResult};

//! Blocked Gibbs diffusion in logit space for constraint satisfaction and
//! optimization.
//!
//! The library relaxes discrete CSP/COP assignments into an `n x K` logit
//! matrix, runs a mask-augmented reverse-time Gaussian chain driven by a
//! pluggable denoiser, and trains the denoiser unsupervised against a
//! Boltzmann target via a closed-form KL decomposition. Exact enumeration
//! oracles, QUBO encodings, and a simulated-annealing baseline are included
//! for verification at desk scale.

pub mod autodiff;
pub mod baselines;
pub mod chain;
pub mod denoiser;
pub mod energy;
pub mod error;
pub mod eval;
pub mod mask;
pub mod problem;
pub mod projection;
pub mod state;
pub mod train;

pub use error::{Error, Result};
pub use problem::{
    build_constraint_graph, gen_graph_instance, instance_from_edges, instance_from_json,
    instance_to_json, load_dimacs, load_sudoku, parse_dimacs, sudoku_line, Constraint,
    ConstraintGraph, Family, GraphFamily, ObjectiveKind, ProblemInstance,
};
pub use state::{
    argmax_assign, decode_assignment, init_base, softmax_decode, DiscreteAssignment, LogitState,
    MaskVector, RelaxedAssignment,
};

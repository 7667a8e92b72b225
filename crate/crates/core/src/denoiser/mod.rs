//! The denoiser interface and its implementations: trivial test denoisers,
//! an exact blocked-Gibbs oracle for verification, and the
//! constraint-graph-biased attention denoiser.

use rand::RngCore;
use std::sync::Arc;

use crate::chain::ReverseStepOutput;
use crate::error::{Error, Result};
use crate::problem::{build_constraint_graph, effective_scopes, ConstraintGraph, ProblemInstance};
use crate::state::{LogitState, MaskVector};

pub mod attention;
pub mod checkpoint;
pub mod oracle;

pub use attention::{AttentionDenoiser, AttentionDenoiserConfig, ParamStore, RpeBias, TapeParams};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
pub use oracle::GibbsOracleDenoiser;

/// Per-instance precomputation shared by the chain, the mask sampler, and
/// the denoisers: constraint graph, scopes, and positional indices.
pub struct InstanceContext {
    pub instance: Arc<ProblemInstance>,
    pub graph: ConstraintGraph,
    /// Effective constraint scopes (MaxCut edges included).
    pub scopes: Vec<Vec<usize>>,
    /// Multi-dimensional positional index per variable.
    pub pos_indices: Vec<Vec<usize>>,
}

impl InstanceContext {
    pub fn new(instance: Arc<ProblemInstance>) -> Self {
        let graph = build_constraint_graph(&instance);
        let scopes = effective_scopes(&instance);
        let pos_indices = instance.pos_indices();
        Self { instance, graph, scopes, pos_indices }
    }
}

/// Conditioning set of one reverse transition.
pub struct DenoiserInput<'a> {
    pub z: &'a LogitState,
    pub mask: &'a MaskVector,
    /// Reverse-time step index.
    pub t: usize,
    pub ctx: &'a InstanceContext,
}

impl DenoiserInput<'_> {
    pub(crate) fn check_shapes(&self) -> Result<()> {
        let inst = &self.ctx.instance;
        if self.z.n != inst.n_vars || self.z.k != inst.domain_size {
            return Err(Error::Interface(format!(
                "state shape {}x{} does not match instance {}x{}",
                self.z.n, self.z.k, inst.n_vars, inst.domain_size
            )));
        }
        if self.mask.len() != inst.n_vars {
            return Err(Error::Interface(format!(
                "mask length {} does not match n_vars {}",
                self.mask.len(),
                inst.n_vars
            )));
        }
        Ok(())
    }
}

/// A reverse-step proposal model. `predict` must not mutate the state, the
/// mask, or the instance; implementations must be shareable read-only across
/// parallel chains.
pub trait Denoiser: Send + Sync {
    fn predict(&self, input: &DenoiserInput<'_>, rng: &mut dyn RngCore) -> Result<ReverseStepOutput>;
}

/// A denoiser whose forward pass can be recorded on an autodiff tape, making
/// it trainable with the unrolled and single-step estimators. Parameter-free
/// denoisers implement this with an empty store (their gradients are
/// trivially empty).
pub trait GraphDenoiser: Denoiser {
    fn param_store(&self) -> &attention::ParamStore;

    /// Registers all parameters as tape leaves, in store order.
    fn register_params(&self, tape: &mut crate::autodiff::Tape) -> attention::TapeParams;

    /// Builds `(mu, log_var)` tape nodes from a logit-state tape node.
    fn build_forward(
        &self,
        tape: &mut crate::autodiff::Tape,
        tp: &attention::TapeParams,
        z_var: crate::autodiff::Var,
        mask: &MaskVector,
        ctx: &InstanceContext,
        dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<(crate::autodiff::Var, crate::autodiff::Var)>;
}

impl GraphDenoiser for AttentionDenoiser {
    fn param_store(&self) -> &attention::ParamStore {
        &self.params
    }

    fn register_params(&self, tape: &mut crate::autodiff::Tape) -> attention::TapeParams {
        self.params_on_tape(tape)
    }

    fn build_forward(
        &self,
        tape: &mut crate::autodiff::Tape,
        tp: &attention::TapeParams,
        z_var: crate::autodiff::Var,
        mask: &MaskVector,
        ctx: &InstanceContext,
        dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
        self.forward_graph(tape, tp, z_var, mask, ctx, dropout_rng)
    }
}

static EMPTY_PARAMS: std::sync::OnceLock<attention::ParamStore> = std::sync::OnceLock::new();

impl GraphDenoiser for ConstantDenoiser {
    fn param_store(&self) -> &attention::ParamStore {
        EMPTY_PARAMS.get_or_init(attention::ParamStore::default)
    }

    fn register_params(&self, _tape: &mut crate::autodiff::Tape) -> attention::TapeParams {
        attention::TapeParams { vars: Vec::new() }
    }

    fn build_forward(
        &self,
        tape: &mut crate::autodiff::Tape,
        _tp: &attention::TapeParams,
        _z_var: crate::autodiff::Var,
        _mask: &MaskVector,
        ctx: &InstanceContext,
        _dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
        let n = ctx.instance.n_vars;
        if n != self.n || ctx.instance.domain_size != self.k {
            return Err(Error::Interface("constant denoiser shape mismatch".into()));
        }
        let mu = tape.leaf(crate::autodiff::Tensor::from_vec(n, self.k, self.mu.clone()));
        let lv = tape.leaf(crate::autodiff::Tensor::from_vec(
            n,
            self.k,
            vec![self.log_var; n * self.k],
        ));
        Ok((mu, lv))
    }
}

/// Test stub: proposes the current state back (`mu = Z_t`, `log sigma^2 = 0`).
#[derive(Clone, Debug, Default)]
pub struct EchoDenoiser;

impl Denoiser for EchoDenoiser {
    fn predict(&self, input: &DenoiserInput<'_>, _rng: &mut dyn RngCore) -> Result<ReverseStepOutput> {
        input.check_shapes()?;
        Ok(ReverseStepOutput {
            n: input.z.n,
            k: input.z.k,
            mu: input.z.z.clone(),
            log_var: vec![0.0; input.z.z.len()],
        })
    }
}

/// Test stub: proposes a fixed logit pattern regardless of the state.
/// With `log_var = -inf` the proposal is exactly deterministic.
#[derive(Clone, Debug)]
pub struct ConstantDenoiser {
    pub n: usize,
    pub k: usize,
    pub mu: Vec<f64>,
    pub log_var: f64,
}

impl ConstantDenoiser {
    pub fn new(n: usize, k: usize, mu: Vec<f64>, log_var: f64) -> Self {
        assert_eq!(mu.len(), n * k);
        Self { n, k, mu, log_var }
    }

    /// Deterministic proposal toward the clamp pattern of an assignment.
    pub fn toward_assignment(assignment: &[usize], k: usize) -> Self {
        let n = assignment.len();
        let mut mu = Vec::with_capacity(n * k);
        for &v in assignment {
            mu.extend(crate::state::clamp_pattern(k, v));
        }
        Self::new(n, k, mu, f64::NEG_INFINITY)
    }
}

impl Denoiser for ConstantDenoiser {
    fn predict(&self, input: &DenoiserInput<'_>, _rng: &mut dyn RngCore) -> Result<ReverseStepOutput> {
        input.check_shapes()?;
        if input.z.n != self.n || input.z.k != self.k {
            return Err(Error::Interface("constant denoiser shape mismatch".into()));
        }
        Ok(ReverseStepOutput {
            n: self.n,
            k: self.k,
            mu: self.mu.clone(),
            log_var: vec![self.log_var; self.n * self.k],
        })
    }
}

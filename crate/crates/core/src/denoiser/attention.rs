//! Constraint-graph-biased attention denoiser.
//!
//! Each variable is one token. The token embedding is the relaxed value
//! distribution (softmax of the logit row) times a learnable value-embedding
//! matrix, plus a projected sinusoidal absolute positional encoding
//! (concatenated per index dimension) and a learned mask-bit feature. `L`
//! layers of multi-head self-attention with an additive constraint-graph
//! bias on the attention logits, each followed by a position-wise
//! feed-forward block with residual connections and normalization, feed two
//! linear heads that emit `mu` and `log sigma^2` per token. The model is
//! time-agnostic: parameters are shared across steps.

use rand::Rng;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::chain::ReverseStepOutput;
use crate::denoiser::{Denoiser, DenoiserInput, InstanceContext};
use crate::error::{Error, Result};
use crate::state::MaskVector;

/// Sinusoidal encoding width per positional index dimension.
pub const PE_DIM: usize = 16;

const LN_EPS: f64 = 1e-5;

/// Additive attention bias for unrelated variable pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RpeBias {
    /// Fixed nonpositive bias `c`; 0 disables the bias bit-exactly.
    Fixed(f64),
    /// Learned scalar, parameterized as `c = -gamma^2` to stay nonpositive.
    Learned,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionDenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub rpe_bias: RpeBias,
    pub dropout: f64,
    /// Domain size K of the instance family.
    pub domain_size: usize,
    /// Number of positional index dimensions (1 for graphs, 2 for Sudoku).
    pub pos_dims: usize,
    /// Embed the relaxed value distribution (softmax row) rather than the
    /// hard argmax one-hot. Relaxed keeps the network differentiable through
    /// the state, which end-to-end unrolled training requires.
    pub relaxed_value_embed: bool,
}

impl AttentionDenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 {
            return Err(Error::Config("layers, heads, embed_dim must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if let RpeBias::Fixed(c) = self.rpe_bias {
            if c > 0.0 {
                return Err(Error::Config(format!("rpe bias c = {c} must be <= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.domain_size == 0 || self.pos_dims == 0 {
            return Err(Error::Config("domain_size and pos_dims must be positive".into()));
        }
        Ok(())
    }

    /// Desk-scale default for a problem family.
    pub fn small(domain_size: usize, pos_dims: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            embed_dim: 32,
            rpe_bias: RpeBias::Fixed(-1.0),
            dropout: 0.1,
            domain_size,
            pos_dims,
            relaxed_value_embed: true,
        }
    }
}

/// Named parameter tensors in deterministic construction order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    fn insert(&mut self, name: &str, t: Tensor) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// One line per tensor: `name rows cols`. Diffable across runs.
    pub fn shape_inventory(&self) -> String {
        let mut out = String::new();
        for (name, t) in self.iter() {
            out.push_str(&format!("{name} {} {}\n", t.rows, t.cols));
        }
        out
    }
}

/// Parameter leaves registered on a tape, aligned with the store order.
pub struct TapeParams {
    pub vars: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct AttentionDenoiser {
    pub config: AttentionDenoiserConfig,
    pub params: ParamStore,
}

impl AttentionDenoiser {
    pub fn new(config: AttentionDenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let k = config.domain_size;
        let pe_total = config.pos_dims * PE_DIM;
        let ff = 4 * d;
        let mut params = ParamStore::default();
        let randn = |rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng| {
            Tensor::from_vec(
                rows,
                cols,
                (0..rows * cols)
                    .map(|_| {
                        let e: f64 = rng.sample(StandardNormal);
                        std * e
                    })
                    .collect(),
            )
        };
        params.insert("value_embed", randn(k, d, 1.0 / (k as f64).sqrt(), &mut rng));
        params.insert("ape_proj", randn(pe_total, d, 1.0 / (pe_total as f64).sqrt(), &mut rng));
        params.insert("ape_bias", Tensor::zeros(1, d));
        params.insert("mask_embed", randn(1, d, 1.0, &mut rng));
        let w_std = 1.0 / (d as f64).sqrt();
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(&format!("l{l}.{w}"), randn(d, d, w_std, &mut rng));
                params.insert(&format!("l{l}.{w}_b"), Tensor::zeros(1, d));
            }
            params.insert(&format!("l{l}.ln1_g"), Tensor::from_vec(1, d, vec![1.0; d]));
            params.insert(&format!("l{l}.ln1_b"), Tensor::zeros(1, d));
            params.insert(&format!("l{l}.ff1"), randn(d, ff, w_std, &mut rng));
            params.insert(&format!("l{l}.ff1_b"), Tensor::zeros(1, ff));
            params.insert(&format!("l{l}.ff2"), randn(ff, d, 1.0 / (ff as f64).sqrt(), &mut rng));
            params.insert(&format!("l{l}.ff2_b"), Tensor::zeros(1, d));
            params.insert(&format!("l{l}.ln2_g"), Tensor::from_vec(1, d, vec![1.0; d]));
            params.insert(&format!("l{l}.ln2_b"), Tensor::zeros(1, d));
        }
        // Zero-initialized Gaussian heads: mu = 0, log sigma^2 = 0 at init.
        params.insert("head_mu", Tensor::zeros(d, k));
        params.insert("head_mu_b", Tensor::zeros(1, k));
        params.insert("head_lv", Tensor::zeros(d, k));
        params.insert("head_lv_b", Tensor::zeros(1, k));
        if config.rpe_bias == RpeBias::Learned {
            params.insert("rpe_gamma", Tensor::scalar(1.0));
        }
        Ok(Self { config, params })
    }

    /// Registers every parameter as a tape leaf.
    pub fn params_on_tape(&self, tape: &mut Tape) -> TapeParams {
        TapeParams { vars: self.params.tensors().iter().map(|t| tape.leaf(t.clone())).collect() }
    }

    fn p(&self, tp: &TapeParams, name: &str) -> Var {
        tp.vars[self.params.index[name]]
    }

    /// Sinusoidal APE rows for the instance's positional indices (constant).
    fn ape_raw(&self, ctx: &InstanceContext) -> Result<Tensor> {
        let n = ctx.instance.n_vars;
        let pe_total = self.config.pos_dims * PE_DIM;
        let mut t = Tensor::zeros(n, pe_total);
        for (i, idx) in ctx.pos_indices.iter().enumerate() {
            if idx.len() != self.config.pos_dims {
                return Err(Error::Interface(format!(
                    "instance has {}-dim positions, model expects {}",
                    idx.len(),
                    self.config.pos_dims
                )));
            }
            for (axis, &pos) in idx.iter().enumerate() {
                for j in 0..PE_DIM / 2 {
                    let freq = 1.0 / 10_000f64.powf(2.0 * j as f64 / PE_DIM as f64);
                    let angle = pos as f64 * freq;
                    t.set(i, axis * PE_DIM + 2 * j, angle.sin());
                    t.set(i, axis * PE_DIM + 2 * j + 1, angle.cos());
                }
            }
        }
        Ok(t)
    }

    /// Constraint-graph indicator `I[(i,j) not in E]` with forced
    /// self-adjacency, so hard masking never empties an attention row.
    fn rpe_indicator(ctx: &InstanceContext) -> Tensor {
        let n = ctx.instance.n_vars;
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j && !ctx.graph.adjacent(i, j) {
                    t.set(i, j, 1.0);
                }
            }
        }
        t
    }

    /// Builds the full forward computation on a tape. `z_var` is the `n x K`
    /// logit state (leaf or intermediate node); returns `(mu, log_var)`
    /// tape nodes of shape `n x K`. `dropout_rng` enables train-mode dropout.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        z_var: Var,
        mask: &MaskVector,
        ctx: &InstanceContext,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let n = ctx.instance.n_vars;
        let d = cfg.embed_dim;
        let dk = d / cfg.heads;

        // Token embedding: value distribution x value-embedding matrix.
        let value_input = if cfg.relaxed_value_embed {
            tape.softmax_rows(z_var)
        } else {
            let zt = tape.value(z_var);
            let mut onehot = Tensor::zeros(n, cfg.domain_size);
            for i in 0..n {
                let row = &zt.data[i * cfg.domain_size..(i + 1) * cfg.domain_size];
                onehot.set(i, crate::state::argmax_row(row), 1.0);
            }
            tape.leaf(onehot)
        };
        let tok = tape.matmul(value_input, self.p(tp, "value_embed"));

        let ape_raw = tape.leaf(self.ape_raw(ctx)?);
        let ape = tape.matmul(ape_raw, self.p(tp, "ape_proj"));
        let ape = tape.add_row(ape, self.p(tp, "ape_bias"));

        let mask_col = tape.leaf(Tensor::from_vec(
            n,
            1,
            mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        ));
        let mask_feat = tape.matmul(mask_col, self.p(tp, "mask_embed"));

        let mut h = tape.add(tok, ape);
        h = tape.add(h, mask_feat);

        // Attention-logit bias; Fixed(0) skips the add so the unbiased path
        // is taken bit-exactly.
        let rpe = match cfg.rpe_bias {
            RpeBias::Fixed(c) => {
                if c == 0.0 {
                    None
                } else {
                    let mut ind = Self::rpe_indicator(ctx);
                    for v in ind.data.iter_mut() {
                        *v *= c;
                    }
                    Some(tape.leaf(ind))
                }
            }
            RpeBias::Learned => {
                let gamma = self.p(tp, "rpe_gamma");
                let c = tape.mul(gamma, gamma);
                let c = tape.scale(c, -1.0);
                let ind = tape.leaf(Self::rpe_indicator(ctx));
                Some(tape.scale_by(ind, c))
            }
        };

        for l in 0..cfg.layers {
            let pn = |w: &str| format!("l{l}.{w}");
            let q0 = tape.matmul(h, self.p(tp, &pn("wq")));
            let q = tape.add_row(q0, self.p(tp, &pn("wq_b")));
            let k0 = tape.matmul(h, self.p(tp, &pn("wk")));
            let kv = tape.add_row(k0, self.p(tp, &pn("wk_b")));
            let v0 = tape.matmul(h, self.p(tp, &pn("wv")));
            let vv = tape.add_row(v0, self.p(tp, &pn("wv_b")));

            let mut head_outs = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let (from, to) = (hd * dk, (hd + 1) * dk);
                let qh = tape.slice_cols(q, from, to);
                let kh = tape.slice_cols(kv, from, to);
                let vh = tape.slice_cols(vv, from, to);
                let kt = tape.transpose(kh);
                let logits0 = tape.matmul(qh, kt);
                let mut logits = tape.scale(logits0, 1.0 / (dk as f64).sqrt());
                if let Some(bias) = rpe {
                    logits = tape.add(logits, bias);
                }
                let attn = tape.softmax_rows(logits);
                head_outs.push(tape.matmul(attn, vh));
            }
            let mut concat = head_outs[0];
            for &ho in &head_outs[1..] {
                concat = tape.concat_cols(concat, ho);
            }
            let o0 = tape.matmul(concat, self.p(tp, &pn("wo")));
            let mut o = tape.add_row(o0, self.p(tp, &pn("wo_b")));
            o = self.dropout(tape, o, &mut dropout_rng);

            let res1 = tape.add(h, o);
            let norm1 = tape.layer_norm_rows(res1, LN_EPS);
            let scaled1 = tape.mul_row(norm1, self.p(tp, &pn("ln1_g")));
            h = tape.add_row(scaled1, self.p(tp, &pn("ln1_b")));

            let f0 = tape.matmul(h, self.p(tp, &pn("ff1")));
            let f1 = tape.add_row(f0, self.p(tp, &pn("ff1_b")));
            let f2 = tape.gelu(f1);
            let f3 = tape.matmul(f2, self.p(tp, &pn("ff2")));
            let mut f4 = tape.add_row(f3, self.p(tp, &pn("ff2_b")));
            f4 = self.dropout(tape, f4, &mut dropout_rng);

            let res2 = tape.add(h, f4);
            let norm2 = tape.layer_norm_rows(res2, LN_EPS);
            let scaled2 = tape.mul_row(norm2, self.p(tp, &pn("ln2_g")));
            h = tape.add_row(scaled2, self.p(tp, &pn("ln2_b")));

            if !tape.value(h).is_finite() {
                return Err(Error::Numeric { layer: l, msg: "non-finite activations".into() });
            }
        }

        let mu0 = tape.matmul(h, self.p(tp, "head_mu"));
        let mu = tape.add_row(mu0, self.p(tp, "head_mu_b"));
        let lv0 = tape.matmul(h, self.p(tp, "head_lv"));
        let log_var = tape.add_row(lv0, self.p(tp, "head_lv_b"));
        Ok((mu, log_var))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let rate = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else { return x };
        if rate == 0.0 {
            return x;
        }
        let t = tape.value(x);
        let keep = 1.0 - rate;
        let m = Tensor::from_vec(
            t.rows,
            t.cols,
            (0..t.rows * t.cols)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        );
        let mv = tape.leaf(m);
        tape.mul(x, mv)
    }
}

impl Denoiser for AttentionDenoiser {
    fn predict(&self, input: &DenoiserInput<'_>, _rng: &mut dyn RngCore) -> Result<ReverseStepOutput> {
        input.check_shapes()?;
        if input.z.k != self.config.domain_size {
            return Err(Error::Interface(format!(
                "model built for K = {}, instance has K = {}",
                self.config.domain_size, input.z.k
            )));
        }
        let mut tape = Tape::new();
        let tp = self.params_on_tape(&mut tape);
        let z_var = tape.leaf(Tensor::from_vec(input.z.n, input.z.k, input.z.z.clone()));
        let (mu, lv) = self.forward_graph(&mut tape, &tp, z_var, input.mask, input.ctx, None)?;
        Ok(ReverseStepOutput {
            n: input.z.n,
            k: input.z.k,
            mu: tape.value(mu).data.clone(),
            log_var: tape.value(lv).data.clone(),
        })
    }
}

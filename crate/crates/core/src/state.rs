//! Logit-space diffusion state: simplex decoding, discretization, mask
//! broadcasting, and base-distribution initialization.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::problem::ProblemInstance;

/// Logit magnitude used to clamp a row to a (numerically) one-hot pattern.
/// Softmax saturates to 1 within double precision at this gap without
/// producing infinities.
pub const CLAMP_LOGIT: f64 = 20.0;

/// A discrete assignment: one domain value per variable.
pub type DiscreteAssignment = Vec<usize>;

/// The diffusion state `Z_t`: an `n x K` matrix of real logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitState {
    pub n: usize,
    pub k: usize,
    /// Row-major `n x K` logits.
    pub z: Vec<f64>,
    /// Reverse-time index of the state.
    pub t: usize,
}

impl LogitState {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self { n, k, z: vec![0.0; n * k], t: 0 }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        let z = rows.into_iter().flatten().collect();
        Self { n, k, z, t: 0 }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.z[i * self.k..(i + 1) * self.k]
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
    }

    /// Overwrites row `i` with the saturated one-hot logit pattern for `value`.
    pub fn clamp_row(&mut self, i: usize, value: usize) {
        for (kk, z) in self.row_mut(i).iter_mut().enumerate() {
            *z = if kk == value { CLAMP_LOGIT } else { -CLAMP_LOGIT };
        }
    }
}

/// Returns the saturated one-hot logit row for `value`.
pub fn clamp_pattern(k: usize, value: usize) -> Vec<f64> {
    (0..k).map(|kk| if kk == value { CLAMP_LOGIT } else { -CLAMP_LOGIT }).collect()
}

/// A row-stochastic relaxation `X̃`: each row lies on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedAssignment {
    pub n: usize,
    pub k: usize,
    /// Row-major `n x K` probabilities.
    pub x: Vec<f64>,
}

impl RelaxedAssignment {
    /// Validates entries in [0,1] and row sums within 1e-9 of 1.
    pub fn new(n: usize, k: usize, x: Vec<f64>) -> Result<Self> {
        if x.len() != n * k {
            return Err(Error::State(format!("expected {} entries, got {}", n * k, x.len())));
        }
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            if row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
                return Err(Error::State(format!("row {i} has entries outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::State(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { n, k, x })
    }

    /// Embeds a discrete assignment as exact one-hot rows.
    pub fn one_hot(assignment: &[usize], k: usize) -> Self {
        let n = assignment.len();
        let mut x = vec![0.0; n * k];
        for (i, &v) in assignment.iter().enumerate() {
            x[i * k + v] = 1.0;
        }
        Self { n, k, x }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.k..(i + 1) * self.k]
    }
}

/// Per-variable block-selection mask; `broadcast(i, k)` is the `K`-column
/// broadcast view `m̃`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVector {
    pub bits: Vec<bool>,
}

impl MaskVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn empty(n: usize) -> Self {
        Self { bits: vec![false; n] }
    }

    pub fn full(n: usize) -> Self {
        Self { bits: vec![true; n] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// The broadcast entry `m̃^(i,k) = m^(i)` (identical across columns).
    #[inline]
    pub fn broadcast(&self, i: usize, _k: usize) -> bool {
        self.bits[i]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Flattened 0/1 broadcast over `n x K` coordinates.
    pub fn broadcast_f64(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.bits.len() * k);
        for &b in &self.bits {
            let v = if b { 1.0 } else { 0.0 };
            out.extend(std::iter::repeat(v).take(k));
        }
        out
    }
}

/// Numerically stabilized row-wise softmax decode of a logit state.
pub fn softmax_decode(state: &LogitState) -> Result<RelaxedAssignment> {
    if !state.is_finite() {
        return Err(Error::State("non-finite logits".into()));
    }
    let mut x = vec![0.0; state.n * state.k];
    for i in 0..state.n {
        let row = state.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut x[i * state.k..(i + 1) * state.k];
        let mut sum = 0.0;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = (z - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(RelaxedAssignment { n: state.n, k: state.k, x })
}

/// Row-wise softmax of a single logit row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Per-row argmax; ties break to the lowest value index.
pub fn argmax_assign(x: &RelaxedAssignment) -> DiscreteAssignment {
    (0..x.n).map(|i| argmax_row(x.row(i))).collect()
}

/// Argmax of one row with lowest-index tie-breaking.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Decodes a logit state straight to a discrete assignment.
pub fn decode_assignment(state: &LogitState) -> Result<DiscreteAssignment> {
    Ok(argmax_assign(&softmax_decode(state)?))
}

/// Draws the base state `Z_T ~ N(0, s^2 I)` with given rows clamped to their
/// one-hot pattern. Clamped rows stay frozen for the whole chain.
pub fn init_base<R: Rng + ?Sized>(
    instance: &ProblemInstance,
    s: f64,
    rng: &mut R,
) -> Result<LogitState> {
    if !(s > 0.0) {
        return Err(Error::State(format!("base scale s = {s} must be positive")));
    }
    let (n, k) = (instance.n_vars, instance.domain_size);
    let mut state = LogitState::zeros(n, k);
    for v in state.z.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v = s * e;
    }
    for (&i, &val) in &instance.givens {
        state.clamp_row(i, val);
    }
    Ok(state)
}

/// Order-sensitive checksum over the given (frozen) rows of a state, used to
/// assert that no chain or training operation ever touches them.
pub fn given_rows_checksum(state: &LogitState, instance: &ProblemInstance) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (&i, _) in &instance.givens {
        for &z in state.row(i) {
            h ^= z.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

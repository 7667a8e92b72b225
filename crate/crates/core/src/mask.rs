//! Mask-rate schedules, Bernoulli mask sampling, and the adaptive
//! block-selection strategies with budget normalization.
//!
//! Time convention: `t` runs `T -> 1` during sampling, so large `t` (early
//! reverse steps) gets a large rate, annealing the chain from coarse global
//! edits to fine local repairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::violation_scores;
use crate::error::{Error, Result};
use crate::problem::ProblemInstance;
use crate::state::{softmax_row, LogitState, MaskVector};

/// Smoothing added to adaptive scores so zero-score states still mix.
pub const SCORE_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Geometric,
}

/// Annealed masking-rate schedule over reverse steps `0..=T`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub kind: ScheduleKind,
    pub rho_min: f64,
    pub rho_max: f64,
    /// Horizon T of the schedule.
    pub t_steps: usize,
}

impl MaskSchedule {
    pub fn new(kind: ScheduleKind, rho_min: f64, rho_max: f64, t_steps: usize) -> Result<Self> {
        if !(rho_min > 0.0 && rho_min <= rho_max && rho_max <= 1.0) {
            return Err(Error::Policy(format!(
                "need 0 < rho_min <= rho_max <= 1, got ({rho_min}, {rho_max})"
            )));
        }
        Ok(Self { kind, rho_min, rho_max, t_steps })
    }

    /// Constant-rate schedule (rho_min = rho_max).
    pub fn constant(rho: f64, t_steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Linear, rho, rho, t_steps)
    }
}

/// Masking rate at reverse step `t`. Endpoints are returned exactly.
pub fn schedule_rate(sched: &MaskSchedule, t: usize) -> Result<f64> {
    if t > sched.t_steps {
        return Err(Error::Policy(format!(
            "step {t} outside schedule range 0..={}",
            sched.t_steps
        )));
    }
    if t == sched.t_steps {
        return Ok(sched.rho_max);
    }
    if t == 0 {
        return Ok(sched.rho_min);
    }
    let frac = t as f64 / sched.t_steps as f64;
    let rho = match sched.kind {
        ScheduleKind::Linear => sched.rho_min + (sched.rho_max - sched.rho_min) * frac,
        ScheduleKind::Geometric => {
            sched.rho_min * (sched.rho_max / sched.rho_min).powf(frac)
        }
    };
    Ok(rho)
}

/// State-dependent block-selection strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// State-agnostic Bernoulli(rho_t) per variable.
    Uniform,
    /// Prioritize variables with a small top-probability margin.
    Margin,
    /// Prioritize variables involved in violated constraints.
    Critical,
    /// Mask unions of whole constraint scopes.
    Related,
}

/// Strategy plus score smoothing.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdaptivePolicy {
    pub strategy: MaskStrategy,
    pub epsilon: f64,
}

impl AdaptivePolicy {
    pub fn new(strategy: MaskStrategy, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Policy(format!("epsilon {epsilon} must be positive")));
        }
        Ok(Self { strategy, epsilon })
    }

    pub fn uniform() -> Self {
        Self { strategy: MaskStrategy::Uniform, epsilon: SCORE_EPSILON }
    }
}

impl Default for AdaptivePolicy {
    fn default() -> Self {
        Self::uniform()
    }
}

/// Top-probability margin certainty score per variable:
/// `c_i = p(j1) - p(j2)` for the two most probable values of row `i`.
pub fn margin_scores(z: &LogitState) -> Result<Vec<f64>> {
    if z.k < 2 {
        return Err(Error::Formulation("margin scores need K >= 2".into()));
    }
    if !z.is_finite() {
        return Err(Error::State("non-finite logits in margin scores".into()));
    }
    let mut out = Vec::with_capacity(z.n);
    for i in 0..z.n {
        let p = softmax_row(z.row(i));
        let mut top = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &v in &p {
            if v > top {
                second = top;
                top = v;
            } else if v > second {
                second = v;
            }
        }
        out.push(top - second);
    }
    Ok(out)
}

/// Budget-normalized per-variable rates `rho_i = clip(n rho_t s_i / sum s)`
/// with clipped excess redistributed proportionally over unclipped entries.
/// All-zero scores fall back to the uniform rate.
pub fn adaptive_rates(scores: &[f64], rho_t: f64, n: usize) -> Result<Vec<f64>> {
    assert_eq!(scores.len(), n, "score/variable count mismatch");
    if let Some(&s) = scores.iter().find(|&&s| s < 0.0) {
        return Err(Error::Policy(format!("negative score {s}")));
    }
    let sum: f64 = scores.iter().sum();
    if sum == 0.0 || n == 0 {
        return Ok(vec![rho_t; n]);
    }
    let target = rho_t * n as f64;
    let mut rates: Vec<f64> = scores.iter().map(|s| target * s / sum).collect();
    // Redistribute clipped excess; each pass either converges or clips at
    // least one more entry, so n + 1 passes suffice.
    for _ in 0..=n {
        for r in rates.iter_mut() {
            *r = r.clamp(0.0, 1.0);
        }
        let excess = target - rates.iter().sum::<f64>();
        if excess <= n as f64 * 1e-6 {
            break;
        }
        let open: Vec<usize> = (0..n).filter(|&i| rates[i] < 1.0).collect();
        if open.is_empty() {
            break;
        }
        let w: f64 = open.iter().map(|&i| scores[i]).sum();
        if w == 0.0 {
            let share = excess / open.len() as f64;
            for &i in &open {
                rates[i] += share;
            }
        } else {
            for &i in &open {
                rates[i] += excess * scores[i] / w;
            }
        }
    }
    Ok(rates)
}

/// Constraint-level Bernoulli rate `eta` such that the expected
/// variable-level destruction rate is approximately `rho_t`:
/// `mean_i [1 - (1 - eta)^deg_c(i)] = rho_t` over non-isolated variables,
/// solved by bisection to 1e-6. Returns 1 if unattainable.
pub fn calibrate_eta(deg_c: &[usize], rho_t: f64) -> Result<f64> {
    if !(rho_t > 0.0 && rho_t <= 1.0) {
        return Err(Error::Policy(format!("rho_t {rho_t} outside (0,1]")));
    }
    let covered: Vec<usize> = deg_c.iter().copied().filter(|&d| d > 0).collect();
    if covered.len() < deg_c.len() {
        log::warn!(
            "{} isolated variables are excluded from related-mask coverage and never masked",
            deg_c.len() - covered.len()
        );
    }
    if covered.is_empty() {
        log::warn!("no constraint coverage at all; related masking degenerates");
        return Ok(1.0);
    }
    let coverage = |eta: f64| -> f64 {
        covered.iter().map(|&d| 1.0 - (1.0 - eta).powi(d as i32)).sum::<f64>()
            / covered.len() as f64
    };
    if coverage(1.0) < rho_t {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if coverage(mid) < rho_t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Masks the union of the scopes of constraints drawn Bernoulli(`eta`).
pub fn related_mask<R: Rng + ?Sized>(
    scopes: &[Vec<usize>],
    n_vars: usize,
    eta: f64,
    rng: &mut R,
) -> MaskVector {
    let mut bits = vec![false; n_vars];
    for scope in scopes {
        if rng.random::<f64>() < eta {
            for &i in scope {
                bits[i] = true;
            }
        }
    }
    MaskVector::new(bits)
}

/// Everything the mask sampler may need from the current chain state.
pub struct MaskInputs<'a> {
    pub z: &'a LogitState,
    pub decoded: &'a [usize],
    pub instance: &'a ProblemInstance,
    /// Effective constraint scopes (see `problem::effective_scopes`).
    pub scopes: &'a [Vec<usize>],
    /// Constraint degree per variable.
    pub deg_c: &'a [usize],
}

/// Samples the step-`t` mask. Given (clamped) variables are never masked,
/// whatever the strategy.
pub fn sample_mask<R: Rng + ?Sized>(
    policy: &AdaptivePolicy,
    sched: &MaskSchedule,
    t: usize,
    inputs: &MaskInputs<'_>,
    rng: &mut R,
) -> Result<MaskVector> {
    let rho_t = schedule_rate(sched, t)?;
    let instance = inputs.instance;
    let n = instance.n_vars;
    let free: Vec<usize> = (0..n).filter(|i| !instance.givens.contains_key(i)).collect();

    if policy.strategy == MaskStrategy::Related {
        let eta = calibrate_eta(inputs.deg_c, rho_t)?;
        let mut mask = related_mask(inputs.scopes, n, eta, rng);
        for (&i, _) in &instance.givens {
            mask.bits[i] = false;
        }
        return Ok(mask);
    }

    let rates: Vec<f64> = match policy.strategy {
        MaskStrategy::Uniform => vec![rho_t; free.len()],
        MaskStrategy::Margin => {
            let c = margin_scores(inputs.z)?;
            let cmax =
                free.iter().map(|&i| c[i]).fold(f64::NEG_INFINITY, f64::max);
            let scores: Vec<f64> =
                free.iter().map(|&i| (cmax - c[i]) + policy.epsilon).collect();
            adaptive_rates(&scores, rho_t, free.len())?
        }
        MaskStrategy::Critical => {
            let v = violation_scores(inputs.decoded, instance);
            let scores: Vec<f64> =
                free.iter().map(|&i| v[i] + policy.epsilon).collect();
            adaptive_rates(&scores, rho_t, free.len())?
        }
        MaskStrategy::Related => unreachable!(),
    };

    let mut bits = vec![false; n];
    for (&i, &r) in free.iter().zip(&rates) {
        bits[i] = rng.random::<f64>() < r;
    }
    Ok(MaskVector::new(bits))
}

/// Log-probability of a mask under the reverse-side schedule (Eq.-8 shared
/// Bernoulli product; given variables are deterministically unmasked).
pub fn reverse_mask_log_prob(
    sched: &MaskSchedule,
    t: usize,
    mask: &MaskVector,
    instance: &ProblemInstance,
) -> Result<f64> {
    shared_mask_log_prob(sched, t, mask, instance)
}

/// Log-probability of a mask under the forward-side schedule. The schedule
/// is shared with the reverse side, so this equals
/// [`reverse_mask_log_prob`] term by term and the Eq.-7 mask-divergence
/// contribution vanishes identically.
pub fn forward_mask_log_prob(
    sched: &MaskSchedule,
    t: usize,
    mask: &MaskVector,
    instance: &ProblemInstance,
) -> Result<f64> {
    shared_mask_log_prob(sched, t, mask, instance)
}

fn shared_mask_log_prob(
    sched: &MaskSchedule,
    t: usize,
    mask: &MaskVector,
    instance: &ProblemInstance,
) -> Result<f64> {
    let rho = schedule_rate(sched, t)?;
    let mut lp = 0.0;
    for (i, &m) in mask.bits.iter().enumerate() {
        if instance.givens.contains_key(&i) {
            if m {
                return Ok(f64::NEG_INFINITY);
            }
            continue; // P(m=0) = 1 for clamped variables
        }
        lp += if m { rho.ln() } else { (1.0 - rho).ln() };
    }
    Ok(lp)
}

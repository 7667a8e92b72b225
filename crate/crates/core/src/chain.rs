//! Mask-augmented forward and reverse kernels, the base-to-sample reverse
//! chain, the forward log-density, and trajectory recording.
//!
//! Copy invariance is structural: unmasked coordinates pass through both
//! kernels bit-exactly, and given (clamped) rows are never touched even if a
//! caller hands in a mask that covers them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::denoiser::{Denoiser, DenoiserInput, InstanceContext};
use crate::energy::{energy_discrete, EnergyReport};
use crate::error::{Error, Result};
use crate::mask::{
    forward_mask_log_prob, reverse_mask_log_prob, sample_mask, schedule_rate, AdaptivePolicy,
    MaskInputs, MaskSchedule, ScheduleKind,
};
use crate::state::{argmax_assign, init_base, softmax_decode, DiscreteAssignment, LogitState, MaskVector};

/// Training-side clamp bounds for denoiser `log sigma^2` outputs, keeping the
/// entropy and noise-matching terms finite.
pub const LOG_VAR_FLOOR: f64 = -10.0;
pub const LOG_VAR_CEIL: f64 = 4.0;

/// Gaussian parameters proposed by a denoiser for one reverse step.
/// Consumers enforce exact copying on unmasked coordinates (`mu = Z_t`,
/// `sigma = 0`), so only masked entries of `mu`/`log_var` are consumed.
#[derive(Clone, Debug)]
pub struct ReverseStepOutput {
    pub n: usize,
    pub k: usize,
    /// Row-major `n x K` proposal means.
    pub mu: Vec<f64>,
    /// Row-major `n x K` log-variances; `-inf` denotes an exactly
    /// deterministic proposal.
    pub log_var: Vec<f64>,
}

impl ReverseStepOutput {
    fn check(&self, z: &LogitState, mask: &MaskVector, t: usize) -> Result<()> {
        if self.n != z.n || self.k != z.k || self.mu.len() != z.z.len() {
            return Err(Error::Chain { step: t, msg: "denoiser output shape mismatch".into() });
        }
        for i in 0..self.n {
            if !mask.bits[i] {
                continue;
            }
            for kk in 0..self.k {
                let idx = i * self.k + kk;
                let (m, lv) = (self.mu[idx], self.log_var[idx]);
                if !m.is_finite() {
                    return Err(Error::Chain { step: t, msg: format!("non-finite mu at ({i},{kk})") });
                }
                // -inf log-variance is a valid degenerate proposal.
                if lv.is_nan() || lv == f64::INFINITY {
                    return Err(Error::Chain {
                        step: t,
                        msg: format!("non-finite log sigma^2 at ({i},{kk})"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Configuration for one reverse chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Number of reverse steps T.
    pub t_steps: usize,
    /// Base-distribution scale s.
    pub base_s: f64,
    /// Fixed forward kernel noise scale.
    pub sigma_fwd: f64,
    pub schedule: ScheduleKind,
    pub rho_min: f64,
    pub rho_max: f64,
    pub policy: AdaptivePolicy,
    pub seed: u64,
    /// Keep per-step logits in the trajectory (memory-heavy).
    pub record_logits: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            t_steps: 200,
            base_s: 1.0,
            sigma_fwd: 1.0,
            schedule: ScheduleKind::Linear,
            rho_min: 0.3,
            rho_max: 0.9,
            policy: AdaptivePolicy::uniform(),
            seed: 0,
            record_logits: false,
        }
    }
}

impl ChainConfig {
    pub fn mask_schedule(&self) -> Result<MaskSchedule> {
        MaskSchedule::new(self.schedule, self.rho_min, self.rho_max, self.t_steps)
    }
}

/// One recorded state of a trajectory.
#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub t: usize,
    pub z: Option<LogitState>,
    pub decoded: DiscreteAssignment,
    pub energy: EnergyReport,
}

/// One recorded mask with its shared-schedule log-probabilities.
#[derive(Clone, Debug)]
pub struct TrajectoryMask {
    pub t: usize,
    pub mask: MaskVector,
    pub forward_log_prob: f64,
    pub reverse_log_prob: f64,
}

/// Full record of one reverse chain: T+1 states (t = T..0, strictly
/// decreasing) and T masks (t = T..1).
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub masks: Vec<TrajectoryMask>,
    pub final_assignment: DiscreteAssignment,
}

impl Trajectory {
    /// Lowest discrete energy over all recorded states.
    pub fn best_energy(&self) -> Option<&TrajectoryStep> {
        self.steps
            .iter()
            .min_by(|a, b| a.energy.total.partial_cmp(&b.energy.total).unwrap())
    }
}

/// Masked Gaussian forward step: `Z_t = Z_{t-1} + m ⊙ eps`,
/// `eps ~ N(0, sigma_fwd^2 I)`. Unmasked coordinates are copied bit-exactly.
pub fn forward_step<R: Rng + ?Sized>(
    z_prev: &LogitState,
    mask: &MaskVector,
    sigma_fwd: f64,
    rng: &mut R,
) -> Result<LogitState> {
    if !(sigma_fwd > 0.0) {
        return Err(Error::State(format!("sigma_fwd {sigma_fwd} must be positive")));
    }
    let mut z = z_prev.clone();
    for i in 0..z.n {
        if !mask.bits[i] {
            continue;
        }
        for v in z.row_mut(i) {
            let e: f64 = rng.sample(StandardNormal);
            *v += sigma_fwd * e;
        }
    }
    z.t = z_prev.t + 1;
    Ok(z)
}

/// Log-density of the masked Gaussian forward kernel
/// `log p(Z_t | Z_{t-1}, m)`, restricted to masked coordinates. Returns
/// `-inf` if any unmasked coordinate differs; an empty mask yields 0.
pub fn log_prob_forward(
    z_t: &LogitState,
    z_prev: &LogitState,
    mask: &MaskVector,
    sigma_fwd: f64,
) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_2;
    let mut lp = 0.0;
    for i in 0..z_t.n {
        let (rt, rp) = (z_t.row(i), z_prev.row(i));
        if mask.bits[i] {
            for (a, b) in rt.iter().zip(rp) {
                let d = a - b;
                lp += -0.5 * LN_2PI - sigma_fwd.ln() - d * d / (2.0 * sigma_fwd * sigma_fwd);
            }
        } else if rt != rp {
            return f64::NEG_INFINITY;
        }
    }
    lp
}

/// One reverse transition: masked, non-given coordinates are sampled as
/// `mu + sigma ⊙ eps` (with `sigma = exp(log_var / 2)` capped above); all
/// other coordinates are copied bit-exactly. Returns the new state together
/// with the raw Gaussian parameters for loss computation.
pub fn reverse_step(
    denoiser: &dyn Denoiser,
    z_t: &LogitState,
    mask: &MaskVector,
    t: usize,
    ctx: &InstanceContext,
    rng: &mut ChaCha8Rng,
) -> Result<(LogitState, ReverseStepOutput)> {
    let input = DenoiserInput { z: z_t, mask, t, ctx };
    let out = denoiser.predict(&input, rng)?;
    out.check(z_t, mask, t)?;
    let mut z = z_t.clone();
    for i in 0..z.n {
        if !mask.bits[i] || ctx.instance.givens.contains_key(&i) {
            continue;
        }
        for kk in 0..z.k {
            let idx = i * z.k + kk;
            let sigma = (0.5 * out.log_var[idx].min(LOG_VAR_CEIL)).exp();
            let e: f64 = rng.sample(StandardNormal);
            z.z[idx] = out.mu[idx] + sigma * e;
        }
    }
    z.t = t - 1;
    Ok((z, out))
}

/// Runs the full reverse chain `T -> 0` and records the trajectory.
pub fn sample_chain(
    denoiser: &dyn Denoiser,
    ctx: &InstanceContext,
    config: &ChainConfig,
) -> Result<Trajectory> {
    let (traj, err) = sample_chain_partial(denoiser, ctx, config);
    match err {
        None => Ok(traj),
        Some(e) => Err(e),
    }
}

/// Like [`sample_chain`] but returns the partial trajectory alongside any
/// chain error, for diagnostics of aborted runs.
pub fn sample_chain_partial(
    denoiser: &dyn Denoiser,
    ctx: &InstanceContext,
    config: &ChainConfig,
) -> (Trajectory, Option<Error>) {
    let mut traj = Trajectory::default();
    let run = (|| -> Result<()> {
        let sched = config.mask_schedule()?;
        let instance = &ctx.instance;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut z = init_base(instance, config.base_s, &mut rng)?;
        z.t = config.t_steps;
        let mut decoded = argmax_assign(&softmax_decode(&z)?);
        traj.steps.push(TrajectoryStep {
            t: config.t_steps,
            z: config.record_logits.then(|| z.clone()),
            decoded: decoded.clone(),
            energy: energy_discrete(&decoded, instance)?,
        });
        let deg_c = &ctx.graph.deg_c;
        for t in (1..=config.t_steps).rev() {
            let inputs = MaskInputs {
                z: &z,
                decoded: &decoded,
                instance,
                scopes: &ctx.scopes,
                deg_c,
            };
            let mask = sample_mask(&config.policy, &sched, t, &inputs, &mut rng)?;
            let forward_log_prob = forward_mask_log_prob(&sched, t, &mask, instance)?;
            let reverse_log_prob = reverse_mask_log_prob(&sched, t, &mask, instance)?;
            let (z_next, _) = reverse_step(denoiser, &z, &mask, t, ctx, &mut rng)?;
            traj.masks.push(TrajectoryMask { t, mask, forward_log_prob, reverse_log_prob });
            z = z_next;
            decoded = argmax_assign(&softmax_decode(&z)?);
            traj.steps.push(TrajectoryStep {
                t: t - 1,
                z: config.record_logits.then(|| z.clone()),
                decoded: decoded.clone(),
                energy: energy_discrete(&decoded, instance)?,
            });
        }
        traj.final_assignment = decoded;
        Ok(())
    })();
    (traj, run.err())
}

/// Empirically checks Proposition "sampling equivalence under mask
/// augmentation": the mask-augmented sampler, with masks discarded, must
/// reproduce the analytically mask-marginalized kernel.
///
/// The check runs a deterministic-proposal denoiser from one fixed base
/// draw, buckets decoded trajectories `X_{T..0}`, enumerates the exact
/// trajectory law by summing over all mask sequences per step, and returns
/// the total-variation distance.
pub fn marginal_equivalence_check(
    denoiser: &dyn Denoiser,
    ctx: &InstanceContext,
    t_steps: usize,
    n_samples: usize,
    sched: &MaskSchedule,
    seed: u64,
) -> Result<f64> {
    let instance = &ctx.instance;
    let (n, k) = (instance.n_vars, instance.domain_size);
    let state_bits = n as f64 * (k as f64).log2();
    if state_bits > 12.0 {
        return Err(Error::Refused(format!(
            "state space of {state_bits:.1} bits exceeds the 12-bit enumeration bound"
        )));
    }
    let free: Vec<usize> = instance.free_vars();
    if free.len() * t_steps > 20 {
        return Err(Error::Refused(format!(
            "{} free variables over {t_steps} steps exceeds the mask-sequence bound",
            free.len()
        )));
    }
    if sched.t_steps != t_steps {
        return Err(Error::Config("schedule horizon must equal t_steps".into()));
    }

    // One fixed base draw shared by the sampler and the oracle.
    let mut base_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z_base = init_base(instance, 1.0, &mut base_rng)?;
    z_base.t = t_steps;

    // Exact law: recursively branch over all masks of each step, weighting by
    // the shared Bernoulli schedule, with deterministic proposals.
    let mut exact: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut det_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let base_key = argmax_assign(&softmax_decode(&z_base)?);
    enumerate_masks(
        denoiser,
        ctx,
        sched,
        t_steps,
        &z_base,
        base_key,
        1.0,
        &free,
        &mut exact,
        &mut det_rng,
    )?;

    // Empirical law from the production sampler (integer counts, divided
    // once, so degenerate cases give exactly zero TV).
    let mut counts: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for _ in 0..n_samples {
        let mut z = z_base.clone();
        let mut key = argmax_assign(&softmax_decode(&z)?);
        let mut decoded = key.clone();
        for t in (1..=t_steps).rev() {
            let inputs = MaskInputs {
                z: &z,
                decoded: &decoded,
                instance,
                scopes: &ctx.scopes,
                deg_c: &ctx.graph.deg_c,
            };
            let mask = sample_mask(&AdaptivePolicy::uniform(), sched, t, &inputs, &mut rng)?;
            let (z_next, _) = reverse_step(denoiser, &z, &mask, t, ctx, &mut rng)?;
            z = z_next;
            decoded = argmax_assign(&softmax_decode(&z)?);
            key.extend(decoded.iter().copied());
        }
        *counts.entry(key).or_insert(0) += 1;
    }

    let mut tv = 0.0;
    for key in exact.keys().chain(counts.keys()).collect::<std::collections::BTreeSet<_>>() {
        let p = exact.get(key).copied().unwrap_or(0.0);
        let q = counts.get(key).copied().unwrap_or(0) as f64 / n_samples as f64;
        tv += (p - q).abs();
    }
    Ok(0.5 * tv)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_masks(
    denoiser: &dyn Denoiser,
    ctx: &InstanceContext,
    sched: &MaskSchedule,
    t: usize,
    z: &LogitState,
    key: Vec<usize>,
    prob: f64,
    free: &[usize],
    table: &mut BTreeMap<Vec<usize>, f64>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if t == 0 {
        *table.entry(key).or_insert(0.0) += prob;
        return Ok(());
    }
    let rho = schedule_rate(sched, t)?;
    let nf = free.len();
    for subset in 0u64..(1u64 << nf) {
        let mut mask = MaskVector::empty(ctx.instance.n_vars);
        let mut p_mask = 1.0;
        for (bit, &i) in free.iter().enumerate() {
            if subset >> bit & 1 == 1 {
                mask.bits[i] = true;
                p_mask *= rho;
            } else {
                p_mask *= 1.0 - rho;
            }
        }
        if p_mask == 0.0 {
            continue;
        }
        // Deterministic proposal: apply mu directly on masked rows.
        let input = DenoiserInput { z, mask: &mask, t, ctx };
        let out = denoiser.predict(&input, rng)?;
        let mut z_next = z.clone();
        for &i in free {
            if mask.bits[i] {
                for kk in 0..z.k {
                    z_next.z[i * z.k + kk] = out.mu[i * z.k + kk];
                }
            }
        }
        z_next.t = t - 1;
        let decoded = argmax_assign(&softmax_decode(&z_next)?);
        let mut key_next = key.clone();
        key_next.extend(decoded.iter().copied());
        enumerate_masks(denoiser, ctx, sched, t - 1, &z_next, key_next, prob * p_mask, free, table, rng)?;
    }
    Ok(())
}

/// Writes the `(t, var, k, logit)` trajectory dump. Requires the chain to
/// have recorded logits.
pub fn write_logits_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "t,var,k,logit")?;
    for step in &traj.steps {
        let z = step.z.as_ref().ok_or_else(|| {
            Error::Config("trajectory has no recorded logits (set record_logits)".into())
        })?;
        for i in 0..z.n {
            for kk in 0..z.k {
                writeln!(f, "{},{},{},{}", step.t, i, kk, z.row(i)[kk])?;
            }
        }
    }
    Ok(())
}

/// Writes the `(t, var, decoded_value)` trajectory dump.
pub fn write_decoded_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "t,var,decoded_value")?;
    for step in &traj.steps {
        for (i, &v) in step.decoded.iter().enumerate() {
            writeln!(f, "{},{},{}", step.t, i, v)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ConstantDenoiser, EchoDenoiser};
    use crate::problem::{gen_graph_instance, instance_from_edges, load_sudoku, GraphFamily};
    use crate::state::given_rows_checksum;
    use std::sync::Arc;

    fn ctx_for(inst: crate::problem::ProblemInstance) -> InstanceContext {
        InstanceContext::new(Arc::new(inst))
    }

    #[test]
    fn forward_step_copies_unmasked() {
        let inst = gen_graph_instance(GraphFamily::Mis, 5, 0.5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = init_base(&inst, 1.0, &mut rng).unwrap();
        let zero = forward_step(&z, &MaskVector::empty(5), 1.0, &mut rng).unwrap();
        assert_eq!(zero.z, z.z);

        let single = MaskVector::new(vec![false, true, false, false, false]);
        let stepped = forward_step(&z, &single, 1.0, &mut rng).unwrap();
        let changed = stepped.z.iter().zip(&z.z).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 2); // exactly K coordinates
    }

    #[test]
    fn forward_step_noise_variance() {
        let inst = gen_graph_instance(GraphFamily::Mis, 2, 0.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = LogitState::zeros(2, 2);
        let mask = MaskVector::full(2);
        let sigma = 0.7;
        let draws = 100_000;
        let mut sumsq = 0.0;
        for _ in 0..draws {
            let s = forward_step(&z, &mask, sigma, &mut rng).unwrap();
            sumsq += s.z[0] * s.z[0];
        }
        let var = sumsq / draws as f64;
        assert!((var - sigma * sigma).abs() < 0.05 * sigma * sigma, "var {var}");
        let _ = inst;
    }

    #[test]
    fn log_prob_forward_values() {
        let z0 = LogitState::from_rows(vec![vec![0.5, -0.3]]);
        let mask1 = MaskVector::new(vec![true]);
        // Z_t = Z_{t-1}: density of a standard normal at 0, per masked coord.
        let lp = log_prob_forward(&z0, &z0, &mask1, 1.0);
        let expected = -(2.0 * std::f64::consts::PI).ln(); // two coords at 0
        assert!((lp - expected).abs() < 1e-12);

        let mut z1 = z0.clone();
        z1.z[0] += 0.5;
        z1.z[1] += 0.0;
        let lp = log_prob_forward(&z1, &z0, &mask1, 1.0);
        assert!((lp - (expected - 0.125)).abs() < 1e-12);

        // Empty mask: empty product.
        assert_eq!(log_prob_forward(&z0, &z0, &MaskVector::new(vec![false]), 1.0), 0.0);
        // Unmasked mismatch: impossible transition.
        assert_eq!(
            log_prob_forward(&z1, &z0, &MaskVector::new(vec![false]), 1.0),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn reverse_step_zero_variance_hits_mu() {
        let inst = gen_graph_instance(GraphFamily::Coloring(3), 4, 0.5, 2).unwrap();
        let ctx = ctx_for(inst);
        let denoiser = ConstantDenoiser::toward_assignment(&[0, 1, 2, 0], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = init_base(&ctx.instance, 1.0, &mut rng).unwrap();
        let mask = MaskVector::full(4);
        let (z1, out) = reverse_step(&denoiser, &z, &mask, 1, &ctx, &mut rng).unwrap();
        assert_eq!(z1.z, out.mu);

        // Empty mask: exact copy.
        let (z2, _) = reverse_step(&denoiser, &z, &MaskVector::empty(4), 1, &ctx, &mut rng).unwrap();
        assert_eq!(z2.z, z.z);
    }

    #[test]
    fn reverse_step_is_rng_deterministic() {
        let inst = gen_graph_instance(GraphFamily::Mis, 5, 0.5, 4).unwrap();
        let ctx = ctx_for(inst);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = init_base(&ctx.instance, 1.0, &mut rng).unwrap();
        let mask = MaskVector::new(vec![true, false, true, true, false]);
        let run = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            reverse_step(&EchoDenoiser, &z, &mask, 3, &ctx, &mut r).unwrap().0
        };
        assert_eq!(run(77).z, run(77).z);
    }

    #[test]
    fn reverse_step_rejects_non_finite_mu() {
        let inst = gen_graph_instance(GraphFamily::Mis, 3, 0.5, 4).unwrap();
        let ctx = ctx_for(inst);
        let bad = ConstantDenoiser::new(3, 2, vec![f64::NAN; 6], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = LogitState::zeros(3, 2);
        let err =
            reverse_step(&bad, &z, &MaskVector::full(3), 5, &ctx, &mut rng).unwrap_err();
        match err {
            Error::Chain { step, .. } => assert_eq!(step, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn chain_forced_to_known_coloring() {
        // T=1, zero-variance proposal toward a feasible coloring of P3.
        let inst = instance_from_edges(
            GraphFamily::Coloring(2),
            3,
            vec![(0, 1), (1, 2)],
            "p3".into(),
            None,
        )
        .unwrap();
        let ctx = ctx_for(inst);
        let denoiser = ConstantDenoiser::toward_assignment(&[0, 1, 0], 2);
        let config = ChainConfig {
            t_steps: 1,
            rho_min: 1.0,
            rho_max: 1.0,
            seed: 3,
            ..ChainConfig::default()
        };
        let traj = sample_chain(&denoiser, &ctx, &config).unwrap();
        assert_eq!(traj.final_assignment, vec![0, 1, 0]);
        assert!(traj.steps.last().unwrap().energy.feasible);
        assert_eq!(traj.steps.len(), 2);
        assert_eq!(traj.masks.len(), 1);
    }

    #[test]
    fn chain_preserves_givens_throughout() {
        let inst = load_sudoku("1234000000000000", 4).unwrap();
        let ctx = ctx_for(inst);
        let config = ChainConfig { t_steps: 30, seed: 11, record_logits: true, ..Default::default() };
        let traj = sample_chain(&EchoDenoiser, &ctx, &config).unwrap();
        let reference = given_rows_checksum(
            traj.steps[0].z.as_ref().unwrap(),
            &ctx.instance,
        );
        for step in &traj.steps {
            let z = step.z.as_ref().unwrap();
            assert_eq!(given_rows_checksum(z, &ctx.instance), reference);
            for (&i, &v) in &ctx.instance.givens {
                assert_eq!(step.decoded[i], v);
            }
        }
    }

    #[test]
    fn chain_is_seed_deterministic() {
        let inst = gen_graph_instance(GraphFamily::Mis, 8, 0.4, 6).unwrap();
        let ctx = ctx_for(inst);
        let config = ChainConfig { t_steps: 25, seed: 42, record_logits: true, ..Default::default() };
        let a = sample_chain(&EchoDenoiser, &ctx, &config).unwrap();
        let b = sample_chain(&EchoDenoiser, &ctx, &config).unwrap();
        assert_eq!(a.final_assignment, b.final_assignment);
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.z.as_ref().unwrap().z, sb.z.as_ref().unwrap().z);
        }
        for (ma, mb) in a.masks.iter().zip(&b.masks) {
            assert_eq!(ma.mask, mb.mask);
        }
    }

    #[test]
    fn chain_copy_invariance_bit_exact() {
        let inst = gen_graph_instance(GraphFamily::Coloring(3), 6, 0.5, 8).unwrap();
        let ctx = ctx_for(inst);
        let config = ChainConfig { t_steps: 15, seed: 5, record_logits: true, ..Default::default() };
        let traj = sample_chain(&EchoDenoiser, &ctx, &config).unwrap();
        for (w, m) in traj.steps.windows(2).zip(&traj.masks) {
            let (prev, next) = (w[0].z.as_ref().unwrap(), w[1].z.as_ref().unwrap());
            for i in 0..prev.n {
                if !m.mask.bits[i] {
                    for kk in 0..prev.k {
                        assert_eq!(
                            prev.row(i)[kk].to_bits(),
                            next.row(i)[kk].to_bits(),
                            "unmasked coordinate changed"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn empty_masks_keep_chain_constant() {
        let inst = gen_graph_instance(GraphFamily::Mis, 4, 0.5, 6).unwrap();
        let ctx = ctx_for(inst);
        // rho_min = rho_max can't be 0, so drive emptiness via Related with no
        // sampled constraints: use a denoiser test at the kernel level instead.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = init_base(&ctx.instance, 1.0, &mut rng).unwrap();
        let mut cur = z.clone();
        for t in (1..=10).rev() {
            let (next, _) =
                reverse_step(&EchoDenoiser, &cur, &MaskVector::empty(4), t, &ctx, &mut rng)
                    .unwrap();
            cur = next;
        }
        assert_eq!(cur.z, z.z);
    }

    #[test]
    fn echo_denoiser_grows_masked_variance() {
        let inst = gen_graph_instance(GraphFamily::Mis, 4, 0.3, 7).unwrap();
        let ctx = ctx_for(inst);
        let config = ChainConfig {
            t_steps: 400,
            rho_min: 1.0,
            rho_max: 1.0,
            seed: 9,
            record_logits: true,
            ..Default::default()
        };
        let traj = sample_chain(&EchoDenoiser, &ctx, &config).unwrap();
        let spread = |z: &LogitState| z.z.iter().map(|v| v * v).sum::<f64>() / z.z.len() as f64;
        let first = spread(traj.steps[0].z.as_ref().unwrap());
        let last = spread(traj.steps.last().unwrap().z.as_ref().unwrap());
        assert!(last > 10.0 * first, "variance should grow: {first} -> {last}");
    }

    #[test]
    fn marginal_equivalence_tiny() {
        // Deterministic-mu denoiser on a 2-variable instance, T=2.
        let inst = instance_from_edges(GraphFamily::MaxCut, 2, vec![(0, 1)], "e".into(), None)
            .unwrap();
        let ctx = ctx_for(inst);
        let denoiser = ConstantDenoiser::toward_assignment(&[1, 0], 2);
        let sched = MaskSchedule::new(ScheduleKind::Linear, 0.4, 0.8, 2).unwrap();
        let tv =
            marginal_equivalence_check(&denoiser, &ctx, 2, 20_000, &sched, 123).unwrap();
        assert!(tv < 0.03, "tv {tv}");
    }

    #[test]
    fn marginal_equivalence_rho_one_is_exact() {
        let inst = instance_from_edges(GraphFamily::MaxCut, 2, vec![(0, 1)], "e".into(), None)
            .unwrap();
        let ctx = ctx_for(inst);
        let denoiser = ConstantDenoiser::toward_assignment(&[0, 1], 2);
        let sched = MaskSchedule::constant(1.0, 2).unwrap();
        let tv = marginal_equivalence_check(&denoiser, &ctx, 2, 2000, &sched, 5).unwrap();
        assert_eq!(tv, 0.0);
    }

    #[test]
    fn marginal_equivalence_t_zero_trivial() {
        let inst = instance_from_edges(GraphFamily::MaxCut, 2, vec![(0, 1)], "e".into(), None)
            .unwrap();
        let ctx = ctx_for(inst);
        let denoiser = ConstantDenoiser::toward_assignment(&[0, 1], 2);
        let sched = MaskSchedule::constant(0.5, 0).unwrap();
        let tv = marginal_equivalence_check(&denoiser, &ctx, 0, 100, &sched, 5).unwrap();
        assert_eq!(tv, 0.0);
    }

    #[test]
    fn marginal_equivalence_refuses_large() {
        let inst = gen_graph_instance(GraphFamily::Coloring(4), 12, 0.3, 1).unwrap();
        let ctx = ctx_for(inst);
        let denoiser = EchoDenoiser;
        let sched = MaskSchedule::constant(0.5, 2).unwrap();
        assert!(matches!(
            marginal_equivalence_check(&denoiser, &ctx, 2, 10, &sched, 0),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn trajectory_csv_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let inst = gen_graph_instance(GraphFamily::Mis, 4, 0.5, 2).unwrap();
        let ctx = ctx_for(inst);
        let config = ChainConfig { t_steps: 3, seed: 1, record_logits: true, ..Default::default() };
        let traj = sample_chain(&EchoDenoiser, &ctx, &config).unwrap();
        let lpath = dir.path().join("logits.csv");
        let dpath = dir.path().join("decoded.csv");
        write_logits_csv(&traj, &lpath).unwrap();
        write_decoded_csv(&traj, &dpath).unwrap();
        let logits = std::fs::read_to_string(&lpath).unwrap();
        assert!(logits.starts_with("t,var,k,logit\n"));
        assert_eq!(logits.lines().count(), 1 + 4 * 4 * 2);
        let decoded = std::fs::read_to_string(&dpath).unwrap();
        assert!(decoded.starts_with("t,var,decoded_value\n"));
        assert_eq!(decoded.lines().count(), 1 + 4 * 4);
    }
}

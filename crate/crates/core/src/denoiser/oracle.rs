//! Exact blocked-Gibbs oracle denoiser.
//!
//! Given a masked block, the oracle enumerates every assignment of the block
//! holding the decoded unmasked variables fixed, samples one from the
//! conditional Boltzmann distribution at temperature `tau`, and proposes the
//! saturated one-hot logits of the sampled values with floor-clamped
//! log-variance (near-deterministic). Used to verify that the chain targets
//! the Boltzmann distribution (Gibbs fixed point) and as a learning-free
//! reference sampler.

use rand::Rng;
use rand::RngCore;

use crate::chain::{ReverseStepOutput, LOG_VAR_FLOOR};
use crate::denoiser::{Denoiser, DenoiserInput};
use crate::energy::energy_discrete;
use crate::error::{Error, Result};
use crate::state::{clamp_pattern, decode_assignment};

/// Enumeration bound: `|block| * log2(K) <= 16`.
const MAX_BLOCK_BITS: f64 = 16.0;

#[derive(Clone, Debug)]
pub struct GibbsOracleDenoiser {
    pub tau: f64,
}

impl GibbsOracleDenoiser {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("oracle temperature {tau} must be positive")));
        }
        Ok(Self { tau })
    }
}

impl Denoiser for GibbsOracleDenoiser {
    fn predict(&self, input: &DenoiserInput<'_>, rng: &mut dyn RngCore) -> Result<ReverseStepOutput> {
        input.check_shapes()?;
        let instance = &input.ctx.instance;
        let k = instance.domain_size;
        let block: Vec<usize> = (0..instance.n_vars)
            .filter(|&i| input.mask.bits[i] && !instance.givens.contains_key(&i))
            .collect();
        let bits = block.len() as f64 * (k as f64).log2();
        if bits > MAX_BLOCK_BITS {
            return Err(Error::Refused(format!(
                "masked block of {:.1} bits exceeds the {MAX_BLOCK_BITS}-bit oracle bound",
                bits
            )));
        }

        let mut assignment = decode_assignment(input.z)?;
        for (&i, &v) in &instance.givens {
            assignment[i] = v;
        }

        let mut mu: Vec<f64> = input.z.z.clone();
        let log_var = vec![LOG_VAR_FLOOR; mu.len()];
        if block.is_empty() {
            // The chain copies everything; the output is ignored.
            return Ok(ReverseStepOutput { n: input.z.n, k, mu, log_var });
        }

        // Conditional Boltzmann over the block, unmasked variables held fixed.
        let combos = k.pow(block.len() as u32);
        let mut energies = Vec::with_capacity(combos);
        let mut min_h = f64::INFINITY;
        for combo in 0..combos {
            let mut c = combo;
            for &i in &block {
                assignment[i] = c % k;
                c /= k;
            }
            let h = energy_discrete(&assignment, instance)?.total;
            min_h = min_h.min(h);
            energies.push(h);
        }
        let weights: Vec<f64> =
            energies.iter().map(|h| (-(h - min_h) / self.tau).exp()).collect();
        let z_norm: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * z_norm;
        let mut chosen = combos - 1;
        for (idx, w) in weights.iter().enumerate() {
            if u < *w {
                chosen = idx;
                break;
            }
            u -= w;
        }

        let mut c = chosen;
        for &i in &block {
            let v = c % k;
            c /= k;
            mu[i * k..(i + 1) * k].copy_from_slice(&clamp_pattern(k, v));
        }
        Ok(ReverseStepOutput { n: input.z.n, k, mu, log_var })
    }
}

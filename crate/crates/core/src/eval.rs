//! Evaluation harness: runs N parallel reverse chains per instance under a
//! steps or wall-clock budget and aggregates solved rates, objectives, and
//! gaps to reference values.
//!
//! Determinism: every chain derives its seed from
//! `(config.seed, instance index, run index)`, records are emitted in
//! `(instance, run)` order, and `records.csv` contains no wall-clock fields,
//! so a fixed seed reproduces it byte-identically. Wall-clock measurements
//! live only in the JSON report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::chain::{reverse_step, ChainConfig};
use crate::denoiser::{Denoiser, InstanceContext};
use crate::energy::{energy_discrete, is_feasible, objective_discrete};
use crate::error::{Error, Result};
use crate::mask::{sample_mask, MaskInputs, MaskSchedule};
use crate::problem::ProblemInstance;
use crate::state::{argmax_assign, init_base, softmax_decode};

/// Exactly one budget kind is active per run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    /// Run exactly this many reverse steps.
    Steps(usize),
    /// Stop within this wall-clock budget plus at most one step.
    Seconds(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub budget: Budget,
    /// Independent chains per instance (best-of-N).
    pub runs: usize,
    /// Chain template; `t_steps` doubles as the schedule horizon under a
    /// wall-clock budget (steps past the horizon hold the final rate).
    pub chain: ChainConfig,
    pub seed: u64,
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("need at least one run per instance".into()));
        }
        if let Budget::Seconds(s) = self.budget {
            if !(s > 0.0) {
                return Err(Error::Config("wall-clock budget must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One chain's outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub run: usize,
    /// Some state in the trajectory satisfied every hard constraint.
    pub solved: bool,
    /// Lowest discrete energy over feasible visited states (over all states
    /// when the instance has no hard constraints); infinity if never
    /// feasible.
    pub best_energy: f64,
    /// Discrete objective at the best state (0 for pure CSPs).
    pub best_objective: f64,
    /// `|best_energy - reference|` when a reference value was supplied.
    pub gap: Option<f64>,
    pub steps_used: usize,
    /// Wall-clock seconds (reported in JSON only, never in records.csv).
    pub seconds: f64,
}

/// Per-instance best-of-N summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceBest {
    pub instance_id: String,
    pub solved: bool,
    pub best_energy: f64,
    pub best_objective: f64,
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub runs: usize,
    pub budget: Budget,
    pub records: Vec<InstanceRecord>,
    /// Best-of-N per instance, in instance order.
    pub best_of_n: Vec<InstanceBest>,
    /// Fraction of instances solved by at least one run.
    pub solved_frac: f64,
    /// Mean over instances of the best-of-N energy (solved instances only
    /// for constrained problems; NaN if none).
    pub mean_best_energy: f64,
    /// Mean over instances of the best-of-N objective.
    pub mean_best_objective: f64,
    /// Mean over instances of the best-of-N gap, when references exist.
    pub mean_gap: Option<f64>,
}

struct RunOutcome {
    solved: bool,
    best_energy: f64,
    best_objective: f64,
    steps_used: usize,
    seconds: f64,
}

/// Runs one chain under the budget, tracking the best feasible state.
fn run_one(
    denoiser: &dyn Denoiser,
    ctx: &InstanceContext,
    config: &EvalConfig,
    seed: u64,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let instance = &ctx.instance;
    let chain = &config.chain;
    let horizon = chain.t_steps.max(1);
    let sched = MaskSchedule::new(chain.schedule, chain.rho_min, chain.rho_max, horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = init_base(instance, chain.base_s, &mut rng)?;

    let unconstrained = instance.constraints.is_empty();
    let mut best_energy = f64::INFINITY;
    let mut best_objective = f64::NAN;
    let mut solved = false;
    let mut consider = |assignment: &[usize]| -> Result<()> {
        let feasible = is_feasible(assignment, instance);
        solved |= feasible;
        if feasible || unconstrained {
            let e = energy_discrete(assignment, instance)?.total;
            if e < best_energy {
                best_energy = e;
                best_objective = objective_discrete(assignment, instance);
            }
        }
        Ok(())
    };

    let mut decoded = argmax_assign(&softmax_decode(&z)?);
    consider(&decoded)?;

    let max_steps = match config.budget {
        Budget::Steps(n) => n,
        Budget::Seconds(_) => usize::MAX,
    };
    let mut steps_used = 0;
    while steps_used < max_steps {
        if let Budget::Seconds(limit) = config.budget {
            if start.elapsed().as_secs_f64() >= limit {
                break;
            }
        }
        // Anneal over the horizon, then hold the final (smallest-block) rate.
        let t = horizon.saturating_sub(steps_used).max(1);
        let inputs = MaskInputs {
            z: &z,
            decoded: &decoded,
            instance,
            scopes: &ctx.scopes,
            deg_c: &ctx.graph.deg_c,
        };
        let mask = sample_mask(&chain.policy, &sched, t, &inputs, &mut rng)?;
        let (z_next, _) = reverse_step(denoiser, &z, &mask, t, ctx, &mut rng)?;
        z = z_next;
        decoded = argmax_assign(&softmax_decode(&z)?);
        consider(&decoded)?;
        steps_used += 1;
    }

    Ok(RunOutcome {
        solved,
        best_energy,
        best_objective,
        steps_used,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Evaluates a denoiser over an instance set: `runs` independent chains per
/// instance, executed in parallel, aggregated into a [`MetricsReport`].
pub fn evaluate(
    denoiser: &dyn Denoiser,
    instances: &[Arc<ProblemInstance>],
    config: &EvalConfig,
    reference: Option<&BTreeMap<String, f64>>,
) -> Result<MetricsReport> {
    config.validate()?;
    if instances.is_empty() {
        return Err(Error::Config("no instances to evaluate".into()));
    }
    let contexts: Vec<InstanceContext> =
        instances.iter().map(|inst| InstanceContext::new(Arc::clone(inst))).collect();

    let jobs: Vec<(usize, usize)> = (0..instances.len())
        .flat_map(|i| (0..config.runs).map(move |r| (i, r)))
        .collect();
    let mut outcomes: Vec<((usize, usize), RunOutcome)> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let seed = crate::eval::derive_seed(config.seed, i, r);
            run_one(denoiser, &contexts[i], config, seed).map(|o| ((i, r), o))
        })
        .collect::<Result<_>>()?;
    outcomes.sort_by_key(|(key, _)| *key);

    let mut records = Vec::with_capacity(outcomes.len());
    for ((i, r), o) in outcomes {
        let id = instances[i].id.clone();
        let gap = reference.and_then(|m| m.get(&id)).map(|&ref_v| {
            if o.best_energy.is_finite() {
                (o.best_energy - ref_v).abs()
            } else {
                f64::INFINITY
            }
        });
        records.push(InstanceRecord {
            instance_id: id,
            run: r,
            solved: o.solved,
            best_energy: o.best_energy,
            best_objective: o.best_objective,
            gap,
            steps_used: o.steps_used,
            seconds: o.seconds,
        });
    }

    if reference.is_some() {
        for inst in instances {
            if !reference.unwrap().contains_key(&inst.id) {
                return Err(Error::Config(format!(
                    "reference file has no entry for instance {:?}",
                    inst.id
                )));
            }
        }
    }

    let best_of_n: Vec<InstanceBest> = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let runs = &records[i * config.runs..(i + 1) * config.runs];
            let solved = runs.iter().any(|r| r.solved);
            let best = runs
                .iter()
                .min_by(|a, b| a.best_energy.partial_cmp(&b.best_energy).unwrap())
                .expect("at least one run");
            InstanceBest {
                instance_id: inst.id.clone(),
                solved,
                best_energy: best.best_energy,
                best_objective: best.best_objective,
                gap: best.gap,
            }
        })
        .collect();

    let n = best_of_n.len() as f64;
    let solved_frac = best_of_n.iter().filter(|b| b.solved).count() as f64 / n;
    let finite: Vec<&InstanceBest> =
        best_of_n.iter().filter(|b| b.best_energy.is_finite()).collect();
    let mean_best_energy = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().map(|b| b.best_energy).sum::<f64>() / finite.len() as f64
    };
    let mean_best_objective = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().map(|b| b.best_objective).sum::<f64>() / finite.len() as f64
    };
    let mean_gap = reference.map(|_| {
        let gaps: Vec<f64> = best_of_n.iter().filter_map(|b| b.gap).collect();
        gaps.iter().sum::<f64>() / gaps.len().max(1) as f64
    });

    Ok(MetricsReport {
        seed: config.seed,
        runs: config.runs,
        budget: config.budget,
        records,
        best_of_n,
        solved_frac,
        mean_best_energy,
        mean_best_objective,
        mean_gap,
    })
}

/// Stable per-(instance, run) seed derivation.
pub fn derive_seed(seed: u64, instance_idx: usize, run_idx: usize) -> u64 {
    let mut z = seed
        ^ (instance_idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (run_idx as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Writes the deterministic per-run records table (no wall-clock columns).
pub fn write_records_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "instance_id,run,solved,best_energy,best_objective,gap,steps_used")?;
    for r in &report.records {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.instance_id,
            r.run,
            r.solved,
            r.best_energy,
            r.best_objective,
            fmt_opt(r.gap),
            r.steps_used
        )?;
    }
    Ok(())
}

/// Writes the full JSON report (includes wall-clock timing).
pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Loads a `{instance_id: reference_energy}` JSON map.
pub fn load_reference(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

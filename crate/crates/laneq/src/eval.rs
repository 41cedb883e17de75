//! Greedy policy evaluation across a traffic-density sweep.
//!
//! Every policy in a sweep sees the same simulator seeds per (inflow,
//! episode) pair, so comparisons are paired. Episodes run to the training
//! horizon or end early on a collision; episodes whose observation
//! overflows the slot capacity are dropped from statistics rather than
//! scored partially.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{random_commands, rule_based_commands};
use crate::config::RunConfig;
use crate::io::Checkpoint;
use crate::model::{select_actions, GcqModel};
use crate::obs::build_observation;
use crate::sim::Sim;
use crate::trainer::POLICY_RNG_STREAM;
use crate::{Error, Real, Result};

/// Stream tag for the shared per-episode simulator seed table.
pub const EVAL_SEED_STREAM: u64 = 14;

/// HDV inflow grid used when the caller does not pass one.
pub const DEFAULT_INFLOWS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// A policy under evaluation. The network acts greedily (no exploration).
#[derive(Debug)]
pub enum Policy {
    Gcq(GcqModel<Real>),
    RuleBased,
    Random,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Gcq(_) => "gcq",
            Policy::RuleBased => "rule_based",
            Policy::Random => "random",
        }
    }
}

/// Tallies for a single episode.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeOutcome {
    pub reward: f64,
    pub steps: u64,
    pub collision_pairs: u64,
    pub merges_ok: u64,
    pub merges_failed: u64,
    /// False when the episode was cut by a capacity overflow; such
    /// episodes carry no score.
    pub completed: bool,
}

/// One episode under the given policy. Collisions are terminal, matching
/// the training regime; the horizon is `cfg.schedule.episode_horizon`.
pub fn run_episode(policy: &Policy, cfg: &RunConfig, env_seed: u64) -> Result<EpisodeOutcome> {
    let obs_params = cfg.to_obs_params();
    let mut sim = Sim::new(cfg.to_sim_params(), env_seed);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(env_seed);
    policy_rng.set_stream(POLICY_RNG_STREAM);

    let mut reward = 0.0;
    let mut steps = 0;
    let mut completed = true;
    for _ in 0..cfg.schedule.episode_horizon {
        let commands = match policy {
            Policy::Gcq(model) => match build_observation(&sim, &obs_params) {
                Ok(obs) => {
                    let q = model.forward(&obs.anorm, &obs.feat, &obs.mask)?;
                    select_actions(&q, &obs.mask, &obs.ids, 0.0, &mut policy_rng)
                }
                Err(Error::Capacity { .. }) => {
                    completed = false;
                    break;
                }
                Err(e) => return Err(e),
            },
            Policy::RuleBased => rule_based_commands(&sim),
            Policy::Random => random_commands(&sim, &mut policy_rng),
        };
        let events = sim.step(&commands);
        reward += crate::reward::total_reward(&sim, &events, &cfg.reward).total;
        steps += 1;
        if !events.collisions.is_empty() {
            break;
        }
    }
    let c = sim.counters();
    Ok(EpisodeOutcome {
        reward,
        steps,
        collision_pairs: c.collision_pairs,
        merges_ok: c.merged_ok,
        merges_failed: c.merged_fail,
        completed,
    })
}

/// Aggregates for one (policy, inflow) pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalCell {
    pub policy: String,
    pub hdv_inflow: f64,
    /// Completed episode count; aborted ones are excluded everywhere.
    pub episodes: u64,
    pub aborted: u64,
    pub reward_mean: f64,
    pub reward_median: f64,
    pub reward_std: f64,
    /// Colliding pairs per completed episode.
    pub collision_rate: f64,
    /// Successful merges over attempted ramp exits; 0 when none ended.
    pub merge_success_rate: f64,
    /// Per-episode rewards of the completed episodes, in seed order.
    pub rewards: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub scenario_digest: String,
    pub inflows: Vec<f64>,
    pub episodes_per_cell: u64,
    pub cells: Vec<EvalCell>,
}

/// Refuses to pair a checkpoint with a config describing a different
/// environment. Inflows are not part of the scenario, so density sweeps
/// pass; geometry, observation, reward or fusion changes do not.
pub fn check_scenario(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    let requested = cfg.scenario_digest();
    if ckpt.scenario_digest != requested {
        return Err(Error::DigestMismatch {
            checkpoint: ckpt.scenario_digest.clone(),
            requested,
        });
    }
    Ok(())
}

/// Runs every policy over every inflow with shared seeds.
pub fn evaluate(
    cfg: &RunConfig,
    policies: &[(String, Policy)],
    inflows: &[f64],
    episodes: usize,
) -> Result<EvalReport> {
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    seeder.set_stream(EVAL_SEED_STREAM);
    let seeds: Vec<Vec<u64>> = inflows
        .iter()
        .map(|_| (0..episodes).map(|_| seeder.gen()).collect())
        .collect();

    let mut cells = Vec::new();
    for (name, policy) in policies {
        for (inflow_idx, &inflow) in inflows.iter().enumerate() {
            let mut cell_cfg = cfg.clone();
            cell_cfg.flows.hdv = inflow;
            cell_cfg.validate()?;

            let mut rewards = Vec::new();
            let mut aborted = 0u64;
            let mut pairs = 0u64;
            let mut ok = 0u64;
            let mut failed = 0u64;
            for &env_seed in &seeds[inflow_idx] {
                let out = run_episode(policy, &cell_cfg, env_seed)?;
                if !out.completed {
                    aborted += 1;
                    continue;
                }
                rewards.push(out.reward);
                pairs += out.collision_pairs;
                ok += out.merges_ok;
                failed += out.merges_failed;
            }
            let n = rewards.len() as u64;
            cells.push(EvalCell {
                policy: name.clone(),
                hdv_inflow: inflow,
                episodes: n,
                aborted,
                reward_mean: mean(&rewards),
                reward_median: median(&rewards),
                reward_std: sample_std(&rewards),
                collision_rate: if n == 0 { 0.0 } else { pairs as f64 / n as f64 },
                merge_success_rate: if ok + failed == 0 {
                    0.0
                } else {
                    ok as f64 / (ok + failed) as f64
                },
                rewards,
            });
        }
    }
    Ok(EvalReport {
        config_digest: cfg.config_digest(),
        scenario_digest: cfg.scenario_digest(),
        inflows: inflows.to_vec(),
        episodes_per_cell: episodes as u64,
        cells,
    })
}

pub fn write_csv(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "policy,hdv_inflow,episodes,aborted,reward_mean,reward_median,reward_std,collision_rate,merge_success_rate"
    )?;
    for c in &report.cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            c.policy,
            c.hdv_inflow,
            c.episodes,
            c.aborted,
            c.reward_mean,
            c.reward_median,
            c.reward_std,
            c.collision_rate,
            c.merge_success_rate
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut out, report)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("rewards are finite"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two
/// points.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt()
}

/// Counts of arrangements per U value for group sizes `n` and `m`: the
/// coefficients of the Gaussian binomial `[n+m choose n]_q`, built by
/// multiplying `(1 - q^(n+k))` and exactly dividing by `(1 - q^k)` for
/// `k = 1..=m`. All coefficients are nonnegative integers well inside
/// f64's exact range for the group sizes used here.
fn u_distribution(n: usize, m: usize) -> Vec<f64> {
    let mut coeff = vec![1.0f64];
    for k in 1..=m {
        let mut num = vec![0.0; coeff.len() + n + k];
        for (i, &c) in coeff.iter().enumerate() {
            num[i] += c;
            num[i + n + k] -= c;
        }
        let mut out = vec![0.0; num.len() - k];
        for i in 0..out.len() {
            let prev = if i >= k { out[i - k] } else { 0.0 };
            out[i] = num[i] + prev;
        }
        coeff = out;
    }
    coeff.truncate(n * m + 1);
    coeff
}

/// Exact one-sided Mann-Whitney p-value for "`a` tends to exceed `b`".
/// The observed U counts ties as one half; the p-value sums the exact null
/// distribution over all integer U at or above the observation. Empty
/// samples give 1.
pub fn mann_whitney_greater(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 1.0;
    }
    let mut u = 0.0;
    for &x in a {
        for &y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    let dist = u_distribution(a.len(), b.len());
    let total: f64 = dist.iter().sum();
    let p: f64 = dist
        .iter()
        .enumerate()
        .filter(|&(i, _)| i as f64 >= u - 1e-9)
        .map(|(_, &c)| c)
        .sum::<f64>()
        / total;
    p
}

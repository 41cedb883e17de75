//! Deep Q-learning over the shared multi-agent network.
//!
//! One network drives every CAV: each controlled slot contributes its taken
//! action's Q entry to a masked regression against per-slot TD targets. The
//! shared scalar reward is bootstrapped per agent by re-finding the agent's
//! slot in the next observation; agents that exited the road take the bare
//! reward, as does everyone when a collision ends the episode. Horizon cuts
//! are not terminal and keep their bootstrap.
//!
//! Randomness is split into fixed streams of one seed: weight init,
//! behaviour policy, replay sampling and per-episode simulator seeds, so a
//! run is reproducible end to end from the config alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baseline::random_commands;
use crate::config::RunConfig;
use crate::io::{Checkpoint, EpisodeRecord, MetricsHeader, MetricsWriter};
use crate::model::{greedy_action, select_actions, GcqGrads, GcqModel};
use crate::nn::{adam_step, soft_update, AdamState, Matrix};
use crate::obs::{build_observation, Observation, FEATURE_DIM};
use crate::replay::{ReplayBuffer, StoredObs, Transition};
use crate::reward::{total_reward, RewardBreakdown};
use crate::sim::{Action, Sim, VehicleId};
use crate::{Error, Mat, Real, Result};

/// Stream tag for weight initialization draws.
pub const INIT_RNG_STREAM: u64 = 10;
/// Stream tag for behaviour-policy draws (warm-up and epsilon).
pub const POLICY_RNG_STREAM: u64 = 11;
/// Stream tag for the per-episode simulator seed sequence.
pub const EPISODE_SEED_STREAM: u64 = 13;

/// `r + gamma * max_next`, or the bare reward when nothing is bootstrapped.
pub(crate) fn td_target(reward: f64, gamma: f64, max_next: Option<f64>) -> f64 {
    match max_next {
        Some(m) => reward + gamma * m,
        None => reward,
    }
}

/// Per-slot regression targets and the selection mask for one transition,
/// both sized `n_real x 3` over the transition's stored observation.
///
/// A slot bootstraps from the target network's best Q at the id-matched
/// slot of the next observation; with `double_q` the action is picked by
/// the online network and evaluated by the target one. `env_step` only
/// labels errors.
pub fn transition_targets(
    t: &Transition,
    online: &GcqModel<Real>,
    target_net: &GcqModel<Real>,
    gamma: f64,
    double_q: bool,
    env_step: u64,
) -> Result<(Mat, Mat)> {
    let n = t.obs.n_real();
    let mut target = Mat::zeros(n, Action::COUNT);
    let mut sel = Mat::zeros(n, Action::COUNT);

    let needs_next = !t.done && t.next_alive.iter().any(|&alive| alive);
    let (next_obs, q_next_target, q_next_online) = if needs_next {
        let next = t.next.expand_trimmed();
        let qt = target_net.forward(&next.anorm, &next.feat, &next.mask)?;
        let qo = if double_q {
            Some(online.forward(&next.anorm, &next.feat, &next.mask)?)
        } else {
            None
        };
        (Some(next), Some(qt), qo)
    } else {
        (None, None, None)
    };

    for slot in 0..n {
        let Some(action) = t.actions[slot] else {
            continue;
        };
        let y = if t.done || !t.next_alive[slot] {
            td_target(t.reward, gamma, None)
        } else {
            let id = t.obs.ids[slot];
            let next = next_obs.as_ref().expect("expanded when any slot is alive");
            let j = next.slot_of(id).ok_or_else(|| Error::Training {
                step: env_step,
                reason: format!(
                    "vehicle {id} is marked alive but has no slot in the next observation"
                ),
            })?;
            let qt = q_next_target.as_ref().expect("computed when any slot is alive");
            let best = match &q_next_online {
                Some(qo) => qt.get(j, greedy_action(qo.row(j)).index()),
                None => qt.row(j).iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            td_target(t.reward, gamma, Some(best))
        };
        sel.set(slot, action.index(), 1.0);
        target.set(slot, action.index(), y);
    }
    Ok((target, sel))
}

/// Squared-error terms for one transition under a batch-wide denominator.
/// Entries outside the selection contribute nothing to either output, no
/// matter what `target` holds there.
pub(crate) fn selected_loss_terms(pred: &Mat, target: &Mat, sel: &Mat, denom: f64) -> (f64, Mat) {
    let mut loss = 0.0;
    let mut grad = Mat::zeros(pred.rows(), pred.cols());
    for i in 0..pred.rows() {
        for j in 0..pred.cols() {
            if sel.get(i, j) == 0.0 {
                continue;
            }
            let d = pred.get(i, j) - target.get(i, j);
            loss += d * d / denom;
            grad.set(i, j, 2.0 * d / denom);
        }
    }
    (loss, grad)
}

/// Online/target networks, optimizer and replay, stepped from outside.
pub struct Dqn {
    pub online: GcqModel<Real>,
    pub target: GcqModel<Real>,
    pub buffer: ReplayBuffer,
    adam: AdamState<Real>,
    batch_size: usize,
    gamma: f64,
    lr: Real,
    tau: Real,
    double_q: bool,
    hard_target_every: u64,
    warned_short_buffer: bool,
}

impl Dqn {
    pub fn new(cfg: &RunConfig) -> Self {
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_rng.set_stream(INIT_RNG_STREAM);
        let online: GcqModel<Real> = GcqModel::init(FEATURE_DIM, &mut init_rng);
        let shapes: Vec<&Matrix<Real>> = online.params().into_iter().map(|(_, m)| m).collect();
        let adam = AdamState::new(&shapes);
        let s = &cfg.schedule;
        Self {
            target: online.clone(),
            online,
            buffer: ReplayBuffer::new(s.replay_capacity, cfg.seed),
            adam,
            batch_size: s.batch_size,
            gamma: s.gamma,
            lr: s.lr,
            tau: s.tau,
            double_q: cfg.ablation.double_q,
            hard_target_every: cfg.ablation.hard_target_every,
            warned_short_buffer: false,
        }
    }

    /// Gradient steps taken so far.
    pub fn train_steps(&self) -> u64 {
        self.adam.step_count()
    }

    /// One sampled minibatch update; `None` when the buffer is still
    /// shorter than a batch. The loss is the selection-masked MSE over the
    /// whole batch, normalized by the number of selected entries.
    pub fn train_step(&mut self, env_step: u64) -> Result<Option<f64>> {
        if self.buffer.len() < self.batch_size {
            if !self.warned_short_buffer {
                log::warn!(
                    "skipping optimization at step {env_step}: replay holds {} transitions, batch needs {}",
                    self.buffer.len(),
                    self.batch_size
                );
                self.warned_short_buffer = true;
            }
            return Ok(None);
        }

        let sampled = self.buffer.sample(self.batch_size);
        let mut staged = Vec::with_capacity(sampled.len());
        let mut selected = 0.0;
        for t in &sampled {
            let (target_mat, sel) =
                transition_targets(t, &self.online, &self.target, self.gamma, self.double_q, env_step)?;
            let obs_t = t.obs.expand_trimmed();
            let (pred, cache) = self.online.forward_cached(&obs_t.anorm, &obs_t.feat, &obs_t.mask)?;
            selected += sel.data().iter().sum::<f64>();
            staged.push((pred, cache, target_mat, sel));
        }

        let denom = selected.max(1.0);
        let mut loss = 0.0;
        let mut grads = GcqGrads::zeros_like(&self.online);
        for (pred, cache, target_mat, sel) in &staged {
            let (l, grad_q) = selected_loss_terms(pred, target_mat, sel, denom);
            loss += l;
            grads.add_assign(&self.online.backward(cache, &grad_q));
        }
        if !loss.is_finite() {
            return Err(Error::Training {
                step: env_step,
                reason: format!("non-finite loss {loss}"),
            });
        }

        {
            let mut params = self.online.params_mut();
            adam_step(&mut params, &grads.as_pairs(), &mut self.adam, self.lr)?;
        }

        if self.hard_target_every > 0 {
            if self.adam.step_count() % self.hard_target_every == 0 {
                for ((_, src), (_, dst)) in
                    self.online.params().into_iter().zip(self.target.params_mut())
                {
                    *dst = src.clone();
                }
            }
        } else {
            let mut tp: Vec<&mut Matrix<Real>> =
                self.target.params_mut().into_iter().map(|(_, m)| m).collect();
            let op: Vec<&Matrix<Real>> = self.online.params().into_iter().map(|(_, m)| m).collect();
            soft_update(&mut tp, &op, self.tau);
        }
        Ok(Some(loss))
    }
}

/// Builds the stored transition for one step, or `None` when no slot was
/// controlled (nothing to regress).
pub fn make_transition(
    obs: &Observation,
    commands: &BTreeMap<VehicleId, Action>,
    reward: f64,
    next: &Observation,
    done: bool,
) -> Option<Transition> {
    let n = obs.n_real();
    let mut actions: Vec<Option<Action>> = vec![None; n];
    let mut next_alive = vec![false; n];
    let mut any = false;
    for slot in 0..n {
        if !obs.mask[slot] {
            continue;
        }
        let id = obs.ids[slot];
        let a = *commands.get(&id).expect("every controlled slot is commanded");
        actions[slot] = Some(a);
        next_alive[slot] = next.slot_of(id).is_some();
        any = true;
    }
    if !any {
        return None;
    }
    Some(Transition {
        obs: StoredObs::from_observation(obs),
        actions,
        reward,
        next: StoredObs::from_observation(next),
        next_alive,
        done,
    })
}

#[derive(Default)]
struct EpisodeAccum {
    steps: u64,
    reward_total: f64,
    reward_intention: f64,
    reward_speed: f64,
    penalty_collision: f64,
    penalty_lane_change: f64,
    aborted: bool,
}

impl EpisodeAccum {
    fn add(&mut self, b: &RewardBreakdown) {
        self.steps += 1;
        self.reward_total += b.total;
        self.reward_intention += b.r_intention;
        self.reward_speed += b.r_speed;
        self.penalty_collision += b.p_collision;
        self.penalty_lane_change += b.p_lane_change;
    }
}

pub struct TrainSummary {
    pub episodes: u64,
    pub env_steps: u64,
    pub train_steps: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// Full training run: episodes against the simulator, replay, optimization
/// and artifacts (metrics log, periodic and final checkpoints).
pub fn run_training(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let sim_params = cfg.to_sim_params();
    let obs_params = cfg.to_obs_params();
    let s = cfg.schedule;

    let mut dqn = Dqn::new(cfg);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    policy_rng.set_stream(POLICY_RNG_STREAM);
    let mut episode_seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    episode_seeder.set_stream(EPISODE_SEED_STREAM);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = MetricsWriter::create(
        &metrics_path,
        &MetricsHeader {
            config_digest: cfg.config_digest(),
            scenario_digest: cfg.scenario_digest(),
            preset: cfg.preset.clone(),
            seed: cfg.seed,
        },
    )?;
    let ckpt_dir = out_dir.join("checkpoints");

    let mut env_step: u64 = 0;
    let mut episode: u64 = 0;
    while env_step < s.total_steps {
        let episode_seed = episode_seeder.gen::<u64>();
        let started = Instant::now();
        let mut sim = Sim::new(sim_params.clone(), episode_seed);
        let mut obs = build_observation(&sim, &obs_params)?;
        let mut acc = EpisodeAccum::default();
        let mut losses: Vec<f64> = Vec::new();

        for _ in 0..s.episode_horizon {
            if env_step >= s.total_steps {
                break;
            }
            let commands = if env_step < s.warmup_steps {
                random_commands(&sim, &mut policy_rng)
            } else {
                let q = dqn
                    .online
                    .forward(&obs.anorm, &obs.feat, &obs.mask)
                    .map_err(|e| Error::Training {
                        step: env_step,
                        reason: format!("episode seed {episode_seed}: {e}"),
                    })?;
                select_actions(&q, &obs.mask, &obs.ids, s.epsilon, &mut policy_rng)
            };

            let events = sim.step(&commands);
            let breakdown = total_reward(&sim, &events, &cfg.reward);
            acc.add(&breakdown);
            env_step += 1;
            let done = !events.collisions.is_empty();

            match build_observation(&sim, &obs_params) {
                Ok(next_obs) => {
                    if let Some(t) = make_transition(&obs, &commands, breakdown.total, &next_obs, done)
                    {
                        dqn.buffer.push(t);
                    }
                    obs = next_obs;
                }
                Err(Error::Capacity { n_real, n_max }) => {
                    log::warn!(
                        "episode {episode} (seed {episode_seed}) aborted at env step {env_step}: \
                         {n_real} visible vehicles exceed the {n_max}-slot capacity"
                    );
                    acc.aborted = true;
                }
                Err(e) => return Err(e),
            }

            if env_step > s.warmup_steps && env_step % s.train_every == 0 {
                if let Some(loss) = dqn.train_step(env_step)? {
                    losses.push(loss);
                }
            }
            if s.checkpoint_every > 0 && env_step % s.checkpoint_every == 0 {
                let path = ckpt_dir.join(format!("step_{env_step:07}.ckpt"));
                Checkpoint::from_model(&dqn.online, cfg, dqn.train_steps()).save(&path)?;
            }
            if done || acc.aborted {
                break;
            }
        }

        let c = sim.counters();
        let mean_loss = if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        };
        metrics.write(&EpisodeRecord {
            episode,
            steps: acc.steps,
            reward_total: acc.reward_total,
            reward_intention: acc.reward_intention,
            reward_speed: acc.reward_speed,
            penalty_collision: acc.penalty_collision,
            penalty_lane_change: acc.penalty_lane_change,
            collisions: c.collision_pairs,
            merges_ok: c.merged_ok,
            merges_failed: c.merged_fail,
            mean_loss,
            epsilon: if env_step <= s.warmup_steps { 1.0 } else { s.epsilon },
            wallclock_s: started.elapsed().as_secs_f64(),
        })?;
        episode += 1;
    }

    let final_checkpoint = ckpt_dir.join("final.ckpt");
    Checkpoint::from_model(&dqn.online, cfg, dqn.train_steps()).save(&final_checkpoint)?;
    Ok(TrainSummary {
        episodes: episode,
        env_steps: env_step,
        train_steps: dqn.train_steps(),
        final_checkpoint,
        metrics_path,
    })
}

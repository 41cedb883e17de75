//! Run configuration: presets, TOML files, environment overrides, digests.
//!
//! A [`RunConfig`] is assembled in three layers, later layers winning:
//! preset defaults, then an optional TOML file, then `LANEQ_*` environment
//! variables (`LANEQ_ROAD__RAMP1=250` sets `road.ramp1`). Unknown keys are
//! rejected at every layer. The canonical text form is a sorted list of
//! flat `key = value` lines that is itself valid TOML and reloads to the
//! same configuration, so the SHA-256 digests below identify a run
//! independent of key order or file layout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::obs::ObsParams;
use crate::reward::RewardWeights;
use crate::sim::{Flows, IdmParams, RoadSpec, SimParams};
use crate::{Error, Result};

/// Environment variable prefix; `__` separates nested keys.
pub const ENV_PREFIX: &str = "LANEQ_";

/// Step sizes, vehicle geometry and per-class speed limits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub vehicle_length: f64,
    pub speed_limit_cav: f64,
    pub speed_limit_hdv: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: 0.5,
            vehicle_length: 5.0,
            speed_limit_cav: 14.0,
            speed_limit_hdv: 10.0,
        }
    }
}

/// Car-following parameters per vehicle class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmSection {
    pub cav: IdmParams,
    pub hdv: IdmParams,
}

/// Observation assembly knobs; normalizers come from the road and the CAV
/// speed limit, so they are not repeated here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsSection {
    pub n_max: usize,
    pub sensing_range: f64,
}

impl Default for ObsSection {
    fn default() -> Self {
        Self {
            n_max: 40,
            sensing_range: 30.0,
        }
    }
}

/// Training loop schedule and optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    /// Environment steps driven by uniform random CAV actions before any
    /// gradient step.
    pub warmup_steps: u64,
    /// Total environment steps including warm-up.
    pub total_steps: u64,
    pub batch_size: usize,
    /// Constant exploration rate after warm-up.
    pub epsilon: f64,
    pub gamma: f64,
    pub lr: f64,
    /// Polyak coefficient for the target network.
    pub tau: f64,
    /// Gradient step cadence in environment steps.
    pub train_every: u64,
    /// Episode length cap in steps; reaching it truncates without a
    /// terminal flag.
    pub episode_horizon: u64,
    pub replay_capacity: usize,
    /// Periodic checkpoint cadence in environment steps; 0 keeps only the
    /// final checkpoint.
    pub checkpoint_every: u64,
}

/// Model and update-rule variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    /// Drop every graph edge so nodes only convolve with themselves.
    pub no_fusion: bool,
    /// Pick the bootstrap action with the online network and evaluate it
    /// with the target network.
    pub double_q: bool,
    /// When nonzero, replace Polyak averaging with a full target copy
    /// every this many gradient steps.
    pub hard_target_every: u64,
}

/// Complete description of a training or evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub road: RoadSpec,
    pub flows: Flows,
    pub sim: SimSection,
    pub idm: IdmSection,
    pub obs: ObsSection,
    pub reward: RewardWeights,
    pub schedule: TrainSchedule,
    pub ablation: AblationFlags,
}

impl RunConfig {
    /// Defaults for the named preset: `desk` is a laptop-scale schedule,
    /// `paper` the full one. Everything except the schedule is shared.
    pub fn preset(name: &str) -> Result<Self> {
        let schedule = match name {
            "desk" => TrainSchedule {
                warmup_steps: 5_000,
                total_steps: 50_000,
                batch_size: 32,
                epsilon: 0.3,
                gamma: 0.99,
                lr: 1e-3,
                tau: 1e-2,
                train_every: 1,
                episode_horizon: 600,
                replay_capacity: 100_000,
                checkpoint_every: 10_000,
            },
            "paper" => TrainSchedule {
                warmup_steps: 200_000,
                total_steps: 800_000,
                batch_size: 32,
                epsilon: 0.3,
                gamma: 0.99,
                lr: 1e-3,
                tau: 1e-2,
                train_every: 1,
                episode_horizon: 600,
                replay_capacity: 100_000,
                checkpoint_every: 100_000,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}, expected \"desk\" or \"paper\""
                )))
            }
        };
        Ok(Self {
            preset: name.to_string(),
            seed: 0,
            road: RoadSpec::default(),
            flows: Flows::default(),
            sim: SimSection::default(),
            idm: IdmSection::default(),
            obs: ObsSection::default(),
            reward: RewardWeights::default(),
            schedule,
            ablation: AblationFlags::default(),
        })
    }

    pub fn to_sim_params(&self) -> SimParams {
        SimParams {
            road: self.road,
            dt: self.sim.dt,
            vehicle_length: self.sim.vehicle_length,
            speed_limit_cav: self.sim.speed_limit_cav,
            speed_limit_hdv: self.sim.speed_limit_hdv,
            idm_cav: self.idm.cav,
            idm_hdv: self.idm.hdv,
            flows: self.flows,
        }
    }

    pub fn to_obs_params(&self) -> ObsParams {
        ObsParams {
            n_max: self.obs.n_max,
            sensing_range: self.obs.sensing_range,
            speed_norm: self.sim.speed_limit_cav,
            pos_norm: self.road.corridor_length,
            no_fusion: self.ablation.no_fusion,
        }
    }

    /// Sorted flat `key = value` lines, one per leaf. Valid TOML; parsing
    /// it back yields an equal configuration.
    pub fn canonical_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config is always serializable");
        let mut lines = Vec::new();
        flatten_json("", &value, &mut lines);
        lines.sort();
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    /// Digest of the full canonical text; two runs with equal digests are
    /// byte-reproducible given equal code.
    pub fn config_digest(&self) -> String {
        sha256_hex(self.canonical_text().as_bytes())
    }

    /// Digest of the environment-defining subset: road, sim, IDM,
    /// observation and reward keys plus `ablation.no_fusion`. Inflow rates,
    /// seed and schedule are excluded so one checkpoint can be evaluated
    /// across a density sweep.
    pub fn scenario_digest(&self) -> String {
        let scenario: String = self
            .canonical_text()
            .lines()
            .filter(|l| {
                ["road.", "sim.", "idm.", "obs.", "reward."]
                    .iter()
                    .any(|p| l.starts_with(p))
                    || l.starts_with("ablation.no_fusion ")
            })
            .map(|l| format!("{l}\n"))
            .collect();
        sha256_hex(scenario.as_bytes())
    }

    /// Rejects configurations the simulator or trainer cannot honor.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let r = &self.road;
        if !(r.corridor_length > 0.0) {
            return fail(format!("road.corridor_length must be > 0, got {}", r.corridor_length));
        }
        if !(2..=3).contains(&r.lane_count) {
            return fail(format!("road.lane_count must be 2 or 3, got {}", r.lane_count));
        }
        if !(0.0 < r.ramp1 && r.ramp1 < r.ramp2 && r.ramp2 < r.corridor_length) {
            return fail(format!(
                "ramps must satisfy 0 < ramp1 < ramp2 < corridor_length, got {} / {} / {}",
                r.ramp1, r.ramp2, r.corridor_length
            ));
        }
        if !(r.merge_window > 0.0) {
            return fail(format!("road.merge_window must be > 0, got {}", r.merge_window));
        }
        if r.merge_window < self.sim.speed_limit_cav * self.sim.dt {
            return fail(format!(
                "road.merge_window {} is shorter than one CAV step {}; a merging \
                 vehicle could jump the exit window entirely",
                r.merge_window,
                self.sim.speed_limit_cav * self.sim.dt
            ));
        }
        if !(self.sim.dt > 0.0) {
            return fail(format!("sim.dt must be > 0, got {}", self.sim.dt));
        }
        if !(self.sim.vehicle_length > 0.0) {
            return fail(format!("sim.vehicle_length must be > 0, got {}", self.sim.vehicle_length));
        }
        if !(self.sim.speed_limit_cav > 0.0 && self.sim.speed_limit_hdv > 0.0) {
            return fail("speed limits must be > 0".to_string());
        }
        for (name, p) in [("idm.cav", &self.idm.cav), ("idm.hdv", &self.idm.hdv)] {
            if !(p.a_max > 0.0 && p.b_comfort > 0.0 && p.b_emergency > 0.0) {
                return fail(format!("{name}: accelerations must be > 0"));
            }
            if !(p.s0 > 0.0 && p.t_headway >= 0.0 && p.delta > 0.0) {
                return fail(format!("{name}: s0 and delta must be > 0, t_headway >= 0"));
            }
        }
        for (name, f) in [
            ("flows.hdv", self.flows.hdv),
            ("flows.cav_ramp1", self.flows.cav_ramp1),
            ("flows.cav_ramp2", self.flows.cav_ramp2),
        ] {
            if !(0.0..=f64::INFINITY).contains(&f) {
                return fail(format!("{name} must be >= 0, got {f}"));
            }
            if f * self.sim.dt > 1.0 {
                return fail(format!(
                    "{name} * sim.dt = {} exceeds 1; it is a per-step Bernoulli probability",
                    f * self.sim.dt
                ));
            }
        }
        if self.obs.n_max == 0 {
            return fail("obs.n_max must be >= 1".to_string());
        }
        if !(self.obs.sensing_range >= 0.0) {
            return fail(format!("obs.sensing_range must be >= 0, got {}", self.obs.sensing_range));
        }
        let w = &self.reward;
        for (name, v) in [
            ("reward.w1", w.w1),
            ("reward.w2", w.w2),
            ("reward.w3", w.w3),
            ("reward.w4", w.w4),
            ("reward.p_c_value", w.p_c_value),
            ("reward.p_lc_value", w.p_lc_value),
        ] {
            if !(v >= 0.0) {
                return fail(format!("{name} must be >= 0, got {v}"));
            }
        }
        let s = &self.schedule;
        if s.warmup_steps >= s.total_steps {
            return fail(format!(
                "schedule.warmup_steps {} must be < schedule.total_steps {}",
                s.warmup_steps, s.total_steps
            ));
        }
        if !(s.gamma > 0.0 && s.gamma < 1.0) {
            return fail(format!("schedule.gamma must lie in (0, 1), got {}", s.gamma));
        }
        if s.batch_size == 0 {
            return fail("schedule.batch_size must be >= 1".to_string());
        }
        if !(s.lr > 0.0) {
            return fail(format!("schedule.lr must be > 0, got {}", s.lr));
        }
        if !(s.tau > 0.0 && s.tau <= 1.0) {
            return fail(format!("schedule.tau must lie in (0, 1], got {}", s.tau));
        }
        if !(0.0..=1.0).contains(&s.epsilon) {
            return fail(format!("schedule.epsilon must lie in [0, 1], got {}", s.epsilon));
        }
        if s.train_every == 0 {
            return fail("schedule.train_every must be >= 1".to_string());
        }
        if s.episode_horizon == 0 {
            return fail("schedule.episode_horizon must be >= 1".to_string());
        }
        if s.replay_capacity < s.batch_size {
            return fail(format!(
                "schedule.replay_capacity {} must be >= schedule.batch_size {}",
                s.replay_capacity, s.batch_size
            ));
        }
        Ok(())
    }
}

/// Loads a config from an optional file plus the process environment.
/// Preset precedence: `preset_cli`, then `LANEQ_PRESET`, then the file's
/// `preset` key, then `desk`.
pub fn load_config(file: Option<&Path>, preset_cli: Option<&str>) -> Result<RunConfig> {
    let text = match file {
        Some(p) => Some(std::fs::read_to_string(p)?),
        None => None,
    };
    let env: BTreeMap<String, String> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    load_from_sources(text.as_deref(), preset_cli, &env)
}

/// Layer resolution over explicit sources; `env` holds raw variables
/// including the `LANEQ_` prefix.
pub fn load_from_sources(
    file_text: Option<&str>,
    preset_cli: Option<&str>,
    env: &BTreeMap<String, String>,
) -> Result<RunConfig> {
    let file_table: Option<toml::Table> = match file_text {
        Some(t) => Some(
            t.parse()
                .map_err(|e| Error::Config(format!("config file: {e}")))?,
        ),
        None => None,
    };

    let preset_env = env.get(&format!("{ENV_PREFIX}PRESET")).map(String::as_str);
    let preset_file: Option<String> = file_table
        .as_ref()
        .and_then(|t| t.get("preset"))
        .and_then(|v| v.as_str())
        .map(String::from);
    let preset = preset_cli
        .or(preset_env)
        .or(preset_file.as_deref())
        .unwrap_or("desk");

    let defaults = RunConfig::preset(preset)?;
    let mut merged = toml::Value::try_from(&defaults)
        .map_err(|e| Error::Config(format!("defaults serialize: {e}")))?;
    if let Some(t) = file_table {
        merge_toml(&mut merged, toml::Value::Table(t));
    }
    for (key, raw) in env {
        let path = env_key_path(key);
        if path.is_empty() {
            continue;
        }
        set_path(&mut merged, &path, parse_env_value(raw));
    }
    // The resolved preset wins even when a lower layer names another one;
    // lower-layer preset keys only participate in the resolution above.
    set_path(
        &mut merged,
        &["preset".to_string()],
        toml::Value::String(preset.to_string()),
    );

    let cfg: RunConfig = merged
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// `LANEQ_ROAD__RAMP1` becomes `["road", "ramp1"]`.
fn env_key_path(key: &str) -> Vec<String> {
    let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
        return Vec::new();
    };
    rest.split("__").map(|s| s.to_ascii_lowercase()).collect()
}

/// Values are parsed with TOML scalar syntax; anything unparsable is a
/// bare string, so `LANEQ_PRESET=paper` works unquoted.
fn parse_env_value(raw: &str) -> toml::Value {
    if let Ok(table) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(base: &mut toml::Value, path: &[String], value: toml::Value) {
    let (head, rest) = path.split_first().expect("set_path needs a nonempty path");
    let toml::Value::Table(table) = base else {
        *base = toml::Value::Table(toml::Table::new());
        return set_path(base, path, value);
    };
    if rest.is_empty() {
        table.insert(head.clone(), value);
        return;
    }
    let slot = table
        .entry(head.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    set_path(slot, rest, value);
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_json(&key, child, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

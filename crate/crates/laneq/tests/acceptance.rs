//! Release gate. Every criterion prints one `ACCEPTANCE <n> <name>:
//! PASS/FAIL` line (visible under `--nocapture`) and then asserts, so a
//! plain `cargo test --test acceptance` fails iff a criterion fails.
//!
//! Criteria 5, 6 and 7 train real desk-preset policies inside the test
//! binary; the two runs are shared across tests through `OnceLock` and
//! add roughly two minutes on one core.
//!
//! Three criteria are expected to fail and stay red on purpose: 3 (the
//! audited parameter count is unreachable for this stack) and 5b/6 (desk
//! scale training clears the random baseline but does not reach
//! rule-based reward or collision-free driving). README.md carries the
//! measurements and analysis; weakening the checks to force green would
//! hide a real result.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use laneq::config::RunConfig;
use laneq::eval::{evaluate, mann_whitney_greater, EvalReport, Policy};
use laneq::io::{strip_wallclock, Checkpoint};
use laneq::model::GcqModel;
use laneq::nn::{gradcheck, masked_mse, soft_update, Matrix};
use laneq::obs::FEATURE_DIM;
use laneq::replay::{ReplayBuffer, StoredObs, Transition};
use laneq::reward::{intention_reward, intention_term, speed_reward, total_reward, RewardWeights, TermCategory};
use laneq::sim::{Action, Intention, Kind, LaneChange, Sim, StepEvents, Vehicle};
use laneq::trainer::{run_training, transition_targets};
use laneq::Real;

/// Training seed for the desk-preset fixture runs.
const DESK_SEED: u64 = 1;

fn verdict(num: u32, name: &str, pass: bool, detail: &str) -> bool {
    let state = if pass { "PASS" } else { "FAIL" };
    if detail.is_empty() {
        println!("ACCEPTANCE {num} {name}: {state}");
    } else {
        println!("ACCEPTANCE {num} {name}: {state} ({detail})");
    }
    pass
}

/// Model with every tensor densely random, so structural checks cannot
/// pass vacuously on zeroed layers.
fn dense_model(rng: &mut ChaCha8Rng) -> GcqModel<Real> {
    let mut m = GcqModel::<Real>::init(FEATURE_DIM, rng);
    for (_, t) in m.params_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.35..0.35);
        }
    }
    m
}

// ---------------------------------------------------------------- fixtures

struct TrainedPolicy {
    model: GcqModel<Real>,
    cfg: RunConfig,
}

fn desk_cfg(no_fusion: bool) -> RunConfig {
    let mut cfg = RunConfig::preset("desk").expect("desk preset");
    cfg.seed = DESK_SEED;
    cfg.ablation.no_fusion = no_fusion;
    cfg
}

fn train_desk(no_fusion: bool, dir: &str) -> TrainedPolicy {
    let cfg = desk_cfg(no_fusion);
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join(dir);
    let summary = run_training(&cfg, &out).expect("desk training run");
    let ckpt = Checkpoint::load(&summary.final_checkpoint).expect("load final checkpoint");
    TrainedPolicy {
        model: ckpt.to_model().expect("rebuild trained model"),
        cfg,
    }
}

fn std_run() -> &'static TrainedPolicy {
    static RUN: OnceLock<TrainedPolicy> = OnceLock::new();
    RUN.get_or_init(|| train_desk(false, "acceptance_desk_std"))
}

fn no_fusion_run() -> &'static TrainedPolicy {
    static RUN: OnceLock<TrainedPolicy> = OnceLock::new();
    RUN.get_or_init(|| train_desk(true, "acceptance_desk_no_fusion"))
}

/// Density sweep of the standard desk policy against both references,
/// shared by criteria 5 and 6.
fn sweep_report() -> &'static EvalReport {
    static REPORT: OnceLock<EvalReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let run = std_run();
        let policies = vec![
            ("gcq".to_string(), Policy::Gcq(run.model.clone())),
            ("rule_based".to_string(), Policy::RuleBased),
            ("random".to_string(), Policy::Random),
        ];
        evaluate(&run.cfg, &policies, &[0.1, 0.3, 0.5], 10).expect("density sweep")
    })
}

// ---------------------------------------------------------------- criteria

#[test]
fn acceptance_1_gradient_correctness() {
    let started = Instant::now();
    let mut max_rel = 0.0_f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    for seed in 0..20 {
        let report = gradcheck(seed);
        checked += report.checked;
        if report.max_rel_err > max_rel {
            max_rel = report.max_rel_err;
            worst = format!("seed {seed}, {}", report.worst);
        }
    }
    let elapsed = started.elapsed();
    let pass = max_rel < 1e-4 && elapsed < Duration::from_secs(60);
    let detail = format!(
        "max rel err {max_rel:.3e} over {checked} entries in {:.1}s, worst at {worst}",
        elapsed.as_secs_f64()
    );
    assert!(verdict(1, "gradient correctness", pass, &detail), "{detail}");
}

#[test]
fn acceptance_2_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    rng.set_stream(2000);
    let mut init_rng = ChaCha8Rng::seed_from_u64(2024);
    init_rng.set_stream(2001);
    let model = dense_model(&mut init_rng);

    let mut max_dev = 0.0_f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..=10usize);
        let feat: Vec<f64> = (0..n * FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let mut edges = Vec::new();
        for a in 0..n as u16 {
            for b in (a + 1)..n as u16 {
                if rng.gen_bool(0.35) {
                    edges.push((a, b));
                }
            }
        }
        let ids: Vec<u64> = (1..=n as u64).collect();
        let obs = StoredObs {
            ids: ids.clone(),
            mask: mask.clone(),
            feat: feat.clone(),
            edges: edges.clone(),
            n_max: n,
        }
        .expand_trimmed();
        let q = model.forward(&obs.anorm, &obs.feat, &obs.mask).unwrap();

        // Random permutation: slot i of the original becomes slot p[i].
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            p.swap(i, rng.gen_range(0..=i));
        }
        let mut feat_p = vec![0.0; n * FEATURE_DIM];
        let mut mask_p = vec![false; n];
        for i in 0..n {
            mask_p[p[i]] = mask[i];
            feat_p[p[i] * FEATURE_DIM..(p[i] + 1) * FEATURE_DIM]
                .copy_from_slice(&feat[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]);
        }
        let edges_p: Vec<(u16, u16)> = edges
            .iter()
            .map(|&(a, b)| {
                let (x, y) = (p[a as usize] as u16, p[b as usize] as u16);
                (x.min(y), x.max(y))
            })
            .collect();
        let obs_p = StoredObs {
            ids,
            mask: mask_p,
            feat: feat_p,
            edges: edges_p,
            n_max: n,
        }
        .expand_trimmed();
        let q_p = model.forward(&obs_p.anorm, &obs_p.feat, &obs_p.mask).unwrap();

        for i in 0..n {
            for a in 0..3 {
                max_dev = max_dev.max((q_p.get(p[i], a) - q.get(i, a)).abs());
            }
        }
    }
    let pass = max_dev < 1e-9;
    let detail = format!("max abs deviation {max_dev:.3e} over 100 permuted observations");
    assert!(verdict(2, "permutation equivariance", pass, &detail), "{detail}");
}

#[test]
fn acceptance_3_parameter_count_audit() {
    let model = GcqModel::<Real>::zeros(FEATURE_DIM);
    let audited = 6732usize;
    let actual = model.param_count();
    let described = model.describe();
    let pass = actual == audited && described.contains("total trainable parameters: 6732");
    let detail = format!("describe totals {actual} trainable parameters, audit expects {audited}");
    verdict(3, "parameter-count audit", pass, &detail);
    assert!(
        pass,
        "parameter-count audit: the dense stack 8->32->32, graph stage 32->32 and head \
         32->32->16->3 with one bias per unit totals {actual} trainable scalars, not {audited}; \
         every bias convention of this stack differs from {audited} by a non-multiple of 32, so \
         the audited figure is unreachable (see README.md, parameter count section)"
    );
}

#[test]
fn acceptance_4_reward_oracle() {
    // Independent per-vehicle schedule, written straight from the piecewise
    // definitions rather than the reward module's control flow.
    fn oracle_term(kind: Kind, lane: usize, pos: f64) -> f64 {
        const L1: f64 = 200.0;
        const L2: f64 = 200.0;
        match kind {
            Kind::Hdv | Kind::Cav(Intention::Through) => 0.0,
            Kind::Cav(Intention::Ramp1) => {
                if pos <= 200.0 {
                    if lane == 0 {
                        1.0 - pos / L1
                    } else {
                        -(pos / L1)
                    }
                } else {
                    0.0
                }
            }
            Kind::Cav(Intention::Ramp2) => {
                if pos <= 200.0 {
                    if lane == 0 {
                        -(pos / L1)
                    } else {
                        0.0
                    }
                } else if pos <= 400.0 {
                    let x = pos - 200.0;
                    if lane == 0 {
                        1.0 - x / L2
                    } else {
                        -(x / L2)
                    }
                } else {
                    0.0
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    rng.set_stream(4000);
    let kinds = [
        Kind::Hdv,
        Kind::Cav(Intention::Ramp1),
        Kind::Cav(Intention::Ramp2),
        Kind::Cav(Intention::Through),
    ];
    let mut quiet = RunConfig::preset("desk").unwrap();
    quiet.flows.hdv = 0.0;
    quiet.flows.cav_ramp1 = 0.0;
    quiet.flows.cav_ramp2 = 0.0;
    let params = quiet.to_sim_params();
    let road = params.road;

    let mut max_err = 0.0_f64;
    for case in 0..1000u64 {
        let mut sim = Sim::new(params.clone(), case);
        let n = rng.gen_range(1..=8usize);
        let mut oracle_i = 0.0;
        let mut cav_speeds = Vec::new();
        let mut spawned = Vec::new();
        for _ in 0..n {
            let kind = kinds[rng.gen_range(0..kinds.len())];
            let lane = rng.gen_range(0..3usize);
            let pos = rng.gen_range(0.0..500.0);
            let speed = rng.gen_range(0.0..14.0);
            let id = sim.spawn_at(kind, lane, pos, speed);
            spawned.push(id);
            oracle_i += oracle_term(kind, lane, pos);
            if kind.is_cav() {
                cav_speeds.push(speed);
            }
        }
        let oracle_v = if cav_speeds.is_empty() {
            0.0
        } else {
            cav_speeds.iter().map(|s| s / 14.0).sum::<f64>() / cav_speeds.len() as f64
        };

        let mut events = StepEvents::default();
        let pairs = rng.gen_range(0..3usize);
        for _ in 0..pairs {
            events.collisions.push((spawned[0], spawned[0]));
        }
        let mut cav_changes = 0usize;
        for _ in 0..rng.gen_range(0..4usize) {
            let kind = kinds[rng.gen_range(0..kinds.len())];
            if kind.is_cav() {
                cav_changes += 1;
            }
            events.lane_changes.push(LaneChange {
                id: spawned[0],
                kind,
                from: 0,
                to: 1,
            });
        }
        let w = RewardWeights {
            w1: rng.gen_range(0.1..3.0),
            w2: rng.gen_range(0.1..3.0),
            w3: rng.gen_range(0.1..3.0),
            w4: rng.gen_range(0.1..3.0),
            p_c_value: rng.gen_range(1.0..80.0),
            p_lc_value: rng.gen_range(0.1..2.0),
            p21_top_lane: false,
        };
        let oracle_total = w.w1 * oracle_i + w.w2 * oracle_v
            - w.w3 * w.p_c_value * pairs as f64
            - w.w4 * w.p_lc_value * cav_changes as f64;

        let got_i = intention_reward(sim.vehicles().values(), &road, false);
        let got_v = speed_reward(sim.vehicles().values(), 14.0);
        let got = total_reward(&sim, &events, &w);
        max_err = max_err
            .max((got_i - oracle_i).abs())
            .max((got_v - oracle_v).abs())
            .max((got.total - oracle_total).abs());
    }

    // Boundary values must be exact, not merely close.
    let mk = |kind, lane, pos| Vehicle {
        id: 1,
        kind,
        lane,
        pos,
        speed: 10.0,
        missed_ramp: false,
    };
    let start = intention_term(&mk(Kind::Cav(Intention::Ramp1), 0, 0.0), &road, false);
    let end = intention_term(&mk(Kind::Cav(Intention::Ramp1), 0, 200.0), &road, false);
    let off = intention_term(&mk(Kind::Cav(Intention::Ramp1), 1, 200.0), &road, false);
    let exact = start.signed_value == 1.0
        && start.category == Some(TermCategory::R11)
        && end.signed_value == 0.0
        && off.category == Some(TermCategory::P11)
        && off.value == 1.0
        && off.signed_value == -1.0;

    let pass = max_err <= 1e-12 && exact;
    let detail = format!(
        "max deviation {max_err:.3e} over 1000 randomized states; segment boundary values exact: {exact}"
    );
    assert!(verdict(4, "reward oracle", pass, &detail), "{detail}");
}

#[test]
fn acceptance_5_directional_replication() {
    let report = sweep_report();
    let cell = |policy: &str, inflow: f64| {
        report
            .cells
            .iter()
            .find(|c| c.policy == policy && c.hdv_inflow == inflow)
            .unwrap_or_else(|| panic!("missing {policy} cell at inflow {inflow}"))
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for inflow in [0.1, 0.3, 0.5] {
        let gcq = cell("gcq", inflow);
        let random = cell("random", inflow);
        let rule = cell("rule_based", inflow);
        let p = mann_whitney_greater(&gcq.rewards, &random.rewards);
        let beats_rule = gcq.reward_mean > rule.reward_mean;
        pass &= p < 0.05 && beats_rule;
        parts.push(format!(
            "inflow {inflow}: p-vs-random {p:.4}, mean gcq {:.1} vs rule {:.1}",
            gcq.reward_mean, rule.reward_mean
        ));
    }
    let detail = parts.join("; ");
    assert!(
        verdict(5, "directional replication", pass, &detail),
        "{detail}; the trained policy clears the random baseline but not the rule-based \
         one at desk scale (analysis under Known limitations in README.md)"
    );
}

#[test]
fn acceptance_6_safety_learning_signal() {
    let report = sweep_report();
    let rate = |policy: &str| {
        let mut pairs = 0.0;
        let mut episodes = 0.0;
        for c in report.cells.iter().filter(|c| c.policy == policy) {
            pairs += c.collision_rate * c.episodes as f64;
            episodes += c.episodes as f64;
        }
        assert!(episodes > 0.0, "{policy} sweep produced no completed episodes");
        pairs / episodes
    };
    let gcq = rate("gcq");
    let random = rate("random");
    let pass = gcq <= 0.25 * random;
    let detail =
        format!("collision pairs per episode: gcq {gcq:.3} vs random {random:.3} (need <= 0.25x)");
    assert!(
        verdict(6, "safety learning signal", pass, &detail),
        "{detail}; desk-scale training does not reach collision-free driving \
         (analysis under Known limitations in README.md)"
    );
}

#[test]
fn acceptance_7_no_fusion_ablation() {
    let std_run = std_run();
    let nf_run = no_fusion_run();
    let density = std_run.cfg.flows.hdv;
    let eval_one = |run: &TrainedPolicy| {
        let policies = vec![("gcq".to_string(), Policy::Gcq(run.model.clone()))];
        let report = evaluate(&run.cfg, &policies, &[density], 10).expect("ablation eval");
        report.cells[0].reward_mean
    };
    let standard = eval_one(std_run);
    let no_fusion = eval_one(nf_run);
    let pass = no_fusion < standard;
    let detail = format!(
        "mean reward at training density {density}: fusion {standard:.1} vs identity-only {no_fusion:.1}"
    );
    assert!(verdict(7, "no-fusion ablation", pass, &detail), "{detail}");
}

#[test]
fn acceptance_8_training_machinery() {
    let mut failures: Vec<String> = Vec::new();

    fn one_cav_obs(id: u64, pos_frac: f64) -> StoredObs {
        StoredObs {
            ids: vec![id],
            mask: vec![true],
            feat: vec![0.5, pos_frac, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            edges: Vec::new(),
            n_max: 4,
        }
    }

    let mut rng_a = ChaCha8Rng::seed_from_u64(8);
    rng_a.set_stream(8001);
    let mut rng_b = ChaCha8Rng::seed_from_u64(8);
    rng_b.set_stream(8002);
    let online = dense_model(&mut rng_a);
    let target = dense_model(&mut rng_b);
    let gamma = 0.99;

    // Terminal transitions take the raw reward.
    let base = Transition {
        obs: one_cav_obs(7, 0.1),
        actions: vec![Some(Action::Keep)],
        reward: 2.0,
        next: one_cav_obs(7, 0.2),
        next_alive: vec![true],
        done: true,
    };
    let (y, sel) = transition_targets(&base, &online, &target, gamma, false, 0).unwrap();
    if y.get(0, Action::Keep.index()) != 2.0 {
        failures.push(format!("terminal target {} expected 2.0", y.get(0, 1)));
    }
    if sel.get(0, Action::Keep.index()) != 1.0 || sel.data().iter().sum::<f64>() != 1.0 {
        failures.push("selection mask off the taken action".into());
    }

    // Live transitions bootstrap from the target net at the matched slot.
    let boot = Transition {
        done: false,
        ..base.clone()
    };
    let (y, _) = transition_targets(&boot, &online, &target, gamma, false, 0).unwrap();
    let next = boot.next.expand_trimmed();
    let qt = target.forward(&next.anorm, &next.feat, &next.mask).unwrap();
    let best = qt.row(0).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (y.get(0, Action::Keep.index()) - (2.0 + gamma * best)).abs() > 1e-12 {
        failures.push("bootstrap target disagrees with target-network max".into());
    }

    // A slot whose vehicle left the scene must not bootstrap.
    let exited = Transition {
        next: one_cav_obs(9, 0.9),
        next_alive: vec![false],
        done: false,
        ..base.clone()
    };
    let (y, _) = transition_targets(&exited, &online, &target, gamma, false, 0).unwrap();
    if y.get(0, Action::Keep.index()) != 2.0 {
        failures.push("exited agent bootstrapped".into());
    }

    // Loss gradient is null on unselected rows (HDV or padding slots).
    let pred = Matrix::from_vec(3, 3, (0..9).map(|i| i as f64 * 0.3).collect());
    let tgt = Matrix::from_vec(3, 3, vec![1.0; 9]);
    let mut sel_rows = vec![0.0; 9];
    sel_rows[0] = 1.0;
    sel_rows[8] = 1.0;
    let sel = Matrix::from_vec(3, 3, sel_rows);
    let (_, grad) = masked_mse(&pred, &tgt, &sel);
    if grad.row(1).iter().any(|&g| g != 0.0) {
        failures.push("masked loss leaked gradient into an unselected row".into());
    }
    if grad.get(0, 0) == 0.0 || grad.get(2, 2) == 0.0 {
        failures.push("masked loss lost gradient on selected entries".into());
    }

    // Soft target updates contract toward the online weights geometrically.
    let tau = 0.01_f64;
    let online_m: Matrix<f64> = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let mut target_m: Matrix<f64> = Matrix::from_vec(2, 2, vec![5.0, 0.0, -1.0, 4.5]);
    let gap0: f64 = target_m
        .data()
        .iter()
        .zip(online_m.data())
        .map(|(t, o)| (t - o).abs())
        .fold(0.0, f64::max);
    let mut last = gap0;
    for k in 1..=5 {
        soft_update(&mut [&mut target_m], &[&online_m], tau);
        let gap = target_m
            .data()
            .iter()
            .zip(online_m.data())
            .map(|(t, o): (&f64, &f64)| (t - o).abs())
            .fold(0.0_f64, f64::max);
        let expected = gap0 * (1.0 - tau).powi(k);
        if (gap - expected).abs() > 1e-12 * gap0 || gap >= last {
            failures.push(format!("soft update gap {gap} at step {k}, expected {expected}"));
            break;
        }
        last = gap;
    }

    // Replay: FIFO eviction plus uniform-with-replacement sampling.
    let mut buffer = ReplayBuffer::new(32, 99);
    for tag in 0..40 {
        buffer.push(Transition {
            reward: tag as f64,
            ..base.clone()
        });
    }
    if buffer.len() != 32 {
        failures.push(format!("replay holds {} items, capacity 32", buffer.len()));
    }
    let mut counts = [0usize; 40];
    for t in buffer.sample(5000) {
        counts[t.reward as usize] += 1;
    }
    if counts[..8].iter().any(|&c| c > 0) {
        failures.push("replay sampled an evicted item".into());
    }
    let expected = 5000.0 / 32.0;
    let (lo, hi) = (expected * 0.6, expected * 1.4);
    if counts[8..].iter().any(|&c| (c as f64) < lo || (c as f64) > hi) {
        failures.push(format!("replay frequencies outside [{lo:.0}, {hi:.0}]: {:?}", &counts[8..]));
    }

    let pass = failures.is_empty();
    let detail = if pass {
        "terminal/bootstrap targets, exited-agent rule, masked gradients, soft-update contraction, replay FIFO+uniformity".to_string()
    } else {
        failures.join("; ")
    };
    assert!(verdict(8, "training machinery", pass, &detail), "{detail}");
}

#[test]
fn acceptance_9_training_determinism() {
    let tmp = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_determinism");
    std::fs::create_dir_all(&tmp).unwrap();
    let cfg_path = tmp.join("short.toml");
    std::fs::write(
        &cfg_path,
        "seed = 17\n\
         [schedule]\n\
         warmup_steps = 100\n\
         total_steps = 600\n\
         episode_horizon = 60\n\
         checkpoint_every = 0\n",
    )
    .unwrap();

    let train = |out: &PathBuf| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_laneq"));
        for (key, _) in std::env::vars() {
            if key.starts_with("LANEQ_") {
                cmd.env_remove(key);
            }
        }
        let status = cmd
            .args(["train", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .status()
            .expect("spawn laneq train");
        assert!(status.success(), "training invocation failed");
        (
            strip_wallclock(&std::fs::read_to_string(out.join("metrics.jsonl")).unwrap()),
            std::fs::read(out.join("checkpoints/final.ckpt")).unwrap(),
        )
    };
    let (metrics_a, ckpt_a) = train(&tmp.join("a"));
    let (metrics_b, ckpt_b) = train(&tmp.join("b"));

    let pass = metrics_a == metrics_b && ckpt_a == ckpt_b;
    let detail = format!(
        "metrics equal: {}, final checkpoints bit-identical: {} ({} bytes)",
        metrics_a == metrics_b,
        ckpt_a == ckpt_b,
        ckpt_a.len()
    );
    assert!(verdict(9, "training determinism", pass, &detail), "{detail}");
}

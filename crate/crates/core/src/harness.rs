//! End-to-end experiment harness: PID dataset collection, pipeline
//! orchestration (collect → fit → certify → train → evaluate), multi-seed
//! aggregation and metrics export.
//!
//! Determinism contract: on one platform, `(config, seed)` fixes every
//! numeric artifact byte-for-byte. The only non-deterministic fields are the
//! wall-clock duration and the timestamp, quarantined in [`RunMeta`] so the
//! numeric payload ([`RunData`]) can be compared directly.

use nalgebra::{Matrix2, Vector2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::Instant;

use crate::clf::{certify_model, eta_star, verify_contraction, CLFCertificate, ContractionReport};
use crate::config::ExperimentConfig;
use crate::constraint::{actor_update_constrained, dual_update, LagrangeState};
use crate::edmd::{build_dictionary, fit_edmd, validate_model, EdmdDataset, LiftedModel, ValidationReport};
use crate::error::{Error, Result};
use crate::pid::PidController;
use crate::sac::{
    actor_update_baseline, critic_update, polyak_update, temperature_update, AgentParams,
    ReplayBuffer,
};
use crate::sim::{Transition, TrackingEnv};

/// Which actor update a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sac,
    LcSac,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sac" => Ok(Self::Sac),
            "lcsac" | "lc-sac" | "lc_sac" => Ok(Self::LcSac),
            other => Err(Error::InvalidArgument(format!(
                "unknown algorithm {other:?}; use \"sac\" or \"lcsac\""
            ))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sac => "sac",
            Self::LcSac => "lcsac",
        })
    }
}

/// Mix a run seed with a named stream so the environment, networks, replay
/// and evaluation each consume an independent deterministic stream.
fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for chunk in [seed.to_le_bytes(), index.to_le_bytes()] {
        for b in chunk {
            h = (h ^ b as u64).wrapping_mul(PRIME);
        }
    }
    for b in stream.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(PRIME);
    }
    h
}

// ---------------------------------------------------------------------------
// Dataset collection
// ---------------------------------------------------------------------------

/// Drive the configured trajectory with the PID controller plus Gaussian
/// exploration noise (added before clipping) until exactly
/// `config.dataset.size` transitions are gathered.
///
/// The PID must keep every collection episode inside the flight box; a
/// failure terminal aborts with advice, because a dataset polluted by
/// post-failure states would poison the surrogate.
pub fn collect_dataset(config: &ExperimentConfig, seed: u64) -> Result<EdmdDataset> {
    config.validate()?;
    let mut env = TrackingEnv::new(config.env.to_env_config())?;
    let pid = PidController::default();
    let sigma = config.dataset.exploration_noise;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "collect-noise", 0));

    let mut transitions = Vec::with_capacity(config.dataset.size);
    let mut episode = 0u64;
    env.reset(derive_seed(seed, "collect-reset", episode));
    while transitions.len() < config.dataset.size {
        if env.needs_reset() {
            episode += 1;
            env.reset(derive_seed(seed, "collect-reset", episode));
        }
        let reference = env.current_reference();
        let mut action = pid.action(&env.cfg.params, env.state(), &reference);
        if sigma > 0.0 {
            action[0] += sigma * noise_rng.sample::<f64, _>(StandardNormal);
            action[1] += sigma * noise_rng.sample::<f64, _>(StandardNormal);
        }
        let t = env.step(&action)?;
        if t.done {
            return Err(Error::Dataset(format!(
                "PID left the flight box during collection episode {episode}; \
                 retune the gains or lower the exploration noise"
            )));
        }
        transitions.push(t);
    }
    Ok(EdmdDataset::from_transitions(&transitions))
}

// ---------------------------------------------------------------------------
// Identification and certification
// ---------------------------------------------------------------------------

/// Split, lift and fit the surrogate; validate on the held-out part.
pub fn fit_pipeline(
    config: &ExperimentConfig,
    dataset: &EdmdDataset,
    seed: u64,
) -> Result<(LiftedModel, ValidationReport)> {
    config.edmd.validate()?;
    let (train, heldout) = dataset.split(config.edmd.holdout_fraction, derive_seed(seed, "split", 0))?;
    let dictionary = build_dictionary(
        &train,
        config.edmd.n_rbf,
        config.edmd.bandwidth.to_mode()?,
        derive_seed(seed, "kmeans", 0),
    )?;
    let model = fit_edmd(&train, &dictionary, config.edmd.tikhonov)?;
    let report = validate_model(&model, &heldout, config.edmd.rollout_horizon)?;
    Ok((model, report))
}

/// Solve the DARE on the surrogate and verify the contraction claims.
///
/// Verification runs at `min(η, η*)`: the configured rate η parameterizes
/// the hinge the learner is penalized with (a soft target), while η* is the
/// decay the DARE identity actually guarantees under u = −Kz. Checking at a
/// rate above η* would fail by construction without saying anything about
/// the certificate's health.
pub fn certify_pipeline(
    config: &ExperimentConfig,
    model: &LiftedModel,
    verify_samples: usize,
    seed: u64,
) -> Result<(CLFCertificate, ContractionReport)> {
    config.clf.validate()?;
    let (q, r) = config.clf.weights(model.n_lift());
    let cert = certify_model(
        model,
        &q,
        &r,
        config.clf.eta,
        config.clf.dare_tol,
        config.clf.dare_max_iter,
    )?;
    let eta_verify = cert.eta.min(eta_star(&cert));
    let report = verify_contraction(model, &cert, eta_verify, verify_samples, derive_seed(seed, "verify", 0));
    Ok((cert, report))
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

/// One finished training episode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Environment step count when the episode ended.
    pub end_step: usize,
    pub reward: f64,
    pub length: usize,
    /// True when the episode ended by leaving the flight box.
    pub failed: bool,
}

/// One deterministic evaluation pause.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
}

/// Scalars of one gradient round. The violation fields are identically zero
/// for the baseline algorithm, which never evaluates the certificate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct UpdateScalars {
    pub step: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub mean_log_prob: f64,
    pub lambda: f64,
    pub mean_hinge: f64,
    pub cvar_hinge: f64,
    pub max_hinge: f64,
    pub frac_violating: f64,
}

/// Non-deterministic bookkeeping, kept apart from the numeric payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub algo: Algorithm,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    /// Unix timestamp (seconds) when the run finished.
    pub finished_at: u64,
}

/// Deterministic payload of a run: `(config, seed)` fixes it bit-for-bit.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct RunData {
    pub episodes: Vec<EpisodeRecord>,
    pub evals: Vec<EvalPoint>,
    pub updates: Vec<UpdateScalars>,
}

/// Full record of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub data: RunData,
}

impl RunRecord {
    pub fn save_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Artifacts the constrained algorithm trains against.
pub struct CertifiedModel<'a> {
    pub model: &'a LiftedModel,
    pub cert: &'a CLFCertificate,
}

/// Run one seeded training leg and return its record plus the final agent.
///
/// `lcsac` requires the surrogate artifacts and refuses mismatched ones.
/// When `out_dir` is given, the best-evaluation checkpoint is kept at
/// `best_checkpoint.json`; a non-finite loss aborts after dumping
/// `crash_checkpoint.json` and `crash_record.json` for diagnosis.
pub fn train(
    config: &ExperimentConfig,
    algo: Algorithm,
    seed: u64,
    artifacts: Option<CertifiedModel<'_>>,
    out_dir: Option<&Path>,
) -> Result<(RunRecord, AgentParams)> {
    config.validate()?;
    let artifacts = match (algo, artifacts) {
        (Algorithm::LcSac, Some(a)) => {
            a.cert.check_matches(a.model)?;
            Some(a)
        }
        (Algorithm::LcSac, None) => {
            return Err(Error::InvalidArgument(
                "lcsac needs a fitted model and certificate; run fit-edmd and solve-dare first"
                    .into(),
            ));
        }
        (Algorithm::Sac, _) => None,
    };

    let started = Instant::now();
    let mut env = TrackingEnv::new(config.env.to_env_config())?;
    let mut agent = AgentParams::new(&config.sac, derive_seed(seed, "agent", 0))?;
    let mut buffer = ReplayBuffer::new(config.run.replay_capacity, derive_seed(seed, "replay", 0))?;
    let mut lagrange = config.constraint.clone();

    let mut data = RunData::default();
    let mut best_eval = f64::NEG_INFINITY;
    let update_gate = config.run.warmup_steps.max(config.sac.batch_size);

    let mut episode_idx = 0usize;
    let mut episode_reward = 0.0;
    let mut episode_len = 0usize;
    env.reset(derive_seed(seed, "episode", episode_idx as u64));

    let run_step = |step: usize,
                        env: &mut TrackingEnv,
                        agent: &mut AgentParams,
                        buffer: &mut ReplayBuffer,
                        lagrange: &mut LagrangeState,
                        data: &mut RunData|
     -> Result<Transition> {
        let obs = env.error_obs();
        let (action, _) = agent.act_stochastic(&obs)?;
        let t = env.step(&action)?;
        buffer.push(t);

        if buffer.len() >= update_gate {
            for _ in 0..config.run.updates_per_step {
                let batch = buffer.sample(config.sac.batch_size)?;
                let critic_loss = critic_update(agent, &batch, config.sac.gamma)?;
                let mut scalars = UpdateScalars {
                    step: step + 1,
                    critic_loss,
                    actor_loss: 0.0,
                    alpha: 0.0,
                    mean_log_prob: 0.0,
                    lambda: 0.0,
                    mean_hinge: 0.0,
                    cvar_hinge: 0.0,
                    max_hinge: 0.0,
                    frac_violating: 0.0,
                };
                let mean_log_prob = match &artifacts {
                    None => {
                        let up = actor_update_baseline(agent, &batch)?;
                        scalars.actor_loss = up.loss;
                        scalars.mean_log_prob = up.mean_log_prob;
                        up.mean_log_prob
                    }
                    Some(a) => {
                        let up =
                            actor_update_constrained(agent, &batch, a.model, a.cert, lagrange)?;
                        scalars.actor_loss = up.loss;
                        scalars.mean_log_prob = up.mean_log_prob;
                        scalars.mean_hinge = up.violation.mean_hinge;
                        scalars.cvar_hinge = up.violation.cvar_hinge;
                        scalars.max_hinge = up.violation.max_hinge;
                        scalars.frac_violating = up.violation.frac_violating;
                        dual_update(lagrange, up.violation.mean_hinge)?;
                        up.mean_log_prob
                    }
                };
                temperature_update(agent, mean_log_prob)?;
                polyak_update(agent, config.sac.tau)?;
                scalars.alpha = agent.alpha();
                scalars.lambda = lagrange.lambda;
                data.updates.push(scalars);
            }
        }
        Ok(t)
    };

    for step in 0..config.run.total_steps {
        match run_step(step, &mut env, &mut agent, &mut buffer, &mut lagrange, &mut data) {
            Ok(t) => {
                episode_reward += t.reward;
                episode_len += 1;
                if env.needs_reset() {
                    episode_idx += 1;
                    data.episodes.push(EpisodeRecord {
                        episode: episode_idx,
                        end_step: step + 1,
                        reward: episode_reward,
                        length: episode_len,
                        failed: t.done,
                    });
                    episode_reward = 0.0;
                    episode_len = 0;
                    env.reset(derive_seed(seed, "episode", episode_idx as u64));
                }
            }
            Err(e) => {
                // Abort loudly but leave the wreckage for inspection.
                if let Some(dir) = out_dir {
                    let _ = agent.save_checkpoint(dir.join("crash_checkpoint.json"));
                    let record = RunRecord {
                        meta: RunMeta {
                            algo,
                            seed,
                            wall_clock_seconds: started.elapsed().as_secs_f64(),
                            finished_at: unix_now(),
                        },
                        data: data.clone(),
                    };
                    let _ = record.save_json(dir.join("crash_record.json"));
                }
                return Err(e);
            }
        }

        if (step + 1) % config.run.eval_interval == 0 {
            let eval = evaluate(
                &agent,
                config,
                config.run.eval_episodes,
                derive_seed(seed, "eval", (step + 1) as u64),
            )?;
            data.evals.push(EvalPoint {
                step: step + 1,
                mean_reward: eval.mean_reward,
                std_reward: eval.std_reward,
            });
            if eval.mean_reward > best_eval {
                best_eval = eval.mean_reward;
                if let Some(dir) = out_dir {
                    agent.save_checkpoint(dir.join("best_checkpoint.json"))?;
                }
            }
        }
    }

    let record = RunRecord {
        meta: RunMeta {
            algo,
            seed,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            finished_at: unix_now(),
        },
        data,
    };
    Ok((record, agent))
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Deterministic-policy evaluation: mean action, no sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_reward: f64,
    pub std_reward: f64,
    pub episode_rewards: Vec<f64>,
    /// Per-timestep mean (x, z) over the episodes still alive at that step.
    pub trajectory_mean: Vec<[f64; 2]>,
    /// Per-timestep std of (x, z), zero wherever one episode remains.
    pub trajectory_std: Vec<[f64; 2]>,
    /// Matching reference positions for plotting.
    pub reference: Vec<[f64; 2]>,
}

pub fn evaluate(
    agent: &AgentParams,
    config: &ExperimentConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs ≥ 1 episode".into()));
    }
    let mut env = TrackingEnv::new(config.env.to_env_config())?;
    let mut rewards = Vec::with_capacity(n_episodes);
    let mut tracks: Vec<Vec<[f64; 2]>> = Vec::with_capacity(n_episodes);
    let mut reference = Vec::new();

    for ep in 0..n_episodes {
        env.reset(derive_seed(seed, "eval-episode", ep as u64));
        let mut total = 0.0;
        let mut track = Vec::with_capacity(config.env.max_steps);
        while !env.needs_reset() {
            let action = agent.act_deterministic(&env.error_obs())?;
            if ep == 0 {
                let r = env.current_reference();
                reference.push([r.x, r.z]);
            }
            let t = env.step(&action)?;
            track.push([t.state.x, t.state.z]);
            total += t.reward;
        }
        rewards.push(total);
        tracks.push(track);
    }

    let (mean_reward, std_reward) = mean_std(&rewards);
    let horizon = tracks.iter().map(Vec::len).max().unwrap_or(0);
    let mut trajectory_mean = Vec::with_capacity(horizon);
    let mut trajectory_std = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let alive: Vec<&[f64; 2]> = tracks.iter().filter_map(|tr| tr.get(t)).collect();
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for axis in 0..2 {
            let vals: Vec<f64> = alive.iter().map(|p| p[axis]).collect();
            let (m, s) = mean_std(&vals);
            mean[axis] = m;
            std[axis] = s;
        }
        trajectory_mean.push(mean);
        trajectory_std.push(std);
    }

    Ok(EvalReport {
        mean_reward,
        std_reward,
        episode_rewards: rewards,
        trajectory_mean,
        trajectory_std,
        reference,
    })
}

/// Mean episode reward of a uniform-random policy — the floor any trained
/// agent must clear.
pub fn random_policy_baseline(
    config: &ExperimentConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut env = TrackingEnv::new(config.env.to_env_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "random-policy", 0));
    let mut rewards = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        env.reset(derive_seed(seed, "random-episode", ep as u64));
        let mut total = 0.0;
        while !env.needs_reset() {
            let action = Vector2::new(
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            );
            total += env.step(&action)?.reward;
        }
        rewards.push(total);
    }
    Ok(mean_std(&rewards))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Trailing-10 mean of the episode rewards ending at `idx` (inclusive).
fn trailing10(episodes: &[EpisodeRecord], idx: usize) -> f64 {
    let lo = (idx + 1).saturating_sub(10);
    let window = &episodes[lo..=idx];
    window.iter().map(|e| e.reward).sum::<f64>() / window.len() as f64
}

/// First episode whose trailing-10 mean reaches 90 % of the run's final
/// trailing-10 mean (100 % when the final mean is not positive, where the
/// 90 % reading would be ill-posed). Returns the 1-based episode number;
/// fewer than one episode yields 0.
pub fn convergence_episode(episodes: &[EpisodeRecord]) -> usize {
    if episodes.is_empty() {
        return 0;
    }
    let last = episodes.len() - 1;
    let final_mean = trailing10(episodes, last);
    let threshold = if final_mean > 0.0 { 0.9 * final_mean } else { final_mean };
    for idx in 0..episodes.len() {
        if trailing10(episodes, idx) >= threshold {
            return episodes[idx].episode;
        }
    }
    episodes[last].episode
}

/// Metrics of one run, as summarized across seeds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub final_training_reward: f64,
    pub max_episode_reward: f64,
    pub convergence_episode: f64,
    pub final_eval_reward: f64,
    pub best_eval_reward: f64,
}

impl RunMetrics {
    pub fn from_record(record: &RunRecord) -> Self {
        let eps = &record.data.episodes;
        let final_training_reward = if eps.is_empty() {
            0.0
        } else {
            trailing10(eps, eps.len() - 1)
        };
        let max_episode_reward = eps
            .iter()
            .map(|e| e.reward)
            .fold(f64::NEG_INFINITY, f64::max);
        let final_eval_reward = record.data.evals.last().map_or(0.0, |e| e.mean_reward);
        let best_eval_reward = record
            .data
            .evals
            .iter()
            .map(|e| e.mean_reward)
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            seed: record.meta.seed,
            final_training_reward,
            max_episode_reward: if eps.is_empty() { 0.0 } else { max_episode_reward },
            convergence_episode: convergence_episode(eps) as f64,
            final_eval_reward,
            best_eval_reward: if record.data.evals.is_empty() { 0.0 } else { best_eval_reward },
        }
    }
}

/// One line of the cross-seed summary table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algo: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Aggregate records (grouped by algorithm, insertion order preserved) into
/// summary rows: mean ± std and min–max range per metric.
pub fn summarize(records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no run records to summarize".into()));
    }
    let mut algos: Vec<Algorithm> = Vec::new();
    for r in records {
        if !algos.contains(&r.meta.algo) {
            algos.push(r.meta.algo);
        }
    }

    const METRICS: [&str; 5] = [
        "final_training_reward_last10",
        "max_episode_reward",
        "convergence_episode",
        "final_eval_reward",
        "best_eval_reward",
    ];
    let mut rows = Vec::new();
    for algo in algos {
        let metrics: Vec<RunMetrics> = records
            .iter()
            .filter(|r| r.meta.algo == algo)
            .map(RunMetrics::from_record)
            .collect();
        for (i, name) in METRICS.iter().enumerate() {
            let values: Vec<f64> = metrics
                .iter()
                .map(|m| match i {
                    0 => m.final_training_reward,
                    1 => m.max_episode_reward,
                    2 => m.convergence_episode,
                    3 => m.final_eval_reward,
                    _ => m.best_eval_reward,
                })
                .collect();
            let (mean, std) = mean_std(&values);
            rows.push(SummaryRow {
                algo: algo.to_string(),
                metric: (*name).to_string(),
                mean,
                std,
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    Ok(rows)
}

/// Write the cross-seed summary (CSV + JSON) and the per-run traces
/// (episodes, update scalars, evaluations) with a stable column order.
/// Floats are written with round-trip precision so re-parsing a CSV
/// reproduces the in-memory values exactly.
pub fn export_metrics(records: &[RunRecord], out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let rows = summarize(records)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let summary_csv = out_dir.join("summary.csv");
    {
        let mut w = csv::Writer::from_writer(BufWriter::new(std::fs::File::create(&summary_csv)?));
        w.write_record(["algo", "metric", "mean", "std", "min", "max"])?;
        for r in &rows {
            w.write_record([
                r.algo.clone(),
                r.metric.clone(),
                format!("{:?}", r.mean),
                format!("{:?}", r.std),
                format!("{:?}", r.min),
                format!("{:?}", r.max),
            ])?;
        }
        w.flush()?;
    }
    written.push(summary_csv);

    let summary_json = out_dir.join("summary.json");
    serde_json::to_writer_pretty(
        BufWriter::new(std::fs::File::create(&summary_json)?),
        &rows,
    )?;
    written.push(summary_json);

    for record in records {
        let tag = format!("{}_seed{}", record.meta.algo, record.meta.seed);

        let ep_path = out_dir.join(format!("episodes_{tag}.csv"));
        {
            let mut w = csv::Writer::from_writer(BufWriter::new(std::fs::File::create(&ep_path)?));
            w.write_record(["episode", "end_step", "reward", "length", "failed"])?;
            for e in &record.data.episodes {
                w.write_record([
                    e.episode.to_string(),
                    e.end_step.to_string(),
                    format!("{:?}", e.reward),
                    e.length.to_string(),
                    e.failed.to_string(),
                ])?;
            }
            w.flush()?;
        }
        written.push(ep_path);

        let up_path = out_dir.join(format!("updates_{tag}.csv"));
        {
            let mut w = csv::Writer::from_writer(BufWriter::new(std::fs::File::create(&up_path)?));
            w.write_record([
                "step",
                "critic_loss",
                "actor_loss",
                "alpha",
                "mean_log_prob",
                "lambda",
                "mean_hinge",
                "cvar_hinge",
                "max_hinge",
                "frac_violating",
            ])?;
            for u in &record.data.updates {
                w.write_record([
                    u.step.to_string(),
                    format!("{:?}", u.critic_loss),
                    format!("{:?}", u.actor_loss),
                    format!("{:?}", u.alpha),
                    format!("{:?}", u.mean_log_prob),
                    format!("{:?}", u.lambda),
                    format!("{:?}", u.mean_hinge),
                    format!("{:?}", u.cvar_hinge),
                    format!("{:?}", u.max_hinge),
                    format!("{:?}", u.frac_violating),
                ])?;
            }
            w.flush()?;
        }
        written.push(up_path);

        let ev_path = out_dir.join(format!("evals_{tag}.csv"));
        {
            let mut w = csv::Writer::from_writer(BufWriter::new(std::fs::File::create(&ev_path)?));
            w.write_record(["step", "mean_reward", "std_reward"])?;
            for e in &record.data.evals {
                w.write_record([
                    e.step.to_string(),
                    format!("{:?}", e.mean_reward),
                    format!("{:?}", e.std_reward),
                ])?;
            }
            w.flush()?;
        }
        written.push(ev_path);
    }
    Ok(written)
}

/// Re-parse an `episodes_*.csv` written by [`export_metrics`].
pub fn load_episodes_csv<P: AsRef<Path>>(path: P) -> Result<Vec<EpisodeRecord>> {
    let mut r = csv::Reader::from_reader(BufReader::new(std::fs::File::open(path)?));
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        if record.len() != 5 {
            return Err(Error::Dataset(format!(
                "episodes row has {} columns, expected 5",
                record.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Dataset(format!("bad float {s:?}: {e}")))
        };
        out.push(EpisodeRecord {
            episode: record[0]
                .parse()
                .map_err(|e| Error::Dataset(format!("bad episode index: {e}")))?,
            end_step: record[1]
                .parse()
                .map_err(|e| Error::Dataset(format!("bad end_step: {e}")))?,
            reward: parse_f(&record[2])?,
            length: record[3]
                .parse()
                .map_err(|e| Error::Dataset(format!("bad length: {e}")))?,
            failed: record[4]
                .parse()
                .map_err(|e| Error::Dataset(format!("bad failed flag: {e}")))?,
        });
    }
    Ok(out)
}

/// Empirical 2×2 covariance of the dataset's actions — collection must
/// excite both input channels for the surrogate's B to be identifiable.
pub fn action_covariance(dataset: &EdmdDataset) -> Matrix2<f64> {
    let n = dataset.len().max(1) as f64;
    let mut mean = Vector2::zeros();
    for s in &dataset.samples {
        mean += s.u;
    }
    mean /= n;
    let mut cov = Matrix2::zeros();
    for s in &dataset.samples {
        let d = s.u - mean;
        cov += d * d.transpose();
    }
    cov / n
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TrajectoryKind;
    use approx::assert_relative_eq;
    use nalgebra::Vector6;

    /// A config small enough to run inside unit tests.
    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.env.max_steps = 120;
        cfg.dataset.size = 400;
        cfg.sac.hidden = vec![32, 32];
        cfg.sac.batch_size = 32;
        cfg.run.total_steps = 500;
        cfg.run.warmup_steps = 100;
        cfg.run.eval_interval = 250;
        cfg.run.eval_episodes = 2;
        cfg.run.replay_capacity = 10_000;
        cfg.run.seeds = vec![0];
        cfg
    }

    fn tiny_artifacts(cfg: &ExperimentConfig) -> (LiftedModel, CLFCertificate) {
        let dataset = collect_dataset(cfg, 3).unwrap();
        let (model, _) = fit_pipeline(cfg, &dataset, 3).unwrap();
        let (cert, _) = certify_pipeline(cfg, &model, 200, 3).unwrap();
        (model, cert)
    }

    #[test]
    fn collection_returns_exactly_the_requested_size() {
        let cfg = tiny_config();
        let d = collect_dataset(&cfg, 0).unwrap();
        assert_eq!(d.len(), 400);
    }

    #[test]
    fn collection_is_seed_deterministic() {
        let cfg = tiny_config();
        let a = collect_dataset(&cfg, 5).unwrap();
        let b = collect_dataset(&cfg, 5).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = collect_dataset(&cfg, 6).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn zero_noise_collection_is_deterministic_and_quiet() {
        let mut cfg = tiny_config();
        cfg.dataset.exploration_noise = 0.0;
        let a = collect_dataset(&cfg, 1).unwrap();
        let b = collect_dataset(&cfg, 1).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn collected_actions_excite_both_channels() {
        let cfg = tiny_config();
        let d = collect_dataset(&cfg, 2).unwrap();
        let cov = action_covariance(&d);
        let eigs = cov.symmetric_eigenvalues();
        assert!(eigs[0] > 0.0 && eigs[1] > 0.0, "eigs {eigs:?}");
    }

    #[test]
    fn fit_and_certify_pipelines_chain() {
        let cfg = tiny_config();
        let (model, report) = {
            let dataset = collect_dataset(&cfg, 3).unwrap();
            fit_pipeline(&cfg, &dataset, 3).unwrap()
        };
        assert_eq!(model.n_lift(), 8);
        assert_eq!(report.one_step_rmse.len(), 6);
        let (cert, contraction) = certify_pipeline(&cfg, &model, 500, 3).unwrap();
        assert!(cert.check_matches(&model).is_ok());
        assert!(contraction.pass, "contraction check failed: {contraction:?}");
    }

    #[test]
    fn training_smoke_and_determinism() {
        let cfg = tiny_config();
        let (r1, _) = train(&cfg, Algorithm::Sac, 7, None, None).unwrap();
        let (r2, _) = train(&cfg, Algorithm::Sac, 7, None, None).unwrap();
        assert!(!r1.data.episodes.is_empty());
        assert!(!r1.data.updates.is_empty());
        assert_eq!(r1.data.evals.len(), 2);
        assert_eq!(r1.data, r2.data, "same seed must reproduce the run");
        let (r3, _) = train(&cfg, Algorithm::Sac, 8, None, None).unwrap();
        assert_ne!(r1.data, r3.data);
    }

    #[test]
    fn zero_steps_yield_an_empty_record() {
        let mut cfg = tiny_config();
        cfg.run.total_steps = 0;
        let (record, _) = train(&cfg, Algorithm::Sac, 0, None, None).unwrap();
        assert!(record.data.episodes.is_empty());
        assert!(record.data.updates.is_empty());
        assert!(record.data.evals.is_empty());
    }

    #[test]
    fn lcsac_with_lambda_max_zero_matches_sac_exactly() {
        let mut cfg = tiny_config();
        cfg.constraint.lambda_max = 0.0;
        let (model, cert) = tiny_artifacts(&cfg);
        let (sac_rec, _) = train(&cfg, Algorithm::Sac, 9, None, None).unwrap();
        let (lc_rec, _) = train(
            &cfg,
            Algorithm::LcSac,
            9,
            Some(CertifiedModel {
                model: &model,
                cert: &cert,
            }),
            None,
        )
        .unwrap();
        assert_eq!(sac_rec.data.episodes, lc_rec.data.episodes);
        assert_eq!(sac_rec.data.evals, lc_rec.data.evals);
        // Update traces agree on everything the baseline computes.
        for (a, b) in sac_rec.data.updates.iter().zip(&lc_rec.data.updates) {
            assert_eq!(a.critic_loss, b.critic_loss);
            assert_eq!(a.actor_loss, b.actor_loss);
            assert_eq!(a.alpha, b.alpha);
            assert_eq!(b.lambda, 0.0);
        }
    }

    #[test]
    fn lcsac_requires_matching_artifacts() {
        let cfg = tiny_config();
        let (model, cert) = tiny_artifacts(&cfg);
        assert!(matches!(
            train(&cfg, Algorithm::LcSac, 0, None, None),
            Err(Error::InvalidArgument(_))
        ));
        let mut wrong = cert.clone();
        wrong.dictionary_fingerprint ^= 0xdead;
        assert!(matches!(
            train(
                &cfg,
                Algorithm::LcSac,
                0,
                Some(CertifiedModel {
                    model: &model,
                    cert: &wrong
                }),
                None
            ),
            Err(Error::ArtifactMismatch(_))
        ));
    }

    #[test]
    fn lcsac_smoke_produces_violation_traces() {
        let cfg = tiny_config();
        let (model, cert) = tiny_artifacts(&cfg);
        let (record, _) = train(
            &cfg,
            Algorithm::LcSac,
            11,
            Some(CertifiedModel {
                model: &model,
                cert: &cert,
            }),
            None,
        )
        .unwrap();
        assert!(!record.data.updates.is_empty());
        // The hinge statistics are recorded (possibly zero, but present as
        // a trace), and λ stays within its box.
        for u in &record.data.updates {
            assert!(u.lambda >= 0.0 && u.lambda <= cfg.constraint.lambda_max);
            assert!(u.mean_hinge >= 0.0);
            assert!(u.cvar_hinge >= u.mean_hinge - 1e-12);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_single_episode_has_zero_std() {
        let cfg = tiny_config();
        let agent = AgentParams::new(&cfg.sac, 1).unwrap();
        let one = evaluate(&agent, &cfg, 1, 42).unwrap();
        assert_eq!(one.std_reward, 0.0);
        assert!(one.trajectory_std.iter().all(|s| s == &[0.0, 0.0]));

        let a = evaluate(&agent, &cfg, 3, 42).unwrap();
        let b = evaluate(&agent, &cfg, 3, 42).unwrap();
        assert_eq!(a.episode_rewards, b.episode_rewards);
        assert_eq!(a.trajectory_mean, b.trajectory_mean);
        assert!(!a.reference.is_empty());
        assert!(a.reference.len() <= a.trajectory_mean.len());
    }

    #[test]
    fn convergence_episode_definition() {
        let mk = |rewards: &[f64]| -> Vec<EpisodeRecord> {
            rewards
                .iter()
                .enumerate()
                .map(|(i, &r)| EpisodeRecord {
                    episode: i + 1,
                    end_step: (i + 1) * 100,
                    reward: r,
                    length: 100,
                    failed: false,
                })
                .collect()
        };
        // Constant positive trace: converged from the very first episode.
        let eps = mk(&[5.0; 30]);
        assert_eq!(convergence_episode(&eps), 1);

        // Step at episode 20: trailing-10 window crosses 90 % of the final
        // mean a few episodes into the step.
        let mut rewards = vec![0.0; 19];
        rewards.extend(vec![10.0; 21]);
        let eps = mk(&rewards);
        let conv = convergence_episode(&eps);
        assert!(
            (20..=29).contains(&conv),
            "step trace converged at {conv}"
        );

        // Monotone in the prefix: appending better episodes never moves the
        // convergence point earlier than a strictly worse prefix's.
        assert_eq!(convergence_episode(&[]), 0);
    }

    #[test]
    fn summary_and_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mk_record = |algo: Algorithm, seed: u64, bump: f64| -> RunRecord {
            RunRecord {
                meta: RunMeta {
                    algo,
                    seed,
                    wall_clock_seconds: 1.0,
                    finished_at: 0,
                },
                data: RunData {
                    episodes: (0..20)
                        .map(|i| EpisodeRecord {
                            episode: i + 1,
                            end_step: (i + 1) * 100,
                            reward: i as f64 + bump + 0.125,
                            length: 100,
                            failed: false,
                        })
                        .collect(),
                    evals: vec![
                        EvalPoint {
                            step: 100,
                            mean_reward: 1.5 + bump,
                            std_reward: 0.25,
                        },
                        EvalPoint {
                            step: 200,
                            mean_reward: 2.5 + bump,
                            std_reward: 0.125,
                        },
                    ],
                    updates: vec![UpdateScalars {
                        step: 1,
                        critic_loss: 0.1,
                        actor_loss: -0.2,
                        alpha: 0.2,
                        mean_log_prob: -1.0,
                        lambda: 0.01,
                        mean_hinge: 0.001,
                        cvar_hinge: 0.01,
                        max_hinge: 0.02,
                        frac_violating: 0.125,
                    }],
                },
            }
        };

        // One seed: std columns are exactly zero.
        let single = vec![mk_record(Algorithm::Sac, 0, 0.0)];
        let rows = summarize(&single).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.std == 0.0 && r.min == r.max));

        // Five seeds: mean and std both populated.
        let five: Vec<RunRecord> = (0..5)
            .map(|s| mk_record(Algorithm::LcSac, s, s as f64))
            .collect();
        let rows = summarize(&five).unwrap();
        assert!(rows.iter().any(|r| r.std > 0.0));

        // Export and re-parse: bit-identical episodes.
        let mut records = single;
        records.extend(five);
        let written = export_metrics(&records, dir.path()).unwrap();
        assert!(written.iter().any(|p| p.ends_with("summary.csv")));
        assert!(written.iter().any(|p| p.ends_with("summary.json")));
        let eps = load_episodes_csv(dir.path().join("episodes_sac_seed0.csv")).unwrap();
        assert_eq!(eps, records[0].data.episodes);
    }

    #[test]
    fn run_record_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("record.json");
        let mut cfg = tiny_config();
        cfg.run.total_steps = 300;
        let (record, _) = train(&cfg, Algorithm::Sac, 13, None, None).unwrap();
        record.save_json(&path).unwrap();
        let back = RunRecord::load_json(&path).unwrap();
        assert_eq!(record.data, back.data);
        assert_eq!(back.meta.seed, 13);
    }

    #[test]
    fn checkpoints_are_written_when_out_dir_is_given() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let (_, agent) = train(&cfg, Algorithm::Sac, 14, None, Some(dir.path())).unwrap();
        let path = dir.path().join("best_checkpoint.json");
        assert!(path.exists(), "best checkpoint missing");
        let loaded = AgentParams::load_checkpoint(&path, &cfg.sac, 0).unwrap();
        // The checkpoint is the best-eval snapshot, not necessarily the
        // final agent; both must at least act finitely.
        let obs = Vector6::zeros();
        assert!(loaded.act_deterministic(&obs).unwrap().iter().all(|v| v.is_finite()));
        assert!(agent.act_deterministic(&obs).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn random_baseline_is_reproducible() {
        let cfg = tiny_config();
        let a = random_policy_baseline(&cfg, 3, 0).unwrap();
        let b = random_policy_baseline(&cfg, 3, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.0.is_finite());
    }

    #[test]
    fn trajectory_kinds_all_train_a_few_steps() {
        for kind in [TrajectoryKind::Circle, TrajectoryKind::Square] {
            let mut cfg = tiny_config();
            cfg.env.trajectory = kind;
            cfg.run.total_steps = 150;
            cfg.run.eval_interval = 150;
            let (record, _) = train(&cfg, Algorithm::Sac, 2, None, None).unwrap();
            assert_eq!(record.data.evals.len(), 1);
        }
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(1, "agent", 0);
        let b = derive_seed(1, "replay", 0);
        let c = derive_seed(2, "agent", 0);
        let d = derive_seed(1, "agent", 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a, derive_seed(1, "agent", 0));
    }

    #[test]
    fn mean_std_matches_hand_arithmetic() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_relative_eq!(m, 2.0, epsilon = 1e-15);
        assert_relative_eq!(s, 1.0, epsilon = 1e-15);
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }
}

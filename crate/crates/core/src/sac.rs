//! Baseline soft actor-critic on tracking-error observations.
//!
//! Twin critics with a min-target, a tanh-squashed Gaussian actor, learnable
//! entropy temperature and Polyak-averaged target critics. The observation
//! fed to every network is the 6-dim tracking error; critics take the error
//! concatenated with the 2-dim action.
//!
//! Update-round ordering (critics, then actor, then temperature, then
//! targets) is the caller's job — see the training harness. Each update
//! zeroes the gradient accumulators it steps, so the actor update may freely
//! backpropagate through critics without corrupting the next critic step.

use nalgebra::{DMatrix, DVector, Vector2, Vector6};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{
    squash_backward, squash_forward, Adam, Mlp, SquashedBatch, TensorBlob,
};
use crate::sim::Transition;

/// Observation dimension (tracking error).
pub const OBS_DIM: usize = 6;
/// Action dimension.
pub const ACT_DIM: usize = 2;

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

/// FIFO ring buffer with seeded uniform sampling (with replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be positive".into()));
        }
        Ok(Self {
            data: Vec::new(),
            capacity,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Insert a transition, evicting the oldest once at capacity.
    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Draw a uniform batch with replacement. Errors until the buffer holds
    /// at least `batch_size` transitions (the warm-up guard).
    pub fn sample(&mut self, batch_size: usize) -> Result<Vec<Transition>> {
        if self.data.len() < batch_size {
            return Err(Error::InvalidArgument(format!(
                "replay holds {} transitions, need {batch_size}; keep warming up",
                self.data.len()
            )));
        }
        Ok((0..batch_size)
            .map(|_| self.data[self.rng.random_range(0..self.data.len())])
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Agent
// ---------------------------------------------------------------------------

/// SAC hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Target policy entropy H̄; `-2` = −dim(action space).
    pub target_entropy: f64,
    pub init_alpha: f64,
    /// Init band multiplier of the actor's final layer (starts near hover).
    pub actor_final_scale: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr: 3e-4,
            batch_size: 128,
            hidden: vec![128, 128],
            target_entropy: -(ACT_DIM as f64),
            init_alpha: 0.2,
            actor_final_scale: 1e-2,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0,1], got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1], got {}", self.tau)));
        }
        if self.lr <= 0.0 || self.init_alpha <= 0.0 {
            return Err(Error::Config("lr and init_alpha must be positive".into()));
        }
        if self.batch_size == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("batch size and hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// All learnable state of one agent.
#[derive(Debug, Clone)]
pub struct AgentParams {
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub targets: [Mlp; 2],
    pub log_alpha: f64,
    pub target_entropy: f64,
    pub actor_opt: Adam,
    pub critic_opts: [Adam; 2],
    pub alpha_opt: Adam,
    noise_rng: ChaCha8Rng,
}

impl AgentParams {
    pub fn new(cfg: &SacConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_dims = vec![OBS_DIM];
        actor_dims.extend(&cfg.hidden);
        actor_dims.push(2 * ACT_DIM); // mean and log-std rows
        let mut critic_dims = vec![OBS_DIM + ACT_DIM];
        critic_dims.extend(&cfg.hidden);
        critic_dims.push(1);

        let actor = Mlp::new(&actor_dims, cfg.actor_final_scale, &mut init_rng)?;
        let critics = [
            Mlp::new(&critic_dims, 1.0, &mut init_rng)?,
            Mlp::new(&critic_dims, 1.0, &mut init_rng)?,
        ];
        let targets = critics.clone();
        let actor_opt = Adam::new(actor.n_params(), cfg.lr);
        let critic_opts = [
            Adam::new(critics[0].n_params(), cfg.lr),
            Adam::new(critics[1].n_params(), cfg.lr),
        ];
        Ok(Self {
            actor,
            critics,
            targets,
            log_alpha: cfg.init_alpha.ln(),
            target_entropy: cfg.target_entropy,
            actor_opt,
            critic_opts,
            alpha_opt: Adam::new(1, cfg.lr),
            noise_rng: ChaCha8Rng::seed_from_u64(seed ^ 0xda3e_39cb_94b9_5bdb),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Sample an exploration action with its log-density.
    pub fn act_stochastic(&mut self, obs: &Vector6<f64>) -> Result<(Vector2<f64>, f64)> {
        let x = DMatrix::from_column_slice(OBS_DIM, 1, obs.as_slice());
        let head = self.actor.forward(&x)?;
        let eps = DMatrix::from_fn(ACT_DIM, 1, |_, _| {
            self.noise_rng.sample::<f64, _>(StandardNormal)
        });
        let fwd = squash_forward(&head, &eps)?;
        Ok((
            Vector2::new(fwd.actions[(0, 0)], fwd.actions[(1, 0)]),
            fwd.log_probs[0],
        ))
    }

    /// Greedy action `tanh(μ)` for evaluation.
    pub fn act_deterministic(&self, obs: &Vector6<f64>) -> Result<Vector2<f64>> {
        let x = DMatrix::from_column_slice(OBS_DIM, 1, obs.as_slice());
        let head = self.actor.forward(&x)?;
        Ok(Vector2::new(head[(0, 0)].tanh(), head[(1, 0)].tanh()))
    }
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Column-per-sample views of a replay batch.
pub(crate) struct BatchMatrices {
    pub x: DMatrix<f64>,      // OBS_DIM × B, tracking errors
    pub u: DMatrix<f64>,      // ACT_DIM × B
    pub r: DVector<f64>,      // B
    pub d: DVector<f64>,      // B, 1.0 on failure terminals
    pub x_next: DMatrix<f64>, // OBS_DIM × B
}

impl BatchMatrices {
    pub fn new(batch: &[Transition]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let b = batch.len();
        let mut x = DMatrix::zeros(OBS_DIM, b);
        let mut u = DMatrix::zeros(ACT_DIM, b);
        let mut r = DVector::zeros(b);
        let mut d = DVector::zeros(b);
        let mut x_next = DMatrix::zeros(OBS_DIM, b);
        for (k, t) in batch.iter().enumerate() {
            x.view_mut((0, k), (OBS_DIM, 1)).copy_from(&t.error());
            u.view_mut((0, k), (ACT_DIM, 1)).copy_from(&t.action);
            r[k] = t.reward;
            d[k] = if t.done { 1.0 } else { 0.0 };
            x_next
                .view_mut((0, k), (OBS_DIM, 1))
                .copy_from(&t.next_error());
        }
        Ok(Self { x, u, r, d, x_next })
    }
}

fn concat_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((a.nrows(), 0), (b.nrows(), b.ncols())).copy_from(b);
    out
}

// ---------------------------------------------------------------------------
// Updates
// ---------------------------------------------------------------------------

/// Bellman targets `y = r + γ(1−d)(min_j Q̄_j(x′,u′) − α log π(u′|x′))` with
/// the next actions `u′` squashed from the supplied noise. Pure: no gradient
/// flows anywhere.
pub fn critic_targets(
    agent: &AgentParams,
    x_next: &DMatrix<f64>,
    r: &DVector<f64>,
    d: &DVector<f64>,
    eps: &DMatrix<f64>,
    gamma: f64,
) -> Result<DVector<f64>> {
    let head = agent.actor.forward(x_next)?;
    let fwd = squash_forward(&head, eps)?;
    let xu = concat_rows(x_next, &fwd.actions);
    let q0 = agent.targets[0].forward(&xu)?;
    let q1 = agent.targets[1].forward(&xu)?;
    let alpha = agent.alpha();
    let b = x_next.ncols();
    let mut y = DVector::zeros(b);
    for k in 0..b {
        let min_q = q0[(0, k)].min(q1[(0, k)]);
        y[k] = r[k] + gamma * (1.0 - d[k]) * (min_q - alpha * fwd.log_probs[k]);
        if !y[k].is_finite() {
            return Err(Error::NonFinite("critic target".into()));
        }
    }
    Ok(y)
}

/// One gradient step on both critics against the shared min-target.
/// Returns the mean of the two MSE losses.
pub fn critic_update(agent: &mut AgentParams, batch: &[Transition], gamma: f64) -> Result<f64> {
    let m = BatchMatrices::new(batch)?;
    let b = batch.len();
    let eps = DMatrix::from_fn(ACT_DIM, b, |_, _| {
        agent.noise_rng.sample::<f64, _>(StandardNormal)
    });
    let y = critic_targets(agent, &m.x_next, &m.r, &m.d, &eps, gamma)?;

    let xu = concat_rows(&m.x, &m.u);
    let mut loss_sum = 0.0;
    for j in 0..2 {
        agent.critics[j].zero_grad();
        let q = agent.critics[j].forward_train(&xu)?;
        let mut d_q = DMatrix::zeros(1, b);
        let mut loss = 0.0;
        for k in 0..b {
            let err = q[(0, k)] - y[k];
            loss += err * err;
            d_q[(0, k)] = 2.0 * err / b as f64;
        }
        loss /= b as f64;
        loss_sum += loss;
        agent.critics[j].backward(&d_q)?;
        agent.critics[j].adam_step(&mut agent.critic_opts[j])?;
    }
    Ok(loss_sum / 2.0)
}

/// Outcome of one actor step.
#[derive(Debug, Clone, Copy)]
pub struct ActorUpdate {
    /// Full minimized loss (SAC term plus any penalty term).
    pub loss: f64,
    /// Mean of `−min_j Q_j(x,ũ) + α log π(ũ|x)` alone.
    pub sac_loss: f64,
    /// Mean log-density of the sampled actions (entropy estimate = −this).
    pub mean_log_prob: f64,
}

/// Shared actor-step machinery.
///
/// `penalty` may inspect the reparameterized actions (ACT_DIM × B, batch
/// order) and return an extra loss term plus its gradient with respect to
/// those actions. Returning `None` leaves the computation path identical to
/// the baseline update — important so an inactive constraint cannot perturb
/// results even at the last bit.
pub(crate) fn actor_update_impl(
    agent: &mut AgentParams,
    batch: &[Transition],
    penalty: Option<&mut dyn FnMut(&DMatrix<f64>, &SquashedBatch) -> Result<Option<(DMatrix<f64>, f64)>>>,
) -> Result<ActorUpdate> {
    let m = BatchMatrices::new(batch)?;
    let b = batch.len();
    let alpha = agent.alpha();

    agent.actor.zero_grad();
    let head = agent.actor.forward_train(&m.x)?;
    let eps = DMatrix::from_fn(ACT_DIM, b, |_, _| {
        agent.noise_rng.sample::<f64, _>(StandardNormal)
    });
    let fwd = squash_forward(&head, &eps)?;

    // Q_j(x, ũ) with gradient flow back to the actions.
    let xu = concat_rows(&m.x, &fwd.actions);
    let q0 = agent.critics[0].forward_train(&xu)?;
    let q1 = agent.critics[1].forward_train(&xu)?;

    let mut sac_loss = 0.0;
    let mut mean_log_prob = 0.0;
    let mut d_q0 = DMatrix::zeros(1, b);
    let mut d_q1 = DMatrix::zeros(1, b);
    for k in 0..b {
        let (qmin, takes0) = if q0[(0, k)] <= q1[(0, k)] {
            (q0[(0, k)], true)
        } else {
            (q1[(0, k)], false)
        };
        sac_loss += -qmin + alpha * fwd.log_probs[k];
        mean_log_prob += fwd.log_probs[k];
        // ∂loss/∂q_min = −1/B, routed to whichever critic attains the min.
        if takes0 {
            d_q0[(0, k)] = -1.0 / b as f64;
        } else {
            d_q1[(0, k)] = -1.0 / b as f64;
        }
    }
    sac_loss /= b as f64;
    mean_log_prob /= b as f64;

    // Gradients w.r.t. the actions through both critics (inputs only; the
    // critic parameter accumulators are zeroed again by the next critic
    // update before they are applied).
    let din0 = agent.critics[0].backward(&d_q0)?;
    let din1 = agent.critics[1].backward(&d_q1)?;
    let mut d_actions =
        din0.view((OBS_DIM, 0), (ACT_DIM, b)) + din1.view((OBS_DIM, 0), (ACT_DIM, b));

    let mut penalty_loss = 0.0;
    if let Some(hook) = penalty {
        if let Some((d_pen, loss_term)) = hook(&fwd.actions, &fwd)? {
            if d_pen.shape() != (ACT_DIM, b) {
                return Err(Error::DimensionMismatch {
                    context: "actor penalty hook".into(),
                    expected: format!("{ACT_DIM}×{b}"),
                    actual: format!("{:?}", d_pen.shape()),
                });
            }
            d_actions += d_pen;
            penalty_loss = loss_term;
        }
    }

    // α · mean(log π) term.
    let d_log_probs = DVector::from_element(b, alpha / b as f64);

    let d_head = squash_backward(&fwd, &d_actions, &d_log_probs)?;
    agent.actor.backward(&d_head)?;
    agent.actor.adam_step(&mut agent.actor_opt)?;

    let loss = sac_loss + penalty_loss;
    if !loss.is_finite() {
        return Err(Error::NonFinite("actor loss".into()));
    }
    Ok(ActorUpdate {
        loss,
        sac_loss,
        mean_log_prob,
    })
}

/// One gradient step on the plain SAC objective
/// `J_SAC = −min_j Q_j(x,ũ) + α log π(ũ|x)`.
pub fn actor_update_baseline(agent: &mut AgentParams, batch: &[Transition]) -> Result<ActorUpdate> {
    actor_update_impl(agent, batch, None)
}

/// One gradient step on `J(α) = −α (mean log π + H̄)` in log-space.
/// `mean_log_prob` must come from the current actor's samples (the actor
/// update returns it). Returns the α loss.
pub fn temperature_update(agent: &mut AgentParams, mean_log_prob: f64) -> Result<f64> {
    let alpha = agent.alpha();
    let drive = mean_log_prob + agent.target_entropy;
    let loss = -alpha * drive;
    // d loss / d log α = −α (mean log π + H̄).
    let grad = -alpha * drive;
    let mut step = agent.alpha_opt.begin_step(1)?;
    step.update(&mut agent.log_alpha, grad)?;
    step.finish()?;
    Ok(loss)
}

/// Polyak-average the target critics toward the online critics:
/// `φ̄ ← τφ + (1−τ)φ̄`.
pub fn polyak_update(agent: &mut AgentParams, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must lie in (0, 1], got {tau}"
        )));
    }
    for j in 0..2 {
        for (tl, cl) in agent.targets[j].layers.iter_mut().zip(&agent.critics[j].layers) {
            tl.w.zip_apply(&cl.w, |t, c| *t = tau * c + (1.0 - tau) * *t);
            tl.b.zip_apply(&cl.b, |t, c| *t = tau * c + (1.0 - tau) * *t);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    blobs: Vec<TensorBlob>,
    log_alpha: f64,
    target_entropy: f64,
}

impl AgentParams {
    /// Persist all network parameters and the temperature. Optimizer moments
    /// and the exploration noise stream are not part of a checkpoint; a
    /// loaded agent is meant for evaluation or a fresh training leg.
    pub fn save_checkpoint<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut blobs = self.actor.to_blobs("actor");
        blobs.extend(self.critics[0].to_blobs("critic0"));
        blobs.extend(self.critics[1].to_blobs("critic1"));
        blobs.extend(self.targets[0].to_blobs("target0"));
        blobs.extend(self.targets[1].to_blobs("target1"));
        let json = CheckpointJson {
            blobs,
            log_alpha: self.log_alpha,
            target_entropy: self.target_entropy,
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), &json)?;
        Ok(())
    }

    pub fn load_checkpoint<P: AsRef<Path>>(path: P, cfg: &SacConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let file = std::fs::File::open(path)?;
        let json: CheckpointJson = serde_json::from_reader(BufReader::new(file))?;
        let actor = Mlp::from_blobs("actor", &json.blobs)?;
        let critics = [
            Mlp::from_blobs("critic0", &json.blobs)?,
            Mlp::from_blobs("critic1", &json.blobs)?,
        ];
        let targets = [
            Mlp::from_blobs("target0", &json.blobs)?,
            Mlp::from_blobs("target1", &json.blobs)?,
        ];
        if actor.input_dim() != OBS_DIM || actor.output_dim() != 2 * ACT_DIM {
            return Err(Error::ArtifactMismatch("actor blob dims are off".into()));
        }
        let actor_opt = Adam::new(actor.n_params(), cfg.lr);
        let critic_opts = [
            Adam::new(critics[0].n_params(), cfg.lr),
            Adam::new(critics[1].n_params(), cfg.lr),
        ];
        Ok(Self {
            actor,
            critics,
            targets,
            log_alpha: json.log_alpha,
            target_entropy: json.target_entropy,
            actor_opt,
            critic_opts,
            alpha_opt: Adam::new(1, cfg.lr),
            noise_rng: ChaCha8Rng::seed_from_u64(seed ^ 0xda3e_39cb_94b9_5bdb),
        })
    }
}

// ---------------------------------------------------------------------------

//! MAPPO-style learner: one actor shared by every intersection acting on its
//! local observation, and a critic on the concatenated joint observation.

mod adam;
mod gae;
mod mlp;
mod ppo;

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_space::{Context, ContextSpace};
use crate::curriculum::PerfMetrics;
use crate::rng::{derive_seed, RunRng, Stream};
use crate::traffic::{EnvError, EpisodeMetrics, NetworkSpec, TrafficEnv};

pub use adam::{clip_grad_norm, Adam};
pub use gae::{compute_gae, td_residuals};
pub use mlp::{ForwardCache, Mlp};
pub use ppo::{
    clipped_surrogate, log_softmax, loss_and_grad, normalize_advantages, ppo_update, synthetic_batch,
    total_loss, LossReport, PpoSample,
};

pub const CHECKPOINT_HEADER: &str = "# cmalcd-checkpoint v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainerError {
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub clip_eps: f64,
    pub lr: f64,
    pub mini_epochs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Episodes retained in the rollout buffer.
    pub buffer_size: usize,
    /// Most recent episodes used per update.
    pub batch_size: usize,
    /// Adam steps per mini-epoch (contiguous chunks of the batch).
    pub minibatches: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Per-network L2 clip; 0 disables.
    pub grad_clip_norm: f64,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    /// Accepted for completeness; PPO has no epsilon-greedy schedule.
    pub epsilon_anneal_time: u64,
    /// Accepted for completeness; PPO has no target network.
    pub target_update_interval: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            lr: 3e-4,
            mini_epochs: 4,
            entropy_coef: 0.001,
            value_coef: 1.0,
            gamma: 0.99,
            gae_lambda: 0.95,
            buffer_size: 10,
            batch_size: 1,
            minibatches: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 0.5,
            hidden_dim: 128,
            hidden_layers: 2,
            epsilon_anneal_time: 180_000,
            target_update_interval: 0.01,
        }
    }
}

impl TrainConfig {
    /// Small networks for fast tests.
    pub fn desk_test() -> Self {
        Self {
            hidden_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let err = |m: &str| Err(TrainerError::Config(m.into()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return err("clip_eps must lie in (0, 1)");
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return err("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return err("gae_lambda must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr must be > 0");
        }
        if self.mini_epochs < 1 || self.minibatches < 1 {
            return err("mini_epochs and minibatches must be >= 1");
        }
        if self.batch_size < 1 || self.buffer_size < self.batch_size {
            return err("need 1 <= batch_size <= buffer_size");
        }
        if self.hidden_dim < 1 {
            return err("hidden_dim must be >= 1");
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0 && self.grad_clip_norm >= 0.0) {
            return err("entropy_coef, value_coef and grad_clip_norm must be >= 0");
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0)
        {
            return err("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return err("adam_eps must be > 0");
        }
        Ok(())
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(self.hidden_dim, self.hidden_layers));
        s.push(output);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub obs_dim: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        n_agents: usize,
        n_actions: usize,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Self {
        let actor = Mlp::init(&cfg.sizes(obs_dim, n_actions), 0.01, rng);
        let critic = Mlp::init(&cfg.sizes(obs_dim * n_agents, 1), 1.0, rng);
        Self::from_networks(obs_dim, n_agents, n_actions, actor, critic, cfg)
    }

    fn from_networks(
        obs_dim: usize,
        n_agents: usize,
        n_actions: usize,
        actor: Mlp,
        critic: Mlp,
        cfg: &TrainConfig,
    ) -> Self {
        let opt = |n| Adam::new(n, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Self {
            obs_dim,
            n_agents,
            n_actions,
            actor_opt: opt(actor.n_params()),
            critic_opt: opt(critic.n_params()),
            actor,
            critic,
        }
    }

    pub fn for_env<R: Rng + ?Sized>(env: &TrafficEnv, cfg: &TrainConfig, rng: &mut R) -> Self {
        Self::new(env.obs_dim(), env.n_agents(), env.n_actions(), cfg, rng)
    }

    /// Writes the header line followed by the networks as JSON; optimizer
    /// moments are not stored.
    pub fn save(&self, path: &Path) -> Result<(), TrainerError> {
        #[derive(Serialize)]
        struct Out<'a> {
            obs_dim: usize,
            n_agents: usize,
            n_actions: usize,
            actor: &'a Mlp,
            critic: &'a Mlp,
        }
        let body = serde_json::to_string(&Out {
            obs_dim: self.obs_dim,
            n_agents: self.n_agents,
            n_actions: self.n_actions,
            actor: &self.actor,
            critic: &self.critic,
        })
        .map_err(|e| TrainerError::Checkpoint(e.to_string()))?;
        std::fs::write(path, format!("{CHECKPOINT_HEADER}\n{body}\n"))
            .map_err(|e| TrainerError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self, TrainerError> {
        #[derive(Deserialize)]
        struct In {
            obs_dim: usize,
            n_agents: usize,
            n_actions: usize,
            actor: Mlp,
            critic: Mlp,
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainerError::Checkpoint(format!("{}: {e}", path.display())))?;
        let (header, body) = text.split_once('\n').unwrap_or((&text, ""));
        if header.trim_end() != CHECKPOINT_HEADER {
            return Err(TrainerError::Checkpoint(format!(
                "{}: unsupported header {header:?}",
                path.display()
            )));
        }
        let d: In = serde_json::from_str(body)
            .map_err(|e| TrainerError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ok = d.actor.sizes.first() == Some(&d.obs_dim)
            && d.actor.output_dim() == d.n_actions
            && d.critic.input_dim() == d.obs_dim * d.n_agents
            && d.critic.output_dim() == 1
            && d.actor.params.len() == Mlp::n_params_for(&d.actor.sizes)
            && d.critic.params.len() == Mlp::n_params_for(&d.critic.sizes);
        if !ok {
            return Err(TrainerError::Checkpoint(format!("{}: inconsistent shapes", path.display())));
        }
        Ok(Self::from_networks(d.obs_dim, d.n_agents, d.n_actions, d.actor, d.critic, cfg))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Chosen action and its log-probability. Greedy ties go to the lowest index.
pub fn act(
    actor: &Mlp,
    obs: &[f64],
    mode: ActMode,
    rng: &mut RunRng,
) -> Result<(usize, f64), TrainerError> {
    let logits = actor.forward(obs);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(TrainerError::NonFiniteLogits);
    }
    let logp = log_softmax(&logits);
    let a = match mode {
        ActMode::Greedy => {
            let mut best = 0;
            for (i, z) in logits.iter().enumerate() {
                if *z > logits[best] {
                    best = i;
                }
            }
            best
        }
        ActMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = logp.len() - 1;
            for (i, l) in logp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    Ok((a, logp[a]))
}

pub fn centralized_value(critic: &Mlp, joint_obs: &[f64]) -> Result<f64, TrainerError> {
    if joint_obs.len() != critic.input_dim() {
        return Err(TrainerError::LengthMismatch {
            what: "joint observation",
            expected: critic.input_dim(),
            got: joint_obs.len(),
        });
    }
    Ok(critic.forward(joint_obs)[0])
}

/// One rollout with per-step rewards, critic values (plus the bootstrap value
/// of the final state, since episodes end by truncation) and PPO samples.
#[derive(Debug, Clone)]
pub struct Episode {
    pub samples: Vec<PpoSample>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub metrics: EpisodeMetrics,
}

/// Runs `env` (already reset) to the end of its episode.
pub fn collect_episode(
    policy: &Policy,
    env: &mut TrafficEnv,
    mode: ActMode,
    rng: &mut RunRng,
) -> Result<Episode, TrainerError> {
    let mut obs = env.observe_all();
    let mut samples = Vec::with_capacity(env.spec().episode_len);
    let mut rewards = Vec::with_capacity(env.spec().episode_len);
    let mut values = Vec::with_capacity(env.spec().episode_len + 1);
    while !env.done() {
        let joint = obs.concat();
        values.push(centralized_value(&policy.critic, &joint)?);
        let mut actions = Vec::with_capacity(obs.len());
        let mut log_probs = Vec::with_capacity(obs.len());
        for o in &obs {
            let (a, lp) = act(&policy.actor, o, mode, rng)?;
            actions.push(a);
            log_probs.push(lp);
        }
        let out = env.step(&actions)?;
        rewards.push(out.reward);
        samples.push(PpoSample {
            agent_obs: obs,
            actions,
            old_log_probs: log_probs,
            advantage: 0.0,
            joint_obs: joint,
            return_target: 0.0,
        });
        obs = out.observations;
    }
    values.push(centralized_value(&policy.critic, &obs.concat())?);
    Ok(Episode {
        samples,
        rewards,
        values,
        metrics: env.metrics(),
    })
}

/// Mean `|r_t + gamma * v_{t+1} - v_t|` per episode.
pub fn td_error_scores(episodes: &[Episode], gamma: f64) -> Result<Vec<f64>, TrainerError> {
    episodes
        .iter()
        .map(|e| {
            let td = td_residuals(&e.rewards, &e.values, gamma)?;
            Ok(if td.is_empty() {
                0.0
            } else {
                td.iter().map(|d| d.abs()).sum::<f64>() / td.len() as f64
            })
        })
        .collect()
}

impl From<EpisodeMetrics> for PerfMetrics {
    fn from(m: EpisodeMetrics) -> Self {
        PerfMetrics {
            mean_return: m.episode_return,
            avg_travel_time: m.avg_travel_time,
            throughput: m.throughput,
            avg_wait_time: m.avg_wait_time,
            avg_delay: m.avg_delay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStep {
    pub metrics: EpisodeMetrics,
    pub loss: LossReport,
    pub td_score: f64,
}

/// Policy plus rollout buffer.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub policy: Policy,
    buffer: VecDeque<Episode>,
    episodes: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, policy: Policy) -> Result<Self, TrainerError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            policy,
            buffer: VecDeque::new(),
            episodes: 0,
        })
    }

    pub fn episodes_trained(&self) -> u64 {
        self.episodes
    }

    /// Collects one sampled episode on `env` (already reset), stores it and
    /// runs a PPO update on the `batch_size` most recent episodes.
    pub fn train_episode(
        &mut self,
        env: &mut TrafficEnv,
        rng: &mut RunRng,
    ) -> Result<TrainStep, TrainerError> {
        let mut ep = collect_episode(&self.policy, env, ActMode::Sample, rng)?;
        let (adv, targets) = compute_gae(&ep.rewards, &ep.values, self.cfg.gamma, self.cfg.gae_lambda)?;
        for ((s, a), r) in ep.samples.iter_mut().zip(adv).zip(targets) {
            s.advantage = a;
            s.return_target = r;
        }
        let td_score = td_error_scores(std::slice::from_ref(&ep), self.cfg.gamma)?[0];
        let metrics = ep.metrics;
        self.buffer.push_back(ep);
        while self.buffer.len() > self.cfg.buffer_size {
            self.buffer.pop_front();
        }
        let take = self.cfg.batch_size.min(self.buffer.len());
        let mut batch: Vec<PpoSample> = self
            .buffer
            .iter()
            .skip(self.buffer.len() - take)
            .flat_map(|e| e.samples.iter().cloned())
            .collect();
        let mut adv: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
        normalize_advantages(&mut adv);
        batch.iter_mut().zip(adv).for_each(|(s, a)| s.advantage = a);
        let loss = ppo_update(&mut self.policy, &batch, &self.cfg);
        self.episodes += 1;
        Ok(TrainStep {
            metrics,
            loss,
            td_score,
        })
    }
}

/// Seed of evaluation episode `episode` on context `index`.
pub fn eval_episode_seed(seed: u64, index: usize, episode: usize) -> u64 {
    derive_seed(derive_seed(seed, Stream::EvalEnv, index as u64), Stream::EvalEnv, episode as u64)
}

/// Greedy rollouts on every context, averaged over `episodes_per_context`
/// episodes; parameters are only read.
pub fn evaluate_policy(
    policy: &Policy,
    spec: &NetworkSpec,
    space: &ContextSpace,
    contexts: &[Context],
    episodes_per_context: usize,
    seed: u64,
) -> Result<Vec<PerfMetrics>, TrainerError> {
    use rayon::prelude::*;
    contexts
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| evaluate_context(policy, spec, space, ctx, i, episodes_per_context, seed))
        .collect()
}

/// The `index`-th context of an [`evaluate_policy`] call, on its own.
pub fn evaluate_context(
    policy: &Policy,
    spec: &NetworkSpec,
    space: &ContextSpace,
    ctx: &Context,
    index: usize,
    episodes: usize,
    seed: u64,
) -> Result<PerfMetrics, TrainerError> {
    let mut env = TrafficEnv::new(spec.clone(), space, ctx, eval_episode_seed(seed, index, 0))?;
    let mut rng = crate::rng::stream_rng(seed, Stream::EvalEnv, index as u64);
    let mut rows = Vec::with_capacity(episodes);
    for e in 0..episodes {
        env.reset(space, ctx, eval_episode_seed(seed, index, e))?;
        let ep = collect_episode(policy, &mut env, ActMode::Greedy, &mut rng)?;
        rows.push(PerfMetrics::from(ep.metrics));
    }
    Ok(PerfMetrics::mean(&rows))
}

/// Mean critic value over the first `steps` steps of a greedy rollout on
/// `ctx`; the empty start state alone does not depend on the context.
pub fn greedy_value_probe(
    policy: &Policy,
    spec: &NetworkSpec,
    space: &ContextSpace,
    ctx: &Context,
    steps: usize,
    seed: u64,
) -> Result<f64, TrainerError> {
    let spec = NetworkSpec {
        episode_len: steps.max(1),
        ..spec.clone()
    };
    let mut env = TrafficEnv::new(spec, space, ctx, seed)?;
    let mut rng = crate::rng::stream_rng(seed, Stream::Probe, 0);
    let ep = collect_episode(policy, &mut env, ActMode::Greedy, &mut rng)?;
    Ok(ep.values.iter().sum::<f64>() / ep.values.len() as f64)
}

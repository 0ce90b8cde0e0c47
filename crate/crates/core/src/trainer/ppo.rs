//! Clipped-surrogate PPO loss over a shared actor and a centralized critic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::clip_grad_norm;
use super::mlp::Mlp;
use super::{Policy, TrainConfig};

/// One environment step: every agent's local view and choice plus the joint
/// critic input. The advantage is shared because the reward is.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub agent_obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantage: f64,
    pub joint_obs: Vec<f64>,
    pub return_target: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub aborted: bool,
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Rescales to mean 0 and standard deviation 1 (population std, floored at 1e-8).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Loss terms and their gradients with respect to both networks. The loss is
/// `-mean(surrogate) + value_coef * mean((V - R)^2) - entropy_coef * mean(H)`
/// where actor means run over (step, agent) pairs and the value mean over steps.
pub fn loss_and_grad(
    actor: &Mlp,
    critic: &Mlp,
    batch: &[PpoSample],
    cfg: &TrainConfig,
) -> (LossReport, Vec<f64>, Vec<f64>) {
    let mut g_actor = vec![0.0; actor.n_params()];
    let mut g_critic = vec![0.0; critic.n_params()];
    let mut r = LossReport::default();
    let n_actor: usize = batch.iter().map(|s| s.actions.len()).sum();
    if batch.is_empty() || n_actor == 0 {
        return (r, g_actor, g_critic);
    }
    let inv_a = 1.0 / n_actor as f64;
    let inv_c = 1.0 / batch.len() as f64;
    let eps = cfg.clip_eps;
    let mut clipped = 0usize;
    for s in batch {
        for ((obs, &a), &old) in s.agent_obs.iter().zip(&s.actions).zip(&s.old_log_probs) {
            let cache = actor.forward_cached(obs);
            let logp = log_softmax(cache.output());
            let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let ratio = (logp[a] - old).exp();
            let adv = s.advantage;
            let surr = clipped_surrogate(ratio, adv, eps);
            let unclipped = ratio * adv <= ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
            if !unclipped {
                clipped += 1;
            }
            let entropy: f64 = -p.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
            r.policy_loss -= surr * inv_a;
            r.entropy += entropy * inv_a;
            r.approx_kl += (old - logp[a]) * inv_a;
            // d(-surr)/dlogp_a, then through log-softmax; entropy term on top
            let d_logp = if unclipped { -ratio * adv * inv_a } else { 0.0 };
            let mut d_logits = vec![0.0; p.len()];
            for j in 0..p.len() {
                let ind = if j == a { 1.0 } else { 0.0 };
                d_logits[j] = d_logp * (ind - p[j])
                    + cfg.entropy_coef * inv_a * p[j] * (logp[j] + entropy);
            }
            actor.backward(&cache, &d_logits, &mut g_actor);
        }
        let cache = critic.forward_cached(&s.joint_obs);
        let err = cache.output()[0] - s.return_target;
        r.value_loss += err * err * inv_c;
        critic.backward(&cache, &[2.0 * cfg.value_coef * err * inv_c], &mut g_critic);
    }
    r.clip_fraction = clipped as f64 * inv_a;
    r.total_loss = r.policy_loss + cfg.value_coef * r.value_loss - cfg.entropy_coef * r.entropy;
    (r, g_actor, g_critic)
}

pub fn total_loss(actor: &Mlp, critic: &Mlp, batch: &[PpoSample], cfg: &TrainConfig) -> f64 {
    let mut policy = 0.0;
    let mut entropy = 0.0;
    let mut n_actor = 0usize;
    let mut value = 0.0;
    for s in batch {
        for ((obs, &a), &old) in s.agent_obs.iter().zip(&s.actions).zip(&s.old_log_probs) {
            let logp = log_softmax(&actor.forward(obs));
            policy -= clipped_surrogate((logp[a] - old).exp(), s.advantage, cfg.clip_eps);
            entropy -= logp.iter().map(|l| l.exp() * l).sum::<f64>();
            n_actor += 1;
        }
        let v = critic.forward(&s.joint_obs)[0];
        value += (v - s.return_target).powi(2);
    }
    if n_actor == 0 {
        return 0.0;
    }
    let na = n_actor as f64;
    policy / na + cfg.value_coef * value / batch.len() as f64 - cfg.entropy_coef * entropy / na
}

/// `mini_epochs` passes over `batch`, each split into `minibatches` contiguous
/// chunks with one Adam step per chunk. A non-finite loss or gradient restores
/// the parameters and optimizer state from before the call.
pub fn ppo_update(policy: &mut Policy, batch: &[PpoSample], cfg: &TrainConfig) -> LossReport {
    let snapshot = policy.clone();
    let chunks = cfg.minibatches.max(1).min(batch.len().max(1));
    let chunk_len = batch.len().div_ceil(chunks).max(1);
    let mut avg = LossReport::default();
    let mut n = 0.0;
    for _ in 0..cfg.mini_epochs {
        for mb in batch.chunks(chunk_len) {
            let (r, mut ga, mut gc) = loss_and_grad(&policy.actor, &policy.critic, mb, cfg);
            let finite = r.total_loss.is_finite()
                && ga.iter().all(|g| g.is_finite())
                && gc.iter().all(|g| g.is_finite());
            if !finite {
                *policy = snapshot;
                return LossReport {
                    aborted: true,
                    ..r
                };
            }
            let na = clip_grad_norm(&mut ga, cfg.grad_clip_norm);
            let nc = clip_grad_norm(&mut gc, cfg.grad_clip_norm);
            policy.actor_opt.step(&mut policy.actor.params, &ga);
            policy.critic_opt.step(&mut policy.critic.params, &gc);
            n += 1.0;
            avg.policy_loss += r.policy_loss;
            avg.value_loss += r.value_loss;
            avg.entropy += r.entropy;
            avg.total_loss += r.total_loss;
            avg.clip_fraction += r.clip_fraction;
            avg.approx_kl += r.approx_kl;
            avg.actor_grad_norm += na;
            avg.critic_grad_norm += nc;
        }
    }
    if n > 0.0 {
        for f in [
            &mut avg.policy_loss,
            &mut avg.value_loss,
            &mut avg.entropy,
            &mut avg.total_loss,
            &mut avg.clip_fraction,
            &mut avg.approx_kl,
            &mut avg.actor_grad_norm,
            &mut avg.critic_grad_norm,
        ] {
            *f /= n;
        }
    }
    avg
}

/// Random samples shaped for `policy`, with spread-out old log-probabilities
/// so ratios land on both sides of the clip range. Used by gradient checks.
pub fn synthetic_batch<R: Rng + ?Sized>(policy: &Policy, rng: &mut R, n: usize) -> Vec<PpoSample> {
    let obs_dim = policy.obs_dim;
    (0..n)
        .map(|_| {
            let agent_obs: Vec<Vec<f64>> = (0..policy.n_agents)
                .map(|_| (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let actions = (0..policy.n_agents)
                .map(|_| rng.random_range(0..policy.n_actions))
                .collect();
            let old_log_probs = (0..policy.n_agents)
                .map(|_| rng.random_range(-2.5..-0.5))
                .collect();
            let joint_obs = agent_obs.concat();
            PpoSample {
                agent_obs,
                actions,
                old_log_probs,
                advantage: rng.random_range(-1.0..1.0),
                joint_obs,
                return_target: rng.random_range(-1.0..1.0),
            }
        })
        .collect()
}

//! LLM-guided schedulers: the similarity-triggered blending loop and its two
//! ablations (no diversity mechanism, random-probability blending).

use rand::Rng;

use super::{
    CurriculumConfig, CurriculumError, DecisionSource, SchedulerState, StepDecision,
};
use crate::context_space::{Context, ContextSpace};
use crate::llm::{Proposer, ProposerOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidedVariant {
    Plain,
    Epsilon,
}

struct Proposal {
    outcome: ProposerOutcome,
    sigma: f64,
}

fn query(
    state: &mut SchedulerState,
    cfg: &CurriculumConfig,
    space: &ContextSpace,
    proposer: &mut dyn Proposer,
) -> Result<Proposal, CurriculumError> {
    let n = state.history.len();
    let window = &state.history[n.saturating_sub(cfg.window_w + 1)..];
    let outcome = proposer.propose(window, space, &mut state.proposer_rng);
    let window_contexts: Vec<Context> = window.iter().map(|e| e.context.clone()).collect();
    let sigma = space.similarity(&window_contexts, &outcome.context)?;
    Ok(Proposal { outcome, sigma })
}

fn uniform_prior(state: &mut SchedulerState) -> Context {
    let i = state.rng.random_range(0..state.history.len());
    state.history[i].context.clone()
}

fn finish(
    space: &ContextSpace,
    proposal: Proposal,
    blend_with: Option<(Context, f64)>,
    similarity_counter: Option<u32>,
) -> Result<StepDecision, CurriculumError> {
    let Proposal { outcome, sigma } = proposal;
    let proposal_ctx = outcome.context;
    let (next_context, blended) = match blend_with {
        Some((prior, alpha)) => (space.blend(&prior, &proposal_ctx, alpha)?, true),
        None => (proposal_ctx.clone(), false),
    };
    let source = if blended {
        DecisionSource::Blend
    } else if outcome.fallback_used {
        DecisionSource::Uniform
    } else {
        DecisionSource::Llm
    };
    Ok(StepDecision {
        next_context,
        proposal: proposal_ctx,
        sigma: Some(sigma),
        blended,
        replayed: false,
        source,
        similarity_counter,
        pic: None,
        proposer_attempts: Some(outcome.attempts),
        fallback_used: outcome.fallback_used,
    })
}

/// One iteration of the similarity-triggered loop: query with the sliding
/// window, count consecutive similar proposals, and once `k` accumulate blend
/// the proposal with a uniformly drawn history context and reset the counter.
pub fn cmalcd_step(
    state: &mut SchedulerState,
    cfg: &CurriculumConfig,
    space: &ContextSpace,
    proposer: &mut dyn Proposer,
) -> Result<StepDecision, CurriculumError> {
    if state.history.is_empty() {
        return Ok(StepDecision::simple(
            cfg.initial_context(space),
            DecisionSource::Fixed,
        ));
    }
    let proposal = query(state, cfg, space, proposer)?;
    if proposal.sigma >= cfg.delta {
        state.similarity_counter += 1;
    } else {
        state.similarity_counter = 0;
    }
    let blend_with = if state.similarity_counter >= cfg.max_similar_k {
        let prior = uniform_prior(state);
        state.similarity_counter = 0;
        Some((prior, cfg.alpha))
    } else {
        None
    };
    finish(space, proposal, blend_with, Some(state.similarity_counter))
}

pub fn cmalc_variant_step(
    state: &mut SchedulerState,
    cfg: &CurriculumConfig,
    space: &ContextSpace,
    proposer: &mut dyn Proposer,
    variant: GuidedVariant,
) -> Result<StepDecision, CurriculumError> {
    if state.history.is_empty() {
        return Ok(StepDecision::simple(
            cfg.initial_context(space),
            DecisionSource::Fixed,
        ));
    }
    let proposal = query(state, cfg, space, proposer)?;
    let blend_with = match variant {
        GuidedVariant::Plain => None,
        GuidedVariant::Epsilon => {
            // draw unconditionally so the stream does not depend on epsilon
            let u: f64 = state.rng.random();
            (u < cfg.epsilon).then(|| (uniform_prior(state), cfg.alpha))
        }
    };
    finish(space, proposal, blend_with, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::PerfMetrics;
    use crate::llm::{LlmProposer, MockPolicy, MockTransport};
    use crate::rng::{stream_rng, Stream};

    fn state(seed: u64) -> SchedulerState {
        SchedulerState::new(
            stream_rng(seed, Stream::Scheduler, 0),
            stream_rng(seed, Stream::Proposer, 0),
        )
    }

    fn constant(ctx: Context) -> LlmProposer<MockTransport> {
        LlmProposer::new(MockTransport::new(MockPolicy::Constant(ctx)), 3)
    }

    /// Runs `steps` decide/record cycles and returns the decisions.
    fn drive(
        proposer: &mut dyn Proposer,
        steps: usize,
        step_fn: &mut dyn FnMut(
            &mut SchedulerState,
            &mut dyn Proposer,
        ) -> Result<StepDecision, CurriculumError>,
    ) -> Vec<StepDecision> {
        let mut s = state(1);
        let mut out = Vec::new();
        for _ in 0..steps {
            let d = step_fn(&mut s, proposer).unwrap();
            s.record(d.next_context.clone(), PerfMetrics::default());
            out.push(d);
        }
        out
    }

    #[test]
    fn identical_proposals_blend_every_third_call() {
        let space = ContextSpace::traffic();
        let cfg = CurriculumConfig::default();
        let mut p = constant(space.midpoint());
        let ds = drive(&mut p, 10, &mut |s, p| cmalcd_step(s, &cfg, &space, p));
        let blended: Vec<usize> = (0..10).filter(|&i| ds[i].blended).collect();
        assert_eq!(blended, vec![3, 6, 9]);
        assert_eq!(ds[0].source, DecisionSource::Fixed);
        let counters: Vec<u32> = ds[1..].iter().map(|d| d.similarity_counter.unwrap()).collect();
        assert_eq!(counters, vec![1, 2, 0, 1, 2, 0, 1, 2, 0]);
        for d in &ds[1..] {
            assert_eq!(d.blended, d.source == DecisionSource::Blend);
        }
    }

    #[test]
    fn far_proposal_resets_counter() {
        let space = ContextSpace::traffic();
        let cfg = CurriculumConfig::default();
        let mut s = state(2);
        s.record(space.lower_corner(), PerfMetrics::default());
        s.similarity_counter = 2;
        let mut p = constant(space.upper_corner());
        let d = cmalcd_step(&mut s, &cfg, &space, &mut p).unwrap();
        assert_eq!(s.similarity_counter, 0);
        assert!(!d.blended);
        assert_eq!(d.next_context, space.upper_corner());
        assert!(d.sigma.unwrap() < 1e-12);
    }

    #[test]
    fn zero_alpha_blend_returns_proposal() {
        let space = ContextSpace::traffic();
        let cfg = CurriculumConfig {
            alpha: 0.0,
            max_similar_k: 1,
            delta: 0.0,
            ..CurriculumConfig::default()
        };
        let mut s = state(3);
        s.record(space.lower_corner(), PerfMetrics::default());
        let mut p = constant(space.upper_corner());
        let d = cmalcd_step(&mut s, &cfg, &space, &mut p).unwrap();
        assert!(d.blended);
        assert_eq!(d.next_context, space.upper_corner());
    }

    #[test]
    fn plain_variant_never_blends_and_epsilon_one_always_does() {
        let space = ContextSpace::traffic();
        let cfg = CurriculumConfig {
            epsilon: 1.0,
            ..CurriculumConfig::default()
        };
        let mut p = constant(space.upper_corner());
        let ds = drive(&mut p, 20, &mut |s, p| {
            cmalc_variant_step(s, &cfg, &space, p, GuidedVariant::Plain)
        });
        assert!(ds.iter().all(|d| !d.blended));
        let ds = drive(&mut p, 20, &mut |s, p| {
            cmalc_variant_step(s, &cfg, &space, p, GuidedVariant::Epsilon)
        });
        assert!(ds[1..].iter().all(|d| d.blended));
    }

    #[test]
    fn epsilon_blend_rate_matches_probability() {
        let space = ContextSpace::traffic();
        let cfg = CurriculumConfig::default();
        let mut p = constant(space.upper_corner());
        let n = 10_000;
        let ds = drive(&mut p, n + 1, &mut |s, p| {
            cmalc_variant_step(s, &cfg, &space, p, GuidedVariant::Epsilon)
        });
        let rate = ds[1..].iter().filter(|d| d.blended).count() as f64 / n as f64;
        assert!((rate - 0.1).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn never_similar_equals_plain() {
        let space = ContextSpace::traffic();
        let never = CurriculumConfig {
            delta: 1.5,
            ..CurriculumConfig::default()
        };
        let mut p1 = LlmProposer::new(MockTransport::new(MockPolicy::ReplayBestPerturbed), 3);
        let mut p2 = LlmProposer::new(MockTransport::new(MockPolicy::ReplayBestPerturbed), 3);
        let a = drive(&mut p1, 30, &mut |s, p| cmalcd_step(s, &never, &space, p));
        let b = drive(&mut p2, 30, &mut |s, p| {
            cmalc_variant_step(s, &never, &space, p, GuidedVariant::Plain)
        });
        let ctx = |v: &[StepDecision]| v.iter().map(|d| d.next_context.clone()).collect::<Vec<_>>();
        assert_eq!(ctx(&a), ctx(&b));
        assert!(a.iter().all(|d| !d.blended));
    }

    #[test]
    fn k_one_delta_zero_blends_every_step() {
        let space = ContextSpace::traffic();
        let cfg = CurriculumConfig {
            delta: 0.0,
            max_similar_k: 1,
            ..CurriculumConfig::default()
        };
        let mut p = LlmProposer::new(MockTransport::new(MockPolicy::ReplayBestPerturbed), 3);
        let ds = drive(&mut p, 25, &mut |s, p| cmalcd_step(s, &cfg, &space, p));
        assert!(ds[1..].iter().all(|d| d.blended && d.similarity_counter == Some(0)));
    }
}

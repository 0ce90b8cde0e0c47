//! Offline stand-ins for the language model. Replies use the same
//! insights-then-marker layout the follow-up prompt asks for.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::{render_context_json, PromptBundle, SUGGESTION_MARKER};
use super::{Transport, TransportError};
use crate::context_space::{Context, ContextSpace, ParamKind};
use crate::curriculum::HistoryEntry;
use crate::rng::RunRng;

/// Fraction of a parameter's range added by the replay-best policy.
pub const NUDGE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub enum MockPolicy {
    /// Best-`mean_return` context of the window with one component raised by
    /// 5% of its range.
    ReplayBestPerturbed,
    /// Pops contexts from a preloaded list.
    Scripted(VecDeque<Context>),
    /// Always the same context.
    Constant(Context),
}

/// Config-level name of a mock policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockPolicyKind {
    ReplayBestPerturbed,
    Constant,
}

impl std::str::FromStr for MockPolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "replay-best-perturbed" => Ok(Self::ReplayBestPerturbed),
            "constant" => Ok(Self::Constant),
            other => Err(format!(
                "unknown mock policy {other:?} (expected replay-best-perturbed or constant)"
            )),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MockError {
    #[error("scripted mock has no replies left")]
    ScriptExhausted,
}

fn render_reply(space: &ContextSpace, insight: &str, ctx: &Context) -> String {
    format!(
        "{insight}\n\n{SUGGESTION_MARKER} {}",
        render_context_json(space, ctx)
    )
}

pub fn mock_propose(
    window: &[HistoryEntry],
    space: &ContextSpace,
    rng: &mut RunRng,
    policy: &mut MockPolicy,
) -> Result<String, MockError> {
    match policy {
        MockPolicy::ReplayBestPerturbed => {
            let mut best: Option<&HistoryEntry> = None;
            for e in window {
                if best.is_none_or(|b| e.metrics.mean_return > b.metrics.mean_return) {
                    best = Some(e);
                }
            }
            let base = best.map_or_else(|| space.midpoint(), |e| e.context.clone());
            let idx = rng.random_range(0..space.dim());
            let p = &space.params()[idx];
            let mut raw = base.0.clone();
            raw[idx] += match p.kind {
                // at least one lattice step, or the nudge would round away
                ParamKind::Integer => (NUDGE_FRACTION * p.range()).max(1.0),
                ParamKind::Continuous => NUDGE_FRACTION * p.range(),
            };
            let next = space
                .clamp_and_round(&raw)
                .expect("nudged context of a valid base is finite");
            let insight = match best {
                Some(e) => format!(
                    "The strongest recent trial reached a mean return of {:.4}. Raising {} slightly keeps the curriculum close to what worked while adding difficulty.",
                    e.metrics.mean_return, p.name
                ),
                None => format!("No trials yet; starting near the middle of the space with {} raised.", p.name),
            };
            Ok(render_reply(space, &insight, &next))
        }
        MockPolicy::Scripted(queue) => {
            let ctx = queue.pop_front().ok_or(MockError::ScriptExhausted)?;
            Ok(render_reply(space, "Following the scripted curriculum.", &ctx))
        }
        MockPolicy::Constant(ctx) => Ok(render_reply(
            space,
            "Repeating the same configuration.",
            ctx,
        )),
    }
}

pub struct MockTransport {
    pub policy: MockPolicy,
    served: usize,
}

impl MockTransport {
    pub fn new(policy: MockPolicy) -> Self {
        Self { policy, served: 0 }
    }

    pub fn served(&self) -> usize {
        self.served
    }
}

impl Transport for MockTransport {
    fn complete(
        &mut self,
        _prompt: &PromptBundle,
        window: &[HistoryEntry],
        space: &ContextSpace,
        rng: &mut RunRng,
    ) -> Result<String, TransportError> {
        let reply = mock_propose(window, space, rng, &mut self.policy)
            .map_err(|e| TransportError(e.to_string()))?;
        self.served += 1;
        Ok(reply)
    }
}

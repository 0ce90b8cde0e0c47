//! Curriculum schedulers behind a single [`Scheduler`] interface.
//!
//! Every scheduler follows the same two-beat cycle: [`Scheduler::decide`]
//! picks the next training context, the caller trains on it, and
//! [`Scheduler::record`] appends the resulting `(context, metrics)` pair to
//! the history buffer.

mod baselines;
mod guided;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_space::{Context, ContextError, ContextSpace};
use crate::llm::Proposer;
use crate::rng::RunRng;

pub use baselines::{
    accel_step, domain_randomization_step, no_curriculum_step, plr_probabilities, plr_step,
    space_step, Level, LevelBuffer, SpaceTracker,
};
pub use guided::{cmalc_variant_step, cmalcd_step, GuidedVariant};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurriculumError {
    #[error("invalid curriculum config: {0}")]
    Config(String),
    #[error(transparent)]
    Context(#[from] ContextError),
}

/// Training-phase summary handed back to the scheduler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerfMetrics {
    pub mean_return: f64,
    pub avg_travel_time: f64,
    pub throughput: f64,
    pub avg_wait_time: f64,
    pub avg_delay: f64,
}

impl PerfMetrics {
    pub const FIELDS: [&'static str; 5] = [
        "mean_return",
        "avg_travel_time",
        "throughput",
        "avg_wait_time",
        "avg_delay",
    ];

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.mean_return,
            self.avg_travel_time,
            self.throughput,
            self.avg_wait_time,
            self.avg_delay,
        ]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            mean_return: a[0],
            avg_travel_time: a[1],
            throughput: a[2],
            avg_wait_time: a[3],
            avg_delay: a[4],
        }
    }

    /// Component-wise mean; zero for an empty slice.
    pub fn mean(rows: &[PerfMetrics]) -> PerfMetrics {
        if rows.is_empty() {
            return PerfMetrics::default();
        }
        let mut acc = [0.0; 5];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.as_array()) {
                *a += v;
            }
        }
        let n = rows.len() as f64;
        PerfMetrics::from_array(acc.map(|a| a / n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub context: Context,
    pub metrics: PerfMetrics,
    pub step_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Blend weight of the prior context.
    pub alpha: f64,
    /// Sliding window reaches back `window_w` steps (so holds `w + 1` entries).
    pub window_w: usize,
    /// Similarity threshold; a proposal counts as similar when `sigma >= delta`.
    pub delta: f64,
    pub max_similar_k: u32,
    /// Blend probability of the epsilon ablation.
    pub epsilon: f64,
    /// Values in space order; the space midpoint when absent.
    pub initial_context: Option<Context>,
    pub episodes_per_context: usize,
    pub plr_replay_prob: f64,
    pub plr_temperature: f64,
    pub plr_staleness_coef: f64,
    pub accel_population: usize,
    pub accel_step_fraction: f64,
    pub space_converge_tol: f64,
    pub space_patience: u32,
    pub space_fresh_samples: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            window_w: 3,
            delta: 0.9,
            max_similar_k: 3,
            epsilon: 0.1,
            initial_context: None,
            episodes_per_context: 1,
            plr_replay_prob: 0.5,
            plr_temperature: 0.1,
            plr_staleness_coef: 0.1,
            accel_population: 16,
            accel_step_fraction: 0.1,
            space_converge_tol: 0.01,
            space_patience: 2,
            space_fresh_samples: 5,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self, space: &ContextSpace) -> Result<(), CurriculumError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(CurriculumError::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("epsilon", self.epsilon)?;
        unit("plr_replay_prob", self.plr_replay_prob)?;
        unit("plr_staleness_coef", self.plr_staleness_coef)?;
        if !(self.delta >= 0.0) {
            return Err(CurriculumError::Config("delta must be >= 0".into()));
        }
        if self.window_w < 1 {
            return Err(CurriculumError::Config("window_w must be >= 1".into()));
        }
        if self.max_similar_k < 1 {
            return Err(CurriculumError::Config("max_similar_k must be >= 1".into()));
        }
        if self.episodes_per_context < 1 {
            return Err(CurriculumError::Config("episodes_per_context must be >= 1".into()));
        }
        if !(self.plr_temperature > 0.0) {
            return Err(CurriculumError::Config("plr_temperature must be > 0".into()));
        }
        if self.accel_population < 1 {
            return Err(CurriculumError::Config("accel_population must be >= 1".into()));
        }
        if !(self.accel_step_fraction > 0.0 && self.accel_step_fraction <= 1.0) {
            return Err(CurriculumError::Config("accel_step_fraction must lie in (0, 1]".into()));
        }
        if !(self.space_converge_tol >= 0.0) {
            return Err(CurriculumError::Config("space_converge_tol must be >= 0".into()));
        }
        if self.space_patience < 1 {
            return Err(CurriculumError::Config("space_patience must be >= 1".into()));
        }
        if let Some(c) = &self.initial_context {
            space.validate(c)?;
        }
        Ok(())
    }

    pub fn initial_context(&self, space: &ContextSpace) -> Context {
        self.initial_context
            .clone()
            .unwrap_or_else(|| space.midpoint())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    NoCurriculum,
    DomainRandomization,
    Plr,
    Accel,
    Space,
    Cmalcd,
    Cmalc,
    CmalcEpsilon,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 8] = [
        SchedulerKind::NoCurriculum,
        SchedulerKind::DomainRandomization,
        SchedulerKind::Plr,
        SchedulerKind::Accel,
        SchedulerKind::Space,
        SchedulerKind::Cmalcd,
        SchedulerKind::Cmalc,
        SchedulerKind::CmalcEpsilon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::NoCurriculum => "no-curriculum",
            SchedulerKind::DomainRandomization => "domain-randomization",
            SchedulerKind::Plr => "plr",
            SchedulerKind::Accel => "accel",
            SchedulerKind::Space => "space",
            SchedulerKind::Cmalcd => "cmalcd",
            SchedulerKind::Cmalc => "cmalc",
            SchedulerKind::CmalcEpsilon => "cmalc-epsilon",
        }
    }

    pub fn uses_proposer(self) -> bool {
        matches!(
            self,
            SchedulerKind::Cmalcd | SchedulerKind::Cmalc | SchedulerKind::CmalcEpsilon
        )
    }

    pub fn uses_td_scores(self) -> bool {
        matches!(self, SchedulerKind::Plr | SchedulerKind::Accel)
    }
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = SchedulerKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown scheduler {s:?} (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionSource {
    Llm,
    Blend,
    Uniform,
    Replay,
    Mutation,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecision {
    pub next_context: Context,
    /// Pre-blend proposal; equals `next_context` when nothing was blended.
    pub proposal: Context,
    pub sigma: Option<f64>,
    pub blended: bool,
    pub replayed: bool,
    pub source: DecisionSource,
    /// Similarity counter after the decision (cMALC-D only).
    pub similarity_counter: Option<u32>,
    /// Performance improvement capacity that drove a SPACE decision.
    pub pic: Option<f64>,
    pub proposer_attempts: Option<u32>,
    pub fallback_used: bool,
}

impl StepDecision {
    pub fn simple(ctx: Context, source: DecisionSource) -> Self {
        Self {
            proposal: ctx.clone(),
            next_context: ctx,
            sigma: None,
            blended: false,
            replayed: source == DecisionSource::Replay,
            source,
            similarity_counter: None,
            pic: None,
            proposer_attempts: None,
            fallback_used: false,
        }
    }
}

/// Critic-side estimate `V(s0, c)` for a candidate context.
pub trait ContextValuer {
    fn value(&mut self, ctx: &Context) -> f64;
}

impl<F: FnMut(&Context) -> f64> ContextValuer for F {
    fn value(&mut self, ctx: &Context) -> f64 {
        self(ctx)
    }
}

/// Buffer `H` plus per-strategy extras.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    pub history: Vec<HistoryEntry>,
    pub similarity_counter: u32,
    pub rng: RunRng,
    pub proposer_rng: RunRng,
    pub levels: LevelBuffer,
    pub space_tracker: SpaceTracker,
    /// Level index being replayed by the pending decision, if any.
    pub pending_level: Option<usize>,
}

impl SchedulerState {
    pub fn new(rng: RunRng, proposer_rng: RunRng) -> Self {
        Self {
            history: Vec::new(),
            similarity_counter: 0,
            rng,
            proposer_rng,
            levels: LevelBuffer::default(),
            space_tracker: SpaceTracker::default(),
            pending_level: None,
        }
    }

    /// Appends `(context, metrics)` with the next step index.
    pub fn record(&mut self, context: Context, metrics: PerfMetrics) {
        let step_index = self.history.last().map_or(0, |e| e.step_index + 1);
        self.history.push(HistoryEntry {
            context,
            metrics,
            step_index,
        });
    }

    /// The `min(w + 1, |H|)` most recent entries.
    pub fn window(&self, w: usize) -> &[HistoryEntry] {
        let n = self.history.len();
        &self.history[n.saturating_sub(w + 1)..]
    }

    pub fn history_contexts(&self) -> Vec<Context> {
        self.history.iter().map(|e| e.context.clone()).collect()
    }
}

/// Extra inputs some schedulers need when deciding.
#[derive(Default)]
pub struct DecideInputs<'a> {
    pub proposer: Option<&'a mut dyn Proposer>,
    pub valuer: Option<&'a mut dyn ContextValuer>,
}

pub struct Scheduler {
    kind: SchedulerKind,
    cfg: CurriculumConfig,
    space: ContextSpace,
    state: SchedulerState,
}

impl Scheduler {
    pub fn new(
        kind: SchedulerKind,
        cfg: CurriculumConfig,
        space: ContextSpace,
        rng: RunRng,
        proposer_rng: RunRng,
    ) -> Result<Self, CurriculumError> {
        cfg.validate(&space)?;
        Ok(Self {
            kind,
            cfg,
            space,
            state: SchedulerState::new(rng, proposer_rng),
        })
    }

    pub fn kind(&self) -> SchedulerKind {
        self.kind
    }

    pub fn config(&self) -> &CurriculumConfig {
        &self.cfg
    }

    pub fn space(&self) -> &ContextSpace {
        &self.space
    }

    pub fn state(&self) -> &SchedulerState {
        &self.state
    }

    pub fn decide(&mut self, inputs: DecideInputs<'_>) -> Result<StepDecision, CurriculumError> {
        let DecideInputs { proposer, valuer } = inputs;
        let need = |what: &str| CurriculumError::Config(format!("{} needs a {what}", self.kind));
        let decision = match self.kind {
            SchedulerKind::NoCurriculum => no_curriculum_step(&self.cfg, &self.space),
            SchedulerKind::DomainRandomization => {
                domain_randomization_step(&mut self.state, &self.space)
            }
            SchedulerKind::Plr => plr_step(&mut self.state, &self.cfg, &self.space),
            SchedulerKind::Accel => accel_step(&mut self.state, &self.cfg, &self.space)?,
            SchedulerKind::Space => {
                let valuer = valuer.ok_or_else(|| need("value estimator"))?;
                space_step(&mut self.state, &self.cfg, &self.space, valuer)
            }
            SchedulerKind::Cmalcd => {
                let proposer = proposer.ok_or_else(|| need("proposer"))?;
                cmalcd_step(&mut self.state, &self.cfg, &self.space, proposer)?
            }
            SchedulerKind::Cmalc | SchedulerKind::CmalcEpsilon => {
                let proposer = proposer.ok_or_else(|| need("proposer"))?;
                let variant = if self.kind == SchedulerKind::Cmalc {
                    GuidedVariant::Plain
                } else {
                    GuidedVariant::Epsilon
                };
                cmalc_variant_step(&mut self.state, &self.cfg, &self.space, proposer, variant)?
            }
        };
        debug_assert!(self.space.contains(&decision.next_context));
        Ok(decision)
    }

    /// Appends a finished training phase. `td_score` feeds the level buffer of
    /// PLR and ACCEL and is ignored by the other schedulers.
    pub fn record(&mut self, context: Context, metrics: PerfMetrics, td_score: Option<f64>) {
        if self.kind.uses_td_scores() {
            if let Some(score) = td_score {
                let step = self.state.history.len() as u64;
                let cap = (self.kind == SchedulerKind::Accel).then_some(self.cfg.accel_population);
                self.state.levels.update(
                    self.state.pending_level.take(),
                    context.clone(),
                    score,
                    step,
                    cap,
                );
            }
        }
        self.state.pending_level = None;
        self.state.record(context, metrics);
    }
}

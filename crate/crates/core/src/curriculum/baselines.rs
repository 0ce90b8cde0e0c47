//! Baseline schedulers: fixed context, domain randomization, prioritized
//! level replay, ACCEL-style mutation of high-score levels, and SPACE.

use rand::Rng;

use super::{
    ContextValuer, CurriculumConfig, CurriculumError, DecisionSource, SchedulerState,
    StepDecision,
};
use crate::context_space::{Context, ContextSpace};

pub fn no_curriculum_step(cfg: &CurriculumConfig, space: &ContextSpace) -> StepDecision {
    StepDecision::simple(cfg.initial_context(space), DecisionSource::Fixed)
}

pub fn domain_randomization_step(state: &mut SchedulerState, space: &ContextSpace) -> StepDecision {
    StepDecision::simple(space.sample_uniform(&mut state.rng), DecisionSource::Uniform)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub context: Context,
    /// Mean absolute TD error of the last visit.
    pub score: f64,
    pub last_seen: u64,
    pub first_seen: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelBuffer {
    pub levels: Vec<Level>,
}

impl LevelBuffer {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Updates the replayed level, or inserts a new one; with a cap, the
    /// lowest-scoring level (oldest among ties) is evicted on overflow.
    pub fn update(
        &mut self,
        replayed: Option<usize>,
        context: Context,
        score: f64,
        step: u64,
        cap: Option<usize>,
    ) {
        match replayed.and_then(|i| self.levels.get_mut(i)) {
            Some(level) => {
                level.score = score;
                level.last_seen = step;
            }
            None => self.levels.push(Level {
                context,
                score,
                last_seen: step,
                first_seen: step,
            }),
        }
        if let Some(cap) = cap {
            while self.levels.len() > cap {
                let worst = self
                    .levels
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        a.score
                            .total_cmp(&b.score)
                            .then(a.first_seen.cmp(&b.first_seen))
                    })
                    .map(|(i, _)| i)
                    .expect("non-empty");
                self.levels.remove(worst);
            }
        }
    }
}

/// Replay distribution `(1 - rho) * P_rank + rho * P_stale` over `levels`.
///
/// `P_rank(i) ∝ (1 / rank_i)^(1 / temperature)` with ranks by score
/// (descending, ties by buffer order); `P_stale(i) ∝ now - last_seen_i`.
pub fn plr_probabilities(levels: &[Level], temperature: f64, staleness: f64, now: u64) -> Vec<f64> {
    let n = levels.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| levels[b].score.total_cmp(&levels[a].score));
    let mut log_w = vec![0.0; n];
    for (rank0, &i) in order.iter().enumerate() {
        log_w[i] = -((rank0 + 1) as f64).ln() / temperature;
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let rank_p: Vec<f64> = w.iter().map(|x| x / total).collect();

    let stale: Vec<f64> = levels
        .iter()
        .map(|l| now.saturating_sub(l.last_seen) as f64)
        .collect();
    let stale_total: f64 = stale.iter().sum();
    if staleness == 0.0 || stale_total == 0.0 {
        return rank_p;
    }
    rank_p
        .iter()
        .zip(&stale)
        .map(|(p, s)| (1.0 - staleness) * p + staleness * s / stale_total)
        .collect()
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn replay_choice(state: &mut SchedulerState, cfg: &CurriculumConfig) -> Option<usize> {
    let u: f64 = state.rng.random();
    if state.levels.is_empty() || u >= cfg.plr_replay_prob {
        return None;
    }
    let now = state.history.len() as u64;
    let probs = plr_probabilities(
        &state.levels.levels,
        cfg.plr_temperature,
        cfg.plr_staleness_coef,
        now,
    );
    Some(sample_index(&probs, &mut state.rng))
}

/// Replays a prioritized seen level with probability `plr_replay_prob`,
/// otherwise samples a new uniform level.
pub fn plr_step(
    state: &mut SchedulerState,
    cfg: &CurriculumConfig,
    space: &ContextSpace,
) -> StepDecision {
    match replay_choice(state, cfg) {
        Some(i) => {
            state.pending_level = Some(i);
            StepDecision::simple(state.levels.levels[i].context.clone(), DecisionSource::Replay)
        }
        None => {
            state.pending_level = None;
            StepDecision::simple(space.sample_uniform(&mut state.rng), DecisionSource::Uniform)
        }
    }
}

/// With probability `plr_replay_prob` mutates a prioritized member of the
/// capped high-score population; otherwise samples a new uniform level.
pub fn accel_step(
    state: &mut SchedulerState,
    cfg: &CurriculumConfig,
    space: &ContextSpace,
) -> Result<StepDecision, CurriculumError> {
    state.pending_level = None;
    match replay_choice(state, cfg) {
        Some(i) => {
            let parent = state.levels.levels[i].context.clone();
            let child = space.mutate(&parent, cfg.accel_step_fraction, &mut state.rng)?;
            let mut d = StepDecision::simple(child, DecisionSource::Mutation);
            d.proposal = parent;
            Ok(d)
        }
        None => Ok(StepDecision::simple(
            space.sample_uniform(&mut state.rng),
            DecisionSource::Uniform,
        )),
    }
}

/// Value bookkeeping for SPACE: the previous estimate of every context the
/// scheduler has evaluated, the context being trained, and the count of
/// consecutive low-improvement steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpaceTracker {
    pub current: Option<Context>,
    pub previous_values: Vec<(Context, f64)>,
    pub below_tol: u32,
}

impl SpaceTracker {
    /// `V_t(c) - V_{t-1}(c)`, storing `V_t(c)`. Unseen contexts have `V_{t-1} = 0`.
    pub fn pic(&mut self, ctx: &Context, value: f64) -> f64 {
        match self.previous_values.iter_mut().find(|(c, _)| c == ctx) {
            Some((_, prev)) => {
                let pic = value - *prev;
                *prev = value;
                pic
            }
            None => {
                self.previous_values.push((ctx.clone(), value));
                value
            }
        }
    }
}

/// Keeps training the current context while its PIC exceeds
/// `space_converge_tol`. After `space_patience` consecutive steps at or below
/// the tolerance it switches to the candidate with maximal PIC among the
/// other history contexts (in step order) followed by `space_fresh_samples`
/// new uniform samples; ties go to the earliest candidate.
pub fn space_step(
    state: &mut SchedulerState,
    cfg: &CurriculumConfig,
    space: &ContextSpace,
    valuer: &mut dyn ContextValuer,
) -> StepDecision {
    let Some(current) = state.space_tracker.current.clone() else {
        let c0 = cfg.initial_context(space);
        state.space_tracker.current = Some(c0.clone());
        return StepDecision::simple(c0, DecisionSource::Fixed);
    };
    let v = valuer.value(&current);
    let pic = state.space_tracker.pic(&current, v);
    if pic > cfg.space_converge_tol {
        state.space_tracker.below_tol = 0;
    } else {
        state.space_tracker.below_tol += 1;
    }
    if state.space_tracker.below_tol < cfg.space_patience {
        let mut d = StepDecision::simple(current, DecisionSource::Replay);
        d.pic = Some(pic);
        return d;
    }

    let mut candidates: Vec<(Context, DecisionSource)> = Vec::new();
    for e in &state.history {
        if e.context != current && !candidates.iter().any(|(c, _)| *c == e.context) {
            candidates.push((e.context.clone(), DecisionSource::Replay));
        }
    }
    for _ in 0..cfg.space_fresh_samples {
        candidates.push((space.sample_uniform(&mut state.rng), DecisionSource::Uniform));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, (c, _)) in candidates.iter().enumerate() {
        let value = valuer.value(c);
        let p = state.space_tracker.pic(c, value);
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    state.space_tracker.below_tol = 0;
    match best {
        Some((i, p)) => {
            let (ctx, source) = candidates.swap_remove(i);
            state.space_tracker.current = Some(ctx.clone());
            let mut d = StepDecision::simple(ctx, source);
            d.pic = Some(p);
            d
        }
        None => {
            let mut d = StepDecision::simple(current, DecisionSource::Replay);
            d.pic = Some(pic);
            d
        }
    }
}

//! Alternates curriculum decisions with training phases, evaluates on frozen
//! test contexts, then measures zero-shot and finetuned generalization.
//!
//! Output layout per seed (`seed_<n>/`):
//! - `run.jsonl`: a `run` header, one `step` line per curriculum step, one
//!   `eval` line per evaluation point, and a closing `generalization` line.
//! - `evals.csv`: `episode,step,context_index,<metrics>`.
//! - `generalization.csv`: `phase,context_index,<parameters>,<metrics>`.
//! - `trajectory.csv`, `correlation.csv`: see [`CurriculumAnalysis`].
//! - `policy.ckpt`, and `trace.csv` when enabled.
//!
//! The output root also gets `summary.csv` from [`aggregate_seeds`].

mod analysis;
mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::context_space::{Context, ContextError, ContextSpace};
use crate::curriculum::{
    CurriculumError, DecideInputs, PerfMetrics, Scheduler, SchedulerKind, StepDecision,
};
use crate::llm::mock::{MockPolicy, MockPolicyKind};
use crate::llm::{HttpTransport, LlmProposer, MockTransport, Proposer};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::traffic::{EnvError, NetworkSpec, TrafficEnv};
use crate::trainer::{
    collect_episode, evaluate_context, evaluate_policy, greedy_value_probe, ActMode, LossReport,
    Policy, TrainConfig, Trainer, TrainerError,
};

pub use analysis::{
    aggregate_seeds, export_curriculum_analysis, pearson, write_summary, CurriculumAnalysis,
    SummaryRow,
};
pub use config::{ConfigError, ExperimentConfig, MockSettings, RunSettings};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("{0}")]
    Io(String),
    #[error("curriculum step {step} selected a held-out test context")]
    TestContextLeak { step: usize },
    #[error("{0}")]
    Format(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub decision: StepDecision,
    /// Mean over the phase's training episodes.
    pub metrics: PerfMetrics,
    pub td_score: f64,
    pub loss: LossReport,
    /// Training episodes completed after this step.
    pub episodes_done: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub episode: u64,
    pub step: usize,
    pub per_context: Vec<PerfMetrics>,
    pub mean: PerfMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub scheduler: SchedulerKind,
    pub test_contexts: Vec<Context>,
    pub generalization_contexts: Vec<Context>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalPoint>,
    pub zero_shot: Vec<PerfMetrics>,
    pub finetuned: Vec<PerfMetrics>,
}

impl RunRecord {
    pub fn trained_contexts(&self) -> Vec<Context> {
        self.steps.iter().map(|s| s.decision.next_context.clone()).collect()
    }

    /// Scope-labelled means used for the cross-seed summary.
    pub fn headline(&self) -> Vec<(String, PerfMetrics)> {
        let mut out = Vec::new();
        if let Some(last) = self.evals.last() {
            out.push(("test_final".to_string(), last.mean));
        }
        if !self.zero_shot.is_empty() {
            out.push(("zero_shot".to_string(), PerfMetrics::mean(&self.zero_shot)));
            out.push(("finetuned".to_string(), PerfMetrics::mean(&self.finetuned)));
        }
        out
    }
}

fn metrics_json(m: &PerfMetrics) -> Value {
    let mut o = Map::new();
    for (k, v) in PerfMetrics::FIELDS.iter().zip(m.as_array()) {
        o.insert((*k).to_string(), json!(v));
    }
    Value::Object(o)
}

fn step_json(space: &ContextSpace, scheduler: SchedulerKind, r: &StepRecord) -> Value {
    let d = &r.decision;
    json!({
        "type": "step",
        "step": r.step,
        "scheduler": scheduler.name(),
        "context": space.to_json(&d.next_context),
        "proposal": space.to_json(&d.proposal),
        "source": d.source,
        "blended": d.blended,
        "replayed": d.replayed,
        "sigma": d.sigma,
        "similarity_counter": d.similarity_counter,
        "pic": d.pic,
        "proposer_attempts": d.proposer_attempts,
        "fallback_used": d.fallback_used,
        "metrics": metrics_json(&r.metrics),
        "td_score": r.td_score,
        "loss": r.loss,
        "episodes_done": r.episodes_done,
    })
}

const METRIC_COLUMNS: [&str; 5] = PerfMetrics::FIELDS;

struct RunWriter {
    jsonl: BufWriter<File>,
    jsonl_path: PathBuf,
    evals: csv::Writer<File>,
    evals_path: PathBuf,
}

impl RunWriter {
    fn create(dir: &Path) -> Result<Self, ExperimentError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let jsonl_path = dir.join("run.jsonl");
        let evals_path = dir.join("evals.csv");
        let jsonl =
            BufWriter::new(File::create(&jsonl_path).map_err(|e| io_err(&jsonl_path, e))?);
        let mut evals = csv::Writer::from_path(&evals_path).map_err(|e| io_err(&evals_path, e))?;
        let mut header = vec!["episode", "step", "context_index"];
        header.extend(METRIC_COLUMNS);
        evals.write_record(&header).map_err(|e| io_err(&evals_path, e))?;
        Ok(Self {
            jsonl,
            jsonl_path,
            evals,
            evals_path,
        })
    }

    fn line(&mut self, v: &Value) -> Result<(), ExperimentError> {
        let p = &self.jsonl_path;
        writeln!(self.jsonl, "{v}").map_err(|e| io_err(p, e))?;
        self.jsonl.flush().map_err(|e| io_err(p, e))
    }

    fn eval(&mut self, point: &EvalPoint) -> Result<(), ExperimentError> {
        for (i, m) in point.per_context.iter().enumerate() {
            let mut rec = vec![point.episode.to_string(), point.step.to_string(), i.to_string()];
            rec.extend(m.as_array().iter().map(|v| v.to_string()));
            self.evals.write_record(&rec).map_err(|e| io_err(&self.evals_path, e))?;
        }
        self.evals.flush().map_err(|e| io_err(&self.evals_path, e))?;
        self.line(&json!({
            "type": "eval",
            "episode": point.episode,
            "step": point.step,
            "per_context": point.per_context.iter().map(metrics_json).collect::<Vec<_>>(),
            "mean": metrics_json(&point.mean),
        }))
    }
}

/// Per-seed draws of the held-out contexts.
pub fn draw_contexts(space: &ContextSpace, seed: u64, stream: Stream, n: usize) -> Vec<Context> {
    let mut rng = stream_rng(seed, stream, 0);
    (0..n).map(|_| space.sample_uniform(&mut rng)).collect()
}

fn make_proposer(cfg: &ExperimentConfig, space: &ContextSpace) -> Option<Box<dyn Proposer>> {
    if !cfg.experiment.scheduler.uses_proposer() {
        return None;
    }
    let retries = cfg.llm.max_retries;
    Some(match &cfg.mock {
        Some(m) => {
            let policy = match m.policy {
                MockPolicyKind::ReplayBestPerturbed => MockPolicy::ReplayBestPerturbed,
                MockPolicyKind::Constant => {
                    MockPolicy::Constant(cfg.curriculum.initial_context(space))
                }
            };
            Box::new(LlmProposer::new(MockTransport::new(policy), retries))
        }
        None => Box::new(LlmProposer::new(HttpTransport::new(cfg.llm.clone()), retries)),
    })
}

/// Zero-shot greedy evaluation on `contexts`, then per context a clone of
/// `policy` trained for `finetune_episodes` and evaluated again on the same
/// episode seeds. `policy` is only read.
#[allow(clippy::too_many_arguments)]
pub fn finetune_and_test(
    policy: &Policy,
    train: &TrainConfig,
    spec: &NetworkSpec,
    space: &ContextSpace,
    contexts: &[Context],
    finetune_episodes: usize,
    eval_episodes: usize,
    seed: u64,
) -> Result<(Vec<PerfMetrics>, Vec<PerfMetrics>), ExperimentError> {
    use rayon::prelude::*;
    let eval_seed = derive_seed(seed, Stream::GeneralizationContexts, 1);
    let zero_shot = evaluate_policy(policy, spec, space, contexts, eval_episodes, eval_seed)?;
    if finetune_episodes == 0 {
        return Ok((zero_shot.clone(), zero_shot));
    }
    let finetuned = contexts
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| -> Result<PerfMetrics, ExperimentError> {
            let mut trainer = Trainer::new(train.clone(), policy.clone())?;
            let base = derive_seed(seed, Stream::FinetuneEnv, i as u64);
            let mut env = TrafficEnv::new(spec.clone(), space, ctx, base)?;
            let mut rng = stream_rng(base, Stream::ActionSampling, 0);
            for k in 0..finetune_episodes {
                env.reset(space, ctx, derive_seed(base, Stream::TrainEnv, k as u64))?;
                trainer.train_episode(&mut env, &mut rng)?;
            }
            Ok(evaluate_context(&trainer.policy, spec, space, ctx, i, eval_episodes, eval_seed)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((zero_shot, finetuned))
}

fn mean_loss(rows: &[LossReport]) -> LossReport {
    let n = rows.len().max(1) as f64;
    let mut m = LossReport::default();
    for r in rows {
        m.policy_loss += r.policy_loss / n;
        m.value_loss += r.value_loss / n;
        m.entropy += r.entropy / n;
        m.total_loss += r.total_loss / n;
        m.clip_fraction += r.clip_fraction / n;
        m.approx_kl += r.approx_kl / n;
        m.actor_grad_norm += r.actor_grad_norm / n;
        m.critic_grad_norm += r.critic_grad_norm / n;
        m.aborted |= r.aborted;
    }
    m
}

/// One seed of the full protocol, writing artifacts under `dir` as it goes.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
) -> Result<RunRecord, ExperimentError> {
    cfg.validate().map_err(|(_, m)| ConfigError::new(m))?;
    let space = ContextSpace::traffic();
    let settings = &cfg.experiment;
    let spec = &cfg.network;
    let kind = settings.scheduler;
    let mut out = RunWriter::create(dir)?;

    let test_contexts = draw_contexts(&space, seed, Stream::TestContexts, settings.n_test_contexts);
    let generalization_contexts = draw_contexts(
        &space,
        seed,
        Stream::GeneralizationContexts,
        settings.n_generalization_contexts,
    );
    let ctx_list = |cs: &[Context]| cs.iter().map(|c| space.to_json(c)).collect::<Vec<_>>();
    out.line(&json!({
        "type": "run",
        "seed": seed,
        "scheduler": kind.name(),
        "test_contexts": ctx_list(&test_contexts),
        "generalization_contexts": ctx_list(&generalization_contexts),
    }))?;

    let initial = cfg.curriculum.initial_context(&space);
    let mut env = TrafficEnv::new(spec.clone(), &space, &initial, derive_seed(seed, Stream::TrainEnv, 0))?;
    let policy = Policy::for_env(&env, &cfg.train, &mut stream_rng(seed, Stream::PolicyInit, 0));
    let mut trainer = Trainer::new(cfg.train.clone(), policy)?;
    let mut scheduler = Scheduler::new(
        kind,
        cfg.curriculum.clone(),
        space.clone(),
        stream_rng(seed, Stream::Scheduler, 0),
        stream_rng(seed, Stream::Proposer, 0),
    )?;
    let mut proposer = make_proposer(cfg, &space);
    let mut action_rng = stream_rng(seed, Stream::ActionSampling, 0);

    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let mut episodes: u64 = 0;
    for t in 0..settings.total_curriculum_steps {
        let started = Instant::now();
        let decision = {
            let policy = &trainer.policy;
            let mut valuer = |c: &Context| {
                let probe_seed = derive_seed(seed, Stream::Probe, t as u64);
                greedy_value_probe(policy, spec, &space, c, settings.value_probe_steps, probe_seed)
                    .unwrap_or(0.0)
            };
            let inputs = DecideInputs {
                proposer: proposer.as_mut().map(|p| p.as_mut() as &mut dyn Proposer),
                valuer: (kind == SchedulerKind::Space)
                    .then_some(&mut valuer as &mut dyn crate::curriculum::ContextValuer),
            };
            scheduler.decide(inputs)?
        };
        let ctx = decision.next_context.clone();
        if test_contexts.contains(&ctx) {
            return Err(ExperimentError::TestContextLeak { step: t });
        }
        let mut phase_metrics = Vec::new();
        let mut losses = Vec::new();
        let mut td = 0.0;
        for _ in 0..cfg.curriculum.episodes_per_context {
            env.reset(&space, &ctx, derive_seed(seed, Stream::TrainEnv, episodes))?;
            let s = trainer.train_episode(&mut env, &mut action_rng)?;
            phase_metrics.push(PerfMetrics::from(s.metrics));
            losses.push(s.loss);
            td += s.td_score;
            episodes += 1;
            if episodes.is_multiple_of(settings.eval_interval as u64) {
                let per_context = evaluate_policy(
                    &trainer.policy,
                    spec,
                    &space,
                    &test_contexts,
                    settings.eval_episodes,
                    seed,
                )?;
                let point = EvalPoint {
                    episode: episodes,
                    step: t,
                    mean: PerfMetrics::mean(&per_context),
                    per_context,
                };
                out.eval(&point)?;
                evals.push(point);
            }
        }
        let metrics = PerfMetrics::mean(&phase_metrics);
        let td_score = td / cfg.curriculum.episodes_per_context as f64;
        scheduler.record(ctx, metrics, Some(td_score));
        let record = StepRecord {
            step: t,
            decision,
            metrics,
            td_score,
            loss: mean_loss(&losses),
            episodes_done: episodes,
        };
        out.line(&step_json(&space, kind, &record))?;
        eprintln!(
            "seed {seed} step {}/{} return {:.3} blended {} ({:.2}s)",
            t + 1,
            settings.total_curriculum_steps,
            metrics.mean_return,
            record.decision.blended,
            started.elapsed().as_secs_f64()
        );
        steps.push(record);
    }

    let ckpt = dir.join("policy.ckpt");
    trainer.policy.save(&ckpt)?;

    let (zero_shot, finetuned) = finetune_and_test(
        &trainer.policy,
        &cfg.train,
        spec,
        &space,
        &generalization_contexts,
        settings.finetune_episodes,
        settings.eval_episodes,
        seed,
    )?;
    write_generalization(&dir.join("generalization.csv"), &space, &generalization_contexts, &zero_shot, &finetuned)?;
    out.line(&json!({
        "type": "generalization",
        "zero_shot": zero_shot.iter().map(metrics_json).collect::<Vec<_>>(),
        "finetuned": finetuned.iter().map(metrics_json).collect::<Vec<_>>(),
    }))?;

    let record = RunRecord {
        seed,
        scheduler: kind,
        test_contexts,
        generalization_contexts,
        steps,
        evals,
        zero_shot,
        finetuned,
    };
    write_analysis(dir, &space, &record.trained_contexts())?;
    if settings.trace {
        write_trace(&dir.join("trace.csv"), &trainer.policy, spec, &space, &record.test_contexts[0], seed)?;
    }
    Ok(record)
}

fn write_generalization(
    path: &Path,
    space: &ContextSpace,
    contexts: &[Context],
    zero_shot: &[PerfMetrics],
    finetuned: &[PerfMetrics],
) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut header = vec!["phase".to_string(), "context_index".to_string()];
    header.extend(space.params().iter().map(|p| p.name.clone()));
    header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for (phase, rows) in [("zero_shot", zero_shot), ("finetuned", finetuned)] {
        for (i, (m, c)) in rows.iter().zip(contexts).enumerate() {
            let mut rec = vec![phase.to_string(), i.to_string()];
            rec.extend(c.values().iter().map(|v| v.to_string()));
            rec.extend(m.as_array().iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes `trajectory.csv` and `correlation.csv` into `dir`.
pub fn write_analysis(
    dir: &Path,
    space: &ContextSpace,
    contexts: &[Context],
) -> Result<CurriculumAnalysis, ExperimentError> {
    let a = export_curriculum_analysis(space, contexts)?;
    let tp = dir.join("trajectory.csv");
    a.write_trajectory(File::create(&tp).map_err(|e| io_err(&tp, e))?)
        .map_err(|e| io_err(&tp, e))?;
    let cp = dir.join("correlation.csv");
    a.write_correlation(File::create(&cp).map_err(|e| io_err(&cp, e))?)
        .map_err(|e| io_err(&cp, e))?;
    Ok(a)
}

fn write_trace(
    path: &Path,
    policy: &Policy,
    spec: &NetworkSpec,
    space: &ContextSpace,
    ctx: &Context,
    seed: u64,
) -> Result<(), ExperimentError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut env = TrafficEnv::new(spec.clone(), space, ctx, derive_seed(seed, Stream::EvalEnv, 0))?;
    env.enable_trace(Box::new(BufWriter::new(file)))
        .map_err(|e| io_err(path, e))?;
    let mut rng = stream_rng(seed, Stream::EvalEnv, 0);
    collect_episode(policy, &mut env, ActMode::Greedy, &mut rng)?;
    env.finish_trace().map_err(|e| io_err(path, e))
}

/// Trained contexts of the `step` lines of a `run.jsonl`.
pub fn read_trained_contexts(path: &Path, space: &ContextSpace) -> Result<Vec<Context>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| ExperimentError::Format(format!("{}:{}: {m}", path.display(), n + 1));
        let v: Value = serde_json::from_str(line).map_err(|e| bad(&e.to_string()))?;
        if v.get("type").and_then(Value::as_str) != Some("step") {
            continue;
        }
        let obj = v
            .get("context")
            .and_then(Value::as_object)
            .ok_or_else(|| bad("step line without a context object"))?;
        out.push(space.from_json(obj).map_err(|e| bad(&e.to_string()))?);
    }
    Ok(out)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Every configured seed, at most `jobs` at a time, then `summary.csv`.
pub fn run_all(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Vec<RunRecord>, ExperimentError> {
    use rayon::prelude::*;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Io(e.to_string()))?;
    let records = pool.install(|| {
        cfg.experiment
            .seeds
            .par_iter()
            .map(|&s| run_experiment(cfg, s, &seed_dir(out, s)))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let rows = aggregate_seeds(&records.iter().map(RunRecord::headline).collect::<Vec<_>>());
    let path = out.join("summary.csv");
    write_summary(&rows, File::create(&path).map_err(|e| io_err(&path, e))?)
        .map_err(|e| io_err(&path, e))?;
    Ok(records)
}

//! Command-line entry point. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error. Data and paths go to stdout, diagnostics
//! to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::context_space::ContextSpace;
use crate::curriculum::{DecideInputs, PerfMetrics, Scheduler, SchedulerKind};
use crate::experiment::{
    draw_contexts, read_trained_contexts, run_all, seed_dir, write_analysis, ExperimentConfig,
    ExperimentError, MockSettings,
};
use crate::llm::mock::{MockPolicy, MockPolicyKind};
use crate::llm::{LlmProposer, MockTransport};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::trainer::{evaluate_policy, Policy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cmalcd", version, about = "Curriculum learning for traffic-signal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Overrides {
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scheduler: Option<SchedulerKind>,
    /// Offline proposer instead of the HTTP endpoint.
    #[arg(long = "mock-llm", value_name = "POLICY")]
    mock_llm: Option<MockPolicyKind>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-evaluate saved checkpoints on their seed's held-out contexts.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rebuild trajectory.csv and correlation.csv from run.jsonl files.
    Export {
        /// A seed directory, or an output root holding seed_* directories.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check a config and print it with every default filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Scheduler-only cMALC-D trace with the constant mock proposer.
    MockDemo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(path: &Path, o: Option<&Overrides>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::from_path(path).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(o) = o {
        if let Some(s) = o.seed {
            cfg.experiment.seeds = vec![s];
        }
        if let Some(k) = o.scheduler {
            cfg.experiment.scheduler = k;
        }
        if let Some(p) = o.mock_llm {
            cfg.mock = Some(MockSettings { policy: p });
        }
        cfg.validate()
            .map_err(|(section, m)| Failure::Config(format!("{}: [{section}] {m}", path.display())))?;
    }
    Ok(cfg)
}

fn out_line(s: impl std::fmt::Display) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{s}");
}

fn cmd_run(config: &Path, out: &Path, jobs: usize, o: &Overrides) -> Result<(), Failure> {
    let cfg = load(config, Some(o))?;
    let records = run_all(&cfg, out, jobs)?;
    for r in &records {
        out_line(seed_dir(out, r.seed).display());
    }
    out_line(out.join("summary.csv").display());
    Ok(())
}

fn cmd_evaluate(config: &Path, out: &Path, o: &Overrides) -> Result<(), Failure> {
    let cfg = load(config, Some(o))?;
    let space = ContextSpace::traffic();
    let s = &cfg.experiment;
    out_line(format!("seed,set,context_index,{}", PerfMetrics::FIELDS.join(",")));
    for &seed in &s.seeds {
        let ckpt = seed_dir(out, seed).join("policy.ckpt");
        let policy = Policy::load(&ckpt, &cfg.train).map_err(|e| Failure::Runtime(e.to_string()))?;
        let sets = [
            ("test", draw_contexts(&space, seed, Stream::TestContexts, s.n_test_contexts), seed),
            (
                "generalization",
                draw_contexts(&space, seed, Stream::GeneralizationContexts, s.n_generalization_contexts),
                derive_seed(seed, Stream::GeneralizationContexts, 1),
            ),
        ];
        for (name, ctxs, eval_seed) in sets {
            let rows = evaluate_policy(&policy, &cfg.network, &space, &ctxs, s.eval_episodes, eval_seed)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            for (i, m) in rows.iter().enumerate() {
                let vals: Vec<String> = m.as_array().iter().map(|v| v.to_string()).collect();
                out_line(format!("{seed},{name},{i},{}", vals.join(",")));
            }
        }
    }
    Ok(())
}

fn cmd_export(out: &Path) -> Result<(), Failure> {
    let space = ContextSpace::traffic();
    let mut dirs = Vec::new();
    if out.join("run.jsonl").is_file() {
        dirs.push(out.to_path_buf());
    } else {
        let entries = std::fs::read_dir(out)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
        for e in entries.flatten() {
            let p = e.path();
            let is_seed = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed_"));
            if is_seed && p.join("run.jsonl").is_file() {
                dirs.push(p);
            }
        }
        dirs.sort();
    }
    if dirs.is_empty() {
        return Err(Failure::Runtime(format!("no run.jsonl under {}", out.display())));
    }
    for d in dirs {
        let ctxs = read_trained_contexts(&d.join("run.jsonl"), &space)?;
        write_analysis(&d, &space, &ctxs)?;
        out_line(d.join("trajectory.csv").display());
        out_line(d.join("correlation.csv").display());
    }
    Ok(())
}

fn cmd_mock_demo(config: Option<&Path>, steps: usize) -> Result<(), Failure> {
    let cfg = match config {
        Some(p) => load(p, None)?,
        None => ExperimentConfig::default(),
    };
    let space = ContextSpace::traffic();
    let seed = cfg.experiment.seeds[0];
    let constant = MockPolicy::Constant(cfg.curriculum.initial_context(&space));
    let mut proposer = LlmProposer::new(MockTransport::new(constant), cfg.llm.max_retries);
    let mut sched = Scheduler::new(
        SchedulerKind::Cmalcd,
        cfg.curriculum.clone(),
        space,
        stream_rng(seed, Stream::Scheduler, 0),
        stream_rng(seed, Stream::Proposer, 0),
    )
    .map_err(|e| Failure::Config(e.to_string()))?;
    for t in 0..steps {
        let d = sched
            .decide(DecideInputs {
                proposer: Some(&mut proposer),
                valuer: None,
            })
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        let sigma = d.sigma.map_or("-".to_string(), |s| format!("{s:.4}"));
        let counter = d.similarity_counter.map_or("-".to_string(), |c| c.to_string());
        out_line(format!(
            "step={t} source={} sigma={sigma} counter={counter} blended={}",
            serde_json::to_value(d.source).unwrap().as_str().unwrap_or("?"),
            d.blended
        ));
        sched.record(d.next_context, PerfMetrics::default(), None);
    }
    Ok(())
}

pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Run {
            config,
            out,
            jobs,
            overrides,
        } => cmd_run(config, out, *jobs, overrides),
        Command::Evaluate {
            config,
            out,
            overrides,
        } => cmd_evaluate(config, out, overrides),
        Command::Export { out } => cmd_export(out),
        Command::Validate { config } => load(config, None).map(|cfg| {
            let mut o = std::io::stdout().lock();
            let _ = write!(o, "{}", cfg.to_toml_string());
        }),
        Command::MockDemo { config, steps } => cmd_mock_demo(config.as_deref(), *steps),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}

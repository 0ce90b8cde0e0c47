//! TOML experiment configuration. Every section is optional; keys present in
//! the file are layered over [`ExperimentConfig::default`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context_space::ContextSpace;
use crate::curriculum::{CurriculumConfig, SchedulerKind};
use crate::llm::mock::MockPolicyKind;
use crate::llm::LlmConfig;
use crate::traffic::NetworkSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub scheduler: SchedulerKind,
    pub total_curriculum_steps: usize,
    /// Training episodes between evaluations on the test contexts.
    pub eval_interval: usize,
    /// Greedy episodes per context at every evaluation.
    pub eval_episodes: usize,
    pub n_test_contexts: usize,
    pub n_generalization_contexts: usize,
    pub finetune_episodes: usize,
    pub seeds: Vec<u64>,
    /// Rollout length behind the SPACE value estimate.
    pub value_probe_steps: usize,
    /// Also write trace.csv for one greedy episode on the first test context.
    pub trace: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            scheduler: SchedulerKind::Cmalcd,
            total_curriculum_steps: 50,
            eval_interval: 5,
            eval_episodes: 1,
            n_test_contexts: 5,
            n_generalization_contexts: 10,
            finetune_episodes: 5,
            seeds: vec![0, 1, 2, 3, 4],
            value_probe_steps: 10,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSettings {
    pub policy: MockPolicyKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: RunSettings,
    pub curriculum: CurriculumConfig,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub llm: LlmConfig,
    /// Offline proposer; when absent the guided schedulers call `llm`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockSettings>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: RunSettings::default(),
            curriculum: CurriculumConfig::default(),
            network: NetworkSpec {
                episode_len: 120,
                ..NetworkSpec::default()
            },
            train: TrainConfig::default(),
            llm: LlmConfig::default(),
            mock: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            line: None,
            message: message.into(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn toml_error(text: &str, e: &toml::de::Error) -> ConfigError {
    ConfigError {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Line of `key = ...` inside `[section]` whose key the message mentions,
/// else the section header line.
fn anchor(text: &str, section: &str, message: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    let mentions = |key: &str| {
        message
            .match_indices(key)
            .any(|(i, _)| {
                let before = message[..i].chars().next_back();
                let after = message[i + key.len()..].chars().next();
                let word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
                !word(before) && !word(after)
            })
    };
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(n + 1);
            }
            continue;
        }
        if current != section {
            continue;
        }
        if let Some((key, _)) = line.split_once('=') {
            let key = key.trim();
            if !key.is_empty() && mentions(key) {
                return Some(n + 1);
            }
        }
    }
    header
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        // shape check against the file itself so type errors keep their spans
        toml::from_str::<ExperimentConfig>(text).map_err(|e| toml_error(text, &e))?;
        let mut merged = match toml::Value::try_from(Self::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("defaults serialize to a table"),
        };
        merge(&mut merged, user);
        let cfg: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::new(e.message().trim().to_string()))?;
        cfg.validate().map_err(|(section, message)| ConfigError {
            line: anchor(text, section, &message),
            message,
        })?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| ConfigError {
            message: format!("{}: {}", path.display(), e.message),
            ..e
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section; the error names the offending section.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let space = ContextSpace::traffic();
        let e = &self.experiment;
        let positive = [
            ("total_curriculum_steps", e.total_curriculum_steps),
            ("eval_interval", e.eval_interval),
            ("eval_episodes", e.eval_episodes),
            ("n_test_contexts", e.n_test_contexts),
            ("n_generalization_contexts", e.n_generalization_contexts),
            ("value_probe_steps", e.value_probe_steps),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(("experiment", format!("{name} must be >= 1")));
            }
        }
        if e.seeds.is_empty() {
            return Err(("experiment", "seeds must not be empty".into()));
        }
        let mut sorted = e.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(("experiment", "seeds must be distinct".into()));
        }
        self.curriculum
            .validate(&space)
            .map_err(|err| ("curriculum", err.to_string()))?;
        self.network
            .validate_for_space(&space)
            .map_err(|err| ("network", err.to_string()))?;
        self.train.validate().map_err(|err| ("train", err.to_string()))?;
        self.llm.validate().map_err(|err| ("llm", err))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[network]\nrows = 2\n").unwrap();
        assert_eq!(cfg.network.rows, 2);
        assert_eq!(cfg.network.episode_len, 120);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig {
            mock: Some(MockSettings {
                policy: MockPolicyKind::Constant,
            }),
            ..ExperimentConfig::default()
        };
        cfg.experiment.scheduler = SchedulerKind::Plr;
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_carry_lines() {
        let text = "[experiment]\nseeds = [1]\n\n[train]\nhidden_dim = 8\nclip_eps = 3.0\n";
        let e = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert_eq!(e.line, Some(6), "{e}");
        let e = ExperimentConfig::from_toml_str("[experiment]\nscheduler = \"nope\"\n").unwrap_err();
        assert_eq!(e.line, Some(2), "{e}");
        let e = ExperimentConfig::from_toml_str("[train]\nbogus = 1\n").unwrap_err();
        assert_eq!(e.line, Some(2), "{e}");
        let e = ExperimentConfig::from_toml_str("[experiment]\nseeds = [1, 1]\n").unwrap_err();
        assert_eq!(e.line, Some(2), "{e}");
        assert!(ExperimentConfig::from_toml_str("[network\n").unwrap_err().line.is_some());
    }
}

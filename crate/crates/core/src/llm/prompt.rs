//! Prompt construction. Templates live in `assets/prompts/<version>/` and are
//! rendered with the bounds of the active space, so edited bounds propagate.

use std::fmt::Write as _;

use crate::context_space::{Context, ContextSpace, ParamKind};
use crate::curriculum::HistoryEntry;

pub const TEMPLATE_VERSION: &str = "v1";
pub const SUGGESTION_MARKER: &str = "NEXT TASK SUGGESTION:";

const INITIAL_SYSTEM: &str = include_str!("../../assets/prompts/v1/initial_system.txt");
const FOLLOWUP_SYSTEM: &str = include_str!("../../assets/prompts/v1/followup_system.txt");
const FOLLOWUP_USER: &str = include_str!("../../assets/prompts/v1/followup_user.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub system_text: String,
    /// Empty for the initial prompt, which is a single system message.
    pub user_text: String,
}

/// One `- name: (lower-upper)` line per parameter.
pub fn render_bounds(space: &ContextSpace) -> String {
    let mut out = String::new();
    for (i, p) in space.params().iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        match p.kind {
            ParamKind::Continuous => {
                let _ = write!(out, "- {}: ({:?}-{:?})", p.name, p.lower, p.upper);
            }
            ParamKind::Integer => {
                let _ = write!(
                    out,
                    "- {}: ({}-{}, integer)",
                    p.name, p.lower as i64, p.upper as i64
                );
            }
        }
    }
    out
}

fn render_param_value(kind: ParamKind, v: f64) -> String {
    match kind {
        ParamKind::Integer => format!("{}", v as i64),
        ParamKind::Continuous => format!("{v:.4}"),
    }
}

/// Context as a one-line JSON object. Continuous values use the shortest
/// representation that parses back to the same `f64`.
pub fn render_context_json(space: &ContextSpace, ctx: &Context) -> String {
    let fields: Vec<String> = space
        .params()
        .iter()
        .zip(ctx.values())
        .map(|(p, &v)| match p.kind {
            ParamKind::Integer => format!("\"{}\": {}", p.name, v as i64),
            ParamKind::Continuous => format!("\"{}\": {:?}", p.name, v),
        })
        .collect();
    format!("{{{}}}", fields.join(", "))
}

/// Window rendered as a JSON array of `{parameters, metrics}` objects, with
/// fixed key order and four decimals so identical windows give identical bytes.
pub fn render_trials(space: &ContextSpace, window: &[HistoryEntry]) -> String {
    let mut out = String::from("[\n");
    for (i, entry) in window.iter().enumerate() {
        out.push_str("  {\n    \"parameters\": {\n");
        let n = space.dim();
        for (j, (p, &v)) in space.params().iter().zip(entry.context.values()).enumerate() {
            let sep = if j + 1 < n { "," } else { "" };
            let _ = writeln!(
                out,
                "      \"{}\": {}{}",
                p.name,
                render_param_value(p.kind, v),
                sep
            );
        }
        out.push_str("    },\n    \"metrics\": {\n");
        let m = &entry.metrics;
        let rows = [
            ("mean_return", m.mean_return),
            ("avg_travel_time", m.avg_travel_time),
            ("throughput", m.throughput),
            ("avg_wait_time", m.avg_wait_time),
            ("avg_delay", m.avg_delay),
        ];
        for (j, (k, v)) in rows.iter().enumerate() {
            let sep = if j + 1 < rows.len() { "," } else { "" };
            let _ = writeln!(out, "      \"{k}\": {v:.4}{sep}");
        }
        out.push_str("    }\n  }");
        if i + 1 < window.len() {
            out.push(',');
        }
        out.push('\n');
    }
    out.push(']');
    out
}

pub fn build_initial_prompt(space: &ContextSpace) -> PromptBundle {
    PromptBundle {
        system_text: INITIAL_SYSTEM
            .trim_end()
            .replace("{bounds}", &render_bounds(space)),
        user_text: String::new(),
    }
}

pub fn build_followup_prompt(window: &[HistoryEntry], space: &ContextSpace) -> PromptBundle {
    PromptBundle {
        system_text: FOLLOWUP_SYSTEM.trim_end().to_string(),
        user_text: FOLLOWUP_USER
            .trim_end()
            .replace("{trials}", &render_trials(space, window))
            .replace("{bounds}", &render_bounds(space)),
    }
}

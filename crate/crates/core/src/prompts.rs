//! Prompt rendering for reasoning synthesis and step judging, and ingestion
//! of the synthesized responses.
//!
//! Templates are stored under `templates/` and compiled in. Placeholders are
//! substituted in a single left-to-right pass, so braces inside inserted text
//! are never expanded.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::trajectory::{compose_answer, CuratedStep, ReasoningOrigin};

pub const REASONING_TEMPLATE: &str = include_str!("../templates/reasoning_synthesis.txt");
pub const JUDGE_TEMPLATE: &str = include_str!("../templates/judge.txt");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("missing value for template slot {0}")]
    MissingSlot(&'static str),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Replaces `{NAME}` for every `NAME` in `values`. Other braces are copied.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = values
            .iter()
            .find(|(name, _)| after.starts_with(name) && after[name.len()..].starts_with('}'));
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &after[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn require<'a>(slot: &'static str, value: &'a str) -> Result<&'a str, PromptError> {
    if value.trim().is_empty() {
        Err(PromptError::MissingSlot(slot))
    } else {
        Ok(value)
    }
}

/// Fills the reasoning-synthesis template. The history slot may be empty;
/// goal and state may not.
pub fn render_reasoning_prompt(step: &CuratedStep) -> Result<String, PromptError> {
    render_reasoning_with(REASONING_TEMPLATE, step)
}

pub fn render_reasoning_with(template: &str, step: &CuratedStep) -> Result<String, PromptError> {
    let goal = require("GOAL", &step.goal)?;
    let state = require("STATE_BLOCK", &step.state_pruned)?;
    let action = step.action.to_string();
    Ok(fill_template(
        template,
        &[
            ("GOAL", goal),
            ("STATE_BLOCK", state),
            ("HISTORY", &step.history),
            ("action_block", &action),
        ],
    ))
}

/// State block shown to the judge: the pruned tree, the action history and
/// the assistant's full answer.
pub fn judge_state_block(step: &CuratedStep) -> String {
    format!(
        "{}\n\nHistory:\n{}\n\nAssistant output:\n{}",
        step.state_pruned,
        step.history,
        compose_answer(&step.reasoning, &step.action)
    )
}

pub fn render_judge_prompt(step: &CuratedStep) -> Result<String, PromptError> {
    let goal = require("GOAL", &step.goal)?;
    require("STATE_BLOCK", &step.state_pruned)?;
    let block = judge_state_block(step);
    Ok(fill_template(
        JUDGE_TEMPLATE,
        &[("GOAL", goal), ("STATE_BLOCK", &block)],
    ))
}

/// File-system-safe stem for a step key.
pub fn prompt_file_stem(key: &str) -> String {
    key.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptManifestEntry {
    pub key: String,
    pub reasoning: String,
    pub judge: String,
}

/// Writes `<stem>.reasoning.txt` and `<stem>.judge.txt` per step plus a
/// `manifest.jsonl` mapping step keys to file names.
pub fn write_prompts(steps: &[CuratedStep], dir: &Path) -> Result<Vec<PromptManifestEntry>, PromptError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PromptError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut entries = Vec::with_capacity(steps.len());
    let mut manifest = String::new();
    for step in steps {
        let stem = prompt_file_stem(&step.key());
        let entry = PromptManifestEntry {
            key: step.key(),
            reasoning: format!("{stem}.reasoning.txt"),
            judge: format!("{stem}.judge.txt"),
        };
        let r = dir.join(&entry.reasoning);
        fs::write(&r, render_reasoning_prompt(step)?).map_err(io(&r))?;
        let j = dir.join(&entry.judge);
        fs::write(&j, render_judge_prompt(step)?).map_err(io(&j))?;
        manifest.push_str(&serde_json::to_string(&entry).expect("manifest entry serializes"));
        manifest.push('\n');
        entries.push(entry);
    }
    let m = dir.join("manifest.jsonl");
    fs::write(&m, manifest).map_err(io(&m))?;
    Ok(entries)
}

/// One raw model response addressed to a curated step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesizedResponse {
    pub key: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestRejection {
    pub key: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestOutcome {
    pub steps: Vec<CuratedStep>,
    pub accepted: usize,
    pub rejections: Vec<IngestRejection>,
}

/// Blocks parsed from a response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub think: String,
    pub memory: String,
    pub action: String,
}

impl ParsedResponse {
    pub fn reasoning(&self) -> String {
        format!(
            "<think>\n{}\n</think>\n<memory>\n{}\n</memory>",
            self.think, self.memory
        )
    }
}

fn block<'a>(text: &'a str, tag: &str) -> Result<&'a str, String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open).ok_or_else(|| format!("missing <{tag}> block"))? + open.len();
    let len = text[start..]
        .find(&close)
        .ok_or_else(|| format!("unterminated <{tag}> block"))?;
    Ok(text[start..start + len].trim())
}

pub fn parse_response(output: &str) -> Result<ParsedResponse, String> {
    Ok(ParsedResponse {
        think: block(output, "think")?.to_string(),
        memory: block(output, "memory")?.to_string(),
        action: block(output, "action")?.to_string(),
    })
}

/// Applies responses to the curated steps they address. Accepted responses
/// replace the reasoning and mark it synthesized; rejected ones leave the
/// step untouched and are reported with a reason.
pub fn ingest_synthesized(curated: &[CuratedStep], responses: &[SynthesizedResponse]) -> IngestOutcome {
    let mut steps = curated.to_vec();
    let by_key: HashMap<String, usize> = steps.iter().enumerate().map(|(i, s)| (s.key(), i)).collect();
    let mut seen = HashSet::new();
    let mut accepted = 0;
    let mut rejections = Vec::new();
    for resp in responses {
        let reject = |reason: String| IngestRejection {
            key: resp.key.clone(),
            reason,
        };
        let Some(&pos) = by_key.get(&resp.key) else {
            rejections.push(reject("no curated step with this key".into()));
            continue;
        };
        if !seen.insert(resp.key.as_str()) {
            rejections.push(reject("duplicate response for this step".into()));
            continue;
        }
        let parsed = match parse_response(&resp.output) {
            Ok(p) => p,
            Err(e) => {
                rejections.push(reject(e));
                continue;
            }
        };
        if parsed.memory.is_empty() {
            rejections.push(reject("empty <memory> block".into()));
            continue;
        }
        let gold = steps[pos].action.to_string();
        if parsed.action != gold {
            rejections.push(reject(format!("action `{}` differs from gold `{gold}`", parsed.action)));
            continue;
        }
        steps[pos].reasoning = parsed.reasoning();
        steps[pos].reasoning_origin = ReasoningOrigin::Synthesized;
        accepted += 1;
    }
    IngestOutcome {
        steps,
        accepted,
        rejections,
    }
}

/// Reads a JSONL file of `{"key": ..., "output": ...}` records.
pub fn load_responses(path: &Path) -> Result<Vec<SynthesizedResponse>, PromptError> {
    let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PromptError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

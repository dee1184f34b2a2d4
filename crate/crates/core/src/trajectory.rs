//! Trajectory data model and the line-delimited JSON formats used on disk.
//!
//! Two record shapes exist: the input trajectory file (one trajectory per line)
//! and the curated output file (one selected step per line). Records are
//! validated on load and never repaired.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Separator placed between the reasoning block and the serialized action in a
/// step's answer text.
pub const ANSWER_SEPARATOR: &str = "\n";

/// Actions that reference an accessibility-tree node by its bid.
pub const NODE_ACTIONS: &[&str] = &[
    "fill",
    "select_option",
    "click",
    "dblclick",
    "hover",
    "press",
    "focus",
    "clear",
    "drag_and_drop",
    "upload_file",
];

/// Actions that do not reference any node.
pub const NON_NODE_ACTIONS: &[&str] = &["noop", "send_msg_to_user", "scroll", "go_back", "go_forward", "goto"];

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Invalid {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: field `{field}`: unknown action `{name}`")]
    UnknownAction { line: usize, field: String, name: String },
}

impl LoadError {
    pub fn line(&self) -> Option<usize> {
        match self {
            LoadError::Io { .. } => None,
            LoadError::Json { line, .. } | LoadError::Invalid { line, .. } | LoadError::UnknownAction { line, .. } => {
                Some(*line)
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{path}: {source}")]
pub struct WriteError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    #[serde(rename = "node")]
    NodeGrounded,
    NonNode,
}

/// One expert action. `target_bid` is present exactly for node-grounded actions;
/// for `drag_and_drop` it holds the source bid and the destination is the
/// first argument.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    pub name: String,
    #[serde(rename = "bid", default, skip_serializing_if = "Option::is_none")]
    pub target_bid: Option<String>,
    #[serde(default)]
    pub args: Vec<String>,
}

impl Action {
    pub fn node(name: &str, bid: &str, args: &[&str]) -> Self {
        Action {
            kind: ActionKind::NodeGrounded,
            name: name.to_string(),
            target_bid: Some(bid.to_string()),
            args: args.iter().map(|a| a.to_string()).collect(),
        }
    }

    pub fn non_node(name: &str, args: &[&str]) -> Self {
        Action {
            kind: ActionKind::NonNode,
            name: name.to_string(),
            target_bid: None,
            args: args.iter().map(|a| a.to_string()).collect(),
        }
    }

    pub fn is_node_grounded(&self) -> bool {
        self.kind == ActionKind::NodeGrounded
    }

    /// Checks vocabulary membership and the kind/bid pairing. Returns the
    /// offending sub-field and message on failure.
    fn validate(&self) -> Result<(), ActionProblem> {
        let expected = if NODE_ACTIONS.contains(&self.name.as_str()) {
            ActionKind::NodeGrounded
        } else if NON_NODE_ACTIONS.contains(&self.name.as_str()) {
            ActionKind::NonNode
        } else {
            return Err(ActionProblem::Unknown);
        };
        if self.kind != expected {
            return Err(ActionProblem::Field(
                "kind",
                format!("`{}` is a {} action", self.name, kind_label(expected)),
            ));
        }
        match (self.kind, &self.target_bid) {
            (ActionKind::NodeGrounded, None) => Err(ActionProblem::Field(
                "bid",
                "node-grounded action requires a bid".into(),
            )),
            (ActionKind::NodeGrounded, Some(b)) if b.trim().is_empty() => {
                Err(ActionProblem::Field("bid", "bid is empty".into()))
            }
            (ActionKind::NonNode, Some(_)) => Err(ActionProblem::Field(
                "bid",
                "non-node action must not carry a bid".into(),
            )),
            _ => Ok(()),
        }
    }
}

enum ActionProblem {
    Unknown,
    Field(&'static str, String),
}

fn kind_label(kind: ActionKind) -> &'static str {
    match kind {
        ActionKind::NodeGrounded => "node",
        ActionKind::NonNode => "non_node",
    }
}

/// Serializes an action the way the browser action space spells it, e.g.
/// `click('a51')`, `fill('237', 'example value')`, `scroll(0, 200)`.
///
/// The bid is always quoted. Arguments that look like numbers or list
/// literals (`[...]`) are emitted bare; everything else is single-quoted with
/// `\`, `'` and newlines escaped.
impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        let mut first = true;
        if let Some(bid) = &self.target_bid {
            write!(f, "{}", quote_literal(bid))?;
            first = false;
        }
        for arg in &self.args {
            if !first {
                f.write_str(", ")?;
            }
            first = false;
            if is_bare_literal(arg) {
                f.write_str(arg)?;
            } else {
                f.write_str(&quote_literal(arg))?;
            }
        }
        f.write_str(")")
    }
}

fn is_bare_literal(arg: &str) -> bool {
    let numeric = {
        let digits = arg.strip_prefix('-').unwrap_or(arg);
        let mut parts = digits.splitn(2, '.');
        let int = parts.next().unwrap_or("");
        let frac = parts.next();
        !int.is_empty()
            && int.bytes().all(|b| b.is_ascii_digit())
            && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
    };
    numeric || (arg.len() >= 2 && arg.starts_with('[') && arg.ends_with(']'))
}

fn quote_literal(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

/// Builds the model answer: reasoning, separator, serialized action. An empty
/// reasoning yields just the action.
pub fn compose_answer(reasoning: &str, action: &Action) -> String {
    if reasoning.is_empty() {
        action.to_string()
    } else {
        format!("{reasoning}{ANSWER_SEPARATOR}{action}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    #[serde(rename = "state")]
    pub state_raw: String,
    #[serde(default)]
    pub history: String,
    pub action: Action,
    #[serde(default)]
    pub reasoning: String,
    pub answer: String,
}

impl Step {
    /// Creates a step whose answer is derived from the reasoning and action.
    pub fn new(index: usize, state: &str, history: &str, action: Action, reasoning: &str) -> Self {
        let answer = compose_answer(reasoning, &action);
        Step {
            index,
            state_raw: state.to_string(),
            history: history.to_string(),
            action,
            reasoning: reasoning.to_string(),
            answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub goal: String,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks every type invariant. `line` is only used to label errors.
    pub fn validate(&self, line: usize) -> Result<(), LoadError> {
        let invalid = |field: String, message: &str| LoadError::Invalid {
            line,
            field,
            message: message.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("id".into(), "id is empty"));
        }
        if self.goal.trim().is_empty() {
            return Err(invalid("goal".into(), "goal is empty"));
        }
        if self.steps.is_empty() {
            return Err(invalid("steps".into(), "trajectory has no steps"));
        }
        for (pos, step) in self.steps.iter().enumerate() {
            let field = |name: &str| format!("steps[{pos}].{name}");
            if step.index != pos {
                return Err(invalid(
                    field("index"),
                    &format!("index {} does not match position {pos}", step.index),
                ));
            }
            if step.state_raw.is_empty() {
                return Err(invalid(field("state"), "state is empty"));
            }
            match step.action.validate() {
                Ok(()) => {}
                Err(ActionProblem::Unknown) => {
                    return Err(LoadError::UnknownAction {
                        line,
                        field: field("action.name"),
                        name: step.action.name.clone(),
                    })
                }
                Err(ActionProblem::Field(sub, msg)) => return Err(invalid(field(&format!("action.{sub}")), &msg)),
            }
            if step.answer != compose_answer(&step.reasoning, &step.action) {
                return Err(invalid(
                    field("answer"),
                    "answer is not reasoning + newline + serialized action",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningOrigin {
    Original,
    Synthesized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuratedStep {
    pub trajectory_id: String,
    pub index: usize,
    pub goal: String,
    pub history: String,
    pub state_pruned: String,
    pub action: Action,
    pub reasoning: String,
    pub reasoning_origin: ReasoningOrigin,
}

impl CuratedStep {
    /// Key used to address a curated step from external files.
    pub fn key(&self) -> String {
        step_key(&self.trajectory_id, self.index)
    }
}

pub fn step_key(trajectory_id: &str, index: usize) -> String {
    format!("{trajectory_id}#{index}")
}

fn open(path: &Path) -> Result<BufReader<File>, LoadError> {
    File::open(path).map(BufReader::new).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One parsed record from a trajectory file: either a valid trajectory or the
/// reason it was rejected. `step_count` is the number of steps the record
/// declared, when the JSON was readable far enough to tell.
#[derive(Debug)]
pub struct RecordOutcome {
    pub line: usize,
    pub result: Result<Trajectory, LoadError>,
    pub id: Option<String>,
    pub step_count: usize,
}

fn parse_trajectory_line(line_no: usize, text: &str) -> RecordOutcome {
    let value: serde_json::Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            return RecordOutcome {
                line: line_no,
                result: Err(LoadError::Json {
                    line: line_no,
                    message: e.to_string(),
                }),
                id: None,
                step_count: 0,
            }
        }
    };
    let id = value.get("id").and_then(|v| v.as_str()).map(str::to_string);
    let step_count = value.get("steps").and_then(|v| v.as_array()).map_or(0, Vec::len);
    let result = serde_json::from_value::<Trajectory>(value.clone())
        .map_err(|e| {
            // Unknown action names must surface as vocabulary errors even when
            // another field is also off, so probe the raw value first.
            if let Some(err) = unknown_action_in(&value, line_no) {
                return err;
            }
            LoadError::Invalid {
                line: line_no,
                field: serde_field_hint(&e),
                message: e.to_string(),
            }
        })
        .and_then(|t| t.validate(line_no).map(|()| t));
    RecordOutcome {
        line: line_no,
        result,
        id,
        step_count,
    }
}

fn unknown_action_in(value: &serde_json::Value, line: usize) -> Option<LoadError> {
    let steps = value.get("steps")?.as_array()?;
    steps.iter().enumerate().find_map(|(pos, step)| {
        let name = step.get("action")?.get("name")?.as_str()?;
        let known = NODE_ACTIONS.contains(&name) || NON_NODE_ACTIONS.contains(&name);
        (!known).then(|| LoadError::UnknownAction {
            line,
            field: format!("steps[{pos}].action.name"),
            name: name.to_string(),
        })
    })
}

fn serde_field_hint(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).unwrap_or("record").to_string()
}

/// Reads a trajectory file, keeping every record's outcome (valid or not).
pub fn read_trajectory_records(path: &Path, limit: Option<usize>) -> Result<Vec<RecordOutcome>, LoadError> {
    let reader = open(path)?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if limit.is_some_and(|l| out.len() >= l) {
            break;
        }
        let line = line.map_err(|source| LoadError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_trajectory_line(i + 1, &line));
    }
    Ok(out)
}

/// Loads and validates trajectories in file order. The first invalid record
/// aborts the load.
pub fn load_trajectories(path: &Path, limit: Option<usize>) -> Result<Vec<Trajectory>, LoadError> {
    read_trajectory_records(path, limit)?
        .into_iter()
        .map(|r| r.result)
        .collect()
}

pub fn write_trajectories(trajectories: &[Trajectory], path: &Path) -> Result<usize, WriteError> {
    write_jsonl(trajectories, path)
}

pub fn write_curated(steps: &[CuratedStep], path: &Path) -> Result<usize, WriteError> {
    write_jsonl(steps, path)
}

pub fn load_curated(path: &Path) -> Result<Vec<CuratedStep>, LoadError> {
    let reader = open(path)?;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| LoadError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let step: CuratedStep = serde_json::from_str(&line).map_err(|e| LoadError::Json {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Err(ActionProblem::Unknown) = step.action.validate() {
            return Err(LoadError::UnknownAction {
                line: i + 1,
                field: "action.name".into(),
                name: step.action.name,
            });
        }
        out.push(step);
    }
    Ok(out)
}

/// Writes one JSON record per line, creating parent directories as needed.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<usize, WriteError> {
    let wrap = |source| WriteError {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(wrap)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| wrap(e.into()))?;
        w.write_all(b"\n").map_err(wrap)?;
    }
    w.flush().map_err(wrap)?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: &str, n: usize) -> Trajectory {
        Trajectory {
            id: id.into(),
            source: Some("test".into()),
            goal: "buy red shoes".into(),
            steps: (0..n)
                .map(|i| {
                    Step::new(
                        i,
                        "[a1] link 'Home'\n[a2] button 'Buy'",
                        if i == 0 { "" } else { "click('a1')" },
                        Action::node("click", "a2", &[]),
                        if i % 2 == 0 { "I should buy." } else { "" },
                    )
                })
                .collect(),
        }
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn action_serialization_matches_action_space_spelling() {
        assert_eq!(Action::node("click", "a51", &[]).to_string(), "click('a51')");
        assert_eq!(
            Action::node("fill", "237", &["example value"]).to_string(),
            "fill('237', 'example value')"
        );
        assert_eq!(
            Action::node("fill", "a12", &["it's"]).to_string(),
            "fill('a12', 'it\\'s')"
        );
        assert_eq!(
            Action::non_node("scroll", &["0", "-100.5"]).to_string(),
            "scroll(0, -100.5)"
        );
        assert_eq!(Action::non_node("noop", &[]).to_string(), "noop()");
        assert_eq!(
            Action::node("select_option", "c48", &["['red', 'green']"]).to_string(),
            "select_option('c48', ['red', 'green'])"
        );
        assert_eq!(
            Action::node("drag_and_drop", "56", &["a498"]).to_string(),
            "drag_and_drop('56', 'a498')"
        );
    }

    #[test]
    fn answer_composition() {
        let a = Action::node("click", "a1", &[]);
        assert_eq!(compose_answer("", &a), "click('a1')");
        assert_eq!(compose_answer("because", &a), "because\nclick('a1')");
    }

    #[test]
    fn loads_two_trajectories_in_order() {
        let f = write_lines(&[
            serde_json::to_string(&traj("t0", 2)).unwrap(),
            serde_json::to_string(&traj("t1", 3)).unwrap(),
        ]);
        let got = load_trajectories(f.path(), None).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].id, "t0");
        assert_eq!(got[1].steps.len(), 3);
    }

    #[test]
    fn limit_truncates() {
        let lines: Vec<String> = (0..5)
            .map(|i| serde_json::to_string(&traj(&format!("t{i}"), 1)).unwrap())
            .collect();
        let f = write_lines(&lines);
        let got = load_trajectories(f.path(), Some(1)).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].id, "t0");
    }

    #[test]
    fn unknown_action_names_the_action() {
        let mut v = serde_json::to_value(traj("t0", 1)).unwrap();
        v["steps"][0]["action"] = serde_json::json!({"name": "teleport"});
        let f = write_lines(&[v.to_string()]);
        let err = load_trajectories(f.path(), None).unwrap_err();
        assert!(matches!(&err, LoadError::UnknownAction { name, line: 1, .. } if name == "teleport"));
        assert!(err.to_string().contains("teleport"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[serde_json::to_string(&traj("t0", 1)).unwrap(), "{not json".into()]);
        let err = load_trajectories(f.path(), None).unwrap_err();
        assert_eq!(err.line(), Some(2));
    }

    #[test]
    fn invariant_violations_are_rejected_not_repaired() {
        type Mutation = fn(&mut Trajectory);
        let cases: [(Mutation, &str); 6] = [
            (|t| t.goal = "   ".into(), "goal"),
            (|t| t.steps[1].index = 5, "steps[1].index"),
            (|t| t.steps[0].state_raw.clear(), "steps[0].state"),
            (|t| t.steps[0].answer.push('x'), "steps[0].answer"),
            (|t| t.steps[0].action.target_bid = None, "steps[0].action.bid"),
            (|t| t.steps[0].action.kind = ActionKind::NonNode, "steps[0].action.kind"),
        ];
        for (mutate, field) in cases {
            let mut t = traj("t", 2);
            mutate(&mut t);
            let f = write_lines(&[serde_json::to_string(&t).unwrap()]);
            match load_trajectories(f.path(), None).unwrap_err() {
                LoadError::Invalid { field: got, .. } => assert_eq!(got, field),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn curated_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let steps: Vec<CuratedStep> = (0..3)
            .map(|i| CuratedStep {
                trajectory_id: "t\"0".into(),
                index: i,
                goal: "g ü".into(),
                history: String::new(),
                state_pruned: "[a1] link 'x'\n\tStaticText 'y'".into(),
                action: Action::node("fill", "a1", &["v"]),
                reasoning: "r".into(),
                reasoning_origin: if i == 2 {
                    ReasoningOrigin::Synthesized
                } else {
                    ReasoningOrigin::Original
                },
            })
            .collect();
        let p1 = dir.path().join("nested/a.jsonl");
        assert_eq!(write_curated(&steps, &p1).unwrap(), 3);
        let back = load_curated(&p1).unwrap();
        assert_eq!(back, steps);
        let p2 = dir.path().join("b.jsonl");
        write_curated(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_curated_list_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        assert_eq!(write_curated(&[], &p).unwrap(), 0);
        assert_eq!(fs::read_to_string(&p).unwrap(), "");
    }
}

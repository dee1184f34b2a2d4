//! Parsing of linearized accessibility trees.
//!
//! Each non-blank line of a state is one node. Lines of the form
//!
//! ```text
//! <indent>[<bid>] <role> '<name>'<rest>
//! ```
//!
//! (the grammar written out in [`NODE_LINE_PATTERN`]) become indexed nodes. Any other
//! line (e.g. `StaticText 'Home'` or `RootWebArea 'Title', focused`) becomes a
//! `Static` node with no bid and no position; those do not count toward the
//! indexed length `K`.
//!
//! Indentation is one level per tab. Leading spaces are converted using the
//! smallest non-zero space indent seen in the state as the unit.

use std::collections::HashSet;

use crate::trajectory::Action;

/// Grammar for an indexed node line.
pub const NODE_LINE_PATTERN: &str =
    r"^[ \t]*\[(?P<bid>[^\]\s]+)\]\s+(?P<role>[^\s']+)(?:\s+'(?P<name>(?:[^'\\]|\\.)*)')?(?P<rest>.*)$";

/// Role assigned to lines that do not match the node grammar.
pub const STATIC_ROLE: &str = "Static";

struct NodeLine<'a> {
    bid: &'a str,
    role: &'a str,
    name: Option<&'a str>,
}

/// Matches one line against the node grammar, returning the raw (still
/// escaped) name.
fn scan_node_line(line: &str) -> Option<NodeLine<'_>> {
    let rest = line.trim_start_matches([' ', '\t']).strip_prefix('[')?;
    let bid_end = rest.find(|c: char| c == ']' || c.is_whitespace())?;
    let bid = &rest[..bid_end];
    let rest = rest[bid_end..].strip_prefix(']')?;
    if bid.is_empty() {
        return None;
    }
    let after_ws = rest.trim_start();
    if after_ws.len() == rest.len() {
        return None;
    }
    let role_end = after_ws
        .find(|c: char| c == '\'' || c.is_whitespace())
        .unwrap_or(after_ws.len());
    if role_end == 0 {
        return None;
    }
    let role = &after_ws[..role_end];
    let tail = &after_ws[role_end..];
    let quoted = tail.trim_start();
    let name = if quoted.len() < tail.len() {
        quoted.strip_prefix('\'').and_then(quoted_name)
    } else {
        None
    };
    Some(NodeLine { bid, role, name })
}

/// Body of a single-quoted name up to the first unescaped quote; `None` when
/// the quote is never closed. A backslash escapes any character but a newline.
fn quoted_name(s: &str) -> Option<&str> {
    let mut chars = s.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '\'' => return Some(&s[..i]),
            '\\' => match chars.next() {
                Some((_, '\n')) | None => return None,
                Some(_) => {}
            },
            _ => {}
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AxTreeError {
    #[error("duplicate bid `{0}` in state")]
    DuplicateBid(String),
    #[error("target bid `{0}` not present in state")]
    MissingTarget(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxNode {
    /// 1-based position among indexed nodes; `None` for static lines.
    pub position: Option<usize>,
    pub bid: Option<String>,
    pub role: String,
    pub name: String,
    pub depth: usize,
    pub raw_line: String,
}

impl AxNode {
    pub fn is_indexed(&self) -> bool {
        self.position.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedState {
    pub nodes: Vec<AxNode>,
    /// Number of indexed nodes (`K`).
    pub indexed_count: usize,
    pub source_text: String,
    /// [`count_tokens`] of `source_text`.
    pub source_tokens: usize,
    /// Offset into `nodes` of each indexed position; `slots[k - 1]` is node `k`.
    slots: Vec<usize>,
}

impl LinearizedState {
    pub fn node_at(&self, position: usize) -> Option<&AxNode> {
        position
            .checked_sub(1)
            .and_then(|i| self.slots.get(i))
            .map(|&i| &self.nodes[i])
    }

    /// Index into `nodes` of each indexed position, in order.
    pub fn indexed_offsets(&self) -> &[usize] {
        &self.slots
    }

    pub fn position_of_bid(&self, bid: &str) -> Option<usize> {
        self.nodes
            .iter()
            .find(|n| n.bid.as_deref() == Some(bid))
            .and_then(|n| n.position)
    }

    /// The indexed position each node travels with when pruning: indexed
    /// nodes own themselves, a static line belongs to the closest indexed node
    /// above it, and static lines before the first indexed node belong to
    /// position 1. `None` only when the state has no indexed nodes.
    pub fn owners(&self) -> Vec<Option<usize>> {
        let first = if self.indexed_count > 0 { Some(1) } else { None };
        let mut current = None;
        self.nodes
            .iter()
            .map(|n| {
                if n.position.is_some() {
                    current = n.position;
                }
                current.or(first)
            })
            .collect()
    }
}

fn leading_indent(line: &str) -> (usize, usize) {
    let mut tabs = 0;
    let mut spaces = 0;
    for b in line.bytes() {
        match b {
            b'\t' => tabs += 1,
            b' ' => spaces += 1,
            _ => break,
        }
    }
    (tabs, spaces)
}

fn unescape_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Parses a linearized state. Blank lines are skipped; every other line
/// becomes exactly one node whose `raw_line` is the line as written.
pub fn parse_state(state_raw: &str) -> Result<LinearizedState, AxTreeError> {
    let lines: Vec<&str> = state_raw.split('\n').filter(|l| !l.trim().is_empty()).collect();
    let space_unit = lines
        .iter()
        .map(|l| leading_indent(l))
        .filter(|&(tabs, spaces)| tabs == 0 && spaces > 0)
        .map(|(_, spaces)| spaces)
        .min()
        .unwrap_or(1);

    let mut seen: HashSet<&str> = HashSet::new();
    let mut nodes = Vec::with_capacity(lines.len());
    let mut slots = Vec::new();
    for line in lines {
        let body = line.strip_suffix('\r').unwrap_or(line);
        let (tabs, spaces) = leading_indent(body);
        let depth = tabs + spaces / space_unit;
        match scan_node_line(body) {
            Some(NodeLine { bid, role, name }) => {
                if !seen.insert(bid) {
                    return Err(AxTreeError::DuplicateBid(bid.to_string()));
                }
                slots.push(nodes.len());
                nodes.push(AxNode {
                    position: Some(slots.len()),
                    bid: Some(bid.to_string()),
                    role: role.to_string(),
                    name: name.map_or(String::new(), unescape_name),
                    depth,
                    raw_line: line.to_string(),
                });
            }
            None => nodes.push(AxNode {
                position: None,
                bid: None,
                role: STATIC_ROLE.to_string(),
                name: body.trim().to_string(),
                depth,
                raw_line: line.to_string(),
            }),
        }
    }
    Ok(LinearizedState {
        indexed_count: slots.len(),
        nodes,
        source_text: state_raw.to_string(),
        source_tokens: count_tokens(state_raw),
        slots,
    })
}

/// Position of the gold action's target node. Non-node actions have none; a
/// node-grounded action whose bid is absent from the state is an error.
pub fn find_target(state: &LinearizedState, action: &Action) -> Result<Option<usize>, AxTreeError> {
    match (&action.target_bid, action.is_node_grounded()) {
        (Some(bid), true) => state
            .position_of_bid(bid)
            .map(Some)
            .ok_or_else(|| AxTreeError::MissingTarget(bid.clone())),
        _ => Ok(None),
    }
}

/// Whitespace-delimited token count.
pub fn count_tokens(text: &str) -> usize {
    if !text.is_ascii() {
        return text.split_whitespace().count();
    }
    let mut count = 0;
    let mut in_token = false;
    for b in text.bytes() {
        let ws = matches!(b, b' ' | b'\t' | b'\n' | b'\r' | b'\x0b' | b'\x0c');
        if !ws && !in_token {
            count += 1;
        }
        in_token = !ws;
    }
    count
}

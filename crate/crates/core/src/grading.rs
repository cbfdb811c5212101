//! Reply parsing, format-failure classification and per-turn grading.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::{RolloutPlan, Turn};

const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseResult {
    Integer { value: i64 },
    MissingTags,
    NonInteger { raw_inner: String },
}

impl ParseResult {
    pub fn value(&self) -> Option<i64> {
        match self {
            ParseResult::Integer { value } => Some(*value),
            _ => None,
        }
    }

    pub fn is_format_failure(&self) -> bool {
        !matches!(self, ParseResult::Integer { .. })
    }
}

/// Removes `<think>…</think>` spans. Returns the stripped text and whether
/// the tags were balanced.
///
/// Unbalanced input is repaired best-effort: text before an orphan
/// `</think>` is dropped, and an orphan `<think>` tag is removed on its own
/// so that a trailing answer survives.
pub fn strip_think(text: &str) -> (Cow<'_, str>, bool) {
    if !text.contains("think>") {
        return (Cow::Borrowed(text), true);
    }
    let mut out = String::with_capacity(text.len());
    let mut balanced = true;
    let mut rest = text;
    loop {
        let open = rest.find(THINK_OPEN);
        let close = rest.find(THINK_CLOSE);
        match (open, close) {
            (None, None) => {
                out.push_str(rest);
                break;
            }
            (Some(o), Some(c)) if o < c => {
                out.push_str(&rest[..o]);
                rest = &rest[c + THINK_CLOSE.len()..];
            }
            (_, Some(c)) => {
                // closing tag with no opener before it
                balanced = false;
                out.clear();
                rest = &rest[c + THINK_CLOSE.len()..];
            }
            (Some(o), None) => {
                balanced = false;
                out.push_str(&rest[..o]);
                rest = &rest[o + THINK_OPEN.len()..];
            }
        }
    }
    (Cow::Owned(out), balanced)
}

fn parse_integer(inner: &str) -> Option<i64> {
    let s = inner.trim();
    let digits = s.strip_prefix(['+', '-']).unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse::<i64>().ok()
}

/// Classifies a raw reply. The last well-formed `<answer>…</answer>` pair
/// wins; the inner text must be an optionally signed run of digits.
pub fn extract_answer(raw: &str) -> ParseResult {
    let (text, _) = strip_think(raw);
    let mut last: Option<&str> = None;
    let mut rest: &str = &text;
    while let Some(o) = rest.find(ANSWER_OPEN) {
        let after = &rest[o + ANSWER_OPEN.len()..];
        let Some(c) = after.find(ANSWER_CLOSE) else { break };
        let inner = &after[..c];
        // a nested opener means the earlier one was never closed
        let inner = match inner.rfind(ANSWER_OPEN) {
            Some(i) => &inner[i + ANSWER_OPEN.len()..],
            None => inner,
        };
        last = Some(inner);
        rest = &after[c + ANSWER_CLOSE.len()..];
    }
    match last {
        None => ParseResult::MissingTags,
        Some(inner) => match parse_integer(inner) {
            Some(value) => ParseResult::Integer { value },
            None => ParseResult::NonInteger {
                raw_inner: inner.to_string(),
            },
        },
    }
}

/// Canonical reply text for an integer answer.
pub fn format_answer(value: i64) -> String {
    format!("{ANSWER_OPEN}{value}{ANSWER_CLOSE}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaBasis {
    PreviousParsed,
    AbsoluteFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnGrade {
    pub parse: ParseResult,
    pub absolute_correct: bool,
    pub delta_correct: bool,
    pub delta_basis: DeltaBasis,
}

impl TurnGrade {
    pub fn format_failure(&self) -> bool {
        self.parse.is_format_failure()
    }
}

/// Grades one turn. `prev` is the previous turn's parse, or `None` at t = 1.
///
/// The state update counts as correct when it matches the true increment,
/// whatever the previous state was. Without a usable previous integer (and
/// for stateless variants) the delta grade falls back to absolute.
pub fn grade_turn(prev: Option<&ParseResult>, current: &ParseResult, turn: &Turn) -> TurnGrade {
    let value = current.value();
    let absolute_correct = value == Some(turn.true_state);
    let prev_value = if turn.stateful { prev.and_then(ParseResult::value) } else { None };
    let (delta_correct, delta_basis) = match (prev_value, value) {
        (Some(p), Some(c)) => (c.wrapping_sub(p) == turn.true_increment, DeltaBasis::PreviousParsed),
        (Some(_), None) => (false, DeltaBasis::PreviousParsed),
        (None, _) => (absolute_correct, DeltaBasis::AbsoluteFallback),
    };
    TurnGrade {
        parse: current.clone(),
        absolute_correct,
        delta_correct,
        delta_basis,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutGrades {
    pub grades: Vec<TurnGrade>,
    /// Largest t such that turns 1..=t are all delta-correct.
    pub task_correct_prefix: usize,
}

/// Number of leading delta-correct grades.
pub fn correct_prefix(grades: &[TurnGrade]) -> usize {
    grades.iter().take_while(|g| g.delta_correct).count()
}

/// Grades a sequence of raw replies against a plan.
pub fn grade_rollout<S: AsRef<str>>(replies: &[S], plan: &RolloutPlan) -> Result<RolloutGrades> {
    if replies.len() != plan.turns.len() {
        return Err(Error::TranscriptMismatch(format!(
            "{} replies for {} planned turns",
            replies.len(),
            plan.turns.len()
        )));
    }
    let mut grades = Vec::with_capacity(replies.len());
    let mut prev: Option<ParseResult> = None;
    for (raw, turn) in replies.iter().zip(&plan.turns) {
        let parse = extract_answer(raw.as_ref());
        grades.push(grade_turn(prev.as_ref(), &parse, turn));
        prev = Some(parse);
    }
    let task_correct_prefix = correct_prefix(&grades);
    Ok(RolloutGrades {
        grades,
        task_correct_prefix,
    })
}

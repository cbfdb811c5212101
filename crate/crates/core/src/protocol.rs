//! Chat protocol: system prompt rendering, per-turn user messages, history
//! policies and counterfactual history injection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grading::{format_answer, strip_think};
use crate::seed::StreamRng;
use crate::taskgen::{RolloutPlan, TaskDictionary, TaskSpec, TaskVariant};

const KV_SUM_TEMPLATE: &str = include_str!("../assets/prompts/kv_sum_v1.txt");
const RETRIEVAL_TEMPLATE: &str = include_str!("../assets/prompts/retrieval_only_v1.txt");
const ADDITION_TEMPLATE: &str = include_str!("../assets/prompts/addition_only_v1.txt");
const PREFIX_SUM_TEMPLATE: &str = include_str!("../assets/prompts/prefix_sum_v1.txt");
const SELF_VERIFY_SENTENCE: &str = include_str!("../assets/prompts/self_verify_v1.txt");

/// Version tag of the bundled prompt templates, recorded in run manifests.
pub const TEMPLATE_VERSION: &str = "v1";

const THINK_STEP_BY_STEP: &str = "Think step by step before answering.";
const DIRECT_CLOSING: &str =
    "IMPORTANT: DO NOT OUTPUT ANY OTHER TEXT OUTSIDE ANSWER TAGS. Only provide the final running sum OF ALL TURNS in <answer> tags.";
const REASONED_CLOSING: &str = "IMPORTANT: Only provide the final running sum OF ALL TURNS in <answer> tags.";
const STATELESS_DIRECT_CLOSING: &str =
    "IMPORTANT: DO NOT OUTPUT ANY OTHER TEXT OUTSIDE ANSWER TAGS. Only provide the answer for the current turn in <answer> tags.";
const STATELESS_REASONED_CLOSING: &str = "IMPORTANT: Only provide the answer for the current turn in <answer> tags.";

/// Few-shot dictionary used in every kv-sum prompt.
pub const DEMO_DICTIONARY: [(&str, i64); 6] = [
    ("apple", 5),
    ("banana", 0),
    ("cherry", 7),
    ("grape", -4),
    ("kiwi", 2),
    ("mango", -1),
];
const DEMO_GROUP_SIZES: [usize; 3] = [2, 3, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    #[default]
    Direct,
    Cot,
    SelfVerify,
    Thinking,
}

impl PromptVariant {
    fn reasons_in_text(self) -> bool {
        matches!(self, PromptVariant::Cot | PromptVariant::SelfVerify)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryPolicy {
    #[default]
    Full,
    SlidingWindow(usize),
}

impl HistoryPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            HistoryPolicy::SlidingWindow(0) => Err(Error::config("sliding window must keep at least 1 turn")),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for HistoryPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HistoryPolicy::Full => f.write_str("full"),
            HistoryPolicy::SlidingWindow(n) => write!(f, "window-{n}"),
        }
    }
}

/// Python-style dict literal: `{'apple': 5, 'banana': 0}`.
pub fn render_dictionary<'a>(entries: impl IntoIterator<Item = (&'a str, i64)>) -> String {
    let body: Vec<String> = entries.into_iter().map(|(k, v)| format!("'{k}': {v}")).collect();
    format!("{{{}}}", body.join(", "))
}

fn few_shot_examples(variant: PromptVariant) -> String {
    let mut lines = Vec::new();
    for (n, &group) in DEMO_GROUP_SIZES.iter().enumerate() {
        lines.push(format!("Example {}: keys in groups of {group}", n + 1));
        let mut total = 0i64;
        for chunk in DEMO_DICTIONARY.chunks(group) {
            let keys: Vec<&str> = chunk.iter().map(|(k, _)| *k).collect();
            lines.push(format!("User: {}", keys.join(", ")));
            let before = total;
            total += chunk.iter().map(|(_, v)| v).sum::<i64>();
            let answer = format_answer(total);
            if variant.reasons_in_text() {
                let lookups: Vec<String> = chunk.iter().map(|(k, v)| format!("{k} = {v}")).collect();
                let terms: Vec<String> = std::iter::once(before)
                    .chain(chunk.iter().map(|(_, v)| *v))
                    .map(|v| if v < 0 { format!("({v})") } else { v.to_string() })
                    .collect();
                lines.push(format!(
                    "Assistant: {}. {} = {total}. {answer}",
                    lookups.join(", "),
                    terms.join(" + ")
                ));
            } else {
                lines.push(format!("Assistant: {answer}"));
            }
        }
    }
    lines.join("\n")
}

fn closing(variant: PromptVariant, stateful: bool) -> String {
    let base = match (variant.reasons_in_text(), stateful) {
        (false, true) => DIRECT_CLOSING,
        (true, true) => REASONED_CLOSING,
        (false, false) => STATELESS_DIRECT_CLOSING,
        (true, false) => STATELESS_REASONED_CLOSING,
    };
    match variant {
        PromptVariant::Direct | PromptVariant::Thinking => base.to_string(),
        PromptVariant::Cot => format!("{base}\n{THINK_STEP_BY_STEP}"),
        PromptVariant::SelfVerify => format!("{base}\n{THINK_STEP_BY_STEP}\n{SELF_VERIFY_SENTENCE}"),
    }
}

/// Instantiates the system prompt for `spec` over `dictionary`.
pub fn render_system_prompt(spec: &TaskSpec, dictionary: &TaskDictionary, variant: PromptVariant) -> String {
    let demo = render_dictionary(DEMO_DICTIONARY);
    let dict = render_dictionary(dictionary.entries().iter().map(|(k, v)| (k.as_str(), *v)));
    let template = match spec.variant {
        TaskVariant::KvSum => KV_SUM_TEMPLATE,
        TaskVariant::RetrievalOnly => RETRIEVAL_TEMPLATE,
        TaskVariant::AdditionOnly => ADDITION_TEMPLATE,
        TaskVariant::PrefixSum => PREFIX_SUM_TEMPLATE,
    };
    template
        .replace("@K@", &spec.turn_complexity.to_string())
        .replace("@DEMO_DICTIONARY@", &demo)
        .replace("@EXAMPLES@", &few_shot_examples(variant))
        .replace("@DICTIONARY@", &dict)
        .replace("@CLOSING@", &closing(variant, spec.variant.is_stateful()))
}

/// Live-conversation user message: keys joined by a bare comma.
pub fn render_turn_user<S: AsRef<str>>(keys: &[S]) -> Result<String> {
    if keys.is_empty() {
        return Err(Error::invalid("a turn needs at least one key"));
    }
    let parts: Vec<&str> = keys.iter().map(AsRef::as_ref).collect();
    Ok(parts.join(","))
}

/// One completed exchange. `turn` is the 1-based task turn it answered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub turn: usize,
    pub user: String,
    pub assistant: String,
}

/// Chat history of one rollout: the system prompt plus completed exchanges.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct History {
    pub system: String,
    pub exchanges: Vec<Exchange>,
}

/// What [`History::append_assistant`] stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Appended {
    pub stored: String,
    /// Set when `<think>` tags were unbalanced and stripping was best-effort.
    pub warning: Option<String>,
}

/// Content to keep in history for a raw reply under `variant`.
pub fn stored_reply(raw: &str, variant: PromptVariant) -> Appended {
    match variant {
        PromptVariant::Thinking => {
            let (stripped, balanced) = strip_think(raw);
            Appended {
                stored: stripped.into_owned(),
                warning: (!balanced).then(|| "unbalanced <think> tags; stripped best-effort".to_string()),
            }
        }
        _ => Appended {
            stored: raw.to_string(),
            warning: None,
        },
    }
}

impl History {
    pub fn new(system: impl Into<String>) -> Self {
        History {
            system: system.into(),
            exchanges: Vec::new(),
        }
    }

    /// Records the agent's reply to `user` for task turn `turn`.
    pub fn append_assistant(&mut self, turn: usize, user: String, raw_reply: &str, variant: PromptVariant) -> Appended {
        let appended = stored_reply(raw_reply, variant);
        self.exchanges.push(Exchange {
            turn,
            user,
            assistant: appended.stored.clone(),
        });
        appended
    }

    /// Exchanges visible under `policy`.
    pub fn visible(&self, policy: HistoryPolicy) -> &[Exchange] {
        match policy {
            HistoryPolicy::Full => &self.exchanges,
            HistoryPolicy::SlidingWindow(n) => {
                let start = self.exchanges.len().saturating_sub(n);
                &self.exchanges[start..]
            }
        }
    }

    /// System message, visible exchanges, then `current_user`.
    pub fn apply_policy(&self, policy: HistoryPolicy, current_user: &str) -> Vec<Message> {
        let visible = self.visible(policy);
        let mut out = Vec::with_capacity(2 + 2 * visible.len());
        out.push(Message::new(Role::System, self.system.clone()));
        for ex in visible {
            out.push(Message::new(Role::User, ex.user.clone()));
            out.push(Message::new(Role::Assistant, ex.assistant.clone()));
        }
        out.push(Message::new(Role::User, current_user));
        out
    }
}

fn default_offset_low() -> i64 {
    -99
}
fn default_offset_high() -> i64 {
    99
}

/// Counterfactual corruption of displayed answers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub error_rate: f64,
    #[serde(default = "default_offset_low")]
    pub offset_low: i64,
    #[serde(default = "default_offset_high")]
    pub offset_high: i64,
    pub seed: u64,
}

impl InjectionSpec {
    pub fn new(error_rate: f64, seed: u64) -> Self {
        InjectionSpec {
            error_rate,
            offset_low: default_offset_low(),
            offset_high: default_offset_high(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(Error::config(format!("error rate {} outside [0, 1]", self.error_rate)));
        }
        validate_offset_range(self.offset_low, self.offset_high)
    }
}

pub(crate) fn validate_offset_range(low: i64, high: i64) -> Result<()> {
    if low > high || (low == 0 && high == 0) {
        return Err(Error::config(format!("offset range [{low}, {high}] has no nonzero value")));
    }
    Ok(())
}

/// Uniform draw from `[low, high] \ {0}`.
pub fn nonzero_offset(rng: &mut StreamRng, low: i64, high: i64) -> i64 {
    loop {
        let d = rng.gen_range(low..=high);
        if d != 0 {
            return d;
        }
    }
}

/// A fabricated history plus which turns were corrupted.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHistory {
    pub history: History,
    pub corrupted: Vec<bool>,
    pub displayed: Vec<i64>,
}

/// Builds the first `upto_turn` turns of `plan` as if answered in the
/// answer-tag format. Each turn is corrupted independently with probability
/// `error_rate`; a corrupted turn shows `true_state + δ` with δ ≠ 0, others
/// show `true_state`. One uniform and one offset are drawn per turn
/// regardless of the outcome, so masks at different rates from the same
/// seed are nested.
pub fn inject_errors(plan: &RolloutPlan, system: String, upto_turn: usize, inj: &InjectionSpec) -> Result<SyntheticHistory> {
    inj.validate()?;
    if upto_turn > plan.turns.len() {
        return Err(Error::invalid(format!(
            "cannot inject {upto_turn} turns into a plan of {}",
            plan.turns.len()
        )));
    }
    let mut rng = <StreamRng as rand::SeedableRng>::seed_from_u64(inj.seed);
    let mut history = History::new(system);
    let mut corrupted = Vec::with_capacity(upto_turn);
    let mut displayed = Vec::with_capacity(upto_turn);
    for turn in &plan.turns[..upto_turn] {
        let u: f64 = rng.gen();
        let delta = nonzero_offset(&mut rng, inj.offset_low, inj.offset_high);
        let hit = u < inj.error_rate;
        let shown = if hit { turn.true_state + delta } else { turn.true_state };
        history.exchanges.push(Exchange {
            turn: turn.index,
            user: render_turn_user(&turn.keys)?,
            assistant: format_answer(shown),
        });
        corrupted.push(hit);
        displayed.push(shown);
    }
    Ok(SyntheticHistory {
        history,
        corrupted,
        displayed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grading::extract_answer;
    use crate::taskgen::{sample_rollout, Vocabulary};

    fn plan(turns: usize) -> RolloutPlan {
        sample_rollout(&TaskSpec::kv_sum(1, turns, 1, 11), &Vocabulary::bundled(100).unwrap(), 0).unwrap()
    }

    #[test]
    fn few_shot_answers() {
        let text = few_shot_examples(PromptVariant::Direct);
        let answers: Vec<i64> = text
            .lines()
            .filter(|l| l.starts_with("Assistant:"))
            .map(|l| extract_answer(l).value().unwrap())
            .collect();
        assert_eq!(answers, vec![5, 8, 9, 12, 9, 9]);
        assert!(text.contains("Example 3: keys in groups of 6\nUser: apple, banana, cherry, grape, kiwi, mango\nAssistant: <answer>9</answer>"));
    }

    #[test]
    fn cot_prompt_keeps_reasoning_examples() {
        let spec = TaskSpec::kv_sum(2, 1, 1, 0);
        let dict = TaskDictionary::new(vec![("alarm".into(), 88)]);
        let p = render_system_prompt(&spec, &dict, PromptVariant::Cot);
        assert!(p.contains(THINK_STEP_BY_STEP));
        assert!(p.contains("Assistant: cherry = 7, grape = -4. 5 + 7 + (-4) = 8. <answer>8</answer>"));
        assert!(!p.contains("DO NOT OUTPUT ANY OTHER TEXT"));
        let sv = render_system_prompt(&spec, &dict, PromptVariant::SelfVerify);
        assert!(sv.ends_with(SELF_VERIFY_SENTENCE));
    }

    #[test]
    fn rendering_is_pure() {
        let spec = TaskSpec::kv_sum(2, 1, 1, 0);
        let p = plan(3);
        assert_eq!(
            render_system_prompt(&spec, &p.dictionary, PromptVariant::Direct),
            render_system_prompt(&spec, &p.dictionary, PromptVariant::Direct)
        );
    }

    #[test]
    fn decomposed_templates_render() {
        let dict = TaskDictionary::new(vec![("alarm".into(), 88)]);
        for v in [TaskVariant::RetrievalOnly, TaskVariant::AdditionOnly, TaskVariant::PrefixSum] {
            let spec = TaskSpec { variant: v, ..TaskSpec::kv_sum(1, 1, 1, 0) };
            let p = render_system_prompt(&spec, &dict, PromptVariant::Direct);
            assert!(!p.contains('@'), "{v}: {p}");
            assert!(p.ends_with("in <answer> tags."));
        }
    }

    #[test]
    fn user_messages() {
        assert_eq!(render_turn_user(&["alarm", "coach"]).unwrap(), "alarm,coach");
        assert_eq!(render_turn_user(&["doubt"]).unwrap(), "doubt");
        let ten = vec!["alarm"; 10];
        assert_eq!(render_turn_user(&ten).unwrap().matches(',').count(), 9);
        assert!(render_turn_user::<&str>(&[]).is_err());
    }

    #[test]
    fn assistant_storage_by_variant() {
        let mut h = History::new("sys");
        let a = h.append_assistant(1, "alarm,coach".into(), "<think>88-31=57</think><answer>57</answer>", PromptVariant::Thinking);
        assert_eq!(a.stored, "<answer>57</answer>");
        assert!(a.warning.is_none());
        let a = h.append_assistant(2, "x".into(), "<answer>57</answer>", PromptVariant::Direct);
        assert_eq!(a.stored, "<answer>57</answer>");
        let cot = "alarm = 88, coach = -31. 0 + 88 + (-31) = 57. <answer>57</answer>";
        assert_eq!(h.append_assistant(3, "x".into(), cot, PromptVariant::Cot).stored, cot);
        let a = h.append_assistant(4, "x".into(), "<think>open <answer>1</answer>", PromptVariant::Thinking);
        assert!(a.warning.is_some());
    }

    #[test]
    fn history_policies() {
        let mut h = History::new("sys");
        for t in 1..=10 {
            h.append_assistant(t, format!("k{t}"), &format_answer(t as i64), PromptVariant::Direct);
        }
        let w = h.apply_policy(HistoryPolicy::SlidingWindow(3), "next");
        assert_eq!(w.len(), 1 + 6 + 1);
        assert_eq!(w[0].role, Role::System);
        assert_eq!(w[1].content, "k8");
        assert_eq!(w.last().unwrap().content, "next");
        assert_eq!(h.apply_policy(HistoryPolicy::SlidingWindow(10), "n"), h.apply_policy(HistoryPolicy::Full, "n"));
        assert_eq!(h.apply_policy(HistoryPolicy::SlidingWindow(50), "n"), h.apply_policy(HistoryPolicy::Full, "n"));
        assert!(HistoryPolicy::SlidingWindow(0).validate().is_err());

        let mut long = History::new("sys");
        for t in 1..=100 {
            long.append_assistant(t, "k".into(), "<answer>1</answer>", PromptVariant::Direct);
        }
        assert_eq!(long.apply_policy(HistoryPolicy::Full, "n").len() - 1, 201);
    }

    #[test]
    fn injection_extremes() {
        let p = plan(200);
        let healed = inject_errors(&p, "s".into(), 200, &InjectionSpec::new(0.0, 1)).unwrap();
        assert_eq!(healed.displayed, p.true_states());
        let broken = inject_errors(&p, "s".into(), 200, &InjectionSpec::new(1.0, 1)).unwrap();
        assert!(broken.displayed.iter().zip(p.true_states()).all(|(d, t)| *d != t));
        for ex in &broken.history.exchanges {
            assert!(extract_answer(&ex.assistant).value().is_some());
        }
    }

    #[test]
    fn injection_rate_concentrates() {
        let p = plan(10_000);
        let h = inject_errors(&p, "s".into(), 10_000, &InjectionSpec::new(0.5, 99)).unwrap();
        let frac = h.corrupted.iter().filter(|&&c| c).count() as f64 / 1e4;
        assert!((0.49..=0.51).contains(&frac), "{frac}");
    }

    #[test]
    fn injection_masks_nest_across_rates() {
        let p = plan(500);
        let lo = inject_errors(&p, "s".into(), 500, &InjectionSpec::new(0.25, 3)).unwrap();
        let hi = inject_errors(&p, "s".into(), 500, &InjectionSpec::new(0.75, 3)).unwrap();
        assert!(lo.corrupted.iter().zip(&hi.corrupted).all(|(a, b)| !a || *b));
    }

    #[test]
    fn injection_validation() {
        let p = plan(5);
        assert!(inject_errors(&p, "s".into(), 6, &InjectionSpec::new(0.1, 0)).is_err());
        assert!(inject_errors(&p, "s".into(), 5, &InjectionSpec::new(1.5, 0)).is_err());
        let zero = InjectionSpec { offset_low: 0, offset_high: 0, ..InjectionSpec::new(0.1, 0) };
        assert!(zero.validate().is_err());
    }
}

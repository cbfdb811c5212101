//! Task instances for the key-value running-sum benchmark and its
//! decomposed variants.
//!
//! A rollout is a pure function of `(TaskSpec, rollout_id)`: the dictionary
//! keys are the first `num_keys` words of the vocabulary, values are
//! resampled per rollout, and keys are drawn uniformly with replacement.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};

const BUNDLED_WORDLIST: &str = include_str!("../assets/wordlist.txt");

/// Ordered list of distinct lowercase five-letter words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

fn is_valid_word(w: &str) -> bool {
    w.len() == 5 && w.bytes().all(|b| b.is_ascii_lowercase())
}

impl Vocabulary {
    /// First `n` valid words of `text` (one per line), skipping
    /// wrong-length words and duplicates.
    pub fn from_lines(text: &str, n: usize) -> std::result::Result<Self, String> {
        if n == 0 {
            return Err("vocabulary size must be at least 1".into());
        }
        let mut words: Vec<String> = Vec::with_capacity(n);
        for line in text.lines() {
            let w = line.trim();
            if is_valid_word(w) && !words.iter().any(|x| x == w) {
                words.push(w.to_string());
                if words.len() == n {
                    return Ok(Vocabulary { words });
                }
            }
        }
        Err(format!(
            "only {} valid five-letter words, {} requested",
            words.len(),
            n
        ))
    }

    /// The wordlist shipped with the crate.
    pub fn bundled(n: usize) -> Result<Self> {
        Self::from_lines(BUNDLED_WORDLIST, n).map_err(|reason| Error::Wordlist {
            path: "<bundled>".into(),
            reason,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Reads a UTF-8 wordlist and keeps its first `n` valid entries.
pub fn build_vocabulary(path: &Path, n: usize) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocabulary::from_lines(&text, n).map_err(|reason| Error::Wordlist {
        path: path.to_path_buf(),
        reason,
    })
}

/// In-context knowledge: word → integer, in insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<(String, i64)>", into = "Vec<(String, i64)>")]
pub struct TaskDictionary {
    entries: Vec<(String, i64)>,
    index: HashMap<String, usize>,
}

impl TaskDictionary {
    pub fn new(entries: Vec<(String, i64)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (k, _))| (k.clone(), i))
            .collect();
        TaskDictionary { entries, index }
    }

    pub fn get(&self, key: &str) -> Option<i64> {
        self.index.get(key).map(|&i| self.entries[i].1)
    }

    pub fn entries(&self) -> &[(String, i64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl From<Vec<(String, i64)>> for TaskDictionary {
    fn from(v: Vec<(String, i64)>) -> Self {
        TaskDictionary::new(v)
    }
}

impl From<TaskDictionary> for Vec<(String, i64)> {
    fn from(d: TaskDictionary) -> Self {
        d.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskVariant {
    KvSum,
    RetrievalOnly,
    AdditionOnly,
    PrefixSum,
}

impl TaskVariant {
    /// Whether the expected answer accumulates across turns.
    pub fn is_stateful(self) -> bool {
        matches!(self, TaskVariant::KvSum | TaskVariant::PrefixSum)
    }

    pub fn uses_dictionary(self) -> bool {
        matches!(self, TaskVariant::KvSum | TaskVariant::RetrievalOnly)
    }
}

impl fmt::Display for TaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskVariant::KvSum => "kv_sum",
            TaskVariant::RetrievalOnly => "retrieval_only",
            TaskVariant::AdditionOnly => "addition_only",
            TaskVariant::PrefixSum => "prefix_sum",
        })
    }
}

fn default_num_keys() -> usize {
    100
}
fn default_value_low() -> i64 {
    -99
}
fn default_value_high() -> i64 {
    99
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default = "default_variant")]
    pub variant: TaskVariant,
    #[serde(default = "default_num_keys")]
    pub num_keys: usize,
    #[serde(default = "default_value_low")]
    pub value_low: i64,
    #[serde(default = "default_value_high")]
    pub value_high: i64,
    /// Steps per turn (K).
    pub turn_complexity: usize,
    /// Number of turns (T).
    pub num_turns: usize,
    pub num_rollouts: usize,
    pub master_seed: u64,
}

fn default_variant() -> TaskVariant {
    TaskVariant::KvSum
}

impl TaskSpec {
    pub fn kv_sum(turn_complexity: usize, num_turns: usize, num_rollouts: usize, seed: u64) -> Self {
        TaskSpec {
            variant: TaskVariant::KvSum,
            num_keys: default_num_keys(),
            value_low: default_value_low(),
            value_high: default_value_high(),
            turn_complexity,
            num_turns,
            num_rollouts,
            master_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.turn_complexity == 0 {
            return Err(Error::config("task.turn_complexity must be >= 1"));
        }
        if self.num_turns == 0 {
            return Err(Error::config("task.num_turns must be >= 1"));
        }
        if self.num_rollouts == 0 {
            return Err(Error::config("task.num_rollouts must be >= 1"));
        }
        if self.value_low >= self.value_high {
            return Err(Error::config("task.value_low must be < task.value_high"));
        }
        if self.variant.uses_dictionary() && self.num_keys == 0 {
            return Err(Error::config("task.num_keys must be >= 1"));
        }
        if self.variant != TaskVariant::KvSum && self.turn_complexity != 1 {
            return Err(Error::config(format!(
                "task.turn_complexity must be 1 for the {} variant",
                self.variant
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.turn_complexity * self.num_turns
    }
}

/// One user→assistant exchange worth of ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based.
    pub index: usize,
    /// Tokens shown to the agent: dictionary words, or literal integers for
    /// the arithmetic-only variants.
    pub keys: Vec<String>,
    pub values: Vec<i64>,
    pub true_increment: i64,
    /// Expected answer after this turn. For stateless variants this is the
    /// turn's own answer rather than a running total.
    pub true_state: i64,
    #[serde(default = "yes")]
    pub stateful: bool,
}

fn yes() -> bool {
    true
}

/// Groups a flat step sequence into turns of `k` consecutive steps.
pub fn group_steps(keys: &[String], values: &[i64], k: usize) -> Vec<Turn> {
    assert!(k >= 1 && keys.len() == values.len() && keys.len().is_multiple_of(k));
    let mut state = 0i64;
    keys.chunks(k)
        .zip(values.chunks(k))
        .enumerate()
        .map(|(i, (ks, vs))| {
            let inc: i64 = vs.iter().sum();
            state += inc;
            Turn {
                index: i + 1,
                keys: ks.to_vec(),
                values: vs.to_vec(),
                true_increment: inc,
                true_state: state,
                stateful: true,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutPlan {
    pub rollout_id: usize,
    pub variant: TaskVariant,
    pub turn_complexity: usize,
    pub dictionary: TaskDictionary,
    /// Dictionary keys in query order; empty for the arithmetic-only variants.
    pub key_sequence: Vec<String>,
    pub turns: Vec<Turn>,
}

impl RolloutPlan {
    /// FNV-1a over the newline-joined key sequence.
    pub fn key_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (i, k) in self.key_sequence.iter().enumerate() {
            if i > 0 {
                h = fnv_step(h, b'\n');
            }
            for &b in k.as_bytes() {
                h = fnv_step(h, b);
            }
        }
        h
    }

    pub fn true_states(&self) -> Vec<i64> {
        self.turns.iter().map(|t| t.true_state).collect()
    }
}

#[inline]
fn fnv_step(h: u64, b: u8) -> u64 {
    (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
}

fn sample_dictionary(spec: &TaskSpec, vocab: &Vocabulary, rng: &mut StreamRng) -> Result<TaskDictionary> {
    if vocab.len() < spec.num_keys {
        return Err(Error::config(format!(
            "vocabulary has {} words, task needs {}",
            vocab.len(),
            spec.num_keys
        )));
    }
    let entries = vocab.words()[..spec.num_keys]
        .iter()
        .map(|w| (w.clone(), rng.gen_range(spec.value_low..=spec.value_high)))
        .collect();
    Ok(TaskDictionary::new(entries))
}

/// Builds rollout `rollout_id` of `spec`.
pub fn sample_rollout(spec: &TaskSpec, vocab: &Vocabulary, rollout_id: usize) -> Result<RolloutPlan> {
    spec.validate()?;
    if rollout_id >= spec.num_rollouts {
        return Err(Error::invalid(format!(
            "rollout {rollout_id} out of range (num_rollouts = {})",
            spec.num_rollouts
        )));
    }
    let mut rng = seed::stream_rng(spec.master_seed, seed::domain::TASK, rollout_id as u64);
    let dictionary = if spec.variant.uses_dictionary() {
        sample_dictionary(spec, vocab, &mut rng)?
    } else {
        TaskDictionary::new(Vec::new())
    };

    let (key_sequence, turns) = match spec.variant {
        TaskVariant::KvSum => {
            let n = spec.total_steps();
            let keys: Vec<String> = (0..n)
                .map(|_| dictionary.entries()[rng.gen_range(0..dictionary.len())].0.clone())
                .collect();
            let values: Vec<i64> = keys
                .iter()
                .map(|k| dictionary.get(k).expect("sampled from dictionary"))
                .collect();
            let turns = group_steps(&keys, &values, spec.turn_complexity);
            (keys, turns)
        }
        _ => {
            let mut turns = Vec::with_capacity(spec.num_turns);
            let mut state = 0;
            for t in 1..=spec.num_turns {
                let turn = variant_turn(spec, &dictionary, t, state, &mut rng)?;
                state = turn.true_state;
                turns.push(turn);
            }
            let keys = if spec.variant == TaskVariant::RetrievalOnly {
                turns.iter().flat_map(|t| t.keys.iter().cloned()).collect()
            } else {
                Vec::new()
            };
            (keys, turns)
        }
    };

    Ok(RolloutPlan {
        rollout_id,
        variant: spec.variant,
        turn_complexity: spec.turn_complexity,
        dictionary,
        key_sequence,
        turns,
    })
}

/// One turn of a decomposed variant. `prev_state` is only read by
/// [`TaskVariant::PrefixSum`].
pub fn variant_turn(
    spec: &TaskSpec,
    dictionary: &TaskDictionary,
    index: usize,
    prev_state: i64,
    rng: &mut StreamRng,
) -> Result<Turn> {
    let draw = |rng: &mut StreamRng| rng.gen_range(spec.value_low..=spec.value_high);
    let turn = match spec.variant {
        TaskVariant::KvSum => {
            return Err(Error::invalid("variant_turn is not defined for the kv_sum task"))
        }
        TaskVariant::RetrievalOnly => {
            if dictionary.is_empty() {
                return Err(Error::invalid("retrieval task needs a dictionary"));
            }
            let (key, value) = dictionary.entries()[rng.gen_range(0..dictionary.len())].clone();
            Turn {
                index,
                keys: vec![key],
                values: vec![value],
                true_increment: value,
                true_state: value,
                stateful: false,
            }
        }
        TaskVariant::AdditionOnly => {
            let (a, b) = (draw(rng), draw(rng));
            Turn {
                index,
                keys: vec![a.to_string(), b.to_string()],
                values: vec![a, b],
                true_increment: a + b,
                true_state: a + b,
                stateful: false,
            }
        }
        TaskVariant::PrefixSum => {
            let v = draw(rng);
            Turn {
                index,
                keys: vec![v.to_string()],
                values: vec![v],
                true_increment: v,
                true_state: prev_state + v,
                stateful: true,
            }
        }
    };
    Ok(turn)
}

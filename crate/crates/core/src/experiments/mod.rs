//! Experiment pipelines: conversations driven turn by turn, graded online,
//! persisted to a run directory and aggregated.

mod config;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{apply_override, load_config, parse_config, ExperimentConfig, ExperimentKind, SCHEMA_VERSION};

use crate::agents::{next_reply, Agent, AgentReply, TurnContext};
use crate::error::{Error, Result};
use crate::grading::{extract_answer, grade_turn, ParseResult, TurnGrade};
use crate::metrics::{self, aggregate, wilson_interval, MetricsTable, RolloutOutcome, Z95};
use crate::protocol::{inject_errors, render_system_prompt, render_turn_user, History, HistoryPolicy, InjectionSpec, PromptVariant};
use crate::seed::{derive_seed, domain};
use crate::store::{self, read_transcript, rollout_status, HorizonEntry, RolloutStatus, RunDir, TranscriptWriter, TurnRecord};
use crate::taskgen::{build_vocabulary, sample_rollout, RolloutPlan, TaskSpec, TaskVariant, Vocabulary};

/// Seed of the agent session for `stream` under `master_seed`.
pub fn agent_seed(master_seed: u64, stream: u64) -> u64 {
    derive_seed(derive_seed(master_seed, domain::AGENT), stream)
}

/// Seed of the injected history for counterfactual trial `trial`. It does
/// not depend on the error rate, so masks at different rates are nested.
pub fn injection_seed(master_seed: u64, trial: u64) -> u64 {
    derive_seed(derive_seed(master_seed, domain::INJECTION), trial)
}

/// Rough token count (≈ 4 characters per token) for agents that report none.
pub fn estimate_token_count(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

pub fn vocabulary(cfg: &ExperimentConfig) -> Result<Vocabulary> {
    match &cfg.wordlist {
        Some(path) => build_vocabulary(path, cfg.task.num_keys),
        None => Vocabulary::bundled(cfg.task.num_keys),
    }
}

fn thread_pool(parallel: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))
}

/// How to drive one conversation.
#[derive(Clone, Copy)]
pub struct Conversation<'a> {
    pub task: &'a TaskSpec,
    pub agent: &'a Agent,
    pub variant: PromptVariant,
    pub policy: HistoryPolicy,
    pub estimate_tokens: bool,
}

impl Conversation<'_> {
    fn tokens(&self, reply: &AgentReply, ctx: &TurnContext<'_>) -> (u64, u64, bool) {
        if self.estimate_tokens && reply.prompt_tokens == 0 && reply.completion_tokens == 0 {
            let prompt: u64 = ctx.messages().iter().map(|m| estimate_token_count(&m.content)).sum();
            (prompt, estimate_token_count(&reply.raw_text), true)
        } else {
            (reply.prompt_tokens, reply.completion_tokens, false)
        }
    }

    /// Runs `plan` from turn 1, handing each record to `sink` as soon as it
    /// is graded. An agent error ends the rollout after its record.
    pub fn run(&self, plan: &RolloutPlan, sink: &mut dyn FnMut(&TurnRecord) -> Result<()>) -> Result<RolloutOutcome> {
        let system = render_system_prompt(self.task, &plan.dictionary, self.variant);
        let mut history = History::new(system);
        let mut session = self.agent.session(agent_seed(self.task.master_seed, plan.rollout_id as u64), 0);
        let timed = self.agent.is_remote();
        let mut grades = Vec::with_capacity(plan.turns.len());
        let mut prev: Option<ParseResult> = None;
        let mut completion_tokens = 0;
        for turn in &plan.turns {
            let user = render_turn_user(&turn.keys)?;
            let ctx = TurnContext {
                history: &history,
                policy: self.policy,
                user: &user,
                truth: &plan.turns,
                turn,
            };
            let start = Instant::now();
            let result = next_reply(session.as_mut(), &ctx);
            let wall_time_ms = timed.then(|| start.elapsed().as_millis() as u64);
            let mut record = TurnRecord {
                rollout_id: plan.rollout_id,
                t: turn.index,
                keys: turn.keys.clone(),
                user_text: user.clone(),
                raw_reply: String::new(),
                expected_state: turn.true_state,
                grade: None,
                prompt_tokens: 0,
                completion_tokens: 0,
                tokens_estimated: false,
                wall_time_ms,
                error_cause: None,
                warning: None,
                corrupted_turns: None,
                delta_vs_displayed: None,
            };
            match result {
                Ok(reply) => {
                    let (pt, ct, estimated) = self.tokens(&reply, &ctx);
                    let parse = extract_answer(&reply.raw_text);
                    let grade = grade_turn(prev.as_ref(), &parse, turn);
                    let appended = history.append_assistant(turn.index, user, &reply.raw_text, self.variant);
                    record.raw_reply = reply.raw_text;
                    record.grade = Some(grade.clone());
                    record.prompt_tokens = pt;
                    record.completion_tokens = ct;
                    record.tokens_estimated = estimated;
                    record.warning = appended.warning;
                    sink(&record)?;
                    completion_tokens += ct;
                    grades.push(grade);
                    prev = Some(parse);
                }
                Err(e) => {
                    tracing::warn!(rollout = plan.rollout_id, turn = turn.index, error = %e, "rollout aborted");
                    record.error_cause = Some(e);
                    sink(&record)?;
                    return Ok(RolloutOutcome {
                        rollout_id: plan.rollout_id,
                        grades,
                        aborted_at: Some(turn.index),
                        completion_tokens,
                    });
                }
            }
        }
        Ok(RolloutOutcome {
            rollout_id: plan.rollout_id,
            grades,
            aborted_at: None,
            completion_tokens,
        })
    }
}

/// Rebuilds a rollout outcome from its stored records, regrading every
/// stored reply and checking that the stored grades agree.
pub fn replay_outcome(plan: &RolloutPlan, records: &[TurnRecord]) -> Result<RolloutOutcome> {
    let mut grades = Vec::with_capacity(records.len());
    let mut prev: Option<ParseResult> = None;
    let mut aborted_at = None;
    let mut completion_tokens = 0;
    for rec in records {
        let turn = plan.turns.get(rec.t.wrapping_sub(1)).filter(|t| t.index == rec.t).ok_or_else(|| {
            Error::TranscriptMismatch(format!("rollout {}: turn {} not in plan", plan.rollout_id, rec.t))
        })?;
        if rec.keys != turn.keys {
            return Err(Error::TranscriptMismatch(format!(
                "rollout {} turn {}: stored keys differ from the plan",
                plan.rollout_id, rec.t
            )));
        }
        if rec.error_cause.is_some() {
            aborted_at = Some(rec.t);
            break;
        }
        let parse = extract_answer(&rec.raw_reply);
        let grade = grade_turn(prev.as_ref(), &parse, turn);
        if rec.grade.as_ref() != Some(&grade) {
            return Err(Error::TranscriptMismatch(format!(
                "rollout {} turn {}: stored grade differs from regrade",
                plan.rollout_id, rec.t
            )));
        }
        completion_tokens += rec.completion_tokens;
        grades.push(grade);
        prev = Some(parse);
    }
    Ok(RolloutOutcome {
        rollout_id: plan.rollout_id,
        grades,
        aborted_at,
        completion_tokens,
    })
}

/// Runs every rollout of `task` into `dir`, reusing rollouts whose
/// transcripts are already complete. Other rollouts are (re)run from turn 1;
/// per-rollout seeds make the result independent of interruption points
/// and of the worker count.
pub fn execute_rollouts(cfg: &ExperimentConfig, conv: Conversation<'_>, dir: &RunDir, parallel: usize) -> Result<Vec<RolloutOutcome>> {
    let vocab = vocabulary(cfg)?;
    let task = conv.task;
    let pool = thread_pool(parallel)?;
    pool.install(|| {
        (0..task.num_rollouts)
            .into_par_iter()
            .map(|id| {
                let plan = sample_rollout(task, &vocab, id)?;
                let path = dir.transcript_path(id);
                let existing = read_transcript(&path)?;
                if rollout_status(&existing.records, task.num_turns) == RolloutStatus::Complete {
                    return replay_outcome(&plan, &existing.records);
                }
                let mut writer = TranscriptWriter::create(&path)?;
                conv.run(&plan, &mut |r| writer.write_record(r))
            })
            .collect()
    })
}

/// Contents of `results.json` for a turns-scaling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnsScalingResults {
    pub name: String,
    pub history: String,
    pub variant: TaskVariant,
    pub turn_complexity: usize,
    pub num_turns: usize,
    pub num_rollouts: usize,
    pub summarized_rollouts: usize,
    pub aborted_rollouts: Vec<usize>,
    /// Step accuracy is estimated as turn_acc^(1/K) when K > 1.
    pub step_accuracy_is_estimate: bool,
    pub horizons: Vec<HorizonEntry>,
    pub final_task_accuracy: f64,
    pub mean_completion_tokens: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnsScalingReport {
    pub table: MetricsTable,
    pub results: TurnsScalingResults,
    pub outcomes: Vec<RolloutOutcome>,
}

/// Aggregates outcomes and writes `summary.csv` and `results.json`.
pub fn finish_turns_scaling(
    cfg: &ExperimentConfig,
    task: &TaskSpec,
    policy: HistoryPolicy,
    dir: &RunDir,
    outcomes: Vec<RolloutOutcome>,
) -> Result<TurnsScalingReport> {
    let table = aggregate(&outcomes, task.turn_complexity, task.num_turns)?;
    let results = TurnsScalingResults {
        name: cfg.name.clone(),
        history: policy.to_string(),
        variant: task.variant,
        turn_complexity: task.turn_complexity,
        num_turns: task.num_turns,
        num_rollouts: task.num_rollouts,
        summarized_rollouts: outcomes.len(),
        aborted_rollouts: outcomes.iter().filter(|o| o.aborted_at.is_some()).map(|o| o.rollout_id).collect(),
        step_accuracy_is_estimate: task.turn_complexity > 1,
        horizons: store::horizon_entries(&table, &cfg.horizon_thresholds),
        final_task_accuracy: table.rows.last().map_or(f64::NAN, |r| r.mean_task_accuracy),
        mean_completion_tokens: outcomes.iter().map(|o| o.completion_tokens as f64).sum::<f64>() / outcomes.len() as f64,
    };
    dir.write_summary(&table)?;
    dir.write_json(store::RESULTS_FILE, &results)?;
    Ok(TurnsScalingReport { table, results, outcomes })
}

fn turns_scaling_in(cfg: &ExperimentConfig, task: &TaskSpec, policy: HistoryPolicy, agent: &Agent, dir: &RunDir, parallel: usize) -> Result<TurnsScalingReport> {
    let conv = Conversation {
        task,
        agent,
        variant: cfg.agent.prompt_variant(),
        policy,
        estimate_tokens: cfg.estimate_tokens,
    };
    let outcomes = execute_rollouts(cfg, conv, dir, parallel)?;
    finish_turns_scaling(cfg, task, policy, dir, outcomes)
}

/// A nested turns-scaling run under `parent`, with its own config snapshot.
fn child_run(parent: &RunDir, name: &str, cfg: &ExperimentConfig, task: TaskSpec, policy: HistoryPolicy) -> Result<(RunDir, ExperimentConfig)> {
    let mut child = cfg.clone();
    child.name = format!("{}/{name}", cfg.name);
    child.task = task;
    child.history = policy;
    child.experiment = ExperimentKind::TurnsScaling;
    child.output_dir = None;
    let dir = parent.child(name)?;
    dir.snapshot_config(&child.to_toml()?)?;
    Ok((dir, child))
}

pub fn run_turns_scaling(cfg: &ExperimentConfig, dir: &RunDir, parallel: usize) -> Result<TurnsScalingReport> {
    let agent = Agent::new(&cfg.agent)?;
    turns_scaling_in(cfg, &cfg.task, cfg.history, &agent, dir, parallel)
}

/// Re-aggregates a turns-scaling run from its transcripts. Rollouts that
/// are complete or were aborted by an agent error count; interrupted ones
/// do not.
pub fn summarize_run(dir: &RunDir) -> Result<TurnsScalingReport> {
    let cfg = ExperimentConfig::from_toml(&dir.read_config()?)?;
    if cfg.experiment != ExperimentKind::TurnsScaling {
        return Err(Error::config(format!(
            "summarize reads turns-scaling runs; this run is {} (summarize its per-setting subdirectories)",
            cfg.experiment.name()
        )));
    }
    let vocab = vocabulary(&cfg)?;
    let mut outcomes = Vec::new();
    for id in 0..cfg.task.num_rollouts {
        let tr = read_transcript(&dir.transcript_path(id))?;
        match rollout_status(&tr.records, cfg.task.num_turns) {
            RolloutStatus::Complete | RolloutStatus::Aborted => {
                let plan = sample_rollout(&cfg.task, &vocab, id)?;
                outcomes.push(replay_outcome(&plan, &tr.records)?);
            }
            RolloutStatus::Partial | RolloutStatus::Missing => {}
        }
    }
    if outcomes.is_empty() {
        return Err(Error::EmptyRun);
    }
    finish_turns_scaling(&cfg, &cfg.task, cfg.history, dir, outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRow {
    pub error_rate: f64,
    pub trials: usize,
    pub accuracy: f64,
    pub std: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Share of replies that add the right increment to the last displayed total.
    pub delta_vs_displayed_accuracy: f64,
    /// Share of injected turns that were actually corrupted.
    pub realized_error_rate: f64,
    pub aborted: usize,
}

struct Trial {
    record: TurnRecord,
    corrupted: usize,
}

/// Accuracy at `slice_turn` after a history whose displayed totals were
/// corrupted at each error rate. A fresh corruption mask is drawn per trial;
/// the same trial index shares task, injection seed and agent seed across
/// rates.
pub fn run_counterfactual(cfg: &ExperimentConfig, dir: &RunDir, parallel: usize) -> Result<Vec<CounterfactualRow>> {
    let ExperimentKind::Counterfactual {
        slice_turn,
        ref error_rates,
        trials_per_rate,
        offset_low,
        offset_high,
    } = cfg.experiment
    else {
        return Err(Error::config("run_counterfactual needs a counterfactual experiment"));
    };
    let agent = Agent::new(&cfg.agent)?;
    let variant = cfg.agent.prompt_variant();
    let vocab = vocabulary(cfg)?;
    let task = TaskSpec {
        num_turns: slice_turn,
        num_rollouts: trials_per_rate,
        ..cfg.task.clone()
    };
    let pool = thread_pool(parallel)?;
    let mut rows = Vec::with_capacity(error_rates.len());
    for (r, &rate) in error_rates.iter().enumerate() {
        let trials: Vec<Trial> = pool.install(|| {
            (0..trials_per_rate)
                .into_par_iter()
                .map(|i| {
                    let plan = sample_rollout(&task, &vocab, i)?;
                    let system = render_system_prompt(&task, &plan.dictionary, variant);
                    let inj = InjectionSpec {
                        error_rate: rate,
                        offset_low,
                        offset_high,
                        seed: injection_seed(task.master_seed, i as u64),
                    };
                    let synthetic = inject_errors(&plan, system, slice_turn - 1, &inj)?;
                    let turn = &plan.turns[slice_turn - 1];
                    let start_state = if slice_turn > 1 { plan.turns[slice_turn - 2].true_state } else { 0 };
                    let mut session = agent.session(agent_seed(task.master_seed, i as u64), start_state);
                    let user = render_turn_user(&turn.keys)?;
                    let ctx = TurnContext {
                        history: &synthetic.history,
                        policy: cfg.history,
                        user: &user,
                        truth: &plan.turns,
                        turn,
                    };
                    let start = Instant::now();
                    let result = next_reply(session.as_mut(), &ctx);
                    let displayed = synthetic.displayed.last().copied().unwrap_or(0);
                    let corrupted = synthetic.corrupted.iter().filter(|&&c| c).count();
                    let mut record = TurnRecord {
                        rollout_id: i,
                        t: turn.index,
                        keys: turn.keys.clone(),
                        user_text: user,
                        raw_reply: String::new(),
                        expected_state: turn.true_state,
                        grade: None,
                        prompt_tokens: 0,
                        completion_tokens: 0,
                        tokens_estimated: false,
                        wall_time_ms: agent.is_remote().then(|| start.elapsed().as_millis() as u64),
                        error_cause: None,
                        warning: None,
                        corrupted_turns: Some(corrupted),
                        delta_vs_displayed: None,
                    };
                    match result {
                        Ok(reply) => {
                            let parse = extract_answer(&reply.raw_text);
                            let shown = ParseResult::Integer { value: displayed };
                            let grade = grade_turn((slice_turn > 1).then_some(&shown), &parse, turn);
                            record.delta_vs_displayed = Some(grade.delta_correct);
                            record.grade = Some(grade);
                            record.raw_reply = reply.raw_text;
                            record.prompt_tokens = reply.prompt_tokens;
                            record.completion_tokens = reply.completion_tokens;
                        }
                        Err(e) => record.error_cause = Some(e),
                    }
                    Ok(Trial { record, corrupted })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut writer = TranscriptWriter::create(&dir.named_transcript_path(&format!("counterfactual-rate-{r:02}")))?;
        for t in &trials {
            writer.write_record(&t.record)?;
        }
        let graded: Vec<&TurnGrade> = trials.iter().filter_map(|t| t.record.grade.as_ref()).collect();
        let hits: Vec<bool> = graded.iter().map(|g| g.absolute_correct).collect();
        let n = hits.len();
        let k = hits.iter().filter(|&&h| h).count();
        let ci = wilson_interval(k, n, Z95);
        let injected = (slice_turn - 1) * trials.len();
        rows.push(CounterfactualRow {
            error_rate: rate,
            trials: n,
            accuracy: if n > 0 { k as f64 / n as f64 } else { f64::NAN },
            std: metrics::dispersion(&hits).ok().map(|d| d.std),
            ci_low: ci.low,
            ci_high: ci.high,
            delta_vs_displayed_accuracy: if n > 0 {
                graded.iter().filter(|g| g.delta_correct).count() as f64 / n as f64
            } else {
                f64::NAN
            },
            realized_error_rate: if injected > 0 {
                trials.iter().map(|t| t.corrupted).sum::<usize>() as f64 / injected as f64
            } else {
                0.0
            },
            aborted: trials.len() - n,
        });
    }
    dir.write_csv("counterfactual.csv", &rows)?;
    dir.write_json(store::RESULTS_FILE, &serde_json::json!({ "name": cfg.name, "slice_turn": slice_turn, "rates": rows }))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub k: usize,
    pub successes: usize,
    pub samples: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub passed: bool,
}

impl Probe {
    pub fn new(k: usize, successes: usize, samples: usize, threshold: f64) -> Self {
        let accuracy = if samples > 0 { successes as f64 / samples as f64 } else { 0.0 };
        let ci = wilson_interval(successes, samples, Z95);
        Probe {
            k,
            successes,
            samples,
            accuracy,
            ci_low: ci.low,
            ci_high: ci.high,
            passed: samples > 0 && accuracy >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxKResult {
    pub max_k: usize,
    /// The search stopped at `k_max_bound` while still passing.
    pub bound_limited: bool,
    /// Some larger K scored significantly better than a smaller one.
    pub monotonicity_warning: bool,
    pub threshold: f64,
    /// Probes in the order they were run.
    pub probes: Vec<Probe>,
}

/// Largest K whose probe passes: doubling from 1 until a probe fails or the
/// bound is hit, then bisection inside the bracket.
pub fn max_k_search(threshold: f64, bound: usize, mut probe: impl FnMut(usize) -> Result<Probe>) -> Result<MaxKResult> {
    let mut probes: Vec<Probe> = Vec::new();
    let mut run = |k: usize, probes: &mut Vec<Probe>| -> Result<bool> {
        let p = probe(k)?;
        let passed = p.passed;
        probes.push(p);
        Ok(passed)
    };
    let mut bound_limited = false;
    let max_k = if !run(1, &mut probes)? {
        0
    } else {
        let mut lo = 1;
        let mut hi = None;
        while lo < bound {
            let next = (lo * 2).min(bound);
            if run(next, &mut probes)? {
                lo = next;
            } else {
                hi = Some(next);
                break;
            }
        }
        match hi {
            None => {
                bound_limited = true;
                lo
            }
            Some(mut hi) => {
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if run(mid, &mut probes)? {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo
            }
        }
    };
    let mut sorted: Vec<&Probe> = probes.iter().collect();
    sorted.sort_by_key(|p| p.k);
    let monotonicity_warning = sorted
        .iter()
        .enumerate()
        .any(|(i, a)| sorted[i + 1..].iter().any(|b| b.ci_low > a.ci_high));
    Ok(MaxKResult {
        max_k,
        bound_limited,
        monotonicity_warning,
        threshold,
        probes,
    })
}

/// Highest turn complexity answered with the exact sum at the configured
/// accuracy threshold, using single-turn tasks. Sample j uses the same task
/// seed and agent seed at every K.
pub fn run_max_k_search(cfg: &ExperimentConfig, dir: &RunDir, parallel: usize) -> Result<MaxKResult> {
    let ExperimentKind::MaxKSearch {
        threshold,
        samples_per_probe,
        k_max_bound,
    } = cfg.experiment
    else {
        return Err(Error::config("run_max_k_search needs a max_k_search experiment"));
    };
    let agent = Agent::new(&cfg.agent)?;
    let variant = cfg.agent.prompt_variant();
    let vocab = vocabulary(cfg)?;
    let pool = thread_pool(parallel)?;
    let probe = |k: usize| -> Result<Probe> {
        let task = TaskSpec {
            turn_complexity: k,
            num_turns: 1,
            num_rollouts: samples_per_probe,
            ..cfg.task.clone()
        };
        let conv = Conversation {
            task: &task,
            agent: &agent,
            variant,
            policy: cfg.history,
            estimate_tokens: cfg.estimate_tokens,
        };
        let results: Vec<(Vec<TurnRecord>, RolloutOutcome)> = pool.install(|| {
            (0..samples_per_probe)
                .into_par_iter()
                .map(|j| {
                    let plan = sample_rollout(&task, &vocab, j)?;
                    let mut recs = Vec::with_capacity(1);
                    let outcome = conv.run(&plan, &mut |r| {
                        recs.push(r.clone());
                        Ok(())
                    })?;
                    Ok((recs, outcome))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut writer = TranscriptWriter::create(&dir.named_transcript_path(&format!("probe-k{k:06}")))?;
        for rec in results.iter().flat_map(|(r, _)| r) {
            writer.write_record(rec)?;
        }
        let graded: Vec<&RolloutOutcome> = results.iter().map(|(_, o)| o).filter(|o| o.aborted_at.is_none()).collect();
        let ok = graded.iter().filter(|o| o.grades.last().is_some_and(|g| g.absolute_correct)).count();
        let p = Probe::new(k, ok, graded.len(), threshold);
        tracing::info!(k, accuracy = p.accuracy, passed = p.passed, "probe");
        Ok(p)
    };
    let result = max_k_search(threshold, k_max_bound, probe)?;
    dir.write_csv("probes.csv", &result.probes)?;
    dir.write_json(store::RESULTS_FILE, &result)?;
    if result.monotonicity_warning {
        tracing::warn!("probe accuracies are not monotone in K beyond interval overlap");
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedOpsRow {
    pub k: usize,
    pub num_turns: usize,
    /// Share of rollouts whose final reported total is the true final state.
    pub final_accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_effective: usize,
    pub avg_completion_tokens: f64,
}

/// A fixed number of steps split into turns of K steps each, for each K.
pub fn run_fixed_ops_sweep(cfg: &ExperimentConfig, dir: &RunDir, parallel: usize) -> Result<Vec<FixedOpsRow>> {
    let ExperimentKind::FixedOpsSweep { total_steps, ref k_values } = cfg.experiment else {
        return Err(Error::config("run_fixed_ops_sweep needs a fixed_ops_sweep experiment"));
    };
    let agent = Agent::new(&cfg.agent)?;
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let task = TaskSpec {
            turn_complexity: k,
            num_turns: total_steps / k,
            ..cfg.task.clone()
        };
        let (sub, child) = child_run(dir, &format!("k-{k:04}"), cfg, task, cfg.history)?;
        let report = turns_scaling_in(&child, &child.task, child.history, &agent, &sub, parallel)?;
        let finished: Vec<&RolloutOutcome> = report.outcomes.iter().filter(|o| o.aborted_at.is_none()).collect();
        let ok = finished
            .iter()
            .filter(|o| o.grades.last().is_some_and(|g| g.absolute_correct))
            .count();
        let n = finished.len();
        let ci = wilson_interval(ok, n, Z95);
        rows.push(FixedOpsRow {
            k,
            num_turns: child.task.num_turns,
            final_accuracy: if n > 0 { ok as f64 / n as f64 } else { f64::NAN },
            ci_low: ci.low,
            ci_high: ci.high,
            n_effective: n,
            avg_completion_tokens: report.results.mean_completion_tokens,
        });
    }
    dir.write_csv("fixed_ops.csv", &rows)?;
    dir.write_json(store::RESULTS_FILE, &serde_json::json!({ "name": cfg.name, "total_steps": total_steps, "rows": rows }))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub horizon_turns: Option<usize>,
    pub final_task_accuracy: f64,
    pub mean_turn_accuracy: f64,
    pub n_effective: usize,
}

fn sweep_row(setting: String, report: &TurnsScalingReport, s: f64) -> SweepRow {
    let rows = &report.table.rows;
    let finite: Vec<f64> = rows.iter().map(|r| r.mean_turn_accuracy).filter(|x| x.is_finite()).collect();
    SweepRow {
        setting,
        horizon_turns: report.table.horizon(s).turn(),
        final_task_accuracy: report.results.final_task_accuracy,
        mean_turn_accuracy: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
        n_effective: report.outcomes.len(),
    }
}

/// Turns-scaling under the full history and under each sliding window.
pub fn run_context_window_sweep(cfg: &ExperimentConfig, dir: &RunDir, parallel: usize) -> Result<Vec<(HistoryPolicy, TurnsScalingReport)>> {
    let ExperimentKind::ContextWindowSweep { ref windows } = cfg.experiment else {
        return Err(Error::config("run_context_window_sweep needs a context_window_sweep experiment"));
    };
    let agent = Agent::new(&cfg.agent)?;
    let s = cfg.horizon_thresholds[0];
    let policies: Vec<HistoryPolicy> = std::iter::once(HistoryPolicy::Full)
        .chain(windows.iter().map(|&n| HistoryPolicy::SlidingWindow(n)))
        .collect();
    let mut out = Vec::with_capacity(policies.len());
    let mut rows = Vec::with_capacity(policies.len());
    for policy in policies {
        let (sub, child) = child_run(dir, &policy.to_string(), cfg, cfg.task.clone(), policy)?;
        let report = turns_scaling_in(&child, &child.task, policy, &agent, &sub, parallel)?;
        rows.push(sweep_row(policy.to_string(), &report, s));
        out.push((policy, report));
    }
    dir.write_csv("windows.csv", &rows)?;
    dir.write_json(store::RESULTS_FILE, &serde_json::json!({ "name": cfg.name, "s": s, "rows": rows }))?;
    Ok(out)
}

/// The combined task next to its retrieval-only, addition-only and
/// prefix-sum components.
pub fn run_decomposed_baselines(cfg: &ExperimentConfig, dir: &RunDir, parallel: usize) -> Result<Vec<(TaskVariant, TurnsScalingReport)>> {
    let ExperimentKind::DecomposedBaselines { ref variants } = cfg.experiment else {
        return Err(Error::config("run_decomposed_baselines needs a decomposed_baselines experiment"));
    };
    let agent = Agent::new(&cfg.agent)?;
    let s = cfg.horizon_thresholds[0];
    let mut out = Vec::with_capacity(variants.len());
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let task = TaskSpec {
            variant,
            turn_complexity: if variant == TaskVariant::KvSum { cfg.task.turn_complexity } else { 1 },
            ..cfg.task.clone()
        };
        let (sub, child) = child_run(dir, &variant.to_string(), cfg, task, cfg.history)?;
        let report = turns_scaling_in(&child, &child.task, child.history, &agent, &sub, parallel)?;
        rows.push(sweep_row(variant.to_string(), &report, s));
        out.push((variant, report));
    }
    dir.write_csv("decomposed.csv", &rows)?;
    dir.write_json(store::RESULTS_FILE, &serde_json::json!({ "name": cfg.name, "s": s, "rows": rows }))?;
    Ok(out)
}

/// What an experiment produced.
#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentOutcome {
    TurnsScaling(TurnsScalingReport),
    Counterfactual(Vec<CounterfactualRow>),
    MaxK(MaxKResult),
    FixedOps(Vec<FixedOpsRow>),
    ContextWindows(Vec<(HistoryPolicy, TurnsScalingReport)>),
    Decomposed(Vec<(TaskVariant, TurnsScalingReport)>),
}

/// Runs `cfg` into `root`: snapshots the config, dispatches on the
/// experiment kind and finishes with a checksummed manifest that records
/// the overrides.
pub fn run_experiment(cfg: &ExperimentConfig, root: &std::path::Path, parallel: usize, overrides: &[String]) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let started = store::timestamp();
    let dir = RunDir::create(root)?;
    dir.snapshot_config(&cfg.to_toml()?)?;
    let outcome = match cfg.experiment {
        ExperimentKind::TurnsScaling => ExperimentOutcome::TurnsScaling(run_turns_scaling(cfg, &dir, parallel)?),
        ExperimentKind::Counterfactual { .. } => ExperimentOutcome::Counterfactual(run_counterfactual(cfg, &dir, parallel)?),
        ExperimentKind::MaxKSearch { .. } => ExperimentOutcome::MaxK(run_max_k_search(cfg, &dir, parallel)?),
        ExperimentKind::FixedOpsSweep { .. } => ExperimentOutcome::FixedOps(run_fixed_ops_sweep(cfg, &dir, parallel)?),
        ExperimentKind::ContextWindowSweep { .. } => ExperimentOutcome::ContextWindows(run_context_window_sweep(cfg, &dir, parallel)?),
        ExperimentKind::DecomposedBaselines { .. } => ExperimentOutcome::Decomposed(run_decomposed_baselines(cfg, &dir, parallel)?),
    };
    dir.write_manifest(started, overrides)?;
    Ok(outcome)
}

/// Task prefix check used by tests and the CLI dry run: the plan of every
/// rollout, without any agent call.
pub fn plan_rollouts(cfg: &ExperimentConfig) -> Result<Vec<RolloutPlan>> {
    let vocab = vocabulary(cfg)?;
    (0..cfg.task.num_rollouts).map(|id| sample_rollout(&cfg.task, &vocab, id)).collect()
}

//! Aggregation of graded rollouts into per-turn accuracy curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grading::TurnGrade;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Window of the trailing moving average kept for display.
pub const MOVING_AVERAGE_WINDOW: usize = 5;

/// Graded turns of one rollout. `grades` may stop early when the rollout
/// was aborted by an infrastructure error; later turns are then censored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub rollout_id: usize,
    pub grades: Vec<TurnGrade>,
    /// Turn at which an unrecoverable agent error stopped the rollout.
    pub aborted_at: Option<usize>,
    pub completion_tokens: u64,
}

impl RolloutOutcome {
    pub fn task_correct_prefix(&self) -> usize {
        crate::grading::correct_prefix(&self.grades)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

/// Wilson score interval for `successes` out of `n` at normal quantile `z`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> Interval {
    if n == 0 {
        return Interval { low: 0.0, high: 1.0 };
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // the bounds are exactly 0 and 1 at the extremes; avoid rounding there
    Interval {
        low: if successes == 0 { 0.0 } else { (center - half).max(0.0) },
        high: if successes as f64 == n { 1.0 } else { (center + half).min(1.0) },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    pub wilson: Interval,
}

/// Spread of Bernoulli indicators.
pub fn dispersion(indicators: &[bool]) -> Result<Dispersion> {
    let n = indicators.len();
    if n < 2 {
        return Err(Error::invalid("dispersion needs at least two indicators"));
    }
    let k = indicators.iter().filter(|&&b| b).count();
    let mean = k as f64 / n as f64;
    let ss = k as f64 * (1.0 - mean).powi(2) + (n - k) as f64 * mean.powi(2);
    Ok(Dispersion {
        mean,
        std: (ss / (n as f64 - 1.0)).sqrt(),
        wilson: wilson_interval(k, n, Z95),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRow {
    pub t: usize,
    pub mean_turn_accuracy: f64,
    pub mean_task_accuracy: f64,
    /// `turn_accuracy^(1/K)`; a direct measurement only when K = 1.
    pub step_accuracy_estimate: f64,
    pub format_failure_fraction: f64,
    /// Standard deviation of the task-success indicators at t.
    pub std_task_accuracy: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub moving_avg_turn_accuracy: f64,
    pub n_effective: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "turn")]
pub enum Horizon {
    Reached(usize),
    NotReached,
}

impl Horizon {
    pub fn turn(self) -> Option<usize> {
        match self {
            Horizon::Reached(t) => Some(t),
            Horizon::NotReached => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub turn_complexity: usize,
    pub rows: Vec<TurnRow>,
    pub num_rollouts: usize,
}

impl MetricsTable {
    pub fn task_accuracy_curve(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_task_accuracy).collect()
    }

    pub fn turn_accuracy_curve(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_turn_accuracy).collect()
    }

    /// Horizon in turns on the raw task-accuracy curve.
    pub fn horizon(&self, s: f64) -> Horizon {
        horizon_length_empirical(&self.task_accuracy_curve(), s)
    }

    /// Horizon in steps (turns × K).
    pub fn horizon_steps(&self, s: f64) -> Horizon {
        match self.horizon(s) {
            Horizon::Reached(t) => Horizon::Reached(t * self.turn_complexity),
            h => h,
        }
    }
}

/// Trailing moving average over `window` points.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Folds rollout outcomes into per-turn rows for turns `1..=num_turns`.
///
/// Rollouts contribute to turn t only if they produced a grade for it.
/// Task accuracy is the product-limit estimate over those at-risk sets, so
/// it equals the plain fraction of task-correct rollouts when nothing is
/// censored and stays non-increasing when something is.
pub fn aggregate(outcomes: &[RolloutOutcome], turn_complexity: usize, num_turns: usize) -> Result<MetricsTable> {
    if outcomes.is_empty() {
        return Err(Error::EmptyRun);
    }
    let prefixes: Vec<usize> = outcomes.iter().map(RolloutOutcome::task_correct_prefix).collect();
    let mut rows = Vec::with_capacity(num_turns);
    let mut survival = 1.0f64;
    for t in 1..=num_turns {
        let idx = t - 1;
        let observed: Vec<(usize, &TurnGrade)> = outcomes
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.grades.get(idx).map(|g| (i, g)))
            .collect();
        let n = observed.len();
        if n == 0 {
            rows.push(TurnRow {
                t,
                mean_turn_accuracy: f64::NAN,
                mean_task_accuracy: survival,
                step_accuracy_estimate: f64::NAN,
                format_failure_fraction: f64::NAN,
                std_task_accuracy: None,
                ci_low: 0.0,
                ci_high: 1.0,
                moving_avg_turn_accuracy: f64::NAN,
                n_effective: 0,
            });
            continue;
        }
        let delta_ok = observed.iter().filter(|(_, g)| g.delta_correct).count();
        let fmt_fail = observed.iter().filter(|(_, g)| g.parse.is_format_failure()).count();
        let at_risk = observed.iter().filter(|(i, _)| prefixes[*i] >= t - 1).count();
        let survived: Vec<bool> = observed.iter().map(|(i, _)| prefixes[*i] >= t).collect();
        let survivors = survived.iter().filter(|&&b| b).count();
        if at_risk > 0 {
            survival *= survivors as f64 / at_risk as f64;
        }
        let turn_acc = delta_ok as f64 / n as f64;
        let ci = wilson_interval(survivors, n, Z95);
        rows.push(TurnRow {
            t,
            mean_turn_accuracy: turn_acc,
            mean_task_accuracy: survival,
            step_accuracy_estimate: turn_acc.powf(1.0 / turn_complexity as f64),
            format_failure_fraction: fmt_fail as f64 / n as f64,
            std_task_accuracy: dispersion(&survived).ok().map(|d| d.std),
            ci_low: ci.low,
            ci_high: ci.high,
            moving_avg_turn_accuracy: 0.0,
            n_effective: n,
        });
    }
    let ma = moving_average(&rows.iter().map(|r| r.mean_turn_accuracy).collect::<Vec<_>>(), MOVING_AVERAGE_WINDOW);
    for (r, m) in rows.iter_mut().zip(ma) {
        r.moving_avg_turn_accuracy = m;
    }
    Ok(MetricsTable {
        turn_complexity,
        rows,
        num_rollouts: outcomes.len(),
    })
}

/// First t (1-based) whose task accuracy is below `s`.
pub fn horizon_length_empirical(task_accuracy: &[f64], s: f64) -> Horizon {
    task_accuracy
        .iter()
        .position(|&a| a < s)
        .map_or(Horizon::NotReached, |i| Horizon::Reached(i + 1))
}

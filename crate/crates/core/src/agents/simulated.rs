use rand::{Rng, SeedableRng};

use super::{AgentError, AgentReply, AgentSession, TurnContext};
use crate::grading::{extract_answer, format_answer};
use crate::protocol::{nonzero_offset, Exchange};
use crate::seed::StreamRng;
use crate::taskgen::Turn;

/// Wrong steps add the true value plus a nonzero offset from this range.
pub const WRONG_STEP_OFFSET: (i64, i64) = (-99, 99);

/// Per-step accuracy model of a simulated agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepModel {
    Constant { p: f64 },
    SelfConditioning { base_error: f64, sensitivity: f64 },
    LongContextDecay { initial_accuracy: f64, decay: f64 },
}

impl StepModel {
    /// Probability that a single step of `ctx.turn` is executed correctly.
    pub fn step_accuracy(&self, ctx: &TurnContext<'_>) -> f64 {
        match *self {
            StepModel::Constant { p } => p,
            StepModel::SelfConditioning { base_error, sensitivity } => {
                let f = visible_error_fraction(ctx.visible(), ctx.truth);
                1.0 - (base_error + sensitivity * f).clamp(0.0, 1.0)
            }
            StepModel::LongContextDecay { initial_accuracy, decay } => {
                initial_accuracy * (-decay * (ctx.turn.index as f64 - 1.0)).exp()
            }
        }
    }
}

/// Fraction of visible exchanges whose displayed answer is inconsistent
/// with the true update of that turn.
///
/// A stateful turn is judged on `shown - basis == true_increment`, where the
/// basis is 0 at turn 1 and otherwise the displayed answer of the directly
/// preceding turn. Turns whose predecessor fell out of view cannot be
/// judged and are left out of both counts. Stateless turns are judged on
/// the displayed answer alone.
pub fn visible_error_fraction(visible: &[Exchange], truth: &[Turn]) -> f64 {
    let mut judged = 0usize;
    let mut wrong = 0usize;
    let mut prev: Option<(usize, Option<i64>)> = None;
    for ex in visible {
        let shown = extract_answer(&ex.assistant).value();
        let Some(t) = ex.turn.checked_sub(1).and_then(|i| truth.get(i)) else {
            prev = Some((ex.turn, shown));
            continue;
        };
        let verdict = if !t.stateful {
            Some(shown != Some(t.true_state))
        } else {
            let basis = match prev {
                _ if ex.turn == 1 => Some(Some(0)),
                Some((pt, pv)) if pt + 1 == ex.turn => Some(pv),
                _ => None,
            };
            basis.map(|b| match (b, shown) {
                (Some(b), Some(s)) => s - b != t.true_increment,
                _ => true,
            })
        };
        if let Some(bad) = verdict {
            judged += 1;
            wrong += bad as usize;
        }
        prev = Some((ex.turn, shown));
    }
    if judged == 0 {
        0.0
    } else {
        wrong as f64 / judged as f64
    }
}

/// Simulated agent state: a running total that carries its own mistakes
/// forward.
pub struct SimulatedSession {
    model: StepModel,
    state: i64,
    rng: StreamRng,
}

impl SimulatedSession {
    pub fn new(model: StepModel, seed: u64, initial_state: i64) -> Self {
        SimulatedSession {
            model,
            state: initial_state,
            rng: StreamRng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> i64 {
        self.state
    }

    /// Applies the turn's steps to `base` with per-step accuracy `p`.
    fn execute(&mut self, base: i64, turn: &Turn, p: f64) -> i64 {
        let mut acc = base;
        for v in &turn.values {
            let u: f64 = self.rng.gen();
            acc += if u < p {
                *v
            } else {
                v + nonzero_offset(&mut self.rng, WRONG_STEP_OFFSET.0, WRONG_STEP_OFFSET.1)
            };
        }
        acc
    }
}

impl AgentSession for SimulatedSession {
    fn sample(&mut self, ctx: &TurnContext<'_>) -> Result<AgentReply, AgentError> {
        let p = self.model.step_accuracy(ctx);
        let base = if ctx.turn.stateful { self.state } else { 0 };
        let answer = self.execute(base, ctx.turn, p);
        Ok(AgentReply::text(format_answer(answer)))
    }

    fn commit(&mut self, reply_text: &str) {
        if let Some(v) = extract_answer(reply_text).value() {
            self.state = v;
        }
    }
}

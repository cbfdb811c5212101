//! Agents answer one turn at a time through a per-rollout [`AgentSession`].
//!
//! Simulated agents realize three error regimes (constant step accuracy,
//! self-conditioning on visible errors, per-turn decay). The remote agent
//! speaks the chat-completions wire format. [`AgentSpec::MajorityVote`]
//! wraps any of them.

mod remote;
mod simulated;
mod vote;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Exchange, History, HistoryPolicy, Message, PromptVariant};
use crate::taskgen::Turn;

pub use remote::{RemoteClient, RemoteSpec, RetryPolicy};
pub use simulated::{SimulatedSession, StepModel};
pub use vote::{majority_value, VoteSession};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentSpec {
    /// Every step is correct with probability `p`.
    Constant { p: f64 },
    /// Per-step error `base_error + sensitivity * f`, clamped to [0, 1],
    /// where `f` is the fraction of visible prior turns whose displayed
    /// update disagrees with the true increment.
    SelfConditioning { base_error: f64, sensitivity: f64 },
    /// Per-step accuracy `initial_accuracy * exp(-decay * (t - 1))` at turn t.
    LongContextDecay { initial_accuracy: f64, decay: f64 },
    Remote(RemoteSpec),
    MajorityVote { inner: Box<AgentSpec>, samples: usize },
}

fn unit_open_closed(x: f64) -> bool {
    x > 0.0 && x <= 1.0
}

impl AgentSpec {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            AgentSpec::Constant { p } if !unit_open_closed(*p) && *p != 0.0 => {
                Err(format!("agent.p = {p} must lie in [0, 1]"))
            }
            AgentSpec::SelfConditioning { base_error, sensitivity } => {
                if !(0.0..=1.0).contains(base_error) {
                    Err(format!("agent.base_error = {base_error} must lie in [0, 1]"))
                } else if !sensitivity.is_finite() {
                    Err("agent.sensitivity must be finite".into())
                } else {
                    Ok(())
                }
            }
            AgentSpec::LongContextDecay { initial_accuracy, decay } => {
                if !unit_open_closed(*initial_accuracy) {
                    Err(format!("agent.initial_accuracy = {initial_accuracy} must lie in (0, 1]"))
                } else if !(*decay >= 0.0 && decay.is_finite()) {
                    Err(format!("agent.decay = {decay} must be >= 0"))
                } else {
                    Ok(())
                }
            }
            AgentSpec::Remote(r) => r.validate(),
            AgentSpec::MajorityVote { inner, samples } => {
                if *samples == 0 || samples % 2 == 0 {
                    Err(format!("agent.samples = {samples} must be odd and >= 1"))
                } else {
                    inner.validate()
                }
            }
            _ => Ok(()),
        }
    }

    /// How replies are prompted and stored in history.
    pub fn prompt_variant(&self) -> PromptVariant {
        match self {
            AgentSpec::Remote(r) => r.variant,
            AgentSpec::MajorityVote { inner, .. } => inner.prompt_variant(),
            _ => PromptVariant::Direct,
        }
    }

    pub fn is_remote(&self) -> bool {
        match self {
            AgentSpec::Remote(_) => true,
            AgentSpec::MajorityVote { inner, .. } => inner.is_remote(),
            _ => false,
        }
    }
}

/// Failures talking to an agent. Only remote agents produce these.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentError {
    #[error("transport error: {message}")]
    Transport { message: String },
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {message}")]
    MalformedResponse { message: String },
    #[error("environment variable {var} is not set")]
    MissingCredential { var: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<AgentError> },
}

impl AgentError {
    pub(crate) fn is_retryable(&self) -> bool {
        match self {
            AgentError::Transport { .. } | AgentError::MalformedResponse { .. } => true,
            AgentError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentReply {
    pub raw_text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl AgentReply {
    pub fn text(raw_text: String) -> Self {
        AgentReply {
            raw_text,
            prompt_tokens: 0,
            completion_tokens: 0,
        }
    }
}

/// Everything an agent may look at when answering `turn`.
pub struct TurnContext<'a> {
    pub history: &'a History,
    pub policy: HistoryPolicy,
    pub user: &'a str,
    /// Ground truth for every turn of the rollout, indexed by `turn - 1`.
    /// Simulated agents use it to judge the consistency of visible history.
    pub truth: &'a [Turn],
    pub turn: &'a Turn,
}

impl TurnContext<'_> {
    pub fn visible(&self) -> &[Exchange] {
        self.history.visible(self.policy)
    }

    /// Wire-level messages: system prompt, visible exchanges, current user.
    pub fn messages(&self) -> Vec<Message> {
        self.history.apply_policy(self.policy, self.user)
    }
}

/// Per-rollout agent state.
pub trait AgentSession: Send {
    /// Draws one candidate reply without committing to it.
    fn sample(&mut self, ctx: &TurnContext<'_>) -> Result<AgentReply, AgentError>;

    /// Adopts `reply_text` as this turn's answer.
    fn commit(&mut self, reply_text: &str);
}

/// Samples and commits one reply.
pub fn next_reply(session: &mut dyn AgentSession, ctx: &TurnContext<'_>) -> Result<AgentReply, AgentError> {
    let reply = session.sample(ctx)?;
    session.commit(&reply.raw_text);
    Ok(reply)
}

/// A validated agent ready to open sessions. Cheap to clone; remote
/// clients and their in-flight limit are shared between clones.
#[derive(Clone)]
pub enum Agent {
    Simulated(StepModel),
    Remote(Arc<RemoteClient>),
    MajorityVote { inner: Box<Agent>, samples: usize },
}

impl Agent {
    pub fn new(spec: &AgentSpec) -> Result<Self, crate::Error> {
        spec.validate().map_err(crate::Error::Config)?;
        Ok(match spec {
            AgentSpec::Constant { p } => Agent::Simulated(StepModel::Constant { p: *p }),
            AgentSpec::SelfConditioning { base_error, sensitivity } => Agent::Simulated(StepModel::SelfConditioning {
                base_error: *base_error,
                sensitivity: *sensitivity,
            }),
            AgentSpec::LongContextDecay { initial_accuracy, decay } => Agent::Simulated(StepModel::LongContextDecay {
                initial_accuracy: *initial_accuracy,
                decay: *decay,
            }),
            AgentSpec::Remote(r) => Agent::Remote(Arc::new(RemoteClient::new(r.clone())?)),
            AgentSpec::MajorityVote { inner, samples } => Agent::MajorityVote {
                inner: Box::new(Agent::new(inner)?),
                samples: *samples,
            },
        })
    }

    /// Whether replies come from a network endpoint (and are worth timing).
    pub fn is_remote(&self) -> bool {
        match self {
            Agent::Simulated(_) => false,
            Agent::Remote(_) => true,
            Agent::MajorityVote { inner, .. } => inner.is_remote(),
        }
    }

    /// Opens a session. `seed` drives all sampling of simulated agents;
    /// `initial_state` is the running total they start from.
    pub fn session(&self, seed: u64, initial_state: i64) -> Box<dyn AgentSession> {
        match self {
            Agent::Simulated(model) => Box::new(SimulatedSession::new(*model, seed, initial_state)),
            Agent::Remote(client) => Box::new(remote::RemoteSession::new(Arc::clone(client))),
            Agent::MajorityVote { inner, samples } => {
                Box::new(VoteSession::new(inner.session(seed, initial_state), *samples))
            }
        }
    }
}

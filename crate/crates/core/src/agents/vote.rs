use super::{AgentError, AgentReply, AgentSession, TurnContext};
use crate::grading::{extract_answer, format_answer};

/// Most frequent value; ties go to the value sampled first.
pub fn majority_value(values: &[Option<i64>]) -> Option<i64> {
    let mut tally: Vec<(i64, usize)> = Vec::new();
    for v in values.iter().flatten() {
        match tally.iter_mut().find(|(x, _)| x == v) {
            Some((_, c)) => *c += 1,
            None => tally.push((*v, 1)),
        }
    }
    let best = tally.iter().map(|(_, c)| *c).max()?;
    tally.into_iter().find(|(_, c)| *c == best).map(|(v, _)| v)
}

/// Draws `samples` replies from the inner session on the same history and
/// answers with the majority parsed value.
pub struct VoteSession {
    inner: Box<dyn AgentSession>,
    samples: usize,
}

impl VoteSession {
    pub fn new(inner: Box<dyn AgentSession>, samples: usize) -> Self {
        VoteSession { inner, samples }
    }
}

impl AgentSession for VoteSession {
    fn sample(&mut self, ctx: &TurnContext<'_>) -> Result<AgentReply, AgentError> {
        let mut replies = Vec::with_capacity(self.samples);
        for _ in 0..self.samples {
            replies.push(self.inner.sample(ctx)?);
        }
        let parsed: Vec<Option<i64>> = replies.iter().map(|r| extract_answer(&r.raw_text).value()).collect();
        let prompt_tokens = replies.iter().map(|r| r.prompt_tokens).sum();
        let completion_tokens = replies.iter().map(|r| r.completion_tokens).sum();
        let raw_text = match majority_value(&parsed) {
            Some(v) => format_answer(v),
            None => replies.swap_remove(0).raw_text,
        };
        Ok(AgentReply {
            raw_text,
            prompt_tokens,
            completion_tokens,
        })
    }

    fn commit(&mut self, reply_text: &str) {
        self.inner.commit(reply_text);
    }
}

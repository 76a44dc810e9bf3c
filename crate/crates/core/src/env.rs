//! Synthetic tool-use environment with a verifiable outcome reward.
//!
//! An episode has `num_branches` decision points. Emitting [`CALL`] injects
//! `observation_len` masked observation tokens: for an unresolved decision point the
//! observation either reveals the correct branch token (with probability `hint_prob`,
//! fixed per instance) or is noise; once every decision is resolved it reports
//! [`DONE`]. Each branch token resolves the next open decision point. [`ANS`] followed
//! by an answer digit ends the episode; the answer is correct when the digit equals
//! `(prompt_key + correct_branches) mod 10`.
//! Episodes are truncated after `max_steps` policy actions.
//!
//! Token layout: `CALL, ANS, FILLER, NOISE, DONE`, then `branch_arity` branch tokens,
//! then ten answer digits; any remaining ids are inert filler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, unit_interval};
use crate::trajectory::{TokenRecord, Trajectory};

pub const CALL: u32 = 0;
pub const ANS: u32 = 1;
pub const FILLER: u32 = 2;
pub const NOISE: u32 = 3;
pub const DONE: u32 = 4;
pub const BRANCH_BASE: u32 = 5;
pub const NUM_DIGITS: u32 = 10;

const TAG_PROMPT: u64 = 0x5052_4F4D;
const TAG_BRANCH: u64 = 0x4252_4E43;
const TAG_HINT: u64 = 0x4849_4E54;

/// Static description of the environment family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub vocab_size: usize,
    /// Maximum number of policy actions per episode.
    pub max_steps: usize,
    pub num_branches: usize,
    pub branch_arity: usize,
    /// Masked tokens injected after each tool call.
    pub observation_len: usize,
    /// Probability that a decision point's observation reveals its correct branch.
    pub hint_prob: f64,
    pub seed: u64,
    /// Reward `0.5 * correct/num_branches + 0.5 * solved` instead of `solved`.
    pub partial_credit: bool,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            vocab_size: 19,
            max_steps: 24,
            num_branches: 3,
            branch_arity: 4,
            observation_len: 2,
            hint_prob: 0.75,
            seed: 0,
            partial_credit: false,
        }
    }
}

impl EnvSpec {
    pub fn digit_base(&self) -> u32 {
        BRANCH_BASE + self.branch_arity as u32
    }

    pub fn min_vocab(&self) -> usize {
        BRANCH_BASE as usize + self.branch_arity + NUM_DIGITS as usize
    }

    /// Policy actions in the reference solution.
    pub fn reference_policy_len(&self) -> usize {
        2 * self.num_branches + 3
    }

    /// Full-trace length of the reference solution.
    pub fn reference_len(&self) -> usize {
        self.num_branches * (2 + self.observation_len) + (1 + self.observation_len) + 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_branches == 0 {
            return fail("num_branches must be at least 1".into());
        }
        if self.branch_arity < 2 {
            return fail("branch_arity must be at least 2".into());
        }
        if self.vocab_size < self.min_vocab() {
            return fail(format!(
                "vocab_size {} is below the {} ids needed for branch_arity {}",
                self.vocab_size,
                self.min_vocab(),
                self.branch_arity
            ));
        }
        if self.observation_len == 0 {
            return fail("observation_len must be at least 1".into());
        }
        if self.max_steps < self.reference_policy_len() {
            return fail(format!(
                "max_steps {} cannot fit the {} actions of a full solution",
                self.max_steps,
                self.reference_policy_len()
            ));
        }
        if !(0.0..=1.0).contains(&self.hint_prob) {
            return fail(format!("hint_prob {} outside [0, 1]", self.hint_prob));
        }
        Ok(())
    }

    pub fn is_branch(&self, token: u32) -> bool {
        (BRANCH_BASE..self.digit_base()).contains(&token)
    }

    pub fn digit_of(&self, token: u32) -> Option<u32> {
        let base = self.digit_base();
        (base..base + NUM_DIGITS)
            .contains(&token)
            .then(|| token - base)
    }

    pub fn prompt_key(&self, instance_seed: u64) -> u64 {
        derive_seed(&[TAG_PROMPT, self.seed, instance_seed])
    }

    pub fn correct_branch(&self, prompt_key: u64, decision: usize) -> u32 {
        let h = derive_seed(&[TAG_BRANCH, self.seed, prompt_key, decision as u64]);
        BRANCH_BASE + (h % self.branch_arity as u64) as u32
    }

    pub fn hint_revealed(&self, prompt_key: u64, decision: usize) -> bool {
        unit_interval(&[TAG_HINT, self.seed, prompt_key, decision as u64]) < self.hint_prob
    }

    /// Answer token that scores 1 for an episode with `correct` correct decisions.
    pub fn target_answer(&self, prompt_key: u64, correct: usize) -> u32 {
        self.digit_base() + ((prompt_key % 10 + correct as u64) % 10) as u32
    }

    /// Answer of the reference solution, used as the teacher's hint.
    pub fn reference_answer(&self, prompt_key: u64) -> u32 {
        self.target_answer(prompt_key, self.num_branches)
    }

    pub fn token_text(&self, token: u32) -> String {
        match token {
            CALL => "<call>".into(),
            ANS => "<ans>".into(),
            FILLER => "<pad>".into(),
            NOISE => "<noise>".into(),
            DONE => "<done>".into(),
            t if self.is_branch(t) => format!("B{}", t - BRANCH_BASE),
            t => match self.digit_of(t) {
                Some(d) => d.to_string(),
                None => format!("<x{t}>"),
            },
        }
    }

    /// Success probability of the uniform policy over the vocabulary.
    ///
    /// The episode succeeds iff its first `ANS` comes at step `j <= max_steps - 2` and
    /// the next action is the one target digit, whatever the earlier choices were.
    pub fn uniform_chance(&self) -> f64 {
        let v = self.vocab_size as f64;
        let steps = self.max_steps.saturating_sub(1) as i32;
        (1.0 - (1.0 - 1.0 / v).powi(steps)) / v
    }
}

/// Mutable episode state. Teacher states additionally carry the reference answer.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub prompt_key: u64,
    /// Full token history: policy actions and injected observations.
    pub history: Vec<u32>,
    /// Policy actions taken so far.
    pub step: usize,
    pub decisions_made: usize,
    pub correct_branches: usize,
    pub answer_pending: bool,
    pub answer: Option<u32>,
    pub done: bool,
    /// Present only in teacher states.
    pub answer_hint: Option<u32>,
}

impl EnvState {
    pub fn new(prompt_key: u64) -> Self {
        Self {
            prompt_key,
            history: Vec::new(),
            step: 0,
            decisions_made: 0,
            correct_branches: 0,
            answer_pending: false,
            answer: None,
            done: false,
            answer_hint: None,
        }
    }

    /// The last `k` tokens of the history.
    pub fn recent(&self, k: usize) -> &[u32] {
        &self.history[self.history.len().saturating_sub(k)..]
    }
}

/// Fresh student state for an instance.
pub fn reset(spec: &EnvSpec, instance_seed: u64) -> EnvState {
    EnvState::new(spec.prompt_key(instance_seed))
}

/// Copy of `state` conditioned on the reference answer.
pub fn teacher_state(state: &EnvState, reference_answer: u32) -> Result<EnvState> {
    if state.answer_hint.is_some() {
        return Err(Error::Env("state already carries an answer hint".into()));
    }
    Ok(EnvState {
        answer_hint: Some(reference_answer),
        ..state.clone()
    })
}

/// What one environment step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<u32>,
    pub done: bool,
}

fn observation_for(spec: &EnvSpec, state: &EnvState) -> Vec<u32> {
    let head = if state.decisions_made >= spec.num_branches {
        DONE
    } else if spec.hint_revealed(state.prompt_key, state.decisions_made) {
        spec.correct_branch(state.prompt_key, state.decisions_made)
    } else {
        NOISE
    };
    let pad = if head == NOISE { NOISE } else { FILLER };
    let mut obs = vec![pad; spec.observation_len];
    obs[0] = head;
    obs
}

/// Applies one policy action, appending it and any observation to the history.
pub fn step(spec: &EnvSpec, state: &mut EnvState, action: u32) -> Result<StepOutcome> {
    if state.done {
        return Err(Error::Env("step called on a finished episode".into()));
    }
    if action as usize >= spec.vocab_size {
        return Err(Error::Env(format!(
            "action {action} outside vocabulary of {}",
            spec.vocab_size
        )));
    }
    state.history.push(action);
    state.step += 1;
    let mut observation = Vec::new();
    if state.answer_pending {
        state.done = true;
        state.answer = spec.digit_of(action).map(|_| action);
    } else if action == CALL {
        observation = observation_for(spec, state);
        state.history.extend_from_slice(&observation);
    } else if action == ANS {
        state.answer_pending = true;
    } else if spec.is_branch(action) && state.decisions_made < spec.num_branches {
        if action == spec.correct_branch(state.prompt_key, state.decisions_made) {
            state.correct_branches += 1;
        }
        state.decisions_made += 1;
    }
    if state.step >= spec.max_steps {
        state.done = true;
    }
    Ok(StepOutcome {
        observation,
        done: state.done,
    })
}

/// Whether a finished state solved its instance.
pub fn solved(spec: &EnvSpec, state: &EnvState) -> bool {
    state.answer == Some(spec.target_answer(state.prompt_key, state.correct_branches))
}

pub fn reward_of(spec: &EnvSpec, state: &EnvState) -> f64 {
    let solved = if solved(spec, state) { 1.0 } else { 0.0 };
    if spec.partial_credit {
        0.5 * state.correct_branches as f64 / spec.num_branches as f64 + 0.5 * solved
    } else {
        solved
    }
}

/// A finished episode with the data needed to re-score it.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub trajectory: Trajectory,
    pub prompt_key: u64,
    pub reference_answer: u32,
    pub correct_branches: usize,
    pub solved: bool,
}

/// Re-runs the policy actions of `episode` and scores the outcome.
///
/// Fails if the replay does not finish or its observations disagree with the trace.
pub fn outcome_reward(episode: &EpisodeRecord, spec: &EnvSpec) -> Result<f64> {
    let mut state = EnvState::new(episode.prompt_key);
    let records = &episode.trajectory.records;
    let mut i = 0;
    while i < records.len() {
        let rec = &records[i];
        if !rec.is_policy_token {
            return Err(Error::Env(format!(
                "unexpected observation token at position {}",
                rec.position
            )));
        }
        if state.done {
            return Err(Error::Env("actions continue after the episode ended".into()));
        }
        let out = step(spec, &mut state, rec.token_id)?;
        for (j, &tok) in out.observation.iter().enumerate() {
            match records.get(i + 1 + j) {
                Some(r) if !r.is_policy_token && r.token_id == tok => {}
                _ => {
                    return Err(Error::Env(format!(
                        "observation after position {} does not match the environment",
                        rec.position
                    )))
                }
            }
        }
        i += 1 + out.observation.len();
    }
    if !state.done {
        return Err(Error::Env("episode has not terminated".into()));
    }
    Ok(reward_of(spec, &state))
}

/// Builds the trace of a policy action sequence; policy-token signals are zero.
pub fn replay(spec: &EnvSpec, prompt_key: u64, actions: &[u32]) -> Result<(EnvState, Vec<TokenRecord>)> {
    let mut state = EnvState::new(prompt_key);
    let mut records = Vec::new();
    for &a in actions {
        let out = step(spec, &mut state, a)?;
        records.push(TokenRecord::policy(records.len(), a, 0.0, 0.0, 0.0));
        for tok in out.observation {
            records.push(TokenRecord::observation(records.len(), tok));
        }
        if out.done {
            break;
        }
    }
    Ok((state, records))
}

/// Correct policy actions for an instance.
pub fn reference_actions(spec: &EnvSpec, prompt_key: u64) -> Vec<u32> {
    let mut actions = Vec::with_capacity(spec.reference_policy_len());
    for i in 0..spec.num_branches {
        actions.push(CALL);
        actions.push(spec.correct_branch(prompt_key, i));
    }
    actions.extend([CALL, ANS, spec.reference_answer(prompt_key)]);
    actions
}

/// The correct solution: a call and the correct branch at every decision point,
/// a final call reporting completion, then the answer.
pub fn reference_trajectory(spec: &EnvSpec, instance_seed: u64) -> Result<EpisodeRecord> {
    let prompt_key = spec.prompt_key(instance_seed);
    let (state, records) = replay(spec, prompt_key, &reference_actions(spec, prompt_key))?;
    let reward = reward_of(spec, &state);
    Ok(EpisodeRecord {
        trajectory: Trajectory {
            records,
            prompt_id: prompt_key.to_string(),
            reward,
            terminated: state.done,
        },
        prompt_key,
        reference_answer: spec.reference_answer(prompt_key),
        correct_branches: state.correct_branches,
        solved: solved(spec, &state),
    })
}

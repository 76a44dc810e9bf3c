//! Data model for interaction traces, rollout groups, segments and credit vectors.
//!
//! A [`Trajectory`] is the flattened token stream of one episode. Tokens emitted by the
//! policy carry the behavior log-probability, the teacher log-probability and the policy
//! entropy recorded at sampling time; observation tokens injected by the environment
//! carry none of them and are excluded from every token-level signal. All token-level
//! quantities downstream (signals, segments, weights) are indexed by position in the
//! *policy-token subsequence*, obtained through [`policy_token_view`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One token of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    /// Index in the full trace, 0-based.
    pub position: usize,
    pub token_id: u32,
    /// `true` when sampled by the policy, `false` for environment observations.
    pub is_policy_token: bool,
    /// Log-probability (nats) of the sampled action under the behavior policy.
    pub behavior_logp: Option<f64>,
    /// Log-probability (nats) of the same action under the answer-conditioned teacher state.
    pub teacher_logp: Option<f64>,
    /// Policy entropy (nats) at this state under the behavior policy.
    pub entropy: Option<f64>,
    pub text: Option<String>,
}

impl TokenRecord {
    pub fn policy(
        position: usize,
        token_id: u32,
        behavior_logp: f64,
        teacher_logp: f64,
        entropy: f64,
    ) -> Self {
        Self {
            position,
            token_id,
            is_policy_token: true,
            behavior_logp: Some(behavior_logp),
            teacher_logp: Some(teacher_logp),
            entropy: Some(entropy),
            text: None,
        }
    }

    pub fn observation(position: usize, token_id: u32) -> Self {
        Self {
            position,
            token_id,
            is_policy_token: false,
            behavior_logp: None,
            teacher_logp: None,
            entropy: None,
            text: None,
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    /// Checks the per-record invariants, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("behavior_logp", self.behavior_logp),
            ("teacher_logp", self.teacher_logp),
            ("entropy", self.entropy),
        ];
        for (name, value) in fields {
            match (self.is_policy_token, value) {
                (true, None) => {
                    return Err(Error::invariant(
                        "policy_fields_present",
                        format!("policy token at position {} lacks {name}", self.position),
                    ))
                }
                (false, Some(_)) => {
                    return Err(Error::invariant(
                        "observation_fields_absent",
                        format!(
                            "observation token at position {} carries {name}",
                            self.position
                        ),
                    ))
                }
                (_, Some(v)) if !v.is_finite() => {
                    return Err(Error::invariant(
                        "finite_signals",
                        format!("{name} = {v} at position {}", self.position),
                    ))
                }
                _ => {}
            }
        }
        if let Some(h) = self.entropy {
            if h < 0.0 {
                return Err(Error::invariant(
                    "entropy_nonnegative",
                    format!("entropy {h} at position {}", self.position),
                ));
            }
        }
        for (name, value) in [
            ("behavior_logp", self.behavior_logp),
            ("teacher_logp", self.teacher_logp),
        ] {
            if let Some(lp) = value {
                if lp > 0.0 {
                    return Err(Error::invariant(
                        "logp_nonpositive",
                        format!("{name} = {lp} at position {}", self.position),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A flattened interaction trace with its outcome reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<TokenRecord>,
    pub prompt_id: String,
    pub reward: f64,
    pub terminated: bool,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if !self.reward.is_finite() {
            return Err(Error::invariant(
                "finite_reward",
                format!("reward {}", self.reward),
            ));
        }
        for (i, rec) in self.records.iter().enumerate() {
            if rec.position != i {
                return Err(Error::invariant(
                    "consecutive_positions",
                    format!("record {i} has position {}", rec.position),
                ));
            }
            rec.validate()?;
        }
        Ok(())
    }

    pub fn num_policy_tokens(&self) -> usize {
        self.records.iter().filter(|r| r.is_policy_token).count()
    }
}

/// The policy-token subsequence of a trajectory together with its index map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyTokenView {
    /// Full-trace positions of the policy tokens, in order.
    pub indices: Vec<usize>,
    pub behavior_logp: Vec<f64>,
    pub teacher_logp: Vec<f64>,
    pub entropy: Vec<f64>,
}

impl PolicyTokenView {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Extracts the policy tokens of `traj` in order.
///
/// Missing signal fields on a policy token read as `NaN`; validated trajectories never
/// contain them.
pub fn policy_token_view(traj: &Trajectory) -> PolicyTokenView {
    let mut view = PolicyTokenView::default();
    for rec in traj.records.iter().filter(|r| r.is_policy_token) {
        view.indices.push(rec.position);
        view.behavior_logp.push(rec.behavior_logp.unwrap_or(f64::NAN));
        view.teacher_logp.push(rec.teacher_logp.unwrap_or(f64::NAN));
        view.entropy.push(rec.entropy.unwrap_or(f64::NAN));
    }
    view
}

/// Group reward statistics and normalized advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStatistics {
    pub mean: f64,
    /// Population standard deviation (divides by K).
    pub std: f64,
    pub advantages: Vec<f64>,
}

/// Normalizes rewards within a group: `(r - mean) / (std + eps_std)`.
pub fn group_statistics(rewards: &[f64], eps_std: f64) -> Result<GroupStatistics> {
    if rewards.is_empty() {
        return Err(Error::EmptyInput("group_statistics"));
    }
    let k = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / k;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k;
    let std = var.sqrt();
    let advantages = rewards.iter().map(|r| (r - mean) / (std + eps_std)).collect();
    Ok(GroupStatistics {
        mean,
        std,
        advantages,
    })
}

/// K trajectories rolled out from the same prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGroup {
    pub group_id: String,
    pub prompt_id: String,
    pub members: Vec<Trajectory>,
    pub group_mean: f64,
    pub group_std: f64,
}

impl TrajectoryGroup {
    /// Builds a group, validating every member and computing the reward statistics.
    pub fn new(group_id: impl Into<String>, members: Vec<Trajectory>) -> Result<Self> {
        let group_id = group_id.into();
        let first = members.first().ok_or(Error::EmptyInput("TrajectoryGroup"))?;
        let prompt_id = first.prompt_id.clone();
        for (k, m) in members.iter().enumerate() {
            if m.prompt_id != prompt_id {
                return Err(Error::invariant(
                    "shared_prompt_id",
                    format!(
                        "group {group_id} member {k} has prompt {} (expected {prompt_id})",
                        m.prompt_id
                    ),
                ));
            }
            m.validate()?;
        }
        let rewards: Vec<f64> = members.iter().map(|m| m.reward).collect();
        let stats = group_statistics(&rewards, 0.0)?;
        Ok(Self {
            group_id,
            prompt_id,
            members,
            group_mean: stats.mean,
            group_std: stats.std,
        })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.reward).collect()
    }
}

/// Contiguous span `[start, end]` (inclusive) of the policy-token subsequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// Normalized reverse-KL at `start`; shared by every token of the segment.
    pub onset_weight: f64,
}

/// Checks that segments are well-formed, sorted, pairwise disjoint and inside `0..len`.
pub fn check_segments(segments: &[Segment], len: usize) -> Result<()> {
    let mut next_free = 0usize;
    for (n, s) in segments.iter().enumerate() {
        if s.start > s.end {
            return Err(Error::invariant(
                "segment_ordered",
                format!("segment {n} has start {} > end {}", s.start, s.end),
            ));
        }
        if s.end >= len {
            return Err(Error::invariant(
                "segment_in_range",
                format!("segment {n} ends at {} but length is {len}", s.end),
            ));
        }
        if s.start < next_free {
            return Err(Error::invariant(
                "segments_disjoint_sorted",
                format!("segment {n} starts at {} before {next_free}", s.start),
            ));
        }
        next_free = s.end + 1;
    }
    Ok(())
}

/// Per-policy-token credit produced for one trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CreditVector {
    /// Group-normalized trajectory advantage `A`.
    pub advantage: f64,
    pub norm_rkl: Vec<f64>,
    pub segments: Vec<Segment>,
    /// Piecewise divergence weights in `[0, 1]`.
    pub w_kl: Vec<f64>,
    /// Sign-aware weights in `[0, 1]`.
    pub w_signed: Vec<f64>,
    /// Affinely rescaled modulation weights.
    pub w_final: Vec<f64>,
    /// Reweighted per-token advantages.
    pub adv: Vec<f64>,
}

impl CreditVector {
    pub fn len(&self) -> usize {
        self.adv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adv.is_empty()
    }

    /// Segment index covering each policy token, if any.
    pub fn segment_ids(&self) -> Vec<Option<usize>> {
        let mut ids = vec![None; self.adv.len()];
        for (n, s) in self.segments.iter().enumerate() {
            for id in &mut ids[s.start..=s.end] {
                *id = Some(n);
            }
        }
        ids
    }
}

/// Segmentation rule applied before reweighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// KL-triggered, entropy-terminated segments.
    #[default]
    Gear,
    /// No segmentation; normalized reverse-KL used per token.
    TokenOnly,
    /// Segments run from one KL trigger to the next.
    KlOnly,
    /// Segments cut at entropy spikes only.
    EntropyOnly,
    /// Segments start at tool-call marker tokens.
    Marker,
    /// As `Gear`, with trailing-window averaged entropy.
    EntropyWindow,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Gear,
        Variant::TokenOnly,
        Variant::KlOnly,
        Variant::EntropyOnly,
        Variant::Marker,
        Variant::EntropyWindow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Gear => "gear",
            Variant::TokenOnly => "token_only",
            Variant::KlOnly => "kl_only",
            Variant::EntropyOnly => "entropy_only",
            Variant::Marker => "marker",
            Variant::EntropyWindow => "entropy_window",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// Hyperparameters of the credit-assignment pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct GearConfig {
    /// KL trigger threshold.
    pub lambda_kl: f64,
    /// Entropy-termination multiplier.
    pub lambda_h: f64,
    /// Affine scale of the modulation weight.
    pub alpha: f64,
    /// Affine offset; `None` applies the rule `1 - 0.5 * alpha`.
    pub affine_offset: Option<f64>,
    /// Added to the group standard deviation.
    pub eps_std: f64,
    pub variant: Variant,
    /// Trailing window for [`Variant::EntropyWindow`].
    pub window_size: usize,
    /// Token ids that mark a tool invocation, for [`Variant::Marker`].
    pub marker_tokens: Vec<u32>,
}

impl Default for GearConfig {
    fn default() -> Self {
        Self {
            lambda_kl: 0.1,
            lambda_h: 1.5,
            alpha: 0.2,
            affine_offset: None,
            eps_std: 1e-4,
            variant: Variant::Gear,
            window_size: 8,
            marker_tokens: vec![crate::env::CALL],
        }
    }
}

impl GearConfig {
    /// Configuration that reduces the pipeline to uniform GRPO advantages.
    pub fn grpo() -> Self {
        Self {
            alpha: 0.0,
            affine_offset: Some(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(
            self.lambda_kl > 0.0 && self.lambda_kl < 1.0,
            "lambda_kl must lie in (0, 1)",
        )?;
        check(self.lambda_h > 1.0, "lambda_h must exceed 1")?;
        check(
            self.alpha >= 0.0 && self.alpha.is_finite(),
            "alpha must be finite and non-negative",
        )?;
        check(
            self.affine_offset.is_none_or(f64::is_finite),
            "offset must be finite",
        )?;
        check(
            self.eps_std >= 0.0 && self.eps_std.is_finite(),
            "eps_std must be finite and non-negative",
        )?;
        check(self.window_size >= 1, "window_size must be at least 1")
    }

    pub fn modulation(&self) -> crate::reweighting::RewardModulation {
        crate::reweighting::RewardModulation::new(self.alpha, self.affine_offset)
    }
}

//! GRPO training on the toy environment with reweighted token advantages.
//!
//! One training step samples `groups_per_batch` instances, rolls out `group_size`
//! episodes per instance, turns the group rewards into per-token advantages through
//! the credit pipeline, and takes one gradient-ascent step on the clipped surrogate
//! minus an exact KL penalty to the frozen initial policy. Every random draw comes
//! from a substream keyed by `(seed, step, group, member)`, so results do not depend
//! on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::env::{self, EnvSpec, EnvState, EpisodeRecord};
use crate::error::{Error, Result};
use crate::policy::{PolicyContext, PolicyParams};
use crate::reweighting::gear_credit;
use crate::rng::{derive_seed, substream};
use crate::signals::{log_softmax, policy_entropy};
use crate::trajectory::{
    group_statistics, CreditVector, GearConfig, TokenRecord, Trajectory, TrajectoryGroup,
};

const TAG_INIT: u64 = 1;
const TAG_INSTANCE: u64 = 2;
const TAG_ROLLOUT: u64 = 3;
const TAG_EVAL_INSTANCE: u64 = 4;
const TAG_EVAL_SAMPLE: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Trajectories per group (K).
    pub group_size: usize,
    pub groups_per_batch: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    /// PPO clip range.
    pub clip_eps: f64,
    /// Coefficient of the KL-to-reference penalty.
    pub kl_penalty_coef: f64,
    pub gear: GearConfig,
    pub env: EnvSpec,
    pub seed: u64,
    pub eval_interval: usize,
    pub num_eval_instances: usize,
    pub hidden_dim: usize,
    pub context_len: usize,
    pub init_scale: f64,
    /// Initial teacher logit boost on the hinted answer.
    pub hint_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            groups_per_batch: 8,
            learning_rate: 5.0,
            total_steps: 300,
            clip_eps: 0.2,
            kl_penalty_coef: 0.01,
            gear: GearConfig::default(),
            env: EnvSpec::default(),
            seed: 0,
            eval_interval: 25,
            num_eval_instances: 200,
            hidden_dim: 8,
            context_len: 3,
            init_scale: 0.1,
            hint_gain: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.group_size >= 2, "group_size must be at least 2")?;
        check(self.groups_per_batch >= 1, "groups_per_batch must be at least 1")?;
        check(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be finite and non-negative",
        )?;
        check(
            self.clip_eps > 0.0 && self.clip_eps < 1.0,
            "clip_eps must lie in (0, 1)",
        )?;
        check(
            self.kl_penalty_coef >= 0.0 && self.kl_penalty_coef.is_finite(),
            "kl_penalty_coef must be finite and non-negative",
        )?;
        check(self.eval_interval >= 1, "eval_interval must be at least 1")?;
        check(self.hidden_dim >= 1, "hidden_dim must be at least 1")?;
        check(self.context_len >= 1, "context_len must be at least 1")?;
        check(
            self.init_scale >= 0.0 && self.init_scale.is_finite(),
            "init_scale must be finite and non-negative",
        )?;
        check(self.hint_gain.is_finite(), "hint_gain must be finite")?;
        self.gear.validate()?;
        self.env.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            clip_eps: self.clip_eps,
            kl_penalty_coef: self.kl_penalty_coef,
        }
    }

    pub fn initial_params(&self) -> PolicyParams {
        let mut rng = substream(&[self.seed, TAG_INIT]);
        PolicyParams::random(
            self.env.vocab_size,
            self.hidden_dim,
            self.context_len,
            self.init_scale,
            self.hint_gain,
            &mut rng,
        )
    }
}

/// A rolled-out group plus the instance it was sampled on.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub group: TrajectoryGroup,
    pub prompt_key: u64,
    pub solved: Vec<bool>,
}

fn sample_index<R: Rng>(logp: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in logp.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    last as u32
}

/// Samples one episode, recording behavior log-prob, entropy and the teacher
/// log-prob of every sampled action.
pub fn rollout_episode<R: Rng>(
    params: &PolicyParams,
    spec: &EnvSpec,
    prompt_key: u64,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    let reference_answer = spec.reference_answer(prompt_key);
    let mut state = EnvState::new(prompt_key);
    let mut records = Vec::with_capacity(spec.reference_len() * 2);
    while !state.done {
        let student = PolicyContext {
            prompt_key,
            recent: state.recent(params.context_len),
            hint: None,
        };
        let logits = params.logits(&student);
        let logp = log_softmax(&logits);
        let action = sample_index(&logp, rng);
        let teacher = params.logits(&PolicyContext {
            hint: Some(reference_answer),
            ..student
        });
        let teacher_logp = log_softmax(&teacher)[action as usize];
        let entropy = policy_entropy(&logits);
        let position = records.len();
        records.push(TokenRecord::policy(
            position,
            action,
            logp[action as usize],
            teacher_logp,
            entropy,
        ));
        let out = env::step(spec, &mut state, action)?;
        for tok in out.observation {
            records.push(TokenRecord::observation(records.len(), tok));
        }
    }
    Ok(EpisodeRecord {
        trajectory: Trajectory {
            records,
            prompt_id: prompt_key.to_string(),
            reward: env::reward_of(spec, &state),
            terminated: state.done,
        },
        prompt_key,
        reference_answer,
        correct_branches: state.correct_branches,
        solved: env::solved(spec, &state),
    })
}

/// `group_size` episodes on one instance; member `k` samples from `stream ++ [k]`.
pub fn rollout_group(
    params: &PolicyParams,
    spec: &EnvSpec,
    group_size: usize,
    instance_seed: u64,
    stream: &[u64],
) -> Result<RolloutGroup> {
    let prompt_key = spec.prompt_key(instance_seed);
    let mut members = Vec::with_capacity(group_size);
    let mut solved = Vec::with_capacity(group_size);
    for k in 0..group_size {
        let mut path = stream.to_vec();
        path.push(k as u64);
        let mut rng = substream(&path);
        let ep = rollout_episode(params, spec, prompt_key, &mut rng)?;
        solved.push(ep.solved);
        members.push(ep.trajectory);
    }
    Ok(RolloutGroup {
        group: TrajectoryGroup::new(instance_seed.to_string(), members)?,
        prompt_key,
        solved,
    })
}

/// Per-token advantages `[group][member][policy token]` taken from credit vectors.
pub fn credit_advantages(credit: &[Vec<CreditVector>]) -> Vec<Vec<Vec<f64>>> {
    credit
        .iter()
        .map(|g| g.iter().map(|c| c.adv.clone()).collect())
        .collect()
}

/// Plain GRPO: the group-normalized advantage broadcast to every policy token.
pub fn grpo_advantages(batch: &[RolloutGroup], eps_std: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    batch
        .iter()
        .map(|rg| {
            let stats = group_statistics(&rg.group.rewards(), eps_std)?;
            Ok(rg
                .group
                .members
                .iter()
                .zip(stats.advantages)
                .map(|(m, a)| vec![a; m.num_policy_tokens()])
                .collect())
        })
        .collect()
}

/// PPO/GRPO per-token objective `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`clipped_surrogate`] with respect to the log-ratio.
fn surrogate_dlogratio(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    if ratio * advantage <= clipped * advantage {
        ratio * advantage
    } else {
        0.0
    }
}

/// `KL(softmax(p_logits) || softmax(q_logits))`, summed exactly over the vocabulary.
pub fn exact_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
        .sum()
}

/// Mean exact KL from `params` to `ref_params` over the given states.
pub fn kl_to_reference(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    states: &[PolicyContext<'_>],
) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let total: f64 = states
        .iter()
        .map(|ctx| exact_kl(&params.logits(ctx), &ref_params.logits(ctx)))
        .sum();
    total / states.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub clip_eps: f64,
    pub kl_penalty_coef: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Negated objective.
    pub loss: f64,
    pub grad: PolicyParams,
    pub surrogate: f64,
    pub kl: f64,
    pub num_tokens: usize,
    pub clipped_tokens: usize,
}

fn non_finite(what: &str, g: usize, k: usize, t: usize) -> Error {
    Error::Numeric {
        location: format!("{what} (group {g}, member {k}, policy token {t})"),
    }
}

/// Negated clipped-surrogate objective with KL penalty, and its exact gradient.
///
/// Each trajectory averages over its policy tokens, members average within a group
/// and groups average over the batch. Ratios are `exp(logp - behavior_logp)` with the
/// behavior log-probabilities recorded at rollout time. The KL penalty is the mean
/// exact KL over every policy-token state in the batch.
pub fn batch_loss_and_grad(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    batch: &[RolloutGroup],
    advantages: &[Vec<Vec<f64>>],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if advantages.len() != batch.len() {
        return Err(Error::LengthMismatch {
            context: "advantage groups",
            expected: batch.len(),
            found: advantages.len(),
        });
    }
    let num_tokens: usize = batch
        .iter()
        .flat_map(|rg| &rg.group.members)
        .map(Trajectory::num_policy_tokens)
        .sum();
    let mut grad = params.zeros_like();
    let mut surrogate = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped_tokens = 0;
    let num_groups = batch.len() as f64;
    let kl_weight = if num_tokens > 0 {
        cfg.kl_penalty_coef / num_tokens as f64
    } else {
        0.0
    };

    for (g, (rg, group_adv)) in batch.iter().zip(advantages).enumerate() {
        let members = &rg.group.members;
        if group_adv.len() != members.len() {
            return Err(Error::LengthMismatch {
                context: "advantage members",
                expected: members.len(),
                found: group_adv.len(),
            });
        }
        let group_weight = 1.0 / (num_groups * members.len() as f64);
        for (k, (traj, adv)) in members.iter().zip(group_adv).enumerate() {
            let tokens: Vec<u32> = traj.records.iter().map(|r| r.token_id).collect();
            let policy: Vec<&TokenRecord> =
                traj.records.iter().filter(|r| r.is_policy_token).collect();
            if adv.len() != policy.len() {
                return Err(Error::LengthMismatch {
                    context: "advantage tokens",
                    expected: policy.len(),
                    found: adv.len(),
                });
            }
            if policy.is_empty() {
                continue;
            }
            let token_weight = group_weight / policy.len() as f64;
            for (t, (rec, &a)) in policy.iter().zip(adv).enumerate() {
                let p = rec.position;
                let ctx = PolicyContext {
                    prompt_key: rg.prompt_key,
                    recent: &tokens[p.saturating_sub(params.context_len)..p],
                    hint: None,
                };
                let fwd = params.forward(&ctx);
                if fwd.logits.iter().any(|z| !z.is_finite()) {
                    return Err(non_finite("logits", g, k, t));
                }
                let logp = log_softmax(&fwd.logits);
                let ref_logp = log_softmax(&ref_params.logits(&ctx));
                let behavior = rec.behavior_logp.ok_or_else(|| non_finite("behavior_logp", g, k, t))?;
                let action = rec.token_id as usize;
                let ratio = (logp[action] - behavior).exp();
                if !ratio.is_finite() || !a.is_finite() {
                    return Err(non_finite("ratio or advantage", g, k, t));
                }
                if ratio < 1.0 - cfg.clip_eps || ratio > 1.0 + cfg.clip_eps {
                    clipped_tokens += 1;
                }
                surrogate += token_weight * clipped_surrogate(ratio, a, cfg.clip_eps);
                let d_logratio = token_weight * surrogate_dlogratio(ratio, a, cfg.clip_eps);

                let probs: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
                let kl: f64 = probs
                    .iter()
                    .zip(logp.iter().zip(&ref_logp))
                    .map(|(pi, (lp, lq))| if *pi > 0.0 { pi * (lp - lq) } else { 0.0 })
                    .sum();
                kl_sum += kl;
                // d(loss)/dz = -d_logratio * (e_a - p) + kl_weight * p * (log p - log q - KL)
                let d_logits: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(j, pj)| {
                        let onehot = if j == action { 1.0 } else { 0.0 };
                        let kl_term = if *pj > 0.0 {
                            pj * (logp[j] - ref_logp[j] - kl)
                        } else {
                            0.0
                        };
                        -d_logratio * (onehot - pj) + kl_weight * kl_term
                    })
                    .collect();
                params.backward(&fwd, &d_logits, &mut grad);
            }
        }
    }
    let kl = if num_tokens > 0 {
        kl_sum / num_tokens as f64
    } else {
        0.0
    };
    let loss = -surrogate + cfg.kl_penalty_coef * kl;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            location: "batch loss".into(),
        });
    }
    if !grad.all_finite() {
        return Err(Error::Numeric {
            location: "batch gradient".into(),
        });
    }
    Ok(LossOutput {
        loss,
        grad,
        surrogate,
        kl,
        num_tokens,
        clipped_tokens,
    })
}

/// Loss only, for finite differences.
pub fn batch_loss(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    batch: &[RolloutGroup],
    advantages: &[Vec<Vec<f64>>],
    cfg: &LossConfig,
) -> Result<f64> {
    batch_loss_and_grad(params, ref_params, batch, advantages, cfg).map(|o| o.loss)
}

/// Per-step training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean recorded policy entropy over policy tokens.
    pub mean_entropy: f64,
    pub mean_abs_adv: f64,
    pub segment_fraction: f64,
    pub clipped_fraction: f64,
    pub loss: f64,
    pub kl: f64,
    /// Present on evaluation steps.
    pub eval_success: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub params: PolicyParams,
    /// Evaluation success of the final parameters.
    pub final_eval_success: f64,
    /// Rollouts and credit of the last step.
    pub last_batch: Vec<RolloutGroup>,
    pub last_credit: Vec<Vec<CreditVector>>,
}

/// Fraction of held-out instances solved by sampling from `params`.
pub fn evaluate(params: &PolicyParams, cfg: &TrainConfig) -> Result<f64> {
    if cfg.num_eval_instances == 0 {
        return Ok(0.0);
    }
    let solved: Vec<bool> = (0..cfg.num_eval_instances as u64)
        .into_par_iter()
        .map(|i| {
            let instance = derive_seed(&[cfg.seed, TAG_EVAL_INSTANCE, i]);
            let mut rng = substream(&[cfg.seed, TAG_EVAL_SAMPLE, i]);
            let pk = cfg.env.prompt_key(instance);
            rollout_episode(params, &cfg.env, pk, &mut rng).map(|ep| ep.solved)
        })
        .collect::<Result<_>>()?;
    Ok(solved.iter().filter(|s| **s).count() as f64 / solved.len() as f64)
}

/// Rolls out the batch of one step.
pub fn rollout_batch(params: &PolicyParams, cfg: &TrainConfig, step: usize) -> Result<Vec<RolloutGroup>> {
    (0..cfg.groups_per_batch)
        .into_par_iter()
        .map(|g| {
            let instance = derive_seed(&[cfg.seed, TAG_INSTANCE, step as u64, g as u64]);
            rollout_group(
                params,
                &cfg.env,
                cfg.group_size,
                instance,
                &[cfg.seed, TAG_ROLLOUT, step as u64, g as u64],
            )
        })
        .collect()
}

/// Runs the training loop and returns per-step metrics and final parameters.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ref_params = cfg.initial_params();
    let mut params = ref_params.clone();
    let loss_cfg = cfg.loss_config();
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    let mut last_batch = Vec::new();
    let mut last_credit = Vec::new();

    for step in 0..cfg.total_steps {
        let batch = rollout_batch(&params, cfg, step)?;
        let credit: Vec<Vec<CreditVector>> = batch
            .iter()
            .map(|rg| gear_credit(&rg.group, &cfg.gear))
            .collect::<Result<_>>()?;
        let advantages = credit_advantages(&credit);
        let out = batch_loss_and_grad(&params, &ref_params, &batch, &advantages, &loss_cfg)?;

        let eval_success = if step % cfg.eval_interval == 0 {
            Some(evaluate(&params, cfg)?)
        } else {
            None
        };
        metrics.push(step_metrics(step, &batch, &credit, &out, eval_success));

        params.add_scaled(-cfg.learning_rate, &out.grad);
        last_batch = batch;
        last_credit = credit;
    }
    let final_eval_success = evaluate(&params, cfg)?;
    Ok(TrainOutcome {
        metrics,
        params,
        final_eval_success,
        last_batch,
        last_credit,
    })
}

fn step_metrics(
    step: usize,
    batch: &[RolloutGroup],
    credit: &[Vec<CreditVector>],
    out: &LossOutput,
    eval_success: Option<f64>,
) -> StepMetrics {
    let trajectories: Vec<&Trajectory> = batch.iter().flat_map(|rg| &rg.group.members).collect();
    let mean_reward =
        trajectories.iter().map(|t| t.reward).sum::<f64>() / trajectories.len().max(1) as f64;
    let entropies: Vec<f64> = trajectories
        .iter()
        .flat_map(|t| t.records.iter().filter_map(|r| r.entropy))
        .collect();
    let n = entropies.len().max(1) as f64;
    let mean_entropy = entropies.iter().sum::<f64>() / n;
    let all_credit = credit.iter().flatten();
    let mean_abs_adv = all_credit
        .clone()
        .flat_map(|c| c.adv.iter().map(|a| a.abs()))
        .sum::<f64>()
        / n;
    let covered: usize = all_credit
        .flat_map(|c| &c.segments)
        .map(|s| s.end - s.start + 1)
        .sum();
    StepMetrics {
        step,
        mean_reward,
        mean_entropy,
        mean_abs_adv,
        segment_fraction: covered as f64 / n,
        clipped_fraction: out.clipped_tokens as f64 / out.num_tokens.max(1) as f64,
        loss: out.loss,
        kl: out.kl,
        eval_success,
    }
}

/// Maximum relative gradient error of one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: &'static str,
    pub num_params: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failing_blocks(&self) -> Vec<&'static str> {
        self.blocks
            .iter()
            .filter(|b| b.max_rel_error > self.tolerance)
            .map(|b| b.name)
            .collect()
    }
}

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;
/// Gradient magnitudes below this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares `analytic` to central differences of [`batch_loss`] at `params`.
pub fn check_gradient(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    batch: &[RolloutGroup],
    advantages: &[Vec<Vec<f64>>],
    cfg: &LossConfig,
    analytic: &PolicyParams,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut probe = params.clone();
    let mut blocks = Vec::new();
    for b in 0..6 {
        let (name, len) = {
            let (name, block) = &probe.blocks()[b];
            (*name, block.len())
        };
        let mut max_rel = 0.0f64;
        for i in 0..len {
            let orig = probe.blocks()[b].1[i];
            probe.blocks_mut()[b].1[i] = orig + FD_STEP;
            let plus = batch_loss(&probe, ref_params, batch, advantages, cfg)?;
            probe.blocks_mut()[b].1[i] = orig - FD_STEP;
            let minus = batch_loss(&probe, ref_params, batch, advantages, cfg)?;
            probe.blocks_mut()[b].1[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let exact = analytic.blocks()[b].1[i];
            let scale = numeric.abs().max(exact.abs()).max(REL_ERROR_FLOOR);
            max_rel = max_rel.max((numeric - exact).abs() / scale);
        }
        blocks.push(BlockReport {
            name,
            num_params: len,
            max_rel_error: max_rel,
        });
    }
    let passed = blocks.iter().all(|b| b.max_rel_error <= tolerance);
    Ok(GradCheckReport {
        blocks,
        tolerance,
        passed,
    })
}

/// Reference policy, rollouts and per-token advantages.
pub type GradCheckBatch = (PolicyParams, Vec<RolloutGroup>, Vec<Vec<Vec<f64>>>);

/// Small fixed batch for gradient checking: behavior and reference policies are random
/// perturbations of `params` so ratios leave the clip range, and token advantages are
/// drawn from `[-1.5, 1.5]` so both surrogate branches are exercised.
pub fn grad_check_batch(
    params: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<GradCheckBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x6772_6164]));
    let perturb = |rng: &mut ChaCha8Rng| {
        let mut p = params.clone();
        for (_, block) in p.blocks_mut() {
            for v in block.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        p
    };
    let behavior = perturb(&mut rng);
    let ref_params = perturb(&mut rng);
    let batch: Vec<RolloutGroup> = (0..2u64)
        .map(|g| rollout_group(&behavior, &cfg.env, 3, derive_seed(&[cfg.seed, g]), &[cfg.seed, 0x6763, g]))
        .collect::<Result<_>>()?;
    let advantages = batch
        .iter()
        .map(|rg| {
            rg.group
                .members
                .iter()
                .map(|m| (0..m.num_policy_tokens()).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect()
        })
        .collect();
    Ok((ref_params, batch, advantages))
}

/// Analytic gradient vs central finite differences on [`grad_check_batch`].
pub fn grad_check(params: &PolicyParams, cfg: &TrainConfig, tolerance: f64) -> Result<GradCheckReport> {
    let (ref_params, batch, advantages) = grad_check_batch(params, cfg)?;
    let loss_cfg = cfg.loss_config();
    let analytic = batch_loss_and_grad(params, &ref_params, &batch, &advantages, &loss_cfg)?.grad;
    check_gradient(params, &ref_params, &batch, &advantages, &loss_cfg, &analytic, tolerance)
}

/// Mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Mann-Kendall trend statistic `S = sum_{i<j} sign(x_j - x_i)`.
pub fn mann_kendall(series: &[f64]) -> i64 {
    let mut s = 0i64;
    for i in 0..series.len() {
        for j in i + 1..series.len() {
            s += match series[j].partial_cmp(&series[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    s
}

/// One-sided paired sign test of `a > b`: `P(Bin(n, 1/2) >= wins)` over untied pairs.
pub fn sign_test_greater(a: &[f64], b: &[f64]) -> f64 {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut coeff = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k > 0 {
            coeff *= (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            tail += coeff;
        }
    }
    tail / 2f64.powi(n as i32)
}

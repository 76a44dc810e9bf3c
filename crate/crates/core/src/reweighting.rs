//! Sign-aware, affinely rescaled token advantages and the per-group credit pipeline.

use crate::error::Result;
use crate::segmentation::{segment_variant, SegmentationResult};
use crate::signals::{minmax_normalize, reverse_kl_sequence};
use crate::trajectory::{
    group_statistics, policy_token_view, CreditVector, GearConfig, Trajectory, TrajectoryGroup,
};

/// Affine map `W = alpha * w + offset` applied to sign-aware weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardModulation {
    pub alpha: f64,
    pub affine_offset: f64,
    /// When set, `affine_offset == 1 - 0.5 * alpha`, which makes `w = 0.5` map to 1.
    pub derived_offset_rule: bool,
}

impl RewardModulation {
    /// `None` selects the derived offset `1 - 0.5 * alpha`.
    pub fn new(alpha: f64, affine_offset: Option<f64>) -> Self {
        match affine_offset {
            Some(offset) => Self {
                alpha,
                affine_offset: offset,
                derived_offset_rule: false,
            },
            None => Self::derived(alpha),
        }
    }

    pub fn derived(alpha: f64) -> Self {
        Self {
            alpha,
            affine_offset: 1.0 - 0.5 * alpha,
            derived_offset_rule: true,
        }
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `w = 0.5 + (0.5 - w_kl) * sign(A)`.
///
/// Divergent tokens are down-weighted in positive-advantage trajectories and
/// up-weighted in negative ones.
pub fn sign_aware_weights(w_kl: &[f64], advantage: f64) -> Vec<f64> {
    let s = sign(advantage);
    w_kl.iter().map(|w| 0.5 + (0.5 - w) * s).collect()
}

pub fn affine_rescale(w: &[f64], modulation: &RewardModulation) -> Vec<f64> {
    w.iter()
        .map(|v| modulation.alpha * v + modulation.affine_offset)
        .collect()
}

/// `adv_t = W_t * A`.
pub fn reweight_advantage(w_final: &[f64], advantage: f64) -> Vec<f64> {
    w_final.iter().map(|w| w * advantage).collect()
}

/// Policy-token indices of tool-call markers in `traj`.
pub fn marker_indices(traj: &Trajectory, marker_tokens: &[u32]) -> Vec<usize> {
    traj.records
        .iter()
        .filter(|r| r.is_policy_token)
        .enumerate()
        .filter(|(_, r)| marker_tokens.contains(&r.token_id))
        .map(|(i, _)| i)
        .collect()
}

/// Credit for a single trajectory given its group-normalized advantage.
pub fn trajectory_credit(
    traj: &Trajectory,
    advantage: f64,
    cfg: &GearConfig,
) -> Result<CreditVector> {
    let view = policy_token_view(traj);
    if view.is_empty() {
        return Ok(CreditVector {
            advantage,
            ..CreditVector::default()
        });
    }
    let raw = reverse_kl_sequence(&view.behavior_logp, &view.teacher_logp)?;
    let norm = minmax_normalize(&raw.values)?;
    let markers = marker_indices(traj, &cfg.marker_tokens);
    let SegmentationResult { segments, w_kl } =
        segment_variant(&norm.values, &view.entropy, &markers, cfg)?;
    let w_signed = sign_aware_weights(&w_kl, advantage);
    let w_final = affine_rescale(&w_signed, &cfg.modulation());
    let adv = reweight_advantage(&w_final, advantage);
    Ok(CreditVector {
        advantage,
        norm_rkl: norm.values,
        segments,
        w_kl,
        w_signed,
        w_final,
        adv,
    })
}

/// Full per-group pipeline: group advantages, signals, segmentation, reweighting.
pub fn gear_credit(group: &TrajectoryGroup, cfg: &GearConfig) -> Result<Vec<CreditVector>> {
    let stats = group_statistics(&group.rewards(), cfg.eps_std)?;
    group
        .members
        .iter()
        .zip(&stats.advantages)
        .map(|(traj, &a)| trajectory_credit(traj, a, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{TokenRecord, Variant};
    use proptest::prelude::*;

    #[test]
    fn sign_aware_examples() {
        assert!((sign_aware_weights(&[0.8], 1.2)[0] - 0.2).abs() < 1e-15);
        assert!((sign_aware_weights(&[0.8], -1.2)[0] - 0.8).abs() < 1e-15);
        assert_eq!(sign_aware_weights(&[0.5], 3.0), vec![0.5]);
        assert_eq!(sign_aware_weights(&[0.5], -3.0), vec![0.5]);
        assert_eq!(sign_aware_weights(&[0.0, 0.3, 1.0], 0.0), vec![0.5; 3]);
        assert_eq!(sign(-0.0), 0.0);
    }

    #[test]
    fn affine_examples() {
        let m = RewardModulation::new(0.2, Some(0.9));
        assert!((affine_rescale(&[0.2], &m)[0] - 0.94).abs() < 1e-15);
        let w = affine_rescale(&[0.0, 1.0], &m);
        assert!((w[0] - 0.9).abs() < 1e-15 && (w[1] - 1.1).abs() < 1e-15);
        for alpha in [0.0, 0.2, 0.4, 0.6, 1.7] {
            assert_eq!(affine_rescale(&[0.5], &RewardModulation::derived(alpha)), vec![1.0]);
        }
        assert_eq!(RewardModulation::derived(0.2).affine_offset, 0.9);
        assert_eq!(RewardModulation::derived(0.4).affine_offset, 0.8);
        assert_eq!(RewardModulation::derived(0.6).affine_offset, 0.7);
    }

    #[test]
    fn reweight_examples() {
        assert!((reweight_advantage(&[0.94], 1.2)[0] - 1.128).abs() < 1e-15);
        assert_eq!(reweight_advantage(&[0.3, 1.7], 0.0), vec![0.0, 0.0]);
        assert_eq!(reweight_advantage(&[1.0; 3], -0.7), vec![-0.7; 3]);
    }

    fn traj_from(behavior: &[f64], teacher: &[f64], entropy: &[f64], reward: f64) -> Trajectory {
        let records = (0..behavior.len())
            .map(|i| TokenRecord::policy(i, 7, behavior[i], teacher[i], entropy[i]))
            .collect();
        Trajectory {
            records,
            prompt_id: "p".into(),
            reward,
            terminated: true,
        }
    }

    #[test]
    fn identical_rewards_zero_credit() {
        let t = traj_from(&[-0.1, -2.0], &[-0.5, -0.2], &[1.0, 0.4], 0.7);
        let g = TrajectoryGroup::new("g", vec![t.clone(), t]).unwrap();
        for c in gear_credit(&g, &GearConfig::default()).unwrap() {
            assert!(c.adv.iter().all(|a| *a == 0.0));
        }
    }

    #[test]
    fn alpha_zero_recovers_grpo() {
        let a = traj_from(&[-0.1, -2.0, -0.3], &[-0.5, -0.2, -1.0], &[1.0, 0.4, 0.9], 1.0);
        let b = traj_from(&[-0.4, -0.2], &[-0.1, -3.0], &[0.3, 0.8], 0.0);
        let g = TrajectoryGroup::new("g", vec![a, b]).unwrap();
        let cfg = GearConfig::grpo();
        let stats = group_statistics(&g.rewards(), cfg.eps_std).unwrap();
        for (c, a) in gear_credit(&g, &cfg).unwrap().iter().zip(stats.advantages) {
            assert!(c.w_final.iter().all(|w| *w == 1.0));
            assert!(c.adv.iter().all(|x| *x == a));
        }
    }

    #[test]
    fn token_only_equals_gear_without_triggers() {
        // constant rKL normalizes to zeros, so no trigger fires
        let a = traj_from(&[-0.5, -0.6], &[-0.4, -0.5], &[1.0, 0.2], 1.0);
        let b = traj_from(&[-1.0, -1.0, -1.0], &[-1.0, -1.0, -1.0], &[0.1, 0.9, 0.3], 0.0);
        let g = TrajectoryGroup::new("g", vec![a, b]).unwrap();
        let gear = gear_credit(&g, &GearConfig::default()).unwrap();
        let token = gear_credit(
            &g,
            &GearConfig {
                variant: Variant::TokenOnly,
                ..GearConfig::default()
            },
        )
        .unwrap();
        assert_eq!(gear, token);
    }

    #[test]
    fn empty_policy_view_yields_empty_credit() {
        let t = Trajectory {
            records: vec![TokenRecord::observation(0, 3)],
            prompt_id: "p".into(),
            reward: 1.0,
            terminated: true,
        };
        let c = trajectory_credit(&t, 0.4, &GearConfig::default()).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.advantage, 0.4);
    }

    proptest! {
        #[test]
        fn bounded_modulation(w_kl in prop::collection::vec(0.0f64..=1.0, 1..32), a in -5.0f64..5.0, alpha in 0.0f64..2.0) {
            let m = RewardModulation::derived(alpha);
            let w = sign_aware_weights(&w_kl, a);
            prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
            let big = affine_rescale(&w, &m);
            let adv = reweight_advantage(&big, a);
            for x in adv {
                prop_assert!(x.abs() <= (1.0 + 0.5 * alpha) * a.abs() + 1e-12);
            }
            let mean_w = w.iter().sum::<f64>() / w.len() as f64;
            let mean_big = big.iter().sum::<f64>() / big.len() as f64;
            prop_assert!((mean_big - (alpha * mean_w + 1.0 - 0.5 * alpha)).abs() < 1e-12);
        }
    }
}

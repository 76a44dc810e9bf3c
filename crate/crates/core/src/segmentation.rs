//! Divergence-aware segmentation of the policy-token subsequence.
//!
//! The default rule opens a segment at every token whose normalized reverse-KL exceeds
//! `lambda_kl` and closes it at the first later token whose entropy exceeds
//! `lambda_h` times the onset entropy. Every token of a segment inherits the onset's
//! normalized reverse-KL as its weight; tokens outside segments keep their own value.
//! The other functions implement the ablation rules (KL triggers only, entropy cuts
//! only, tool-call boundaries, windowed entropy).
//!
//! All comparisons are strict, segments are inclusive on both ends, and a segment with
//! no terminator runs to the final token.

use crate::error::{Error, Result};
use crate::signals::entropy_window_average;
use crate::trajectory::{check_segments, GearConfig, Segment, Variant};

/// Segments plus the piecewise weights they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub segments: Vec<Segment>,
    pub w_kl: Vec<f64>,
}

impl SegmentationResult {
    fn from_segments(segments: Vec<Segment>, norm_rkl: &[f64]) -> Self {
        let w_kl = fill_weights(&segments, norm_rkl);
        Self { segments, w_kl }
    }

    /// Token-level weights with no segments.
    pub fn identity(norm_rkl: &[f64]) -> Self {
        Self {
            segments: Vec::new(),
            w_kl: norm_rkl.to_vec(),
        }
    }

    /// Number of tokens covered by some segment.
    pub fn covered(&self) -> usize {
        self.segments.iter().map(|s| s.end - s.start + 1).sum()
    }
}

fn segment(start: usize, end: usize, norm_rkl: &[f64]) -> Segment {
    Segment {
        start,
        end,
        onset_weight: norm_rkl[start],
    }
}

fn check_lengths(norm_rkl: &[f64], entropy: &[f64]) -> Result<()> {
    if norm_rkl.len() != entropy.len() {
        return Err(Error::LengthMismatch {
            context: "segmentation signals",
            expected: norm_rkl.len(),
            found: entropy.len(),
        });
    }
    Ok(())
}

/// KL-trigger scan with termination tested against `entropy`.
fn trigger_scan(norm_rkl: &[f64], entropy: &[f64], lambda_kl: f64, lambda_h: f64) -> Vec<Segment> {
    let n = norm_rkl.len();
    let mut segments = Vec::new();
    let mut t = 0;
    while t < n {
        if norm_rkl[t] > lambda_kl {
            let threshold = lambda_h * entropy[t];
            let end = (t + 1..n)
                .find(|&u| entropy[u] > threshold)
                .unwrap_or(n - 1);
            segments.push(segment(t, end, norm_rkl));
            t = end + 1;
        } else {
            t += 1;
        }
    }
    segments
}

/// KL-triggered, entropy-terminated segmentation.
pub fn segment_gear(
    norm_rkl: &[f64],
    entropy: &[f64],
    cfg: &GearConfig,
) -> Result<SegmentationResult> {
    check_lengths(norm_rkl, entropy)?;
    let segments = trigger_scan(norm_rkl, entropy, cfg.lambda_kl, cfg.lambda_h);
    Ok(SegmentationResult::from_segments(segments, norm_rkl))
}

/// Every trigger opens a segment that runs until just before the next trigger.
pub fn segment_kl_only(norm_rkl: &[f64], cfg: &GearConfig) -> SegmentationResult {
    let triggers: Vec<usize> = (0..norm_rkl.len())
        .filter(|&t| norm_rkl[t] > cfg.lambda_kl)
        .collect();
    let segments = triggers
        .iter()
        .enumerate()
        .map(|(i, &start)| {
            let end = triggers.get(i + 1).map_or(norm_rkl.len() - 1, |next| next - 1);
            segment(start, end, norm_rkl)
        })
        .collect();
    SegmentationResult::from_segments(segments, norm_rkl)
}

/// Consecutive segments cut where entropy exceeds `lambda_h` times the segment's
/// onset entropy. The terminating token closes its own segment.
pub fn segment_entropy_only(
    norm_rkl: &[f64],
    entropy: &[f64],
    cfg: &GearConfig,
) -> Result<SegmentationResult> {
    check_lengths(norm_rkl, entropy)?;
    let n = norm_rkl.len();
    let mut segments = Vec::new();
    let mut start = 0;
    while start < n {
        let threshold = cfg.lambda_h * entropy[start];
        let end = (start + 1..n)
            .find(|&u| entropy[u] > threshold)
            .unwrap_or(n - 1);
        segments.push(segment(start, end, norm_rkl));
        start = end + 1;
    }
    Ok(SegmentationResult::from_segments(segments, norm_rkl))
}

/// Partition at tool-call markers; tokens before the first marker form their own segment.
pub fn segment_by_markers(
    marker_positions: &[usize],
    length: usize,
    norm_rkl: &[f64],
) -> Result<SegmentationResult> {
    if norm_rkl.len() != length {
        return Err(Error::LengthMismatch {
            context: "segment_by_markers",
            expected: length,
            found: norm_rkl.len(),
        });
    }
    let mut prev = None;
    for &m in marker_positions {
        if m >= length {
            return Err(Error::invariant(
                "marker_in_range",
                format!("marker {m} outside 0..{length}"),
            ));
        }
        if prev.is_some_and(|p| m <= p) {
            return Err(Error::invariant(
                "markers_sorted",
                format!("marker {m} follows {}", prev.unwrap_or_default()),
            ));
        }
        prev = Some(m);
    }
    if length == 0 {
        return Ok(SegmentationResult::identity(norm_rkl));
    }
    let mut starts = Vec::with_capacity(marker_positions.len() + 1);
    if marker_positions.first() != Some(&0) {
        starts.push(0);
    }
    starts.extend_from_slice(marker_positions);
    let segments = starts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let end = starts.get(i + 1).map_or(length - 1, |next| next - 1);
            segment(s, end, norm_rkl)
        })
        .collect();
    Ok(SegmentationResult::from_segments(segments, norm_rkl))
}

/// As [`segment_gear`], using trailing-window mean entropy for onset and termination.
pub fn segment_entropy_window(
    norm_rkl: &[f64],
    entropy: &[f64],
    cfg: &GearConfig,
) -> Result<SegmentationResult> {
    check_lengths(norm_rkl, entropy)?;
    let windowed = entropy_window_average(entropy, cfg.window_size);
    let segments = trigger_scan(norm_rkl, &windowed.values, cfg.lambda_kl, cfg.lambda_h);
    Ok(SegmentationResult::from_segments(segments, norm_rkl))
}

fn fill_weights(segments: &[Segment], norm_rkl: &[f64]) -> Vec<f64> {
    let mut w = norm_rkl.to_vec();
    for s in segments {
        let onset = norm_rkl[s.start];
        w[s.start..=s.end].fill(onset);
    }
    w
}

/// Onset weight inside each segment, the token's own value elsewhere.
pub fn piecewise_weights(segments: &[Segment], norm_rkl: &[f64]) -> Result<Vec<f64>> {
    check_segments(segments, norm_rkl.len())?;
    Ok(fill_weights(segments, norm_rkl))
}

/// Dispatches on `cfg.variant`. `markers` are policy-token indices of tool calls.
pub fn segment_variant(
    norm_rkl: &[f64],
    entropy: &[f64],
    markers: &[usize],
    cfg: &GearConfig,
) -> Result<SegmentationResult> {
    check_lengths(norm_rkl, entropy)?;
    match cfg.variant {
        Variant::Gear => segment_gear(norm_rkl, entropy, cfg),
        Variant::TokenOnly => Ok(SegmentationResult::identity(norm_rkl)),
        Variant::KlOnly => Ok(segment_kl_only(norm_rkl, cfg)),
        Variant::EntropyOnly => segment_entropy_only(norm_rkl, entropy, cfg),
        Variant::Marker => segment_by_markers(markers, norm_rkl.len(), norm_rkl),
        Variant::EntropyWindow => segment_entropy_window(norm_rkl, entropy, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spans(r: &SegmentationResult) -> Vec<(usize, usize)> {
        r.segments.iter().map(|s| (s.start, s.end)).collect()
    }

    #[test]
    fn gear_worked_example() {
        let norm = [0.0, 0.3, 0.05, 0.02, 0.6, 0.02];
        let ent = [1.0, 0.4, 0.5, 0.7, 0.2, 0.5];
        let r = segment_gear(&norm, &ent, &GearConfig::default()).unwrap();
        assert_eq!(spans(&r), vec![(1, 3), (4, 5)]);
        assert_eq!(r.w_kl, vec![0.0, 0.3, 0.3, 0.3, 0.6, 0.6]);
    }

    #[test]
    fn gear_degenerate_cases() {
        let cfg = GearConfig::default();
        let norm = [0.1, 0.05, 0.0, 0.1];
        let r = segment_gear(&norm, &[1.0, 2.0, 3.0, 4.0], &cfg).unwrap();
        assert!(r.segments.is_empty());
        assert_eq!(r.w_kl, norm.to_vec());

        let norm = [0.9, 0.2, 0.0, 1.0];
        let r = segment_gear(&norm, &[4.0, 3.0, 2.0, 1.0], &cfg).unwrap();
        assert_eq!(spans(&r), vec![(0, 3)]);
        assert!(r.w_kl.iter().all(|w| *w == 0.9));

        // zero-entropy onset ends at the first later token with positive entropy
        let r = segment_gear(&[0.5, 0.0, 0.0], &[0.0, 0.0, 0.1], &cfg).unwrap();
        assert_eq!(spans(&r), vec![(0, 2)]);

        assert!(segment_gear(&[], &[], &cfg).unwrap().segments.is_empty());
        assert!(segment_gear(&[0.1], &[], &cfg).is_err());
    }

    #[test]
    fn ties_neither_trigger_nor_terminate() {
        let cfg = GearConfig::default();
        // 0.1 == lambda_kl does not trigger; 1.5 == 1.5 * 1.0 does not terminate
        let r = segment_gear(&[0.1, 0.5, 0.0, 0.0], &[1.0, 1.0, 1.5, 1.6], &cfg).unwrap();
        assert_eq!(spans(&r), vec![(1, 3)]);
    }

    #[test]
    fn kl_only_examples() {
        let cfg = GearConfig::default();
        let norm = [0.05, 0.3, 0.02, 0.4, 0.01];
        let r = segment_kl_only(&norm, &cfg);
        assert_eq!(spans(&r), vec![(1, 2), (3, 4)]);
        assert_eq!(r.w_kl, vec![0.05, 0.3, 0.3, 0.4, 0.4]);

        let r = segment_kl_only(&[0.0, 0.05], &cfg);
        assert!(r.segments.is_empty());

        let r = segment_kl_only(&[0.7, 0.0, 0.05, 0.1], &cfg);
        assert_eq!(spans(&r), vec![(0, 3)]);
        assert!(r.w_kl.iter().all(|w| *w == 0.7));
    }

    #[test]
    fn entropy_only_examples() {
        let cfg = GearConfig::default();
        let norm = [0.1, 0.2, 0.3, 0.6, 0.05];
        let ent = [0.4, 0.5, 0.7, 0.2, 0.5];
        let r = segment_entropy_only(&norm, &ent, &cfg).unwrap();
        assert_eq!(spans(&r), vec![(0, 2), (3, 4)]);
        assert_eq!(r.w_kl, vec![0.1, 0.1, 0.1, 0.6, 0.6]);

        let r = segment_entropy_only(&[0.2; 4], &[2.0, 2.0, 1.0, 0.5], &cfg).unwrap();
        assert_eq!(spans(&r), vec![(0, 3)]);

        let r = segment_entropy_only(&[0.4], &[1.0], &cfg).unwrap();
        assert_eq!(spans(&r), vec![(0, 0)]);
    }

    #[test]
    fn marker_examples() {
        let norm = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let r = segment_by_markers(&[2, 4], 6, &norm).unwrap();
        assert_eq!(spans(&r), vec![(0, 1), (2, 3), (4, 5)]);
        assert_eq!(r.w_kl, vec![0.1, 0.1, 0.3, 0.3, 0.5, 0.5]);

        let r = segment_by_markers(&[], 6, &norm).unwrap();
        assert_eq!(spans(&r), vec![(0, 5)]);

        let r = segment_by_markers(&[0], 6, &norm).unwrap();
        assert_eq!(spans(&r), vec![(0, 5)]);

        assert!(segment_by_markers(&[6], 6, &norm).is_err());
        assert!(segment_by_markers(&[3, 2], 6, &norm).is_err());
    }

    #[test]
    fn entropy_window_examples() {
        let norm = [0.0, 0.3, 0.05, 0.02, 0.6, 0.02];
        let ent = [1.0, 0.4, 0.5, 0.7, 0.2, 0.5];
        let cfg = GearConfig {
            window_size: 1,
            ..GearConfig::default()
        };
        assert_eq!(
            segment_entropy_window(&norm, &ent, &cfg).unwrap(),
            segment_gear(&norm, &ent, &cfg).unwrap()
        );
        let r = segment_entropy_window(&[0.0, 0.5, 0.0, 0.0], &[0.7; 4], &GearConfig::default())
            .unwrap();
        assert_eq!(spans(&r), vec![(1, 3)]);
    }

    #[test]
    fn piecewise_examples() {
        let norm = [0.0, 0.3, 0.05, 0.02, 0.6];
        let seg = Segment {
            start: 1,
            end: 3,
            onset_weight: 0.3,
        };
        assert_eq!(
            piecewise_weights(&[seg], &norm).unwrap(),
            vec![0.0, 0.3, 0.3, 0.3, 0.6]
        );
        assert_eq!(piecewise_weights(&[], &norm).unwrap(), norm.to_vec());
        let overlap = Segment {
            start: 3,
            end: 4,
            onset_weight: 0.02,
        };
        assert!(piecewise_weights(&[seg, overlap], &norm).is_err());
    }

    fn signals() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (0usize..48).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..=1.0, n),
                prop::collection::vec(0.0f64..3.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn all_variants_structurally_valid((norm, ent) in signals(), lambda_kl in 0.01f64..0.99, lambda_h in 1.01f64..3.0) {
            let markers: Vec<usize> = (0..norm.len()).filter(|i| i % 5 == 2).collect();
            let (lo, hi) = norm.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            for variant in Variant::ALL {
                let cfg = GearConfig { lambda_kl, lambda_h, variant, ..GearConfig::default() };
                let r = segment_variant(&norm, &ent, &markers, &cfg).unwrap();
                prop_assert!(check_segments(&r.segments, norm.len()).is_ok());
                prop_assert_eq!(r.w_kl.len(), norm.len());
                prop_assert!(r.w_kl.iter().all(|w| *w >= lo && *w <= hi));
                for s in &r.segments {
                    prop_assert!(r.w_kl[s.start..=s.end].iter().all(|w| *w == norm[s.start]));
                }
            }
        }

        #[test]
        fn gear_onsets_trigger((norm, ent) in signals()) {
            let cfg = GearConfig::default();
            let r = segment_gear(&norm, &ent, &cfg).unwrap();
            prop_assert!(r.segments.iter().all(|s| norm[s.start] > cfg.lambda_kl));
        }

        #[test]
        fn no_segments_with_unit_threshold((norm, ent) in signals()) {
            let cfg = GearConfig { lambda_kl: 1.0, ..GearConfig::default() };
            prop_assert!(segment_gear(&norm, &ent, &cfg).unwrap().segments.is_empty());
        }

        #[test]
        fn window_one_equals_gear((norm, ent) in signals()) {
            let cfg = GearConfig { window_size: 1, ..GearConfig::default() };
            prop_assert_eq!(segment_entropy_window(&norm, &ent, &cfg).unwrap(), segment_gear(&norm, &ent, &cfg).unwrap());
        }
    }
}

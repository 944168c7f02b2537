//! Depth-accuracy metrics: joint masking, offset-aligned absolute error
//! statistics and error heat maps.
//!
//! Depth units here are model units, so a per-pair affine alignment (an
//! optimal scalar offset over the mask) is applied before differencing. The
//! offset is the masked median of the difference, the L1-optimal shift; the
//! 90th percentile uses the nearest-rank rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::DepthMap;

/// Mean and 90th-percentile absolute depth error over a pixel set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthErrorStats {
    pub mean_abs_err: f64,
    pub p90_abs_err: f64,
    pub pixel_count: usize,
}

/// Elementwise conjunction of validity masks.
pub fn joint_mask(masks: &[&[bool]]) -> Result<Vec<bool>> {
    let Some(first) = masks.first() else {
        return Err(Error::EmptyMask {
            context: "joint mask of zero masks",
        });
    };
    let len = first.len();
    for m in masks {
        if m.len() != len {
            return Err(Error::DimensionMismatch {
                what: "mask",
                expected: len,
                got: m.len(),
            });
        }
    }
    Ok((0..len).map(|i| masks.iter().all(|m| m[i])).collect())
}

/// Lower median: for even counts, the smaller of the two central elements.
/// Any value between the central pair minimizes the L1 objective; this choice
/// is deterministic.
fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[(values.len() - 1) / 2]
}

fn effective_mask(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<Vec<bool>> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::ShapeMismatch {
            what: "prediction vs ground truth",
            expected_w: gt.width,
            expected_h: gt.height,
            got_w: pred.width,
            got_h: pred.height,
        });
    }
    if mask.len() != pred.depth.len() {
        return Err(Error::DimensionMismatch {
            what: "evaluation mask",
            expected: pred.depth.len(),
            got: mask.len(),
        });
    }
    joint_mask(&[&pred.valid, &gt.valid, mask])
}

/// The L1-optimal scalar offset between prediction and ground truth over the
/// effective mask: the masked median of their difference.
pub fn alignment_offset(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<f64> {
    let joint = effective_mask(pred, gt, mask)?;
    let mut diffs: Vec<f64> = joint
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| pred.depth[i] - gt.depth[i])
        .collect();
    if diffs.is_empty() {
        return Err(Error::EmptyMask {
            context: "depth error evaluation",
        });
    }
    Ok(lower_median(&mut diffs))
}

/// Mean and nearest-rank 90th percentile of the offset-aligned absolute
/// depth error over the mask.
pub fn depth_error_stats(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<DepthErrorStats> {
    let joint = effective_mask(pred, gt, mask)?;
    let offset = alignment_offset(pred, gt, mask)?;
    let mut errors: Vec<f64> = joint
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| (pred.depth[i] - gt.depth[i] - offset).abs())
        .collect();
    let n = errors.len();
    let mean = errors.iter().sum::<f64>() / n as f64;
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.9 * n as f64).ceil() as usize).clamp(1, n);
    Ok(DepthErrorStats {
        mean_abs_err: mean,
        p90_abs_err: errors[rank - 1],
        pixel_count: n,
    })
}

/// Per-pixel offset-aligned absolute error on the mask, zero elsewhere. The
/// returned map's validity is the effective mask.
pub fn error_heatmap(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<DepthMap> {
    let joint = effective_mask(pred, gt, mask)?;
    let offset = alignment_offset(pred, gt, mask)?;
    let mut depth = vec![0.0; pred.depth.len()];
    for i in 0..depth.len() {
        if joint[i] {
            depth[i] = (pred.depth[i] - gt.depth[i] - offset).abs();
        }
    }
    Ok(DepthMap {
        width: pred.width,
        height: pred.height,
        depth,
        valid: joint,
    })
}

/// Root mean square difference over the intersection of two depth maps'
/// validity, without offset alignment. None when the intersection is empty.
pub fn masked_rmse(a: &DepthMap, b: &DepthMap) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..a.depth.len() {
        if a.valid[i] && b.valid[i] {
            let d = a.depth[i] - b.depth[i];
            acc += d * d;
            n += 1;
        }
    }
    (n > 0).then(|| (acc / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn map(w: usize, h: usize, depth: Vec<f64>, valid: Vec<bool>) -> DepthMap {
        DepthMap {
            width: w,
            height: h,
            depth,
            valid,
        }
    }

    #[test]
    fn joint_mask_cases() {
        let a = vec![true, false, true, true];
        assert_eq!(joint_mask(&[&a]).unwrap(), a);
        let none = vec![false; 4];
        assert_eq!(joint_mask(&[&a, &none]).unwrap(), none);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let m1: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.5)).collect();
        let m2: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.5)).collect();
        let joint = joint_mask(&[&m1, &m2]).unwrap();
        for i in 0..64 {
            assert_eq!(joint[i], m1[i] && m2[i]);
        }
    }

    #[test]
    fn identical_maps_have_zero_error() {
        let d = map(3, 3, (0..9).map(|i| i as f64).collect(), vec![true; 9]);
        let stats = depth_error_stats(&d, &d, &vec![true; 9]).unwrap();
        assert_eq!(stats.mean_abs_err, 0.0);
        assert_eq!(stats.p90_abs_err, 0.0);
        assert_eq!(stats.pixel_count, 9);
    }

    #[test]
    fn constant_shift_is_aligned_away() {
        let gt = map(3, 3, (0..9).map(|i| i as f64).collect(), vec![true; 9]);
        let pred = map(3, 3, (0..9).map(|i| i as f64 + 7.5).collect(), vec![true; 9]);
        let stats = depth_error_stats(&pred, &gt, &vec![true; 9]).unwrap();
        assert!(stats.mean_abs_err < 1e-12);
        assert!(stats.p90_abs_err < 1e-12);
    }

    /// Fixed 3x3 fixture with errors worked out by hand.
    ///
    /// pred - gt = [0, 0, 0, 1, -1, 0, 2, 0, 0]; median (lower) = 0, so
    /// absolute errors are [0,0,0,1,1,0,2,0,0]: mean = 4/9, p90 at
    /// nearest-rank ceil(0.9*9) = 9th smallest = 2.
    #[test]
    fn hand_computed_three_by_three() {
        let gt = map(3, 3, vec![5.0; 9], vec![true; 9]);
        let pred = map(
            3,
            3,
            vec![5.0, 5.0, 5.0, 6.0, 4.0, 5.0, 7.0, 5.0, 5.0],
            vec![true; 9],
        );
        let stats = depth_error_stats(&pred, &gt, &vec![true; 9]).unwrap();
        assert!((stats.mean_abs_err - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(stats.p90_abs_err, 2.0);
        assert_eq!(stats.pixel_count, 9);
    }

    #[test]
    fn median_offset_beats_random_offsets() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let n = 128;
        let gt = map(
            16,
            8,
            (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            vec![true; n],
        );
        let pred = map(
            16,
            8,
            gt.depth
                .iter()
                .map(|v| v + rng.gen_range(-2.0..3.0))
                .collect(),
            vec![true; n],
        );
        let mask = vec![true; n];
        let offset = alignment_offset(&pred, &gt, &mask).unwrap();
        let mae = |off: f64| -> f64 {
            (0..n)
                .map(|i| (pred.depth[i] - gt.depth[i] - off).abs())
                .sum::<f64>()
                / n as f64
        };
        let best = mae(offset);
        for _ in 0..100 {
            let candidate = rng.gen_range(-4.0..4.0);
            assert!(best <= mae(candidate) + 1e-12);
        }
    }

    #[test]
    fn stats_are_permutation_invariant_and_ordered() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 64;
        let depths: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..9.0)).collect();
        let errors: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gt = map(8, 8, depths.clone(), vec![true; n]);
        let pred = map(
            8,
            8,
            depths.iter().zip(&errors).map(|(d, e)| d + e).collect(),
            vec![true; n],
        );
        let stats = depth_error_stats(&pred, &gt, &vec![true; n]).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        // Deterministic shuffle.
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let gt_p = map(8, 8, perm.iter().map(|&i| depths[i]).collect(), vec![true; n]);
        let pred_p = map(
            8,
            8,
            perm.iter().map(|&i| depths[i] + errors[i]).collect(),
            vec![true; n],
        );
        let stats_p = depth_error_stats(&pred_p, &gt_p, &vec![true; n]).unwrap();
        // The mean is summed in pixel order, so permutations agree only to
        // rounding; the percentile sorts and is exact.
        assert!((stats.mean_abs_err - stats_p.mean_abs_err).abs() < 1e-12);
        assert_eq!(stats.p90_abs_err, stats_p.p90_abs_err);

        // p90 dominates the median of absolute errors.
        let mut abs: Vec<f64> = (0..n)
            .map(|i| {
                (pred.depth[i]
                    - gt.depth[i]
                    - alignment_offset(&pred, &gt, &vec![true; n]).unwrap())
                .abs()
            })
            .collect();
        abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(stats.p90_abs_err >= abs[(n - 1) / 2]);
        assert!(stats.p90_abs_err >= 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let d = map(2, 2, vec![1.0; 4], vec![true; 4]);
        match depth_error_stats(&d, &d, &vec![false; 4]) {
            Err(Error::EmptyMask { .. }) => {}
            other => panic!("expected EmptyMask, got {other:?}"),
        }
    }

    #[test]
    fn heatmap_trivials_and_oracle() {
        let gt = map(3, 3, vec![2.0; 9], vec![true; 9]);
        let heat = error_heatmap(&gt, &gt, &vec![true; 9]).unwrap();
        assert!(heat.depth.iter().all(|v| *v == 0.0));

        // A single differing pixel: with the median offset at 0, only that
        // pixel is nonzero.
        let mut pred = gt.clone();
        pred.depth[4] += 3.0;
        let heat = error_heatmap(&pred, &gt, &vec![true; 9]).unwrap();
        for i in 0..9 {
            if i == 4 {
                assert_eq!(heat.depth[i], 3.0);
            } else {
                assert_eq!(heat.depth[i], 0.0);
            }
        }

        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let pred = map(
            3,
            3,
            (0..9).map(|_| rng.gen_range(0.0..5.0)).collect(),
            vec![true; 9],
        );
        let mask: Vec<bool> = (0..9).map(|_| rng.gen_bool(0.8)).collect();
        if mask.iter().any(|m| *m) {
            let offset = alignment_offset(&pred, &gt, &mask).unwrap();
            let heat = error_heatmap(&pred, &gt, &mask).unwrap();
            for i in 0..9 {
                let expected = if mask[i] {
                    (pred.depth[i] - gt.depth[i] - offset).abs()
                } else {
                    0.0
                };
                assert_eq!(heat.depth[i], expected);
            }
        }
    }
}

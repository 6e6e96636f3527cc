//! Detection metrics: pixel-level IoU / normalized IoU and object-level
//! probability of detection / false-alarm rate.
//!
//! Masks are `[H, W]` tensors whose foreground pixels are 1 (anything above
//! 0.5 is treated as foreground, so thresholded probability maps and loaded
//! images both work). Objects are 8-connected components; a predicted object
//! counts as a detection when its centroid lies within a fixed distance of a
//! ground-truth object's centroid, with greedy one-to-one matching.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default matching radius (in pixels) between predicted and ground-truth
/// component centroids.
pub const MATCH_DISTANCE: f64 = 3.0;

/// Default probability threshold for binarizing network output.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One 8-connected foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStats {
    /// Number of foreground pixels.
    pub pixels: usize,
    /// Mean (row, col) of the member pixels.
    pub centroid: (f64, f64),
    /// Inclusive bounding box (min_row, min_col, max_row, max_col).
    pub bbox: (usize, usize, usize, usize),
}

/// Labeling of a mask into components. Labels are 1-based and assigned in
/// row-major order of each component's first pixel, so the numbering is
/// deterministic.
#[derive(Debug, Clone)]
pub struct ComponentSet {
    pub height: usize,
    pub width: usize,
    /// Per-pixel label; 0 is background.
    pub labels: Vec<u32>,
    pub components: Vec<ComponentStats>,
}

fn mask_dims(mask: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *mask.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "{what} expects an [H, W] mask, got {:?}",
            mask.shape()
        ))),
    }
}

#[inline]
fn is_fg(v: f64) -> bool {
    v > 0.5
}

/// Label the 8-connected foreground components of a binary mask.
pub fn connected_components(mask: &Tensor) -> Result<ComponentSet> {
    let (h, w) = mask_dims(mask, "connected_components")?;
    let data = mask.data();
    let mut labels = vec![0u32; h * w];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !is_fg(data[start]) || labels[start] != 0 {
            continue;
        }
        let id = components.len() as u32 + 1;
        let mut pixels = 0usize;
        let mut sum_r = 0.0;
        let mut sum_c = 0.0;
        let (mut min_r, mut min_c, mut max_r, mut max_c) = (usize::MAX, usize::MAX, 0usize, 0usize);
        stack.push(start);
        labels[start] = id;
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            pixels += 1;
            sum_r += r as f64;
            sum_c += c as f64;
            min_r = min_r.min(r);
            min_c = min_c.min(c);
            max_r = max_r.max(r);
            max_c = max_c.max(c);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let nr = r as i64 + dr;
                    let nc = c as i64 + dc;
                    if nr < 0 || nr >= h as i64 || nc < 0 || nc >= w as i64 {
                        continue;
                    }
                    let np = nr as usize * w + nc as usize;
                    if is_fg(data[np]) && labels[np] == 0 {
                        labels[np] = id;
                        stack.push(np);
                    }
                }
            }
        }
        components.push(ComponentStats {
            pixels,
            centroid: (sum_r / pixels as f64, sum_c / pixels as f64),
            bbox: (min_r, min_c, max_r, max_c),
        });
    }
    Ok(ComponentSet {
        height: h,
        width: w,
        labels,
        components,
    })
}

/// Binarize a probability map: values ≥ `tau` become 1, the rest 0.
pub fn threshold(prob: &Tensor, tau: f64) -> Tensor {
    prob.map(|v| if v >= tau { 1.0 } else { 0.0 })
}

/// Aggregated detection metrics over a dataset. The integer fields are the
/// raw counts the four rates are derived from; keeping them makes the report
/// auditable against an independent pixel count.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Dataset-level intersection over union: Σ intersections / Σ unions.
    pub iou: f64,
    /// Mean of per-sample IoU; empty-vs-empty samples score 1.
    pub niou: f64,
    /// Detected ground-truth objects / all ground-truth objects.
    pub pd: f64,
    /// Pixels of unmatched predicted objects / all pixels.
    pub fa: f64,
    pub intersection: usize,
    pub union: usize,
    pub targets_total: usize,
    pub targets_detected: usize,
    pub false_pixels: usize,
    pub pixels_total: usize,
}

/// Evaluate predictions against ground truth. Both slices hold `[H, W]`
/// binary masks, pairwise shape-matched. `match_distance` is the centroid
/// matching radius; pairs are matched greedily, closest first, one-to-one.
pub fn evaluate(preds: &[Tensor], gts: &[Tensor], match_distance: f64) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "evaluate: {} predictions vs {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("evaluate: empty mask set".into()));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    let mut niou_sum = 0.0;
    let mut targets_total = 0usize;
    let mut targets_detected = 0usize;
    let mut false_pixels = 0usize;
    let mut pixels_total = 0usize;

    for (idx, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        let (h, w) = mask_dims(pred, "evaluate")?;
        if gt.shape() != pred.shape() {
            return Err(Error::InvalidArgument(format!(
                "evaluate: sample {idx} has prediction {:?} vs ground truth {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let mut inter = 0usize;
        let mut uni = 0usize;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let p = is_fg(p);
            let g = is_fg(g);
            if p && g {
                inter += 1;
            }
            if p || g {
                uni += 1;
            }
        }
        intersection += inter;
        union += uni;
        niou_sum += if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
        pixels_total += h * w;

        let gt_comps = connected_components(gt)?;
        let pred_comps = connected_components(pred)?;
        targets_total += gt_comps.components.len();

        // Candidate pairs within the radius, closest first; ties broken by
        // (gt index, pred index) so matching is deterministic.
        let mut candidates = Vec::new();
        for (gi, g) in gt_comps.components.iter().enumerate() {
            for (pi, p) in pred_comps.components.iter().enumerate() {
                let dr = g.centroid.0 - p.centroid.0;
                let dc = g.centroid.1 - p.centroid.1;
                let dist = (dr * dr + dc * dc).sqrt();
                if dist <= match_distance {
                    candidates.push((dist, gi, pi));
                }
            }
        }
        candidates.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut gt_matched = vec![false; gt_comps.components.len()];
        let mut pred_matched = vec![false; pred_comps.components.len()];
        for (_, gi, pi) in candidates {
            if !gt_matched[gi] && !pred_matched[pi] {
                gt_matched[gi] = true;
                pred_matched[pi] = true;
                targets_detected += 1;
            }
        }
        for (pi, comp) in pred_comps.components.iter().enumerate() {
            if !pred_matched[pi] {
                false_pixels += comp.pixels;
            }
        }
    }

    Ok(MetricsReport {
        iou: if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        },
        niou: niou_sum / preds.len() as f64,
        pd: if targets_total == 0 {
            1.0
        } else {
            targets_detected as f64 / targets_total as f64
        },
        fa: false_pixels as f64 / pixels_total as f64,
        intersection,
        union,
        targets_total,
        targets_detected,
        false_pixels,
        pixels_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, fg: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(&[h, w]);
        for &(r, c) in fg {
            t.data_mut()[r * w + c] = 1.0;
        }
        t
    }

    /// Independent per-pixel oracle: double loop, no component logic.
    fn naive_pixel_counts(pred: &Tensor, gt: &Tensor) -> (usize, usize) {
        let (h, w) = (pred.shape()[0], pred.shape()[1]);
        let mut inter = 0;
        let mut union = 0;
        for r in 0..h {
            for c in 0..w {
                let p = pred.at(&[r, c]) > 0.5;
                let g = gt.at(&[r, c]) > 0.5;
                if p && g {
                    inter += 1;
                }
                if p || g {
                    union += 1;
                }
            }
        }
        (inter, union)
    }

    #[test]
    fn worked_example_overlapping_blocks() {
        // GT: 2×2 block at rows 0–1, cols 0–1. Pred: same rows, cols 1–2.
        // Intersection 2, union 6 ⇒ IoU = 1/3; centroids 1 px apart ⇒ the
        // single target is detected (Pd = 1) and nothing is unmatched
        // (Fa = 0).
        let gt = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let pred = mask(4, 4, &[(0, 1), (0, 2), (1, 1), (1, 2)]);
        let report = evaluate(&[pred], &[gt], MATCH_DISTANCE).unwrap();
        assert_eq!(report.intersection, 2);
        assert_eq!(report.union, 6);
        assert!((report.iou - 1.0 / 3.0).abs() < 1e-15);
        assert!((report.niou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(report.targets_total, 1);
        assert_eq!(report.targets_detected, 1);
        assert_eq!(report.pd, 1.0);
        assert_eq!(report.false_pixels, 0);
        assert_eq!(report.fa, 0.0);
    }

    #[test]
    fn worked_example_isolated_false_pixel() {
        // Same masks, plus one predicted pixel at (3,3). Its centroid is
        // √12.5 ≈ 3.54 px from the target centroid — outside the radius —
        // so it stays unmatched: one false pixel out of 16.
        let gt = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let pred = mask(4, 4, &[(0, 1), (0, 2), (1, 1), (1, 2), (3, 3)]);
        let report = evaluate(&[pred], &[gt], MATCH_DISTANCE).unwrap();
        assert_eq!(report.targets_detected, 1);
        assert_eq!(report.false_pixels, 1);
        assert!((report.fa - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn components_label_order_is_row_major() {
        // Three separate components; labels follow first-pixel order.
        let m = mask(5, 5, &[(0, 4), (2, 0), (2, 1), (3, 1), (4, 4)]);
        let set = connected_components(&m).unwrap();
        assert_eq!(set.components.len(), 3);
        assert_eq!(set.labels[4], 1); // (0,4)
        assert_eq!(set.labels[10], 2); // (2,0) block
        assert_eq!(set.labels[11], 2);
        assert_eq!(set.labels[16], 2); // (3,1) diagonal-adjacent → same comp
        assert_eq!(set.labels[24], 3); // (4,4)
        assert_eq!(set.components[1].pixels, 3);
        assert_eq!(set.components[0].centroid, (0.0, 4.0));
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        // 8-connectivity: a diagonal chain is a single object.
        let m = mask(4, 4, &[(0, 0), (1, 1), (2, 2), (3, 3)]);
        let set = connected_components(&m).unwrap();
        assert_eq!(set.components.len(), 1);
        assert_eq!(set.components[0].pixels, 4);
        assert_eq!(set.components[0].centroid, (1.5, 1.5));
        assert_eq!(set.components[0].bbox, (0, 0, 3, 3));
    }

    #[test]
    fn empty_masks_score_perfect() {
        let empty = Tensor::zeros(&[8, 8]);
        let report = evaluate(&[empty.clone()], &[empty], MATCH_DISTANCE).unwrap();
        assert_eq!(report.iou, 1.0);
        assert_eq!(report.niou, 1.0);
        assert_eq!(report.pd, 1.0);
        assert_eq!(report.fa, 0.0);
    }

    #[test]
    fn all_false_prediction_on_empty_gt() {
        let gt = Tensor::zeros(&[4, 4]);
        let pred = mask(4, 4, &[(1, 1), (1, 2)]);
        let report = evaluate(&[pred], &[gt], MATCH_DISTANCE).unwrap();
        assert_eq!(report.iou, 0.0);
        assert_eq!(report.pd, 1.0); // no targets to miss
        assert_eq!(report.false_pixels, 2);
        assert!((report.fa - 2.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn matching_is_one_to_one_and_closest_first() {
        // Two gt objects; one pred object equidistant-ish between them can
        // only match one, so Pd = 1/2, and a second pred matches the other.
        let gt = mask(9, 9, &[(2, 2), (2, 6)]);
        let pred = mask(9, 9, &[(2, 3)]);
        let report = evaluate(&[pred], &[gt], MATCH_DISTANCE).unwrap();
        assert_eq!(report.targets_total, 2);
        assert_eq!(report.targets_detected, 1);
        assert_eq!(report.pd, 0.5);

        // The single pred is 1 px from gt#0 and 3 px from gt#1: it must
        // have matched gt#0. Adding a pred near gt#1 detects both.
        let pred2 = mask(9, 9, &[(2, 3), (2, 7)]);
        let gt2 = mask(9, 9, &[(2, 2), (2, 6)]);
        let report = evaluate(&[pred2], &[gt2], MATCH_DISTANCE).unwrap();
        assert_eq!(report.targets_detected, 2);
        assert_eq!(report.false_pixels, 0);
    }

    #[test]
    fn threshold_is_inclusive_at_tau() {
        let t = Tensor::from_vec(&[1, 3], vec![0.49, 0.5, 0.51]).unwrap();
        let b = threshold(&t, 0.5);
        assert_eq!(b.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let a = Tensor::zeros(&[4, 4]);
        let b = Tensor::zeros(&[4, 5]);
        assert!(evaluate(&[a.clone()], &[b], MATCH_DISTANCE).is_err());
        assert!(evaluate(&[a.clone()], &[], MATCH_DISTANCE).is_err());
        assert!(evaluate(&[], &[], MATCH_DISTANCE).is_err());
    }

    #[test]
    fn pixel_counts_match_naive_oracle_on_random_pairs() {
        let mut rng = SeededRng::new(123);
        for _ in 0..100 {
            let pred = Tensor::from_vec(
                &[16, 16],
                (0..256).map(|_| if rng.uniform() < 0.2 { 1.0 } else { 0.0 }).collect(),
            )
            .unwrap();
            let gt = Tensor::from_vec(
                &[16, 16],
                (0..256).map(|_| if rng.uniform() < 0.2 { 1.0 } else { 0.0 }).collect(),
            )
            .unwrap();
            let (inter, union) = naive_pixel_counts(&pred, &gt);
            let report = evaluate(&[pred], &[gt], MATCH_DISTANCE).unwrap();
            assert_eq!(report.intersection, inter);
            assert_eq!(report.union, union);
            assert_eq!(report.pixels_total, 256);
        }
    }

    proptest! {
        /// Component labeling invariants on random masks: every foreground
        /// pixel is labeled, labels are 1..=n, pixel counts add up, and
        /// centroids lie inside the bounding boxes.
        #[test]
        fn component_invariants(seed in 0u64..500, density in 0.05f64..0.6) {
            let mut rng = SeededRng::new(seed);
            let m = Tensor::from_vec(
                &[12, 12],
                (0..144).map(|_| if rng.uniform() < density { 1.0 } else { 0.0 }).collect(),
            ).unwrap();
            let set = connected_components(&m).unwrap();
            let fg_count = m.data().iter().filter(|v| **v > 0.5).count();
            let labeled = set.labels.iter().filter(|l| **l != 0).count();
            prop_assert_eq!(fg_count, labeled);
            let total: usize = set.components.iter().map(|c| c.pixels).sum();
            prop_assert_eq!(total, fg_count);
            for (i, comp) in set.components.iter().enumerate() {
                let n = set.labels.iter().filter(|l| **l == i as u32 + 1).count();
                prop_assert_eq!(n, comp.pixels);
                let (r0, c0, r1, c1) = comp.bbox;
                prop_assert!(comp.centroid.0 >= r0 as f64 && comp.centroid.0 <= r1 as f64);
                prop_assert!(comp.centroid.1 >= c0 as f64 && comp.centroid.1 <= c1 as f64);
            }
        }
    }
}

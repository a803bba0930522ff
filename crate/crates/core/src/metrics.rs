//! IoU, greedy instance matching and average precision over IoU thresholds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::LabelMap;
use crate::postproc::InstanceMask;

/// Default evaluation thresholds 0.3, 0.4, ..., 0.9.
pub fn default_thresholds() -> Vec<f64> {
    (3..=9).map(|i| i as f64 / 10.0).collect()
}

/// `|a ∩ b| / |a ∪ b|`; `a` must be nonempty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("iou of masks sized {} and {}", a.len(), b.len())));
    }
    if !a.iter().any(|&v| v) {
        return Err(Error::InvalidArgument("iou needs a nonempty first mask".into()));
    }
    Ok(mask_iou(a, b))
}

/// IoU without preconditions; two empty masks give 0.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(prediction index, gt id, iou)`.
    pub pairs: Vec<(usize, u32, f64)>,
}

/// IoU of every prediction against every gt id, indexed `[pred][gt_id - 1]`.
pub fn iou_matrix(preds: &[InstanceMask], gts: &LabelMap) -> Result<Vec<Vec<f64>>> {
    let k = gts.max_id() as usize;
    let mut gt_area = vec![0usize; k + 1];
    for &v in &gts.data {
        gt_area[v as usize] += 1;
    }
    preds
        .iter()
        .map(|p| {
            if p.mask.len() != gts.data.len() {
                return Err(Error::Shape(format!(
                    "prediction mask of {} pixels vs label map of {}",
                    p.mask.len(),
                    gts.data.len()
                )));
            }
            let mut inter = vec![0usize; k + 1];
            let mut area = 0;
            for (&m, &g) in p.mask.iter().zip(&gts.data) {
                if m {
                    area += 1;
                    inter[g as usize] += 1;
                }
            }
            Ok((1..=k)
                .map(|g| {
                    let union = area + gt_area[g] - inter[g];
                    if union == 0 {
                        0.0
                    } else {
                        inter[g] as f64 / union as f64
                    }
                })
                .collect())
        })
        .collect()
}

/// Prediction indices by descending score, ties by ascending cell index.
pub fn score_order(preds: &[InstanceMask]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then(preds[a].cell.cmp(&preds[b].cell))
    });
    order
}

/// Greedy matching on a precomputed IoU matrix.
pub fn match_from_matrix(ious: &[Vec<f64>], order: &[usize], gt_ids: &[u32], t: f64) -> MatchResult {
    let mut taken = vec![false; gt_ids.len()];
    let mut pairs = Vec::new();
    for &p in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, &gid) in gt_ids.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = ious[p][gid as usize - 1];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v > t {
                taken[j] = true;
                pairs.push((p, gt_ids[j], v));
            }
        }
    }
    MatchResult {
        tp: pairs.len(),
        fp: order.len() - pairs.len(),
        fn_: gt_ids.len() - pairs.len(),
        pairs,
    }
}

/// Greedy matching in descending score: each prediction takes the unmatched
/// gt of highest IoU if that IoU exceeds `t`.
pub fn match_instances(preds: &[InstanceMask], gts: &LabelMap, t: f64) -> Result<MatchResult> {
    check_threshold(t)?;
    let ious = iou_matrix(preds, gts)?;
    Ok(match_from_matrix(&ious, &score_order(preds), &gts.ids(), t))
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold {t} outside (0, 1)")));
    }
    Ok(())
}

/// `TP / (TP + FP + FN)`, defined as 1 when there is nothing to match.
pub fn ap_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let d = tp + fp + fn_;
    if d == 0 {
        1.0
    } else {
        tp as f64 / d as f64
    }
}

pub fn ap_at(preds: &[InstanceMask], gts: &LabelMap, t: f64) -> Result<f64> {
    let m = match_instances(preds, gts, t)?;
    Ok(ap_from_counts(m.tp, m.fp, m.fn_))
}

/// AP per threshold plus their mean, from counts pooled over all images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub thresholds: Vec<f64>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    #[serde(rename = "fn")]
    pub fn_: Vec<usize>,
    pub ap: Vec<f64>,
    pub map: f64,
}

impl ApTable {
    pub fn ap_at(&self, t: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-9)
            .map(|i| self.ap[i])
    }

    pub fn is_non_increasing(&self) -> bool {
        self.ap.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn to_csv(&self) -> String {
        let mut head: Vec<String> = self.thresholds.iter().map(|t| format!("{t:.1}")).collect();
        head.push("mAP".into());
        let mut row: Vec<String> = self.ap.iter().map(|a| format!("{a:.4}")).collect();
        row.push(format!("{:.4}", self.map));
        format!(
            "# AP = TP/(TP+FP+FN), counts pooled over the dataset\n{}\n{}\n",
            head.join(","),
            row.join(",")
        )
    }
}

/// Dataset-level AP over `thresholds`: TP/FP/FN are summed across images
/// before the quotient.
pub fn evaluate_dataset(items: &[(Vec<InstanceMask>, LabelMap)], thresholds: &[f64]) -> Result<ApTable> {
    for &t in thresholds {
        check_threshold(t)?;
    }
    let n = thresholds.len();
    let (mut tp, mut fp, mut fn_) = (vec![0; n], vec![0; n], vec![0; n]);
    for (preds, gts) in items {
        let ious = iou_matrix(preds, gts)?;
        let order = score_order(preds);
        let ids = gts.ids();
        for (i, &t) in thresholds.iter().enumerate() {
            let m = match_from_matrix(&ious, &order, &ids, t);
            tp[i] += m.tp;
            fp[i] += m.fp;
            fn_[i] += m.fn_;
        }
    }
    let ap: Vec<f64> = (0..n).map(|i| ap_from_counts(tp[i], fp[i], fn_[i])).collect();
    let map = if n == 0 { 0.0 } else { ap.iter().sum::<f64>() / n as f64 };
    Ok(ApTable {
        thresholds: thresholds.to_vec(),
        tp,
        fp,
        fn_,
        ap,
        map,
    })
}

/// Per-threshold AP and mAP for a single image.
pub fn map_over_range(preds: &[InstanceMask], gts: &LabelMap, thresholds: &[f64]) -> Result<ApTable> {
    evaluate_dataset(&[(preds.to_vec(), gts.clone())], thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    pub(crate) fn pred(mask: Vec<bool>, score: f64, cell: usize) -> InstanceMask {
        InstanceMask::from_mask(mask, score, cell)
    }

    fn labels(w: usize, data: Vec<u32>) -> LabelMap {
        LabelMap {
            height: data.len() / w,
            width: w,
            data,
        }
    }

    #[test]
    fn iou_examples() {
        let a = [true, true, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[false, false, true]).unwrap(), 0.0);
        assert_eq!(iou(&a, &[true, false, false]).unwrap(), 0.5);
        assert!(iou(&a, &[true]).is_err());
        assert!(iou(&[false; 3], &a).is_err());
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gt = labels(4, vec![1, 1, 0, 2, 1, 1, 0, 2]);
        let preds = vec![pred(gt.mask(1), 0.9, 0), pred(gt.mask(2), 0.8, 1)];
        let m = match_instances(&preds, &gt, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
        let m = match_instances(&[], &gt, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 2));
        let t = map_over_range(&preds, &gt, &default_thresholds()).unwrap();
        assert!(t.ap.iter().all(|&a| a == 1.0));
        assert_eq!(t.map, 1.0);
    }

    #[test]
    fn one_pred_over_two_gts() {
        // gts of 2 px each side by side; the pred covers both plus one more: IoU 0.4 each
        let gt = labels(5, vec![1, 1, 2, 2, 0]);
        let p = pred(vec![true; 5], 0.9, 0);
        assert!((mask_iou(&p.mask, &gt.mask(1)) - 0.4).abs() < 1e-12);
        let m = match_instances(&[p], &gt, 0.3).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 1));
    }

    #[test]
    fn ap_formula() {
        assert_eq!(ap_from_counts(2, 1, 1), 0.5);
        assert_eq!(ap_from_counts(0, 0, 0), 1.0);
        assert_eq!(ap_from_counts(0, 3, 2), 0.0);
    }

    #[test]
    fn pure_false_positive_lowers_ap() {
        let gt = labels(4, vec![1, 1, 0, 0, 1, 1, 0, 0]);
        let good = pred(gt.mask(1), 0.9, 0);
        let bad = pred(vec![false, false, false, true, false, false, false, false], 0.5, 1);
        let a = ap_at(&[good.clone()], &gt, 0.5).unwrap();
        let b = ap_at(&[good, bad], &gt, 0.5).unwrap();
        assert!(b < a);
    }

    #[test]
    fn thresholds_must_be_open_unit() {
        let gt = labels(2, vec![1, 0]);
        assert!(match_instances(&[], &gt, 1.0).is_err());
        assert!(match_instances(&[], &gt, 0.0).is_err());
    }

    /// Maximum number of pairs with IoU > t over all one-to-one assignments.
    pub(crate) fn exhaustive_max_tp(ious: &[Vec<f64>], t: f64) -> usize {
        fn go(p: usize, ious: &[Vec<f64>], t: f64, used: &mut Vec<bool>) -> usize {
            if p == ious.len() {
                return 0;
            }
            let mut best = go(p + 1, ious, t, used);
            for g in 0..used.len() {
                if !used[g] && ious[p][g] > t {
                    used[g] = true;
                    best = best.max(1 + go(p + 1, ious, t, used));
                    used[g] = false;
                }
            }
            best
        }
        let k = ious.first().map_or(0, |r| r.len());
        go(0, ious, t, &mut vec![false; k])
    }

    pub(crate) fn random_case<R: Rng>(rng: &mut R) -> (Vec<InstanceMask>, LabelMap) {
        let (h, w) = (12, 12);
        let k = rng.random_range(0..=6);
        let mut gt = LabelMap::new(h, w);
        for id in 1..=k as u32 {
            let (y, x) = (rng.random_range(0..h - 3), rng.random_range(0..w - 3));
            let (bh, bw) = (rng.random_range(2..=4), rng.random_range(2..=4));
            for yy in y..(y + bh).min(h) {
                for xx in x..(x + bw).min(w) {
                    gt.data[yy * w + xx] = id;
                }
            }
        }
        let n = rng.random_range(0..=6);
        let preds = (0..n)
            .map(|c| {
                let (y, x) = (rng.random_range(0..h - 3), rng.random_range(0..w - 3));
                let (bh, bw) = (rng.random_range(2..=4), rng.random_range(2..=4));
                let mut m = vec![false; h * w];
                for yy in y..(y + bh).min(h) {
                    for xx in x..(x + bw).min(w) {
                        m[yy * w + xx] = true;
                    }
                }
                pred(m, rng.random_range(0.0..1.0), c)
            })
            .collect();
        (preds, gt)
    }

    #[test]
    fn greedy_mostly_agrees_with_exhaustive() {
        let mut rng = stream(0, "match");
        let mut agree = 0;
        for _ in 0..1000 {
            let (preds, gt) = random_case(&mut rng);
            let ids = gt.ids();
            let full = iou_matrix(&preds, &gt).unwrap();
            let dense: Vec<Vec<f64>> = full.iter().map(|r| ids.iter().map(|&g| r[g as usize - 1]).collect()).collect();
            let m = match_instances(&preds, &gt, 0.5).unwrap();
            if m.tp == exhaustive_max_tp(&dense, 0.5) {
                agree += 1;
            }
        }
        assert!(agree >= 950, "agreement {agree}/1000");
    }

    #[test]
    fn result_depends_only_on_score_order() {
        let mut rng = stream(1, "shuffle");
        for _ in 0..200 {
            let (mut preds, gt) = random_case(&mut rng);
            let a = map_over_range(&preds, &gt, &default_thresholds()).unwrap();
            preds.shuffle(&mut rng);
            let b = map_over_range(&preds, &gt, &default_thresholds()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn csv_has_table_header() {
        let gt = labels(2, vec![1, 0]);
        let t = map_over_range(&[], &gt, &default_thresholds()).unwrap();
        let csv = t.to_csv();
        assert!(csv.lines().nth(1).unwrap() == "0.3,0.4,0.5,0.6,0.7,0.8,0.9,mAP");
    }

    proptest! {
        #[test]
        fn ap_is_bounded_and_monotone(seed in 0u64..10_000) {
            let (preds, gt) = random_case(&mut stream(seed, "prop"));
            let t = map_over_range(&preds, &gt, &default_thresholds()).unwrap();
            prop_assert!(t.ap.iter().all(|&a| (0.0..=1.0).contains(&a)));
            prop_assert!(t.is_non_increasing());
        }

        #[test]
        fn removing_unmatched_gt_raises_ap(seed in 0u64..10_000) {
            let (preds, mut gt) = random_case(&mut stream(seed, "prop-gt"));
            let m = match_instances(&preds, &gt, 0.5).unwrap();
            let matched: Vec<u32> = m.pairs.iter().map(|p| p.1).collect();
            if let Some(&g) = gt.ids().iter().find(|g| !matched.contains(g)) {
                let before = ap_from_counts(m.tp, m.fp, m.fn_);
                for v in &mut gt.data {
                    if *v == g { *v = 0; }
                }
                let after = ap_at(&preds, &gt, 0.5).unwrap();
                prop_assert!(after > before || m.tp == 0);
            }
        }
    }
}

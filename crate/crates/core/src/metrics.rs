//! Mask IoU, attribute F1, COCO-style mask AP, the joint mask+attribute AP
//! and the gap between them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, Vocabulary};
use crate::error::{Error, Result};

/// Recall sample points of the interpolated PR curve.
const RECALL_POINTS: usize = 101;
/// Reference image area for the size buckets (640×480).
const REFERENCE_AREA: f64 = 640.0 * 480.0;
const SMALL_AREA: f64 = 32.0 * 32.0;
const MEDIUM_AREA: f64 = 96.0 * 96.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub category: usize,
    pub score: f64,
    pub mask: BinaryMask,
    /// Sorted predicted attribute ids.
    pub attributes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub category: usize,
    pub mask: BinaryMask,
    pub attributes: Vec<usize>,
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Data(format!(
            "mask_iou: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Harmonic mean of precision and recall of `pred` against `gt`; 1 when both
/// are empty, 0 when exactly one is.
pub fn attribute_f1(pred: &[usize], gt: &[usize]) -> f64 {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hits = pred.iter().filter(|p| gt.contains(p)).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let (p, r) = (hits / pred.len() as f64, hits / gt.len() as f64);
    2.0 * p * r / (p + r)
}

/// True-positive rule for one AP evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TpRule {
    /// `IoU ≥ t`.
    Iou(f64),
    /// `IoU ≥ iou` and attribute F1 `≥ f1`.
    IouF1 { iou: f64, f1: f64 },
}

/// Threshold grids swept by the AP metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub iou: Vec<f64>,
    pub f1: Vec<f64>,
}

impl ThresholdGrid {
    /// `0.50:0.05:0.95` for both IoU and F1.
    pub fn coco() -> Self {
        let grid: Vec<f64> = (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect();
        Self {
            iou: grid.clone(),
            f1: grid,
        }
    }

    /// One IoU and one F1 threshold.
    pub fn single(iou: f64, f1: f64) -> Self {
        Self {
            iou: vec![iou],
            f1: vec![f1],
        }
    }
}

/// Candidate pairs and ignore flags for one category, computed once and
/// reused across thresholds.
struct Problem {
    /// Detection indices in evaluation order (score descending, stable).
    order: Vec<usize>,
    /// Per detection: `(gt, iou, f1)` for ground truths in the same image with IoU > 0.
    candidates: Vec<Vec<(usize, f64, f64)>>,
    gt_ignored: Vec<bool>,
    det_out_of_range: Vec<bool>,
}

impl Problem {
    fn new(
        dets: &[&Detection],
        gts: &[&GroundTruth],
        area_range: Option<(f64, f64)>,
    ) -> Result<Self> {
        let in_range = |m: &BinaryMask| {
            area_range.is_none_or(|(lo, hi)| (lo..hi).contains(&(m.area() as f64)))
        };
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let mut candidates = Vec::with_capacity(dets.len());
        for d in dets {
            let mut c = Vec::new();
            for (g, gt) in gts.iter().enumerate() {
                if gt.image != d.image {
                    continue;
                }
                let iou = mask_iou(&d.mask, &gt.mask)?;
                if iou > 0.0 {
                    c.push((g, iou, attribute_f1(&d.attributes, &gt.attributes)));
                }
            }
            candidates.push(c);
        }
        Ok(Self {
            order,
            candidates,
            gt_ignored: gts.iter().map(|g| !in_range(&g.mask)).collect(),
            det_out_of_range: dets.iter().map(|d| !in_range(&d.mask)).collect(),
        })
    }

    fn num_gt(&self) -> usize {
        self.gt_ignored.iter().filter(|&&i| !i).count()
    }

    /// Greedy matching in score order. Per ranked detection: `Some(true)`
    /// for TP, `Some(false)` for FP, `None` when ignored; plus the matched
    /// `(gt, f1)` of each TP.
    fn assign(&self, rule: TpRule) -> (Vec<Option<bool>>, Vec<(usize, f64)>) {
        let (t_iou, t_f1) = match rule {
            TpRule::Iou(t) => (t, None),
            TpRule::IouF1 { iou, f1 } => (iou, Some(f1)),
        };
        let mut taken = vec![false; self.gt_ignored.len()];
        let mut flags = Vec::with_capacity(self.order.len());
        let mut matches = Vec::new();
        for &d in &self.order {
            // Prefer non-ignored ground truth, then the highest IoU.
            let mut best: Option<(bool, f64, usize, f64)> = None;
            for &(g, iou, f1) in &self.candidates[d] {
                if taken[g] || iou < t_iou || t_f1.is_some_and(|t| f1 < t) {
                    continue;
                }
                let key = (!self.gt_ignored[g], iou);
                if best.is_none_or(|(bi, biou, _, _)| key > (bi, biou)) {
                    best = Some((key.0, iou, g, f1));
                }
            }
            match best {
                Some((_, _, g, f1)) => {
                    taken[g] = true;
                    if self.gt_ignored[g] {
                        flags.push(None);
                    } else {
                        flags.push(Some(true));
                        matches.push((g, f1));
                    }
                }
                None if self.det_out_of_range[d] => flags.push(None),
                None => flags.push(Some(false)),
            }
        }
        (flags, matches)
    }

    fn ap(&self, rule: TpRule) -> Option<f64> {
        let num_gt = self.num_gt();
        if num_gt == 0 {
            return None;
        }
        let (flags, _) = self.assign(rule);
        Some(interpolated_ap(
            &flags.into_iter().flatten().collect::<Vec<_>>(),
            num_gt,
        ))
    }
}

/// 101-point interpolated AP of a ranked TP/FP list against `num_gt` positives.
pub fn interpolated_ap(ranked_tp: &[bool], num_gt: usize) -> f64 {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    for &is_tp in ranked_tp {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // Precision envelope: non-increasing from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let i = recall.partition_point(|&x| x < r);
        if i < precision.len() {
            sum += precision[i];
        }
    }
    sum / RECALL_POINTS as f64
}

/// AP of `dets` against `gts` at one rule; all entries are treated as one
/// category. `None` when there is no ground truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    rule: TpRule,
) -> Result<Option<f64>> {
    let d: Vec<&Detection> = dets.iter().collect();
    let g: Vec<&GroundTruth> = gts.iter().collect();
    Ok(Problem::new(&d, &g, None)?.ap(rule))
}

/// AP averaged over the IoU grid (and the F1 grid when `joint`).
fn grid_ap(p: &Problem, grid: &ThresholdGrid, joint: bool) -> Option<f64> {
    let mut values = Vec::new();
    for &iou in &grid.iou {
        if joint {
            for &f1 in &grid.f1 {
                values.push(p.ap(TpRule::IouF1 { iou, f1 })?);
            }
        } else {
            values.push(p.ap(TpRule::Iou(iou))?);
        }
    }
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| mean(&v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub name: String,
    pub num_gt: usize,
    /// `None` without ground truth.
    pub ap_iou: Option<f64>,
    /// `None` without ground truth or without attribute annotations.
    pub ap_iou_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_iou: f64,
    pub ap_iou_f1: f64,
    pub gap_g: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Mean attribute F1 over ground truths matched at IoU ≥ 0.5, for
    /// categories with attribute annotations.
    pub mean_matched_f1: f64,
    pub num_matched: usize,
    pub num_gt: usize,
    pub num_detections: usize,
    pub per_category: Vec<CategoryReport>,
}

/// Full report over images of extents `image_sizes[i] = (h, w)`.
///
/// Categories without attribute annotations get no per-category joint AP;
/// in the headline joint AP their attribute condition is vacuous, so both
/// headline numbers average the same categories.
pub fn eval_report(
    dets: &[Detection],
    gts: &[GroundTruth],
    vocab: &Vocabulary,
    image_sizes: &[(usize, usize)],
    grid: &ThresholdGrid,
) -> Result<EvalReport> {
    for d in dets {
        if d.category >= vocab.num_categories() || d.image >= image_sizes.len() {
            return Err(Error::Data(format!(
                "detection refers to category {} image {}",
                d.category, d.image
            )));
        }
    }
    for g in gts {
        if g.category >= vocab.num_categories() || g.image >= image_sizes.len() {
            return Err(Error::Data(format!(
                "ground truth refers to category {} image {}",
                g.category, g.image
            )));
        }
    }
    // Size buckets are scaled by the mean image area.
    let mean_area = mean(
        &image_sizes
            .iter()
            .map(|&(h, w)| (h * w) as f64)
            .collect::<Vec<_>>(),
    );
    let scale = mean_area / REFERENCE_AREA;
    let buckets = [
        (0.0, SMALL_AREA * scale),
        (SMALL_AREA * scale, MEDIUM_AREA * scale),
        (MEDIUM_AREA * scale, f64::INFINITY),
    ];

    let mut per_category = Vec::new();
    let (mut ap_iou, mut ap_joint, mut ap50, mut ap75) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut bucket_aps: [Vec<Option<f64>>; 3] = Default::default();
    let mut f1s = Vec::new();
    for c in 0..vocab.num_categories() {
        let dc: Vec<&Detection> = dets.iter().filter(|d| d.category == c).collect();
        let gc: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == c).collect();
        let p = Problem::new(&dc, &gc, None)?;
        let has_attr = vocab.has_attributes(c);
        let cat_iou = grid_ap(&p, grid, false);
        let cat_joint = if has_attr {
            grid_ap(&p, grid, true)
        } else {
            None
        };
        if let Some(a) = cat_iou {
            ap_iou.push(a);
            ap_joint.push(if has_attr {
                cat_joint.unwrap_or(0.0)
            } else {
                a
            });
            ap50.push(p.ap(TpRule::Iou(0.5)).unwrap_or(0.0));
            ap75.push(p.ap(TpRule::Iou(0.75)).unwrap_or(0.0));
            if has_attr {
                f1s.extend(p.assign(TpRule::Iou(0.5)).1.into_iter().map(|(_, f1)| f1));
            }
        }
        for (k, &range) in buckets.iter().enumerate() {
            let pb = Problem::new(&dc, &gc, Some(range))?;
            bucket_aps[k].push(grid_ap(&pb, grid, false));
        }
        per_category.push(CategoryReport {
            name: vocab.categories[c].clone(),
            num_gt: gc.len(),
            ap_iou: cat_iou,
            ap_iou_f1: cat_joint,
        });
    }
    let (ap_iou, ap_iou_f1) = (mean(&ap_iou), mean(&ap_joint));
    // The two grids average in different orders; drop rounding residue.
    let gap = ap_iou - ap_iou_f1;
    Ok(EvalReport {
        ap_iou,
        ap_iou_f1,
        gap_g: if gap.abs() < 1e-12 { 0.0 } else { gap },
        ap50: mean(&ap50),
        ap75: mean(&ap75),
        ap_small: mean_opt(&bucket_aps[0]),
        ap_medium: mean_opt(&bucket_aps[1]),
        ap_large: mean_opt(&bucket_aps[2]),
        mean_matched_f1: mean(&f1s),
        num_matched: f1s.len(),
        num_gt: gts.len(),
        num_detections: dets.len(),
        per_category,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    /// Human-readable table (percentages).
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>8} {:>10} {:>7}",
            "", "AP_IoU", "AP_IoU+F1", "G"
        );
        let _ = writeln!(
            s,
            "{:<14} {:>8.2} {:>10.2} {:>7.2}",
            "all",
            100.0 * self.ap_iou,
            100.0 * self.ap_iou_f1,
            100.0 * self.gap_g
        );
        for c in &self.per_category {
            let _ = writeln!(
                s,
                "{:<14} {:>8} {:>10} {:>7}",
                c.name,
                fmt_opt(c.ap_iou),
                fmt_opt(c.ap_iou_f1),
                ""
            );
        }
        let _ = writeln!(
            s,
            "AP50 {:.2}  AP75 {:.2}  APs {}  APm {}  APl {}",
            100.0 * self.ap50,
            100.0 * self.ap75,
            fmt_opt(self.ap_small),
            fmt_opt(self.ap_medium),
            fmt_opt(self.ap_large)
        );
        let _ = writeln!(
            s,
            "matched attribute F1 {:.4} over {} of {} instances ({} detections)",
            self.mean_matched_f1, self.num_matched, self.num_gt, self.num_detections
        );
        s
    }

    /// One `key=value` line per metric; absent values are `nan`.
    pub fn to_key_values(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        for (k, v) in [
            ("ap_iou", self.ap_iou),
            ("ap_iou_f1", self.ap_iou_f1),
            ("gap_g", self.gap_g),
            ("ap50", self.ap50),
            ("ap75", self.ap75),
            ("mean_matched_f1", self.mean_matched_f1),
        ] {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        let _ = writeln!(s, "ap_small={}", opt(self.ap_small));
        let _ = writeln!(s, "ap_medium={}", opt(self.ap_medium));
        let _ = writeln!(s, "ap_large={}", opt(self.ap_large));
        let _ = writeln!(s, "num_matched={}", self.num_matched);
        let _ = writeln!(s, "num_gt={}", self.num_gt);
        let _ = writeln!(s, "num_detections={}", self.num_detections);
        for c in &self.per_category {
            let _ = writeln!(s, "ap_iou.{}={}", c.name, opt(c.ap_iou));
            let _ = writeln!(s, "ap_iou_f1.{}={}", c.name, opt(c.ap_iou_f1));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(y0: usize, x0: usize, size: usize, n: usize) -> BinaryMask {
        let mut m = BinaryMask::new(n, n);
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                m.set(y, x, true);
            }
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = block(0, 0, 2, 3);
        let b = block(1, 1, 2, 3);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(
            mask_iou(&BinaryMask::new(3, 3), &BinaryMask::new(3, 3)).unwrap(),
            0.0
        );
        assert!(mask_iou(&a, &BinaryMask::new(2, 3)).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(attribute_f1(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(attribute_f1(&[1], &[2]), 0.0);
        assert_eq!(attribute_f1(&[0, 1], &[1, 2]), 0.5);
        assert_eq!(attribute_f1(&[], &[]), 1.0);
        assert_eq!(attribute_f1(&[], &[3]), 0.0);
    }

    #[test]
    fn fp_above_tp_gives_half() {
        let gt = block(0, 0, 2, 4);
        let gts = vec![GroundTruth {
            image: 0,
            category: 0,
            mask: gt.clone(),
            attributes: vec![],
        }];
        let dets = vec![
            Detection {
                image: 0,
                category: 0,
                score: 0.9,
                mask: block(2, 2, 2, 4),
                attributes: vec![],
            },
            Detection {
                image: 0,
                category: 0,
                score: 0.8,
                mask: gt,
                attributes: vec![],
            },
        ];
        let ap = average_precision(&dets, &gts, TpRule::Iou(0.5))
            .unwrap()
            .unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
        assert_eq!(
            average_precision(&[], &gts, TpRule::Iou(0.5)).unwrap(),
            Some(0.0)
        );
        assert_eq!(
            average_precision(&dets, &[], TpRule::Iou(0.5)).unwrap(),
            None
        );
    }
}

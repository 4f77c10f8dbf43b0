//! Independent oracles and random fixtures shared by the integration tests.
#![allow(dead_code)]

use qseg_core::data::BinaryMask;
use qseg_core::metrics::{Detection, GroundTruth, TpRule};
use qseg_core::rng::Rng;
use qseg_core::Tensor;

/// Minimum assignment cost by enumerating every injective mapping of the
/// smaller side into the larger.
pub fn brute_force_assignment(cost: &Tensor) -> f64 {
    let (n, m) = (cost.shape()[0], cost.shape()[1]);
    let at = |r: usize, c: usize| {
        if n <= m {
            cost.data()[r * m + c]
        } else {
            cost.data()[c * m + r]
        }
    };
    let (rows, cols) = (n.min(m), n.max(m));
    let mut best = f64::INFINITY;
    let mut stack: Vec<(usize, Vec<bool>, f64)> = vec![(0, vec![false; cols], 0.0)];
    while let Some((r, used, acc)) = stack.pop() {
        if r == rows {
            best = best.min(acc);
            continue;
        }
        for c in 0..cols {
            if !used[c] {
                let mut u = used.clone();
                u[c] = true;
                stack.push((r + 1, u, acc + at(r, c)));
            }
        }
    }
    best
}

pub fn random_cost(rng: &mut Rng, max: usize) -> Tensor {
    let (n, m) = (rng.int(1, max), rng.int(1, max));
    Tensor::new(
        vec![n, m],
        (0..n * m).map(|_| rng.uniform(-3.0, 10.0)).collect(),
    )
    .unwrap()
}

fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(*x && *y);
        union += usize::from(*x || *y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn f1(pred: &[usize], gt: &[usize]) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let tp = pred.iter().filter(|p| gt.contains(p)).count() as f64;
    let (fp, fne) = (pred.len() as f64 - tp, gt.len() as f64 - tp);
    // F1 = 2TP / (2TP + FP + FN).
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fne)
    }
}

/// AP from every (rank, precision, recall) point: at each of the 101 recall
/// levels take the best precision among points reaching it.
pub fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], rule: TpRule) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let (t_iou, t_f1) = match rule {
        TpRule::Iou(t) => (t, f64::NEG_INFINITY),
        TpRule::IouF1 { iou, f1 } => (iou, f1),
    };
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (rank, &d) in order.iter().enumerate() {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.image != det.image {
                continue;
            }
            let v = iou(&det.mask, &gt.mask);
            if v > 0.0
                && v >= t_iou
                && f1(&det.attributes, &gt.attributes) >= t_f1
                && best.is_none_or(|(_, b)| v > b)
            {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    let total: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            points
                .iter()
                .filter(|p| p.0 >= r)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / 101.0)
}

fn random_box(rng: &mut Rng, n: usize) -> BinaryMask {
    let mut m = BinaryMask::new(n, n);
    let (y0, x0) = (rng.int(0, n - 2), rng.int(0, n - 2));
    let (y1, x1) = (rng.int(y0 + 1, n), rng.int(x0 + 1, n));
    for y in y0..y1 {
        for x in x0..x1 {
            m.set(y, x, true);
        }
    }
    m
}

fn random_attrs(rng: &mut Rng, a: usize) -> Vec<usize> {
    (0..a).filter(|_| rng.bernoulli(0.4)).collect()
}

/// A small random scene: up to 2 images of `RASTER`², up to 4 ground truths
/// and up to `max_dets` detections, many of them jittered copies of a GT.
pub const RASTER: usize = 8;

pub fn micro_dataset(
    seed: u64,
    max_dets: usize,
    categories: usize,
) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut rng = Rng::seed(seed);
    let images = rng.int(1, 2);
    let gts: Vec<GroundTruth> = (0..rng.int(0, 4))
        .map(|_| GroundTruth {
            image: rng.int(0, images - 1),
            category: rng.int(0, categories - 1),
            mask: random_box(&mut rng, RASTER),
            attributes: random_attrs(&mut rng, 4),
        })
        .collect();
    let dets = (0..rng.int(0, max_dets))
        .map(|_| {
            if !gts.is_empty() && rng.bernoulli(0.7) {
                let g = &gts[rng.int(0, gts.len() - 1)];
                let mut mask = g.mask.clone();
                for _ in 0..rng.int(0, 6) {
                    let (y, x) = (rng.int(0, RASTER - 1), rng.int(0, RASTER - 1));
                    let v = mask.get(y, x);
                    mask.set(y, x, !v);
                }
                let attributes = if rng.bernoulli(0.5) {
                    g.attributes.clone()
                } else {
                    random_attrs(&mut rng, 4)
                };
                Detection {
                    image: g.image,
                    category: if rng.bernoulli(0.85) {
                        g.category
                    } else {
                        rng.int(0, categories - 1)
                    },
                    score: rng.unit(),
                    mask,
                    attributes,
                }
            } else {
                Detection {
                    image: rng.int(0, images - 1),
                    category: rng.int(0, categories - 1),
                    score: rng.unit(),
                    mask: random_box(&mut rng, RASTER),
                    attributes: random_attrs(&mut rng, 4),
                }
            }
        })
        .collect();
    (dets, gts)
}

pub fn random_mask(seed: u64, h: usize, w: usize) -> BinaryMask {
    let mut rng = Rng::seed(seed);
    let p = rng.unit();
    let mut m = BinaryMask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            m.set(y, x, rng.bernoulli(p));
        }
    }
    m
}

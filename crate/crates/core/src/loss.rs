//! Bipartite matching between queries and ground truth, and the staged
//! training loss (sigmoid focal + dice on masks, sigmoid focal on classes,
//! binary cross-entropy on attributes).

use crate::config::LossConfig;
use crate::decoder::StagePrediction;
use crate::error::{Error, Result, TensorError};
use crate::tensor::{Graph, Tensor, Var, LOGIT_CLAMP};

/// Ground truth of one image, rasterized at the mask-logit resolution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Target {
    /// Binary `[H/4, W/4]` masks.
    pub masks: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub attributes: Vec<Vec<usize>>,
}

impl Target {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One-to-one assignment of queries to ground-truth instances.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchAssignment {
    /// `(query, gt)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchAssignment {
    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        let m = cost.shape()[1];
        self.pairs
            .iter()
            .map(|&(q, g)| cost.data()[q * m + g])
            .sum()
    }

    /// GT index matched to each query.
    pub fn gt_of_query(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut v = vec![None; num_queries];
        for &(q, g) in &self.pairs {
            v[q] = Some(g);
        }
        v
    }
}

/// Per-stage loss terms and their weighted sum.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: Vec<f64>,
    pub l_mask: Vec<f64>,
    pub l_atr: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        let add = |dst: &mut Vec<f64>, src: &[f64]| {
            dst.resize(src.len().max(dst.len()), 0.0);
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += weight * s);
        };
        add(&mut self.l_cls, &other.l_cls);
        add(&mut self.l_mask, &other.l_mask);
        add(&mut self.l_atr, &other.l_atr);
        self.total += weight * other.total;
    }

    /// First non-finite term, as `(stage, term)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        for j in 0..self.l_cls.len() {
            for (name, v) in [
                ("cls", self.l_cls[j]),
                ("mask", self.l_mask[j]),
                ("atr", self.l_atr[j]),
            ] {
                if !v.is_finite() {
                    return Some((j, name));
                }
            }
        }
        None
    }
}

/// Differentiable loss with its breakdown and the assignments it used.
#[derive(Clone, Debug)]
pub struct StagedLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub assignments: Vec<MatchAssignment>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Per-element sigmoid focal terms `(positive, negative)` for one logit.
fn focal_terms(logit: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let x = logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let p = sigmoid(x);
    let pos = -alpha * (1.0 - p).powf(gamma) * log_sigmoid(x);
    let neg = -(1.0 - alpha) * p.powf(gamma) * log_sigmoid(-x);
    (pos, neg)
}

/// Mean over elements of `-α_t (1 - p_t)^γ ln p_t` with `p = sigmoid(logits)`.
pub fn focal_loss(
    g: &mut Graph,
    logits: Var,
    targets: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<Var, TensorError> {
    if g.shape(logits) != targets.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "focal_loss",
            lhs: g.shape(logits).to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let x = g.clamp_logits(logits);
    let p = g.sigmoid(x);
    let pos_log = g.log_sigmoid(x);
    let neg_x = g.neg(x);
    let neg_log = g.log_sigmoid(neg_x);

    let y = targets;
    let y_c = g.constant(y.clone());
    let not_y = g.constant(y.map(|v| 1.0 - v));
    let sign = g.constant(y.map(|v| 2.0 * v - 1.0));
    let alpha_t = g.constant(y.map(|v| alpha * v + (1.0 - alpha) * (1.0 - v)));

    // ln p_t = y ln p + (1 - y) ln(1 - p)
    let a = g.mul(y_c, pos_log)?;
    let b = g.mul(not_y, neg_log)?;
    let log_pt = g.add(a, b)?;
    // 1 - p_t = y - (2y - 1) p
    let sp = g.mul(sign, p)?;
    let one_minus_pt = g.sub(y_c, sp)?;
    let modulator = g.pow(one_minus_pt, gamma);
    let w = g.mul(alpha_t, modulator)?;
    let l = g.mul(w, log_pt)?;
    let m = g.mean(l);
    Ok(g.neg(m))
}

/// Mean over rows of `1 - (2 Σ p g + eps) / (Σ p + Σ g + eps)`; inputs are
/// `[K, ...]` with each row one instance, or a single `[H, W]` mask.
pub fn dice_loss(
    g: &mut Graph,
    mask_logits: Var,
    targets: &Tensor,
    eps: f64,
) -> Result<Var, TensorError> {
    if g.shape(mask_logits) != targets.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "dice_loss",
            lhs: g.shape(mask_logits).to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let shape = targets.shape();
    let rows = if shape.len() == 2 { 1 } else { shape[0] };
    let per_row = targets.len() / rows;
    let x = g.clamp_logits(mask_logits);
    let p = g.sigmoid(x);
    let p = g.reshape(p, &[rows, per_row])?;
    let t = g.constant(targets.reshape(&[rows, per_row])?);
    let pt = g.mul(p, t)?;
    let inter = g.sum_axis(pt, 1)?;
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, eps);
    let sp = g.sum_axis(p, 1)?;
    let st = g.sum_axis(t, 1)?;
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, eps);
    let ratio = g.div(num, den)?;
    let l = g.rsub_scalar(1.0, ratio);
    Ok(g.mean(l))
}

/// Mean binary cross-entropy over all elements.
pub fn attribute_bce(
    g: &mut Graph,
    attr_logits: Var,
    targets: &Tensor,
) -> Result<Var, TensorError> {
    if g.shape(attr_logits) != targets.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "attribute_bce",
            lhs: g.shape(attr_logits).to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let x = g.clamp_logits(attr_logits);
    let pos_log = g.log_sigmoid(x);
    let neg_x = g.neg(x);
    let neg_log = g.log_sigmoid(neg_x);
    let y = g.constant(targets.clone());
    let not_y = g.constant(targets.map(|v| 1.0 - v));
    let a = g.mul(y, pos_log)?;
    let b = g.mul(not_y, neg_log)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll);
    Ok(g.neg(m))
}

/// Matching cost `[N, G]`:
/// `λ_cls · (focal⁺ − focal⁻)[label] + λ_mask · (mean pixel focal + dice)`.
///
/// The class term is the change in the classification loss when a query's
/// target switches from background to the GT label.
pub fn match_cost(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    target: &Target,
    cfg: &LossConfig,
) -> Result<Tensor, TensorError> {
    let n = class_logits.shape()[0];
    let c = class_logits.shape()[1];
    let gcount = target.len();
    let hw = mask_logits.len() / n;
    let (alpha, gamma) = (cfg.focal_alpha, cfg.focal_gamma);
    for m in &target.masks {
        if m.len() != hw || m.shape() != &mask_logits.shape()[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "match_cost",
                lhs: mask_logits.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
    }
    if let Some(&bad) = target.labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::InvalidArgument {
            op: "match_cost",
            reason: format!("label {bad} out of range for {c} classes"),
        });
    }
    if gcount == 0 {
        return Err(TensorError::InvalidArgument {
            op: "match_cost",
            reason: "no ground-truth instances".into(),
        });
    }
    let mut cost = Tensor::zeros(&[n, gcount]);
    for q in 0..n {
        let logits = mask_logits.row(q);
        let mut neg_sum = 0.0;
        let mut fdiff = vec![0.0; hw];
        let mut probs = vec![0.0; hw];
        for (i, &l) in logits.iter().enumerate() {
            let (pos, neg) = focal_terms(l, alpha, gamma);
            neg_sum += neg;
            fdiff[i] = pos - neg;
            probs[i] = sigmoid(l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
        }
        let p_sum: f64 = probs.iter().sum();
        for (gi, gm) in target.masks.iter().enumerate() {
            let gd = gm.data();
            let mut focal = neg_sum;
            let mut inter = 0.0;
            let mut g_sum = 0.0;
            for i in 0..hw {
                focal += gd[i] * fdiff[i];
                inter += gd[i] * probs[i];
                g_sum += gd[i];
            }
            let focal = focal / hw as f64;
            let dice = 1.0 - (2.0 * inter + cfg.dice_eps) / (p_sum + g_sum + cfg.dice_eps);
            let (pos, neg) =
                focal_terms(class_logits.data()[q * c + target.labels[gi]], alpha, gamma);
            cost.data_mut()[q * gcount + gi] =
                cfg.lambda_cls * (pos - neg) + cfg.lambda_mask * (focal + dice);
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment of `min(n, m)` rows to columns (Kuhn–Munkres with
/// potentials, O(n²m)).
pub fn hungarian(cost: &Tensor) -> MatchAssignment {
    assert_eq!(cost.rank(), 2, "cost matrix must be 2-D");
    let (n, m) = (cost.shape()[0], cost.shape()[1]);
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| {
        if transposed {
            cost.data()[j * m + i]
        } else {
            cost.data()[i * m + j]
        }
    };

    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (r, c) = (owner[j] - 1, j - 1);
            if transposed {
                (c, r)
            } else {
                (r, c)
            }
        })
        .collect();
    pairs.sort_unstable();
    let mut matched = vec![false; n];
    pairs.iter().for_each(|&(q, _)| matched[q] = true);
    MatchAssignment {
        pairs,
        unmatched_queries: (0..n).filter(|&q| !matched[q]).collect(),
    }
}

/// Matches every stage independently against `target`.
pub fn match_stages(
    g: &Graph,
    stages: &[StagePrediction],
    target: &Target,
    cfg: &LossConfig,
) -> Result<Vec<MatchAssignment>> {
    stages
        .iter()
        .map(|st| {
            let n = g.shape(st.class_logits)[0];
            if target.is_empty() {
                return Ok(MatchAssignment {
                    pairs: Vec::new(),
                    unmatched_queries: (0..n).collect(),
                });
            }
            let cost = match_cost(
                g.value(st.class_logits),
                g.value(st.mask_logits),
                target,
                cfg,
            )?;
            Ok(hungarian(&cost))
        })
        .collect()
}

/// `Σ_j λ_cls·L_cls + λ_mask·L_mask + λ_atr·L_atr`, re-matching every stage.
pub fn total_loss(
    g: &mut Graph,
    stages: &[StagePrediction],
    target: &Target,
    cfg: &LossConfig,
) -> Result<StagedLoss> {
    let assignments = match_stages(g, stages, target, cfg)?;
    total_loss_with(g, stages, target, cfg, assignments)
}

/// As [`total_loss`] with the assignments fixed by the caller.
pub fn total_loss_with(
    g: &mut Graph,
    stages: &[StagePrediction],
    target: &Target,
    cfg: &LossConfig,
    assignments: Vec<MatchAssignment>,
) -> Result<StagedLoss> {
    if stages.is_empty() {
        return Err(Error::Config("total_loss needs at least one stage".into()));
    }
    let mut breakdown = LossBreakdown::default();
    let mut terms = Vec::new();
    for (st, assign) in stages.iter().zip(&assignments) {
        let cls_shape = g.shape(st.class_logits).to_vec();
        let (n, c) = (cls_shape[0], cls_shape[1]);
        let mut cls_target = Tensor::zeros(&[n, c]);
        for &(q, gi) in &assign.pairs {
            cls_target.data_mut()[q * c + target.labels[gi]] = 1.0;
        }
        let l_cls = focal_loss(
            g,
            st.class_logits,
            &cls_target,
            cfg.focal_alpha,
            cfg.focal_gamma,
        )?;

        let (l_mask, l_atr) = if assign.pairs.is_empty() {
            (None, None)
        } else {
            let queries: Vec<usize> = assign.pairs.iter().map(|p| p.0).collect();
            let ms = g.shape(st.mask_logits).to_vec();
            let hw = ms[1] * ms[2];
            let flat = g.reshape(st.mask_logits, &[n, hw])?;
            let picked = g.select_rows(flat, &queries)?;
            let mut mask_t = Vec::with_capacity(queries.len() * hw);
            for &(_, gi) in &assign.pairs {
                mask_t.extend_from_slice(target.masks[gi].data());
            }
            let mask_t = Tensor::new(vec![queries.len(), hw], mask_t)?;
            let focal = focal_loss(g, picked, &mask_t, cfg.focal_alpha, cfg.focal_gamma)?;
            let dice = dice_loss(g, picked, &mask_t, cfg.dice_eps)?;
            let l_mask = g.add(focal, dice)?;

            let a = g.shape(st.attr_logits)[1];
            let attrs = g.select_rows(st.attr_logits, &queries)?;
            let mut attr_t = Tensor::zeros(&[queries.len(), a]);
            for (k, &(_, gi)) in assign.pairs.iter().enumerate() {
                for &id in &target.attributes[gi] {
                    attr_t.data_mut()[k * a + id] = 1.0;
                }
            }
            let l_atr = attribute_bce(g, attrs, &attr_t)?;
            (Some(l_mask), Some(l_atr))
        };

        let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        breakdown.l_cls.push(g.value(l_cls).item());
        breakdown.l_mask.push(value(g, l_mask));
        breakdown.l_atr.push(value(g, l_atr));

        terms.push(g.scale(l_cls, cfg.lambda_cls));
        if let Some(v) = l_mask {
            terms.push(g.scale(v, cfg.lambda_mask));
        }
        if let Some(v) = l_atr {
            terms.push(g.scale(v, cfg.lambda_atr));
        }
    }
    let cat = g.concat(&terms, 0)?;
    let total = g.sum(cat);
    breakdown.total = g.value(total).item();
    Ok(StagedLoss {
        total,
        breakdown,
        assignments,
    })
}

/// Averages per-image staged losses into one differentiable scalar.
pub fn batch_mean(
    g: &mut Graph,
    losses: &[StagedLoss],
) -> Result<(Var, LossBreakdown), TensorError> {
    let totals: Vec<Var> = losses.iter().map(|l| l.total).collect();
    let cat = g.concat(&totals, 0)?;
    let mean = g.mean(cat);
    let mut breakdown = LossBreakdown::default();
    let w = 1.0 / losses.len() as f64;
    for l in losses {
        breakdown.accumulate(&l.breakdown, w);
    }
    Ok((mean, breakdown))
}

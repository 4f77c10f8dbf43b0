//! Registry of finite-difference gradient checks over every differentiable
//! primitive, the model's composite blocks and the end-to-end loss.

use crate::config::{LossConfig, ModelConfig};
use crate::decoder::{
    dynamic_conv_update, group_features, multi_layer_render, query_self_update, DynamicConvParams,
    Gate, QueryBlock, SelfAttention,
};
use crate::error::{Error, Result, TensorError};
use crate::loss::{attribute_bce, dice_loss, focal_loss, match_stages, total_loss_with, Target};
use crate::model::Model;
use crate::nn::{Builder, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{
    grad_check_at, Conv2dSpec, GradCheckReport, Graph, Tensor, Var, REL_ERROR_FLOOR,
};

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Entries sampled per checked tensor.
const SAMPLES: usize = 24;

pub type CheckFn = fn(&mut Rng) -> Result<GradCheckReport>;

/// A named gradient check.
#[derive(Clone, Copy)]
pub struct CheckCase {
    pub name: &'static str,
    pub run: CheckFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
    /// Set when the case could not run at all.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let status = if r.passed { "PASS" } else { "FAIL" };
            match &r.error {
                Some(e) => out.push_str(&format!("{status} {:<28} error: {e}\n", r.name)),
                None => out.push_str(&format!(
                    "{status} {:<28} max_rel_error={:.3e} checked={}\n",
                    r.name, r.max_rel_error, r.checked
                )),
            }
        }
        let failed = self.failures().len();
        out.push_str(&format!(
            "{} checks, {} failed\n",
            self.results.len(),
            failed
        ));
        out
    }
}

/// Runs `cases`, each with its own stream derived from `seed`.
pub fn run_suite(seed: u64, cases: &[CheckCase]) -> SuiteReport {
    let root = Rng::seed(seed);
    let results = cases
        .iter()
        .enumerate()
        .map(|(i, case)| match (case.run)(&mut root.split(i as u64)) {
            Ok(rep) => CaseResult {
                name: case.name,
                max_rel_error: rep.max_rel_error,
                checked: rep.checked,
                passed: rep.max_rel_error < TOLERANCE,
                error: None,
            },
            Err(e) => CaseResult {
                name: case.name,
                max_rel_error: f64::NAN,
                checked: 0,
                passed: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    SuiteReport { results }
}

/// Values in `±[0.1, 1]`, away from the kinks of relu and clamp.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = rng.uniform_tensor(shape, 0.1, 1.0);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.bernoulli(0.5) {
            *v = -*v;
        }
    });
    t
}

fn sample_indices(rng: &mut Rng, len: usize) -> Vec<usize> {
    if len <= SAMPLES {
        return (0..len).collect();
    }
    let mut all: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut all);
    all.truncate(SAMPLES);
    all.sort_unstable();
    all
}

fn check<F>(rng: &mut Rng, x: &Tensor, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let idx = sample_indices(rng, x.len());
    Ok(grad_check_at(f, x, STEP, &idx)?)
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let w = Rng::seed(seed).uniform_tensor(g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

macro_rules! unary_case {
    ($name:literal, $shape:expr, |$g:ident, $x:ident| $body:expr) => {
        CheckCase {
            name: $name,
            run: |rng| {
                let x = away_from_zero(rng, &$shape);
                check(rng, &x, |$g, $x| {
                    let y = $body?;
                    weighted_sum($g, y, 7)
                })
            },
        }
    };
}

fn ok(v: Var) -> Result<Var, TensorError> {
    Ok(v)
}

/// Second operand for binary primitives, held fixed.
fn other(g: &mut Graph, shape: &[usize], positive: bool) -> Var {
    let mut rng = Rng::seed(11);
    let t = if positive {
        rng.uniform_tensor(shape, 0.5, 1.5)
    } else {
        away_from_zero(&mut rng, shape)
    };
    g.constant(t)
}

/// Every registered check, primitives first.
pub fn registry() -> Vec<CheckCase> {
    vec![
        unary_case!("add", [2, 3], |g, x| {
            let b = other(g, &[3], false);
            g.add(x, b)
        }),
        unary_case!("sub", [2, 3], |g, x| {
            let b = other(g, &[2, 1], false);
            g.sub(b, x)
        }),
        unary_case!("mul", [2, 3], |g, x| {
            let b = other(g, &[2, 3], false);
            let y = g.mul(x, b)?;
            g.mul(y, x)
        }),
        unary_case!("div", [2, 3], |g, x| {
            let b = other(g, &[2, 3], true);
            let y = g.div(x, b)?;
            g.div(y, b)
        }),
        unary_case!("scale", [4], |g, x| ok(g.scale(x, -1.7))),
        unary_case!("neg", [4], |g, x| ok(g.neg(x))),
        unary_case!("add_scalar", [4], |g, x| {
            let y = g.add_scalar(x, 0.3);
            g.mul(y, y)
        }),
        unary_case!("rsub_scalar", [4], |g, x| {
            let y = g.rsub_scalar(0.3, x);
            g.mul(y, y)
        }),
        unary_case!("relu", [3, 4], |g, x| ok(g.relu(x))),
        unary_case!("sigmoid", [3, 4], |g, x| ok(g.sigmoid(x))),
        unary_case!("log_sigmoid", [3, 4], |g, x| ok(g.log_sigmoid(x))),
        unary_case!("exp", [3, 4], |g, x| ok(g.exp(x))),
        unary_case!("log", [3, 4], |g, x| {
            let y = g.mul(x, x)?;
            Ok(g.log(y))
        }),
        unary_case!("clamp", [3, 4], |g, x| ok(g.clamp(x, -0.5, 0.5))),
        unary_case!("pow", [3, 4], |g, x| {
            let y = g.mul(x, x)?;
            Ok(g.pow(y, 1.5))
        }),
        unary_case!("matmul", [3, 4], |g, x| {
            let b = other(g, &[4, 2], false);
            let y = g.matmul(x, b)?;
            let xt = g.transpose(x)?;
            g.matmul(xt, y)
        }),
        unary_case!("transpose", [2, 3], |g, x| g.transpose(x)),
        unary_case!("reshape", [2, 3], |g, x| g.reshape(x, &[3, 2])),
        unary_case!("permute", [2, 3, 4], |g, x| g.permute(x, &[2, 0, 1])),
        unary_case!("broadcast_to", [3, 1], |g, x| g.broadcast_to(x, &[2, 3, 4])),
        unary_case!("sum", [2, 3], |g, x| {
            let s = g.sum(x);
            g.mul(s, s)
        }),
        unary_case!("mean", [2, 3], |g, x| {
            let s = g.mean(x);
            g.mul(s, s)
        }),
        unary_case!("sum_axis", [2, 3, 4], |g, x| g.sum_axis(x, 1)),
        unary_case!("softmax", [3, 5], |g, x| g.softmax(x, 1)),
        unary_case!("concat", [2, 3], |g, x| {
            let b = other(g, &[2, 2], false);
            g.concat(&[x, b, x], 1)
        }),
        unary_case!("narrow", [4, 5], |g, x| g.narrow(x, 1, 1, 3)),
        unary_case!("select_rows", [4, 3], |g, x| g.select_rows(x, &[2, 0, 2])),
        unary_case!("layer_norm", [3, 6], |g, x| {
            let gamma = other(g, &[6], true);
            let beta = other(g, &[6], false);
            g.layer_norm(x, gamma, beta, 1e-5)
        }),
        CheckCase {
            name: "layer_norm_affine",
            run: |rng| {
                let x = away_from_zero(rng, &[6]);
                let input = away_from_zero(&mut Rng::seed(5), &[3, 6]);
                check(rng, &x, |g, gamma| {
                    let xi = g.constant(input.clone());
                    let beta = g.scale(gamma, 0.5);
                    let y = g.layer_norm(xi, gamma, beta, 1e-5)?;
                    weighted_sum(g, y, 7)
                })
            },
        },
        unary_case!("conv2d", [2, 6, 6], |g, x| {
            let w = other(g, &[3, 2, 3, 3], false);
            let b = other(g, &[3], false);
            g.conv2d(x, w, Some(b), Conv2dSpec::same(3, 2))
        }),
        CheckCase {
            name: "conv2d_weight",
            run: |rng| {
                let w = away_from_zero(rng, &[3, 2, 3, 3]);
                let input = away_from_zero(&mut Rng::seed(5), &[2, 5, 5]);
                check(rng, &w, |g, w| {
                    let xi = g.constant(input.clone());
                    let y = g.conv2d(xi, w, None, Conv2dSpec::symmetric(1, 1))?;
                    weighted_sum(g, y, 7)
                })
            },
        },
        unary_case!("resize", [2, 3, 4], |g, x| g.resize(x, 7, 5)),
        unary_case!("linear", [3, 4], |g, x| {
            let w = other(g, &[4, 5], false);
            let b = other(g, &[5], false);
            g.linear(x, w, b)
        }),
        CheckCase {
            name: "focal_loss",
            run: |rng| {
                let x = rng.uniform_tensor(&[4, 5], -3.0, 3.0);
                let y = binary_target(&mut Rng::seed(3), &[4, 5]);
                check(rng, &x, |g, x| focal_loss(g, x, &y, 0.25, 2.0))
            },
        },
        CheckCase {
            name: "dice_loss",
            run: |rng| {
                let x = rng.uniform_tensor(&[3, 4, 4], -3.0, 3.0);
                let y = binary_target(&mut Rng::seed(3), &[3, 4, 4]);
                check(rng, &x, |g, x| dice_loss(g, x, &y, 1.0))
            },
        },
        CheckCase {
            name: "attribute_bce",
            run: |rng| {
                let x = rng.uniform_tensor(&[3, 6], -3.0, 3.0);
                let y = binary_target(&mut Rng::seed(3), &[3, 6]);
                check(rng, &x, |g, x| attribute_bce(g, x, &y))
            },
        },
        CheckCase {
            name: "group_features",
            run: |rng| composite_check(rng, CompositeKind::Group),
        },
        CheckCase {
            name: "multi_layer_render",
            run: |rng| composite_check(rng, CompositeKind::Render),
        },
        CheckCase {
            name: "dynamic_conv_update",
            run: |rng| composite_check(rng, CompositeKind::DynamicConv),
        },
        CheckCase {
            name: "query_self_update",
            run: |rng| composite_check(rng, CompositeKind::SelfUpdate),
        },
        CheckCase {
            name: "model_total_loss",
            run: model_loss_check,
        },
    ]
}

fn binary_target(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = f64::from(u8::from(rng.bernoulli(0.4))));
    t
}

#[derive(Clone, Copy)]
enum CompositeKind {
    Group,
    Render,
    DynamicConv,
    SelfUpdate,
}

/// Checks a decoder block w.r.t. its query/mask input with random, fixed
/// parameters.
fn composite_check(rng: &mut Rng, kind: CompositeKind) -> Result<GradCheckReport> {
    let d = 8;
    let n = 3;
    let mut store = ParamStore::new();
    let mut init = Rng::seed(21);
    let mut b = Builder::new(&mut store, &mut init);
    let dc = DynamicConvParams {
        dynamic: b.linear("dynamic", d, d),
        gate_x: Gate {
            fc: b.linear("gx.fc", d, d),
            norm: b.layer_norm("gx.norm", d),
        },
        gate_q: Gate {
            fc: b.linear("gq.fc", d, d),
            norm: b.layer_norm("gq.norm", d),
        },
    };
    let block = QueryBlock {
        attn: SelfAttention {
            q: b.linear("q", d, d),
            k: b.linear("k", d, d),
            v: b.linear("v", d, d),
            out: b.linear("o", d, d),
            heads: 2,
        },
        norm1: b.layer_norm("n1", d),
        ffn: b.mlp("ffn", d, 2 * d, d),
        norm2: b.layer_norm("n2", d),
    };
    let fc = b.linear("mlr.fc", 2 * d, d);
    let norm = b.layer_norm("mlr.norm", d);
    let levels = [
        away_from_zero(&mut Rng::seed(31), &[d, 4, 4]),
        away_from_zero(&mut Rng::seed(32), &[d, 2, 2]),
    ];
    let other_input = away_from_zero(&mut Rng::seed(33), &[n, d]);
    let x = match kind {
        CompositeKind::Group | CompositeKind::Render => rng.uniform_tensor(&[n, 4, 4], -2.0, 2.0),
        _ => away_from_zero(rng, &[n, d]),
    };
    let idx = sample_indices(rng, x.len());
    session_check(&store, &x, &idx, |s, x| {
        let y = match kind {
            CompositeKind::Group => {
                let f = s.constant(levels[0].clone());
                group_features(s, x, f)?
            }
            CompositeKind::Render => {
                let lv: Vec<Var> = levels.iter().map(|l| s.constant(l.clone())).collect();
                multi_layer_render(s, x, &lv, &fc, &norm)?
            }
            CompositeKind::DynamicConv => {
                let q = s.constant(other_input.clone());
                dynamic_conv_update(s, x, q, &dc)?
            }
            CompositeKind::SelfUpdate => query_self_update(s, x, &block)?,
        };
        Ok(weighted_sum(s, y, 7)?)
    })
}

/// Central differences for a function evaluated in a parameter session.
fn session_check<F>(
    store: &ParamStore,
    x: &Tensor,
    indices: &[usize],
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session, Var) -> Result<Var>,
{
    let mut s = Session::frozen(store);
    let xv = s.leaf(x.clone());
    let loss = f(&mut s, xv)?;
    s.backward(loss)?;
    let analytic = s
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: Tensor| -> Result<f64> {
        let mut s = Session::frozen(store);
        let v = s.constant(t);
        let out = f(&mut s, v)?;
        Ok(s.value(out).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += STEP;
        minus.data_mut()[i] -= STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * STEP);
        record(&mut report, i, analytic.data()[i], numeric);
    }
    Ok(report)
}

fn record(report: &mut GradCheckReport, index: usize, analytic: f64, numeric: f64) {
    let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    if err > report.max_rel_error || err.is_nan() {
        report.max_rel_error = err;
        report.worst_index = index;
    }
    report.checked += 1;
}

/// Configuration of the end-to-end fixture: 3 stages, 2 queries.
pub fn fixture_config() -> ModelConfig {
    ModelConfig {
        num_queries: 2,
        dim: 8,
        stages: 3,
        num_classes: 3,
        num_attributes: 4,
        ..ModelConfig::default()
    }
}

/// Image and two ground-truth instances for the end-to-end fixture.
pub fn fixture_sample(rng: &mut Rng) -> (Tensor, Target) {
    let image = rng.uniform_tensor(&[3, 32, 32], 0.0, 1.0);
    let mut a = Tensor::zeros(&[8, 8]);
    let mut b = Tensor::zeros(&[8, 8]);
    for y in 0..8 {
        for x in 0..8 {
            if y < 4 && x < 5 {
                a.data_mut()[y * 8 + x] = 1.0;
            }
            if y >= 5 && x >= 3 {
                b.data_mut()[y * 8 + x] = 1.0;
            }
        }
    }
    let target = Target {
        masks: vec![a, b],
        labels: vec![1, 2],
        attributes: vec![vec![0, 2], vec![3]],
    };
    (image, target)
}

/// Full model loss against sampled entries of every parameter tensor, with
/// the matching fixed at the unperturbed point.
fn model_loss_check(rng: &mut Rng) -> Result<GradCheckReport> {
    let cfg = fixture_config();
    let loss_cfg = LossConfig::default();
    let model = Model::new(cfg, rng.next_u64())?;
    let (image, target) = fixture_sample(rng);

    let mut s = Session::trainable(&model.params);
    let out = model.forward(&mut s, &image)?;
    let assignments = match_stages(&s, &out.stages, &target, &loss_cfg)?;
    let loss = total_loss_with(&mut s, &out.stages, &target, &loss_cfg, assignments.clone())?;
    s.backward(loss.total)?;
    let grads = s.param_grads();

    let eval = |params: &ParamStore| -> Result<f64> {
        let m = Model {
            params: params.clone(),
            ..model.clone()
        };
        let mut s = Session::frozen(&m.params);
        let out = m.forward(&mut s, &image)?;
        let loss = total_loss_with(&mut s, &out.stages, &target, &loss_cfg, assignments.clone())?;
        Ok(s.value(loss.total).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut params = model.params.clone();
    let mut flat_offset = 0;
    for id in model.params.ids().collect::<Vec<_>>() {
        let len = model.params.get(id).len();
        for k in sample_indices(rng, len).into_iter().take(3) {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + STEP;
            let up = eval(&params)?;
            params.get_mut(id).data_mut()[k] = orig - STEP;
            let down = eval(&params)?;
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
            record(&mut report, flat_offset + k, analytic, numeric);
        }
        flat_offset += len;
    }
    if report.checked == 0 {
        return Err(Error::Config("model has no parameters".into()));
    }
    Ok(report)
}

/// A deliberately wrong gradient: the second factor is detached, so the
/// autodiff derivative of `Σ x²` comes out as `x` instead of `2x`.
pub fn injected_failure() -> CheckCase {
    CheckCase {
        name: "injected_wrong_gradient",
        run: |rng| {
            let x = away_from_zero(rng, &[5]);
            check(rng, &x, |g, x| {
                let detached = g.constant(g.value(x).clone());
                let y = g.mul(x, detached)?;
                Ok(g.sum(y))
            })
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<&str> = registry().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn injected_gradient_is_caught_by_name() {
        let report = run_suite(0, &[injected_failure()]);
        assert_eq!(report.failures(), vec!["injected_wrong_gradient"]);
    }
}

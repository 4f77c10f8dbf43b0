//! Cascaded two-stream decoder.
//!
//! Each stage runs the segmentation stream (mask grouping on the fused map,
//! dynamic-conv gating, query self-attention) and then the attribute stream
//! (residual attribute query, multi-layer rendering over the pyramid, its own
//! gating and self-attention), and finally predicts masks, categories and
//! attributes. Stage `j` groups features with the mask logits of stage `j-1`.

use crate::config::{ModelConfig, QueryMode};
use crate::encoder::{FeaturePyramid, QueryState, NUM_LEVELS};
use crate::error::{Error, Result, TensorError};
use crate::nn::{Builder, LayerNorm, Linear, Mlp, ParamId, Session};
use crate::tensor::Var;

/// Outputs of one decoder stage.
#[derive(Clone, Copy, Debug)]
pub struct StagePrediction {
    /// `[N, H/4, W/4]` logits.
    pub mask_logits: Var,
    /// `[N, C]` logits.
    pub class_logits: Var,
    /// `[N, A]` logits.
    pub attr_logits: Var,
    pub queries_out: QueryState,
}

/// `sigmoid(LN(FC(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub fc: Linear,
    pub norm: LayerNorm,
}

impl Gate {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var, TensorError> {
        let h = self.fc.forward(s, x)?;
        let h = self.norm.forward(s, h)?;
        Ok(s.sigmoid(h))
    }
}

/// Gated query update driven by grouped features.
#[derive(Clone, Copy, Debug)]
pub struct DynamicConvParams {
    /// Generates per-channel gating parameters multiplied back onto the query.
    pub dynamic: Linear,
    pub gate_x: Gate,
    pub gate_q: Gate,
}

#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Self-attention plus FFN over the query set, post-norm.
#[derive(Clone, Copy, Debug)]
pub struct QueryBlock {
    pub attn: SelfAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct StreamParams {
    pub dc: DynamicConvParams,
    pub block: QueryBlock,
}

#[derive(Clone, Copy, Debug)]
pub struct StageParams {
    pub obj: StreamParams,
    /// Attribute-stream parameters; `None` in shared mode, where the object
    /// stream's parameters are reused.
    pub atr: Option<StreamParams>,
    /// Shared mode only: generates the attribute query from the object query.
    pub atr_from_obj: Option<Mlp>,
    pub mlr_fc: Linear,
    pub mlr_norm: LayerNorm,
    pub cls_head: Mlp,
    pub mask_head: Mlp,
    pub atr_head: Mlp,
}

impl StageParams {
    pub fn atr_stream(&self) -> &StreamParams {
        self.atr.as_ref().unwrap_or(&self.obj)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<StageParams>,
    dim: usize,
    mlr_levels: usize,
    mode: QueryMode,
}

fn build_stream(b: &mut Builder<'_>, d: usize, heads: usize, hidden: usize) -> StreamParams {
    StreamParams {
        dc: DynamicConvParams {
            dynamic: b.linear("dc.dynamic", d, d),
            gate_x: Gate {
                fc: b.linear("dc.gate_x.fc", d, d),
                norm: b.layer_norm("dc.gate_x.norm", d),
            },
            gate_q: Gate {
                fc: b.linear("dc.gate_q.fc", d, d),
                norm: b.layer_norm("dc.gate_q.norm", d),
            },
        },
        block: QueryBlock {
            attn: SelfAttention {
                q: b.linear("attn.q", d, d),
                k: b.linear("attn.k", d, d),
                v: b.linear("attn.v", d, d),
                out: b.linear("attn.out", d, d),
                heads,
            },
            norm1: b.layer_norm("norm1", d),
            ffn: b.mlp("ffn", d, hidden, d),
            norm2: b.layer_norm("norm2", d),
        },
    }
}

/// `X[n, c] = Σ_{u,v} sigmoid(mask_logits[n, u, v]) · features[c, u, v]`, unnormalized.
pub fn group_features(
    s: &mut Session,
    mask_logits: Var,
    features: Var,
) -> Result<Var, TensorError> {
    let (ms, fs) = (s.shape(mask_logits).to_vec(), s.shape(features).to_vec());
    if ms.len() != 3 || fs.len() != 3 || ms[1..] != fs[1..] {
        return Err(TensorError::ShapeMismatch {
            op: "group_features",
            lhs: ms,
            rhs: fs,
        });
    }
    let hw = ms[1] * ms[2];
    let m = s.clamp_logits(mask_logits);
    let m = s.sigmoid(m);
    let m = s.reshape(m, &[ms[0], hw])?;
    let f = s.reshape(features, &[fs[0], hw])?;
    let ft = s.transpose(f)?;
    s.matmul(m, ft)
}

/// Object query features grouped from `X_fuse` with the previous masks.
pub fn group_object_features(
    s: &mut Session,
    mask_logits_prev: Var,
    fused: Var,
) -> Result<Var, TensorError> {
    group_features(s, mask_logits_prev, fused)
}

/// `Q̃_atr = Q_atr + Q_obj`.
pub fn residual_attribute_query(
    s: &mut Session,
    q_atr: Var,
    q_obj: Var,
) -> Result<Var, TensorError> {
    if s.shape(q_atr) != s.shape(q_obj) {
        return Err(TensorError::ShapeMismatch {
            op: "residual_attribute_query",
            lhs: s.shape(q_atr).to_vec(),
            rhs: s.shape(q_obj).to_vec(),
        });
    }
    s.add(q_atr, q_obj)
}

/// Groups every selected pyramid level with the resized masks, concatenates
/// along channels and fuses with FC + LayerNorm + ReLU. `levels` are the
/// maps actually grouped, in the order they are concatenated.
pub fn multi_layer_render(
    s: &mut Session,
    mask_logits_prev: Var,
    levels: &[Var],
    fc: &Linear,
    norm: &LayerNorm,
) -> Result<Var, TensorError> {
    let mut grouped = Vec::with_capacity(levels.len());
    for &lvl in levels {
        let (h, w) = (s.shape(lvl)[1], s.shape(lvl)[2]);
        let m = s.resize(mask_logits_prev, h, w)?;
        grouped.push(group_features(s, m, lvl)?);
    }
    let cat = s.concat(&grouped, 1)?;
    let h = fc.forward(s, cat)?;
    let h = norm.forward(s, h)?;
    Ok(s.relu(h))
}

/// `Q' = Q ∘ FC(X)`, then `Q̂ = gate_x(X) ∘ X + gate_q(X) ∘ Q'`.
pub fn dynamic_conv_update(
    s: &mut Session,
    x: Var,
    q: Var,
    p: &DynamicConvParams,
) -> Result<Var, TensorError> {
    let dynamic = p.dynamic.forward(s, x)?;
    let q_prime = s.mul(q, dynamic)?;
    let gx = p.gate_x.forward(s, x)?;
    let gq = p.gate_q.forward(s, x)?;
    let a = s.mul(gx, x)?;
    let b = s.mul(gq, q_prime)?;
    s.add(a, b)
}

fn self_attention(s: &mut Session, x: Var, p: &SelfAttention) -> Result<Var, TensorError> {
    let d = s.shape(x)[1];
    let head_dim = d / p.heads;
    let q = p.q.forward(s, x)?;
    let k = p.k.forward(s, x)?;
    let v = p.v.forward(s, x)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = s.narrow(q, 1, h * head_dim, head_dim)?;
        let kh = s.narrow(k, 1, h * head_dim, head_dim)?;
        let vh = s.narrow(v, 1, h * head_dim, head_dim)?;
        let kt = s.transpose(kh)?;
        let scores = s.matmul(qh, kt)?;
        let scores = s.scale(scores, scale);
        let attn = s.softmax(scores, 1)?;
        heads.push(s.matmul(attn, vh)?);
    }
    let cat = s.concat(&heads, 1)?;
    p.out.forward(s, cat)
}

/// `Q = LN(Q1 + FFN(Q1))` with `Q1 = LN(Q̂ + MHSA(Q̂))`.
pub fn query_self_update(s: &mut Session, q_hat: Var, p: &QueryBlock) -> Result<Var, TensorError> {
    let attn = self_attention(s, q_hat, &p.attn)?;
    let q1 = s.add(q_hat, attn)?;
    let q1 = p.norm1.forward(s, q1)?;
    let f = p.ffn.forward(s, q1)?;
    let q2 = s.add(q1, f)?;
    p.norm2.forward(s, q2)
}

/// Mask logits from the dot product of mask kernels with `X_fuse`, plus class
/// and attribute logits.
pub fn predict_stage(
    s: &mut Session,
    q_obj: Var,
    q_atr: Var,
    fused: Var,
    p: &StageParams,
) -> Result<StagePrediction, TensorError> {
    let class_logits = p.cls_head.forward(s, q_obj)?;
    let kernels = p.mask_head.forward(s, q_obj)?;
    let fs = s.shape(fused).to_vec();
    let f = s.reshape(fused, &[fs[0], fs[1] * fs[2]])?;
    let m = s.matmul(kernels, f)?;
    let n = s.shape(q_obj)[0];
    let mask_logits = s.reshape(m, &[n, fs[1], fs[2]])?;
    let attr_logits = p.atr_head.forward(s, q_atr)?;
    Ok(StagePrediction {
        mask_logits,
        class_logits,
        attr_logits,
        queries_out: QueryState {
            obj: q_obj,
            atr: q_atr,
        },
    })
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, b: &mut Builder<'_>) -> Self {
        let d = cfg.dim;
        let heads = cfg.heads();
        let hidden = cfg.ffn_hidden();
        let stages = (0..cfg.stages)
            .map(|j| {
                b.scoped(&format!("decoder.stage{}", j + 1), |b| {
                    let obj = b.scoped("obj", |b| build_stream(b, d, heads, hidden));
                    let (atr, atr_from_obj) = match cfg.query_mode {
                        QueryMode::Decoupled => (
                            Some(b.scoped("atr", |b| build_stream(b, d, heads, hidden))),
                            None,
                        ),
                        QueryMode::Shared => (None, Some(b.mlp("atr_from_obj", d, d, d))),
                    };
                    StageParams {
                        obj,
                        atr,
                        atr_from_obj,
                        mlr_fc: b.linear("mlr.fc", cfg.mlr_levels * d, d),
                        mlr_norm: b.layer_norm("mlr.norm", d),
                        cls_head: b.mlp("head.cls", d, d, cfg.num_classes),
                        mask_head: b.mlp("head.mask", d, d, d),
                        atr_head: b.mlp("head.atr", d, d, cfg.num_attributes),
                    }
                })
            })
            .collect();
        Self {
            stages,
            dim: d,
            mlr_levels: cfg.mlr_levels,
            mode: cfg.query_mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Pyramid levels used by multi-layer rendering, coarsest first.
    pub fn mlr_inputs(&self, pyramid: &FeaturePyramid) -> Vec<Var> {
        (0..self.mlr_levels)
            .map(|i| pyramid.levels[NUM_LEVELS - 1 - i])
            .collect()
    }

    /// Runs one stage given the previous queries and mask logits.
    pub fn stage_forward(
        &self,
        s: &mut Session,
        j: usize,
        pyramid: &FeaturePyramid,
        queries: QueryState,
        mask_prev: Var,
    ) -> Result<StagePrediction, TensorError> {
        let p = &self.stages[j];
        // Segmentation stream.
        let x_obj = group_object_features(s, mask_prev, pyramid.fused)?;
        let q_hat = dynamic_conv_update(s, x_obj, queries.obj, &p.obj.dc)?;
        let q_obj = query_self_update(s, q_hat, &p.obj.block)?;

        // Attribute stream.
        let q_atr_in = match (self.mode, &p.atr_from_obj) {
            (QueryMode::Shared, Some(mlp)) => mlp.forward(s, q_obj)?,
            _ => residual_attribute_query(s, queries.atr, q_obj)?,
        };
        let levels = self.mlr_inputs(pyramid);
        let x_atr = multi_layer_render(s, mask_prev, &levels, &p.mlr_fc, &p.mlr_norm)?;
        let stream = p.atr_stream();
        let q_hat = dynamic_conv_update(s, x_atr, q_atr_in, &stream.dc)?;
        let q_atr = query_self_update(s, q_hat, &stream.block)?;

        predict_stage(s, q_obj, q_atr, pyramid.fused, p)
    }

    pub fn forward(
        &self,
        s: &mut Session,
        pyramid: &FeaturePyramid,
        init: QueryState,
        m0: Var,
    ) -> Result<Vec<StagePrediction>> {
        let mut queries = init;
        let mut mask = m0;
        let mut out = Vec::with_capacity(self.stages.len());
        for j in 0..self.stages.len() {
            let pred = self.stage_forward(s, j, pyramid, queries, mask)?;
            queries = pred.queries_out;
            mask = pred.mask_logits;
            out.push(pred);
        }
        if out.is_empty() {
            return Err(Error::Config("decoder has no stages".into()));
        }
        Ok(out)
    }
}

/// Parameter ids owned by the attribute stream of every stage: its gating,
/// self-attention, rendering and head parameters.
pub fn attribute_stream_params(decoder: &Decoder) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for st in &decoder.stages {
        if let Some(a) = &st.atr {
            ids.extend(stream_params(a));
        }
        ids.extend(st.mlr_fc.params());
        ids.extend([st.mlr_norm.gamma, st.mlr_norm.beta]);
        ids.extend(mlp_params(&st.atr_head));
    }
    ids
}

/// Parameter ids of the object stream of every stage.
pub fn object_stream_params(decoder: &Decoder) -> Vec<ParamId> {
    decoder
        .stages
        .iter()
        .flat_map(|st| stream_params(&st.obj))
        .collect()
}

pub fn stream_params(p: &StreamParams) -> Vec<ParamId> {
    let dc = &p.dc;
    let b = &p.block;
    let mut ids = Vec::new();
    ids.extend(dc.dynamic.params());
    for g in [&dc.gate_x, &dc.gate_q] {
        ids.extend(g.fc.params());
        ids.extend([g.norm.gamma, g.norm.beta]);
    }
    for l in [&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.out] {
        ids.extend(l.params());
    }
    ids.extend([b.norm1.gamma, b.norm1.beta, b.norm2.gamma, b.norm2.beta]);
    ids.extend(mlp_params(&b.ffn));
    ids
}

pub fn mlp_params(m: &Mlp) -> Vec<ParamId> {
    let mut v = m.fc1.params().to_vec();
    v.extend(m.fc2.params());
    v
}

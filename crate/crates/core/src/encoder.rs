//! Feature extractor: a plain strided conv backbone, a top-down pyramid neck,
//! the fused stride-4 map with sinusoidal positions, and query/mask
//! initialization.

use crate::config::ModelConfig;
use crate::error::{Error, Result, TensorError};
use crate::nn::{Builder, Conv, ParamId, Session};
use crate::tensor::{Conv2dSpec, Tensor, Var};

/// Inputs are zero-padded so both extents are multiples of this.
pub const SIZE_DIVISOR: usize = 32;
pub const NUM_LEVELS: usize = 4;

/// Multi-scale maps `X_1..X_4` (strides 4, 8, 16, 32) and the fused map.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; NUM_LEVELS],
    pub fused: Var,
}

/// Object and attribute queries, both `[N, d]`.
#[derive(Clone, Copy, Debug)]
pub struct QueryState {
    pub obj: Var,
    pub atr: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    dim: usize,
    num_queries: usize,
    stages: [[Conv; 2]; NUM_LEVELS],
    laterals: [Conv; NUM_LEVELS],
    smooth: [Conv; NUM_LEVELS],
    /// `[N, d, 1, 1]` kernel producing `M_0`; its rows double as `Q_obj`.
    pub init_kernel: ParamId,
    /// `[N, d]` learned attribute query table.
    pub atr_embed: ParamId,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, b: &mut Builder<'_>) -> Self {
        let widths = cfg.backbone_widths();
        let d = cfg.dim;
        let stages = std::array::from_fn(|i| {
            let cin = if i == 0 { 3 } else { widths[i - 1] };
            let cout = widths[i];
            // Stage 1 downsamples twice to reach stride 4.
            let second = if i == 0 {
                Conv2dSpec::same(3, 2)
            } else {
                Conv2dSpec::same(3, 1)
            };
            [
                b.conv(
                    &format!("backbone.s{}.conv1", i + 1),
                    cin,
                    cout,
                    3,
                    Conv2dSpec::same(3, 2),
                    true,
                ),
                b.conv(
                    &format!("backbone.s{}.conv2", i + 1),
                    cout,
                    cout,
                    3,
                    second,
                    true,
                ),
            ]
        });
        let laterals = std::array::from_fn(|i| {
            b.conv(
                &format!("fpn.lateral{}", i + 1),
                widths[i],
                d,
                1,
                Conv2dSpec::symmetric(1, 0),
                true,
            )
        });
        let smooth = std::array::from_fn(|i| {
            b.conv(
                &format!("fpn.smooth{}", i + 1),
                d,
                d,
                3,
                Conv2dSpec::same(3, 1),
                true,
            )
        });
        let n = cfg.num_queries;
        let init = b.rng.uniform_tensor(
            &[n, d, 1, 1],
            -(1.0 / d as f64).sqrt(),
            (1.0 / d as f64).sqrt(),
        );
        let init_kernel = b.add("init.kernel", init);
        let atr = b.rng.normal_tensor(&[n, d], 1.0);
        let atr_embed = b.add("init.atr_embed", atr);
        Self {
            dim: d,
            num_queries: n,
            stages,
            laterals,
            smooth,
            init_kernel,
            atr_embed,
        }
    }

    /// Four backbone maps at strides 4/8/16/32. The image must already be
    /// padded to a multiple of [`SIZE_DIVISOR`].
    pub fn backbone_forward(&self, s: &mut Session, image: Var) -> Result<[Var; NUM_LEVELS]> {
        let shape = s.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 || shape[1] < SIZE_DIVISOR || shape[2] < SIZE_DIVISOR {
            return Err(Error::Data(format!(
                "backbone expects [3, H>=32, W>=32], got {shape:?}"
            )));
        }
        if !shape[1].is_multiple_of(SIZE_DIVISOR) || !shape[2].is_multiple_of(SIZE_DIVISOR) {
            return Err(Error::Data(format!(
                "image extents {shape:?} are not multiples of {SIZE_DIVISOR}"
            )));
        }
        let mut x = image;
        let mut out = [image; NUM_LEVELS];
        for (i, [c1, c2]) in self.stages.iter().enumerate() {
            x = c1.forward(s, x)?;
            x = s.relu(x);
            x = c2.forward(s, x)?;
            x = s.relu(x);
            out[i] = x;
        }
        Ok(out)
    }

    /// Lateral 1×1 projections, top-down 2× upsample-and-add, 3×3 smoothing.
    pub fn fpn_fuse(
        &self,
        s: &mut Session,
        raw: &[Var; NUM_LEVELS],
    ) -> Result<[Var; NUM_LEVELS], TensorError> {
        let mut merged = [raw[0]; NUM_LEVELS];
        let mut top: Option<Var> = None;
        for i in (0..NUM_LEVELS).rev() {
            let lat = self.laterals[i].forward(s, raw[i])?;
            let m = match top {
                None => lat,
                Some(t) => {
                    let (h, w) = (s.shape(lat)[1], s.shape(lat)[2]);
                    let up = s.resize(t, h, w)?;
                    s.add(lat, up)?
                }
            };
            merged[i] = m;
            top = Some(m);
        }
        let mut levels = merged;
        for (lvl, conv) in levels.iter_mut().zip(&self.smooth) {
            *lvl = conv.forward(s, *lvl)?;
        }
        Ok(levels)
    }

    /// Sum of all levels upsampled to stride 4, plus positional encoding.
    pub fn build_fused(
        &self,
        s: &mut Session,
        levels: &[Var; NUM_LEVELS],
    ) -> Result<Var, TensorError> {
        let (h, w) = (s.shape(levels[0])[1], s.shape(levels[0])[2]);
        let mut acc = levels[0];
        for &lvl in &levels[1..] {
            let up = s.resize(lvl, h, w)?;
            acc = s.add(acc, up)?;
        }
        let pe = s.constant(positional_encoding(self.dim, h, w));
        s.add(acc, pe)
    }

    /// `M_0` logits from a 1×1 conv over the fused map; `Q_obj` is that conv's
    /// kernel, `Q_atr` the learned attribute table.
    pub fn init_queries(
        &self,
        s: &mut Session,
        fused: Var,
    ) -> Result<(QueryState, Var), TensorError> {
        let kernel = s.p(self.init_kernel);
        let m0 = s.conv2d(fused, kernel, None, Conv2dSpec::symmetric(1, 0))?;
        let obj = s.reshape(kernel, &[self.num_queries, self.dim])?;
        let atr = s.p(self.atr_embed);
        Ok((QueryState { obj, atr }, m0))
    }

    pub fn forward(
        &self,
        s: &mut Session,
        image: Var,
    ) -> Result<(FeaturePyramid, QueryState, Var)> {
        let raw = self.backbone_forward(s, image)?;
        let levels = self.fpn_fuse(s, &raw)?;
        let fused = self.build_fused(s, &levels)?;
        let (queries, m0) = self.init_queries(s, fused)?;
        Ok((FeaturePyramid { levels, fused }, queries, m0))
    }
}

/// Zero-pads `[3, H, W]` at the bottom/right to multiples of [`SIZE_DIVISOR`].
pub fn pad_image(image: &Tensor) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Data(format!(
            "expected a [3, H, W] image, got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h < SIZE_DIVISOR || w < SIZE_DIVISOR {
        return Err(Error::Data(format!(
            "image {h}x{w} is smaller than {SIZE_DIVISOR}x{SIZE_DIVISOR}"
        )));
    }
    let (ph, pw) = (
        h.next_multiple_of(SIZE_DIVISOR),
        w.next_multiple_of(SIZE_DIVISOR),
    );
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(&[3, ph, pw]);
    for c in 0..3 {
        for y in 0..h {
            let src = &image.data()[(c * h + y) * w..(c * h + y + 1) * w];
            out.data_mut()[(c * ph + y) * pw..(c * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Fixed 2-D sine-cosine encoding `[d, H, W]`: the first `d/2` channels
/// encode the row, the rest the column; coordinates are normalized to `(0, 2π]`.
pub fn positional_encoding(d: usize, h: usize, w: usize) -> Tensor {
    const TEMPERATURE: f64 = 10000.0;
    let half = d / 2;
    let freq = |i: usize| TEMPERATURE.powf((2 * (i / 2)) as f64 / half as f64);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = Tensor::zeros(&[d, h, w]);
    let data = out.data_mut();
    for i in 0..half {
        let f = freq(i);
        for y in 0..h {
            let ye = (y + 1) as f64 / h as f64 * two_pi / f;
            for x in 0..w {
                let xe = (x + 1) as f64 / w as f64 * two_pi / f;
                let (py, px) = if i % 2 == 0 {
                    (ye.sin(), xe.sin())
                } else {
                    (ye.cos(), xe.cos())
                };
                data[(i * h + y) * w + x] = py;
                data[((half + i) * h + y) * w + x] = px;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::Rng;

    fn build(cfg: &ModelConfig) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(3);
        let enc = Encoder::new(cfg, &mut Builder::new(&mut store, &mut rng));
        (store, enc)
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_queries: 3,
            dim: 8,
            ..ModelConfig::default()
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        Rng::seed(seed).uniform_tensor(&[3, h, w], 0.0, 1.0)
    }

    #[test]
    fn backbone_strides_and_widths() {
        let cfg = cfg();
        let (store, enc) = build(&cfg);
        let mut s = Session::frozen(&store);
        let x = s.constant(image(64, 96, 1));
        let raw = enc.backbone_forward(&mut s, x).unwrap();
        let widths = cfg.backbone_widths();
        for (i, &v) in raw.iter().enumerate() {
            let k = 4 << i;
            assert_eq!(s.shape(v), &[widths[i], 64 / k, 96 / k]);
        }
        let levels = enc.fpn_fuse(&mut s, &raw).unwrap();
        for (i, &v) in levels.iter().enumerate() {
            assert_eq!(s.shape(v), &[cfg.dim, 16 >> i, 24 >> i]);
        }
    }

    #[test]
    fn backbone_rejects_small_or_unpadded_input() {
        let (store, enc) = build(&cfg());
        let mut s = Session::frozen(&store);
        let small = s.constant(Tensor::zeros(&[3, 16, 64]));
        assert!(enc.backbone_forward(&mut s, small).is_err());
        let odd = s.constant(Tensor::zeros(&[3, 40, 64]));
        assert!(enc.backbone_forward(&mut s, odd).is_err());
        assert!(pad_image(&Tensor::zeros(&[3, 20, 40])).is_err());
    }

    #[test]
    fn zero_image_gives_zero_maps() {
        let (store, enc) = build(&cfg());
        let mut s = Session::frozen(&store);
        let x = s.constant(Tensor::zeros(&[3, 64, 64]));
        let raw = enc.backbone_forward(&mut s, x).unwrap();
        assert!(raw
            .iter()
            .all(|&v| s.value(v).data().iter().all(|&e| e == 0.0)));
        let levels = enc.fpn_fuse(&mut s, &raw).unwrap();
        assert!(levels
            .iter()
            .all(|&v| s.value(v).data().iter().all(|&e| e == 0.0)));
    }

    #[test]
    fn coarsest_signal_reaches_every_level() {
        let cfg = cfg();
        let (store, enc) = build(&cfg);
        let mut s = Session::frozen(&store);
        let widths = cfg.backbone_widths();
        let raw: [Var; NUM_LEVELS] = std::array::from_fn(|i| {
            let n = 16 >> i;
            let mut t = Tensor::zeros(&[widths[i], n, n]);
            if i == NUM_LEVELS - 1 {
                t.data_mut()[0] = 1.0;
            }
            s.constant(t)
        });
        let levels = enc.fpn_fuse(&mut s, &raw).unwrap();
        for v in levels {
            assert!(s.value(v).data().iter().any(|&e| e != 0.0));
        }
    }

    #[test]
    fn fused_map_is_level_sum_plus_positions() {
        let cfg = cfg();
        let (store, enc) = build(&cfg);
        let mut s = Session::frozen(&store);
        let pe = positional_encoding(cfg.dim, 8, 8);
        let zeros: [Var; NUM_LEVELS] =
            std::array::from_fn(|i| s.constant(Tensor::zeros(&[cfg.dim, 8 >> i, 8 >> i])));
        let f = enc.build_fused(&mut s, &zeros).unwrap();
        assert_eq!(s.value(f), &pe);
        let c = 0.75;
        let consts: [Var; NUM_LEVELS] =
            std::array::from_fn(|i| s.constant(Tensor::full(&[cfg.dim, 8 >> i, 8 >> i], c)));
        let f = enc.build_fused(&mut s, &consts).unwrap();
        assert!(s.value(f).max_abs_diff(&pe.map(|v| v + 4.0 * c)) < 1e-12);
    }

    #[test]
    fn positional_encoding_separates_pixels() {
        let (d, h, w) = (32, 32, 32);
        let pe = positional_encoding(d, h, w);
        let column = |p: usize| (0..d).map(|c| pe.data()[c * h * w + p]).collect::<Vec<_>>();
        let cols: Vec<Vec<f64>> = (0..h * w).map(column).collect();
        for a in 0..h * w {
            for b in a + 1..h * w {
                let diff = cols[a]
                    .iter()
                    .zip(&cols[b])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(diff > 1e-6, "pixels {a} and {b} collide");
            }
        }
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn initial_queries_are_kernel_rows() {
        let cfg = cfg();
        let (mut store, enc) = build(&cfg);
        let mut s = Session::frozen(&store);
        let fused = s.constant(Rng::seed(9).normal_tensor(&[cfg.dim, 4, 6], 1.0));
        let (q, m0) = enc.init_queries(&mut s, fused).unwrap();
        assert_eq!(s.shape(m0), &[3, 4, 6]);
        assert_eq!(s.shape(q.obj), s.shape(q.atr));
        assert_eq!(s.value(q.obj).data(), store.get(enc.init_kernel).data());

        *store.get_mut(enc.init_kernel) = Tensor::zeros(&[3, cfg.dim, 1, 1]);
        let mut s = Session::frozen(&store);
        let fused = s.constant(Rng::seed(9).normal_tensor(&[cfg.dim, 4, 6], 1.0));
        let (q, m0) = enc.init_queries(&mut s, fused).unwrap();
        assert!(s.value(m0).data().iter().all(|&v| v == 0.0));
        assert!(s.value(q.obj).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_deterministic() {
        let (store, enc) = build(&cfg());
        let run = || {
            let mut s = Session::frozen(&store);
            let x = s.constant(image(64, 64, 4));
            let (p, q, m0) = enc.forward(&mut s, x).unwrap();
            (
                s.value(p.fused).clone(),
                s.value(q.obj).clone(),
                s.value(m0).clone(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn padding_keeps_content_top_left() {
        let img = image(40, 33, 2);
        let p = pad_image(&img).unwrap();
        assert_eq!(p.shape(), &[3, 64, 64]);
        assert_eq!(
            p.data()[(64 + 39) * 64 + 32],
            img.data()[(40 + 39) * 33 + 32]
        );
        assert_eq!(p.data()[(64 + 40) * 64], 0.0);
        assert_eq!(p.sum(), img.sum());
    }
}

//! Inference, evaluation against annotations and overlay rendering.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::image_io::{save_rgb, tensor_to_rgb};
use crate::data::{rle_decode, rle_encode, BinaryMask, Dataset, Rle, Vocabulary};
use crate::encoder::SIZE_DIVISOR;
use crate::error::{Error, Result};
use crate::metrics::{eval_report, Detection, EvalReport, GroundTruth, ThresholdGrid};
use crate::model::Model;
use crate::nn::Session;
use crate::tensor::{Tensor, LOGIT_CLAMP};

/// Queries scoring at or below this are dropped from inference output.
pub const SCORE_THRESHOLD: f64 = 0.5;
/// Probability threshold for mask pixels and attributes.
pub const PROB_THRESHOLD: f64 = 0.5;

/// One query's decoded prediction at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    pub query: usize,
    pub category: usize,
    /// Max class probability.
    pub score: f64,
    pub mask: BinaryMask,
    pub attributes: Vec<usize>,
    pub attribute_scores: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

/// Decodes every query of the last stage, sorted by score (descending,
/// stable in query order).
pub fn predict(model: &Model, image: &Tensor) -> Result<Vec<InstancePrediction>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut s = Session::frozen(&model.params);
    let out = model.forward(&mut s, image)?;
    let last = out.last();
    let (ph, pw) = (
        h.next_multiple_of(SIZE_DIVISOR),
        w.next_multiple_of(SIZE_DIVISOR),
    );
    let up = s.resize(last.mask_logits, ph, pw)?;
    let masks = s.value(up);
    let cls = s.value(last.class_logits);
    let attrs = s.value(last.attr_logits);
    let (n, c, a) = (cls.shape()[0], cls.shape()[1], attrs.shape()[1]);
    let mut preds = Vec::with_capacity(n);
    for q in 0..n {
        let probs: Vec<f64> = cls.row(q).iter().map(|&x| sigmoid(x)).collect();
        let (category, score) =
            probs
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, p)| {
                    if p > best.1 {
                        (k, p)
                    } else {
                        best
                    }
                });
        let mut mask = BinaryMask::new(h, w);
        let plane = &masks.data()[q * ph * pw..(q + 1) * ph * pw];
        for y in 0..h {
            for x in 0..w {
                if sigmoid(plane[y * pw + x]) > PROB_THRESHOLD {
                    mask.set(y, x, true);
                }
            }
        }
        let attribute_scores: Vec<f64> = attrs.row(q).iter().map(|&x| sigmoid(x)).collect();
        let attributes = (0..a)
            .filter(|&k| attribute_scores[k] > PROB_THRESHOLD)
            .collect();
        debug_assert!(category < c);
        preds.push(InstancePrediction {
            query: q,
            category,
            score,
            mask,
            attributes,
            attribute_scores,
        });
    }
    preds.sort_by(|x, y| y.score.total_cmp(&x.score));
    Ok(preds)
}

/// Rejects a dataset whose vocabulary sizes differ from the model's.
pub fn check_vocabulary(model: &Model, vocab: &Vocabulary) -> Result<()> {
    let cfg = &model.config;
    if vocab.num_categories() != cfg.num_classes || vocab.num_attributes() != cfg.num_attributes {
        return Err(Error::Data(format!(
            "dataset has {} categories and {} attributes, model expects {} and {}",
            vocab.num_categories(),
            vocab.num_attributes(),
            cfg.num_classes,
            cfg.num_attributes
        )));
    }
    Ok(())
}

/// Ground truth of every instance in `dataset`, with image indices.
pub fn ground_truths(dataset: &Dataset) -> Result<Vec<GroundTruth>> {
    let groups = dataset.instances_by_image();
    let mut out = Vec::new();
    for (i, (rec, idx)) in dataset.images.iter().zip(groups).enumerate() {
        for k in idx {
            let inst = &dataset.instances[k];
            out.push(GroundTruth {
                image: i,
                category: inst.category,
                mask: rle_decode(&inst.rle, rec.h, rec.w)?,
                attributes: inst.attributes.clone(),
            });
        }
    }
    Ok(out)
}

/// Model detections for every image (all queries kept).
pub fn detections(model: &Model, images: &[Tensor]) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for p in predict(model, img)? {
            out.push(Detection {
                image: i,
                category: p.category,
                score: p.score,
                mask: p.mask,
                attributes: p.attributes,
            });
        }
    }
    Ok(out)
}

pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    images: &[Tensor],
    grid: &ThresholdGrid,
) -> Result<EvalReport> {
    check_vocabulary(model, &dataset.header)?;
    if images.len() != dataset.images.len() {
        return Err(Error::Data(format!(
            "{} images for {} records",
            images.len(),
            dataset.images.len()
        )));
    }
    let dets = detections(model, images)?;
    let gts = ground_truths(dataset)?;
    let sizes: Vec<(usize, usize)> = dataset.images.iter().map(|r| (r.h, r.w)).collect();
    eval_report(&dets, &gts, &dataset.header, &sizes, grid)
}

/// Machine-readable instance record written by [`write_inference`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceDump {
    pub query: usize,
    pub category: usize,
    pub category_name: String,
    pub score: f64,
    pub attributes: Vec<usize>,
    pub attribute_names: Vec<String>,
    pub attribute_scores: Vec<f64>,
    pub rle: Rle,
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Blends each instance's mask over the image in a distinct color.
pub fn render_overlay(image: &Tensor, preds: &[InstancePrediction]) -> RgbImage {
    let mut img = tensor_to_rgb(image);
    for (k, p) in preds.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for y in 0..p.mask.height() {
            for x in 0..p.mask.width() {
                if p.mask.get(y, x) {
                    let px = img.get_pixel_mut(x as u32, y as u32);
                    let blended: [u8; 3] = std::array::from_fn(|c| {
                        ((u16::from(px[c]) + u16::from(color[c])) / 2) as u8
                    });
                    *px = Rgb(blended);
                }
            }
        }
    }
    img
}

/// Keeps predictions scoring above [`SCORE_THRESHOLD`] and writes
/// `<stem>_overlay.png`, `<stem>.txt` and `<stem>.json` into `out_dir`.
pub fn write_inference(
    image: &Tensor,
    preds: &[InstancePrediction],
    vocab: &Vocabulary,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<InstanceDump>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let kept: Vec<InstancePrediction> = preds
        .iter()
        .filter(|p| p.score > SCORE_THRESHOLD)
        .cloned()
        .collect();
    save_rgb(
        &render_overlay(image, &kept),
        &out_dir.join(format!("{stem}_overlay.png")),
    )?;
    let name = |names: &[String], k: usize| names.get(k).cloned().unwrap_or_else(|| k.to_string());
    let dumps: Vec<InstanceDump> = kept
        .iter()
        .map(|p| InstanceDump {
            query: p.query,
            category: p.category,
            category_name: name(&vocab.categories, p.category),
            score: p.score,
            attributes: p.attributes.clone(),
            attribute_names: p
                .attributes
                .iter()
                .map(|&a| name(&vocab.attributes, a))
                .collect(),
            attribute_scores: p.attribute_scores.clone(),
            rle: rle_encode(&p.mask),
        })
        .collect();
    let mut text = String::new();
    for (k, d) in dumps.iter().enumerate() {
        let rgb = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            text,
            "#{k} color=({},{},{}) {} score={:.3} area={} attributes=[{}]",
            rgb[0],
            rgb[1],
            rgb[2],
            d.category_name,
            d.score,
            kept[k].mask.area(),
            d.attribute_names.join(", ")
        );
    }
    let txt = out_dir.join(format!("{stem}.txt"));
    std::fs::write(&txt, text).map_err(|e| Error::io(&txt, e))?;
    let json = out_dir.join(format!("{stem}.json"));
    std::fs::write(
        &json,
        serde_json::to_string_pretty(&dumps).expect("dump serializes"),
    )
    .map_err(|e| Error::io(&json, e))?;
    Ok(dumps)
}

//! Annotation schema, RLE masks, PNG I/O and the synthetic shapes generator.

pub mod annotations;
pub mod image_io;
pub mod mask;
pub mod synth;

use std::path::Path;

pub use annotations::{Dataset, ImageRecord, InstanceAnnotation, Vocabulary};
pub use image_io::{load_image, save_image};
pub use mask::{rle_decode, rle_encode, BinaryMask, Rle};
pub use synth::{
    synth_generate, AttributeGroup, ShapeKind, SynthConfig, SynthDataset, ANNOTATIONS_FILE,
};

use crate::encoder::SIZE_DIVISOR;
use crate::error::Result;
use crate::loss::Target;
use crate::tensor::Tensor;

/// Stride of the mask predictions relative to the input image.
pub const MASK_STRIDE: usize = 4;

/// Training sample: image plus stride-4 targets and full-resolution masks.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub target: Target,
    pub full_masks: Vec<BinaryMask>,
}

/// Builds one [`Sample`] per image in `dataset`.
pub fn build_samples(dataset: &Dataset, images: &[Tensor]) -> Result<Vec<Sample>> {
    let groups = dataset.instances_by_image();
    let mut out = Vec::with_capacity(images.len());
    for ((rec, image), idx) in dataset.images.iter().zip(images).zip(groups) {
        let (ph, pw) = (
            rec.h.next_multiple_of(SIZE_DIVISOR),
            rec.w.next_multiple_of(SIZE_DIVISOR),
        );
        let mut target = Target::default();
        let mut full_masks = Vec::new();
        for k in idx {
            let inst = &dataset.instances[k];
            let mask = rle_decode(&inst.rle, rec.h, rec.w)?;
            target.masks.push(mask.pad_and_pool(ph, pw, MASK_STRIDE));
            target.labels.push(inst.category);
            target.attributes.push(inst.attributes.clone());
            full_masks.push(mask);
        }
        out.push(Sample {
            image: image.clone(),
            target,
            full_masks,
        });
    }
    Ok(out)
}

/// Loads an annotation file and the images it lists (paths relative to the
/// file's directory).
pub fn load_split(annotations: &Path) -> Result<(Dataset, Vec<Tensor>)> {
    let dataset = Dataset::load(annotations)?;
    let dir = annotations.parent().unwrap_or(Path::new("."));
    let images = dataset
        .images
        .iter()
        .map(|rec| {
            let img = load_image(&dir.join(&rec.file))?;
            if img.shape()[1..] != [rec.h, rec.w] {
                return Err(crate::Error::Data(format!(
                    "{} is {}x{}, annotation says {}x{}",
                    rec.file,
                    img.shape()[1],
                    img.shape()[2],
                    rec.h,
                    rec.w
                )));
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dataset, images))
}

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads an image as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let data = t.data_mut();
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    t
}

/// Quantizes a `[3, H, W]` tensor in `[0, 1]` to 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    assert!(t.rank() == 3 && t.shape()[0] == 3, "expected [3, H, W]");
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([at(0), at(1), at(2)])
    })
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    save_rgb(&tensor_to_rgb(t), path)
}

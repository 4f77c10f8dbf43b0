use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major binary raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Data(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Pixels with value strictly above `threshold`; `t` is `[H, W]`.
    pub fn from_tensor(t: &Tensor, threshold: f64) -> Self {
        assert_eq!(t.rank(), 2, "mask tensor must be [H, W]");
        Self {
            height: t.shape()[0],
            width: t.shape()[1],
            bits: t.data().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.bits.iter().map(|&b| f64::from(u8::from(b))).collect(),
        )
        .expect("mask extents are positive")
    }

    /// Zero-extends to `height x width` (bottom/right), then max-pools by `factor`.
    pub fn pad_and_pool(&self, height: usize, width: usize, factor: usize) -> Tensor {
        assert!(
            height >= self.height
                && width >= self.width
                && height.is_multiple_of(factor)
                && width.is_multiple_of(factor)
        );
        let (ho, wo) = (height / factor, width / factor);
        let mut out = Tensor::zeros(&[ho, wo]);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out.data_mut()[(y / factor) * wo + x / factor] = 1.0;
                }
            }
        }
        out
    }

    pub fn intersection(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// Clears every pixel set in `other`.
    pub fn subtract(&mut self, other: &BinaryMask) {
        self.bits
            .iter_mut()
            .zip(&other.bits)
            .for_each(|(a, b)| *a &= !*b);
    }
}

/// Column-major uncompressed run-length encoding; runs alternate starting
/// with zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let (h, w) = (mask.height, mask.width);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let b = mask.get(y, x);
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        size: [h, w],
        counts,
    }
}

pub fn rle_decode(rle: &Rle, height: usize, width: usize) -> Result<BinaryMask> {
    if rle.size != [height, width] {
        return Err(Error::Data(format!(
            "RLE size {:?} does not match {height}x{width}",
            rle.size
        )));
    }
    let total: u64 = rle.counts.iter().sum();
    if total != (height * width) as u64 {
        return Err(Error::Data(format!(
            "RLE counts sum to {total}, expected {}",
            height * width
        )));
    }
    let mut mask = BinaryMask::new(height, width);
    let mut pos = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let value = i % 2 == 1;
        for k in pos..pos + c as usize {
            if value {
                // Column-major position k -> (y, x).
                mask.set(k % height, k / height, true);
            }
        }
        pos += c as usize;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_and_all_one() {
        let z = BinaryMask::new(3, 4);
        assert_eq!(rle_encode(&z).counts, vec![12]);
        let o = BinaryMask::from_bits(3, 4, vec![true; 12]).unwrap();
        assert_eq!(rle_encode(&o).counts, vec![0, 12]);
    }

    #[test]
    fn column_major_order() {
        // 2x2 with only the top-right pixel set: column-major index 2.
        let mut m = BinaryMask::new(2, 2);
        m.set(0, 1, true);
        assert_eq!(rle_encode(&m).counts, vec![2, 1, 1]);
        assert_eq!(rle_decode(&rle_encode(&m), 2, 2).unwrap(), m);
    }

    #[test]
    fn decode_rejects_bad_sum() {
        let rle = Rle {
            size: [2, 2],
            counts: vec![1, 2],
        };
        assert!(rle_decode(&rle, 2, 2).is_err());
    }

    #[test]
    fn pad_and_pool_keeps_thin_structures() {
        let mut m = BinaryMask::new(6, 6);
        m.set(5, 1, true);
        let t = m.pad_and_pool(8, 8, 4);
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[0.0, 0.0, 1.0, 0.0]);
    }
}

//! Pixel scaling conventions and image-to-tensor batching.

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

/// How raw 8-bit RGB pixels are mapped to network inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// `x / 255`.
    Unit,
    /// BGR channel order minus the ImageNet channel means (VGG, ResNet).
    Caffe,
    /// `x / 127.5 - 1` (Inception).
    Tf,
}

const CAFFE_MEAN_BGR: [f32; 3] = [103.939, 116.779, 123.68];

impl Preprocess {
    pub fn apply(self, rgb: [u8; 3]) -> [f32; 3] {
        let [r, g, b] = rgb.map(|v| v as f32);
        match self {
            Preprocess::Unit => [r / 255.0, g / 255.0, b / 255.0],
            Preprocess::Caffe => [b - CAFFE_MEAN_BGR[0], g - CAFFE_MEAN_BGR[1], r - CAFFE_MEAN_BGR[2]],
            Preprocess::Tf => [r / 127.5 - 1.0, g / 127.5 - 1.0, b / 127.5 - 1.0],
        }
    }
}

/// Resizes (bilinear) when needed and writes one NHWC sample.
pub fn write_sample(img: &RgbImage, size: (usize, usize), pre: Preprocess, out: &mut [f32]) {
    let (h, w) = size;
    let resized;
    let src = if img.height() as usize == h && img.width() as usize == w {
        img
    } else {
        resized = image::imageops::resize(img, w as u32, h as u32, FilterType::Triangle);
        &resized
    };
    for (i, p) in src.pixels().enumerate() {
        out[i * 3..i * 3 + 3].copy_from_slice(&pre.apply(p.0));
    }
}

pub fn to_tensor(images: &[&RgbImage], size: (usize, usize), pre: Preprocess) -> Result<Tensor> {
    let mut t = Tensor::zeros([images.len(), size.0, size.1, 3]);
    let len = t.sample_len();
    for (img, out) in images.iter().zip(t.data_mut().chunks_mut(len.max(1))) {
        write_sample(img, size, pre, out);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn conventions() {
        assert_eq!(Preprocess::Unit.apply([255, 0, 51]), [1.0, 0.0, 0.2]);
        assert_eq!(Preprocess::Tf.apply([0, 255, 0]), [-1.0, 1.0, -1.0]);
        let c = Preprocess::Caffe.apply([10, 20, 30]);
        assert!((c[0] - (30.0 - 103.939)).abs() < 1e-4 && (c[2] - (10.0 - 123.68)).abs() < 1e-4);
    }

    #[test]
    fn batches_resize_to_target() {
        let img = RgbImage::from_pixel(8, 8, Rgb([255, 255, 255]));
        let t = to_tensor(&[&img, &img], (4, 4), Preprocess::Unit).unwrap();
        assert_eq!(t.shape(), [2, 4, 4, 3]);
        assert!(t.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }
}

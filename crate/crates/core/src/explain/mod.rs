//! Grad-CAM heatmaps, colormapped overlays and their export.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use ndarray_npy::NpzWriter;
use serde::{Deserialize, Serialize};

use crate::data::images::to_tensor;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;
use crate::zoo::ModelGraph;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `ReLU(sum_k alpha_k A_k)` at the layer's resolution, row-major.
    pub raw: Vec<f32>,
    pub raw_shape: (usize, usize),
    /// Min-max scaled and bilinearly upsampled to the input size.
    pub normalized: Vec<f32>,
    pub shape: (usize, usize),
    pub class_idx: usize,
    pub layer: String,
    /// The raw map was zero everywhere; `normalized` is then all zeros.
    pub all_zero: bool,
}

/// Gradient-weighted class activation map of `layer` for `class_idx`.
///
/// `image` is one preprocessed input, `[1, H, W, 3]`. The class score is
/// the head's logit for `class_idx`.
pub fn grad_cam(model: &ModelGraph, image: &Tensor, class_idx: usize, layer: &str) -> Result<Heatmap> {
    let out_dim = model.require_head()?.output_dim;
    if class_idx >= out_dim {
        return Err(Error::Argument(format!(
            "class index {class_idx} out of range for {out_dim} outputs"
        )));
    }
    if image.batch() != 1 {
        return Err(Error::Argument(format!(
            "grad_cam takes one image, got a batch of {}",
            image.batch()
        )));
    }
    let graph = &model.graph;
    let node = graph
        .node_id(layer)
        .ok_or_else(|| Error::Argument(format!("no layer named `{layer}`")))?;
    if node == 0 || !graph.nodes()[node].op.is_spatial_feature_map() {
        return Err(Error::Argument(format!(
            "`{layer}` is not a convolutional or pooling feature map"
        )));
    }
    let mode = Mode {
        training: false,
        trainable: None,
        dropout_seed: 0,
    };
    let pass = graph.forward(image, &mode)?;
    let mut seed = Tensor::zeros(pass.output().shape());
    seed.data_mut()[class_idx] = 1.0;
    let frozen = vec![false; graph.groups().len()];
    let grads = graph.backward(&pass, seed, &frozen, Some(node))?;
    let g = grads.captured.expect("capture requested");
    let a = pass.activation(node);
    let (h, w, k) = (a.height(), a.width(), a.channels());
    let mut alpha = vec![0.0f64; k];
    for px in g.data().chunks(k) {
        for (al, v) in alpha.iter_mut().zip(px) {
            *al += *v as f64;
        }
    }
    alpha.iter_mut().for_each(|v| *v /= (h * w) as f64);
    let raw: Vec<f32> = a
        .data()
        .chunks(k)
        .map(|px| {
            px.iter()
                .zip(&alpha)
                .map(|(v, al)| *v as f64 * al)
                .sum::<f64>()
                .max(0.0) as f32
        })
        .collect();
    Ok(from_raw(raw, (h, w), model.input_size, class_idx, layer))
}

/// Grad-CAM on an RGB image, resized and preprocessed for `model`; also
/// returns the resized image the heatmap aligns with.
pub fn grad_cam_image(
    model: &ModelGraph,
    image: &RgbImage,
    class_idx: usize,
    layer: &str,
) -> Result<(Heatmap, RgbImage)> {
    let (h, w) = model.input_size;
    let resized = if (image.height() as usize, image.width() as usize) == (h, w) {
        image.clone()
    } else {
        image::imageops::resize(image, w as u32, h as u32, image::imageops::FilterType::Triangle)
    };
    let x = to_tensor(&[&resized], (h, w), model.preprocess())?;
    Ok((grad_cam(model, &x, class_idx, layer)?, resized))
}

/// Normalizes and upsamples a raw map.
pub fn from_raw(
    raw: Vec<f32>,
    raw_shape: (usize, usize),
    shape: (usize, usize),
    class_idx: usize,
    layer: &str,
) -> Heatmap {
    let max = raw.iter().copied().fold(0.0f32, f32::max);
    let min = raw.iter().copied().fold(f32::INFINITY, f32::min);
    let all_zero = max <= 0.0;
    let scaled: Vec<f32> = if all_zero {
        vec![0.0; raw.len()]
    } else if max - min <= 0.0 {
        vec![1.0; raw.len()]
    } else {
        raw.iter().map(|v| (v - min) / (max - min)).collect()
    };
    let normalized = bilinear(&scaled, raw_shape, shape);
    Heatmap {
        raw,
        raw_shape,
        normalized,
        shape,
        class_idx,
        layer: layer.to_string(),
        all_zero,
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear(src: &[f32], from: (usize, usize), to: (usize, usize)) -> Vec<f32> {
    let (sh, sw) = from;
    let (th, tw) = to;
    let coord = |i: usize, s: usize, t: usize| {
        let x = ((i as f32 + 0.5) * s as f32 / t as f32 - 0.5).clamp(0.0, (s - 1) as f32);
        let x0 = x.floor() as usize;
        (x0, (x0 + 1).min(s - 1), x - x0 as f32)
    };
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, fy) = coord(y, sh, th);
        for x in 0..tw {
            let (x0, x1, fx) = coord(x, sw, tw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    out
}

/// The "jet" colormap.
pub fn jet(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f32| ((1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Alpha-blends the colormapped heatmap onto `image`.
pub fn overlay(heatmap: &Heatmap, image: &RgbImage, alpha: f32) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    let (h, w) = heatmap.shape;
    if (image.height() as usize, image.width() as usize) != (h, w) {
        return Err(Error::Argument(format!(
            "heatmap is {h}x{w}, image is {}x{}",
            image.height(),
            image.width()
        )));
    }
    let mut out = image.clone();
    for (p, v) in out.pixels_mut().zip(&heatmap.normalized) {
        let c = jet(*v);
        for (o, h) in p.0.iter_mut().zip(c) {
            *o = ((1.0 - alpha) * *o as f32 + alpha * h as f32).round() as u8;
        }
    }
    Ok(out)
}

/// Heatmap as a grayscale-free RGB rendering of the colormap alone.
pub fn colormap_image(heatmap: &Heatmap) -> RgbImage {
    let (h, w) = heatmap.shape;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(jet(heatmap.normalized[y as usize * w + x as usize]))
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub class_idx: usize,
    pub layer: String,
    pub model_ref: String,
    pub all_zero: bool,
    pub raw_shape: (usize, usize),
    pub shape: (usize, usize),
}

/// Writes `<stem>.png` (overlay), `<stem>.npz` (`raw`, `normalized`) and
/// `<stem>.json`; returns the three paths.
pub fn export(
    heatmap: &Heatmap,
    overlay_img: &RgbImage,
    dir: &Path,
    stem: &str,
    model_ref: &str,
) -> Result<[PathBuf; 3]> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let png = dir.join(format!("{stem}.png"));
    overlay_img.save(&png)?;
    let npz = dir.join(format!("{stem}.npz"));
    let file = File::create(&npz).map_err(|e| Error::io(&npz, e))?;
    let mut w = NpzWriter::new(BufWriter::new(file));
    let err = |e: &dyn std::fmt::Display| Error::Archive {
        path: npz.clone(),
        message: e.to_string(),
    };
    let raw = Array2::from_shape_vec(heatmap.raw_shape, heatmap.raw.clone()).map_err(|e| err(&e))?;
    let norm = Array2::from_shape_vec(heatmap.shape, heatmap.normalized.clone()).map_err(|e| err(&e))?;
    w.add_array("raw", &raw).map_err(|e| err(&e))?;
    w.add_array("normalized", &norm).map_err(|e| err(&e))?;
    w.finish().map_err(|e| err(&e))?;
    let json = dir.join(format!("{stem}.json"));
    let sidecar = HeatmapSidecar {
        class_idx: heatmap.class_idx,
        layer: heatmap.layer.clone(),
        model_ref: model_ref.to_string(),
        all_zero: heatmap.all_zero,
        raw_shape: heatmap.raw_shape,
        shape: heatmap.shape,
    };
    std::fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok([png, npz, json])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat(values: Vec<f32>, shape: (usize, usize)) -> Heatmap {
        from_raw(values, shape, shape, 0, "l")
    }

    #[test]
    fn overlay_extremes() {
        let img = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 40, y as u8 * 90, 7]));
        let h = heat(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], (2, 3));
        assert_eq!(overlay(&h, &img, 0.0).unwrap(), img);
        assert_eq!(overlay(&h, &img, 1.0).unwrap(), colormap_image(&h));
        let zero = heat(vec![0.0; 6], (2, 3));
        assert!(zero.all_zero);
        let blended = overlay(&zero, &img, 0.5).unwrap();
        let c = jet(0.0);
        for (o, i) in blended.pixels().zip(img.pixels()) {
            for ((o, i), h) in o.0.iter().zip(i.0).zip(c) {
                assert_eq!(*o, (0.5 * i as f32 + 0.5 * h as f32).round() as u8);
            }
        }
        assert!(overlay(&h, &RgbImage::new(2, 2), 0.5).is_err());
        assert!(overlay(&h, &img, 1.5).is_err());
    }

    #[test]
    fn constant_positive_map_normalizes_to_ones() {
        let h = heat(vec![2.0; 4], (2, 2));
        assert!(h.normalized.iter().all(|v| *v == 1.0));
        assert!(!h.all_zero);
    }

    #[test]
    fn bilinear_keeps_range_and_corners() {
        let up = bilinear(&[0.0, 1.0, 1.0, 0.0], (2, 2), (8, 8));
        assert_eq!(up.len(), 64);
        assert!(up.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(up[0], 0.0);
        assert_eq!(up[7], 1.0);
    }

    #[test]
    fn export_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let h = heat(vec![0.0, 1.0, 2.0, 3.0], (2, 2));
        let img = RgbImage::new(2, 2);
        let paths = export(&h, &overlay(&h, &img, 0.4).unwrap(), dir.path(), "cam", "ckpt/a").unwrap();
        assert!(paths.iter().all(|p| p.is_file()));
        let side: HeatmapSidecar = serde_json::from_str(&std::fs::read_to_string(&paths[2]).unwrap()).unwrap();
        assert_eq!(
            (side.class_idx, side.layer.as_str(), side.model_ref.as_str()),
            (0, "l", "ckpt/a")
        );
    }
}

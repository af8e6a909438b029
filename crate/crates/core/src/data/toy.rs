//! Synthetic inspection-style images for desk-scale checks.
//!
//! Binary toys draw bright thin polylines ("cracks") over a textured
//! concrete-like background; every crack pixel is brighter than any
//! background pixel, so the classes are separable by construction.
//! Multilabel toys draw one primitive per active label (line, dark blob,
//! light bloom, bar grid, rust stain, ...); an item with no primitive carries
//! only the trailing `background` label.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::descriptor::{DatasetDescriptor, Source, TaskKind};
use super::manifest::{write_manifest, ManifestRow};
use crate::error::{Error, Result};
use crate::nn::graph::mix_seed;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToySpec {
    #[serde(default)]
    pub name: Option<String>,
    pub height: usize,
    pub width: usize,
    pub task_kind: TaskKind,
    pub classes: usize,
    pub items_per_class: usize,
    pub seed: u64,
    /// Visual style (tint, grain, crack orientation); toys that differ only
    /// in `domain` share their generative structure.
    #[serde(default)]
    pub domain: u32,
}

impl ToySpec {
    pub fn binary(height: usize, width: usize, items_per_class: usize, seed: u64) -> Self {
        ToySpec {
            name: None,
            height,
            width,
            task_kind: TaskKind::Binary,
            classes: 2,
            items_per_class,
            seed,
            domain: 0,
        }
    }

    pub fn multilabel(height: usize, width: usize, classes: usize, items_per_class: usize, seed: u64) -> Self {
        ToySpec {
            task_kind: TaskKind::Multilabel,
            classes,
            ..Self::binary(height, width, items_per_class, seed)
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_string());
        self
    }

    pub fn with_domain(mut self, domain: u32) -> Self {
        self.domain = domain;
        self
    }

    pub fn dataset_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let kind = match self.task_kind {
                TaskKind::Binary => "binary",
                TaskKind::Multilabel => "multilabel",
            };
            format!("toy-{kind}-{}c-d{}-s{}", self.classes, self.domain, self.seed)
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        match self.task_kind {
            TaskKind::Binary => vec!["no_crack".into(), "crack".into()],
            TaskKind::Multilabel if self.classes == 6 => [
                "cracks",
                "spalling",
                "efflorescence",
                "exposed bars",
                "corrosion stain",
                "background",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            TaskKind::Multilabel => (0..self.classes - 1)
                .map(|i| format!("defect_{i}"))
                .chain(std::iter::once("background".to_string()))
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Argument(format!(
                "toy image size {}x{} must be positive",
                self.height, self.width
            )));
        }
        if self.items_per_class == 0 {
            return Err(Error::Argument("items_per_class must be positive".into()));
        }
        match self.task_kind {
            TaskKind::Binary if self.classes != 2 => Err(Error::Argument(format!(
                "binary toys have 2 classes, not {}",
                self.classes
            ))),
            TaskKind::Multilabel if self.classes < 2 => {
                Err(Error::Argument("multilabel toys need at least 2 classes".into()))
            }
            _ => Ok(()),
        }
    }
}

pub struct ToyDataset {
    pub descriptor: DatasetDescriptor,
    pub manifest: Vec<ManifestRow>,
    pub images: Vec<RgbImage>,
}

struct Style {
    tint: [f32; 3],
    grain: f32,
    noise: f32,
    /// Preferred crack direction in radians.
    heading: f32,
}

impl Style {
    fn for_domain(domain: u32) -> Style {
        const TINTS: [[f32; 3]; 4] = [
            [0.0, 0.0, 0.0],
            [0.06, 0.02, -0.06],
            [-0.05, 0.0, 0.05],
            [0.03, 0.05, -0.02],
        ];
        Style {
            tint: TINTS[domain as usize % TINTS.len()],
            grain: 0.35 + 0.2 * (domain % 3) as f32,
            noise: 0.05 + 0.015 * (domain % 2) as f32,
            heading: (domain as f32) * std::f32::consts::FRAC_PI_4,
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn background(h: usize, w: usize, style: &Style, rng: &mut ChaCha8Rng) -> Canvas {
        let base = rng.random_range(0.25f32..0.5);
        let (fx, fy) = (
            rng.random_range(0.5f32..1.5) * style.grain,
            rng.random_range(0.5f32..1.5) * style.grain,
        );
        let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
        let mut px = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let grain = 0.04 * ((x as f32 * fx + phase).sin() * (y as f32 * fy).cos());
                let n = rng.random_range(-style.noise..style.noise);
                let v = base + grain + n;
                px.push([v + style.tint[0], v + style.tint[1], v + style.tint[2]]);
            }
        }
        Canvas { h, w, px }
    }

    fn paint(&mut self, x: f32, y: f32, radius: f32, color: [f32; 3], alpha: f32) {
        let r = radius.max(0.5);
        let (x0, x1) = (
            (x - r).floor().max(0.0) as usize,
            (x + r).ceil().min(self.w as f32 - 1.0) as usize,
        );
        let (y0, y1) = (
            (y - r).floor().max(0.0) as usize,
            (y + r).ceil().min(self.h as f32 - 1.0) as usize,
        );
        if x + r < 0.0 || y + r < 0.0 || x - r > self.w as f32 || y - r > self.h as f32 {
            return;
        }
        for py in y0..=y1 {
            for px in x0..=x1 {
                let d2 = (px as f32 - x).powi(2) + (py as f32 - y).powi(2);
                if d2 <= r * r {
                    let p = &mut self.px[py * self.w + px];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }

    fn line(&mut self, from: (f32, f32), to: (f32, f32), width: f32, color: [f32; 3]) {
        let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
        let steps = (len * 2.0).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f32 / steps as f32;
            self.paint(
                from.0 + t * (to.0 - from.0),
                from.1 + t * (to.1 - from.1),
                width / 2.0,
                color,
                1.0,
            );
        }
    }

    fn into_image(self) -> RgbImage {
        let mut img = RgbImage::new(self.w as u32, self.h as u32);
        for (i, p) in self.px.iter().enumerate() {
            let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(
                (i % self.w) as u32,
                (i / self.w) as u32,
                Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]),
            );
        }
        img
    }
}

fn crack(canvas: &mut Canvas, style: &Style, rng: &mut ChaCha8Rng) {
    let size = canvas.h.min(canvas.w) as f32;
    let mut at = (
        rng.random_range(0.2..0.8) * canvas.w as f32,
        rng.random_range(0.2..0.8) * canvas.h as f32,
    );
    let mut heading = style.heading + rng.random_range(-0.6f32..0.6);
    let width = rng.random_range(1.0f32..2.0).min(size / 8.0).max(1.0);
    let level = rng.random_range(0.9f32..1.0);
    let color = [level, level, level];
    for _ in 0..rng.random_range(2..=3) {
        let len = size * rng.random_range(0.2f32..0.35);
        let next = (at.0 + len * heading.cos(), at.1 + len * heading.sin());
        canvas.line(at, next, width, color);
        // stay inside by bouncing off the borders
        at = (
            next.0.clamp(1.0, canvas.w as f32 - 2.0),
            next.1.clamp(1.0, canvas.h as f32 - 2.0),
        );
        heading += rng.random_range(-0.5f32..0.5);
        if next.0 <= 1.0 || next.0 >= canvas.w as f32 - 2.0 || next.1 <= 1.0 || next.1 >= canvas.h as f32 - 2.0 {
            heading += std::f32::consts::PI;
        }
    }
}

fn primitive(canvas: &mut Canvas, class: usize, style: &Style, rng: &mut ChaCha8Rng) {
    let size = canvas.h.min(canvas.w) as f32;
    let center = (
        rng.random_range(0.25..0.75) * canvas.w as f32,
        rng.random_range(0.25..0.75) * canvas.h as f32,
    );
    // later classes reuse the five shapes with shifted colours
    let hue = (class / 5) as f32 * 0.15;
    match class % 5 {
        0 => crack(canvas, style, rng),
        1 => canvas.paint(
            center.0,
            center.1,
            size * rng.random_range(0.12f32..0.2),
            [0.08 + hue, 0.08, 0.1],
            0.9,
        ),
        2 => canvas.paint(
            center.0,
            center.1,
            size * rng.random_range(0.18f32..0.28),
            [0.85, 0.88 - hue, 0.9],
            0.6,
        ),
        3 => {
            let spacing = size * 0.15;
            let len = size * 0.5;
            for k in 0..3 {
                let x = center.0 - spacing + k as f32 * spacing;
                canvas.line(
                    (x, center.1 - len / 2.0),
                    (x, center.1 + len / 2.0),
                    1.5,
                    [0.15, 0.12 + hue, 0.1],
                );
            }
        }
        _ => canvas.paint(
            center.0,
            center.1,
            size * rng.random_range(0.1f32..0.18),
            [0.7, 0.35 + hue, 0.1],
            0.8,
        ),
    }
}

impl ToyDataset {
    /// Writes every image under `dir` at its manifest path plus
    /// `dir/manifest.csv`; returns the manifest path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        for (row, img) in self.manifest.iter().zip(&self.images) {
            let p = dir.join(&row.path);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            img.save(&p)?;
        }
        let manifest = dir.join("manifest.csv");
        write_manifest(&manifest, self.descriptor.task_kind, &self.manifest)?;
        Ok(manifest)
    }
}

/// Generates a toy dataset; identical specs yield byte-identical output.
pub fn synth_toy_dataset(spec: &ToySpec) -> Result<ToyDataset> {
    spec.validate()?;
    let name = spec.dataset_name();
    let classes = spec.class_names();
    let style = Style::for_domain(spec.domain);
    let total = spec.classes * spec.items_per_class;
    let mut manifest = Vec::with_capacity(total);
    let mut images = Vec::with_capacity(total);
    for i in 0..total {
        let primary = i / spec.items_per_class;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, i as u64 + 1));
        let mut canvas = Canvas::background(spec.height, spec.width, &style, &mut rng);
        let labels: Vec<&str> = match spec.task_kind {
            TaskKind::Binary => {
                if primary == 1 {
                    crack(&mut canvas, &style, &mut rng);
                }
                vec![classes[primary].as_str()]
            }
            TaskKind::Multilabel => {
                let background = spec.classes - 1;
                let mut active = vec![false; background];
                if primary != background {
                    active[primary] = true;
                    for (c, a) in active.iter_mut().enumerate() {
                        if c != primary && rng.random::<f32>() < 0.25 {
                            *a = true;
                        }
                    }
                }
                for (c, _) in active.iter().enumerate().filter(|(_, a)| **a) {
                    primitive(&mut canvas, c, &style, &mut rng);
                }
                let labels: Vec<&str> = (0..background)
                    .filter(|&c| active[c])
                    .map(|c| classes[c].as_str())
                    .collect();
                if labels.is_empty() {
                    vec![classes[background].as_str()]
                } else {
                    labels
                }
            }
        };
        manifest.push(ManifestRow::new(format!("{name}/{i:05}.png"), &labels));
        images.push(canvas.into_image());
    }
    let descriptor = DatasetDescriptor {
        name,
        task_kind: spec.task_kind,
        class_names: classes,
        item_count: total,
        source: Source::Generator { spec: spec.clone() },
        has_predefined_splits: false,
        alternate_counts: vec![],
    };
    Ok(ToyDataset {
        descriptor,
        manifest,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_counts_by_construction() {
        let toy = synth_toy_dataset(&ToySpec::binary(32, 32, 100, 1)).unwrap();
        assert_eq!(toy.descriptor.item_count, 200);
        assert_eq!(toy.descriptor.task_kind, TaskKind::Binary);
        assert_eq!(toy.manifest.iter().filter(|r| r.labels == ["crack"]).count(), 100);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ToySpec::binary(32, 32, 10, 9);
        let (a, b) = (synth_toy_dataset(&spec).unwrap(), synth_toy_dataset(&spec).unwrap());
        assert_eq!(a.manifest, b.manifest);
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.as_raw() == y.as_raw()));
        let c = synth_toy_dataset(&ToySpec::binary(32, 32, 10, 10)).unwrap();
        assert_ne!(a.images[0].as_raw(), c.images[0].as_raw());
    }

    #[test]
    fn crack_pixels_outshine_every_background_pixel() {
        let toy = synth_toy_dataset(&ToySpec::binary(32, 32, 40, 4).with_domain(1)).unwrap();
        let max_luma = |img: &RgbImage| {
            img.pixels()
                .map(|p| p.0.iter().map(|&v| v as u32).sum::<u32>())
                .max()
                .unwrap()
        };
        let bg = toy.images[..40].iter().map(max_luma).max().unwrap();
        let cracked = toy.images[40..].iter().map(max_luma).min().unwrap();
        assert!(cracked > bg, "{cracked} <= {bg}");
    }

    #[test]
    fn multilabel_mirrors_codebrim_schema() {
        let toy = synth_toy_dataset(&ToySpec::multilabel(64, 64, 6, 50, 3)).unwrap();
        assert_eq!(toy.descriptor.item_count, 300);
        assert_eq!(toy.descriptor.class_names.len(), 6);
        assert_eq!(toy.descriptor.class_names[5], "background");
        for (i, row) in toy.manifest.iter().enumerate() {
            let primary = i / 50;
            if primary == 5 {
                assert_eq!(row.labels, vec!["background"]);
            } else {
                assert!(row.labels.contains(&toy.descriptor.class_names[primary]));
                assert!(!row.labels.iter().any(|l| l == "background"));
            }
        }
        assert!(toy.manifest.iter().any(|r| r.labels.len() > 1));
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(matches!(
            synth_toy_dataset(&ToySpec::binary(0, 32, 10, 1)),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            synth_toy_dataset(&ToySpec::binary(32, 32, 0, 1)),
            Err(Error::Argument(_))
        ));
    }
}

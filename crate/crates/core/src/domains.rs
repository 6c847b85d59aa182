//! Procedural source/target domain pairs with a controllable style gap.
//!
//! Content (shape geometry, placement, colors, background texture) is a pure
//! function of the content seed and sample index; style (fog blend, contrast,
//! color shift) is a pure function of the style fields. Two specs that agree
//! on everything but style therefore yield pixel-aligned image pairs with
//! identical labels, which is the whole point: a style gap with zero content
//! gap.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SeededRng;

pub const SHAPE_NAMES: [&str; 6] = ["circle", "square", "triangle", "cross", "ring", "diamond"];

/// Style knobs applied uniformly to every image of a domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleParams {
    /// Fog blend weight t in [0, 1]; 0 leaves pixels untouched, 1 paints
    /// every pixel with `fog_color`.
    #[serde(default)]
    pub fog_intensity: f64,
    #[serde(default = "default_fog_color")]
    pub fog_color: [f64; 3],
    /// Multiplier on contrast around mid-gray; must be > 0.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    /// Additive per-channel shift applied before the fog blend.
    #[serde(default)]
    pub color_shift: [f64; 3],
}

fn default_fog_color() -> [f64; 3] {
    [0.78, 0.78, 0.82]
}

fn default_contrast() -> f64 {
    1.0
}

impl Default for StyleParams {
    fn default() -> Self {
        StyleParams {
            fog_intensity: 0.0,
            fog_color: default_fog_color(),
            contrast: 1.0,
            color_shift: [0.0; 3],
        }
    }
}

impl StyleParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fog_intensity) {
            return Err(Error::invalid_config(
                "fog_intensity",
                format!("must be in [0, 1], got {}", self.fog_intensity),
            ));
        }
        if !(self.contrast > 0.0 && self.contrast.is_finite()) {
            return Err(Error::invalid_config(
                "contrast",
                format!("must be > 0, got {}", self.contrast),
            ));
        }
        for (name, vals) in [("fog_color", self.fog_color), ("color_shift", self.color_shift)] {
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid_config(name, "must be finite"));
            }
        }
        if self.fog_color.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid_config("fog_color", "components must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub n_classes: usize,
    /// Square images, `image_size` pixels per side.
    pub image_size: usize,
    pub samples_per_class: usize,
    #[serde(default)]
    pub style: StyleParams,
    /// Content seed: fixes shapes, positions, colors, and label order.
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > SHAPE_NAMES.len() {
            return Err(Error::invalid_config(
                "n_classes",
                format!("must be in 1..={}, got {}", SHAPE_NAMES.len(), self.n_classes),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::invalid_config(
                "image_size",
                format!("must be >= 8, got {}", self.image_size),
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid_config("samples_per_class", "must be >= 1"));
        }
        self.style.validate()
    }

    pub fn len(&self) -> usize {
        self.n_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Deterministic dataset generation. Sample `i` has label `i % n_classes`,
/// so the label sequence depends only on the index, never on style.
pub fn generate_dataset(spec: &DomainSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.len());
    let mut labels = Vec::with_capacity(spec.len());
    for i in 0..spec.len() {
        let label = i % spec.n_classes;
        images.push(generate_image(spec, i, label));
        labels.push(label);
    }
    Ok(Dataset { images, labels })
}

/// One content sample: textured background plus a filled shape whose class
/// decides the geometry. Style is applied afterwards.
fn generate_image(spec: &DomainSpec, index: usize, label: usize) -> Image {
    let content = generate_content(spec.seed, index, label, spec.image_size);
    apply_style(&content, &spec.style)
}

/// Content only (no style): all randomness comes from (content_seed, index).
pub fn generate_content(content_seed: u64, index: usize, label: usize, size: usize) -> Image {
    let mut rng = SeededRng::from_seed(content_seed).substream(index as u64);

    // Low-frequency background: a 4x4 RGB lattice, bilinearly upsampled,
    // plus a little per-pixel grain.
    let lattice: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.uniform_in(0.15, 0.85)).collect();
    let mut img = Image::from_fn(size, size, |c, y, x| {
        let fy = y as f64 / (size - 1) as f64 * 3.0;
        let fx = x as f64 / (size - 1) as f64 * 3.0;
        let (y0, x0) = (fy.floor().min(2.0) as usize, fx.floor().min(2.0) as usize);
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |yy: usize, xx: usize| lattice[(yy * 4 + xx) * 3 + c];
        let top = at(y0, x0) * (1.0 - dx) + at(y0, x0 + 1) * dx;
        let bot = at(y0 + 1, x0) * (1.0 - dx) + at(y0 + 1, x0 + 1) * dx;
        top * (1.0 - dy) + bot * dy
    });
    for v in img.data_mut() {
        // grain amplitude 0.04 keeps the texture visible without drowning shapes
        *v += rng.uniform_in(-0.04, 0.04);
    }

    // Shape placement and fill color. The fill is pushed away from mid-gray
    // so geometry stays learnable against arbitrary backgrounds.
    let s = size as f64;
    let cx = rng.uniform_in(0.32, 0.68) * s;
    let cy = rng.uniform_in(0.32, 0.68) * s;
    let radius = rng.uniform_in(0.20, 0.32) * s;
    let color: [f64; 3] = std::array::from_fn(|_| {
        let v = rng.uniform_in(0.0, 1.0);
        if v < 0.5 {
            v * 0.6 // [0, 0.3]
        } else {
            0.7 + (v - 0.5) * 0.6 // [0.7, 1.0]
        }
    });

    for y in 0..size {
        for x in 0..size {
            if shape_contains(label, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, radius) {
                for c in 0..3 {
                    img.set(c, y, x, color[c]);
                }
            }
        }
    }
    img.clip();
    img
}

/// Membership test for class `label` at offset (dx, dy) from the center.
fn shape_contains(label: usize, dx: f64, dy: f64, r: f64) -> bool {
    match label {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs().max(dy.abs()) <= r * 0.82,
        2 => {
            // upward isoceles triangle: apex (0, -r), base corners (+/-0.95r, 0.8r)
            let half_width_at = |y: f64| 0.95 * r * (y + r) / (1.8 * r);
            dy >= -r && dy <= 0.8 * r && dx.abs() <= half_width_at(dy)
        }
        3 => (dx.abs() <= 0.34 * r && dy.abs() <= r) || (dy.abs() <= 0.34 * r && dx.abs() <= r),
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        5 => dx.abs() + dy.abs() <= r * 1.15,
        _ => unreachable!("validated n_classes"),
    }
}

/// Convex blend toward the fog color, no blur: `(1 - t) * px + t * fog`.
pub fn blend_fog(img: &Image, t: f64, fog_color: [f64; 3]) -> Result<Image> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid_config("fog_intensity", format!("t must be in [0, 1], got {t}")));
    }
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set(c, y, x, (1.0 - t) * img.get(c, y, x) + t * fog_color[c]);
            }
        }
    }
    Ok(out)
}

/// The full fog corruption: blend, then one pass of a fixed 3x3 binomial
/// blur (replicated borders), then clip to [0, 1].
pub fn apply_fog(img: &Image, t: f64, fog_color: [f64; 3]) -> Result<Image> {
    let mut out = blur3(&blend_fog(img, t, fog_color)?);
    out.clip();
    Ok(out)
}

/// Full style pipeline: contrast about mid-gray, color shift, fog, blur, clip.
pub fn apply_style(img: &Image, style: &StyleParams) -> Image {
    let mut work = img.clone();
    if style.contrast != 1.0 {
        for v in work.data_mut() {
            *v = (*v - 0.5) * style.contrast + 0.5;
        }
    }
    if style.color_shift != [0.0; 3] {
        for c in 0..3 {
            for y in 0..work.height() {
                for x in 0..work.width() {
                    let v = work.get(c, y, x) + style.color_shift[c];
                    work.set(c, y, x, v);
                }
            }
        }
    }
    let mut out = apply_fog(&work, style.fog_intensity, style.fog_color)
        .expect("style validated before use");
    out.clip();
    out
}

/// 3x3 binomial kernel [1 2 1] x [1 2 1] / 16 with replicated borders.
fn blur3(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = Image::new(w, h);
    let weights = [1.0, 2.0, 1.0];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, wy) in weights.iter().enumerate() {
                    for (dx, wx) in weights.iter().enumerate() {
                        let sy = (y + dy).saturating_sub(1).min(h - 1);
                        let sx = (x + dx).saturating_sub(1).min(w - 1);
                        acc += wy * wx * img.get(c, sy, sx);
                    }
                }
                out.set(c, y, x, acc / 16.0);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Disk layout: `images/NNNNN.png` plus a `manifest` index mapping each file
// path to its integer label, one `path<TAB>label` line per image. Third-party
// datasets following the same layout can be dropped in unchanged.
// ---------------------------------------------------------------------------

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut manifest = String::new();
    for (i, (img, label)) in dataset.images.iter().zip(&dataset.labels).enumerate() {
        let name = format!("{i:05}.png");
        img.save_png(&img_dir.join(&name))?;
        writeln!(manifest, "images/{name}\t{label}").expect("string write");
    }
    std::fs::write(dir.join("manifest"), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = std::fs::read_to_string(dir.join("manifest"))
        .map_err(|e| Error::Dataset(format!("manifest in {}: {e}", dir.display())))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (path, label) = line.split_once('\t').ok_or_else(|| {
            Error::Dataset(format!("manifest line {}: expected `path<TAB>label`", lineno + 1))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Dataset(format!("manifest line {}: bad label `{label}`", lineno + 1))
        })?;
        images.push(Image::load_png(&dir.join(path))?);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no images listed in {}", dir.display())));
    }
    Ok(Dataset { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, style: StyleParams) -> DomainSpec {
        DomainSpec { n_classes: 4, image_size: 16, samples_per_class: 3, style, seed }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(5, StyleParams::default());
        let a = generate_dataset(&s).unwrap();
        let b = generate_dataset(&s).unwrap();
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn style_changes_pixels_not_labels() {
        let clean = spec(5, StyleParams::default());
        let foggy = spec(5, StyleParams { fog_intensity: 0.6, ..StyleParams::default() });
        let a = generate_dataset(&clean).unwrap();
        let b = generate_dataset(&foggy).unwrap();
        assert_eq!(a.labels, b.labels);
        // pixel-aligned pairs: same content, different values
        let diff: f64 = a.images[0]
            .data()
            .iter()
            .zip(b.images[0].data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1.0, "fog should move pixels, total diff {diff}");
    }

    #[test]
    fn blend_formula_midpoint() {
        // t = 0.5, pixel 0.2, fog 0.8 -> 0.5 before any blur
        let img = Image::from_fn(4, 4, |_, _, _| 0.2);
        let out = blend_fog(&img, 0.5, [0.8, 0.8, 0.8]).unwrap();
        for &v in out.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn full_fog_paints_everything() {
        let img = Image::from_fn(8, 8, |c, y, x| ((c + y + x) % 2) as f64);
        let out = apply_fog(&img, 1.0, [0.3, 0.5, 0.7]).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let want = [0.3, 0.5, 0.7][c];
                    assert!((out.get(c, y, x) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_fog_is_blur_only() {
        let img = Image::from_fn(8, 8, |_, _, _| 0.4);
        // constant image: blur of a constant is the constant
        let out = apply_fog(&img, 0.0, [0.9, 0.9, 0.9]).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fog_range_is_validated() {
        let img = Image::new(4, 4);
        assert!(apply_fog(&img, -0.1, [0.5; 3]).is_err());
        assert!(apply_fog(&img, 1.1, [0.5; 3]).is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let s = spec(9, StyleParams { fog_intensity: 0.3, ..StyleParams::default() });
        let data = generate_dataset(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.len(), data.len());
        // 8-bit quantization on the way to PNG
        for (a, b) in back.images[2].data().iter().zip(data.images[2].data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(1, StyleParams::default());
        s.n_classes = 0;
        assert!(generate_dataset(&s).is_err());
        let mut s = spec(1, StyleParams::default());
        s.style.fog_intensity = 2.0;
        assert!(generate_dataset(&s).is_err());
        let mut s = spec(1, StyleParams::default());
        s.style.contrast = 0.0;
        assert!(generate_dataset(&s).is_err());
    }

    #[test]
    fn every_class_is_distinguishable_at_generation() {
        // smoke check that the six shape masks differ pairwise
        let r = 10.0;
        let probe: Vec<(f64, f64)> =
            (0..100).map(|i| ((i % 10) as f64 * 2.2 - 10.0, (i / 10) as f64 * 2.2 - 10.0)).collect();
        for a in 0..6 {
            for b in (a + 1)..6 {
                let differs = probe
                    .iter()
                    .any(|&(dx, dy)| shape_contains(a, dx, dy, r) != shape_contains(b, dx, dy, r));
                assert!(differs, "shapes {a} and {b} are identical on the probe grid");
            }
        }
    }
}

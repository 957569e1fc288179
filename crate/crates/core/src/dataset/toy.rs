//! Procedural toy domain: coloured disks on a noisy background, where each
//! class adds a motif (none, horizontal stripes, concentric rings) whose
//! contrast scales with a per-tile feature strength θ ∈ [0, 1].
//!
//! [`MotifRule`] is a hand-written pixel-statistic classifier for these
//! images and serves as an independent oracle in tests.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use super::{
    split_dataset, ClassLabel, DatasetError, DatasetManifest, ImageTile, LabelSet, ManifestEntry, Provenance, Result,
    Split, SplitFractions,
};
use crate::hashing::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motif {
    PlainDisk,
    StripedDisk,
    RingedDisk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyClass {
    pub name: String,
    #[serde(default)]
    pub adenomatous: bool,
    pub motif: Motif,
    pub count: usize,
    /// Closed interval θ is drawn from uniformly.
    #[serde(default = "full_strength")]
    pub feature_strength: [f64; 2],
}

fn full_strength() -> [f64; 2] {
    [1.0, 1.0]
}

/// Disk count and radius range; radii are fractions of the image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiskLayout {
    pub min_count: u32,
    pub max_count: u32,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for DiskLayout {
    fn default() -> Self {
        DiskLayout { min_count: 1, max_count: 2, min_radius: 0.2, max_radius: 0.3 }
    }
}

/// Background pixels are `background - U{0..=background_noise}` per channel;
/// disks are flat `disk`, and motif pixels are darkened by
/// `round(θ · motif_darkening)` on every channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Palette {
    pub background: [u8; 3],
    pub background_noise: u8,
    pub disk: [u8; 3],
    pub motif_darkening: u8,
}

impl Default for Palette {
    fn default() -> Self {
        Palette { background: [236, 196, 222], background_noise: 14, disk: [150, 96, 176], motif_darkening: 80 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDomainSpec {
    #[serde(default = "default_image_size")]
    pub image_size: u32,
    #[serde(default)]
    pub seed: u64,
    pub classes: Vec<ToyClass>,
    #[serde(default)]
    pub disks: DiskLayout,
    #[serde(default)]
    pub palette: Palette,
    #[serde(default = "default_stripe_period")]
    pub stripe_period: u32,
    #[serde(default = "default_ring_width")]
    pub ring_width: u32,
    /// When set, entries are split with these fractions; otherwise all train.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitFractions>,
}

fn default_image_size() -> u32 {
    32
}

fn default_stripe_period() -> u32 {
    4
}

fn default_ring_width() -> u32 {
    2
}

fn invalid(field: &str, message: impl Into<String>) -> DatasetError {
    DatasetError::InvalidToySpec { field: field.into(), message: message.into() }
}

impl ToyDomainSpec {
    /// Spec with default geometry and palette.
    pub fn new(image_size: u32, seed: u64, classes: Vec<ToyClass>) -> Self {
        ToyDomainSpec {
            image_size,
            seed,
            classes,
            disks: DiskLayout::default(),
            palette: Palette::default(),
            stripe_period: default_stripe_period(),
            ring_width: default_ring_width(),
            splits: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ToyDomainSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(invalid("image_size", "must be at least 8"));
        }
        if self.classes.is_empty() {
            return Err(invalid("classes", "at least one class is required"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            let field = |f: &str| format!("classes[{i}].{f}");
            if self.classes[..i].iter().any(|o| o.name == c.name) {
                return Err(invalid(&field("name"), format!("duplicate class `{}`", c.name)));
            }
            if c.count == 0 {
                return Err(invalid(&field("count"), "must be at least 1"));
            }
            let [lo, hi] = c.feature_strength;
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(invalid(
                    &field("feature_strength"),
                    format!("[{lo}, {hi}] is not a sub-interval of [0, 1]"),
                ));
            }
        }
        let d = &self.disks;
        if d.min_count == 0 || d.min_count > d.max_count {
            return Err(invalid("disks.min_count", "need 1 <= min_count <= max_count"));
        }
        if !(d.min_radius > 0.0 && d.min_radius <= d.max_radius && d.max_radius <= 0.5) {
            return Err(invalid("disks.min_radius", "need 0 < min_radius <= max_radius <= 0.5"));
        }
        if self.stripe_period < 2 {
            return Err(invalid("stripe_period", "must be at least 2"));
        }
        if self.ring_width == 0 {
            return Err(invalid("ring_width", "must be at least 1"));
        }
        let min_r = d.min_radius * self.image_size as f64;
        let motif_size = self.stripe_period.max(2 * self.ring_width) as f64;
        if 2.0 * min_r < motif_size {
            return Err(invalid(
                "disks.min_radius",
                format!("disk diameter {:.1}px cannot hold a {motif_size}px motif", 2.0 * min_r),
            ));
        }
        let p = &self.palette;
        for c in 0..3 {
            if p.background[c] as i32 - p.background_noise as i32 <= p.disk[c] as i32 {
                return Err(invalid("palette.disk", "disks must be darker than the background on every channel"));
            }
        }
        if p.motif_darkening == 0 || p.disk.iter().any(|&v| v < p.motif_darkening) {
            return Err(invalid("palette.motif_darkening", "must be positive and at most every disk channel"));
        }
        if let Some(f) = &self.splits {
            f.validate().map_err(|e| invalid("splits", e.to_string()))?;
        }
        Ok(())
    }

    pub fn label_set(&self) -> LabelSet {
        LabelSet::new(self.classes.iter().map(|c| ClassLabel::new(c.name.clone(), c.adenomatous)).collect())
            .expect("validated unique names")
    }

    pub fn class(&self, name: &str) -> Option<&ToyClass> {
        self.classes.iter().find(|c| c.name == name)
    }
}

/// Renders one tile. The layout depends only on `layout_seed`, so varying
/// `motif` or `theta` with a fixed seed changes nothing but the motif.
pub fn render_tile(spec: &ToyDomainSpec, motif: Motif, theta: f64, layout_seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(layout_seed);
    let size = spec.image_size;
    let p = &spec.palette;
    let mut img: RgbImage = ImageBuffer::new(size, size);
    for px in img.pixels_mut() {
        for c in 0..3 {
            px[c] = p.background[c] - rng.random_range(0..=p.background_noise);
        }
    }
    let n_disks = rng.random_range(spec.disks.min_count..=spec.disks.max_count);
    let period = spec.stripe_period;
    let phase = rng.random_range(0..period);
    let darken = (theta.clamp(0.0, 1.0) * p.motif_darkening as f64).round() as u8;
    let s = size as f64;
    for _ in 0..n_disks {
        let r = rng.random_range(spec.disks.min_radius..=spec.disks.max_radius) * s;
        let cx = rng.random_range(r..=s - r);
        let cy = rng.random_range(r..=s - r);
        let (y0, y1) = ((cy - r).floor().max(0.0) as u32, ((cy + r).ceil() as u32).min(size));
        let (x0, x1) = ((cx - r).floor().max(0.0) as u32, ((cx + r).ceil() as u32).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let dist = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if dist > r {
                    continue;
                }
                let dark = match motif {
                    Motif::PlainDisk => false,
                    Motif::StripedDisk => (y + phase) % period < period / 2,
                    Motif::RingedDisk => (dist / spec.ring_width as f64).floor() as u64 % 2 == 1,
                };
                let d = if dark { darken } else { 0 };
                *img.get_pixel_mut(x, y) = Rgb([p.disk[0] - d, p.disk[1] - d, p.disk[2] - d]);
            }
        }
    }
    img
}

/// Renders every tile of `spec` in class order. Ids equal the manifest
/// paths used by [`generate_toy_dataset`].
pub fn render_toy_tiles(spec: &ToyDomainSpec) -> Result<Vec<ImageTile>> {
    spec.validate()?;
    let mut tiles = Vec::new();
    for (ci, class) in spec.classes.iter().enumerate() {
        for i in 0..class.count {
            let layout_seed = derive_seed(spec.seed, &[ci as u64, i as u64, 0]);
            let mut theta_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[ci as u64, i as u64, 1]));
            let [lo, hi] = class.feature_strength;
            let theta = if hi > lo { theta_rng.random_range(lo..=hi) } else { lo };
            let pixels = render_tile(spec, class.motif, theta, layout_seed);
            let id = format!("images/{}/{}_{i:05}.png", class.name, class.name);
            tiles.push(ImageTile::real(id, pixels, class.name.clone()).with_theta(theta));
        }
    }
    Ok(tiles)
}

/// Renders `spec` to `out_dir/images/…` and writes `out_dir/manifest.jsonl`
/// plus a copy of the toy spec as `toy_spec.json`.
pub fn generate_toy_dataset(spec: &ToyDomainSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let tiles = render_toy_tiles(spec)?;
    for class in &spec.classes {
        fs::create_dir_all(out_dir.join("images").join(&class.name))?;
    }
    let entries = tiles
        .par_iter()
        .map(|t| {
            let file = out_dir.join(t.id());
            t.pixels().save(&file).map_err(|source| DatasetError::Image { path: file, source })?;
            Ok(ManifestEntry {
                path: t.id().to_string(),
                label: t.label().to_string(),
                split: Split::Train,
                provenance: Provenance::Real,
                source_ref: None,
                generator_ref: None,
                theta: t.theta(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = DatasetManifest::new(out_dir, spec.label_set(), entries)?;
    if let Some(f) = spec.splits {
        manifest = split_dataset(&manifest, f, spec.seed)?;
    }
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    fs::write(out_dir.join("toy_spec.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(manifest)
}

/// Mean absolute luminance differences between horizontally and vertically
/// adjacent pixel pairs that both lie inside disks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotifStats {
    pub horizontal: f64,
    pub vertical: f64,
    pub disk_pixels: usize,
}

impl MotifStats {
    pub fn texture(&self) -> f64 {
        self.horizontal + self.vertical
    }

    /// In [-1, 1]; 1 for purely horizontal structure (stripes).
    pub fn anisotropy(&self) -> f64 {
        let t = self.texture();
        if t == 0.0 {
            0.0
        } else {
            (self.vertical - self.horizontal) / t
        }
    }
}

/// Pixel-statistic classifier for toy tiles.
///
/// Disk pixels are those with mean-channel luminance below the midpoint
/// between the flat disk colour and the darkest possible background pixel.
#[derive(Clone, Copy, Debug)]
pub struct MotifRule {
    pub threshold: f64,
    pub texture_floor: f64,
    pub anisotropy_cut: f64,
}

fn luminance(px: &Rgb<u8>) -> f64 {
    (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0
}

impl MotifRule {
    pub fn for_palette(p: &Palette) -> Self {
        let disk = luminance(&Rgb(p.disk));
        let bg_min = luminance(&Rgb(p.background.map(|v| v - p.background_noise)));
        MotifRule { threshold: (disk + bg_min) / 2.0, texture_floor: 0.5, anisotropy_cut: 0.5 }
    }

    pub fn stats(&self, img: &RgbImage) -> MotifStats {
        let (w, h) = img.dimensions();
        let lum: Vec<f64> = img.pixels().map(luminance).collect();
        let inside = |i: usize| lum[i] < self.threshold;
        let (mut sh, mut nh, mut sv, mut nv) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..h as usize {
            for x in 0..w as usize {
                let i = y * w as usize + x;
                if !inside(i) {
                    continue;
                }
                if x + 1 < w as usize && inside(i + 1) {
                    sh += (lum[i] - lum[i + 1]).abs();
                    nh += 1;
                }
                if y + 1 < h as usize && inside(i + w as usize) {
                    sv += (lum[i] - lum[i + w as usize]).abs();
                    nv += 1;
                }
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        MotifStats {
            horizontal: mean(sh, nh),
            vertical: mean(sv, nv),
            disk_pixels: lum.iter().filter(|&&l| l < self.threshold).count(),
        }
    }

    pub fn classify(&self, img: &RgbImage) -> Motif {
        let s = self.stats(img);
        if s.texture() < self.texture_floor {
            Motif::PlainDisk
        } else if s.anisotropy() > self.anisotropy_cut {
            Motif::StripedDisk
        } else {
            Motif::RingedDisk
        }
    }

    /// Strength of `motif` in `img`: vertical-minus-horizontal contrast for
    /// stripes, total contrast otherwise.
    pub fn score(&self, img: &RgbImage, motif: Motif) -> f64 {
        let s = self.stats(img);
        match motif {
            Motif::StripedDisk => s.vertical - s.horizontal,
            Motif::RingedDisk | Motif::PlainDisk => s.texture(),
        }
    }
}

//! Conversions between 8-bit RGB rasters and normalised NCHW tensors.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, RgbImage};
use polypforge_nn::Tensor;
use rand::Rng;

/// Maps 8-bit channel values to [-1, 1] and stacks `images` as `[N, 3, H, W]`.
///
/// # Panics
/// If the images do not all share one size.
pub fn images_to_tensor(images: &[&RgbImage]) -> Tensor<f32> {
    let (w, h) = images.first().map_or((0, 0), |i| i.dimensions());
    let plane = (w * h) as usize;
    let mut data = vec![0.0f32; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        assert_eq!(img.dimensions(), (w, h), "mixed image sizes in one batch");
        let base = n * 3 * plane;
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = px[c] as f32 / 127.5 - 1.0;
            }
        }
    }
    Tensor::new(vec![images.len(), 3, h as usize, w as usize], data).expect("shape matches data")
}

/// Inverse of [`images_to_tensor`], rounding and clamping to 8 bits.
pub fn tensor_to_images(t: &Tensor<f32>) -> Vec<RgbImage> {
    let (n, c, h, w) = t.dims4().expect("NCHW tensor");
    assert_eq!(c, 3, "expected 3 channels");
    let plane = h * w;
    (0..n)
        .map(|b| {
            let base = b * 3 * plane;
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                let ch = |k: usize| to_u8(t.data()[base + k * plane + i]);
                Rgb([ch(0), ch(1), ch(2)])
            })
        })
        .collect()
}

fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Resizes so the shorter side equals `shorter`, preserving aspect ratio.
pub fn resize_shorter_side(img: &RgbImage, shorter: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let s = w.min(h);
    if s == shorter {
        return img.clone();
    }
    let nw = ((w as f64 * shorter as f64 / s as f64).round() as u32).max(shorter);
    let nh = ((h as f64 * shorter as f64 / s as f64).round() as u32).max(shorter);
    imageops::resize(img, nw, nh, FilterType::Triangle)
}

pub fn center_crop(img: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    imageops::crop_imm(img, (w - size) / 2, (h - size) / 2, size, size).to_image()
}

pub fn random_crop<R: Rng + ?Sized>(img: &RgbImage, size: u32, rng: &mut R) -> RgbImage {
    let (w, h) = img.dimensions();
    let x = rng.random_range(0..=w - size);
    let y = rng.random_range(0..=h - size);
    imageops::crop_imm(img, x, y, size, size).to_image()
}

/// Random flips and quarter turns; the image must be square for rotations.
pub fn random_dihedral<R: Rng + ?Sized>(img: &RgbImage, flips: bool, rotations: bool, rng: &mut R) -> RgbImage {
    let mut out = img.clone();
    if flips {
        if rng.random_bool(0.5) {
            out = imageops::flip_horizontal(&out);
        }
        if rng.random_bool(0.5) {
            out = imageops::flip_vertical(&out);
        }
    }
    if rotations {
        out = match rng.random_range(0..4) {
            1 => imageops::rotate90(&out),
            2 => imageops::rotate180(&out),
            3 => imageops::rotate270(&out),
            _ => out,
        };
    }
    out
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

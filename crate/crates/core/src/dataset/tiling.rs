use image::{imageops, RgbImage};

use super::{DatasetError, ImageTile, Result};

#[derive(Clone, Debug)]
pub struct TilingOutcome {
    pub tiles: Vec<ImageTile>,
    /// Set when the image is smaller than one tile and nothing was produced.
    pub warning: Option<String>,
}

/// Cuts every fully contained `tile_size` square on a `stride` grid,
/// row-major. Tile ids and source refs are `{source_id}@{x},{y},{size}`.
pub fn tile_region(
    image: &RgbImage,
    source_id: &str,
    label: &str,
    tile_size: u32,
    stride: u32,
) -> Result<TilingOutcome> {
    if tile_size == 0 {
        return Err(DatasetError::InvalidTiling("tile_size must be at least 1".into()));
    }
    if stride == 0 {
        return Err(DatasetError::InvalidTiling("stride must be at least 1".into()));
    }
    let (w, h) = image.dimensions();
    if tile_size > w || tile_size > h {
        let warning = format!("{source_id}: {w}x{h} image is smaller than a {tile_size}px tile; no tiles produced");
        log::warn!("{warning}");
        return Ok(TilingOutcome { tiles: Vec::new(), warning: Some(warning) });
    }
    let mut tiles = Vec::new();
    for y in (0..=h - tile_size).step_by(stride as usize) {
        for x in (0..=w - tile_size).step_by(stride as usize) {
            let crop = imageops::crop_imm(image, x, y, tile_size, tile_size).to_image();
            let r = format!("{source_id}@{x},{y},{tile_size}");
            tiles.push(ImageTile::real(r.clone(), crop, label).with_source_ref(r));
        }
    }
    Ok(TilingOutcome { tiles, warning: None })
}

/// `(⌊(H−t)/s⌋+1)·(⌊(W−t)/s⌋+1)`, or 0 when the tile does not fit.
pub fn expected_tile_count(w: u32, h: u32, tile_size: u32, stride: u32) -> usize {
    if tile_size > w || tile_size > h {
        return 0;
    }
    (((h - tile_size) / stride + 1) * ((w - tile_size) / stride + 1)) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_examples() {
        for (w, h, t, s, n) in [(224, 224, 224, 224, 1), (448, 448, 224, 224, 4), (500, 300, 224, 112, 3)] {
            let img = RgbImage::new(w, h);
            let out = tile_region(&img, "img", "HP", t, s).unwrap();
            assert_eq!(out.tiles.len(), n);
            assert_eq!(expected_tile_count(w, h, t, s), n);
        }
    }

    #[test]
    fn too_small_is_a_warning() {
        let out = tile_region(&RgbImage::new(100, 300), "img", "HP", 224, 224).unwrap();
        assert!(out.tiles.is_empty());
        assert!(out.warning.is_some());
        assert!(tile_region(&RgbImage::new(10, 10), "img", "HP", 4, 0).is_err());
    }
}

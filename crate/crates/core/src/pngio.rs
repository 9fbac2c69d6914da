//! PNG input/output: 8-bit image export, patch-mask import and the
//! per-token attention-map strips.

use crate::error::{Error, Result};
use crate::sprites::Geometry;
use crate::subject::AttnMap;
use crate::tensor::{Real, Tensor};
use std::path::Path;

/// Save a [3,h,w] image in [0,1] as an 8-bit RGB PNG.
pub fn save_image<F: Real>(image: &Tensor<F>, path: &Path) -> Result<()> {
    if image.shape.len() != 3 || image.shape[0] != 3 {
        return Err(Error::Dimension(format!(
            "expected [3,h,w] image, got {:?}",
            image.shape
        )));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                let v = image.data[c * h * w + y * w + x].to_f64();
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("png write failed: {e}")))
}

/// Load an 8-bit RGB(A) PNG back into a [3,h,w] tensor in [0,1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("png read failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * h * w + y * w + x] = p.0[c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Read a patch-selection mask: any pixel with nonzero luminance selects
/// its patch. Accepts either a patch-grid-sized image or a canvas-sized
/// one.
pub fn load_patch_mask(path: &Path, geometry: Geometry) -> Result<Vec<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("png read failed: {e}")))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grid = geometry.grid();
    let mut mask = vec![false; grid * grid];
    if w == grid && h == grid {
        for y in 0..h {
            for x in 0..w {
                if img.get_pixel(x as u32, y as u32).0[0] > 0 {
                    mask[y * grid + x] = true;
                }
            }
        }
    } else if w == geometry.canvas && h == geometry.canvas {
        let p = geometry.patch;
        for y in 0..h {
            for x in 0..w {
                if img.get_pixel(x as u32, y as u32).0[0] > 0 {
                    mask[(y / p) * grid + x / p] = true;
                }
            }
        }
    } else {
        return Err(Error::Dimension(format!(
            "mask png is {w}x{h}, expected {grid}x{grid} or {c}x{c}",
            c = geometry.canvas
        )));
    }
    Ok(mask)
}

/// Render every query token's patch attention as a horizontal strip of
/// upscaled grayscale heatmaps, one tile per token, separated by white.
pub fn save_attention_strip<F: Real>(
    attn: &AttnMap<F>,
    geometry: Geometry,
    scale: usize,
    path: &Path,
) -> Result<()> {
    let grid = geometry.grid();
    if attn.n_patches() != grid * grid {
        return Err(Error::Dimension(format!(
            "attention over {} patches vs geometry grid {grid}x{grid}",
            attn.n_patches()
        )));
    }
    let tokens = attn.n_tokens();
    let tile = grid * scale;
    let width = tokens * tile + (tokens - 1);
    let mut img = image::GrayImage::from_pixel(width as u32, tile as u32, image::Luma([255]));
    for row in 0..tokens {
        // normalize each token's map by its max so structure stays visible
        let mut max = F::zero();
        for j in 0..grid * grid {
            max = max.max(attn.values().at(row, j));
        }
        let x_off = row * (tile + 1);
        for gy in 0..grid {
            for gx in 0..grid {
                let v = attn.values().at(row, gy * grid + gx);
                let norm = if max > F::zero() { v / max } else { F::zero() };
                let level = (norm.to_f64() * 255.0).round() as u8;
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(
                            (x_off + gx * scale + dx) as u32,
                            (gy * scale + dy) as u32,
                            image::Luma([level]),
                        );
                    }
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("png write failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sprites::{generate_scene, Geometry};

    #[test]
    fn image_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.png");
        let scene = generate_scene(Geometry::DESK, 5, 2).unwrap();
        let img = scene.render::<f32>();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape, img.shape);
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn canvas_sized_mask_collapses_to_patches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let g = Geometry::DESK;
        let mut img = image::GrayImage::new(32, 32);
        img.put_pixel(5, 9, image::Luma([255])); // patch (2,1) -> index 1*8+1
        img.save(&path).unwrap();
        let mask = load_patch_mask(&path, g).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[2 * 8 + 1]);
    }

    #[test]
    fn wrong_sized_mask_is_a_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        image::GrayImage::new(20, 20).save(&path).unwrap();
        assert!(matches!(
            load_patch_mask(&path, Geometry::DESK),
            Err(Error::Dimension(_))
        ));
    }
}

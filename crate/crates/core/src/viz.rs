//! Importance heatmaps and selection overlays as binary PGM/PPM images.

use crate::error::{Error, Result};
use crate::pps::StageTrace;
use crate::tensor::Tensor;
use crate::vit::ViTConfig;

/// Per-patch values laid out over the full grid; patches absent from
/// `patch_ids` get zero.
pub fn scatter_to_grid(values: &[f32], patch_ids: &[usize], num_patches: usize) -> Result<Vec<f64>> {
    if values.len() != patch_ids.len() {
        return Err(Error::shape("scatter_to_grid", "values and ids differ in length"));
    }
    let mut grid = vec![0.0; num_patches];
    for (&v, &id) in values.iter().zip(patch_ids) {
        *grid
            .get_mut(id)
            .ok_or_else(|| Error::invalid("scatter_to_grid", format!("patch id {id} out of range")))? = v as f64;
    }
    Ok(grid)
}

/// Grayscale `S×S` pixels: each patch's value scaled so the maximum maps to
/// 255, repeated over the patch footprint.
pub fn heatmap_pixels(grid_values: &[f64], cfg: &ViTConfig) -> Result<Vec<u8>> {
    if grid_values.len() != cfg.num_patches() {
        return Err(Error::shape("heatmap", "one value per patch expected"));
    }
    let max = grid_values.iter().cloned().fold(0.0f64, f64::max);
    let (s, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let mut px = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let v = grid_values[(y / p) * g + x / p];
            let level = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
            px.push(level as u8);
        }
    }
    Ok(px)
}

/// Binary PGM (P5).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Binary PPM (P6) from interleaved RGB.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Kept ids, one per line.
pub fn mask_text(kept: &[usize]) -> String {
    kept.iter().map(|id| format!("{id}\n")).collect()
}

fn image_rgb(pixels: &Tensor<f32>) -> Result<Vec<[u8; 3]>> {
    let &[c, h, w] = pixels.dims() else {
        return Err(Error::shape("composite", "expected [C×S×S] pixels"));
    };
    let plane = h * w;
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let d = pixels.data();
    Ok((0..plane)
        .map(|i| match c {
            3 => [q(d[i]), q(d[plane + i]), q(d[2 * plane + i])],
            _ => [q(d[i]); 3],
        })
        .collect())
}

/// Three panels side by side: the image, the heatmap, and the image with
/// dropped patches dimmed and kept patches tinted red.
pub fn composite(pixels: &Tensor<f32>, heat: &[u8], kept: &[usize], cfg: &ViTConfig) -> Result<Vec<u8>> {
    let s = cfg.image_size;
    let img = image_rgb(pixels)?;
    if img.len() != s * s || heat.len() != s * s {
        return Err(Error::shape("composite", "image and heatmap must both be S×S"));
    }
    let (p, g) = (cfg.patch_size, cfg.grid());
    let mut out = Vec::with_capacity(3 * s * s * 3);
    for y in 0..s {
        for x in 0..s {
            out.extend_from_slice(&img[y * s + x]);
        }
        for x in 0..s {
            out.extend_from_slice(&[heat[y * s + x]; 3]);
        }
        for x in 0..s {
            let [r, gr, b] = img[y * s + x];
            if kept.contains(&((y / p) * g + x / p)) {
                out.extend_from_slice(&[r / 2 + 128, gr / 2, b / 2]);
            } else {
                out.extend_from_slice(&[r / 4, gr / 4, b / 4]);
            }
        }
    }
    Ok(out)
}

/// Files describing one stage of one image.
pub struct StageImages {
    pub heatmap_pgm: Vec<u8>,
    pub mask_txt: String,
    pub composite_ppm: Vec<u8>,
    /// Patch with the highest importance at this stage.
    pub argmax_patch: usize,
}

/// Renders item `item` of every stage in `stages`.
pub fn render_stages(
    stages: &[StageTrace<f32>],
    item: usize,
    pixels: &Tensor<f32>,
    cfg: &ViTConfig,
) -> Result<Vec<StageImages>> {
    stages
        .iter()
        .map(|stage| {
            let dist = &stage.gala.distribution;
            let ids = &dist.patch_ids[item];
            let probs = dist.probs.row(item);
            let grid = scatter_to_grid(probs, ids, cfg.num_patches())?;
            let heat = heatmap_pixels(&grid, cfg)?;
            let kept = &stage.mask.kept[item];
            let argmax_patch = ids[crate::tensor::topk_slice(probs, 1)?[0]];
            Ok(StageImages {
                heatmap_pgm: encode_pgm(cfg.image_size, cfg.image_size, &heat),
                mask_txt: mask_text(kept),
                composite_ppm: encode_ppm(3 * cfg.image_size, cfg.image_size, &composite(pixels, &heat, kept, cfg)?),
                argmax_patch,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_normalizes_max_to_255() {
        let cfg = ViTConfig::desk();
        let grid = scatter_to_grid(&[0.1, 0.4, 0.2], &[0, 5, 15], 16).unwrap();
        let px = heatmap_pixels(&grid, &cfg).unwrap();
        assert_eq!(px.len(), 32 * 32);
        assert_eq!(*px.iter().max().unwrap(), 255);
        // patch 5 = grid (1, 1) covers pixels 8..16 in both axes
        assert_eq!(px[8 * 32 + 8], 255);
        assert_eq!(px[0], (0.1f64 / 0.4 * 255.0).round() as u8);
        assert_eq!(px[31 * 32 + 31], (0.2f64 / 0.4 * 255.0).round() as u8);
        assert_eq!(px[8], 0);
        assert!(heatmap_pixels(&[0.0; 16], &cfg).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn pgm_header_and_mask_text() {
        let bytes = encode_pgm(2, 1, &[0, 255]);
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
        assert_eq!(mask_text(&[3, 7]), "3\n7\n");
        assert!(scatter_to_grid(&[1.0], &[16], 16).is_err());
    }

    #[test]
    fn composite_has_three_panels() {
        let cfg = ViTConfig::desk();
        let pixels = Tensor::full(&[1, 32, 32], 1.0f32).unwrap();
        let heat = vec![7u8; 32 * 32];
        let rgb = composite(&pixels, &heat, &[0], &cfg).unwrap();
        assert_eq!(rgb.len(), 3 * 32 * 32 * 3);
        let at = |x: usize, y: usize| &rgb[(y * 96 + x) * 3..(y * 96 + x) * 3 + 3];
        assert_eq!(at(0, 0), &[255, 255, 255]);
        assert_eq!(at(32, 0), &[7, 7, 7]);
        assert_eq!(at(64, 0), &[255, 127, 127]);
        assert_eq!(at(64 + 31, 31), &[63, 63, 63]);
    }
}

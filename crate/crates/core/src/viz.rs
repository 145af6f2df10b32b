//! Color-mapped views of the coarse masks, the per-stage differences and the fused map.

use std::fs;
use std::path::{Path, PathBuf};

use apd_autograd::{Scalar, Tensor};
use image::{Rgb, RgbImage};

use crate::error::{ApdError, Result};
use crate::model::Inference;

/// Black, red, yellow, white ramp over `[0, 1]`; inputs are clamped.
pub fn hot(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let channel = |offset: f64| ((3.0 * v - offset).clamp(0.0, 1.0) * 255.0).round() as u8;
    [channel(0.0), channel(1.0), channel(2.0)]
}

/// Maps an unbounded magnitude into `[0, 1)` without a per-image rescale, so
/// heatmaps stay comparable across stages and inputs.
pub fn squash(v: f64) -> f64 {
    v / (1.0 + v)
}

pub fn heatmap(values: &[f64], height: usize, width: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| Rgb(hot(values[y as usize * width + x as usize])))
}

/// Channel mean of `|t|` for batch item `n` of an `[N, C, H, W]` tensor.
pub fn channel_mean_abs<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<(Vec<f64>, usize, usize)> {
    let (_, c, h, w) = t.dims4("channel mean")?;
    let item = t.batch_item(n)?;
    let mut out = vec![0.0; h * w];
    for plane in item.data().chunks(h * w) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v.as_f64().abs();
        }
    }
    out.iter_mut().for_each(|o| *o /= c as f64);
    Ok((out, h, w))
}

/// Named heatmaps for batch item `n`: `mask_stage{l}`, `diff_stage{l}` for every
/// stage at its own resolution, then `fused` at input resolution. A disabled mask
/// path renders as the constant all-ones mask it stands for.
pub fn render<T: Scalar>(inference: &Inference<T>, n: usize) -> Result<Vec<(String, RgbImage)>> {
    let mut images = Vec::new();
    for (l, (mask, diff)) in inference.masks.iter().zip(&inference.diffs).enumerate() {
        let (_, _, h, w) = diff.dims4("stage difference")?;
        let mask_values = match mask {
            Some(m) => m.batch_item(n)?.to_f64_vec(),
            None => vec![1.0; h * w],
        };
        images.push((format!("mask_stage{}", l + 1), heatmap(&mask_values, h, w)));
        let (mean, h, w) = channel_mean_abs(diff, n)?;
        let squashed: Vec<f64> = mean.into_iter().map(squash).collect();
        images.push((format!("diff_stage{}", l + 1), heatmap(&squashed, h, w)));
    }
    let (_, _, h, w) = inference.prob.dims4("fused map")?;
    images.push(("fused".into(), heatmap(&inference.prob.batch_item(n)?.to_f64_vec(), h, w)));
    Ok(images)
}

/// Write [`render`] output as PNG files into `dir`.
pub fn write_heatmaps<T: Scalar>(inference: &Inference<T>, n: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| ApdError::io(dir, e))?;
    render(inference, n)?
        .into_iter()
        .map(|(name, img)| {
            let path = dir.join(format!("{name}.png"));
            img.save(&path).map_err(|e| ApdError::Internal(format!("{}: {e}", path.display())))?;
            Ok(path)
        })
        .collect()
}

//! Bitemporal samples: synthetic generation, tiling, augmentation and the
//! `A/B/label/list` directory layout.

mod augment;
mod io;
mod synth;

pub use augment::{augment, AugPolicy};
pub use io::{
    load_dataset, load_image_rgb, pixel_checksum, sample_seed, save_dataset, save_sample, write_synthetic_dataset,
    Manifest, ManifestEntry, Split, MANIFEST_FILE,
};
pub use synth::{synth_generate, ChangeKind, ChangeRecord, Shape, SynthOutput, SynthSpec};

use apd_autograd::{Scalar, Tensor};

use crate::error::{ApdError, Result};

/// Co-registered image pair with its change label. Images are planar RGB in
/// `[0, 1]` (`3 * H * W`), the label is `H * W` bytes in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub x0: Vec<f32>,
    pub x1: Vec<f32>,
    pub label: Vec<u8>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let hw = self.height * self.width;
        if self.x0.len() != 3 * hw || self.x1.len() != 3 * hw || self.label.len() != hw {
            return Err(ApdError::invalid(format!("sample {} is not spatially congruent", self.id)));
        }
        if self.label.iter().any(|&v| v > 1) {
            return Err(ApdError::invalid(format!("sample {} has a non-binary label", self.id)));
        }
        if self.x0.iter().chain(&self.x1).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ApdError::invalid(format!("sample {} has pixels outside [0, 1]", self.id)));
        }
        Ok(())
    }

    pub fn changed_pixels(&self) -> u64 {
        self.label.iter().map(|&v| v as u64).sum()
    }

    fn crop(&self, top: usize, left: usize, h: usize, w: usize, id: String) -> Sample {
        let plane = |src: &[f32]| {
            let mut out = Vec::with_capacity(3 * h * w);
            for c in 0..3 {
                for y in top..top + h {
                    let row = (c * self.height + y) * self.width;
                    out.extend_from_slice(&src[row + left..row + left + w]);
                }
            }
            out
        };
        let mut label = Vec::with_capacity(h * w);
        for y in top..top + h {
            label.extend_from_slice(&self.label[y * self.width + left..y * self.width + left + w]);
        }
        Sample {
            id,
            height: h,
            width: w,
            x0: plane(&self.x0),
            x1: plane(&self.x1),
            label,
        }
    }
}

/// Row-major grid of non-overlapping `patch x patch` tiles, ids suffixed `_r{row}_c{col}`.
pub fn tile(sample: &Sample, patch: usize) -> Result<Vec<Sample>> {
    if patch == 0 || !sample.height.is_multiple_of(patch) || !sample.width.is_multiple_of(patch) {
        return Err(ApdError::invalid(format!(
            "patch {patch} does not divide {}x{}",
            sample.height, sample.width
        )));
    }
    let (rows, cols) = (sample.height / patch, sample.width / patch);
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let id = format!("{}_r{r}_c{c}", sample.id);
            tiles.push(sample.crop(r * patch, c * patch, patch, patch, id));
        }
    }
    Ok(tiles)
}

/// Reassemble a row-major grid produced by [`tile`].
pub fn untile(tiles: &[Sample], rows: usize, cols: usize, id: impl Into<String>) -> Result<Sample> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(ApdError::invalid(format!(
            "{} tiles cannot form a {rows}x{cols} grid",
            tiles.len()
        )));
    }
    let (th, tw) = (tiles[0].height, tiles[0].width);
    if tiles.iter().any(|t| (t.height, t.width) != (th, tw)) {
        return Err(ApdError::invalid("tiles differ in size"));
    }
    let (h, w) = (rows * th, cols * tw);
    let mut out = Sample {
        id: id.into(),
        height: h,
        width: w,
        x0: vec![0.0; 3 * h * w],
        x1: vec![0.0; 3 * h * w],
        label: vec![0; h * w],
    };
    for (i, t) in tiles.iter().enumerate() {
        let (top, left) = ((i / cols) * th, (i % cols) * tw);
        for y in 0..th {
            let dst = (top + y) * w + left;
            out.label[dst..dst + tw].copy_from_slice(&t.label[y * tw..(y + 1) * tw]);
            for c in 0..3 {
                let dst = (c * h + top + y) * w + left;
                let src = (c * th + y) * tw;
                out.x0[dst..dst + tw].copy_from_slice(&t.x0[src..src + tw]);
                out.x1[dst..dst + tw].copy_from_slice(&t.x1[src..src + tw]);
            }
        }
    }
    Ok(out)
}

/// Stacked model inputs for a set of equally sized samples.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    /// `[N, 1, H, W]` in `{0, 1}`.
    pub labels: Tensor<T>,
}

pub fn make_batch<T: Scalar>(samples: &[&Sample]) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| ApdError::invalid("empty batch"))?;
    let (h, w) = (first.height, first.width);
    let n = samples.len();
    let mut x0 = Vec::with_capacity(n * 3 * h * w);
    let mut x1 = Vec::with_capacity(n * 3 * h * w);
    let mut y = Vec::with_capacity(n * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(ApdError::invalid(format!(
                "sample {} is {}x{}, batch is {h}x{w}",
                s.id, s.height, s.width
            )));
        }
        x0.extend(s.x0.iter().map(|&v| T::from_f32(v).unwrap()));
        x1.extend(s.x1.iter().map(|&v| T::from_f32(v).unwrap()));
        y.extend(s.label.iter().map(|&v| T::from_u8(v).unwrap()));
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        x0: Tensor::from_vec(&[n, 3, h, w], x0)?,
        x1: Tensor::from_vec(&[n, 3, h, w], x1)?,
        labels: Tensor::from_vec(&[n, 1, h, w], y)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Sample {
        let n = h * w;
        Sample {
            id: "ramp".into(),
            height: h,
            width: w,
            x0: (0..3 * n).map(|i| i as f32 / (3 * n) as f32).collect(),
            x1: (0..3 * n).map(|i| 1.0 - i as f32 / (3 * n) as f32).collect(),
            label: (0..n).map(|i| (i % 3 == 0) as u8).collect(),
        }
    }

    #[test]
    fn four_tiles_from_double_size() {
        let s = ramp(8, 8);
        assert_eq!(tile(&s, 4).unwrap().len(), 4);
        let one = tile(&s, 8).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].x0.clone(), one[0].label.clone()), (s.x0.clone(), s.label.clone()));
        assert!(tile(&s, 3).is_err());
        assert!(tile(&s, 0).is_err());
    }

    #[test]
    fn ramp_tiles_follow_index_arithmetic() {
        let s = ramp(4, 4);
        let tiles = tile(&s, 2).unwrap();
        for (t, tile) in tiles.iter().enumerate() {
            let (r, c) = (t / 2, t % 2);
            assert_eq!(tile.id, format!("ramp_r{r}_c{c}"));
            for y in 0..2 {
                for x in 0..2 {
                    let (sy, sx) = (2 * r + y, 2 * c + x);
                    assert_eq!(tile.label[y * 2 + x], s.label[sy * 4 + sx]);
                    for ch in 0..3 {
                        assert_eq!(tile.x0[(ch * 2 + y) * 2 + x], s.x0[(ch * 4 + sy) * 4 + sx]);
                        assert_eq!(tile.x1[(ch * 2 + y) * 2 + x], s.x1[(ch * 4 + sy) * 4 + sx]);
                    }
                }
            }
        }
    }

    #[test]
    fn untile_restores_original() {
        let s = ramp(6, 9);
        let tiles = tile(&s, 3).unwrap();
        let back = untile(&tiles, 2, 3, "ramp").unwrap();
        assert_eq!(back, s);
        assert!(untile(&tiles, 3, 3, "x").is_err());
    }

    #[test]
    fn batch_layout() {
        let a = ramp(2, 2);
        let b = ramp(2, 2);
        let batch: Batch<f64> = make_batch(&[&a, &b]).unwrap();
        assert_eq!(batch.x0.shape(), &[2, 3, 2, 2]);
        assert_eq!(batch.labels.shape(), &[2, 1, 2, 2]);
        assert!(make_batch::<f64>(&[&a, &ramp(2, 3)]).is_err());
    }
}

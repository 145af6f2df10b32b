use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::{synth_generate, ChangeRecord, Shape, SynthSpec};
use super::Sample;
use crate::error::{ApdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = ApdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(ApdError::invalid(format!("unknown split `{other}`"))),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Placement record for one generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub checksum: String,
    /// Sum of the label map; equals the summed change areas.
    pub changed_pixels: u64,
    pub objects: Vec<Shape>,
    pub changes: Vec<ChangeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ApdError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ApdError::Load {
            path: path.into(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| ApdError::Internal(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| ApdError::io(path, e))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// SHA-256 over the 8-bit quantized images followed by the label, hex encoded.
/// Identical for a generated sample and the same sample reloaded from PNG.
pub fn pixel_checksum(sample: &Sample) -> String {
    let mut hasher = Sha256::new();
    hasher.update((sample.height as u64).to_le_bytes());
    hasher.update((sample.width as u64).to_le_bytes());
    for image in [&sample.x0, &sample.x1] {
        hasher.update(image.iter().map(|&v| to_u8(v)).collect::<Vec<_>>());
    }
    hasher.update(&sample.label);
    hex::encode(hasher.finalize())
}

fn load_error(path: &Path, reason: impl ToString) -> ApdError {
    ApdError::Load {
        path: path.into(),
        reason: reason.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(load_error(path, "file not found"));
    }
    image::open(path).map_err(|e| load_error(path, e))
}

/// Planar RGB in `[0, 1]` plus `(height, width)`.
pub fn load_image_rgb(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok((out, h, w))
}

fn load_label(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| (p[0] >= 128) as u8).collect(), h, w))
}

fn read_list(root: &Path, split: Split) -> Result<Vec<String>> {
    let path = root.join("list").join(format!("{split}.txt"));
    let text = fs::read_to_string(&path).map_err(|e| load_error(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn triplet_paths(root: &Path, id: &str) -> [PathBuf; 3] {
    let file = format!("{id}.png");
    [root.join("A").join(&file), root.join("B").join(&file), root.join("label").join(&file)]
}

/// Samples of one split in list order.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<Sample>> {
    read_list(root, split)?
        .into_iter()
        .map(|id| {
            let [a, b, l] = triplet_paths(root, &id);
            let (x0, h, w) = load_image_rgb(&a)?;
            let (x1, h1, w1) = load_image_rgb(&b)?;
            let (label, hl, wl) = load_label(&l)?;
            if (h1, w1) != (h, w) || (hl, wl) != (h, w) {
                return Err(load_error(
                    &a,
                    format!("sample {id}: A is {h}x{w}, B is {h1}x{w1}, label is {hl}x{wl}"),
                ));
            }
            Ok(Sample {
                id,
                height: h,
                width: w,
                x0,
                x1,
                label,
            })
        })
        .collect()
}

fn rgb_image(data: &[f32], h: usize, w: usize) -> RgbImage {
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let hw = h * w;
        Rgb([to_u8(data[i]), to_u8(data[hw + i]), to_u8(data[2 * hw + i])])
    })
}

fn save_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => ApdError::io(path, io),
        other => ApdError::Internal(format!("{}: {other}", path.display())),
    })
}

/// Write one triplet into `root/{A,B,label}/<id>.png`.
pub fn save_sample(root: &Path, sample: &Sample) -> Result<()> {
    sample.validate()?;
    let (h, w) = (sample.height, sample.width);
    let [a, b, l] = triplet_paths(root, &sample.id);
    for dir in [&a, &b, &l] {
        let parent = dir.parent().expect("triplet paths have parents");
        fs::create_dir_all(parent).map_err(|e| ApdError::io(parent, e))?;
    }
    save_png(&rgb_image(&sample.x0, h, w), &a)?;
    save_png(&rgb_image(&sample.x1, h, w), &b)?;
    let label: GrayImage =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([sample.label[y as usize * w + x as usize] * 255]));
    save_png(&label, &l)
}

/// Write all samples and the per-split list files.
pub fn save_dataset(root: &Path, splits: &[(Split, Vec<Sample>)]) -> Result<()> {
    let list_dir = root.join("list");
    fs::create_dir_all(&list_dir).map_err(|e| ApdError::io(&list_dir, e))?;
    for (split, samples) in splits {
        let mut list = String::new();
        for s in samples {
            save_sample(root, s)?;
            list.push_str(&s.id);
            list.push('\n');
        }
        let path = list_dir.join(format!("{split}.txt"));
        fs::write(&path, list).map_err(|e| ApdError::io(&path, e))?;
    }
    Ok(())
}

/// Seed of the `index`-th generated sample (counted across all splits).
pub fn sample_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(index)
}

/// Generate splits of synthetic samples named `{split}_{k:04}` and write them
/// with their list files and `manifest.json`.
pub fn write_synthetic_dataset(root: &Path, spec: &SynthSpec, counts: &[(Split, usize)]) -> Result<Manifest> {
    spec.validate()?;
    let mut splits = Vec::new();
    let mut entries = Vec::new();
    let mut index = 0;
    for &(split, count) in counts {
        let mut samples = Vec::with_capacity(count);
        for k in 0..count {
            let seed = sample_seed(spec.seed, index);
            index += 1;
            let mut out = synth_generate(&SynthSpec { seed, ..spec.clone() })?;
            out.sample.id = format!("{split}_{k:04}");
            entries.push(ManifestEntry {
                id: out.sample.id.clone(),
                split,
                seed,
                checksum: pixel_checksum(&out.sample),
                changed_pixels: out.sample.changed_pixels(),
                objects: out.objects,
                changes: out.changes,
            });
            samples.push(out.sample);
        }
        splits.push((split, samples));
    }
    save_dataset(root, &splits)?;
    let manifest = Manifest {
        spec: spec.clone(),
        samples: entries,
    };
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

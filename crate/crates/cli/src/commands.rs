use std::path::Path;

use apd_autograd::Scalar;
use apd_core::checkpoint::Checkpoint;
use apd_core::config::RunConfig;
use apd_core::data::{load_dataset, load_image_rgb, make_batch, write_synthetic_dataset, Sample, Split};
use apd_core::decoders::binarize;
use apd_core::metrics::{ConfusionCounts, Scores};
use apd_core::model::{Ablation, ApdModel};
use apd_core::train::{predict_probs, Trainer};
use apd_core::viz::write_heatmaps;
use apd_core::ApdError;
use image::{GrayImage, Luma};
use serde::Serialize;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<ApdError> for CliError {
    fn from(e: ApdError) -> Self {
        Self {
            code: if e.is_usage() { 2 } else { 3 },
            message: e.to_string(),
        }
    }
}

/// Where inference commands take the model architecture from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSource {
    Checkpoint,
    Config,
}

pub enum EvalTarget<'a> {
    Model(&'a Path, ModelSource),
    Masks(&'a Path),
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    std::fs::write(path, text).map_err(|e| ApdError::io(path, e).into())
}

fn save_gray(img: &GrayImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|e| CliError {
        code: 3,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

pub fn gen_data(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let g = &config.gen_data;
    let counts = [(Split::Train, g.train), (Split::Val, g.val), (Split::Test, g.test)];
    let manifest = write_synthetic_dataset(out, &g.spec, &counts).map_err(|e| match e {
        ApdError::Io { .. } => CliError::usage(format!("cannot write dataset: {e}")),
        other => other.into(),
    })?;
    print_json(&serde_json::json!({
        "root": out,
        "samples": manifest.samples.len(),
        "train": g.train,
        "val": g.val,
        "test": g.test,
    }));
    Ok(())
}

fn require_dataset(root: &Path) -> Result<(), CliError> {
    if !root.join("list").is_dir() {
        return Err(CliError::usage(format!(
            "dataset root {} has no list/ directory",
            root.display()
        )));
    }
    Ok(())
}

pub fn train(config: RunConfig, overrides: &[String], resume: Option<&Path>) -> Result<(), CliError> {
    require_dataset(&config.paths.data)?;
    let train_set = load_dataset(&config.paths.data, Split::Train)?;
    let val_set = load_dataset(&config.paths.data, Split::Val)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut resumed = ckpt.header.config.with_overrides(overrides)?;
            resumed.paths = config.paths.clone();
            let trainer = Trainer::<f32>::resume(&resumed, &ckpt)?;
            log::info!("resuming at iteration {}", trainer.iteration());
            trainer
        }
        None => Trainer::<f32>::new(&config)?,
    };
    let summary = trainer.run(&train_set, &val_set, &config.paths.run_dir)?;
    print_json(&serde_json::json!({
        "iterations": summary.iterations,
        "best_val_f1": summary.best_val_f1,
        "log": summary.log,
        "best_checkpoint": summary.best_checkpoint,
        "last_checkpoint": summary.last_checkpoint,
    }));
    Ok(())
}

fn load_model(config: &RunConfig, checkpoint: &Path, source: ModelSource) -> Result<ApdModel<f32>, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model_config = match source {
        ModelSource::Checkpoint => &ckpt.header.config.model,
        ModelSource::Config => &config.model,
    };
    let mut model = ApdModel::new(model_config, 0)?;
    ckpt.restore_params(model.store_mut())?;
    Ok(model)
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    split: Split,
    samples: usize,
    #[serde(flatten)]
    scores: Scores,
    counts: ConfusionCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    toggles: Option<Ablation>,
}

fn mask_image(mask: &[u8], height: usize, width: usize) -> GrayImage {
    GrayImage::from_fn(width as u32, height as u32, |x, y| Luma([mask[y as usize * width + x as usize] * 255]))
}

fn load_mask(path: &Path, sample: &Sample) -> Result<Vec<u8>, CliError> {
    let img = image::open(path)
        .map_err(|e| ApdError::Load {
            path: path.into(),
            reason: e.to_string(),
        })?
        .to_luma8();
    if (img.height() as usize, img.width() as usize) != (sample.height, sample.width) {
        return Err(CliError::usage(format!(
            "mask {} is {}x{}, sample {} is {}x{}",
            path.display(),
            img.height(),
            img.width(),
            sample.id,
            sample.height,
            sample.width
        )));
    }
    Ok(img.pixels().map(|p| u8::from(p[0] >= 128)).collect())
}

pub fn eval(
    config: &RunConfig,
    target: EvalTarget<'_>,
    data: &Path,
    split: Split,
    out: Option<&Path>,
    save_masks: Option<&Path>,
) -> Result<(), CliError> {
    require_dataset(data)?;
    let samples = load_dataset(data, split)?;
    let (masks, toggles) = match target {
        EvalTarget::Model(ckpt, source) => {
            let model = load_model(config, ckpt, source)?;
            let probs = predict_probs(&model, &samples, config.optim.batch_size)?;
            (probs.iter().map(|p| binarize(p)).collect::<Vec<_>>(), Some(model.config().ablation))
        }
        EvalTarget::Masks(dir) => {
            let masks = samples
                .iter()
                .map(|s| load_mask(&dir.join(format!("{}.png", s.id)), s))
                .collect::<Result<Vec<_>, _>>()?;
            (masks, None)
        }
    };
    let mut counts = ConfusionCounts::default();
    for (mask, sample) in masks.iter().zip(&samples) {
        counts = counts.accumulate(mask, &sample.label)?;
    }
    if let Some(dir) = save_masks {
        std::fs::create_dir_all(dir).map_err(|e| ApdError::io(dir, e))?;
        for (mask, s) in masks.iter().zip(&samples) {
            save_gray(&mask_image(mask, s.height, s.width), &dir.join(format!("{}.png", s.id)))?;
        }
    }
    let report = MetricsReport {
        split,
        samples: samples.len(),
        scores: counts.summarize(),
        counts,
        toggles,
    };
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    print_json(&report);
    Ok(())
}

fn load_pair(a: &Path, b: &Path) -> Result<Sample, CliError> {
    let (x0, h, w) = load_image_rgb(a)?;
    let (x1, h1, w1) = load_image_rgb(b)?;
    if (h, w) != (h1, w1) {
        return Err(CliError::usage(format!(
            "image sizes differ: {} is {h}x{w}, {} is {h1}x{w1}",
            a.display(),
            b.display()
        )));
    }
    let id = a.file_stem().map_or_else(|| "pair".into(), |s| s.to_string_lossy().into_owned());
    Ok(Sample {
        id,
        height: h,
        width: w,
        x0,
        x1,
        label: vec![0; h * w],
    })
}

pub fn predict(
    config: &RunConfig,
    checkpoint: &Path,
    source: ModelSource,
    a: &Path,
    b: &Path,
    out: &Path,
    prob_out: Option<&Path>,
) -> Result<(), CliError> {
    let pair = load_pair(a, b)?;
    let model = load_model(config, checkpoint, source)?;
    let prob = predict_probs(&model, std::slice::from_ref(&pair), 1)?.remove(0);
    let mask = binarize(&prob);
    save_gray(&mask_image(&mask, pair.height, pair.width), out)?;
    if let Some(path) = prob_out {
        let w = pair.width;
        let img = GrayImage::from_fn(w as u32, pair.height as u32, |x, y| {
            let p = prob[y as usize * w + x as usize].as_f64();
            Luma([(p.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        save_gray(&img, path)?;
    }
    print_json(&serde_json::json!({
        "height": pair.height,
        "width": pair.width,
        "changed_pixels": mask.iter().map(|&v| v as u64).sum::<u64>(),
        "mask": out,
    }));
    Ok(())
}

pub fn visualize(
    config: &RunConfig,
    checkpoint: &Path,
    source: ModelSource,
    a: &Path,
    b: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let pair = load_pair(a, b)?;
    let model = load_model(config, checkpoint, source)?;
    let batch = make_batch::<f32>(&[&pair])?;
    let inference = model.infer(&batch.x0, &batch.x1)?;
    let files = write_heatmaps(&inference, 0, out_dir)?;
    print_json(&serde_json::json!({ "files": files }));
    Ok(())
}

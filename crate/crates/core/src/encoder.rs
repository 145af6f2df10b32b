//! Siamese hierarchical encoder with a GIDE block after every stage.
//!
//! Both images go through each stage with the same weights (stacked along the
//! batch axis), then GIDE aligns the two feature maps, predicts a coarse change
//! mask from their (optionally perturbed) difference, and gates the features
//! consumed by the next stage.

use apd_autograd::{Conv2dOptions, ParamStore, Scalar, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentParams, ContextConfig};
use crate::error::{ApdError, Result};
use crate::nn::{BatchNorm, Conv, ConvBnRelu, Ctx};
use crate::perturbation::{
    modulate, perturbed_difference, sample_perturbation, Granularity, MaskHead, PerturbationVector,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Per stage: a stride-2 3x3 conv-bn-relu followed by a stride-1 one.
    #[default]
    Desk,
    /// 3x3 stem, then two residual basic blocks per stage (randomly initialized).
    Resnet18,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    /// Channel width of each stage; the stage count is `widths.len()`.
    pub widths: Vec<usize>,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Desk,
            widths: vec![16, 32, 64, 128],
            in_channels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn resnet18() -> Self {
        Self {
            backbone: Backbone::Resnet18,
            widths: vec![64, 128, 256, 512],
            in_channels: 3,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(ApdError::Config(format!(
                "encoder needs at least 2 stages, got {}",
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) || self.in_channels == 0 {
            return Err(ApdError::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of every stage for an `h x w` input; each stage halves (rounding up).
    pub fn stage_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut size = (h, w);
        self.widths
            .iter()
            .map(|_| {
                size = (size.0.div_ceil(2), size.1.div_ceil(2));
                size
            })
            .collect()
    }
}

/// GIDE behavior shared by all stages.
#[derive(Debug, Clone, PartialEq)]
pub struct GideSettings {
    pub alignment: bool,
    /// When off, the mask head is bypassed (`M = 1`) and no perturbation is drawn.
    pub perturbation: bool,
    pub context: ContextConfig,
    pub mask_ratio: f64,
    pub granularity: Granularity,
}

impl Default for GideSettings {
    fn default() -> Self {
        Self {
            alignment: true,
            perturbation: true,
            context: ContextConfig::default(),
            mask_ratio: 0.25,
            granularity: Granularity::PerBatch,
        }
    }
}

/// Source of the per-stage perturbation vectors.
pub enum PerturbMode<'a> {
    /// Inference: the mask head sees the plain difference.
    Off,
    /// Training: fresh vectors drawn from `rng`.
    Random(&'a mut ChaCha8Rng),
    /// Given vectors per stage, each entry one shared vector or one per batch item.
    Fixed(&'a [Vec<PerturbationVector>]),
}

/// GIDE results for one stage.
#[derive(Clone, Copy)]
pub struct GideOutput<'t, T> {
    /// Mask-gated aligned features passed to the next stage.
    pub f0: Var<'t, T>,
    pub f1: Var<'t, T>,
    /// Mask-gated unperturbed difference.
    pub diff: Var<'t, T>,
    /// Coarse mask `[N,1,H,W]`; `None` when the mask path is disabled.
    pub mask: Option<Var<'t, T>>,
}

pub struct FeaturePyramid<'t, T> {
    pub stages: Vec<GideOutput<'t, T>>,
    /// Stage outputs of the backbone before GIDE, per stream.
    pub raw: Vec<(Var<'t, T>, Var<'t, T>)>,
}

impl<'t, T> FeaturePyramid<'t, T> {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn last_raw(&self) -> (Var<'t, T>, Var<'t, T>)
    where
        T: Scalar,
    {
        *self.raw.last().expect("pyramid has stages")
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBnRelu,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv::new(
                    store,
                    rng,
                    &format!("{name}.down.conv"),
                    cin,
                    cout,
                    1,
                    Conv2dOptions::strided(1, stride),
                    false,
                ),
                BatchNorm::new(store, &format!("{name}.down.bn"), cout),
            )
        });
        Self {
            conv1: ConvBnRelu::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride),
            conv2: Conv::new(
                store,
                rng,
                &format!("{name}.conv2"),
                cout,
                cout,
                3,
                Conv2dOptions::same(3),
                false,
            ),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout),
            shortcut,
        }
    }

    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn2.forward(ctx, &self.conv2.forward(ctx, &y)?)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(ctx, &conv.forward(ctx, x)?)?,
            None => *x,
        };
        Ok(y.add(&skip)?.relu())
    }
}

#[derive(Debug, Clone)]
enum StageBlocks {
    Desk(ConvBnRelu, ConvBnRelu),
    Residual(BasicBlock, BasicBlock),
}

#[derive(Debug, Clone)]
struct GideParams {
    align: AlignmentParams,
    mask: MaskHead,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    stem: Option<ConvBnRelu>,
    stages: Vec<StageBlocks>,
    gide: Vec<GideParams>,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let stem_width = 64.min(config.widths[0]);
        let stem = (config.backbone == Backbone::Resnet18)
            .then(|| ConvBnRelu::new(store, rng, "encoder.stem", config.in_channels, stem_width, 3, 1));
        let mut cin = match config.backbone {
            Backbone::Desk => config.in_channels,
            Backbone::Resnet18 => stem_width,
        };
        let mut stages = Vec::new();
        let mut gide = Vec::new();
        for (l, &c) in config.widths.iter().enumerate() {
            let name = format!("encoder.stage{}", l + 1);
            stages.push(match config.backbone {
                Backbone::Desk => StageBlocks::Desk(
                    ConvBnRelu::new(store, rng, &format!("{name}.0"), cin, c, 3, 2),
                    ConvBnRelu::new(store, rng, &format!("{name}.1"), c, c, 3, 1),
                ),
                Backbone::Resnet18 => StageBlocks::Residual(
                    BasicBlock::new(store, rng, &format!("{name}.0"), cin, c, 2),
                    BasicBlock::new(store, rng, &format!("{name}.1"), c, c, 1),
                ),
            });
            let gname = format!("gide{}", l + 1);
            gide.push(GideParams {
                align: AlignmentParams::new(store, rng, &format!("{gname}.align"), c),
                mask: MaskHead::new(store, rng, &format!("{gname}.mask"), c),
            });
            cin = c;
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            gide,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Backbone stage `l` (0-based) on a single stream, without GIDE.
    pub fn stage_forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, l: usize, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let stage = self
            .stages
            .get(l)
            .ok_or_else(|| ApdError::invalid(format!("stage {l} out of range")))?;
        let x = match (&self.stem, l) {
            (Some(stem), 0) => stem.forward(ctx, x)?,
            _ => *x,
        };
        match stage {
            StageBlocks::Desk(a, b) => b.forward(ctx, &a.forward(ctx, &x)?),
            StageBlocks::Residual(a, b) => b.forward(ctx, &a.forward(ctx, &x)?),
        }
    }

    /// Siamese forward over all stages. Inputs are `[N, C_in, H, W]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        x0: &Var<'t, T>,
        x1: &Var<'t, T>,
        settings: &GideSettings,
        mut mode: PerturbMode<'_>,
    ) -> Result<FeaturePyramid<'t, T>> {
        if x0.shape() != x1.shape() {
            return Err(ApdError::invalid(format!(
                "image pair differs in shape: {:?} vs {:?}",
                x0.shape(),
                x1.shape()
            )));
        }
        let (n, c, _, _) = x0.value().dims4("encoder input")?;
        if c != self.config.in_channels {
            return Err(ApdError::invalid(format!(
                "encoder expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if let PerturbMode::Fixed(vs) = &mode {
            if vs.len() != self.stages.len() {
                return Err(ApdError::invalid(format!(
                    "{} perturbation stages given for {} encoder stages",
                    vs.len(),
                    self.stages.len()
                )));
            }
        }
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut raw = Vec::with_capacity(self.stages.len());
        let (mut a, mut b) = (*x0, *x1);
        for (l, gide) in self.gide.iter().enumerate() {
            // Shared weights: both streams run as one stacked batch.
            let both = self.stage_forward(ctx, l, &Var::concat_batch(&[a, b])?)?;
            let (f0, f1) = (both.slice_batch(0, n)?, both.slice_batch(n, n)?);
            raw.push((f0, f1));
            let (h0, h1) = if settings.alignment {
                gide.align.forward(ctx, &f0, &f1, &settings.context)?
            } else {
                (f0, f1)
            };
            let out = if settings.perturbation {
                let width = self.config.widths[l];
                let drawn;
                let vectors: Option<&[PerturbationVector]> = match &mut mode {
                    PerturbMode::Off => None,
                    PerturbMode::Fixed(vs) => Some(&vs[l]),
                    PerturbMode::Random(rng) => {
                        let count = match settings.granularity {
                            Granularity::PerBatch => 1,
                            Granularity::PerSample => n,
                        };
                        drawn = (0..count)
                            .map(|_| sample_perturbation(width, settings.mask_ratio, &mut **rng))
                            .collect::<Result<Vec<_>>>()?;
                        Some(&drawn)
                    }
                };
                let o_hat = perturbed_difference(&h0, &h1, vectors)?;
                let mask = gide.mask.forward(ctx, &o_hat)?;
                let (g0, g1, diff) = modulate(&h0, &h1, &mask)?;
                GideOutput {
                    f0: g0,
                    f1: g1,
                    diff,
                    mask: Some(mask),
                }
            } else {
                GideOutput {
                    f0: h0,
                    f1: h1,
                    diff: h0.sub(&h1)?,
                    mask: None,
                }
            };
            a = out.f0;
            b = out.f1;
            stages.push(out);
        }
        Ok(FeaturePyramid { stages, raw })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::ReverseEdges;
    use apd_autograd::{NormMode, Tape, Tensor};
    use rand::SeedableRng;

    fn image(n: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * 3 * size * size;
        Tensor::from_vec(&[n, 3, size, size], (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn build(config: &EncoderConfig) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(5), config).unwrap();
        (store, enc)
    }

    #[test]
    fn desk_shapes() {
        let config = EncoderConfig::default();
        let (store, enc) = build(&config);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, NormMode::Running);
        let x = tape.constant(image(1, 64, 1));
        let y = tape.constant(image(1, 64, 2));
        let p = enc
            .forward(&ctx, &x, &y, &GideSettings::default(), PerturbMode::Off)
            .unwrap();
        let expect = [(16, 32), (32, 16), (64, 8), (128, 4)];
        for (s, (c, hw)) in p.stages.iter().zip(expect) {
            assert_eq!(s.diff.shape(), vec![1, c, hw, hw]);
            assert_eq!(s.mask.unwrap().shape(), vec![1, 1, hw, hw]);
        }
        assert_eq!(config.stage_sizes(64, 64), vec![(32, 32), (16, 16), (8, 8), (4, 4)]);
    }

    #[test]
    fn resnet_shapes() {
        let config = EncoderConfig {
            widths: vec![8, 16],
            ..EncoderConfig::resnet18()
        };
        let (store, enc) = build(&config);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, NormMode::Running);
        let x = tape.constant(image(2, 16, 1));
        let p = enc
            .forward(&ctx, &x, &x, &GideSettings::default(), PerturbMode::Off)
            .unwrap();
        assert_eq!(p.stages[1].diff.shape(), vec![2, 16, 4, 4]);
        assert!(store.find("encoder.stage1.0.down.conv.weight").is_some());
    }

    #[test]
    fn rejects_single_stage_and_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let one = EncoderConfig {
            widths: vec![8],
            ..EncoderConfig::default()
        };
        assert!(Encoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &one).is_err());
        let (store, enc) = build(&EncoderConfig::default());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, NormMode::Running);
        let r = enc.forward(
            &ctx,
            &tape.constant(image(1, 16, 1)),
            &tape.constant(image(1, 8, 1)),
            &GideSettings::default(),
            PerturbMode::Off,
        );
        assert!(matches!(r, Err(ApdError::InvalidInput(_))));
    }

    #[test]
    fn identical_inputs_give_zero_differences() {
        let (store, enc) = build(&EncoderConfig::default());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, NormMode::Running);
        let x = tape.constant(image(1, 32, 3));
        let settings = GideSettings {
            context: ContextConfig {
                reverse_edges: ReverseEdges::Query,
                ..ContextConfig::default()
            },
            ..GideSettings::default()
        };
        let p = enc.forward(&ctx, &x, &x, &settings, PerturbMode::Off).unwrap();
        for s in &p.stages {
            assert!(s.diff.value().data().iter().all(|&v| v == 0.0));
        }
        // without alignment the streams never mix, so any reverse-edge rule works
        let plain = GideSettings {
            alignment: false,
            ..GideSettings::default()
        };
        let p = enc.forward(&ctx, &x, &x, &plain, PerturbMode::Off).unwrap();
        for s in &p.stages {
            assert!(s.diff.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let (store, enc) = build(&EncoderConfig::default());
        let run = || {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, NormMode::Running);
            let p = enc
                .forward(
                    &ctx,
                    &tape.constant(image(2, 32, 4)),
                    &tape.constant(image(2, 32, 5)),
                    &GideSettings::default(),
                    PerturbMode::Off,
                )
                .unwrap();
            p.stages
                .iter()
                .map(|s| (s.diff.value().as_ref().clone(), s.mask.unwrap().value().as_ref().clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn identity_perturbation_matches_inference_bitwise() {
        let (store, enc) = build(&EncoderConfig::default());
        let x0 = image(2, 32, 6);
        let x1 = image(2, 32, 7);
        let settings = GideSettings::default();
        let fixed: Vec<Vec<PerturbationVector>> = enc
            .config()
            .widths
            .iter()
            .map(|&c| vec![PerturbationVector::identity(c)])
            .collect();
        let collect = |mode: PerturbMode| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, NormMode::Running);
            let p = enc
                .forward(&ctx, &tape.constant(x0.clone()), &tape.constant(x1.clone()), &settings, mode)
                .unwrap();
            p.stages
                .iter()
                .flat_map(|s| [s.f0, s.f1, s.diff, s.mask.unwrap()])
                .map(|v| v.value().as_ref().clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(collect(PerturbMode::Off), collect(PerturbMode::Fixed(&fixed)));
    }

    #[test]
    fn random_perturbation_changes_masks_only() {
        let (store, enc) = build(&EncoderConfig::default());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, NormMode::Running);
        let x0 = tape.constant(image(1, 32, 8));
        let x1 = tape.constant(image(1, 32, 9));
        let settings = GideSettings::default();
        let plain = enc.forward(&ctx, &x0, &x1, &settings, PerturbMode::Off).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pert = enc
            .forward(&ctx, &x0, &x1, &settings, PerturbMode::Random(&mut rng))
            .unwrap();
        // stage-1 backbone output is upstream of any perturbation
        assert_eq!(*plain.raw[0].0.value(), *pert.raw[0].0.value());
        assert_ne!(*plain.stages[0].mask.unwrap().value(), *pert.stages[0].mask.unwrap().value());
    }

    #[test]
    fn siamese_stream_equals_single_stream() {
        let (store, enc) = build(&EncoderConfig::default());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, NormMode::Running);
        let x0 = tape.constant(image(2, 32, 10));
        let x1 = tape.constant(image(2, 32, 11));
        let p = enc
            .forward(&ctx, &x0, &x1, &GideSettings::default(), PerturbMode::Off)
            .unwrap();
        let single = enc.stage_forward(&ctx, 0, &x0).unwrap();
        assert_eq!(*single.value(), *p.raw[0].0.value());
        let single = enc.stage_forward(&ctx, 0, &x1).unwrap();
        assert_eq!(*single.value(), *p.raw[0].1.value());
    }

    #[test]
    fn perturbation_off_bypasses_mask() {
        let (store, enc) = build(&EncoderConfig::default());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, NormMode::Running);
        let settings = GideSettings {
            perturbation: false,
            ..GideSettings::default()
        };
        let x0 = tape.constant(image(1, 16, 12));
        let x1 = tape.constant(image(1, 16, 13));
        let p = enc.forward(&ctx, &x0, &x1, &settings, PerturbMode::Off).unwrap();
        for s in &p.stages {
            assert!(s.mask.is_none());
            assert_eq!(*s.diff.value(), *s.f0.sub(&s.f1).unwrap().value());
        }
    }
}

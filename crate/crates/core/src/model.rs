//! The full change detector: encoder, GIDE blocks, dual decoders and loss wiring.

use apd_autograd::{NormMode, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::ContextConfig;
use crate::decoders::{Decoders, Prediction};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid, GideSettings, PerturbMode};
use crate::error::{ApdError, Result};
use crate::losses::{bce_mean, comparative_loss, total_loss_var, LossConfig};
use crate::nn::Ctx;
use crate::perturbation::{deep_supervision_loss, downsample_label, Granularity, LabelDownsample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub alignment: bool,
    pub perturbation: bool,
    pub decoupling: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            alignment: true,
            perturbation: true,
            decoupling: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub mask_ratio: f64,
    pub granularity: Granularity,
    pub label_downsample: LabelDownsample,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.25,
            granularity: Granularity::PerBatch,
            label_downsample: LabelDownsample::Nearest,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub context: ContextConfig,
    pub perturbation: PerturbationConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.context
            .validate()
            .map_err(|e| ApdError::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.perturbation.mask_ratio) {
            return Err(ApdError::Config(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.perturbation.mask_ratio
            )));
        }
        Ok(())
    }

    pub fn gide_settings(&self) -> GideSettings {
        GideSettings {
            alignment: self.ablation.alignment,
            perturbation: self.ablation.perturbation,
            context: self.context,
            mask_ratio: self.perturbation.mask_ratio,
            granularity: self.perturbation.granularity,
        }
    }
}

/// Differentiable loss terms of one batch.
pub struct LossTerms<'t, T> {
    pub change: Var<'t, T>,
    pub deep: Vec<Var<'t, T>>,
    pub comparative: Option<Var<'t, T>>,
    pub total: Var<'t, T>,
}

impl<T: Scalar> LossTerms<'_, T> {
    pub fn deep_sum(&self) -> f64 {
        self.deep.iter().map(|d| d.item()).sum()
    }
}

/// Untracked inference results, batch-major.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub prob: Tensor<T>,
    /// Coarse mask per stage, when the mask path is enabled.
    pub masks: Vec<Option<Tensor<T>>>,
    pub diffs: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct ApdModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    decoders: Decoders,
}

impl<T: Scalar> ApdModel<T> {
    /// Randomly initialized model; parameter registration order is fixed by the config.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut store, &mut rng, &config.encoder)?;
        let decoders = Decoders::new(&mut store, &mut rng, &config.encoder.widths, config.ablation.decoupling);
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            decoders,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, T>,
        x0: &Var<'t, T>,
        x1: &Var<'t, T>,
        mode: PerturbMode<'_>,
    ) -> Result<(FeaturePyramid<'t, T>, Prediction<'t, T>)> {
        let (_, _, h, w) = x0.value().dims4("model input")?;
        let pyramid = self
            .encoder
            .forward(ctx, x0, x1, &self.config.gide_settings(), mode)?;
        let pred = self.decoders.forward(ctx, &pyramid, h, w)?;
        Ok((pyramid, pred))
    }

    /// Change loss on the fused map, deep supervision on every coarse mask and
    /// the comparative term on the last-stage gated features. `labels` is `[N,1,H,W]`.
    pub fn loss<'t>(
        &self,
        pyramid: &FeaturePyramid<'t, T>,
        pred: &Prediction<'t, T>,
        labels: &Tensor<T>,
        cfg: &LossConfig,
    ) -> Result<LossTerms<'t, T>> {
        let change = bce_mean(&pred.prob, labels)?;
        let mode = self.config.perturbation.label_downsample;
        let mut deep = Vec::new();
        for stage in &pyramid.stages {
            if let Some(mask) = stage.mask {
                let (_, _, h, w) = mask.value().dims4("coarse mask")?;
                let y = downsample_label(labels, h, w, mode)?;
                deep.push(deep_supervision_loss(&mask, &y, cfg.deep_supervision)?);
            }
        }
        let last = pyramid.stages.last().expect("pyramid has stages");
        let comparative = if cfg.lambda_comp != 0.0 {
            let (_, _, h, w) = last.f0.value().dims4("last stage")?;
            let y = downsample_label(labels, h, w, mode)?;
            Some(comparative_loss(&last.f0, &last.f1, &y, cfg.gamma, cfg.comparative_form)?)
        } else {
            None
        };
        let total = total_loss_var(&change, &deep, comparative.as_ref(), cfg)?;
        Ok(LossTerms {
            change,
            deep,
            comparative,
            total,
        })
    }

    /// Inference with running normalization statistics and no perturbation.
    pub fn infer(&self, x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Inference<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, NormMode::Running);
        let (pyramid, pred) = self.forward(
            &ctx,
            &tape.constant(x0.clone()),
            &tape.constant(x1.clone()),
            PerturbMode::Off,
        )?;
        Ok(Inference {
            prob: pred.prob.value().as_ref().clone(),
            masks: pyramid
                .stages
                .iter()
                .map(|s| s.mask.map(|m| m.value().as_ref().clone()))
                .collect(),
            diffs: pyramid
                .stages
                .iter()
                .map(|s| s.diff.value().as_ref().clone())
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use apd_autograd::gradcheck::{self, GradCheckOptions};
    use apd_autograd::ParamKind;
    use rand::Rng;

    fn image(n: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * 3 * size * size;
        Tensor::from_vec(&[n, 3, size, size], (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn label(n: usize, size: usize) -> Tensor<f64> {
        let data = (0..n * size * size)
            .map(|i| if (i % size) < size / 2 && (i / size) % size >= 2 { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(&[n, 1, size, size], data).unwrap()
    }

    fn mini() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                widths: vec![4, 4],
                ..EncoderConfig::default()
            },
            context: ContextConfig {
                dilation: 1,
                ..ContextConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_weights_reduce_total_to_change_loss() {
        let model = ApdModel::<f64>::new(&mini(), 1).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, model.store(), NormMode::Batch);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, pred) = model
            .forward(
                &ctx,
                &tape.constant(image(2, 8, 1)),
                &tape.constant(image(2, 8, 2)),
                PerturbMode::Random(&mut rng),
            )
            .unwrap();
        let cfg = LossConfig {
            lambda_deep: 0.0,
            lambda_comp: 0.0,
            ..LossConfig::default()
        };
        let terms = model.loss(&p, &pred, &label(2, 8), &cfg).unwrap();
        assert_eq!(terms.total.item(), terms.change.item());
        let terms = model.loss(&p, &pred, &label(2, 8), &LossConfig::default()).unwrap();
        assert_eq!(terms.deep.len(), 2);
        let expect = terms.change.item() + terms.deep_sum() + terms.comparative.unwrap().item();
        assert!((terms.total.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn ablations_change_structure() {
        let full = ApdModel::<f64>::new(&ModelConfig::default(), 0).unwrap();
        let single = ApdModel::<f64>::new(
            &ModelConfig {
                ablation: Ablation {
                    decoupling: false,
                    ..Ablation::default()
                },
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap();
        assert!(full.store().find("decoder.agnostic.head.weight").is_some());
        assert!(single.store().find("decoder.agnostic.head.weight").is_none());
        let inf = single.infer(&image(1, 16, 3), &image(1, 16, 4)).unwrap();
        assert_eq!(inf.prob.shape(), &[1, 1, 16, 16]);

        let no_mask = ModelConfig {
            ablation: Ablation {
                perturbation: false,
                ..Ablation::default()
            },
            ..ModelConfig::default()
        };
        let m = ApdModel::<f64>::new(&no_mask, 0).unwrap();
        let inf = m.infer(&image(1, 16, 3), &image(1, 16, 4)).unwrap();
        assert!(inf.masks.iter().all(Option::is_none));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ApdModel::<f32>::new(&ModelConfig::default(), 42).unwrap();
        let b = ApdModel::<f32>::new(&ModelConfig::default(), 42).unwrap();
        for id in a.store().ids() {
            assert_eq!(a.store().get(id), b.store().get(id));
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let model = ApdModel::<f64>::new(&mini(), 7).unwrap();
        let store: &'static ParamStore<f64> = Box::leak(Box::new(model.store().clone()));
        let trainable: Vec<_> = store
            .ids()
            .filter(|&id| store.kind(id) == ParamKind::Trainable)
            .collect();
        let mut inputs = vec![image(2, 8, 11), image(2, 8, 12)];
        inputs.extend(trainable.iter().map(|&id| store.get(id).clone()));
        let y = label(2, 8);
        let fixed: Vec<Vec<_>> = vec![
            vec![crate::perturbation::PerturbationVector::from_values(vec![1, -1, 0, 1]).unwrap()],
            vec![crate::perturbation::PerturbationVector::from_values(vec![-1, 1, 1, 0]).unwrap()],
        ];
        let report = gradcheck::check(&inputs, GradCheckOptions::default(), |tape, v| {
            let ctx = Ctx::new(tape, store, NormMode::Batch);
            for (&id, &var) in trainable.iter().zip(&v[2..]) {
                ctx.binder().bind(id, var);
            }
            let (p, pred) = model
                .forward(&ctx, &v[0], &v[1], PerturbMode::Fixed(&fixed))
                .unwrap();
            Ok(model.loss(&p, &pred, &y, &LossConfig::default()).unwrap().total)
        })
        .unwrap();
        assert!(report.checked > 1000);
        assert!(report.passes(1e-3), "{report:?}");
    }
}

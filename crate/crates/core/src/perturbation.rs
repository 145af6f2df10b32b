//! Perturbation-aided coarse difference prediction.
//!
//! During training the stage difference is modulated channel-wise by a random
//! vector over `{-1, 0, +1}` before the mask head sees it. The mask then gates
//! the aligned features and the *unperturbed* difference that flow onward.

use apd_autograd::{Conv2dOptions, ParamStore, Scalar, Tensor, Var};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ApdError, Result};
use crate::losses::{bce_mean, dice_loss, DeepSupervisionForm};
use crate::nn::{Conv, Ctx};

/// Channel modulation with entries in `{-1, 0, +1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationVector {
    values: Vec<i8>,
}

/// Number of zeroed channels: `tau * channels` rounded half away from zero.
pub fn zero_count(channels: usize, tau: f64) -> usize {
    (tau * channels as f64).round() as usize
}

impl PerturbationVector {
    pub fn from_values(values: Vec<i8>) -> Result<Self> {
        if values.is_empty() {
            return Err(ApdError::invalid("perturbation vector must be non-empty"));
        }
        if let Some(bad) = values.iter().find(|v| !matches!(v, -1..=1)) {
            return Err(ApdError::invalid(format!(
                "perturbation entries must be -1, 0 or +1, got {bad}"
            )));
        }
        Ok(Self { values })
    }

    /// All `+1`: the modulation that leaves the difference untouched.
    pub fn identity(channels: usize) -> Self {
        Self {
            values: vec![1; channels],
        }
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }
}

/// Draw `round(tau * channels)` zero positions uniformly without replacement and
/// an independent fair sign for every other channel.
pub fn sample_perturbation(channels: usize, tau: f64, rng: &mut impl Rng) -> Result<PerturbationVector> {
    if channels == 0 {
        return Err(ApdError::invalid("perturbation needs at least one channel"));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(ApdError::invalid(format!("mask ratio must lie in [0, 1), got {tau}")));
    }
    let mut values: Vec<i8> = (0..channels)
        .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
        .collect();
    for i in index::sample(rng, channels, zero_count(channels, tau)) {
        values[i] = 0;
    }
    Ok(PerturbationVector { values })
}

/// How often a fresh vector is drawn within one stage of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One vector shared by the whole batch.
    #[default]
    PerBatch,
    PerSample,
}

fn channel_factors<T: Scalar>(vectors: &[PerturbationVector], batch: usize, channels: usize) -> Result<Tensor<T>> {
    if vectors.len() != 1 && vectors.len() != batch {
        return Err(ApdError::invalid(format!(
            "{} perturbation vectors for a batch of {batch}",
            vectors.len()
        )));
    }
    let mut data = Vec::with_capacity(vectors.len() * channels);
    for v in vectors {
        if v.len() != channels {
            return Err(ApdError::invalid(format!(
                "perturbation vector of length {} applied to {channels} channels",
                v.len()
            )));
        }
        data.extend(v.values.iter().map(|&x| T::from_i8(x).unwrap()));
    }
    Ok(Tensor::from_vec(&[vectors.len(), channels], data)?)
}

/// `(f0 - f1)` with channel `i` scaled by `v[i]`; the plain difference when `v` is `None`.
/// `vectors` holds one shared vector or one per batch item.
pub fn perturbed_difference<'t, T: Scalar>(
    f0: &Var<'t, T>,
    f1: &Var<'t, T>,
    vectors: Option<&[PerturbationVector]>,
) -> Result<Var<'t, T>> {
    let diff = f0.sub(f1)?;
    match vectors {
        None => Ok(diff),
        Some(vs) => {
            let (n, c, _, _) = diff.value().dims4("perturbed_difference")?;
            let factors = channel_factors(vs, n, c)?;
            Ok(diff.mul_channels_const(&factors)?)
        }
    }
}

/// Pixelwise two-layer perceptron `2C -> max(C/2, 1) -> 1` over `[GAP(x), x]`.
#[derive(Debug, Clone)]
pub struct MaskHead {
    pub hidden: Conv,
    pub out: Conv,
}

impl MaskHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        let hidden_width = (channels / 2).max(1);
        let pointwise = Conv2dOptions::default();
        Self {
            hidden: Conv::new(store, rng, &format!("{name}.fc1"), 2 * channels, hidden_width, 1, pointwise, true),
            out: Conv::new(store, rng, &format!("{name}.fc2"), hidden_width, 1, 1, pointwise, true),
        }
    }

    /// Coarse mask `[N,1,H,W]`, strictly inside `(0, 1)` for finite logits.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, o_hat: &Var<'t, T>) -> Result<Var<'t, T>> {
        coarse_mask(ctx, o_hat, self)
    }
}

pub fn coarse_mask<'t, T: Scalar>(ctx: &Ctx<'t, T>, o_hat: &Var<'t, T>, head: &MaskHead) -> Result<Var<'t, T>> {
    let (_, _, h, w) = o_hat.value().dims4("coarse_mask")?;
    let pooled = o_hat.spatial_mean()?.broadcast_spatial(h, w)?;
    let x = Var::concat_channels(&[pooled, *o_hat])?;
    let hidden = head.hidden.forward(ctx, &x)?.relu();
    Ok(head.out.forward(ctx, &hidden)?.sigmoid())
}

/// `(f0 * M, f1 * M, (f0 - f1) * M)` with `M` broadcast over channels.
pub fn modulate<'t, T: Scalar>(
    f0: &Var<'t, T>,
    f1: &Var<'t, T>,
    mask: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    let diff = f0.sub(f1)?;
    Ok((f0.mul_spatial(mask)?, f1.mul_spatial(mask)?, diff.mul_spatial(mask)?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelDownsample {
    /// Target cell `t` takes source index `floor(t * src / dst)`.
    #[default]
    Nearest,
    /// Changed if any source pixel in the covered window is changed.
    Max,
}

/// Resample a binary `[N,1,H,W]` label map to `th x tw`.
pub fn downsample_label<T: Scalar>(y: &Tensor<T>, th: usize, tw: usize, mode: LabelDownsample) -> Result<Tensor<T>> {
    let (n, c, h, w) = y.dims4("downsample_label")?;
    if th == 0 || tw == 0 {
        return Err(ApdError::invalid(format!("degenerate label target {th}x{tw}")));
    }
    if c != 1 {
        return Err(ApdError::invalid(format!("label maps have one channel, got {c}")));
    }
    let mut out = Tensor::zeros(&[n, 1, th, tw]);
    let src = y.data();
    for b in 0..n {
        let plane = &src[b * h * w..(b + 1) * h * w];
        for ty in 0..th {
            for tx in 0..tw {
                let v = match mode {
                    LabelDownsample::Nearest => plane[(ty * h / th) * w + tx * w / tw],
                    LabelDownsample::Max => {
                        let (y0, y1) = (ty * h / th, ((ty + 1) * h).div_ceil(th));
                        let (x0, x1) = (tx * w / tw, ((tx + 1) * w).div_ceil(tw));
                        let mut m = T::zero();
                        for sy in y0..y1.max(y0 + 1).min(h) {
                            for sx in x0..x1.max(x0 + 1).min(w) {
                                m = m.max(plane[sy * w + sx]);
                            }
                        }
                        m
                    }
                };
                out.data_mut()[(b * th + ty) * tw + tx] = v;
            }
        }
    }
    Ok(out)
}

/// Auxiliary loss of one coarse mask against its stage-resolution label.
pub fn deep_supervision_loss<'t, T: Scalar>(
    mask: &Var<'t, T>,
    label: &Tensor<T>,
    form: DeepSupervisionForm,
) -> Result<Var<'t, T>> {
    match form {
        DeepSupervisionForm::Bce => bce_mean(mask, label),
        DeepSupervisionForm::Dice => dice_loss(mask, label),
    }
}

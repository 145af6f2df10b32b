//! Training objective: final change loss, per-stage deep supervision and a
//! comparative regularizer on the last-stage modulated features.

use apd_autograd::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ApdError, Result};

/// Probability clip inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Additive smoothing of the dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepSupervisionForm {
    #[default]
    Bce,
    Dice,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparativeForm {
    /// Changed pixels are pushed to distance at least `gamma`.
    #[default]
    Margin,
    /// Changed pixels are penalized for distance above `gamma`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_deep: f64,
    pub lambda_comp: f64,
    pub gamma: f64,
    pub comparative_form: ComparativeForm,
    pub deep_supervision: DeepSupervisionForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_deep: 1.0,
            lambda_comp: 1.0,
            gamma: 1.0,
            comparative_form: ComparativeForm::Margin,
            deep_supervision: DeepSupervisionForm::Bce,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_deep >= 0.0 && self.lambda_comp >= 0.0) {
            return Err(ApdError::Config("loss weights must be non-negative".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(ApdError::Config(format!("margin gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn check_same<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>, op: &str) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(ApdError::invalid(format!(
            "{op}: prediction {:?} and label {:?} differ in shape",
            p.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities `p` against labels `y`.
///
/// Probabilities are clipped to `[eps, 1 - eps]`. The gradient is taken at the
/// clipped value and passed straight through the clip, so saturated
/// predictions still receive the corrective `(p - y) / (p (1 - p))` signal.
pub fn bce_mean<'t, T: Scalar>(p: &Var<'t, T>, y: &Tensor<T>) -> Result<Var<'t, T>> {
    let pv = p.value();
    check_same(&pv, y, "binary cross-entropy")?;
    let eps = T::from_f64_lossy(BCE_EPS);
    let one = T::one();
    let m = T::from_usize(pv.numel().max(1)).unwrap();
    let clipped = pv.map(|v| v.max(eps).min(one - eps));
    let total: T = clipped
        .data()
        .iter()
        .zip(y.data())
        .map(|(&q, &t)| t * q.ln() + (one - t) * (one - q).ln())
        .sum();
    let value = Tensor::scalar(-total / m);
    let y = y.clone();
    Ok(p.tape().custom(&[*p], value, move |g| {
        let scale = g.data()[0] / m;
        let grad = clipped
            .zip_map(&y, "bce backward", |q, t| scale * (q - t) / (q * (one - q)))
            .expect("shapes checked in forward");
        vec![Some(grad)]
    }))
}

/// Scalar reference of [`bce_mean`].
pub fn bce_value(p: &[f64], y: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&q, &t)| {
            let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
            t * q.ln() + (1.0 - t) * (1.0 - q).ln()
        })
        .sum();
    -total / p.len().max(1) as f64
}

/// `1 - (2 sum(M Y) + s) / (sum M + sum Y + s)` with `s = 1`.
pub fn dice_loss<'t, T: Scalar>(m: &Var<'t, T>, y: &Tensor<T>) -> Result<Var<'t, T>> {
    let mv = m.value();
    check_same(&mv, y, "dice loss")?;
    let s = T::from_f64_lossy(DICE_SMOOTH);
    let two = T::from_f64_lossy(2.0);
    let inter: T = mv.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
    let denom = mv.sum() + y.sum() + s;
    let num = two * inter + s;
    let value = Tensor::scalar(T::one() - num / denom);
    let y = y.clone();
    Ok(m.tape().custom(&[*m], value, move |g| {
        let gs = g.data()[0];
        // d/dM_i of -(num/denom) = -(2 y_i denom - num) / denom^2
        let grad = y.map(|t| -gs * (two * t * denom - num) / (denom * denom));
        vec![Some(grad)]
    }))
}

/// Per-pixel hinge regularizer on the Euclidean channel distance between the
/// two streams, averaged over all `N * H * W` pixels of `[N,C,H,W]` inputs.
/// `y` is `[N,1,H,W]`.
pub fn comparative_loss<'t, T: Scalar>(
    f0: &Var<'t, T>,
    f1: &Var<'t, T>,
    y: &Tensor<T>,
    gamma: f64,
    form: ComparativeForm,
) -> Result<Var<'t, T>> {
    let a = f0.value();
    let b = f1.value();
    if a.shape() != b.shape() {
        return Err(ApdError::invalid(format!(
            "comparative loss: features {:?} and {:?} differ in shape",
            a.shape(),
            b.shape()
        )));
    }
    let (n, c, h, w) = a.dims4("comparative_loss")?;
    if y.shape() != [n, 1, h, w] {
        return Err(ApdError::invalid(format!(
            "comparative loss: label {:?} does not match features {:?}",
            y.shape(),
            a.shape()
        )));
    }
    let hw = h * w;
    let gamma = T::from_f64_lossy(gamma);
    let count = T::from_usize((n * hw).max(1)).unwrap();
    let mut dist = vec![T::zero(); n * hw];
    for bi in 0..n {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            for p in 0..hw {
                let d = a.data()[off + p] - b.data()[off + p];
                dist[bi * hw + p] += d * d;
            }
        }
    }
    dist.iter_mut().for_each(|d| *d = d.sqrt());
    // dL/dd per pixel
    let mut slope = vec![T::zero(); n * hw];
    let mut total = T::zero();
    for (i, (&d, &t)) in dist.iter().zip(y.data()).enumerate() {
        let (changed, dchanged) = match form {
            ComparativeForm::Margin if d < gamma => (gamma - d, -T::one()),
            ComparativeForm::Literal if d > gamma => (d - gamma, T::one()),
            _ => (T::zero(), T::zero()),
        };
        total += t * changed + (T::one() - t) * d;
        slope[i] = t * dchanged + (T::one() - t);
    }
    let value = Tensor::scalar(total / count);
    let shape = a.shape().to_vec();
    Ok(f0.tape().custom(&[*f0, *f1], value, move |g| {
        let gs = g.data()[0] / count;
        let mut ga = Tensor::zeros(&shape);
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for p in 0..hw {
                    let d = dist[bi * hw + p];
                    // subgradient 0 at coincident features
                    if d > T::zero() {
                        let diff = a.data()[off + p] - b.data()[off + p];
                        ga.data_mut()[off + p] = gs * slope[bi * hw + p] * diff / d;
                    }
                }
            }
        }
        let gb = ga.map(|v| -v);
        vec![Some(ga), Some(gb)]
    }))
}

/// Loss components of one step, as plain numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossParts {
    pub change: f64,
    pub deep: Vec<f64>,
    pub comparative: f64,
}

impl LossParts {
    pub fn deep_sum(&self) -> f64 {
        self.deep.iter().sum()
    }
}

/// `change + lambda_deep * sum(deep) + lambda_comp * comparative`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<f64> {
    let all = std::iter::once(parts.change)
        .chain(parts.deep.iter().copied())
        .chain(std::iter::once(parts.comparative));
    for v in all {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(ApdError::Internal(format!("loss component {v} is negative or non-finite")));
        }
    }
    Ok(parts.change + cfg.lambda_deep * parts.deep_sum() + cfg.lambda_comp * parts.comparative)
}

/// Differentiable counterpart of [`total_loss`]. Zero-weighted terms are dropped
/// from the graph so the result equals `change` exactly when both weights are 0.
pub fn total_loss_var<'t, T: Scalar>(
    change: &Var<'t, T>,
    deep: &[Var<'t, T>],
    comparative: Option<&Var<'t, T>>,
    cfg: &LossConfig,
) -> Result<Var<'t, T>> {
    let mut total = *change;
    if cfg.lambda_deep != 0.0 && !deep.is_empty() {
        let mut sum = deep[0];
        for d in &deep[1..] {
            sum = sum.add(d)?;
        }
        total = total.add(&sum.scale(cfg.lambda_deep))?;
    }
    if let Some(comp) = comparative.filter(|_| cfg.lambda_comp != 0.0) {
        total = total.add(&comp.scale(cfg.lambda_comp))?;
    }
    Ok(total)
}

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Current batch statistics; running averages are updated.
    Batch,
    /// Stored running averages (inference).
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

pub struct BatchNormOutput<'t, T> {
    pub output: Var<'t, T>,
    /// New running statistics, present in [`NormMode::Batch`].
    pub updated: Option<BatchNormStats<T>>,
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Per-channel batch normalization of an NCHW tensor with affine `gamma`, `beta` (`[C]`).
    pub fn batch_norm(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        running: &BatchNormStats<T>,
        mode: NormMode,
        eps: f64,
        momentum: f64,
    ) -> Result<BatchNormOutput<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("batch_norm")?;
        let gv = gamma.value();
        let bv = beta.value();
        for t in [gv.shape(), bv.shape(), running.mean.shape(), running.var.shape()] {
            if t != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: vec![c],
                    rhs: t.to_vec(),
                });
            }
        }
        let hw = h * w;
        let m = n * hw;
        if mode == NormMode::Batch && m < 2 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                reason: "batch statistics need at least two values per channel".into(),
            });
        }
        let eps = T::from_f64_lossy(eps);
        let (mean, var) = match mode {
            NormMode::Batch => channel_moments(&x, n, c, hw),
            NormMode::Running => (running.mean.data().to_vec(), running.var.data().to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
                for i in base..base + hw {
                    let xh = (x.data()[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = ga * xh + be;
                }
            }
        }
        let value = Tensor::from_vec(x.shape(), out)?;
        let shape = x.shape().to_vec();
        let gamma_v = gv.clone();
        let output = self
            .tape
            .custom(&[*self, *gamma, *beta], value, move |g| {
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); gd.len()];
                match mode {
                    NormMode::Running => {
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * hw;
                                let s = gamma_v.data()[ch] * inv_std[ch];
                                for i in base..base + hw {
                                    dx[i] = gd[i] * s;
                                }
                            }
                        }
                    }
                    NormMode::Batch => {
                        let mf = T::from_usize(m).unwrap();
                        for ch in 0..c {
                            // sums of dxhat and dxhat * xhat reduce to dbeta / dgamma times gamma
                            let ga = gamma_v.data()[ch];
                            let sum_dxhat = dbeta[ch] * ga;
                            let sum_dxhat_xhat = dgamma[ch] * ga;
                            let k = inv_std[ch] / mf;
                            for b in 0..n {
                                let base = (b * c + ch) * hw;
                                for i in base..base + hw {
                                    dx[i] = k * (mf * gd[i] * ga - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&shape, dx).unwrap()),
                    Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                    Some(Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            });
        let updated = match mode {
            NormMode::Running => None,
            NormMode::Batch => {
                let mom = T::from_f64_lossy(momentum);
                let keep = T::one() - mom;
                let unbias = T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap();
                let new_mean = running
                    .mean
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| keep * r + mom * b)
                    .collect();
                let new_var = running
                    .var
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| keep * r + mom * b * unbias)
                    .collect();
                Some(BatchNormStats {
                    mean: Tensor::from_vec(&[c], new_mean)?,
                    var: Tensor::from_vec(&[c], new_var)?,
                })
            }
        };
        Ok(BatchNormOutput { output, updated })
    }
}

fn channel_moments<T: Scalar>(x: &Tensor<T>, n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let mf = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    for b in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (b * c + ch) * hw;
            *m += x.data()[base..base + hw].iter().copied().sum::<T>();
        }
    }
    for m in mean.iter_mut() {
        *m /= mf;
    }
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for (ch, v) in var.iter_mut().enumerate() {
            let base = (b * c + ch) * hw;
            let mu = mean[ch];
            *v += x.data()[base..base + hw]
                .iter()
                .map(|&xi| (xi - mu) * (xi - mu))
                .sum::<T>();
        }
    }
    for v in var.iter_mut() {
        *v /= mf;
    }
    (mean, var)
}

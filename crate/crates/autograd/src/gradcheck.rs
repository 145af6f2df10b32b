//! Central finite-difference checks of tape gradients, in `f64`.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly spread). `None` checks all.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-6,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Compare reverse-mode gradients of `f` with central differences at `inputs`.
/// `f` must map leaves (one per input, in order) to a single-element output.
pub fn check<F>(inputs: &[Tensor<f64>], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &leaves)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|&l| grads.get(l)).collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<_> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        Ok(f(&tape, &leaves)?.item())
    };

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => (0..k).map(|j| j * n / k + (n / k) / 2).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let x0 = input.data()[c];
            probe[i].data_mut()[c] = x0 + opts.step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[c] = x0 - opts.step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[c] = x0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, c, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Conv2dOptions;

    fn wave(shape: &[usize], phase: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| (i as f64 * 1.37 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn conv_batchnorm_relu_sigmoid_chain() {
        let inputs = vec![
            wave(&[2, 2, 5, 5], 0.0),
            wave(&[3, 2, 3, 3], 0.3),
            wave(&[3], 0.7),
            wave(&[3], 1.1),
            wave(&[3], 1.9),
        ];
        let report = check(&inputs, GradCheckOptions::default(), |_, v| {
            let y = v[0].conv2d(&v[1], Some(&v[2]), Conv2dOptions::strided(3, 2))?;
            let bn = y.batch_norm(
                &v[3],
                &v[4],
                &crate::BatchNormStats::identity(3),
                crate::NormMode::Batch,
                1e-5,
                0.1,
            )?;
            let z = bn.output.relu().resize_bilinear(5, 5)?.sigmoid();
            let w = z.spatial_mean()?.broadcast_spatial(2, 2)?;
            Ok(w.mul(&w)?.sum())
        })
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }

    #[test]
    fn dilated_conv_and_channel_ops() {
        let inputs = vec![wave(&[1, 2, 6, 6], 0.2), wave(&[2, 2, 3, 3], 0.5), wave(&[1, 1, 6, 6], 0.9)];
        let report = check(&inputs, GradCheckOptions::default(), |_, v| {
            let opts = Conv2dOptions { stride: 1, padding: 2, dilation: 2 };
            let y = v[0].conv2d(&v[1], None, opts)?;
            let m = v[2].sigmoid();
            let z = Var::concat_channels(&[y.mul_spatial(&m)?, v[0]])?;
            let f = Tensor::from_vec(&[1, 4], vec![1.0, -1.0, 0.0, 1.0])?;
            Ok(z.mul_channels_const(&f)?.mul(&z)?.mean())
        })
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }
}

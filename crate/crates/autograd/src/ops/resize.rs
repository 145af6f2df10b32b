use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Interpolation taps along one axis: `(i0, i1, frac)` per output index,
/// half-pixel centers, edges clamped.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Untracked bilinear resize of an NCHW tensor.
pub fn resize_bilinear_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("resize_bilinear")?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(TensorError::Invalid {
            op: "resize_bilinear",
            reason: format!("degenerate size {h}x{w} -> {out_h}x{out_w}"),
        });
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64_lossy(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::from_f64_lossy(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::from_vec(&[n, c, out_h, out_w], out)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Bilinear resize to `out_h x out_w` (half-pixel centers, no corner alignment).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let value = resize_bilinear_forward(&x, out_h, out_w)?;
        let (n, c, h, w) = x.dims4("resize_bilinear")?;
        Ok(self.tape.custom(&[*self], value, move |g| {
            let ty = taps(h, out_h);
            let tx = taps(w, out_w);
            let mut dx = vec![T::zero(); n * c * h * w];
            for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(out_h * out_w)) {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let fy = T::from_f64_lossy(fy);
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let fx = T::from_f64_lossy(fx);
                        let gv = gplane[oy * out_w + ox];
                        let top = gv * (T::one() - fy);
                        let bot = gv * fy;
                        dplane[y0 * w + x0] += top * (T::one() - fx);
                        dplane[y0 * w + x1] += top * fx;
                        dplane[y1 * w + x0] += bot * (T::one() - fx);
                        dplane[y1 * w + x1] += bot * fx;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], dx).unwrap())]
        }))
    }
}

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Scalar};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dOptions {
    /// Stride-1 convolution that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            padding: kernel / 2,
            dilation: 1,
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    opts: Conv2dOptions,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Source index for output `(oy, ox)` and tap `(ky, kx)`, if in bounds.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let o = self.opts;
        let y = (oy * o.stride + ky * o.dilation) as isize - o.padding as isize;
        let x = (ox * o.stride + kx * o.dilation) as isize - o.padding as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match self.src(oy, ox, ky, kx) {
                                Some((y, xx)) => plane[y * self.w + xx],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, xx)) = self.src(oy, ox, ky, kx) {
                                plane[y * self.w + xx] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<(usize, usize, Geometry)> {
    let (n, cin, h, w) = x.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = weight.dims4("conv2d")?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    if opts.stride == 0 || opts.dilation == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            reason: "stride and dilation must be positive".into(),
        });
    }
    let span_h = (kh - 1) * opts.dilation + 1;
    let span_w = (kw - 1) * opts.dilation + 1;
    if h + 2 * opts.padding < span_h || w + 2 * opts.padding < span_w {
        return Err(TensorError::Invalid {
            op: "conv2d",
            reason: format!("kernel span {span_h}x{span_w} exceeds padded input {h}x{w}"),
        });
    }
    let ho = (h + 2 * opts.padding - span_h) / opts.stride + 1;
    let wo = (w + 2 * opts.padding - span_w) / opts.stride + 1;
    Ok((
        n,
        cout,
        Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            opts,
        },
    ))
}

/// Plain (untracked) 2-D cross-correlation, NCHW input and OIHW weight.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<Tensor<T>> {
    let (n, cout, g) = geometry(x, weight, bias, opts)?;
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * cout * p..(b + 1) * cout * p];
        let cols_ref: &[T] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        gemm(cout, k, p, weight.data(), false, cols_ref, false, T::zero(), ob);
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(p).enumerate() {
                let bv = bias.data()[co];
                for v in row.iter_mut() {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, g.ho, g.wo], out)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-D convolution with weight `[C_out, C_in, kh, kw]` and optional bias `[C_out]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        opts: Conv2dOptions,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let wv = weight.value();
        let bv = bias.map(|b| b.value());
        let value = conv2d_forward(&x, &wv, bv.as_deref(), opts)?;
        let (n, cout, g) = geometry(&x, &wv, bv.as_deref(), opts)?;
        let mut inputs = vec![*self, *weight];
        if let Some(b) = bias {
            inputs.push(*b);
        }
        let has_bias = bias.is_some();
        let wants_dx = self.requires_grad();
        Ok(self.tape.custom(&inputs, value, move |gout| {
            conv2d_backward(&x, &wv, gout, n, cout, g, has_bias, wants_dx)
        }))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    x: &Rc<Tensor<T>>,
    weight: &Rc<Tensor<T>>,
    gout: &Tensor<T>,
    n: usize,
    cout: usize,
    g: Geometry,
    has_bias: bool,
    wants_dx: bool,
) -> Vec<Option<Tensor<T>>> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut dw = vec![T::zero(); cout * k];
    let mut dx = if wants_dx {
        vec![T::zero(); n * in_len]
    } else {
        Vec::new()
    };
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let gb = &gout.data()[b * cout * p..(b + 1) * cout * p];
        let cols_ref: &[T] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        gemm(cout, p, k, gb, false, cols_ref, true, T::one(), &mut dw);
        if wants_dx {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(k, cout, p, weight.data(), true, gb, false, T::one(), dxb);
            } else {
                gemm(k, cout, p, weight.data(), true, gb, false, T::zero(), &mut dcols);
                g.col2im_add(&dcols, dxb);
            }
        }
    }
    let mut grads = vec![
        if wants_dx {
            Some(Tensor::from_vec(x.shape(), dx).unwrap())
        } else {
            None
        },
        Some(Tensor::from_vec(weight.shape(), dw).unwrap()),
    ];
    if has_bias {
        let mut db = vec![T::zero(); cout];
        for b in 0..n {
            for (co, row) in gout.data()[b * cout * p..(b + 1) * cout * p]
                .chunks(p)
                .enumerate()
            {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        grads.push(Some(Tensor::from_vec(&[cout], db).unwrap()));
    }
    grads
}

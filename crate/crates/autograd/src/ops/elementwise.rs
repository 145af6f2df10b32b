use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.value().zip_map(&other.value(), "add", |a, b| a + b)?;
        Ok(self
            .tape
            .custom(&[*self, *other], value, |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = self.value().zip_map(&other.value(), "sub", |a, b| a - b)?;
        Ok(self.tape.custom(&[*self, *other], value, |g| {
            vec![Some(g.clone()), Some(g.scale(-T::one()))]
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let value = a.zip_map(&b, "mul", |x, y| x * y)?;
        Ok(self.tape.custom(&[*self, *other], value, move |g| {
            vec![
                Some(g.zip_map(&b, "mul", |gi, bi| gi * bi).unwrap()),
                Some(g.zip_map(&a, "mul", |gi, ai| gi * ai).unwrap()),
            ]
        }))
    }

    pub fn scale(&self, factor: f64) -> Var<'t, T> {
        let f = T::from_f64_lossy(factor);
        let value = self.value().scale(f);
        self.tape.custom(&[*self], value, move |g| vec![Some(g.scale(f))])
    }

    pub fn relu(&self) -> Var<'t, T> {
        let x = self.value();
        let value = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.custom(&[*self], value, move |g| {
            vec![Some(
                g.zip_map(&x, "relu", |gi, xi| if xi > T::zero() { gi } else { T::zero() })
                    .unwrap(),
            )]
        })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let value = self.value().map(sigmoid);
        let y = value.clone();
        self.tape.custom(&[*self], value, move |g| {
            vec![Some(
                g.zip_map(&y, "sigmoid", |gi, yi| gi * yi * (T::one() - yi))
                    .unwrap(),
            )]
        })
    }

    /// Multiply channel `c` of an NCHW tensor by `factors[n or 0, c]`.
    /// `factors` has shape `[1, C]` (shared over the batch) or `[N, C]` and is
    /// treated as a constant.
    pub fn mul_channels_const(&self, factors: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("mul_channels_const")?;
        let per_sample = match factors.shape() {
            [1, fc] if *fc == c => false,
            [fn_, fc] if *fn_ == n && *fc == c => true,
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "mul_channels_const",
                    lhs: x.shape().to_vec(),
                    rhs: other.to_vec(),
                })
            }
        };
        let factors = factors.clone();
        let apply = move |src: &Tensor<T>| {
            let mut out = src.clone();
            let hw = h * w;
            for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let (b, ch) = (i / c, i % c);
                let f = factors.data()[if per_sample { b * c + ch } else { ch }];
                for v in chunk.iter_mut() {
                    *v *= f;
                }
            }
            out
        };
        let value = apply(&x);
        Ok(self.tape.custom(&[*self], value, move |g| vec![Some(apply(g))]))
    }

    /// Broadcast a single-channel map `[N,1,H,W]` over the channels of `self`.
    pub fn mul_spatial(&self, mask: &Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let m = mask.value();
        let (n, c, h, w) = x.dims4("mul_spatial")?;
        if m.shape() != [n, 1, h, w] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_spatial",
                lhs: x.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut value = x.as_ref().clone();
        for (i, chunk) in value.data_mut().chunks_mut(hw).enumerate() {
            let mrow = &m.data()[(i / c) * hw..(i / c + 1) * hw];
            for (v, &mv) in chunk.iter_mut().zip(mrow) {
                *v *= mv;
            }
        }
        Ok(self.tape.custom(&[*self, *mask], value, move |g| {
            let mut gx = g.clone();
            let mut gm = Tensor::zeros(m.shape());
            for (i, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                let b = i / c;
                let mrow = &m.data()[b * hw..(b + 1) * hw];
                let xrow = &x.data()[i * hw..(i + 1) * hw];
                let gmrow = &mut gm.data_mut()[b * hw..(b + 1) * hw];
                for p in 0..hw {
                    gmrow[p] += chunk[p] * xrow[p];
                    chunk[p] *= mrow[p];
                }
            }
            vec![Some(gx), Some(gm)]
        }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar(x.sum());
        self.tape
            .custom(&[*self], value, move |g| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

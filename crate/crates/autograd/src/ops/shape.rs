use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let original = x.shape().to_vec();
        let value = x.reshape(shape)?;
        Ok(self.tape.custom(&[*self], value, move |g| {
            vec![Some(g.reshape(&original).expect("same numel"))]
        }))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_channels",
            reason: "no inputs".into(),
        })?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4("concat_channels")?;
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            let (n2, c2, h2, w2) = v.dims4("concat_channels")?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(c2);
        }
        let total: usize = widths.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (v, &c) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::from_vec(&[n, total, h, w], data)?;
        Ok(first.tape.custom(parts, value, move |g| {
            let mut grads: Vec<Vec<T>> = widths
                .iter()
                .map(|&c| Vec::with_capacity(n * c * hw))
                .collect();
            let mut offset = 0;
            for _ in 0..n {
                for (gv, &c) in grads.iter_mut().zip(&widths) {
                    gv.extend_from_slice(&g.data()[offset..offset + c * hw]);
                    offset += c * hw;
                }
            }
            grads
                .into_iter()
                .zip(&widths)
                .map(|(gv, &c)| Some(Tensor::from_vec(&[n, c, h, w], gv).unwrap()))
                .collect()
        }))
    }

    /// Stack tensors with equal trailing dimensions along the batch axis.
    pub fn concat_batch(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_batch",
            reason: "no inputs".into(),
        })?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let owned: Vec<Tensor<T>> = values.iter().map(|v| v.as_ref().clone()).collect();
        let value = Tensor::cat_batch(&owned)?;
        let sizes: Vec<(Vec<usize>, usize)> = values
            .iter()
            .map(|v| (v.shape().to_vec(), v.numel()))
            .collect();
        Ok(first.tape.custom(parts, value, move |g| {
            let mut offset = 0;
            sizes
                .iter()
                .map(|(shape, len)| {
                    let part = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    Some(Tensor::from_vec(shape, part).unwrap())
                })
                .collect()
        }))
    }

    /// Batch items `start..start + len`.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let n = *x.shape().first().ok_or(TensorError::Rank {
            op: "slice_batch",
            expected: 1,
            got: Vec::new(),
        })?;
        if start + len > n {
            return Err(TensorError::Invalid {
                op: "slice_batch",
                reason: format!("range {start}..{} exceeds batch {n}", start + len),
            });
        }
        let item = x.numel() / n.max(1);
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let value = Tensor::from_vec(&shape, x.data()[start * item..(start + len) * item].to_vec())?;
        let full = x.shape().to_vec();
        Ok(self.tape.custom(&[*self], value, move |g| {
            let mut out = Tensor::zeros(&full);
            out.data_mut()[start * item..(start + len) * item].copy_from_slice(g.data());
            vec![Some(out)]
        }))
    }

    /// Global average pool: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn spatial_mean(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("spatial_mean")?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw.max(1)).unwrap();
        let data = x
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_vec(&[n, c, 1, 1], data)?;
        Ok(self.tape.custom(&[*self], value, move |g| {
            let mut out = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                out.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], out).unwrap())]
        }))
    }

    /// Tile a `[N,C,1,1]` tensor over an `h x w` grid.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h1, w1) = x.dims4("broadcast_spatial")?;
        if (h1, w1) != (1, 1) {
            return Err(TensorError::Invalid {
                op: "broadcast_spatial",
                reason: format!("expected 1x1 spatial size, got {h1}x{w1}"),
            });
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c * hw);
        for &v in x.data() {
            data.extend(std::iter::repeat_n(v, hw));
        }
        let value = Tensor::from_vec(&[n, c, h, w], data)?;
        Ok(self.tape.custom(&[*self], value, move |g| {
            let data = g.data().chunks(hw).map(|ch| ch.iter().copied().sum()).collect();
            vec![Some(Tensor::from_vec(&[n, c, 1, 1], data).unwrap())]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor, Var};

    #[test]
    fn batch_concat_and_slice_round_trip_gradients() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[2, 2, 1, 1], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let ab = Var::concat_batch(&[a, b]).unwrap();
        assert_eq!(ab.shape(), vec![3, 2, 1, 1]);
        let tail = ab.slice_batch(1, 2).unwrap();
        assert_eq!(tail.value().data(), &[3.0, 4.0, 5.0, 6.0]);
        assert!(ab.slice_batch(2, 2).is_err());
        let w = tape.constant(Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = tail.mul(&w).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(b).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_then_backward_splits() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[2, 2, 1, 1], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = Var::concat_channels(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(Tensor::from_vec(&[2, 3, 1, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let g = tape.backward(c.mul(&w).unwrap().sum()).unwrap();
        assert_eq!(g.get(a).data(), &[1.0, 4.0]);
        assert_eq!(g.get(b).data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn gap_broadcast_roundtrip() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let y = x.spatial_mean().unwrap().broadcast_spatial(2, 2).unwrap();
        assert_eq!(y.value().data(), &[3.0; 4]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).data(), &[1.0; 4]);
    }
}

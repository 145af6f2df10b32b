//! Parameterized layers and the per-pass forward context.

use std::cell::RefCell;

use apd_autograd::{
    BatchNormStats, Conv2dOptions, NormMode, ParamBinder, ParamId, ParamKind, ParamStore, Scalar,
    Tape, Tensor, Var,
};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// State shared by all layers during one forward pass.
pub struct Ctx<'t, T> {
    binder: ParamBinder<'t, T>,
    norm: NormMode,
    bn_updates: RefCell<Vec<(ParamId, ParamId, BatchNormStats<T>)>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>, norm: NormMode) -> Self {
        Self {
            binder: ParamBinder::new(tape, store),
            norm,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.binder.tape()
    }

    pub fn norm(&self) -> NormMode {
        self.norm
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        self.binder.var(id)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape().constant(value)
    }

    pub fn binder(&self) -> &ParamBinder<'t, T> {
        &self.binder
    }

    /// Running-statistics updates recorded in [`NormMode::Batch`]; later
    /// updates to the same layer supersede earlier ones when applied in order.
    pub fn take_bn_updates(&self) -> Vec<(ParamId, ParamId, BatchNormStats<T>)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Write recorded running statistics back into the store.
pub fn apply_bn_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: Vec<(ParamId, ParamId, BatchNormStats<T>)>,
) -> Result<()> {
    for (mean_id, var_id, stats) in updates {
        store.set(mean_id, stats.mean)?;
        store.set(var_id, stats.var)?;
    }
    Ok(())
}

fn kaiming<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOptions,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: Conv2dOptions,
        bias: bool,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            kaiming(rng, &shape, cin * kernel * kernel),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[cout]),
                ParamKind::Trainable,
            )
        });
        Self { weight, bias, opts }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        Ok(x.conv2d(&w, b.as_ref(), self.opts)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                ParamKind::Buffer,
            ),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let store = ctx.binder().store();
        let running = BatchNormStats {
            mean: store.get(self.running_mean).clone(),
            var: store.get(self.running_var).clone(),
        };
        let out = x.batch_norm(
            &ctx.param(self.gamma),
            &ctx.param(self.beta),
            &running,
            ctx.norm(),
            BN_EPS,
            BN_MOMENTUM,
        )?;
        if let Some(stats) = out.updated {
            ctx.bn_updates
                .borrow_mut()
                .push((self.running_mean, self.running_var, stats));
        }
        Ok(out.output)
    }
}

/// Convolution, batch normalization, rectifier.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv::new(
                store,
                rng,
                &format!("{name}.conv"),
                cin,
                cout,
                kernel,
                Conv2dOptions::strided(kernel, stride),
                false,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv.forward(ctx, x)?;
        Ok(self.bn.forward(ctx, &y)?.relu())
    }
}

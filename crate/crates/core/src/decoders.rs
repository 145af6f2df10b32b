//! Asymmetric dual decoder.
//!
//! The content-aware branch starts from both streams' last-stage features and
//! concatenates each stage difference on the way up; the content-agnostic
//! branch sees only differences and merges them by summation. Their logits
//! are added before the sigmoid.

use apd_autograd::{Conv2dOptions, ParamStore, Scalar, Var};
use rand::Rng;

use crate::encoder::FeaturePyramid;
use crate::error::{ApdError, Result};
use crate::nn::{Conv, ConvBnRelu, Ctx};

/// Two cascaded 3x3 conv-bn-relu layers.
#[derive(Debug, Clone)]
struct DecodeBlock {
    /// Content-agnostic blocks project the skip difference to the running width.
    proj: Option<Conv>,
    conv1: ConvBnRelu,
    conv2: ConvBnRelu,
}

impl DecodeBlock {
    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, up: &Var<'t, T>, skip: &Var<'t, T>) -> Result<Var<'t, T>> {
        let fused = match &self.proj {
            Some(proj) => up.add(&proj.forward(ctx, skip)?)?,
            None => Var::concat_channels(&[*up, *skip])?,
        };
        self.conv2.forward(ctx, &self.conv1.forward(ctx, &fused)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    ContentAware,
    ContentAgnostic,
}

#[derive(Debug, Clone)]
pub struct Branch {
    kind: BranchKind,
    entry: ConvBnRelu,
    /// `blocks[i]` produces stage `N - 1 - i` from stage `N - i` (1-based stages).
    blocks: Vec<DecodeBlock>,
    head: Conv,
}

impl Branch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        kind: BranchKind,
        widths: &[usize],
    ) -> Self {
        let last = *widths.last().expect("at least one stage");
        let entry_in = match kind {
            BranchKind::ContentAware => 2 * last,
            BranchKind::ContentAgnostic => last,
        };
        let entry = ConvBnRelu::new(store, rng, &format!("{name}.entry"), entry_in, last, 1, 1);
        let mut blocks = Vec::new();
        for l in (1..widths.len()).rev() {
            let (deep, skip) = (widths[l], widths[l - 1]);
            let bname = format!("{name}.block{l}");
            let (proj, cin) = match kind {
                BranchKind::ContentAware => (None, deep + skip),
                BranchKind::ContentAgnostic => (
                    Some(Conv::new(
                        store,
                        rng,
                        &format!("{bname}.proj"),
                        skip,
                        deep,
                        1,
                        Conv2dOptions::default(),
                        false,
                    )),
                    deep,
                ),
            };
            blocks.push(DecodeBlock {
                proj,
                conv1: ConvBnRelu::new(store, rng, &format!("{bname}.conv1"), cin, skip, 3, 1),
                conv2: ConvBnRelu::new(store, rng, &format!("{bname}.conv2"), skip, skip, 3, 1),
            });
        }
        let head = Conv::new(
            store,
            rng,
            &format!("{name}.head"),
            widths[0],
            1,
            3,
            Conv2dOptions::same(3),
            true,
        );
        Self {
            kind,
            entry,
            blocks,
            head,
        }
    }

    pub fn kind(&self) -> BranchKind {
        self.kind
    }

    /// Logits `[N,1,out_h,out_w]`. `features` holds the two raw last-stage maps
    /// (content-aware) and `diffs` the per-stage differences, shallowest first.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        features: (&Var<'t, T>, &Var<'t, T>),
        diffs: &[Var<'t, T>],
        out_h: usize,
        out_w: usize,
    ) -> Result<Var<'t, T>> {
        if diffs.len() != self.blocks.len() + 1 {
            return Err(ApdError::invalid(format!(
                "decoder built for {} stages received {}",
                self.blocks.len() + 1,
                diffs.len()
            )));
        }
        let entry_in = match self.kind {
            BranchKind::ContentAware => Var::concat_channels(&[*features.0, *features.1])?,
            BranchKind::ContentAgnostic => *diffs.last().expect("checked length"),
        };
        let mut d = self.entry.forward(ctx, &entry_in)?;
        for (block, skip) in self.blocks.iter().zip(diffs.iter().rev().skip(1)) {
            let (_, _, h, w) = skip.value().dims4("decoder skip")?;
            let up = d.resize_bilinear(h, w)?;
            d = block.forward(ctx, &up, skip)?;
        }
        let logits = self.head.forward(ctx, &d)?;
        Ok(logits.resize_bilinear(out_h, out_w)?)
    }
}

/// Final outputs at input resolution.
#[derive(Clone, Copy)]
pub struct Prediction<'t, T> {
    pub aware: Var<'t, T>,
    /// Absent in the single-decoder baseline.
    pub agnostic: Option<Var<'t, T>>,
    /// Fused change probability.
    pub prob: Var<'t, T>,
}

/// `sigmoid(a + b)`.
pub fn fuse<'t, T: Scalar>(a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(ApdError::invalid(format!(
            "logit maps differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.add(b)?.sigmoid())
}

/// Threshold a probability map at 0.5, ties counted as changed.
pub fn binarize<T: Scalar>(prob: &[T]) -> Vec<u8> {
    let half = T::from_f64_lossy(0.5);
    prob.iter().map(|&p| u8::from(p >= half)).collect()
}

#[derive(Debug, Clone)]
pub struct Decoders {
    pub aware: Branch,
    pub agnostic: Option<Branch>,
}

impl Decoders {
    /// `decoupled = false` builds only the content-aware branch.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, widths: &[usize], decoupled: bool) -> Self {
        Self {
            aware: Branch::new(store, rng, "decoder.aware", BranchKind::ContentAware, widths),
            agnostic: decoupled
                .then(|| Branch::new(store, rng, "decoder.agnostic", BranchKind::ContentAgnostic, widths)),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        pyramid: &FeaturePyramid<'t, T>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Prediction<'t, T>> {
        let diffs: Vec<_> = pyramid.stages.iter().map(|s| s.diff).collect();
        let (r0, r1) = pyramid.last_raw();
        let aware = self.aware.forward(ctx, (&r0, &r1), &diffs, out_h, out_w)?;
        let agnostic = match &self.agnostic {
            Some(b) => Some(b.forward(ctx, (&r0, &r1), &diffs, out_h, out_w)?),
            None => None,
        };
        let prob = match &agnostic {
            Some(ag) => fuse(&aware, ag)?,
            None => aware.sigmoid(),
        };
        Ok(Prediction {
            aware,
            agnostic,
            prob,
        })
    }
}

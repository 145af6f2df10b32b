//! Context-aware feature alignment.
//!
//! Each pixel of the stage-`l` map of image 0 is linked to the `n` pixels of
//! image 1 whose *context* features (a parameter-free dilated neighborhood sum)
//! are closest in Euclidean distance. Features are then exchanged along those
//! edges with a mean aggregation and a shared linear map, added residually:
//!
//! ```text
//! F0_hat[p] = F0[p] + W * mean_{q in H(p)} F1[q]
//! F1_hat[q] = F1[q] + W * mean_{p : q in H(p)} F0[p]     (0 when q has no edges)
//! ```
//!
//! The adjacency is rebuilt on every forward pass and never differentiated.

use std::cmp::Ordering;

use apd_autograd::{Conv2dOptions, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ApdError, Result};
use crate::nn::Ctx;

fn default_chunk() -> usize {
    256
}

/// How map-1 pixels receive messages from map 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseEdges {
    /// Reuse the map-0 query edges in reverse, averaging over in-degree.
    #[default]
    Transposed,
    /// Run a second top-`n` query from map 1 into map 0. Identical inputs then
    /// yield identical outputs for any `n`.
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    /// Half width `k` of the `(2k+1)^2` context window.
    pub kernel_half_width: usize,
    /// Dilation `d` between context taps, in pixels.
    pub dilation: usize,
    /// Neighbors `n` per source pixel.
    pub neighbor_count: usize,
    /// Source pixels whose distance rows are materialized at once.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    #[serde(default)]
    pub reverse_edges: ReverseEdges,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            kernel_half_width: 1,
            dilation: 4,
            neighbor_count: 4,
            chunk: default_chunk(),
            reverse_edges: ReverseEdges::Transposed,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_half_width == 0 {
            return Err(ApdError::invalid("context kernel_half_width must be >= 1"));
        }
        if self.dilation == 0 {
            return Err(ApdError::invalid("context dilation must be >= 1"));
        }
        if self.neighbor_count == 0 {
            return Err(ApdError::invalid("neighbor_count must be >= 1"));
        }
        if self.chunk == 0 {
            return Err(ApdError::invalid("context chunk must be >= 1"));
        }
        Ok(())
    }
}

/// Top-`n` neighbor lists from map-0 pixels to map-1 pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    height: usize,
    width: usize,
    n: usize,
    /// Row-major source pixel `p` owns `targets[p*n..(p+1)*n]`, nearest first.
    targets: Vec<u32>,
}

impl NeighborGraph {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn neighbor_count(&self) -> usize {
        self.n
    }

    /// Flat target indices of source pixel `p = u * W + v`.
    pub fn targets_of(&self, p: usize) -> &[u32] {
        &self.targets[p * self.n..(p + 1) * self.n]
    }

    /// Target coordinates `(i, j)` of source pixel `(u, v)`, nearest first.
    pub fn neighbors(&self, u: usize, v: usize) -> Vec<(usize, usize)> {
        self.targets_of(u * self.width + v)
            .iter()
            .map(|&q| (q as usize / self.width, q as usize % self.width))
            .collect()
    }

    /// Number of source pixels linking to each target pixel.
    pub fn in_degree(&self) -> Vec<u32> {
        let mut deg = vec![0u32; self.height * self.width];
        for &q in &self.targets {
            deg[q as usize] += 1;
        }
        deg
    }

    fn check_matches(&self, h: usize, w: usize) -> Result<()> {
        if (self.height, self.width) != (h, w) {
            return Err(ApdError::invalid(format!(
                "graph built for {}x{} applied to {h}x{w} features",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Parameter-free dilated neighborhood sum with zero padding, center tap excluded.
/// Works on any NCHW tensor; the output has the input's shape.
pub fn context_aggregate<T: Scalar>(features: &Tensor<T>, cfg: &ContextConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (_, _, h, w) = features.dims4("context_aggregate")?;
    if h == 0 || w == 0 {
        return Err(ApdError::invalid("context_aggregate needs a non-empty spatial size"));
    }
    let k = cfg.kernel_half_width as isize;
    let d = cfg.dilation as isize;
    let mut out = Tensor::zeros(features.shape());
    for (src, dst) in features
        .data()
        .chunks(h * w)
        .zip(out.data_mut().chunks_mut(h * w))
    {
        for i in -k..=k {
            for j in -k..=k {
                if i == 0 && j == 0 {
                    continue;
                }
                let (dy, dx) = (i * d, j * d);
                for u in 0..h as isize {
                    let y = u + dy;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for v in 0..w as isize {
                        let x = v + dx;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        dst[(u * w as isize + v) as usize] += src[(y * w as isize + x) as usize];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn closer<T: Scalar>(a: (T, u32), b: (T, u32)) -> bool {
    match a.0.as_f64().total_cmp(&b.0.as_f64()) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => a.1 < b.1,
    }
}

/// For every pixel of `c0` (shape `[1,C,H,W]`), the `n` pixels of `c1` with the
/// smallest Euclidean context distance; ties go to the smaller row-major index.
/// At most `chunk` distance rows are held in memory at once.
pub fn build_bipartite_graph<T: Scalar>(
    c0: &Tensor<T>,
    c1: &Tensor<T>,
    n: usize,
    chunk: usize,
) -> Result<NeighborGraph> {
    if c0.shape() != c1.shape() {
        return Err(ApdError::invalid(format!(
            "context maps differ in shape: {:?} vs {:?}",
            c0.shape(),
            c1.shape()
        )));
    }
    let (batch, c, h, w) = c0.dims4("build_bipartite_graph")?;
    if batch != 1 {
        return Err(ApdError::invalid("build_bipartite_graph takes a single sample"));
    }
    let hw = h * w;
    if n == 0 || n > hw {
        return Err(ApdError::invalid(format!(
            "neighbor count {n} outside [1, {hw}]"
        )));
    }
    let chunk = chunk.max(1);
    let (a, b) = (c0.data(), c1.data());
    let mut targets = Vec::with_capacity(hw * n);
    let mut dist = vec![T::zero(); chunk.min(hw) * hw];
    let mut best: Vec<(T, u32)> = Vec::with_capacity(n + 1);
    let mut order: Vec<u32> = Vec::new();
    for start in (0..hw).step_by(chunk) {
        let rows = chunk.min(hw - start);
        let dist = &mut dist[..rows * hw];
        dist.fill(T::zero());
        // Channel-outer accumulation keeps the per-pair summation order 0..C.
        for ch in 0..c {
            let bc = &b[ch * hw..(ch + 1) * hw];
            for r in 0..rows {
                let av = a[ch * hw + start + r];
                let row = &mut dist[r * hw..(r + 1) * hw];
                for (dv, &bv) in row.iter_mut().zip(bc) {
                    let diff = av - bv;
                    *dv += diff * diff;
                }
            }
        }
        for row in dist.chunks(hw) {
            if n * 8 >= hw {
                order.clear();
                order.extend(0..hw as u32);
                order.sort_by(|&x, &y| {
                    row[x as usize]
                        .as_f64()
                        .total_cmp(&row[y as usize].as_f64())
                        .then(x.cmp(&y))
                });
                targets.extend_from_slice(&order[..n]);
            } else {
                best.clear();
                for (q, &dv) in row.iter().enumerate() {
                    let cand = (dv, q as u32);
                    if best.len() == n && !closer(cand, best[n - 1]) {
                        continue;
                    }
                    let pos = best.partition_point(|&e| closer(e, cand));
                    best.insert(pos, cand);
                    best.truncate(n);
                }
                targets.extend(best.iter().map(|e| e.1));
            }
        }
    }
    Ok(NeighborGraph {
        height: h,
        width: w,
        n,
        targets,
    })
}

/// One graph per batch item, from context features of both streams. Maps with
/// fewer than `n` pixels link every source pixel to all of them.
pub fn build_graphs<T: Scalar>(
    f0: &Tensor<T>,
    f1: &Tensor<T>,
    cfg: &ContextConfig,
) -> Result<Vec<NeighborGraph>> {
    if f0.shape() != f1.shape() {
        return Err(ApdError::invalid(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            f0.shape(),
            f1.shape()
        )));
    }
    let c0 = context_aggregate(f0, cfg)?;
    let c1 = context_aggregate(f1, cfg)?;
    let (batch, _, h, w) = f0.dims4("build_graphs")?;
    let n = cfg.neighbor_count.min(h * w);
    (0..batch)
        .map(|i| build_bipartite_graph(&c0.batch_item(i)?, &c1.batch_item(i)?, n, cfg.chunk))
        .collect()
}

fn check_graphs<T: Scalar>(x: &Tensor<T>, graphs: &[NeighborGraph]) -> Result<(usize, usize, usize)> {
    let (batch, c, h, w) = x.dims4("graph aggregation")?;
    if graphs.len() != batch {
        return Err(ApdError::invalid(format!(
            "{} graphs for a batch of {batch}",
            graphs.len()
        )));
    }
    for g in graphs {
        g.check_matches(h, w)?;
    }
    Ok((c, h, w))
}

/// `out[p] = mean_{q in H(p)} f1[q]` per sample.
fn gather_mean<'t, T: Scalar>(f1: &Var<'t, T>, graphs: &[NeighborGraph]) -> Result<Var<'t, T>> {
    let x = f1.value();
    let (c, h, w) = check_graphs(&x, graphs)?;
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for (bi, g) in graphs.iter().enumerate() {
        let inv = T::one() / T::from_usize(g.n).unwrap();
        let base = bi * c * hw;
        for ch in 0..c {
            let src = &x.data()[base + ch * hw..base + (ch + 1) * hw];
            let dst = &mut out.data_mut()[base + ch * hw..base + (ch + 1) * hw];
            for (p, d) in dst.iter_mut().enumerate() {
                let s: T = g.targets_of(p).iter().map(|&q| src[q as usize]).sum();
                *d = s * inv;
            }
        }
    }
    let graphs = graphs.to_vec();
    let shape = x.shape().to_vec();
    Ok(f1.tape().custom(&[*f1], out, move |grad| {
        let mut gx = Tensor::zeros(&shape);
        for (bi, g) in graphs.iter().enumerate() {
            let inv = T::one() / T::from_usize(g.n).unwrap();
            let base = bi * c * hw;
            for ch in 0..c {
                let gs = &grad.data()[base + ch * hw..base + (ch + 1) * hw];
                let gd = &mut gx.data_mut()[base + ch * hw..base + (ch + 1) * hw];
                for (p, &gv) in gs.iter().enumerate() {
                    let share = gv * inv;
                    for &q in g.targets_of(p) {
                        gd[q as usize] += share;
                    }
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// `out[q] = mean_{p : q in H(p)} f0[p]`, zero for targets with no incoming edge.
fn scatter_mean<'t, T: Scalar>(f0: &Var<'t, T>, graphs: &[NeighborGraph]) -> Result<Var<'t, T>> {
    let x = f0.value();
    let (c, h, w) = check_graphs(&x, graphs)?;
    let hw = h * w;
    let inv_deg: Vec<Vec<T>> = graphs
        .iter()
        .map(|g| {
            g.in_degree()
                .into_iter()
                .map(|d| {
                    if d == 0 {
                        T::zero()
                    } else {
                        T::one() / T::from_u32(d).unwrap()
                    }
                })
                .collect()
        })
        .collect();
    let mut out = Tensor::zeros(x.shape());
    for (bi, g) in graphs.iter().enumerate() {
        let base = bi * c * hw;
        for ch in 0..c {
            let src = &x.data()[base + ch * hw..base + (ch + 1) * hw];
            let dst = &mut out.data_mut()[base + ch * hw..base + (ch + 1) * hw];
            for (p, &sv) in src.iter().enumerate() {
                for &q in g.targets_of(p) {
                    dst[q as usize] += sv;
                }
            }
            for (d, &s) in dst.iter_mut().zip(&inv_deg[bi]) {
                *d *= s;
            }
        }
    }
    let graphs = graphs.to_vec();
    let shape = x.shape().to_vec();
    Ok(f0.tape().custom(&[*f0], out, move |grad| {
        let mut gx = Tensor::zeros(&shape);
        for (bi, g) in graphs.iter().enumerate() {
            let base = bi * c * hw;
            for ch in 0..c {
                let gs = &grad.data()[base + ch * hw..base + (ch + 1) * hw];
                let gd = &mut gx.data_mut()[base + ch * hw..base + (ch + 1) * hw];
                for (p, d) in gd.iter_mut().enumerate() {
                    *d = g
                        .targets_of(p)
                        .iter()
                        .map(|&q| gs[q as usize] * inv_deg[bi][q as usize])
                        .sum();
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Shared aggregation weight `W` (`C x C`, stored as a 1x1 convolution kernel).
#[derive(Debug, Clone)]
pub struct AlignmentParams {
    pub weight: ParamId,
}

impl AlignmentParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, channels: usize) -> Self {
        // Small init keeps the residual branch close to identity at the start.
        let std = 0.1 / (channels as f64).sqrt();
        let data = (0..channels * channels)
            .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_vec(&[channels, channels, 1, 1], data).expect("square"),
            ParamKind::Trainable,
        );
        Self { weight }
    }
}

/// Residual graph convolution over fixed adjacency, both edge directions sharing `weight`
/// (`[C, C, 1, 1]`).
pub fn graph_convolve<'t, T: Scalar>(
    graphs: &[NeighborGraph],
    f0: &Var<'t, T>,
    f1: &Var<'t, T>,
    weight: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if f0.shape() != f1.shape() {
        return Err(ApdError::invalid(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            f0.shape(),
            f1.shape()
        )));
    }
    let to0 = gather_mean(f1, graphs)?;
    let to1 = scatter_mean(f0, graphs)?;
    let pointwise = Conv2dOptions::default();
    let f0_msg = to0.conv2d(weight, None, pointwise)?;
    let f1_msg = to1.conv2d(weight, None, pointwise)?;
    Ok((f0.add(&f0_msg)?, f1.add(&f1_msg)?))
}

/// Residual graph convolution where each map aggregates over its own query graph:
/// `g01` links map-0 pixels to map 1, `g10` links map-1 pixels to map 0.
pub fn graph_convolve_mutual<'t, T: Scalar>(
    g01: &[NeighborGraph],
    g10: &[NeighborGraph],
    f0: &Var<'t, T>,
    f1: &Var<'t, T>,
    weight: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if f0.shape() != f1.shape() {
        return Err(ApdError::invalid(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            f0.shape(),
            f1.shape()
        )));
    }
    let to0 = gather_mean(f1, g01)?;
    let to1 = gather_mean(f0, g10)?;
    let pointwise = Conv2dOptions::default();
    let f0_msg = to0.conv2d(weight, None, pointwise)?;
    let f1_msg = to1.conv2d(weight, None, pointwise)?;
    Ok((f0.add(&f0_msg)?, f1.add(&f1_msg)?))
}

/// Context aggregation, graph construction and graph convolution in sequence.
pub fn align<'t, T: Scalar>(
    f0: &Var<'t, T>,
    f1: &Var<'t, T>,
    cfg: &ContextConfig,
    weight: &Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (v0, v1) = (f0.value(), f1.value());
    let graphs = build_graphs(&v0, &v1, cfg)?;
    match cfg.reverse_edges {
        ReverseEdges::Transposed => graph_convolve(&graphs, f0, f1, weight),
        ReverseEdges::Query => {
            let back = build_graphs(&v1, &v0, cfg)?;
            graph_convolve_mutual(&graphs, &back, f0, f1, weight)
        }
    }
}

impl AlignmentParams {
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        f0: &Var<'t, T>,
        f1: &Var<'t, T>,
        cfg: &ContextConfig,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        align(f0, f1, cfg, &ctx.param(self.weight))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use apd_autograd::gradcheck::{self, GradCheckOptions};
    use apd_autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cfg(k: usize, d: usize, n: usize) -> ContextConfig {
        ContextConfig {
            kernel_half_width: k,
            dilation: d,
            neighbor_count: n,
            chunk: 256,
            reverse_edges: ReverseEdges::Transposed,
        }
    }

    fn loop_context(f: &Tensor<f64>, k: isize, d: isize) -> Tensor<f64> {
        let (n, c, h, w) = f.dims4("t").unwrap();
        let mut out = Tensor::zeros(f.shape());
        for b in 0..n {
            for ch in 0..c {
                for u in 0..h as isize {
                    for v in 0..w as isize {
                        let mut acc = 0.0;
                        for i in -k..=k {
                            for j in -k..=k {
                                if (i, j) == (0, 0) {
                                    continue;
                                }
                                let (y, x) = (u + i * d, v + j * d);
                                if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                                    acc += f.data()[((b * c + ch) * h + y as usize) * w + x as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * c + ch) * h + u as usize) * w + v as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn sorted_oracle(c0: &Tensor<f64>, c1: &Tensor<f64>, n: usize) -> Vec<Vec<usize>> {
        let (_, c, h, w) = c0.dims4("t").unwrap();
        let hw = h * w;
        (0..hw)
            .map(|p| {
                let mut all: Vec<(f64, usize)> = (0..hw)
                    .map(|q| {
                        let mut s = 0.0;
                        for ch in 0..c {
                            let diff = c0.data()[ch * hw + p] - c1.data()[ch * hw + q];
                            s += diff * diff;
                        }
                        (s, q)
                    })
                    .collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                all.into_iter().take(n).map(|e| e.1).collect()
            })
            .collect()
    }

    #[test]
    fn context_of_constant_interior_pixel_is_eight_times() {
        let f = Tensor::<f64>::full(&[1, 1, 5, 5], 0.75);
        let c = context_aggregate(&f, &cfg(1, 1, 1)).unwrap();
        assert_eq!(c.data()[2 * 5 + 2], 6.0);
        // corner sees three in-bounds taps
        assert_eq!(c.data()[0], 3.0 * 0.75);
    }

    #[test]
    fn context_of_zero_map_is_zero() {
        let f = Tensor::<f64>::zeros(&[2, 3, 6, 4]);
        for (k, d) in [(1, 1), (2, 3), (1, 16)] {
            let c = context_aggregate(&f, &cfg(k, d, 1)).unwrap();
            assert!(c.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn context_matches_loop_oracle() {
        let f = random(&[1, 1, 5, 5], 11);
        let got = context_aggregate(&f, &cfg(1, 1, 1)).unwrap();
        assert_eq!(got, loop_context(&f, 1, 1));
        let f = random(&[2, 3, 7, 6], 12);
        assert_eq!(context_aggregate(&f, &cfg(2, 2, 1)).unwrap(), loop_context(&f, 2, 2));
    }

    #[test]
    fn context_rejects_bad_config() {
        let f = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(context_aggregate(&f, &cfg(0, 1, 1)).is_err());
        assert!(context_aggregate(&f, &cfg(1, 0, 1)).is_err());
        assert!(context_aggregate(&Tensor::<f64>::zeros(&[1, 1, 0, 2]), &cfg(1, 1, 1)).is_err());
    }

    #[test]
    fn identical_distinct_contexts_link_to_self() {
        let c = random(&[1, 3, 4, 5], 3);
        let g = build_bipartite_graph(&c, &c, 1, 256).unwrap();
        for u in 0..4 {
            for v in 0..5 {
                assert_eq!(g.neighbors(u, v), vec![(u, v)]);
            }
        }
    }

    #[test]
    fn full_graph_is_distance_order() {
        let c0 = random(&[1, 2, 3, 3], 5);
        let c1 = random(&[1, 2, 3, 3], 6);
        let g = build_bipartite_graph(&c0, &c1, 9, 256).unwrap();
        let oracle = sorted_oracle(&c0, &c1, 9);
        for p in 0..9 {
            let got: Vec<usize> = g.targets_of(p).iter().map(|&q| q as usize).collect();
            assert_eq!(got, oracle[p]);
        }
    }

    #[test]
    fn graph_matches_exhaustive_sort_small_chunks() {
        let c0 = random(&[1, 3, 4, 4], 21);
        let c1 = random(&[1, 3, 4, 4], 22);
        let oracle = sorted_oracle(&c0, &c1, 3);
        for chunk in [1, 5, 16, 1000] {
            let g = build_bipartite_graph(&c0, &c1, 3, chunk).unwrap();
            for p in 0..16 {
                let got: Vec<usize> = g.targets_of(p).iter().map(|&q| q as usize).collect();
                assert_eq!(got, oracle[p], "chunk {chunk}");
            }
        }
    }

    #[test]
    fn ties_break_by_row_major_index() {
        let c0 = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let c1 = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let g = build_bipartite_graph(&c0, &c1, 4, 2).unwrap();
        for p in 0..9 {
            assert_eq!(g.targets_of(p), &[0, 1, 2, 3]);
        }
    }

    #[test]
    fn graph_rejects_bad_inputs() {
        let a = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let b = Tensor::<f64>::zeros(&[1, 2, 3, 4]);
        assert!(build_bipartite_graph(&a, &b, 1, 8).is_err());
        assert!(build_bipartite_graph(&a, &a, 10, 8).is_err());
        assert!(build_bipartite_graph(&a, &a, 0, 8).is_err());
    }

    #[test]
    fn zero_weight_is_residual_identity() {
        let tape = Tape::<f64>::new();
        let f0 = tape.constant(random(&[1, 2, 3, 3], 1));
        let f1 = tape.constant(random(&[1, 2, 3, 3], 2));
        let w = tape.constant(Tensor::zeros(&[2, 2, 1, 1]));
        let (a, b) = align(&f0, &f1, &cfg(1, 1, 2), &w).unwrap();
        assert_eq!(*a.value(), *f0.value());
        assert_eq!(*b.value(), *f1.value());
    }

    #[test]
    fn unreferenced_target_keeps_its_features() {
        let tape = Tape::<f64>::new();
        // every source links only to pixel 0, so pixels 1..4 have in-degree zero
        let c = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![0.0, 5.0, 6.0, 7.0]).unwrap();
        let c0 = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let g = build_bipartite_graph(&c0, &c, 1, 4).unwrap();
        assert_eq!(g.in_degree(), vec![4, 0, 0, 0]);
        let f0 = tape.constant(random(&[1, 2, 2, 2], 3));
        let f1 = tape.constant(random(&[1, 2, 2, 2], 4));
        let w = tape.constant(random(&[2, 2, 1, 1], 5));
        let (_, b) = graph_convolve(&[g], &f0, &f1, &w).unwrap();
        for ch in 0..2 {
            for p in 1..4 {
                assert_eq!(b.value().data()[ch * 4 + p], f1.value().data()[ch * 4 + p]);
            }
        }
    }

    /// Dense adjacency `A[p][q]` and explicit matrix products.
    fn dense_oracle(
        g: &NeighborGraph,
        f0: &Tensor<f64>,
        f1: &Tensor<f64>,
        w: &Tensor<f64>,
    ) -> (Vec<f64>, Vec<f64>) {
        let (_, c, h, wd) = f0.dims4("t").unwrap();
        let hw = h * wd;
        let mut adj = vec![vec![0.0; hw]; hw];
        for p in 0..hw {
            for &q in g.targets_of(p) {
                adj[p][q as usize] = 1.0;
            }
        }
        let mut out0 = f0.data().to_vec();
        let mut out1 = f1.data().to_vec();
        for p in 0..hw {
            let row: f64 = adj[p].iter().sum();
            let col: f64 = (0..hw).map(|s| adj[s][p]).sum();
            for co in 0..c {
                let mut m0 = 0.0;
                let mut m1 = 0.0;
                for ci in 0..c {
                    let wv = w.data()[co * c + ci];
                    let s0: f64 = (0..hw).map(|q| adj[p][q] * f1.data()[ci * hw + q]).sum();
                    let s1: f64 = (0..hw).map(|s| adj[s][p] * f0.data()[ci * hw + s]).sum();
                    m0 += wv * s0 / row;
                    if col > 0.0 {
                        m1 += wv * s1 / col;
                    }
                }
                out0[co * hw + p] += m0;
                out1[co * hw + p] += m1;
            }
        }
        (out0, out1)
    }

    #[test]
    fn graph_convolve_matches_dense_adjacency() {
        let f0v = random(&[1, 2, 3, 3], 31);
        let f1v = random(&[1, 2, 3, 3], 32);
        let wv = random(&[2, 2, 1, 1], 33);
        let g = build_graphs(&f0v, &f1v, &cfg(1, 1, 2)).unwrap().remove(0);
        let tape = Tape::<f64>::new();
        let (a, b) = graph_convolve(
            std::slice::from_ref(&g),
            &tape.constant(f0v.clone()),
            &tape.constant(f1v.clone()),
            &tape.constant(wv.clone()),
        )
        .unwrap();
        let (e0, e1) = dense_oracle(&g, &f0v, &f1v, &wv);
        for (x, y) in a.value().data().iter().zip(&e0) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in b.value().data().iter().zip(&e1) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let tape = Tape::<f64>::new();
        let f = random(&[2, 3, 4, 4], 41);
        let w = tape.constant(random(&[3, 3, 1, 1], 42));
        let (a, b) = align(&tape.constant(f.clone()), &tape.constant(f.clone()), &cfg(1, 1, 1), &w).unwrap();
        assert_eq!(*a.value(), *b.value());
        let mutual = ContextConfig {
            reverse_edges: ReverseEdges::Query,
            ..cfg(1, 1, 3)
        };
        let (a, b) = align(&tape.constant(f.clone()), &tape.constant(f), &mutual, &w).unwrap();
        assert_eq!(*a.value(), *b.value());
    }

    #[test]
    fn transposed_edges_are_asymmetric_for_larger_n() {
        // With n > 1 the reverse in-degree means differ from forward neighbor means.
        let tape = Tape::<f64>::new();
        let f = random(&[1, 3, 4, 4], 43);
        let w = tape.constant(random(&[3, 3, 1, 1], 44));
        let (a, b) = align(&tape.constant(f.clone()), &tape.constant(f), &cfg(1, 1, 3), &w).unwrap();
        assert_ne!(*a.value(), *b.value());
    }

    #[test]
    fn mutual_query_swaps_with_inputs() {
        let tape = Tape::<f64>::new();
        let (x, y) = (random(&[1, 2, 4, 4], 45), random(&[1, 2, 4, 4], 46));
        let w = tape.constant(random(&[2, 2, 1, 1], 47));
        let c = ContextConfig {
            reverse_edges: ReverseEdges::Query,
            ..cfg(1, 1, 2)
        };
        let (a, b) = align(&tape.constant(x.clone()), &tape.constant(y.clone()), &c, &w).unwrap();
        let (b2, a2) = align(&tape.constant(y), &tape.constant(x), &c, &w).unwrap();
        assert_eq!(*a.value(), *a2.value());
        assert_eq!(*b.value(), *b2.value());
    }

    #[test]
    fn align_equals_chained_oracles() {
        let f0 = random(&[1, 2, 4, 4], 51);
        let f1 = random(&[1, 2, 4, 4], 52);
        let wv = random(&[2, 2, 1, 1], 53);
        let c = cfg(1, 1, 3);
        let c0 = loop_context(&f0, 1, 1);
        let c1 = loop_context(&f1, 1, 1);
        let lists = sorted_oracle(&c0, &c1, 3);
        let g = NeighborGraph {
            height: 4,
            width: 4,
            n: 3,
            targets: lists.into_iter().flatten().map(|q| q as u32).collect(),
        };
        let (e0, e1) = dense_oracle(&g, &f0, &f1, &wv);
        let tape = Tape::<f64>::new();
        let (a, b) = align(&tape.constant(f0), &tape.constant(f1), &c, &tape.constant(wv)).unwrap();
        for (x, y) in a.value().data().iter().zip(&e0) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in b.value().data().iter().zip(&e1) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_contexts_by_powers_of_two_keeps_graph() {
        for seed in 0..20 {
            let c0 = random(&[1, 3, 5, 5], 100 + seed);
            let c1 = random(&[1, 3, 5, 5], 200 + seed);
            let g = build_bipartite_graph(&c0, &c1, 4, 7).unwrap();
            for s in [0.25, 2.0, 8.0] {
                let g2 = build_bipartite_graph(&c0.scale(s), &c1.scale(s), 4, 7).unwrap();
                assert_eq!(g, g2);
            }
        }
    }

    #[test]
    fn linear_in_weight() {
        let f0v = random(&[1, 2, 3, 3], 61);
        let f1v = random(&[1, 2, 3, 3], 62);
        let wv = random(&[2, 2, 1, 1], 63);
        let graphs = build_graphs(&f0v, &f1v, &cfg(1, 1, 2)).unwrap();
        let tape = Tape::<f64>::new();
        let f0 = tape.constant(f0v.clone());
        let f1 = tape.constant(f1v.clone());
        let (a1, b1) = graph_convolve(&graphs, &f0, &f1, &tape.constant(wv.clone())).unwrap();
        let (a2, b2) = graph_convolve(&graphs, &f0, &f1, &tape.constant(wv.scale(2.0))).unwrap();
        for i in 0..f0v.numel() {
            let d1 = a1.value().data()[i] - f0v.data()[i];
            let d2 = a2.value().data()[i] - f0v.data()[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
            let d1 = b1.value().data()[i] - f1v.data()[i];
            let d2 = b2.value().data()[i] - f1v.data()[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_with_frozen_graph() {
        let f0 = random(&[1, 4, 2, 2], 71);
        let f1 = random(&[1, 4, 2, 2], 72);
        let w = random(&[4, 4, 1, 1], 73);
        let graphs = build_graphs(&f0, &f1, &cfg(1, 1, 2)).unwrap();
        let probe = random(&[1, 4, 2, 2], 74);
        let probe2 = random(&[1, 4, 2, 2], 75);
        let report = gradcheck::check(&[f0, f1, w], GradCheckOptions::default(), |tape, v| {
            let (a, b) = graph_convolve(&graphs, &v[0], &v[1], &v[2]).unwrap();
            let pa = tape.constant(probe.clone());
            let pb = tape.constant(probe2.clone());
            Ok(a.mul(&pa)?.add(&b.mul(&b)?.mul(&pb)?)?.sum())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn small_maps_clamp_neighbor_count() {
        let f = random(&[1, 2, 1, 2], 91);
        let g = build_graphs(&f, &f, &cfg(1, 1, 4)).unwrap();
        assert_eq!(g[0].neighbor_count(), 2);
    }

    #[test]
    fn repeated_builds_are_bit_identical() {
        let f0 = random(&[2, 4, 6, 6], 81);
        let f1 = random(&[2, 4, 6, 6], 82);
        let a = build_graphs(&f0, &f1, &cfg(1, 2, 4)).unwrap();
        let b = build_graphs(&f0, &f1, &cfg(1, 2, 4)).unwrap();
        assert_eq!(a, b);
    }
}

//! Reverse-mode autodiff over a flat operation tape.
//!
//! Values are computed eagerly as ops are recorded; `backward` replays the
//! tape in reverse and accumulates gradients at fan-out. Node ids are
//! indices into the tape, so every operand strictly precedes its consumer
//! and the reverse sweep is a plain reversed loop.
//!
//! The op vocabulary is fixed to what the training pipeline needs: dense
//! and conv linear maps, 2x2 average pooling, elementwise arithmetic,
//! axis reductions, the spiking nonlinearity with its arctangent
//! surrogate, codebook gather, straight-through estimators, fake
//! quantization, ternary snapping, per-channel gates, and
//! softmax-cross-entropy. No general broadcasting: binary ops take equal
//! shapes or one single-element operand.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::fmath;
use crate::tensor::{numel_of, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward behaviour of the spiking nonlinearity.
///
/// `Hard` emits the binary step 1(x > 0) and is what the network runs;
/// `Smooth` emits the arctangent sigmoid whose exact derivative equals the
/// surrogate, which makes the whole graph finite-difference checkable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    Hard,
    Smooth,
}

/// Surrogate derivative of the spike step: alpha / (2*(1 + ((pi/2)*alpha*x)^2)).
/// Symmetric per-tensor quantization to 2^(b-1) - 1 signed steps sized by
/// the max magnitude. An all-zero tensor passes through unchanged.
pub fn fake_quant_values(values: &[f64], bits: u32) -> Vec<f64> {
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    let maxabs = values.iter().fold(0.0, |m, v| fmath::max(m, fmath::abs(*v)));
    if maxabs == 0.0 {
        return values.to_vec();
    }
    let q = maxabs / levels;
    values.iter().map(|v| q * fmath::clamp(fmath::round(v / q), -levels, levels)).collect()
}

pub fn surrogate_grad(x: f64, alpha: f64) -> f64 {
    let z = core::f64::consts::FRAC_PI_2 * alpha * x;
    alpha / (2.0 * (1.0 + z * z))
}

fn smooth_spike(x: f64, alpha: f64) -> f64 {
    0.5 + fmath::atan(core::f64::consts::FRAC_PI_2 * alpha * x) / core::f64::consts::PI
}

enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddScalar { a: TensorId },
    Square { a: TensorId },
    Relu { a: TensorId },
    Clamp { a: TensorId, lo: f64, hi: f64 },
    MatMul { a: TensorId, b: TensorId },
    Conv2d { x: TensorId, w: TensorId, stride: usize, pad: usize },
    AvgPool2 { x: TensorId },
    Reshape { a: TensorId },
    Reduce { a: TensorId, axes: Vec<usize>, mean: bool },
    Spike { u: TensorId, u_thr: f64, alpha: f64 },
    Gather1d { src: TensorId, idx: Vec<usize> },
    StraightThrough { latent: TensorId, q: TensorId, passthrough: bool },
    FakeQuant { a: TensorId },
    Ternary { latent: TensorId, scales: TensorId, threshold_frac: f64 },
    ChannelScale { x: TensorId, g: TensorId },
    SoftmaxXent { logits: TensorId, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
}

/// Single-writer autodiff tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in backward.
    pub fn input(&mut self, t: Tensor) -> TensorId {
        self.push_leaf(t, true)
    }

    /// Leaf excluded from backward; doubles as stop-gradient when the same
    /// values are also registered as an input elsewhere on the tape.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: Tensor, needs_grad: bool) -> TensorId {
        let shape = t.shape().to_vec();
        let value = t.into_data();
        let n = value.len();
        self.nodes.push(Node { op: Op::Leaf, shape, value, grad: vec![0.0; n], needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(numel_of(&shape), value.len());
        let n = value.len();
        self.nodes.push(Node { op, shape, value, grad: vec![0.0; n], needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the most recent `backward`.
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn tensor(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is internally consistent")
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err(op, &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        Ok(())
    }

    /// Equal shapes, or exactly one side a single element. Returns the
    /// output shape.
    fn binary_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<Vec<usize>> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa == sb {
            return Ok(sa.clone());
        }
        if numel_of(sb) == 1 {
            return Ok(sa.clone());
        }
        if numel_of(sa) == 1 {
            return Ok(sb.clone());
        }
        Err(shape_err(op, sa, sb))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shape("add", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = numel_of(&shape);
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = va[i % va.len()] + vb[i % vb.len()];
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, shape, out, ng))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shape("sub", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = numel_of(&shape);
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = va[i % va.len()] - vb[i % vb.len()];
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub { a, b }, shape, out, ng))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shape("mul", a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = numel_of(&shape);
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = va[i % va.len()] * vb[i % vb.len()];
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, shape, out, ng))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|v| v * c).collect();
        let ng = self.needs(a);
        self.push(Op::Scale { a, c }, shape, out, ng)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|v| v + c).collect();
        let ng = self.needs(a);
        self.push(Op::AddScalar { a }, shape, out, ng)
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|v| v * v).collect();
        let ng = self.needs(a);
        self.push(Op::Square { a }, shape, out, ng)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|v| fmath::max(*v, 0.0)).collect();
        let ng = self.needs(a);
        self.push(Op::Relu { a }, shape, out, ng)
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if !(lo <= hi) {
            return Err(Error::Contract(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        let shape = self.nodes[a.0].shape.clone();
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|v| fmath::clamp(*v, lo, hi)).collect();
        let ng = self.needs(a);
        Ok(self.push(Op::Clamp { a, lo, hi }, shape, out, ng))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = va[i * k + p];
                if av != 0.0 {
                    let row = &vb[p * n..(p + 1) * n];
                    let dst = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        dst[j] += av * row[j];
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], out, ng))
    }

    /// Cross-correlation (no kernel flip), zero padding, no bias.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let sx = &self.nodes[x.0].shape;
        let sw = &self.nodes[w.0].shape;
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", sx, sw));
        }
        if stride == 0 {
            return Err(Error::Dimension { op: "conv2d", detail: format!("stride must be >= 1") });
        }
        let (bn, cin, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, wid + 2 * pad),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let mut out = vec![0.0; bn * cout * ho * wo];
        for n in 0..bn {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let xrow = ((n * cin + ci) * h + (iy - pad)) * wid;
                                let wrow = ((co * cin + ci) * kh + ky) * kw;
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= wid {
                                        continue;
                                    }
                                    acc += vx[xrow + (ix - pad)] * vw[wrow + kx];
                                }
                            }
                        }
                        out[((n * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, vec![bn, cout, ho, wo], out, ng))
    }

    /// 2x2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 || sx[2] % 2 != 0 || sx[3] % 2 != 0 {
            return Err(Error::Dimension {
                op: "avg_pool2",
                detail: format!("need 4-d input with even spatial extents, got {sx:?}"),
            });
        }
        let (bn, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h / 2, w / 2);
        let vx = &self.nodes[x.0].value;
        let mut out = vec![0.0; bn * c * ho * wo];
        for n in 0..bn {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let base = ((n * c + ch) * h + 2 * oy) * w + 2 * ox;
                        out[((n * c + ch) * ho + oy) * wo + ox] =
                            (vx[base] + vx[base + 1] + vx[base + w] + vx[base + w + 1]) * 0.25;
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::AvgPool2 { x }, vec![bn, c, ho, wo], out, ng))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel_of(&shape) != self.nodes[a.0].value.len() {
            return Err(shape_err("reshape", &self.nodes[a.0].shape, &shape));
        }
        let out = self.nodes[a.0].value.clone();
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape { a }, shape, out, ng))
    }

    /// Sum or mean over a set of axes; reduced axes are removed from the
    /// shape, so reducing over all axes yields a scalar.
    pub fn reduce(&mut self, a: TensorId, axes: &[usize], mean: bool) -> Result<TensorId> {
        let in_shape = self.nodes[a.0].shape.clone();
        let rank = in_shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::Dimension {
                    op: "reduce",
                    detail: format!("axis {ax} out of range for rank {rank}"),
                });
            }
            if reduced[ax] {
                return Err(Error::Dimension { op: "reduce", detail: format!("axis {ax} repeated") });
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> =
            (0..rank).filter(|d| !reduced[*d]).map(|d| in_shape[d]).collect();
        let count: usize = (0..rank).filter(|d| reduced[*d]).map(|d| in_shape[d]).product();
        let mut out = vec![0.0; numel_of(&out_shape)];
        let va = &self.nodes[a.0].value;
        for (flat, v) in va.iter().enumerate() {
            out[reduce_target(&in_shape, &reduced, flat)] += *v;
        }
        if mean {
            let inv = 1.0 / count as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Reduce { a, axes: axes.to_vec(), mean }, out_shape, out, ng))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let rank = self.nodes[a.0].shape.len();
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(a, &axes, false).expect("full reduction is always valid")
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let rank = self.nodes[a.0].shape.len();
        let axes: Vec<usize> = (0..rank).collect();
        self.reduce(a, &axes, true).expect("full reduction is always valid")
    }

    /// Spiking nonlinearity on membrane potential `u`. Forward in `Hard`
    /// mode is the strict step 1(u > u_thr); backward is always the
    /// arctangent surrogate evaluated at u - u_thr.
    pub fn spike(&mut self, u: TensorId, u_thr: f64, alpha: f64, mode: SpikeMode) -> TensorId {
        let shape = self.nodes[u.0].shape.clone();
        let out: Vec<f64> = self.nodes[u.0]
            .value
            .iter()
            .map(|v| match mode {
                SpikeMode::Hard => {
                    if *v > u_thr {
                        1.0
                    } else {
                        0.0
                    }
                }
                SpikeMode::Smooth => smooth_spike(*v - u_thr, alpha),
            })
            .collect();
        let ng = self.needs(u);
        self.push(Op::Spike { u, u_thr, alpha }, shape, out, ng)
    }

    /// out[i] = src[idx[i]], reading `src` flat. Backward scatter-adds, so
    /// repeated indices accumulate.
    pub fn gather1d(&mut self, src: TensorId, idx: &[usize]) -> Result<TensorId> {
        let vs = &self.nodes[src.0].value;
        for &i in idx {
            if i >= vs.len() {
                return Err(Error::Dimension {
                    op: "gather1d",
                    detail: format!("index {i} out of range for {} elements", vs.len()),
                });
            }
        }
        let out: Vec<f64> = idx.iter().map(|&i| vs[i]).collect();
        let ng = self.needs(src);
        Ok(self.push(Op::Gather1d { src, idx: idx.to_vec() }, vec![idx.len()], out, ng))
    }

    /// Forward takes the value of `q`; backward always routes the gradient
    /// to `latent` unchanged, and additionally into `q` when `passthrough`
    /// is set (this is what lets a codebook learn from the task loss).
    pub fn straight_through(
        &mut self,
        latent: TensorId,
        q: TensorId,
        passthrough: bool,
    ) -> Result<TensorId> {
        self.same_shape("straight_through", latent, q)?;
        let out = self.nodes[q.0].value.clone();
        let shape = self.nodes[q.0].shape.clone();
        let ng = self.needs(latent) || self.needs(q);
        Ok(self.push(Op::StraightThrough { latent, q, passthrough }, shape, out, ng))
    }

    /// Symmetric uniform fake quantization to `bits` with straight-through
    /// backward. All-zero input passes through unchanged.
    pub fn fake_quant(&mut self, a: TensorId, bits: u32) -> Result<TensorId> {
        if bits < 2 || bits > 16 {
            return Err(Error::Contract(format!("fake_quant bits must be in [2, 16], got {bits}")));
        }
        let out = fake_quant_values(&self.nodes[a.0].value, bits);
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        Ok(self.push(Op::FakeQuant { a }, shape, out, ng))
    }

    /// Ternary snap: with delta = threshold_frac * max|latent|, positions
    /// with latent > delta become +scales[0], positions with
    /// latent < -delta become -scales[1], the rest 0. Backward sends the
    /// masked gradient sums to the two scales and a scale-weighted
    /// straight-through gradient to the latents.
    pub fn ternary(
        &mut self,
        latent: TensorId,
        scales: TensorId,
        threshold_frac: f64,
    ) -> Result<TensorId> {
        if self.nodes[scales.0].value.len() != 2 {
            return Err(Error::Dimension {
                op: "ternary",
                detail: format!("scales must hold [positive, negative], got {:?}", self.nodes[scales.0].shape),
            });
        }
        if !(threshold_frac >= 0.0 && threshold_frac < 1.0) {
            return Err(Error::Contract(format!("ternary threshold_frac must be in [0, 1), got {threshold_frac}")));
        }
        let vl = &self.nodes[latent.0].value;
        let (wp, wn) = (self.nodes[scales.0].value[0], self.nodes[scales.0].value[1]);
        let delta = threshold_frac * vl.iter().fold(0.0, |m, v| fmath::max(m, fmath::abs(*v)));
        let out: Vec<f64> = vl
            .iter()
            .map(|v| {
                if *v > delta {
                    wp
                } else if *v < -delta {
                    -wn
                } else {
                    0.0
                }
            })
            .collect();
        let shape = self.nodes[latent.0].shape.clone();
        let ng = self.needs(latent) || self.needs(scales);
        Ok(self.push(Op::Ternary { latent, scales, threshold_frac }, shape, out, ng))
    }

    /// Multiply every [n, c, h, w] element of `x` by gate `g[c]`. With unit
    /// gates this is the identity, and d/dg_c is the sum over n, h, w of
    /// upstream_grad * x, which is how channel saliency hooks in.
    pub fn channel_scale(&mut self, x: TensorId, g: TensorId) -> Result<TensorId> {
        let sx = &self.nodes[x.0].shape;
        let sg = &self.nodes[g.0].shape;
        if sx.len() != 4 || sg.len() != 1 || sg[0] != sx[1] {
            return Err(shape_err("channel_scale", sx, sg));
        }
        let (bn, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (vx, vg) = (&self.nodes[x.0].value, &self.nodes[g.0].value);
        let mut out = vec![0.0; vx.len()];
        for n in 0..bn {
            for ch in 0..c {
                let base = (n * c + ch) * h * w;
                let gv = vg[ch];
                for i in 0..h * w {
                    out[base + i] = vx[base + i] * gv;
                }
            }
        }
        let shape = sx.clone();
        let ng = self.needs(x) || self.needs(g);
        Ok(self.push(Op::ChannelScale { x, g }, shape, out, ng))
    }

    /// Mean over the batch of -log softmax(logits)[target]. Scalar output.
    pub fn softmax_xent(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let sl = &self.nodes[logits.0].shape;
        if sl.len() != 2 {
            return Err(Error::Dimension {
                op: "softmax_xent",
                detail: format!("logits must be 2-d, got {sl:?}"),
            });
        }
        let (b, k) = (sl[0], sl[1]);
        if targets.len() != b {
            return Err(Error::Dimension {
                op: "softmax_xent",
                detail: format!("{} targets for batch {b}", targets.len()),
            });
        }
        for &t in targets {
            if t >= k {
                return Err(Error::Dimension {
                    op: "softmax_xent",
                    detail: format!("target {t} out of range for {k} classes"),
                });
            }
        }
        let vl = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &vl[i * k..(i + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, v| fmath::max(a, *v));
            let mut z = 0.0;
            for j in 0..k {
                let e = fmath::exp(row[j] - m);
                probs[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            loss -= fmath::ln(probs[i * k + targets[i]]);
        }
        loss /= b as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxXent { logits, targets: targets.to_vec(), probs },
            Vec::new(),
            vec![loss],
            ng,
        ))
    }

    /// Reverse sweep from a scalar root. Gradients of every node are reset
    /// first, then accumulated; read them with [`Tape::grad`].
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        for n in self.nodes.iter_mut() {
            for g in n.grad.iter_mut() {
                *g = 0.0;
            }
        }
        self.nodes[root.0].grad[0] = 1.0;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Operands always precede their consumer, so splitting at i
            // gives mutable access to every parent.
            let (parents, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            step_backward(node, parents);
        }
        // Constants never report a gradient, even when an op accumulated
        // into their buffer along the way.
        for n in self.nodes.iter_mut() {
            if !n.needs_grad {
                for g in n.grad.iter_mut() {
                    *g = 0.0;
                }
            }
        }
        Ok(())
    }
}

/// Output offset that input flat index `flat` reduces into. Walks axes
/// minor-to-major, skipping reduced ones while tracking the kept stride.
fn reduce_target(in_shape: &[usize], reduced: &[bool], flat: usize) -> usize {
    let mut rem = flat;
    let mut stride = 1;
    let mut out = 0;
    for d in (0..in_shape.len()).rev() {
        let coord = rem % in_shape[d];
        rem /= in_shape[d];
        if !reduced[d] {
            out += coord * stride;
            stride *= in_shape[d];
        }
    }
    out
}

fn step_backward(node: &Node, parents: &mut [Node]) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            accumulate_broadcast(&mut parents[a.0], g, 1.0);
            accumulate_broadcast(&mut parents[b.0], g, 1.0);
        }
        Op::Sub { a, b } => {
            accumulate_broadcast(&mut parents[a.0], g, 1.0);
            accumulate_broadcast(&mut parents[b.0], g, -1.0);
        }
        Op::Mul { a, b } => {
            // Values must be read before grads are mutated; split the two
            // parent borrows by index order.
            let (ai, bi) = (a.0, b.0);
            if ai == bi {
                // x*x: d = 2x g
                let n = parents[ai].value.len();
                for i in 0..g.len() {
                    let v = parents[ai].value[i % n];
                    parents[ai].grad[i % n] += 2.0 * v * g[i];
                }
                return;
            }
            let bv: Vec<f64> = parents[bi].value.clone();
            let av: Vec<f64> = parents[ai].value.clone();
            {
                let pa = &mut parents[ai];
                let n = pa.grad.len();
                for i in 0..g.len() {
                    pa.grad[i % n] += g[i] * bv[i % bv.len()];
                }
            }
            {
                let pb = &mut parents[bi];
                let n = pb.grad.len();
                for i in 0..g.len() {
                    pb.grad[i % n] += g[i] * av[i % av.len()];
                }
            }
        }
        Op::Scale { a, c } => {
            let pa = &mut parents[a.0];
            for i in 0..g.len() {
                pa.grad[i] += c * g[i];
            }
        }
        Op::AddScalar { a } => {
            let pa = &mut parents[a.0];
            for i in 0..g.len() {
                pa.grad[i] += g[i];
            }
        }
        Op::Square { a } => {
            let pa = &mut parents[a.0];
            for i in 0..g.len() {
                pa.grad[i] += 2.0 * pa.value[i] * g[i];
            }
        }
        Op::Relu { a } => {
            let pa = &mut parents[a.0];
            for i in 0..g.len() {
                if pa.value[i] > 0.0 {
                    pa.grad[i] += g[i];
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            let pa = &mut parents[a.0];
            for i in 0..g.len() {
                if pa.value[i] >= *lo && pa.value[i] <= *hi {
                    pa.grad[i] += g[i];
                }
            }
        }
        Op::MatMul { a, b } => {
            let (ai, bi) = (a.0, b.0);
            let m = parents[ai].shape[0];
            let k = parents[ai].shape[1];
            let n = parents[bi].shape[1];
            let av = parents[ai].value.clone();
            let bv = parents[bi].value.clone();
            // dA = G B^T
            {
                let pa = &mut parents[ai];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bv[p * n + j];
                        }
                        pa.grad[i * k + p] += acc;
                    }
                }
            }
            // dB = A^T G
            {
                let pb = &mut parents[bi];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += av[i * k + p] * g[i * n + j];
                        }
                        pb.grad[p * n + j] += acc;
                    }
                }
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (xi, wi) = (x.0, w.0);
            let (stride, pad) = (*stride, *pad);
            let sx = parents[xi].shape.clone();
            let sw = parents[wi].shape.clone();
            let (bn, cin, h, wid) = (sx[0], sx[1], sx[2], sx[3]);
            let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
            let (ho, wo) = (node.shape[2], node.shape[3]);
            let xv = parents[xi].value.clone();
            let wv = parents[wi].value.clone();
            for n in 0..bn {
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[((n * cout + co) * ho + oy) * wo + ox];
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = oy * stride + ky;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let xrow = ((n * cin + ci) * h + (iy - pad)) * wid;
                                    let wrow = ((co * cin + ci) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let ix = ox * stride + kx;
                                        if ix < pad || ix - pad >= wid {
                                            continue;
                                        }
                                        parents[xi].grad[xrow + (ix - pad)] += gv * wv[wrow + kx];
                                        parents[wi].grad[wrow + kx] += gv * xv[xrow + (ix - pad)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::AvgPool2 { x } => {
            let px = &mut parents[x.0];
            let (bn, c, h, w) = (px.shape[0], px.shape[1], px.shape[2], px.shape[3]);
            let (ho, wo) = (h / 2, w / 2);
            for n in 0..bn {
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[((n * c + ch) * ho + oy) * wo + ox] * 0.25;
                            let base = ((n * c + ch) * h + 2 * oy) * w + 2 * ox;
                            px.grad[base] += gv;
                            px.grad[base + 1] += gv;
                            px.grad[base + w] += gv;
                            px.grad[base + w + 1] += gv;
                        }
                    }
                }
            }
        }
        Op::Reshape { a } => {
            let pa = &mut parents[a.0];
            for i in 0..g.len() {
                pa.grad[i] += g[i];
            }
        }
        Op::Reduce { a, axes, mean } => {
            let pa = &mut parents[a.0];
            let in_shape = pa.shape.clone();
            let mut reduced = vec![false; in_shape.len()];
            for &ax in axes {
                reduced[ax] = true;
            }
            let count: usize =
                (0..in_shape.len()).filter(|d| reduced[*d]).map(|d| in_shape[d]).product();
            let scale = if *mean { 1.0 / count as f64 } else { 1.0 };
            for flat in 0..pa.grad.len() {
                pa.grad[flat] += g[reduce_target(&in_shape, &reduced, flat)] * scale;
            }
        }
        Op::Spike { u, u_thr, alpha } => {
            let pu = &mut parents[u.0];
            for i in 0..g.len() {
                pu.grad[i] += g[i] * surrogate_grad(pu.value[i] - u_thr, *alpha);
            }
        }
        Op::Gather1d { src, idx } => {
            let ps = &mut parents[src.0];
            for (i, &j) in idx.iter().enumerate() {
                ps.grad[j] += g[i];
            }
        }
        Op::StraightThrough { latent, q, passthrough } => {
            {
                let pl = &mut parents[latent.0];
                for i in 0..g.len() {
                    pl.grad[i] += g[i];
                }
            }
            if *passthrough {
                let pq = &mut parents[q.0];
                for i in 0..g.len() {
                    pq.grad[i] += g[i];
                }
            }
        }
        Op::FakeQuant { a } => {
            let pa = &mut parents[a.0];
            for i in 0..g.len() {
                pa.grad[i] += g[i];
            }
        }
        Op::Ternary { latent, scales, threshold_frac } => {
            let (li, si) = (latent.0, scales.0);
            let lv = parents[li].value.clone();
            let (wp, wn) = (parents[si].value[0], parents[si].value[1]);
            let delta =
                threshold_frac * lv.iter().fold(0.0, |m, v| fmath::max(m, fmath::abs(*v)));
            let mut dwp = 0.0;
            let mut dwn = 0.0;
            for i in 0..g.len() {
                if lv[i] > delta {
                    dwp += g[i];
                    parents[li].grad[i] += g[i] * wp;
                } else if lv[i] < -delta {
                    dwn -= g[i];
                    parents[li].grad[i] += g[i] * wn;
                } else {
                    parents[li].grad[i] += g[i];
                }
            }
            parents[si].grad[0] += dwp;
            parents[si].grad[1] += dwn;
        }
        Op::ChannelScale { x, g: gate } => {
            let (xi, gi) = (x.0, gate.0);
            let sx = parents[xi].shape.clone();
            let (bn, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
            let gv = parents[gi].value.clone();
            let xv = parents[xi].value.clone();
            for n in 0..bn {
                for ch in 0..c {
                    let base = (n * c + ch) * h * w;
                    let mut dg = 0.0;
                    for i in 0..h * w {
                        parents[xi].grad[base + i] += g[base + i] * gv[ch];
                        dg += g[base + i] * xv[base + i];
                    }
                    parents[gi].grad[ch] += dg;
                }
            }
        }
        Op::SoftmaxXent { logits, targets, probs } => {
            let pl = &mut parents[logits.0];
            let b = targets.len();
            let k = pl.shape[1];
            let scale = g[0] / b as f64;
            for i in 0..b {
                for j in 0..k {
                    let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                    pl.grad[i * k + j] += scale * (probs[i * k + j] - onehot);
                }
            }
        }
    }
}

/// Accumulate `sign * g` into a parent that may be a broadcast scalar.
fn accumulate_broadcast(parent: &mut Node, g: &[f64], sign: f64) {
    let n = parent.grad.len();
    if n == g.len() {
        for i in 0..n {
            parent.grad[i] += sign * g[i];
        }
    } else {
        // Parent was broadcast across the output: fold everything in.
        let total: f64 = g.iter().sum();
        parent.grad[0] += sign * total;
    }
}

/// Result of comparing tape gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

/// Relative errors below this magnitude floor are measured absolutely;
/// keeps near-zero gradients from blowing up the ratio.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compare the tape gradient of a scalar-valued builder against central
/// finite differences at every coordinate of `x0`.
///
/// `build` is called on a fresh tape with `x0` (or a perturbed copy)
/// registered as the lone input and must return a scalar node built from
/// smooth ops.
pub fn grad_check<F>(build: F, x0: &Tensor, eps: f64, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let all: Vec<usize> = (0..x0.numel()).collect();
    grad_check_at(build, x0, &all, eps, rtol)
}

/// grad_check restricted to the listed coordinates of `x0`. One backward
/// pass still produces the full analytic gradient; only the finite
/// differences are sampled, which is what makes checking a parameter
/// vector with thousands of entries affordable.
pub fn grad_check_at<F>(
    build: F,
    x0: &Tensor,
    coords: &[usize],
    eps: f64,
    rtol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if coords.is_empty() {
        return Err(Error::Contract("grad_check needs at least one coordinate".into()));
    }
    if let Some(&i) = coords.iter().find(|&&i| i >= x0.numel()) {
        return Err(Error::Contract(format!(
            "grad_check coordinate {i} out of range for {} elements",
            x0.numel()
        )));
    }

    let scalar_eval = |x: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xid = tape.input(x);
        let out = build(&mut tape, xid)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar objective, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new();
    let xid = tape.input(x0.clone());
    let out = build(&mut tape, xid)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar objective, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic = tape.grad(xid).to_vec();

    let mut max_rel = 0.0;
    let mut worst = coords[0];
    for &i in coords {
        let mut xp = x0.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= eps;
        let numeric = (scalar_eval(xp)? - scalar_eval(xm)?) / (2.0 * eps);
        let denom = fmath::max(
            fmath::max(fmath::abs(analytic[i]), fmath::abs(numeric)),
            GRAD_CHECK_FLOOR,
        );
        let rel = fmath::abs(analytic[i] - numeric) / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, worst_index: worst, pass: max_rel <= rtol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream, Stream};

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut tape = Tape::new();
        let i2 = tape.input(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.input(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let prod = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(prod), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.input(t2(1, 2, &[1.0, 2.0]));
        let col = tape.input(t2(2, 1, &[3.0, 4.0]));
        let out = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(out), &[11.0]);
    }

    #[test]
    fn matmul_backward_hand_value() {
        let mut tape = Tape::new();
        let a = tape.input(t2(1, 1, &[1.0]));
        let b = tape.input(t2(1, 1, &[5.0]));
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a), &[5.0]);
        assert_eq!(tape.grad(b), &[1.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.input(t2(1, 2, &[1.0, 2.0]));
        let b = tape.input(t2(3, 1, &[1.0, 2.0, 3.0]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn conv2d_hand_values() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let out = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(out), &[1, 1, 1, 1]);
        assert_eq!(tape.value(out), &[10.0]);

        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), &[1.0, 2.0, 3.0, 4.0]);

        // 1x1 kernel of weight 1 is the identity map.
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let w = tape.input(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let out = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn conv2d_padding_matches_finite_differences() {
        let mut rng = stream(11, Stream::GradCheck);
        let x0 = Tensor::new(vec![2 * 2 * 3 * 3 + 2 * 2 * 2 * 2], {
            let mut v = Vec::new();
            for _ in 0..(2 * 2 * 3 * 3 + 2 * 2 * 2 * 2) {
                v.push(normal(&mut rng));
            }
            v
        })
        .unwrap();
        let report = grad_check(
            |tape, theta| {
                let n_x = 2 * 2 * 3 * 3;
                let xi: Vec<usize> = (0..n_x).collect();
                let wi: Vec<usize> = (n_x..n_x + 16).collect();
                let xg = tape.gather1d(theta, &xi)?;
                let x = tape.reshape(xg, vec![2, 2, 3, 3])?;
                let wg = tape.gather1d(theta, &wi)?;
                let w = tape.reshape(wg, vec![2, 2, 2, 2])?;
                let y = tape.conv2d(x, w, 2, 1)?;
                let sq = tape.square(y);
                Ok(tape.mean_all(sq))
            },
            &x0,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn elementwise_hand_values() {
        let mut tape = Tape::new();
        let x = tape.input(t1(&[1.0, -2.0, 3.0]));
        let zero = tape.constant(Tensor::scalar(0.0));
        let same = tape.add(x, zero).unwrap();
        assert_eq!(tape.value(same), tape.value(x));

        let sq_in = tape.input(t1(&[2.0, -3.0]));
        let sq = tape.square(sq_in);
        assert_eq!(tape.value(sq), &[4.0, 9.0]);

        let c_in = tape.input(t1(&[-2.0, 0.5, 2.0]));
        let clamped = tape.clamp(c_in, -1.0, 1.0).unwrap();
        assert_eq!(tape.value(clamped), &[-1.0, 0.5, 1.0]);
    }

    #[test]
    fn clamp_backward_gates_on_interval() {
        let mut tape = Tape::new();
        let x = tape.input(t1(&[-2.0, 0.5, 2.0]));
        let clamped = tape.clamp(x, -1.0, 1.0).unwrap();
        let loss = tape.sum_all(clamped);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn reduce_hand_values() {
        let mut tape = Tape::new();
        let z = tape.input(t1(&[0.0, 0.0, 0.0]));
        let s = tape.sum_all(z);
        assert_eq!(tape.value(s), &[0.0]);

        let x = tape.input(t1(&[1.0, 2.0, 3.0]));
        let m = tape.mean_all(x);
        assert_eq!(tape.value(m), &[2.0]);

        let y = tape.input(t1(&[1.0, 2.0, 3.0, 4.0]));
        let my = tape.mean_all(y);
        tape.backward(my).unwrap();
        assert_eq!(tape.grad(y), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn reduce_over_single_axis() {
        let mut tape = Tape::new();
        let x = tape.input(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = tape.reduce(x, &[1], false).unwrap();
        assert_eq!(tape.shape(rows), &[2]);
        assert_eq!(tape.value(rows), &[6.0, 15.0]);
        let cols = tape.reduce(x, &[0], true).unwrap();
        assert_eq!(tape.shape(cols), &[3]);
        assert_eq!(tape.value(cols), &[2.5, 3.5, 4.5]);
        assert!(tape.reduce(x, &[2], false).is_err());
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // y = x*x + 3x => dy/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.input(t1(&[2.0]));
        let sq = tape.square(x);
        let lin = tape.scale(x, 3.0);
        let y = tape.add(sq, lin).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[7.0]);
    }

    #[test]
    fn spike_forward_and_surrogate() {
        let mut tape = Tape::new();
        let u = tape.input(t1(&[0.3, -0.3, 0.0]));
        let s = tape.spike(u, 0.0, 2.0, SpikeMode::Hard);
        assert_eq!(tape.value(s), &[1.0, 0.0, 0.0]);
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        // At u = thr the surrogate peaks at alpha/2 = 1.
        assert_eq!(tape.grad(u)[2], 1.0);
        assert!(tape.grad(u)[0] < 1.0 && tape.grad(u)[0] > 0.0);
        assert_eq!(tape.grad(u)[0], tape.grad(u)[1]);

        // Far from threshold the surrogate vanishes.
        assert!(surrogate_grad(1e6, 2.0) < 1e-9);
        assert!(surrogate_grad(-1e6, 2.0) < 1e-9);
    }

    #[test]
    fn smooth_spike_derivative_matches_surrogate() {
        let report = grad_check(
            |tape, x| {
                let s = tape.spike(x, 1.0, 2.0, SpikeMode::Smooth);
                Ok(tape.sum_all(s))
            },
            &t1(&[0.4, 1.0, 1.7, -2.0]),
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gather_scatter_adds_repeated_indices() {
        let mut tape = Tape::new();
        let src = tape.input(t1(&[10.0, 20.0]));
        let picked = tape.gather1d(src, &[0, 1, 0]).unwrap();
        assert_eq!(tape.value(picked), &[10.0, 20.0, 10.0]);
        let loss = tape.sum_all(picked);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(src), &[2.0, 1.0]);
    }

    #[test]
    fn straight_through_routes_gradients() {
        for &(passthrough, expect_q) in &[(true, 1.0), (false, 0.0)] {
            let mut tape = Tape::new();
            let latent = tape.input(t1(&[0.9]));
            let q = tape.input(t1(&[1.0]));
            let eff = tape.straight_through(latent, q, passthrough).unwrap();
            assert_eq!(tape.value(eff), &[1.0]);
            let loss = tape.sum_all(eff);
            tape.backward(loss).unwrap();
            assert_eq!(tape.grad(latent), &[1.0]);
            assert_eq!(tape.grad(q), &[expect_q]);
        }
    }

    #[test]
    fn fake_quant_snaps_and_passes_gradient() {
        let mut tape = Tape::new();
        // bits=3 -> 3 positive levels, q = 0.9/3 = 0.3
        let x = tape.input(t1(&[0.9, 0.44, -0.16, 0.0]));
        let q = tape.fake_quant(x, 3).unwrap();
        let got = tape.value(q);
        let want = [0.9, 0.3, -0.3, 0.0];
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
        let loss = tape.sum_all(q);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[1.0, 1.0, 1.0, 1.0]);

        // All-zero input passes through.
        let mut tape = Tape::new();
        let z = tape.input(t1(&[0.0, 0.0]));
        let q = tape.fake_quant(z, 8).unwrap();
        assert_eq!(tape.value(q), &[0.0, 0.0]);
    }

    #[test]
    fn ternary_hand_value() {
        let mut tape = Tape::new();
        let latent = tape.input(t1(&[0.9, -0.8, 0.01]));
        let scales = tape.input(t1(&[0.6, 0.5]));
        let out = tape.ternary(latent, scales, 0.05).unwrap();
        // delta = 0.05 * 0.9 = 0.045
        assert_eq!(tape.value(out), &[0.6, -0.5, 0.0]);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        // d w_pos = sum over positive mask, d w_neg = -sum over negative mask.
        assert_eq!(tape.grad(scales), &[1.0, -1.0]);
        assert_eq!(tape.grad(latent), &[0.6, 0.5, 1.0]);
    }

    #[test]
    fn channel_scale_gate_gradient_is_activation_weighted_sum() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.input(t1(&[1.0, 1.0]));
        let y = tape.channel_scale(x, g).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        // With unit gates and upstream grad 1, dg_c = sum of channel values.
        assert_eq!(tape.grad(g), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_xent_matches_finite_differences() {
        let mut rng = stream(5, Stream::GradCheck);
        let mut v = Vec::new();
        for _ in 0..12 {
            v.push(normal(&mut rng));
        }
        let x0 = Tensor::new(vec![12], v).unwrap();
        let report = grad_check(
            |tape, theta| {
                let logits = tape.reshape(theta, vec![3, 4])?;
                tape.softmax_xent(logits, &[1, 0, 3])
            },
            &x0,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn dense_softmax_pipeline_passes_grad_check() {
        // dense layer + softmax-cross-entropy on a random 3x4 input.
        let mut rng = stream(21, Stream::GradCheck);
        let n = 3 * 4 + 4 * 2;
        let mut v = Vec::new();
        for _ in 0..n {
            v.push(normal(&mut rng));
        }
        let x0 = Tensor::new(vec![n], v).unwrap();
        let report = grad_check(
            |tape, theta| {
                let xi: Vec<usize> = (0..12).collect();
                let wi: Vec<usize> = (12..20).collect();
                let xg = tape.gather1d(theta, &xi)?;
                let x = tape.reshape(xg, vec![3, 4])?;
                let wg = tape.gather1d(theta, &wi)?;
                let w = tape.reshape(wg, vec![4, 2])?;
                let logits = tape.matmul(x, w)?;
                tape.softmax_xent(logits, &[0, 1, 0])
            },
            &x0,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_analytic_case() {
        let report = grad_check(
            |tape, x| {
                let sq = tape.square(x);
                Ok(tape.sum_all(sq))
            },
            &t1(&[1.0, -2.0]),
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.pass);
        // And the analytic grad itself:
        let mut tape = Tape::new();
        let x = tape.input(t1(&[1.0, -2.0]));
        let sq = tape.square(x);
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[2.0, -4.0]);
    }

    #[test]
    fn grad_check_flags_mismatched_backward() {
        // The hard spike's forward (a step) does not match its surrogate
        // backward, which is exactly the mismatch grad_check must flag.
        let report = grad_check(
            |tape, x| {
                let s = tape.spike(x, 0.0, 2.0, SpikeMode::Hard);
                Ok(tape.sum_all(s))
            },
            &t1(&[0.3, -0.5]),
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let err = grad_check(|tape, x| Ok(tape.square(x)), &t1(&[1.0, 2.0]), 1e-5, 1e-3);
        assert!(err.is_err());
    }

    #[test]
    fn sampled_grad_check_matches_full_on_its_coords() {
        let build = |tape: &mut Tape, x: TensorId| {
            let sq = tape.square(x);
            Ok(tape.sum_all(sq))
        };
        let x0 = t1(&[0.5, -1.5, 2.0, 0.25]);
        let full = grad_check(build, &x0, 1e-5, 1e-3).unwrap();
        let sampled = grad_check_at(build, &x0, &[2], 1e-5, 1e-3).unwrap();
        assert!(full.pass && sampled.pass);
        assert_eq!(sampled.worst_index, 2);

        assert!(grad_check_at(build, &x0, &[], 1e-5, 1e-3).is_err());
        assert!(grad_check_at(build, &x0, &[4], 1e-5, 1e-3).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = stream(9, Stream::GradCheck);
            let mut v = Vec::new();
            for _ in 0..24 {
                v.push(normal(&mut rng));
            }
            let mut tape = Tape::new();
            let x = tape.input(Tensor::new(vec![2, 12], v).unwrap());
            let w = tape.input(Tensor::new(vec![12, 3], vec![0.1; 36]).unwrap());
            let logits = tape.matmul(x, w).unwrap();
            let loss = tape.softmax_xent(logits, &[0, 2]).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(loss).to_vec(), tape.grad(w).to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn constants_block_gradient_flow() {
        let mut tape = Tape::new();
        let x = tape.input(t1(&[2.0]));
        let frozen = tape.constant(t1(&[2.0]));
        let prod = tape.mul(x, frozen).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), &[2.0]);
        assert_eq!(tape.grad(frozen), &[0.0]);
    }
}

//! Define-by-run reverse-mode autodiff tape.
//!
//! Every model in the crate builds its forward pass on a [`Graph`]; inference
//! simply never calls [`Graph::backward`]. Nodes created from constants do not
//! require gradients, and that flag propagates, so frozen sub-networks cost no
//! backward work.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_arg, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    MatMulNT {
        a: usize,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine {
        x: usize,
        a: f64,
    },
    ScaleChannels {
        x: usize,
        s: usize,
    },
    BiasChannels {
        x: usize,
        b: usize,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Tanh(usize),
    Softplus(usize),
    Abs(usize),
    Square(usize),
    Rsqrt(usize),
    Sum(usize),
    Mean(usize),
    SumLastAxis(usize),
    Reshape(usize),
    UpsampleNearest2x(usize),
    UpsampleBilinear2x(usize),
    ConcatAxis1(Vec<usize>),
    GlobalAvgPool(usize),
    StandardizeBatch { x: usize, inv_std: Vec<f64> },
    L2NormalizeRows(usize),
    PairSoftmax(usize),
    InfoNce {
        q: usize,
        k0: usize,
        negatives: Tensor,
        tau: f64,
        include_positive: bool,
    },
    BroadcastBatch {
        x: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    BiasClamp {
        x: usize,
        bias: f64,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape4(t: &Tensor) -> (usize, usize, usize, usize) {
    t.dims4()
}

/// `(batch, channels, trailing size)` for channel-wise ops on `B x C x ...`.
fn bcr(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], numel(&s[2..]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is ever computed for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(invalid_arg!("conv2d: input {:?} vs weight {:?}", xs, ws));
        }
        let (batch, cin, h, wd) = shape4(self.value(x));
        let (cout, _, k, _) = shape4(self.value(w));
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(invalid_arg!("conv2d: kernel {} does not fit {}x{}", k, h, wd));
        }
        let geom = ConvGeom { cin, h, w: wd, k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            batch,
            &geom,
            self.value(w).data(),
            cout,
            bias,
        );
        let mut ids = vec![x.0, w.0];
        if let Some(b) = b {
            ids.push(b.0);
        }
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::from_vec(&[batch, cout, ho, wo], out)?,
            Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), geom },
            rg,
        ))
    }

    /// `x w^T + b` with `x: B x I`, `w: O x I`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, inp) = self.value(x).dims2();
        let (outp, winp) = self.value(w).dims2();
        if inp != winp {
            return Err(invalid_arg!("linear: input width {} vs weight {}", inp, winp));
        }
        let mut out = vec![0.0; batch * outp];
        kernels::gemm(batch, inp, outp, self.value(x).data(), false, self.value(w).data(), true, &mut out, 0.0);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(outp) {
                row.iter_mut().zip(bias).for_each(|(v, bv)| *v += bv);
            }
        }
        let mut ids = vec![x.0, w.0];
        if let Some(b) = b {
            ids.push(b.0);
        }
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::from_vec(&[batch, outp], out)?,
            Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) },
            rg,
        ))
    }

    /// `a b^T` with `a: M x K`, `b: N x K`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(invalid_arg!("matmul_nt: inner dims {} vs {}", k, k2));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMulNT { a: a.0, b: b.0 }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(v, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `a * x + b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.value(x).map(|t| a * t + b);
        let rg = self.rg(&[x.0]);
        self.push(v, Op::Affine { x: x.0, a }, rg)
    }

    /// `y[b,c,..] = x[b,c,..] * s[b,c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (bsz, c, r) = bcr(self.value(x));
        if self.value(s).shape() != [bsz, c] {
            return Err(invalid_arg!(
                "scale_channels: scale {:?} for input {:?}",
                self.value(s).shape(),
                self.value(x).shape()
            ));
        }
        let mut v = self.value(x).clone();
        let sd = self.value(s).data();
        for (i, chunk) in v.data_mut().chunks_mut(r).enumerate() {
            let sv = sd[i];
            chunk.iter_mut().for_each(|t| *t *= sv);
        }
        let rg = self.rg(&[x.0, s.0]);
        Ok(self.push(v, Op::ScaleChannels { x: x.0, s: s.0 }, rg))
    }

    /// `y[b,c,..] = x[b,c,..] + bias[c]`.
    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c, r) = bcr(self.value(x));
        if self.value(b).len() != c {
            return Err(invalid_arg!("bias_channels: {} biases for {} channels", self.value(b).len(), c));
        }
        let mut v = self.value(x).clone();
        let bd = self.value(b).data();
        for (i, chunk) in v.data_mut().chunks_mut(r).enumerate() {
            let bv = bd[i % c];
            chunk.iter_mut().for_each(|t| *t += bv);
        }
        let rg = self.rg(&[x.0, b.0]);
        Ok(self.push(v, Op::BiasChannels { x: x.0, b: b.0 }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(&[x.0]);
        self.push(v, op, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, move |t| if t > 0.0 { t } else { slope * t }, Op::LeakyRelu { x: x.0, slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, libm::tanh, Op::Tanh(x.0))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |t| t * t, Op::Square(x.0))
    }

    /// `1 / sqrt(x + eps)`.
    pub fn rsqrt(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, move |t| 1.0 / libm::sqrt(t + eps), Op::Rsqrt(x.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x.0]);
        self.push(v, Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x.0]);
        self.push(v, Op::Mean(x.0), rg)
    }

    /// Sums out the trailing axis.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (&n, lead) = shape
            .split_last()
            .ok_or_else(|| invalid_arg!("sum_last_axis on a scalar"))?;
        let data = self.value(x).data().chunks(n).map(|c| c.iter().sum()).collect();
        let v = Tensor::from_vec(lead, data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(v, Op::SumLastAxis(x.0), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(v, Op::Reshape(x.0), rg))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let (b, c, h, w) = shape4(self.value(x));
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * h * w * 4];
        for p in 0..b * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::from_vec(&[b, c, 2 * h, 2 * w], out).expect("shape");
        let rg = self.rg(&[x.0]);
        self.push(v, Op::UpsampleNearest2x(x.0), rg)
    }

    /// Bilinear 2x upsampling with half-pixel centers and clamped borders.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Var {
        let (b, c, h, w) = shape4(self.value(x));
        let (ty, tx) = (bilinear2x_taps(h), bilinear2x_taps(w));
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * h * w * 4];
        for p in 0..b * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for (y, ry) in ty.iter().enumerate() {
                for (xx, rx) in tx.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(iy, wy) in ry {
                        for &(ix, wx) in rx {
                            acc += wy * wx * s[iy * w + ix];
                        }
                    }
                    d[y * 2 * w + xx] = acc;
                }
            }
        }
        let v = Tensor::from_vec(&[b, c, 2 * h, 2 * w], out).expect("shape");
        let rg = self.rg(&[x.0]);
        self.push(v, Op::UpsampleBilinear2x(x.0), rg)
    }

    /// Concatenates along axis 1 (channels, or columns of a matrix).
    pub fn concat_axis1(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).shape().to_vec();
        let batch = first[0];
        let tail = numel(&first[2..]);
        let mut channels = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len() || s[0] != batch || s[2..] != first[2..] {
                return Err(invalid_arg!("concat: {:?} vs {:?}", s, first));
            }
            channels += s[1];
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let mut out = Vec::with_capacity(numel(&shape));
        for b in 0..batch {
            for &x in xs {
                let v = self.value(x);
                let per = v.shape()[1] * tail;
                out.extend_from_slice(&v.data()[b * per..(b + 1) * per]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::ConcatAxis1(ids), rg))
    }

    /// `B x C x H x W -> B x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (b, c, r) = bcr(self.value(x));
        let data = self.value(x).data().chunks(r).map(|ch| ch.iter().sum::<f64>() / r as f64).collect();
        let v = Tensor::from_vec(&[b, c], data).expect("shape");
        let rg = self.rg(&[x.0]);
        self.push(v, Op::GlobalAvgPool(x.0), rg)
    }

    /// Standardizes every column of a `B x D` matrix to zero mean and unit
    /// variance over the batch (`eps` is added to the variance).
    pub fn standardize_batch(&mut self, x: Var, eps: f64) -> Var {
        let mut v = self.value(x).clone();
        let (mean, var) = column_moments(&v);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / libm::sqrt(s + eps)).collect();
        let (_, d) = v.dims2();
        for row in v.data_mut().chunks_mut(d) {
            for ((t, m), k) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *t = (*t - m) * k;
            }
        }
        let rg = self.rg(&[x.0]);
        self.push(v, Op::StandardizeBatch { x: x.0, inv_std }, rg)
    }

    /// Scales every row of a matrix to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (_, d) = self.value(x).dims2();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            let n = row_norm(row);
            row.iter_mut().for_each(|t| *t /= n);
        }
        let rg = self.rg(&[x.0]);
        self.push(v, Op::L2NormalizeRows(x.0), rg)
    }

    /// Two-way softmax per channel. Input `B x 2C` holds the first-of-pair logits
    /// in columns `0..C` and the second in `C..2C`; output `B x C` is the first
    /// member of each pair.
    pub fn pair_softmax(&mut self, x: Var) -> Result<Var> {
        let (b, two_c) = self.value(x).dims2();
        if two_c % 2 != 0 {
            return Err(invalid_arg!("pair_softmax needs an even width, got {}", two_c));
        }
        let c = two_c / 2;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        for row in src.chunks(two_c) {
            for ch in 0..c {
                out.push(pair_softmax_first(row[ch], row[c + ch]));
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::from_vec(&[b, c], out)?, Op::PairSoftmax(x.0), rg))
    }

    /// Summed InfoNCE loss of `q` against positives `k0` and constant negatives.
    pub fn info_nce(
        &mut self,
        q: Var,
        k0: Var,
        negatives: &Tensor,
        tau: f64,
        include_positive: bool,
    ) -> Result<Var> {
        let (b, d) = self.value(q).dims2();
        if self.value(k0).shape() != [b, d] || negatives.rank() != 2 || negatives.shape()[1] != d {
            return Err(invalid_arg!(
                "info_nce: q {:?}, k0 {:?}, negatives {:?}",
                self.value(q).shape(),
                self.value(k0).shape(),
                negatives.shape()
            ));
        }
        let mut total = 0.0;
        for i in 0..b {
            let logits = nce_logits(self.value(q).row(i), self.value(k0).row(i), negatives, tau);
            total += nce_row_loss(&logits, include_positive);
        }
        let rg = self.rg(&[q.0, k0.0]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::InfoNce {
                q: q.0,
                k0: k0.0,
                negatives: negatives.clone(),
                tau,
                include_positive,
            },
            rg,
        ))
    }

    /// Repeats a tensor with leading dimension 1 `batch` times.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.first() != Some(&1) {
            return Err(invalid_arg!("broadcast_batch needs a leading 1, got {:?}", s));
        }
        let mut shape = s.clone();
        shape[0] = batch;
        let mut data = Vec::with_capacity(numel(&shape));
        for _ in 0..batch {
            data.extend_from_slice(self.value(x).data());
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::BroadcastBatch { x: x.0 }, rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, n) = self.value(x).dims2();
        if start + len > n {
            return Err(invalid_arg!("slice_cols {}..{} of {}", start, start + len, n));
        }
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::from_vec(&[b, len], data)?, Op::SliceCols { x: x.0, start }, rg))
    }

    /// `clamp(x + bias, eps, 1 - eps)`.
    pub fn bias_clamp(&mut self, x: Var, bias: f64, eps: f64) -> Var {
        self.unary(x, move |t| (t + bias).clamp(eps, 1.0 - eps), Op::BiasClamp { x: x.0, bias, eps })
    }

    /// Reverse pass from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(invalid_arg!("backward needs a scalar, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], idx: usize, t: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let batch = xv.shape()[0];
                let cout = wv.shape()[0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    xv.data(),
                    batch,
                    geom,
                    wv.data(),
                    cout,
                    g.data(),
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("shape"));
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, Tensor::from_vec(wv.shape(), dw).expect("shape"));
                }
                if let Some(b) = b {
                    self.acc(grads, *b, Tensor::from_vec(&[cout], db).expect("shape"));
                }
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (batch, inp) = xv.dims2();
                let outp = wv.shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![0.0; batch * inp];
                    kernels::gemm(batch, outp, inp, g.data(), false, wv.data(), false, &mut dx, 0.0);
                    self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("shape"));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; outp * inp];
                    kernels::gemm(outp, batch, inp, g.data(), true, xv.data(), false, &mut dw, 0.0);
                    self.acc(grads, *w, Tensor::from_vec(wv.shape(), dw).expect("shape"));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; outp];
                    for row in g.data().chunks(outp) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.acc(grads, *b, Tensor::from_vec(&[outp], db).expect("shape"));
                }
            }
            Op::MatMulNT { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, k) = av.dims2();
                let n = bv.shape()[0];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, bv.data(), false, &mut da, 0.0);
                    self.acc(grads, *a, Tensor::from_vec(&[m, k], da).expect("shape"));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::gemm(n, m, k, g.data(), true, av.data(), false, &mut db, 0.0);
                    self.acc(grads, *b, Tensor::from_vec(&[n, k], db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.needs(*a) {
                    self.acc(grads, *a, g.zip_map(bv, |gv, t| gv * t).expect("shape"));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.zip_map(av, |gv, t| gv * t).expect("shape"));
                }
            }
            Op::Affine { x, a } => self.acc(grads, *x, g.scale(*a)),
            Op::ScaleChannels { x, s } => {
                let xv = &self.nodes[*x].value;
                let sv = &self.nodes[*s].value;
                let (_, _, r) = bcr(xv);
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (idx, chunk) in dx.data_mut().chunks_mut(r).enumerate() {
                        let s = sv.data()[idx];
                        chunk.iter_mut().for_each(|t| *t *= s);
                    }
                    self.acc(grads, *x, dx);
                }
                if self.needs(*s) {
                    let ds: Vec<f64> = g
                        .data()
                        .chunks(r)
                        .zip(xv.data().chunks(r))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc(grads, *s, Tensor::from_vec(sv.shape(), ds).expect("shape"));
                }
            }
            Op::BiasChannels { x, b } => {
                self.acc(grads, *x, g.clone());
                if self.needs(*b) {
                    let bv = &self.nodes[*b].value;
                    let c = bv.len();
                    let (_, _, r) = bcr(g);
                    let mut db = vec![0.0; c];
                    for (idx, chunk) in g.data().chunks(r).enumerate() {
                        db[idx % c] += chunk.iter().sum::<f64>();
                    }
                    self.acc(grads, *b, Tensor::from_vec(bv.shape(), db).expect("shape"));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &self.nodes[*x].value;
                let s = *slope;
                self.acc(grads, *x, g.zip_map(xv, |gv, t| if t > 0.0 { gv } else { s * gv }).expect("shape"));
            }
            Op::Tanh(x) => {
                self.acc(grads, *x, g.zip_map(out, |gv, y| gv * (1.0 - y * y)).expect("shape"));
            }
            Op::Softplus(x) => {
                let xv = &self.nodes[*x].value;
                self.acc(grads, *x, g.zip_map(xv, |gv, t| gv * sigmoid(t)).expect("shape"));
            }
            Op::Abs(x) => {
                let xv = &self.nodes[*x].value;
                self.acc(grads, *x, g.zip_map(xv, |gv, t| gv * sign(t)).expect("shape"));
            }
            Op::Square(x) => {
                let xv = &self.nodes[*x].value;
                self.acc(grads, *x, g.zip_map(xv, |gv, t| 2.0 * gv * t).expect("shape"));
            }
            Op::Rsqrt(x) => {
                // d/dx (x+eps)^(-1/2) = -1/2 * y^3
                self.acc(grads, *x, g.zip_map(out, |gv, y| -0.5 * gv * y * y * y).expect("shape"));
            }
            Op::Sum(x) => {
                let s = self.nodes[*x].value.shape();
                self.acc(grads, *x, Tensor::full(s, g.item()));
            }
            Op::Mean(x) => {
                let xv = &self.nodes[*x].value;
                self.acc(grads, *x, Tensor::full(xv.shape(), g.item() / xv.len() as f64));
            }
            Op::SumLastAxis(x) => {
                let xv = &self.nodes[*x].value;
                let n = *xv.shape().last().expect("rank");
                let data = g.data().iter().flat_map(|&v| core::iter::repeat_n(v, n)).collect();
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), data).expect("shape"));
            }
            Op::Reshape(x) => {
                let s = self.nodes[*x].value.shape();
                self.acc(grads, *x, g.clone().reshape(s).expect("shape"));
            }
            Op::UpsampleNearest2x(x) => {
                let xv = &self.nodes[*x].value;
                let (b, c, h, w) = xv.dims4();
                let mut dx = vec![0.0; b * c * h * w];
                let gd = g.data();
                for p in 0..b * c {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("shape"));
            }
            Op::UpsampleBilinear2x(x) => {
                let xv = &self.nodes[*x].value;
                let (b, c, h, w) = xv.dims4();
                let (ty, tx) = (bilinear2x_taps(h), bilinear2x_taps(w));
                let mut dx = vec![0.0; b * c * h * w];
                let gd = g.data();
                for p in 0..b * c {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (y, ry) in ty.iter().enumerate() {
                        for (xx, rx) in tx.iter().enumerate() {
                            let gv = src[y * 2 * w + xx];
                            for &(iy, wy) in ry {
                                for &(ix, wx) in rx {
                                    dst[iy * w + ix] += wy * wx * gv;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("shape"));
            }
            Op::ConcatAxis1(ids) => {
                let batch = g.shape()[0];
                let tail = numel(&g.shape()[2..]);
                let total = g.shape()[1] * tail;
                let mut offset = 0;
                for &id in ids {
                    let s = self.nodes[id].value.shape();
                    let per = s[1] * tail;
                    if self.needs(id) {
                        let mut d = Vec::with_capacity(batch * per);
                        for b in 0..batch {
                            d.extend_from_slice(&g.data()[b * total + offset..b * total + offset + per]);
                        }
                        self.acc(grads, id, Tensor::from_vec(s, d).expect("shape"));
                    }
                    offset += per;
                }
            }
            Op::GlobalAvgPool(x) => {
                let xv = &self.nodes[*x].value;
                let (_, _, r) = bcr(xv);
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&v| core::iter::repeat_n(v / r as f64, r))
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), data).expect("shape"));
            }
            Op::StandardizeBatch { x, inv_std } => {
                let y = out;
                let (b, d) = y.dims2();
                let mean_g = column_means(g);
                let mut mean_gy = vec![0.0; d];
                for (gr, yr) in g.data().chunks(d).zip(y.data().chunks(d)) {
                    for j in 0..d {
                        mean_gy[j] += gr[j] * yr[j];
                    }
                }
                mean_gy.iter_mut().for_each(|m| *m /= b as f64);
                let mut dx = g.clone();
                for (row, yr) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    for j in 0..d {
                        row[j] = inv_std[j] * (row[j] - mean_g[j] - yr[j] * mean_gy[j]);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::L2NormalizeRows(x) => {
                let xv = &self.nodes[*x].value;
                let (_, d) = xv.dims2();
                let mut dx = Vec::with_capacity(xv.len());
                for ((xr, yr), gr) in xv.data().chunks(d).zip(out.data().chunks(d)).zip(g.data().chunks(d)) {
                    let n = row_norm(xr);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, gv)| (gv - y * dot) / n));
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("shape"));
            }
            Op::PairSoftmax(x) => {
                let xv = &self.nodes[*x].value;
                let (_, two_c) = xv.dims2();
                let c = two_c / 2;
                let mut dx = vec![0.0; xv.len()];
                for ((drow, mrow), grow) in dx.chunks_mut(two_c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                    for ch in 0..c {
                        let m = mrow[ch];
                        let d = grow[ch] * m * (1.0 - m);
                        drow[ch] = d;
                        drow[c + ch] = -d;
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("shape"));
            }
            Op::InfoNce { q, k0, negatives, tau, include_positive } => {
                let qv = &self.nodes[*q].value;
                let kv = &self.nodes[*k0].value;
                let (b, d) = qv.dims2();
                let scale = g.item() / tau;
                let mut dq = vec![0.0; b * d];
                let mut dk = vec![0.0; b * d];
                for i in 0..b {
                    let logits = nce_logits(qv.row(i), kv.row(i), negatives, *tau);
                    let coeffs = nce_row_grad(&logits, *include_positive);
                    let qrow = qv.row(i);
                    let krow = kv.row(i);
                    let dqr = &mut dq[i * d..(i + 1) * d];
                    for t in 0..d {
                        dqr[t] += coeffs[0] * krow[t] * scale;
                    }
                    for (j, &cj) in coeffs[1..].iter().enumerate() {
                        let nrow = negatives.row(j);
                        for t in 0..d {
                            dqr[t] += cj * nrow[t] * scale;
                        }
                    }
                    for t in 0..d {
                        dk[i * d + t] = coeffs[0] * qrow[t] * scale;
                    }
                }
                if self.needs(*q) {
                    self.acc(grads, *q, Tensor::from_vec(&[b, d], dq).expect("shape"));
                }
                if self.needs(*k0) {
                    self.acc(grads, *k0, Tensor::from_vec(&[b, d], dk).expect("shape"));
                }
            }
            Op::BroadcastBatch { x } => {
                let xv = &self.nodes[*x].value;
                let per = xv.len();
                let mut dx = vec![0.0; per];
                for chunk in g.data().chunks(per) {
                    dx.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("shape"));
            }
            Op::SliceCols { x, start } => {
                let xv = &self.nodes[*x].value;
                let (_, n) = xv.dims2();
                let len = g.shape()[1];
                let mut dx = vec![0.0; xv.len()];
                for (drow, grow) in dx.chunks_mut(n).zip(g.data().chunks(len)) {
                    drow[*start..*start + len].copy_from_slice(grow);
                }
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), dx).expect("shape"));
            }
            Op::BiasClamp { x, bias, eps } => {
                let xv = &self.nodes[*x].value;
                let (lo, hi) = (*eps, 1.0 - *eps);
                let b = *bias;
                self.acc(
                    grads,
                    *x,
                    g.zip_map(xv, |gv, t| {
                        let v = t + b;
                        if v > lo && v < hi {
                            gv
                        } else {
                            0.0
                        }
                    })
                    .expect("shape"),
                );
            }
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    libm::sqrt(row.iter().map(|t| t * t).sum::<f64>()).max(1e-12)
}

fn sign(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + libm::exp(-t))
    } else {
        let e = libm::exp(t);
        e / (1.0 + e)
    }
}

pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + libm::log1p(libm::exp(-t))
    } else {
        libm::log1p(libm::exp(t))
    }
}

/// `exp(a) / (exp(a) + exp(b))` with max subtraction.
pub fn pair_softmax_first(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    let ea = libm::exp(a - m);
    let eb = libm::exp(b - m);
    ea / (ea + eb)
}

/// `[q.k0, q.k1, ..., q.kn] / tau`.
fn nce_logits(q: &[f64], k0: &[f64], negatives: &Tensor, tau: f64) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = negatives.shape()[0];
    let mut out = Vec::with_capacity(n + 1);
    out.push(dot(q, k0) / tau);
    for j in 0..n {
        out.push(dot(q, negatives.row(j)) / tau);
    }
    out
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(xs.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
}

fn nce_row_loss(logits: &[f64], include_positive: bool) -> f64 {
    let denom = if include_positive { &logits[..] } else { &logits[1..] };
    log_sum_exp(denom) - logits[0]
}

/// d(row loss) / d(logit_j).
/// Source taps for each of the `2n` outputs of a bilinear 2x upsampling.
fn bilinear2x_taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..n)
        .flat_map(|k| [[(k.saturating_sub(1), 0.25), (k, 0.75)], [(k, 0.75), ((k + 1).min(n - 1), 0.25)]])
        .collect()
}

/// Per-column mean of a `B x D` matrix.
pub fn column_means(t: &Tensor) -> Vec<f64> {
    let (b, d) = t.dims2();
    let mut mean = vec![0.0; d];
    for row in t.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    mean
}

/// Per-column mean and (biased) variance of a `B x D` matrix.
pub fn column_moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, d) = t.dims2();
    let mean = column_means(t);
    let mut var = vec![0.0; d];
    for row in t.data().chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
        }
    }
    var.iter_mut().for_each(|v| *v /= b as f64);
    (mean, var)
}

fn nce_row_grad(logits: &[f64], include_positive: bool) -> Vec<f64> {
    let start = if include_positive { 0 } else { 1 };
    let lse = log_sum_exp(&logits[start..]);
    let mut out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, &l)| if j >= start { libm::exp(l - lse) } else { 0.0 })
        .collect();
    out[0] -= 1.0;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    /// Central finite differences of `f` at every coordinate of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / denom < tol, "{} vs {}", x, y);
        }
    }

    /// Checks d(build)/d(input) for a graph built from a single leaf.
    fn check(x: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let out = build(&mut g, v);
        let loss = g.sum(out);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numeric_grad(&x, &|t| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let out = build(&mut g, v);
            g.value(out).sum()
        });
        assert_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn conv_grads() {
        let mut r = rng(1);
        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let wc = w.clone();
        check(x.clone(), move |g, v| {
            let w = g.constant(wc.clone());
            let y = g.conv2d(v, w, None, 2, 1).unwrap();
            g.square(y)
        });
        let xc = x.clone();
        check(w, move |g, v| {
            let x = g.constant(xc.clone());
            let y = g.conv2d(x, v, None, 1, 1).unwrap();
            g.square(y)
        });
        let xc = x.clone();
        check(Tensor::randn(&[4, 3, 1, 1], 1.0, &mut r), move |g, v| {
            let x = g.constant(xc.clone());
            let y = g.conv2d(x, v, None, 1, 0).unwrap();
            g.square(y)
        });
    }

    #[test]
    fn linear_and_matmul_grads() {
        let mut r = rng(2);
        let w = Tensor::randn(&[3, 4], 1.0, &mut r);
        check(Tensor::randn(&[2, 4], 1.0, &mut r), move |g, v| {
            let w = g.constant(w.clone());
            let y = g.linear(v, w, None).unwrap();
            g.square(y)
        });
        let a = Tensor::randn(&[2, 4], 1.0, &mut r);
        check(Tensor::randn(&[5, 4], 1.0, &mut r), move |g, v| {
            let a = g.constant(a.clone());
            let y = g.matmul_nt(a, v).unwrap();
            g.square(y)
        });
    }

    #[test]
    fn bilinear_upsampling_matches_image_resize() {
        let x = Tensor::randn(&[2, 3, 3, 5], 1.0, &mut rng(8));
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let u = g.upsample_bilinear2x(v);
        let up = g.value(u).clone();
        for b in 0..2 {
            let want = crate::imaging::resize_bilinear(&x.batch_item(b), 6, 10);
            for (a, w) in up.batch_item(b).data().iter().zip(want.data()) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_grads() {
        let mut r = rng(3);
        let x = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
        check(x.clone(), |g, v| g.tanh(v));
        check(x.clone(), |g, v| g.softplus(v));
        check(x.clone(), |g, v| {
            let l = g.leaky_relu(v, 0.2);
            g.square(l)
        });
        check(x.map(|t| t * t + 0.5), |g, v| g.rsqrt(v, 1e-8));
        check(x.clone(), |g, v| g.upsample_nearest2x(v));
        check(x.clone(), |g, v| {
            let u = g.upsample_bilinear2x(v);
            g.square(u)
        });
        check(x.clone(), |g, v| {
            let p = g.global_avg_pool(v);
            g.square(p)
        });
        check(x.clone(), |g, v| {
            let c = g.concat_axis1(&[v, v]).unwrap();
            g.square(c)
        });
        check(x.clone(), |g, v| {
            let s = g.sum_last_axis(v).unwrap();
            g.square(s)
        });
    }

    #[test]
    fn channel_op_grads() {
        let mut r = rng(4);
        let x = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
        let s = Tensor::randn(&[2, 3], 1.0, &mut r);
        let sc = s.clone();
        check(x.clone(), move |g, v| {
            let s = g.constant(sc.clone());
            let y = g.scale_channels(v, s).unwrap();
            g.square(y)
        });
        let xc = x.clone();
        check(s, move |g, v| {
            let x = g.constant(xc.clone());
            let y = g.scale_channels(x, v).unwrap();
            g.square(y)
        });
        let xc = x.clone();
        check(Tensor::randn(&[3], 1.0, &mut r), move |g, v| {
            let x = g.constant(xc.clone());
            let y = g.bias_channels(x, v).unwrap();
            g.square(y)
        });
    }

    #[test]
    fn row_op_grads() {
        let mut r = rng(5);
        let x = Tensor::randn(&[3, 6], 1.0, &mut r);
        let w = Tensor::randn(&[3, 6], 1.0, &mut r);
        let wc = w.clone();
        check(x.clone(), move |g, v| {
            let n = g.l2_normalize_rows(v);
            let w = g.constant(wc.clone());
            g.mul(n, w).unwrap()
        });
        let wc = Tensor::randn(&[3, 3], 1.0, &mut r);
        check(x.clone(), move |g, v| {
            let m = g.pair_softmax(v).unwrap();
            let w = g.constant(wc.clone());
            g.mul(m, w).unwrap()
        });
        let wc = w.clone();
        check(x.clone(), move |g, v| {
            let c = g.standardize_batch(v, 1e-3);
            let w = g.constant(wc.clone());
            let p = g.mul(c, w).unwrap();
            g.square(p)
        });
        check(x.clone(), |g, v| {
            let s = g.slice_cols(v, 2, 3).unwrap();
            g.square(s)
        });
        check(Tensor::randn(&[1, 2, 2], 1.0, &mut r), |g, v| {
            let b = g.broadcast_batch(v, 3).unwrap();
            g.square(b)
        });
    }

    #[test]
    fn pair_softmax_is_stable() {
        assert!((pair_softmax_first(1000.0, 0.0) - 1.0).abs() < 1e-12);
        assert!(pair_softmax_first(-1000.0, 0.0) < 1e-12);
        assert_eq!(pair_softmax_first(3.0, 3.0), 0.5);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::zeros(&[2]));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 1.0));
        let l = g.leaf(Tensor::full(&[2], 2.0));
        let p = g.mul(c, l).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(l).unwrap().data(), &[1.0, 1.0]);
    }
}

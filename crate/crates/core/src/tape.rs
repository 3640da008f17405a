//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends one node holding its output value
//! and whatever it needs for the backward pass. Nodes are only ever appended,
//! so node order is a topological order and [`Tape::backward`] simply walks
//! the tape from the loss back to the start.
//!
//! A tape is owned by one training thread and discarded after each step.

use crate::error::{Error, Result};
use crate::hypernet::KernelReduction;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a train-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance, the value folded into running statistics.
    pub var_unbiased: Vec<T>,
}

/// Layout of hypernetwork output units inside a convolution weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub unit_channels: usize,
    pub unit_kernel: usize,
    pub reduction: KernelReduction,
}

impl BlockLayout {
    pub fn unit_len(&self) -> usize {
        self.unit_channels * self.unit_channels * self.unit_kernel * self.unit_kernel
    }

    pub fn num_blocks(&self) -> usize {
        (self.c_out / self.unit_channels) * (self.c_in / self.unit_channels)
    }

    /// For every element of the assembled weight, the unit entries that feed
    /// it, as (block row, offset within unit) pairs.
    fn sources(&self, out_index: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (cu, ku, k) = (self.unit_channels, self.unit_kernel, self.k);
        let kk = k * k;
        let c_in_blocks = self.c_in / cu;
        let o = out_index / (self.c_in * kk);
        let rem = out_index % (self.c_in * kk);
        let c = rem / kk;
        let (ki, kj) = ((rem % kk) / k, rem % k);
        let block = (o / cu) * c_in_blocks + c / cu;
        let (lo, lc) = (o % cu, c % cu);
        let base = (lo * cu + lc) * ku * ku;
        let reduce = k != ku;
        (0..if reduce { ku * ku } else { 1 }).map(move |t| {
            let off = if reduce { base + t } else { base + ki * ku + kj };
            (block, off)
        })
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    AddRowBias { a: Var, bias: Var },
    AddChannelBias { a: Var, bias: Var },
    Conv2d { input: Var, weight: Var, stride: usize, padding: usize, cols: Vec<T> },
    BatchNorm { input: Var, scale: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { a: Var },
    MaxPool { a: Var, argmax: Vec<usize> },
    AvgPool { a: Var, window: usize, stride: usize },
    Reshape { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Sum { a: Var },
    Softmax { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    NllOfProbs { probs: Var, labels: Vec<usize> },
    AssembleBlocks { blocks: Var, layout: BlockLayout, argmax: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but yields zeros for nodes the loss never reached.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn dims4(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Dimension(format!("{what}: expected N×C×H×W, got {s:?}"))),
    }
}

fn dims2(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        ref s => Err(Error::Dimension(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Index(format!("label {l} at position {i} outside [0, {classes})")));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}

/// Per-row cross-entropy `−log softmax(logits)[label]`, without a tape.
pub fn cross_entropy_per_row<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    let (rows, cols) = dims2(logits, "cross_entropy")?;
    check_labels(labels, rows, cols)?;
    Ok(logits
        .data()
        .chunks(cols)
        .zip(labels)
        .map(|(row, &l)| {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            s.ln() + m - row[l]
        })
        .collect())
}

fn im2col<T: Scalar>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let ncols = n * ho * wo;
    let mut cols = vec![T::zero(); c * k * k * ncols];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let dst = &mut cols[r * ncols..(r + 1) * ncols];
                for ni in 0..n {
                    let plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                        let base = (ni * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - padding as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[base + ow] = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    cols: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let ncols = n * ho * wo;
    let mut x = vec![T::zero(); n * c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let src = &cols[r * ncols..(r + 1) * ncols];
                for ni in 0..n {
                    let plane = &mut x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let base = (ni * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - padding as isize;
                            if iw >= 0 && iw < w as isize {
                                plane[ih as usize * w + iw as usize] += src[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub const BN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are only tracked for leaves
    /// created with `requires_grad` and for nodes that depend on them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!("variable {} is not on this tape", v.0)))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av, "matmul lhs")?;
        let (k2, n) = dims2(bv, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner extents differ, lhs {:?} rhs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut out, n, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (m, n) = dims2(av, "transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose { a }, &[a]))
    }

    /// `a[i, j] + bias[j]` for a matrix `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.check(a)?;
        self.check(bias)?;
        let (av, bv) = (self.value(a), self.value(bias));
        let (_, n) = dims2(av, "add_row_bias")?;
        if bv.len() != n || bv.rank() != 1 {
            return Err(Error::Dimension(format!(
                "add_row_bias: bias {:?} does not match rows of {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let data = av
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(&x, &b)| x + b))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRowBias { a, bias }, &[a, bias]))
    }

    /// `a[n, c, h, w] + bias[c]`.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.check(a)?;
        self.check(bias)?;
        let (av, bv) = (self.value(a), self.value(bias));
        let (_, c, h, w) = dims4(av, "add_channel_bias")?;
        if bv.len() != c || bv.rank() != 1 {
            return Err(Error::Dimension(format!(
                "add_channel_bias: bias {:?} does not match channels of {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let hw = h * w;
        let data = av
            .data()
            .chunks(hw)
            .enumerate()
            .flat_map(|(i, plane)| {
                let b = bv.data()[i % c];
                plane.iter().map(move |&x| x + b)
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddChannelBias { a, bias }, &[a, bias]))
    }

    /// 2-d cross-correlation (no kernel flip), no bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        let (xv, wv) = (self.value(input), self.value(weight));
        let (n, c, h, w) = dims4(xv, "conv2d input")?;
        let (o, c2, k, k2) = dims4(wv, "conv2d weight")?;
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be positive".into()));
        }
        if c != c2 || k != k2 {
            return Err(Error::Dimension(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {k}×{k} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let cols = im2col(xv.data(), (n, c, h, w), k, stride, padding, (ho, wo));
        let ncols = n * ho * wo;
        let ckk = c * k * k;
        let mut tmp = vec![T::zero(); o * ncols];
        T::gemm(o, ckk, ncols, wv.data(), (ckk, 1), &cols, (ncols, 1), &mut tmp, ncols, false);
        let hw = ho * wo;
        let mut out = vec![T::zero(); n * o * hw];
        for oi in 0..o {
            for ni in 0..n {
                out[(ni * o + oi) * hw..(ni * o + oi + 1) * hw]
                    .copy_from_slice(&tmp[oi * ncols + ni * hw..oi * ncols + (ni + 1) * hw]);
            }
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, stride, padding, cols }, &[input, weight]))
    }

    /// Batch norm over the channel axis of an N×C×H×W input.
    ///
    /// In train mode the batch statistics normalize the input and are returned
    /// so the caller can fold them into running statistics; in eval mode the
    /// supplied running statistics are used and nothing is returned.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.check(input)?;
        self.check(scale)?;
        self.check(shift)?;
        let xv = self.value(input);
        let (n, c, h, w) = dims4(xv, "batch_norm")?;
        let (sv, bv) = (self.value(scale).data(), self.value(shift).data());
        if sv.len() != c || bv.len() != c {
            return Err(Error::Dimension(format!(
                "batch_norm: scale/shift lengths {}/{} for {c} channels",
                sv.len(),
                bv.len()
            )));
        }
        let hw = h * w;
        let count = T::from_usize(n * hw).unwrap();
        let eps = T::lit(BN_EPS);
        let x = xv.data();
        let mut stats = None;
        let (mean, inv_std): (Vec<T>, Vec<T>) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::Dimension("batch_norm: running stats length".into()));
                }
                (rm.to_vec(), rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect())
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for ni in 0..n {
                        s += x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().copied().sum();
                    }
                    let m = s / count;
                    let mut q = T::zero();
                    for ni in 0..n {
                        for &v in &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ci] = m;
                    var[ci] = q / count;
                }
                let unbiased = if n * hw > 1 {
                    let corr = count / (count - T::one());
                    var.iter().map(|&v| v * corr).collect()
                } else {
                    var.clone()
                };
                stats = Some(BatchStats { mean: mean.clone(), var_unbiased: unbiased });
                let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
        };
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for (i, plane) in x.chunks(hw).enumerate() {
            let ci = i % c;
            for (j, &v) in plane.iter().enumerate() {
                let xh = (v - mean[ci]) * inv_std[ci];
                xhat[i * hw + j] = xh;
                out[i * hw + j] = sv[ci] * xh + bv[ci];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let train = running.is_none();
        let v = self.push(
            value,
            Op::BatchNorm { input, scale, shift, xhat, inv_std, train },
            &[input, scale, shift],
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(value, Op::Relu { a }, &[a]))
    }

    fn pool_dims(&self, a: Var, window: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (n, c, h, w) = dims4(self.value(a), "pool")?;
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::Dimension(format!(
                "pool: window {window} stride {stride} invalid for {h}×{w} input"
            )));
        }
        Ok((n, c, h, w, (h - window) / stride + 1, (w - window) / stride + 1))
    }

    pub fn max_pool(&mut self, a: Var, window: usize, stride: usize) -> Result<Var> {
        self.check(a)?;
        let (n, c, h, w, ho, wo) = self.pool_dims(a, window, stride)?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * stride * w + ow * stride;
                    for i in 0..window {
                        for j in 0..window {
                            let idx = base + (oh * stride + i) * w + ow * stride + j;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { a, argmax }, &[a]))
    }

    pub fn avg_pool(&mut self, a: Var, window: usize, stride: usize) -> Result<Var> {
        self.check(a)?;
        let (n, c, h, w, ho, wo) = self.pool_dims(a, window, stride)?;
        let x = self.value(a).data();
        let inv = T::one() / T::from_usize(window * window).unwrap();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = T::zero();
                    for i in 0..window {
                        for j in 0..window {
                            s += x[base + (oh * stride + i) * w + ow * stride + j];
                        }
                    }
                    out.push(s * inv);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool { a, window, stride }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "mul: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|v| v * factor);
        Ok(self.push(value, Op::Scale { a, factor }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: T = self.value(a).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, &[a]))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (_, cols) = dims2(av, "softmax")?;
        let value = Tensor::new(av.shape().to_vec(), softmax_rows(av.data(), cols))?;
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let (rows, cols) = dims2(lv, "cross_entropy")?;
        check_labels(labels, rows, cols)?;
        let per_row = cross_entropy_per_row(lv, labels)?;
        let loss = per_row.iter().copied().sum::<T>() / T::from_usize(rows).unwrap();
        let probs = softmax_rows(lv.data(), cols);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean over rows of `−ln probs[label]` for rows that already sum to one.
    pub fn nll_of_probs(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        self.check(probs)?;
        let pv = self.value(probs);
        let (rows, cols) = dims2(pv, "nll_of_probs")?;
        check_labels(labels, rows, cols)?;
        let tiny = T::min_positive_value();
        let s: T = pv.data().chunks(cols).zip(labels).map(|(r, &l)| -r[l].max(tiny).ln()).sum();
        let loss = s / T::from_usize(rows).unwrap();
        Ok(self.push(Tensor::scalar(loss), Op::NllOfProbs { probs, labels: labels.to_vec() }, &[probs]))
    }

    /// Tiles a D×U matrix of hypernetwork output units into a
    /// `c_out × c_in × k × k` weight (see [`BlockLayout`]).
    pub fn assemble_blocks(&mut self, blocks: Var, layout: BlockLayout) -> Result<Var> {
        self.check(blocks)?;
        let bv = self.value(blocks);
        let (d, u) = dims2(bv, "assemble_blocks")?;
        if u != layout.unit_len() {
            return Err(Error::Generation(format!(
                "unit length {u} does not match {}×{}×{}×{}",
                layout.unit_channels, layout.unit_channels, layout.unit_kernel, layout.unit_kernel
            )));
        }
        if d != layout.num_blocks() {
            return Err(Error::Generation(format!(
                "{d} chunks supplied, layer {}×{} needs {}",
                layout.c_out,
                layout.c_in,
                layout.num_blocks()
            )));
        }
        let total = layout.c_out * layout.c_in * layout.k * layout.k;
        let src = bv.data();
        let mut out = Vec::with_capacity(total);
        let mut argmax = Vec::new();
        let reduce = layout.k != layout.unit_kernel;
        for idx in 0..total {
            if !reduce {
                let (b, off) = layout.sources(idx).next().unwrap();
                out.push(src[b * u + off]);
                continue;
            }
            let vals = layout.sources(idx).map(|(b, off)| (b * u + off, src[b * u + off]));
            match layout.reduction {
                KernelReduction::Sum => out.push(vals.map(|(_, v)| v).sum()),
                KernelReduction::Mean => {
                    let n = T::from_usize(layout.unit_kernel * layout.unit_kernel).unwrap();
                    out.push(vals.map(|(_, v)| v).sum::<T>() / n)
                }
                KernelReduction::Max => {
                    let (best, v) = vals.fold((usize::MAX, T::neg_infinity()), |acc, (i, v)| {
                        if acc.0 == usize::MAX || v > acc.1 {
                            (i, v)
                        } else {
                            acc
                        }
                    });
                    out.push(v);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![layout.c_out, layout.c_in, layout.k, layout.k], out)?;
        Ok(self.push(value, Op::AssembleBlocks { blocks, layout, argmax }, &[blocks]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, (n, 1), bv.data(), (1, n), &mut da, k, false);
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), (1, k), g, (n, 1), &mut db, n, false);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Transpose { a } => {
                if self.wants(*a) {
                    let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let mut da = vec![T::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::AddRowBias { a, bias } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], db);
                }
            }
            Op::AddChannelBias { a, bias } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*bias) {
                    let s = self.value(*a).shape();
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let mut db = vec![T::zero(); c];
                    for (i, plane) in g.chunks(hw).enumerate() {
                        db[i % c] += plane.iter().copied().sum();
                    }
                    accumulate(&mut grads[bias.0], db);
                }
            }
            Op::Conv2d { input, weight, stride, padding, cols } => {
                let xs = self.value(*input).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let ws = self.value(*weight).shape();
                let (o, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let (ho, wo) = (os[2], os[3]);
                let hw = ho * wo;
                let ncols = n * hw;
                let ckk = c * k * k;
                let mut gt = vec![T::zero(); o * ncols];
                for oi in 0..o {
                    for ni in 0..n {
                        gt[oi * ncols + ni * hw..oi * ncols + (ni + 1) * hw]
                            .copy_from_slice(&g[(ni * o + oi) * hw..(ni * o + oi + 1) * hw]);
                    }
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); o * ckk];
                    T::gemm(o, ncols, ckk, &gt, (ncols, 1), cols, (1, ncols), &mut dw, ckk, false);
                    accumulate(&mut grads[weight.0], dw);
                }
                if self.wants(*input) {
                    let wv = self.value(*weight).data();
                    let mut dcols = vec![T::zero(); ckk * ncols];
                    T::gemm(ckk, o, ncols, wv, (1, ckk), &gt, (ncols, 1), &mut dcols, ncols, false);
                    let dx = col2im(&dcols, (n, c, h, w), k, *stride, *padding, (ho, wo));
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::BatchNorm { input, scale, shift, xhat, inv_std, train } => {
                let s = self.value(*input).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let sv = self.value(*scale).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ci = i % c;
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        sum_g[ci] += gv;
                        sum_gx[ci] += gv * xv;
                    }
                }
                if self.wants(*scale) {
                    accumulate(&mut grads[scale.0], sum_gx.clone());
                }
                if self.wants(*shift) {
                    accumulate(&mut grads[shift.0], sum_g.clone());
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    let count = T::from_usize(n * hw).unwrap();
                    for (i, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                        let ci = i % c;
                        let k = sv[ci] * inv_std[ci];
                        for (j, (&gv, &xv)) in gp.iter().zip(xp).enumerate() {
                            dx[i * hw + j] = if *train {
                                k * (gv - sum_g[ci] / count - xv * sum_gx[ci] / count)
                            } else {
                                k * gv
                            };
                        }
                    }
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::Relu { a } => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let da = g.iter().zip(x).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::MaxPool { a, argmax } => {
                if self.wants(*a) {
                    let mut da = vec![T::zero(); self.value(*a).len()];
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        da[idx] += gv;
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::AvgPool { a, window, stride } => {
                if self.wants(*a) {
                    let s = self.value(*a).shape();
                    let (h, w) = (s[2], s[3]);
                    let os = node.value.shape();
                    let (ho, wo) = (os[2], os[3]);
                    let inv = T::one() / T::from_usize(window * window).unwrap();
                    let mut da = vec![T::zero(); self.value(*a).len()];
                    for p in 0..s[0] * s[1] {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let gv = g[(p * ho + oh) * wo + ow] * inv;
                                for i in 0..*window {
                                    for j in 0..*window {
                                        da[p * h * w + (oh * stride + i) * w + ow * stride + j] += gv;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::Reshape { a } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale { a, factor } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().map(|&v| v * *factor).collect());
                }
            }
            Op::Sum { a } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], vec![g[0]; self.value(*a).len()]);
                }
            }
            Op::Softmax { a } => {
                if self.wants(*a) {
                    let p = node.value.data();
                    let cols = node.value.shape()[1];
                    let mut da = Vec::with_capacity(p.len());
                    for (gr, pr) in g.chunks(cols).zip(p.chunks(cols)) {
                        let dot: T = gr.iter().zip(pr).map(|(&x, &y)| x * y).sum();
                        da.extend(gr.iter().zip(pr).map(|(&x, &y)| y * (x - dot)));
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let cols = self.value(*logits).shape()[1];
                    let scale = g[0] / T::from_usize(labels.len()).unwrap();
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * cols + l] -= T::one();
                    }
                    d.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads[logits.0], d);
                }
            }
            Op::NllOfProbs { probs, labels } => {
                if self.wants(*probs) {
                    let pv = self.value(*probs);
                    let cols = pv.shape()[1];
                    let scale = g[0] / T::from_usize(labels.len()).unwrap();
                    let tiny = T::min_positive_value();
                    let mut d = vec![T::zero(); pv.len()];
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * cols + l] = -scale / pv.data()[r * cols + l].max(tiny);
                    }
                    accumulate(&mut grads[probs.0], d);
                }
            }
            Op::AssembleBlocks { blocks, layout, argmax } => {
                if self.wants(*blocks) {
                    let u = layout.unit_len();
                    let mut db = vec![T::zero(); self.value(*blocks).len()];
                    let reduce = layout.k != layout.unit_kernel;
                    for (idx, &gv) in g.iter().enumerate() {
                        if reduce && layout.reduction == KernelReduction::Max {
                            db[argmax[idx]] += gv;
                            continue;
                        }
                        let gv = if reduce && layout.reduction == KernelReduction::Mean {
                            gv / T::from_usize(layout.unit_kernel * layout.unit_kernel).unwrap()
                        } else {
                            gv
                        };
                        for (b, off) in layout.sources(idx) {
                            db[b * u + off] += gv;
                        }
                    }
                    accumulate(&mut grads[blocks.0], db);
                }
            }
        }
    }
}

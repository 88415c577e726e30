use std::collections::HashMap;

use rayon::prelude::*;

use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with supplied running statistics.
    Infer,
}

struct BnSaved<T> {
    mode: BatchNormMode,
    mean: Vec<T>,
    var: Vec<T>,
    inv_std: Vec<T>,
    xhat: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    Linear,
    MatMulNt,
    Relu,
    BatchNorm(Box<BnSaved<T>>),
    Add,
    Sub,
    Mul,
    Scale(T),
    Transpose,
    Reshape,
    SumAll,
    MeanAll,
    AppendBorder,
    SliceRows,
    SoftmaxCe {
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear => "linear",
            Op::MatMulNt => "matmul_nt",
            Op::Relu => "relu",
            Op::BatchNorm(_) => "batch_norm",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::AppendBorder => "append_border",
            Op::SliceRows => "slice_rows",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Samples per work item in batched convolution; fixed so reductions do not
/// depend on the thread count.
const CONV_CHUNK: usize = 8;

/// A define-by-run tape: every op is evaluated when it is recorded, and
/// [`Graph::backward`] walks the tape in reverse.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn next_label(&self, op: &str) -> String {
        format!("{op}#{}", self.nodes.len())
    }

    fn mismatch(&self, op: &str, expected: String, found: &[usize]) -> TensorError {
        TensorError::ShapeMismatch {
            node: self.next_label(op),
            expected,
            found: shape_str(found),
        }
    }

    /// Records a leaf. Gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), tensor)
    }

    /// Records a named leaf that can later be retrieved with [`Graph::lookup`].
    pub fn input(&mut self, name: &str, tensor: Tensor<T>) -> NodeId {
        let id = self.leaf(tensor);
        self.names.insert(name.to_string(), id);
        id
    }

    pub fn lookup(&self, name: &str) -> Result<NodeId> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownInput(name.to_string()))
    }

    /// Constant leaf (never receives a gradient).
    pub fn constant(&mut self, tensor: Tensor<T>) -> NodeId {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// 2D convolution over an `N x C x H x W` input with an `O x C x KH x KW`
    /// kernel and optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 {
            return Err(self.mismatch("conv2d", "input [N, C, H, W]".into(), &xs));
        }
        if ws.len() != 4 || ws[1] != xs[1] {
            return Err(self.mismatch("conv2d", format!("weight [O, {}, KH, KW]", xs[1]), &ws));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(self.mismatch("conv2d", format!("spatial size >= kernel {kh}x{kw}"), &xs));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                let found = self.shape(b).to_vec();
                return Err(self.mismatch("conv2d", format!("bias [{}]", ws[0]), &found));
            }
        }
        let g = ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w,
            o: ws[0],
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = bias.map(|b| self.value(b).data());
        let out_sample = g.o * g.out_plane();
        let mut out = vec![T::zero(); g.n * out_sample];
        out.par_chunks_mut(out_sample)
            .zip(xv.par_chunks(g.in_sample()))
            .for_each(|(y, xn)| {
                let mut col = vec![T::zero(); g.ckk() * g.out_plane()];
                im2col(xn, &g, &mut col);
                T::gemm(g.o, g.ckk(), g.out_plane(), wv, false, &col, false, T::zero(), y);
                if let Some(bv) = bv {
                    for (oc, row) in y.chunks_mut(g.out_plane()).enumerate() {
                        row.iter_mut().for_each(|v| *v += bv[oc]);
                    }
                }
            });
        let value = Tensor::new(vec![g.n, g.o, g.ho, g.wo], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d { stride, padding }, inputs, value))
    }

    /// `x W^T + b` for `x: N x in`, `W: out x in`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 {
            return Err(self.mismatch("linear", "input [N, in]".into(), &xs));
        }
        if ws.len() != 2 || ws[1] != xs[1] {
            return Err(self.mismatch("linear", format!("weight [out, {}]", xs[1]), &ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                let found = self.shape(b).to_vec();
                return Err(self.mismatch("linear", format!("bias [{}]", ws[0]), &found));
            }
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, self.value(x).data(), false, self.value(weight).data(), true, T::zero(), &mut out);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bv).for_each(|(v, &b)| *v += b);
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::Linear, inputs, value))
    }

    /// `a b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 {
            return Err(self.mismatch("matmul_nt", "lhs [m, k]".into(), &as_));
        }
        if bs.len() != 2 || bs[1] != as_[1] {
            return Err(self.mismatch("matmul_nt", format!("rhs [n, {}]", as_[1]), &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[0]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMulNt, vec![a, b], value))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(Op::Relu, vec![x], value))
    }

    /// Batch normalization over axis 1 of an `N x C` or `N x C x H x W` input.
    ///
    /// `running` supplies `(mean, var)` and is required in [`BatchNormMode::Infer`].
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(self.mismatch("batch_norm", "input [N, C] or [N, C, H, W]".into(), &xs));
        }
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                let found = self.shape(p).to_vec();
                return Err(self.mismatch("batch_norm", format!("affine [{c}]"), &found));
            }
        }
        let count = n * s;
        let xv = self.value(x).data();
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(TensorError::InvalidArgument(format!(
                        "{}: batch statistics need more than one value per channel",
                        self.next_label("batch_norm")
                    )));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let cnt = T::from_usize(count).unwrap();
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..n {
                        for &v in &xv[(b * c + ch) * s..(b * c + ch + 1) * s] {
                            acc += v;
                        }
                    }
                    let m = acc / cnt;
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &v in &xv[(b * c + ch) * s..(b * c + ch + 1) * s] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / cnt;
                }
                (mean, var)
            }
            BatchNormMode::Infer => {
                let (rm, rv) = running.ok_or_else(|| {
                    TensorError::InvalidArgument("inference batch norm needs running statistics".into())
                })?;
                if rm.len() != c || rv.len() != c {
                    return Err(self.mismatch("batch_norm", format!("running stats [{c}]"), &[rm.len()]));
                }
                (rm.to_vec(), rv.to_vec())
            }
        };
        let eps_t = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let saved = BnSaved {
            mode,
            mean,
            var,
            inv_std,
            xhat,
        };
        Ok(self.push(Op::BatchNorm(Box::new(saved)), vec![x, gamma, beta], value))
    }

    /// Per-channel `(mean, unbiased variance)` of a training-mode batch norm node.
    pub fn batch_statistics(&self, id: NodeId) -> Option<(Vec<T>, Vec<T>)> {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::BatchNorm(saved) if saved.mode == BatchNormMode::Train => {
                let xs = node.value.shape();
                let count = xs[0] * xs[2..].iter().product::<usize>();
                let corr = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                let unbiased = saved.var.iter().map(|&v| v * corr).collect();
                Some((saved.mean.clone(), unbiased))
            }
            _ => None,
        }
    }

    fn binary(&mut self, op: Op<T>, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            let (exp, found) = (shape_str(self.shape(a)), self.shape(b).to_vec());
            return Err(self.mismatch(op.name(), exp, &found));
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let f = T::from_f64_lossy(factor);
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * f).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(Op::Scale(f), vec![x], value))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(self.mismatch("transpose", "[rows, cols]".into(), &xs));
        }
        let (r, c) = (xs[0], xs[1]);
        let v = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(Op::Transpose, vec![x], value))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if shape.iter().product::<usize>() != xs.iter().product::<usize>() {
            return Err(self.mismatch("reshape", format!("{} elements", shape.iter().product::<usize>()), &xs));
        }
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value.with_requires_grad(false)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: T = self.value(x).data().iter().copied().sum();
        Ok(self.push(Op::SumAll, vec![x], Tensor::scalar(s)))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_usize(v.numel()).unwrap();
        Ok(self.push(Op::MeanAll, vec![x], Tensor::scalar(m)))
    }

    /// Appends one row and one column filled with the scalar `border`:
    /// `m x n -> (m+1) x (n+1)`.
    pub fn append_border(&mut self, x: NodeId, border: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(self.mismatch("append_border", "[rows, cols]".into(), &xs));
        }
        if self.value(border).numel() != 1 {
            let found = self.shape(border).to_vec();
            return Err(self.mismatch("append_border", "one-element border".into(), &found));
        }
        let (r, c) = (xs[0], xs[1]);
        let a = self.value(border).data()[0];
        let v = self.value(x).data();
        let mut out = vec![a; (r + 1) * (c + 1)];
        for i in 0..r {
            out[i * (c + 1)..i * (c + 1) + c].copy_from_slice(&v[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![r + 1, c + 1], out)?;
        Ok(self.push(Op::AppendBorder, vec![x, border], value))
    }

    /// Keeps the first `rows` rows of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || rows == 0 || rows > xs[0] {
            return Err(self.mismatch("slice_rows", format!("matrix with at least {rows} rows"), &xs));
        }
        let data = self.value(x).data()[..rows * xs[1]].to_vec();
        let value = Tensor::new(vec![rows, xs[1]], data)?;
        Ok(self.push(Op::SliceRows, vec![x], value))
    }

    /// `sum_i weights[i] * CE(softmax(logits[i]), targets[i])` over the rows of
    /// `logits`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[T],
    ) -> Result<NodeId> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() || weights.len() != targets.len() {
            return Err(self.mismatch(
                "softmax_cross_entropy",
                format!("[{}, classes]", targets.len()),
                &ls,
            ));
        }
        let (rows, classes) = (ls[0], ls[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::InvalidArgument(format!(
                "{}: target {t} out of range for {classes} classes",
                self.next_label("softmax_cross_entropy")
            )));
        }
        let v = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for i in 0..rows {
            let row = &v[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[i * classes..(i + 1) * classes].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            probs[i * classes..(i + 1) * classes]
                .iter_mut()
                .for_each(|p| *p = *p / z);
            let ce = max + z.ln() - row[targets[i]];
            total += weights[i] * ce;
        }
        let op = Op::SoftmaxCe {
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.push(op, vec![logits], Tensor::scalar(total)))
    }

    /// Reverse pass from a scalar node. Returns gradients for every node that
    /// depends on a `requires_grad` leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Leaf) {
                let input_grads = self.op_backward(node, &gout);
                for (inp, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    match &mut grads[inp.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[id] = Some(gout);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|data| Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                    requires_grad: false,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, node: &Node<T>, i: usize) -> bool {
        node.inputs
            .get(i)
            .is_some_and(|id| self.nodes[id.0].requires_grad)
    }

    fn op_backward(&self, node: &Node<T>, gout: &[T]) -> Vec<Option<Vec<T>>> {
        let inp = |i: usize| &self.nodes[node.inputs[i].0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { stride, padding } => self.conv_backward(node, gout, *stride, *padding),
            Op::Linear => {
                let (x, w) = (inp(0), inp(1));
                let (n, k, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let dx = self.wants(node, 0).then(|| {
                    let mut dx = vec![T::zero(); n * k];
                    T::gemm(n, m, k, gout, false, w.data(), false, T::zero(), &mut dx);
                    dx
                });
                let dw = self.wants(node, 1).then(|| {
                    let mut dw = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gout, true, x.data(), false, T::zero(), &mut dw);
                    dw
                });
                let mut out = vec![dx, dw];
                if node.inputs.len() == 3 {
                    out.push(self.wants(node, 2).then(|| column_sums(gout, n, m)));
                }
                out
            }
            Op::MatMulNt => {
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
                let da = self.wants(node, 0).then(|| {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gout, false, b.data(), false, T::zero(), &mut da);
                    da
                });
                let db = self.wants(node, 1).then(|| {
                    let mut db = vec![T::zero(); n * k];
                    T::gemm(n, m, k, gout, true, a.data(), false, T::zero(), &mut db);
                    db
                });
                vec![da, db]
            }
            Op::Relu => {
                let x = inp(0).data();
                vec![Some(
                    x.iter()
                        .zip(gout)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            }
            Op::BatchNorm(saved) => self.bn_backward(node, saved, gout),
            Op::Add => vec![Some(gout.to_vec()), Some(gout.to_vec())],
            Op::Sub => vec![Some(gout.to_vec()), Some(gout.iter().map(|&g| -g).collect())],
            Op::Mul => {
                let (a, b) = (inp(0).data(), inp(1).data());
                vec![
                    self.wants(node, 0)
                        .then(|| gout.iter().zip(b).map(|(&g, &y)| g * y).collect()),
                    self.wants(node, 1)
                        .then(|| gout.iter().zip(a).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale(f) => vec![Some(gout.iter().map(|&g| g * *f).collect())],
            Op::Transpose => {
                let xs = inp(0).shape();
                let (r, c) = (xs[0], xs[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = gout[j * r + i];
                    }
                }
                vec![Some(dx)]
            }
            Op::Reshape => vec![Some(gout.to_vec())],
            Op::SumAll => vec![Some(vec![gout[0]; inp(0).numel()])],
            Op::MeanAll => {
                let n = inp(0).numel();
                vec![Some(vec![gout[0] / T::from_usize(n).unwrap(); n])]
            }
            Op::AppendBorder => {
                let xs = inp(0).shape();
                let (r, c) = (xs[0], xs[1]);
                let mut dx = vec![T::zero(); r * c];
                let mut db = T::zero();
                for i in 0..=r {
                    for j in 0..=c {
                        let g = gout[i * (c + 1) + j];
                        if i < r && j < c {
                            dx[i * c + j] = g;
                        } else {
                            db += g;
                        }
                    }
                }
                vec![Some(dx), Some(vec![db])]
            }
            Op::SliceRows => {
                let mut dx = vec![T::zero(); inp(0).numel()];
                dx[..gout.len()].copy_from_slice(gout);
                vec![Some(dx)]
            }
            Op::SoftmaxCe {
                targets,
                weights,
                probs,
            } => {
                let classes = inp(0).shape()[1];
                let mut dx = probs.clone();
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut dx[i * classes..(i + 1) * classes];
                    row[t] = row[t] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * w * gout[0]);
                }
                vec![Some(dx)]
            }
        }
    }

    fn conv_backward(
        &self,
        node: &Node<T>,
        gout: &[T],
        stride: usize,
        padding: usize,
    ) -> Vec<Option<Vec<T>>> {
        let x = &self.nodes[node.inputs[0].0].value;
        let w = &self.nodes[node.inputs[1].0].value;
        let (xs, ws) = (x.shape(), w.shape());
        let os = node.value.shape();
        let g = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            ho: os[2],
            wo: os[3],
        };
        let need_dx = self.wants(node, 0);
        let need_dw = self.wants(node, 1);
        let need_db = node.inputs.len() == 3 && self.wants(node, 2);
        let out_sample = g.o * g.out_plane();
        let wv = w.data();
        let xv = x.data();

        let chunk_work = |start: usize, mut dx: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
            let mut dw = if need_dw { vec![T::zero(); g.o * g.ckk()] } else { Vec::new() };
            let mut db = if need_db { vec![T::zero(); g.o] } else { Vec::new() };
            let mut col = vec![T::zero(); g.ckk() * g.out_plane()];
            let end = (start + CONV_CHUNK).min(g.n);
            for s in start..end {
                let go = &gout[s * out_sample..(s + 1) * out_sample];
                if need_dw {
                    im2col(&xv[s * g.in_sample()..(s + 1) * g.in_sample()], &g, &mut col);
                    T::gemm(g.o, g.out_plane(), g.ckk(), go, false, &col, true, T::one(), &mut dw);
                }
                if need_db {
                    for (oc, row) in go.chunks(g.out_plane()).enumerate() {
                        db[oc] += row.iter().copied().sum::<T>();
                    }
                }
                if let Some(dx) = dx.as_deref_mut() {
                    T::gemm(g.ckk(), g.o, g.out_plane(), wv, true, go, false, T::zero(), &mut col);
                    let local = s - start;
                    col2im(&col, &g, &mut dx[local * g.in_sample()..(local + 1) * g.in_sample()]);
                }
            }
            (dw, db)
        };

        let mut dx = if need_dx { vec![T::zero(); xv.len()] } else { Vec::new() };
        let partials: Vec<(Vec<T>, Vec<T>)> = if need_dx {
            dx.par_chunks_mut(CONV_CHUNK * g.in_sample())
                .enumerate()
                .map(|(ci, dxc)| chunk_work(ci * CONV_CHUNK, Some(dxc)))
                .collect()
        } else {
            (0..g.n.div_ceil(CONV_CHUNK))
                .into_par_iter()
                .map(|ci| chunk_work(ci * CONV_CHUNK, None))
                .collect()
        };
        let mut dw_total = need_dw.then(|| vec![T::zero(); g.o * g.ckk()]);
        let mut db_total = need_db.then(|| vec![T::zero(); g.o]);
        for (dw, db) in partials {
            if let Some(acc) = dw_total.as_mut() {
                acc.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
            }
            if let Some(acc) = db_total.as_mut() {
                acc.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
            }
        }
        let mut out = vec![need_dx.then_some(dx), dw_total];
        if node.inputs.len() == 3 {
            out.push(db_total);
        }
        out
    }

    fn bn_backward(&self, node: &Node<T>, saved: &BnSaved<T>, gout: &[T]) -> Vec<Option<Vec<T>>> {
        let xs = node.value.shape();
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let gamma = self.nodes[node.inputs[1].0].value.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    dgamma[ch] += gout[i] * saved.xhat[i];
                    dbeta[ch] += gout[i];
                }
            }
        }
        let dx = self.wants(node, 0).then(|| {
            let mut dx = vec![T::zero(); gout.len()];
            match saved.mode {
                BatchNormMode::Infer => {
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gamma[ch] * saved.inv_std[ch];
                            let base = (b * c + ch) * s;
                            for i in base..base + s {
                                dx[i] = gout[i] * k;
                            }
                        }
                    }
                }
                BatchNormMode::Train => {
                    let m = T::from_usize(n * s).unwrap();
                    for ch in 0..c {
                        let k = gamma[ch] * saved.inv_std[ch] / m;
                        for b in 0..n {
                            let base = (b * c + ch) * s;
                            for i in base..base + s {
                                dx[i] = k * (m * gout[i] - dbeta[ch] - saved.xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                }
            }
            dx
        });
        vec![dx, Some(dgamma), Some(dbeta)]
    }
}

fn column_sums<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        out.iter_mut()
            .zip(&m[r * cols..(r + 1) * cols])
            .for_each(|(a, &b)| *a += b);
    }
    out
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

//! Dynamic computation graph recorded as a linear tape.
//!
//! Every op appends a node whose inputs precede it, so the tape order is a
//! topological order and the backward sweep is a single reverse pass.

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, col2im_add, im2col, Geometry, KERNEL};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Exp,
    Log,
    Softplus,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias { x: Var, b: Var, inner: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Affine { x: Var, scale: T },
    ScaleBy { x: Var, s: Var },
    Unary(Var, Unary),
    Reduce { x: Var, kind: Reduce, axis: Option<usize> },
    Reshape(Var),
    ConcatCols(Var, Var),
    NarrowCols { x: Var, start: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, k: Var, stride: usize },
    ConvTranspose2d { x: Var, k: Var, stride: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that participates in differentiation.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("expected a rank-2 tensor, got shape {s:?}"),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), rg))
    }

    /// Adds `b[C]` along axis 1 of `x[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(self.mismatch("add_bias", x, b));
        }
        let channels = xs[1];
        let inner: usize = xs[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_exact_mut(inner).enumerate() {
            let b = bias[i % channels];
            for v in chunk {
                *v = *v + b;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias { x, b, inner }, rg))
    }

    /// Affine map `x · w + b` with `w[d_in, d_out]`, `b[d_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "minimum",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            Op::Minimum(a, b),
        )
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(self.mismatch("scale_by", x, s));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ScaleBy { x, s }, rg))
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Result<Var> {
        let src = self.value(x);
        if op == Unary::Log {
            if let Some(bad) = src.data().iter().find(|v| !(**v > T::zero())) {
                return Err(AutodiffError::Domain {
                    op: "log",
                    msg: format!("input {bad} is not strictly positive"),
                });
            }
        }
        let value = src.map(|v| match op {
            Unary::Relu => v.max(T::zero()),
            Unary::Tanh => v.tanh(),
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Softplus => softplus(v),
            Unary::Square => v * v,
        });
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Unary(x, op), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).expect("relu is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x).expect("tanh is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x).expect("softplus is total")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x).expect("square is total")
    }

    /// Sum or mean, over everything (`axis = None`, result shape `[1]`) or
    /// along one axis (that axis is removed).
    pub fn reduce(&mut self, kind: Reduce, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner, out_shape) = reduce_layout("reduce", &shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        if kind == Reduce::Mean {
            let n = T::lit(len as f64);
            out.iter_mut().for_each(|v| *v = *v / n);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Reduce { x, kind, axis },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Mean, x, axis)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.sum(x, None).expect("full reduction is total")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.mean(x, None).expect("full reduction is total")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenates two rank-2 tensors along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2("concat_cols", a)?;
        let (rb, cb) = self.dims2("concat_cols", b)?;
        if ra != rb {
            return Err(self.mismatch("concat_cols", a, b));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![ra, ca + cb], out),
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("narrow_cols", x)?;
        if len == 0 || start + len > c {
            return Err(AutodiffError::InvalidArgument {
                op: "narrow_cols",
                msg: format!("columns {start}..{} out of range for width {c}", start + len),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![r, len], out),
            Op::NarrowCols { x, start },
            rg,
        ))
    }

    /// Row-wise layer normalization of `x[N, D]` with learned `gain[D]`, `bias[D]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2("layer_norm", x)?;
        if self.shape(gain) != [d] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != [d] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        let df = T::lit(d as f64);
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / df;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    fn conv_geometry(
        &self,
        op: &'static str,
        x: Var,
        k: Var,
        stride: usize,
    ) -> Result<(usize, Geometry, usize)> {
        if stride != 1 && stride != 2 {
            return Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        let xs = self.shape(x);
        let ks = self.shape(k);
        if xs.len() != 4 || ks.len() != 4 || ks[2] != KERNEL || ks[3] != KERNEL || ks[1] != xs[1] {
            return Err(self.mismatch(op, x, k));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (Some(oh), Some(ow)) = (
            kernels::conv_out_len(h, stride),
            kernels::conv_out_len(w, stride),
        ) else {
            return Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("input {h}x{w} is smaller than the 3x3 kernel"),
            });
        };
        let g = Geometry {
            channels: c,
            height: h,
            width: w,
            out_h: oh,
            out_w: ow,
            stride,
        };
        Ok((n, g, ks[0]))
    }

    /// Valid 3×3 cross-correlation of `x[N, C, H, W]` with `k[F, C, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (n, g, f) = self.conv_geometry("conv2d", x, k, stride)?;
        let (pl, ol) = (g.patch_len(), g.out_len());
        let xd = self.value(x).data();
        let kd = self.value(k).data();
        let ld = n * ol;
        let mut cols = vec![T::zero(); pl * ld];
        for s in 0..n {
            im2col(&xd[s * g.in_len()..(s + 1) * g.in_len()], g, &mut cols, ld, s * ol);
        }
        let mut y = vec![T::zero(); f * ld];
        T::gemm(f, pl, ld, kd, (pl, 1), &cols, (ld, 1), T::zero(), &mut y, (ld, 1));
        let out = kernels::to_sample_major(&y, n, f, ol);
        let rg = self.rg(&[x, k]);
        Ok(self.push(
            Tensor::from_parts(vec![n, f, g.out_h, g.out_w], out),
            Op::Conv2d { x, k, stride },
            rg,
        ))
    }

    /// Adjoint of [`conv2d`](Self::conv2d): maps `x[N, F, H, W]` through
    /// `k[F, C, 3, 3]` to `[N, C, H', W']` with `H' = (H-1)·stride + 3 + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        output_padding: usize,
    ) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv_transpose2d",
                msg: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        if output_padding >= stride {
            return Err(AutodiffError::InvalidArgument {
                op: "conv_transpose2d",
                msg: format!("output padding {output_padding} must be smaller than stride {stride}"),
            });
        }
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[0] != xs[1] || ks[2] != KERNEL || ks[3] != KERNEL {
            return Err(self.mismatch("conv_transpose2d", x, k));
        }
        let (n, f, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let c = ks[1];
        let g = Geometry {
            channels: c,
            height: (h - 1) * stride + KERNEL + output_padding,
            width: (w - 1) * stride + KERNEL + output_padding,
            out_h: h,
            out_w: w,
            stride,
        };
        let (pl, ol) = (g.patch_len(), g.out_len());
        let xd = kernels::to_channel_major(self.value(x).data(), n, f, ol);
        let kd = self.value(k).data();
        let ld = n * ol;
        let mut cols = vec![T::zero(); pl * ld];
        T::gemm(pl, f, ld, kd, (1, pl), &xd, (ld, 1), T::zero(), &mut cols, (ld, 1));
        let mut out = vec![T::zero(); n * g.in_len()];
        for s in 0..n {
            col2im_add(&cols, g, &mut out[s * g.in_len()..(s + 1) * g.in_len()], ld, s * ol);
        }
        let rg = self.rg(&[x, k]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, g.height, g.width], out),
            Op::ConvTranspose2d { x, k, stride },
            rg,
        ))
    }

    /// Per-row `logsumexp(row) - row[target]` for `logits[N, K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{} targets for {n} rows", targets.len()),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("target {t} out of range for {k} classes"),
            });
        }
        let src = self.value(logits);
        if !src.all_finite() {
            return Err(AutodiffError::NonFinite {
                what: "cross_entropy logits".into(),
            });
        }
        let src = src.data();
        let mut probs = vec![T::zero(); n * k];
        let mut out = vec![T::zero(); n];
        for r in 0..n {
            let row = &src[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * k + j] = e;
                z = z + e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = *p / z;
            }
            out[r] = z.ln() + max - row[targets[r]];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        if !self.requires_grad(output) {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::ones(self.shape(output)));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backprop(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.requires_grad(a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, (n, 1), self.value(b).data(), (1, n), T::zero(), &mut ga, (k, 1));
                    self.accumulate(grads, a, Tensor::from_parts(vec![m, k], ga))?;
                }
                if self.requires_grad(b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(a).data(), (1, k), gd, (n, 1), T::zero(), &mut gb, (n, 1));
                    self.accumulate(grads, b, Tensor::from_parts(vec![k, n], gb))?;
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gd[j * r + i];
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![r, c], gx))?;
            }
            &Op::AddBias { x, b, inner } => {
                if self.requires_grad(b) {
                    let channels = self.shape(b)[0];
                    let mut gb = vec![T::zero(); channels];
                    for (i, chunk) in gd.chunks_exact(inner).enumerate() {
                        let c = i % channels;
                        gb[c] = chunk.iter().fold(gb[c], |a, &v| a + v);
                    }
                    self.accumulate(grads, b, Tensor::from_parts(vec![channels], gb))?;
                }
                self.accumulate(grads, x, g)?;
            }
            &Op::Add(a, b) => {
                if self.requires_grad(b) {
                    self.accumulate(grads, b, g.clone())?;
                }
                self.accumulate(grads, a, g)?;
            }
            &Op::Sub(a, b) => {
                if self.requires_grad(b) {
                    self.accumulate(grads, b, g.map(|v| -v))?;
                }
                self.accumulate(grads, a, g)?;
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |g, y| g * y)?)?;
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |g, x| g * x)?)?;
                }
            }
            &Op::Minimum(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let pick = |take_a: bool| {
                    let data = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(&g, (&x, &y))| if (x <= y) == take_a { g } else { T::zero() })
                        .collect();
                    Tensor::from_parts(g.shape().to_vec(), data)
                };
                if self.requires_grad(a) {
                    self.accumulate(grads, a, pick(true))?;
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, pick(false))?;
                }
            }
            &Op::Affine { x, scale } => {
                self.accumulate(grads, x, g.map(|v| v * scale))?;
            }
            &Op::ScaleBy { x, s } => {
                let sv = self.value(s).item();
                if self.requires_grad(s) {
                    let d = g.dot(self.value(x))?;
                    self.accumulate(grads, s, Tensor::from_parts(self.shape(s).to_vec(), vec![d]))?;
                }
                if self.requires_grad(x) {
                    self.accumulate(grads, x, g.map(|v| v * sv))?;
                }
            }
            &Op::Unary(x, op) => {
                let input = self.value(x);
                let output = &node.value;
                let data: Vec<T> = gd
                    .iter()
                    .zip(input.data().iter().zip(output.data()))
                    .map(|(&g, (&xi, &yi))| {
                        g * match op {
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Tanh => T::one() - yi * yi,
                            Unary::Exp => yi,
                            Unary::Log => T::one() / xi,
                            Unary::Softplus => sigmoid(xi),
                            Unary::Square => xi + xi,
                        }
                    })
                    .collect();
                self.accumulate(grads, x, Tensor::from_parts(input.shape().to_vec(), data))?;
            }
            &Op::Reduce { x, kind, axis } => {
                let shape = self.shape(x).to_vec();
                let (outer, len, inner, _) = reduce_layout("reduce", &shape, axis)?;
                let scale = match kind {
                    Reduce::Sum => T::one(),
                    Reduce::Mean => T::one() / T::lit(len as f64),
                };
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(shape, gx))?;
            }
            &Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                self.accumulate(grads, x, Tensor::from_parts(shape, g.into_data()))?;
            }
            &Op::ConcatCols(a, b) => {
                let (r, ca) = (self.shape(a)[0], self.shape(a)[1]);
                let cb = self.shape(b)[1];
                let w = ca + cb;
                if self.requires_grad(a) {
                    let data = (0..r).flat_map(|row| gd[row * w..row * w + ca].iter().copied()).collect();
                    self.accumulate(grads, a, Tensor::from_parts(vec![r, ca], data))?;
                }
                if self.requires_grad(b) {
                    let data = (0..r).flat_map(|row| gd[row * w + ca..(row + 1) * w].iter().copied()).collect();
                    self.accumulate(grads, b, Tensor::from_parts(vec![r, cb], data))?;
                }
            }
            &Op::NarrowCols { x, start } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let len = node.value.shape()[1];
                let mut gx = vec![T::zero(); r * c];
                for row in 0..r {
                    gx[row * c + start..row * c + start + len].copy_from_slice(&gd[row * len..(row + 1) * len]);
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![r, c], gx))?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gamma = self.value(*gain).data();
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for r in 0..n {
                        for j in 0..d {
                            gg[j] = gg[j] + gd[r * d + j] * xhat[r * d + j];
                            gb[j] = gb[j] + gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::from_parts(vec![d], gg))?;
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![d], gb))?;
                }
                if self.requires_grad(*x) {
                    let df = T::lit(d as f64);
                    let mut gx = vec![T::zero(); n * d];
                    for r in 0..n {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gd[r * d + j] * gamma[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh / df;
                        mean_dh_h = mean_dh_h / df;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gamma[j];
                            gx[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(vec![n, d], gx))?;
                }
            }
            &Op::Conv2d { x, k, stride } => {
                let (n, geo, f) = self.conv_geometry("conv2d", x, k, stride)?;
                let (pl, ol) = (geo.patch_len(), geo.out_len());
                let xd = self.value(x).data();
                let kd = self.value(k).data();
                let ld = n * ol;
                let go = kernels::to_channel_major(gd, n, f, ol);
                let mut cols = vec![T::zero(); pl * ld];
                let mut gk = None;
                let mut gx = None;
                if self.requires_grad(k) {
                    for s in 0..n {
                        im2col(&xd[s * geo.in_len()..(s + 1) * geo.in_len()], geo, &mut cols, ld, s * ol);
                    }
                    let mut g = vec![T::zero(); f * pl];
                    T::gemm(f, ld, pl, &go, (ld, 1), &cols, (1, ld), T::zero(), &mut g, (pl, 1));
                    gk = Some(g);
                }
                if self.requires_grad(x) {
                    T::gemm(pl, f, ld, kd, (1, pl), &go, (ld, 1), T::zero(), &mut cols, (ld, 1));
                    let mut g = vec![T::zero(); n * geo.in_len()];
                    for s in 0..n {
                        col2im_add(&cols, geo, &mut g[s * geo.in_len()..(s + 1) * geo.in_len()], ld, s * ol);
                    }
                    gx = Some(g);
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, k, Tensor::from_parts(self.shape(k).to_vec(), gk))?;
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, x, Tensor::from_parts(self.shape(x).to_vec(), gx))?;
                }
            }
            &Op::ConvTranspose2d { x, k, stride } => {
                let xs = self.shape(x);
                let (n, f) = (xs[0], xs[1]);
                let out_shape = node.value.shape();
                let geo = Geometry {
                    channels: out_shape[1],
                    height: out_shape[2],
                    width: out_shape[3],
                    out_h: xs[2],
                    out_w: xs[3],
                    stride,
                };
                let (pl, ol) = (geo.patch_len(), geo.out_len());
                let xd = self.value(x).data();
                let kd = self.value(k).data();
                let ld = n * ol;
                let mut cols = vec![T::zero(); pl * ld];
                for s in 0..n {
                    im2col(&gd[s * geo.in_len()..(s + 1) * geo.in_len()], geo, &mut cols, ld, s * ol);
                }
                let mut gk = None;
                let mut gx = None;
                if self.requires_grad(k) {
                    let xc = kernels::to_channel_major(xd, n, f, ol);
                    let mut g = vec![T::zero(); f * pl];
                    T::gemm(f, ld, pl, &xc, (ld, 1), &cols, (1, ld), T::zero(), &mut g, (pl, 1));
                    gk = Some(g);
                }
                if self.requires_grad(x) {
                    let mut g = vec![T::zero(); f * ld];
                    T::gemm(f, pl, ld, kd, (pl, 1), &cols, (ld, 1), T::zero(), &mut g, (ld, 1));
                    gx = Some(kernels::to_sample_major(&g, n, f, ol));
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, k, Tensor::from_parts(self.shape(k).to_vec(), gk))?;
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, x, Tensor::from_parts(self.shape(x).to_vec(), gx))?;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, k) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let mut gl = probs.clone();
                for r in 0..n {
                    gl[r * k + targets[r]] = gl[r * k + targets[r]] - T::one();
                    for v in &mut gl[r * k..(r + 1) * k] {
                        *v = *v * gd[r];
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_parts(vec![n, k], gl))?;
            }
        }
        Ok(())
    }
}

/// `(outer, len, inner, result_shape)` for a reduction over `axis`.
fn reduce_layout(
    op: &'static str,
    shape: &[usize],
    axis: Option<usize>,
) -> Result<(usize, usize, usize, Vec<usize>)> {
    match axis {
        None => Ok((1, shape.iter().product(), 1, vec![1])),
        Some(a) if a >= shape.len() => Err(AutodiffError::AxisOutOfRange {
            op,
            axis: a,
            rank: shape.len(),
        }),
        Some(a) => {
            let outer = shape[..a].iter().product();
            let inner = shape[a + 1..].iter().product();
            let mut out: Vec<usize> = shape[..a].iter().chain(&shape[a + 1..]).copied().collect();
            if out.is_empty() {
                out.push(1);
            }
            Ok((outer, shape[a], inner, out))
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

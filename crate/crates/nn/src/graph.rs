//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that (transitively) depends on a trainable leaf.

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Zero padding around the spatial dimensions of a convolution input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Padding that preserves `H x W` at stride 1. Even kernels put the
    /// extra row/column at the bottom/right.
    pub fn same(kernel_h: usize, kernel_w: usize) -> Self {
        let (th, tw) = (kernel_h.saturating_sub(1), kernel_w.saturating_sub(1));
        Self {
            top: th / 2,
            bottom: th - th / 2,
            left: tw / 2,
            right: tw - tw / 2,
        }
    }

    pub fn valid() -> Self {
        Self::default()
    }
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: Padding,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Tanh(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    GatherRows {
        x: Var,
        rows: Vec<Option<usize>>,
    },
    BlendRows {
        a: Var,
        b: Var,
        mask: Vec<T>,
    },
    ScaleRows {
        x: Var,
        scale: Vec<T>,
    },
    Reshape(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Winning input index of every max-pool output, in recording order.
    /// Two passes that differ here straddle a point where the pooled
    /// function is not differentiable.
    pub fn pool_winners(&self) -> Vec<u32> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::MaxPool2 { argmax, .. } => Some(argmax.as_slice()),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies a stored tensor onto the tape. Trainable entries get gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.get(id).clone(), Op::Param(id), trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter used on this tape, summed over uses.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if !self.backward_done {
            return Err(NnError::GraphState(
                "gradients requested before backward".into(),
            ));
        }
        let mut out = Gradients::zeros_like(store);
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let (Some(g), Some(acc)) = (
                    self.grads[i].as_ref(),
                    out.grads.get_mut(id.0).and_then(Option::as_mut),
                ) {
                    acc.add_assign(g);
                }
            }
        }
        Ok(out)
    }

    // ---- forward operations -------------------------------------------------

    /// Cross-correlation of `x [N,C,H,W]` with `w [O,C,KH,KW]` at stride 1.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: Padding) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, c, h, wd] = xv.dims::<4>("conv2d input")?;
        let [o, cw, kh, kw] = wv.dims::<4>("conv2d weight")?;
        if c != cw {
            return shape_err(format!("conv2d: input has {c} channels, weight expects {cw}"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return shape_err(format!("conv2d: bias must have shape [{o}]"));
            }
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, pad)?;
        let (ckk, hw) = (geom.ckk(), geom.out_len());
        let mut cols = vec![T::zero(); ckk * hw];
        let mut out = vec![T::zero(); n * o * hw];
        let bias = b.map(|b| self.value(b).data().to_vec());
        let xd = self.value(x).data();
        let wd_ = self.value(w).data();
        for img in 0..n {
            geom.im2col(&xd[img * c * h * wd..(img + 1) * c * h * wd], &mut cols);
            let dst = &mut out[img * o * hw..(img + 1) * o * hw];
            let beta = if let Some(bias) = &bias {
                for (row, &bv) in dst.chunks_mut(hw).zip(bias) {
                    row.fill(bv);
                }
                T::one()
            } else {
                T::zero()
            };
            T::gemm(o, ckk, hw, T::one(), wd_, (ckk as isize, 1), &cols, (hw as isize, 1), beta, dst, (hw as isize, 1));
        }
        let value = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, rg))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims::<4>("maxpool input")?;
        if h < 2 || w < 2 {
            return shape_err(format!("maxpool: spatial extent {h}x{w} below 2x2"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Batch normalization over `[N,C,H,W]` (or `[N,C]`) using batch statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, hw) = bn_dims(self.value(x))?;
        if n < 2 {
            return Err(NnError::DegenerateBatch(n));
        }
        self.check_bn_affine(gamma, beta, c)?;
        let xd = self.value(x).data();
        let m = (n * hw) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for img in 0..n {
            for ch in 0..c {
                let s = &xd[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                mean[ch] += s.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for img in 0..n {
            for ch in 0..c {
                let s = &xd[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                var[ch] += s.iter().map(|v| (v.as_f64() - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1.0)).collect();
        let (value, xhat, inv_std) = self.bn_apply(x, gamma, beta, &mean, &biased, eps, n, c, hw);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var_ = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((
            var_,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, hw) = bn_dims(self.value(x))?;
        self.check_bn_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err(format!("batchnorm: running statistics must have {c} entries"));
        }
        let mean: Vec<f64> = running_mean.iter().map(|v| v.as_f64()).collect();
        let var: Vec<f64> = running_var.iter().map(|v| v.as_f64()).collect();
        let (value, xhat, inv_std) = self.bn_apply(x, gamma, beta, &mean, &var, eps, n, c, hw);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    fn check_bn_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err(format!("batchnorm: scale and shift must have shape [{c}]"));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        n: usize,
        c: usize,
        hw: usize,
    ) -> (Tensor<T>, Vec<T>, Vec<f64>) {
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for img in 0..n {
            for ch in 0..c {
                let range = (img * c + ch) * hw..(img * c + ch + 1) * hw;
                let (mu, is) = (mean[ch], inv_std[ch]);
                for i in range {
                    let xh = T::from_f64((xv.data()[i].as_f64() - mu) * is);
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        (
            Tensor::new(xv.shape().to_vec(), out).expect("same shape"),
            xhat,
            inv_std,
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = map(self.value(x), |v| v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = map(self.value(x), sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// `x [N,I] * w[O,I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, i] = self.value(x).dims::<2>("linear input")?;
        let [o, wi] = self.value(w).dims::<2>("linear weight")?;
        if i != wi {
            return shape_err(format!("linear: input width {i}, weight expects {wi}"));
        }
        let mut out = vec![T::zero(); n * o];
        let beta = if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return shape_err(format!("linear: bias must have shape [{o}]"));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
            T::one()
        } else {
            T::zero()
        };
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            (i as isize, 1),
            self.value(w).data(),
            (1, i as isize),
            beta,
            &mut out,
            (o as isize, 1),
        );
        let value = Tensor::new(vec![n, o], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = zip(self.value(a), self.value(b), "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = zip(self.value(a), self.value(b), "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Columns `start..start+len` of a `[N,D]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, d] = self.value(x).dims::<2>("slice_cols")?;
        if start + len > d {
            return shape_err(format!("slice_cols: {start}+{len} exceeds width {d}"));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let value = Tensor::new(vec![n, len], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// `[N,A] ‖ [N,B] -> [N,A+B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, da] = self.value(a).dims::<2>("concat lhs")?;
        let [nb, db] = self.value(b).dims::<2>("concat rhs")?;
        if n != nb {
            return shape_err(format!("concat_cols: row counts {n} and {nb} differ"));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(&ad[r * da..(r + 1) * da]);
            out.extend_from_slice(&bd[r * db..(r + 1) * db]);
        }
        let value = Tensor::new(vec![n, da + db], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Selects rows of a `[M,D]` tensor; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        let [m, d] = self.value(x).dims::<2>("gather_rows")?;
        if let Some(bad) = rows.iter().flatten().find(|&&r| r >= m) {
            return shape_err(format!("gather_rows: row {bad} out of {m}"));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); rows.len() * d];
        for (dst, src) in out.chunks_mut(d.max(1)).zip(&rows) {
            if let Some(r) = src {
                dst.copy_from_slice(&xd[r * d..(r + 1) * d]);
            }
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows { x, rows }, rg))
    }

    /// Row-wise `mask * a + (1 - mask) * b` for `[N,D]` operands.
    pub fn blend_rows(&mut self, a: Var, b: Var, mask: Vec<T>) -> Result<Var> {
        let [n, d] = self.value(a).dims::<2>("blend_rows")?;
        if self.value(b).shape() != [n, d] || mask.len() != n {
            return shape_err("blend_rows: operand or mask shape mismatch");
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let m = mask[r];
            for j in 0..d {
                out.push(m * ad[r * d + j] + (T::one() - m) * bd[r * d + j]);
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::BlendRows { a, b, mask }, rg))
    }

    /// Multiplies row `r` of a `[N,D]` tensor by `scale[r]`.
    pub fn scale_rows(&mut self, x: Var, scale: Vec<T>) -> Result<Var> {
        let [n, d] = self.value(x).dims::<2>("scale_rows")?;
        if scale.len() != n {
            return shape_err("scale_rows: scale length must equal row count");
        }
        let xd = self.value(x).data();
        let out = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i / d.max(1)])
            .collect();
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ScaleRows { x, scale }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let out = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Mean softmax cross-entropy of `[N,K]` logits; also returns probabilities.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, Tensor<T>)> {
        let lv = self.value(logits);
        let [n, k] = lv.dims::<2>("softmax_xent logits")?;
        if targets.len() != n {
            return shape_err(format!("softmax_xent: {} targets for {n} rows", targets.len()));
        }
        if let Some(&label) = targets.iter().find(|&&t| t >= k) {
            return Err(NnError::LabelOutOfRange { label, classes: k });
        }
        let probs = softmax_rows(lv)?;
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                // `f64::max` would swallow a NaN probability; keep it.
                let p = probs.data()[r * k + t].as_f64();
                -(if p.is_nan() { p } else { p.max(f64::MIN_POSITIVE) }).ln()
            })
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(logits);
        let var = self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs: probs.data().to_vec(),
            },
            rg,
        );
        Ok((var, probs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), rg)
    }

    // ---- reverse pass -------------------------------------------------------

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(NnError::GraphState("backward without a forward pass".into()));
        }
        if self.backward_done {
            return Err(NnError::GraphState("backward already ran on this graph".into()));
        }
        if self.value(root).len() != 1 {
            return shape_err(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let dy = gy.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, pad } => self.conv2d_backward(*x, *w, *b, *pad, gy, grads)?,
            Op::MaxPool2 { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src as usize] += g;
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let (n, c, hw) = bn_dims(xv)?;
                let g = self.value(*gamma).data();
                let m = (n * hw) as f64;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for img in 0..n {
                    for ch in 0..c {
                        for idx in (img * c + ch) * hw..(img * c + ch + 1) * hw {
                            let d = dy[idx].as_f64();
                            sum_dy[ch] += d;
                            sum_dy_xhat[ch] += d * xhat[idx].as_f64();
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for img in 0..n {
                        for ch in 0..c {
                            let gi = g[ch].as_f64() * inv_std[ch];
                            for idx in (img * c + ch) * hw..(img * c + ch + 1) * hw {
                                let d = dy[idx].as_f64();
                                dx[idx] = T::from_f64(if *batch_stats {
                                    gi / m
                                        * (m * d - sum_dy[ch] - xhat[idx].as_f64() * sum_dy_xhat[ch])
                                } else {
                                    gi * d
                                });
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, vec_tensor(&sum_dy_xhat));
                self.accumulate(grads, *beta, vec_tensor(&sum_dy));
            }
            Op::Tanh(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&y, &d)| d * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), dx)?);
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&y, &d)| d * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), dx)?);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let [n, i_] = xv.dims::<2>("linear input")?;
                let o = wv.shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * i_];
                    T::gemm(n, o, i_, T::one(), dy, (o as isize, 1), wv.data(), (i_ as isize, 1), T::zero(), &mut dx, (i_ as isize, 1));
                    self.accumulate(grads, *x, Tensor::new(vec![n, i_], dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); o * i_];
                    T::gemm(o, n, i_, T::one(), dy, (1, o as isize), xv.data(), (i_ as isize, 1), T::zero(), &mut dw, (i_ as isize, 1));
                    self.accumulate(grads, *w, Tensor::new(vec![o, i_], dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0f64; o];
                    for row in dy.chunks(o) {
                        for (acc, &d) in db.iter_mut().zip(row) {
                            *acc += d.as_f64();
                        }
                    }
                    self.accumulate(grads, *b, vec_tensor(&db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = dy.iter().zip(bv.data()).map(|(&d, &q)| d * q).collect();
                    self.accumulate(grads, *a, Tensor::new(gy.shape().to_vec(), da)?);
                }
                if self.rg(*b) {
                    let db = dy.iter().zip(av.data()).map(|(&d, &p)| d * p).collect();
                    self.accumulate(grads, *b, Tensor::new(gy.shape().to_vec(), db)?);
                }
            }
            Op::SliceCols { x, start } => {
                let [n, d] = self.value(*x).dims::<2>("slice_cols")?;
                let len = gy.shape()[1];
                let mut dx = vec![T::zero(); n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len].copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, d], dx)?);
            }
            Op::ConcatCols(a, b) => {
                let [n, da] = self.value(*a).dims::<2>("concat lhs")?;
                let db = self.value(*b).shape()[1];
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * db);
                for row in dy.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, da], ga)?);
                self.accumulate(grads, *b, Tensor::new(vec![n, db], gb)?);
            }
            Op::GatherRows { x, rows } => {
                let [m, d] = self.value(*x).dims::<2>("gather_rows")?;
                let mut dx = vec![T::zero(); m * d];
                for (k, src) in rows.iter().enumerate() {
                    if let Some(r) = src {
                        for j in 0..d {
                            dx[r * d + j] += dy[k * d + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![m, d], dx)?);
            }
            Op::BlendRows { a, b, mask } => {
                let d = gy.shape()[1];
                let da = dy.iter().enumerate().map(|(i, &g)| g * mask[i / d.max(1)]).collect();
                let db = dy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * (T::one() - mask[i / d.max(1)]))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(gy.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(gy.shape().to_vec(), db)?);
            }
            Op::ScaleRows { x, scale } => {
                let d = gy.shape()[1];
                let dx = dy.iter().enumerate().map(|(i, &g)| g * scale[i / d.max(1)]).collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), dx)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, gy.clone().reshape(&shape)?);
            }
            Op::Dropout { x, mask } => {
                let dx = dy.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.accumulate(grads, *x, Tensor::new(gy.shape().to_vec(), dx)?);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let k = probs.len() / n.max(1);
                let scale = dy[0] / T::from_f64(n as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * k + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![n, k], dl)?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, dy[0]));
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: Padding,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, c, h, wd] = xv.dims::<4>("conv2d input")?;
        let [o, _, kh, kw] = wv.dims::<4>("conv2d weight")?;
        let geom = ConvGeom::new(c, h, wd, kh, kw, pad)?;
        let (ckk, hw) = (geom.ckk(), geom.out_len());
        let dy = gy.data();
        let img_len = c * h * wd;

        if let Some(b) = b {
            let mut db = vec![0.0f64; o];
            for img in 0..n {
                for (oc, acc) in db.iter_mut().enumerate() {
                    let s = &dy[(img * o + oc) * hw..(img * o + oc + 1) * hw];
                    *acc += s.iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            self.accumulate(grads, b, vec_tensor(&db));
        }
        if self.rg(w) {
            let mut cols = vec![T::zero(); ckk * hw];
            let mut dw = vec![T::zero(); o * ckk];
            for img in 0..n {
                geom.im2col(&xv.data()[img * img_len..(img + 1) * img_len], &mut cols);
                T::gemm(o, hw, ckk, T::one(), &dy[img * o * hw..(img + 1) * o * hw], (hw as isize, 1), &cols, (1, hw as isize), T::one(), &mut dw, (ckk as isize, 1));
            }
            self.accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw)?);
        }
        if self.rg(x) {
            let mut dcols = vec![T::zero(); ckk * hw];
            let mut dx = vec![T::zero(); xv.len()];
            for img in 0..n {
                T::gemm(ckk, o, hw, T::one(), wv.data(), (1, ckk as isize), &dy[img * o * hw..(img + 1) * o * hw], (hw as isize, 1), T::zero(), &mut dcols, (hw as isize, 1));
                geom.col2im(&dcols, &mut dx[img * img_len..(img + 1) * img_len]);
            }
            self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
        }
        Ok(())
    }
}

/// Row-wise softmax of a `[N,K]` tensor, computed in `f64`.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k] = logits.dims::<2>("softmax")?;
    let mut out = Vec::with_capacity(n * k);
    for row in logits.data().chunks(k.max(1)).take(n) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::from_f64(e / z)));
    }
    Tensor::new(vec![n, k], out)
}

fn sigmoid<T: Scalar>(v: T) -> T {
    let x = v.as_f64();
    T::from_f64(if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    })
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect(),
    )
}

fn vec_tensor<T: Scalar>(v: &[f64]) -> Tensor<T> {
    Tensor::new(vec![v.len()], v.iter().map(|&x| T::from_f64(x)).collect()).expect("rank-1")
}

fn bn_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => shape_err(format!("batchnorm: expected [N,C] or [N,C,H,W], got {:?}", x.shape())),
    }
}

/// Geometry of one stride-1 convolution over a single image.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: Padding,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, pad: Padding) -> Result<Self> {
        let ph = h + pad.top + pad.bottom;
        let pw = w + pad.left + pad.right;
        if kh == 0 || kw == 0 || ph < kh || pw < kw {
            return shape_err(format!(
                "conv2d: kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            ));
        }
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            pad,
            out_h: ph - kh + 1,
            out_w: pw - kw + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kj`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.left.saturating_sub(kj);
        let hi = (self.w + self.pad.left).saturating_sub(kj).min(self.out_w);
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let hw = self.out_len();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut cols[((ci * self.kh + ki) * self.kw + kj) * hw..][..hw];
                    let (lo, hi) = self.col_range(kj);
                    for oy in 0..self.out_h {
                        let dst = &mut row[oy * self.out_w..(oy + 1) * self.out_w];
                        let iy = (oy + ki) as isize - self.pad.top as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let src0 = ci * self.h * self.w + iy as usize * self.w + lo + kj - self.pad.left;
                        dst[lo..hi].copy_from_slice(&img[src0..src0 + (hi - lo)]);
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let hw = self.out_len();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &cols[((ci * self.kh + ki) * self.kw + kj) * hw..][..hw];
                    let (lo, hi) = self.col_range(kj);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.out_h {
                        let iy = (oy + ki) as isize - self.pad.top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &row[oy * self.out_w + lo..oy * self.out_w + hi];
                        let dst0 = ci * self.h * self.w + iy as usize * self.w + lo + kj - self.pad.left;
                        for (d, &s) in img[dst0..dst0 + (hi - lo)].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: Padding) -> Vec<f64> {
        let [n, c, h, wd] = x.dims::<4>("").unwrap();
        let [o, _, kh, kw] = w.dims::<4>("").unwrap();
        let oh = h + pad.top + pad.bottom - kh + 1;
        let ow = wd + pad.left + pad.right - kw + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for img in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[oc];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = oy as isize + ki as isize - pad.top as isize;
                                    let ix = ox as isize + kj as isize - pad.left as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((img * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((img * o + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn same_padding_is_asymmetric_for_even_kernels() {
        assert_eq!(Padding::same(11, 11), Padding { top: 5, bottom: 5, left: 5, right: 5 });
        assert_eq!(Padding::same(6, 6), Padding { top: 2, bottom: 3, left: 2, right: 3 });
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&[2, 1, 4, 5], 1));
        let w = g.constant(Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), Padding::same(1, 1)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn valid_conv_of_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, w, None, Padding::valid()).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (kh, kw, seed) in [(3, 3, 2), (6, 6, 3), (5, 2, 4), (11, 11, 5)] {
            let x = rand_tensor(&[2, 3, 9, 12], seed);
            let w = rand_tensor(&[4, 3, kh, kw], seed + 100);
            let b = rand_tensor(&[4], seed + 200);
            let pad = Padding::same(kh, kw);
            let expected = naive_conv(&x, &w, b.data(), pad);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
            let y = g.conv2d(xv, wv, Some(bv), pad).unwrap();
            assert_eq!(g.value(y).shape(), &[2, 4, 9, 12]);
            for (a, e) in g.value(y).data().iter().zip(&expected) {
                assert!((a - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, Padding::same(3, 3)), Err(NnError::Shape(_))));
    }

    #[test]
    fn maxpool_basics() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let x = g.constant(Tensor::full(&[1, 2, 5, 7], 3.0));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 3.0));

        let x = g.constant(Tensor::zeros(&[1, 1, 1, 4]));
        assert!(g.maxpool2(x).is_err());
    }

    #[test]
    fn maxpool_matches_naive() {
        let x = rand_tensor(&[2, 3, 6, 7], 9);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.maxpool2(xv).unwrap();
        let d = x.data();
        let mut k = 0;
        for p in 0..6 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let at = |dy: usize, dx: usize| d[p * 42 + (2 * oy + dy) * 7 + 2 * ox + dx];
                    let m = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                    assert_eq!(g.value(y).data()[k], m);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn batchnorm_normalizes_each_channel() {
        let x = rand_tensor(&[4, 3, 5, 5], 11);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::from_f64(&[3], &[2.0, 0.5, 1.0]).unwrap());
        let beta = g.constant(Tensor::from_f64(&[3], &[0.3, -1.0, 0.0]).unwrap());
        let (y, _) = g.batchnorm_train(xv, gamma, beta, 1e-5).unwrap();
        let yd = g.value(y).data();
        for (ch, (s, sh)) in [(2.0, 0.3), (0.5, -1.0), (1.0, 0.0)].into_iter().enumerate() {
            let vals: Vec<f64> = (0..4)
                .flat_map(|img| yd[(img * 3 + ch) * 25..(img * 3 + ch + 1) * 25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean - sh).abs() < 1e-3);
            assert!((var - s * s).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_zero_scale_yields_shift() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&[3, 2, 2, 2], 12));
        let gamma = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(Tensor::from_f64(&[2], &[0.7, -0.2]).unwrap());
        let (y, _) = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let ch = (i / 4) % 2;
            assert_eq!(v, [0.7, -0.2][ch]);
        }
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        // a channel with mean 0 and biased variance 1
        let vals = [1.0, -1.0, 1.0, -1.0];
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[4, 1], &vals).unwrap());
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (y, stats) = g.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        for (a, b) in g.value(y).data().iter().zip(vals) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(stats.mean, vec![0.0]);
        assert!((stats.var[0] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_rejects_single_sample_batch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            g.batchnorm_train(x, gamma, beta, 1e-5),
            Err(NnError::DegenerateBatch(1))
        ));
    }

    #[test]
    fn linear_matches_hand_product() {
        // x = [1 2; 3 4], W = [5 6; 7 8], b = [1, -1]
        // x W^T = [17 23; 39 53]
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::from_f64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[18.0, 22.0, 40.0, 52.0]);
    }

    #[test]
    fn tanh_at_zero_and_its_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3]));
        let y = g.tanh(x);
        assert_eq!(g.value(y).data(), &[0.0; 3]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[2, 3], 0.5));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::full(&[2, 9], 0.3));
        let (loss, probs) = g.softmax_xent(logits, &[0, 8]).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
        assert!((g.value(loss).item() - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pool_winners_track_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 4], vec![1.0, 5.0, 0.0, 2.0, 3.0, 4.0, 9.0, 1.0]).unwrap());
        assert!(g.pool_winners().is_empty());
        g.maxpool2(x).unwrap();
        assert_eq!(g.pool_winners(), [1, 6]);
    }

    #[test]
    fn softmax_xent_propagates_nan() {
        let mut g = Graph::<f32>::new();
        let logits = g.constant(Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap());
        let (loss, _) = g.softmax_xent(logits, &[1]).unwrap();
        assert!(g.value(loss).item().is_nan());
    }

    #[test]
    fn softmax_xent_rejects_bad_label() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            g.softmax_xent(logits, &[3]),
            Err(NnError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[4, 4], 2.0));
        assert_eq!(g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[10_000], 3.0));
        let y = g.dropout(x, 0.2, Mode::Train, &mut rng).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 3.0).abs() / 3.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut g = Graph::<f32>::new();
        assert!(matches!(g.backward(Var(0)), Err(NnError::GraphState(_))));
        let x = g.leaf(Tensor::zeros(&[2]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(NnError::GraphState(_))));
    }

    /// Central differences of `f` around `x`, in f64.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += eps;
                let mut m = x.clone();
                m.data_mut()[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    // weighted sum keeps the upstream gradient non-uniform
    fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Var {
        let n = g.value(y).len();
        let shape = g.value(y).shape().to_vec();
        let wts = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
        let w = g.constant(wts);
        let p = g.mul(y, w).unwrap();
        g.sum(p)
    }

    #[test]
    fn conv_bn_pool_gradients_match_finite_differences() {
        let x0 = rand_tensor(&[2, 2, 6, 5], 21);
        let w0 = rand_tensor(&[3, 2, 3, 2], 22);
        let b0 = rand_tensor(&[3], 23);
        let forward = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
            let gamma = g.constant(Tensor::from_f64(&[3], &[1.0, 0.5, 2.0]).unwrap());
            let beta = g.constant(Tensor::from_f64(&[3], &[0.0, 0.1, -0.1]).unwrap());
            let c = g.conv2d(xv, wv, Some(bv), Padding::same(3, 2)).unwrap();
            let (n, _) = g.batchnorm_train(c, gamma, beta, 1e-5).unwrap();
            let t = g.tanh(n);
            let p = g.maxpool2(t).unwrap();
            let loss = weighted_sum(&mut g, p);
            (g, xv, wv, bv, loss)
        };
        let (mut g, xv, wv, bv, loss) = forward(&x0, &w0, &b0);
        g.backward(loss).unwrap();
        let nx = numeric_grad(&x0, |x| { let (g, .., l) = forward(x, &w0, &b0); g.value(l).item() });
        let nw = numeric_grad(&w0, |w| { let (g, .., l) = forward(&x0, w, &b0); g.value(l).item() });
        let nb = numeric_grad(&b0, |b| { let (g, .., l) = forward(&x0, &w0, b); g.value(l).item() });
        assert_close(g.grad(xv).unwrap().data(), &nx);
        assert_close(g.grad(wv).unwrap().data(), &nw);
        assert_close(g.grad(bv).unwrap().data(), &nb);
    }

    #[test]
    fn row_ops_gradients_match_finite_differences() {
        let a0 = rand_tensor(&[3, 4], 31);
        let b0 = rand_tensor(&[3, 2], 32);
        let w0 = rand_tensor(&[5, 6], 33);
        let forward = |a: &Tensor<f64>, b: &Tensor<f64>, w: &Tensor<f64>| {
            let mut g = Graph::new();
            let (av, bv, wv) = (g.leaf(a.clone()), g.leaf(b.clone()), g.leaf(w.clone()));
            let cat = g.concat_cols(av, bv).unwrap();
            let lin = g.linear(cat, wv, None).unwrap();
            let s = g.sigmoid(lin);
            let sl = g.slice_cols(s, 1, 3).unwrap();
            let gathered = g.gather_rows(sl, vec![Some(2), None, Some(0), Some(2)]).unwrap();
            let sc = g.scale_rows(gathered, vec![1.0, 0.0, 0.5, 2.0]).unwrap();
            let other = g.slice_cols(lin, 0, 3).unwrap();
            let other = g.gather_rows(other, vec![Some(0), Some(1), Some(1), Some(2)]).unwrap();
            let bl = g.blend_rows(sc, other, vec![1.0, 0.0, 0.3, 1.0]).unwrap();
            let r = g.reshape(bl, &[12]).unwrap();
            let r = g.reshape(r, &[4, 3]).unwrap();
            let (loss, _) = g.softmax_xent(r, &[0, 2, 1, 1]).unwrap();
            (g, av, bv, wv, loss)
        };
        let (mut g, av, bv, wv, loss) = forward(&a0, &b0, &w0);
        g.backward(loss).unwrap();
        let na = numeric_grad(&a0, |a| { let (g, .., l) = forward(a, &b0, &w0); g.value(l).item() });
        let nb = numeric_grad(&b0, |b| { let (g, .., l) = forward(&a0, b, &w0); g.value(l).item() });
        let nw = numeric_grad(&w0, |w| { let (g, .., l) = forward(&a0, &b0, w); g.value(l).item() });
        assert_close(g.grad(av).unwrap().data(), &na);
        assert_close(g.grad(bv).unwrap().data(), &nb);
        assert_close(g.grad(wv).unwrap().data(), &nw);
    }

    #[test]
    fn eval_batchnorm_and_dropout_gradients() {
        let x0 = rand_tensor(&[3, 4], 41);
        let forward = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let gamma = g.leaf(Tensor::from_f64(&[4], &[1.0, 2.0, 0.5, -1.0]).unwrap());
            let beta = g.leaf(Tensor::from_f64(&[4], &[0.1, 0.2, 0.3, 0.4]).unwrap());
            let y = g.batchnorm_eval(xv, gamma, beta, &[0.1, 0.0, -0.2, 0.3], &[1.0, 2.0, 0.5, 0.1], 1e-5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let y = g.dropout(y, 0.3, Mode::Train, &mut rng).unwrap();
            let y = g.tanh(y);
            let loss = weighted_sum(&mut g, y);
            (g, xv, loss)
        };
        let (mut g, xv, loss) = forward(&x0);
        g.backward(loss).unwrap();
        let nx = numeric_grad(&x0, |x| { let (g, _, l) = forward(x); g.value(l).item() });
        assert_close(g.grad(xv).unwrap().data(), &nx);
    }
}

//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse. Reductions always run in index order so two
//! identical runs give bit-identical values and gradients.

use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Convolution geometry. 1D convolutions use a unit height.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cin: usize,
    cout: usize,
    one_d: bool,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    SumLast(Var),
    LogSumExpLast(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Tensor<T>,
    },
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::SumLast(..) => "sum_last",
            Op::LogSumExpLast(..) => "logsumexp",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for running estimates.
    pub var: Vec<T>,
}

/// Recorded computation. Single writer; create one per forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const NORM_EPS: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf. Its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a @ b` for `a: (m, k)`, `b: (k, n)`; with `trans_b`, `b: (n, k)`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err("matmul", format!("needs 2D operands, got {sa:?}, {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return shape_err("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            T::zero(),
            &mut out,
        );
        let needs = self.ng(a) || self.ng(b);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b }, needs))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("nonempty shape");
        if self.shape(bias) != [d] {
            return shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let needs = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let needs = self.ng(x);
        self.push(t, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        let needs = self.ng(x);
        self.push(t, Op::AddScalar(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.ng(x);
        self.push(t, Op::Relu(x), needs)
    }

    /// 2D convolution: `x: (n, cin, h, w)`, `w: (cout, cin, k, k)`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return shape_err("conv2d", format!("input {sx:?}, weight {sw:?}"));
        }
        self.conv(
            x,
            w,
            [sx[2], sx[3]],
            [sw[2], sw[3]],
            [stride, stride],
            [pad, pad],
            false,
        )
    }

    /// 1D convolution: `x: (n, cin, l)`, `w: (cout, cin, k)`, zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return shape_err("conv1d", format!("input {sx:?}, weight {sw:?}"));
        }
        self.conv(x, w, [1, sx[2]], [1, sw[2]], [1, stride], [0, pad], true)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        x: Var,
        w: Var,
        hw: [usize; 2],
        k: [usize; 2],
        s: [usize; 2],
        p: [usize; 2],
        one_d: bool,
    ) -> Result<Var> {
        if s[0] == 0 || s[1] == 0 {
            return invalid("conv stride must be positive");
        }
        let n = self.shape(x)[0];
        let cin = self.shape(x)[1];
        let cout = self.shape(w)[0];
        if hw[0] + 2 * p[0] < k[0] || hw[1] + 2 * p[1] < k[1] {
            return shape_err("conv", format!("kernel {k:?} larger than padded input {hw:?}"));
        }
        let geom = ConvGeom {
            kh: k[0],
            kw: k[1],
            sh: s[0],
            sw: s[1],
            ph: p[0],
            pw: p[1],
            h: hw[0],
            w: hw[1],
            oh: (hw[0] + 2 * p[0] - k[0]) / s[0] + 1,
            ow: (hw[1] + 2 * p[1] - k[1]) / s[1] + 1,
            cin,
            cout,
            one_d,
        };
        let in_len = cin * geom.h * geom.w;
        let out_len = cout * geom.oh * geom.ow;
        let patch = cin * geom.kh * geom.kw;
        let mut out = vec![T::zero(); n * out_len];
        let mut cols = vec![T::zero(); patch * geom.oh * geom.ow];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for i in 0..n {
            im2col(&geom, &xd[i * in_len..(i + 1) * in_len], &mut cols);
            T::gemm(
                cout,
                patch,
                geom.oh * geom.ow,
                T::one(),
                wd,
                false,
                &cols,
                false,
                T::zero(),
                &mut out[i * out_len..(i + 1) * out_len],
            );
        }
        let shape = if one_d {
            vec![n, cout, geom.ow]
        } else {
            vec![n, cout, geom.oh, geom.ow]
        };
        let t = Tensor::new(shape, out)?;
        let needs = self.ng(x) || self.ng(w);
        Ok(self.push(t, Op::Conv { x, w, geom }, needs))
    }

    fn channel_layout(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return shape_err(op, format!("needs (n, c, ...), got {s:?}"));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(op, format!("affine params must be [{c}]"));
        }
        Ok((n, c, inner))
    }

    /// Training-mode batch norm over all axes but the channel axis (axis 1).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, inner) = self.channel_layout("batch_norm", x, gamma, beta)?;
        let count = n * inner;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * inner;
                for &v in &xd[base..base + inner] {
                    s += v;
                }
            }
            let mu = s / T::lit(count as f64);
            let mut ss = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * inner;
                for &v in &xd[base..base + inner] {
                    ss += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = ss / T::lit(count as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let unbiased = if count > 1 {
            var.iter()
                .map(|&v| v * T::lit(count as f64) / T::lit((count - 1) as f64))
                .collect()
        } else {
            var.clone()
        };
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch norm using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, inner) = self.channel_layout("batch_norm_eval", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm_eval", "running statistics length");
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    let h = (xd[j] - running_mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            t,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// `(n, c, ...) -> (n, c)` mean over all trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return shape_err("global_avg_pool", format!("needs (n, c, ...), got {s:?}"));
        }
        let inner: usize = s[2..].iter().product();
        let denom = T::lit(inner as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().copied().sum::<T>() / denom)
            .collect();
        let t = Tensor::new(vec![s[0], s[1]], out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), needs))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("nonempty shape");
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(xd.len() / d);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(d) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(NORM_EPS));
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / nrm));
        }
        let t = Tensor::new(s, out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::L2Normalize { x, norms }, needs))
    }

    /// Sums the last axis away. A 1D input becomes shape `[1]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("nonempty shape");
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|c| c.iter().copied().sum())
            .collect();
        let shape = if s.len() == 1 {
            vec![1]
        } else {
            s[..s.len() - 1].to_vec()
        };
        let t = Tensor::new(shape, out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::SumLast(x), needs))
    }

    /// Numerically stable log-sum-exp over the last axis.
    pub fn logsumexp_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("nonempty shape");
        let out: Vec<T> = self.value(x).data().chunks(d).map(logsumexp).collect();
        let shape = if s.len() == 1 {
            vec![1]
        } else {
            s[..s.len() - 1].to_vec()
        };
        let t = Tensor::new(shape, out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::LogSumExpLast(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Concatenates 2D tensors `(n, d_i)` along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let n = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return shape_err("concat", format!("part shape {s:?}, expected ({n}, _)"));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![n, total], out)?;
        let needs = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), needs))
    }

    /// Selects rows (leading axis) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if idx.is_empty() {
            return shape_err("gather_rows", "empty index list");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return shape_err("gather_rows", format!("row {bad} out of {}", s[0]));
        }
        let w: usize = s[1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&xd[i * w..(i + 1) * w]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        let t = Tensor::new(shape, out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, needs))
    }

    /// Row-wise `-sum_c targets[c] * log_softmax(logits)[c]`, shape `(n)`.
    ///
    /// Targets may be soft (e.g. mixup label mixtures).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() {
            return shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?}, targets {:?}", targets.shape()),
            );
        }
        let c = s[1];
        let ld = self.value(logits).data();
        let out: Vec<T> = ld
            .chunks(c)
            .zip(targets.data().chunks(c))
            .map(|(row, t)| {
                let lse = logsumexp(row);
                row.iter().zip(t).map(|(&z, &ti)| ti * (lse - z)).sum()
            })
            .collect();
        let tensor = Tensor::new(vec![s[0]], out)?;
        let needs = self.ng(logits);
        Ok(self.push(tensor, Op::SoftmaxXent { logits, targets }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v: T = self.value(x).data().iter().copied().sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(v), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v: T = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        let needs = self.ng(x);
        self.push(Tensor::scalar(v), Op::Mean(x), needs)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every parameter registered with [`Graph::param`] gets an entry; those
    /// the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.value.all_finite() || !g.all_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut named = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            named.insert(name.clone(), g);
        }
        Ok(Gradients { by_node: grads, named })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), data).expect("gradient shape")
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.shape()[1];
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    // da = g @ op(b)^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        false,
                        self.value(*b).data(),
                        !*trans_b,
                        T::zero(),
                        &mut da,
                    );
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // b: (n, k); db = g^T @ a
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            gd,
                            true,
                            self.value(*a).data(),
                            false,
                            T::zero(),
                            &mut db,
                        );
                    } else {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            self.value(*a).data(),
                            true,
                            gd,
                            false,
                            T::zero(),
                            &mut db,
                        );
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.ng(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*bias) {
                    let d = self.shape(*bias)[0];
                    let mut db = vec![T::zero(); d];
                    for row in gd.chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, self.like(*bias, db));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let t = self.like(*x, gd.to_vec());
                self.accumulate(grads, *x, t);
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Conv { x, w, geom } => self.conv_backward(*x, *w, geom, gd, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => self.bn_backward(*x, *gamma, *beta, xhat, inv_std, gd, true, grads),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => self.bn_backward(*x, *gamma, *beta, xhat, inv_std, gd, false, grads),
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let inner: usize = s[2..].iter().product();
                let denom = T::lit(inner as f64);
                let mut d = Vec::with_capacity(inner * gd.len());
                for &gv in gd {
                    d.extend(std::iter::repeat_n(gv / denom, inner));
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::L2Normalize { x, norms } => {
                let d = *self.shape(*x).last().expect("shape");
                let y = node.value.data();
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &nrm) in y.chunks(d).zip(gd.chunks(d)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / nrm));
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::SumLast(x) => {
                let d = *self.shape(*x).last().expect("shape");
                let mut dx = Vec::with_capacity(d * gd.len());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv, d));
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::LogSumExpLast(x) => {
                let d = *self.shape(*x).last().expect("shape");
                let xd = self.value(*x).data();
                let out = node.value.data();
                let mut dx = Vec::with_capacity(xd.len());
                for ((row, &lse), &gv) in xd.chunks(d).zip(out).zip(gd) {
                    dx.extend(row.iter().map(|&v| gv * (v - lse).exp()));
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Concat(parts) => {
                let n = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, self.like(p, d));
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let w = xv.numel() / xv.shape()[0];
                let mut d = vec![T::zero(); xv.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, &gv) in d[i * w..(i + 1) * w].iter_mut().zip(&gd[r * w..(r + 1) * w]) {
                        *acc += gv;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::SoftmaxXent { logits, targets } => {
                let c = self.shape(*logits)[1];
                let ld = self.value(*logits).data();
                let mut d = Vec::with_capacity(ld.len());
                for ((row, t), &gv) in ld.chunks(c).zip(targets.data().chunks(c)).zip(gd) {
                    let lse = logsumexp(row);
                    let tsum: T = t.iter().copied().sum();
                    d.extend(row.iter().zip(t).map(|(&z, &ti)| gv * ((z - lse).exp() * tsum - ti)));
                }
                self.accumulate(grads, *logits, self.like(*logits, d));
            }
            Op::Sum(x) => {
                let t = Tensor::filled(self.shape(*x), gd[0]);
                self.accumulate(grads, *x, t);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let t = Tensor::filled(self.shape(*x), gd[0] / T::lit(n as f64));
                self.accumulate(grads, *x, t);
            }
        }
        Ok(())
    }

    fn conv_backward(&self, x: Var, w: Var, geom: &ConvGeom, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let n = self.shape(x)[0];
        let in_len = geom.cin * geom.h * geom.w;
        let spatial = geom.oh * geom.ow;
        let out_len = geom.cout * spatial;
        let patch = geom.cin * geom.kh * geom.kw;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut cols = vec![T::zero(); patch * spatial];
        let mut dw = if self.ng(w) {
            Some(vec![T::zero(); wd.len()])
        } else {
            None
        };
        let mut dx = if self.ng(x) {
            Some(vec![T::zero(); xd.len()])
        } else {
            None
        };
        let mut dcols = vec![T::zero(); patch * spatial];
        for i in 0..n {
            let go = &gd[i * out_len..(i + 1) * out_len];
            if let Some(dw) = dw.as_mut() {
                im2col(geom, &xd[i * in_len..(i + 1) * in_len], &mut cols);
                T::gemm(
                    geom.cout,
                    spatial,
                    patch,
                    T::one(),
                    go,
                    false,
                    &cols,
                    true,
                    T::one(),
                    dw,
                );
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    patch,
                    geom.cout,
                    spatial,
                    T::one(),
                    wd,
                    true,
                    go,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                col2im(geom, &dcols, &mut dx[i * in_len..(i + 1) * in_len]);
            }
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, self.like(w, dw));
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, self.like(x, dx));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        gd: &[T],
        train: bool,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let s = self.shape(x);
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let count = T::lit((n * inner) as f64);
        let gam = self.value(gamma).data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    dgamma[ch] += gd[j] * xhat[j];
                    dbeta[ch] += gd[j];
                }
            }
        }
        if self.ng(x) {
            let mut dx = vec![T::zero(); gd.len()];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * inner;
                    for j in base..base + inner {
                        dx[j] = if train {
                            // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                            gam[ch] * inv_std[ch] / count * (count * gd[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                        } else {
                            gam[ch] * inv_std[ch] * gd[j]
                        };
                    }
                }
            }
            self.accumulate(grads, x, self.like(x, dx));
        }
        self.accumulate(grads, gamma, self.like(gamma, dgamma));
        self.accumulate(grads, beta, self.like(beta, dbeta));
    }
}

fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let spatial = g.oh * g.ow;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oh in 0..g.oh {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    let line = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + ih as usize) * g.w..][..g.w];
                    for (ow, slot) in line.iter_mut().enumerate() {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        *slot = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let spatial = g.oh * g.ow;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oh in 0..g.oh {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + ih as usize) * g.w..][..g.w];
                    for ow in 0..g.ow {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.ow + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    named: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of any node on the tape, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients keyed by parameter name.
    pub fn named(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.named
    }
}

use crate::autodiff::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::autodiff::tensor::{numel, Mask, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const RMS_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Whether batch normalization uses batch statistics or stored running ones.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Statistics observed by a train-mode batch normalization. `var` is the
/// unbiased estimate, as used for running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared: bool,
    },
    Add {
        a: Var,
        b: Var,
        inner: usize,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
        inner: usize,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddScalar {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        a: Var,
        start: usize,
        width_in: usize,
    },
    Transpose {
        a: Var,
        batch: usize,
        m: usize,
        n: usize,
    },
    Exp(Var),
    Log2(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Silu(Var),
    Log2Sigmoid(Var),
    Softmax {
        a: Var,
        mask: Mask,
        rows: usize,
    },
    MaskedMean {
        a: Var,
        mask: Mask,
        dim: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        batch: usize,
        len_in: usize,
        cin: usize,
        cout: usize,
        k: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mask: Mask,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        a: Var,
        positions: Vec<f64>,
        base: f64,
    },
    PairwiseDist {
        a: Var,
        n: usize,
        d: usize,
    },
    Gather {
        a: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A define-by-run computation graph.
///
/// Every operation evaluates eagerly and records how to propagate gradients.
/// Nodes are appended in evaluation order, which is also a topological order,
/// so [`Graph::backward`] walks them in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(msg: impl Into<String>) -> Result<V> {
    Err(Error::Shape(msg.into()))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn grad_flag(&self, v: Var) -> bool {
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

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a 2-D matrix shared by every leading index of `a`, or has
    /// exactly `a`'s leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs ≥2 axes, got {sa:?} × {sb:?}"));
        }
        let k = sa[sa.len() - 1];
        let (batch, m, n, shared, out_shape) = if sb.len() == 2 {
            if sb[0] != k {
                return shape_err(format!("matmul inner dims differ: {sa:?} × {sb:?}"));
            }
            let mut out = sa.clone();
            *out.last_mut().unwrap() = sb[1];
            (1, numel(&sa) / k.max(1), sb[1], true, out)
        } else {
            let lead = &sa[..sa.len() - 2];
            if sb.len() != sa.len() || &sb[..sb.len() - 2] != lead || sb[sb.len() - 2] != k {
                return shape_err(format!("batched matmul shapes incompatible: {sa:?} × {sb:?}"));
            }
            let m = sa[sa.len() - 2];
            let n = sb[sb.len() - 1];
            let mut out = lead.to_vec();
            out.extend([m, n]);
            (numel(lead), m, n, false, out)
        };
        let mut y = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for bi in 0..batch {
                let b_off = if shared { 0 } else { bi * k * n };
                gemm_nn(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[b_off..b_off + k * n],
                    &mut y[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(
            Tensor::new(&out_shape, y)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared,
            },
            rg,
        ))
    }

    fn broadcast_inner(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(numel(sa));
        }
        if sb.len() < sa.len() && sa.ends_with(sb) {
            return Ok(numel(sb));
        }
        shape_err(format!("{what}: cannot combine {sa:?} with {sb:?}"))
    }

    /// Elementwise sum; `b` may match only the trailing axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.broadcast_inner(a, b, "add")?;
        let bd = self.data(b);
        let y: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % inner])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Add { a, b, inner }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("sub: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let y: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &z)| x - z)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Sub { a, b }, rg))
    }

    /// Elementwise product; `b` may match only the trailing axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.broadcast_inner(a, b, "mul")?;
        let bd = self.data(b);
        let y: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % inner])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Mul { a, b, inner }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let t = self.map(a, |x| x * c);
        let rg = self.grad_flag(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let t = self.map(a, |x| x + c);
        let rg = self.grad_flag(a);
        self.push(t, Op::AddScalar { a }, rg)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.map(a, f);
        let rg = self.grad_flag(a);
        self.push(t, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log2(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.log2(), Op::Log2(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(a, move |x| if x > T::zero() { x } else { x * s }, Op::LeakyRelu(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * kernels::sigmoid(x), Op::Silu(a))
    }

    /// Numerically stable `log2(sigmoid(x))`.
    pub fn log2_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::log2_sigmoid, Op::Log2Sigmoid(a))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return shape_err("concat of nothing"),
        };
        if first.is_empty() {
            return shape_err("concat needs at least one axis");
        }
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return shape_err(format!("concat: {s:?} does not match {first:?}"));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                y.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.grad_flag(p));
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let width_in = match s.last() {
            Some(&w) => w,
            None => return shape_err("slice of a scalar"),
        };
        if start >= end || end > width_in {
            return shape_err(format!("slice {start}..{end} out of 0..{width_in}"));
        }
        let rows = numel(&s) / width_in.max(1);
        let src = self.data(a);
        let mut y = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            y.extend_from_slice(&src[r * width_in + start..r * width_in + end]);
        }
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = end - start;
        let rg = self.grad_flag(a);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Slice { a, start, width_in }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last_two(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return shape_err(format!("transpose needs ≥2 axes, got {s:?}"));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let y = transpose_blocks(self.data(a), batch, m, n);
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.grad_flag(a);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Transpose { a, batch, m, n }, rg))
    }

    /// Softmax over the last axis, restricted to the valid keys of each batch
    /// item. Shape `(B, …, L)` with `B = mask.batch()` and `L = mask.max_len()`;
    /// invalid keys get probability zero.
    pub fn softmax_masked(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || s[0] != mask.batch() || s[s.len() - 1] != mask.max_len() {
            return shape_err(format!(
                "softmax input {s:?} does not match mask ({}, {})",
                mask.batch(),
                mask.max_len()
            ));
        }
        if mask.lens().iter().any(|&l| l == 0) {
            return shape_err("softmax row with no valid key");
        }
        let l = mask.max_len();
        let rows = numel(&s) / (mask.batch() * l);
        let x = self.data(a);
        let mut y = vec![T::zero(); x.len()];
        for b in 0..mask.batch() {
            let valid = mask.lens()[b];
            for r in 0..rows {
                let off = (b * rows + r) * l;
                let row = &x[off..off + valid];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for t in 0..valid {
                    let e = (row[t] - mx).exp();
                    y[off + t] = e;
                    sum = sum + e;
                }
                for v in &mut y[off..off + valid] {
                    *v = *v / sum;
                }
            }
        }
        let rg = self.grad_flag(a);
        Ok(self.push(
            Tensor::new(&s, y)?,
            Op::Softmax {
                a,
                mask: mask.clone(),
                rows,
            },
            rg,
        ))
    }

    /// Mean over valid positions: `(B, L, D) → (B, D)`.
    pub fn masked_mean(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] != mask.batch() || s[1] != mask.max_len() {
            return shape_err(format!("masked_mean input {s:?} does not match mask"));
        }
        if mask.lens().iter().any(|&l| l == 0) {
            return shape_err("masked_mean over an empty sequence");
        }
        let (bsz, l, d) = (s[0], s[1], s[2]);
        let x = self.data(a);
        let mut y = vec![T::zero(); bsz * d];
        for b in 0..bsz {
            let out = &mut y[b * d..(b + 1) * d];
            for t in 0..mask.lens()[b] {
                let row = &x[(b * l + t) * d..(b * l + t + 1) * d];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            let inv = T::one() / T::from_f64(mask.lens()[b] as f64);
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        }
        let rg = self.grad_flag(a);
        Ok(self.push(
            Tensor::new(&[bsz, d], y)?,
            Op::MaskedMean {
                a,
                mask: mask.clone(),
                dim: d,
            },
            rg,
        ))
    }

    /// Valid 1-D convolution along axis 1 with stride 1.
    ///
    /// `x: (B, L, Cin)`, `w: (K, Cin, Cout)` → `(B, L-K+1, Cout)`.
    pub fn conv1d_valid(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] {
            return shape_err(format!("conv1d shapes incompatible: x {sx:?}, w {sw:?}"));
        }
        let (batch, len_in, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        if len_in < k {
            return shape_err(format!("conv1d input length {len_in} shorter than kernel {k}"));
        }
        let len_out = len_in - k + 1;
        let mut y = vec![T::zero(); batch * len_out * cout];
        {
            let (xd, wd) = (self.data(x), self.data(w));
            for b in 0..batch {
                let yb = &mut y[b * len_out * cout..(b + 1) * len_out * cout];
                for tap in 0..k {
                    let xs = &xd[(b * len_in + tap) * cin..(b * len_in + tap + len_out) * cin];
                    gemm_nn(xs, &wd[tap * cin * cout..(tap + 1) * cin * cout], yb, len_out, cin, cout);
                }
            }
        }
        let rg = self.grad_flag(x) || self.grad_flag(w);
        Ok(self.push(
            Tensor::new(&[batch, len_out, cout], y)?,
            Op::Conv1d {
                x,
                w,
                batch,
                len_in,
                cin,
                cout,
                k,
            },
            rg,
        ))
    }

    /// Batch normalization over the valid positions of `x: (B, L, C)`, with
    /// affine `gamma`, `beta` of shape `(C)`. Padded positions come out as
    /// zeros. Train mode also returns the observed batch statistics.
    pub fn batch_norm_masked(
        &mut self,
        x: Var,
        mask: &Mask,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != mask.batch() || s[1] != mask.max_len() {
            return shape_err(format!("batch_norm input {s:?} does not match mask"));
        }
        let c = s[2];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm affine parameters must have shape (C)");
        }
        let l = s[1];
        let eps = T::from_f64(BATCH_NORM_EPS);
        let xd = self.data(x);
        let valid_rows: Vec<usize> = (0..mask.batch())
            .flat_map(|b| (0..mask.lens()[b]).map(move |t| b * l + t))
            .collect();
        let (mean, var, stats, train) = match mode {
            NormMode::Train => {
                let count = valid_rows.len();
                if count < 2 {
                    return shape_err(format!(
                        "train-mode batch norm needs at least 2 valid positions, got {count}"
                    ));
                }
                let mut mean = vec![T::zero(); c];
                for &r in &valid_rows {
                    for (m, &v) in mean.iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                        *m = *m + v;
                    }
                }
                let inv_n = T::one() / T::from_f64(count as f64);
                mean.iter_mut().for_each(|m| *m = *m * inv_n);
                let mut var = vec![T::zero(); c];
                for &r in &valid_rows {
                    for ch in 0..c {
                        let d = xd[r * c + ch] - mean[ch];
                        var[ch] = var[ch] + d * d;
                    }
                }
                let unbiased_scale = T::from_f64(count as f64 / (count - 1) as f64);
                var.iter_mut().for_each(|v| *v = *v * inv_n);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbiased_scale).collect(),
                };
                (mean, var, Some(stats), true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("running statistics do not match channel count");
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for &r in &valid_rows {
            for ch in 0..c {
                let i = r * c + ch;
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = h * g[ch] + bt[ch];
            }
        }
        let rg = self.grad_flag(x) || self.grad_flag(gamma) || self.grad_flag(beta);
        let out = self.push(
            Tensor::new(&s, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mask: mask.clone(),
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((out, stats))
    }

    /// `x / sqrt(mean(x²) + ε) ⊙ gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = match s.last() {
            Some(&d) if d >= 1 => d,
            _ => return shape_err("rms_norm needs a non-empty last axis"),
        };
        if self.shape(gain) != [d] {
            return shape_err(format!("rms_norm gain must have shape ({d})"));
        }
        let eps = T::from_f64(RMS_NORM_EPS);
        let inv_d = T::one() / T::from_f64(d as f64);
        let (xd, gd) = (self.data(x), self.data(gain));
        let rows = xd.len() / d;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut y = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let ms = kernels::dot(row, row) * inv_d;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                y[r * d + j] = row[j] * inv * gd[j];
            }
        }
        let rg = self.grad_flag(x) || self.grad_flag(gain);
        Ok(self.push(Tensor::new(&s, y)?, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Rotary position embedding of `a: (…, L, D)`: row `t` along axis `-2`
    /// is rotated as position `positions[t]`. `D` must be even.
    pub fn rope(&mut self, a: Var, positions: &[f64], base: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return shape_err("rope needs (…, L, D)");
        }
        let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
        if d % 2 != 0 {
            return Err(Error::InvalidArgument(format!("rope needs an even head dimension, got {d}")));
        }
        if positions.len() != l {
            return shape_err(format!("rope got {} positions for length {l}", positions.len()));
        }
        let mut y = self.data(a).to_vec();
        for (r, row) in y.chunks_mut(d).enumerate() {
            kernels::rope_row(row, positions[r % l], base, 1.0);
        }
        let rg = self.grad_flag(a);
        Ok(self.push(
            Tensor::new(&s, y)?,
            Op::Rope {
                a,
                positions: positions.to_vec(),
                base,
            },
            rg,
        ))
    }

    /// Euclidean distances between all rows of `a: (N, D)` → `(N, N)`.
    pub fn pairwise_distance(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return shape_err(format!("pairwise_distance needs (N, D), got {s:?}"));
        }
        let (n, d) = (s[0], s[1]);
        let x = self.data(a);
        let mut y = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                let mut acc = T::zero();
                for c in 0..d {
                    let diff = x[i * d + c] - x[j * d + c];
                    acc = acc + diff * diff;
                }
                let dist = acc.sqrt();
                y[i * n + j] = dist;
                y[j * n + i] = dist;
            }
        }
        let rg = self.grad_flag(a);
        Ok(self.push(Tensor::new(&[n, n], y)?, Op::PairwiseDist { a, n, d }, rg))
    }

    /// Flat gather: `out[i] = a.flat[idx[i]]`, a 1-D tensor.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let x = self.data(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
            return shape_err(format!("gather index {bad} out of {}", x.len()));
        }
        let y: Vec<T> = idx.iter().map(|&i| x[i]).collect();
        let rg = self.grad_flag(a);
        Ok(self.push(Tensor::new(&[idx.len()], y)?, Op::Gather { a, idx }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let rg = self.grad_flag(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.data(a);
        let s = x.iter().copied().sum::<T>() / T::from_f64(x.len().max(1) as f64);
        let rg = self.grad_flag(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Gradient accumulator of `v`, or `None` when `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(ga) = self.slot(grads, a) {
                    for bi in 0..batch {
                        let b_off = if shared { 0 } else { bi * k * n };
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[b_off..b_off + k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for bi in 0..batch {
                        let b_off = if shared { 0 } else { bi * k * n };
                        gemm_tn(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[b_off..b_off + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            &Op::Add { a, b, inner } => {
                if let Some(ga) = self.slot(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % inner] = gb[i % inner] + v;
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(ga) = self.slot(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o = *o - v;
                    }
                }
            }
            &Op::Mul { a, b, inner } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(ga) = self.slot(grads, a) {
                    for (i, &v) in g.iter().enumerate() {
                        ga[i] = ga[i] + v * bd[i % inner];
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % inner] = gb[i % inner] + v * ad[i];
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = self.slot(grads, a) {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o = *o + v * c;
                    }
                }
            }
            &Op::AddScalar { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    add_into(ga, g);
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            add_into(&mut gp[r * w..(r + 1) * w], src);
                        }
                    }
                    off += w;
                }
            }
            &Op::Slice { a, start, width_in } => {
                let w = node.value.last_dim();
                if let Some(ga) = self.slot(grads, a) {
                    for (r, src) in g.chunks(w).enumerate() {
                        add_into(&mut ga[r * width_in + start..r * width_in + start + w], src);
                    }
                }
            }
            &Op::Transpose { a, batch, m, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    let back = transpose_blocks(g, batch, n, m);
                    add_into(ga, &back);
                }
            }
            &Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * y[i];
                    }
                }
            }
            &Op::Log2(a) => {
                let x = self.data(a);
                let ln2 = T::from_f64(std::f64::consts::LN_2);
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] / (x[i] * ln2);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            &Op::LeakyRelu(a, slope) => {
                let x = self.data(a);
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        let d = if x[i] > T::zero() { T::one() } else { slope };
                        ga[i] = ga[i] + g[i] * d;
                    }
                }
            }
            &Op::Silu(a) => {
                let x = self.data(a);
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        let s = kernels::sigmoid(x[i]);
                        ga[i] = ga[i] + g[i] * (s + x[i] * s * (T::one() - s));
                    }
                }
            }
            &Op::Log2Sigmoid(a) => {
                let x = self.data(a);
                let ln2 = T::from_f64(std::f64::consts::LN_2);
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        let s = kernels::sigmoid(-x[i]);
                        ga[i] = ga[i] + g[i] * s / ln2;
                    }
                }
            }
            Op::Softmax { a, mask, rows } => {
                let l = mask.max_len();
                if let Some(ga) = self.slot(grads, *a) {
                    for b in 0..mask.batch() {
                        let valid = mask.lens()[b];
                        for r in 0..*rows {
                            let off = (b * rows + r) * l;
                            let yr = &y[off..off + valid];
                            let gr = &g[off..off + valid];
                            let inner = kernels::dot(yr, gr);
                            for t in 0..valid {
                                ga[off + t] = ga[off + t] + yr[t] * (gr[t] - inner);
                            }
                        }
                    }
                }
            }
            Op::MaskedMean { a, mask, dim } => {
                let (d, l) = (*dim, mask.max_len());
                if let Some(ga) = self.slot(grads, *a) {
                    for b in 0..mask.batch() {
                        let inv = T::one() / T::from_f64(mask.lens()[b] as f64);
                        let gb = &g[b * d..(b + 1) * d];
                        for t in 0..mask.lens()[b] {
                            let row = &mut ga[(b * l + t) * d..(b * l + t + 1) * d];
                            for (o, &v) in row.iter_mut().zip(gb) {
                                *o = *o + v * inv;
                            }
                        }
                    }
                }
            }
            &Op::Conv1d {
                x,
                w,
                batch,
                len_in,
                cin,
                cout,
                k,
            } => {
                let len_out = len_in - k + 1;
                let (xd, wd) = (self.data(x), self.data(w));
                if let Some(gx) = self.slot(grads, x) {
                    for b in 0..batch {
                        let gb = &g[b * len_out * cout..(b + 1) * len_out * cout];
                        for tap in 0..k {
                            let dst = &mut gx[(b * len_in + tap) * cin..(b * len_in + tap + len_out) * cin];
                            gemm_nt(gb, &wd[tap * cin * cout..(tap + 1) * cin * cout], dst, len_out, cout, cin);
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, w) {
                    for b in 0..batch {
                        let gb = &g[b * len_out * cout..(b + 1) * len_out * cout];
                        for tap in 0..k {
                            let xs = &xd[(b * len_in + tap) * cin..(b * len_in + tap + len_out) * cin];
                            gemm_tn(xs, gb, &mut gw[tap * cin * cout..(tap + 1) * cin * cout], len_out, cin, cout);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mask,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let l = mask.max_len();
                let gam = self.data(*gamma);
                let rows: Vec<usize> = (0..mask.batch())
                    .flat_map(|b| (0..mask.lens()[b]).map(move |t| b * l + t))
                    .collect();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for &r in &rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        sum_g[ch] = sum_g[ch] + g[i];
                        sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    if *train {
                        let cnt = T::from_f64(rows.len() as f64);
                        for &r in &rows {
                            for ch in 0..c {
                                let i = r * c + ch;
                                // dxhat = g·γ; the batch sums pick up the same γ factor.
                                let v = (cnt * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]) * gam[ch] * inv_std[ch] / cnt;
                                gx[i] = gx[i] + v;
                            }
                        }
                    } else {
                        for &r in &rows {
                            for ch in 0..c {
                                let i = r * c + ch;
                                gx[i] = gx[i] + g[i] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    add_into(gg, &sum_gx);
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    add_into(gb, &sum_g);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let d = gd.len();
                let inv_d = T::one() / T::from_f64(d as f64);
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut ux = T::zero();
                        for j in 0..d {
                            ux = ux + gr[j] * gd[j] * xr[j];
                        }
                        let k = ux * inv * inv * inv * inv_d;
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + gr[j] * gd[j] * inv - xr[j] * k;
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xd[r * d + j] * inv;
                        }
                    }
                }
            }
            Op::Rope { a, positions, base } => {
                let d = node.value.last_dim();
                let l = positions.len();
                if let Some(ga) = self.slot(grads, *a) {
                    let mut back = g.to_vec();
                    for (r, row) in back.chunks_mut(d).enumerate() {
                        kernels::rope_row(row, positions[r % l], *base, -1.0);
                    }
                    add_into(ga, &back);
                }
            }
            &Op::PairwiseDist { a, n, d } => {
                let x = self.data(a);
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..n {
                        for j in i + 1..n {
                            let dist = y[i * n + j];
                            if dist <= T::zero() {
                                continue;
                            }
                            let w = (g[i * n + j] + g[j * n + i]) / dist;
                            for c in 0..d {
                                let v = w * (x[i * d + c] - x[j * d + c]);
                                ga[i * d + c] = ga[i * d + c] + v;
                                ga[j * d + c] = ga[j * d + c] - v;
                            }
                        }
                    }
                }
            }
            Op::Gather { a, idx } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (&i, &v) in idx.iter().zip(g) {
                        ga[i] = ga[i] + v;
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let v = g[0] / T::from_f64(ga.len().max(1) as f64);
                    ga.iter_mut().for_each(|o| *o = *o + v);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn transpose_blocks<T: Scalar>(x: &[T], batch: usize, m: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                y[off + j * m + i] = x[off + i * n + j];
            }
        }
    }
    y
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of `v`; `None` if `v` was unreachable or needs no gradient.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as an owned vector, zeros when unreachable.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}

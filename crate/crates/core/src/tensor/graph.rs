use super::{ParamId, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over channel-last maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows {
        x: Var,
        s: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    UpsampleBilinear {
        x: Var,
        factor: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad2d {
        x: Var,
    },
    SumAll(Var),
    MeanAll(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation and replays it backwards.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for the backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    bound: Vec<(ParamId, Var)>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = a·op(b)` (+ `beta·c`) on row-major slices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // SAFETY: the caller passes slices that cover the strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `src` (shape `shape`) into `out` following the axis permutation.
fn permute_into(src: &[f64], shape: &[usize], axes: &[usize], out: &mut [f64]) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    if out.is_empty() {
        return;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < out.len() {
        let base: usize = (0..rank - 1).map(|d| idx[d] * src_strides[d]).sum();
        for j in 0..inner {
            out[o + j] = src[base + j * inner_stride];
        }
        o += inner;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Neumaier summation; scalar losses over many pixels otherwise carry
/// rounding noise that swamps finite-difference checks.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that participates in differentiation when `requires_grad`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Binds a parameter as a gradient-tracked leaf; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.input(store.value(id).clone(), true);
        self.bound.push((id, v));
        v
    }

    /// Gradient accumulated into a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.bound {
            if let Some(g) = &self.leaf_grads[v.0] {
                for (dst, src) in store.get_mut(id).grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ---------------------------------------------------------------- linear algebra

    /// `x[..., k] · w[k, n] -> [..., n]`.
    pub fn mm(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(self.mismatch("mm", x, w));
        }
        let k = ws[0];
        let n = ws[1];
        let m = self.value(x).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(x),
            k as isize,
            1,
            self.data(w),
            n as isize,
            1,
            0.0,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(&[x, w]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a: x,
                b: w,
                batch: 1,
                m,
                k,
                n,
                trans_b: false,
            },
            ng,
        ))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        self.mm(a, b)
    }

    /// Batched product over matching leading dims: `a[.., m, k] · b[.., k, n]`,
    /// or `a · bᵀ` with `b[.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let r = as_.len();
        if r < 2 || bs.len() != r || as_[..r - 2] != bs[..r - 2] {
            return Err(self.mismatch("bmm", a, b));
        }
        let (m, k) = (as_[r - 2], as_[r - 1]);
        let (kb, n) = if trans_b {
            (bs[r - 1], bs[r - 2])
        } else {
            (bs[r - 2], bs[r - 1])
        };
        if k != kb {
            return Err(self.mismatch("bmm", a, b));
        }
        let batch: usize = as_[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (rsb, csb) = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    k as isize,
                    1,
                    &bd[i * k * n..],
                    rsb,
                    csb,
                    0.0,
                    &mut out[i * m * n..],
                );
            }
        }
        let mut shape = as_[..r - 2].to_vec();
        shape.extend([m, n]);
        let ng = self.needs(&[a, b]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let mut out = self.value(x).clone();
        let b = self.data(bias).to_vec();
        for row in out.data.chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, ng))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor {
            shape: self.shape(a).to_vec(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        let ng = self.needs(&[x]);
        self.push(t, Op::Scale(x, c), ng)
    }

    /// `s · x` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(self.mismatch("mul_scalar", x, s));
        }
        let sv = self.data(s)[0];
        let t = self.map(x, |v| v * sv);
        let ng = self.needs(&[x, s]);
        Ok(self.push(t, Op::MulScalar { x, s }, ng))
    }

    /// `out[b, ...] = s[b] · x[b, ...]` for `s` with `x.shape[0]` elements.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.shape(x).first().copied().unwrap_or(0);
        if rows == 0 || self.value(s).numel() != rows {
            return Err(self.mismatch("scale_rows", x, s));
        }
        let inner = self.value(x).numel() / rows;
        let sv = self.data(s).to_vec();
        let mut t = self.value(x).clone();
        for (chunk, f) in t.data.chunks_mut(inner.max(1)).zip(&sv) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.needs(&[x, s]);
        Ok(self.push(t, Op::ScaleRows { x, s }, ng))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu);
        let ng = self.needs(&[x]);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let ng = self.needs(&[x]);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::exp);
        let ng = self.needs(&[x]);
        self.push(t, Op::Exp(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(i) = self.data(x).iter().position(|&v| v <= 0.0) {
            return Err(invalid("log", format!("non-positive input at index {i}")));
        }
        let t = self.map(x, f64::ln);
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::Log(x), ng))
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let n = *t.shape.last().unwrap_or(&1);
        for row in t.data.chunks_mut(n.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.needs(&[x]);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Layer normalization over the last axis followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        let xv = self.value(x);
        let rows = xv.numel() / n.max(1);
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let shape = xv.shape.clone();
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Normalizes each row of `x[rows, d]` to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() != 2 {
            return Err(invalid("l2_normalize_rows", format!("expected 2-D input, got {:?}", xv.shape)));
        }
        let d = xv.shape[1];
        let mut norms = Vec::with_capacity(xv.shape[0]);
        let mut out = xv.data.clone();
        for (r, row) in out.chunks_mut(d.max(1)).enumerate() {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(Error::ZeroNorm { row: r });
            }
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let shape = xv.shape.clone();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::L2Normalize { x, norms }, ng))
    }

    // ---------------------------------------------------------------- convolution

    /// Convolution of `x[N, H, W, Ci]` with `w[kh, kw, Ci, Co]` plus `b[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] || self.shape(b) != [ws[3]] {
            return Err(self.mismatch("conv2d", x, w));
        }
        if spec.stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, co) = (ws[0], ws[1], ws[3]);
        let p = spec.padding;
        if h + 2 * p < kh || wd + 2 * p < kw {
            return Err(self.mismatch("conv2d", x, w));
        }
        let ho = (h + 2 * p - kh) / spec.stride + 1;
        let wo = (wd + 2 * p - kw) / spec.stride + 1;
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            ci,
            kh,
            kw,
            co,
            ho,
            wo,
            stride: spec.stride,
            pad: p,
        };
        let cols = im2col(self.data(x), &geom);
        let rows = n * ho * wo;
        let kdim = kh * kw * ci;
        let mut out = vec![0.0; rows * co];
        gemm(
            rows,
            kdim,
            co,
            &cols,
            kdim as isize,
            1,
            self.data(w),
            co as isize,
            1,
            0.0,
            &mut out,
        );
        let bias = self.data(b);
        for row in out.chunks_mut(co) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![n, ho, wo, co],
                data: out,
            },
            Op::Conv2d { x, w, b, geom, cols },
            ng,
        ))
    }

    /// Nearest-neighbour upsampling of `x[N, H, W, C]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(invalid("upsample_nearest", format!("shape {s:?}, factor {factor}")));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (h2, w2) = (h * factor, w * factor);
        let src = self.data(x);
        let mut out = vec![0.0; n * h2 * w2 * c];
        for b in 0..n {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let si = ((b * h + y / factor) * w + xx / factor) * c;
                    let di = ((b * h2 + y) * w2 + xx) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![n, h2, w2, c],
                data: out,
            },
            Op::Upsample { x, factor },
            ng,
        ))
    }

    /// Bilinear upsampling of `x[N, H, W, C]` by an integer factor, sampling at
    /// pixel centres with edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(invalid("upsample_bilinear", format!("shape {s:?}, factor {factor}")));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
        let src = self.data(x);
        let mut out = vec![0.0; n * ty.len() * tx.len() * c];
        let mut di = 0;
        for b in 0..n {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let taps = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1, (1.0 - fy) * fx),
                        (y1, x0, fy * (1.0 - fx)),
                        (y1, x1, fy * fx),
                    ];
                    for (yy, xx, wt) in taps {
                        let si = ((b * h + yy) * w + xx) * c;
                        for ch in 0..c {
                            out[di + ch] += wt * src[si + ch];
                        }
                    }
                    di += c;
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![n, h * factor, w * factor, c],
                data: out,
            },
            Op::UpsampleBilinear { x, factor },
            ng,
        ))
    }

    /// Zero-pads the spatial dims of `x[N, H, W, C]` at the bottom and right.
    pub fn pad2d(&mut self, x: Var, new_h: usize, new_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || new_h < s[1] || new_w < s[2] {
            return Err(invalid("pad2d", format!("cannot pad {s:?} to {new_h}x{new_w}")));
        }
        if new_h == s[1] && new_w == s[2] {
            return Ok(x);
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.data(x);
        let mut out = vec![0.0; n * new_h * new_w * c];
        for b in 0..n {
            for y in 0..h {
                let si = (b * h + y) * w * c;
                let di = (b * new_h + y) * new_w * c;
                out[di..di + w * c].copy_from_slice(&src[si..si + w * c]);
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![n, new_h, new_w, c],
                data: out,
            },
            Op::Pad2d { x },
            ng,
        ))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: self.data(x).to_vec(),
        };
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("axes {axes:?} invalid for shape {s:?}")));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        permute_into(self.data(x), &s, axes, &mut out);
        let shape = axes.iter().map(|&a| s[a]).collect();
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(invalid("transpose", "rank must be at least 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(self.mismatch("concat", xs[0], v));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = self.needs(xs);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid("slice", format!("range {start}+{len} on axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Slice { x, axis, start }, ng))
    }

    /// Rows `ids` of a `[rows, d]` table, in order, repeats allowed.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(invalid("gather_rows", format!("table must be 2-D, got {s:?}")));
        }
        let d = s[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= s[0] {
                return Err(invalid("gather_rows", format!("row {i} out of range {}", s[0])));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.needs(&[table]);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data: out,
            },
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = compensated_sum(self.data(x).iter().copied());
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = compensated_sum(self.data(x).iter().copied()) / n;
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(invalid("mean_axis", format!("axis {axis} invalid for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::MeanAxis { x, axis }, ng))
    }

    /// Mean cross-entropy of `logits[rows, k]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(invalid(
                "cross_entropy",
                format!("logits {s:?} vs {} targets", targets.len()),
            ));
        }
        let k = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(invalid("cross_entropy", format!("class id {t} >= {k}")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut terms = Vec::with_capacity(targets.len());
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let target_logit = row[t];
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            terms.push(z.ln() - (target_logit - mx));
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let loss = compensated_sum(terms) / targets.len() as f64;
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        // Returns the gradient buffer of `v`, allocating zeros on first touch.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (a, b, batch, m, k, n, trans_b) = (*a, *b, *batch, *m, *k, *n, *trans_b);
                if wants(a) {
                    let bd = &nodes[b.0].value.data;
                    let (rs, cs) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    let ga = slot(grads, nodes, a);
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            n as isize,
                            1,
                            &bd[bi * k * n..],
                            rs,
                            cs,
                            1.0,
                            &mut ga[bi * m * k..],
                        );
                    }
                }
                if wants(b) {
                    let ad = &nodes[a.0].value.data;
                    let gb = slot(grads, nodes, b);
                    for bi in 0..batch {
                        if trans_b {
                            gemm(
                                n,
                                m,
                                k,
                                &g[bi * m * n..],
                                1,
                                n as isize,
                                &ad[bi * m * k..],
                                k as isize,
                                1,
                                1.0,
                                &mut gb[bi * k * n..],
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                &ad[bi * m * k..],
                                1,
                                k as isize,
                                &g[bi * m * n..],
                                n as isize,
                                1,
                                1.0,
                                &mut gb[bi * k * n..],
                            );
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    add_into(slot(grads, nodes, *x), g);
                }
                if wants(*bias) {
                    let gb = slot(grads, nodes, *bias);
                    let n = gb.len();
                    for row in g.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), g);
                }
                if wants(*b) {
                    add_into(slot(grads, nodes, *b), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, nodes, *a), g);
                }
                if wants(*b) {
                    slot(grads, nodes, *b).iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bd = &nodes[b.0].value.data;
                    let ga = slot(grads, nodes, *a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                }
                if wants(*b) {
                    let ad = &nodes[a.0].value.data;
                    let gb = slot(grads, nodes, *b);
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::ScaleRows { x, s } => {
                let sv = &nodes[s.0].value.data;
                let inner = g.len() / sv.len();
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for (j, (d, gv)) in gx.iter_mut().zip(g).enumerate() {
                        *d += sv[j / inner] * gv;
                    }
                }
                if wants(*s) {
                    let xd = &nodes[x.0].value.data;
                    let mut acc = vec![0.0; sv.len()];
                    for (j, (a, b)) in g.iter().zip(xd).enumerate() {
                        acc[j / inner] += a * b;
                    }
                    slot(grads, nodes, *s).iter_mut().zip(&acc).for_each(|(d, a)| *d += a);
                }
            }
            Op::MulScalar { x, s } => {
                let sv = nodes[s.0].value.data[0];
                if wants(*x) {
                    slot(grads, nodes, *x).iter_mut().zip(g).for_each(|(d, gv)| *d += sv * gv);
                }
                if wants(*s) {
                    let xd = &nodes[x.0].value.data;
                    let acc: f64 = g.iter().zip(xd).map(|(a, b)| a * b).sum();
                    slot(grads, nodes, *s)[0] += acc;
                }
            }
            Op::Gelu(x) => {
                let xd = &nodes[x.0].value.data;
                let gx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += g[j] * gelu_grad(xd[j]);
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    let y = out.data[j];
                    gx[j] += g[j] * y * (1.0 - y);
                }
            }
            Op::Exp(x) => {
                let gx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += g[j] * out.data[j];
                }
            }
            Op::Log(x) => {
                let xd = &nodes[x.0].value.data;
                let gx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += g[j] / xd[j];
                }
            }
            Op::Softmax(x) => {
                let n = *out.shape.last().unwrap_or(&1);
                let gx = slot(grads, nodes, *x);
                for ((y, gy), dx) in out
                    .data
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(gx.chunks_mut(n))
                {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *out.shape.last().unwrap_or(&1);
                let gd = &nodes[gamma.0].value.data;
                if wants(*gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, nodes, *beta);
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    let mut dxhat = vec![0.0; n];
                    for (r, ((gr, xr), dx)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = gr[j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xr[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            dx[j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = out.shape[1];
                let gx = slot(grads, nodes, *x);
                for (r, ((y, gy), dx)) in out
                    .data
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[j] += (gy[j] - y[j] * dot) / norms[r];
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.n * geom.ho * geom.wo;
                let kdim = geom.kh * geom.kw * geom.ci;
                let co = geom.co;
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    for row in g.chunks(co) {
                        add_into(gb, row);
                    }
                }
                if wants(*w) {
                    let gw = slot(grads, nodes, *w);
                    gemm(kdim, rows, co, cols, 1, kdim as isize, g, co as isize, 1, 1.0, gw);
                }
                if wants(*x) {
                    let wd = &nodes[w.0].value.data;
                    let mut dcols = vec![0.0; rows * kdim];
                    gemm(rows, co, kdim, g, co as isize, 1, wd, 1, co as isize, 0.0, &mut dcols);
                    col2im_add(&dcols, geom, slot(grads, nodes, *x));
                }
            }
            Op::Upsample { x, factor } => {
                let s = &nodes[x.0].value.shape;
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (h2, w2) = (h * factor, w * factor);
                let gx = slot(grads, nodes, *x);
                for bb in 0..n {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let di = ((bb * h + y / factor) * w + xx / factor) * c;
                            let si = ((bb * h2 + y) * w2 + xx) * c;
                            for ch in 0..c {
                                gx[di + ch] += g[si + ch];
                            }
                        }
                    }
                }
            }
            Op::UpsampleBilinear { x, factor } => {
                let s = &nodes[x.0].value.shape;
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ty, tx) = (bilinear_taps(h, *factor), bilinear_taps(w, *factor));
                let gx = slot(grads, nodes, *x);
                let mut si = 0;
                for bb in 0..n {
                    for &(y0, y1, fy) in &ty {
                        for &(x0, x1, fx) in &tx {
                            let taps = [
                                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                                (y0, x1, (1.0 - fy) * fx),
                                (y1, x0, fy * (1.0 - fx)),
                                (y1, x1, fy * fx),
                            ];
                            for (yy, xx, wt) in taps {
                                let di = ((bb * h + yy) * w + xx) * c;
                                for ch in 0..c {
                                    gx[di + ch] += wt * g[si + ch];
                                }
                            }
                            si += c;
                        }
                    }
                }
            }
            Op::Pad2d { x } => {
                let s = &nodes[x.0].value.shape;
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ph, pw) = (out.shape[1], out.shape[2]);
                let gx = slot(grads, nodes, *x);
                for bb in 0..n {
                    for y in 0..h {
                        let di = (bb * h + y) * w * c;
                        let si = (bb * ph + y) * pw * c;
                        add_into(&mut gx[di..di + w * c], &g[si..si + w * c]);
                    }
                }
            }
            Op::Reshape(x) => add_into(slot(grads, nodes, *x), g),
            Op::Permute { x, axes } => {
                let inv = inverse_axes(axes);
                let mut back = vec![0.0; g.len()];
                permute_into(g, &out.shape, &inv, &mut back);
                add_into(slot(grads, nodes, *x), &back);
            }
            Op::Concat { xs, axis } => {
                let s = &out.shape;
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut off = 0;
                for &v in xs {
                    let len = nodes[v.0].value.shape[*axis] * inner;
                    if wants(v) {
                        let gv = slot(grads, nodes, v);
                        for o in 0..outer {
                            add_into(
                                &mut gv[o * len..(o + 1) * len],
                                &g[o * total + off..o * total + off + len],
                            );
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = &nodes[x.0].value.shape;
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out.shape[*axis] * inner;
                let gx = slot(grads, nodes, *x);
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    add_into(&mut gx[base..base + len], &g[o * len..(o + 1) * len]);
                }
            }
            Op::SumAll(x) => {
                slot(grads, nodes, *x).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MeanAll(x) => {
                let gx = slot(grads, nodes, *x);
                let c = g[0] / gx.len().max(1) as f64;
                gx.iter_mut().for_each(|d| *d += c);
            }
            Op::MeanAxis { x, axis } => {
                let s = &nodes[x.0].value.shape;
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = s[*axis];
                let gx = slot(grads, nodes, *x);
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for ii in 0..inner {
                            gx[base + ii] += g[o * inner + ii] / len as f64;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = nodes[logits.0].value.shape[1];
                let c = g[0] / targets.len() as f64;
                let gl = slot(grads, nodes, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * k + j] += c * (probs[r * k + j] - onehot);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = nodes[table.0].value.shape[1];
                let gt = slot(grads, nodes, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kdim = g.kh * g.kw * g.ci;
    let mut cols = vec![0.0; g.n * g.ho * g.wo * kdim];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * kdim;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.ci;
                        let dst = row + (ky * g.kw + kx) * g.ci;
                        cols[dst..dst + g.ci].copy_from_slice(&x[src..src + g.ci]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let kdim = g.kh * g.kw * g.ci;
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * kdim;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.ci;
                        let src = row + (ky * g.kw + kx) * g.ci;
                        add_into(&mut dx[dst..dst + g.ci], &dcols[src..src + g.ci]);
                    }
                }
            }
        }
    }
}

/// Source rows `(i0, i1, weight of i1)` for each output coordinate of a
/// bilinear ×`factor` resize of an axis of length `len`.
fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            (i0, (i0 + 1).min(len - 1), src - i0 as f64)
        })
        .collect()
}

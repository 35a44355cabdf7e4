//! Eager computation tape for reverse-mode differentiation.
//!
//! Each tape method computes its output immediately and appends a node
//! recording the operation, its input [`Var`]s, and whatever values the
//! backward rule needs. [`Tape::backward`] replays the nodes in reverse
//! (each visited exactly once; inputs always precede their consumers) and
//! accumulates vector-Jacobian products into every node on a
//! `requires_grad` path. Constants are pruned: gradient is never
//! propagated into a node whose subgraph holds no tracked leaf.

use super::conv::{self, ConvGeom};
use super::params::ParameterSet;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise nonlinearity. GELU uses the tanh approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Where the feature axis lives for per-feature ops (bias, batchnorm).
#[derive(Debug, Clone, Copy)]
enum FeatureLayout {
    /// `[n, f]`: feature = column.
    Matrix { f: usize },
    /// `[n, c, h, w]`: feature = channel.
    Nchw { c: usize, hw: usize },
}

impl FeatureLayout {
    fn features(&self) -> usize {
        match *self {
            FeatureLayout::Matrix { f } => f,
            FeatureLayout::Nchw { c, .. } => c,
        }
    }

    #[inline]
    fn feature_of(&self, flat: usize) -> usize {
        match *self {
            FeatureLayout::Matrix { f } => flat % f,
            FeatureLayout::Nchw { c, hw } => (flat / hw) % c,
        }
    }
}

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Matmul { a: Var, b: Var },
    MatmulTransposeB { a: Var, b: Var },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    Deconv2d { input: Var, kernel: Var, geom: ConvGeom },
    Activation { input: Var, kind: Activation },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        layout: FeatureLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AffinePerFeature { input: Var, layout: FeatureLayout, scale: Vec<f64> },
    Reshape { input: Var },
    AddBias { input: Var, bias: Var, layout: FeatureLayout },
    FrobeniusSq { a: Var, b: Var },
    SumSq { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    RowNormalize { input: Var, norms: Vec<f64> },
    RowsGather { input: Var, indices: Vec<usize> },
    RowsOverwrite { dst: Var, src: Var, indices: Vec<usize> },
    ConcatCols { a: Var, b: Var },
    RowDot { a: Var, b: Var },
    LogSumExpRows { input: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations in topological order; see module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(Var, String)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.scalar_value()
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ---- leaves ------------------------------------------------------

    /// Untracked leaf; gradient never flows into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Tracked or untracked leaf, for tests and gradient checks.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.detached(), Op::Leaf, requires_grad)
    }

    /// Tracked leaf bound to a [`ParameterSet`] entry; [`Tape::grads_into`]
    /// later accumulates its gradient back into that entry.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let t = params.get(name)?;
        let v = self.push(t.detached(), Op::Leaf, true);
        self.bindings.push((v, name.to_string()));
        Ok(v)
    }

    // ---- elementwise and linear algebra ------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| c * x).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("scale keeps shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Matmul { a, b }, rg))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`: pairwise row dot products.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension(format!(
                "matmul_tb: incompatible shapes {sa:?} x {sb:?}^T"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += da[i * k + p] * db[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatmulTransposeB { a, b }, rg))
    }

    // ---- convolutions -------------------------------------------------

    /// Strided cross-correlation with "same" zero padding:
    /// `[n,c,h,w] * [o,c,kh,kw] -> [n,o,ceil(h/s),ceil(w/s)]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let g = self.conv_geometry(input, kernel, stride)?;
        let y = conv::forward(self.value(input).data(), self.value(kernel).data(), &g);
        let t = Tensor::new(vec![g.n, g.c_out, g.h_out, g.w_out], y)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(t, Op::Conv2d { input, kernel, geom: g }, rg))
    }

    /// Transposed convolution: the exact adjoint of [`Tape::conv2d`] with
    /// the same kernel and stride. `[n,o,h,w] -> [n,c,h*s,w*s]`.
    pub fn deconv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::Dimension(format!(
                "deconv2d: expected 4-d input and kernel, got {si:?}, {sk:?}"
            )));
        }
        if si[1] != sk[0] {
            return Err(Error::Dimension(format!(
                "deconv2d: input channels {} != kernel out-channels {}",
                si[1], sk[0]
            )));
        }
        if stride == 0 {
            return Err(Error::Config("deconv2d: stride must be positive".into()));
        }
        // Geometry is anchored on the *output* (conv-input) space.
        let g = conv::same_geom(
            si[0],
            sk[1],
            si[2] * stride,
            si[3] * stride,
            sk[0],
            sk[2],
            sk[3],
            stride,
        );
        debug_assert_eq!((g.h_out, g.w_out), (si[2], si[3]));
        let x = conv::input_grad(self.value(input).data(), self.value(kernel).data(), &g);
        let t = Tensor::new(vec![g.n, g.c_in, g.h, g.w], x)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(t, Op::Deconv2d { input, kernel, geom: g }, rg))
    }

    fn conv_geometry(&self, input: Var, kernel: Var, stride: usize) -> Result<ConvGeom> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d: expected 4-d input and kernel, got {si:?}, {sk:?}"
            )));
        }
        if si[1] != sk[1] {
            return Err(Error::Dimension(format!(
                "conv2d: input channels {} != kernel channels {}",
                si[1], sk[1]
            )));
        }
        if sk[2] > si[2] || sk[3] > si[3] {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {}x{} larger than input {}x{}",
                sk[2], sk[3], si[2], si[3]
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        Ok(conv::same_geom(
            si[0], si[1], si[2], si[3], sk[0], sk[2], sk[3], stride,
        ))
    }

    // ---- nonlinearities and normalization ------------------------------

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let data: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .map(|&x| match kind {
                Activation::Relu => x.max(0.0),
                Activation::Gelu => gelu(x),
            })
            .collect();
        let t = Tensor::new(self.value(input).shape().to_vec(), data).expect("act keeps shape");
        let rg = self.rg(input);
        self.push(t, Op::Activation { input, kind }, rg)
    }

    /// Train-mode batch normalization over `[n,f]` (per column) or
    /// `[n,c,h,w]` (per channel). Normalizes by batch statistics (biased
    /// variance) and folds the batch stats into the running buffers with
    /// `running = momentum * running + (1 - momentum) * batch`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        momentum: f64,
    ) -> Result<Var> {
        let layout = self.feature_layout(input, "batchnorm")?;
        let f = layout.features();
        if self.value(input).shape()[0] < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batchnorm train mode needs n >= 2, got n = {}",
                self.value(input).shape()[0]
            )));
        }
        self.check_feature_param(gamma, f, "batchnorm gamma")?;
        self.check_feature_param(beta, f, "batchnorm beta")?;

        let x = self.value(input).data();
        let m = x.len() / f;
        let mut mean = vec![0.0; f];
        for (i, &v) in x.iter().enumerate() {
            mean[layout.feature_of(i)] += v;
        }
        for mu in mean.iter_mut() {
            *mu /= m as f64;
        }
        let mut var = vec![0.0; f];
        for (i, &v) in x.iter().enumerate() {
            let d = v - mean[layout.feature_of(i)];
            var[layout.feature_of(i)] += d * d;
        }
        for s in var.iter_mut() {
            *s /= m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (i, &v) in x.iter().enumerate() {
            let c = layout.feature_of(i);
            xhat[i] = (v - mean[c]) * inv_std[c];
            out[i] = g[c] * xhat[i] + b[c];
        }

        for c in 0..f {
            running_mean.data_mut()[c] = momentum * running_mean.data()[c] + (1.0 - momentum) * mean[c];
            running_var.data_mut()[c] = momentum * running_var.data()[c] + (1.0 - momentum) * var[c];
        }

        let t = Tensor::new(self.value(input).shape().to_vec(), out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::BatchNorm { input, gamma, beta, layout, xhat, inv_std },
            rg,
        ))
    }

    /// Eval-mode batch normalization: per-feature affine transform with the
    /// running statistics folded into constants (no gradient to gamma/beta).
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let layout = self.feature_layout(input, "batchnorm")?;
        let f = layout.features();
        if gamma.numel() != f || beta.numel() != f || running_mean.numel() != f || running_var.numel() != f {
            return Err(Error::Dimension(format!(
                "batchnorm eval: parameter/buffer length != {f} features"
            )));
        }
        let scale: Vec<f64> = (0..f)
            .map(|c| gamma.data()[c] / (running_var.data()[c] + eps).sqrt())
            .collect();
        let shift: Vec<f64> = (0..f)
            .map(|c| beta.data()[c] - running_mean.data()[c] * scale[c])
            .collect();
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = layout.feature_of(i);
                v * scale[c] + shift[c]
            })
            .collect();
        let t = Tensor::new(self.value(input).shape().to_vec(), out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::AffinePerFeature { input, layout, scale }, rg))
    }

    fn feature_layout(&self, input: Var, what: &str) -> Result<FeatureLayout> {
        let s = self.value(input).shape();
        match s.len() {
            2 => Ok(FeatureLayout::Matrix { f: s[1] }),
            4 => Ok(FeatureLayout::Nchw { c: s[1], hw: s[2] * s[3] }),
            _ => Err(Error::Dimension(format!(
                "{what}: expected 2-d or 4-d input, got {s:?}"
            ))),
        }
    }

    fn check_feature_param(&self, v: Var, f: usize, what: &str) -> Result<()> {
        if self.value(v).numel() != f {
            return Err(Error::Dimension(format!(
                "{what}: expected {f} entries, got {}",
                self.value(v).numel()
            )));
        }
        Ok(())
    }

    /// Per-feature bias add: `[n,f] + [f]` or `[n,c,h,w] + [c]`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let layout = self.feature_layout(input, "add_bias")?;
        self.check_feature_param(bias, layout.features(), "add_bias")?;
        let b = self.value(bias).data().to_vec();
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[layout.feature_of(i)])
            .collect();
        let t = Tensor::new(self.value(input).shape().to_vec(), out)?;
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(t, Op::AddBias { input, bias, layout }, rg))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, input: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if new_shape.is_empty() || numel != self.value(input).numel() {
            return Err(Error::Dimension(format!(
                "reshape: cannot view {:?} as {:?}",
                self.value(input).shape(),
                new_shape
            )));
        }
        let t = Tensor::new(new_shape, self.value(input).data().to_vec())?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Reshape { input }, rg))
    }

    /// Keeps the leading dim, flattens the rest: `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(input, vec![n, rest])
    }

    // ---- reductions -----------------------------------------------------

    /// Sum of squared differences (squared Frobenius norm of `a - b`).
    pub fn frobenius_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "frobenius_sq")?;
        let v: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::FrobeniusSq { a, b }, rg))
    }

    /// Sum of squared entries.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::SumSq { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v: f64 =
            self.value(a).data().iter().sum::<f64>() / self.value(a).numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Mean { a }, rg)
    }

    // ---- row-structured ops ----------------------------------------------

    /// Divides each row of `[n,h]` by its Euclidean norm. Rows with norm
    /// below 1e-12 are rejected.
    pub fn row_normalize(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "row_normalize: expected 2-d input, got {s:?}"
            )));
        }
        let (n, h) = (s[0], s[1]);
        let x = self.value(input).data();
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let norm = x[i * h..(i + 1) * h]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateRow { row: i, norm });
            }
            norms[i] = norm;
        }
        let out: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| v / norms[i / h])
            .collect();
        let t = Tensor::new(vec![n, h], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::RowNormalize { input, norms }, rg))
    }

    /// Selects rows by index along the leading axis; backward scatter-adds.
    pub fn rows_gather(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(input).shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!(
                "rows_gather: index {bad} out of range for {n} rows"
            )));
        }
        let w = self.value(input).cols();
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            out.extend_from_slice(self.value(input).row(i));
        }
        let mut shape = self.value(input).shape().to_vec();
        shape[0] = indices.len();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(input);
        Ok(self.push(
            t,
            Op::RowsGather { input, indices: indices.to_vec() },
            rg,
        ))
    }

    /// Copy of `dst` with `dst[indices[i]] = src[i]`. Gradient flows to
    /// `src` at the written rows and to `dst` everywhere else, which is how
    /// live batch rows are spliced over a constant bank snapshot.
    pub fn rows_overwrite(&mut self, dst: Var, src: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(dst).shape()[0];
        let w = self.value(dst).cols();
        if self.value(src).shape()[0] != indices.len() {
            return Err(Error::Index(format!(
                "rows_overwrite: {} indices but {} source rows",
                indices.len(),
                self.value(src).shape()[0]
            )));
        }
        if self.value(src).cols() != w {
            return Err(Error::Dimension(format!(
                "rows_overwrite: row width {} != destination width {w}",
                self.value(src).cols()
            )));
        }
        let mut seen = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::Index(format!(
                    "rows_overwrite: index {i} out of range for {n} rows"
                )));
            }
            if seen[i] {
                return Err(Error::Index(format!("rows_overwrite: duplicate index {i}")));
            }
            seen[i] = true;
        }
        let mut out = self.value(dst).data().to_vec();
        for (r, &i) in indices.iter().enumerate() {
            out[i * w..(i + 1) * w].copy_from_slice(self.value(src).row(r));
        }
        let t = Tensor::new(self.value(dst).shape().to_vec(), out)?;
        let rg = self.rg(dst) || self.rg(src);
        Ok(self.push(
            t,
            Op::RowsOverwrite { dst, src, indices: indices.to_vec() },
            rg,
        ))
    }

    /// `[n,p] ++ [n,q] -> [n,p+q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!(
                "concat_cols: incompatible shapes {sa:?}, {sb:?}"
            )));
        }
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let t = Tensor::new(vec![n, p + q], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::ConcatCols { a, b }, rg))
    }

    /// Row-wise dot product: `[n,h] . [n,h] -> [n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "row_dot: expected 2-d inputs, got {s:?}"
            )));
        }
        let (n, h) = (s[0], s[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = (0..n)
            .map(|i| {
                (0..h)
                    .map(|j| da[i * h + j] * db[i * h + j])
                    .sum::<f64>()
            })
            .collect();
        let t = Tensor::new(vec![n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::RowDot { a, b }, rg))
    }

    /// Row-wise log-sum-exp with max subtraction: `[n,m] -> [n]`.
    pub fn logsumexp_rows(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "logsumexp_rows: expected 2-d input, got {s:?}"
            )));
        }
        let (n, m) = (s[0], s[1]);
        let x = self.value(input).data();
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let row = &x[i * m..(i + 1) * m];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        let t = Tensor::new(vec![n], out)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::LogSumExpRows { input }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shape {:?} != {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every node on a `requires_grad`
    /// path ends up with an accumulated gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward: empty tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            // Nothing tracked feeds the loss; a no-op backward is valid.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        debug_assert_eq!(contrib.len(), numel);
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.nodes[v.0].grad = Some(contrib.to_vec()),
        }
    }

    fn backprop_node(&mut self, i: usize) {
        let d_out = self.nodes[i].grad.clone().expect("checked by caller");
        // Ops are matched by moving cheap copies of the metadata out first,
        // so accumulate() can borrow self mutably.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &d_out);
                self.accumulate(b, &d_out);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &d_out);
                let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let d: Vec<f64> = d_out.iter().map(|v| c * v).collect();
                self.accumulate(a, &d);
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                // dA = dOut * B^T
                let bd = self.value(b).data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += d_out[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                // dB = A^T * dOut
                let ad = self.value(a).data();
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += ad[i * k + p] * d_out[i * n + j];
                        }
                        db[p * n + j] = acc;
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::MatmulTransposeB { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[0];
                // dA = dOut * B
                let bd = self.value(b).data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += d_out[i * n + j] * bd[j * k + p];
                        }
                        da[i * k + p] = acc;
                    }
                }
                // dB = dOut^T * A
                let ad = self.value(a).data();
                let mut db = vec![0.0; n * k];
                for j in 0..n {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += d_out[i * n + j] * ad[i * k + p];
                        }
                        db[j * k + p] = acc;
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Conv2d { input, kernel, geom } => {
                let (input, kernel, g) = (*input, *kernel, *geom);
                let dx = conv::input_grad(&d_out, self.value(kernel).data(), &g);
                let dk = conv::kernel_grad(self.value(input).data(), &d_out, &g);
                self.accumulate(input, &dx);
                self.accumulate(kernel, &dk);
            }
            Op::Deconv2d { input, kernel, geom } => {
                let (input, kernel, g) = (*input, *kernel, *geom);
                let dy = conv::forward(&d_out, self.value(kernel).data(), &g);
                let dk = conv::kernel_grad(&d_out, self.value(input).data(), &g);
                self.accumulate(input, &dy);
                self.accumulate(kernel, &dk);
            }
            Op::Activation { input, kind } => {
                let (input, kind) = (*input, *kind);
                let x = self.value(input).data();
                let d: Vec<f64> = d_out
                    .iter()
                    .zip(x)
                    .map(|(&g, &xi)| {
                        g * match kind {
                            Activation::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Gelu => gelu_grad(xi),
                        }
                    })
                    .collect();
                self.accumulate(input, &d);
            }
            Op::BatchNorm { input, gamma, beta, layout, .. } => {
                let (input, gamma, beta, layout) = (*input, *gamma, *beta, *layout);
                let (xhat, inv_std) = match &self.nodes[i].op {
                    Op::BatchNorm { xhat, inv_std, .. } => (xhat.clone(), inv_std.clone()),
                    _ => unreachable!(),
                };
                let f = layout.features();
                let m = (xhat.len() / f) as f64;
                let g = self.value(gamma).data().to_vec();
                let mut sum_dy = vec![0.0; f];
                let mut sum_dy_xhat = vec![0.0; f];
                for (idx, &dy) in d_out.iter().enumerate() {
                    let c = layout.feature_of(idx);
                    sum_dy[c] += dy;
                    sum_dy_xhat[c] += dy * xhat[idx];
                }
                let mut dx = vec![0.0; xhat.len()];
                for (idx, &dy) in d_out.iter().enumerate() {
                    let c = layout.feature_of(idx);
                    dx[idx] = g[c] * inv_std[c] / m
                        * (m * dy - sum_dy[c] - xhat[idx] * sum_dy_xhat[c]);
                }
                self.accumulate(input, &dx);
                self.accumulate(gamma, &sum_dy_xhat);
                self.accumulate(beta, &sum_dy);
            }
            Op::AffinePerFeature { input, layout, scale } => {
                let (input, layout) = (*input, *layout);
                let scale = scale.clone();
                let d: Vec<f64> = d_out
                    .iter()
                    .enumerate()
                    .map(|(idx, &g)| g * scale[layout.feature_of(idx)])
                    .collect();
                self.accumulate(input, &d);
            }
            Op::Reshape { input } => {
                let input = *input;
                self.accumulate(input, &d_out);
            }
            Op::AddBias { input, bias, layout } => {
                let (input, bias, layout) = (*input, *bias, *layout);
                self.accumulate(input, &d_out);
                let mut db = vec![0.0; layout.features()];
                for (idx, &g) in d_out.iter().enumerate() {
                    db[layout.feature_of(idx)] += g;
                }
                self.accumulate(bias, &db);
            }
            Op::FrobeniusSq { a, b } => {
                let (a, b) = (*a, *b);
                let s = d_out[0];
                let diff: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(x, y)| 2.0 * s * (x - y))
                    .collect();
                self.accumulate(a, &diff);
                let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::SumSq { a } => {
                let a = *a;
                let s = d_out[0];
                let d: Vec<f64> = self.value(a).data().iter().map(|x| 2.0 * s * x).collect();
                self.accumulate(a, &d);
            }
            Op::Sum { a } => {
                let a = *a;
                let d = vec![d_out[0]; self.value(a).numel()];
                self.accumulate(a, &d);
            }
            Op::Mean { a } => {
                let a = *a;
                let n = self.value(a).numel() as f64;
                let d = vec![d_out[0] / n; self.value(a).numel()];
                self.accumulate(a, &d);
            }
            Op::RowNormalize { input, norms } => {
                let input = *input;
                let norms = norms.clone();
                let h = self.value(input).shape()[1];
                let y = self.nodes[i].value.data();
                let mut d = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let row_y = &y[r * h..(r + 1) * h];
                    let row_dy = &d_out[r * h..(r + 1) * h];
                    let dot: f64 = row_y.iter().zip(row_dy).map(|(a, b)| a * b).sum();
                    for j in 0..h {
                        d[r * h + j] = (row_dy[j] - row_y[j] * dot) / norm;
                    }
                }
                self.accumulate(input, &d);
            }
            Op::RowsGather { input, indices } => {
                let input = *input;
                let indices = indices.clone();
                let w = self.value(input).cols();
                let mut d = vec![0.0; self.value(input).numel()];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..w {
                        d[idx * w + j] += d_out[r * w + j];
                    }
                }
                self.accumulate(input, &d);
            }
            Op::RowsOverwrite { dst, src, indices } => {
                let (dst, src) = (*dst, *src);
                let indices = indices.clone();
                let w = self.value(dst).cols();
                let mut d_dst = d_out.clone();
                let mut d_src = vec![0.0; self.value(src).numel()];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..w {
                        d_src[r * w + j] = d_out[idx * w + j];
                        d_dst[idx * w + j] = 0.0;
                    }
                }
                self.accumulate(dst, &d_dst);
                self.accumulate(src, &d_src);
            }
            Op::ConcatCols { a, b } => {
                let (a, b) = (*a, *b);
                let (n, p) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let q = self.value(b).shape()[1];
                let mut da = vec![0.0; n * p];
                let mut db = vec![0.0; n * q];
                for i in 0..n {
                    da[i * p..(i + 1) * p].copy_from_slice(&d_out[i * (p + q)..i * (p + q) + p]);
                    db[i * q..(i + 1) * q]
                        .copy_from_slice(&d_out[i * (p + q) + p..(i + 1) * (p + q)]);
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::RowDot { a, b } => {
                let (a, b) = (*a, *b);
                let (n, h) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let mut da = vec![0.0; n * h];
                let mut db = vec![0.0; n * h];
                for i in 0..n {
                    for j in 0..h {
                        da[i * h + j] = d_out[i] * bd[i * h + j];
                        db[i * h + j] = d_out[i] * ad[i * h + j];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::LogSumExpRows { input } => {
                let input = *input;
                let (n, m) = (self.value(input).shape()[0], self.value(input).shape()[1]);
                let x = self.value(input).data();
                let lse = self.nodes[i].value.data();
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    for j in 0..m {
                        d[r * m + j] = d_out[r] * (x[r * m + j] - lse[r]).exp();
                    }
                }
                self.accumulate(input, &d);
            }
        }
    }

    /// Adds gradients of bound parameters into `params` (zeros for bound
    /// parameters the loss never reached).
    pub fn grads_into(&self, params: &mut ParameterSet) -> Result<()> {
        for (var, name) in &self.bindings {
            let numel = self.value(*var).numel();
            let grad = self.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; numel]);
            params.accumulate_grad(name, &grad)?;
        }
        Ok(())
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(row) {
                *d += av * bv;
            }
        }
    }
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))`.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

use std::collections::BTreeMap;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Map(Var, fn(f64) -> f64),
    Relu(Var),
    Square(Var),
    Sum(Var),
    WeightedMean(Var, Vec<f64>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    Reshape(Var),
    RowNorm(Var),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len: usize,
    width: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    groups: usize,
    n: usize,
    heads: usize,
    d: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Linear record of a forward computation.
///
/// Node ids are handed out in creation order, so every op's inputs precede it
/// and a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Parameter path to tape handle, produced by [`Tape::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter {path} is not bound on this tape")))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Untracked input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf that is not a named parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a named parameter as a tracked leaf.
    pub fn param(&mut self, path: &str, value: &Tensor) -> Result<Var> {
        if self.params.contains_key(path) {
            return Err(Error::Validation(format!(
                "parameter {path} is already bound on this tape"
            )));
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    /// Binds every parameter of `params` onto the tape.
    pub fn bind(&mut self, params: &ParamSet) -> Result<Bindings> {
        let mut vars = BTreeMap::new();
        for (path, value) in params.iter() {
            vars.insert(path.to_string(), self.param(path, value)?);
        }
        Ok(Bindings { vars })
    }

    pub fn param_var(&self, path: &str) -> Option<Var> {
        self.params.get(path).copied()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(Mat::row(self.value(a).data(), k), Mat::row(self.value(b).data(), n), Out::row(&mut out, n), m, k, n);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), tracked))
    }

    /// `x + b` with `b` broadcast over every trailing-dimension row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = *sx.last().unwrap();
        if sb != [n] {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let tracked = self.tracked_any(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), tracked))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(name, sa, sb));
        }
        let shape = sa.to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked_any(&[x]);
        self.push(out, op, tracked)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        self.unary(x, f, Op::Map(x, df))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(out, Op::Reshape(x), tracked))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked_any(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// `Σ wᵢ xᵢ / Σ wᵢ` over the flattened values of `x`.
    pub fn weighted_mean(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let n = self.value(x).len();
        if weights.len() != n {
            return Err(Error::shape("weighted_mean", self.shape(x), &[weights.len()]));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Validation(
                "weights must be nonnegative with a positive sum".into(),
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(v, w)| v * w)
            .sum();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::scalar(s / total), Op::WeightedMean(x, weights), tracked))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_mean(x, vec![1.0; n]).expect("uniform weights")
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::shape("mean_axis", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let inv = 1.0 / n as f64;
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..n {
                let base = (o * n + j) * inner;
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MeanAxis { x, outer, n, inner },
            tracked,
        ))
    }

    /// Euclidean norm of each row of an `m × k` matrix.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("row_norm", s, &[]));
        }
        let (m, k) = (s[0], s[1]);
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(k)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::new([m], out)?, Op::RowNorm(x), tracked))
    }

    // ---- layers -------------------------------------------------------------

    /// Softmax over the trailing dimension, with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        if src.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let mut out = src.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(out, Op::Softmax(x), tracked))
    }

    /// Normalizes each trailing-dimension slice to zero mean and unit
    /// variance, then applies `gain` and `offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().unwrap();
        if d < 2 {
            return Err(Error::Config(format!(
                "layer norm needs a trailing dimension of at least 2, got {d}"
            )));
        }
        if self.shape(gain) != [d] {
            return Err(Error::shape("layer_norm gain", sx, self.shape(gain)));
        }
        if self.shape(offset) != [d] {
            return Err(Error::shape("layer_norm offset", sx, self.shape(offset)));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let o = self.value(offset).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + o[j];
            }
        }
        let out = Tensor::new(src.shape().to_vec(), out)?;
        let tracked = self.tracked_any(&[x, gain, offset]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Same-length 1D cross-correlation.
    ///
    /// `x` is `[c_in, L]` or `[batch, c_in, L]`, `kernels` is
    /// `[c_out, c_in, w]` with odd `w`, `bias` is `[c_out]`. Zero padding of
    /// `(w - 1) / 2` on both sides.
    pub fn conv1d_same(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(kernels).to_vec();
        if sw.len() != 3 {
            return Err(Error::shape("conv1d kernels", &sx, &sw));
        }
        let (c_out, c_in, width) = (sw[0], sw[1], sw[2]);
        if width % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d_same needs an odd kernel width, got {width}"
            )));
        }
        let (batch, len) = match sx.as_slice() {
            [c, l] if *c == c_in => (1, *l),
            [b, c, l] if *c == c_in => (*b, *l),
            _ => return Err(Error::shape("conv1d input", &sx, &sw)),
        };
        if self.shape(bias) != [c_out] {
            return Err(Error::shape("conv1d bias", &sw, self.shape(bias)));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            len,
            width,
        };
        let out = conv1d_forward(
            self.value(x).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
            geom,
        );
        let shape = if sx.len() == 2 {
            vec![c_out, len]
        } else {
            vec![batch, c_out, len]
        };
        let tracked = self.tracked_any(&[x, kernels, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv1d {
                x,
                w: kernels,
                b: bias,
                geom,
            },
            tracked,
        ))
    }

    /// Multi-head scaled dot-product self-attention core.
    ///
    /// `q`, `k`, `v` are `[groups · n, d]`: `groups` independent sets of `n`
    /// tokens stacked row-wise. Attention never crosses set boundaries.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 2 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(Error::shape("attention", &sq, self.shape(k)));
        }
        let (rows, d) = (sq[0], sq[1]);
        if groups == 0 || rows % groups != 0 {
            return Err(Error::shape("attention groups", &sq, &[groups]));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        let geom = AttnGeom {
            groups,
            n: rows / groups,
            heads,
            d,
        };
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            geom,
        );
        let tracked = self.tracked_any(&[q, k, v]);
        Ok(self.push(
            Tensor::new([rows, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            tracked,
        ))
    }

    /// Attention probabilities `[groups, heads, n, n]` saved by an
    /// [`Tape::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { geom, probs, .. } => Some(
                Tensor::new([geom.groups, geom.heads, geom.n, geom.n], probs.clone())
                    .expect("consistent geometry"),
            ),
            _ => None,
        }
    }

    /// Row gather from a `[rows, d]` table. Repeated ids are allowed; their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || ids.is_empty() {
            return Err(Error::shape("gather_rows", st, &[ids.len()]));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::AntennaId {
                id: bad,
                a_max: rows,
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let tracked = self.tracked_any(&[table]);
        Ok(self.push(
            Tensor::new([ids.len(), d], out)?,
            Op::Gather(table, ids.to_vec()),
            tracked,
        ))
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Reverse-mode sweep from a tracked scalar.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.tracked {
            return Err(Error::Usage(
                "backward called on an untracked loss".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &dout, &mut grads);
            grads[i] = Some(dout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let tracked = |v: Var| self.nodes[v.0].tracked;
        macro_rules! acc {
            ($v:expr, |$g:ident| $body:block) => {
                if tracked($v) {
                    let len = self.nodes[$v.0].value.len();
                    let $g = grads[$v.0].get_or_insert_with(|| vec![0.0; len]);
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                // dA += dY · Bᵀ, dB += Aᵀ · dY
                acc!(*a, |g| { gemm(Mat::row(dout, n), Mat::col(bv, n), Out::row_acc(g, k), m, n, k) });
                acc!(*b, |g| { gemm(Mat::col(av, k), Mat::row(dout, n), Out::row_acc(g, n), k, m, n) });
            }
            Op::AddBias(x, b) => {
                acc!(*x, |g| {
                    axpy(1.0, dout, g);
                });
                let n = self.nodes[b.0].value.len();
                acc!(*b, |g| {
                    for row in dout.chunks_exact(n) {
                        axpy(1.0, row, g);
                    }
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |g| {
                    axpy(1.0, dout, g);
                });
                acc!(*b, |g| {
                    axpy(1.0, dout, g);
                });
            }
            Op::Sub(a, b) => {
                acc!(*a, |g| {
                    axpy(1.0, dout, g);
                });
                acc!(*b, |g| {
                    axpy(-1.0, dout, g);
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |g| {
                    for ((gi, d), y) in g.iter_mut().zip(dout).zip(bv) {
                        *gi += d * y;
                    }
                });
                acc!(*b, |g| {
                    for ((gi, d), x) in g.iter_mut().zip(dout).zip(av) {
                        *gi += d * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc!(*x, |g| {
                    axpy(*c, dout, g);
                });
            }
            Op::Map(x, df) => {
                let xv = val(*x);
                acc!(*x, |g| {
                    for ((gi, d), v) in g.iter_mut().zip(dout).zip(xv) {
                        *gi += d * df(*v);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc!(*x, |g| {
                    for ((gi, d), v) in g.iter_mut().zip(dout).zip(xv) {
                        if *v > 0.0 {
                            *gi += d;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc!(*x, |g| {
                    for ((gi, d), v) in g.iter_mut().zip(dout).zip(xv) {
                        *gi += 2.0 * v * d;
                    }
                });
            }
            Op::Sum(x) => {
                acc!(*x, |g| {
                    g.iter_mut().for_each(|gi| *gi += dout[0]);
                });
            }
            Op::WeightedMean(x, w) => {
                let total: f64 = w.iter().sum();
                acc!(*x, |g| {
                    for (gi, wi) in g.iter_mut().zip(w) {
                        *gi += dout[0] * wi / total;
                    }
                });
            }
            Op::Conv1d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let (c_in, c_out, len, width) = (geom.c_in, geom.c_out, geom.len, geom.width);
                let kdim = c_in * width;
                acc!(*b, |g| {
                    for bb in 0..geom.batch {
                        for co in 0..c_out {
                            let base = (bb * c_out + co) * len;
                            g[co] += dout[base..base + len].iter().sum::<f64>();
                        }
                    }
                });
                let need_x = tracked(*x);
                let mut cols = vec![0.0; kdim * len];
                let mut dcols = vec![0.0; kdim * len];
                let mut gw = vec![0.0; c_out * kdim];
                let mut gx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                for bb in 0..geom.batch {
                    let drow = &dout[bb * c_out * len..][..c_out * len];
                    let xs = &xv[bb * c_in * len..][..c_in * len];
                    im2col(xs, c_in, len, width, &mut cols);
                    gemm(Mat::row(drow, len), Mat::col(&cols, len), Out::row_acc(&mut gw, kdim), c_out, len, kdim);
                    if need_x {
                        gemm(Mat::col(wv, kdim), Mat::row(drow, len), Out::row(&mut dcols, len), kdim, c_out, len);
                        col2im_add(&dcols, c_in, len, width, &mut gx[bb * c_in * len..][..c_in * len]);
                    }
                }
                acc!(*w, |g| { axpy(1.0, &gw, g) });
                if need_x {
                    acc!(*x, |g| { axpy(1.0, &gx, g) });
                }
            }
            Op::MeanAxis { x, outer, n, inner } => {
                let inv = 1.0 / *n as f64;
                acc!(*x, |g| {
                    for o in 0..*outer {
                        let src = &dout[o * inner..(o + 1) * inner];
                        for j in 0..*n {
                            let base = (o * n + j) * inner;
                            axpy(inv, src, &mut g[base..base + inner]);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                acc!(*x, |g| {
                    for ((gr, yr), dr) in g
                        .chunks_exact_mut(d)
                        .zip(y.chunks_exact(d))
                        .zip(dout.chunks_exact(d))
                    {
                        let s = dot(yr, dr);
                        for j in 0..d {
                            gr[j] += yr[j] * (dr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = val(*gain);
                acc!(*gain, |g| {
                    for (dr, hr) in dout.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                });
                acc!(*offset, |g| {
                    for dr in dout.chunks_exact(d) {
                        axpy(1.0, dr, g);
                    }
                });
                acc!(*x, |g| {
                    let mut dh = vec![0.0; d];
                    for (r, ((gr, dr), hr)) in g
                        .chunks_exact_mut(d)
                        .zip(dout.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dh[j] = dr[j] * gv[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2 = dot(&dh, hr);
                        let c = inv_std[r] / d as f64;
                        for j in 0..d {
                            gr[j] += c * (d as f64 * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => {
                let (dq, dk, dv) =
                    attention_backward(val(*q), val(*k), val(*v), probs, dout, *geom);
                acc!(*q, |g| {
                    axpy(1.0, &dq, g);
                });
                acc!(*k, |g| {
                    axpy(1.0, &dk, g);
                });
                acc!(*v, |g| {
                    axpy(1.0, &dv, g);
                });
            }
            Op::Gather(table, ids) => {
                let d = node.value.last_dim();
                acc!(*table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &dout[r * d..(r + 1) * d], &mut g[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::Reshape(x) => {
                acc!(*x, |g| {
                    axpy(1.0, dout, g);
                });
            }
            Op::RowNorm(x) => {
                let xv = val(*x);
                let k = self.nodes[x.0].value.last_dim();
                let norms = node.value.data();
                acc!(*x, |g| {
                    for (r, (gr, xr)) in g.chunks_exact_mut(k).zip(xv.chunks_exact(k)).enumerate() {
                        if norms[r] > 0.0 {
                            axpy(dout[r] / norms[r], xr, gr);
                        }
                    }
                });
            }
        }
    }
}

/// Per-node gradients from one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref()).map(|g| {
            Tensor::new(tape.shape(v).to_vec(), g.clone()).expect("gradient matches value shape")
        })
    }
}

/// `∂loss/∂p` for every parameter in `params`. Parameters that are not bound
/// on the tape, or do not reach the loss, get zero tensors.
pub fn backward(tape: &Tape, loss: Var, params: &ParamSet) -> Result<BTreeMap<String, Tensor>> {
    let grads = tape.gradients(loss)?;
    let mut out = BTreeMap::new();
    for (path, value) in params.iter() {
        let g = tape
            .param_var(path)
            .and_then(|v| grads.wrt(tape, v))
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        out.insert(path.to_string(), g);
    }
    Ok(out)
}

// ---- kernels ---------------------------------------------------------------

/// Four interleaved partial sums, combined as `(s0 + s1) + (s2 + s3)`.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut s = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            s[i] += x[i] * y[i];
        }
    }
    for (i, (x, y)) in ra.iter().zip(rb).enumerate() {
        s[i] += x * y;
    }
    (s[0] + s[1]) + (s[2] + s[3])
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Output index range `[lo, hi)` touched by kernel tap `t`, and the input
/// offset `off` such that output `l` reads input `l + off`.
#[inline]
fn tap_range(t: usize, pad: usize, len: usize) -> (usize, usize, isize) {
    let off = t as isize - pad as isize;
    let lo = (-off).max(0) as usize;
    let hi = ((len as isize) - off).min(len as isize).max(0) as usize;
    (lo.min(hi), hi, off)
}

fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], g: ConvGeom) -> Vec<f64> {
    let ConvGeom {
        batch,
        c_in,
        c_out,
        len,
        width,
    } = g;
    let kdim = c_in * width;
    let mut out = vec![0.0; batch * c_out * len];
    let mut cols = vec![0.0; kdim * len];
    for bb in 0..batch {
        let orow = &mut out[bb * c_out * len..][..c_out * len];
        for (co, row) in orow.chunks_exact_mut(len).enumerate() {
            row.fill(b[co]);
        }
        im2col(&x[bb * c_in * len..][..c_in * len], c_in, len, width, &mut cols);
        gemm(Mat::row(w, kdim), Mat::row(&cols, len), Out::row_acc(orow, len), c_out, kdim, len);
    }
    out
}

/// `cols[(ci·width + t)·len + l] = x[ci·len + l + t − pad]`, zero outside.
fn im2col(x: &[f64], c_in: usize, len: usize, width: usize, cols: &mut [f64]) {
    let pad = (width - 1) / 2;
    for ci in 0..c_in {
        let xrow = &x[ci * len..][..len];
        for t in 0..width {
            let crow = &mut cols[(ci * width + t) * len..][..len];
            let (lo, hi, off) = tap_range(t, pad, len);
            crow[..lo].fill(0.0);
            crow[hi..].fill(0.0);
            crow[lo..hi].copy_from_slice(&xrow[(lo as isize + off) as usize..(hi as isize + off) as usize]);
        }
    }
}

/// Adjoint of `im2col`.
fn col2im_add(cols: &[f64], c_in: usize, len: usize, width: usize, g: &mut [f64]) {
    let pad = (width - 1) / 2;
    for ci in 0..c_in {
        let grow = &mut g[ci * len..][..len];
        for t in 0..width {
            let crow = &cols[(ci * width + t) * len..][..len];
            let (lo, hi, off) = tap_range(t, pad, len);
            axpy(
                1.0,
                &crow[lo..hi],
                &mut grow[(lo as isize + off) as usize..(hi as isize + off) as usize],
            );
        }
    }
}

/// Read-only matrix view: `data[i·rs + j·cs]`.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    /// Row-major with `cols` columns.
    fn row(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: cols, cs: 1 }
    }
    /// Transpose of a row-major matrix with `cols` columns.
    fn col(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: 1, cs: cols }
    }
}

/// Row-major output; `beta` is 0 (overwrite) or 1 (accumulate).
struct Out<'a> {
    data: &'a mut [f64],
    cols: usize,
    beta: f64,
}

impl<'a> Out<'a> {
    fn row(data: &'a mut [f64], cols: usize) -> Self {
        Out { data, cols, beta: 0.0 }
    }
    fn row_acc(data: &'a mut [f64], cols: usize) -> Self {
        Out { data, cols, beta: 1.0 }
    }
}

/// `C (+)= A·B` for `A: m×k`, `B: k×n`.
fn gemm(a: Mat, b: Mat, c: Out, m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |v: Mat, r: usize, cl: usize| (r - 1) * v.rs + (cl - 1) * v.cs + 1;
    assert!(k == 0 || (a.data.len() >= span(a, m, k) && b.data.len() >= span(b, k, n)));
    assert!(c.cols == n && c.data.len() >= m * n);
    // SAFETY: the assertions above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            c.beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], g: AttnGeom) -> (Vec<f64>, Vec<f64>) {
    let AttnGeom { groups, n, heads, d } = g;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; groups * n * d];
    let mut probs = vec![0.0; groups * heads * n * n];
    for gr in 0..groups {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..n {
                let qi = &q[(gr * n + i) * d + col..][..dh];
                let p = &mut probs[((gr * heads + h) * n + i) * n..][..n];
                for j in 0..n {
                    p[j] = scale * dot(qi, &k[(gr * n + j) * d + col..][..dh]);
                }
                softmax_in_place(p);
                let oi = &mut out[(gr * n + i) * d + col..][..dh];
                for j in 0..n {
                    axpy(p[j], &v[(gr * n + j) * d + col..][..dh], oi);
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    g: AttnGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnGeom { groups, n, heads, d } = g;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; n];
    for gr in 0..groups {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..n {
                let p = &probs[((gr * heads + h) * n + i) * n..][..n];
                let doi = &dout[(gr * n + i) * d + col..][..dh];
                for j in 0..n {
                    let vj = (gr * n + j) * d + col;
                    axpy(p[j], doi, &mut dv[vj..vj + dh]);
                    ds[j] = dot(doi, &v[vj..vj + dh]);
                }
                let s = dot(p, &ds);
                let qi = (gr * n + i) * d + col;
                for j in 0..n {
                    let dsc = scale * p[j] * (ds[j] - s);
                    let kj = (gr * n + j) * d + col;
                    axpy(dsc, &k[kj..kj + dh], &mut dq[qi..qi + dh]);
                    axpy(dsc, &q[qi..qi + dh], &mut dk[kj..kj + dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}

use super::{cast, gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range `[start, start + len)` holding one sequence of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    MulScalar(Var, Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Vec<(Var, Vec<usize>)>),
    ConcatCols(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// Ordered record of operations for reverse-mode differentiation.
///
/// Nodes are appended as operations execute, so every node's inputs precede it.
/// A tape built with [`Tape::inference`] records values only; nothing on it is
/// tracked and [`Tape::backward`] refuses to run.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    recording: bool,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let numel: usize = shape.iter().product();
    if cols == 0 {
        (0, 0)
    } else {
        (numel / cols, cols)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            grads: Vec::new(),
        }
    }

    /// A tape that never tracks gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
            grads: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let tracked = self.recording && inputs.iter().any(|v| self.nodes[v.0].tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf; it is tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let tracked = self.recording && t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an untracked constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: data,
            op: Op::Leaf,
            tracked: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Copies a recorded value out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape matches value")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix(x, "transpose")?;
        let src = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(x), &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`c` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        if self.value(bias).len() != c {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f: T = cast(factor);
        let out = self.value(x).iter().map(|&v| v * f).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, f), &[x])
    }

    /// Multiplies row `i` of `x` by the constant `scales[i]`.
    pub fn scale_rows(&mut self, x: Var, scales: Vec<T>) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if scales.len() != r {
            return Err(Error::dim("scale_rows", self.shape(x), &[scales.len()]));
        }
        let out = self
            .value(x)
            .chunks(c.max(1))
            .zip(&scales)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleRows(x, scales), &[x]))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(x), self.shape(s)));
        }
        let f = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| v * f).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Exp(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s: T = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s / cast(n as f64)], Op::Mean(x), &[x])
    }

    /// Column-wise mean of a `[r, c]` matrix, returned as `[1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix(x, "mean_rows")?;
        if r == 0 {
            return Err(Error::Contract("mean_rows of an empty matrix".into()));
        }
        let src = self.value(x);
        let mut out = vec![T::zero(); c];
        for row in src.chunks(c) {
            add_into(&mut out, row);
        }
        let inv: T = cast(1.0 / r as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(vec![1, c], out, Op::MeanRows(x), &[x]))
    }

    /// Softmax along the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x));
        if c == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let src = self.value(x);
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(c) {
            softmax_row(row, &mut out);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), &[x]))
    }

    /// Normalises each vector along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps: T = cast(eps);
        let inv_c: T = cast(1.0 / c as f64);
        let src = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in src.chunks(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, &[x, gamma, beta]))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_value(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if b == 0 {
            return Err(Error::Contract("cross_entropy over an empty batch".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: t,
                bound: v,
            });
        }
        let src = self.value(logits);
        let mut probs = Vec::with_capacity(b * v);
        let mut total = 0.0f64;
        for (row, &t) in src.chunks(v).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[t]).to_f64().unwrap_or(f64::NAN);
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let loss: T = cast(total / b as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    /// Rows `idx` of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(x, "gather_rows")?;
        if let Some(&i) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index {
                what: "gather_rows row",
                index: i,
                bound: r,
            });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Builds a `[rows, c]` matrix placing row `j` of each part at `idx[j]`.
    ///
    /// Target rows must be distinct; rows no part covers are zero.
    pub fn scatter_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, rows: usize) -> Result<Var> {
        let c = match parts.first() {
            Some(&(v, _)) => self.matrix(v, "scatter_rows")?.1,
            None => return Err(Error::Contract("scatter_rows with no parts".into())),
        };
        let mut seen = vec![false; rows];
        for (v, idx) in &parts {
            let (r, pc) = self.matrix(*v, "scatter_rows")?;
            if pc != c || r != idx.len() {
                return Err(Error::dim("scatter_rows", self.shape(*v), &[idx.len(), c]));
            }
            for &i in idx {
                if i >= rows {
                    return Err(Error::Index {
                        what: "scatter_rows target",
                        index: i,
                        bound: rows,
                    });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Contract(format!("scatter_rows target {i} written twice")));
                }
            }
        }
        let mut out = vec![T::zero(); rows * c];
        for (v, idx) in &parts {
            let src = self.value(*v);
            for (j, &i) in idx.iter().enumerate() {
                out[i * c..(i + 1) * c].copy_from_slice(&src[j * c..(j + 1) * c]);
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(vec![rows, c], out, Op::ScatterRows(parts), &inputs))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut offset = 0;
        let mut placed = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, _) = self.matrix(p, "concat_rows")?;
            placed.push((p, (offset..offset + r).collect()));
            offset += r;
        }
        self.scatter_rows(placed, offset)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols with no parts".into()));
        };
        let (r, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix(p, "concat_cols")?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix(x, "l2_normalize_rows")?;
        let src = self.value(x);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(src.len());
        let tiny: T = cast(1e-12);
        for row in src.chunks(c.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Multi-head scaled dot-product attention inside each segment.
    ///
    /// `q`, `k`, `v` are `[rows, d]` projections. Queries in a segment attend to
    /// the keys of that segment whose `valid` flag is set; invalid keys get
    /// zero weight. Scores are scaled by `1/sqrt(d / heads)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        valid: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix(q, "attention")?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        if valid.len() != rows {
            return Err(Error::dim("attention", &[rows], &[valid.len()]));
        }
        let mut covered = 0;
        for s in segments {
            if s.start + s.len > rows {
                return Err(Error::Index {
                    what: "attention segment end",
                    index: s.start + s.len,
                    bound: rows,
                });
            }
            if !valid[s.start..s.start + s.len].iter().any(|&f| f) {
                return Err(Error::Contract("attention segment with no valid position".into()));
            }
            covered += s.len;
        }
        if covered > rows {
            return Err(Error::Contract("attention segments overlap".into()));
        }
        let dh = d / heads;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); rows * d];
        let mut probs = Vec::new();
        for s in segments {
            let base = s.start * d;
            let span = s.len * d;
            let p = attention_weights(
                &qv[base..base + span],
                &kv[base..base + span],
                s.len,
                d,
                &valid[s.start..s.start + s.len],
                heads,
            )?;
            for h in 0..heads {
                let ph = &p[h * s.len * s.len..(h + 1) * s.len * s.len];
                for i in 0..s.len {
                    let orow = &mut out[base + i * d + h * dh..base + i * d + (h + 1) * dh];
                    for j in 0..s.len {
                        let w = ph[i * s.len + j];
                        if w == T::zero() {
                            continue;
                        }
                        let vrow = &vv[base + j * d + h * dh..base + j * d + (h + 1) * dh];
                        orow.iter_mut().zip(vrow).for_each(|(o, &x)| *o += w * x);
                    }
                }
            }
            probs.extend(p);
        }
        let op = Op::Attention {
            q,
            k,
            v,
            segments: segments.to_vec(),
            heads,
            probs,
        };
        Ok(self.push(vec![rows, d], out, op, &[q, k, v]))
    }

    /// Populates gradients of the scalar `loss` for every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm(m, n, k, g, false, bv, true, ga, true);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    let c = gb.len();
                    for row in g.chunks(c.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *f);
                }
            }
            Op::ScaleRows(x, scales) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let c = gx.len() / scales.len().max(1);
                    for ((drow, grow), &s) in gx.chunks_mut(c.max(1)).zip(g.chunks(c.max(1))).zip(scales) {
                        drow.iter_mut().zip(grow).for_each(|(d, &gi)| *d += gi * s);
                    }
                }
            }
            Op::MulScalar(x, s) => {
                let f = nodes[s.0].value[0];
                let xv = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * f);
                }
                if let Some(gs) = slot(nodes, grads, *s) {
                    gs[0] += g.iter().zip(xv).map(|(&gi, &v)| gi * v).sum::<T>();
                }
            }
            Op::Exp(x) => {
                let y = &node.value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let f = g[0] / cast(gx.len().max(1) as f64);
                    gx.iter_mut().for_each(|d| *d += f);
                }
            }
            Op::MeanRows(x) => {
                let r = nodes[x.0].shape[0];
                let inv: T = cast(1.0 / r as f64);
                if let Some(gx) = slot(nodes, grads, *x) {
                    let c = g.len();
                    for drow in gx.chunks_mut(c) {
                        drow.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * inv);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = *node.shape.last().unwrap();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((drow, grow), yrow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
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
                let c = *node.shape.last().unwrap();
                let gv = &nodes[gamma.0].value;
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for grow in g.chunks(c) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let inv_c: T = cast(1.0 / c as f64);
                    let mut dh = vec![T::zero(); c];
                    for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_c;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                        let drow = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_derivative(v);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].shape[1];
                let f = g[0] / cast(targets.len() as f64);
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let drow = &mut gl[r * v..(r + 1) * v];
                        let prow = &probs[r * v..(r + 1) * v];
                        for j in 0..v {
                            drow[j] += f * prow[j];
                        }
                        drow[t] -= f;
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let c = nodes[x.0].shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (j, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[j * c..(j + 1) * c]);
                    }
                }
            }
            Op::ScatterRows(parts) => {
                let c = node.shape[1];
                for (v, idx) in parts {
                    if let Some(gv) = slot(nodes, grads, *v) {
                        for (j, &i) in idx.iter().enumerate() {
                            add_into(&mut gv[j * c..(j + 1) * c], &g[i * c..(i + 1) * c]);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for i in 0..r {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = node.shape[1];
                let y = &node.value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let yrow = &y[r * c..(r + 1) * c];
                        let grow = &g[r * c..(r + 1) * c];
                        let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (grow[j] - yrow[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, segments, *heads, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.nodes[q.0].shape[1];
        let dh = d / heads;
        let scale: T = cast(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let numel = qv.len();
        let mut dq = vec![T::zero(); numel];
        let mut dk = vec![T::zero(); numel];
        let mut dv = vec![T::zero(); numel];
        let mut poff = 0;
        for s in segments {
            let l = s.len;
            let base = s.start * d;
            let mut dp = vec![T::zero(); l];
            for h in 0..heads {
                let ph = &probs[poff + h * l * l..poff + (h + 1) * l * l];
                let col = h * dh;
                for i in 0..l {
                    let gi = &g[base + i * d + col..base + i * d + col + dh];
                    let prow = &ph[i * l..(i + 1) * l];
                    for j in 0..l {
                        let vj = &vv[base + j * d + col..base + j * d + col + dh];
                        dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                        if prow[j] != T::zero() {
                            let dvj = &mut dv[base + j * d + col..base + j * d + col + dh];
                            dvj.iter_mut().zip(gi).for_each(|(o, &x)| *o += prow[j] * x);
                        }
                    }
                    let dot: T = prow.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    let qi_off = base + i * d + col;
                    for j in 0..l {
                        if prow[j] == T::zero() {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let kj_off = base + j * d + col;
                        for c in 0..dh {
                            dq[qi_off + c] += ds * kv[kj_off + c];
                            dk[kj_off + c] += ds * qv[qi_off + c];
                        }
                    }
                }
            }
            poff += heads * l * l;
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].tracked {
                let slot = grads[var.0].get_or_insert_with(|| vec![T::zero(); numel]);
                add_into(slot, &buf);
            }
        }
    }
}

fn slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].tracked {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn softmax_row<T: Real>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let start = out.len();
    let mut total = T::zero();
    for &x in row {
        let e = (x - max).exp();
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|v| *v /= total);
}

fn gelu_value<T: Real>(x: T) -> T {
    let half: T = cast(0.5);
    let inv_sqrt2: T = cast(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let half: T = cast(0.5);
    let inv_sqrt2: T = cast(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi: T = cast(0.398_942_280_401_432_7);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}

/// Attention weights of one sequence, laid out `[heads, len, len]`.
///
/// `q` and `k` hold `len` rows of width `d`. Each query row is a softmax over
/// the valid keys; invalid keys get exactly zero weight.
pub fn attention_weights<T: Real>(
    q: &[T],
    k: &[T],
    len: usize,
    d: usize,
    valid: &[bool],
    heads: usize,
) -> Result<Vec<T>> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    if !valid.iter().any(|&f| f) {
        return Err(Error::Contract("attention with no valid key".into()));
    }
    let dh = d / heads;
    let scale: T = cast(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); heads * len * len];
    let mut scores = vec![T::zero(); len];
    for h in 0..heads {
        let col = h * dh;
        for i in 0..len {
            let qi = &q[i * d + col..i * d + col + dh];
            let mut max = T::neg_infinity();
            for j in 0..len {
                if !valid[j] {
                    continue;
                }
                let kj = &k[j * d + col..j * d + col + dh];
                let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let row = &mut out[(h * len + i) * len..(h * len + i + 1) * len];
            let mut total = T::zero();
            for j in 0..len {
                if valid[j] {
                    let e = (scores[j] - max).exp();
                    row[j] = e;
                    total += e;
                }
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(out)
}

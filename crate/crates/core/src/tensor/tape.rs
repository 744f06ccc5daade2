use super::{gemm, is_masked, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Option<Var>,
        inv_rms: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var),
    RotatePairs {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended in evaluation order, so
/// the record is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Like [`Gradients::get`] but returns zeros when no gradient arrived.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .take()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensors have rank >= 1")
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Records a leaf. Gradients are only tracked for leaves created with
    /// `requires_grad` and for values derived from them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner extents {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the shape of a linear layer with `[out, in]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("inner extents {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
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

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        let n = last_dim(self.value(x));
        if self.value(row).numel() != n {
            return Err(Error::dim(
                name,
                format!(
                    "row of {} elements cannot broadcast over last dim {n}",
                    self.value(row).numel()
                ),
            ));
        }
        let r = self.value(row).data();
        Ok(self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| f(a, b)))
            .collect())
    }

    /// Adds a vector (any shape with `n` elements) to every length-`n` row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, row, |a, b| a + b)?;
        let rg = self.rg(x) || self.rg(row);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, row), rg))
    }

    /// Multiplies every length-`n` row of `x` elementwise by a vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        let rg = self.rg(x) || self.rg(row);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, value: f64) -> Var {
        let out = self.value(x).map(|v| v + value);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    /// Root-mean-square normalisation over the last dimension:
    /// `x / sqrt(mean(x²) + eps) · gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>, eps: f64) -> Result<Var> {
        let n = last_dim(self.value(x));
        if let Some(g) = gain {
            if self.value(g).numel() != n {
                return Err(Error::dim(
                    "rms_norm",
                    format!("gain has {} elements, last dim is {n}", self.value(g).numel()),
                ));
            }
        }
        let xv = self.value(x);
        let mut inv_rms = Vec::with_capacity(xv.numel() / n);
        let mut out = Vec::with_capacity(xv.numel());
        for chunk in xv.data().chunks(n) {
            let ms = chunk.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            match gain {
                Some(g) => {
                    let gv = self.nodes[g.0].value.data();
                    out.extend(chunk.iter().zip(gv).map(|(v, g)| v * inv * g));
                }
                None => out.extend(chunk.iter().map(|v| v * inv)),
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::RmsNorm { x, gain, inv_rms },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Concatenates along `axis`. All other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("span {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Row slice of a matrix, shorthand for `slice(x, 0, ..)`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.slice(x, 0, start, len)
    }

    /// Softmax over the last dimension with an optional additive mask.
    ///
    /// The mask holds 0 or [`super::NEG_SENTINEL`] entries (true −∞ is also
    /// accepted) and broadcasts over leading rows: its element count must be
    /// the row length, or a divisor of the total that is a multiple of it.
    /// Masked outputs are exactly zero. A row with every entry masked yields
    /// all zeros and logs a warning.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let xv = self.value(x);
        let n = last_dim(xv);
        if let Some(m) = mask {
            let ok = m.numel() % n == 0 && xv.numel() % m.numel() == 0 && last_dim(m) == n;
            if !ok {
                return Err(Error::dim(
                    "softmax",
                    format!("mask {:?} does not broadcast over {:?}", m.shape(), xv.shape()),
                ));
            }
        }
        let mut out = vec![0.0; xv.numel()];
        let mut fully_masked = 0usize;
        for (r, (row, orow)) in xv.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mrow = mask.map(|m| {
                let rows = m.numel() / n;
                let mr = r % rows;
                &m.data()[mr * n..(mr + 1) * n]
            });
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                match mrow {
                    Some(mr) if is_masked(mr[j]) => {}
                    Some(mr) => max = max.max(row[j] + mr[j]),
                    None => max = max.max(row[j]),
                }
            }
            if max == f64::NEG_INFINITY {
                fully_masked += 1;
                continue;
            }
            let mut sum = 0.0;
            for j in 0..n {
                let e = match mrow {
                    Some(mr) if is_masked(mr[j]) => 0.0,
                    Some(mr) => (row[j] + mr[j] - max).exp(),
                    None => (row[j] - max).exp(),
                };
                orow[j] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            orow.iter_mut().for_each(|e| *e *= inv);
        }
        if fully_masked > 0 {
            log::warn!("softmax: {fully_masked} fully-masked row(s) set to zero");
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg))
    }

    /// Rotates consecutive pairs `(x[2p], x[2p+1])` of every row by
    /// `angles[row][p]`. `angles` must be `[rows, cols/2]`.
    pub fn rotate_pairs(&mut self, x: Var, angles: &Tensor) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if cols % 2 != 0 || angles.shape() != [rows, cols / 2] {
            return Err(Error::dim(
                "rotate_pairs",
                format!("angles {:?} for input [{rows}, {cols}]", angles.shape()),
            ));
        }
        let cos: Vec<f64> = angles.data().iter().map(|a| a.cos()).collect();
        let sin: Vec<f64> = angles.data().iter().map(|a| a.sin()).collect();
        let out = rotate(self.value(x).data(), &cos, &sin, false);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::RotatePairs { x, cos, sin },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean squared error between two same-shape values.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar `loss`. Nodes are visited in exact reverse
    /// recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let buf = self.grad_buf(grads, *a);
                    gemm(m, n, k, g, false, self.value(*b).data(), true, buf, true);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let buf = self.grad_buf(grads, *b);
                    gemm(k, m, n, self.value(*a).data(), true, g, false, buf, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if self.rg(*a) {
                    // dA = dC · B
                    let buf = self.grad_buf(grads, *a);
                    gemm(m, n, k, g, false, self.value(*b).data(), false, buf, true);
                }
                if self.rg(*b) {
                    // dB = dCᵀ · A
                    let buf = self.grad_buf(grads, *b);
                    gemm(n, m, k, g, true, self.value(*a).data(), false, buf, true);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |i| g[i]);
                self.acc(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |i| g[i]);
                self.acc(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |i| g[i] * bv[i]);
                self.acc(grads, *b, |i| g[i] * av[i]);
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, |i| g[i]);
                if self.rg(*row) {
                    let n = self.value(*row).numel();
                    let buf = self.grad_buf(grads, *row);
                    for chunk in g.chunks(n) {
                        buf.iter_mut().zip(chunk).for_each(|(b, c)| *b += c);
                    }
                }
            }
            Op::MulRow(x, row) => {
                let n = self.value(*row).numel();
                let rv = self.value(*row).data();
                self.acc(grads, *x, |i| g[i] * rv[i % n]);
                if self.rg(*row) {
                    let xv = self.value(*x).data();
                    let buf = self.grad_buf(grads, *row);
                    for (gc, xc) in g.chunks(n).zip(xv.chunks(n)) {
                        for j in 0..n {
                            buf[j] += gc[j] * xc[j];
                        }
                    }
                }
            }
            Op::Scale(x, f) => self.acc(grads, *x, |i| g[i] * f),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |i| g[i]),
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |i| {
                    let s = 1.0 / (1.0 + (-xv[i]).exp());
                    g[i] * s * (1.0 + xv[i] * (1.0 - s))
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let n = last_dim(self.value(*x));
                let gv = gain.map(|gn| self.value(gn).data());
                if self.rg(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for (r, inv) in inv_rms.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let xs = &xv[span.clone()];
                        let gs = &g[span.clone()];
                        // dxhat = dy · gain; dx = (dxhat − xhat·mean(dxhat·xhat)) · inv
                        let dxhat: Vec<f64> = match gv {
                            Some(gain) => gs.iter().zip(gain).map(|(a, b)| a * b).collect(),
                            None => gs.to_vec(),
                        };
                        let dot = dxhat
                            .iter()
                            .zip(xs)
                            .map(|(d, xi)| d * xi * inv)
                            .sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = (dxhat[j] - xs[j] * inv * dot) * inv;
                        }
                    }
                    self.acc(grads, *x, |i| dx[i]);
                }
                if let Some(gn) = gain {
                    if self.rg(*gn) {
                        let buf = self.grad_buf(grads, *gn);
                        for (r, inv) in inv_rms.iter().enumerate() {
                            for j in 0..n {
                                buf[j] += g[r * n + j] * xv[r * n + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                // output is c×r; d_in[i][j] = g[j][i]
                self.acc(grads, *x, |idx| {
                    let (i, j) = (idx / c, idx % c);
                    g[j * r + i]
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.value(v).shape()[*axis] * inner;
                    if self.rg(v) {
                        let buf = self.grad_buf(grads, v);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            buf[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(b, s)| *b += s);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.rg(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let len = out.shape()[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let buf = self.grad_buf(grads, *x);
                    for o in 0..outer {
                        let base = (o * shape[*axis] + start) * inner;
                        buf[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(b, s)| *b += s);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = last_dim(out);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, |i| dx[i]);
            }
            Op::RotatePairs { x, cos, sin } => {
                let dx = rotate(g, cos, sin, true);
                self.acc(grads, *x, |i| dx[i]);
            }
            Op::Sum(x) => self.acc(grads, *x, |_| g[0]),
            Op::Mean(x) => {
                let inv = 1.0 / self.value(*x).numel() as f64;
                self.acc(grads, *x, |_| g[0] * inv);
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.rg(v) {
            return;
        }
        let buf = self.grad_buf(grads, v);
        buf.iter_mut().enumerate().for_each(|(i, b)| *b += f(i));
    }
}

fn rotate(x: &[f64], cos: &[f64], sin: &[f64], inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let sign = if inverse { -1.0 } else { 1.0 };
    for (p, (c, s)) in cos.iter().zip(sin).enumerate() {
        let s = s * sign;
        let (a, b) = (x[2 * p], x[2 * p + 1]);
        out[2 * p] = a * c - b * s;
        out[2 * p + 1] = a * s + b * c;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, NEG_SENTINEL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 7.0]]);
        let i = tape.constant(Tensor::eye(2));
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);

        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(Tensor::from_rows(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(tape.add(a, b), Ok(_)));
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let w = rand_tensor(&mut rng, &[3, 2]);
        let bb = b.clone();
        let ww = w.clone();
        let err = grad_check(
            |t, x| {
                let bv = t.constant(bb.clone());
                let wv = t.constant(ww.clone());
                let c = t.matmul(x, bv)?;
                let p = t.mul(c, wv)?;
                Ok(t.sum(p))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "dA rel err {err}");
        let aa = a.clone();
        let err = grad_check(
            |t, x| {
                let av = t.constant(aa.clone());
                let wv = t.constant(w.clone());
                let c = t.matmul(av, x)?;
                let p = t.mul(c, wv)?;
                Ok(t.sum(p))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "dB rel err {err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x, None).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(Tensor::new(vec![2], vec![5.0, 5.0]).unwrap());
        let m = Tensor::new(vec![2], vec![0.0, NEG_SENTINEL]).unwrap();
        let y = tape.softmax(x, Some(&m)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_masked_row_equals_softmax_over_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut mask = vec![0.0; 6];
        mask[1] = NEG_SENTINEL;
        mask[4] = f64::NEG_INFINITY;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 6], logits.clone()).unwrap());
        let y = tape
            .softmax(x, Some(&Tensor::new(vec![1, 6], mask).unwrap()))
            .unwrap();
        // direct exp/sum over the surviving four logits
        let keep = [0usize, 2, 3, 5];
        let z: f64 = keep.iter().map(|&j| logits[j].exp()).sum();
        let got = tape.value(y).data();
        assert_eq!(got[1], 0.0);
        assert_eq!(got[4], 0.0);
        for &j in &keep {
            assert!((got[j] - logits[j].exp() / z).abs() < 1e-14);
        }
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let m = Tensor::from_rows(&[&[NEG_SENTINEL, NEG_SENTINEL], &[0.0, 0.0]]);
        let y = tape.softmax(x, Some(&m)).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rms_norm_of_constant_vector_is_sign() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 4], -2.5));
        let y = tape.rms_norm(x, None, 0.0).unwrap();
        for v in tape.value(y).data() {
            assert!((v + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_axis0() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::scalar(3.0));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn silu_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 5]);
        let err = grad_check(
            |t, v| {
                let s = t.silu(v);
                let sq = t.mul(s, s)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap().get(v).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(v), Err(Error::Contract { .. })));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2, 2]), false);
        let b = tape.leaf(Tensor::ones(&[2, 2]), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }
}

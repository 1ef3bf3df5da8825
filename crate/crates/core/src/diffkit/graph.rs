//! Tape-based reverse-mode differentiation over dense vectors and matrices.
//!
//! Every node owns a contiguous slice of one flat value buffer. Nodes are
//! appended in evaluation order, so the tape is already topologically sorted
//! and the backward pass simply walks it in reverse.

use super::kernels::{dot, matmul_acc, matmul_nt_acc};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// `W X + b`, `W` row-major `rows x cols`, `X` feature-major `cols x batch`.
    Affine { w: Var, x: Var, b: Option<Var>, rows: usize, cols: usize, batch: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a + s * b`
    AddScaled(Var, Var, f64),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    /// `(1 - z) * a + z * b`
    Lerp { z: Var, a: Var, b: Var },
    Slice { src: Var, start: usize },
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    off: usize,
    len: usize,
}

/// A computation tape. Reuse it across many forward/backward passes via
/// [`Graph::reset`]; buffers keep their capacity.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    grads: Vec<f64>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of stored values across all nodes.
    pub fn value_len(&self) -> usize {
        self.vals.len()
    }

    fn push(&mut self, op: Op, len: usize) -> (Var, usize) {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        self.nodes.push(Node { op, off, len });
        (Var(self.nodes.len() - 1), off)
    }

    fn span(&self, v: Var) -> (usize, usize) {
        let n = self.nodes[v.0];
        (n.off, n.len)
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].len
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let (o, l) = self.span(v);
        &self.vals[o..o + l]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        let (o, l) = self.span(v);
        &self.grads[o..o + l]
    }

    /// Leaf node holding a copy of `values`. Parameters and inputs alike.
    pub fn leaf(&mut self, values: &[f64]) -> Var {
        let (v, off) = self.push(Op::Leaf, values.len());
        self.vals[off..off + values.len()].copy_from_slice(values);
        v
    }

    fn same_dim(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da != db {
            return Err(Error::Shape(format!("{what}: {da} vs {db}")));
        }
        Ok(da)
    }

    /// `W x + b` with `W` row-major `rows x cols`. When `x` holds `batch`
    /// stacked columns (feature-major, entry `c * batch + j`), every column is
    /// transformed and the bias broadcasts across them.
    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>, rows: usize) -> Result<Var> {
        let dw = self.dim(w);
        if rows == 0 || dw % rows != 0 || dw == 0 {
            return Err(Error::Shape(format!("affine: weight has {dw} entries, not a multiple of {rows} rows")));
        }
        let cols = dw / rows;
        let dx = self.dim(x);
        if dx == 0 || dx % cols != 0 {
            return Err(Error::Shape(format!("affine: input has {dx} entries, expected a multiple of {cols}")));
        }
        let batch = dx / cols;
        if let Some(b) = b {
            if self.dim(b) != rows {
                return Err(Error::Shape(format!("affine: bias {} vs rows {rows}", self.dim(b))));
            }
        }
        let (wo, _) = self.span(w);
        let (xo, _) = self.span(x);
        let bo = b.map(|b| self.span(b).0);
        let (out, off) = self.push(Op::Affine { w, x, b, rows, cols, batch }, rows * batch);
        let (before, after) = self.vals.split_at_mut(off);
        let xs = &before[xo..xo + cols * batch];
        if batch == 1 {
            for (r, o) in after.iter_mut().enumerate() {
                let row = &before[wo + r * cols..wo + (r + 1) * cols];
                *o = dot(row, xs) + bo.map_or(0.0, |bo| before[bo + r]);
            }
        } else {
            let w = &before[wo..wo + rows * cols];
            for (r, o) in after.chunks_exact_mut(batch).enumerate() {
                o.fill(bo.map_or(0.0, |bo| before[bo + r]));
            }
            matmul_acc(after, w, xs, rows, cols, batch);
        }
        Ok(out)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Var> {
        let n = self.same_dim(a, b, what)?;
        let (ao, _) = self.span(a);
        let (bo, _) = self.span(b);
        let (out, off) = self.push(op, n);
        let (before, after) = self.vals.split_at_mut(off);
        let (av, bv) = (&before[ao..ao + n], &before[bo..bo + n]);
        for ((o, &x), &y) in after.iter_mut().zip(av).zip(bv) {
            *o = f(x, y);
        }
        Ok(out)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let n = self.dim(a);
        let (ao, _) = self.span(a);
        let (out, off) = self.push(op, n);
        let (before, after) = self.vals.split_at_mut(off);
        for (o, &x) in after.iter_mut().zip(&before[ao..ao + n]) {
            *o = f(x);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y, "div")
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, s: f64) -> Result<Var> {
        self.binary(Op::AddScaled(a, b, s), a, b, |x, y| x + s * y, "add_scaled")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(Op::Scale(a, s), a, |x| s * x)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::AddConst(a), a, |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Op::Ln(a), a, f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    pub fn lerp(&mut self, z: Var, a: Var, b: Var) -> Result<Var> {
        let n = self.same_dim(z, a, "lerp")?;
        self.same_dim(a, b, "lerp")?;
        let (out, off) = self.push(Op::Lerp { z, a, b }, n);
        let (zo, _) = self.span(z);
        let (ao, _) = self.span(a);
        let (bo, _) = self.span(b);
        for i in 0..n {
            let zi = self.vals[zo + i];
            self.vals[off + i] = (1.0 - zi) * self.vals[ao + i] + zi * self.vals[bo + i];
        }
        Ok(out)
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.dim(src) {
            return Err(Error::Shape(format!(
                "slice {start}..{} of length {}",
                start + len,
                self.dim(src)
            )));
        }
        let (out, off) = self.push(Op::Slice { src, start }, len);
        let (so, _) = self.span(src);
        self.vals.copy_within(so + start..so + start + len, off);
        Ok(out)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.dim(a), self.dim(b));
        let (out, off) = self.push(Op::Concat(a, b), da + db);
        let (ao, _) = self.span(a);
        let (bo, _) = self.span(b);
        self.vals.copy_within(ao..ao + da, off);
        self.vals.copy_within(bo..bo + db, off + da);
        out
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let (out, off) = self.push(Op::Sum(a), 1);
        self.vals[off] = s;
        out
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.dim(a).max(1) as f64;
        let s: f64 = self.value(a).iter().sum::<f64>() / n;
        let (out, off) = self.push(Op::Mean(a), 1);
        self.vals[off] = s;
        out
    }

    /// Sum of several scalars (or equal-length vectors) into one node chain.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Usage("add_all of no terms".into()))?;
        let mut acc = *first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass seeded with `d loss / d loss = 1`. The tape must be
    /// [`reset`](Graph::reset) before a second call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward called twice without reset".into()));
        }
        if self.dim(loss) != 1 {
            return Err(Error::Usage(format!(
                "loss must be scalar, node has {} entries",
                self.dim(loss)
            )));
        }
        self.backward_done = true;
        let Graph { nodes, vals, grads, .. } = self;
        grads.clear();
        grads.resize(vals.len(), 0.0);
        grads[nodes[loss.0].off] = 1.0;
        let span = |v: Var| {
            let n = nodes[v.0];
            (n.off, n.len)
        };

        for idx in (0..=loss.0).rev() {
            let node = nodes[idx];
            let (o, n) = (node.off, node.len);
            // Inputs always live at lower offsets than the node itself.
            let (before, after) = grads.split_at_mut(o);
            let gout = &after[..n];
            if gout.iter().all(|&g| g == 0.0) {
                continue;
            }
            let out = &vals[o..o + n];
            match node.op {
                Op::Leaf => {}
                Op::Affine { w, x, b, rows, cols, batch } => {
                    let (wo, _) = span(w);
                    let (xo, _) = span(x);
                    let xv = &vals[xo..xo + cols * batch];
                    let mut gx = vec![0.0; cols * batch];
                    if batch == 1 {
                        for (r, &g) in gout.iter().enumerate().take(rows) {
                            if g == 0.0 {
                                continue;
                            }
                            let gw = &mut before[wo + r * cols..wo + (r + 1) * cols];
                            for (gw, &xc) in gw.iter_mut().zip(xv) {
                                *gw += g * xc;
                            }
                            let wrow = &vals[wo + r * cols..wo + (r + 1) * cols];
                            for (gx, &wc) in gx.iter_mut().zip(wrow) {
                                *gx += g * wc;
                            }
                        }
                    } else {
                        let w = &vals[wo..wo + rows * cols];
                        let wt: Vec<f64> = (0..rows * cols).map(|i| w[(i % rows) * cols + i / rows]).collect();
                        matmul_nt_acc(&mut before[wo..wo + rows * cols], gout, xv, rows, cols, batch);
                        matmul_acc(&mut gx, &wt, gout, cols, rows, batch);
                    }
                    add_into(&mut before[xo..xo + cols * batch], &gx);
                    if let Some(b) = b {
                        let (bo, _) = span(b);
                        for (gb, gr) in before[bo..bo + rows].iter_mut().zip(gout.chunks_exact(batch)) {
                            *gb += gr.iter().sum::<f64>();
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(before, span(a)), gout);
                    add_into(slot(before, span(b)), gout);
                }
                Op::Sub(a, b) => {
                    add_into(slot(before, span(a)), gout);
                    axpy_into(slot(before, span(b)), gout, -1.0);
                }
                Op::AddScaled(a, b, s) => {
                    add_into(slot(before, span(a)), gout);
                    axpy_into(slot(before, span(b)), gout, s);
                }
                Op::Mul(a, b) => {
                    let (sa, sb) = (span(a), span(b));
                    let (av, bv) = (&vals[sa.0..sa.0 + n], &vals[sb.0..sb.0 + n]);
                    zip3(slot(before, sa), gout, bv, |g, y| g * y);
                    zip3(slot(before, sb), gout, av, |g, x| g * x);
                }
                Op::Div(a, b) => {
                    let (sa, sb) = (span(a), span(b));
                    let bv = &vals[sb.0..sb.0 + n];
                    zip3(slot(before, sa), gout, bv, |g, d| g / d);
                    // d(a/b)/db = -(a/b)/b
                    let ga = slot(before, sb);
                    for i in 0..n {
                        ga[i] -= gout[i] * out[i] / bv[i];
                    }
                }
                Op::Scale(a, s) => axpy_into(slot(before, span(a)), gout, s),
                Op::AddConst(a) => add_into(slot(before, span(a)), gout),
                Op::Sigmoid(a) => zip3(slot(before, span(a)), gout, out, |g, y| g * y * (1.0 - y)),
                Op::Tanh(a) => zip3(slot(before, span(a)), gout, out, |g, y| g * (1.0 - y * y)),
                Op::Exp(a) => zip3(slot(before, span(a)), gout, out, |g, y| g * y),
                Op::Ln(a) => {
                    let sa = span(a);
                    zip3(slot(before, sa), gout, &vals[sa.0..sa.0 + n], |g, x| g / x)
                }
                Op::Square(a) => {
                    let sa = span(a);
                    zip3(slot(before, sa), gout, &vals[sa.0..sa.0 + n], |g, x| 2.0 * x * g)
                }
                Op::Lerp { z, a, b } => {
                    let (sz, sa, sb) = (span(z), span(a), span(b));
                    let zv = &vals[sz.0..sz.0 + n];
                    let av = &vals[sa.0..sa.0 + n];
                    let bv = &vals[sb.0..sb.0 + n];
                    let gz = slot(before, sz);
                    for i in 0..n {
                        gz[i] += gout[i] * (bv[i] - av[i]);
                    }
                    zip3(slot(before, sa), gout, zv, |g, z| g * (1.0 - z));
                    zip3(slot(before, sb), gout, zv, |g, z| g * z);
                }
                Op::Slice { src, start } => {
                    let (so, _) = span(src);
                    add_into(&mut before[so + start..so + start + n], gout);
                }
                Op::Concat(a, b) => {
                    let (sa, sb) = (span(a), span(b));
                    add_into(slot(before, sa), &gout[..sa.1]);
                    add_into(slot(before, sb), &gout[sa.1..]);
                }
                Op::Sum(a) => {
                    let g = gout[0];
                    slot(before, span(a)).iter_mut().for_each(|x| *x += g);
                }
                Op::Mean(a) => {
                    let sa = span(a);
                    let g = gout[0] / sa.1.max(1) as f64;
                    slot(before, sa).iter_mut().for_each(|x| *x += g);
                }
            }
        }
        Ok(())
    }
}

fn slot(buf: &mut [f64], (off, len): (usize, usize)) -> &mut [f64] {
    &mut buf[off..off + len]
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axpy_into(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// `dst[i] += f(gout[i], aux[i])`
fn zip3(dst: &mut [f64], gout: &[f64], aux: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &g), &x) in dst.iter_mut().zip(gout).zip(aux) {
        *d += f(g, x);
    }
}

/// `tanh` through a single `exp`; absolute error stays within a couple of ulps
/// and it is several times cheaper than the libm routine.
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

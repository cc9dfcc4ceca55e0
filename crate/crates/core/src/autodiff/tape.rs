use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
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
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Slice { a: Var, start: usize, len: usize },
    Concat(Vec<Var>),
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    RepeatRows { a: Var, n: usize },
    Softmax(Var),
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Embedding { table: Var, indices: Vec<usize> },
    MeanSquare(Var),
    SumSquare(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward evaluation.
///
/// Nodes are pushed in evaluation order so every node's inputs precede it;
/// [`Tape::backward`] walks the list once in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` is not on any path
    /// to the output.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    let d = t.last_dim();
    (if d == 0 { 0 } else { t.len() / d }, d)
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

    /// Leaf that gradients can be taken with respect to.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `a[..., k] x b[k, n] -> [..., n]`; leading axes of `a` act as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 1 || bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k) = rows_of(av);
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(shape, out)?, rg))
    }

    /// Batched `a[bt, m, k] x b[bt, k, n]`, or `b[bt, n, k]` transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(self.shape_err("batch_matmul", a, b));
        }
        let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if kb != k {
            return Err(self.shape_err("batch_matmul", a, b));
        }
        let mut out = vec![0.0; bt * m * n];
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Op::BatchMatMul { a, b, trans_b },
            Tensor::new(vec![bt, m, n], out)?,
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !suffix_broadcast(av.shape(), bv.shape()) || bv.is_empty() && !av.is_empty() {
            return Err(self.shape_err(name, a, b));
        }
        let inner = bv.len().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % inner]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, c), value, rg)
    }

    fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (rows, d) = rows_of(av);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data).expect("slice shape");
        let rg = self.rg(&[a]);
        self.push(Op::Slice { a, start, len }, value, rg)
    }

    /// Splits the last axis into consecutive pieces of the given sizes.
    pub fn split_last(&mut self, a: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let d = self.value(a).last_dim();
        if sizes.iter().sum::<usize>() != d || self.value(a).rank() == 0 {
            return Err(Error::Shape {
                op: "split_last",
                lhs: self.shape(a).to_vec(),
                rhs: sizes.to_vec(),
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice_last(a, start, len));
            start += len;
        }
        Ok(out)
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let lead = &self.shape(first)[..self.shape(first).len().saturating_sub(1)];
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(self.shape_err("concat_last", first, p));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::new(shape, data)?, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let rank = av.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: av.shape().to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let data = permute_data(av.data(), av.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| av.shape()[p]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            Tensor::new(shape, data)?,
            rg,
        ))
    }

    /// `[b, d] -> [b, n, d]`, copying each row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::Shape {
                op: "repeat_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let (b, d) = (av.shape()[0], av.shape()[1]);
        let mut data = Vec::with_capacity(b * n * d);
        for r in 0..b {
            for _ in 0..n {
                data.extend_from_slice(&av.data()[r * d..(r + 1) * d]);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::RepeatRows { a, n }, Tensor::new(vec![b, n, d], data)?, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, d) = rows_of(av);
        let mut data = av.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * d..(r + 1) * d];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("softmax shape");
        let rg = self.rg(&[a]);
        self.push(Op::Softmax(a), value, rg)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance
    /// (denominator `sqrt(var + 1e-5)`); affine terms are applied separately.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, d) = rows_of(av);
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("layer_norm shape");
        let rg = self.rg(&[a]);
        self.push(Op::LayerNorm { a, inv_std }, value, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let rg = self.rg(&[a]);
        self.push(Op::Gelu(a), value, rg)
    }

    /// Gathers rows of a `[v, d]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || indices.iter().any(|&i| i >= tv.shape()[0]) {
            return Err(Error::Shape {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: vec![indices.iter().copied().max().unwrap_or(0)],
            });
        }
        let d = tv.shape()[1];
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn mean_square(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len().max(1) as f64;
        let v = av.data().iter().map(|x| x * x).sum::<f64>() / n;
        let rg = self.rg(&[a]);
        self.push(Op::MeanSquare(a), Tensor::scalar(v), rg)
    }

    pub fn sum_square(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().map(|x| x * x).sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Op::SumSquare(a), Tensor::scalar(v), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(v), rg)
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::NonScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes[..=output.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, $v, self.value($v).len())
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = rows_of(av);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let ga = slot!(*a);
                    gemm(m, n, k, g, false, bv.data(), true, ga, true);
                }
                if self.wants(*b) {
                    let gb = slot!(*b);
                    gemm(k, m, n, av.data(), true, g, false, gb, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if self.wants(*a) {
                    let ga = slot!(*a);
                    for i in 0..bt {
                        // ga = g * op(b)^T
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if self.wants(*b) {
                    let gb = slot!(*b);
                    for i in 0..bt {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // b is [n, k]: gb = g^T a
                            gemm(n, m, k, gi, true, ai, false, out, true);
                        } else {
                            // b is [k, n]: gb = a^T g
                            gemm(k, m, n, ai, true, gi, false, out, true);
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    let ga = slot!(*a);
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.wants(*b) {
                    let gb = slot!(*b);
                    let inner = gb.len();
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % inner] += sign * y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let inner = bv.len();
                if self.wants(*a) {
                    let ga = slot!(*a);
                    for (i, &y) in g.iter().enumerate() {
                        ga[i] += y * bv.data()[i % inner];
                    }
                }
                if self.wants(*b) {
                    let gb = slot!(*b);
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % inner] += y * av.data()[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let inner = bv.len();
                if self.wants(*a) {
                    let ga = slot!(*a);
                    for (i, &y) in g.iter().enumerate() {
                        ga[i] += y / bv.data()[i % inner];
                    }
                }
                if self.wants(*b) {
                    let out = node.value.data();
                    let gb = slot!(*b);
                    for (i, &y) in g.iter().enumerate() {
                        let d = bv.data()[i % inner];
                        gb[i % inner] -= y * out[i] / d;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = slot!(*a);
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            }
            Op::Slice { a, start, len } => {
                let d = self.value(*a).last_dim();
                let ga = slot!(*a);
                let rows = g.len() / len.max(&1);
                for r in 0..rows {
                    for j in 0..*len {
                        ga[r * d + start + j] += g[r * len + j];
                    }
                }
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.wants(p) {
                        let gp = slot!(p);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                let ga = slot!(*a);
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inv);
                let ga = slot!(*a);
                for (x, y) in ga.iter_mut().zip(back) {
                    *x += y;
                }
            }
            Op::RepeatRows { a, n } => {
                let d = self.value(*a).last_dim();
                let ga = slot!(*a);
                let b = ga.len() / d.max(1);
                for r in 0..b {
                    for k in 0..*n {
                        let src = &g[(r * n + k) * d..(r * n + k + 1) * d];
                        for (x, &y) in ga[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let s = node.value.data();
                let d = node.value.last_dim();
                let ga = slot!(*a);
                for r in 0..s.len() / d.max(1) {
                    let (sr, gr) = (&s[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = sr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        ga[r * d + j] += sr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let xh = node.value.data();
                let d = node.value.last_dim();
                let ga = slot!(*a);
                let nd = d as f64;
                for (r, &is) in inv_std.iter().enumerate() {
                    let (xr, gr) = (&xh[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let mean_g = gr.iter().sum::<f64>() / nd;
                    let mean_gx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / nd;
                    for j in 0..d {
                        ga[r * d + j] += is * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let ga = slot!(*a);
                for (i, &y) in g.iter().enumerate() {
                    let x = xv[i];
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    ga[i] += y * d;
                }
            }
            Op::Embedding { table, indices } => {
                let d = self.value(*table).last_dim();
                let gt = slot!(*table);
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
            Op::MeanSquare(a) => {
                let av = self.value(*a);
                let c = 2.0 * g[0] / av.len().max(1) as f64;
                let ga = slot!(*a);
                for (x, &v) in ga.iter_mut().zip(av.data()) {
                    *x += c * v;
                }
            }
            Op::SumSquare(a) => {
                let av = self.value(*a);
                let c = 2.0 * g[0];
                let ga = slot!(*a);
                for (x, &v) in ga.iter_mut().zip(av.data()) {
                    *x += c * v;
                }
            }
            Op::Sum(a) => {
                let ga = slot!(*a);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

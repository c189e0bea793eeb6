//! Reverse-mode differentiation over [`NdArray`] values.
//!
//! A [`Tape`] records every operation in evaluation order; node ids are
//! therefore already topologically sorted and [`Tape::backward`] is a single
//! reverse sweep. Parameters enter the tape through [`Tape::param`], which
//! returns the same [`Var`] for repeated requests so shared parameters
//! accumulate gradient from every use.

use std::collections::HashMap;

use super::array::for_each_offset;
use super::gemm::gemm;
use super::{NdArray, ParamId, ParameterStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatmul { a: Var, b: Var, trans_b: bool },
    BroadcastTo { x: Var, src_strides: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Relu(Var),
    Sin(Var),
    Abs(Var),
    Square(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Gather { table: Var, indices: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
}

struct Node {
    value: NdArray,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one scalar with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&NdArray> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                for (slot, x) in store.grad_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *slot += x;
                }
            }
        }
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

    fn push(&mut self, value: NdArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    /// `y[..., j] = sum_i x[..., i] w[i, j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::shape(format!("linear: input {xs:?} with weight {ws:?}")));
        }
        let n = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} for width {n}",
                    self.shape(b)
                )));
            }
        }
        let m = self.value(x).len() / k.max(1);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            1.0,
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(NdArray::new(&shape, out)?, Op::Linear { x, w, b }))
    }

    /// Batched matrix product over the leading axis: `[G, m, k]·[G, k, n]`,
    /// or `[G, m, k]·[G, n, k]ᵀ` with `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("batch_matmul: {sa:?} and {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape(format!(
                "batch_matmul: inner extents differ in {sa:?} and {sb:?} (trans_b={trans_b})"
            )));
        }
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(NdArray::new(&[g, m, n], out)?, Op::BatchMatmul { a, b, trans_b }))
    }

    /// Broadcasts with right-aligned extents; source extents must be 1 or equal.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs == shape {
            return Ok(x);
        }
        if xs.len() > shape.len() {
            return Err(Error::shape(format!("cannot broadcast {xs:?} to {shape:?}")));
        }
        let pad = shape.len() - xs.len();
        let in_strides = NdArray::strides(&xs);
        let mut src_strides = vec![0; shape.len()];
        for (i, &d) in xs.iter().enumerate() {
            if d == shape[pad + i] {
                src_strides[pad + i] = in_strides[i];
            } else if d != 1 {
                return Err(Error::shape(format!("cannot broadcast {xs:?} to {shape:?}")));
            }
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(shape.iter().product());
        for_each_offset(shape, &src_strides, |off| data.push(src[off]));
        Ok(self.push(NdArray::new(shape, data)?, Op::BroadcastTo { x, src_strides }))
    }

    /// `a + broadcast(b)` with `b` broadcast to `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let b = self.broadcast_to(b, &shape)?;
        self.add(a, b)
    }

    /// `a * broadcast(b)` with `b` broadcast to `a`'s shape.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let b = self.broadcast_to(b, &shape)?;
        self.mul(a, b)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        Ok(self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_last(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: width {d} with gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            NdArray::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::sin);
        self.push(v, Op::Sin(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(first),
                    s
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(NdArray::new(&shape, out)?, Op::Concat(parts.to_vec())))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let w = *xs.last().ok_or_else(|| Error::shape("narrow on a scalar"))?;
        if start + len > w {
            return Err(Error::shape(format!("narrow {start}+{len} of width {w}")));
        }
        let mut out = Vec::with_capacity(self.value(x).len() / w.max(1) * len);
        for row in self.value(x).data().chunks_exact(w) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(NdArray::new(&shape, out)?, Op::Narrow { x, start }))
    }

    /// Looks up rows of `table` (leading axis) for every index; the result
    /// has shape `out_shape ++ table.shape[1..]`.
    pub fn gather(&mut self, table: Var, indices: &[usize], out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        let rows = *ts.first().ok_or_else(|| Error::shape("gather from a scalar"))?;
        if out_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape(format!(
                "gather: {} indices for shape {out_shape:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("gather index {bad} out of {rows} rows")));
        }
        let width: usize = ts[1..].iter().product();
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&td[i * width..(i + 1) * width]);
        }
        let mut shape = out_shape.to_vec();
        shape.extend_from_slice(&ts[1..]);
        Ok(self.push(
            NdArray::new(&shape, out)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(NdArray::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(NdArray::scalar(s), Op::Mean(x))
    }

    /// Mean over every axis but the last: `[..., E] -> [E]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let e = v.last_dim();
        let rows = v.len() / e.max(1);
        let mut acc = vec![0.0; e];
        for row in v.data().chunks_exact(e) {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= rows.max(1) as f64);
        self.push(NdArray::from_vec(acc), Op::MeanRows(x))
    }

    /// Gradients of scalar `loss` with respect to every recorded node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Gradient(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::full(self.shape(loss), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let mut params: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    /// Runs [`Tape::gradients`] and adds the result into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        self.gradients(loss)?.accumulate_into(store);
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &NdArray, grads: &mut [Option<NdArray>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?);
                accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?);
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|x| x * f)),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.len() / k.max(1);
                let mut dx = vec![0.0; m * k];
                gemm(m, n, k, gd, false, wv.data(), true, 0.0, &mut dx);
                let mut dw = vec![0.0; k * n];
                gemm(k, m, n, xv.data(), true, gd, false, 0.0, &mut dw);
                accumulate(grads, *x, NdArray::new(xv.shape(), dx)?);
                accumulate(grads, *w, NdArray::new(wv.shape(), dw)?);
                if let Some(b) = b {
                    let mut db = vec![0.0; n];
                    for row in gd.chunks_exact(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    accumulate(grads, *b, NdArray::from_vec(db));
                }
            }
            Op::BatchMatmul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                let mut da = vec![0.0; gn * m * k];
                let mut db = vec![0.0; gn * k * n];
                for i in 0..gn {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // out = a·bᵀ with b stored n×k
                        gemm(m, n, k, gi, false, bi, false, 0.0, dai);
                        gemm(n, m, k, gi, true, ai, false, 0.0, dbi);
                    } else {
                        gemm(m, n, k, gi, false, bi, true, 0.0, dai);
                        gemm(k, m, n, ai, true, gi, false, 0.0, dbi);
                    }
                }
                accumulate(grads, *a, NdArray::new(av.shape(), da)?);
                accumulate(grads, *b, NdArray::new(bv.shape(), db)?);
            }
            Op::BroadcastTo { x, src_strides } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                let mut it = gd.iter();
                for_each_offset(g.shape(), src_strides, |off| {
                    dx[off] += it.next().unwrap();
                });
                accumulate(grads, *x, NdArray::new(xv.shape(), dx)?);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.clone().reshape(self.shape(*x))?);
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                accumulate(grads, *x, g.permute(&inv)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let e = y.last_dim();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks_exact(e).zip(gd.chunks_exact(e)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                accumulate(grads, *x, NdArray::new(y.shape(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let mut dx = Vec::with_capacity(xhat.len());
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for ((gr, hr), &r) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                    let mut sum_g = 0.0;
                    let mut sum_gh = 0.0;
                    for j in 0..d {
                        let gg = gr[j] * gam[j];
                        sum_g += gg;
                        sum_gh += gg * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    let df = d as f64;
                    for j in 0..d {
                        let gg = gr[j] * gam[j];
                        dx.push(r / df * (df * gg - sum_g - hr[j] * sum_gh));
                    }
                }
                accumulate(grads, *x, NdArray::new(self.shape(*x), dx)?);
                accumulate(grads, *gamma, NdArray::from_vec(dgamma));
                accumulate(grads, *beta, NdArray::from_vec(dbeta));
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                accumulate(grads, *x, d);
            }
            Op::Sin(x) => {
                accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| gv * xv.cos())?);
            }
            Op::Abs(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| 2.0 * xv * gv)?);
            }
            Op::Concat(parts) => {
                let total = g.last_dim();
                let rows = g.len() / total.max(1);
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + start..r * total + start + w]);
                    }
                    accumulate(grads, p, NdArray::new(self.shape(p), dp)?);
                    start += w;
                }
            }
            Op::Narrow { x, start } => {
                let xv = self.value(*x);
                let w = xv.last_dim();
                let len = g.last_dim();
                let mut dx = vec![0.0; xv.len()];
                for (row, gr) in dx.chunks_exact_mut(w).zip(gd.chunks_exact(len)) {
                    row[*start..start + len].copy_from_slice(gr);
                }
                accumulate(grads, *x, NdArray::new(xv.shape(), dx)?);
            }
            Op::Gather { table, indices } => {
                let tv = self.value(*table);
                let width = tv.len() / tv.shape()[0];
                let mut dt = vec![0.0; tv.len()];
                for (&i, gr) in indices.iter().zip(gd.chunks_exact(width.max(1))) {
                    for (d, x) in dt[i * width..(i + 1) * width].iter_mut().zip(gr) {
                        *d += x;
                    }
                }
                accumulate(grads, *table, NdArray::new(tv.shape(), dt)?);
            }
            Op::Sum(x) => {
                accumulate(grads, *x, NdArray::full(self.shape(*x), gd[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                accumulate(grads, *x, NdArray::full(self.shape(*x), gd[0] / n));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let e = xv.last_dim();
                let rows = (xv.len() / e.max(1)).max(1) as f64;
                let mut dx = Vec::with_capacity(xv.len());
                for _ in 0..xv.len() / e.max(1) {
                    dx.extend(gd.iter().map(|v| v / rows));
                }
                accumulate(grads, *x, NdArray::new(xv.shape(), dx)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<NdArray>], v: Var, g: NdArray) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &NdArray) -> NdArray {
    let e = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(e.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let ex = (v - max).exp();
            total += ex;
            out.push(ex);
        }
        out[start..].iter_mut().for_each(|v| *v /= total);
    }
    NdArray::new(x.shape(), out).expect("softmax preserves shape")
}

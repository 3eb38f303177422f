use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::{Binary, Node, Op, Unary, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

// ── broadcasting ─────────────────────────────────────────────────────

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Flat source index in `shape` for every element of `out_shape`.
fn broadcast_index(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let offset = n - shape.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    let mut flat = 0usize;
    for _ in 0..total {
        idx.push(flat);
        for d in (0..n).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

enum Operand<'a> {
    Same(&'a [f64]),
    Scalar(f64),
    Indexed(&'a [f64], Vec<usize>),
}

impl Operand<'_> {
    #[inline]
    fn get(&self, i: usize) -> f64 {
        match self {
            Operand::Same(d) => d[i],
            Operand::Scalar(v) => *v,
            Operand::Indexed(d, idx) => d[idx[i]],
        }
    }
}

fn operand<'a>(t: &'a Tensor, out_shape: &[usize]) -> Operand<'a> {
    if t.shape() == out_shape {
        Operand::Same(t.data())
    } else if t.numel() == 1 {
        Operand::Scalar(t.data()[0])
    } else {
        Operand::Indexed(t.data(), broadcast_index(t.shape(), out_shape))
    }
}

/// Sum a full-shape gradient down to `shape`.
fn reduce_to(g: &[f64], out_shape: &[usize], shape: &[usize]) -> Tensor {
    if out_shape == shape {
        return Tensor::new(shape, g.to_vec()).expect("same shape");
    }
    let mut acc = Tensor::zeros(shape);
    if acc.numel() == 1 {
        acc.data_mut()[0] = g.iter().sum();
        return acc;
    }
    let idx = broadcast_index(shape, out_shape);
    let d = acc.data_mut();
    for (i, v) in idx.into_iter().zip(g) {
        d[i] += v;
    }
    acc
}

// ── unary kernels ────────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn unary_forward(k: Unary, x: f64) -> f64 {
    match k {
        Unary::Neg => -x,
        Unary::Scale(c) => c * x,
        Unary::Offset(c) => x + c,
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Recip => 1.0 / x,
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Powi(n) => x.powi(n),
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
    }
}

/// d(out)/d(in) given input `x` and output `y`.
fn unary_deriv(k: Unary, x: f64, y: f64) -> f64 {
    match k {
        Unary::Neg => -1.0,
        Unary::Scale(c) => c,
        Unary::Offset(_) => 1.0,
        // zero subgradient where the root is taken at 0
        Unary::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Recip => -y * y,
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Powi(n) => n as f64 * x.powi(n - 1),
        Unary::Clamp(lo, hi) => {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Softplus => sigmoid(x),
    }
}

fn unary_name(k: Unary) -> &'static str {
    match k {
        Unary::Neg => "neg",
        Unary::Scale(_) => "scale",
        Unary::Offset(_) => "offset",
        Unary::Sqrt => "sqrt",
        Unary::Square => "square",
        Unary::Recip => "reciprocal",
        Unary::Exp => "exp",
        Unary::Log => "log",
        Unary::Powi(_) => "powi",
        Unary::Clamp(..) => "clamp",
        Unary::Sigmoid => "sigmoid",
        Unary::Softplus => "softplus",
    }
}

// ── forward ops ──────────────────────────────────────────────────────

impl<'t> Var<'t> {
    fn emit(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let needs = inputs.iter().any(|&i| self.tape.needs_grad(i));
        self.tape.push(value, op, needs, None)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    fn unary(&self, k: Unary) -> Result<Var<'t>> {
        let v = self.value().map(|x| unary_forward(k, x)).check_finite(unary_name(k))?;
        Ok(self.emit(v, Op::Unary(k, self.id), &[self.id]))
    }

    fn binary(&self, other: &Var<'t>, k: Binary) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let (oa, ob) = (operand(&a, &shape), operand(&b, &shape));
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match k {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data = (0..n).map(|i| f(oa.get(i), ob.get(i))).collect();
        let name = match k {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let v = Tensor::new(&shape, data)?.check_finite(name)?;
        Ok(self.emit(v, Op::Binary(k, self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary(Unary::Neg)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Unary::Scale(c))
    }

    pub fn offset(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Unary::Offset(c))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary(Unary::Square)
    }

    pub fn reciprocal(&self) -> Result<Var<'t>> {
        self.unary(Unary::Recip)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(Unary::Log)
    }

    pub fn powi(&self, n: i32) -> Result<Var<'t>> {
        self.unary(Unary::Powi(n))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(Unary::Clamp(lo, hi))
    }

    pub fn clamp_min(&self, lo: f64) -> Result<Var<'t>> {
        self.unary(Unary::Clamp(lo, f64::INFINITY))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary(Unary::Softplus)
    }

    /// Parametric rectifier with one learnable slope per channel (axis 1).
    pub fn prelu(&self, slope: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(slope);
        let (x, a) = (self.value(), slope.value());
        let c = channels(&x);
        if a.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: x.shape().to_vec(),
                rhs: a.shape().to_vec(),
            });
        }
        let plane = plane_size(&x);
        let mut out = (*x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if *v < 0.0 {
                *v *= a.data()[(i / plane) % c];
            }
        }
        Ok(self.emit(out, Op::Prelu(self.id, slope.id), &[self.id, slope.id]))
    }

    /// Stride-1 cross-correlation; `w` is `(cout, cin, kh, kw)`.
    pub fn conv2d(&self, w: &Var<'t>, b: Option<&Var<'t>>, geom: &ConvGeom) -> Result<Var<'t>> {
        self.same_tape(w);
        let bias = b.map(|b| b.value());
        let out = conv::conv2d_forward(&self.value(), &w.value(), bias.as_deref(), geom)?;
        let mut inputs = vec![self.id, w.id];
        if let Some(b) = b {
            inputs.push(b.id);
        }
        let op = Op::Conv2d {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
            geom: geom.clone(),
        };
        Ok(self.emit(out, op, &inputs))
    }

    pub fn avg_pool2d(&self) -> Result<Var<'t>> {
        let out = conv::avg_pool2(&self.value())?;
        Ok(self.emit(out, Op::AvgPool2(self.id), &[self.id]))
    }

    /// Mean over the spatial axes, `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let data = x
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], data)?;
        Ok(self.emit(out, Op::GlobalAvgPool(self.id), &[self.id]))
    }

    pub fn upsample2x(&self) -> Result<Var<'t>> {
        let out = conv::upsample2(&self.value())?;
        Ok(self.emit(out, Op::Upsample2(self.id), &[self.id]))
    }

    /// Concatenate rank-4 variables along the channel axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            reason: "nothing to concatenate".into(),
        })?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = values[0].dims4()?;
        let mut total_c = 0;
        for v in &values {
            let (vn, vc, vh, vw) = v.dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total_c += vc;
        }
        let mut data = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for v in &values {
                let per = v.numel() / n;
                data.extend_from_slice(&v.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::new(&[n, total_c, h, w], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(out, Op::Concat(ids.clone()), &ids))
    }

    pub fn reduce_sum(&self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum()).check_finite("reduce_sum")?;
        Ok(self.emit(v, Op::Sum(self.id), &[self.id]))
    }

    pub fn reduce_mean(&self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().mean()).check_finite("reduce_mean")?;
        Ok(self.emit(v, Op::Mean(self.id), &[self.id]))
    }

    fn extremum(&self, want_max: bool) -> Result<Var<'t>> {
        let x = self.value();
        let mut best = 0;
        for (i, &v) in x.data().iter().enumerate() {
            let b = x.data()[best];
            if (want_max && v > b) || (!want_max && v < b) {
                best = i;
            }
        }
        let v = Tensor::scalar(x.data()[best]);
        Ok(self.emit(v, Op::Extremum(self.id, best), &[self.id]))
    }

    pub fn reduce_min(&self) -> Result<Var<'t>> {
        self.extremum(false)
    }

    pub fn reduce_max(&self) -> Result<Var<'t>> {
        self.extremum(true)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.emit(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Item `i` of the leading axis, keeping the axis with extent 1.
    pub fn batch_item(&self, i: usize) -> Result<Var<'t>> {
        let v = self.value().batch_item(i)?;
        Ok(self.emit(v, Op::BatchItem(self.id, i), &[self.id]))
    }

    /// Channel `c` of a rank-4 variable, keeping the axis with extent 1.
    pub fn channel(&self, c: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, cs, h, w) = x.dims4()?;
        if c >= cs {
            return Err(Error::InvalidShape {
                op: "channel",
                reason: format!("channel {c} of {cs}"),
            });
        }
        let mut data = Vec::with_capacity(n * h * w);
        for b in 0..n {
            let start = (b * cs + c) * h * w;
            data.extend_from_slice(&x.data()[start..start + h * w]);
        }
        let v = Tensor::new(&[n, 1, h, w], data)?;
        Ok(self.emit(v, Op::Channel(self.id, c), &[self.id]))
    }

    /// All `size x size` patches of a single-channel image at `stride`,
    /// flattened row-major into the rows of a `(patches, size*size)` matrix.
    pub fn gather_patches(&self, size: usize, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (h, w) = single_plane(&x, "gather_patches")?;
        if size == 0 || stride == 0 || size > h || size > w {
            return Err(Error::InvalidShape {
                op: "gather_patches",
                reason: format!("patch {size} stride {stride} on {h}x{w}"),
            });
        }
        let positions = patch_positions(h, w, size, stride);
        let r = size * size;
        let mut data = Vec::with_capacity(positions.len() * r);
        for &(py, px) in &positions {
            for dy in 0..size {
                let row = (py + dy) * w + px;
                data.extend_from_slice(&x.data()[row..row + size]);
            }
        }
        let v = Tensor::new(&[positions.len(), r], data)?;
        Ok(self.emit(v, Op::GatherPatches { x: self.id, size, stride }, &[self.id]))
    }

    /// Unbiased sample covariance of the rows of a `(samples, dim)` matrix.
    pub fn covariance(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (p, r) = matrix_dims(&x, "covariance")?;
        if p < 2 {
            return Err(Error::InvalidShape {
                op: "covariance",
                reason: "need at least two samples".into(),
            });
        }
        let xc = centered(&x, p, r);
        let mut cov = vec![0.0; r * r];
        for row in xc.chunks(r) {
            for i in 0..r {
                let a = row[i];
                for j in i..r {
                    cov[i * r + j] += a * row[j];
                }
            }
        }
        let inv = 1.0 / (p - 1) as f64;
        for i in 0..r {
            for j in i..r {
                let v = cov[i * r + j] * inv;
                cov[i * r + j] = v;
                cov[j * r + i] = v;
            }
        }
        let v = Tensor::new(&[r, r], cov)?.check_finite("covariance")?;
        Ok(self.emit(v, Op::Covariance(self.id), &[self.id]))
    }

    /// Ascending eigenvalues `(n,)` of a symmetric `(n, n)` matrix.
    pub fn symmetric_eig(&self) -> Result<(Var<'t>, Rc<linalg::SymmetricEigen>)> {
        let x = self.value();
        let (n, m) = matrix_dims(&x, "symmetric_eig")?;
        if n != m {
            return Err(Error::InvalidShape {
                op: "symmetric_eig",
                reason: format!("{n}x{m} is not square"),
            });
        }
        let eig = Rc::new(linalg::symmetric_eigen(x.data(), n)?);
        let v = Tensor::new(&[n], eig.values.clone())?;
        let var = self.emit(v, Op::SymEig(self.id, Rc::clone(&eig)), &[self.id]);
        Ok((var, eig))
    }

    /// Elements of a flat variable at `indices`.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::InvalidShape {
                op: "index_select",
                reason: format!("index {bad} out of {}", x.numel()),
            });
        }
        let v = Tensor::new(&[indices.len()], indices.iter().map(|&i| x.data()[i]).collect())?;
        Ok(self.emit(v, Op::IndexSelect(self.id, indices.to_vec()), &[self.id]))
    }
}

fn channels(x: &Tensor) -> usize {
    if x.ndim() >= 2 {
        x.shape()[1]
    } else {
        1
    }
}

fn plane_size(x: &Tensor) -> usize {
    x.shape().iter().skip(2).product()
}

fn single_plane(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        [1, 1, h, w] | [h, w] => Ok((*h, *w)),
        s => Err(Error::InvalidShape {
            op,
            reason: format!("expected one single-channel image, got {s:?}"),
        }),
    }
}

fn matrix_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::InvalidShape {
            op,
            reason: format!("expected a matrix, got {s:?}"),
        }),
    }
}

/// Top-left corners of every patch extracted by `gather_patches`.
pub(crate) fn patch_positions(h: usize, w: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in (0..=h - size).step_by(stride) {
        for x in (0..=w - size).step_by(stride) {
            out.push((y, x));
        }
    }
    out
}

fn centered(x: &Tensor, p: usize, r: usize) -> Vec<f64> {
    let mut mean = vec![0.0; r];
    for row in x.data().chunks(r) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= p as f64;
    }
    let mut xc = x.data().to_vec();
    for row in xc.chunks_mut(r) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    xc
}

// ── backward ─────────────────────────────────────────────────────────

pub(crate) fn backward_op(nodes: &[Node], id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let needs = |i: usize| nodes[i].needs_grad;
    let out = val(id);
    let mut res = Vec::new();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Unary(k, x) => {
            let xv = val(*x);
            let data = xv
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * unary_deriv(*k, xi, yi))
                .collect();
            res.push((*x, Tensor::new(xv.shape(), data)?));
        }
        Op::Binary(k, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let shape = out.shape();
            let (oa, ob) = (operand(av, shape), operand(bv, shape));
            let n = g.numel();
            let gd = g.data();
            if needs(*a) {
                let ga: Vec<f64> = match k {
                    Binary::Add | Binary::Sub => gd.to_vec(),
                    Binary::Mul => (0..n).map(|i| gd[i] * ob.get(i)).collect(),
                    Binary::Div => (0..n).map(|i| gd[i] / ob.get(i)).collect(),
                };
                res.push((*a, reduce_to(&ga, shape, av.shape())));
            }
            if needs(*b) {
                let gb: Vec<f64> = match k {
                    Binary::Add => gd.to_vec(),
                    Binary::Sub => gd.iter().map(|v| -v).collect(),
                    Binary::Mul => (0..n).map(|i| gd[i] * oa.get(i)).collect(),
                    Binary::Div => (0..n)
                        .map(|i| {
                            let d = ob.get(i);
                            -gd[i] * oa.get(i) / (d * d)
                        })
                        .collect(),
                };
                res.push((*b, reduce_to(&gb, shape, bv.shape())));
            }
        }
        Op::Prelu(x, a) => {
            let (xv, av) = (val(*x), val(*a));
            let c = channels(xv);
            let plane = plane_size(xv);
            let mut gx = g.clone();
            let mut ga = Tensor::zeros(av.shape());
            for (i, (gxi, &xi)) in gx.data_mut().iter_mut().zip(xv.data()).enumerate() {
                if xi < 0.0 {
                    let ch = (i / plane) % c;
                    ga.data_mut()[ch] += *gxi * xi;
                    *gxi *= av.data()[ch];
                }
            }
            res.push((*x, gx));
            res.push((*a, ga));
        }
        Op::Conv2d { x, w, b, geom } => {
            let need_b = b.is_some_and(needs);
            let grads = conv::conv2d_backward(val(*x), val(*w), geom, g, (needs(*x), needs(*w), need_b))?;
            if let Some(gx) = grads.x {
                res.push((*x, gx));
            }
            if let Some(gw) = grads.w {
                res.push((*w, gw));
            }
            if let (Some(b), Some(gb)) = (b, grads.b) {
                let shape = val(*b).shape().to_vec();
                res.push((*b, gb.reshape(&shape)?));
            }
        }
        Op::AvgPool2(x) => res.push((*x, conv::avg_pool2_backward(val(*x).shape(), g)?)),
        Op::Upsample2(x) => res.push((*x, conv::upsample2_backward(val(*x).shape(), g)?)),
        Op::GlobalAvgPool(x) => {
            let xv = val(*x);
            let plane = plane_size(xv);
            let data = (0..xv.numel()).map(|i| g.data()[i / plane] / plane as f64).collect();
            res.push((*x, Tensor::new(xv.shape(), data)?));
        }
        Op::Concat(ids) => {
            let n = out.shape()[0];
            let per_out = out.numel() / n;
            let mut offset = 0;
            for &i in ids {
                let v = val(i);
                let per = v.numel() / n;
                let mut data = Vec::with_capacity(v.numel());
                for b in 0..n {
                    let s = b * per_out + offset;
                    data.extend_from_slice(&g.data()[s..s + per]);
                }
                offset += per;
                res.push((i, Tensor::new(v.shape(), data)?));
            }
        }
        Op::Sum(x) => res.push((*x, Tensor::full(val(*x).shape(), g.data()[0]))),
        Op::Mean(x) => {
            let xv = val(*x);
            res.push((*x, Tensor::full(xv.shape(), g.data()[0] / xv.numel() as f64)));
        }
        Op::Extremum(x, idx) => {
            let mut gx = Tensor::zeros(val(*x).shape());
            gx.data_mut()[*idx] = g.data()[0];
            res.push((*x, gx));
        }
        Op::Reshape(x) => res.push((*x, g.clone().reshape(val(*x).shape())?)),
        Op::BatchItem(x, i) => {
            let xv = val(*x);
            let mut gx = Tensor::zeros(xv.shape());
            let per = g.numel();
            gx.data_mut()[i * per..(i + 1) * per].copy_from_slice(g.data());
            res.push((*x, gx));
        }
        Op::Channel(x, c) => {
            let xv = val(*x);
            let (n, cs, h, w) = xv.dims4()?;
            let mut gx = Tensor::zeros(xv.shape());
            for b in 0..n {
                let dst = (b * cs + c) * h * w;
                gx.data_mut()[dst..dst + h * w].copy_from_slice(&g.data()[b * h * w..(b + 1) * h * w]);
            }
            res.push((*x, gx));
        }
        Op::GatherPatches { x, size, stride } => {
            let xv = val(*x);
            let (h, w) = single_plane(xv, "gather_patches")?;
            let mut gx = Tensor::zeros(xv.shape());
            let r = size * size;
            for (p, &(py, px)) in patch_positions(h, w, *size, *stride).iter().enumerate() {
                let gp = &g.data()[p * r..(p + 1) * r];
                for dy in 0..*size {
                    let row = (py + dy) * w + px;
                    for (d, v) in gx.data_mut()[row..row + size].iter_mut().zip(&gp[dy * size..(dy + 1) * size]) {
                        *d += v;
                    }
                }
            }
            res.push((*x, gx));
        }
        Op::Covariance(x) => {
            // dX = Xc (G + G^T) / (p - 1); centring drops out since Xc has zero column sums.
            let xv = val(*x);
            let (p, r) = matrix_dims(xv, "covariance")?;
            let xc = centered(xv, p, r);
            let gd = g.data();
            let mut sym = vec![0.0; r * r];
            for i in 0..r {
                for j in 0..r {
                    sym[i * r + j] = (gd[i * r + j] + gd[j * r + i]) / (p - 1) as f64;
                }
            }
            let mut gx = vec![0.0; p * r];
            for (row, grow) in xc.chunks(r).zip(gx.chunks_mut(r)) {
                for (k, &a) in row.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (gv, s) in grow.iter_mut().zip(&sym[k * r..(k + 1) * r]) {
                        *gv += a * s;
                    }
                }
            }
            res.push((*x, Tensor::new(xv.shape(), gx)?));
        }
        Op::SymEig(x, eig) => {
            // d(lambda_k)/dS = v_k v_k^T
            let n = eig.n;
            let mut gs = vec![0.0; n * n];
            for (k, &gk) in g.data().iter().enumerate() {
                if gk == 0.0 {
                    continue;
                }
                let v = eig.vector(k);
                for i in 0..n {
                    let vi = gk * v[i];
                    for j in 0..n {
                        gs[i * n + j] += vi * v[j];
                    }
                }
            }
            res.push((*x, Tensor::new(&[n, n], gs)?));
        }
        Op::IndexSelect(x, idx) => {
            let mut gx = Tensor::zeros(val(*x).shape());
            for (&i, &gv) in idx.iter().zip(g.data()) {
                gx.data_mut()[i] += gv;
            }
            res.push((*x, gx));
        }
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]).unwrap(), vec![2, 4, 3]);
        assert!(broadcast_shape(&[2, 3], &[3, 2]).is_err());
        let idx = broadcast_index(&[2, 1], &[2, 3]);
        assert_eq!(idx, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn sum_of_squares_grad() {
        let tape = Tape::new();
        let p = tape.var(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let loss = p.square().unwrap().reduce_sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn prelu_value_and_slope_grad() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![-2.0]).unwrap());
        let s = tape.var(Tensor::new(&[1], vec![0.25]).unwrap());
        let y = x.prelu(&s).unwrap();
        assert_eq!(y.item(), -0.5);

        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![-1.0]).unwrap());
        let s = tape.var(Tensor::new(&[1], vec![0.25]).unwrap());
        let loss = x.prelu(&s).unwrap().reduce_sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(s).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn masked_conv_center() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.var(Tensor::full(&[1, 1, 3, 3], 1.0));
        let full = x.conv2d(&w, None, &ConvGeom::same(3, 1)).unwrap();
        assert_eq!(full.value().at4(0, 0, 1, 1), 9.0);
        let mut mask = vec![true; 9];
        mask[4] = false;
        let geom = ConvGeom::same(3, 1).with_mask(mask);
        let masked = x.conv2d(&w, None, &geom).unwrap();
        assert_eq!(masked.value().at4(0, 0, 1, 1), 8.0);
        let g = tape.backward(masked.reduce_sum().unwrap()).unwrap();
        assert_eq!(g.wrt(w).unwrap().data()[4], 0.0);
    }

    #[test]
    fn non_finite_forward_is_error() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new(&[1], vec![-1.0]).unwrap());
        assert!(matches!(x.log(), Err(Error::NonFinite { .. })));
        let z = tape.var(Tensor::new(&[1], vec![0.0]).unwrap());
        assert!(z.reciprocal().is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(3.0));
        let v = tape.var(Tensor::scalar(2.0));
        let loss = c.mul(&v).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(v).unwrap().data(), &[3.0]);
    }
}

//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value to a [`Tape`].
//! Node ids are handed out in creation order, so the node list is already
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//! Broadcasting only happens through the explicit [`Tape::expand`] op.

use crate::error::{Error, Result};
use crate::tensor::{split_axis, strides, Tensor};

/// Callback that hands out the gradient buffer of a tape variable.
type GradSink<'a> = &'a mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64]));

/// Handle to a node on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    /// Pure data movement (expand, permute): output[i] = input[offsets[i]].
    Gather {
        x: Var,
        offsets: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Pow {
        x: Var,
        exponent: f64,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
    Max {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Std {
        x: Var,
        axis: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm(Box<BatchNormNode>),
}

#[derive(Debug)]
struct BatchNormNode {
    x: Var,
    gamma: Var,
    beta: Var,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Whether the statistics came from the batch itself.
    batch_stats: bool,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population (1/N) variance.
    pub var: Vec<f64>,
    /// Number of values each channel was averaged over.
    pub count: usize,
}

/// Append-only operation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => {
                let n = shape.iter().product();
                Tensor::from_parts(shape, vec![0.0; n])
            }
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!("{op}: axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source offset for each output element when reading `src_strides` in
/// the order of `out_shape`.
fn gather_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        Some(a) => {
            let mut s = shape.to_vec();
            s[a] = 1;
            s
        }
        None => Vec::new(),
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Registers a leaf that never receives gradients.
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

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push_op(Op::MatMul(a, b), value, &[a, b]))
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push_op(op, value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, "mul", |x, y| x * y)
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push_op(Op::Affine { x, scale }, value, &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push_op(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            inputs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("slice", t.shape(), axis)?;
        if len == 0 || start + len > t.shape()[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{} out of bounds for axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push_op(Op::Slice { x, axis, start }, value, &[x]))
    }

    /// Copies size-1 axes of `x` out to `target`; all other axes must match.
    pub fn expand(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        let ok = s.len() == target.len() && s.iter().zip(target).all(|(&a, &b)| a == b || a == 1);
        if !ok || target.contains(&0) {
            return Err(Error::shape("expand", s, target));
        }
        let mut src = strides(s);
        for (st, &d) in src.iter_mut().zip(s) {
            if d == 1 {
                *st = 0;
            }
        }
        let offsets = gather_offsets(target, &src);
        let data = offsets.iter().map(|&o| t.data()[o]).collect();
        let value = Tensor::from_parts(target.to_vec(), data);
        Ok(self.push_op(Op::Gather { x, offsets }, value, &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(format!(
                "permute: {perm:?} is not a permutation of rank {}",
                s.len()
            )));
        }
        let in_strides = strides(s);
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let offsets = gather_offsets(&out_shape, &src);
        let data = offsets.iter().map(|&o| t.data()[o]).collect();
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push_op(Op::Gather { x, offsets }, value, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).ndim() != 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push_op(Op::Reshape { x }, value, &[x]))
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push_op(op, value, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid(x), x, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh(x), x, f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu(x), x, |v| v.max(0.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Op::Log(x), x, f64::ln)
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Var {
        self.unary(Op::Pow { x, exponent }, x, |v| v.powf(exponent))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp { x, lo, hi }, x, |v| v.clamp(lo, hi))
    }

    fn reduce_sum(t: &Tensor, axis: Option<usize>) -> Tensor {
        match axis {
            None => Tensor::scalar(t.data().iter().sum()),
            Some(a) => {
                let (outer, n, inner) = split_axis(t.shape(), a);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let row = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                Tensor::from_parts(reduced_shape(t.shape(), axis), out)
            }
        }
    }

    /// Sum over `axis` (kept with size 1), or over everything into a scalar.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(a) = axis {
            check_axis("sum", self.shape(x), a)?;
        }
        let value = Self::reduce_sum(self.value(x), axis);
        Ok(self.push_op(Op::Sum { x, axis }, value, &[x]))
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(x);
        let n = match axis {
            Some(a) => {
                check_axis("mean", t.shape(), a)?;
                t.shape()[a]
            }
            None => t.len(),
        } as f64;
        let value = Self::reduce_sum(t, axis).map(|v| v / n);
        Ok(self.push_op(Op::Mean { x, axis }, value, &[x]))
    }

    /// Max over `axis`; ties resolve to the lowest index.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("max", t.shape(), axis)?;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = d[(o * n + k) * inner + i];
                    let j = o * inner + i;
                    if v > out[j] || k == 0 {
                        out[j] = v;
                        argmax[j] = k;
                    }
                }
            }
        }
        let value = Tensor::from_parts(reduced_shape(t.shape(), Some(axis)), out);
        Ok(self.push_op(Op::Max { x, axis, argmax }, value, &[x]))
    }

    /// Population standard deviation over `axis`. A constant slice yields
    /// exactly zero, and the gradient is taken as zero wherever the
    /// deviation itself is zero.
    pub fn std(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("std", t.shape(), axis)?;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| d[(o * n + k) * inner + i];
                let first = at(0);
                if (1..n).all(|k| at(k) == first) {
                    continue;
                }
                let mean = (0..n).map(at).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| (at(k) - mean).powi(2)).sum::<f64>() / n as f64;
                out[o * inner + i] = var.sqrt();
            }
        }
        let value = Tensor::from_parts(reduced_shape(t.shape(), Some(axis)), out);
        Ok(self.push_op(Op::Std { x, axis }, value, &[x]))
    }

    /// Same-padded 1-D cross-correlation: `x` is B×C_in×L, `w` is
    /// C_out×C_in×K with odd K, `b` has C_out entries.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.ndim() != 3 || tw.ndim() != 3 || tw.shape()[1] != tx.shape()[1] {
            return Err(Error::shape("conv1d", tx.shape(), tw.shape()));
        }
        if tb.shape() != [tw.shape()[0]] {
            return Err(Error::shape("conv1d", tw.shape(), tb.shape()));
        }
        let k = tw.shape()[2];
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv1d: kernel size {k} is even")));
        }
        let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let cout = tw.shape()[0];
        let pad = (k / 2) as isize;
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; bsz * cout * len];
        for bi in 0..bsz {
            for o in 0..cout {
                let orow = &mut out[(bi * cout + o) * len..(bi * cout + o + 1) * len];
                orow.fill(bd[o]);
                for c in 0..cin {
                    let xrow = &xd[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                    let wrow = &wd[(o * cin + c) * k..(o * cin + c + 1) * k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let shift = kk as isize - pad;
                        let lo = (-shift).max(0) as usize;
                        let hi = (len as isize - shift).min(len as isize).max(0) as usize;
                        for l in lo..hi {
                            orow[l] += wv * xrow[(l as isize + shift) as usize];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![bsz, cout, len], out);
        Ok(self.push_op(Op::Conv1d { x, w, b }, value, &[x, w, b]))
    }

    /// Same-padded 2-D cross-correlation: `x` is B×C_in×H×W, `w` is
    /// C_out×C_in×K×K with odd K.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.ndim() != 4 || tw.ndim() != 4 || tw.shape()[1] != tx.shape()[1] || tw.shape()[2] != tw.shape()[3] {
            return Err(Error::shape("conv2d", tx.shape(), tw.shape()));
        }
        if tb.shape() != [tw.shape()[0]] {
            return Err(Error::shape("conv2d", tw.shape(), tb.shape()));
        }
        let k = tw.shape()[2];
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv2d: kernel size {k} is even")));
        }
        let (bsz, cin, h, wd_) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let cout = tw.shape()[0];
        let pad = (k / 2) as isize;
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let plane = h * wd_;
        let mut out = vec![0.0; bsz * cout * plane];
        for bi in 0..bsz {
            for o in 0..cout {
                let oplane = &mut out[(bi * cout + o) * plane..(bi * cout + o + 1) * plane];
                oplane.fill(bd[o]);
                for c in 0..cin {
                    let xplane = &xd[(bi * cin + c) * plane..(bi * cin + c + 1) * plane];
                    for ki in 0..k {
                        let di = ki as isize - pad;
                        let ilo = (-di).max(0) as usize;
                        let ihi = (h as isize - di).min(h as isize).max(0) as usize;
                        for kj in 0..k {
                            let wv = wd[((o * cin + c) * k + ki) * k + kj];
                            let dj = kj as isize - pad;
                            let jlo = (-dj).max(0) as usize;
                            let jhi = (wd_ as isize - dj).min(wd_ as isize).max(0) as usize;
                            for i in ilo..ihi {
                                let si = (i as isize + di) as usize;
                                for j in jlo..jhi {
                                    oplane[i * wd_ + j] += wv * xplane[si * wd_ + (j as isize + dj) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![bsz, cout, h, wd_], out);
        Ok(self.push_op(Op::Conv2d { x, w, b }, value, &[x, w, b]))
    }

    /// Batch normalization over every axis except axis 1 (channels).
    ///
    /// With `running = None` the batch's own statistics are used and
    /// returned; otherwise the supplied (mean, variance) pair is applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.ndim() < 2 {
            return Err(Error::shape("batch_norm", tx.shape(), tg.shape()));
        }
        let c = tx.shape()[1];
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::shape("batch_norm", tx.shape(), tg.shape()));
        }
        let bsz = tx.shape()[0];
        let rest: usize = tx.shape()[2..].iter().product();
        let count = bsz * rest;
        let xd = tx.data();
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", tx.shape(), &[m.len()]));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let block = |bi: usize| &xd[(bi * c + ch) * rest..(bi * c + ch + 1) * rest];
                    let m = (0..bsz).flat_map(block).sum::<f64>() / count as f64;
                    let v = (0..bsz).flat_map(block).map(|&x| (x - m).powi(2)).sum::<f64>() / count as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                for r in 0..rest {
                    let i = (bi * c + ch) * rest + r;
                    x_hat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = tg.data()[ch] * x_hat[i] + tb.data()[ch];
                }
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let batch_stats = running.is_none();
        let stats = batch_stats.then_some(BatchStats { mean, var, count });
        let node = BatchNormNode {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
            batch_stats,
        };
        let v = self.push_op(Op::BatchNorm(Box::new(node)), value, &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                lt.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulates into an input's gradient buffer, skipping constants.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, nn) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (ad, bd) = (ta.data(), tb.data());
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let brow = &bd[p * nn..(p + 1) * nn];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * nn..(p + 1) * nn].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += scale * v));
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &v in inputs {
                        let block = nodes[v.0].value.shape()[*axis] * inner;
                        acc(v, &mut |gv| {
                            for (dst, &src) in gv[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&g[offset..offset + block])
                            {
                                *dst += src;
                            }
                        });
                        offset += block;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            gx[dst + i] += g[src + i];
                        }
                    }
                });
            }
            Op::Gather { x, offsets } => {
                acc(*x, &mut |gx| {
                    for (&o, &gv) in offsets.iter().zip(g) {
                        gx[o] += gv;
                    }
                });
            }
            Op::Reshape { x } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v));
            }
            Op::Sigmoid(x) => {
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xd = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / xd[i];
                    }
                });
            }
            Op::Pow { x, exponent } => {
                let xd = val(*x);
                let e = *exponent;
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if e != 0.0 {
                            gx[i] += g[i] * e * xd[i].powf(e - 1.0);
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xd = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xd[i] >= *lo && xd[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = nodes[x.0].value.shape();
                let scale = match (&node.op, axis) {
                    (Op::Mean { .. }, Some(a)) => 1.0 / xs[*a] as f64,
                    (Op::Mean { .. }, None) => 1.0 / nodes[x.0].value.len() as f64,
                    _ => 1.0,
                };
                acc(*x, &mut |gx| match axis {
                    None => gx.iter_mut().for_each(|o| *o += g[0] * scale),
                    Some(a) => {
                        let (outer, n, inner) = split_axis(xs, *a);
                        for o in 0..outer {
                            for k in 0..n {
                                for i in 0..inner {
                                    gx[(o * n + k) * inner + i] += g[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                });
            }
            Op::Max { x, axis, argmax } => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = o * inner + i;
                            gx[(o * n + argmax[j]) * inner + i] += g[j];
                        }
                    }
                });
            }
            Op::Std { x, axis } => {
                let xd = val(*x);
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = o * inner + i;
                            let sd = out[j];
                            if sd == 0.0 {
                                continue;
                            }
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let mean = (0..n).map(|k| xd[idx(k)]).sum::<f64>() / n as f64;
                            for k in 0..n {
                                gx[idx(k)] += g[j] * (xd[idx(k)] - mean) / (n as f64 * sd);
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b } => self.conv1d_backward(*x, *w, *b, g, &mut acc),
            Op::Conv2d { x, w, b } => self.conv2d_backward(*x, *w, *b, g, &mut acc),
            Op::BatchNorm(bn) => {
                let tx = &nodes[bn.x.0].value;
                let c = tx.shape()[1];
                let bsz = tx.shape()[0];
                let rest: usize = tx.shape()[2..].iter().product();
                let count = (bsz * rest) as f64;
                let gamma = val(bn.gamma);
                let at = |bi: usize, ch: usize, r: usize| (bi * c + ch) * rest + r;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        for r in 0..rest {
                            let i = at(bi, ch, r);
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * bn.x_hat[i];
                        }
                    }
                }
                acc(bn.gamma, &mut |gg| {
                    gg.iter_mut().zip(&sum_gx).for_each(|(o, &v)| *o += v)
                });
                acc(bn.beta, &mut |gb| gb.iter_mut().zip(&sum_g).for_each(|(o, &v)| *o += v));
                acc(bn.x, &mut |gx| {
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let k = gamma[ch] * bn.inv_std[ch];
                            for r in 0..rest {
                                let i = at(bi, ch, r);
                                gx[i] += if bn.batch_stats {
                                    k * (g[i] - sum_g[ch] / count - bn.x_hat[i] * sum_gx[ch] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
        }
    }

    fn conv1d_backward(&self, x: Var, w: Var, b: Var, g: &[f64], acc: GradSink<'_>) {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, k) = (tw.shape()[0], tw.shape()[2]);
        let pad = (k / 2) as isize;
        let (xd, wd) = (tx.data(), tw.data());
        let range = |kk: usize| {
            let shift = kk as isize - pad;
            let lo = (-shift).max(0) as usize;
            let hi = (len as isize - shift).min(len as isize).max(0) as usize;
            (shift, lo, hi)
        };
        acc(b, &mut |gb| {
            for bi in 0..bsz {
                for (o, gbo) in gb.iter_mut().enumerate() {
                    *gbo += g[(bi * cout + o) * len..(bi * cout + o + 1) * len].iter().sum::<f64>();
                }
            }
        });
        acc(w, &mut |gw| {
            for bi in 0..bsz {
                for o in 0..cout {
                    let grow = &g[(bi * cout + o) * len..(bi * cout + o + 1) * len];
                    for c in 0..cin {
                        let xrow = &xd[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                        for kk in 0..k {
                            let (shift, lo, hi) = range(kk);
                            let mut s = 0.0;
                            for l in lo..hi {
                                s += grow[l] * xrow[(l as isize + shift) as usize];
                            }
                            gw[(o * cin + c) * k + kk] += s;
                        }
                    }
                }
            }
        });
        acc(x, &mut |gx| {
            for bi in 0..bsz {
                for o in 0..cout {
                    let grow = &g[(bi * cout + o) * len..(bi * cout + o + 1) * len];
                    for c in 0..cin {
                        let gxrow = &mut gx[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                        for kk in 0..k {
                            let wv = wd[(o * cin + c) * k + kk];
                            let (shift, lo, hi) = range(kk);
                            for l in lo..hi {
                                gxrow[(l as isize + shift) as usize] += wv * grow[l];
                            }
                        }
                    }
                }
            }
        });
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Var, g: &[f64], acc: GradSink<'_>) {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (bsz, cin, h, wdt) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (cout, k) = (tw.shape()[0], tw.shape()[2]);
        let pad = (k / 2) as isize;
        let plane = h * wdt;
        let (xd, wd) = (tx.data(), tw.data());
        let range = |kk: usize, n: usize| {
            let d = kk as isize - pad;
            (
                (-d).max(0) as usize,
                (n as isize - d).min(n as isize).max(0) as usize,
                d,
            )
        };
        acc(b, &mut |gb| {
            for bi in 0..bsz {
                for (o, gbo) in gb.iter_mut().enumerate() {
                    *gbo += g[(bi * cout + o) * plane..(bi * cout + o + 1) * plane]
                        .iter()
                        .sum::<f64>();
                }
            }
        });
        let need_w = self.nodes[w.0].requires_grad;
        let need_x = self.nodes[x.0].requires_grad;
        let mut gw_local = vec![0.0; wd.len()];
        let mut gx_local = vec![0.0; xd.len()];
        for bi in 0..bsz {
            for o in 0..cout {
                let gplane = &g[(bi * cout + o) * plane..(bi * cout + o + 1) * plane];
                for c in 0..cin {
                    let xoff = (bi * cin + c) * plane;
                    for ki in 0..k {
                        let (ilo, ihi, di) = range(ki, h);
                        for kj in 0..k {
                            let (jlo, jhi, dj) = range(kj, wdt);
                            let widx = ((o * cin + c) * k + ki) * k + kj;
                            let wv = wd[widx];
                            let mut sw = 0.0;
                            for i in ilo..ihi {
                                let srow = xoff + (i as isize + di) as usize * wdt;
                                for j in jlo..jhi {
                                    let xi = (srow as isize + j as isize + dj) as usize;
                                    let gv = gplane[i * wdt + j];
                                    sw += gv * xd[xi];
                                    if need_x {
                                        gx_local[xi] += gv * wv;
                                    }
                                }
                            }
                            if need_w {
                                gw_local[widx] += sw;
                            }
                        }
                    }
                }
            }
        }
        acc(w, &mut |gw| gw.iter_mut().zip(&gw_local).for_each(|(o, &v)| *o += v));
        acc(x, &mut |gx| gx.iter_mut().zip(&gx_local).for_each(|(o, &v)| *o += v));
    }
}

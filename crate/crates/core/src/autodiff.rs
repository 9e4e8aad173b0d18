//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive op in forward execution order. Each
//! recorded value is addressed by a [`Var`] handle. Parameters are borrowed
//! into the tape as leaves, so a forward pass over frozen weights copies
//! nothing but its inputs.
//!
//! [`Tape::backward`] walks the record once in reverse and may be called at
//! most once per tape; run a new forward pass on a fresh tape to differentiate
//! again. Forward values stay readable after backward.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddChannel(Var, Var),
    Conv1d { input: Var, weight: Var, bias: Option<Var> },
    Matmul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Gated(Var, Var),
    Narrow { src: Var, start: usize },
    Concat(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    spent: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves the gradient out; a leaf that did not influence the loss gets zeros.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

/// `b` broadcasts against `a` when shapes match, `b` is a single element, or
/// `b`'s shape equals `a`'s trailing dimensions.
fn broadcastable(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || b.len() == 1 || a.shape().ends_with(b.shape())
}

fn two_d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [c, l] => Ok((c, l)),
        _ => Err(Error::ShapeMismatch { op, lhs: t.shape().to_vec(), rhs: vec![0, 0] }),
    }
}

/// Output frames `lo..hi` reached by a kernel tap at offset `s` with same
/// padding, together with the source start `lo + s`. `None` when the tap
/// falls entirely into padding.
#[inline]
fn tap_range(s: isize, len: usize) -> Option<(usize, usize, usize)> {
    let lo = if s < 0 { (-s) as usize } else { 0 };
    let hi = if s > 0 { len.saturating_sub(s as usize) } else { len };
    (lo < hi).then(|| (lo, hi, (lo as isize + s) as usize))
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, c_in: usize, c_out: usize, k: usize, len: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; c_out * len];
    for o in 0..c_out {
        let row = &mut out[o * len..(o + 1) * len];
        if let Some(b) = b {
            row.fill(b[o]);
        }
        for i in 0..c_in {
            let xrow = &x[i * len..(i + 1) * len];
            let wk = &w[(o * c_in + i) * k..(o * c_in + i + 1) * k];
            for (tap, &wv) in wk.iter().enumerate() {
                let s = tap as isize - pad;
                let Some((lo, hi, from)) = tap_range(s, len) else { continue };
                let src = &xrow[from..from + hi - lo];
                for (r, &xv) in row[lo..hi].iter_mut().zip(src) {
                    *r += wv * xv;
                }
            }
        }
    }
    out
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Records a borrowed leaf, typically a model parameter.
    pub fn leaf(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, requires_grad)
    }

    /// Records an owned leaf.
    pub fn leaf_owned(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    /// Records a constant input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf_owned(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True when every recorded value is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.is_finite())
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcastable(ta, tb) {
            return Err(mismatch(name, ta, tb));
        }
        let bd = tb.data();
        let n = bd.len();
        let data = ta.data().iter().enumerate().map(|(j, &x)| f(x, bd[j % n])).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.derived(out, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.derived(out, Op::AddScalar(a), &[a])
    }

    /// Adds a per-channel vector (`[C]` or `[C, 1]`) to every frame of a `[C, L]` tensor.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let (c, l) = two_d("add_channel", tx)?;
        if tv.len() != c {
            return Err(mismatch("add_channel", tx, tv));
        }
        let vd = tv.data();
        let data = tx.data().iter().enumerate().map(|(j, &a)| a + vd[j / l]).collect();
        let out = Tensor::new(vec![c, l], data)?;
        Ok(self.derived(out, Op::AddChannel(x, v), &[x, v]))
    }

    /// Same-padded 1-D cross-correlation: `[C_in, L] * [C_out, C_in, K] -> [C_out, L]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(input), self.value(weight));
        let (c_in, len) = two_d("conv1d", tx)?;
        let &[c_out, w_in, k] = tw.shape() else {
            return Err(mismatch("conv1d", tx, tw));
        };
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        if w_in != c_in {
            return Err(mismatch("conv1d", tx, tw));
        }
        let bias_data = match bias {
            Some(b) => {
                let tb = self.value(b);
                if tb.len() != c_out {
                    return Err(mismatch("conv1d bias", tw, tb));
                }
                Some(tb.data())
            }
            None => None,
        };
        let data = conv1d_forward(tx.data(), tw.data(), bias_data, c_in, c_out, k, len);
        let out = Tensor::new(vec![c_out, len], data)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.derived(out, Op::Conv1d { input, weight, bias }, &parents))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = two_d("matmul", ta)?;
        let (k2, n) = two_d("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::tanh);
        self.derived(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    /// WaveNet gate `tanh(a) * sigmoid(b)`.
    pub fn gated(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.zip_map(tb, |x, y| libm::tanh(x) * sigmoid(y)).map_err(|_| mismatch("gated", ta, tb))?;
        Ok(self.derived(out, Op::Gated(a, b), &[a, b]))
    }

    /// Channel slice `[start, start + len)` of a `[C, L]` tensor.
    pub fn narrow(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        let (c, l) = two_d("narrow", t)?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape { shape: vec![len, l], len: t.len() });
        }
        let out = Tensor::new(vec![len, l], t.data()[start * l..(start + len) * l].to_vec())?;
        Ok(self.derived(out, Op::Narrow { src, start }, &[src]))
    }

    /// Stacks `[C1, L]` on top of `[C2, L]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ca, la) = two_d("concat", ta)?;
        let (cb, lb) = two_d("concat", tb)?;
        if la != lb {
            return Err(mismatch("concat", ta, tb));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::new(vec![ca + cb, la], data)?;
        Ok(self.derived(out, Op::Concat(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.derived(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.derived(out, Op::Mean(a), &[a])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(mismatch("mse", tp, tt));
        }
        let n = tp.len() as f64;
        let s: f64 = tp.data().iter().zip(tt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(self.derived(Tensor::scalar(s / n), Op::Mse(pred, target), &[pred, target]))
    }

    /// Reverse sweep from a scalar `loss`. Succeeds once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.and_then(|g| Tensor::new(n.value.shape().to_vec(), g).ok()))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulates `f(j)` into the gradient of `v` for every element j.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !wants(v) {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(b, &mut |gb| {
                    let n = gb.len();
                    g.iter().enumerate().for_each(|(j, &y)| gb[j % n] += sign * y);
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                let n = bd.len();
                acc(a, &mut |ga| g.iter().enumerate().for_each(|(j, &y)| ga[j] += y * bd[j % n]));
                acc(b, &mut |gb| g.iter().enumerate().for_each(|(j, &y)| gb[j % n] += y * ad[j]));
            }
            Op::Scale(a, k) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += k * y)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)),
            Op::AddChannel(x, v) => {
                let l = node.value.frames();
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &y)| *a += y));
                acc(v, &mut |gv| gv.iter_mut().enumerate().for_each(|(c, a)| *a += g[c * l..(c + 1) * l].iter().sum::<f64>()));
            }
            Op::Conv1d { input, weight, bias } => {
                let w = &self.nodes[weight.0].value;
                let &[c_out, c_in, k] = w.shape() else { unreachable!() };
                let len = node.value.frames();
                let pad = (k / 2) as isize;
                let (xd, wd) = (val(input), w.data());
                acc(input, &mut |gx| {
                    for o in 0..c_out {
                        let gy = &g[o * len..(o + 1) * len];
                        for ci in 0..c_in {
                            let gxr = &mut gx[ci * len..(ci + 1) * len];
                            for tap in 0..k {
                                let wv = wd[(o * c_in + ci) * k + tap];
                                let s = tap as isize - pad;
                                let Some((lo, hi, from)) = tap_range(s, len) else { continue };
                                let dst = &mut gxr[from..from + hi - lo];
                                for (d, &y) in dst.iter_mut().zip(&gy[lo..hi]) {
                                    *d += wv * y;
                                }
                            }
                        }
                    }
                });
                acc(weight, &mut |gw| {
                    for o in 0..c_out {
                        let gy = &g[o * len..(o + 1) * len];
                        for ci in 0..c_in {
                            let xr = &xd[ci * len..(ci + 1) * len];
                            for tap in 0..k {
                                let s = tap as isize - pad;
                                let Some((lo, hi, from)) = tap_range(s, len) else { continue };
                                let src = &xr[from..from + hi - lo];
                                let dot: f64 = gy[lo..hi].iter().zip(src).map(|(a, b)| a * b).sum();
                                gw[(o * c_in + ci) * k + tap] += dot;
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    acc(b, &mut |gb| gb.iter_mut().enumerate().for_each(|(o, a)| *a += g[o * len..(o + 1) * len].iter().sum::<f64>()));
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let (ad, bd) = (ta.data(), tb.data());
                acc(a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += (0..n).map(|j| g[i * n + j] * bd[p * n + j]).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for p in 0..k {
                        for j in 0..n {
                            gb[p * n + j] += (0..m).map(|i| ad[i * k + p] * g[i * n + j]).sum::<f64>();
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(a, &mut |ga| ga.iter_mut().zip(g).zip(y).for_each(|((x, &gy), &t)| *x += gy * (1.0 - t * t)));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(a, &mut |ga| ga.iter_mut().zip(g).zip(y).for_each(|((x, &gy), &s)| *x += gy * s * (1.0 - s)));
            }
            Op::Gated(a, b) => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for j in 0..g.len() {
                        let t = libm::tanh(ad[j]);
                        ga[j] += g[j] * sigmoid(bd[j]) * (1.0 - t * t);
                    }
                });
                acc(b, &mut |gb| {
                    for j in 0..g.len() {
                        let s = sigmoid(bd[j]);
                        gb[j] += g[j] * libm::tanh(ad[j]) * s * (1.0 - s);
                    }
                });
            }
            Op::Narrow { src, start } => {
                let l = node.value.frames();
                acc(src, &mut |gs| {
                    gs[start * l..start * l + g.len()].iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                });
            }
            Op::Concat(a, b) => {
                let na = self.nodes[a.0].value.len();
                acc(a, &mut |ga| ga.iter_mut().zip(&g[..na]).for_each(|(x, &y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(&g[na..]).for_each(|(x, &y)| *x += y));
            }
            Op::Sum(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Mse(p, t) => {
                let (pd, td) = (val(p), val(t));
                let k = 2.0 * g[0] / pd.len() as f64;
                acc(p, &mut |gp| gp.iter_mut().enumerate().for_each(|(j, x)| *x += k * (pd[j] - td[j])));
                acc(t, &mut |gt| gt.iter_mut().enumerate().for_each(|(j, x)| *x -= k * (pd[j] - td[j])));
            }
        }
    }
}

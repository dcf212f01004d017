//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation applied
//! to its nodes. Parameters enter the tape through [`Graph::param`]; a
//! parameter requires a gradient only when the graph runs in
//! [`Mode::Train`] and the parameter is not frozen. [`Graph::backward`]
//! walks the tape in reverse and returns gradients for exactly those
//! parameters.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_shape, invalid, Result};
use crate::kernels::{col2im, im2col, nearest_src, sigmoid, ConvGeom};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{matmul, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Trainable parameters require gradients; batch norm uses batch statistics.
    Train,
    /// Nothing requires gradients; batch norm uses running statistics.
    Eval,
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    /// `x[n, c, h, w] + e[n, c]`.
    AddNc(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// Group normalization (instance norm when `groups == channels`).
    GroupNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    /// Batch normalization with batch statistics.
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    /// Affine per-channel transform with constant scale (batch norm in eval mode).
    ChannelAffine {
        x: Var,
        scale: Vec<F>,
        gamma: Option<Var>,
        beta: Option<Var>,
        normalized: Vec<F>,
    },
    Silu(Var),
    Relu(Var),
    LeakyRelu(Var, F),
    Exp(Var),
    Clamp(Var, F, F),
    UpsampleNearest(Var),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    Reshape(Var),
    Transpose(Var),
    Bmm(Var, Var),
    Softmax(Var),
    MeanAll(Var),
    Mse(Var, Var),
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct RunningStatUpdate<F> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<F>,
    pub batch_var: Vec<F>,
}

pub struct Graph<'p, F: Scalar> {
    store: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    params: BTreeMap<ParamId, Var>,
    mode: Mode,
    running_updates: Vec<RunningStatUpdate<F>>,
}

/// Images per im2col batch, keeping the column buffer near 4M elements.
fn conv_chunk(rows: usize, plane: usize, n: usize) -> usize {
    ((1usize << 22) / (rows * plane).max(1)).clamp(1, n.max(1))
}

fn out_of_grad<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(store: &'p ParamStore<F>, mode: Mode) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: BTreeMap::new(),
            mode,
            running_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.store
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    #[inline]
    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Returns the (unique) tape node for parameter `id`.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let rg = self.mode == Mode::Train && !self.store.is_frozen(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn take_running_updates(&mut self) -> Vec<RunningStatUpdate<F>> {
        core::mem::take(&mut self.running_updates)
    }

    // ----- elementwise -----

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let va = self.value(a);
        let vb = self.value(b);
        va.zip_with(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// Broadcast-adds a per-(sample, channel) vector over the spatial axes.
    pub fn add_nc(&mut self, x: Var, e: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        check_shape(&[n, c], self.shape(e))?;
        let mut t = self.value(x).clone();
        let ev = self.value(e).data();
        let hw = h * w;
        for (i, chunk) in t.data_mut().chunks_mut(hw).enumerate() {
            let add = ev[i];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        let rg = self.rg(x) || self.rg(e);
        Ok(self.push(t, Op::AddNc(x, e), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > F::zero() { v } else { F::zero() },
            Op::Relu(x),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        self.unary(
            x,
            |v| if v > F::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    // ----- convolution / linear -----

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, k, k2) = self.value(w).dims4();
        if wcin != cin || k != k2 {
            return Err(invalid!(
                "conv weight {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(x)
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid!(
                "input {:?} smaller than kernel {}",
                self.shape(x),
                k
            ));
        }
        if let Some(b) = b {
            check_shape(&[cout], self.shape(b))?;
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad);
        let plane = geom.col_cols();
        let rows = geom.col_rows();
        let chunk = conv_chunk(rows, plane, n);
        let mut out = Tensor::zeros(&[n, cout, geom.ho, geom.wo]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let mut cols = vec![F::zero(); rows * chunk * plane];
            let mut tmp = vec![F::zero(); cout * chunk * plane];
            let in_stride = cin * h * wd;
            let out_stride = cout * plane;
            let od = out.data_mut();
            for start in (0..n).step_by(chunk) {
                let nb = chunk.min(n - start);
                let ld = nb * plane;
                for j in 0..nb {
                    let xi = &xv[(start + j) * in_stride..(start + j + 1) * in_stride];
                    im2col(xi, &geom, &mut cols, ld, j * plane);
                }
                matmul(wv, false, &cols, false, &mut tmp, cout, rows, ld, false);
                for j in 0..nb {
                    let oi = &mut od[(start + j) * out_stride..(start + j + 1) * out_stride];
                    for (c, row) in oi.chunks_mut(plane).enumerate() {
                        row.copy_from_slice(&tmp[c * ld + j * plane..c * ld + (j + 1) * plane]);
                        if let Some(bv) = bv {
                            let bc = bv[c];
                            row.iter_mut().for_each(|v| *v += bc);
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// `y = x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(invalid!("linear: input {:?} vs weight {:?}", xs, ws));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, dout]);
        matmul(
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            out.data_mut(),
            n,
            din,
            dout,
            false,
        );
        if let Some(b) = b {
            check_shape(&[dout], self.shape(b))?;
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(dout) {
                row.iter_mut().zip(&bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    // ----- normalization -----

    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if groups == 0 || c % groups != 0 {
            return Err(invalid!(
                "{} channels not divisible into {} groups",
                c,
                groups
            ));
        }
        for p in [gamma, beta].into_iter().flatten() {
            check_shape(&[c], self.shape(p))?;
        }
        let cg = c / groups;
        let m = cg * h * w;
        let eps = F::of(eps);
        let mut out = self.value(x).clone();
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let gv = gamma.map(|g| self.value(g).data().to_vec());
        let bv = beta.map(|b| self.value(b).data().to_vec());
        let mf = F::of(m as f64);
        for (gi, chunk) in out.data_mut().chunks_mut(m).enumerate() {
            let mean = chunk.iter().copied().sum::<F>() / mf;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / mf;
            let rstd = F::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let g = gi % groups;
            for (ci, plane) in chunk.chunks_mut(h * w).enumerate() {
                let ch = g * cg + ci;
                let ga = gv.as_ref().map_or(F::one(), |g| g[ch]);
                let be = bv.as_ref().map_or(F::zero(), |b| b[ch]);
                plane
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean) * rstd * ga + be);
            }
        }
        let rg =
            self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Batch normalization. In [`Mode::Train`] it normalizes with batch
    /// statistics and queues a running-statistics update; in
    /// [`Mode::Eval`] it uses the running statistics stored in `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        running: (ParamId, ParamId),
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        for p in [gamma, beta].into_iter().flatten() {
            check_shape(&[c], self.shape(p))?;
        }
        let hw = h * w;
        let epsf = F::of(eps);
        let gv = gamma.map(|g| self.value(g).data().to_vec());
        let bv = beta.map(|b| self.value(b).data().to_vec());
        let xv = self.value(x).data();
        let rg =
            self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        if self.mode == Mode::Eval {
            let rm = self.store.value(running.0).data();
            let rv = self.store.value(running.1).data();
            let scale: Vec<F> = rv.iter().map(|&v| F::one() / (v + epsf).sqrt()).collect();
            let mut normalized = xv.to_vec();
            for (i, plane) in normalized.chunks_mut(hw).enumerate() {
                let ch = i % c;
                plane
                    .iter_mut()
                    .for_each(|v| *v = (*v - rm[ch]) * scale[ch]);
            }
            let mut out = normalized.clone();
            for (i, plane) in out.chunks_mut(hw).enumerate() {
                let ch = i % c;
                let ga = gv.as_ref().map_or(F::one(), |g| g[ch]);
                let be = bv.as_ref().map_or(F::zero(), |b| b[ch]);
                plane.iter_mut().for_each(|v| *v = *v * ga + be);
            }
            let t = Tensor::from_vec(&[n, c, h, w], out)?;
            return Ok(self.push(
                t,
                Op::ChannelAffine {
                    x,
                    scale,
                    gamma,
                    beta,
                    normalized,
                },
                rg,
            ));
        }
        let cnt = F::of((n * hw) as f64);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for (i, plane) in xv.chunks(hw).enumerate() {
            mean[i % c] += plane.iter().copied().sum::<F>();
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        for (i, plane) in xv.chunks(hw).enumerate() {
            let m = mean[i % c];
            var[i % c] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<F>();
        }
        var.iter_mut().for_each(|v| *v /= cnt);
        let rstd: Vec<F> = var.iter().map(|&v| F::one() / (v + epsf).sqrt()).collect();
        let mut out = xv.to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let ch = i % c;
            let ga = gv.as_ref().map_or(F::one(), |g| g[ch]);
            let be = bv.as_ref().map_or(F::zero(), |b| b[ch]);
            plane
                .iter_mut()
                .for_each(|v| *v = (*v - mean[ch]) * rstd[ch] * ga + be);
        }
        let unbiased = if n * hw > 1 {
            F::of((n * hw) as f64 / (n * hw - 1) as f64)
        } else {
            F::one()
        };
        self.running_updates.push(RunningStatUpdate {
            mean_id: running.0,
            var_id: running.1,
            batch_mean: mean.clone(),
            batch_var: var.iter().map(|&v| v * unbiased).collect(),
        });
        let t = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    // ----- shape ops -----

    /// Nearest-neighbour resize of the spatial axes to `(oh, ow)`.
    pub fn upsample_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let xv = self.value(x).data();
            let od = out.data_mut();
            for p in 0..n * c {
                let src = &xv[p * h * w..(p + 1) * h * w];
                let dst = &mut od[p * oh * ow..(p + 1) * oh * ow];
                for y in 0..oh {
                    let sy = nearest_src(y, h, oh);
                    for xx in 0..ow {
                        dst[y * ow + xx] = src[sy * w + nearest_src(xx, w, ow)];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::UpsampleNearest(x), rg)
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| invalid!("concat of nothing"))?;
        let (n, _, h, w) = self.value(first).dims4();
        let mut ctot = 0;
        for &v in xs {
            let (nn, c, hh, ww) = self.value(v).dims4();
            if nn != n || hh != h || ww != w {
                return Err(invalid!(
                    "concat: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(v)
                ));
            }
            ctot += c;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * ctot * hw);
        for i in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                data.extend_from_slice(&self.value(v).data()[i * c * hw..(i + 1) * c * hw]);
            }
        }
        let t = Tensor::from_vec(&[n, ctot, h, w], data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::Concat(xs.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        if start + len > c {
            return Err(invalid!(
                "channel slice {}..{} of {}",
                start,
                start + len,
                c
            ));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            data.extend_from_slice(&xv[base..base + len * hw]);
        }
        let t = Tensor::from_vec(&[n, len, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceChannels(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(invalid!("transpose expects rank 3, got {:?}", s));
        }
        let (b, m, n) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut data = vec![F::zero(); b * m * n];
        for bi in 0..b {
            let src = &xv[bi * m * n..(bi + 1) * m * n];
            let dst = &mut data[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let t = Tensor::from_vec(&[b, n, m], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Batched matrix product `[b, m, k] × [b, k, n] → [b, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(invalid!("bmm: {:?} × {:?}", sa, sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros(&[bt, m, n]);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let od = out.data_mut();
            for i in 0..bt {
                matmul(
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    false,
                    &mut od[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Bmm(a, b), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let last = *self.shape(x).last().unwrap_or(&1);
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(last.max(1)) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    // ----- reductions / losses -----

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<F>() / F::of(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        check_shape(self.shape(a), self.shape(b))?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let s = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<F>()
            / F::of(va.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    // ----- backward -----

    /// Reverse pass from scalar `loss`. Returns gradients of every parameter
    /// that requires one.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(invalid!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut out = Grads::default();
        for (&id, &v) in &self.params {
            if self.rg(v) {
                if let Some(g) = grads[v.0].take() {
                    let t = Tensor::from_vec(self.store.value(id).shape(), g)?;
                    out.map.insert(id, t);
                }
            }
        }
        Ok(out)
    }

    fn backward_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let buf = out_of_grad(grads, v, g.len());
                        buf.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let buf = out_of_grad(grads, *a, g.len());
                    buf.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if self.rg(*b) {
                    let buf = out_of_grad(grads, *b, g.len());
                    buf.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let vb = self.value(b).data().to_vec();
                    let buf = out_of_grad(grads, a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * vb[i];
                    }
                }
                if self.rg(b) {
                    let va = self.value(a).data().to_vec();
                    let buf = out_of_grad(grads, b, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                let buf = out_of_grad(grads, *a, g.len());
                buf.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let buf = out_of_grad(grads, *a, g.len());
                buf.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            Op::AddNc(x, e) => {
                if self.rg(*x) {
                    let buf = out_of_grad(grads, *x, g.len());
                    buf.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if self.rg(*e) {
                    let (_, _, h, w) = out.dims4();
                    let ne = self.value(*e).numel();
                    let buf = out_of_grad(grads, *e, ne);
                    for (i, chunk) in g.chunks(h * w).enumerate() {
                        buf[i] += chunk.iter().copied().sum::<F>();
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => self.backward_conv(*x, *w, *b, geom, g, grads),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                if self.rg(*x) {
                    let wv = self.value(*w).data();
                    let buf = out_of_grad(grads, *x, n * din);
                    matmul(g, false, wv, false, buf, n, dout, din, true);
                }
                if self.rg(*w) {
                    let xv = self.value(*x).data();
                    let buf = out_of_grad(grads, *w, dout * din);
                    matmul(g, true, xv, false, buf, dout, n, din, true);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let buf = out_of_grad(grads, *b, dout);
                        for row in g.chunks(dout) {
                            buf.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => self.backward_group_norm(*x, *gamma, *beta, *groups, mean, rstd, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => self.backward_batch_norm(*x, *gamma, *beta, mean, rstd, g, grads),
            Op::ChannelAffine {
                x,
                scale,
                gamma,
                beta,
                normalized,
            } => {
                let (_, c, h, w) = out.dims4();
                let hw = h * w;
                let gv = gamma.map(|v| self.value(v).data().to_vec());
                if self.rg(*x) {
                    let buf = out_of_grad(grads, *x, g.len());
                    for (i, (d, gs)) in buf.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        let ch = i % c;
                        let f = scale[ch] * gv.as_ref().map_or(F::one(), |v| v[ch]);
                        d.iter_mut().zip(gs).for_each(|(d, &s)| *d += s * f);
                    }
                }
                if let Some(gm) = gamma {
                    if self.rg(*gm) {
                        let buf = out_of_grad(grads, *gm, c);
                        for (i, (gs, xn)) in g.chunks(hw).zip(normalized.chunks(hw)).enumerate() {
                            buf[i % c] += gs.iter().zip(xn).map(|(&a, &b)| a * b).sum::<F>();
                        }
                    }
                }
                if let Some(bt) = beta {
                    if self.rg(*bt) {
                        let buf = out_of_grad(grads, *bt, c);
                        for (i, gs) in g.chunks(hw).enumerate() {
                            buf[i % c] += gs.iter().copied().sum::<F>();
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<F> = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &s)| {
                        let sg = sigmoid(v);
                        s * sg * (F::one() + v * (F::one() - sg))
                    })
                    .collect();
                let buf = out_of_grad(grads, *x, g.len());
                buf.iter_mut().zip(d).for_each(|(b, v)| *b += v);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                let buf = out_of_grad(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > F::zero() {
                        buf[i] += g[i];
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data().to_vec();
                let buf = out_of_grad(grads, *x, g.len());
                for i in 0..g.len() {
                    buf[i] += if xv[i] > F::zero() {
                        g[i]
                    } else {
                        g[i] * *slope
                    };
                }
            }
            Op::Exp(x) => {
                let ov = out.data().to_vec();
                let buf = out_of_grad(grads, *x, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * ov[i];
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data().to_vec();
                let buf = out_of_grad(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        buf[i] += g[i];
                    }
                }
            }
            Op::UpsampleNearest(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, oh, ow) = out.dims4();
                let buf = out_of_grad(grads, *x, n * c * h * w);
                for p in 0..n * c {
                    let dst = &mut buf[p * h * w..(p + 1) * h * w];
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..oh {
                        let sy = nearest_src(y, h, oh);
                        for xx in 0..ow {
                            dst[sy * w + nearest_src(xx, w, ow)] += src[y * ow + xx];
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let (n, ctot, h, w) = out.dims4();
                let hw = h * w;
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.rg(v) {
                        let buf = out_of_grad(grads, v, n * c * hw);
                        for i in 0..n {
                            let src = &g[(i * ctot + off) * hw..(i * ctot + off + c) * hw];
                            buf[i * c * hw..(i + 1) * c * hw]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceChannels(x, start) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = out.shape()[1];
                let hw = h * w;
                let buf = out_of_grad(grads, *x, n * c * hw);
                for i in 0..n {
                    let dst = &mut buf[(i * c + start) * hw..(i * c + start + len) * hw];
                    let src = &g[i * len * hw..(i + 1) * len * hw];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Transpose(x) => {
                let s = out.shape();
                let (b, n, m) = (s[0], s[1], s[2]);
                let buf = out_of_grad(grads, *x, g.len());
                for bi in 0..b {
                    let src = &g[bi * m * n..(bi + 1) * m * n];
                    let dst = &mut buf[bi * m * n..(bi + 1) * m * n];
                    for j in 0..n {
                        for i in 0..m {
                            dst[i * n + j] += src[j * m + i];
                        }
                    }
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let buf = out_of_grad(grads, *a, bt * m * k);
                    for i in 0..bt {
                        matmul(
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            true,
                            &mut buf[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            true,
                        );
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let buf = out_of_grad(grads, *b, bt * k * n);
                    for i in 0..bt {
                        matmul(
                            &av[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut buf[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                            true,
                        );
                    }
                }
            }
            Op::Softmax(x) => {
                let last = *out.shape().last().unwrap_or(&1);
                let ov = out.data();
                let mut d = vec![F::zero(); g.len()];
                for ((dr, gr), yr) in d.chunks_mut(last).zip(g.chunks(last)).zip(ov.chunks(last)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>();
                    for i in 0..last {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                let buf = out_of_grad(grads, *x, g.len());
                buf.iter_mut().zip(d).for_each(|(b, v)| *b += v);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                let s = g[0] / F::of(n as f64);
                let buf = out_of_grad(grads, *x, n);
                buf.iter_mut().for_each(|d| *d += s);
            }
            Op::Mse(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let n = va.len();
                let s = g[0] * F::of(2.0 / n as f64);
                let diff: Vec<F> = va.iter().zip(vb).map(|(&x, &y)| (x - y) * s).collect();
                if self.rg(*a) {
                    let buf = out_of_grad(grads, *a, n);
                    buf.iter_mut().zip(&diff).for_each(|(d, &v)| *d += v);
                }
                if self.rg(*b) {
                    let buf = out_of_grad(grads, *b, n);
                    buf.iter_mut().zip(&diff).for_each(|(d, &v)| *d -= v);
                }
            }
        }
        Ok(())
    }

    fn backward_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (n, cin, h, wd) = self.value(x).dims4();
        let cout = self.shape(w)[0];
        let plane = geom.col_cols();
        let rows = geom.col_rows();
        let in_stride = cin * h * wd;
        let out_stride = cout * plane;
        if let Some(b) = b {
            if self.rg(b) {
                let buf = out_of_grad(grads, b, cout);
                for i in 0..n {
                    for (c, row) in g[i * out_stride..(i + 1) * out_stride]
                        .chunks(plane)
                        .enumerate()
                    {
                        buf[c] += row.iter().copied().sum::<F>();
                    }
                }
            }
        }
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        if !need_w && !need_x {
            return;
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let chunk = conv_chunk(rows, plane, n);
        let mut cols = vec![F::zero(); if need_w { rows * chunk * plane } else { 0 }];
        let mut dcols = vec![F::zero(); if need_x { rows * chunk * plane } else { 0 }];
        let mut gp = vec![F::zero(); cout * chunk * plane];
        let mut dw = vec![F::zero(); if need_w { cout * rows } else { 0 }];
        let mut dx = vec![F::zero(); if need_x { n * in_stride } else { 0 }];
        for start in (0..n).step_by(chunk) {
            let nb = chunk.min(n - start);
            let ld = nb * plane;
            for j in 0..nb {
                let gi = &g[(start + j) * out_stride..(start + j + 1) * out_stride];
                for (c, row) in gi.chunks(plane).enumerate() {
                    gp[c * ld + j * plane..c * ld + (j + 1) * plane].copy_from_slice(row);
                }
            }
            if need_w {
                for j in 0..nb {
                    let xi = &xv[(start + j) * in_stride..(start + j + 1) * in_stride];
                    im2col(xi, geom, &mut cols, ld, j * plane);
                }
                matmul(&gp, false, &cols, true, &mut dw, cout, ld, rows, true);
            }
            if need_x {
                matmul(wv, true, &gp, false, &mut dcols, rows, cout, ld, false);
                for j in 0..nb {
                    let dxi = &mut dx[(start + j) * in_stride..(start + j + 1) * in_stride];
                    col2im(&dcols, geom, dxi, ld, j * plane);
                }
            }
        }
        if need_w {
            let buf = out_of_grad(grads, w, dw.len());
            buf.iter_mut().zip(dw).for_each(|(d, v)| *d += v);
        }
        if need_x {
            let buf = out_of_grad(grads, x, dx.len());
            buf.iter_mut().zip(dx).for_each(|(d, v)| *d += v);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_group_norm(
        &self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        mean: &[F],
        rstd: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (_, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let cg = c / groups;
        let m = cg * hw;
        let xv = self.value(x).data();
        let gv = gamma.map(|v| self.value(v).data().to_vec());
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        let mut dx = vec![F::zero(); xv.len()];
        let mf = F::of(m as f64);
        for (gi, (xs, gs)) in xv.chunks(m).zip(g.chunks(m)).enumerate() {
            let (mu, rs) = (mean[gi], rstd[gi]);
            let grp = gi % groups;
            let mut sum_d = F::zero();
            let mut sum_dx = F::zero();
            for ci in 0..cg {
                let ch = grp * cg + ci;
                let ga = gv.as_ref().map_or(F::one(), |v| v[ch]);
                for j in ci * hw..(ci + 1) * hw {
                    let xh = (xs[j] - mu) * rs;
                    dgamma[ch] += gs[j] * xh;
                    dbeta[ch] += gs[j];
                    let dxh = gs[j] * ga;
                    sum_d += dxh;
                    sum_dx += dxh * xh;
                }
            }
            let md = sum_d / mf;
            let mdx = sum_dx / mf;
            let out = &mut dx[gi * m..(gi + 1) * m];
            for ci in 0..cg {
                let ch = grp * cg + ci;
                let ga = gv.as_ref().map_or(F::one(), |v| v[ch]);
                for j in ci * hw..(ci + 1) * hw {
                    let xh = (xs[j] - mu) * rs;
                    out[j] = rs * (gs[j] * ga - md - xh * mdx);
                }
            }
        }
        if self.rg(x) {
            let buf = out_of_grad(grads, x, dx.len());
            buf.iter_mut().zip(dx).for_each(|(d, v)| *d += v);
        }
        if let Some(gm) = gamma {
            if self.rg(gm) {
                let buf = out_of_grad(grads, gm, c);
                buf.iter_mut().zip(dgamma).for_each(|(d, v)| *d += v);
            }
        }
        if let Some(bt) = beta {
            if self.rg(bt) {
                let buf = out_of_grad(grads, bt, c);
                buf.iter_mut().zip(dbeta).for_each(|(d, v)| *d += v);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batch_norm(
        &self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[F],
        rstd: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = gamma.map(|v| self.value(v).data().to_vec());
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        let mut sum_d = vec![F::zero(); c];
        let mut sum_dx = vec![F::zero(); c];
        for (i, (xs, gs)) in xv.chunks(hw).zip(g.chunks(hw)).enumerate() {
            let ch = i % c;
            let ga = gv.as_ref().map_or(F::one(), |v| v[ch]);
            for j in 0..hw {
                let xh = (xs[j] - mean[ch]) * rstd[ch];
                dgamma[ch] += gs[j] * xh;
                dbeta[ch] += gs[j];
                sum_d[ch] += gs[j] * ga;
                sum_dx[ch] += gs[j] * ga * xh;
            }
        }
        let cnt = F::of((n * hw) as f64);
        if self.rg(x) {
            let buf = out_of_grad(grads, x, xv.len());
            for (i, (xs, gs)) in xv.chunks(hw).zip(g.chunks(hw)).enumerate() {
                let ch = i % c;
                let ga = gv.as_ref().map_or(F::one(), |v| v[ch]);
                let md = sum_d[ch] / cnt;
                let mdx = sum_dx[ch] / cnt;
                let dst = &mut buf[i * hw..(i + 1) * hw];
                for j in 0..hw {
                    let xh = (xs[j] - mean[ch]) * rstd[ch];
                    dst[j] += rstd[ch] * (gs[j] * ga - md - xh * mdx);
                }
            }
        }
        if let Some(gm) = gamma {
            if self.rg(gm) {
                let buf = out_of_grad(grads, gm, c);
                buf.iter_mut().zip(dgamma).for_each(|(d, v)| *d += v);
            }
        }
        if let Some(bt) = beta {
            if self.rg(bt) {
                let buf = out_of_grad(grads, bt, c);
                buf.iter_mut().zip(dbeta).for_each(|(d, v)| *d += v);
            }
        }
    }
}

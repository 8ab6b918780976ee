//! Tape-based reverse-mode autodiff over NCHW tensors.
//!
//! A [`Graph`] borrows the [`ParamStore`] for the duration of one forward and
//! backward pass. Parameters enter the tape by id without copying; batch-norm
//! running statistics computed in training mode are collected as pending
//! updates and applied by the caller once the borrow ends.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::exec;
use crate::gemm::gemm;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{bilinear_taps, resize_plane, resize_plane_backward, Tensor};
use crate::training::loss::{self, Labels};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution geometry shared by forward and backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const SAME_1X1: ConvGeom = ConvGeom {
        stride: 1,
        padding: 0,
        dilation: 1,
    };

    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        (len + 2 * self.padding)
            .checked_sub(span)
            .map(|v| v / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom == ConvGeom::SAME_1X1
    }

    /// Output columns per im2col tile, bounded to keep the buffer small.
    fn tile(&self) -> usize {
        const BUDGET: usize = 1 << 21;
        (BUDGET / self.k().max(1)).clamp(1, self.p().max(1))
    }

    fn im2col(&self, x: &[f64], p0: usize, p1: usize, cols: &mut [f64]) {
        let len = p1 - p0;
        let g = self.geom;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * len..(row + 1) * len];
                    let (mut oy, mut ox) = (p0 / self.wo, p0 % self.wo);
                    for d in dst.iter_mut() {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *d = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < self.h
                            && (ix as usize) < self.w
                        {
                            plane[iy as usize * self.w + ix as usize]
                        } else {
                            0.0
                        };
                        ox += 1;
                        if ox == self.wo {
                            ox = 0;
                            oy += 1;
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], p0: usize, p1: usize, dx: &mut [f64]) {
        let len = p1 - p0;
        let g = self.geom;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * len..(row + 1) * len];
                    let (mut oy, mut ox) = (p0 / self.wo, p0 % self.wo);
                    for &v in src {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                            plane[iy as usize * self.w + ix as usize] += v;
                        }
                        ox += 1;
                        if ox == self.wo {
                            ox = 0;
                            oy += 1;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct BnSaved {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    ConvTranspose2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    MulBroadcast {
        full: Var,
        gate: Var,
    },
    Concat(Vec<Var>),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        grad: Tensor,
    },
    Dice {
        probs: Var,
        grad: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
    Dot {
        x: Var,
        weights: Rc<Vec<f64>>,
    },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    mode: Mode,
    taps: Vec<(String, Var)>,
    stat_updates: Vec<(ParamId, Tensor)>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    retained: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.retained.get(&v)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor> {
        &self.params
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            mode,
            taps: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient can be retained (for finite-difference checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.params.entry(id).kind == ParamKind::Trainable;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a named activation (used for feature pyramids and Grad-CAM).
    pub fn tap(&mut self, name: &str, v: Var) {
        self.taps.push((name.to_string(), v));
    }

    pub fn taps(&self) -> &[(String, Var)] {
        &self.taps
    }

    pub fn find_tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().rev().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Running-statistic updates gathered by training-mode batch norm.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stat_updates)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wc, kh, kw) = self.value(w).dims4()?;
        if wc != cin {
            return Err(shape_err(
                format!("{cin} input channels"),
                format!("weight with {wc}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(shape_err(cout, self.value(b).shape()));
            }
        }
        let (ho, wo) = match (geom.out_len(h, kh), geom.out_len(wd, kw)) {
            (Some(a), Some(c)) if a > 0 && c > 0 => (a, c),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "convolution {kh}x{kw} with {geom:?} does not fit a {h}x{wd} input"
                )))
            }
        };
        let dims = ConvDims {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho,
            wo,
            geom,
        };
        let xv = self.value(x);
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let per_in = cin * h * wd;
        let per_out = cout * dims.p();
        let mut out = vec![0.0; n * per_out];
        exec::for_each_chunk_mut(&mut out, per_out, |i, o| {
            conv_forward_sample(&dims, &xv.data()[i * per_in..(i + 1) * per_in], wv, o);
            if let Some(bias) = bias {
                for (co, row) in o.chunks_mut(dims.p()).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[co]);
                }
            }
        });
        let out = Tensor::new(&[n, cout, ho, wo], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(out, Op::Conv2d { x, w, b, dims }, rg))
    }

    /// Transposed convolution with a 2x2 kernel and stride 2.
    /// Weight layout is `(C_in, C_out, 2, 2)`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wc, cout, kh, kw) = self.value(w).dims4()?;
        if wc != cin || kh != 2 || kw != 2 {
            return Err(shape_err((cin, "C_out", 2, 2), self.value(w).shape()));
        }
        let hw = h * wd;
        let c4 = cout * 4;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let per_out = cout * 4 * hw;
        let mut out = vec![0.0; n * per_out];
        exec::for_each_chunk_mut(&mut out, per_out, |i, o| {
            let mut cols = vec![0.0; c4 * hw];
            gemm(c4, cin, hw, wv, true, &xv[i * cin * hw..(i + 1) * cin * hw], false, &mut cols, false);
            let ow = 2 * wd;
            for co in 0..cout {
                let bv = bias.map_or(0.0, |b| b[co]);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let row = &cols[(co * 4 + dy * 2 + dx) * hw..][..hw];
                        for y in 0..h {
                            for xx in 0..wd {
                                o[co * 4 * hw + (2 * y + dy) * ow + 2 * xx + dx] = row[y * wd + xx] + bv;
                            }
                        }
                    }
                }
            }
        });
        let out = Tensor::new(&[n, cout, 2 * h, 2 * wd], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(out, Op::ConvTranspose2 { x, w, b }, rg))
    }

    /// Batch normalization over `(N, H, W)` per channel. In training mode the
    /// batch statistics are used and running-stat updates are queued.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let (mean, var, train) = match self.mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xv[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        ss += xv[(b * c + ch) * hw..][..hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m as f64;
                }
                (mean, var, true)
            }
            Mode::Eval => (
                self.params.get(running_mean).data().to_vec(),
                self.params.get(running_var).data().to_vec(),
                false,
            ),
        };
        let mut updates = Vec::new();
        if train {
            let rm = self.params.get(running_mean).data();
            let rv = self.params.get(running_var).data();
            let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            let new_mean: Vec<f64> = (0..c)
                .map(|ch| (1.0 - momentum) * rm[ch] + momentum * mean[ch])
                .collect();
            let new_var: Vec<f64> = (0..c)
                .map(|ch| (1.0 - momentum) * rv[ch] + momentum * var[ch] * unbias)
                .collect();
            updates.push((running_mean, Tensor::new(&[c], new_mean)?));
            updates.push((running_var, Tensor::new(&[c], new_var)?));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for (o, v) in out[off..off + hw].iter_mut().zip(&xv[off..off + hw]) {
                    *o = ga * (v - mu) * is + be;
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        self.stat_updates.extend(updates);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved: BnSaved {
                    mean,
                    inv_std,
                    train,
                },
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `full * gate` where every gate dimension equals the full one or is 1.
    pub fn mul_broadcast(&mut self, full: Var, gate: Var) -> Result<Var> {
        let fs = self.value(full).dims4()?;
        let gs = self.value(gate).dims4()?;
        let ok = |f: usize, g: usize| g == f || g == 1;
        if !(ok(fs.0, gs.0) && ok(fs.1, gs.1) && ok(fs.2, gs.2) && ok(fs.3, gs.3)) {
            return Err(shape_err(
                "gate broadcastable to the feature map",
                format!("{gs:?} vs {fs:?}"),
            ));
        }
        let idx = broadcast_index(fs, gs);
        let fv = self.value(full).data();
        let gv = self.value(gate).data();
        let data = fv.iter().enumerate().map(|(i, v)| v * gv[idx(i)]).collect();
        let out = Tensor::new(self.value(full).shape(), data)?;
        let rg = self.rg(&[full, gate]);
        Ok(self.push(out, Op::MulBroadcast { full, gate }, rg))
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err((n, "C", h, w), (pn, pc, ph, pw)));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).item(b));
            }
        }
        let out = Tensor::new(&[n, total_c, h, w], out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Max pooling with `-inf` padding.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let geom = ConvGeom {
            stride,
            padding,
            dilation: 1,
        };
        let (ho, wo) = match (geom.out_len(h, kernel), geom.out_len(w, kernel)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "pool {kernel}/{stride} does not fit {h}x{w}"
                )))
            }
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if src[i] > best || best_i == usize::MAX {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    out[o] = best;
                    argmax[o] = plane * h * w + best_i;
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (pi, p) in self.value(x).data().chunks(hw).enumerate() {
            let (bi, bv) = p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                });
            data.push(bv);
            argmax.push(pi * hw + bi);
        }
        let out = Tensor::new(&[n, c, 1, 1], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalMaxPool { x, argmax }, rg))
    }

    /// Mean over channels, `N x 1 x H x W`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut data = vec![0.0; n * hw];
        for b in 0..n {
            for ch in 0..c {
                let src = &xv[(b * c + ch) * hw..][..hw];
                data[b * hw..(b + 1) * hw]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
        data.iter_mut().for_each(|d| *d /= c as f64);
        let out = Tensor::new(&[n, 1, h, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ChannelMean(x), rg))
    }

    /// Max over channels, `N x 1 x H x W`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; n * hw];
        let mut argmax = vec![0usize; n * hw];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = (b * c + ch) * hw + p;
                    if xv[i] > data[b * hw + p] {
                        data[b * hw + p] = xv[i];
                        argmax[b * hw + p] = i;
                    }
                }
            }
        }
        let out = Tensor::new(&[n, 1, h, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ChannelMax { x, argmax }, rg))
    }

    /// Half-pixel bilinear resize to `out_h x out_w`.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("resize to an empty size".into()));
        }
        let ys = bilinear_taps(h, out_h);
        let xs = bilinear_taps(w, out_w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        exec::for_each_chunk_mut(&mut out, out_h * out_w, |plane, o| {
            resize_plane(&xv[plane * h * w..(plane + 1) * h * w], h, w, o, &ys, &xs);
        });
        let out = Tensor::new(&[n, c, out_h, out_w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Resize(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = loss::softmax_channels(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn cross_entropy(&mut self, logits: Var, target: &Labels) -> Result<Var> {
        let (l, grad) = loss::cross_entropy(self.value(logits), target)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(l), Op::CrossEntropy { logits, grad }, rg))
    }

    pub fn soft_dice(&mut self, probs: Var, target: &Labels, eps: f64) -> Result<Var> {
        let (l, grad) = loss::soft_dice(self.value(probs), target, eps)?;
        let rg = self.rg(&[probs]);
        Ok(self.push(Tensor::scalar(l), Op::Dice { probs, grad }, rg))
    }

    /// `sum_i w_i * t_i` over tensors of identical shape.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(shape_err(&shape, t.shape()));
            }
            out.data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(o, x)| *o += w * x);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Scalar `sum_i weights[i] * x[i]` over the flattened tensor.
    pub fn dot(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.numel() {
            return Err(shape_err(xv.numel(), weights.len()));
        }
        let s = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                weights: Rc::new(weights),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root. Gradients of `retain` vars are kept.
    pub fn backward(&self, root: Var, retain: &[Var]) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(shape_err("scalar root", self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape(), vec![1.0])?);
        let mut out = Gradients::default();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if retain.contains(&Var(i)) {
                out.retained.insert(Var(i), g.clone());
            }
            if !node.requires_grad {
                continue;
            }
            self.backward_node(&node.op, Var(i), g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        op: &Op,
        me: Var,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::Param(id) => match out.params.get_mut(id) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    out.params.insert(*id, g);
                }
            },
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) = self.conv_backward(*x, *w, dims, &g, rg(*x));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if rg(*w) {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db)?);
                    }
                }
            }
            Op::ConvTranspose2 { x, w, b } => {
                let (n, cin, h, wd) = self.value(*x).dims4()?;
                let cout = self.value(*w).shape()[1];
                let hw = h * wd;
                let c4 = cout * 4;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gd = g.data();
                let per_sample: Vec<(Vec<f64>, Vec<f64>)> = exec::map_range(n, |i| {
                    let go = &gd[i * cout * 4 * hw..(i + 1) * cout * 4 * hw];
                    let ow = 2 * wd;
                    let mut dcols = vec![0.0; c4 * hw];
                    for co in 0..cout {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let row = &mut dcols[(co * 4 + dy * 2 + dx) * hw..][..hw];
                                for y in 0..h {
                                    for xx in 0..wd {
                                        row[y * wd + xx] = go[co * 4 * hw + (2 * y + dy) * ow + 2 * xx + dx];
                                    }
                                }
                            }
                        }
                    }
                    let mut dx = vec![0.0; cin * hw];
                    gemm(cin, c4, hw, wv, false, &dcols, false, &mut dx, false);
                    let mut dw = vec![0.0; cin * c4];
                    gemm(cin, hw, c4, &xv[i * cin * hw..(i + 1) * cin * hw], false, &dcols, true, &mut dw, false);
                    (dx, dw)
                });
                let mut dw = vec![0.0; cin * c4];
                let mut dx = Vec::with_capacity(n * cin * hw);
                for (sx, sw) in per_sample {
                    dx.extend(sx);
                    dw.iter_mut().zip(&sw).for_each(|(a, b)| *a += b);
                }
                if rg(*x) {
                    accumulate(grads, *x, Tensor::new(&[n, cin, h, wd], dx)?);
                }
                if rg(*w) {
                    accumulate(grads, *w, Tensor::new(self.value(*w).shape(), dw)?);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let mut db = vec![0.0; cout];
                        for (pi, p) in gd.chunks(4 * hw).enumerate() {
                            db[pi % cout] += p.iter().sum::<f64>();
                        }
                        accumulate(grads, *b, Tensor::new(&[cout], db)?);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let xv = self.value(*x).data();
                let gv = g.data();
                let ga = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for p in 0..hw {
                            let xhat = (xv[off + p] - saved.mean[ch]) * saved.inv_std[ch];
                            dgamma[ch] += gv[off + p] * xhat;
                            dbeta[ch] += gv[off + p];
                        }
                    }
                }
                if rg(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let is = saved.inv_std[ch];
                            for p in 0..hw {
                                dx[off + p] = if saved.train {
                                    let xhat = (xv[off + p] - saved.mean[ch]) * is;
                                    ga[ch] * is / m
                                        * (m * gv[off + p] - dbeta[ch] - xhat * dgamma[ch])
                                } else {
                                    gv[off + p] * ga[ch] * is
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                }
                if rg(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
                }
            }
            Op::Relu(x) => {
                let y = self.value(me).data();
                let mut d = g;
                d.data_mut()
                    .iter_mut()
                    .zip(y)
                    .for_each(|(d, &y)| if y <= 0.0 { *d = 0.0 });
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = self.value(me).data();
                let mut d = g;
                d.data_mut()
                    .iter_mut()
                    .zip(y)
                    .for_each(|(d, &y)| *d *= y * (1.0 - y));
                accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                if rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::MulBroadcast { full, gate } => {
                let fs = self.value(*full).dims4()?;
                let gs = self.value(*gate).dims4()?;
                let idx = broadcast_index(fs, gs);
                let fv = self.value(*full).data();
                let gv = self.value(*gate).data();
                if rg(*gate) {
                    let mut dg = vec![0.0; gv.len()];
                    for (i, (&go, &f)) in g.data().iter().zip(fv).enumerate() {
                        dg[idx(i)] += go * f;
                    }
                    accumulate(grads, *gate, Tensor::new(self.value(*gate).shape(), dg)?);
                }
                if rg(*full) {
                    let df = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, go)| go * gv[idx(i)])
                        .collect();
                    accumulate(grads, *full, Tensor::new(self.value(*full).shape(), df)?);
                }
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = g.dims4()?;
                let hw = h * w;
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if rg(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            d.extend_from_slice(&g.data()[(b * total_c + c0) * hw..][..pc * hw]);
                        }
                        accumulate(grads, p, Tensor::new(&[n, pc, h, w], d)?);
                    }
                    c0 += pc;
                }
            }
            Op::MaxPool { x, argmax }
            | Op::GlobalMaxPool { x, argmax }
            | Op::ChannelMax { x, argmax } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (&src, go) in argmax.iter().zip(g.data()) {
                    d.data_mut()[src] += go;
                }
                accumulate(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let mut d = vec![0.0; n * c * hw];
                for (plane, go) in g.data().iter().enumerate() {
                    d[plane * hw..(plane + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v = go / hw as f64);
                }
                accumulate(grads, *x, Tensor::new(&[n, c, h, w], d)?);
            }
            Op::ChannelMean(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let mut d = vec![0.0; n * c * hw];
                for b in 0..n {
                    let go = &g.data()[b * hw..(b + 1) * hw];
                    for ch in 0..c {
                        d[(b * c + ch) * hw..][..hw]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(v, g)| *v = g / c as f64);
                    }
                }
                accumulate(grads, *x, Tensor::new(&[n, c, h, w], d)?);
            }
            Op::Resize(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = g.dims4()?;
                let ys = bilinear_taps(h, oh);
                let xs = bilinear_taps(w, ow);
                let mut d = vec![0.0; n * c * h * w];
                let gd = g.data();
                exec::for_each_chunk_mut(&mut d, h * w, |plane, dp| {
                    resize_plane_backward(&gd[plane * oh * ow..(plane + 1) * oh * ow], w, dp, &ys, &xs);
                });
                accumulate(grads, *x, Tensor::new(&[n, c, h, w], d)?);
            }
            Op::Softmax(x) => {
                let (n, c, h, w) = g.dims4()?;
                let hw = h * w;
                let y = self.value(me).data();
                let gd = g.data();
                let mut d = vec![0.0; y.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let dot: f64 = (0..c)
                            .map(|k| gd[(b * c + k) * hw + p] * y[(b * c + k) * hw + p])
                            .sum();
                        for k in 0..c {
                            let i = (b * c + k) * hw + p;
                            d[i] = y[i] * (gd[i] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(&[n, c, h, w], d)?);
            }
            Op::CrossEntropy { logits: v, grad } | Op::Dice { probs: v, grad } => {
                let s = g.data()[0];
                accumulate(grads, *v, grad.map(|x| x * s));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if rg(v) {
                        accumulate(grads, v, g.map(|x| x * w));
                    }
                }
            }
            Op::Dot { x, weights } => {
                let s = g.data()[0];
                let d = weights.iter().map(|w| w * s).collect();
                accumulate(grads, *x, Tensor::new(self.value(*x).shape(), d)?);
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        dims: &ConvDims,
        g: &Tensor,
        need_dx: bool,
    ) -> (Option<Tensor>, Tensor, Vec<f64>) {
        let xt = self.value(x);
        let n = xt.shape()[0];
        let wv = self.value(w).data();
        let (k, p, cout) = (dims.k(), dims.p(), dims.cout);
        let per_in = dims.cin * dims.h * dims.w;
        let gd = g.data();
        let per_sample: Vec<(Option<Vec<f64>>, Vec<f64>)> = exec::map_range(n, |i| {
            let xs = &xt.data()[i * per_in..(i + 1) * per_in];
            let gs = &gd[i * cout * p..(i + 1) * cout * p];
            let mut dw = vec![0.0; cout * k];
            let mut dx = need_dx.then(|| vec![0.0; per_in]);
            if dims.is_pointwise() {
                gemm(cout, p, k, gs, false, xs, true, &mut dw, false);
                if let Some(dx) = dx.as_mut() {
                    gemm(k, cout, p, wv, true, gs, false, dx, false);
                }
                return (dx, dw);
            }
            let tile = dims.tile();
            let mut cols = vec![0.0; k * tile];
            let mut gtile = vec![0.0; cout * tile];
            let mut dcols = vec![0.0; k * tile];
            let mut p0 = 0;
            while p0 < p {
                let p1 = (p0 + tile).min(p);
                let len = p1 - p0;
                dims.im2col(xs, p0, p1, &mut cols[..k * len]);
                for co in 0..cout {
                    gtile[co * len..(co + 1) * len].copy_from_slice(&gs[co * p + p0..co * p + p1]);
                }
                gemm(cout, len, k, &gtile[..cout * len], false, &cols[..k * len], true, &mut dw, true);
                if let Some(dx) = dx.as_mut() {
                    gemm(k, cout, len, wv, true, &gtile[..cout * len], false, &mut dcols[..k * len], false);
                    dims.col2im(&dcols[..k * len], p0, p1, dx);
                }
                p0 = p1;
            }
            (dx, dw)
        });
        let mut dw = vec![0.0; cout * k];
        let mut dx = need_dx.then(|| Vec::with_capacity(n * per_in));
        for (sx, sw) in per_sample {
            dw.iter_mut().zip(&sw).for_each(|(a, b)| *a += b);
            if let (Some(acc), Some(sx)) = (dx.as_mut(), sx) {
                acc.extend(sx);
            }
        }
        let mut db = vec![0.0; cout];
        for (row, chunk) in gd.chunks(p).enumerate() {
            db[row % cout] += chunk.iter().sum::<f64>();
        }
        let dx = dx.map(|d| Tensor::new(xt.shape(), d).expect("sizes match"));
        let dw = Tensor::new(self.value(w).shape(), dw).expect("sizes match");
        (dx, dw, db)
    }
}

fn conv_forward_sample(dims: &ConvDims, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (k, p, cout) = (dims.k(), dims.p(), dims.cout);
    if dims.is_pointwise() {
        gemm(cout, k, p, w, false, x, false, out, false);
        return;
    }
    let tile = dims.tile();
    if tile >= p {
        let mut cols = vec![0.0; k * p];
        dims.im2col(x, 0, p, &mut cols);
        gemm(cout, k, p, w, false, &cols, false, out, false);
        return;
    }
    let mut cols = vec![0.0; k * tile];
    let mut tmp = vec![0.0; cout * tile];
    let mut p0 = 0;
    while p0 < p {
        let p1 = (p0 + tile).min(p);
        let len = p1 - p0;
        dims.im2col(x, p0, p1, &mut cols[..k * len]);
        gemm(cout, k, len, w, false, &cols[..k * len], false, &mut tmp[..cout * len], false);
        for co in 0..cout {
            out[co * p + p0..co * p + p1].copy_from_slice(&tmp[co * len..(co + 1) * len]);
        }
        p0 = p1;
    }
}

/// Maps a flat index of the full tensor to the flat index of a broadcast gate.
fn broadcast_index(
    full: (usize, usize, usize, usize),
    gate: (usize, usize, usize, usize),
) -> impl Fn(usize) -> usize {
    let (_, c, h, w) = full;
    move |i| {
        let x = i % w;
        let y = (i / w) % h;
        let ch = (i / (w * h)) % c;
        let b = i / (w * h * c);
        let gb = if gate.0 == 1 { 0 } else { b };
        let gc = if gate.1 == 1 { 0 } else { ch };
        let gy = if gate.2 == 1 { 0 } else { y };
        let gx = if gate.3 == 1 { 0 } else { x };
        ((gb * gate.1 + gc) * gate.2 + gy) * gate.3 + gx
    }
}

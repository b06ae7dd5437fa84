//! A small reverse-mode automatic differentiation tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates gradients for every node that
//! depends on a parameter leaf. Values fed in with [`Graph::constant`] never
//! receive gradients, which is how stop-gradient targets are expressed.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    AddChannel {
        x: Var,
        e: Var,
    },
    Silu(Var),
    Relu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    ChannelNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    WeightedSqSum {
        x: Var,
        weights: Option<Vec<f64>>,
        scale: f64,
    },
    Dot(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const CHANNEL_NORM_EPS: f64 = 1e-10;
const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let v = self.value(a).scale_rows(&factors)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::ScaleRows(a, factors), ng))
    }

    /// 2-D convolution, stride 1, zero padding `pad`, square kernel taken from
    /// the weight shape `(C_out, C_in, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (bs, ci, h, wd) = xt.dims4()?;
        let (co, wci, k, k2) = wt.dims4()?;
        if wci != ci || k != k2 || self.value(b).len() != co {
            return Err(Error::Shape(format!(
                "conv2d input {:?} weight {:?}",
                xt.shape(),
                wt.shape()
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || h + 2 * pad - k + 1 != h {
            return Err(Error::Shape("conv2d only supports same padding".into()));
        }
        let bias = self.value(b).data();
        let hw = h * wd;
        let kk = ci * k * k;
        let mut out = vec![0.0; bs * co * hw];
        let mut cols = vec![0.0; kk * hw];
        for s in 0..bs {
            let xs = xt.row(s);
            let o = &mut out[s * co * hw..(s + 1) * co * hw];
            for (c, row) in o.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[c]);
            }
            if k == 1 {
                gemm(co, ci, hw, wt.data(), false, xs, false, 1.0, o);
            } else {
                im2col(xs, ci, h, wd, k, pad, &mut cols);
                gemm(co, kk, hw, wt.data(), false, &cols, false, 1.0, o);
            }
        }
        let v = Tensor::from_vec(&[bs, co, h, wd], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, k, pad }, ng))
    }

    /// `x (B, in) · wᵀ + b` with `w` of shape `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let (bs, din) = (xt.rows(), xt.row_len());
        let (dout, wdin) = match wt.shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::Shape(format!("linear weight {:?}", s))),
        };
        if wdin != din || self.value(b).len() != dout {
            return Err(Error::Shape(format!(
                "linear input {:?} weight {:?}",
                xt.shape(),
                wt.shape()
            )));
        }
        let mut out = vec![0.0; bs * dout];
        for r in out.chunks_mut(dout) {
            r.copy_from_slice(self.value(b).data());
        }
        gemm(bs, din, dout, xt.data(), false, wt.data(), true, 1.0, &mut out);
        let v = Tensor::from_vec(&[bs, dout], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(v, Op::Linear { x, w, b }, ng))
    }

    /// Adds a per-sample, per-channel offset `e (B, C)` to `x (B, C, H, W)`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let xt = self.value(x);
        let et = self.value(e);
        let (bs, c, h, w) = xt.dims4()?;
        if et.shape() != [bs, c] {
            return Err(Error::Shape(format!(
                "add_channel {:?} + {:?}",
                xt.shape(),
                et.shape()
            )));
        }
        let mut v = xt.clone();
        let hw = h * w;
        for (i, plane) in v.data_mut().chunks_mut(hw).enumerate() {
            let off = et.data()[i];
            plane.iter_mut().for_each(|p| *p += off);
        }
        let ng = self.ng(x) || self.ng(e);
        Ok(self.push(v, Op::AddChannel { x, e }, ng))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let ng = self.ng(x);
        self.push(v, Op::Silu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xt = self.value(x);
        let (bs, c, h, w) = xt.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!("{} groups for {} channels", groups, c)));
        }
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        if g.len() != c || be.len() != c {
            return Err(Error::Shape("group norm affine size".into()));
        }
        let hw = h * w;
        let gsize = (c / groups) * hw;
        let mut xhat = vec![0.0; xt.len()];
        let mut rstd = vec![0.0; bs * groups];
        let mut out = vec![0.0; xt.len()];
        let cpg = c / groups;
        for (gi, chunk) in xt.data().chunks(gsize).enumerate() {
            let n = gsize as f64;
            let mean = chunk.iter().sum::<f64>() / n;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            rstd[gi] = r;
            let base = gi * gsize;
            for (pi, plane) in chunk.chunks(hw).enumerate() {
                let ch = (gi % groups) * cpg + pi;
                let (gc, bc) = (g[ch], be[ch]);
                let off = base + pi * hw;
                let xh = &mut xhat[off..off + hw];
                let o = &mut out[off..off + hw];
                for ((xv, ov), &v) in xh.iter_mut().zip(o.iter_mut()).zip(plane) {
                    *xv = (v - mean) * r;
                    *ov = *xv * gc + bc;
                }
            }
        }
        let v = Tensor::from_vec(xt.shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (bs, c, h, w) = xt.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2 on {}x{}", h, w)));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; bs * c * oh * ow];
        for (p, plane) in xt.data().chunks(h * w).enumerate() {
            let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    o[y * ow + xx] = 0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
                }
            }
        }
        let v = Tensor::from_vec(&[bs, c, oh, ow], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::AvgPool2(x), ng))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (bs, c, h, w) = xt.dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; bs * c * oh * ow];
        for (p, plane) in xt.data().chunks(h * w).enumerate() {
            let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    o[y * ow + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::from_vec(&[bs, c, oh, ow], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Upsample2(x), ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let at = self.value(a);
        let bt = self.value(b);
        let (bs, ca, h, w) = at.dims4()?;
        let (bs2, cb, h2, w2) = bt.dims4()?;
        if bs != bs2 || h != h2 || w != w2 {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let mut out = Vec::with_capacity(bs * (ca + cb) * h * w);
        for s in 0..bs {
            out.extend_from_slice(at.row(s));
            out.extend_from_slice(bt.row(s));
        }
        let v = Tensor::from_vec(&[bs, ca + cb, h, w], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::ConcatChannels(a, b), ng))
    }

    /// Scales the channel vector at every spatial position to unit length,
    /// `x / (‖x‖ + eps)`.
    pub fn channel_normalize(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (bs, c, h, w) = xt.dims4()?;
        let hw = h * w;
        let mut norms = vec![0.0; bs * hw];
        let mut out = xt.clone();
        for s in 0..bs {
            let row = xt.row(s);
            for p in 0..hw {
                let n = (0..c).map(|ch| row[ch * hw + p].powi(2)).sum::<f64>().sqrt();
                norms[s * hw + p] = n;
            }
            let o = out.row_mut(s);
            for ch in 0..c {
                for p in 0..hw {
                    o[ch * hw + p] /= norms[s * hw + p] + CHANNEL_NORM_EPS;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::ChannelNormalize { x, norms }, ng))
    }

    /// Per-row `scale · Σ_c weights[c] Σ_p x[b, c, p]²`. Without weights every
    /// element counts once, and any rank ≥ 2 is accepted.
    pub fn weighted_sq_sum(&mut self, x: Var, weights: Option<Vec<f64>>, scale: f64) -> Result<Var> {
        let xt = self.value(x);
        let bs = xt.rows();
        let mut out = vec![0.0; bs];
        match &weights {
            None => {
                for (s, o) in out.iter_mut().enumerate() {
                    *o = scale * xt.row(s).iter().map(|v| v * v).sum::<f64>();
                }
            }
            Some(wts) => {
                let c = xt.shape().get(1).copied().unwrap_or(0);
                if wts.len() != c {
                    return Err(Error::Shape(format!("{} weights for {} channels", wts.len(), c)));
                }
                let per = xt.row_len() / c.max(1);
                for (s, o) in out.iter_mut().enumerate() {
                    let row = xt.row(s);
                    *o = scale
                        * wts
                            .iter()
                            .enumerate()
                            .map(|(ch, wc)| wc * row[ch * per..(ch + 1) * per].iter().map(|v| v * v).sum::<f64>())
                            .sum::<f64>();
                }
            }
        }
        let v = Tensor::from_vec(&[bs], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::WeightedSqSum { x, weights, scale }, ng))
    }

    /// `Σ_b v[b] · w[b]` as a scalar.
    pub fn dot(&mut self, v: Var, w: Vec<f64>) -> Result<Var> {
        let vt = self.value(v);
        if vt.len() != w.len() {
            return Err(Error::Shape(format!("dot of {} with {}", vt.len(), w.len())));
        }
        let s = vt.data().iter().zip(&w).map(|(a, b)| a * b).sum();
        let ng = self.ng(v);
        Ok(self.push(Tensor::scalar(s), Op::Dot(v, w), ng))
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::ScaleRows(a, f) => {
                self.acc(grads, *a, g.scale_rows(f).expect("shape checked in forward"));
            }
            Op::Conv2d { x, w, b, k, pad } => self.conv2d_backward(g, *x, *w, *b, *k, *pad, grads),
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (bs, din) = (xt.rows(), xt.row_len());
                let dout = wt.shape()[0];
                if self.ng(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, bs, din, g.data(), true, xt.data(), false, 0.0, &mut dw);
                    self.acc(grads, *w, Tensor::from_vec(wt.shape(), dw).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; dout];
                    for r in g.data().chunks(dout) {
                        for (d, v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *b, Tensor::from_vec(&[dout], db).unwrap());
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; bs * din];
                    gemm(bs, dout, din, g.data(), false, wt.data(), false, 0.0, &mut dx);
                    self.acc(grads, *x, Tensor::from_vec(xt.shape(), dx).unwrap());
                }
            }
            Op::AddChannel { x, e } => {
                self.acc(grads, *x, g.clone());
                if self.ng(*e) {
                    let et = self.value(*e);
                    let (_, _, h, w) = g.dims4().unwrap();
                    let de: Vec<f64> = g.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                    self.acc(grads, *e, Tensor::from_vec(et.shape(), de).unwrap());
                }
            }
            Op::Silu(x) => {
                let xt = self.value(*x);
                let dx = xt
                    .zip_map(g, |a, gv| {
                        let s = sigmoid(a);
                        gv * s * (1.0 + a * (1.0 - s))
                    })
                    .unwrap();
                self.acc(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .zip_map(g, |a, gv| if a > 0.0 { gv } else { 0.0 })
                    .unwrap();
                self.acc(grads, *x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let xt = self.value(*x);
                let (_, c, h, w) = xt.dims4().unwrap();
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let gsize = (c / groups) * hw;
                let gd = g.data();
                let planes = gd.len() / hw;
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for p in 0..planes {
                        let ch = p % c;
                        let (gp, xp) = (&gd[p * hw..(p + 1) * hw], &xhat[p * hw..(p + 1) * hw]);
                        dg[ch] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                        db[ch] += gp.iter().sum::<f64>();
                    }
                    self.acc(grads, *gamma, Tensor::from_vec(&[c], dg).unwrap());
                    self.acc(grads, *beta, Tensor::from_vec(&[c], db).unwrap());
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; xt.len()];
                    let n = gsize as f64;
                    let pg = gsize / hw;
                    for gi in 0..rstd.len() {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for p in gi * pg..(gi + 1) * pg {
                            let gc = gam[p % c];
                            for (gv, xh) in gd[p * hw..(p + 1) * hw].iter().zip(&xhat[p * hw..(p + 1) * hw]) {
                                let d = gv * gc;
                                sum_d += d;
                                sum_dx += d * xh;
                            }
                        }
                        let r = rstd[gi] / n;
                        for p in gi * pg..(gi + 1) * pg {
                            let gc = gam[p % c];
                            let range = p * hw..(p + 1) * hw;
                            for ((dv, gv), xh) in dx[range.clone()].iter_mut().zip(&gd[range.clone()]).zip(&xhat[range]) {
                                *dv = r * (n * gv * gc - sum_d - xh * sum_dx);
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::from_vec(xt.shape(), dx).unwrap());
                }
            }
            Op::AvgPool2(x) => {
                let xt = self.value(*x);
                let (_, _, h, w) = xt.dims4().unwrap();
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; xt.len()];
                for (p, gp) in g.data().chunks(oh * ow).enumerate() {
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            d[y * w + xx] = 0.25 * gp[(y / 2) * ow + xx / 2];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xt.shape(), dx).unwrap());
            }
            Op::Upsample2(x) => {
                let xt = self.value(*x);
                let (_, _, h, w) = xt.dims4().unwrap();
                let ow = 2 * w;
                let mut dx = vec![0.0; xt.len()];
                for (p, gp) in g.data().chunks(4 * h * w).enumerate() {
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let i = 2 * y * ow + 2 * xx;
                            d[y * w + xx] = gp[i] + gp[i + 1] + gp[i + ow] + gp[i + ow + 1];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xt.shape(), dx).unwrap());
            }
            Op::ConcatChannels(a, b) => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let (na, nb) = (at.row_len(), bt.row_len());
                let mut da = Vec::with_capacity(at.len());
                let mut db = Vec::with_capacity(bt.len());
                for r in g.data().chunks(na + nb) {
                    da.extend_from_slice(&r[..na]);
                    db.extend_from_slice(&r[na..]);
                }
                self.acc(grads, *a, Tensor::from_vec(at.shape(), da).unwrap());
                self.acc(grads, *b, Tensor::from_vec(bt.shape(), db).unwrap());
            }
            Op::ChannelNormalize { x, norms } => {
                let xt = self.value(*x);
                let (bs, c, h, w) = xt.dims4().unwrap();
                let hw = h * w;
                let mut dx = vec![0.0; xt.len()];
                for s in 0..bs {
                    let xr = xt.row(s);
                    let gr = g.row(s);
                    let d = &mut dx[s * c * hw..(s + 1) * c * hw];
                    for p in 0..hw {
                        let n = norms[s * hw + p];
                        let sn = n + CHANNEL_NORM_EPS;
                        let dotgx: f64 = (0..c).map(|ch| gr[ch * hw + p] * xr[ch * hw + p]).sum();
                        let coef = if n > 0.0 { dotgx / (sn * sn * n) } else { 0.0 };
                        for ch in 0..c {
                            d[ch * hw + p] = gr[ch * hw + p] / sn - xr[ch * hw + p] * coef;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xt.shape(), dx).unwrap());
            }
            Op::WeightedSqSum { x, weights, scale } => {
                let xt = self.value(*x);
                let per_row = xt.row_len();
                let c = xt.shape().get(1).copied().unwrap_or(1).max(1);
                let per_ch = per_row / c;
                let mut dx = vec![0.0; xt.len()];
                for (s, gv) in g.data().iter().enumerate() {
                    let xr = xt.row(s);
                    let d = &mut dx[s * per_row..(s + 1) * per_row];
                    for (j, (dv, xv)) in d.iter_mut().zip(xr).enumerate() {
                        let wc = weights.as_ref().map_or(1.0, |w| w[j / per_ch]);
                        *dv = 2.0 * scale * wc * xv * gv;
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(xt.shape(), dx).unwrap());
            }
            Op::Dot(v, w) => {
                let gv = g.data()[0];
                let vt = self.value(*v);
                let d: Vec<f64> = w.iter().map(|wi| wi * gv).collect();
                self.acc(grads, *v, Tensor::from_vec(vt.shape(), d).unwrap());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let xt = self.value(x);
        let wt = self.value(w);
        let (bs, ci, h, wd) = xt.dims4().unwrap();
        let co = wt.shape()[0];
        let hw = h * wd;
        let kk = ci * k * k;
        if self.ng(b) {
            let mut db = vec![0.0; co];
            for s in 0..bs {
                for (c, plane) in g.row(s).chunks(hw).enumerate() {
                    db[c] += plane.iter().sum::<f64>();
                }
            }
            self.acc(grads, b, Tensor::from_vec(&[co], db).unwrap());
        }
        let need_w = self.ng(w);
        let need_x = self.ng(x);
        if !need_w && !need_x {
            return;
        }
        let mut dw = vec![0.0; co * kk];
        let mut dx = vec![0.0; if need_x { xt.len() } else { 0 }];
        let mut cols = vec![0.0; kk * hw];
        let mut dcols = vec![0.0; kk * hw];
        for s in 0..bs {
            let gs = g.row(s);
            let xs = xt.row(s);
            if need_w {
                if k == 1 {
                    gemm(co, hw, kk, gs, false, xs, true, 1.0, &mut dw);
                } else {
                    im2col(xs, ci, h, wd, k, pad, &mut cols);
                    gemm(co, hw, kk, gs, false, &cols, true, 1.0, &mut dw);
                }
            }
            if need_x {
                let dxs = &mut dx[s * ci * hw..(s + 1) * ci * hw];
                if k == 1 {
                    gemm(kk, co, hw, wt.data(), true, gs, false, 0.0, dxs);
                } else {
                    gemm(kk, co, hw, wt.data(), true, gs, false, 0.0, &mut dcols);
                    col2im(&dcols, ci, h, wd, k, pad, dxs);
                }
            }
        }
        if need_w {
            self.acc(grads, w, Tensor::from_vec(wt.shape(), dw).unwrap());
        }
        if need_x {
            self.acc(grads, x, Tensor::from_vec(xt.shape(), dx).unwrap());
        }
    }
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + exp(-a))
}

/// `e^x` without branches so that elementwise loops vectorise. Relative
/// error is a few ulp; inputs are clamped to `[-708, 709]`.
#[inline]
fn exp(x: f64) -> f64 {
    const SHIFT: f64 = 6755399441055744.0; // 1.5 · 2^52
    const LN2_HI: f64 = 6.93147180369123816490e-01;
    const LN2_LO: f64 = 1.90821492927058770002e-10;
    let x = x.clamp(-708.0, 709.0);
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.0 / 479001600.0;
    for c in [
        1.0 / 39916800.0,
        1.0 / 3628800.0,
        1.0 / 362880.0,
        1.0 / 40320.0,
        1.0 / 5040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let k = (t.to_bits() as i64).wrapping_sub(SHIFT.to_bits() as i64);
    p * f64::from_bits(((k + 1023) as u64) << 52)
}

/// Valid output-column range for kernel offset `kx` (stride 1).
#[inline]
fn valid_range(kx: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(w);
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(kx, pad, w);
                for oy in 0..h {
                    let d = &mut dst[oy * w..(oy + 1) * w];
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        d.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    d[..lo].iter_mut().for_each(|v| *v = 0.0);
                    d[hi..].iter_mut().for_each(|v| *v = 0.0);
                    if hi > lo {
                        let off = lo + kx - pad;
                        d[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [f64]) {
    let hw = h * w;
    dx.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(kx, pad, w);
                if hi <= lo {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let off = lo + kx - pad;
                    let d = &mut plane[iy as usize * w + off..iy as usize * w + off + hi - lo];
                    for (dv, sv) in d.iter_mut().zip(&src[oy * w + lo..oy * w + hi]) {
                        *dv += sv;
                    }
                }
            }
        }
    }
}

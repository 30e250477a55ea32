//! Reverse-mode automatic differentiation on a recording tape.
//!
//! A [`Tape`] records every operation in execution order; [`Var`]s are plain
//! indices into it. Calling [`Tape::backward`] on a scalar loss walks the
//! record once in reverse, accumulates gradients, and keeps only the leaf
//! gradients. A tape can run backward once; re-recording is the way to get a
//! second gradient. Forward results are bitwise deterministic: iteration
//! orders are fixed and nothing is hashed.
//!
//! Broadcasting is leading-1 only: the right operand's shape, left-padded
//! with ones to the left operand's rank, must consist of a prefix of ones
//! followed by exactly matching extents.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum OpKind {
    Leaf { trainable: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var },
    Matmul { a: Var, b: Var },
    Bmm { a: Var, b: Var },
    Transpose { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Softmax { a: Var, axis: usize },
    Silu { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize },
    Conv2d { x: Var, w: Var, bias: Option<Var> },
    ConvTemporal { x: Var, w: Var, bias: Option<Var> },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    GlobalAvgPool { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    RepeatOuter { x: Var, count: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    AddChan { x: Var, bias: Var },
    Mean { x: Var, axis: usize },
    MeanAll { x: Var },
    SumAll { x: Var },
    Mse { pred: Var, target: Var },
}

struct Node<E> {
    op: OpKind,
    value: Tensor<E>,
    needs_grad: bool,
    scale: E, // only used by Scale
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    leaf_grads: Vec<Option<Tensor<E>>>,
    consumed: bool,
    check_finite: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            consumed: false,
            check_finite: true,
        }
    }

    /// Toggle NaN/Inf surfacing after every op (on by default; training turns
    /// it off for throughput via `numerics.check_finite`).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a trainable leaf; its gradient is available after `backward`.
    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.push_raw(OpKind::Leaf { trainable: true }, value, true)
    }

    /// Record a non-trainable input; no gradient is tracked through it alone.
    pub fn input(&mut self, value: Tensor<E>) -> Var {
        self.push_raw(OpKind::Leaf { trainable: false }, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Leaf gradient populated by `backward`; `None` for non-leaves, for
    /// untracked leaves, and before backward has run.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push_raw(&mut self, op: OpKind, value: Tensor<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            scale: E::ZERO,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: OpKind, value: Tensor<E>, op_name: &'static str) -> Result<Var> {
        if self.check_finite {
            value.check_finite(op_name)?;
        }
        let needs_grad = self.op_needs_grad(&op);
        Ok(self.push_raw(op, value, needs_grad))
    }

    fn op_needs_grad(&self, op: &OpKind) -> bool {
        let dep = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            OpKind::Leaf { trainable } => *trainable,
            OpKind::Add { a, b } | OpKind::Sub { a, b } | OpKind::Mul { a, b } => dep(a) || dep(b),
            OpKind::Scale { a }
            | OpKind::Transpose { a }
            | OpKind::Permute { a, .. }
            | OpKind::Reshape { a }
            | OpKind::Softmax { a, .. }
            | OpKind::Silu { a } => dep(a),
            OpKind::Matmul { a, b } | OpKind::Bmm { a, b } => dep(a) || dep(b),
            OpKind::LayerNorm { x, gamma, beta } => dep(x) || dep(gamma) || dep(beta),
            OpKind::GroupNorm { x, gamma, beta, .. } => dep(x) || dep(gamma) || dep(beta),
            OpKind::Conv2d { x, w, bias } | OpKind::ConvTemporal { x, w, bias } => {
                dep(x) || dep(w) || bias.as_ref().map_or(false, dep)
            }
            OpKind::AvgPool2 { x }
            | OpKind::Upsample2 { x }
            | OpKind::GlobalAvgPool { x }
            | OpKind::RepeatOuter { x, .. }
            | OpKind::Mean { x, .. }
            | OpKind::MeanAll { x }
            | OpKind::SumAll { x } => dep(x),
            OpKind::Concat { parts, .. } => parts.iter().any(dep),
            OpKind::GatherRows { table, .. } => dep(table),
            OpKind::AddChan { x, bias } => dep(x) || dep(bias),
            OpKind::Mse { pred, target } => dep(pred) || dep(target),
        }
    }

    // ---- elementwise and broadcast ops ------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(OpKind::Add { a, b }, out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push(OpKind::Sub { a, b }, out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push(OpKind::Mul { a, b }, out, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = E::from_f64(factor);
        let out = self.value(a).map(|x| x * f);
        let v = self.push(OpKind::Scale { a }, out, "scale")?;
        self.nodes[v.0].scale = f;
        Ok(v)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(OpKind::Silu { a }, out, "silu")
    }

    // ---- matmul family -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(OpKind::Matmul { a, b }, t, "matmul")
    }

    /// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![E::ZERO; bt * m * n];
        for i in 0..bt {
            kernels::matmul_acc(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor::new(vec![bt, m, n], out)?;
        self.push(OpKind::Bmm { a, b }, t, "bmm")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let t = transpose2d(self.value(a));
        self.push(OpKind::Transpose { a }, t, "transpose")
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || core::mem::replace(&mut seen[ax], true)) {
            return Err(Error::Contract(alloc::format!(
                "permute: axes {axes:?} not a permutation of 0..{rank}"
            )));
        }
        let t = permute_copy(self.value(a), axes);
        self.push(
            OpKind::Permute {
                a,
                axes: axes.to_vec(),
            },
            t,
            "permute",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(OpKind::Reshape { a }, t, "reshape")
    }

    // ---- softmax / norms ----------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::IndexOutOfRange {
                what: "softmax axis",
                index: axis,
                limit: x.rank(),
            });
        }
        let (outer, alen, inner) = split_axis(x.shape(), axis);
        let mut out = x.clone();
        {
            let d = out.data_mut();
            if inner == 1 {
                // contiguous rows (the attention case)
                for o in 0..outer {
                    let row = &mut d[o * alen..(o + 1) * alen];
                    let mut mx = row[0];
                    for &v in row.iter() {
                        mx = mx.maximum(v);
                    }
                    let mut sum = E::ZERO;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        sum += *r;
                    }
                    let inv = E::ONE / sum;
                    for r in row.iter_mut() {
                        *r = *r * inv;
                    }
                }
            } else {
                let mut row = vec![E::ZERO; alen];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * alen * inner + i;
                        for (j, r) in row.iter_mut().enumerate() {
                            *r = d[base + j * inner];
                        }
                        let mut mx = row[0];
                        for &v in row.iter() {
                            mx = mx.maximum(v);
                        }
                        let mut sum = E::ZERO;
                        for r in row.iter_mut() {
                            *r = (*r - mx).exp();
                            sum += *r;
                        }
                        for (j, &r) in row.iter().enumerate() {
                            d[base + j * inner] = r / sum;
                        }
                    }
                }
            }
        }
        self.push(OpKind::Softmax { a, axis }, out, "softmax")
    }

    /// Layer norm over the last axis; `gamma`/`beta` have that axis's extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("layer_norm on rank-0");
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let rows = xv.numel() / d;
        let mut out = xv.clone();
        {
            let g = self.nodes[gamma.0].value.data();
            let b = self.nodes[beta.0].value.data();
            let data = out.data_mut();
            for r in 0..rows {
                let row = &mut data[r * d..(r + 1) * d];
                let (mean, rstd) = row_mean_rstd(row);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * rstd * g[j] + b[j];
                }
            }
        }
        self.push(OpKind::LayerNorm { x, gamma, beta }, out, "layer_norm")
    }

    /// Group norm over [N,C,H,W]; `gamma`/`beta` are per-channel.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                lhs: s,
                rhs: vec![],
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::BadGroups {
                groups,
                channels: c,
            });
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                lhs: vec![c],
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let cg = c / groups;
        let glen = cg * h * w;
        let mut out = xv.clone();
        {
            let gm = self.nodes[gamma.0].value.data();
            let bt = self.nodes[beta.0].value.data();
            let data = out.data_mut();
            for ni in 0..n {
                for gi in 0..groups {
                    let base = ni * c * h * w + gi * glen;
                    let span = &mut data[base..base + glen];
                    let (mean, rstd) = row_mean_rstd(span);
                    for (j, v) in span.iter_mut().enumerate() {
                        let ch = gi * cg + j / (h * w);
                        *v = (*v - mean) * rstd * gm[ch] + bt[ch];
                    }
                }
            }
        }
        self.push(
            OpKind::GroupNorm {
                x,
                gamma,
                beta,
                groups,
            },
            out,
            "group_norm",
        )
    }

    // ---- convolutions / resampling -------------------------------------------

    /// Same-padded stride-1 conv: x [N,C,H,W], w [O,C,kh,kw] (odd kernels),
    /// optional bias [O].
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let hw = h * wd;
        let ckk = c * kh * kw;
        let mut out = vec![E::ZERO; n * o * hw];
        let mut col = vec![E::ZERO; ckk * hw];
        for ni in 0..n {
            kernels::im2col(
                &self.value(x).data()[ni * c * hw..(ni + 1) * c * hw],
                c,
                h,
                wd,
                kh,
                kw,
                &mut col,
            );
            kernels::matmul_acc(
                self.value(w).data(),
                &col,
                o,
                ckk,
                hw,
                &mut out[ni * o * hw..(ni + 1) * o * hw],
            );
        }
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for ni in 0..n {
                for (oi, &bv) in bd.iter().enumerate() {
                    for v in &mut out[(ni * o + oi) * hw..(ni * o + oi + 1) * hw] {
                        *v += bv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, o, h, wd], out)?;
        self.push(OpKind::Conv2d { x, w, bias }, t, "conv2d")
    }

    /// Valid (unpadded) convolution along the frame axis: x [T,C,H,W],
    /// w [O,C,kt] -> [T-kt+1, O, H, W].
    pub fn conv1d_temporal(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 4 || ws.len() != 3 || xs[1] != ws[1] || ws[2] > xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_temporal",
                lhs: xs,
                rhs: ws,
            });
        }
        let (t, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kt) = (ws[0], ws[2]);
        let to = t - kt + 1;
        let hw = h * wd;
        let mut out = vec![E::ZERO; to * o * hw];
        {
            let xd = self.value(x).data();
            let wdta = self.value(w).data();
            for ti in 0..to {
                for oi in 0..o {
                    let dst = &mut out[(ti * o + oi) * hw..(ti * o + oi + 1) * hw];
                    for ci in 0..c {
                        for dt in 0..kt {
                            let wv = wdta[(oi * c + ci) * kt + dt];
                            let src = &xd[((ti + dt) * c + ci) * hw..((ti + dt) * c + ci + 1) * hw];
                            for (dv, &sv) in dst.iter_mut().zip(src.iter()) {
                                *dv += wv * sv;
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv1d_temporal bias",
                    lhs: vec![o],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
            let bd = self.value(b).data().to_vec();
            for ti in 0..to {
                for (oi, &bv) in bd.iter().enumerate() {
                    for v in &mut out[(ti * o + oi) * hw..(ti * o + oi + 1) * hw] {
                        *v += bv;
                    }
                }
            }
        }
        let tn = Tensor::new(vec![to, o, h, wd], out)?;
        self.push(OpKind::ConvTemporal { x, w, bias }, tn, "conv1d_temporal")
    }

    /// 2x2 stride-2 average pool; spatial extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2",
                lhs: s,
                rhs: vec![],
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let quarter = E::from_f64(0.25);
        let mut out = vec![E::ZERO; n * c * ho * wo];
        let xd = self.value(x).data();
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let s00 = src[(2 * y) * w + 2 * xx];
                    let s01 = src[(2 * y) * w + 2 * xx + 1];
                    let s10 = src[(2 * y + 1) * w + 2 * xx];
                    let s11 = src[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * wo + xx] = (s00 + s01 + s10 + s11) * quarter;
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(OpKind::AvgPool2 { x }, t, "avg_pool2")
    }

    /// Nearest-neighbour 2x upsample.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "upsample2",
                lhs: s,
                rhs: vec![],
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * 2, w * 2);
        let mut out = vec![E::ZERO; n * c * ho * wo];
        let xd = self.value(x).data();
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(OpKind::Upsample2 { x }, t, "upsample2")
    }

    /// Mean over the spatial axes: [N,C,H,W] -> [N,C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                lhs: s,
                rhs: vec![],
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let inv = E::from_f64(1.0 / (h * w) as f64);
        let xd = self.value(x).data();
        let mut out = vec![E::ZERO; n * c];
        for (nc, slot) in out.iter_mut().enumerate() {
            let mut acc = E::ZERO;
            for &v in &xd[nc * h * w..(nc + 1) * h * w] {
                acc += v;
            }
            *slot = acc * inv;
        }
        let t = Tensor::new(vec![n, c], out)?;
        self.push(OpKind::GlobalAvgPool { x }, t, "global_avg_pool")
    }

    // ---- structural ops -------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::IndexOutOfRange {
                what: "concat axis",
                index: axis,
                limit: first.len(),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![E::ZERO; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let alen = self.value(p).shape()[axis];
            let pd = self.value(p).data();
            for o in 0..outer {
                let src = &pd[o * alen * inner..(o + 1) * alen * inner];
                let dst = &mut out
                    [(o * axis_total + offset) * inner..(o * axis_total + offset + alen) * inner];
                dst.copy_from_slice(src);
            }
            offset += alen;
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            OpKind::Concat {
                parts: parts.to_vec(),
                axis,
            },
            t,
            "concat",
        )
    }

    /// Tile a tensor along a new leading axis: shape s -> [count, s...].
    pub fn repeat_outer(&mut self, x: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Err(Error::Contract("repeat_outer count 0".into()));
        }
        let xv = self.value(x);
        let mut shape = Vec::with_capacity(xv.rank() + 1);
        shape.push(count);
        shape.extend_from_slice(xv.shape());
        let mut out = Vec::with_capacity(count * xv.numel());
        for _ in 0..count {
            out.extend_from_slice(xv.data());
        }
        let t = Tensor::new(shape, out)?;
        self.push(OpKind::RepeatOuter { x, count }, t, "repeat_outer")
    }

    /// Row lookup: table [V,d], ids -> [len(ids), d]. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || ids.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: tv.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::IndexOutOfRange {
                what: "gather_rows id",
                index: bad,
                limit: v,
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            OpKind::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            t,
            "gather_rows",
        )
    }

    /// Per-channel bias over [N,C,H,W]: out[n,c,h,w] = x[n,c,h,w] + b[c].
    pub fn add_chan(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || self.value(bias).shape() != [xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_chan",
                lhs: xs,
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = self.value(x).clone();
        {
            let bd = self.nodes[bias.0].value.data();
            let od = out.data_mut();
            for ni in 0..n {
                for (ci, &bv) in bd.iter().enumerate() {
                    for v in &mut od[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w] {
                        *v += bv;
                    }
                }
            }
        }
        self.push(OpKind::AddChan { x, bias }, out, "add_chan")
    }

    // ---- reductions -------------------------------------------------------------

    /// Mean over one axis; that axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::IndexOutOfRange {
                what: "mean axis",
                index: axis,
                limit: xv.rank(),
            });
        }
        let (outer, alen, inner) = split_axis(xv.shape(), axis);
        let inv = E::from_f64(1.0 / alen as f64);
        let mut shape: Vec<usize> = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let mut out = vec![E::ZERO; outer * inner];
        let xd = xv.data();
        for o in 0..outer {
            for j in 0..alen {
                let src = &xd[(o * alen + j) * inner..(o * alen + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d += s;
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let t = Tensor::new(shape, out)?;
        self.push(OpKind::Mean { x, axis }, t, "mean")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let inv = E::from_f64(1.0 / xv.numel() as f64);
        let mut acc = E::ZERO;
        for &v in xv.data() {
            acc += v;
        }
        let t = Tensor::scalar_value(acc * inv);
        self.push(OpKind::MeanAll { x }, t, "mean_all")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut acc = E::ZERO;
        for &v in xv.data() {
            acc += v;
        }
        let t = Tensor::scalar_value(acc);
        self.push(OpKind::SumAll { x }, t, "sum_all")
    }

    /// Mean squared error between same-shape tensors; returns a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.value(pred).shape().to_vec(),
                rhs: self.value(target).shape().to_vec(),
            });
        }
        let inv = E::from_f64(1.0 / self.value(pred).numel() as f64);
        let mut acc = E::ZERO;
        for (&p, &t) in self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data().iter())
        {
            let d = p - t;
            acc += d * d;
        }
        let t = Tensor::scalar_value(acc * inv);
        self.push(OpKind::Mse { pred, target }, t, "mse")
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates leaf gradients; the graph
    /// is consumed afterwards and a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), E::ONE));

        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if let OpKind::Leaf { trainable: true } = self.nodes[idx].op {
                self.leaf_grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let dep = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;

        // Accumulate `delta` into grads[v].
        macro_rules! acc {
            ($v:expr, $delta:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let delta: Tensor<E> = $delta;
                    match &mut grads[v.0] {
                        Some(existing) => {
                            for (e, d) in existing.data_mut().iter_mut().zip(delta.data().iter()) {
                                *e += *d;
                            }
                        }
                        slot @ None => *slot = Some(delta),
                    }
                }
            }};
        }

        match &node.op {
            OpKind::Leaf { .. } => {}
            OpKind::Add { a, b } => {
                acc!(*a, g.clone());
                if dep(*b) {
                    acc!(*b, reduce_to_shape(g, val(*b).shape(), false));
                }
            }
            OpKind::Sub { a, b } => {
                acc!(*a, g.clone());
                if dep(*b) {
                    acc!(*b, reduce_to_shape(g, val(*b).shape(), true));
                }
            }
            OpKind::Mul { a, b } => {
                if dep(*a) {
                    let bt = val(*b);
                    let bn = bt.numel();
                    let mut da = g.clone();
                    for (i, v) in da.data_mut().iter_mut().enumerate() {
                        *v = *v * bt.data()[i % bn];
                    }
                    acc!(*a, da);
                }
                if dep(*b) {
                    let at = val(*a);
                    let mut prod = g.clone();
                    for (i, v) in prod.data_mut().iter_mut().enumerate() {
                        *v = *v * at.data()[i];
                    }
                    acc!(*b, reduce_to_shape(&prod, val(*b).shape(), false));
                }
            }
            OpKind::Scale { a } => {
                let f = node.scale;
                acc!(*a, g.map(|x| x * f));
            }
            OpKind::Silu { a } => {
                let x = val(*a);
                let mut da = g.clone();
                for (v, &xi) in da.data_mut().iter_mut().zip(x.data().iter()) {
                    let s = sigmoid(xi);
                    *v = *v * (s + xi * s * (E::ONE - s));
                }
                acc!(*a, da);
            }
            OpKind::Matmul { a, b } => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n2 = val(*b).shape()[1];
                if dep(*a) {
                    let mut da = vec![E::ZERO; m * k];
                    kernels::matmul_acc_bt(g.data(), val(*b).data(), m, n2, k, &mut da);
                    acc!(*a, Tensor::new(val(*a).shape().to_vec(), da)?);
                }
                if dep(*b) {
                    let mut db = vec![E::ZERO; k * n2];
                    kernels::matmul_acc_at(val(*a).data(), g.data(), k, m, n2, &mut db);
                    acc!(*b, Tensor::new(val(*b).shape().to_vec(), db)?);
                }
            }
            OpKind::Bmm { a, b } => {
                let sa = val(*a).shape();
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n2 = val(*b).shape()[2];
                if dep(*a) {
                    let mut da = vec![E::ZERO; bt * m * k];
                    for i in 0..bt {
                        kernels::matmul_acc_bt(
                            &g.data()[i * m * n2..(i + 1) * m * n2],
                            &val(*b).data()[i * k * n2..(i + 1) * k * n2],
                            m,
                            n2,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    acc!(*a, Tensor::new(val(*a).shape().to_vec(), da)?);
                }
                if dep(*b) {
                    let mut db = vec![E::ZERO; bt * k * n2];
                    for i in 0..bt {
                        kernels::matmul_acc_at(
                            &val(*a).data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n2..(i + 1) * m * n2],
                            k,
                            m,
                            n2,
                            &mut db[i * k * n2..(i + 1) * k * n2],
                        );
                    }
                    acc!(*b, Tensor::new(val(*b).shape().to_vec(), db)?);
                }
            }
            OpKind::Transpose { a } => {
                acc!(*a, transpose2d(g));
            }
            OpKind::Permute { a, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (d, &ax) in axes.iter().enumerate() {
                    inv[ax] = d;
                }
                acc!(*a, permute_copy(g, &inv));
            }
            OpKind::Reshape { a } => {
                acc!(*a, g.clone().reshaped(val(*a).shape().to_vec())?);
            }
            OpKind::Softmax { a, axis } => {
                let y = &node.value;
                let (outer, alen, inner) = split_axis(y.shape(), *axis);
                let mut da = g.clone();
                {
                    let d = da.data_mut();
                    let yd = y.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * alen * inner + i;
                            let mut dot = E::ZERO;
                            for j in 0..alen {
                                dot += d[base + j * inner] * yd[base + j * inner];
                            }
                            for j in 0..alen {
                                let p = base + j * inner;
                                d[p] = yd[p] * (d[p] - dot);
                            }
                        }
                    }
                }
                acc!(*a, da);
            }
            OpKind::LayerNorm { x, gamma, beta } => {
                let xv = val(*x);
                let d = *xv.shape().last().unwrap();
                let rows = xv.numel() / d;
                let gm = val(*gamma).data();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgamma = vec![E::ZERO; d];
                let mut dbeta = vec![E::ZERO; d];
                let inv_d = E::from_f64(1.0 / d as f64);
                for r in 0..rows {
                    let xrow = &xv.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let (mean, rstd) = row_mean_rstd(xrow);
                    let mut mean_gg = E::ZERO;
                    let mut mean_ggx = E::ZERO;
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * rstd;
                        let gg = grow[j] * gm[j];
                        mean_gg += gg;
                        mean_ggx += gg * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    mean_gg = mean_gg * inv_d;
                    mean_ggx = mean_ggx * inv_d;
                    let dxrow = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * rstd;
                        let gg = grow[j] * gm[j];
                        dxrow[j] = (gg - mean_gg - xhat * mean_ggx) * rstd;
                    }
                }
                acc!(*x, dx);
                acc!(*gamma, Tensor::new(vec![d], dgamma)?);
                acc!(*beta, Tensor::new(vec![d], dbeta)?);
            }
            OpKind::GroupNorm {
                x,
                gamma,
                beta,
                groups,
            } => {
                let xv = val(*x);
                let s = xv.shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let cg = c / groups;
                let glen = cg * h * w;
                let gm = val(*gamma).data();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgamma = vec![E::ZERO; c];
                let mut dbeta = vec![E::ZERO; c];
                let inv_glen = E::from_f64(1.0 / glen as f64);
                for ni in 0..n {
                    for gi in 0..*groups {
                        let base = ni * c * h * w + gi * glen;
                        let xs = &xv.data()[base..base + glen];
                        let gs = &g.data()[base..base + glen];
                        let (mean, rstd) = row_mean_rstd(xs);
                        let mut mean_gg = E::ZERO;
                        let mut mean_ggx = E::ZERO;
                        for j in 0..glen {
                            let ch = gi * cg + j / (h * w);
                            let xhat = (xs[j] - mean) * rstd;
                            let gg = gs[j] * gm[ch];
                            mean_gg += gg;
                            mean_ggx += gg * xhat;
                            dgamma[ch] += gs[j] * xhat;
                            dbeta[ch] += gs[j];
                        }
                        mean_gg = mean_gg * inv_glen;
                        mean_ggx = mean_ggx * inv_glen;
                        let dxs = &mut dx.data_mut()[base..base + glen];
                        for j in 0..glen {
                            let ch = gi * cg + j / (h * w);
                            let xhat = (xs[j] - mean) * rstd;
                            let gg = gs[j] * gm[ch];
                            dxs[j] = (gg - mean_gg - xhat * mean_ggx) * rstd;
                        }
                    }
                }
                acc!(*x, dx);
                acc!(*gamma, Tensor::new(vec![c], dgamma)?);
                acc!(*beta, Tensor::new(vec![c], dbeta)?);
            }
            OpKind::Conv2d { x, w, bias } => {
                let xs = val(*x).shape();
                let ws = val(*w).shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let hw = h * wd;
                let ckk = c * kh * kw;
                let mut col_t = vec![E::ZERO; ckk * hw];
                let mut dw = if dep(*w) {
                    Some(vec![E::ZERO; o * ckk])
                } else {
                    None
                };
                let mut dx = if dep(*x) {
                    Some(Tensor::zeros(xs))
                } else {
                    None
                };
                let mut dcol = vec![E::ZERO; ckk * hw];
                for ni in 0..n {
                    let gslice = &g.data()[ni * o * hw..(ni + 1) * o * hw];
                    if let Some(dw) = dw.as_mut() {
                        kernels::im2col_t(
                            &val(*x).data()[ni * c * hw..(ni + 1) * c * hw],
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            &mut col_t,
                        );
                        // dW[o,ckk] += g[o,hw] * col_t[hw,ckk]
                        kernels::matmul_acc(gslice, &col_t, o, hw, ckk, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        for v in dcol.iter_mut() {
                            *v = E::ZERO;
                        }
                        // dcol[ckk,hw] = wᵀ[ckk,o] * g[o,hw]
                        kernels::matmul_acc_at(val(*w).data(), gslice, ckk, o, hw, &mut dcol);
                        kernels::col2im_acc(
                            &dcol,
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            &mut dx.data_mut()[ni * c * hw..(ni + 1) * c * hw],
                        );
                    }
                }
                if let Some(dx) = dx {
                    acc!(*x, dx);
                }
                if let Some(dw) = dw {
                    acc!(*w, Tensor::new(ws.to_vec(), dw)?);
                }
                if let Some(b) = bias {
                    if dep(*b) {
                        let mut db = vec![E::ZERO; o];
                        for ni in 0..n {
                            for (oi, slot) in db.iter_mut().enumerate() {
                                for &v in &g.data()[(ni * o + oi) * hw..(ni * o + oi + 1) * hw] {
                                    *slot += v;
                                }
                            }
                        }
                        acc!(*b, Tensor::new(vec![o], db)?);
                    }
                }
            }
            OpKind::ConvTemporal { x, w, bias } => {
                let xs = val(*x).shape();
                let ws = val(*w).shape();
                let (t, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kt) = (ws[0], ws[2]);
                let to = t - kt + 1;
                let hw = h * wd;
                let mut dx = if dep(*x) {
                    Some(Tensor::zeros(xs))
                } else {
                    None
                };
                let mut dw = if dep(*w) {
                    Some(vec![E::ZERO; o * c * kt])
                } else {
                    None
                };
                for ti in 0..to {
                    for oi in 0..o {
                        let gpl = &g.data()[(ti * o + oi) * hw..(ti * o + oi + 1) * hw];
                        for ci in 0..c {
                            for dt in 0..kt {
                                let widx = (oi * c + ci) * kt + dt;
                                if let Some(dx) = dx.as_mut() {
                                    let wv = val(*w).data()[widx];
                                    let dst = &mut dx.data_mut()
                                        [((ti + dt) * c + ci) * hw..((ti + dt) * c + ci + 1) * hw];
                                    for (dv, &gv) in dst.iter_mut().zip(gpl.iter()) {
                                        *dv += wv * gv;
                                    }
                                }
                                if let Some(dw) = dw.as_mut() {
                                    let src = &val(*x).data()
                                        [((ti + dt) * c + ci) * hw..((ti + dt) * c + ci + 1) * hw];
                                    let mut acc = E::ZERO;
                                    for (&sv, &gv) in src.iter().zip(gpl.iter()) {
                                        acc += sv * gv;
                                    }
                                    dw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc!(*x, dx);
                }
                if let Some(dw) = dw {
                    acc!(*w, Tensor::new(ws.to_vec(), dw)?);
                }
                if let Some(b) = bias {
                    if dep(*b) {
                        let mut db = vec![E::ZERO; o];
                        for ti in 0..to {
                            for (oi, slot) in db.iter_mut().enumerate() {
                                for &v in &g.data()[(ti * o + oi) * hw..(ti * o + oi + 1) * hw] {
                                    *slot += v;
                                }
                            }
                        }
                        acc!(*b, Tensor::new(vec![o], db)?);
                    }
                }
            }
            OpKind::AvgPool2 { x } => {
                let xs = val(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = E::from_f64(0.25);
                let mut dx = Tensor::zeros(xs);
                {
                    let dd = dx.data_mut();
                    for nc in 0..n * c {
                        let gs = &g.data()[nc * ho * wo..(nc + 1) * ho * wo];
                        let dst = &mut dd[nc * h * w..(nc + 1) * h * w];
                        for y in 0..ho {
                            for xx in 0..wo {
                                let gv = gs[y * wo + xx] * quarter;
                                dst[(2 * y) * w + 2 * xx] += gv;
                                dst[(2 * y) * w + 2 * xx + 1] += gv;
                                dst[(2 * y + 1) * w + 2 * xx] += gv;
                                dst[(2 * y + 1) * w + 2 * xx + 1] += gv;
                            }
                        }
                    }
                }
                acc!(*x, dx);
            }
            OpKind::Upsample2 { x } => {
                let xs = val(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (ho, wo) = (h * 2, w * 2);
                let mut dx = Tensor::zeros(xs);
                {
                    let dd = dx.data_mut();
                    for nc in 0..n * c {
                        let gs = &g.data()[nc * ho * wo..(nc + 1) * ho * wo];
                        let dst = &mut dd[nc * h * w..(nc + 1) * h * w];
                        for y in 0..ho {
                            for xx in 0..wo {
                                dst[(y / 2) * w + xx / 2] += gs[y * wo + xx];
                            }
                        }
                    }
                }
                acc!(*x, dx);
            }
            OpKind::GlobalAvgPool { x } => {
                let xs = val(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let inv = E::from_f64(1.0 / (h * w) as f64);
                let mut dx = Tensor::zeros(xs);
                {
                    let dd = dx.data_mut();
                    for nc in 0..n * c {
                        let gv = g.data()[nc] * inv;
                        for v in &mut dd[nc * h * w..(nc + 1) * h * w] {
                            *v += gv;
                        }
                    }
                }
                acc!(*x, dx);
            }
            OpKind::Concat { parts, axis } => {
                let first = val(parts[0]).shape();
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let axis_total: usize = parts.iter().map(|&p| val(p).shape()[*axis]).sum();
                let mut offset = 0;
                for &p in parts {
                    let alen = val(p).shape()[*axis];
                    if dep(p) {
                        let mut dp = Tensor::zeros(val(p).shape());
                        {
                            let dd = dp.data_mut();
                            for o in 0..outer {
                                let src = &g.data()[(o * axis_total + offset) * inner
                                    ..(o * axis_total + offset + alen) * inner];
                                dd[o * alen * inner..(o + 1) * alen * inner]
                                    .copy_from_slice(src);
                            }
                        }
                        acc!(p, dp);
                    }
                    offset += alen;
                }
            }
            OpKind::RepeatOuter { x, count } => {
                let xv = val(*x);
                let n = xv.numel();
                let mut dx = Tensor::zeros(xv.shape());
                {
                    let dd = dx.data_mut();
                    for r in 0..*count {
                        for (d, &gv) in dd.iter_mut().zip(g.data()[r * n..(r + 1) * n].iter()) {
                            *d += gv;
                        }
                    }
                }
                acc!(*x, dx);
            }
            OpKind::GatherRows { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut dt = Tensor::zeros(tv.shape());
                {
                    let dd = dt.data_mut();
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dd[id * d + j] += g.data()[row * d + j];
                        }
                    }
                }
                acc!(*table, dt);
            }
            OpKind::AddChan { x, bias } => {
                acc!(*x, g.clone());
                if dep(*bias) {
                    let xs = val(*x).shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let mut db = vec![E::ZERO; c];
                    for ni in 0..n {
                        for (ci, slot) in db.iter_mut().enumerate() {
                            for &v in &g.data()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w] {
                                *slot += v;
                            }
                        }
                    }
                    acc!(*bias, Tensor::new(vec![c], db)?);
                }
            }
            OpKind::Mean { x, axis } => {
                let xv = val(*x);
                let (outer, alen, inner) = split_axis(xv.shape(), *axis);
                let inv = E::from_f64(1.0 / alen as f64);
                let mut dx = Tensor::zeros(xv.shape());
                {
                    let dd = dx.data_mut();
                    for o in 0..outer {
                        let gs = &g.data()[o * inner..(o + 1) * inner];
                        for j in 0..alen {
                            let dst = &mut dd[(o * alen + j) * inner..(o * alen + j + 1) * inner];
                            for (d, &gv) in dst.iter_mut().zip(gs.iter()) {
                                *d += gv * inv;
                            }
                        }
                    }
                }
                acc!(*x, dx);
            }
            OpKind::MeanAll { x } => {
                let xv = val(*x);
                let gv = g.data()[0] * E::from_f64(1.0 / xv.numel() as f64);
                acc!(*x, Tensor::full(xv.shape(), gv));
            }
            OpKind::SumAll { x } => {
                let gv = g.data()[0];
                acc!(*x, Tensor::full(val(*x).shape(), gv));
            }
            OpKind::Mse { pred, target } => {
                let gv = g.data()[0];
                let n = val(*pred).numel();
                let coef = gv * E::from_f64(2.0 / n as f64);
                if dep(*pred) {
                    let mut dp = Tensor::zeros(val(*pred).shape());
                    for ((d, &p), &t) in dp
                        .data_mut()
                        .iter_mut()
                        .zip(val(*pred).data().iter())
                        .zip(val(*target).data().iter())
                    {
                        *d = coef * (p - t);
                    }
                    acc!(*pred, dp);
                }
                if dep(*target) {
                    let mut dt = Tensor::zeros(val(*target).shape());
                    for ((d, &p), &t) in dt
                        .data_mut()
                        .iter_mut()
                        .zip(val(*pred).data().iter())
                        .zip(val(*target).data().iter())
                    {
                        *d = -(coef * (p - t));
                    }
                    acc!(*target, dt);
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<E: Scalar>(x: E) -> E {
    E::ONE / (E::ONE + (-x).exp())
}

/// Mean and reciprocal standard deviation of a slice (eps-stabilized).
fn row_mean_rstd<E: Scalar>(row: &[E]) -> (E, E) {
    let inv = E::from_f64(1.0 / row.len() as f64);
    let mut mean = E::ZERO;
    for &v in row {
        mean += v;
    }
    mean = mean * inv;
    let mut var = E::ZERO;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var = var * inv;
    let rstd = E::ONE / (var + E::from_f64(NORM_EPS)).sqrt();
    (mean, rstd)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose2d<E: Scalar>(t: &Tensor<E>) -> Tensor<E> {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    {
        let od = out.data_mut();
        for i in 0..m {
            for j in 0..n {
                od[j * m + i] = t.data()[i * n + j];
            }
        }
    }
    out
}

fn permute_copy<E: Scalar>(t: &Tensor<E>, axes: &[usize]) -> Tensor<E> {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        let sd = t.data();
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for o in od.iter_mut() {
            *o = sd[src];
            // odometer increment over the output multi-index
            for d in (0..rank).rev() {
                idx[d] += 1;
                src += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                src -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }
    out
}

/// Validate leading-1 broadcasting of `b` against `a` and apply `f`.
fn broadcast_zip<E: Scalar>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    op: &'static str,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    // Left-pad b with ones, then require an exactly-matching suffix preceded
    // only by ones. That guarantees b tiles contiguously over a.
    let rank = sa.len();
    let pad = rank - sb.len();
    let b_dim = |d: usize| if d < pad { 1 } else { sb[d - pad] };
    let mut split = rank;
    while split > 0 && b_dim(split - 1) == sa[split - 1] {
        split -= 1;
    }
    if (0..split).any(|d| b_dim(d) != 1) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let bn = b.numel();
    let mut out = a.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f(*v, b.data()[i % bn]);
    }
    Ok(out)
}

/// Sum `g` down to `shape` (a leading-1 broadcast source), optionally negated.
fn reduce_to_shape<E: Scalar>(g: &Tensor<E>, shape: &[usize], negate: bool) -> Tensor<E> {
    let bn: usize = shape.iter().product();
    let mut out = Tensor::<E>::zeros(shape);
    {
        let od = out.data_mut();
        for (i, &gv) in g.data().iter().enumerate() {
            od[i % bn] += gv;
        }
        if negate {
            for v in od.iter_mut() {
                *v = -*v;
            }
        }
    }
    out
}

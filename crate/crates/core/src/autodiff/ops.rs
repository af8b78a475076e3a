use super::conv::{self, ConvDims};
use super::{gemm, Layout, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Temporal geometry of a `(k_t × 1)` convolution over the `T×V` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const POINTWISE: ConvGeom = ConvGeom {
        stride: 1,
        dilation: 1,
        pad: 0,
    };

    /// Padding that keeps `T' = ceil(T / stride)` for an odd kernel.
    pub fn same(kernel: usize, dilation: usize, stride: usize) -> Self {
        ConvGeom {
            stride,
            dilation,
            pad: dilation * (kernel - 1) / 2,
        }
    }

    pub fn out_len(&self, t: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        (t + 2 * self.pad)
            .checked_sub(span)
            .map(|r| r / self.stride + 1)
    }
}

/// Which elements share normalization statistics and affine parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormLayout {
    /// One feature per axis-1 channel.
    Channel,
    /// One feature per `(channel, vertex)` pair of an `(N, C, T, V)` tensor.
    ChannelVertex,
}

impl NormLayout {
    fn num_features(self, shape: &[usize]) -> usize {
        match self {
            NormLayout::Channel => shape[1],
            NormLayout::ChannelVertex => shape[1] * shape[3],
        }
    }

    /// Visits `(element_index, feature)` for every element.
    fn for_each(self, shape: &[usize], mut f: impl FnMut(usize, usize)) {
        let n = shape[0];
        let c = shape[1];
        match self {
            NormLayout::Channel => {
                let inner: usize = shape[2..].iter().product();
                let mut e = 0;
                for _ in 0..n {
                    for ch in 0..c {
                        for _ in 0..inner {
                            f(e, ch);
                            e += 1;
                        }
                    }
                }
            }
            NormLayout::ChannelVertex => {
                let (t, v) = (shape[2], shape[3]);
                let mut e = 0;
                for _ in 0..n {
                    for ch in 0..c {
                        for _ in 0..t {
                            for vv in 0..v {
                                f(e, ch * v + vv);
                                e += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    fn check(self, shape: &[usize]) -> Result<()> {
        let ok = match self {
            NormLayout::Channel => shape.len() >= 2,
            NormLayout::ChannelVertex => shape.len() == 4,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{self:?} normalization on shape {shape:?}"
            )))
        }
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MulConst(Var, Vec<f64>),
    AddN(Vec<Var>),
    Relu(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    PairwiseDiff {
        x: Var,
        v: usize,
    },
    TemporalGram(Var),
    GraphMix {
        mask: Var,
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

/// Batch statistics of a training-mode batch norm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

impl Tape {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary_map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    fn binary_map(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + y` where `y`'s shape equals the trailing dims of `x`'s shape.
    pub fn add_suffix(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let (xs, ys) = (xv.shape(), yv.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape("add_suffix", xs, ys));
        }
        let yd = yv.data();
        let data = xv
            .data()
            .chunks(yd.len())
            .flat_map(|c| c.iter().zip(yd).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(xs, data)?;
        let rg = self.rg(&[x, y]);
        Ok(self.push(out, Op::AddSuffix(x, y), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary_map(x, |a| c * a, Op::Scale(x, c))
    }

    /// `s * x` for a single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let op = Op::ScaleBy(x, s);
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|a| c * a).collect())?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, op, rg))
    }

    /// Elementwise product with a fixed (non-differentiable) tensor.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if c.len() != xv.numel() {
            return Err(Error::shape("mul_const", xv.shape(), &[c.len()]));
        }
        let out = Tensor::new(
            xv.shape(),
            xv.data().iter().zip(&c).map(|(a, b)| a * b).collect(),
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("add_n of nothing"))?;
        let mut acc = self.value(first).clone();
        acc.requires_grad = false;
        for &x in &xs[1..] {
            let xv = self.value(x);
            same_shape("add_n", &acc, xv)?;
            axpy(acc.data_mut(), 1.0, xv.data());
        }
        let rg = self.rg(xs);
        Ok(self.push(acc, Op::AddN(xs.to_vec()), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary_map(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary_map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} on shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len)
                    .map(|l| xd[idx(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (xd[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "mean axis {axis} on shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                axpy(
                    dst,
                    1.0,
                    &xd[(o * len + l) * inner..(o * len + l + 1) * inner],
                );
            }
            dst.iter_mut().for_each(|d| *d /= len as f64);
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let out = Tensor::new(&new_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} on shape {base:?}"
            )));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
            chunks.push(s[axis] * inner);
        }
        let row: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// Matrix product of rank-2 or batched rank-3 operands; a batch of one broadcasts.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let split = |s: &[usize]| -> Option<(Option<usize>, usize, usize)> {
            match *s {
                [r, c] => Some((None, r, c)),
                [bt, r, c] => Some((Some(bt), r, c)),
                _ => None,
            }
        };
        let err = || Error::shape("matmul", &sa, &sb);
        let (ba, m, k) = split(&sa).ok_or_else(err)?;
        let (bb, k2, n) = split(&sb).ok_or_else(err)?;
        if k != k2 {
            return Err(err());
        }
        let batch = match (ba, bb) {
            (None, None) => 1,
            (Some(x), None) | (None, Some(x)) => x,
            (Some(x), Some(y)) if x == y || y == 1 => x,
            (Some(1), Some(y)) => y,
            _ => return Err(err()),
        };
        let a_batched = ba.is_some_and(|x| x == batch && x > 1);
        let b_batched = bb.is_some_and(|x| x == batch && x > 1);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            gemm(
                m,
                k,
                n,
                1.0,
                ad,
                Layout::row_major(ao, k),
                bd,
                Layout::row_major(bo, n),
                0.0,
                &mut out,
                Layout::row_major(bi * m * n, n),
            );
        }
        let shape = if ba.is_none() && bb.is_none() {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
            rg,
        ))
    }

    /// Convolution of `x: (N, C_in, T, V)` with `w: (C_out, C_in, k_t, 1)` along `T`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[3] != 1 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::invalid(
                "conv2d stride and dilation must be positive",
            ));
        }
        let (n, ci, t, v) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kt) = (ws[0], ws[2]);
        let t_out = geom
            .out_len(t, kt)
            .ok_or_else(|| Error::invalid(format!("conv2d kernel {kt} too long for T={t}")))?;
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[co]));
            }
        }
        let mut out = vec![0.0; n * co * t_out * v];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (chunk, &bv) in out.chunks_mut(t_out * v).zip(bd.iter().cycle()) {
                chunk.iter_mut().for_each(|o| *o = bv);
            }
        }
        let dims = ConvDims {
            n,
            ci,
            t,
            v,
            co,
            kt,
            t_out,
            geom,
        };
        conv::forward(&dims, self.value(x).data(), self.value(w).data(), &mut out);
        let out = Tensor::new(&[n, co, t_out, v], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(out, Op::Conv2d { x, w, bias, geom }, rg))
    }

    /// `out[.., i, j] = x[.., i] - x[.., j]`.
    pub fn pairwise_diff(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = *xv.shape().last().expect("rank >= 1");
        let xd = xv.data();
        let mut out = Vec::with_capacity(xd.len() * v);
        for row in xd.chunks(v) {
            for &a in row {
                out.extend(row.iter().map(|&b| a - b));
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.push(v);
        let out = Tensor::new(&shape, out).expect("consistent shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::PairwiseDiff { x, v }, rg)
    }

    /// Per-channel temporal inner products: `out[n,c,i,j] = Σ_t x[n,c,t,i]·x[n,c,t,j]`.
    pub fn temporal_gram(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, c, t, v] = xs[..] else {
            return Err(Error::shape("temporal_gram", &xs, &[0, 0, 0, 0]));
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * v * v];
        for nc in 0..n * c {
            let xo = nc * t * v;
            gemm(
                v,
                t,
                v,
                1.0,
                xd,
                Layout::transposed(xo, v),
                xd,
                Layout::row_major(xo, v),
                0.0,
                &mut out,
                Layout::row_major(nc * v * v, v),
            );
        }
        let out = Tensor::new(&[n, c, v, v], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::TemporalGram(x), rg))
    }

    /// Vertex aggregation `out[n,c,t,i] = Σ_j mask[n,c,i,j]·x[n,c,t,j]`.
    ///
    /// `mask` is `(V, V)` or `(N_m, C_m, V, V)` with `N_m ∈ {1, N}` and `C_m ∈ {1, C}`.
    pub fn graph_mix(&mut self, mask: Var, x: Var) -> Result<Var> {
        let (ms, xs) = (self.shape(mask).to_vec(), self.shape(x).to_vec());
        let err = || Error::shape("graph_mix", &ms, &xs);
        let [n, c, t, v] = xs[..] else {
            return Err(err());
        };
        let (nm, cm) = match ms[..] {
            [a, b] if a == v && b == v => (1, 1),
            [a, b, p, q] if p == v && q == v && (a == 1 || a == n) && (b == 1 || b == c) => (a, b),
            _ => return Err(err()),
        };
        let (md, xd) = (self.value(mask).data(), self.value(x).data());
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let mo = mask_offset(ni, ci, nm, cm, v);
                let xo = (ni * c + ci) * t * v;
                gemm(
                    t,
                    v,
                    v,
                    1.0,
                    xd,
                    Layout::row_major(xo, v),
                    md,
                    Layout::transposed(mo, v),
                    0.0,
                    &mut out,
                    Layout::row_major(xo, v),
                );
            }
        }
        let out = Tensor::new(&xs, out)?;
        let rg = self.rg(&[mask, x]);
        Ok(self.push(out, Op::GraphMix { mask, x }, rg))
    }

    /// Per-sample normalization over every non-batch axis, then a per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::invalid(format!(
                "layer_norm needs rank >= 2, got {xs:?}"
            )));
        }
        let c = xs[1];
        self.check_affine("layer_norm", gamma, beta, c)?;
        let n = xs[0];
        let per = self.value(x).numel() / n;
        let inner = per / c;
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(n);
        for ni in 0..n {
            let s = &xd[ni * per..(ni + 1) * per];
            let mean = s.iter().sum::<f64>() / per as f64;
            let var = s.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (e, &a) in s.iter().enumerate() {
                let h = (a - mean) * is;
                let ch = e / inner;
                xhat[ni * per + e] = h;
                out[ni * per + e] = g[ch] * h + b[ch];
            }
        }
        let out = Tensor::new(&xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, f: usize) -> Result<()> {
        for p in [gamma, beta] {
            if self.shape(p) != [f] {
                return Err(Error::shape(op, self.shape(p), &[f]));
            }
        }
        Ok(())
    }

    /// Training-mode batch norm. Returns the output and the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xs = self.shape(x).to_vec();
        layout.check(&xs)?;
        if xs[0] == 0 {
            return Err(Error::invalid("batch_norm on an empty batch"));
        }
        let f = layout.num_features(&xs);
        self.check_affine("batch_norm", gamma, beta, f)?;
        let xd = self.value(x).data();
        let count = (xd.len() / f) as f64;
        let mut sum = vec![0.0; f];
        layout.for_each(&xs, |e, k| sum[k] += xd[e]);
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let mut sq = vec![0.0; f];
        layout.for_each(&xs, |e, k| {
            let d = xd[e] - mean[k];
            sq[k] += d * d;
        });
        let inv_std: Vec<f64> = sq.iter().map(|s| 1.0 / (s / count + eps).sqrt()).collect();
        let unbiased = sq
            .iter()
            .map(|s| if count > 1.0 { s / (count - 1.0) } else { 0.0 })
            .collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        layout.for_each(&xs, |e, k| {
            let h = (xd[e] - mean[k]) * inv_std[k];
            xhat[e] = h;
            out[e] = g[k] * h + b[k];
        });
        let out = Tensor::new(&xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let stats = BatchStats {
            mean,
            var: unbiased,
        };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Eval-mode batch norm against fixed running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        layout: NormLayout,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        layout.check(&xs)?;
        let f = layout.num_features(&xs);
        self.check_affine("batch_norm_eval", gamma, beta, f)?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::shape(
                "batch_norm_eval stats",
                &[running_mean.len()],
                &[f],
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        layout.for_each(&xs, |e, k| {
            let h = (xd[e] - running_mean[k]) * inv_std[k];
            xhat[e] = h;
            out[e] = g[k] * h + b[k];
        });
        let out = Tensor::new(&xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let [n, k] = ls[..] else {
            return Err(Error::shape("cross_entropy", &ls, &[labels.len()]));
        };
        if labels.len() != n || n == 0 {
            return Err(Error::shape("cross_entropy", &ls, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|a| (a - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[label];
            for j in 0..k {
                probs[i * k + j] = (row[j] - log_z).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub(crate) fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_slot(grads, v) {
                        axpy(d, 1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    axpy(d, 1.0, g);
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    axpy(d, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.grad_slot(grads, *a) {
                    d.iter_mut()
                        .zip(g)
                        .zip(bv)
                        .for_each(|((d, g), b)| *d += g * b);
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    d.iter_mut()
                        .zip(g)
                        .zip(av)
                        .for_each(|((d, g), a)| *d += g * a);
                }
            }
            Op::AddSuffix(x, y) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    axpy(d, 1.0, g);
                }
                if let Some(d) = self.grad_slot(grads, *y) {
                    let len = d.len();
                    for chunk in g.chunks(len) {
                        axpy(d, 1.0, chunk);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    axpy(d, *c, g);
                }
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                if let Some(d) = self.grad_slot(grads, *x) {
                    axpy(d, c, g);
                }
                if let Some(d) = self.grad_slot(grads, *s) {
                    d[0] += g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, x)| g * x)
                        .sum::<f64>();
                }
            }
            Op::MulConst(x, c) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut()
                        .zip(g)
                        .zip(c)
                        .for_each(|((d, g), c)| *d += g * c);
                }
            }
            Op::AddN(xs) => {
                for &x in xs {
                    if let Some(d) = self.grad_slot(grads, x) {
                        axpy(d, 1.0, g);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    let xv = self.value(*x).data();
                    d.iter_mut()
                        .zip(g)
                        .zip(xv)
                        .for_each(|((d, g), &x)| *d += if x > 0.0 { *g } else { 0.0 });
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    let y = node.value.data();
                    d.iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((d, g), y)| *d += g * (1.0 - y * y));
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    let y = node.value.data();
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let idx = |l: usize| (o * len + l) * inner + ii;
                            let dot: f64 = (0..*len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..*len {
                                d[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    let s = 1.0 / *len as f64;
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..*len {
                            let off = (o * len + l) * inner;
                            axpy(&mut d[off..off + inner], s, src);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    axpy(d, 1.0, g);
                }
            }
            Op::Concat {
                parts,
                outer,
                chunks,
            } => {
                let row: usize = chunks.iter().sum();
                let mut start = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    if let Some(d) = self.grad_slot(grads, p) {
                        for o in 0..*outer {
                            axpy(
                                &mut d[o * c..(o + 1) * c],
                                1.0,
                                &g[o * row + start..o * row + start + c],
                            );
                        }
                    }
                    start += c;
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.grad_slot(grads, *a) {
                    for bi in 0..*batch {
                        let ao = if *a_batched { bi * m * k } else { 0 };
                        let bo = if *b_batched { bi * k * n } else { 0 };
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            g,
                            Layout::row_major(bi * m * n, n),
                            bd,
                            Layout::transposed(bo, n),
                            1.0,
                            d,
                            Layout::row_major(ao, k),
                        );
                    }
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    for bi in 0..*batch {
                        let ao = if *a_batched { bi * m * k } else { 0 };
                        let bo = if *b_batched { bi * k * n } else { 0 };
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            ad,
                            Layout::transposed(ao, k),
                            g,
                            Layout::row_major(bi * m * n, n),
                            1.0,
                            d,
                            Layout::row_major(bo, n),
                        );
                    }
                }
            }
            Op::Conv2d { x, w, bias, geom } => self.conv2d_backward(*x, *w, *bias, *geom, g, grads),
            Op::PairwiseDiff { x, v } => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    let v = *v;
                    for (r, gm) in g.chunks(v * v).enumerate() {
                        let dr = &mut d[r * v..(r + 1) * v];
                        for i in 0..v {
                            for j in 0..v {
                                let gij = gm[i * v + j];
                                dr[i] += gij;
                                dr[j] -= gij;
                            }
                        }
                    }
                }
            }
            Op::TemporalGram(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    let xs = self.shape(*x);
                    let (nc, t, v) = (xs[0] * xs[1], xs[2], xs[3]);
                    let xd = self.value(*x).data();
                    let mut sym = vec![0.0; v * v];
                    for b in 0..nc {
                        let gm = &g[b * v * v..(b + 1) * v * v];
                        for i in 0..v {
                            for j in 0..v {
                                sym[i * v + j] = gm[i * v + j] + gm[j * v + i];
                            }
                        }
                        gemm(
                            t,
                            v,
                            v,
                            1.0,
                            xd,
                            Layout::row_major(b * t * v, v),
                            &sym,
                            Layout::row_major(0, v),
                            1.0,
                            d,
                            Layout::row_major(b * t * v, v),
                        );
                    }
                }
            }
            Op::GraphMix { mask, x } => {
                let xs = self.shape(*x);
                let (n, c, t, v) = (xs[0], xs[1], xs[2], xs[3]);
                let ms = self.shape(*mask);
                let (nm, cm) = if ms.len() == 2 {
                    (1, 1)
                } else {
                    (ms[0], ms[1])
                };
                let (md, xd) = (self.value(*mask).data(), self.value(*x).data());
                if let Some(d) = self.grad_slot(grads, *x) {
                    for ni in 0..n {
                        for ci in 0..c {
                            let mo = mask_offset(ni, ci, nm, cm, v);
                            let xo = (ni * c + ci) * t * v;
                            gemm(
                                t,
                                v,
                                v,
                                1.0,
                                g,
                                Layout::row_major(xo, v),
                                md,
                                Layout::row_major(mo, v),
                                1.0,
                                d,
                                Layout::row_major(xo, v),
                            );
                        }
                    }
                }
                if let Some(d) = self.grad_slot(grads, *mask) {
                    for ni in 0..n {
                        for ci in 0..c {
                            let mo = mask_offset(ni, ci, nm, cm, v);
                            let xo = (ni * c + ci) * t * v;
                            gemm(
                                v,
                                t,
                                v,
                                1.0,
                                g,
                                Layout::transposed(xo, v),
                                xd,
                                Layout::row_major(xo, v),
                                1.0,
                                d,
                                Layout::row_major(mo, v),
                            );
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let per = xhat.len() / n;
                let inner = per / c;
                let gd = self.value(*gamma).data();
                if let Some(d) = self.grad_slot(grads, *x) {
                    for ni in 0..n {
                        let base = ni * per;
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for e in 0..per {
                            let dh = g[base + e] * gd[e / inner];
                            m1 += dh;
                            m2 += dh * xhat[base + e];
                        }
                        m1 /= per as f64;
                        m2 /= per as f64;
                        for e in 0..per {
                            let dh = g[base + e] * gd[e / inner];
                            d[base + e] += inv_std[ni] * (dh - m1 - xhat[base + e] * m2);
                        }
                    }
                }
                if let Some(d) = self.grad_slot(grads, *gamma) {
                    for (e, (&gg, &h)) in g.iter().zip(xhat).enumerate() {
                        d[(e % per) / inner] += gg * h;
                    }
                }
                if let Some(d) = self.grad_slot(grads, *beta) {
                    for (e, &gg) in g.iter().enumerate() {
                        d[(e % per) / inner] += gg;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let f = layout.num_features(xs);
                let count = (xhat.len() / f) as f64;
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![0.0; f];
                let mut sum_gh = vec![0.0; f];
                layout.for_each(xs, |e, k| {
                    sum_g[k] += g[e];
                    sum_gh[k] += g[e] * xhat[e];
                });
                if let Some(d) = self.grad_slot(grads, *x) {
                    layout.for_each(xs, |e, k| {
                        d[e] += gd[k]
                            * inv_std[k]
                            * (g[e] - sum_g[k] / count - xhat[e] * sum_gh[k] / count);
                    });
                }
                if let Some(d) = self.grad_slot(grads, *gamma) {
                    axpy(d, 1.0, &sum_gh);
                }
                if let Some(d) = self.grad_slot(grads, *beta) {
                    axpy(d, 1.0, &sum_g);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let gd = self.value(*gamma).data();
                if let Some(d) = self.grad_slot(grads, *x) {
                    layout.for_each(xs, |e, k| d[e] += g[e] * gd[k] * inv_std[k]);
                }
                if let Some(d) = self.grad_slot(grads, *gamma) {
                    layout.for_each(xs, |e, k| d[k] += g[e] * xhat[e]);
                }
                if let Some(d) = self.grad_slot(grads, *beta) {
                    layout.for_each(xs, |e, k| d[k] += g[e]);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(d) = self.grad_slot(grads, *logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let s = g[0] / n as f64;
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[i * k + j] += s * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, ci, t, v) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kt) = (ws[0], ws[2]);
        let t_out = geom.out_len(t, kt).expect("validated in forward");
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        if let Some(b) = bias {
            if let Some(d) = self.grad_slot(grads, b) {
                for (idx, chunk) in g.chunks(t_out * v).enumerate() {
                    d[idx % co] += chunk.iter().sum::<f64>();
                }
            }
        }
        let dims = ConvDims {
            n,
            ci,
            t,
            v,
            co,
            kt,
            t_out,
            geom,
        };
        if let Some(dw) = self.grad_slot(grads, w) {
            conv::backward_w(&dims, xd, g, dw);
        }
        if let Some(dx) = self.grad_slot(grads, x) {
            conv::backward_x(&dims, wd, g, dx);
        }
    }
}

fn mask_offset(ni: usize, ci: usize, nm: usize, cm: usize, v: usize) -> usize {
    let a = if nm == 1 { 0 } else { ni };
    let b = if cm == 1 { 0 } else { ci };
    (a * cm + b) * v * v
}

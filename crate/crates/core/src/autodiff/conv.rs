//! Temporal convolution kernels: strided gemm for wide channel counts,
//! direct row loops when the channel product is small.

use super::ops::ConvGeom;
use super::{gemm, Layout};

/// Below this `C_out·C_in`, per-call gemm packing costs more than it saves.
const DIRECT_MAX: usize = 64;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub t: usize,
    pub v: usize,
    pub co: usize,
    pub kt: usize,
    pub t_out: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    fn direct(&self) -> bool {
        self.co * self.ci <= DIRECT_MAX
    }

    fn shift(&self, k: usize) -> isize {
        (k * self.geom.dilation) as isize - self.geom.pad as isize
    }

    /// Output frames `[lo, hi)` whose input frame `t'·stride + shift` lies in `[0, t)`.
    fn valid(&self, k: usize) -> Option<(usize, usize)> {
        valid_range(self.t, self.t_out, self.geom.stride, self.shift(k))
    }

    fn in_row(&self, to: usize, k: usize) -> usize {
        (to as isize * self.geom.stride as isize + self.shift(k)) as usize
    }

    fn x_off(&self, ni: usize, c: usize) -> usize {
        (ni * self.ci + c) * self.t * self.v
    }

    fn y_off(&self, ni: usize, c: usize) -> usize {
        (ni * self.co + c) * self.t_out * self.v
    }

    fn w_idx(&self, o: usize, c: usize, k: usize) -> usize {
        (o * self.ci + c) * self.kt + k
    }
}

pub(crate) fn valid_range(
    t: usize,
    t_out: usize,
    stride: usize,
    shift: isize,
) -> Option<(usize, usize)> {
    let (t, stride) = (t as isize, stride as isize);
    let lo = if shift >= 0 {
        0
    } else {
        (-shift + stride - 1) / stride
    };
    let hi = ((t - 1 - shift).div_euclid(stride) + 1).min(t_out as isize);
    (hi > lo).then_some((lo as usize, hi as usize))
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Calls `f(dst_row_range, src_row_range)` for each contiguous run of rows
/// tap `k` connects, as element offsets relative to the channel planes.
fn for_runs(
    d: &ConvDims,
    k: usize,
    mut f: impl FnMut(std::ops::Range<usize>, std::ops::Range<usize>),
) {
    let Some((lo, hi)) = d.valid(k) else { return };
    let v = d.v;
    if d.geom.stride == 1 {
        let src = d.in_row(lo, k);
        f(lo * v..hi * v, src * v..(src + hi - lo) * v);
    } else {
        for to in lo..hi {
            let src = d.in_row(to, k);
            f(to * v..(to + 1) * v, src * v..(src + 1) * v);
        }
    }
}

/// `out += conv(x, w)`; `out` already holds the bias.
pub(crate) fn forward(d: &ConvDims, xd: &[f64], wd: &[f64], out: &mut [f64]) {
    if d.direct() {
        for ni in 0..d.n {
            for o in 0..d.co {
                let yo = d.y_off(ni, o);
                let y = &mut out[yo..yo + d.t_out * d.v];
                for c in 0..d.ci {
                    let x = &xd[d.x_off(ni, c)..][..d.t * d.v];
                    for k in 0..d.kt {
                        let w = wd[d.w_idx(o, c, k)];
                        for_runs(d, k, |dst, src| axpy(&mut y[dst], w, &x[src]));
                    }
                }
            }
        }
        return;
    }
    let (ci, co, t, v, t_out, kt) = (d.ci, d.co, d.t, d.v, d.t_out, d.kt);
    let mut gathered = Vec::new();
    for ni in 0..d.n {
        for k in 0..kt {
            let wl = Layout {
                off: k,
                rs: ci * kt,
                cs: kt,
            };
            if d.geom.stride == 1 {
                let Some((lo, hi)) = d.valid(k) else { continue };
                let src = d.x_off(ni, 0) + d.in_row(lo, k) * v;
                gemm(
                    co,
                    ci,
                    (hi - lo) * v,
                    1.0,
                    wd,
                    wl,
                    xd,
                    Layout::row_major(src, t * v),
                    1.0,
                    out,
                    Layout {
                        off: d.y_off(ni, 0) + lo * v,
                        rs: t_out * v,
                        cs: 1,
                    },
                );
            } else {
                gather_rows(d, xd, ni, k, &mut gathered);
                gemm(
                    co,
                    ci,
                    t_out * v,
                    1.0,
                    wd,
                    wl,
                    &gathered,
                    Layout::row_major(0, t_out * v),
                    1.0,
                    out,
                    Layout::row_major(d.y_off(ni, 0), t_out * v),
                );
            }
        }
    }
}

/// `dw += ∂/∂w` for upstream gradient `g`.
pub(crate) fn backward_w(d: &ConvDims, xd: &[f64], g: &[f64], dw: &mut [f64]) {
    if d.direct() {
        for ni in 0..d.n {
            for o in 0..d.co {
                let gy = &g[d.y_off(ni, o)..][..d.t_out * d.v];
                for c in 0..d.ci {
                    let x = &xd[d.x_off(ni, c)..][..d.t * d.v];
                    for k in 0..d.kt {
                        let mut acc = 0.0;
                        for_runs(d, k, |dst, src| acc += dot(&gy[dst], &x[src]));
                        dw[d.w_idx(o, c, k)] += acc;
                    }
                }
            }
        }
        return;
    }
    let (ci, co, t, v, t_out, kt) = (d.ci, d.co, d.t, d.v, d.t_out, d.kt);
    let mut gathered = Vec::new();
    for ni in 0..d.n {
        for k in 0..kt {
            let wl = Layout {
                off: k,
                rs: ci * kt,
                cs: kt,
            };
            if d.geom.stride == 1 {
                let Some((lo, hi)) = d.valid(k) else { continue };
                let src = d.x_off(ni, 0) + d.in_row(lo, k) * v;
                gemm(
                    co,
                    (hi - lo) * v,
                    ci,
                    1.0,
                    g,
                    Layout {
                        off: d.y_off(ni, 0) + lo * v,
                        rs: t_out * v,
                        cs: 1,
                    },
                    xd,
                    Layout::transposed(src, t * v),
                    1.0,
                    dw,
                    wl,
                );
            } else {
                gather_rows(d, xd, ni, k, &mut gathered);
                gemm(
                    co,
                    t_out * v,
                    ci,
                    1.0,
                    g,
                    Layout::row_major(d.y_off(ni, 0), t_out * v),
                    &gathered,
                    Layout::transposed(0, t_out * v),
                    1.0,
                    dw,
                    wl,
                );
            }
        }
    }
}

/// `dx += ∂/∂x` for upstream gradient `g`.
pub(crate) fn backward_x(d: &ConvDims, wd: &[f64], g: &[f64], dx: &mut [f64]) {
    if d.direct() {
        for ni in 0..d.n {
            for c in 0..d.ci {
                let xo = d.x_off(ni, c);
                let x = &mut dx[xo..xo + d.t * d.v];
                for o in 0..d.co {
                    let gy = &g[d.y_off(ni, o)..][..d.t_out * d.v];
                    for k in 0..d.kt {
                        let w = wd[d.w_idx(o, c, k)];
                        for_runs(d, k, |dst, src| axpy(&mut x[src], w, &gy[dst]));
                    }
                }
            }
        }
        return;
    }
    let (ci, co, t, v, t_out, kt) = (d.ci, d.co, d.t, d.v, d.t_out, d.kt);
    let mut dg = Vec::new();
    for ni in 0..d.n {
        for k in 0..kt {
            let wt = Layout {
                off: k,
                rs: kt,
                cs: ci * kt,
            };
            if d.geom.stride == 1 {
                let Some((lo, hi)) = d.valid(k) else { continue };
                let dst = d.x_off(ni, 0) + d.in_row(lo, k) * v;
                gemm(
                    ci,
                    co,
                    (hi - lo) * v,
                    1.0,
                    wd,
                    wt,
                    g,
                    Layout {
                        off: d.y_off(ni, 0) + lo * v,
                        rs: t_out * v,
                        cs: 1,
                    },
                    1.0,
                    dx,
                    Layout::row_major(dst, t * v),
                );
            } else {
                dg.clear();
                dg.resize(ci * t_out * v, 0.0);
                gemm(
                    ci,
                    co,
                    t_out * v,
                    1.0,
                    wd,
                    wt,
                    g,
                    Layout::row_major(d.y_off(ni, 0), t_out * v),
                    0.0,
                    &mut dg,
                    Layout::row_major(0, t_out * v),
                );
                scatter_rows(d, &dg, dx, ni, k);
            }
        }
    }
}

fn gather_rows(d: &ConvDims, xd: &[f64], ni: usize, k: usize, out: &mut Vec<f64>) {
    let (v, t_out) = (d.v, d.t_out);
    out.clear();
    out.resize(d.ci * t_out * v, 0.0);
    let Some((lo, hi)) = d.valid(k) else { return };
    for c in 0..d.ci {
        for to in lo..hi {
            let src = d.x_off(ni, c) + d.in_row(to, k) * v;
            let dst = (c * t_out + to) * v;
            out[dst..dst + v].copy_from_slice(&xd[src..src + v]);
        }
    }
}

fn scatter_rows(d: &ConvDims, dg: &[f64], dx: &mut [f64], ni: usize, k: usize) {
    let (v, t_out) = (d.v, d.t_out);
    let Some((lo, hi)) = d.valid(k) else { return };
    for c in 0..d.ci {
        for to in lo..hi {
            let dst = d.x_off(ni, c) + d.in_row(to, k) * v;
            let src = (c * t_out + to) * v;
            axpy(&mut dx[dst..dst + v], 1.0, &dg[src..src + v]);
        }
    }
}

//! Shared helpers for the integration tests: parameter randomization,
//! finite-difference checks of whole layers and brute-force reference
//! implementations written with plain nested loops.

#![allow(dead_code)]

use hagcn::attention::{Branch, Branches};
use hagcn::autodiff::{grad_check_many, Var};
use hagcn::graph::{GraphSpec, Subset};
use hagcn::params::{Ctx, Mode, ParamStore, NORM_EPS};
use hagcn::temporal::TemporalMode;
use hagcn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

pub fn chain(v: usize) -> GraphSpec {
    GraphSpec::from_edges(v, (1..v).map(|c| (c - 1, c)).collect(), None).unwrap()
}

/// Random tree on `v` joints, optionally with two hub links.
pub fn random_graph<R: Rng>(v: usize, rng: &mut R) -> GraphSpec {
    let edges = (1..v).map(|c| (rng.random_range(0..c), c)).collect();
    let hubs: Vec<usize> = if v >= 3 && rng.random_bool(0.5) {
        vec![0, v - 1, v / 2]
    } else {
        Vec::new()
    };
    GraphSpec::from_edges(v, edges, (!hubs.is_empty()).then_some(&hubs[..])).unwrap()
}

/// Replaces every parameter and running statistic with a random value so
/// that no term of a layer is trivially zero or one.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for (name, p) in store.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = if name.ends_with(".gamma") {
            Tensor::rand_uniform(&shape, 0.7, 1.3, &mut r)
        } else if name.ends_with(".beta") {
            Tensor::rand_uniform(&shape, -0.2, 0.2, &mut r)
        } else if name.ends_with(".alpha") {
            Tensor::rand_uniform(&shape, 0.3, 1.0, &mut r)
        } else {
            Tensor::rand_uniform(&shape, -0.8, 0.8, &mut r)
        };
    }
    let names: Vec<String> = store.buffers().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let b = store.buffer_mut(&name).unwrap();
        let shape = b.shape().to_vec();
        *b = if name.ends_with("running_var") {
            Tensor::rand_uniform(&shape, 0.5, 1.5, &mut r)
        } else {
            Tensor::rand_uniform(&shape, -0.2, 0.2, &mut r)
        };
    }
}

/// Runs `forward` once on constant inputs and returns the output value.
pub fn run<F>(
    store: &ParamStore,
    x: &Tensor,
    mode: Mode,
    disable: Option<Branch>,
    forward: F,
) -> Tensor
where
    F: Fn(&mut Ctx, Var) -> hagcn::Result<Var>,
{
    let mut tape = hagcn::autodiff::Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, mode).with_disable(disable);
    let xv = ctx.tape.constant(x.clone());
    let y = forward(&mut ctx, xv).unwrap();
    ctx.tape.value(y).clone()
}

/// Max relative error between the analytic and central-difference gradient
/// of `Σ w ⊙ forward(x)` with respect to the input and every parameter.
pub fn grad_error<F>(
    store: &ParamStore,
    x: &Tensor,
    mode: Mode,
    disable: Option<Branch>,
    seed: u64,
    per_input: usize,
    forward: F,
) -> f64
where
    F: Fn(&mut Ctx, Var) -> hagcn::Result<Var>,
{
    let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![x.clone()];
    inputs.extend(names.iter().map(|n| store.param(n).unwrap().value.clone()));
    let numel = run(store, x, mode, disable, &forward).numel();
    let weights = Tensor::rand_uniform(&[numel], -1.0, 1.0, &mut rng(seed)).into_data();
    grad_check_many(
        |tape, vars| {
            let mut ctx = Ctx::new(tape, store, mode).with_disable(disable);
            for (n, v) in names.iter().zip(&vars[1..]) {
                ctx.bind(n.clone(), *v);
            }
            let y = forward(&mut ctx, vars[0])?;
            let w = ctx.tape.mul_const(y, weights.clone())?;
            Ok(ctx.tape.sum(w))
        },
        &inputs,
        1e-6,
        Some(per_input),
    )
    .unwrap()
    .max_rel_error
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.param(name).unwrap().value.data()
}

/// Dense 4-d array indexed `[a][b][c][d]`.
#[derive(Clone, Debug)]
pub struct Nd4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Nd4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Nd4 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Nd4 {
            dims: [s[0], s[1], s[2], s[3]],
            data: t.data().to_vec(),
        }
    }

    fn idx(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        ((a * self.dims[1] + b) * self.dims[2] + c) * self.dims[3] + d
    }

    pub fn at(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.data[self.idx(a, b, c, d)]
    }

    pub fn at_mut(&mut self, a: usize, b: usize, c: usize, d: usize) -> &mut f64 {
        let i = self.idx(a, b, c, d);
        &mut self.data[i]
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor::new(&self.dims, self.data).unwrap()
    }
}

/// `y[n,o,t,v] = Σ_c w[o,c]·x[n,c,t,v] + b[o]`.
fn pointwise(x: &Nd4, w: &[f64], b: &[f64], co: usize) -> Nd4 {
    let [n, ci, t, v] = x.dims;
    let mut y = Nd4::zeros([n, co, t, v]);
    for ni in 0..n {
        for o in 0..co {
            for ti in 0..t {
                for vi in 0..v {
                    let mut s = b[o];
                    for c in 0..ci {
                        s += w[o * ci + c] * x.at(ni, c, ti, vi);
                    }
                    *y.at_mut(ni, o, ti, vi) = s;
                }
            }
        }
    }
    y
}

/// Per-sample normalization over `(C, T, V)` with a per-channel affine.
fn layer_norm(x: &Nd4, gamma: &[f64], beta: &[f64]) -> Nd4 {
    let [n, c, t, v] = x.dims;
    let m = (c * t * v) as f64;
    let mut y = x.clone();
    for ni in 0..n {
        let mut mean = 0.0;
        for ci in 0..c {
            for ti in 0..t {
                for vi in 0..v {
                    mean += x.at(ni, ci, ti, vi);
                }
            }
        }
        mean /= m;
        let mut var = 0.0;
        for ci in 0..c {
            for ti in 0..t {
                for vi in 0..v {
                    var += (x.at(ni, ci, ti, vi) - mean).powi(2);
                }
            }
        }
        var /= m;
        for ci in 0..c {
            for ti in 0..t {
                for vi in 0..v {
                    let z = (x.at(ni, ci, ti, vi) - mean) / (var + NORM_EPS).sqrt();
                    *y.at_mut(ni, ci, ti, vi) = z * gamma[ci] + beta[ci];
                }
            }
        }
    }
    y
}

/// Per-channel normalization over `(N, T, V)`: batch statistics with the
/// biased variance when `running` is `None`, the given statistics otherwise.
fn batch_norm(x: &Nd4, gamma: &[f64], beta: &[f64], running: Option<(&[f64], &[f64])>) -> Nd4 {
    let [n, c, t, v] = x.dims;
    let m = (n * t * v) as f64;
    let mut y = x.clone();
    for ci in 0..c {
        let (mean, var) = match running {
            Some((rm, rv)) => (rm[ci], rv[ci]),
            None => {
                let mut mean = 0.0;
                for ni in 0..n {
                    for ti in 0..t {
                        for vi in 0..v {
                            mean += x.at(ni, ci, ti, vi);
                        }
                    }
                }
                mean /= m;
                let mut var = 0.0;
                for ni in 0..n {
                    for ti in 0..t {
                        for vi in 0..v {
                            var += (x.at(ni, ci, ti, vi) - mean).powi(2);
                        }
                    }
                }
                (mean, var / m)
            }
        };
        for ni in 0..n {
            for ti in 0..t {
                for vi in 0..v {
                    let z = (x.at(ni, ci, ti, vi) - mean) / (var + NORM_EPS).sqrt();
                    *y.at_mut(ni, ci, ti, vi) = z * gamma[ci] + beta[ci];
                }
            }
        }
    }
    y
}

fn store_bn(store: &ParamStore, prefix: &str, x: &Nd4, mode: Mode) -> Nd4 {
    let g = p(store, &format!("{prefix}.gamma"));
    let b = p(store, &format!("{prefix}.beta"));
    match mode {
        Mode::Train => batch_norm(x, g, b, None),
        Mode::Eval => {
            let rm = store
                .buffer(&format!("{prefix}.running_mean"))
                .unwrap()
                .data();
            let rv = store
                .buffer(&format!("{prefix}.running_var"))
                .unwrap()
                .data();
            batch_norm(x, g, b, Some((rm, rv)))
        }
    }
}

/// Zero-padded dilated temporal convolution with a `(co, ci, k, 1)` kernel.
fn temporal_conv(
    x: &Nd4,
    w: &[f64],
    b: &[f64],
    co: usize,
    k: usize,
    dilation: usize,
    stride: usize,
) -> Nd4 {
    let [n, ci, t, v] = x.dims;
    let pad = dilation * (k - 1) / 2;
    let t_out = (t + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    let mut y = Nd4::zeros([n, co, t_out, v]);
    for ni in 0..n {
        for o in 0..co {
            for to in 0..t_out {
                for vi in 0..v {
                    let mut s = b[o];
                    for c in 0..ci {
                        for kk in 0..k {
                            let src = (to * stride + kk * dilation) as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                s += w[(o * ci + c) * k + kk] * x.at(ni, c, src as usize, vi);
                            }
                        }
                    }
                    *y.at_mut(ni, o, to, vi) = s;
                }
            }
        }
    }
    y
}

fn relu(mut x: Nd4) -> Nd4 {
    for e in &mut x.data {
        *e = e.max(0.0);
    }
    x
}

/// Temporal layer computed directly from the stored parameters.
pub fn temporal_oracle(
    store: &ParamStore,
    prefix: &str,
    x: &Tensor,
    stride: usize,
    mode: TemporalMode,
    norm: Mode,
) -> Tensor {
    let x = Nd4::from_tensor(x);
    let c = x.dims[1];
    match mode {
        TemporalMode::Single => {
            let name = format!("{prefix}.conv");
            let h = temporal_conv(
                &x,
                p(store, &format!("{name}.w")),
                p(store, &format!("{name}.b")),
                c,
                9,
                1,
                stride,
            );
            store_bn(store, &format!("{prefix}.bn"), &h, norm).into_tensor()
        }
        TemporalMode::Multiscale => {
            let q = c / 4;
            let mut parts = Vec::new();
            for d in 1..=4 {
                let pre = format!("{prefix}.d{d}");
                let h = pointwise(
                    &x,
                    p(store, &format!("{pre}.reduce.w")),
                    p(store, &format!("{pre}.reduce.b")),
                    q,
                );
                let h = relu(store_bn(store, &format!("{pre}.reduce_bn"), &h, norm));
                let h = temporal_conv(
                    &h,
                    p(store, &format!("{pre}.conv.w")),
                    p(store, &format!("{pre}.conv.b")),
                    q,
                    3,
                    d,
                    stride,
                );
                parts.push(store_bn(store, &format!("{pre}.bn"), &h, norm));
            }
            let [n, _, t, v] = parts[0].dims;
            let mut y = Nd4::zeros([n, c, t, v]);
            for (bi, part) in parts.iter().enumerate() {
                for ni in 0..n {
                    for k in 0..q {
                        for ti in 0..t {
                            for vi in 0..v {
                                *y.at_mut(ni, bi * q + k, ti, vi) = part.at(ni, k, ti, vi);
                            }
                        }
                    }
                }
            }
            y.into_tensor()
        }
    }
}

/// Masks of one subset as `[n][k][i][j]` arrays: `(rd, ra, hybrid, final)`.
pub struct OracleMasks {
    pub rd: Option<Nd4>,
    pub ra: Option<Nd4>,
    pub hybrid: Nd4,
    pub final_mask: Nd4,
}

pub struct SpatialSpec<'a> {
    pub prefix: &'a str,
    pub graph: &'a GraphSpec,
    pub c_inter: usize,
    pub c_out: usize,
    pub branches: Branches,
    pub extension: bool,
}

pub fn spatial_masks(
    spec: &SpatialSpec,
    store: &ParamStore,
    x: &Nd4,
    s: Subset,
    disable: Option<Branch>,
) -> OracleMasks {
    let [n, _, t, v] = x.dims;
    let k = spec.c_inter;
    let name = |rest: &str| format!("{}.{}.{rest}", spec.prefix, s.name());
    let features = |b: &str| {
        let f = pointwise(
            x,
            p(store, &name(&format!("{b}.compress.w"))),
            p(store, &name(&format!("{b}.compress.b"))),
            k,
        );
        layer_norm(
            &f,
            p(store, &name(&format!("{b}.ln.gamma"))),
            p(store, &name(&format!("{b}.ln.beta"))),
        )
    };
    let active = |b: Branch| {
        let built = match spec.branches {
            Branches::Hybrid => true,
            Branches::RdOnly => b == Branch::Rd,
            Branches::RaOnly => b == Branch::Ra,
        };
        built && disable != Some(b)
    };
    let rd = active(Branch::Rd).then(|| {
        let f = features("rd");
        let mut m = Nd4::zeros([n, k, v, v]);
        for ni in 0..n {
            for c in 0..k {
                let mean = |j: usize| (0..t).map(|ti| f.at(ni, c, ti, j)).sum::<f64>() / t as f64;
                for i in 0..v {
                    for j in 0..v {
                        *m.at_mut(ni, c, i, j) = (mean(i) - mean(j)).tanh();
                    }
                }
            }
        }
        m
    });
    let ra = active(Branch::Ra).then(|| {
        let f = features("ra");
        let mut m = Nd4::zeros([n, k, v, v]);
        for ni in 0..n {
            for c in 0..k {
                for i in 0..v {
                    for j in 0..v {
                        let dot: f64 = (0..t)
                            .map(|ti| f.at(ni, c, ti, i) * f.at(ni, c, ti, j))
                            .sum();
                        *m.at_mut(ni, c, i, j) = dot.tanh();
                    }
                }
            }
        }
        m
    });
    let alpha = if spec.branches == Branches::Hybrid {
        p(store, &name("alpha"))[0]
    } else {
        1.0
    };
    let mut hybrid = Nd4::zeros([n, k, v, v]);
    for (e, h) in hybrid.data.iter_mut().enumerate() {
        if let Some(rd) = &rd {
            *h += rd.data[e];
        }
        if let Some(ra) = &ra {
            *h += alpha * ra.data[e];
        }
    }
    let a = spec.graph.subset(s);
    let mut final_mask = hybrid.clone();
    for ni in 0..n {
        for c in 0..k {
            for i in 0..v {
                for j in 0..v {
                    *final_mask.at_mut(ni, c, i, j) += a.get(&[i, j]);
                }
            }
        }
    }
    OracleMasks {
        rd,
        ra,
        hybrid,
        final_mask,
    }
}

/// Spatial attention layer computed directly from the stored parameters.
pub fn spatial_oracle(
    spec: &SpatialSpec,
    store: &ParamStore,
    x: &Tensor,
    disable: Option<Branch>,
) -> Tensor {
    let x = Nd4::from_tensor(x);
    let [n, _, t, v] = x.dims;
    let (k, co) = (spec.c_inter, spec.c_out);
    let mut y = Nd4::zeros([n, co, t, v]);
    for s in Subset::ALL {
        let name = |rest: &str| format!("{}.{}.{rest}", spec.prefix, s.name());
        let masks = spatial_masks(spec, store, &x, s, disable);
        let fm = &masks.final_mask;
        let mut m = Nd4::zeros([n, co, v, v]);
        for ni in 0..n {
            for o in 0..co {
                for i in 0..v {
                    for j in 0..v {
                        *m.at_mut(ni, o, i, j) = if spec.extension {
                            let w = p(store, &name("extend.w"));
                            let b = p(store, &name("extend.b"));
                            b[o] + (0..k)
                                .map(|c| w[o * k + c] * fm.at(ni, c, i, j))
                                .sum::<f64>()
                        } else {
                            (0..k).map(|c| fm.at(ni, c, i, j)).sum::<f64>() / k as f64
                        };
                    }
                }
            }
        }
        let val = pointwise(
            &x,
            p(store, &name("value.w")),
            p(store, &name("value.b")),
            co,
        );
        for ni in 0..n {
            for o in 0..co {
                for ti in 0..t {
                    for i in 0..v {
                        let mut acc = 0.0;
                        for j in 0..v {
                            acc += m.at(ni, o, i, j) * val.at(ni, o, ti, j);
                        }
                        *y.at_mut(ni, o, ti, i) += acc;
                    }
                }
            }
        }
    }
    relu(y).into_tensor()
}

pub const ATTENTION_VARIANTS: [(Branches, bool, Option<Branch>); 6] = [
    (Branches::Hybrid, true, None),
    (Branches::Hybrid, false, None),
    (Branches::Hybrid, true, Some(Branch::Ra)),
    (Branches::Hybrid, true, Some(Branch::Rd)),
    (Branches::RdOnly, true, None),
    (Branches::RaOnly, false, None),
];

/// Largest absolute difference between the spatial layer and its oracle
/// over every attention variant, for one random draw.
pub fn spatial_oracle_gap(seed: u64) -> Vec<(String, f64)> {
    let graph = random_graph(5, &mut rng(seed));
    let mut out = Vec::new();
    for (branches, extension, disable) in ATTENTION_VARIANTS {
        let layer =
            hagcn::attention::SpatialAttention::new("sa", 0, 3, 4, 6, &graph, branches, extension)
                .unwrap();
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng(seed)).unwrap();
        randomize(&mut store, seed + 100);
        let x = rand_tensor(&[2, 3, 4, 5], seed + 200);
        let got = run(&store, &x, Mode::Eval, disable, |ctx, x| {
            layer.forward(ctx, x)
        });
        let spec = SpatialSpec {
            prefix: "sa",
            graph: &graph,
            c_inter: 4,
            c_out: 6,
            branches,
            extension,
        };
        let want = spatial_oracle(&spec, &store, &x, disable);
        out.push((
            format!("spatial {branches:?} ext={extension} disable={disable:?}"),
            got.max_abs_diff(&want),
        ));
    }
    out
}

/// Same for the temporal layer in both modes, both strides and both
/// normalization modes.
pub fn temporal_oracle_gap(seed: u64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for mode in [TemporalMode::Multiscale, TemporalMode::Single] {
        for stride in [1, 2] {
            for norm in [Mode::Train, Mode::Eval] {
                let layer = hagcn::temporal::TemporalConv::new("tc", 8, stride, mode).unwrap();
                let mut store = ParamStore::new();
                layer.init(&mut store, &mut rng(seed)).unwrap();
                randomize(&mut store, seed + 100);
                let x = rand_tensor(&[2, 8, 11, 3], seed + 200);
                let got = run(&store, &x, norm, None, |ctx, x| layer.forward(ctx, x));
                let want = temporal_oracle(&store, "tc", &x, stride, mode, norm);
                assert_eq!(got.shape(), want.shape());
                out.push((
                    format!("temporal {mode:?} stride={stride} {norm:?}"),
                    got.max_abs_diff(&want),
                ));
            }
        }
    }
    out
}

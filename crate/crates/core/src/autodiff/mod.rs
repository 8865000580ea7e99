//! Minimal tape-based reverse-mode automatic differentiation over f64
//! `ndarray` tensors.
//!
//! A [`Tape`] records one forward pass as a topologically ordered list of
//! nodes. Parameters enter as leaf variables resolved against a borrowed
//! [`ParamStore`]; applying the same parameter variable in several places
//! (the weight-sharing case) accumulates all of its gradient contributions
//! in the single reverse sweep, which is exactly the tied-weights gradient.

pub mod kernels;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use kernels::dims4;

pub type Var = usize;

enum Slot {
    Owned(ArrayD<f64>),
    Param(ParamId),
}

type BackFn = Box<dyn Fn(&Tape<'_>, &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    parents: Vec<Var>,
    backward: Option<BackFn>,
}

pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    slots: Vec<Slot>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'s> Tape<'s> {
    pub fn new() -> Self {
        Tape {
            store: None,
            slots: Vec::new(),
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Tape {
            store: Some(store),
            slots: Vec::new(),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    fn push(&mut self, value: Slot, parents: Vec<Var>, backward: Option<BackFn>) -> Var {
        self.slots.push(value);
        self.nodes.push(Node { parents, backward });
        self.slots.len() - 1
    }

    /// Introduce an owned leaf (network input, constant).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(Slot::Owned(value), Vec::new(), None)
    }

    /// Leaf variable for a stored parameter; cached so repeated use shares one slot.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(Slot::Param(id), Vec::new(), None);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(id.index()).copied().flatten()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        match &self.slots[v] {
            Slot::Owned(a) => a,
            Slot::Param(id) => self
                .store
                .expect("param slot without a bound ParamStore")
                .value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Error if any element of `v` is NaN or infinite.
    pub fn ensure_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per
    /// variable; intermediate gradients are consumed as the sweep passes,
    /// so afterwards only leaf slots (inputs and parameters) are populated.
    pub fn backward(&self, root: Var) -> Vec<Option<ArrayD<f64>>> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.slots.len()).map(|_| None).collect();
        grads[root] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));
        for i in (0..=root).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let Some(back) = &node.backward else {
                continue; // leaf: gradient stays for collection
            };
            let g = grads[i].take().unwrap();
            let contribs = back(self, &g);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (p, c) in node.parents.iter().zip(contribs) {
                match &mut grads[*p] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(
            Slot::Owned(out),
            vec![a, b],
            Some(Box::new(|_, g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out = self.value(a) * self.value(b);
        self.push(
            Slot::Owned(out),
            vec![a, b],
            Some(Box::new(move |t, g| {
                vec![g * t.value(b), g * t.value(a)]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push(
            Slot::Owned(out),
            vec![a],
            Some(Box::new(move |_, g| vec![g.mapv(|x| x * c)])),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + libm::erf(x * INV_SQRT2)));
        self.push(
            Slot::Owned(out),
            vec![a],
            Some(Box::new(move |t, g| {
                let x = t.value(a);
                let mut dx = x.mapv(|x| {
                    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT2));
                    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    cdf + x * pdf
                });
                dx *= g;
                vec![dx]
            })),
        )
    }

    // ---- convolution ----

    /// Stride-1 grouped convolution; `w` is [Cout, Cin/groups, kh, kw].
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize, groups: usize) -> Var {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), pad, groups);
        let in_shape: Vec<usize> = self.shape(x).to_vec();
        let w_shape: Vec<usize> = self.shape(w).to_vec();
        self.push(
            Slot::Owned(out),
            vec![x, w],
            Some(Box::new(move |t, g| {
                let dx = kernels::conv2d_backward_input(g, t.value(w), pad, groups, &in_shape);
                let dw = kernels::conv2d_backward_weight(g, t.value(x), pad, groups, &w_shape);
                vec![dx, dw]
            })),
        )
    }

    // ---- normalization ----

    /// Per-position layer normalization over the channel axis of [B, C, H, W],
    /// followed by a per-channel affine weight (bias-free).
    pub fn layer_norm_ch(&mut self, x: Var, weight: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = dims4(xv.shape());
        let wv = self.value(weight);
        assert_eq!(wv.len(), c, "layer_norm: weight/channel mismatch");
        let xs = xv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let plane = h * w;
        let mut out = vec![0.0f64; xs.len()];
        let mut inv_std = vec![0.0f64; b * plane];
        let mut xhat = vec![0.0f64; xs.len()];
        for bi in 0..b {
            for p in 0..plane {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += xs[bi * c * plane + ci * plane + p];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = xs[bi * c * plane + ci * plane + p] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[bi * plane + p] = istd;
                for ci in 0..c {
                    let idx = bi * c * plane + ci * plane + p;
                    let xh = (xs[idx] - mean) * istd;
                    xhat[idx] = xh;
                    out[idx] = xh * ws[ci];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.push(
            Slot::Owned(out),
            vec![x, weight],
            Some(Box::new(move |t, g| {
                let gs = g.as_slice().unwrap();
                let ws = t.value(weight).as_slice().unwrap();
                let mut dx = vec![0.0f64; gs.len()];
                let mut dw = vec![0.0f64; c];
                for bi in 0..b {
                    for p in 0..plane {
                        let istd = inv_std[bi * plane + p];
                        // dy_hat = g * weight; reduce the two LN sums first
                        let mut sum_dyh = 0.0;
                        let mut sum_dyh_xh = 0.0;
                        for ci in 0..c {
                            let idx = bi * c * plane + ci * plane + p;
                            let dyh = gs[idx] * ws[ci];
                            sum_dyh += dyh;
                            sum_dyh_xh += dyh * xhat[idx];
                        }
                        for ci in 0..c {
                            let idx = bi * c * plane + ci * plane + p;
                            let dyh = gs[idx] * ws[ci];
                            dx[idx] = istd
                                * (dyh
                                    - sum_dyh / c as f64
                                    - xhat[idx] * sum_dyh_xh / c as f64);
                            dw[ci] += gs[idx] * xhat[idx];
                        }
                    }
                }
                vec![
                    ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), dw).unwrap(),
                ]
            })),
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(self.value(x).len(), n, "reshape: element count mismatch");
        let out = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        let in_shape: Vec<usize> = self.shape(x).to_vec();
        self.push(
            Slot::Owned(out),
            vec![x],
            Some(Box::new(move |_, g| {
                vec![g.clone().into_shape_with_order(IxDyn(&in_shape)).unwrap()]
            })),
        )
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let nd = self.value(x).ndim();
        let mut order: Vec<usize> = (0..nd).collect();
        order.swap(nd - 2, nd - 1);
        let out = self
            .value(x)
            .clone()
            .permuted_axes(IxDyn(&order))
            .as_standard_layout()
            .to_owned();
        let order2 = order.clone();
        self.push(
            Slot::Owned(out),
            vec![x],
            Some(Box::new(move |_, g| {
                vec![g
                    .clone()
                    .permuted_axes(IxDyn(&order2))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    /// Slice `[from, to)` along the channel axis (axis 1).
    pub fn slice_ch(&mut self, x: Var, from: usize, to: usize) -> Var {
        let out = self
            .value(x)
            .slice_axis(Axis(1), Slice::from(from..to))
            .as_standard_layout()
            .to_owned();
        let in_shape: Vec<usize> = self.shape(x).to_vec();
        self.push(
            Slot::Owned(out),
            vec![x],
            Some(Box::new(move |_, g| {
                let mut dx = ArrayD::zeros(IxDyn(&in_shape));
                dx.slice_axis_mut(Axis(1), Slice::from(from..to))
                    .assign(g);
                vec![dx]
            })),
        )
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_ch(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .unwrap()
            .as_standard_layout()
            .to_owned();
        let widths: Vec<usize> = parts.iter().map(|&v| self.shape(v)[1]).collect();
        self.push(
            Slot::Owned(out),
            parts.to_vec(),
            Some(Box::new(move |_, g| {
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let piece = g
                            .slice_axis(Axis(1), Slice::from(offset..offset + w))
                            .as_standard_layout()
                            .to_owned();
                        offset += w;
                        piece
                    })
                    .collect()
            })),
        )
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let out = kernels::pixel_shuffle(self.value(x), r);
        self.push(
            Slot::Owned(out),
            vec![x],
            Some(Box::new(move |_, g| vec![kernels::pixel_unshuffle(g, r)])),
        )
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Var {
        let out = kernels::pixel_unshuffle(self.value(x), r);
        self.push(
            Slot::Owned(out),
            vec![x],
            Some(Box::new(move |_, g| vec![kernels::pixel_shuffle(g, r)])),
        )
    }

    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let out = kernels::bilinear_resize(self.value(x), oh, ow);
        let in_shape: Vec<usize> = self.shape(x).to_vec();
        self.push(
            Slot::Owned(out),
            vec![x],
            Some(Box::new(move |_, g| {
                vec![kernels::bilinear_resize_backward(g, &in_shape)]
            })),
        )
    }

    // ---- reductions / contractions ----

    /// Batched matmul: [.., M, K] x [.., K, N] -> [.., M, N] with identical
    /// leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = batched_matmul(self.value(a), self.value(b), false, false);
        self.push(
            Slot::Owned(out),
            vec![a, b],
            Some(Box::new(move |t, g| {
                let da = batched_matmul(g, t.value(b), false, true);
                let db = batched_matmul(t.value(a), g, true, false);
                vec![da, db]
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let rows = xv.len() / n;
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0f64; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[r * n + i] = e;
                z += e;
            }
            for i in 0..n {
                out[r * n + i] /= z;
            }
        }
        let shape = xv.shape().to_vec();
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let me = self.push(
            Slot::Owned(out),
            vec![x],
            None,
        );
        // backward needs the output itself: dx = y * (g - sum(g*y))
        self.nodes[me].backward = Some(Box::new(move |t, g| {
            let y = t.value(me);
            let ys = y.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dx = vec![0.0f64; ys.len()];
            for r in 0..rows {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += gs[r * n + i] * ys[r * n + i];
                }
                for i in 0..n {
                    dx[r * n + i] = ys[r * n + i] * (gs[r * n + i] - dot);
                }
            }
            vec![ArrayD::from_shape_vec(y.raw_dim(), dx).unwrap()]
        }));
        me
    }

    /// L2-normalize along the last axis: y = x / max(||x||, eps).
    pub fn l2_normalize_last(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let rows = xv.len() / n;
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0f64; xs.len()];
        let mut norms = vec![0.0f64; rows];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms[r] = norm;
            for i in 0..n {
                out[r * n + i] = row[i] / norm;
            }
        }
        let shape = xv.shape().to_vec();
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let me = self.push(Slot::Owned(out), vec![x], None);
        self.nodes[me].backward = Some(Box::new(move |t, g| {
            let y = t.value(me);
            let ys = y.as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let xs = t.value(x).as_slice().unwrap();
            let mut dx = vec![0.0f64; ys.len()];
            for r in 0..rows {
                let norm = norms[r];
                let raw: f64 = xs[r * n..(r + 1) * n]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if raw < eps {
                    // clamped branch: y = x / eps is linear
                    for i in 0..n {
                        dx[r * n + i] = gs[r * n + i] / norm;
                    }
                } else {
                    let mut dot = 0.0;
                    for i in 0..n {
                        dot += gs[r * n + i] * ys[r * n + i];
                    }
                    for i in 0..n {
                        dx[r * n + i] = (gs[r * n + i] - ys[r * n + i] * dot) / norm;
                    }
                }
            }
            vec![ArrayD::from_shape_vec(y.raw_dim(), dx).unwrap()]
        }));
        me
    }

    /// Multiply each head slice of [B, h, M, N] by the matching scalar of `t` [h].
    pub fn mul_per_head(&mut self, x: Var, t_param: Var) -> Var {
        let xv = self.value(x);
        let (b, heads, m, n) = dims4(xv.shape());
        let tv = self.value(t_param);
        assert_eq!(tv.len(), heads, "mul_per_head: temperature length");
        let xs = xv.as_slice().unwrap();
        let ts = tv.as_slice().unwrap();
        let mut out = vec![0.0f64; xs.len()];
        let plane = m * n;
        for bi in 0..b {
            for hi in 0..heads {
                let base = (bi * heads + hi) * plane;
                for i in 0..plane {
                    out[base + i] = xs[base + i] * ts[hi];
                }
            }
        }
        let out = ArrayD::from_shape_vec(xv.raw_dim(), out).unwrap();
        self.push(
            Slot::Owned(out),
            vec![x, t_param],
            Some(Box::new(move |t, g| {
                let gs = g.as_slice().unwrap();
                let xs = t.value(x).as_slice().unwrap();
                let ts = t.value(t_param).as_slice().unwrap();
                let mut dx = vec![0.0f64; gs.len()];
                let mut dt = vec![0.0f64; heads];
                for bi in 0..b {
                    for hi in 0..heads {
                        let base = (bi * heads + hi) * plane;
                        let mut acc = 0.0;
                        for i in 0..plane {
                            dx[base + i] = gs[base + i] * ts[hi];
                            acc += gs[base + i] * xs[base + i];
                        }
                        dt[hi] += acc;
                    }
                }
                vec![
                    ArrayD::from_shape_vec(g.raw_dim(), dx).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[heads]), dt).unwrap(),
                ]
            })),
        )
    }

    /// Global average pool over H, W: [B, C, H, W] -> [B, C].
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, h, w) = dims4(xv.shape());
        let plane = h * w;
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0f64; b * c];
        for i in 0..b * c {
            out[i] = xs[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[b, c]), out).unwrap();
        let in_shape: Vec<usize> = xv.shape().to_vec();
        self.push(
            Slot::Owned(out),
            vec![x],
            Some(Box::new(move |_, g| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0f64; b * c * plane];
                for i in 0..b * c {
                    let gv = gs[i] / plane as f64;
                    for p in 0..plane {
                        dx[i * plane + p] = gv;
                    }
                }
                vec![ArrayD::from_shape_vec(IxDyn(&in_shape), dx).unwrap()]
            })),
        )
    }

    /// Bias-free fully connected layer: x [B, K], w [N, K] -> [B, N].
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (b, k) = (xv.shape()[0], xv.shape()[1]);
        let (n, k2) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(k, k2, "linear: inner dims");
        let xs = xv.as_slice().unwrap();
        let ws = wv.as_slice().unwrap();
        let mut out = vec![0.0f64; b * n];
        for bi in 0..b {
            for ni in 0..n {
                let mut acc = 0.0;
                for ki in 0..k {
                    acc += xs[bi * k + ki] * ws[ni * k + ki];
                }
                out[bi * n + ni] = acc;
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[b, n]), out).unwrap();
        self.push(
            Slot::Owned(out),
            vec![x, w],
            Some(Box::new(move |t, g| {
                let gs = g.as_slice().unwrap();
                let xs = t.value(x).as_slice().unwrap();
                let ws = t.value(w).as_slice().unwrap();
                let mut dx = vec![0.0f64; b * k];
                let mut dw = vec![0.0f64; n * k];
                for bi in 0..b {
                    for ni in 0..n {
                        let gv = gs[bi * n + ni];
                        for ki in 0..k {
                            dx[bi * k + ki] += gv * ws[ni * k + ki];
                            dw[ni * k + ki] += gv * xs[bi * k + ki];
                        }
                    }
                }
                vec![
                    ArrayD::from_shape_vec(IxDyn(&[b, k]), dx).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[n, k]), dw).unwrap(),
                ]
            })),
        )
    }

    /// Weighted sum of component tensors: weights [B, K], components
    /// [K, C, S, S] -> [B, C, S, S].
    pub fn weighted_components(&mut self, weights: Var, components: Var) -> Var {
        let wv = self.value(weights);
        let cv = self.value(components);
        let (b, k) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(cv.shape()[0], k, "weighted_components: K mismatch");
        let piece: usize = cv.shape()[1..].iter().product();
        let ws = wv.as_slice().unwrap();
        let cs = cv.as_slice().unwrap();
        let mut out = vec![0.0f64; b * piece];
        for bi in 0..b {
            for ki in 0..k {
                let wgt = ws[bi * k + ki];
                for i in 0..piece {
                    out[bi * piece + i] += wgt * cs[ki * piece + i];
                }
            }
        }
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(&cv.shape()[1..]);
        let comp_shape: Vec<usize> = cv.shape().to_vec();
        let out = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        self.push(
            Slot::Owned(out),
            vec![weights, components],
            Some(Box::new(move |t, g| {
                let gs = g.as_slice().unwrap();
                let ws = t.value(weights).as_slice().unwrap();
                let cs = t.value(components).as_slice().unwrap();
                let mut dwgt = vec![0.0f64; b * k];
                let mut dcomp = vec![0.0f64; k * piece];
                for bi in 0..b {
                    for ki in 0..k {
                        let mut acc = 0.0;
                        let wgt = ws[bi * k + ki];
                        for i in 0..piece {
                            let gv = gs[bi * piece + i];
                            acc += gv * cs[ki * piece + i];
                            dcomp[ki * piece + i] += gv * wgt;
                        }
                        dwgt[bi * k + ki] = acc;
                    }
                }
                vec![
                    ArrayD::from_shape_vec(IxDyn(&[b, k]), dwgt).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&comp_shape), dcomp).unwrap(),
                ]
            })),
        )
    }

    // ---- losses ----

    /// Mean absolute difference against a constant target; returns a scalar var.
    pub fn l1_loss(&mut self, x: Var, target: &ArrayD<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "l1_loss: shape mismatch");
        let n = xv.len() as f64;
        let loss = xv
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let t = target.clone();
        let out = ArrayD::from_elem(IxDyn(&[]), loss);
        self.push(
            Slot::Owned(out),
            vec![x],
            Some(Box::new(move |tape, g| {
                let gv = g.iter().next().copied().unwrap();
                let xv = tape.value(x);
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let dxs = dx.as_slice_mut().unwrap();
                for (i, (a, b)) in xv.iter().zip(t.iter()).enumerate() {
                    let d = a - b;
                    let sign = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    dxs[i] = gv * sign / n;
                }
                vec![dx]
            })),
        )
    }

    /// Inner product with a constant projection; smooth scalar loss for
    /// gradient verification.
    pub fn dot_const(&mut self, x: Var, proj: &ArrayD<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), proj.shape(), "dot_const: shape mismatch");
        let val = xv.iter().zip(proj.iter()).map(|(a, b)| a * b).sum::<f64>();
        let p = proj.clone();
        let out = ArrayD::from_elem(IxDyn(&[]), val);
        self.push(
            Slot::Owned(out),
            vec![x],
            Some(Box::new(move |_, g| {
                let gv = g.iter().next().copied().unwrap();
                vec![p.mapv(|v| v * gv)]
            })),
        )
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Batched matmul on standard-layout arrays; `ta`/`tb` transpose the last two
/// axes of the respective operand before multiplying.
fn batched_matmul(a: &ArrayD<f64>, b: &ArrayD<f64>, ta: bool, tb: bool) -> ArrayD<f64> {
    let nda = a.ndim();
    let ndb = b.ndim();
    assert!(nda >= 2 && ndb >= 2);
    assert_eq!(
        &a.shape()[..nda - 2],
        &b.shape()[..ndb - 2],
        "batched_matmul: leading dims"
    );
    let batch: usize = a.shape()[..nda - 2].iter().product();
    let (am, ak) = (a.shape()[nda - 2], a.shape()[nda - 1]);
    let (bk, bn) = (b.shape()[ndb - 2], b.shape()[ndb - 1]);
    let (m, ka) = if ta { (ak, am) } else { (am, ak) };
    let (kb, n) = if tb { (bn, bk) } else { (bk, bn) };
    assert_eq!(ka, kb, "batched_matmul: inner dims");

    let asl = a.as_slice().unwrap();
    let bsl = b.as_slice().unwrap();
    let mut out = vec![0.0f64; batch * m * n];
    let a_stride = am * ak;
    let b_stride = bk * bn;
    out.chunks_mut(m * n).enumerate().for_each(|(bi, o)| {
        let ablk = &asl[bi * a_stride..(bi + 1) * a_stride];
        let bblk = &bsl[bi * b_stride..(bi + 1) * b_stride];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..ka {
                    let av = if ta { ablk[k * ak + i] } else { ablk[i * ak + k] };
                    let bv = if tb { bblk[j * bn + k] } else { bblk[k * bn + j] };
                    acc += av * bv;
                }
                o[i * n + j] = acc;
            }
        }
    });

    let mut shape: Vec<usize> = a.shape()[..nda - 2].to_vec();
    shape.push(m);
    shape.push(n);
    ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! tape in reverse and accumulates gradients into the parents of each node.

use super::kernels::{self, ConvSpec};
use super::params::{ParamId, ParamStore};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics per channel over batch and space.
    Batch,
    /// Statistics per (sample, channel) over space.
    Instance,
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        factor: [usize; 3],
    },
    Normalize {
        x: Var,
        mode: NormMode,
        inv_std: Vec<f32>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    PRelu {
        x: Var,
        slope: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Gate {
        x: Var,
        gate: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    Crop {
        x: Var,
        offset: [usize; 3],
    },
    MseConst {
        x: Var,
        target: f32,
    },
    L1 {
        a: Var,
        b: Var,
    },
    WeightedSum {
        terms: Vec<(Var, f32)>,
    },
    External {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(u64, ParamId, Var)>,
}

fn dims_spatial(t: &Tensor) -> (usize, usize, usize) {
    let [n, c, d, h, w] = t.dims5();
    (n, c, d * h * w)
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that tracks gradients but is not tied to any parameter store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter; trainable parameters are tracked for
    /// [`Tape::param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        if trainable {
            self.params.push((store.tag(), id, v));
        }
        v
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let out = kernels::conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Conv { x, w, b, spec }, &parents)
    }

    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = kernels::conv_transpose_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::ConvTranspose { x, w, b }, &parents)
    }

    pub fn max_pool(&mut self, x: Var, kernel: [usize; 3]) -> Var {
        let (out, argmax) = kernels::max_pool_forward(self.value(x), kernel);
        self.push(out, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn upsample(&mut self, x: Var, factor: [usize; 3]) -> Var {
        if factor == [1, 1, 1] {
            return x;
        }
        let out = kernels::upsample_nearest_forward(self.value(x), factor);
        self.push(out, Op::Upsample { x, factor }, &[x])
    }

    /// Zero-mean, unit-variance normalization (no affine part). Returns the
    /// output together with the per-group mean and biased variance.
    pub fn normalize(&mut self, x: Var, mode: NormMode, eps: f32) -> (Var, Vec<f32>, Vec<f32>) {
        let xv = self.value(x);
        let (n, c, s) = dims_spatial(xv);
        let groups = match mode {
            NormMode::Batch => c,
            NormMode::Instance => n * c,
        };
        let mut mean = vec![0f64; groups];
        let mut sq = vec![0f64; groups];
        let group_of = |nc: usize| match mode {
            NormMode::Batch => nc % c,
            NormMode::Instance => nc,
        };
        for (nc, chunk) in xv.data().chunks(s).enumerate() {
            let g = group_of(nc);
            for &v in chunk {
                mean[g] += v as f64;
                sq[g] += (v as f64) * (v as f64);
            }
        }
        let count = match mode {
            NormMode::Batch => (n * s) as f64,
            NormMode::Instance => s as f64,
        };
        let mut means = Vec::with_capacity(groups);
        let mut vars = Vec::with_capacity(groups);
        let mut inv_std = Vec::with_capacity(groups);
        for g in 0..groups {
            let m = mean[g] / count;
            let var = (sq[g] / count - m * m).max(0.0);
            means.push(m as f32);
            vars.push(var as f32);
            inv_std.push((1.0 / (var + eps as f64).sqrt()) as f32);
        }
        let mut out = xv.clone();
        for (nc, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let g = group_of(nc);
            let (m, is) = (means[g], inv_std[g]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * is);
        }
        let var = self.push(out, Op::Normalize { x, mode, inv_std }, &[x]);
        (var, means, vars)
    }

    /// `y[n, c, ...] = x[n, c, ...] · scale[c] + shift[c]`
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.value(x);
        let (_, c, s) = dims_spatial(xv);
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        assert_eq!(sc.len(), c);
        let mut out = xv.clone();
        for (nc, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let ch = nc % c;
            chunk.iter_mut().for_each(|v| *v = *v * sc[ch] + sh[ch]);
        }
        self.push(out, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    /// Parametric ReLU with one learned negative slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let xv = self.value(x);
        let (_, c, s) = dims_spatial(xv);
        let a = self.value(slope).data();
        let mut out = xv.clone();
        for (nc, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let ai = a[nc % c];
            chunk.iter_mut().for_each(|v| {
                if *v <= 0.0 {
                    *v *= ai
                }
            });
        }
        self.push(out, Op::PRelu { x, slope }, &[x, slope])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| {
            if *v <= 0.0 {
                *v *= slope
            }
        });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(out, Op::Tanh { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    /// Multiplies every channel of `x` by the single-channel `gate`.
    pub fn gate(&mut self, x: Var, gate: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gate);
        let (n, c, s) = dims_spatial(xv);
        assert_eq!(gv.dims5()[..2], [n, 1]);
        assert_eq!(gv.spatial(), s);
        let mut out = xv.clone();
        for (nc, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let g = &gv.data()[(nc / c) * s..(nc / c + 1) * s];
            chunk.iter_mut().zip(g).for_each(|(v, gi)| *v *= gi);
        }
        self.push(out, Op::Gate { x, gate }, &[x, gate])
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, d, h, w] = av.dims5();
        let [nb, cb, db, hb, wb] = bv.dims5();
        assert_eq!((n, d, h, w), (nb, db, hb, wb), "concat spatial mismatch");
        let s = d * h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * s);
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ca * s..(i + 1) * ca * s]);
            data.extend_from_slice(&bv.data()[i * cb * s..(i + 1) * cb * s]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, d, h, w], data);
        self.push(out, Op::Concat { a, b }, &[a, b])
    }

    /// Softmax across the channel axis at every voxel.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, s) = dims_spatial(xv);
        let mut out = xv.clone();
        let od = out.data_mut();
        for i in 0..n {
            let base = i * c * s;
            for p in 0..s {
                let mut m = f32::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(od[base + ch * s + p]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (od[base + ch * s + p] - m).exp();
                    od[base + ch * s + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    od[base + ch * s + p] /= z;
                }
            }
        }
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Spatial window `offset .. offset + size` of every channel.
    pub fn crop(&mut self, x: Var, offset: [usize; 3], size: [usize; 3]) -> Var {
        let xv = self.value(x);
        let [n, c, d, h, w] = xv.dims5();
        assert!((0..3).all(|a| offset[a] + size[a] <= [d, h, w][a]), "crop out of range");
        if offset == [0, 0, 0] && size == [d, h, w] {
            return x;
        }
        let mut data = Vec::with_capacity(n * c * size.iter().product::<usize>());
        for nc in 0..n * c {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let start = ((nc * d + offset[0] + z) * h + offset[1] + y) * w + offset[2];
                    data.extend_from_slice(&xv.data()[start..start + size[2]]);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, size[0], size[1], size[2]], data);
        self.push(out, Op::Crop { x, offset }, &[x])
    }

    /// `mean((x − target)²)`
    pub fn mse_const(&mut self, x: Var, target: f32) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|&v| ((v - target) as f64).powi(2)).sum();
        let out = Tensor::scalar((s / xv.numel() as f64) as f32);
        self.push(out, Op::MseConst { x, target }, &[x])
    }

    /// `mean(|a − b|)`
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let s: f64 = av.data().iter().zip(bv.data()).map(|(p, q)| (p - q).abs() as f64).sum();
        let out = Tensor::scalar((s / av.numel() as f64) as f32);
        self.push(out, Op::L1 { a, b }, &[a, b])
    }

    /// `Σ wᵢ · termᵢ` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let total: f32 = terms.iter().map(|&(v, w)| self.value(v).item() * w).sum();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            &parents,
        )
    }

    /// A scalar whose value and gradient with respect to `x` were computed
    /// outside the tape.
    pub fn external_loss(&mut self, x: Var, value: f32, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.value(x).shape());
        self.push(Tensor::scalar(value), Op::External { x, grad }, &[x])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Conv { x, w, b, spec } => {
                let (dx, dw, db) = kernels::conv3d_backward(self.value(x), self.value(w), spec, g, self.needs(x));
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                acc(w, dw);
                if let Some(b) = b {
                    acc(b, db);
                }
            }
            &Op::ConvTranspose { x, w, b } => {
                let (dx, dw, db) = kernels::conv_transpose_backward(self.value(x), self.value(w), g);
                acc(x, dx);
                acc(w, dw);
                if let Some(b) = b {
                    acc(b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (gi, &ai) in g.data().iter().zip(argmax) {
                    dx.data_mut()[ai as usize] += gi;
                }
                acc(*x, dx);
            }
            &Op::Upsample { x, factor } => {
                acc(x, kernels::upsample_nearest_backward(g, self.value(x).shape(), factor));
            }
            Op::Normalize { x, mode, inv_std } => {
                let (n, c, s) = dims_spatial(out);
                let groups = inv_std.len();
                let group_of = |nc: usize| match mode {
                    NormMode::Batch => nc % c,
                    NormMode::Instance => nc,
                };
                let mut sum_g = vec![0f64; groups];
                let mut sum_gx = vec![0f64; groups];
                for (nc, (gc, yc)) in g.data().chunks(s).zip(out.data().chunks(s)).enumerate() {
                    let k = group_of(nc);
                    for (&gi, &yi) in gc.iter().zip(yc) {
                        sum_g[k] += gi as f64;
                        sum_gx[k] += (gi * yi) as f64;
                    }
                }
                let count = match mode {
                    NormMode::Batch => (n * s) as f64,
                    NormMode::Instance => s as f64,
                };
                let mut dx = g.clone();
                for (nc, (dc, yc)) in dx.data_mut().chunks_mut(s).zip(out.data().chunks(s)).enumerate() {
                    let k = group_of(nc);
                    let (mg, mgx) = ((sum_g[k] / count) as f32, (sum_gx[k] / count) as f32);
                    let is = inv_std[k];
                    for (d, &yi) in dc.iter_mut().zip(yc) {
                        *d = is * (*d - mg - yi * mgx);
                    }
                }
                acc(*x, dx);
            }
            &Op::ChannelAffine { x, scale, shift } => {
                let xv = self.value(x);
                let (_, c, s) = dims_spatial(xv);
                let sc = self.value(scale).data();
                let mut dx = g.clone();
                let mut dscale = Tensor::zeros(&[c]);
                let mut dshift = Tensor::zeros(&[c]);
                for (nc, (dc, xc)) in dx.data_mut().chunks_mut(s).zip(xv.data().chunks(s)).enumerate() {
                    let ch = nc % c;
                    let mut gs = 0f64;
                    let mut gx = 0f64;
                    for (d, &xi) in dc.iter_mut().zip(xc) {
                        gs += *d as f64;
                        gx += (*d * xi) as f64;
                        *d *= sc[ch];
                    }
                    dscale.data_mut()[ch] += gx as f32;
                    dshift.data_mut()[ch] += gs as f32;
                }
                acc(x, dx);
                acc(scale, dscale);
                acc(shift, dshift);
            }
            &Op::PRelu { x, slope } => {
                let xv = self.value(x);
                let (_, c, s) = dims_spatial(xv);
                let a = self.value(slope).data();
                let mut dx = g.clone();
                let mut da = Tensor::zeros(&[c]);
                for (nc, (dc, xc)) in dx.data_mut().chunks_mut(s).zip(xv.data().chunks(s)).enumerate() {
                    let ch = nc % c;
                    let mut acc_a = 0f64;
                    for (d, &xi) in dc.iter_mut().zip(xc) {
                        if xi <= 0.0 {
                            acc_a += (*d * xi) as f64;
                            *d *= a[ch];
                        }
                    }
                    da.data_mut()[ch] += acc_a as f32;
                }
                acc(x, dx);
                acc(slope, da);
            }
            &Op::LeakyRelu { x, slope } => {
                let mut dx = g.clone();
                for (d, &xi) in dx.data_mut().iter_mut().zip(self.value(x).data()) {
                    if xi <= 0.0 {
                        *d *= slope;
                    }
                }
                acc(x, dx);
            }
            &Op::Relu { x } => {
                let mut dx = g.clone();
                for (d, &xi) in dx.data_mut().iter_mut().zip(self.value(x).data()) {
                    if xi <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(x, dx);
            }
            &Op::Tanh { x } => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= 1.0 - y * y;
                }
                acc(x, dx);
            }
            &Op::Sigmoid { x } => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= y * (1.0 - y);
                }
                acc(x, dx);
            }
            &Op::Add { a, b } => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Gate { x, gate } => {
                let (xv, gv) = (self.value(x), self.value(gate));
                let (n, c, s) = dims_spatial(xv);
                let mut dx = g.clone();
                let mut dgate = Tensor::zeros(gv.shape());
                for (nc, (dc, xc)) in dx.data_mut().chunks_mut(s).zip(xv.data().chunks(s)).enumerate() {
                    let i = nc / c;
                    let gs = &gv.data()[i * s..(i + 1) * s];
                    let dg = &mut dgate.data_mut()[i * s..(i + 1) * s];
                    for p in 0..s {
                        dg[p] += dc[p] * xc[p];
                        dc[p] *= gs[p];
                    }
                }
                let _ = n;
                acc(x, dx);
                acc(gate, dgate);
            }
            &Op::Concat { a, b } => {
                let [n, ca, d, h, w] = self.value(a).dims5();
                let cb = self.value(b).dims5()[1];
                let s = d * h * w;
                let mut da = Vec::with_capacity(n * ca * s);
                let mut db = Vec::with_capacity(n * cb * s);
                for i in 0..n {
                    let base = i * (ca + cb) * s;
                    da.extend_from_slice(&g.data()[base..base + ca * s]);
                    db.extend_from_slice(&g.data()[base + ca * s..base + (ca + cb) * s]);
                }
                acc(a, Tensor::from_vec(&[n, ca, d, h, w], da));
                acc(b, Tensor::from_vec(&[n, cb, d, h, w], db));
            }
            &Op::Softmax { x } => {
                let (n, c, s) = dims_spatial(out);
                let mut dx = g.clone();
                let y = out.data();
                let dd = dx.data_mut();
                for i in 0..n {
                    let base = i * c * s;
                    for p in 0..s {
                        let dot: f32 = (0..c).map(|ch| dd[base + ch * s + p] * y[base + ch * s + p]).sum();
                        for ch in 0..c {
                            let k = base + ch * s + p;
                            dd[k] = y[k] * (dd[k] - dot);
                        }
                    }
                }
                acc(x, dx);
            }
            &Op::Crop { x, offset } => {
                let [_, _, d, h, w] = self.value(x).dims5();
                let [n, c, sd, sh, sw] = out.dims5();
                let mut dx = Tensor::zeros(self.value(x).shape());
                let mut o = 0;
                for nc in 0..n * c {
                    for z in 0..sd {
                        for y in 0..sh {
                            let start = ((nc * d + offset[0] + z) * h + offset[1] + y) * w + offset[2];
                            dx.data_mut()[start..start + sw].copy_from_slice(&g.data()[o..o + sw]);
                            o += sw;
                        }
                    }
                }
                acc(x, dx);
            }
            &Op::MseConst { x, target } => {
                let xv = self.value(x);
                let k = 2.0 * g.item() / xv.numel() as f32;
                let dx = Tensor::from_vec(xv.shape(), xv.data().iter().map(|&v| k * (v - target)).collect());
                acc(x, dx);
            }
            &Op::L1 { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let k = g.item() / av.numel() as f32;
                let da: Vec<f32> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(p, q)| k * (p - q).signum() * ((p != q) as u8 as f32))
                    .collect();
                let db: Vec<f32> = da.iter().map(|v| -v).collect();
                acc(a, Tensor::from_vec(av.shape(), da));
                acc(b, Tensor::from_vec(bv.shape(), db));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    acc(v, Tensor::scalar(g.item() * w));
                }
            }
            Op::External { x, grad } => {
                let k = g.item();
                let dx = Tensor::from_vec(grad.shape(), grad.data().iter().map(|v| v * k).collect());
                acc(*x, dx);
            }
        }
    }

    /// Per-entry gradients for `store`, summed over every use on this tape.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for &(tag, id, v) in &self.params {
            if tag != store.tag() {
                continue;
            }
            if let Some(g) = grads.get(v) {
                match &mut out[id.index()] {
                    Some(existing) => existing.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(input) for a tape builder.
    fn check_grad(build: impl Fn(&mut Tape, Var) -> Var, input: Tensor, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.variable(input.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let h = 1e-2f32;
        for i in 0..input.numel() {
            let eval = |delta: f32| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let x = tape.variable(t);
                let l = build(&mut tape, x);
                tape.value(l).item() as f64
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
            let an = analytic.data()[i] as f64;
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                "element {i} (input {}): finite difference {fd} vs analytic {an}", input.data()[i]
            );
        }
    }

    /// Random projection so every output element contributes to the loss.
    fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.value(y).shape().to_vec();
        let r = random(&shape, &mut rng);
        let yv = tape.value(y).clone();
        let value: f32 = yv.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        tape.external_loss(y, value, r)
    }

    #[test]
    fn elementwise_and_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 3, 2, 2, 2], &mut rng);
        check_grad(|t, x| { let y = t.tanh(x); project(t, y, 1) }, x.clone(), 1e-2);
        check_grad(|t, x| { let y = t.sigmoid(x); project(t, y, 2) }, x.clone(), 1e-2);
        check_grad(|t, x| { let y = t.softmax(x); project(t, y, 3) }, x.clone(), 1e-2);
        check_grad(|t, x| { let (y, _, _) = t.normalize(x, NormMode::Batch, 1e-5); project(t, y, 4) }, x.clone(), 3e-2);
        check_grad(|t, x| { let (y, _, _) = t.normalize(x, NormMode::Instance, 1e-5); project(t, y, 5) }, x.clone(), 3e-2);
        check_grad(|t, x| { let y = t.upsample(x, [1, 2, 2]); project(t, y, 6) }, x.clone(), 1e-2);
        check_grad(|t, x| { let y = t.concat(x, x); project(t, y, 7) }, x.clone(), 1e-2);
        check_grad(|t, x| { let y = t.crop(x, [0, 1, 0], [2, 1, 2]); project(t, y, 8) }, x.clone(), 1e-2);
        check_grad(|t, x| t.mse_const(x, 0.3), x.clone(), 1e-2);
        check_grad(|t, x| { let y = t.add(x, x); let z = t.tanh(y); project(t, z, 9) }, x.clone(), 1e-2);
    }

    #[test]
    fn parameterised_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut x = random(&[2, 2, 3, 4, 4], &mut rng);
        // keep finite differences away from the PReLU kink
        x.data_mut().iter_mut().for_each(|v| *v += 0.1 * v.signum());
        let w = random(&[3, 2, 3, 3, 3], &mut rng);
        let wt = random(&[2, 3, 1, 2, 2], &mut rng);
        let slope = Tensor::from_vec(&[2], vec![0.25, -0.1]);
        let scale = Tensor::from_vec(&[2], vec![1.5, -0.5]);
        {
            let w = w.clone();
            check_grad(move |t, x| { let wv = t.constant(w.clone()); let y = t.conv(x, wv, None, ConvSpec::same([3, 3, 3])); project(t, y, 20) }, x.clone(), 1e-2);
        }
        // gradient with respect to the weights
        {
            let x = x.clone();
            check_grad(move |t, w| { let xv = t.constant(x.clone()); let y = t.conv(xv, w, None, ConvSpec { stride: [1, 2, 2], pad: [1, 1, 1] }); project(t, y, 21) }, w.clone(), 1e-2);
        }
        {
            let wt = wt.clone();
            check_grad(move |t, x| { let wv = t.constant(wt.clone()); let y = t.conv_transpose(x, wv, None); project(t, y, 22) }, x.clone(), 1e-2);
        }
        {
            let s2 = slope.clone();
            check_grad(move |t, x| { let a = t.constant(s2.clone()); let y = t.prelu(x, a); project(t, y, 23) }, x.clone(), 1e-2);
            let x2 = x.clone();
            check_grad(move |t, a| { let xv = t.constant(x2.clone()); let y = t.prelu(xv, a); project(t, y, 24) }, slope, 1e-2);
        }
        {
            let scale = scale.clone();
            check_grad(move |t, x| { let s = t.constant(scale.clone()); let b = t.constant(Tensor::from_vec(&[2], vec![0.1, 0.2])); let y = t.channel_affine(x, s, b); project(t, y, 25) }, x.clone(), 1e-2);
        }
        let gate = random(&[2, 1, 3, 4, 4], &mut rng);
        {
            let g2 = gate.clone();
            check_grad(move |t, x| { let g = t.constant(g2.clone()); let y = t.gate(x, g); project(t, y, 26) }, x.clone(), 1e-2);
            let x2 = x.clone();
            check_grad(move |t, g| { let xv = t.constant(x2.clone()); let y = t.gate(xv, g); project(t, y, 27) }, gate, 1e-2);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 1, 2, 2], vec![0.1, 0.9, 0.3, 0.2]);
        let mut tape = Tape::new();
        let v = tape.variable(x);
        let p = tape.max_pool(v, [1, 2, 2]);
        let l = tape.mse_const(p, 0.0);
        let g = tape.backward(l);
        assert_eq!(g.get(v).unwrap().data(), &[0.0, 1.8, 0.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[1, 1, 1, 1, 2], 2.0));
        let v = tape.variable(Tensor::full(&[1, 1, 1, 1, 2], 1.0));
        let s = tape.add(c, v);
        let l = tape.mse_const(s, 0.0);
        let g = tape.backward(l);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(v).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn weighted_sum_and_l1() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::from_vec(&[1, 1, 1, 1, 2], vec![1.0, -2.0]));
        let b = tape.constant(Tensor::from_vec(&[1, 1, 1, 1, 2], vec![0.0, 0.0]));
        let l1 = tape.l1(a, b);
        let m = tape.mse_const(a, 0.0);
        let total = tape.weighted_sum(&[(l1, 10.0), (m, 0.5)]);
        assert!((tape.value(total).item() - (10.0 * 1.5 + 0.5 * 2.5)).abs() < 1e-6);
        let g = tape.backward(total);
        // d/da: 10 · sign/2 + 0.5 · a
        assert_eq!(g.get(a).unwrap().data(), &[5.0 + 0.5, -5.0 - 1.0]);
    }
}

//! Parameterised building blocks shared by the segmentation and translation
//! networks. Each layer only holds [`ParamId`]s; values live in the owning
//! [`ParamStore`].

use rand::Rng;

use super::{ConvSpec, NormMode, ParamId, ParamStore, Tape, Tensor, Var};

/// Forward pass mode. Training uses batch statistics and updates the
/// running estimates; evaluation uses the running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const NORM_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// State threaded through a forward pass. Parameters are read-only;
/// running-statistic updates are collected in `updates` and applied by the
/// caller with [`ParamStore::apply`].
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Fwd {
            tape,
            store,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    spec: ConvSpec,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let w = store.add_weight(format!("{name}.w"), &[cout, cin, kernel[0], kernel[1], kernel[2]], fan_in, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true));
        Conv { w, b, spec }
    }

    /// Stride-1 convolution with "same" padding.
    pub fn same(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: [usize; 3], bias: bool, rng: &mut impl Rng) -> Self {
        Self::new(store, name, cin, cout, kernel, ConvSpec::same(kernel), bias, rng)
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.param(self.w);
        let b = self.b.map(|b| f.param(b));
        f.tape.conv(x, w, b, self.spec)
    }
}

/// Transposed convolution whose stride equals its kernel.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    w: ParamId,
    b: ParamId,
}

impl ConvTranspose {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: [usize; 3], rng: &mut impl Rng) -> Self {
        let w = store.add_weight(format!("{name}.w"), &[cin, cout, kernel[0], kernel[1], kernel[2]], cin, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true);
        ConvTranspose { w, b }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.param(self.w);
        let b = f.param(self.b);
        f.tape.conv_transpose(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    mode: NormMode,
    gamma: ParamId,
    beta: ParamId,
    running: Option<(ParamId, ParamId)>,
}

impl Norm {
    pub fn batch(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Norm {
            mode: NormMode::Batch,
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running: Some((
                store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
                store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            )),
        }
    }

    /// Instance normalization; statistics are always per sample, so the
    /// mode does not matter.
    pub fn instance(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Norm {
            mode: NormMode::Instance,
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running: None,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        match (self.running, f.mode) {
            (Some((rm, rv)), Mode::Eval) => {
                let store = f.store;
                let gamma = store.get(self.gamma).data();
                let beta = store.get(self.beta).data();
                let (mean, var) = (store.get(rm).data(), store.get(rv).data());
                let scale: Vec<f32> = gamma.iter().zip(var).map(|(g, v)| g / (v + NORM_EPS).sqrt()).collect();
                let shift: Vec<f32> = beta.iter().zip(mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
                let c = scale.len();
                let s = f.tape.constant(Tensor::from_vec(&[c], scale));
                let t = f.tape.constant(Tensor::from_vec(&[c], shift));
                f.tape.channel_affine(x, s, t)
            }
            (running, mode) => {
                let (y, mean, var) = f.tape.normalize(x, self.mode, NORM_EPS);
                if let (Some((rm, rv)), Mode::Train) = (running, mode) {
                    let blend = |old: &Tensor, new: &[f32]| {
                        let data = old.data().iter().zip(new).map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n).collect();
                        Tensor::from_vec(old.shape(), data)
                    };
                    let m = blend(f.store.get(rm), &mean);
                    let v = blend(f.store.get(rv), &var);
                    f.updates.push((rm, m));
                    f.updates.push((rv, v));
                }
                let g = f.param(self.gamma);
                let b = f.param(self.beta);
                f.tape.channel_affine(y, g, b)
            }
        }
    }
}

/// Per-channel parametric ReLU.
#[derive(Clone, Debug)]
pub struct PRelu {
    slope: ParamId,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        PRelu {
            slope: store.add(format!("{name}.slope"), Tensor::full(&[channels], 0.25), true),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let a = f.param(self.slope);
        f.tape.prelu(x, a)
    }
}

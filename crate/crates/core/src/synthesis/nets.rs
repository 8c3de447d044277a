//! 2D translation networks. Tensors are `(N, C, 1, H, W)`; every kernel is
//! `[1, k, k]`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{hash_config, Checkpoint, Conv, ConvSpec, Fwd, Mode, Norm, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Filters of the first layer; doubled by each downsampling.
    pub ngf: usize,
    pub n_res_blocks: usize,
    /// Adds the input to the output. With a zeroed last layer the network
    /// starts as the identity map.
    pub global_skip: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            ngf: 64,
            n_res_blocks: 9,
            global_skip: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub ndf: usize,
    /// Stride-2 layers; 3 gives the 70×70 receptive field.
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { ndf: 64, n_layers: 3 }
    }
}

fn k(n: usize) -> [usize; 3] {
    [1, n, n]
}

fn spec(stride: usize, pad: usize) -> ConvSpec {
    ConvSpec {
        stride: [1, stride, stride],
        pad: [0, pad, pad],
    }
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv,
    norm: Norm,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvNorm {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, k(kernel), spec(stride, pad), false, rng),
            norm: Norm::instance(store, &format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let y = self.conv.forward(f, x);
        self.norm.forward(f, y)
    }
}

/// Residual encoder-decoder: 7×7 stem, two stride-2 downsamplings,
/// residual blocks, two nearest-neighbour upsamplings each followed by a
/// 3×3 convolution, 7×7 output with tanh.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    stem: ConvNorm,
    down: Vec<ConvNorm>,
    res: Vec<(ConvNorm, ConvNorm)>,
    up: Vec<ConvNorm>,
    out: Conv,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Generator> {
        if cfg.ngf == 0 {
            return Err(Error::Config("generator ngf must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = cfg.ngf;
        let stem = ConvNorm::new(&mut store, "stem", 1, n, 7, 1, 3, &mut rng);
        let down = vec![
            ConvNorm::new(&mut store, "down0", n, 2 * n, 3, 2, 1, &mut rng),
            ConvNorm::new(&mut store, "down1", 2 * n, 4 * n, 3, 2, 1, &mut rng),
        ];
        let res = (0..cfg.n_res_blocks)
            .map(|i| {
                (
                    ConvNorm::new(&mut store, &format!("res{i}.a"), 4 * n, 4 * n, 3, 1, 1, &mut rng),
                    ConvNorm::new(&mut store, &format!("res{i}.b"), 4 * n, 4 * n, 3, 1, 1, &mut rng),
                )
            })
            .collect();
        let up = vec![
            ConvNorm::new(&mut store, "up0", 4 * n, 2 * n, 3, 1, 1, &mut rng),
            ConvNorm::new(&mut store, "up1", 2 * n, n, 3, 1, 1, &mut rng),
        ];
        let out = Conv::new(&mut store, "out", n, 1, k(7), spec(1, 3), true, &mut rng);
        let mut g = Generator {
            cfg: cfg.clone(),
            store,
            stem,
            down,
            res,
            up,
            out,
        };
        if cfg.global_skip {
            g.zero_output_layer();
        }
        Ok(g)
    }

    /// A generator that maps every input to itself until trained.
    pub fn identity(cfg: &GeneratorConfig, seed: u64) -> Result<Generator> {
        Self::new(
            &GeneratorConfig {
                global_skip: true,
                ..cfg.clone()
            },
            seed,
        )
    }

    fn zero_output_layer(&mut self) {
        let ids: Vec<_> = ["out.w", "out.b"].iter().filter_map(|n| self.store.find(n)).collect();
        for id in ids {
            let shape = self.store.get(id).shape().to_vec();
            self.store.set(id, Tensor::zeros(&shape));
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// H and W of every input must be multiples of this.
    pub const MULTIPLE: usize = 4;

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 5 || shape[1] != 1 || shape[2] != 1 || shape[3] % 4 != 0 || shape[4] % 4 != 0 || shape[3] == 0 || shape[4] == 0 {
            return Err(Error::Shape(format!(
                "generator input must be (N, 1, 1, H, W) with H, W multiples of 4, got {shape:?}"
            )));
        }
        let mut f = Fwd::new(tape, &self.store, Mode::Train);
        let mut h = self.stem.forward(&mut f, x);
        h = f.tape.relu(h);
        for d in &self.down {
            h = d.forward(&mut f, h);
            h = f.tape.relu(h);
        }
        for (a, b) in &self.res {
            let r = a.forward(&mut f, h);
            let r = f.tape.relu(r);
            let r = b.forward(&mut f, r);
            h = f.tape.add(h, r);
        }
        for u in &self.up {
            h = f.tape.upsample(h, [1, 2, 2]);
            h = u.forward(&mut f, h);
            h = f.tape.relu(h);
        }
        h = self.out.forward(&mut f, h);
        h = f.tape.tanh(h);
        if self.cfg.global_skip {
            h = f.tape.add(h, x);
        }
        Ok(h)
    }

    /// Output for a batch of inputs, no gradients kept.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            kind: "generator".into(),
            epoch,
            config_hash: hash_config(&self.cfg),
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            extra: serde_json::Value::Null,
            tensors: self.store.export(""),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Generator> {
        if c.kind != "generator" {
            return Err(Error::Checkpoint(format!("expected a generator checkpoint, found {}", c.kind)));
        }
        let cfg: GeneratorConfig =
            serde_json::from_value(c.config.clone()).map_err(|e| Error::Checkpoint(format!("bad generator config: {e}")))?;
        if hash_config(&cfg) != c.config_hash {
            return Err(Error::Checkpoint("generator config hash does not match the stored weights".into()));
        }
        let mut g = Generator::new(&cfg, 0)?;
        g.store.import("", &c.tensors)?;
        Ok(g)
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        self.to_checkpoint(epoch).save(path)
    }

    pub fn load(path: &Path) -> Result<Generator> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Patch classifier: 4×4 convolutions, `n_layers` of stride 2, one of
/// stride 1, then a 1-channel stride-1 output map. Leaky ReLU 0.2; no
/// normalization on the first layer.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    store: ParamStore,
    first: Conv,
    layers: Vec<ConvNorm>,
    out: Conv,
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
        if cfg.ndf == 0 || cfg.n_layers == 0 {
            return Err(Error::Config("discriminator needs ndf ≥ 1 and n_layers ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let first = Conv::new(&mut store, "first", 1, cfg.ndf, k(4), spec(2, 1), true, &mut rng);
        let mut layers = Vec::new();
        let mut ch = cfg.ndf;
        for i in 1..=cfg.n_layers {
            let next = cfg.ndf * (1 << i.min(3));
            let stride = if i < cfg.n_layers { 2 } else { 1 };
            layers.push(ConvNorm::new(&mut store, &format!("layer{i}"), ch, next, 4, stride, 1, &mut rng));
            ch = next;
        }
        let out = Conv::new(&mut store, "out", ch, 1, k(4), spec(1, 1), true, &mut rng);
        Ok(Discriminator {
            cfg: cfg.clone(),
            store,
            first,
            layers,
            out,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        let min = 1usize << (self.cfg.n_layers + 1);
        if shape.len() != 5 || shape[1] != 1 || shape[2] != 1 || shape[3] < min || shape[4] < min {
            return Err(Error::Shape(format!(
                "discriminator input must be (N, 1, 1, H, W) with H, W ≥ {min}, got {shape:?}"
            )));
        }
        let mut f = Fwd::new(tape, &self.store, Mode::Train);
        let mut h = self.first.forward(&mut f, x);
        h = f.tape.leaky_relu(h, 0.2);
        for l in &self.layers {
            h = l.forward(&mut f, h);
            h = f.tape.leaky_relu(h, 0.2);
        }
        Ok(self.out.forward(&mut f, h))
    }
}

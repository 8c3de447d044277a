//! Segmentation networks: a 2.5D U-Net with attention gates (2D
//! convolutions at the finest two levels, 3D below) and a residual 3D U-Net
//! with optional attention and deep supervision. Both end in a per-voxel
//! softmax over background / VS / cochlea.

mod loss;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{dice_loss, dice_loss_batched, LossConfig};

use crate::nn::{hash_config, Checkpoint, Conv, ConvSpec, ConvTranspose, Fwd, Mode, Norm, PRelu, ParamStore, Tape, Tensor, Var};
use crate::volume::{LabelMap, Volume};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Net25d,
    Net3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub kind: NetKind,
    pub levels: usize,
    pub channels: Vec<usize>,
    pub attention: bool,
    pub num_classes: usize,
    /// 2 or 3 per level; only meaningful for `net25d`.
    #[serde(default)]
    pub conv_dims: Vec<u8>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::net25d()
    }
}

impl NetworkConfig {
    pub fn net25d() -> Self {
        NetworkConfig {
            kind: NetKind::Net25d,
            levels: 5,
            channels: vec![16, 32, 64, 128, 256],
            attention: true,
            num_classes: 3,
            conv_dims: vec![2, 2, 3, 3, 3],
        }
    }

    pub fn net3d(attention: bool) -> Self {
        NetworkConfig {
            kind: NetKind::Net3d,
            levels: 5,
            channels: vec![16, 32, 64, 128, 256],
            attention,
            num_classes: 3,
            conv_dims: Vec::new(),
        }
    }

    /// Same structure with `levels` levels and channels `base · 2^l`.
    pub fn scaled(mut self, levels: usize, base: usize) -> Self {
        self.levels = levels;
        self.channels = (0..levels).map(|l| base << l).collect();
        if self.kind == NetKind::Net25d {
            self.conv_dims = (0..levels).map(|l| if l < 2 { 2 } else { 3 }).collect();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return bad(format!("network needs at least 2 levels, got {}", self.levels));
        }
        if self.channels.len() != self.levels {
            return bad(format!(
                "channels has {} entries but levels is {}",
                self.channels.len(),
                self.levels
            ));
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        match self.kind {
            NetKind::Net25d => {
                let expected: Vec<u8> = (0..self.levels).map(|l| if l < 2 { 2 } else { 3 }).collect();
                if self.conv_dims != expected {
                    return bad(format!(
                        "net25d conv_dims must mark exactly the first 2 levels as 2D: expected {expected:?}, got {:?}",
                        self.conv_dims
                    ));
                }
            }
            NetKind::Net3d => {
                if self.conv_dims.iter().any(|&d| d != 3) {
                    return bad("net3d uses 3D convolutions at every level".into());
                }
            }
        }
        Ok(())
    }

    fn is_2d(&self, level: usize) -> bool {
        self.kind == NetKind::Net25d && self.conv_dims[level] == 2
    }

    fn kernel(&self, level: usize) -> [usize; 3] {
        if self.is_2d(level) {
            [1, 3, 3]
        } else {
            [3, 3, 3]
        }
    }

    /// Pooling factor `(D, H, W)` applied after `level`.
    fn pool(&self, level: usize) -> [usize; 3] {
        if self.is_2d(level) {
            [1, 2, 2]
        } else {
            [2, 2, 2]
        }
    }

    /// Every input extent `(D, H, W)` must be a multiple of this.
    pub fn input_multiple(&self) -> [usize; 3] {
        let mut m = [1; 3];
        for l in 0..self.levels - 1 {
            let p = self.pool(l);
            for a in 0..3 {
                m[a] *= p[a];
            }
        }
        m
    }
}

/// Two convolutions with batch norm and PReLU; the 3D net adds an identity
/// (or 1×1×1 projected) shortcut around them.
#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    norm1: Norm,
    act1: PRelu,
    conv2: Conv,
    norm2: Norm,
    act2: PRelu,
    residual: Option<Option<Conv>>,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: [usize; 3], residual: bool, rng: &mut ChaCha8Rng) -> Self {
        let residual = residual.then(|| (cin != cout).then(|| Conv::same(store, &format!("{name}.proj"), cin, cout, [1, 1, 1], false, rng)));
        Block {
            conv1: Conv::same(store, &format!("{name}.conv1"), cin, cout, kernel, false, rng),
            norm1: Norm::batch(store, &format!("{name}.bn1"), cout),
            act1: PRelu::new(store, &format!("{name}.act1"), cout),
            conv2: Conv::same(store, &format!("{name}.conv2"), cout, cout, kernel, false, rng),
            norm2: Norm::batch(store, &format!("{name}.bn2"), cout),
            act2: PRelu::new(store, &format!("{name}.act2"), cout),
            residual,
        }
    }

    fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let h = self.conv1.forward(f, x);
        let h = self.norm1.forward(f, h);
        let h = self.act1.forward(f, h);
        let h = self.conv2.forward(f, h);
        let h = self.norm2.forward(f, h);
        let h = match &self.residual {
            None => h,
            Some(proj) => {
                let short = match proj {
                    Some(p) => p.forward(f, x),
                    None => x,
                };
                f.tape.add(h, short)
            }
        };
        self.act2.forward(f, h)
    }
}

/// Additive attention gate: the skip features are projected down to the
/// gating resolution, combined with the projected gating signal, squashed
/// to a one-channel sigmoid map, upsampled and multiplied into the skip.
#[derive(Clone, Debug)]
struct AttentionGate {
    theta: Conv,
    phi: Conv,
    psi: Conv,
    factor: [usize; 3],
}

impl AttentionGate {
    fn new(store: &mut ParamStore, name: &str, skip_ch: usize, gate_ch: usize, factor: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let inter = skip_ch;
        let down = ConvSpec {
            stride: factor,
            pad: [0, 0, 0],
        };
        AttentionGate {
            theta: Conv::new(store, &format!("{name}.theta"), skip_ch, inter, factor, down, false, rng),
            phi: Conv::same(store, &format!("{name}.phi"), gate_ch, inter, [1, 1, 1], true, rng),
            psi: Conv::same(store, &format!("{name}.psi"), inter, 1, [1, 1, 1], true, rng),
            factor,
        }
    }

    fn forward(&self, f: &mut Fwd, skip: Var, gate: Var) -> Var {
        let t = self.theta.forward(f, skip);
        let p = self.phi.forward(f, gate);
        let s = f.tape.add(t, p);
        let s = f.tape.relu(s);
        let a = self.psi.forward(f, s);
        let a = f.tape.sigmoid(a);
        let a = f.tape.upsample(a, self.factor);
        f.tape.gate(skip, a)
    }
}

#[derive(Clone, Debug)]
enum Up {
    Transposed(ConvTranspose),
    Nearest([usize; 3]),
}

const BACKGROUND_PRIOR: f32 = 0.95;

/// A segmentation network together with its parameters.
#[derive(Clone, Debug)]
pub struct SegNet {
    cfg: NetworkConfig,
    store: ParamStore,
    encoder: Vec<Block>,
    /// Indexed by level `0..levels-1`; each decodes into that level.
    decoder: Vec<Block>,
    ups: Vec<Up>,
    gates: Vec<Option<AttentionGate>>,
    /// Output head for level 0, then deep-supervision heads for levels
    /// `1..levels` (3D net only).
    heads: Vec<Conv>,
}

impl SegNet {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<SegNet> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = &cfg.channels;
        let residual = cfg.kind == NetKind::Net3d;
        let mut encoder = Vec::new();
        for l in 0..cfg.levels {
            let cin = if l == 0 { 1 } else { ch[l - 1] };
            encoder.push(Block::new(&mut store, &format!("enc{l}"), cin, ch[l], cfg.kernel(l), residual, &mut rng));
        }
        let mut decoder = Vec::new();
        let mut ups = Vec::new();
        let mut gates = Vec::new();
        for l in 0..cfg.levels - 1 {
            let factor = cfg.pool(l);
            let (up, up_ch) = match cfg.kind {
                NetKind::Net25d => (
                    Up::Transposed(ConvTranspose::new(&mut store, &format!("up{l}"), ch[l + 1], ch[l], factor, &mut rng)),
                    ch[l],
                ),
                NetKind::Net3d => (Up::Nearest(factor), ch[l + 1]),
            };
            ups.push(up);
            gates.push(
                cfg.attention
                    .then(|| AttentionGate::new(&mut store, &format!("att{l}"), ch[l], ch[l + 1], factor, &mut rng)),
            );
            decoder.push(Block::new(&mut store, &format!("dec{l}"), up_ch + ch[l], ch[l], cfg.kernel(l), residual, &mut rng));
        }
        let mut heads = vec![Conv::same(&mut store, "head0", ch[0], cfg.num_classes, [1, 1, 1], true, &mut rng)];
        if cfg.kind == NetKind::Net3d {
            for l in 1..cfg.levels {
                heads.push(Conv::same(&mut store, &format!("head{l}"), ch[l], cfg.num_classes, [1, 1, 1], true, &mut rng));
            }
        }
        // Every net starts at the same background-heavy prior: zero head
        // weights, and the prior as head0's bias (side-head logits are added
        // to it). With uniform logits every small class covers half the
        // volume at first and its soft Dice gradient is too weak to shrink
        // it; with random head weights the summed side heads can saturate
        // the softmax so that a class never receives gradient.
        let k = cfg.num_classes;
        let prior: Vec<f32> = (0..k)
            .map(|c| if c == 0 { BACKGROUND_PRIOR } else { (1.0 - BACKGROUND_PRIOR) / (k - 1) as f32 }.ln())
            .collect();
        for (h, &c) in ch.iter().enumerate().take(heads.len()) {
            if let Some(id) = store.find(&format!("head{h}.w")) {
                store.set(id, Tensor::zeros(&[k, c, 1, 1, 1]));
            }
        }
        if let Some(id) = store.find("head0.b") {
            store.set(id, Tensor::from_vec(&[k], prior));
        }
        Ok(SegNet {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
            ups,
            gates,
            heads,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok_rank = shape.len() == 5 && shape[1] == 1 && shape[0] > 0;
        let m = self.cfg.input_multiple();
        if !ok_rank || (0..3).any(|a| shape[2 + a] == 0 || shape[2 + a] % m[a] != 0) {
            return Err(Error::Shape(format!(
                "network input must be (N, 1, D, H, W) with D, H, W multiples of {m:?}, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Logits `(N, classes, D, H, W)` for an input already placed on the
    /// tape. Running-statistic updates land in `f.updates`.
    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        self.check_input(f.tape.value(x).shape())?;
        let levels = self.cfg.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut h = x;
        for l in 0..levels {
            h = self.encoder[l].forward(f, h);
            skips.push(h);
            if l + 1 < levels {
                h = f.tape.max_pool(h, self.cfg.pool(l));
            }
        }
        // decoder outputs per level; the bottleneck is its own output
        let mut outs = vec![h; levels];
        for l in (0..levels - 1).rev() {
            let coarse = outs[l + 1];
            let up = match &self.ups[l] {
                Up::Transposed(t) => t.forward(f, coarse),
                Up::Nearest(factor) => f.tape.upsample(coarse, *factor),
            };
            let skip = match &self.gates[l] {
                Some(g) => g.forward(f, skips[l], coarse),
                None => skips[l],
            };
            let cat = f.tape.concat(up, skip);
            outs[l] = self.decoder[l].forward(f, cat);
        }
        let mut logits = self.heads[0].forward(f, outs[0]);
        for l in 1..self.heads.len() {
            let side = self.heads[l].forward(f, outs[l]);
            let mut factor = [1; 3];
            for k in 0..l {
                let p = self.cfg.pool(k);
                for a in 0..3 {
                    factor[a] *= p[a];
                }
            }
            let side = f.tape.upsample(side, factor);
            logits = f.tape.add(logits, side);
        }
        Ok(logits)
    }

    /// Class probabilities for a batch `(N, 1, D, H, W)` in evaluation mode.
    pub fn predict_probs(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let mut f = Fwd::new(&mut tape, &self.store, Mode::Eval);
        let logits = self.forward(&mut f, x)?;
        let probs = tape.softmax(logits);
        Ok(tape.value(probs).clone())
    }

    /// Hard labels for a whole volume (one forward pass over the full grid).
    pub fn predict_labels(&self, v: &Volume) -> Result<LabelMap> {
        let [x, y, z] = v.shape();
        let input = Tensor::from_vec(&[1, 1, z, y, x], v.data().to_vec());
        let probs = self.predict_probs(&input)?;
        LabelMap::new(v.geometry().clone(), argmax_classes(&probs))
    }

    pub fn to_checkpoint(&self, epoch: usize, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            kind: "segnet".into(),
            epoch,
            config_hash: hash_config(&self.cfg),
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            extra,
            tensors: self.store.export(""),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<SegNet> {
        if ckpt.kind != "segnet" {
            return Err(Error::Checkpoint(format!("expected a segnet checkpoint, found {}", ckpt.kind)));
        }
        let cfg: NetworkConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad network config: {e}")))?;
        if hash_config(&cfg) != ckpt.config_hash {
            return Err(Error::Checkpoint("network config hash does not match the stored weights".into()));
        }
        let mut net = SegNet::new(&cfg, 0)?;
        net.store.import("", &ckpt.tensors)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        self.to_checkpoint(epoch, serde_json::Value::Null).save(path)
    }

    pub fn load(path: &Path) -> Result<SegNet> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Per-voxel argmax over the channel axis of `(N, C, D, H, W)` scores;
/// ties go to the lower class index.
pub fn argmax_classes(scores: &Tensor) -> Vec<u8> {
    let [n, c, d, h, w] = scores.dims5();
    let s = d * h * w;
    let data = scores.data();
    let mut out = Vec::with_capacity(n * s);
    for i in 0..n {
        for p in 0..s {
            let mut best = 0;
            for k in 1..c {
                if data[(i * c + k) * s + p] > data[(i * c + best) * s + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: NetKind, attention: bool) -> NetworkConfig {
        let base = match kind {
            NetKind::Net25d => NetworkConfig::net25d(),
            NetKind::Net3d => NetworkConfig::net3d(attention),
        };
        NetworkConfig { attention, ..base }.scaled(3, 2)
    }

    #[test]
    fn argmax_ties_and_order() {
        let t = Tensor::from_vec(&[1, 3, 1, 1, 2], vec![0.1, 1.0 / 3.0, 0.7, 1.0 / 3.0, 0.2, 1.0 / 3.0]);
        assert_eq!(argmax_classes(&t), vec![1, 0]);
    }

    #[test]
    fn output_shape_and_softmax() {
        for (kind, att) in [(NetKind::Net25d, true), (NetKind::Net3d, false), (NetKind::Net3d, true)] {
            let net = SegNet::new(&tiny(kind, att), 1).unwrap();
            let m = net.config().input_multiple();
            let shape = [2, 1, m[0] * 2, m[1], m[2] * 2];
            let probs = net.predict_probs(&Tensor::zeros(&shape)).unwrap();
            assert_eq!(probs.shape(), &[2, 3, shape[2], shape[3], shape[4]]);
            let s = shape[2] * shape[3] * shape[4];
            for i in 0..2 {
                for p in 0..s {
                    let sum: f32 = (0..3).map(|c| probs.data()[(i * 3 + c) * s + p]).sum();
                    assert!((sum - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn fresh_network_predicts_the_background_prior_everywhere() {
        let x = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|i| (i % 7) as f32 / 7.0).collect());
        for (kind, att) in [(NetKind::Net25d, true), (NetKind::Net3d, false), (NetKind::Net3d, true)] {
            let net = SegNet::new(&NetworkConfig { attention: att, ..tiny(kind, att) }.scaled(3, 4), 2).unwrap();
            let probs = net.predict_probs(&x).unwrap();
            for (i, p) in probs.data().iter().enumerate() {
                let want = if i < 512 { 0.95 } else { 0.025 };
                assert!((p - want).abs() < 1e-5, "{kind:?} attention={att}: {p}");
            }
        }
    }

    #[test]
    fn attention_adds_parameters() {
        for kind in [NetKind::Net25d, NetKind::Net3d] {
            let with = SegNet::new(&tiny(kind, true), 0).unwrap();
            let without = SegNet::new(&tiny(kind, false), 0).unwrap();
            assert!(with.num_parameters() > without.num_parameters());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = NetworkConfig::net25d();
        c.conv_dims = vec![2, 3, 3, 3, 3];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::net3d(false);
        c.channels.pop();
        assert!(c.validate().is_err());
        assert_eq!(NetworkConfig::net25d().input_multiple(), [4, 16, 16]);
        assert_eq!(NetworkConfig::net3d(true).input_multiple(), [16, 16, 16]);
        let net = SegNet::new(&tiny(NetKind::Net3d, false), 0).unwrap();
        assert!(net.check_input(&[1, 1, 4, 4, 6]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = SegNet::new(&tiny(NetKind::Net3d, true), 5).unwrap();
        let p = dir.path().join("net.ckpt");
        net.save(&p, 2).unwrap();
        let back = SegNet::load(&p).unwrap();
        let x = Tensor::full(&[1, 1, 4, 4, 4], 0.3);
        assert_eq!(net.predict_probs(&x).unwrap(), back.predict_probs(&x).unwrap());
    }
}

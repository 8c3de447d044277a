//! Slice-wise unpaired translation between modalities with a cycle-consistent
//! GAN. Volumes are cut into 2D slices along one axis, translated one slice
//! at a time and stacked back.

mod nets;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use nets::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};

use crate::nn::{hash_config, Adam, Checkpoint, Tape, Tensor};
use crate::trainer::{holdout_split, TrainConfig};
use crate::volume::{Geometry, Volume};
use crate::{Error, Result};

/// One 2D grid, `width` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// In-plane axes `(u, v)` for slicing along `axis`.
fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub slices: Vec<Slice>,
    pub source_geometry: Geometry,
    pub axis: usize,
}

pub fn split_volume(v: &Volume, axis: usize) -> Result<SliceStack> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("slicing axis must be 0, 1 or 2, got {axis}")));
    }
    let g = v.geometry();
    if g.shape.contains(&0) {
        return Err(Error::Empty(format!("volume of shape {:?} has no slices", g.shape)));
    }
    let (u, w) = plane_axes(axis);
    let (nu, nw) = (g.shape[u], g.shape[w]);
    let mut slices = Vec::with_capacity(g.shape[axis]);
    for k in 0..g.shape[axis] {
        let mut data = Vec::with_capacity(nu * nw);
        let mut p = [0usize; 3];
        p[axis] = k;
        for j in 0..nw {
            p[w] = j;
            for i in 0..nu {
                p[u] = i;
                data.push(v.data()[g.index(p[0], p[1], p[2])]);
            }
        }
        slices.push(Slice {
            width: nu,
            height: nw,
            data,
        });
    }
    Ok(SliceStack {
        slices,
        source_geometry: g.clone(),
        axis,
    })
}

pub fn stack_slices(s: &SliceStack) -> Result<Volume> {
    let g = &s.source_geometry;
    if s.axis > 2 {
        return Err(Error::InvalidArgument(format!("slicing axis must be 0, 1 or 2, got {}", s.axis)));
    }
    let (u, w) = plane_axes(s.axis);
    if s.slices.len() != g.shape[s.axis]
        || s.slices.iter().any(|sl| sl.width != g.shape[u] || sl.height != g.shape[w] || sl.data.len() != sl.width * sl.height)
    {
        return Err(Error::Shape(format!(
            "{} slices do not fit a volume of shape {:?} cut along axis {}",
            s.slices.len(),
            g.shape,
            s.axis
        )));
    }
    let mut data = vec![0f32; g.len()];
    for (k, sl) in s.slices.iter().enumerate() {
        let mut p = [0usize; 3];
        p[s.axis] = k;
        for j in 0..sl.height {
            p[w] = j;
            for i in 0..sl.width {
                p[u] = i;
                data[g.index(p[0], p[1], p[2])] = sl.data[i + sl.width * j];
            }
        }
    }
    Volume::new(g.clone(), data)
}

/// Batch tensor `(N, 1, 1, H', W')` in [−1, 1] from [0, 1] slices, edge
/// padded up to multiples of 4. All slices must share one size.
pub fn slices_to_tensor(slices: &[&Slice]) -> Result<Tensor> {
    let first = slices.first().ok_or_else(|| Error::Empty("no slices".into()))?;
    let (w, h) = (first.width, first.height);
    if slices.iter().any(|s| s.width != w || s.height != h) {
        return Err(Error::Shape("slices in one batch must share a size".into()));
    }
    let m = Generator::MULTIPLE;
    let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
    let mut data = Vec::with_capacity(slices.len() * pw * ph);
    for s in slices {
        for y in 0..ph {
            let row = &s.data[y.min(h - 1) * w..][..w];
            for x in 0..pw {
                data.push(row[x.min(w - 1)] * 2.0 - 1.0);
            }
        }
    }
    Ok(Tensor::from_vec(&[slices.len(), 1, 1, ph, pw], data))
}

/// Inverse of [`slices_to_tensor`]: crops to `width × height` and maps
/// back to [0, 1] with clamping.
fn tensor_to_slices(t: &Tensor, width: usize, height: usize) -> Vec<Slice> {
    let [n, _, _, ph, pw] = t.dims5();
    (0..n)
        .map(|i| {
            let src = &t.data()[i * ph * pw..][..ph * pw];
            let mut data = Vec::with_capacity(width * height);
            for y in 0..height {
                for x in 0..width {
                    data.push(((src[y * pw + x] + 1.0) * 0.5).clamp(0.0, 1.0));
                }
            }
            Slice { width, height, data }
        })
        .collect()
}

/// Slices run through the generator this many at a time.
const APPLY_CHUNK: usize = 8;

/// Translates every slice of `v` along `axis` with `g`. The result has the
/// geometry of `v` and values in [0, 1].
pub fn translate_volume(v: &Volume, g: &Generator, axis: usize) -> Result<Volume> {
    let mut stack = split_volume(v, axis)?;
    let (w, h) = (stack.slices[0].width, stack.slices[0].height);
    let mut out = Vec::with_capacity(stack.slices.len());
    for chunk in stack.slices.chunks(APPLY_CHUNK) {
        let refs: Vec<&Slice> = chunk.iter().collect();
        let y = g.apply(&slices_to_tensor(&refs)?)?;
        out.extend(tensor_to_slices(&y, w, h));
    }
    stack.slices = out;
    stack_slices(&stack)
}

/// Rescales each slice so its mean follows a running mean (over ±`radius`
/// slices) of the per-slice means, damping slice-to-slice intensity jumps.
pub fn slice_mean_postfilter(v: &Volume, axis: usize, radius: usize) -> Result<Volume> {
    let mut stack = split_volume(v, axis)?;
    let means: Vec<f64> = stack
        .slices
        .iter()
        .map(|s| s.data.iter().map(|&x| x as f64).sum::<f64>() / s.data.len() as f64)
        .collect();
    let n = means.len();
    for (k, s) in stack.slices.iter_mut().enumerate() {
        let (lo, hi) = (k.saturating_sub(radius), (k + radius).min(n - 1));
        let target = means[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
        if means[k] > 1e-6 {
            let f = (target / means[k]) as f32;
            s.data.iter_mut().for_each(|x| *x = (*x * f).clamp(0.0, 1.0));
        }
    }
    stack_slices(&stack)
}

/// Which epoch's generators a training run hands back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Lowest cycle-consistency loss on the held-out slices.
    MinHeldoutCycle,
    Last,
    /// A fixed 1-based epoch.
    Epoch(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub lambda_cycle: f64,
    pub lambda_identity: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Fraction of slices per domain held out for the cycle-loss record.
    pub holdout_fraction: f64,
    pub selection: Selection,
    pub axis: usize,
    pub slice_mean_postfilter: bool,
    /// Write a full training-state checkpoint after every epoch (otherwise
    /// only the latest is kept).
    pub keep_all_checkpoints: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            lambda_cycle: 10.0,
            lambda_identity: 5.0,
            max_epochs: 200,
            batch_size: 1,
            holdout_fraction: 0.1,
            selection: Selection::MinHeldoutCycle,
            axis: 2,
            slice_mean_postfilter: false,
            keep_all_checkpoints: true,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("synthesis max_epochs and batch_size must be at least 1");
        }
        if !(self.lambda_cycle >= 0.0) || !(self.lambda_identity >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        if self.axis > 2 {
            return bad("axis must be 0, 1 or 2");
        }
        if let Selection::Epoch(e) = self.selection {
            if e == 0 || e > self.max_epochs {
                return bad("selection epoch must lie in 1..=max_epochs");
            }
        }
        if self.generator.ngf == 0 || self.discriminator.ndf == 0 || self.discriminator.n_layers == 0 {
            return bad("network widths must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub adversarial: f64,
    pub cycle: f64,
    pub identity: f64,
    pub d_a: f64,
    pub d_b: f64,
    /// Mean |G_BA(G_AB(a)) − a| + |G_AB(G_BA(b)) − b| on held-out slices,
    /// in [0, 1] intensity units.
    pub heldout_cycle: f64,
}

/// Both generators, both discriminators and their optimiser state.
#[derive(Clone, Debug)]
pub struct TranslatorPair {
    pub g_ab: Generator,
    pub g_ba: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
    opt: [Adam; 4],
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<GanEpoch>,
}

const PREFIXES: [&str; 4] = ["g_ab.", "g_ba.", "d_a.", "d_b."];

#[derive(Serialize)]
struct PairIdentity<'a> {
    generator: &'a GeneratorConfig,
    discriminator: &'a DiscriminatorConfig,
}

impl TranslatorPair {
    pub fn new(cfg: &SynthesisConfig, train: &TrainConfig) -> Result<TranslatorPair> {
        let s = train.seed;
        Ok(TranslatorPair {
            g_ab: Generator::new(&cfg.generator, s ^ 0x11)?,
            g_ba: Generator::new(&cfg.generator, s ^ 0x22)?,
            d_a: Discriminator::new(&cfg.discriminator, s ^ 0x33)?,
            d_b: Discriminator::new(&cfg.discriminator, s ^ 0x44)?,
            opt: std::array::from_fn(|_| train.optimizer.adam(train.lr0_generator)),
            epoch: 0,
            history: Vec::new(),
        })
    }

    fn config_hash(cfg: &SynthesisConfig) -> String {
        hash_config(&PairIdentity {
            generator: &cfg.generator,
            discriminator: &cfg.discriminator,
        })
    }

    pub fn to_checkpoint(&self, cfg: &SynthesisConfig) -> Checkpoint {
        let stores = [self.g_ab.params(), self.g_ba.params(), self.d_a.params(), self.d_b.params()];
        let mut tensors = Vec::new();
        for (p, s) in PREFIXES.iter().zip(stores) {
            tensors.extend(s.export(p));
        }
        for (p, o) in PREFIXES.iter().zip(&self.opt) {
            tensors.extend(o.export(&format!("adam_{p}")));
        }
        Checkpoint {
            kind: "cyclegan".into(),
            epoch: self.epoch,
            config_hash: Self::config_hash(cfg),
            config: serde_json::to_value(cfg).expect("config serializes"),
            extra: json!({ "history": self.history }),
            tensors,
        }
    }

    /// Restores a pair saved with [`TranslatorPair::to_checkpoint`]; the
    /// network shapes in `cfg` must match the stored ones.
    pub fn from_checkpoint(c: &Checkpoint, cfg: &SynthesisConfig, train: &TrainConfig) -> Result<TranslatorPair> {
        if c.kind != "cyclegan" {
            return Err(Error::Checkpoint(format!("expected a cyclegan checkpoint, found {}", c.kind)));
        }
        if c.config_hash != Self::config_hash(cfg) {
            return Err(Error::Checkpoint("translator network config differs from the checkpoint".into()));
        }
        let mut pair = TranslatorPair::new(cfg, train)?;
        pair.g_ab.params_mut().import(PREFIXES[0], &c.tensors)?;
        pair.g_ba.params_mut().import(PREFIXES[1], &c.tensors)?;
        pair.d_a.params_mut().import(PREFIXES[2], &c.tensors)?;
        pair.d_b.params_mut().import(PREFIXES[3], &c.tensors)?;
        for (p, o) in PREFIXES.iter().zip(pair.opt.iter_mut()) {
            o.import(&format!("adam_{p}"), &c.tensors)?;
        }
        pair.epoch = c.epoch;
        pair.history = serde_json::from_value(c.extra["history"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad training history: {e}")))?;
        Ok(pair)
    }

    fn set_lr(&mut self, lr: f64) {
        self.opt.iter_mut().for_each(|o| o.set_lr(lr as f32));
    }

    /// One generator update followed by one update of each discriminator.
    /// Returns (adversarial, cycle, identity, d_a, d_b).
    fn step(&mut self, a: &Tensor, b: &Tensor, cfg: &SynthesisConfig) -> Result<[f64; 5]> {
        let (lc, li) = (cfg.lambda_cycle as f32, cfg.lambda_identity as f32);
        let mut tape = Tape::new();
        let ra = tape.constant(a.clone());
        let rb = tape.constant(b.clone());
        let fake_b = self.g_ab.forward(&mut tape, ra)?;
        let rec_a = self.g_ba.forward(&mut tape, fake_b)?;
        let fake_a = self.g_ba.forward(&mut tape, rb)?;
        let rec_b = self.g_ab.forward(&mut tape, fake_a)?;
        let db_fake = self.d_b.forward(&mut tape, fake_b)?;
        let da_fake = self.d_a.forward(&mut tape, fake_a)?;
        let adv_b = tape.mse_const(db_fake, 1.0);
        let adv_a = tape.mse_const(da_fake, 1.0);
        let cyc_a = tape.l1(rec_a, ra);
        let cyc_b = tape.l1(rec_b, rb);
        let mut terms = vec![(adv_a, 1.0), (adv_b, 1.0), (cyc_a, lc), (cyc_b, lc)];
        let mut idt = 0.0;
        if li > 0.0 {
            let idt_b = self.g_ab.forward(&mut tape, rb)?;
            let idt_a = self.g_ba.forward(&mut tape, ra)?;
            let ib = tape.l1(idt_b, rb);
            let ia = tape.l1(idt_a, ra);
            idt = (tape.value(ia).item() + tape.value(ib).item()) as f64;
            terms.push((ia, li));
            terms.push((ib, li));
        }
        let total = tape.weighted_sum(&terms);
        let adv = (tape.value(adv_a).item() + tape.value(adv_b).item()) as f64;
        let cyc = (tape.value(cyc_a).item() + tape.value(cyc_b).item()) as f64;
        let fb = tape.value(fake_b).clone();
        let fa = tape.value(fake_a).clone();
        let grads = tape.backward(total);
        let g1 = tape.param_grads(&grads, self.g_ab.params());
        let g2 = tape.param_grads(&grads, self.g_ba.params());
        drop(tape);
        self.opt[0].step(self.g_ab.params_mut(), &g1);
        self.opt[1].step(self.g_ba.params_mut(), &g2);

        let d_a = Self::d_step(&mut self.d_a, &mut self.opt[2], a, &fa)?;
        let d_b = Self::d_step(&mut self.d_b, &mut self.opt[3], b, &fb)?;
        Ok([adv, cyc, idt, d_a, d_b])
    }

    /// Least-squares discriminator update on real (target 1) and generated
    /// (target 0) samples; the loss is halved.
    fn d_step(d: &mut Discriminator, opt: &mut Adam, real: &Tensor, fake: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let r = tape.constant(real.clone());
        let f = tape.constant(fake.clone());
        let pr = d.forward(&mut tape, r)?;
        let pf = d.forward(&mut tape, f)?;
        let lr = tape.mse_const(pr, 1.0);
        let lf = tape.mse_const(pf, 0.0);
        let loss = tape.weighted_sum(&[(lr, 0.5), (lf, 0.5)]);
        let value = tape.value(loss).item() as f64;
        let grads = tape.backward(loss);
        let g = tape.param_grads(&grads, d.params());
        drop(tape);
        opt.step(d.params_mut(), &g);
        Ok(value)
    }

    fn is_finite(&self) -> bool {
        self.g_ab.params().is_finite() && self.g_ba.params().is_finite() && self.d_a.params().is_finite() && self.d_b.params().is_finite()
    }
}

/// Mean cycle error in [0, 1] units over `a` and `b` (each may be empty).
pub fn heldout_cycle_error(g_ab: &Generator, g_ba: &Generator, a: &[&Slice], b: &[&Slice]) -> Result<f64> {
    let mut total = 0.0;
    for (set, first, second) in [(a, g_ab, g_ba), (b, g_ba, g_ab)] {
        if set.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in set.chunks(APPLY_CHUNK) {
            let x = slices_to_tensor(chunk)?;
            let y = second.apply(&first.apply(&x)?)?;
            sum += x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>();
            count += x.numel();
        }
        total += 0.5 * sum / count as f64;
    }
    Ok(total)
}

/// Outcome of a translator training run.
#[derive(Clone, Debug)]
pub struct TranslatorRun {
    /// State after the last epoch (resumable).
    pub pair: TranslatorPair,
    pub selected_epoch: usize,
    pub g_ab: Generator,
    pub g_ba: Generator,
}

pub fn state_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("cyclegan_{epoch:04}.ckpt"))
}

pub const LATEST_STATE: &str = "cyclegan_latest.ckpt";

fn check_domain(name: &str, slices: &[Slice]) -> Result<()> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Empty(format!("domain {name} has no slices")))?;
    if slices.iter().any(|s| s.width != first.width || s.height != first.height) {
        return Err(Error::Shape(format!("domain {name} mixes slice sizes")));
    }
    if slices.iter().flat_map(|s| &s.data).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(format!("domain {name} slices must be normalized to [0, 1]")));
    }
    Ok(())
}

/// Trains a fresh translator pair on unpaired slices of domains A and B.
pub fn train_translator(
    domain_a: &[Slice],
    domain_b: &[Slice],
    cfg: &SynthesisConfig,
    train: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TranslatorRun> {
    cfg.validate()?;
    train.validate()?;
    let pair = TranslatorPair::new(cfg, train)?;
    continue_translator(pair, domain_a, domain_b, cfg, train, out_dir)
}

/// Resumes from a saved training state and runs the remaining epochs.
pub fn resume_translator(
    state: &Path,
    domain_a: &[Slice],
    domain_b: &[Slice],
    cfg: &SynthesisConfig,
    train: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TranslatorRun> {
    cfg.validate()?;
    train.validate()?;
    let pair = TranslatorPair::from_checkpoint(&Checkpoint::load(state)?, cfg, train)?;
    continue_translator(pair, domain_a, domain_b, cfg, train, out_dir)
}

/// Trains `pair` from its current epoch up to `cfg.max_epochs`.
///
/// Each epoch shuffles both domains with an RNG keyed on (seed, epoch), so
/// a resumed run repeats the uninterrupted one exactly. The learning rate
/// follows `train.gan_lr_at`. After every epoch the held-out cycle error is
/// recorded and the full state is checkpointed when `out_dir` is given.
pub fn continue_translator(
    mut pair: TranslatorPair,
    domain_a: &[Slice],
    domain_b: &[Slice],
    cfg: &SynthesisConfig,
    train: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TranslatorRun> {
    check_domain("A", domain_a)?;
    check_domain("B", domain_b)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (train_a, hold_a) = holdout_split(domain_a.len(), cfg.holdout_fraction, train.seed);
    let (train_b, hold_b) = holdout_split(domain_b.len(), cfg.holdout_fraction, train.seed.wrapping_add(1));
    let hold_a: Vec<&Slice> = hold_a.iter().map(|&i| &domain_a[i]).collect();
    let hold_b: Vec<&Slice> = hold_b.iter().map(|&i| &domain_b[i]).collect();

    let mut best: Option<(f64, usize, Generator, Generator)> = None;
    let consider = |best: &mut Option<(f64, usize, Generator, Generator)>, pair: &TranslatorPair, score: f64, epoch: usize| {
        let take = match cfg.selection {
            Selection::MinHeldoutCycle => best.as_ref().is_none_or(|b| score < b.0),
            Selection::Last => true,
            Selection::Epoch(e) => e == epoch,
        };
        if take {
            *best = Some((score, epoch, pair.g_ab.clone(), pair.g_ba.clone()));
        }
    };
    // a resumed run has no generator copies for earlier epochs; the
    // held-out record decides whether they could still win
    let prior_best = match cfg.selection {
        Selection::MinHeldoutCycle => pair.history.iter().map(|h| h.heldout_cycle).fold(f64::INFINITY, f64::min),
        _ => f64::INFINITY,
    };

    while pair.epoch < cfg.max_epochs {
        let e = pair.epoch;
        let lr = train.gan_lr_at(e);
        pair.set_lr(lr);
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(e as u64);
        let mut oa = train_a.clone();
        let mut ob = train_b.clone();
        oa.shuffle(&mut rng);
        ob.shuffle(&mut rng);
        let bs = cfg.batch_size;
        let steps = oa.len().max(ob.len()).div_ceil(bs);
        let mut sums = [0f64; 5];
        for s in 0..steps {
            let pick = |order: &[usize], dom: &[Slice]| -> Vec<Slice> {
                (0..bs).map(|j| dom[order[(s * bs + j) % order.len()]].clone()).collect()
            };
            let ba = pick(&oa, domain_a);
            let bb = pick(&ob, domain_b);
            let ta = slices_to_tensor(&ba.iter().collect::<Vec<_>>())?;
            let tb = slices_to_tensor(&bb.iter().collect::<Vec<_>>())?;
            let l = pair.step(&ta, &tb, cfg)?;
            if l.iter().any(|v| !v.is_finite()) || !pair.is_finite() {
                return Err(Error::Diverged {
                    epoch: e + 1,
                    what: format!("translator losses {l:?}"),
                });
            }
            for (acc, v) in sums.iter_mut().zip(l) {
                *acc += v;
            }
        }
        let k = steps as f64;
        let heldout = heldout_cycle_error(&pair.g_ab, &pair.g_ba, &hold_a, &hold_b)?;
        pair.epoch = e + 1;
        let rec = GanEpoch {
            epoch: e + 1,
            lr,
            adversarial: sums[0] / k,
            cycle: sums[1] / k,
            identity: sums[2] / k,
            d_a: sums[3] / k,
            d_b: sums[4] / k,
            heldout_cycle: heldout,
        };
        log::info!(
            "translator epoch {}/{} lr {:.2e} adv {:.4} cycle {:.4} idt {:.4} D {:.4}/{:.4} held-out cycle {:.4}",
            rec.epoch,
            cfg.max_epochs,
            lr,
            rec.adversarial,
            rec.cycle,
            rec.identity,
            rec.d_a,
            rec.d_b,
            heldout
        );
        pair.history.push(rec);
        if let Some(dir) = out_dir {
            let c = pair.to_checkpoint(cfg);
            if cfg.keep_all_checkpoints {
                c.save(&state_path(dir, pair.epoch))?;
            }
            c.save(&dir.join(LATEST_STATE))?;
        }
        if heldout < prior_best || !matches!(cfg.selection, Selection::MinHeldoutCycle) {
            consider(&mut best, &pair, heldout, pair.epoch);
        }
    }

    let (selected_epoch, g_ab, g_ba) = match best {
        Some((_, e, a, b)) => (e, a, b),
        None => {
            // the winner predates this call; load it from disk if possible
            let e = match cfg.selection {
                Selection::Epoch(e) => e,
                _ => {
                    let h = &pair.history;
                    (0..h.len())
                        .min_by(|&i, &j| h[i].heldout_cycle.total_cmp(&h[j].heldout_cycle))
                        .map_or(pair.epoch, |i| h[i].epoch)
                }
            };
            match out_dir.map(|d| state_path(d, e)).filter(|p| p.exists()) {
                Some(p) => {
                    let old = TranslatorPair::from_checkpoint(&Checkpoint::load(&p)?, cfg, train)?;
                    (e, old.g_ab, old.g_ba)
                }
                None => (pair.epoch, pair.g_ab.clone(), pair.g_ba.clone()),
            }
        }
    };
    if let Some(dir) = out_dir {
        g_ab.save(&dir.join("g_a2b.ckpt"), selected_epoch)?;
        g_ba.save(&dir.join("g_b2a.ckpt"), selected_epoch)?;
        let mut csv = String::from("epoch,lr,adversarial,cycle,identity,d_a,d_b,heldout_cycle\n");
        for h in &pair.history {
            csv.push_str(&format!(
                "{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                h.epoch, h.lr, h.adversarial, h.cycle, h.identity, h.d_a, h.d_b, h.heldout_cycle
            ));
        }
        let p = dir.join("synthesis_metrics.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TranslatorRun {
        pair,
        selected_epoch,
        g_ab,
        g_ba,
    })
}

/// Slices of every volume along `axis`, in order.
pub fn collect_slices(vols: &[Volume], axis: usize) -> Result<Vec<Slice>> {
    let mut out = Vec::new();
    for v in vols {
        out.extend(split_volume(v, axis)?.slices);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_shapes() {
        let g = Geometry::new([5, 4, 3], [1.0; 3]);
        let v = Volume::from_fn(g, |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
        for axis in 0..3 {
            let s = split_volume(&v, axis).unwrap();
            assert_eq!(s.slices.len(), v.shape()[axis]);
            assert_eq!(stack_slices(&s).unwrap(), v);
        }
        let s = split_volume(&v, 2).unwrap();
        assert_eq!((s.slices[1].width, s.slices[1].height), (5, 4));
        assert_eq!(s.slices[1].data[2 + 5 * 3], 132.0);
    }

    #[test]
    fn identity_generator_is_identity() {
        let cfg = GeneratorConfig {
            ngf: 2,
            n_res_blocks: 1,
            global_skip: false,
        };
        let g = Generator::identity(&cfg, 1).unwrap();
        let geo = Geometry::new([10, 6, 3], [1.0; 3]);
        let v = Volume::from_fn(geo, |x, y, z| ((x * 7 + y * 3 + z) % 11) as f32 / 10.0).unwrap();
        let t = translate_volume(&v, &g, 2).unwrap();
        assert_eq!(t.geometry(), v.geometry());
        for (a, b) in t.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn postfilter_flattens_a_step() {
        let geo = Geometry::new([4, 4, 6], [1.0; 3]);
        let v = Volume::from_fn(geo, |_, _, z| if z == 3 { 0.8 } else { 0.4 }).unwrap();
        let f = slice_mean_postfilter(&v, 2, 2).unwrap();
        assert!(f.get(0, 0, 3) < 0.8);
        assert_eq!(f.geometry(), v.geometry());
    }
}

//! Optimiser settings, learning-rate schedules, the segmentation training
//! loop and validation-based checkpoint selection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{self, AugmentationSpec};
use crate::metrics::dice;
use crate::nn::{Adam, AdamConfig, Checkpoint, Fwd, Mode, Tape, Tensor};
use crate::segnets::{dice_loss_batched, LossConfig, SegNet};
use crate::volume::{LabelMap, Volume, COCHLEA, VS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self, lr: f64) -> Adam {
        Adam::new(AdamConfig {
            lr: lr as f32,
            beta1: self.beta1 as f32,
            beta2: self.beta2 as f32,
            eps: self.eps as f32,
            weight_decay: self.weight_decay as f32,
        })
    }
}

fn d_lr_gen() -> f64 {
    2e-4
}
fn d_lr_seg() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    2
}
fn d_halving() -> usize {
    50
}
fn d_hundred() -> usize {
    100
}
fn d_one() -> usize {
    1
}
fn d_val() -> f64 {
    0.1
}

/// Training hyperparameters. `max_epochs` has no default and must be
/// given explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "d_lr_gen")]
    pub lr0_generator: f64,
    #[serde(default = "d_lr_seg")]
    pub lr0_segmentation: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_halving")]
    pub seg_lr_halving_period: usize,
    #[serde(default = "d_hundred")]
    pub gan_constant_epochs: usize,
    #[serde(default = "d_hundred")]
    pub gan_decay_epochs: usize,
    pub max_epochs: usize,
    #[serde(default = "d_one")]
    pub eval_every: usize,
    /// Fraction of training pairs held out for checkpoint selection.
    #[serde(default = "d_val")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for everything except the epoch budget.
    pub fn with_max_epochs(max_epochs: usize) -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            lr0_generator: d_lr_gen(),
            lr0_segmentation: d_lr_seg(),
            batch_size: d_batch(),
            seg_lr_halving_period: d_halving(),
            gan_constant_epochs: d_hundred(),
            gan_decay_epochs: d_hundred(),
            max_epochs,
            eval_every: 1,
            validation_fraction: d_val(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr0_generator > 0.0) || !(self.lr0_segmentation > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.seg_lr_halving_period == 0 || self.gan_decay_epochs == 0 || self.eval_every == 0 {
            return bad("batch_size, seg_lr_halving_period, gan_decay_epochs and eval_every must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("optimizer needs betas in [0, 1), eps > 0, weight_decay ≥ 0");
        }
        Ok(())
    }

    /// `lr0 · 0.5^⌊epoch / period⌋`.
    pub fn seg_lr_at(&self, epoch: usize) -> f64 {
        step_decay(self.lr0_segmentation, self.seg_lr_halving_period, epoch)
    }

    /// Constant for `gan_constant_epochs`, then linear to zero over
    /// `gan_decay_epochs`, zero afterwards.
    pub fn gan_lr_at(&self, epoch: usize) -> f64 {
        linear_decay(self.lr0_generator, self.gan_constant_epochs, self.gan_decay_epochs, epoch)
    }
}

pub fn step_decay(lr0: f64, period: usize, epoch: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / period) as i32)
}

pub fn linear_decay(lr0: f64, constant: usize, decay: usize, epoch: usize) -> f64 {
    if epoch < constant {
        lr0
    } else if epoch >= constant + decay {
        0.0
    } else {
        lr0 * (constant + decay - epoch) as f64 / decay as f64
    }
}

/// Seeded split into (train, validation) indices. At least one pair is
/// held out when there are two or more; a single pair validates on itself.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15));
    let k = if n < 2 || fraction <= 0.0 {
        0
    } else {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let (val, train) = idx.split_at(k);
    let (mut train, mut val) = (train.to_vec(), val.to_vec());
    train.sort_unstable();
    val.sort_unstable();
    if val.is_empty() {
        val = train.clone();
    }
    (train, val)
}

/// Foreground Dice for one prediction. A class whose ground truth is empty
/// is `None` and left out of means.
pub fn foreground_dice(pred: &LabelMap, truth: &LabelMap) -> Result<[Option<f64>; 2]> {
    let mut out = [None; 2];
    for (slot, class) in out.iter_mut().zip([VS, COCHLEA]) {
        if truth.count(class) > 0 {
            *slot = Some(dice(pred, truth, class)?);
        }
    }
    Ok(out)
}

/// Per-class means over samples (ignoring `None`) and the mean of the
/// per-sample foreground means.
pub fn summarize_dice(per_sample: &[[Option<f64>; 2]]) -> ([Option<f64>; 2], Option<f64>) {
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let classes = [0, 1].map(|c| mean(per_sample.iter().filter_map(|s| s[c]).collect()));
    let samples = per_sample
        .iter()
        .filter_map(|s| mean(s.iter().flatten().copied().collect()))
        .collect();
    (classes, mean(samples))
}

/// Validation score of `net`: mean over samples of the mean foreground
/// Dice, with empty ground-truth classes excluded.
pub fn validation_dice(net: &SegNet, pairs: &[(Volume, LabelMap)]) -> Result<([Option<f64>; 2], Option<f64>)> {
    let mut per = Vec::with_capacity(pairs.len());
    for (v, l) in pairs {
        per.push(foreground_dice(&net.predict_labels(v)?, l)?);
    }
    Ok(summarize_dice(&per))
}

/// Index of the best score; ties go to the earliest. `None` scores lose to
/// any value; if all are `None` the first entry wins.
pub fn best_index(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, Option<f64>)> = None;
    for (i, &s) in scores.iter().enumerate() {
        let better = match best {
            None => true,
            Some((_, b)) => match (s, b) {
                (Some(s), Some(b)) => s > b,
                (Some(_), None) => true,
                _ => false,
            },
        };
        if better {
            best = Some((i, s));
        }
    }
    best.map(|b| b.0)
}

/// Loads each segmentation checkpoint, scores it on `validation` and
/// returns the index of the winner.
pub fn select_best(checkpoints: &[Checkpoint], validation: &[(Volume, LabelMap)]) -> Result<usize> {
    if checkpoints.is_empty() {
        return Err(Error::Empty("no checkpoints to choose from".into()));
    }
    let mut scores = Vec::with_capacity(checkpoints.len());
    for c in checkpoints {
        let net = SegNet::from_checkpoint(c)?;
        scores.push(validation_dice(&net, validation)?.1);
    }
    Ok(best_index(&scores).unwrap_or(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based: the number of completed epochs.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub dice_vs: Option<f64>,
    pub dice_cochlea: Option<f64>,
    pub dice_mean: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SegTrainRun {
    pub history: Vec<EpochRecord>,
    /// Written per epoch when an output directory was given.
    pub checkpoint_paths: Vec<PathBuf>,
    pub best_epoch: usize,
    /// Weights of `best_epoch`.
    pub best: Checkpoint,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

impl SegTrainRun {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("epoch,loss,lr,dice_vs,dice_cochlea,dice_mean\n");
        for r in &self.history {
            s.push_str(&format!(
                "{},{:.6},{:e},{},{},{}\n",
                r.epoch,
                r.loss,
                r.lr,
                opt(r.dice_vs),
                opt(r.dice_cochlea),
                opt(r.dice_mean)
            ));
        }
        s
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

fn to_input(vols: &[&Volume]) -> Tensor {
    let [x, y, z] = vols[0].shape();
    let mut data = Vec::with_capacity(vols.len() * x * y * z);
    for v in vols {
        data.extend_from_slice(v.data());
    }
    Tensor::from_vec(&[vols.len(), 1, z, y, x], data)
}

/// One optimisation step on a batch; returns the loss.
fn train_step(net: &mut SegNet, adam: &mut Adam, batch: &[(Volume, LabelMap)], loss_cfg: &LossConfig) -> Result<f64> {
    let vols: Vec<&Volume> = batch.iter().map(|b| &b.0).collect();
    let target: Vec<u8> = batch.iter().flat_map(|b| b.1.data().iter().copied()).collect();
    let input = to_input(&vols);
    let classes = net.config().num_classes;
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let (loss, updates) = {
        let mut f = Fwd::new(&mut tape, net.params(), Mode::Train);
        let logits = net.forward(&mut f, x)?;
        let updates = std::mem::take(&mut f.updates);
        let probs = tape.softmax(logits);
        let pv = tape.value(probs);
        let s = pv.spatial();
        let p64: Vec<f64> = pv.data().iter().map(|&p| p as f64).collect();
        let (loss, grad) = dice_loss_batched(&p64, &target, batch.len(), classes, s, loss_cfg)?;
        let grad = Tensor::from_vec(pv.shape(), grad.iter().map(|&g| g as f32).collect());
        let l = tape.external_loss(probs, loss as f32, grad);
        let grads = tape.backward(l);
        let pg = tape.param_grads(&grads, net.params());
        adam.step(net.params_mut(), &pg);
        (loss, updates)
    };
    net.params_mut().apply(updates);
    Ok(loss)
}

/// Trains `net` on `data` (ROI-sized pseudo-target volumes with labels).
///
/// A seeded `validation_fraction` of the pairs is held out. Each epoch
/// shuffles the remaining pairs with an epoch-keyed RNG, augments every
/// draw with `aug`, and takes Adam steps at `seg_lr_at(epoch)`. After each
/// evaluated epoch the validation Dice is recorded and, when `out_dir` is
/// given, a checkpoint and `metrics.csv` are written. A non-finite loss or
/// weight aborts with [`Error::Diverged`]; the last good checkpoint stays on
/// disk.
pub fn train_segmentation_model(
    net: &mut SegNet,
    data: &[(Volume, LabelMap)],
    aug: &AugmentationSpec,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<SegTrainRun> {
    cfg.validate()?;
    aug.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("segmentation training needs at least one (volume, labels) pair".into()));
    }
    for (v, l) in data {
        if v.geometry() != l.geometry() {
            return Err(Error::GeometryMismatch("training volume and labels differ in geometry".into()));
        }
        let [x, y, z] = v.shape();
        net.check_input(&[1, 1, z, y, x])?;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (train_idx, val_idx) = holdout_split(data.len(), cfg.validation_fraction, cfg.seed);
    let validation: Vec<(Volume, LabelMap)> = val_idx.iter().map(|&i| data[i].clone()).collect();
    let mut adam = cfg.optimizer.adam(cfg.lr0_segmentation);
    let mut history = Vec::new();
    let mut paths = Vec::new();
    let mut scores = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut draw = 0u64;

    for e in 0..cfg.max_epochs {
        let lr = cfg.seg_lr_at(e);
        adam.set_lr(lr as f32);
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(e as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let inst = augment::sample(aug, draw);
                draw += 1;
                batch.push(if inst.is_identity() {
                    data[i].clone()
                } else {
                    augment::apply(&data[i].0, &data[i].1, &inst)?
                });
            }
            let loss = train_step(net, &mut adam, &batch, loss_cfg)?;
            if !loss.is_finite() || !net.params().is_finite() {
                return Err(Error::Diverged {
                    epoch: e + 1,
                    what: format!("loss {loss}"),
                });
            }
            total += loss;
            steps += 1;
        }
        let epoch = e + 1;
        let loss = total / steps as f64;
        let evaluate = epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs;
        let (classes, mean) = if evaluate {
            validation_dice(net, &validation)?
        } else {
            ([None; 2], None)
        };
        log::info!(
            "epoch {epoch}/{} loss {loss:.4} lr {lr:.2e} val dice {}",
            cfg.max_epochs,
            mean.map_or("-".into(), |d| format!("{d:.4}"))
        );
        let rec = EpochRecord {
            epoch,
            loss,
            lr,
            dice_vs: classes[0],
            dice_cochlea: classes[1],
            dice_mean: mean,
        };
        history.push(rec.clone());
        if !evaluate {
            continue;
        }
        let ckpt = net.to_checkpoint(epoch, json!({ "record": rec, "seed": cfg.seed }));
        if let Some(dir) = out_dir {
            let p = checkpoint_path(dir, epoch);
            ckpt.save(&p)?;
            paths.push(p);
        }
        scores.push(mean);
        if best_index(&scores) == Some(scores.len() - 1) {
            best = Some(ckpt);
        }
    }
    let best = best.expect("the final epoch is always evaluated");
    let run = SegTrainRun {
        history,
        checkpoint_paths: paths,
        best_epoch: best.epoch,
        best,
        train_indices: train_idx,
        validation_indices: val_idx,
    };
    if let Some(dir) = out_dir {
        let p = dir.join("metrics.csv");
        let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        f.write_all(run.to_csv().as_bytes()).map_err(|e| Error::io(&p, e))?;
        run.best.save(&dir.join("best.ckpt"))?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let c = TrainConfig::with_max_epochs(1);
        assert_eq!(c.seg_lr_at(0), 1e-4);
        assert_eq!(c.seg_lr_at(49), 1e-4);
        assert_eq!(c.seg_lr_at(50), 5e-5);
        assert_eq!(c.seg_lr_at(100), 2.5e-5);
        assert_eq!(c.gan_lr_at(99), 2e-4);
        assert!((c.gan_lr_at(150) - 1e-4).abs() < 1e-18);
        assert_eq!(c.gan_lr_at(200), 0.0);
    }

    #[test]
    fn max_epochs_is_required() {
        let err = toml::from_str::<TrainConfig>("batch_size = 2").unwrap_err();
        assert!(err.to_string().contains("max_epochs"), "{err}");
        let ok: TrainConfig = toml::from_str("max_epochs = 3").unwrap();
        assert_eq!(ok, TrainConfig::with_max_epochs(3));
    }

    #[test]
    fn best_index_ties_and_missing() {
        assert_eq!(best_index(&[Some(0.3), Some(0.8), Some(0.8)]), Some(1));
        assert_eq!(best_index(&[None, Some(0.1)]), Some(1));
        assert_eq!(best_index(&[None, None]), Some(0));
        assert_eq!(best_index(&[]), None);
    }

    #[test]
    fn holdout() {
        let (t, v) = holdout_split(20, 0.1, 4);
        assert_eq!((t.len(), v.len()), (18, 2));
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(holdout_split(20, 0.1, 4), (t, v));
        let (t, v) = holdout_split(1, 0.1, 0);
        assert_eq!((t, v), (vec![0], vec![0]));
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails.
//!
//! Criteria 6 and 7 need hours of CPU training. By default they are checked
//! against the committed reference runs in `tests/fixtures/`; set
//! `XMODA_ACCEPTANCE_FULL=1` to rerun them from scratch (results are
//! written under `target/acceptance/`).

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use common::*;
use xmoda::augment::{self, apply_gamma, apply_noise, apply_sharpen, AugmentationInstance, AugmentationSpec, Probabilities};
use xmoda::ensemble::{fuse_union, largest_component};
use xmoda::metrics::{assd, dice};
use xmoda::phantom::{generate_subject, generate_template, PhantomConfig};
use xmoda::preprocess::{apply_transform, register_rigid, RigidTransform};
use xmoda::segnets::{dice_loss, LossConfig};
use xmoda::synthesis::{split_volume, stack_slices};
use xmoda::trainer::TrainConfig;
use xmoda::volume::{crop, paste, Interpolation, LabelMap, Volume, VoxelBox, COCHLEA, VS};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- 1

fn compare_metrics(a: &[u8], b: &[u8], shape: [usize; 3], sp: [f64; 3], worst: &mut f64) -> Result<(), String> {
    let (la, lb) = (label_map(shape, sp, a.to_vec()), label_map(shape, sp, b.to_vec()));
    for c in [VS, COCHLEA] {
        let d = dice(&la, &lb, c).unwrap();
        let o = dice_oracle(a, b, c);
        check(d == o, format!("Dice {d} vs oracle {o} on {shape:?} class {c}"))?;
        match (assd(&la, &lb, c), assd_oracle(a, b, shape, sp, c)) {
            (Ok(x), Some(y)) => {
                *worst = worst.max((x - y).abs());
                check((x - y).abs() <= 1e-9, format!("ASSD {x} vs oracle {y} on {shape:?} class {c}"))?;
            }
            (Err(_), None) => {}
            (x, y) => return Err(format!("ASSD defined-ness differs: {x:?} vs {y:?}")),
        }
    }
    Ok(())
}

/// Every mask of `n` voxels as a label vector (bit k → class 1, rest 0).
fn all_masks(n: usize) -> Vec<Vec<u8>> {
    (0..1u32 << n).map(|m| (0..n).map(|k| ((m >> k) & 1) as u8).collect()).collect()
}

/// Axis-aligned boxes on `shape`, every third corner pair.
fn boxes(shape: [usize; 3]) -> Vec<Vec<u8>> {
    let ranges = |n: usize| -> Vec<(usize, usize)> {
        (0..n).flat_map(|lo| (lo + 1..=n).map(move |hi| (lo, hi))).collect()
    };
    let mut out = Vec::new();
    let (rx, ry, rz) = (ranges(shape[0]), ranges(shape[1]), ranges(shape[2]));
    let mut k = 0usize;
    for x in &rx {
        for y in &ry {
            for z in &rz {
                k += 1;
                if k % 3 != 0 {
                    continue;
                }
                let mut m = vec![0u8; shape.iter().product()];
                for zz in z.0..z.1 {
                    for yy in y.0..y.1 {
                        for xx in x.0..x.1 {
                            m[xx + shape[0] * (yy + shape[1] * zz)] = 1;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut pairs = 0usize;
    // all mask pairs on every grid of at most 8 voxels up to a permutation of axes
    for shape in [[2, 2, 2], [4, 2, 1], [8, 1, 1], [3, 2, 1], [2, 1, 1]] {
        let n: usize = shape.iter().product();
        let masks = all_masks(n);
        for sp in [[1.0, 1.0, 1.0], [0.5, 1.0, 2.0]] {
            for a in &masks {
                for b in &masks {
                    compare_metrics(a, b, shape, sp, &mut worst)?;
                    pairs += 1;
                }
            }
        }
    }
    // boxes against boxes and against random masks on larger grids up to 6³
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for shape in [[3, 3, 3], [4, 4, 2], [6, 6, 6], [6, 4, 3]] {
        let bx = boxes(shape);
        let sp = [0.8, 1.0, 1.5];
        for (i, a) in bx.iter().enumerate() {
            let b = &bx[(i * 7 + 3) % bx.len()];
            compare_metrics(a, b, shape, sp, &mut worst)?;
            let r = random_labels(&mut rng, shape, 0.4);
            compare_metrics(a, &r, shape, sp, &mut worst)?;
            compare_metrics(&r, a, shape, sp, &mut worst)?;
            pairs += 3;
        }
    }
    // 200 random 8³ masks with mixed classes and densities
    for i in 0..200 {
        let shape = [8, 8, 8];
        let p = [0.05, 0.3, 0.7][i % 3];
        let a = random_labels(&mut rng, shape, p);
        let b = random_labels(&mut rng, shape, p);
        compare_metrics(&a, &b, shape, [1.0, 1.0, 2.0], &mut worst)?;
        pairs += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("{pairs} mask pairs, max ASSD error {worst:.1e} mm, {secs:.1}s"))
}

// ---------------------------------------------------------------- 2

fn softmax_probs(rng: &mut ChaCha8Rng, c: usize, s: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..c * s).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut p = vec![0.0; c * s];
    for v in 0..s {
        let z: f64 = (0..c).map(|k| logits[k * s + v].exp()).sum();
        for k in 0..c {
            p[k * s + v] = logits[k * s + v].exp() / z;
        }
    }
    p
}

fn criterion_2() -> Outcome {
    let cfg = LossConfig::default();
    let (c, s) = (3usize, 64usize);
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let probs = softmax_probs(&mut rng, c, s);
        let target: Vec<u8> = (0..s).map(|_| rng.random_range(0..3u8)).collect();
        let (_, grad) = dice_loss(&probs, &target, c, &cfg).unwrap();
        for i in 0..probs.len() {
            let mut up = probs.clone();
            let mut dn = probs.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (dice_loss(&up, &target, c, &cfg).unwrap().0 - dice_loss(&dn, &target, c, &cfg).unwrap().0) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    check(worst <= 1e-4, format!("max relative gradient error {worst:.2e}"))?;

    let target: Vec<u8> = (0..s).map(|_| rng.random_range(0..3u8)).collect();
    let one_hot = |t: &[u8], shift: u8| -> Vec<f64> {
        let mut p = vec![0.0; c * s];
        for (v, &l) in t.iter().enumerate() {
            p[((l + shift) % 3) as usize * s + v] = 1.0;
        }
        p
    };
    let perfect = dice_loss(&one_hot(&target, 0), &target, c, &cfg).unwrap().0;
    check(perfect <= 1e-4, format!("perfect prediction loss {perfect}"))?;
    let disjoint = dice_loss(&one_hot(&target, 1), &target, c, &cfg).unwrap().0;
    check(disjoint >= 0.999, format!("disjoint prediction loss {disjoint}"))?;
    Ok(format!("max rel err {worst:.1e}, perfect {perfect:.1e}, disjoint {disjoint:.6}"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let cfg = TrainConfig::with_max_epochs(400);
    check(cfg.lr0_segmentation == 1e-4 && cfg.lr0_generator == 2e-4, "default base rates")?;
    for e in 0..=400usize {
        let seg = 1e-4 / (1u64 << (e / 50)) as f64;
        check(cfg.seg_lr_at(e) == seg, format!("seg lr at {e}: {} vs {seg}", cfg.seg_lr_at(e)))?;
        let gan = match e {
            0..=99 => 2e-4,
            100..=199 => 2e-4 * (200 - e) as f64 / 100.0,
            _ => 0.0,
        };
        check(cfg.gan_lr_at(e) == gan, format!("gan lr at {e}: {} vs {gan}", cfg.gan_lr_at(e)))?;
    }
    check(cfg.seg_lr_at(49) == 1e-4 && cfg.seg_lr_at(50) == 5e-5, "halving point")?;
    check((cfg.gan_lr_at(150) - 1e-4).abs() < 1e-18, "gan midpoint")?;
    Ok("epochs 0..=400 match".into())
}

// ---------------------------------------------------------------- 4

fn phantom_pair() -> (Volume, LabelMap) {
    let cfg = PhantomConfig {
        seed: 4,
        ..Default::default()
    };
    let (_, b, l) = generate_subject(&cfg, 0).unwrap();
    let (lo, hi) = b.min_max();
    (b.map(|x| (x - lo) / (hi - lo)).unwrap(), l)
}

fn criterion_4() -> Outcome {
    let (v, l) = phantom_pair();
    let id = AugmentationInstance::identity();
    let (v2, l2) = augment::apply(&v, &l, &id).unwrap();
    check(v2 == v && l2 == l, "identity instance changed the data")?;
    let none = AugmentationSpec {
        probabilities: Probabilities::none(),
        ..Default::default()
    };
    check((0..100).all(|i| augment::sample(&none, i).is_identity()), "disabled spec produced a transform")?;

    let input_set: Vec<u8> = {
        let mut s = l.data().to_vec();
        s.sort();
        s.dedup();
        s
    };
    let spec = AugmentationSpec {
        probabilities: Probabilities {
            spatial: 1.0,
            ..Probabilities::none()
        },
        seed: 44,
        ..Default::default()
    };
    for i in 0..1000 {
        let inst = augment::sample(&spec, i);
        let (_, out) = augment::apply_spatial(&v, &l, &inst).unwrap();
        check(out.data().iter().all(|x| input_set.contains(x)), format!("draw {i} introduced a new label"))?;
    }

    check(apply_gamma(&v, 1.0).unwrap() == v, "gamma 1 is not the identity")?;
    let flat = Volume::filled(v.geometry().clone(), 0.4).unwrap();
    let sharp = apply_sharpen(&flat, 10.0, 1.5).unwrap();
    let dev = sharp.data().iter().map(|x| (x - 0.4).abs()).fold(0f32, f32::max);
    check(dev <= 1e-5, format!("sharpen moved a constant image by {dev}"))?;

    let mid = Volume::filled(v.geometry().clone(), 0.5).unwrap();
    let noisy = apply_noise(&mid, 0.01, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let n = noisy.data().len() as f64;
    let diffs: Vec<f64> = noisy.data().iter().map(|&x| x as f64 - 0.5).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    check((0.009..=0.011).contains(&std), format!("noise std {std}"))?;
    Ok(format!("1000 spatial draws keep labels {input_set:?}; noise std {std:.5}"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let (v, _) = phantom_pair();
    for axis in 0..3 {
        check(stack_slices(&split_volume(&v, axis).unwrap()).unwrap() == v, format!("split/stack along {axis}"))?;
    }

    let bx = VoxelBox::new([5, 3, 2], [40, 20, 10]).unwrap();
    let c = crop(&v, &bx).unwrap();
    let back: Volume = paste(&c, &bx, v.geometry()).unwrap();
    let g = v.geometry();
    for i in 0..g.len() {
        let p = g.coords(i);
        let inside = (0..3).all(|k| p[k] >= bx.min[k] && p[k] < bx.min[k] + bx.size[k]);
        let want = if inside { v.data()[i] } else { 0.0 };
        check(back.data()[i] == want, format!("crop/paste differs at {p:?}"))?;
    }
    check(crop(&back, &bx).unwrap() == c, "re-crop differs")?;

    // phantom subject aligned to the template and mapped back
    let cfg = PhantomConfig {
        seed: 5,
        ..Default::default()
    };
    let (tmpl, _) = generate_template(&cfg).unwrap();
    let mut worst_dice = 1.0f64;
    for i in 0..3 {
        let (a, _, l) = generate_subject(&cfg, i).unwrap();
        let r = register_rigid(&a, &tmpl).unwrap();
        let there: LabelMap = apply_transform(&l, &r, tmpl.geometry(), Interpolation::Nearest).unwrap();
        let back = apply_transform(&there, &r.inverse(), l.geometry(), Interpolation::Nearest).unwrap();
        let d = dice(&l, &back, VS).unwrap();
        worst_dice = worst_dice.min(d);
        check(d >= 0.95, format!("subject {i} register-then-invert VS Dice {d:.4}"))?;
    }

    // known rigid transforms recovered
    let tg = tmpl.geometry().clone();
    let min_spacing = tg.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut worst_shift = 0.0f64;
    let mut worst_angle = 0.0f64;
    for (angles, shift) in [
        ([0.0, 0.0, 0.0], [3.0, -2.0, 2.0]),
        ([0.0, 0.0, 4f64.to_radians()], [0.0, 0.0, 0.0]),
        ([0.0, 0.0, -3f64.to_radians()], [1.5, 1.0, 0.0]),
    ] {
        let known = RigidTransform::about_center(angles, tg.center(), shift);
        let moving = apply_transform(&tmpl, &known.inverse(), &tg, Interpolation::Linear).unwrap();
        let r = register_rigid(&moving, &tmpl).unwrap();
        let err = r.compose(&known.inverse());
        // residual displacement over the grid corners, in voxels
        let mut disp = 0.0f64;
        for corner in 0..8 {
            let v = [0, 1, 2].map(|k| if corner >> k & 1 == 1 { (tg.shape[k] - 1) as f64 } else { 0.0 });
            let p = tg.voxel_to_world(v);
            let q = err.apply(p);
            let d = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt() / min_spacing;
            disp = disp.max(d);
        }
        worst_shift = worst_shift.max(disp);
        worst_angle = worst_angle.max(err.angle().to_degrees());
        check(disp <= 0.5, format!("residual {disp:.3} voxel for {angles:?} {shift:?}"))?;
        check(err.angle().to_degrees() <= 0.5, format!("residual angle {:.3}°", err.angle().to_degrees()))?;
    }
    Ok(format!(
        "round-trip VS Dice ≥ {worst_dice:.4}; rigid residual ≤ {worst_shift:.3} voxel / {worst_angle:.3}°"
    ))
}

// ---------------------------------------------------------------- 6 and 7

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn full_run() -> bool {
    std::env::var("XMODA_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Runs `xmoda pipeline` for `config` into `target/acceptance/<name>` and
/// returns its summary.
fn run_pipeline_cli(config: &str, name: &str, extra: &[&str]) -> Value {
    let root = workspace_root();
    let out = root.join("target/acceptance").join(name);
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_xmoda"))
        .current_dir(&root)
        .args(["pipeline", "--config", config, "--out"])
        .arg(&out)
        .args(extra)
        .status()
        .expect("run xmoda");
    assert!(status.success(), "pipeline {name} failed");
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn load_fixture(name: &str) -> Value {
    let p = fixtures().join(name);
    serde_json::from_str(&std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

fn scores(v: &Value) -> (f64, f64, f64) {
    let f = |k: &str| v[k].as_f64().unwrap_or(f64::NAN);
    (f("vs_dice"), f("cochlea_dice"), f("mean_dice"))
}

fn criterion_6() -> Outcome {
    let summary = if full_run() {
        run_pipeline_cli("configs/desk.toml", "desk", &[])
    } else {
        load_fixture("desk_reference.json")["summary"].clone()
    };
    let models = summary["models"].as_array().ok_or("summary has no models")?;
    check(models.len() == 4, format!("{} models, expected 4", models.len()))?;
    let (vs, co, mean) = scores(&summary["ensemble"]);
    let best_single = models.iter().map(|m| scores(&m["scores"]).2).fold(f64::NEG_INFINITY, f64::max);
    let msg = format!("ensemble VS {vs:.3}, cochlea {co:.3}, mean {mean:.3}; best single mean {best_single:.3}");
    check(vs >= 0.85, format!("VS Dice below 0.85: {msg}"))?;
    check(co >= 0.75, format!("cochlea Dice below 0.75: {msg}"))?;
    check(mean >= best_single - 0.02, format!("ensemble behind best single model: {msg}"))?;
    Ok(msg)
}

fn criterion_7() -> Outcome {
    let (on, off) = if full_run() {
        (
            run_pipeline_cli("configs/ablation.toml", "ablation_aug", &[]),
            run_pipeline_cli("configs/ablation.toml", "ablation_noaug", &["--set", "stages.augmentation=false"]),
        )
    } else {
        let f = load_fixture("ablation_reference.json");
        (f["augmented"].clone(), f["not_augmented"].clone())
    };
    let (_, _, m_on) = scores(&on["ensemble"]);
    let (_, _, m_off) = scores(&off["ensemble"]);
    let msg = format!("mean Dice with augmentation {m_on:.3}, without {m_off:.3}");
    check(m_off < m_on, msg.clone())?;
    Ok(msg)
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sp = [1.0, 1.0, 2.0];
    for _ in 0..300 {
        let shape = [rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8)];
        let k = rng.random_range(1..=4);
        let raw: Vec<Vec<u8>> = (0..k)
            .map(|_| {
                let p = rng.random_range(0.1..0.7);
                random_labels(&mut rng, shape, p)
            })
            .collect();
        let maps: Vec<LabelMap> = raw.iter().map(|d| label_map(shape, sp, d.clone())).collect();
        let fused = fuse_union(&maps).unwrap();
        check(fused.data() == union_oracle(&raw).as_slice(), "union differs from the voxel-wise rule")?;
        check(fuse_union(&[fused.clone(), fused.clone()]).unwrap() == fused, "union is not idempotent")?;
        let mut rev = maps.clone();
        rev.reverse();
        check(fuse_union(&rev).unwrap() == fused, "union depends on input order")?;

        for c in [VS, COCHLEA] {
            let got = largest_component(&maps[0], c).unwrap();
            check(
                got.data() == largest_component_oracle(&raw[0], shape, c).as_slice(),
                format!("largest component differs on {shape:?} class {c}"),
            )?;
        }
    }
    // truth table over every pair of labels
    for a in 0..3u8 {
        for b in 0..3u8 {
            let want = if a == 1 || b == 1 {
                1
            } else if a == 2 || b == 2 {
                2
            } else {
                0
            };
            let m = |x: u8| label_map([1, 1, 1], sp, vec![x]);
            check(fuse_union(&[m(a), m(b)]).unwrap().data() == [want], format!("union({a}, {b}) != {want}"))?;
        }
    }
    // exhaustive largest component on every 2×2×2 mask
    for m in 0..256u32 {
        let raw: Vec<u8> = (0..8).map(|k| ((m >> k) & 1) as u8).collect();
        let got = largest_component(&label_map([2, 2, 2], sp, raw.clone()), VS).unwrap();
        check(got.data() == largest_component_oracle(&raw, [2, 2, 2], VS).as_slice(), "2×2×2 component mismatch")?;
    }
    Ok("300 random grids ≤ 8³, truth table and all 2×2×2 masks match".into())
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 metric oracle", criterion_1),
        ("2 loss gradient", criterion_2),
        ("3 schedules", criterion_3),
        ("4 augmentation invariants", criterion_4),
        ("5 geometry round trips", criterion_5),
        ("6 desk end-to-end", criterion_6),
        ("7 augmentation ablation", criterion_7),
        ("8 fusion and components", criterion_8),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        match std::panic::catch_unwind(f) {
            Ok(Ok(msg)) => println!("PASS criterion {name}: {msg}"),
            Ok(Err(msg)) => {
                println!("FAIL criterion {name}: {msg}");
                failed.push(name);
            }
            Err(_) => {
                println!("FAIL criterion {name}: panicked");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

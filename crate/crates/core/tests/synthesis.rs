use proptest::prelude::*;

use xmoda::nn::Tensor;
use xmoda::phantom::{generate_subject, PhantomConfig};
use xmoda::synthesis::{
    collect_slices, resume_translator, slices_to_tensor, split_volume, stack_slices, state_path, train_translator, DiscriminatorConfig,
    Generator, GeneratorConfig, Slice, SynthesisConfig, LATEST_STATE,
};
use xmoda::trainer::TrainConfig;
use xmoda::volume::{Geometry, Volume};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_then_stack_is_exact(
        nx in 1usize..9, ny in 1usize..9, nz in 1usize..9, axis in 0usize..3, seed in any::<u32>()
    ) {
        let g = Geometry::new([nx, ny, nz], [0.7, 1.0, 2.5]);
        let v = Volume::from_fn(g, |x, y, z| ((x * 31 + y * 17 + z * 7 + seed as usize) % 101) as f32 / 100.0).unwrap();
        let s = split_volume(&v, axis).unwrap();
        prop_assert_eq!(s.slices.len(), v.shape()[axis]);
        prop_assert_eq!(stack_slices(&s).unwrap(), v);
    }
}

fn tiny_cfg(epochs: usize) -> (SynthesisConfig, TrainConfig) {
    let cfg = SynthesisConfig {
        generator: GeneratorConfig {
            ngf: 4,
            n_res_blocks: 1,
            global_skip: false,
        },
        discriminator: DiscriminatorConfig { ndf: 4, n_layers: 1 },
        max_epochs: epochs,
        batch_size: 4,
        keep_all_checkpoints: true,
        ..Default::default()
    };
    let mut train = TrainConfig::with_max_epochs(epochs);
    train.lr0_generator = 1e-3;
    train.gan_constant_epochs = epochs / 2;
    train.gan_decay_epochs = epochs - epochs / 2;
    train.seed = 3;
    (cfg, train)
}

/// Phantom A slices, B slices and the analytic B of each A slice.
fn phantom_slices(subjects: usize) -> (Vec<Slice>, Vec<Slice>, Vec<Slice>, PhantomConfig) {
    let cfg = PhantomConfig {
        seed: 21,
        ..Default::default()
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..subjects {
        let (va, vb, _) = generate_subject(&cfg, i).unwrap();
        a.push(va);
        b.push(vb);
    }
    let sa = collect_slices(&a, 2).unwrap();
    let sb = collect_slices(&b, 2).unwrap();
    let analytic = sa
        .iter()
        .map(|s| Slice {
            data: s.data.iter().map(|&x| cfg.a_to_b(x as f64) as f32).collect(),
            ..s.clone()
        })
        .collect();
    (sa, sb, analytic, cfg)
}

fn apply_slices(g: &Generator, slices: &[Slice]) -> Vec<Vec<f32>> {
    slices
        .iter()
        .map(|s| {
            let t: Tensor = slices_to_tensor(&[s]).unwrap();
            let out = g.apply(&t).unwrap();
            // back from [-1, 1] to [0, 1], dropping the edge padding
            let w_pad = out.shape()[4];
            (0..s.height)
                .flat_map(|y| (0..s.width).map(move |x| (y, x)))
                .map(|(y, x)| ((out.data()[y * w_pad + x] + 1.0) * 0.5).clamp(0.0, 1.0))
                .collect()
        })
        .collect()
}

fn mae(a: &[Vec<f32>], b: &[Slice]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(&y.data) {
            s += (p - q).abs() as f64;
            n += 1;
        }
    }
    s / n as f64
}

#[test]
fn one_epoch_smoke_writes_state_and_finite_losses() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |v: f32| Slice {
        width: 8,
        height: 8,
        data: (0..64).map(|i| (v + i as f32 / 200.0).min(1.0)).collect(),
    };
    let a: Vec<Slice> = (0..4).map(|i| mk(0.1 * i as f32)).collect();
    let b: Vec<Slice> = (0..4).map(|i| mk(0.5 + 0.1 * i as f32)).collect();
    let (cfg, train) = tiny_cfg(1);
    let run = train_translator(&a, &b, &cfg, &train, Some(dir.path())).unwrap();
    assert_eq!(run.pair.history.len(), 1);
    let h = &run.pair.history[0];
    for x in [h.adversarial, h.cycle, h.identity, h.d_a, h.d_b, h.heldout_cycle] {
        assert!(x.is_finite());
    }
    assert!(state_path(dir.path(), 1).exists());
    assert!(dir.path().join(LATEST_STATE).exists());
}

#[test]
fn unnormalized_or_empty_domains_are_rejected() {
    let (cfg, train) = tiny_cfg(1);
    let ok = Slice {
        width: 4,
        height: 4,
        data: vec![0.5; 16],
    };
    let bad = Slice {
        data: vec![1.5; 16],
        ..ok.clone()
    };
    assert!(train_translator(&[], &[ok.clone()], &cfg, &train, None).is_err());
    assert!(train_translator(&[bad], &[ok], &cfg, &train, None).is_err());
}

#[test]
fn resumed_training_repeats_the_uninterrupted_run() {
    let (a, b, _, _) = phantom_slices(1);
    let dir = tempfile::tempdir().unwrap();
    let (cfg2, train2) = tiny_cfg(2);
    let full = train_translator(&a, &b, &cfg2, &train2, None).unwrap();

    let cfg1 = SynthesisConfig {
        max_epochs: 1,
        ..cfg2.clone()
    };
    train_translator(&a, &b, &cfg1, &train2, Some(dir.path())).unwrap();
    let resumed = resume_translator(&dir.path().join(LATEST_STATE), &a, &b, &cfg2, &train2, None).unwrap();
    assert_eq!(resumed.pair.history, full.pair.history);
    assert_eq!(apply_slices(&resumed.pair.g_ab, &a[..3]), apply_slices(&full.pair.g_ab, &a[..3]));
}

#[test]
fn trained_translator_beats_identity_and_keeps_cycle() {
    let (a, b, analytic, _) = phantom_slices(2);
    let (cfg, mut train) = tiny_cfg(30);
    train.seed = 5;
    let run = train_translator(&a, &b, &cfg, &train, None).unwrap();

    let translated = apply_slices(&run.g_ab, &a);
    let identity: Vec<Vec<f32>> = a.iter().map(|s| s.data.clone()).collect();
    let (m_g, m_id) = (mae(&translated, &analytic), mae(&identity, &analytic));
    assert!(m_g < m_id, "translation MAE {m_g:.4} vs identity {m_id:.4}");

    // cycle on slices of a subject not seen in training
    let (held_a, _, _, _) = phantom_slices(3);
    let held: Vec<Slice> = held_a[a.len()..].to_vec();
    let fwd = apply_slices(&run.g_ab, &held);
    let fwd_slices: Vec<Slice> = fwd
        .iter()
        .zip(&held)
        .map(|(d, s)| Slice {
            data: d.clone(),
            ..s.clone()
        })
        .collect();
    let back = apply_slices(&run.g_ba, &fwd_slices);
    let cycle = mae(&back, &held);
    let change = mae(&fwd, &held);
    assert!(cycle < change, "cycle error {cycle:.4} vs translation change {change:.4}");
}

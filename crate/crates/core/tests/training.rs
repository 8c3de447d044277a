use xmoda::augment::AugmentationSpec;
use xmoda::phantom::{generate_subject, PhantomConfig};
use xmoda::preprocess::centered_box;
use xmoda::segnets::{LossConfig, NetworkConfig, SegNet};
use xmoda::trainer::{foreground_dice, select_best, summarize_dice, train_segmentation_model, TrainConfig};
use xmoda::volume::{crop, LabelMap, Volume, VS};

/// ROI-sized (32×32×16) B-modality phantom crops around the VS side.
fn samples(n: usize) -> Vec<(Volume, LabelMap)> {
    let cfg = PhantomConfig {
        seed: 13,
        ..Default::default()
    };
    let bx = centered_box(cfg.shape, [32, 32, 16]).unwrap();
    (0..n)
        .map(|i| {
            let (_, b, l) = generate_subject(&cfg, i).unwrap();
            (crop(&b, &bx).unwrap(), crop(&l, &bx).unwrap())
        })
        .collect()
}

fn small(kind: &str) -> NetworkConfig {
    match kind {
        "net25d" => NetworkConfig::net25d().scaled(3, 4),
        "net3d_attention" => NetworkConfig::net3d(true).scaled(3, 4),
        _ => NetworkConfig::net3d(false).scaled(3, 4),
    }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    let mut t = TrainConfig::with_max_epochs(epochs);
    t.lr0_segmentation = 3e-3;
    t.batch_size = 1;
    t.seed = 4;
    t
}

#[test]
fn each_architecture_overfits_one_sample() {
    let data = samples(1);
    assert!(data[0].1.data().contains(&VS));
    for kind in ["net25d", "net3d_attention", "net3d"] {
        let mut net = SegNet::new(&small(kind), 1).unwrap();
        // one pair validates on itself, so each epoch is one step
        let mut t = train_cfg(200);
        t.lr0_segmentation = 1e-2;
        let run = train_segmentation_model(&mut net, &data, &AugmentationSpec::disabled(), &LossConfig::default(), &t, None).unwrap();
        let best = SegNet::from_checkpoint(&run.best).unwrap();
        let pred = best.predict_labels(&data[0].0).unwrap();
        let d = foreground_dice(&pred, &data[0].1).unwrap()[0].unwrap();
        assert!(d >= 0.95, "{kind}: training VS Dice {d:.3} after 200 steps");
    }
}

#[test]
fn five_epochs_give_five_checkpoints_and_a_falling_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(2);
    let mut net = SegNet::new(&small("net3d"), 2).unwrap();
    let run = train_segmentation_model(&mut net, &data, &AugmentationSpec::disabled(), &LossConfig::default(), &train_cfg(5), Some(dir.path()))
        .unwrap();
    assert_eq!(run.checkpoint_paths.len(), 5);
    assert!(run.checkpoint_paths.iter().all(|p| p.exists()));
    assert!(dir.path().join("metrics.csv").exists());
    let losses: Vec<f64> = run.history.iter().map(|r| r.loss).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    // smoothed with a 2-epoch running mean
    let smooth: Vec<f64> = (0..losses.len()).map(|i| (losses[i] + losses[i.saturating_sub(1)]) / 2.0).collect();
    let falling = smooth.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(falling >= 3, "{losses:?}");
    for p in &run.checkpoint_paths {
        SegNet::load(p).unwrap();
    }
}

#[test]
fn training_is_deterministic() {
    let data = samples(2);
    let run = || {
        let mut net = SegNet::new(&small("net25d"), 7).unwrap();
        train_segmentation_model(&mut net, &data, &AugmentationSpec::disabled(), &LossConfig::default(), &train_cfg(3), None)
            .unwrap()
            .history
    };
    assert_eq!(run(), run());

    // augmented runs are reproducible too
    let aug = AugmentationSpec {
        seed: 9,
        ..Default::default()
    };
    let run_aug = || {
        let mut net = SegNet::new(&small("net3d"), 7).unwrap();
        train_segmentation_model(&mut net, &data, &aug, &LossConfig::default(), &train_cfg(2), None)
            .unwrap()
            .history
    };
    assert_eq!(run_aug(), run_aug());
}

#[test]
fn empty_dataset_is_an_error() {
    let mut net = SegNet::new(&small("net3d"), 1).unwrap();
    assert!(train_segmentation_model(&mut net, &[], &AugmentationSpec::disabled(), &LossConfig::default(), &train_cfg(1), None).is_err());
}

#[test]
fn select_best_prefers_the_earliest_of_equal_checkpoints() {
    let data = samples(1);
    let net = SegNet::new(&small("net3d"), 3).unwrap();
    let c = net.to_checkpoint(1, serde_json::Value::Null);
    assert_eq!(select_best(std::slice::from_ref(&c), &data).unwrap(), 0);
    assert_eq!(select_best(&[c.clone(), c.clone(), c], &data).unwrap(), 0);
    assert!(select_best(&[], &data).is_err());
}

#[test]
fn empty_truth_class_is_left_out_of_the_mean() {
    let (_, l) = samples(1).remove(0);
    let no_cochlea = l.with_data(l.data().iter().map(|&x| if x == 2 { 0 } else { x }).collect()).unwrap();
    let d = foreground_dice(&no_cochlea, &no_cochlea).unwrap();
    assert_eq!(d, [Some(1.0), None]);
    // by hand: sample means (0.6 + 0.8) / 2 = 0.7 and 0.5, overall 0.6
    let (classes, mean) = summarize_dice(&[[Some(0.6), Some(0.8)], [Some(0.5), None]]);
    assert!((classes[0].unwrap() - 0.55).abs() < 1e-12);
    assert!((classes[1].unwrap() - 0.8).abs() < 1e-12);
    assert!((mean.unwrap() - 0.6).abs() < 1e-12);
}


use std::fs;

use hybridnet::data::{generate_synthetic, load_cifar10_binary, write_cifar10_binary, CIFAR_DIMS};
use hybridnet::experiment::train;
use hybridnet::net::toy_cnn_spec;
use hybridnet::runtime::RuntimeConfig;

const DIMS: [usize; 3] = [3, 8, 8];

#[test]
fn full_batch_loss_decreases() {
    let data = generate_synthetic(16, &DIMS, 4, 1);
    let mut cfg = RuntimeConfig::new(1, 1, 16);
    cfg.lr = 0.05;
    let out = train::<f64>(&toy_cnn_spec(4), &DIMS, cfg, &data, 0, Some(10), false).unwrap();
    let losses = out.mean_losses();
    assert_eq!(losses.len(), 10);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss went up: {losses:?}");
    }
}

#[test]
fn hybrid_runs_are_deterministic() {
    let data = generate_synthetic(128, &DIMS, 4, 2);
    let run = || {
        let mut cfg = RuntimeConfig::new(4, 2, 8);
        cfg.avg_period = 2;
        cfg.seed = 9;
        train::<f32>(&toy_cnn_spec(4), &DIMS, cfg, &data, 1, None, false).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.steps, 4);
    assert_eq!(a.csv(), b.csv());
    assert_eq!(a.stats.to_csv(), b.stats.to_csv());
    assert_eq!(a.train_accuracy, b.train_accuracy);
}

#[test]
fn cifar_binary_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_synthetic(3, &CIFAR_DIMS, 10, 4);
    let b = generate_synthetic(2, &CIFAR_DIMS, 10, 5);
    write_cifar10_binary(&dir.path().join("data_batch_1.bin"), &a).unwrap();
    write_cifar10_binary(&dir.path().join("data_batch_2.bin"), &b).unwrap();
    fs::write(dir.path().join("readme.txt"), "ignored").unwrap();

    let one = load_cifar10_binary(&dir.path().join("data_batch_1.bin")).unwrap();
    assert_eq!(one.labels(), a.labels());
    for i in 0..a.len() {
        for (x, y) in one.image(i).iter().zip(a.image(i)) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
    let all = load_cifar10_binary(dir.path()).unwrap();
    assert_eq!(all.len(), 5);
    assert_eq!(&all.labels()[3..], b.labels());
}

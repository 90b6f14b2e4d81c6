use std::path::Path;

use sgs_core::data::{read_idx, synthetic_dataset, write_idx, LabeledDataset};
use sgs_core::net::{LayerSpec, Network, NetworkSpec};
use sgs_core::optim::OptimizerConfig;
use sgs_core::rng::SeededRng;
use sgs_core::train::{train, Measure, SgsConfig, TrainingConfig};
use sgs_core::Tensor4;
use tempfile::TempDir;

fn network_fd(layers: &[&str], seed: u64) {
    let spec = NetworkSpec {
        input: (2, 8, 8),
        layers: layers.iter().map(|l| l.parse::<LayerSpec>().unwrap()).collect(),
    };
    let mut rng = SeededRng::new(seed);
    let mut net: Network<f64> = Network::build(&spec, &mut rng).unwrap();
    // zero-initialized biases put pre-activations of all-zero inputs exactly
    // on the relu kink, where finite differences see half the slope
    for p in net.params_mut() {
        for v in p.value.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let x = Tensor4::from_fn([3, 2, 8, 8], |_| rng.normal());
    let labels = [0, 2, 1];
    net.loss_and_backward(&x, &labels).unwrap();
    let grads: Vec<Tensor4<f64>> = net.params_mut().iter().map(|p| p.grad.clone()).collect();

    let h = 1e-5;
    let mut loss_at = |p: usize, i: usize, delta: f64| {
        let old = net.params_mut()[p].value.data()[i];
        net.params_mut()[p].value.data_mut()[i] = old + delta;
        let l = net.loss_and_backward(&x, &labels).unwrap().loss;
        net.params_mut()[p].value.data_mut()[i] = old;
        l
    };
    let mut worst: f64 = 0.0;
    for (p, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let fd = (loss_at(p, i, h) - loss_at(p, i, -h)) / (2.0 * h);
            let an = g.data()[i];
            // absolute floor covers the ~1e-11 rounding noise of the central difference
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(rel <= 1e-4, "param {p} elem {i}: fd {fd:e} vs analytic {an:e}");
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn two_conv_network_gradients() {
    network_fd(&["conv 3 3x3 relu", "maxpool", "conv 4 3x3 relu", "flatten", "dense 3"], 1);
}

#[test]
fn batch_norm_and_global_pool_gradients() {
    network_fd(&["conv 3 3x3 relu bn", "conv 4 1x1 s1 p0 relu", "avgpool", "flatten", "dense 3"], 2);
}

#[test]
fn strided_linear_conv_gradients() {
    network_fd(&["conv 3 5x5 s2 p2", "conv 3 3x3", "flatten", "dense 3"], 3);
}

#[test]
fn idx_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data: LabeledDataset<f64> = synthetic_dataset(7, (1, 5, 4), 3, 1, 11).unwrap();
    // IDX stores bytes: quantize first so the round trip is exact
    let quantized = LabeledDataset::new(
        data.images().map(|v| (v * 255.0).round() / 255.0),
        data.labels().to_vec(),
        data.class_count(),
    )
    .unwrap();
    for name in ["plain", "packed.gz"] {
        let (im, lb) = (tmp.path().join(format!("im-{name}")), tmp.path().join(format!("lb-{name}")));
        write_idx(&quantized, &im, &lb).unwrap();
        let back: LabeledDataset<f64> = read_idx(&im, &lb).unwrap();
        assert_eq!(back.labels(), quantized.labels());
        assert_eq!(back.images().shape(), [7, 1, 5, 4]);
        for (a, b) in back.images().data().iter().zip(quantized.images().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn corrupt_idx_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let (im, lb) = (tmp.path().join("im"), tmp.path().join("lb"));
    std::fs::write(&im, [0u8, 0, 8, 3, 0, 0, 0, 9]).unwrap();
    std::fs::write(&lb, [0u8, 0, 8, 1, 0, 0, 0, 9]).unwrap();
    let err = read_idx::<f64>(&im, &lb).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");
    std::fs::write(&im, [1u8, 2, 3, 4, 0, 0, 0, 0]).unwrap();
    let err = read_idx::<f64>(&im, &lb).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
}

fn mnist(limit: usize) -> (LabeledDataset<f64>, LabeledDataset<f64>) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
    let tr = read_idx(&dir.join("train-images-idx3-ubyte.gz"), &dir.join("train-labels-idx1-ubyte.gz")).unwrap();
    let te = read_idx(&dir.join("t10k-images-idx3-ubyte.gz"), &dir.join("t10k-labels-idx1-ubyte.gz")).unwrap();
    (tr.take(limit), te.take(500))
}

#[test]
fn mnist_smoke_run_reduces_loss() {
    let (tr, te) = mnist(512);
    assert_eq!(tr.sample_shape(), (1, 28, 28));
    let spec = NetworkSpec::two_conv((1, 28, 28), 10);
    let cfg = TrainingConfig {
        epochs: 3,
        batch_size: 32,
        lr: 0.05,
        optimizer: OptimizerConfig::sgd_momentum(0.9, 1e-4),
        sgs: SgsConfig {
            refresh_every: 1,
            ..SgsConfig::default()
        },
        ..TrainingConfig::default()
    };
    let out = train(&spec, &tr, &te, &cfg).unwrap();
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.train_loss).collect();
    assert!(losses[2] < losses[0], "{losses:?}");
    assert!(out.metrics[2].eval_acc > 0.5, "{:?}", out.metrics[2]);
    // refreshes at epochs 1 and 2, one record per conv layer
    assert_eq!(out.scalings.len(), 4);
    assert!(out.scalings.iter().all(|r| r.epoch >= 1));
}

#[test]
fn single_precision_training_runs() {
    let data: LabeledDataset<f32> = synthetic_dataset(64, (1, 10, 10), 2, 1, 3).unwrap();
    let spec = NetworkSpec {
        input: (1, 10, 10),
        layers: vec![LayerSpec::conv(4, 3), LayerSpec::Flatten, LayerSpec::dense(2)],
    };
    let cfg = TrainingConfig {
        epochs: 2,
        batch_size: 16,
        sgs: SgsConfig {
            measure: Measure::Autocorr,
            warmup_epochs: 0,
            ..SgsConfig::default()
        },
        ..TrainingConfig::default()
    };
    let out = train(&spec, &data, &data, &cfg).unwrap();
    assert_eq!(out.metrics.len(), 2);
    assert!(out.metrics.iter().all(|m| m.train_loss.is_finite()));
}

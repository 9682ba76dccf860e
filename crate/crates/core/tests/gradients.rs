//! Analytic gradients against central finite differences (64-bit, step 1e-5).

mod common;

use common::cases;
use common::*;
use fer_core::dataset::ExpressionLabel;
use fer_core::nn::{BottleneckConfig, Gradients, Mode, Network, NetworkConfig, NormStatistics};
use fer_core::train::weighted_cross_entropy;
use rand::Rng;

#[test]
fn se_block() {
    for seed in 0..10 {
        cases::se_block(seed).assert_ok(&format!("SE block, seed {seed}"));
    }
}

#[test]
fn bottleneck_with_projection_and_batch_statistics() {
    for seed in 0..10 {
        cases::bottleneck_projection(seed).assert_ok(&format!("bottleneck, seed {seed}"));
    }
}

#[test]
fn bottleneck_identity_shortcut_running_statistics() {
    let config = BottleneckConfig {
        in_channels: 16,
        mid_channels: 4,
        out_channels: 16,
        stride: 1,
        reduction: 4,
        stride_in_reduce: false,
        zero_init_last_norm: false,
    };
    for seed in 0..5 {
        cases::bottleneck(seed, config, NormStatistics::Running, 4)
            .assert_ok(&format!("seed {seed}"));
    }
}

#[test]
fn bottleneck_stride_on_reduce() {
    let config = BottleneckConfig {
        in_channels: 8,
        mid_channels: 4,
        out_channels: 16,
        stride: 2,
        reduction: 8,
        stride_in_reduce: true,
        zero_init_last_norm: false,
    };
    for seed in 0..5 {
        cases::bottleneck(seed, config, NormStatistics::Batch, 5)
            .assert_ok(&format!("seed {seed}"));
    }
}

#[test]
fn weighted_cross_entropy_logits() {
    for seed in 0..10 {
        cases::weighted_ce(seed).assert_ok(&format!("loss, seed {seed}"));
    }
}

fn network_report(config: NetworkConfig, seed: u64) -> FdReport {
    let mut rng = rng(seed);
    let mut net = Network::<f64>::new(config, seed).unwrap();
    jitter_trainables(net.store_mut(), 0.05, &mut rng);
    randomize_running_stats(net.store_mut(), &mut rng);
    let spec = net.config().input;
    let x = normal(&[3, 3, spec.height, spec.width], 1.0, &mut rng);
    let targets: Vec<ExpressionLabel> = (0..3)
        .map(|_| ExpressionLabel::from_index(rng.gen_range(0..7)).unwrap())
        .collect();
    let weights: [f64; 7] = std::array::from_fn(|_| rng.gen_range(1.0..5.0));
    let loss = |n: &Network<f64>| {
        let pass = n.forward(&x, Mode::Train).unwrap();
        weighted_cross_entropy(&pass.logits, &targets, &weights)
            .unwrap()
            .0
    };
    let pass = net.forward(&x, Mode::Train).unwrap();
    let (_, dlogits) = weighted_cross_entropy(&pass.logits, &targets, &weights).unwrap();
    let mut grads = Gradients::zeros_like(net.store());
    net.backward(&pass, &dlogits, &mut grads);
    let ids: Vec<_> = net.store().trainable_ids().collect();
    let mut report = FdReport::default();
    for id in ids {
        let analytic = grads.get(id).data().to_vec();
        let coords = coordinates(analytic.len(), Some(6));
        let name = net.store().name(id).to_string();
        report.merge(compare(&name, &analytic, &coords, |i, delta| {
            let original = net.store().get(id).data()[i];
            net.store_mut().get_mut(id).data_mut()[i] = original + delta;
            let l = loss(&net);
            net.store_mut().get_mut(id).data_mut()[i] = original;
            l
        }));
    }
    report
}

#[test]
fn tiny_network_end_to_end() {
    for stats in [NormStatistics::Batch, NormStatistics::Running] {
        let config = NetworkConfig {
            norm_statistics: stats,
            input: fer_core::augment::ImageTensorSpec::square(12),
            ..NetworkConfig::tiny()
        };
        network_report(config, 3).assert_ok(&format!("tiny network, {stats:?}"));
    }
}

#[test]
fn pooled_stem_network() {
    let config = NetworkConfig {
        stem_kernel: 5,
        stem_stride: 2,
        stem_pool: true,
        stride_in_reduce: true,
        input: fer_core::augment::ImageTensorSpec::square(16),
        ..NetworkConfig::tiny()
    };
    network_report(config, 11).assert_ok("pooled stem");
}

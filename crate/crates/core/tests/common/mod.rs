//! Shared test oracles: central finite differences and seeded random fixtures.
#![allow(dead_code)]

use fer_core::nn::{Gradients, ParamId, ParamStore};
use fer_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// At most this fraction of coordinates may sit on a ReLU kink.
pub const MAX_KINK_FRACTION: f64 = 0.02;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::from_vec(shape, data).unwrap()
}

/// `Σ r ⊙ y`, a scalar probe whose gradient with respect to `y` is `r`.
pub fn probe(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose difference quotient at the base step straddled a
    /// ReLU switch and was recomputed with a halved step.
    pub refined: usize,
    /// Coordinates where no step down to `FD_STEP / 1024` converged; excluded.
    pub kinks: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.refined += other.refined;
        self.kinks += other.kinks;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }

    pub fn passes(&self) -> bool {
        self.worst <= FD_TOLERANCE
            && (self.kinks as f64) <= MAX_KINK_FRACTION * self.checked.max(1) as f64
    }

    pub fn assert_ok(&self, what: &str) {
        assert!(
            self.passes(),
            "{what}: worst relative error {:.3e} at {} ({} coordinates, {} refined, {} unresolved kinks)",
            self.worst,
            self.worst_at,
            self.checked,
            self.refined,
            self.kinks
        );
    }
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `analytic[i]` with central differences of `f(i, δ)`, the loss with
/// coordinate `i` shifted by `δ`. Errors are
/// `|a - n| / max(|a|, |n|, 1e-3·max|a|, 1e-8)`.
///
/// The quotient at step `h` is accepted once it agrees with the one at `h/2`;
/// disagreement means a kink lies inside `[-h, h]`, and the step is halved.
pub fn compare(
    label: &str,
    analytic: &[f64],
    coords: &[usize],
    mut f: impl FnMut(usize, f64) -> f64,
) -> FdReport {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-8);
    let mut report = FdReport::default();
    for &i in coords {
        report.checked += 1;
        let mut quotient = |h: f64| (f(i, h) - f(i, -h)) / (2.0 * h);
        let mut h = FD_STEP;
        let mut n = quotient(h);
        let mut converged = None;
        for halving in 0..10 {
            let n_half = quotient(h / 2.0);
            if rel(n, n_half, floor) <= 0.1 * FD_TOLERANCE {
                converged = Some((n, halving > 0));
                break;
            }
            h /= 2.0;
            n = n_half;
        }
        let Some((n, refined)) = converged else {
            report.kinks += 1;
            continue;
        };
        report.refined += refined as usize;
        let e = rel(analytic[i], n, floor);
        if e > report.worst {
            report.worst = e;
            report.worst_at = format!(
                "{label}[{i}] (analytic {:.6e}, numeric {n:.6e})",
                analytic[i]
            );
        }
    }
    report
}

/// All coordinates, or `limit` of them spread deterministically over the tensor.
pub fn coordinates(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|j| j * len / k + (len / k) / 2).collect(),
        _ => (0..len).collect(),
    }
}

/// Finite-difference check of every listed parameter's gradient.
pub fn check_params(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    grads: &Gradients<f64>,
    limit: Option<usize>,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> FdReport {
    let mut report = FdReport::default();
    for &id in ids {
        let analytic = grads.get(id).data().to_vec();
        let coords = coordinates(analytic.len(), limit);
        let name = store.name(id).to_string();
        let r = compare(&name, &analytic, &coords, |i, delta| {
            let original = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = original + delta;
            let l = loss(store);
            store.get_mut(id).data_mut()[i] = original;
            l
        });
        report.merge(r);
    }
    report
}

/// Finite-difference check of an input gradient.
pub fn check_input(
    x: &Tensor<f64>,
    dx: &Tensor<f64>,
    limit: Option<usize>,
    loss: impl Fn(&Tensor<f64>) -> f64,
) -> FdReport {
    let mut probe_x = x.clone();
    let coords = coordinates(x.len(), limit);
    compare("input", dx.data(), &coords, |i, delta| {
        let original = x.data()[i];
        probe_x.data_mut()[i] = original + delta;
        let l = loss(&probe_x);
        probe_x.data_mut()[i] = original;
        l
    })
}

/// Adds `N(0, std²)` noise to every trainable parameter.
pub fn jitter_trainables(store: &mut ParamStore<f64>, std: f64, rng: &mut impl Rng) {
    for id in store.trainable_ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += std * Distribution::<f64>::sample(&StandardNormal, rng);
        }
    }
}

/// Random positive running statistics for every normalization buffer.
pub fn randomize_running_stats(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.kind(id) == fer_core::nn::ParamKind::Buffer)
        .collect();
    for id in ids {
        let is_var = store.name(id).ends_with("running_var");
        for v in store.get_mut(id).data_mut() {
            *v = if is_var {
                rng.gen_range(0.5..2.0)
            } else {
                rng.gen_range(-0.5..0.5)
            };
        }
    }
}

pub mod cases {
    //! Gradient-check instances shared by the gradient tests and the acceptance suite.

    use super::*;
    use fer_core::dataset::ExpressionLabel;
    use fer_core::nn::{
        Bottleneck, BottleneckConfig, Network, NetworkConfig, NormStatistics, SeBlock,
        SeBlockConfig,
    };
    use fer_core::train::{accumulate_gradients, weighted_cross_entropy};

    pub fn se_block(seed: u64) -> FdReport {
        let mut rng = rng(seed);
        let mut store = ParamStore::default();
        let se = SeBlock::new(
            &mut store,
            "se",
            SeBlockConfig::new(8, 4).unwrap(),
            &mut rng,
        );
        jitter_trainables(&mut store, 0.3, &mut rng);
        let x = normal(&[2, 8, 4, 4], 1.0, &mut rng);
        let r = normal(&[2, 8, 4, 4], 1.0, &mut rng);
        let (_, cache) = se.forward(&store, &x).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        let dx = se.backward(&store, &cache, &r, &mut grads);
        let ids: Vec<_> = store.trainable_ids().collect();
        let mut report = check_params(&mut store, &ids, &grads, None, |s| {
            probe(&se.forward(s, &x).unwrap().0, &r)
        });
        report.merge(check_input(&x, &dx, None, |xp| {
            probe(&se.forward(&store, xp).unwrap().0, &r)
        }));
        report
    }

    pub fn bottleneck(
        seed: u64,
        config: BottleneckConfig,
        stats: NormStatistics,
        input_hw: usize,
    ) -> FdReport {
        let mut rng = rng(seed);
        let mut store = ParamStore::default();
        let block = Bottleneck::new(&mut store, "block", config, &mut rng).unwrap();
        jitter_trainables(&mut store, 0.2, &mut rng);
        randomize_running_stats(&mut store, &mut rng);
        let x = normal(&[2, config.in_channels, input_hw, input_hw], 1.0, &mut rng);
        let forward = |s: &ParamStore<f64>, x: &Tensor<f64>| {
            let mut updates = Vec::new();
            block.forward(s, x, stats, &mut updates).unwrap()
        };
        let (y, cache) = forward(&store, &x);
        let r = normal(y.shape(), 1.0, &mut rng);
        let mut grads = Gradients::zeros_like(&store);
        let dx = block.backward(&store, &cache, &r, &mut grads);
        let ids: Vec<_> = store.trainable_ids().collect();
        let mut report = check_params(&mut store, &ids, &grads, None, |s| {
            probe(&forward(s, &x).0, &r)
        });
        report.merge(check_input(&x, &dx, None, |xp| {
            probe(&forward(&store, xp).0, &r)
        }));
        report
    }

    /// Projection shortcut, stride 2, batch statistics.
    pub fn bottleneck_projection(seed: u64) -> FdReport {
        let config = BottleneckConfig {
            in_channels: 8,
            mid_channels: 4,
            out_channels: 16,
            stride: 2,
            reduction: 4,
            stride_in_reduce: false,
            zero_init_last_norm: false,
        };
        bottleneck(seed, config, NormStatistics::Batch, 6)
    }

    pub fn weighted_ce(seed: u64) -> FdReport {
        let mut rng = rng(seed);
        let logits = normal(&[6, 7], 2.0, &mut rng);
        let targets: Vec<ExpressionLabel> = (0..6)
            .map(|_| ExpressionLabel::from_index(rng.gen_range(0..7)).unwrap())
            .collect();
        let weights: [f64; 7] = std::array::from_fn(|_| rng.gen_range(1.0..50.0));
        let (_, grad) = weighted_cross_entropy(&logits, &targets, &weights).unwrap();
        check_input(&logits, &grad, None, |z| {
            weighted_cross_entropy(z, &targets, &weights).unwrap().0
        })
    }

    /// Largest per-tensor relative gap `max|a - f| / max|f|` between the gradients of
    /// `K` accumulated micro-batches and of the full batch, and the relative loss gap.
    pub fn accumulation(seed: u64, batch: usize, micro_batches: usize) -> (f64, f64) {
        let config = NetworkConfig {
            norm_statistics: NormStatistics::Running,
            ..NetworkConfig::tiny()
        };
        let mut network = Network::<f64>::new(config, seed).unwrap();
        let mut rng = rng(seed);
        jitter_trainables(network.store_mut(), 0.05, &mut rng);
        randomize_running_stats(network.store_mut(), &mut rng);
        let x = normal(&[batch, 3, 32, 32], 1.0, &mut rng);
        let targets: Vec<ExpressionLabel> = (0..batch)
            .map(|_| ExpressionLabel::from_index(rng.gen_range(0..7)).unwrap())
            .collect();
        let weights: [f64; 7] = std::array::from_fn(|_| rng.gen_range(1.0..50.0));
        let full = accumulate_gradients(&network, &x, &targets, &weights, 1).unwrap();
        let split = accumulate_gradients(&network, &x, &targets, &weights, micro_batches).unwrap();
        let mut worst = 0.0f64;
        for id in network.store().trainable_ids() {
            let (f, a) = (full.grads.get(id).data(), split.grads.get(id).data());
            let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let gap = f
                .iter()
                .zip(a)
                .fold(0.0f64, |m, (f, a)| m.max((f - a).abs()));
            if scale > 0.0 {
                worst = worst.max(gap / scale);
            } else {
                worst = worst.max(gap);
            }
        }
        let loss_gap = (full.loss - split.loss).abs() / full.loss.abs();
        (worst, loss_gap)
    }
}

pub mod oracles {
    //! Reference computations that share no code with the library under test.

    use super::*;
    use fer_core::dataset::{DatasetManifest, ExpressionLabel, Sample, Source, Split};

    /// Per-class F1 from a direct walk over the samples: `2PR / (P + R)`, every 0/0 taken as 0.
    pub fn tally_f1(truth: &[usize], predicted: &[usize]) -> [f64; 7] {
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        std::array::from_fn(|c| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (&t, &p) in truth.iter().zip(predicted) {
                match (t == c, p == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            let precision = div(tp as f64, (tp + fp) as f64);
            let recall = div(tp as f64, (tp + fn_) as f64);
            div(2.0 * precision * recall, precision + recall)
        })
    }

    /// Up to 200 label/prediction pairs with classes skewed towards the low codes.
    pub fn prediction_set(rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
        let n = rng.gen_range(1..=200);
        let top = rng.gen_range(1..=7);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..top)).collect();
        let accuracy = rng.gen::<f64>();
        let predicted = truth
            .iter()
            .map(|&t| {
                if rng.gen::<f64>() < accuracy {
                    t
                } else {
                    rng.gen_range(0..7)
                }
            })
            .collect();
        (truth, predicted)
    }

    const PATH_CHARS: &[char] = &['a', 'Z', '0', '9', '_', '-', '.', ' ', '/', 'é', '表', '#'];

    /// A manifest of up to 60 unique samples over all sources, with awkward path characters.
    pub fn manifest(rng: &mut impl Rng) -> DatasetManifest {
        let n = rng.gen_range(0..=60);
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let len = rng.gen_range(1..12);
            let stem: String = (0..len)
                .map(|_| PATH_CHARS[rng.gen_range(0..PATH_CHARS.len())])
                .collect();
            let label = ExpressionLabel::from_index(rng.gen_range(0..7)).unwrap();
            let (source, frame) = match rng.gen_range(0..3) {
                0 => (Source::Affwild2, Some(rng.gen_range(0..100_000u64))),
                1 => (Source::Expw, None),
                _ => (Source::Synthetic, None),
            };
            samples.push(Sample::new(format!("{stem}{i}.png"), label, source, frame).unwrap());
        }
        let split = [Split::Train, Split::Val, Split::Test][rng.gen_range(0..3)];
        DatasetManifest::new(split, samples).unwrap()
    }
}

pub mod training {
    //! Synthetic datasets and in-process training runs.

    use std::path::Path;

    use fer_core::augment::{JitterConfig, Normalization};
    use fer_core::config::config_hash;
    use fer_core::dataset::{generate_synthetic_dataset, Split, SynthSpec};
    use fer_core::nn::{Network, NetworkConfig};
    use fer_core::train::{run_training, ImageSet, TrainConfig, TrainOutcome, TrainingRun};
    use fer_core::Result;

    /// Writes synthetic train and val splits under `dir` and loads them.
    pub fn synthetic_sets(
        dir: &Path,
        train_counts: [usize; 7],
        val_counts: [usize; 7],
        seed: u64,
    ) -> (ImageSet<f32>, ImageSet<f32>) {
        let load = |counts, split| {
            let spec = SynthSpec {
                counts,
                image_size: 32,
                seed,
            };
            let manifest = generate_synthetic_dataset(&spec, split, dir).unwrap();
            ImageSet::new(manifest, dir, true).unwrap()
        };
        (
            load(train_counts, Split::Train),
            load(val_counts, Split::Val),
        )
    }

    pub fn train(
        out: &Path,
        config: &TrainConfig,
        jitter: &JitterConfig,
        data: &(ImageSet<f32>, ImageSet<f32>),
        resume: bool,
    ) -> Result<(TrainOutcome, Network<f32>)> {
        train_as(
            out,
            config,
            jitter,
            data,
            resume,
            config_hash(&(config, jitter)),
        )
    }

    /// Like [`train`] but recording `hash` as the run's configuration hash.
    pub fn train_as(
        out: &Path,
        config: &TrainConfig,
        jitter: &JitterConfig,
        data: &(ImageSet<f32>, ImageSet<f32>),
        resume: bool,
        hash: String,
    ) -> Result<(TrainOutcome, Network<f32>)> {
        let mut network = Network::new(NetworkConfig::tiny(), config.seed)?;
        let run = TrainingRun {
            config,
            jitter,
            normalization: Normalization::default(),
            out_dir: out,
            config_hash: hash,
            resume,
        };
        let outcome = run_training(&run, &data.0, &data.1, &mut network)?;
        Ok((outcome, network))
    }
}

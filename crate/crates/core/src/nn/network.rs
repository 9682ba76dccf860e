//! SE-ResNet assembled from a [`NetworkConfig`].

use serde::{Deserialize, Serialize};

use super::bottleneck::{Bottleneck, BottleneckCache, BottleneckConfig};
use super::layers::{
    global_avg_pool, global_avg_pool_backward, max_pool_3x3_s2, max_pool_backward, relu,
    relu_backward, BatchNorm2d, Conv2d, Linear, MaxPoolCache, NormCache, NormStatistics,
    RunningUpdate,
};
use super::store::{Gradients, ParamId, ParamStore};
use crate::augment::ImageTensorSpec;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HEAD_NAME: &str = "head";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub stage_depths: Vec<usize>,
    /// Inner (3×3) width per stage; stage outputs are `width * expansion`.
    pub stage_widths: Vec<usize>,
    pub expansion: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub se_reduction: usize,
    pub stride_in_reduce: bool,
    pub zero_init_last_norm: bool,
    /// Normalization statistics used by training forward passes.
    pub norm_statistics: NormStatistics,
    pub input: ImageTensorSpec,
    pub num_classes: usize,
}

impl NetworkConfig {
    /// SE-ResNet-50 with 112×112 inputs and a seven-way head.
    pub fn se_resnet50() -> Self {
        NetworkConfig {
            stage_depths: vec![3, 4, 6, 3],
            stage_widths: vec![64, 128, 256, 512],
            expansion: 4,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            se_reduction: 16,
            stride_in_reduce: true,
            zero_init_last_norm: false,
            norm_statistics: NormStatistics::Batch,
            input: ImageTensorSpec::default(),
            num_classes: 7,
        }
    }

    /// Desk-scale variant sharing the same code path: two single-block stages on 32×32 inputs.
    pub fn tiny() -> Self {
        NetworkConfig {
            stage_depths: vec![1, 1],
            stage_widths: vec![8, 16],
            expansion: 4,
            stem_channels: 16,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: false,
            se_reduction: 16,
            stride_in_reduce: false,
            zero_init_last_norm: false,
            norm_statistics: NormStatistics::Batch,
            input: ImageTensorSpec::square(32),
            num_classes: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_depths.is_empty() || self.stage_depths.len() != self.stage_widths.len() {
            return bad(format!(
                "network.stage_depths ({}) and network.stage_widths ({}) must be non-empty and equally long",
                self.stage_depths.len(),
                self.stage_widths.len()
            ));
        }
        if self
            .stage_depths
            .iter()
            .chain(&self.stage_widths)
            .any(|&v| v == 0)
        {
            return bad("network stage depths and widths must be positive".into());
        }
        if self.expansion == 0
            || self.stem_channels == 0
            || self.num_classes == 0
            || self.se_reduction == 0
        {
            return bad(
                "network.expansion, stem_channels, num_classes and se_reduction must be positive"
                    .into(),
            );
        }
        if self.stem_kernel.is_multiple_of(2) || self.stem_stride == 0 {
            return bad("network.stem_kernel must be odd and stem_stride positive".into());
        }
        for &w in &self.stage_widths {
            if !(w * self.expansion).is_multiple_of(self.se_reduction) {
                return bad(format!(
                    "network.se_reduction {} does not divide stage output width {}",
                    self.se_reduction,
                    w * self.expansion
                ));
            }
        }
        if self.input.channels != 3 || self.input.height < 8 || self.input.width < 8 {
            return bad(format!(
                "network.input must be 3-channel and at least 8×8, got {:?}",
                self.input
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_widths.last().copied().unwrap_or(0) * self.expansion
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Head (final classification layer) versus everything else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterGroups {
    pub head: Vec<ParamId>,
    pub backbone: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    store: ParamStore<T>,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<Bottleneck>,
    head: Linear,
}

#[derive(Debug)]
struct StemCache<T> {
    input: Tensor<T>,
    norm: NormCache<T>,
    activated: Tensor<T>,
    pool: Option<MaxPoolCache>,
}

/// Output of a forward pass plus everything its backward pass needs.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    pub running_updates: Vec<RunningUpdate<T>>,
    stem: StemCache<T>,
    blocks: Vec<BottleneckCache<T>>,
    pooled_hw: (usize, usize),
    features: Tensor<T>,
}

impl<T: Scalar> Network<T> {
    /// Fresh network with deterministic initialization from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init, &[]);
        let mut store = ParamStore::default();
        let k = config.stem_kernel;
        let stem_conv = Conv2d::new(
            &mut store,
            "stem.conv",
            3,
            config.stem_channels,
            k,
            config.stem_stride,
            k / 2,
            &mut rng,
        );
        let stem_bn = BatchNorm2d::new(&mut store, "stem.bn", config.stem_channels);
        let mut blocks = Vec::new();
        let mut in_channels = config.stem_channels;
        for (s, (&depth, &width)) in config
            .stage_depths
            .iter()
            .zip(&config.stage_widths)
            .enumerate()
        {
            let out_channels = width * config.expansion;
            for b in 0..depth {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let block_config = BottleneckConfig {
                    in_channels,
                    mid_channels: width,
                    out_channels,
                    stride,
                    reduction: config.se_reduction,
                    stride_in_reduce: config.stride_in_reduce,
                    zero_init_last_norm: config.zero_init_last_norm,
                };
                blocks.push(Bottleneck::new(
                    &mut store,
                    &format!("stages.{s}.{b}"),
                    block_config,
                    &mut rng,
                )?);
                in_channels = out_channels;
            }
        }
        let mut head_rng = stream(seed, Stream::HeadInit, &[]);
        let head = Linear::new(
            &mut store,
            HEAD_NAME,
            in_channels,
            config.num_classes,
            &mut head_rng,
        );
        Ok(Network {
            config,
            store,
            stem_conv,
            stem_bn,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn blocks(&self) -> &[Bottleneck] {
        &self.blocks
    }

    pub fn parameter_groups(&self) -> ParameterGroups {
        let head = vec![self.head.weight, self.head.bias];
        let backbone = self
            .store
            .trainable_ids()
            .filter(|id| !head.contains(id))
            .collect();
        ParameterGroups { head, backbone }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let spec = self.config.input;
        match *x.shape() {
            [n, 3, h, w] if n > 0 && h == spec.height && w == spec.width => {}
            ref s => {
                return Err(Error::Contract(format!(
                    "network expects N×3×{}×{} input, got {s:?}",
                    spec.height, spec.width
                )))
            }
        }
        if !x.all_finite() {
            return Err(Error::Contract(
                "network input contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        self.check_input(x)?;
        let stats = match mode {
            Mode::Train => self.config.norm_statistics,
            Mode::Eval => NormStatistics::Running,
        };
        let mut updates = Vec::new();
        let a = self.stem_conv.forward(&self.store, x)?;
        let (b, norm, u) = self.stem_bn.forward(&self.store, &a, stats)?;
        updates.extend(u);
        let activated = relu(&b);
        let (mut h, pool) = if self.config.stem_pool {
            let (p, cache) = max_pool_3x3_s2(&activated)?;
            (p, Some(cache))
        } else {
            (activated.clone(), None)
        };
        let stem = StemCache {
            input: x.clone(),
            norm,
            activated,
            pool,
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = block.forward(&self.store, &h, stats, &mut updates)?;
            caches.push(cache);
            h = out;
        }
        let pooled_hw = (h.shape()[2], h.shape()[3]);
        let features = global_avg_pool(&h)?;
        let logits = self.head.forward(&self.store, &features)?;
        Ok(ForwardPass {
            logits,
            running_updates: updates,
            stem,
            blocks: caches,
            pooled_hw,
            features,
        })
    }

    /// Inference-mode logits.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, Mode::Eval)?.logits)
    }

    /// Accumulates `∂loss/∂θ` into `grads` given `∂loss/∂logits`.
    pub fn backward(&self, pass: &ForwardPass<T>, dlogits: &Tensor<T>, grads: &mut Gradients<T>) {
        let dfeat = self
            .head
            .backward(&self.store, &pass.features, dlogits, grads);
        let mut dh = global_avg_pool_backward(&dfeat, pass.pooled_hw.0, pass.pooled_hw.1);
        for (block, cache) in self.blocks.iter().zip(&pass.blocks).rev() {
            dh = block.backward(&self.store, cache, &dh, grads);
        }
        if let Some(pool) = &pass.stem.pool {
            dh = max_pool_backward(pool, &dh);
        }
        let db = relu_backward(&pass.stem.activated, &dh);
        let da = self
            .stem_bn
            .backward(&self.store, &pass.stem.norm, &db, grads);
        // The input gradient is not needed.
        let _ = self
            .stem_conv
            .backward(&self.store, &pass.stem.input, &da, grads);
    }

    pub fn commit(&mut self, updates: &[RunningUpdate<T>]) {
        for u in updates {
            u.apply(&mut self.store);
        }
    }
}

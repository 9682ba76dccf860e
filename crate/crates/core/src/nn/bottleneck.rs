use rand::Rng;

use super::layers::{
    relu, relu_backward, BatchNorm2d, Conv2d, NormCache, NormStatistics, RunningUpdate,
};
use super::se::{SeBlock, SeBlockConfig, SeCache};
use super::store::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub reduction: usize,
    /// Put the stride on the first 1×1 convolution instead of the 3×3.
    pub stride_in_reduce: bool,
    /// Start the last normalization scale at zero so the residual branch is silent.
    pub zero_init_last_norm: bool,
}

/// 1×1 reduce → 3×3 → 1×1 expand, SE gating, residual add, ReLU.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub config: BottleneckConfig,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub conv3: Conv2d,
    pub bn3: BatchNorm2d,
    pub se: SeBlock,
    pub downsample: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Clone, Debug)]
pub struct BottleneckCache<T> {
    input: Tensor<T>,
    n1: NormCache<T>,
    r1: Tensor<T>,
    n2: NormCache<T>,
    r2: Tensor<T>,
    n3: NormCache<T>,
    se: SeCache<T>,
    shortcut: Option<NormCache<T>>,
    output: Tensor<T>,
}

impl Bottleneck {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        config: BottleneckConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let se_config = SeBlockConfig::new(config.out_channels, config.reduction)?;
        let (s1, s2) = if config.stride_in_reduce {
            (config.stride, 1)
        } else {
            (1, config.stride)
        };
        let conv1 = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            config.in_channels,
            config.mid_channels,
            1,
            s1,
            0,
            rng,
        );
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), config.mid_channels);
        let conv2 = Conv2d::new(
            store,
            &format!("{name}.conv2"),
            config.mid_channels,
            config.mid_channels,
            3,
            s2,
            1,
            rng,
        );
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), config.mid_channels);
        let conv3 = Conv2d::new(
            store,
            &format!("{name}.conv3"),
            config.mid_channels,
            config.out_channels,
            1,
            1,
            0,
            rng,
        );
        let bn3 = BatchNorm2d::new(store, &format!("{name}.bn3"), config.out_channels);
        if config.zero_init_last_norm {
            store.get_mut(bn3.weight).fill(T::zero());
        }
        let se = SeBlock::new(store, &format!("{name}.se"), se_config, rng);
        let downsample =
            (config.stride != 1 || config.in_channels != config.out_channels).then(|| {
                (
                    Conv2d::new(
                        store,
                        &format!("{name}.downsample.conv"),
                        config.in_channels,
                        config.out_channels,
                        1,
                        config.stride,
                        0,
                        rng,
                    ),
                    BatchNorm2d::new(store, &format!("{name}.downsample.bn"), config.out_channels),
                )
            });
        Ok(Bottleneck {
            config,
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            se,
            downsample,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        stats: NormStatistics,
        updates: &mut Vec<RunningUpdate<T>>,
    ) -> Result<(Tensor<T>, BottleneckCache<T>)> {
        let mut push = |u: Option<RunningUpdate<T>>| updates.extend(u);

        let a1 = self.conv1.forward(store, x)?;
        let (b1, n1, u) = self.bn1.forward(store, &a1, stats)?;
        push(u);
        let r1 = relu(&b1);
        let a2 = self.conv2.forward(store, &r1)?;
        let (b2, n2, u) = self.bn2.forward(store, &a2, stats)?;
        push(u);
        let r2 = relu(&b2);
        let a3 = self.conv3.forward(store, &r2)?;
        let (b3, n3, u) = self.bn3.forward(store, &a3, stats)?;
        push(u);
        let (gated, se) = self.se.forward(store, &b3)?;

        let (mut sum, shortcut) = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(store, x)?;
                let (s, cache, u) = bn.forward(store, &s, stats)?;
                push(u);
                (s, Some(cache))
            }
            None => (x.clone(), None),
        };
        if sum.shape() != gated.shape() {
            return Err(Error::Config(format!(
                "residual branch {:?} and shortcut {:?} disagree",
                gated.shape(),
                sum.shape()
            )));
        }
        sum.add_assign(&gated);
        let output = relu(&sum);
        Ok((
            output.clone(),
            BottleneckCache {
                input: x.clone(),
                n1,
                r1,
                n2,
                r2,
                n3,
                se,
                shortcut,
                output,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &BottleneckCache<T>,
        dy: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Tensor<T> {
        let dsum = relu_backward(&cache.output, dy);

        let d_b3 = self.se.backward(store, &cache.se, &dsum, grads);
        let d_a3 = self.bn3.backward(store, &cache.n3, &d_b3, grads);
        let d_r2 = self.conv3.backward(store, &cache.r2, &d_a3, grads);
        let d_b2 = relu_backward(&cache.r2, &d_r2);
        let d_a2 = self.bn2.backward(store, &cache.n2, &d_b2, grads);
        let d_r1 = self.conv2.backward(store, &cache.r1, &d_a2, grads);
        let d_b1 = relu_backward(&cache.r1, &d_r1);
        let d_a1 = self.bn1.backward(store, &cache.n1, &d_b1, grads);
        let mut dx = self.conv1.backward(store, &cache.input, &d_a1, grads);

        match (&self.downsample, &cache.shortcut) {
            (Some((conv, bn)), Some(ncache)) => {
                let ds = bn.backward(store, ncache, &dsum, grads);
                dx.add_assign(&conv.backward(store, &cache.input, &ds, grads));
            }
            _ => dx.add_assign(&dsum),
        }
        dx
    }
}

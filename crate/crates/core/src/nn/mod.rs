//! SE-ResNet with hand-written forward and backward passes.

pub mod bottleneck;
pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod se;
pub mod store;

pub use bottleneck::{Bottleneck, BottleneckConfig};
pub use checkpoint::{
    find_head, load_checkpoint, load_params, load_pretrained_backbone, map_external_key,
    network_param_set, read_param_set, read_sidecar, reshape_head, save_checkpoint,
    tensor_checksum, write_param_set, LoadReport, ModelSidecar, ParamSet,
};
pub use layers::{BatchNorm2d, Conv2d, Linear, NormStatistics, RunningUpdate};
pub use network::{ForwardPass, Mode, Network, NetworkConfig, ParameterGroups, HEAD_NAME};
pub use se::{SeBlock, SeBlockConfig};
pub use store::{Gradients, ParamId, ParamKind, ParamStore};

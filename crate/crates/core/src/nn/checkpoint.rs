//! Named-array checkpoints.
//!
//! Weights live in a safetensors archive (`key → f32 array with shape`).
//! A JSON sidecar next to it (same stem, `.json`) records the format
//! version, architecture, class count and provenance.
//!
//! Native keys follow the module layout:
//!
//! | native key                                  | common external key                         |
//! |---------------------------------------------|---------------------------------------------|
//! | `stem.conv.weight`                          | `layer0.conv1.weight`                       |
//! | `stem.bn.{weight,bias,running_*}`           | `layer0.bn1.*`                              |
//! | `stages.{s}.{b}.conv{i}.weight`             | `layer{s+1}.{b}.conv{i}.weight`             |
//! | `stages.{s}.{b}.bn{i}.*`                    | `layer{s+1}.{b}.bn{i}.*`                    |
//! | `stages.{s}.{b}.se.fc{i}.{weight,bias}`     | `layer{s+1}.{b}.se_module.fc{i}.*`          |
//! | `stages.{s}.{b}.downsample.conv.weight`     | `layer{s+1}.{b}.downsample.0.weight`        |
//! | `stages.{s}.{b}.downsample.bn.*`            | `layer{s+1}.{b}.downsample.1.*`             |
//! | `head.{weight,bias}`                        | `last_linear.*`, `fc.*`                     |
//!
//! A leading `module.` prefix is stripped. Arrays whose element counts match
//! but whose shapes differ only by trailing unit axes (1×1 convolutions
//! stored as dense matrices) are reshaped on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::normal_tensor;
use super::network::{Network, NetworkConfig, HEAD_NAME};
use crate::error::{Error, IoContext, Result};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Name prefixes recognized as the final classification layer.
pub const HEAD_PREFIXES: [&str; 4] = [HEAD_NAME, "last_linear", "fc", "classifier"];

pub type ParamSet = BTreeMap<String, Tensor<f32>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format_version: u32,
    pub architecture: NetworkConfig,
    pub num_classes: usize,
    pub source: String,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn network_param_set<T: Scalar>(network: &Network<T>) -> ParamSet {
    let store = network.store();
    store
        .ids()
        .map(|id| (store.name(id).to_string(), store.get(id).cast::<f32>()))
        .collect()
}

pub fn write_param_set(set: &ParamSet, path: &Path) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = set
        .iter()
        .map(|(k, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (k.clone(), raw, t.shape().to_vec())
        })
        .collect();
    let views: Vec<(String, TensorView<'_>)> = bytes
        .iter()
        .map(|(k, raw, shape)| {
            let view =
                TensorView::new(Dtype::F32, shape.clone(), raw).expect("consistent byte length");
            (k.clone(), view)
        })
        .collect();
    let encoded = safetensors::serialize(views, &None)
        .map_err(|e| Error::Load(format!("cannot encode checkpoint {}: {e}", path.display())))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, encoded).at(path)
}

pub fn read_param_set(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).at(path)?;
    let archive = SafeTensors::deserialize(&bytes).map_err(|e| {
        Error::Load(format!(
            "{} is not a named-array archive: {e}",
            path.display()
        ))
    })?;
    let mut set = ParamSet::new();
    for (name, view) in archive.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Load(format!(
                "{name}: expected f32 array, found {:?}",
                view.dtype()
            )));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        set.insert(name, Tensor::from_vec(view.shape(), data)?);
    }
    Ok(set)
}

pub fn save_checkpoint<T: Scalar>(network: &Network<T>, path: &Path, source: &str) -> Result<()> {
    write_param_set(&network_param_set(network), path)?;
    let sidecar = ModelSidecar {
        format_version: FORMAT_VERSION,
        architecture: network.config().clone(),
        num_classes: network.config().num_classes,
        source: source.to_string(),
    };
    let side = sidecar_path(path);
    fs::write(
        &side,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
    .at(&side)
}

pub fn read_sidecar(weights: &Path) -> Result<ModelSidecar> {
    let side = sidecar_path(weights);
    let text = fs::read_to_string(&side).at(&side)?;
    let sidecar: ModelSidecar = serde_json::from_str(&text).map_err(|e| {
        Error::Load(format!(
            "{}: invalid checkpoint sidecar: {e}",
            side.display()
        ))
    })?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "{}: unsupported checkpoint format_version {}",
            side.display(),
            sidecar.format_version
        )));
    }
    Ok(sidecar)
}

/// Builds the network described by a checkpoint's sidecar and loads its weights strictly.
pub fn load_checkpoint<T: Scalar>(weights: &Path) -> Result<Network<T>> {
    let set = read_param_set(weights)?;
    let sidecar = read_sidecar(weights)?;
    let mut network = Network::new(sidecar.architecture, 0)?;
    let report = load_params(&mut network, &set, true)?;
    if !report.missing.is_empty() {
        return Err(Error::Load(format!(
            "{}: checkpoint lacks keys [{}]",
            weights.display(),
            report.missing.join(", ")
        )));
    }
    Ok(network)
}

/// Translates an external key into the native layout; native keys pass through.
pub fn map_external_key(key: &str) -> String {
    let key = key.strip_prefix("module.").unwrap_or(key);
    for prefix in ["last_linear.", "fc."] {
        if let Some(rest) = key.strip_prefix(prefix) {
            return format!("{HEAD_NAME}.{rest}");
        }
    }
    if let Some(rest) = key.strip_prefix("layer0.") {
        return match rest.split_once('.') {
            Some(("conv1", tail)) => format!("stem.conv.{tail}"),
            Some(("bn1", tail)) => format!("stem.bn.{tail}"),
            _ => key.to_string(),
        };
    }
    if let Some(rest) = key.strip_prefix("layer") {
        let mut parts = rest.splitn(3, '.');
        if let (Some(layer), Some(block), Some(tail)) = (parts.next(), parts.next(), parts.next()) {
            if let (Ok(layer), Ok(block)) = (layer.parse::<usize>(), block.parse::<usize>()) {
                if layer >= 1 {
                    let tail = if let Some(t) = tail.strip_prefix("se_module.") {
                        format!("se.{t}")
                    } else if let Some(t) = tail.strip_prefix("downsample.0.") {
                        format!("downsample.conv.{t}")
                    } else if let Some(t) = tail.strip_prefix("downsample.1.") {
                        format!("downsample.bn.{t}")
                    } else {
                        tail.to_string()
                    };
                    return format!("stages.{}.{block}.{tail}", layer - 1);
                }
            }
        }
    }
    key.to_string()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub matched: Vec<String>,
    /// Model keys absent from the checkpoint.
    pub missing: Vec<String>,
    /// Checkpoint keys the model does not have.
    pub unexpected: Vec<String>,
}

fn squeeze_compatible(a: &[usize], b: &[usize]) -> bool {
    let trim = |s: &[usize]| s.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    a[..trim(a)] == b[..trim(b)]
}

/// Copies every matching array into `network`.
///
/// Shape conflicts always fail. In strict mode a missing backbone key fails;
/// a missing head is tolerated since fine-tuning replaces it.
pub fn load_params<T: Scalar>(
    network: &mut Network<T>,
    set: &ParamSet,
    strict: bool,
) -> Result<LoadReport> {
    let mut mapped: BTreeMap<String, (&String, &Tensor<f32>)> = BTreeMap::new();
    for (key, tensor) in set {
        let native = map_external_key(key);
        if let Some((prev, _)) = mapped.insert(native.clone(), (key, tensor)) {
            return Err(Error::Load(format!(
                "checkpoint keys {prev:?} and {key:?} both map to {native:?}"
            )));
        }
    }
    let head_prefix = format!("{HEAD_NAME}.");
    let mut report = LoadReport::default();
    let store = network.store_mut();
    let mut updates = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        match mapped.remove(&name) {
            Some((original, tensor)) => {
                let target = store.get(id).shape().to_vec();
                if tensor.shape() != target.as_slice()
                    && !squeeze_compatible(tensor.shape(), &target)
                {
                    return Err(Error::Load(format!(
                        "{original}: checkpoint shape {:?} conflicts with model shape {target:?}",
                        tensor.shape()
                    )));
                }
                let value = tensor.clone().reshape(&target)?.cast::<T>();
                updates.push((id, value));
                report.matched.push(name);
            }
            None => report.missing.push(name),
        }
    }
    report.unexpected = mapped.into_values().map(|(k, _)| k.clone()).collect();
    if strict {
        let missing_backbone: Vec<_> = report
            .missing
            .iter()
            .filter(|n| !n.starts_with(&head_prefix))
            .cloned()
            .collect();
        if !missing_backbone.is_empty() {
            return Err(Error::Load(format!(
                "strict load: checkpoint is missing backbone keys [{}]",
                missing_backbone.join(", ")
            )));
        }
    }
    for (id, value) in updates {
        store.set(id, value)?;
    }
    Ok(report)
}

/// Reads a pretrained archive and loads it into `network`.
pub fn load_pretrained_backbone<T: Scalar>(
    path: &Path,
    network: &mut Network<T>,
    strict: bool,
) -> Result<LoadReport> {
    let set = read_param_set(path)?;
    load_params(network, &set, strict)
}

/// The unique classification-layer prefix in `set`.
pub fn find_head(set: &ParamSet) -> Result<&'static str> {
    let found: Vec<&'static str> = HEAD_PREFIXES
        .iter()
        .copied()
        .filter(|p| {
            let w = set
                .get(&format!("{p}.weight"))
                .map(|t| t.shape().len() == 2);
            let b = set.get(&format!("{p}.bias")).map(|t| t.shape().len() == 1);
            w == Some(true) && b == Some(true)
        })
        .collect();
    match found.as_slice() {
        [one] => Ok(one),
        [] => Err(Error::Load(format!(
            "no classification head found; expected one of [{}]",
            HEAD_PREFIXES
                .map(|p| format!("{p}.weight/{p}.bias"))
                .join(", ")
        ))),
        many => Err(Error::Load(format!(
            "ambiguous classification head: found [{}]",
            many.join(", ")
        ))),
    }
}

/// Replaces the classification layer with a fresh `num_classes`-way layer.
///
/// Zero bias; weights normal with `std = 1/sqrt(fan_in)`. Every other array
/// is left untouched. With `preserve_head` and a matching class count the set
/// is returned as is.
pub fn reshape_head(
    mut set: ParamSet,
    num_classes: usize,
    preserve_head: bool,
    seed: u64,
) -> Result<ParamSet> {
    let prefix = find_head(&set)?;
    let (wkey, bkey) = (format!("{prefix}.weight"), format!("{prefix}.bias"));
    let (rows, fan_in) = {
        let s = set[&wkey].shape();
        (s[0], s[1])
    };
    if preserve_head && rows == num_classes {
        return Ok(set);
    }
    let mut rng = stream(seed, Stream::HeadInit, &[num_classes as u64]);
    let weight = normal_tensor::<f32, _>(
        &[num_classes, fan_in],
        (1.0 / fan_in as f64).sqrt(),
        &mut rng,
    );
    set.insert(wkey, weight);
    set.insert(bkey, Tensor::zeros(&[num_classes]));
    Ok(set)
}

/// SHA-256 of an array's shape and little-endian values.
pub fn tensor_checksum(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn external_names_map_to_native_layout() {
        let cases = [
            ("layer0.conv1.weight", "stem.conv.weight"),
            ("module.layer0.bn1.running_var", "stem.bn.running_var"),
            ("layer1.0.conv2.weight", "stages.0.0.conv2.weight"),
            ("layer3.5.bn3.bias", "stages.2.5.bn3.bias"),
            ("layer4.2.se_module.fc1.weight", "stages.3.2.se.fc1.weight"),
            (
                "layer2.0.downsample.0.weight",
                "stages.1.0.downsample.conv.weight",
            ),
            (
                "layer2.0.downsample.1.running_mean",
                "stages.1.0.downsample.bn.running_mean",
            ),
            ("last_linear.weight", "head.weight"),
            ("fc.bias", "head.bias"),
            ("stages.0.0.conv1.weight", "stages.0.0.conv1.weight"),
            (
                "layer1.0.bn1.num_batches_tracked",
                "stages.0.0.bn1.num_batches_tracked",
            ),
        ];
        for (ext, native) in cases {
            assert_eq!(map_external_key(ext), native, "{ext}");
        }
    }

    #[test]
    fn unit_axes_are_squeezable() {
        assert!(squeeze_compatible(&[16, 256, 1, 1], &[16, 256]));
        assert!(!squeeze_compatible(&[16, 256, 1, 1], &[256, 16]));
        assert!(squeeze_compatible(&[7], &[7]));
    }

    #[test]
    fn head_detection() {
        let mut set = ParamSet::new();
        set.insert("x.weight".into(), Tensor::zeros(&[2, 2]));
        assert!(find_head(&set)
            .unwrap_err()
            .to_string()
            .contains("last_linear.weight"));
        set.insert("fc.weight".into(), Tensor::zeros(&[3, 2]));
        set.insert("fc.bias".into(), Tensor::zeros(&[3]));
        assert_eq!(find_head(&set).unwrap(), "fc");
        set.insert("classifier.weight".into(), Tensor::zeros(&[3, 2]));
        set.insert("classifier.bias".into(), Tensor::zeros(&[3]));
        assert!(find_head(&set)
            .unwrap_err()
            .to_string()
            .contains("ambiguous"));
    }
}

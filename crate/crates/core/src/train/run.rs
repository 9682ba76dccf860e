//! The fine-tuning loop: shuffled batches, accumulated gradients, two-rate SGD,
//! periodic validation with stop-on-best checkpointing, and resumable state.
//!
//! Files written under the output directory:
//!
//! ```text
//! class_weights.json              weights used for the loss
//! loss_trace.csv                  iteration,loss for every step
//! train_log.jsonl                 one line per validation
//! checkpoints/iter_NNNNNNNN.*     each improving checkpoint (+ .json sidecar, .meta.json)
//! best.safetensors, best.json, best.meta.json
//! last.safetensors, last.json, state.json, state.safetensors   resume point
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::accumulate::accumulate_gradients;
use super::data::ImageSet;
use super::evaluate::evaluate;
use super::sgd::{LrGroup, Sgd};
use crate::augment::{build_eval_pipeline, build_train_pipeline, JitterConfig, Normalization};
use crate::dataset::{
    compute_class_weights, compute_distribution, ClassWeights, DatasetManifest, WeightsRecord,
};
use crate::error::{Error, IoContext, Result};
use crate::nn::{
    load_checkpoint, read_param_set, save_checkpoint, write_param_set, Network, ParamSet,
};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where the loss weights come from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// `max_count / count_c` over the training manifest.
    #[default]
    InverseFrequency,
    Uniform,
    /// A weights file as written by the `weights` command.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub micro_batches: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_head: f64,
    pub lr_backbone: f64,
    /// Iterations between validations; `None` means one epoch, `⌈|train| / batch_size⌉`.
    pub validate_every: Option<u64>,
    pub class_weights: ClassWeighting,
    /// Filled from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
    pub max_iterations: u64,
    /// Consecutive validations without improvement before stopping.
    pub patience: usize,
    pub eval_batch_size: usize,
    /// Decode every image once up front instead of on each access.
    pub preload_images: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            micro_batches: 4,
            momentum: 0.9,
            weight_decay: 0.005,
            lr_head: 0.001,
            lr_backbone: 1e-6,
            validate_every: Some(3920),
            class_weights: ClassWeighting::InverseFrequency,
            seed: 0,
            max_iterations: 1_000_000,
            patience: 5,
            eval_batch_size: 64,
            preload_images: false,
        }
    }
}

impl TrainConfig {
    /// Settings for the tiny network on synthetic data.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            micro_batches: 2,
            lr_head: 0.05,
            lr_backbone: 0.05,
            validate_every: None,
            max_iterations: 500,
            eval_batch_size: 32,
            preload_images: true,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0
            || self.micro_batches == 0
            || !self.batch_size.is_multiple_of(self.micro_batches)
        {
            return Err(Error::Config(format!(
                "train.batch_size ({}) must be a positive multiple of train.micro_batches ({})",
                self.batch_size, self.micro_batches
            )));
        }
        for (field, v) in [
            ("train.lr_head", self.lr_head),
            ("train.lr_backbone", self.lr_backbone),
            ("train.weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{field} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum must lie in [0, 1)");
        }
        if self.validate_every == Some(0) {
            return bad("train.validate_every must be positive");
        }
        if self.max_iterations == 0 || self.patience == 0 || self.eval_batch_size == 0 {
            return bad(
                "train.max_iterations, train.patience and train.eval_batch_size must be positive",
            );
        }
        Ok(())
    }

    pub fn validation_interval(&self, train_len: usize) -> u64 {
        self.validate_every
            .unwrap_or_else(|| (train_len as u64).div_ceil(self.batch_size as u64).max(1))
    }
}

pub fn resolve_class_weights(
    weighting: &ClassWeighting,
    train: &DatasetManifest,
) -> Result<ClassWeights> {
    match weighting {
        ClassWeighting::InverseFrequency => compute_class_weights(&compute_distribution(train)),
        ClassWeighting::Uniform => Ok(ClassWeights::uniform()),
        ClassWeighting::File(path) => {
            let text = fs::read_to_string(path).at(path)?;
            let record: WeightsRecord = serde_json::from_str(&text).map_err(|e| {
                Error::format(
                    path.display().to_string(),
                    format!("invalid weights file: {e}"),
                )
            })?;
            ClassWeights::from_record(&record)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Training samples drawn so far; fixes the epoch permutation and augmentation streams.
    pub draws: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState<T> {
    pub iteration: u64,
    #[serde(skip)]
    pub momentum_buffers: BTreeMap<String, Vec<T>>,
    pub best_criterion: Option<f64>,
    pub best_iteration: u64,
    pub stale_validations: usize,
    pub rng_state: RngState,
    pub config_hash: String,
}

impl<T: Scalar> TrainState<T> {
    fn fresh(seed: u64, config_hash: &str) -> Self {
        TrainState {
            iteration: 0,
            momentum_buffers: BTreeMap::new(),
            best_criterion: None,
            best_iteration: 0,
            stale_validations: 0,
            rng_state: RngState { seed, draws: 0 },
            config_hash: config_hash.to_string(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let set: ParamSet = self
            .momentum_buffers
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    Tensor::from_vec(&[v.len()], v.iter().map(|x| x.as_f32()).collect()).unwrap(),
                )
            })
            .collect();
        write_param_set(&set, &dir.join(STATE_BUFFERS))?;
        write_json(&dir.join(STATE_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        let mut state: TrainState<T> = serde_json::from_str(&text).map_err(|e| {
            Error::format(
                path.display().to_string(),
                format!("invalid training state: {e}"),
            )
        })?;
        state.momentum_buffers = read_param_set(&dir.join(STATE_BUFFERS))?
            .into_iter()
            .map(|(k, t)| (k, t.cast::<T>().into_vec()))
            .collect();
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub expression_criterion: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: u64,
    /// Mean training loss since the previous validation.
    pub loss: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub criterion: f64,
    pub is_best: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: CheckpointMeta,
    pub best_checkpoint: PathBuf,
    pub final_iteration: u64,
    pub stop: StopReason,
    /// Loss of every iteration of the run, including resumed history.
    pub loss_trace: Vec<f64>,
    pub validations: Vec<ValidationRecord>,
}

pub struct TrainingRun<'a> {
    pub config: &'a TrainConfig,
    pub jitter: &'a JitterConfig,
    pub normalization: Normalization,
    pub out_dir: &'a Path,
    pub config_hash: String,
    pub resume: bool,
}

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const LOSS_TRACE: &str = "loss_trace.csv";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const WEIGHTS_FILE: &str = "class_weights.json";
const STATE_FILE: &str = "state.json";
const STATE_BUFFERS: &str = "state.safetensors";

pub fn meta_path(weights: &Path) -> PathBuf {
    weights.with_extension("meta.json")
}

pub fn read_meta(weights: &Path) -> Result<CheckpointMeta> {
    let path = meta_path(weights);
    let text = fs::read_to_string(&path).at(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(path.display().to_string(), format!("invalid metadata: {e}")))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(
        path,
        serde_json::to_string_pretty(value).expect("serializable"),
    )
    .at(path)
}

fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Epoch permutations of the training indices, regenerated on epoch change.
struct Shuffler {
    seed: u64,
    len: usize,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl Shuffler {
    fn index(&mut self, draw: u64) -> usize {
        let epoch = draw / self.len as u64;
        if self.epoch != Some(epoch) {
            let mut rng = stream(self.seed, Stream::Shuffle, &[epoch]);
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.order[(draw % self.len as u64) as usize]
    }
}

/// Loss trace and validation log rows up to `iteration`, from a previous run.
fn resumed_history(out_dir: &Path, iteration: u64) -> Result<(Vec<f64>, Vec<ValidationRecord>)> {
    let trace_path = out_dir.join(LOSS_TRACE);
    let mut trace = Vec::new();
    if trace_path.exists() {
        for line in fs::read_to_string(&trace_path)
            .at(&trace_path)?
            .lines()
            .skip(1)
        {
            let parsed = line
                .split_once(',')
                .and_then(|(i, l)| Some((i.parse::<u64>().ok()?, l.parse::<f64>().ok()?)));
            match parsed {
                Some((i, l)) if i <= iteration => trace.push(l),
                Some(_) => {}
                None => {
                    return Err(Error::format(
                        trace_path.display().to_string(),
                        format!("bad row {line:?}"),
                    ))
                }
            }
        }
    }
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = Vec::new();
    if log_path.exists() {
        for line in fs::read_to_string(&log_path).at(&log_path)?.lines() {
            let rec: ValidationRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(log_path.display().to_string(), e.to_string()))?;
            if rec.iteration <= iteration {
                log.push(rec);
            }
        }
    }
    Ok((trace, log))
}

fn write_history(out_dir: &Path, trace: &[f64], log: &[ValidationRecord]) -> Result<()> {
    let mut text = String::from("iteration,loss\n");
    for (i, l) in trace.iter().enumerate() {
        text.push_str(&format!("{},{l:?}\n", i + 1));
    }
    let path = out_dir.join(LOSS_TRACE);
    fs::write(&path, text).at(&path)?;
    let mut text = String::new();
    for rec in log {
        text.push_str(&serde_json::to_string(rec).expect("serializable"));
        text.push('\n');
    }
    let path = out_dir.join(TRAIN_LOG);
    fs::write(&path, text).at(&path)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .at(path)?;
    writeln!(f, "{line}").at(path)
}

/// Trains `network` in place and returns the best checkpoint's metadata.
pub fn run_training<T: Scalar>(
    run: &TrainingRun<'_>,
    train: &ImageSet<T>,
    val: &ImageSet<T>,
    network: &mut Network<T>,
) -> Result<TrainOutcome> {
    let config = run.config;
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training manifest has no samples".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation manifest has no samples".into()));
    }
    let class_weights = resolve_class_weights(&config.class_weights, train.manifest())?;
    let weights = class_weights.to_scalars::<T>();
    let spec = network.config().input;
    let train_pipe = build_train_pipeline(run.jitter, run.normalization, spec, config.seed)?;
    let eval_pipe = build_eval_pipeline(run.normalization, spec)?;
    let interval = config.validation_interval(train.len());
    let out = run.out_dir;
    let state_exists = out.join(STATE_FILE).exists();

    let mut state = if run.resume && state_exists {
        let state = TrainState::<T>::load(out)?;
        if state.config_hash != run.config_hash {
            return Err(Error::Config(format!(
                "cannot resume: {} was written by config {} but this run is {}",
                out.join(STATE_FILE).display(),
                state.config_hash,
                run.config_hash
            )));
        }
        let restored = load_checkpoint::<T>(&out.join(LAST_CHECKPOINT))?;
        if restored.config() != network.config() {
            return Err(Error::Load(
                "resume checkpoint architecture differs from the configured network".into(),
            ));
        }
        *network = restored;
        state
    } else {
        TrainState::fresh(config.seed, &run.config_hash)
    };

    fs::create_dir_all(out.join("checkpoints")).at(out)?;
    write_json(&out.join(WEIGHTS_FILE), &class_weights.to_record())?;
    let (mut trace, mut validations) = if run.resume && state_exists {
        resumed_history(out, state.iteration)?
    } else {
        (Vec::new(), Vec::new())
    };
    write_history(out, &trace, &validations)?;

    let groups = network.parameter_groups();
    let mut sgd = Sgd::new(T::of(config.momentum), T::of(config.weight_decay));
    sgd.set_buffers(std::mem::take(&mut state.momentum_buffers));
    let mut shuffler = Shuffler {
        seed: config.seed,
        len: train.len(),
        epoch: None,
        order: Vec::new(),
    };
    let batch = config.batch_size as u64;
    let mut window = (0.0f64, 0u64);
    let mut stop = StopReason::MaxIterations;

    while state.iteration < config.max_iterations {
        let draw_base = state.rng_state.draws;
        let indices: Vec<usize> = (0..batch).map(|j| shuffler.index(draw_base + j)).collect();
        let (x, y) = train.batch(&indices, &train_pipe, draw_base)?;
        let step = accumulate_gradients(network, &x, &y, &weights, config.micro_batches)?;
        let loss = step.loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at iteration {}",
                state.iteration + 1
            )));
        }
        let lr_groups = [
            LrGroup {
                params: &groups.head,
                lr: T::of(config.lr_head),
            },
            LrGroup {
                params: &groups.backbone,
                lr: T::of(config.lr_backbone),
            },
        ];
        sgd.step(network.store_mut(), &step.grads, &lr_groups)?;
        network.commit(&step.running_updates);
        state.iteration += 1;
        state.rng_state.draws += batch;
        trace.push(loss);
        append_line(
            &out.join(LOSS_TRACE),
            &format!("{},{loss:?}", state.iteration),
        )?;
        window = (window.0 + loss, window.1 + 1);

        let last = state.iteration == config.max_iterations;
        if state.iteration % interval != 0 && !last {
            continue;
        }
        let eval = evaluate(network, val, &eval_pipe, config.eval_batch_size)?;
        let criterion = eval.report.expression_criterion;
        let is_best = state.best_criterion.is_none_or(|b| criterion > b);
        if is_best {
            state.best_criterion = Some(criterion);
            state.best_iteration = state.iteration;
            state.stale_validations = 0;
            let meta = CheckpointMeta {
                iteration: state.iteration,
                expression_criterion: criterion,
                macro_f1: eval.report.macro_f1,
                accuracy: eval.report.total_accuracy,
                config_hash: run.config_hash.clone(),
                timestamp: unix_time(),
            };
            let tagged = out
                .join("checkpoints")
                .join(format!("iter_{:08}.safetensors", state.iteration));
            for path in [tagged, out.join(BEST_CHECKPOINT)] {
                save_checkpoint(network, &path, "training")?;
                write_json(&meta_path(&path), &meta)?;
            }
        } else {
            state.stale_validations += 1;
        }
        let record = ValidationRecord {
            iteration: state.iteration,
            loss: window.0 / window.1.max(1) as f64,
            macro_f1: eval.report.macro_f1,
            accuracy: eval.report.total_accuracy,
            criterion,
            is_best,
        };
        window = (0.0, 0);
        append_line(
            &out.join(TRAIN_LOG),
            &serde_json::to_string(&record).expect("serializable"),
        )?;
        log::info!(
            "iteration {}: loss {:.4}, criterion {:.4}{}",
            record.iteration,
            record.loss,
            criterion,
            if is_best { " (best)" } else { "" }
        );
        validations.push(record);

        save_checkpoint(network, &out.join(LAST_CHECKPOINT), "training")?;
        state.momentum_buffers = sgd.buffers().clone();
        state.save(out)?;
        state.momentum_buffers.clear();
        if state.stale_validations >= config.patience {
            stop = StopReason::Patience;
            break;
        }
    }

    let best_checkpoint = out.join(BEST_CHECKPOINT);
    let best = read_meta(&best_checkpoint)?;
    Ok(TrainOutcome {
        best,
        best_checkpoint,
        final_iteration: state.iteration,
        stop,
        loss_trace: trace,
        validations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.micro_batches), (256, 4));
        assert_eq!(c.batch_size / c.micro_batches, 64);
        assert_eq!(
            (c.momentum, c.weight_decay, c.lr_head, c.lr_backbone),
            (0.9, 0.005, 0.001, 1e-6)
        );
        assert_eq!(c.validate_every, Some(3920));
        assert_eq!(c.patience, 5);
        c.validate().unwrap();
    }

    #[test]
    fn validation_names_fields() {
        let c = TrainConfig {
            batch_size: 10,
            micro_batches: 4,
            ..TrainConfig::default()
        };
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("train.micro_batches"));
        let c = TrainConfig {
            lr_head: 0.0,
            ..TrainConfig::default()
        };
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("train.lr_head"));
    }

    #[test]
    fn epoch_interval_rounds_up() {
        let c = TrainConfig {
            validate_every: None,
            batch_size: 16,
            ..TrainConfig::default()
        };
        assert_eq!(c.validation_interval(280), 18);
        assert_eq!(c.validation_interval(5), 1);
    }

    #[test]
    fn shuffler_visits_every_index_once_per_epoch() {
        let mut s = Shuffler {
            seed: 9,
            len: 10,
            epoch: None,
            order: Vec::new(),
        };
        let mut first: Vec<usize> = (0..10).map(|d| s.index(d)).collect();
        let second: Vec<usize> = (10..20).map(|d| s.index(d)).collect();
        assert_ne!(first, second);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }
}

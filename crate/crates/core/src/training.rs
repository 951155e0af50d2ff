//! Two-stage optimisation: the gradient network alone, then both networks
//! end to end, over whole images resized to one size per batch.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{CrrnError, Result};
use crate::gin::{Gin, GinConfig};
use crate::iin::{Iin, IinConfig};
use crate::image_model::{gradient_magnitude, resize, Resolution};
use crate::io_util::write_atomic;
use crate::metrics::{l1_var, loss_si_var, loss_ssim_var, total_loss_var, LossInputs, LossWeights, SsimConfig};
use crate::model::{Ablation, Crrn};
use crate::nn::{Init, ParamSet};
use crate::synthesis::{entry_seed, MixtureTriplet};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const DETERMINISM_ENV: &str = "CRRN_DETERMINISTIC";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Gradient network alone.
    Stage1,
    /// Both networks, end to end.
    Joint,
}

impl Stage {
    pub fn tag(&self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Joint => "joint",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Stage {
    type Err = CrrnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "stage1" => Ok(Stage::Stage1),
            "joint" => Ok(Stage::Joint),
            _ => Err(CrrnError::Argument(format!("unknown stage {s:?} (1, joint)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub joint_epochs_a: usize,
    pub lr_a: f64,
    pub joint_epochs_b: usize,
    pub lr_b: f64,
    pub batch_size: usize,
    pub sizes: Vec<Resolution>,
    pub seed: u64,
    pub loss: LossWeights,
    pub ssim: SsimConfig,
    pub optimizer: AdamConfig,
    pub gin: GinConfig,
    pub iin: IinConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 40,
            stage1_lr: 1e-4,
            joint_epochs_a: 30,
            lr_a: 1e-4,
            joint_epochs_b: 20,
            lr_b: 1e-5,
            batch_size: 4,
            sizes: vec![Resolution { height: 96, width: 160 }, Resolution { height: 224, width: 288 }],
            seed: 0,
            loss: LossWeights::default(),
            ssim: SsimConfig::default(),
            optimizer: AdamConfig::default(),
            gin: GinConfig::default(),
            iin: IinConfig::default(),
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("stage1_epochs", self.stage1_epochs),
            ("joint_epochs_a", self.joint_epochs_a),
            ("joint_epochs_b", self.joint_epochs_b),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CrrnError::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, lr) in [("stage1_lr", self.stage1_lr), ("lr_a", self.lr_a), ("lr_b", self.lr_b)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(CrrnError::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if self.sizes.is_empty() {
            return Err(CrrnError::Config("at least one training size is required".into()));
        }
        for s in &self.sizes {
            s.require_network_compatible()
                .map_err(|e| CrrnError::Config(format!("training size {s}: {e}")))?;
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(CrrnError::Config("adam needs beta1, beta2 in [0,1) and epsilon > 0".into()));
        }
        self.loss.validate()?;
        self.ssim.validate()?;
        self.gin.validate()?;
        self.iin.validate()?;
        Ok(())
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Stage1 => self.stage1_epochs,
            Stage::Joint => self.joint_epochs_a + self.joint_epochs_b,
        }
    }

    /// Learning rate for 1-based `epoch` of `stage`.
    pub fn learning_rate(&self, stage: Stage, epoch: usize) -> Result<f64> {
        if epoch == 0 || epoch > self.epochs(stage) {
            return Err(CrrnError::Argument(format!(
                "epoch {epoch} outside 1..={} of {stage}",
                self.epochs(stage)
            )));
        }
        Ok(match stage {
            Stage::Stage1 => self.stage1_lr,
            Stage::Joint if epoch <= self.joint_epochs_a => self.lr_a,
            Stage::Joint => self.lr_b,
        })
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }
}

/// First and second moment estimates for every parameter of one set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |i| Tensor::zeros(params.tensor(i).shape());
        Self {
            step: 0,
            m: (0..params.len()).map(zeros).collect(),
            v: (0..params.len()).map(zeros).collect(),
        }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Option<Tensor<f32>>], lr: f64, cfg: &AdamConfig) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = cfg.epsilon as f32;
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let p = params.tensor_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Which images go into one batch and the size they are resized to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub size: Resolution,
}

/// Shuffled pass over `n` items, one uniformly drawn size per batch.
pub fn plan_epoch<R: Rng + ?Sized>(n: usize, batch_size: usize, sizes: &[Resolution], rng: &mut R) -> Vec<BatchPlan> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| BatchPlan {
            indices: chunk.to_vec(),
            size: *sizes.choose(rng).expect("at least one size"),
        })
        .collect()
}

/// Whole images resized to the plan's size, stacked `N x C x H x W`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub plan: BatchPlan,
    pub mixture: Tensor<f32>,
    pub gin_input: Tensor<f32>,
    pub background: Tensor<f32>,
    pub reflection: Tensor<f32>,
    pub gradient: Tensor<f32>,
}

struct Resized {
    mixture: Vec<f32>,
    mixture_gradient: Vec<f32>,
    background: Vec<f32>,
    reflection: Vec<f32>,
    gradient: Vec<f32>,
}

fn resize_triplet(t: &MixtureTriplet, size: Resolution) -> Result<Resized> {
    for (what, img) in [("mixture", &t.mixture), ("background", &t.background), ("reflection", &t.reflection)] {
        if img.channels() != 3 {
            return Err(CrrnError::Dimension(format!("{} {what} must be RGB", t.id)));
        }
    }
    let mixture = resize(&t.mixture, size);
    let background = resize(&t.background, size);
    let reflection = resize(&t.reflection, size);
    Ok(Resized {
        mixture_gradient: gradient_magnitude(&mixture).data().to_vec(),
        gradient: gradient_magnitude(&background).data().to_vec(),
        mixture: mixture.data().to_vec(),
        background: background.data().to_vec(),
        reflection: reflection.data().to_vec(),
    })
}

pub fn assemble_batch(dataset: &[MixtureTriplet], plan: &BatchPlan, parallel: bool) -> Result<Batch> {
    let resized: Vec<Resized> = if parallel {
        plan.indices.par_iter().map(|&i| resize_triplet(&dataset[i], plan.size)).collect::<Result<_>>()?
    } else {
        plan.indices.iter().map(|&i| resize_triplet(&dataset[i], plan.size)).collect::<Result<_>>()?
    };
    let n = resized.len();
    let (h, w) = (plan.size.height, plan.size.width);
    let stack = |f: &dyn Fn(&Resized) -> Vec<&[f32]>, c: usize| {
        let mut data = Vec::with_capacity(n * c * h * w);
        for r in &resized {
            for part in f(r) {
                data.extend_from_slice(part);
            }
        }
        Tensor::from_vec([n, c, h, w], data)
    };
    Ok(Batch {
        mixture: stack(&|r| vec![&r.mixture], 3),
        gin_input: stack(&|r| vec![&r.mixture, &r.mixture_gradient], 4),
        background: stack(&|r| vec![&r.background], 3),
        reflection: stack(&|r| vec![&r.reflection], 3),
        gradient: stack(&|r| vec![&r.gradient], 1),
        plan: plan.clone(),
    })
}

/// Endless stream of batches, epoch after epoch.
pub fn multi_size_batcher<'a>(
    dataset: &'a [MixtureTriplet],
    cfg: &'a TrainConfig,
    mut rng: ChaCha8Rng,
) -> impl Iterator<Item = Result<Batch>> + 'a {
    let mut pending = std::collections::VecDeque::new();
    std::iter::from_fn(move || {
        if dataset.is_empty() {
            return None;
        }
        if pending.is_empty() {
            pending.extend(plan_epoch(dataset.len(), cfg.batch_size, &cfg.sizes, &mut rng));
        }
        let plan = pending.pop_front()?;
        Some(assemble_batch(dataset, &plan, true))
    })
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let salt = match stage {
        Stage::Stage1 => 0x5354_4147_4531,
        Stage::Joint => 0x4a4f_494e_5400,
    };
    ChaCha8Rng::seed_from_u64(entry_seed(seed ^ salt, epoch))
}

/// One optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub size: String,
    pub lr: f64,
    pub total: f64,
    pub ssim_b: Option<f64>,
    pub l1_b: Option<f64>,
    pub ssim_r: Option<f64>,
    pub si_grad: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Append, rejecting records that do not advance (stage, epoch, step).
    pub fn push(&mut self, r: TrainRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if (r.stage, r.epoch, r.step) <= (last.stage, last.epoch, last.step) {
                return Err(CrrnError::Argument(format!(
                    "log record ({}, {}, {}) does not follow ({}, {}, {})",
                    r.stage, r.epoch, r.step, last.stage, last.epoch, last.step
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn extend(&mut self, other: TrainLog) -> Result<()> {
        other.records.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| CrrnError::Format(e.to_string()))?;
        }
        if self.records.is_empty() {
            w.write_record(LOG_HEADER).map_err(|e| CrrnError::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CrrnError::Format(e.to_string()))?;
        write_atomic(path, &bytes)
    }

    /// Append records to a CSV file, writing the header if the file is new.
    pub fn append_csv(path: &Path, records: &[TrainRecord]) -> Result<()> {
        use std::io::Write;
        let exists = path.is_file() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(Vec::new());
        for r in records {
            w.serialize(r).map_err(|e| CrrnError::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CrrnError::Format(e.to_string()))?;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CrrnError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| CrrnError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CrrnError::io(path, io),
            other => CrrnError::Format(format!("{other:?}")),
        })?;
        let mut log = TrainLog::default();
        for r in rdr.deserialize() {
            let r: TrainRecord = r.map_err(|e| CrrnError::Format(format!("{}: {e}", path.display())))?;
            log.push(r).map_err(|e| CrrnError::Format(format!("{}: {e}", path.display())))?;
        }
        Ok(log)
    }
}

const LOG_HEADER: [&str; 10] = ["stage", "epoch", "step", "size", "lr", "total", "ssim_b", "l1_b", "ssim_r", "si_grad"];

/// Full training state; also what gets written to disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub stage: Stage,
    /// Completed epochs of `stage`.
    pub epoch: usize,
    pub gin: Gin,
    pub iin: Option<Iin>,
    pub gin_optimizer: AdamState,
    pub iin_optimizer: Option<AdamState>,
}

/// Sidecar metadata stored next to the parameter blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub stage: Stage,
    pub epoch: usize,
    pub parameter_groups: BTreeMap<String, usize>,
    pub optimizer: OptimizerMeta,
    pub config: TrainConfig,
    pub blob: String,
    pub blob_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub name: String,
    pub steps: BTreeMap<String, u64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    /// Untrained state at the start of stage 1.
    pub fn fresh(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let gin = Gin::new(config.gin, config.seed)?;
        Ok(Self {
            gin_optimizer: AdamState::new(gin.params()),
            gin,
            iin: None,
            iin_optimizer: None,
            stage: Stage::Stage1,
            epoch: 0,
            config,
        })
    }

    /// Untrained state with both networks, as if stage 1 were skipped.
    pub fn untrained(config: TrainConfig) -> Result<Self> {
        let mut c = Self::fresh(config)?;
        c.begin_joint()?;
        Ok(c)
    }

    fn begin_joint(&mut self) -> Result<()> {
        let iin = Iin::new(self.config.iin, self.config.gin.pyramid_channels(), self.config.seed.wrapping_add(1))?;
        self.iin_optimizer = Some(AdamState::new(iin.params()));
        self.iin = Some(iin);
        self.gin_optimizer = AdamState::new(self.gin.params());
        self.stage = Stage::Joint;
        self.epoch = 0;
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.stage == Stage::Joint && self.epoch == self.config.epochs(Stage::Joint)
    }

    /// Both networks, for inference.
    pub fn model(&self) -> Result<Crrn> {
        let iin = self.iin.clone().ok_or_else(|| {
            CrrnError::Config("checkpoint holds only the gradient network; run the joint stage first".into())
        })?;
        Ok(Crrn {
            gin: self.gin.clone(),
            iin,
            trained_as: self.config.ablation,
        })
    }

    fn groups(&self) -> Vec<(&'static str, &ParamSet, &AdamState)> {
        let mut g = vec![("gin", self.gin.params(), &self.gin_optimizer)];
        if let (Some(iin), Some(opt)) = (&self.iin, &self.iin_optimizer) {
            g.push(("iin", iin.params(), opt));
        }
        g
    }

    pub fn meta(&self, blob: String, blob_sha256: String) -> CheckpointMeta {
        let groups = self.groups();
        CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            stage: self.stage,
            epoch: self.epoch,
            parameter_groups: groups.iter().map(|(n, p, _)| (n.to_string(), p.count())).collect(),
            optimizer: OptimizerMeta {
                name: "adam".into(),
                steps: groups.iter().map(|(n, _, o)| (n.to_string(), o.step)).collect(),
            },
            config: self.config.clone(),
            blob,
            blob_sha256,
        }
    }

    /// Write the parameter blob to `path` and metadata to `path.json`, each
    /// via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut owned: Vec<(String, Vec<u8>, Vec<usize>)> = Vec::new();
        for (group, params, opt) in self.groups() {
            for (i, (name, t)) in params.iter().enumerate() {
                owned.push((format!("param/{name}"), tensor_bytes(t), t.shape().to_vec()));
                owned.push((format!("adam/{group}/m/{name}"), tensor_bytes(&opt.m[i]), t.shape().to_vec()));
                owned.push((format!("adam/{group}/v/{name}"), tensor_bytes(&opt.v[i]), t.shape().to_vec()));
            }
        }
        let views = owned
            .iter()
            .map(|(name, bytes, shape)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| CrrnError::Format(format!("{name}: {e:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let blob = safetensors::serialize(views, &None).map_err(|e| CrrnError::Format(format!("{e:?}")))?;
        let digest = hex::encode(Sha256::digest(&blob));
        write_atomic(path, &blob)?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut json = serde_json::to_string_pretty(&self.meta(name, digest)).expect("metadata serialises");
        json.push('\n');
        write_atomic(&sidecar_path(path), json.as_bytes())
    }

    pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| CrrnError::io(&side, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CrrnError::Integrity(format!("{}: {e}", side.display())))?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CrrnError::Integrity(format!("{}: missing schema_version", side.display())))?;
        if version != CHECKPOINT_SCHEMA_VERSION as u64 {
            return Err(CrrnError::Version {
                found: version as u32,
                supported: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| CrrnError::Integrity(format!("{}: {e}", side.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = Self::read_meta(path)?;
        let blob = fs::read(path).map_err(|e| CrrnError::io(path, e))?;
        let digest = hex::encode(Sha256::digest(&blob));
        if digest != meta.blob_sha256 {
            return Err(CrrnError::Integrity(format!(
                "{} does not match its recorded checksum (truncated or modified)",
                path.display()
            )));
        }
        let st = SafeTensors::deserialize(&blob)
            .map_err(|e| CrrnError::Integrity(format!("{}: {e:?}", path.display())))?;
        let mut tensors: HashMap<String, Tensor<f32>> = HashMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 || view.shape().len() != 4 {
                return Err(CrrnError::Integrity(format!("{name}: expected a rank-4 f32 tensor")));
            }
            let shape = [view.shape()[0], view.shape()[1], view.shape()[2], view.shape()[3]];
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(name, Tensor::from_vec(shape, data));
        }

        let cfg = meta.config.clone();
        cfg.validate()?;
        let mut take_group = |group: &str, params: &mut ParamSet| -> Result<AdamState> {
            let mut values = HashMap::new();
            let mut opt = AdamState::new(params);
            for (i, name) in params.names().to_vec().iter().enumerate() {
                let mut take = |key: String| {
                    tensors
                        .remove(&key)
                        .ok_or_else(|| CrrnError::Integrity(format!("checkpoint is missing {key}")))
                };
                values.insert(name.clone(), take(format!("param/{name}"))?);
                opt.m[i] = take(format!("adam/{group}/m/{name}"))?;
                opt.v[i] = take(format!("adam/{group}/v/{name}"))?;
                if opt.m[i].shape() != params.tensor(i).shape() || opt.v[i].shape() != params.tensor(i).shape() {
                    return Err(CrrnError::Integrity(format!("optimiser state shape mismatch for {name}")));
                }
            }
            params.assign(values)?;
            opt.step = meta.optimizer.steps.get(group).copied().unwrap_or(0);
            Ok(opt)
        };

        let mut gin = Gin::build(cfg.gin, &mut Init::Zeros)?;
        let gin_optimizer = take_group("gin", gin.params_mut())?;
        let (iin, iin_optimizer) = if meta.parameter_groups.contains_key("iin") {
            let mut iin = Iin::build(cfg.iin, cfg.gin.pyramid_channels(), &mut Init::Zeros)?;
            let opt = take_group("iin", iin.params_mut())?;
            (Some(iin), Some(opt))
        } else {
            (None, None)
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(CrrnError::Integrity(format!("unexpected tensor {extra} in checkpoint")));
        }
        Ok(Self {
            config: cfg,
            stage: meta.stage,
            epoch: meta.epoch,
            gin,
            iin,
            gin_optimizer,
            iin_optimizer,
        })
    }
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Latest checkpoint, rewritten at every epoch end.
    pub checkpoint: Option<PathBuf>,
    /// TrainLog CSV, appended at every epoch end.
    pub log: Option<PathBuf>,
    /// Serial data loading.
    pub deterministic: bool,
}

impl TrainOptions {
    pub fn determinism_from_env() -> bool {
        std::env::var(DETERMINISM_ENV).is_ok_and(|v| v == "1")
    }
}

fn collect_grads(grads: &mut crate::autograd::Gradients<f32>, vars: &[Var]) -> Vec<Option<Tensor<f32>>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn check_finite(value: f64, stage: Stage, epoch: usize, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CrrnError::Numeric(format!("non-finite loss at {stage} epoch {epoch} step {step}")))
    }
}

/// Gradient-network step on `loss_si(grad B, grad B*)`.
fn stage1_step(state: &mut Checkpoint, batch: &Batch, lr: f64) -> Result<f64> {
    let g = Graph::new();
    let vars = state.gin.params().bind(&g, true);
    let input = g.constant(batch.gin_input.clone());
    let target = g.constant(batch.gradient.clone());
    let out = state.gin.forward_vars(&g, &vars, input)?;
    let loss = loss_si_var(&g, target, out.gradient, &state.config.ssim);
    let value = g.value(loss).item() as f64;
    let mut grads = g.backward(loss);
    let grads = collect_grads(&mut grads, &vars);
    drop(vars);
    drop(g);
    state
        .gin_optimizer
        .update(state.gin.params_mut(), &grads, lr, &state.config.optimizer);
    Ok(value)
}

struct JointValues {
    total: f64,
    ssim_b: Option<f64>,
    l1_b: Option<f64>,
    ssim_r: Option<f64>,
    si_grad: Option<f64>,
}

fn joint_step(state: &mut Checkpoint, batch: &Batch, lr: f64) -> Result<JointValues> {
    let cfg = state.config.clone();
    let iin = state.iin.as_ref().expect("joint stage has an image network");
    let g = Graph::new();
    let guided = cfg.ablation.uses_guidance();
    let gin_vars = if guided { state.gin.params().bind(&g, true) } else { Vec::new() };
    let iin_vars = iin.params().bind(&g, true);
    let mixture = g.constant(batch.mixture.clone());
    let background = g.constant(batch.background.clone());
    let reflection = g.constant(batch.reflection.clone());

    let (pyramid, gradient_pred) = if guided {
        let input = g.constant(batch.gin_input.clone());
        let out = state.gin.forward_vars(&g, &gin_vars, input)?;
        (out.pyramid, Some(out.gradient))
    } else {
        let [n, _, h, w] = batch.mixture.shape();
        let zeros = iin.zero_guidance(n, h, w).into_iter().map(|t| g.constant(t)).collect();
        (zeros, None)
    };
    let out = iin.forward_vars(&g, &iin_vars, mixture, &pyramid)?;
    let v = |var: Var| g.value(var).item() as f64;

    let (loss, values) = match cfg.ablation {
        Ablation::Full => {
            let terms = total_loss_var(
                &g,
                &LossInputs {
                    background,
                    background_pred: out.background,
                    reflection,
                    reflection_pred: out.reflection,
                    gradient: g.constant(batch.gradient.clone()),
                    gradient_pred: gradient_pred.expect("guided"),
                },
                &cfg.loss,
                &cfg.ssim,
            );
            let values = JointValues {
                total: v(terms.total),
                ssim_b: Some(v(terms.ssim_b)),
                l1_b: Some(v(terms.l1_b)),
                ssim_r: Some(v(terms.ssim_r)),
                si_grad: Some(v(terms.si_grad)),
            };
            (terms.total, values)
        }
        Ablation::IinOnly => {
            let ssim_b = loss_ssim_var(&g, background, out.background, &cfg.ssim);
            let l1_b = l1_var(&g, background, out.background);
            let ssim_r = loss_ssim_var(&g, reflection, out.reflection, &cfg.ssim);
            let weighted = g.mul_scalar(ssim_b, cfg.loss.gamma as f32);
            let total = g.add(g.add(weighted, l1_b), ssim_r);
            let values = JointValues {
                total: v(total),
                ssim_b: Some(v(ssim_b)),
                l1_b: Some(v(l1_b)),
                ssim_r: Some(v(ssim_r)),
                si_grad: None,
            };
            (total, values)
        }
        Ablation::L1Only => {
            let l1_b = l1_var(&g, background, out.background);
            let values = JointValues {
                total: v(l1_b),
                ssim_b: None,
                l1_b: Some(v(l1_b)),
                ssim_r: None,
                si_grad: None,
            };
            (l1_b, values)
        }
    };
    let mut grads = g.backward(loss);
    let gin_grads = collect_grads(&mut grads, &gin_vars);
    let iin_grads = collect_grads(&mut grads, &iin_vars);
    drop(grads);
    drop(g);
    if guided {
        state
            .gin_optimizer
            .update(state.gin.params_mut(), &gin_grads, lr, &cfg.optimizer);
    }
    let iin = state.iin.as_mut().expect("joint stage has an image network");
    state
        .iin_optimizer
        .as_mut()
        .expect("joint stage has an optimiser")
        .update(iin.params_mut(), &iin_grads, lr, &cfg.optimizer);
    Ok(values)
}

fn run_stage(state: &mut Checkpoint, stage: Stage, dataset: &[MixtureTriplet], opts: &TrainOptions) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(CrrnError::Config("training dataset is empty".into()));
    }
    let cfg = state.config.clone();
    let steps = cfg.steps_per_epoch(dataset.len());
    let mut log = TrainLog::default();
    for epoch in state.epoch + 1..=cfg.epochs(stage) {
        let lr = cfg.learning_rate(stage, epoch)?;
        let mut rng = epoch_rng(cfg.seed, stage, epoch);
        let plans = plan_epoch(dataset.len(), cfg.batch_size, &cfg.sizes, &mut rng);
        let mut epoch_log = TrainLog::default();
        for (i, plan) in plans.iter().enumerate() {
            let step = (epoch - 1) * steps + i + 1;
            let batch = assemble_batch(dataset, plan, !opts.deterministic)?;
            let record = match stage {
                Stage::Stage1 => {
                    let loss = check_finite(stage1_step(state, &batch, lr)?, stage, epoch, step)?;
                    TrainRecord {
                        stage,
                        epoch,
                        step,
                        size: plan.size.to_string(),
                        lr,
                        total: loss,
                        ssim_b: None,
                        l1_b: None,
                        ssim_r: None,
                        si_grad: Some(loss),
                    }
                }
                Stage::Joint => {
                    let v = joint_step(state, &batch, lr)?;
                    TrainRecord {
                        stage,
                        epoch,
                        step,
                        size: plan.size.to_string(),
                        lr,
                        total: check_finite(v.total, stage, epoch, step)?,
                        ssim_b: v.ssim_b,
                        l1_b: v.l1_b,
                        ssim_r: v.ssim_r,
                        si_grad: v.si_grad,
                    }
                }
            };
            log::debug!("{stage} epoch {epoch} step {step} loss {:.5}", record.total);
            epoch_log.push(record)?;
        }
        state.epoch = epoch;
        if let Some(path) = &opts.log {
            TrainLog::append_csv(path, &epoch_log.records)?;
        }
        if let Some(path) = &opts.checkpoint {
            state.save(path)?;
        }
        let mean = epoch_log.totals().iter().sum::<f64>() / epoch_log.len() as f64;
        log::info!("{stage} epoch {epoch}/{} lr {lr:e} mean loss {mean:.5}", cfg.epochs(stage));
        log.extend(epoch_log)?;
    }
    Ok(log)
}

/// Train the gradient network for the remaining stage-1 epochs. The image
/// network, if present, is not touched.
pub fn train_stage1(state: &mut Checkpoint, dataset: &[MixtureTriplet], opts: &TrainOptions) -> Result<TrainLog> {
    if state.stage != Stage::Stage1 {
        return Err(CrrnError::Config("checkpoint is already past stage 1".into()));
    }
    run_stage(state, Stage::Stage1, dataset, opts)
}

/// Train both networks for the remaining joint epochs, creating the image
/// network if the state comes from stage 1.
pub fn train_joint(state: &mut Checkpoint, dataset: &[MixtureTriplet], opts: &TrainOptions) -> Result<TrainLog> {
    if state.stage == Stage::Stage1 {
        if state.epoch < state.config.stage1_epochs {
            log::warn!(
                "starting the joint stage after {} of {} stage-1 epochs",
                state.epoch,
                state.config.stage1_epochs
            );
        }
        state.begin_joint()?;
    }
    run_stage(state, Stage::Joint, dataset, opts)
}

/// Both stages, resuming wherever `state` left off.
pub fn train_all(state: &mut Checkpoint, dataset: &[MixtureTriplet], opts: &TrainOptions) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if state.stage == Stage::Stage1 {
        log.extend(train_stage1(state, dataset, opts)?)?;
    }
    log.extend(train_joint(state, dataset, opts)?)?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.stage1_epochs, cfg.joint_epochs_a, cfg.joint_epochs_b), (40, 30, 20));
        for e in 1..=40 {
            assert_eq!(cfg.learning_rate(Stage::Stage1, e).unwrap(), 1e-4);
        }
        assert_eq!(cfg.learning_rate(Stage::Joint, 30).unwrap(), 1e-4);
        assert_eq!(cfg.learning_rate(Stage::Joint, 31).unwrap(), 1e-5);
        assert_eq!(cfg.learning_rate(Stage::Joint, 50).unwrap(), 1e-5);
        assert!(cfg.learning_rate(Stage::Joint, 51).is_err());
        assert!(cfg.learning_rate(Stage::Stage1, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(CrrnError::Config(_))));
        let bad = TrainConfig { lr_b: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            sizes: vec![Resolution { height: 100, width: 160 }],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        ps.push("p".into(), Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]));
        let mut opt = AdamState::new(&ps);
        let grad = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -2.0, 0.0]);
        opt.update(&mut ps, &[Some(grad)], 0.1, &AdamConfig::default());
        let p = ps.tensor(0).data();
        // First bias-corrected step is lr * sign(g) (up to epsilon).
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 2.1).abs() < 1e-6);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn epoch_plan_covers_every_index_once() {
        let sizes = [Resolution { height: 32, width: 32 }, Resolution { height: 64, width: 32 }];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plans = plan_epoch(10, 4, &sizes, &mut rng);
        assert_eq!(plans.iter().map(|p| p.indices.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = plans.iter().flat_map(|p| p.indices.clone()).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn log_rejects_out_of_order_records() {
        let rec = |epoch, step| TrainRecord {
            stage: Stage::Stage1,
            epoch,
            step,
            size: "32x32".into(),
            lr: 1e-4,
            total: 1.0,
            ssim_b: None,
            l1_b: None,
            ssim_r: None,
            si_grad: Some(1.0),
        };
        let mut log = TrainLog::default();
        log.push(rec(1, 1)).unwrap();
        log.push(rec(1, 2)).unwrap();
        assert!(log.push(rec(1, 2)).is_err());
        assert!(log.push(rec(1, 1)).is_err());
    }
}

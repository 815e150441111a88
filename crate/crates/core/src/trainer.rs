//! The pretraining loop: epoch-shuffled batch assembly, SGD with momentum
//! and schedules, EMA target updates, JSONL run logs, and checkpoints that
//! resume bitwise.
//!
//! Every random draw is keyed by (seed, purpose, index), never by loop
//! history, so step t of a resumed run consumes exactly the bytes step t of
//! an uninterrupted run would.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{make_views, AugmentError, AugmentParams, SamplingScheme, ViewProvenance, ViewSet};
use crate::datagen::{CorpusManifest, DatagenError};
use crate::hash::{config_fingerprint, derive_seed};
use crate::model::{
    bind_params, multiview_loss, ModelConfig, ModelError, ModelState, Params,
};
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid train config: {detail}")]
    BadConfig { detail: String },
    #[error("corpus has {have} clips, need {need}")]
    InsufficientClips { have: usize, need: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("checkpoint {path}: {detail}")]
    BadCheckpoint { path: PathBuf, detail: String },
    #[error("run log: {detail}")]
    BadLog { detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

const SEED_INIT: u64 = 1;
const SEED_EPOCH: u64 = 2;
const SEED_AUG: u64 = 3;

fn io_err(path: &Path, source: std::io::Error) -> TrainerError {
    TrainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSchedule {
    Constant,
    /// tau(t) = 1 - (1 - base) * (cos(pi t) + 1) / 2, rising to 1.
    CosineToOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub cosine: bool,
    pub warmup_steps: usize,
    pub tau_ema: f64,
    pub tau_schedule: TauSchedule,
    pub seed: u64,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 150,
            base_lr: 0.05,
            weight_decay: 1e-6,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            cosine: true,
            warmup_steps: 10,
            tau_ema: 0.99,
            tau_schedule: TauSchedule::Constant,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(TrainerError::BadConfig { detail });
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2 leaves no negatives", self.batch_size));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0,1)", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("negative weight_decay {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.tau_ema) {
            return bad(format!("tau_ema {} outside [0,1]", self.tau_ema));
        }
        if self.warmup_steps >= self.steps {
            return bad(format!(
                "warmup {} swallows all {} steps",
                self.warmup_steps, self.steps
            ));
        }
        Ok(())
    }
}

/// Everything a pretraining run consumes, in one serializable bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub augment: AugmentParams,
    pub scheme: SamplingScheme,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            augment: AugmentParams::default(),
            scheme: SamplingScheme::Marginal {
                window_s: 2.56,
                num_views: 2,
            },
            train: TrainConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.scheme.validate()?;
        self.train.validate()?;
        if self.augment.out_size != self.model.input_size {
            return Err(TrainerError::BadConfig {
                detail: format!(
                    "augmented views are {} px but the model wants {}",
                    self.augment.out_size, self.model.input_size
                ),
            });
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        config_fingerprint(self)
    }
}

/// Linear warmup to base_lr, then cosine to exactly zero at the last step.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if !cfg.cosine {
        return cfg.base_lr;
    }
    let span = (cfg.steps - 1).saturating_sub(cfg.warmup_steps).max(1) as f64;
    let t = ((step - cfg.warmup_steps) as f64 / span).clamp(0.0, 1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// EMA coefficient for a step, per the configured schedule.
pub fn tau_at(step: usize, cfg: &TrainConfig) -> f64 {
    match cfg.tau_schedule {
        TauSchedule::Constant => cfg.tau_ema,
        TauSchedule::CosineToOne => {
            let span = (cfg.steps - 1).max(1) as f64;
            let t = (step as f64 / span).clamp(0.0, 1.0);
            1.0 - (1.0 - cfg.tau_ema) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Clip indices for one step: epochs are independent shuffles of the whole
/// corpus, consumed in batch-size slices with any short tail dropped. Every
/// clip appears at most once per step and exactly once per full epoch, so
/// long-run inclusion frequencies stay flat.
pub fn batch_indices(n_clips: usize, batch_size: usize, seed: u64, step: usize) -> Result<Vec<usize>> {
    if n_clips < batch_size {
        return Err(TrainerError::InsufficientClips {
            have: n_clips,
            need: batch_size,
        });
    }
    let per_epoch = n_clips / batch_size;
    let (epoch, slot) = (step / per_epoch, step % per_epoch);
    let mut order: Vec<usize> = (0..n_clips).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, SEED_EPOCH), epoch as u64));
    order.shuffle(&mut rng);
    Ok(order[slot * batch_size..(slot + 1) * batch_size].to_vec())
}

/// Load and augment one batch. Returns each clip's view set alongside the
/// clip indices it came from. A (seed, step) pair fully determines the
/// result, bit for bit.
pub fn build_batch(
    corpus_dir: &Path,
    manifest: &CorpusManifest,
    batch_size: usize,
    scheme: &SamplingScheme,
    params: &AugmentParams,
    seed: u64,
    step: usize,
) -> Result<(Vec<usize>, Vec<ViewSet>)> {
    let indices = batch_indices(manifest.entries.len(), batch_size, seed, step)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, SEED_AUG), step as u64));
    let mut sets = Vec::with_capacity(indices.len());
    for &i in &indices {
        let clip = manifest.load_clip_frames(corpus_dir, i)?;
        sets.push(make_views(&clip, scheme, params, &mut rng)?);
    }
    Ok((indices, sets))
}

/// Stack per-clip views into one [B, 3, S, S] tensor per view position.
pub fn stack_views(sets: &[ViewSet]) -> Result<Vec<Tensor<f32>>> {
    let first = sets.first().ok_or(TrainerError::BadConfig {
        detail: "empty batch".into(),
    })?;
    let n_views = first.views.len();
    let view_shape = first.views[0].shape().to_vec();
    let mut out = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let mut data = Vec::with_capacity(sets.len() * first.views[0].numel());
        for set in sets {
            if set.views.len() != n_views || set.views[v].shape() != view_shape {
                return Err(TrainerError::BadConfig {
                    detail: "ragged view sets in one batch".into(),
                });
            }
            data.extend_from_slice(set.views[v].data());
        }
        let mut shape = vec![sets.len()];
        shape.extend_from_slice(&view_shape);
        out.push(Tensor::new(&shape, data)?);
    }
    Ok(out)
}

/// SGD with classical momentum. Weight decay folds into the gradient before
/// the velocity update: v = m v + (g + wd p), p = p - lr v.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<(String, Tensor<f32>)>,
}

impl SgdMomentum {
    pub fn new(params: &Params<f32>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: params
                .entries()
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[(String, Tensor<f32>)] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<(String, Tensor<f32>)>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, params: &mut Params<f32>, grads: &[(String, Tensor<f32>)], lr: f64) -> Result<()> {
        let lr = lr as f32;
        for ((vname, vel), (pname, param)) in self.velocity.iter_mut().zip(params.entries_mut()) {
            let (gname, grad) = grads
                .iter()
                .find(|(n, _)| n == vname)
                .ok_or_else(|| ModelError::MissingParam { name: vname.clone() })?;
            if vname != pname || gname != pname {
                return Err(TrainerError::BadConfig {
                    detail: format!("optimizer state misaligned at {vname}/{pname}"),
                });
            }
            let mut v = vel.data().to_vec();
            let mut p = param.data().to_vec();
            for i in 0..v.len() {
                v[i] = self.momentum * v[i] + grad.data()[i] + self.weight_decay * p[i];
                p[i] -= lr * v[i];
            }
            *vel = Tensor::new(vel.shape(), v)?;
            *param = Tensor::new(param.shape(), p)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub pair_count: usize,
    pub lr: f64,
    pub tau: f64,
    pub wall_ms: f64,
}

fn logits_dump<EF: crate::tensor::Scalar>(
    tape: &Tape<EF>,
    out: &crate::model::MultiviewOutput,
) -> String {
    let mut lines = Vec::new();
    for (i, view) in out.views.iter().enumerate() {
        let z = tape.value(view.projection.z);
        let bad = z.data().iter().filter(|v| !v.is_finite()).count();
        lines.push(format!("view {i} projection: {bad} non-finite of {}", z.numel()));
        for (j, &t) in out.target_projections.iter().enumerate() {
            if i == j {
                continue;
            }
            let zt = tape.value(t);
            let (b, d) = (z.shape()[0], z.shape()[1]);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut nonfinite = 0usize;
            for r in 0..b {
                for c in 0..b {
                    let mut dot = 0.0f64;
                    for k in 0..d {
                        dot += z.data()[r * d + k].to_f64().unwrap_or(f64::NAN)
                            * zt.data()[c * d + k].to_f64().unwrap_or(f64::NAN);
                    }
                    if dot.is_finite() {
                        lo = lo.min(dot);
                        hi = hi.max(dot);
                    } else {
                        nonfinite += 1;
                    }
                }
            }
            lines.push(format!(
                "pair ({i},{j}) logits: min {lo:.4} max {hi:.4}, {nonfinite} non-finite of {}",
                b * b
            ));
        }
    }
    lines.join("; ")
}

/// One optimization step: forward all views through both branches, backprop
/// the multi-view loss into the online parameters, apply SGD, then move the
/// target by EMA. The state mutates only after the loss is known finite, so
/// a failed step leaves it untouched.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut SgdMomentum,
    views: &[Tensor<f32>],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepStats> {
    let start = Instant::now();
    let lr = lr_at(step, cfg);
    let tau = tau_at(step, cfg);

    let tape = Tape::<f32>::new();
    let online = bind_params(&tape, &state.online, true);
    let target = bind_params(&tape, &state.target, false);
    let frame_ids: Vec<_> = views.iter().map(|v| tape.constant(v.clone())).collect();
    let out = multiview_loss(
        &tape,
        &state.config,
        &online,
        &target,
        &frame_ids,
        state.config.temperature,
    )?;
    let loss = tape.value(out.loss).item() as f64;
    if !loss.is_finite() {
        return Err(TrainerError::NonFiniteLoss {
            step,
            detail: logits_dump(&tape, &out),
        });
    }
    let grads = tape.backward(out.loss)?;
    let named_grads: Vec<(String, Tensor<f32>)> = online
        .iter()
        .map(|(name, id)| (name.to_string(), grads.of(&tape, id)))
        .collect();
    opt.step(&mut state.online, &named_grads, lr)?;
    state.update_target(tau)?;

    Ok(StepStats {
        step,
        loss,
        pair_count: out.pair_count,
        lr,
        tau,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunLogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub wall_ms: f64,
}

/// Append-only JSONL log with a strictly increasing step index.
pub struct RunLog {
    writer: BufWriter<fs::File>,
    last_step: Option<usize>,
}

impl RunLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let last_step = if append && path.exists() {
            Self::load(path)?.last().map(|r| r.step)
        } else {
            None
        };
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(Self {
            writer: BufWriter::new(file),
            last_step,
        })
    }

    pub fn append(&mut self, rec: &RunLogRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if rec.step <= last {
                return Err(TrainerError::BadLog {
                    detail: format!("step {} after step {last}", rec.step),
                });
            }
        }
        let line = serde_json::to_string(rec).map_err(|e| TrainerError::BadLog {
            detail: e.to_string(),
        })?;
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(|e| TrainerError::BadLog { detail: e.to_string() })?;
        self.last_step = Some(rec.step);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vec<RunLogRecord>> {
        let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut records: Vec<RunLogRecord> = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RunLogRecord = serde_json::from_str(&line).map_err(|e| TrainerError::BadLog {
                detail: format!("{path:?}: {e}"),
            })?;
            if let Some(prev) = records.last() {
                if rec.step <= prev.step {
                    return Err(TrainerError::BadLog {
                        detail: format!("step {} after step {} in {path:?}", rec.step, prev.step),
                    });
                }
            }
            records.push(rec);
        }
        Ok(records)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub step: usize,
    pub config_hash: String,
    pub tau_ema: f64,
    pub param_names: Vec<String>,
}

fn tensor_dir_save(dir: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, t) in entries {
        write_tensor(&dir.join(format!("{name}.vtns")), t)?;
    }
    Ok(())
}

fn tensor_dir_load(dir: &Path, names: &[String]) -> Result<Vec<(String, Tensor<f32>)>> {
    names
        .iter()
        .map(|n| Ok((n.clone(), read_tensor::<f32>(&dir.join(format!("{n}.vtns")))?)))
        .collect()
}

/// Write parameters, target parameters, and optimizer velocity as one
/// checkpoint directory with a JSON header.
pub fn save_checkpoint(
    dir: &Path,
    state: &ModelState,
    opt: &SgdMomentum,
    step: usize,
    config_hash: &str,
    tau_ema: f64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let header = CheckpointHeader {
        step,
        config_hash: config_hash.to_string(),
        tau_ema,
        param_names: state.online.entries().iter().map(|(n, _)| n.clone()).collect(),
    };
    let text = serde_json::to_string_pretty(&header).map_err(|e| TrainerError::BadCheckpoint {
        path: dir.to_path_buf(),
        detail: e.to_string(),
    })?;
    fs::write(dir.join("header.json"), text).map_err(|e| io_err(dir, e))?;
    tensor_dir_save(&dir.join("online"), state.online.entries())?;
    tensor_dir_save(&dir.join("target"), state.target.entries())?;
    tensor_dir_save(&dir.join("velocity"), opt.velocity())?;
    Ok(())
}

pub fn load_checkpoint_header(dir: &Path) -> Result<CheckpointHeader> {
    let path = dir.join("header.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| TrainerError::BadCheckpoint {
        path: dir.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Restore a checkpoint. The model config comes from the caller; the hash
/// stored in the header guards against mixing configs and checkpoints.
pub fn load_checkpoint(
    dir: &Path,
    config: ModelConfig,
    expect_hash: Option<&str>,
) -> Result<(ModelState, Vec<(String, Tensor<f32>)>, CheckpointHeader)> {
    let header = load_checkpoint_header(dir)?;
    if let Some(expected) = expect_hash {
        if header.config_hash != expected {
            return Err(TrainerError::BadCheckpoint {
                path: dir.to_path_buf(),
                detail: format!(
                    "config hash {} does not match expected {expected}",
                    header.config_hash
                ),
            });
        }
    }
    let online = Params::from_entries(tensor_dir_load(&dir.join("online"), &header.param_names)?)?;
    let target = Params::from_entries(tensor_dir_load(&dir.join("target"), &header.param_names)?)?;
    let velocity = tensor_dir_load(&dir.join("velocity"), &header.param_names)?;
    Ok((
        ModelState {
            config,
            online,
            target,
        },
        velocity,
        header,
    ))
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub steps_run: usize,
    pub final_loss: f64,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
}

/// One line of the optional augmentation log: every sampled decision
/// behind one clip's views at one step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentLogRecord {
    pub step: usize,
    pub clip: usize,
    pub views: Vec<ViewProvenance>,
}

struct AugmentLog {
    writer: BufWriter<fs::File>,
}

impl AugmentLog {
    fn create(path: &Path, append: bool) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(Self {
            writer: BufWriter::new(file),
        })
    }

    fn append(&mut self, rec: &AugmentLogRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| TrainerError::BadLog {
            detail: e.to_string(),
        })?;
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(|e| TrainerError::BadLog { detail: e.to_string() })
    }
}

/// Run pretraining from scratch or resume from a checkpoint directory.
/// Emits `run.jsonl`, periodic `checkpoint-NNNNNN` directories when
/// configured, and always a terminal `checkpoint-final`. A `manifest_file`
/// (a curated subset, say) overrides the corpus directory's own manifest.
/// With `augment_log` set, every view's provenance is appended there as
/// JSONL, one record per (step, clip).
pub fn run_pretraining(
    corpus_dir: &Path,
    out_dir: &Path,
    cfg: &PretrainConfig,
    resume: Option<&Path>,
    manifest_file: Option<&Path>,
    augment_log: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let manifest = match manifest_file {
        Some(path) => CorpusManifest::load_file(path, corpus_dir)?,
        None => CorpusManifest::load(corpus_dir)?,
    };
    if manifest.entries.len() < cfg.train.batch_size {
        return Err(TrainerError::InsufficientClips {
            have: manifest.entries.len(),
            need: cfg.train.batch_size,
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let hash = cfg.fingerprint();

    let (mut state, mut opt, start_step) = match resume {
        Some(ckpt) => {
            let (state, velocity, header) = load_checkpoint(ckpt, cfg.model.clone(), Some(&hash))?;
            let mut opt = SgdMomentum::new(&state.online, cfg.train.momentum, cfg.train.weight_decay);
            opt.set_velocity(velocity);
            (state, opt, header.step)
        }
        None => {
            let state = ModelState::init(cfg.model.clone(), derive_seed(cfg.train.seed, SEED_INIT))?;
            let opt = SgdMomentum::new(&state.online, cfg.train.momentum, cfg.train.weight_decay);
            (state, opt, 0)
        }
    };

    let log_path = out_dir.join("run.jsonl");
    let mut log = RunLog::create(&log_path, resume.is_some())?;
    let mut aug_log = augment_log
        .map(|path| AugmentLog::create(path, resume.is_some()))
        .transpose()?;
    let mut last_loss = f64::NAN;
    for step in start_step..cfg.train.steps {
        let (indices, sets) = build_batch(
            corpus_dir,
            &manifest,
            cfg.train.batch_size,
            &cfg.scheme,
            &cfg.augment,
            cfg.train.seed,
            step,
        )?;
        if let Some(aug) = aug_log.as_mut() {
            for (&clip, set) in indices.iter().zip(&sets) {
                aug.append(&AugmentLogRecord {
                    step,
                    clip,
                    views: set.provenance.clone(),
                })?;
            }
        }
        let views = stack_views(&sets)?;
        let stats = train_step(&mut state, &mut opt, &views, &cfg.train, step)?;
        last_loss = stats.loss;
        log.append(&RunLogRecord {
            step,
            loss: stats.loss,
            lr: stats.lr,
            tau: stats.tau,
            wall_ms: stats.wall_ms,
        })?;
        let done = step + 1;
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < cfg.train.steps {
            let dir = out_dir.join(format!("checkpoint-{done:06}"));
            save_checkpoint(&dir, &state, &opt, done, &hash, tau_at(step, &cfg.train))?;
        }
    }
    let final_dir = out_dir.join("checkpoint-final");
    save_checkpoint(
        &final_dir,
        &state,
        &opt,
        cfg.train.steps,
        &hash,
        tau_at(cfg.train.steps - 1, &cfg.train),
    )?;
    Ok(PretrainOutcome {
        steps_run: cfg.train.steps - start_step,
        final_loss: last_loss,
        checkpoint_dir: final_dir,
        log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_corpus, GenConfig};
    use tempfile::TempDir;

    fn tiny_pretrain_cfg() -> PretrainConfig {
        PretrainConfig {
            model: ModelConfig {
                input_size: 16,
                stage_widths: vec![4, 8],
                stage_strides: vec![2, 2],
                scale_taps: 2,
                attn_hidden: 4,
                proj_hidden: 16,
                proj_dim: 8,
                ..ModelConfig::default()
            },
            augment: AugmentParams {
                out_size: 16,
                blur_kernel: 5,
                ..AugmentParams::default()
            },
            scheme: SamplingScheme::Marginal {
                window_s: 1.0,
                num_views: 2,
            },
            train: TrainConfig {
                batch_size: 4,
                steps: 6,
                base_lr: 0.05,
                warmup_steps: 1,
                seed: 7,
                ..TrainConfig::default()
            },
        }
    }

    fn tiny_corpus(dir: &Path, n: usize) -> CorpusManifest {
        let cfg = GenConfig {
            size: 16,
            duration_s: 1.6,
            ..GenConfig::default()
        };
        gen_corpus(&cfg, n, dir, 99).unwrap()
    }

    #[test]
    fn lr_schedule_hits_documented_endpoints() {
        let cfg = TrainConfig {
            steps: 100,
            warmup_steps: 10,
            base_lr: 0.4,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(5, &cfg) - 0.2).abs() < 1e-12);
        assert!((lr_at(10, &cfg) - 0.4).abs() < 1e-12);
        assert!(lr_at(99, &cfg) < 1e-8 * 0.4);
        let no_warmup = TrainConfig {
            warmup_steps: 0,
            ..cfg.clone()
        };
        assert_eq!(lr_at(0, &no_warmup), no_warmup.base_lr);
        let flat = TrainConfig {
            cosine: false,
            ..cfg
        };
        assert_eq!(lr_at(50, &flat), flat.base_lr);
    }

    #[test]
    fn tau_schedule_rises_from_base_to_one() {
        let cfg = TrainConfig {
            steps: 51,
            tau_ema: 0.9,
            tau_schedule: TauSchedule::CosineToOne,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        assert!((tau_at(0, &cfg) - 0.9).abs() < 1e-12);
        assert!((tau_at(50, &cfg) - 1.0).abs() < 1e-12);
        assert!(tau_at(25, &cfg) > 0.9 && tau_at(25, &cfg) < 1.0);
        let constant = TrainConfig {
            tau_schedule: TauSchedule::Constant,
            ..cfg
        };
        assert_eq!(tau_at(37, &constant), 0.9);
    }

    #[test]
    fn batch_indices_are_unique_reproducible_and_cover_epochs() {
        let a = batch_indices(50, 8, 3, 17).unwrap();
        let b = batch_indices(50, 8, 3, 17).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);

        let mut epoch_union: Vec<usize> = (0..6).flat_map(|s| batch_indices(48, 8, 3, s).unwrap()).collect();
        epoch_union.sort_unstable();
        assert_eq!(epoch_union, (0..48).collect::<Vec<_>>());
    }

    #[test]
    fn inclusion_frequency_stays_flat_over_many_steps() {
        let (n, batch, steps) = (50, 8, 600);
        let mut counts = vec![0usize; n];
        for s in 0..steps {
            for i in batch_indices(n, batch, 11, s).unwrap() {
                counts[i] += 1;
            }
        }
        let mean = (batch * steps) as f64 / n as f64;
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() <= 0.1 * mean,
                "clip {i} drawn {c} times vs mean {mean}"
            );
        }
    }

    #[test]
    fn insufficient_clips_rejected() {
        assert!(matches!(
            batch_indices(3, 4, 0, 0),
            Err(TrainerError::InsufficientClips { have: 3, need: 4 })
        ));
    }

    #[test]
    fn build_batch_is_reproducible_bitwise() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_corpus(dir.path(), 6);
        let cfg = tiny_pretrain_cfg();
        let (idx_a, sets_a) =
            build_batch(dir.path(), &manifest, 4, &cfg.scheme, &cfg.augment, 5, 2).unwrap();
        let (idx_b, sets_b) =
            build_batch(dir.path(), &manifest, 4, &cfg.scheme, &cfg.augment, 5, 2).unwrap();
        assert_eq!(idx_a, idx_b);
        for (a, b) in sets_a.iter().zip(&sets_b) {
            assert_eq!(a.provenance, b.provenance);
            for (va, vb) in a.views.iter().zip(&b.views) {
                assert_eq!(va, vb);
            }
        }
        let views = stack_views(&sets_a).unwrap();
        assert_eq!(views.len(), 2);
        assert_eq!(views[0].shape(), &[4, 3, 16, 16]);
    }

    #[test]
    fn zero_lr_step_freezes_online_and_moves_target() {
        let cfg = tiny_pretrain_cfg();
        let mut state = ModelState::init(cfg.model.clone(), 1).unwrap();
        let other = init_params(&cfg.model, 2).unwrap();
        state.target = other.clone();
        let mut opt = SgdMomentum::new(&state.online, 0.9, 0.0);
        let views: Vec<Tensor<f32>> = (0..2)
            .map(|v| {
                let mut rng = ChaCha8Rng::seed_from_u64(80 + v);
                Tensor::from_fn(&[4, 3, 16, 16], |_| rng.gen_range(0.0..=1.0))
            })
            .collect();
        let train = TrainConfig {
            base_lr: 1e-12,
            warmup_steps: 1,
            steps: 2,
            tau_ema: 0.95,
            ..cfg.train.clone()
        };
        let before = state.online.clone();
        let stats = train_step(&mut state, &mut opt, &views, &train, 0).unwrap();
        assert!(stats.loss.is_finite());
        for ((_, a), (_, b)) in before.entries().iter().zip(state.online.entries()) {
            assert_eq!(a.data(), b.data());
        }
        for (((_, t), (_, o)), (_, f)) in state
            .target
            .entries()
            .iter()
            .zip(other.entries())
            .zip(before.entries())
        {
            for i in 0..t.numel() {
                let expected = 0.95 * o.data()[i] + 0.05 * f.data()[i];
                assert!((t.data()[i] - expected).abs() < 1e-6);
            }
        }
    }

    use crate::model::init_params;

    #[test]
    fn small_lr_step_descends_on_its_own_batch() {
        let cfg = tiny_pretrain_cfg();
        let mut state = ModelState::init(cfg.model.clone(), 3).unwrap();
        let mut opt = SgdMomentum::new(&state.online, 0.9, 0.0);
        let views: Vec<Tensor<f32>> = (0..2)
            .map(|v| {
                let mut rng = ChaCha8Rng::seed_from_u64(90 + v);
                Tensor::from_fn(&[4, 3, 16, 16], |_| rng.gen_range(0.0..=1.0))
            })
            .collect();
        let train = TrainConfig {
            base_lr: 1e-3,
            warmup_steps: 0,
            cosine: false,
            steps: 2,
            ..cfg.train.clone()
        };
        let eval_loss = |state: &ModelState| {
            let tape = Tape::<f32>::new();
            let online = bind_params(&tape, &state.online, false);
            let target = bind_params(&tape, &state.target, false);
            let ids: Vec<_> = views.iter().map(|v| tape.constant(v.clone())).collect();
            let out =
                multiview_loss(&tape, &state.config, &online, &target, &ids, state.config.temperature)
                    .unwrap();
            tape.value(out.loss).item() as f64
        };
        let before = eval_loss(&state);
        train_step(&mut state, &mut opt, &views, &train, 0).unwrap();
        let after = eval_loss(&state);
        assert!(after < before, "loss went {before} -> {after}");
    }

    #[test]
    fn non_finite_loss_aborts_without_touching_state() {
        let cfg = tiny_pretrain_cfg();
        let mut state = ModelState::init(cfg.model.clone(), 4).unwrap();
        let shape = state.online.get("proj.w2").unwrap().shape().to_vec();
        state
            .online
            .set("proj.w2", Tensor::full(&shape, f32::NAN))
            .unwrap();
        let snapshot = state.online.clone();
        let mut opt = SgdMomentum::new(&state.online, 0.9, 0.0);
        let views: Vec<Tensor<f32>> = (0..2).map(|_| Tensor::full(&[4, 3, 16, 16], 0.5)).collect();
        let err = train_step(&mut state, &mut opt, &views, &cfg.train, 0).unwrap_err();
        match err {
            TrainerError::NonFiniteLoss { step, detail } => {
                assert_eq!(step, 0);
                assert!(detail.contains("logits"), "{detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
        for ((_, a), (_, b)) in snapshot.entries().iter().zip(state.online.entries()) {
            assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn pretraining_drops_below_uniform_logit_baseline() {
        let dir = TempDir::new().unwrap();
        let corpus = dir.path().join("corpus");
        tiny_corpus(&corpus, 16);
        let mut cfg = tiny_pretrain_cfg();
        cfg.train.batch_size = 8;
        cfg.train.steps = 60;
        cfg.train.warmup_steps = 5;
        cfg.train.base_lr = 0.1;
        let out = dir.path().join("run");
        let outcome = run_pretraining(&corpus, &out, &cfg, None, None, None).unwrap();
        let records = RunLog::load(&outcome.log_path).unwrap();
        assert_eq!(records.len(), 60);
        assert!(records.iter().all(|r| r.loss.is_finite()));
        let baseline = 2.0 * (cfg.train.batch_size as f64).ln();
        let tail: f64 = records[50..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(
            tail < baseline,
            "mean tail loss {tail} vs uniform baseline {baseline}"
        );
    }

    #[test]
    fn augment_log_covers_every_clip_of_every_step() {
        let dir = TempDir::new().unwrap();
        let corpus = dir.path().join("corpus");
        tiny_corpus(&corpus, 8);
        let mut cfg = tiny_pretrain_cfg();
        cfg.train.steps = 3;
        let out = dir.path().join("run");
        let aug_path = dir.path().join("augment.jsonl");
        run_pretraining(&corpus, &out, &cfg, None, None, Some(&aug_path)).unwrap();
        let text = fs::read_to_string(&aug_path).unwrap();
        let records: Vec<AugmentLogRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.len(), 3 * cfg.train.batch_size);
        assert!(records.windows(2).all(|w| w[0].step <= w[1].step));
        for r in &records {
            assert_eq!(r.views.len(), 2);
            assert!(r.clip < 8);
            for (i, v) in r.views.iter().enumerate() {
                assert_eq!(v.view_index, i);
            }
        }
    }

    #[test]
    fn checkpoint_resume_is_bitwise_identical() {
        let dir = TempDir::new().unwrap();
        let corpus = dir.path().join("corpus");
        tiny_corpus(&corpus, 8);
        let mut cfg = tiny_pretrain_cfg();
        cfg.train.steps = 4;
        cfg.train.checkpoint_every = 2;

        let straight = dir.path().join("straight");
        run_pretraining(&corpus, &straight, &cfg, None, None, None).unwrap();

        let resumed = dir.path().join("resumed");
        run_pretraining(&corpus, &resumed, &cfg, None, None, None).unwrap();
        let midpoint = resumed.join("checkpoint-000002");
        assert!(midpoint.is_dir());
        let resumed2 = dir.path().join("resumed2");
        run_pretraining(&corpus, &resumed2, &cfg, Some(&midpoint), None, None).unwrap();

        let (a, va, _) = load_checkpoint(
            &straight.join("checkpoint-final"),
            cfg.model.clone(),
            Some(&cfg.fingerprint()),
        )
        .unwrap();
        let (b, vb, _) = load_checkpoint(
            &resumed2.join("checkpoint-final"),
            cfg.model.clone(),
            Some(&cfg.fingerprint()),
        )
        .unwrap();
        let bits = |entries: &[(String, Tensor<f32>)]| {
            entries
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<u32>>()
        };
        assert_eq!(bits(a.online.entries()), bits(b.online.entries()));
        assert_eq!(bits(a.target.entries()), bits(b.target.entries()));
        assert_eq!(bits(&va), bits(&vb));

        let log = RunLog::load(&resumed2.join("run.jsonl")).unwrap();
        assert!(log.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn checkpoint_rejects_mismatched_config_hash() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_pretrain_cfg();
        let state = ModelState::init(cfg.model.clone(), 5).unwrap();
        let opt = SgdMomentum::new(&state.online, 0.9, 0.0);
        save_checkpoint(dir.path(), &state, &opt, 3, "aaaa", 0.99).unwrap();
        let err = load_checkpoint(dir.path(), cfg.model.clone(), Some("bbbb")).unwrap_err();
        assert!(matches!(err, TrainerError::BadCheckpoint { .. }));
        let (state2, _, header) = load_checkpoint(dir.path(), cfg.model, Some("aaaa")).unwrap();
        assert_eq!(header.step, 3);
        assert_eq!(state2.online, state.online);
    }
}

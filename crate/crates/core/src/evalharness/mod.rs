//! Downstream evaluations over a frozen model snapshot: linear probing,
//! label-propagation segmentation, saliency alignment, corruption
//! robustness, response consistency, and temporal pooling for clip-level
//! classification. Everything here is read-only over the parameters it is
//! handed and deterministic given (inputs, seed).

pub mod clip;
pub mod consistency;
pub mod probe;
pub mod robust;
pub mod saliency;
pub mod seg;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{resize_bicubic, Image};
use crate::datagen::{CorpusManifest, DatagenError, VideoClip};
use crate::hash::{derive_seed, fnv1a64};
use crate::model::{bind_params, encode, ModelConfig, ModelError, Params};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval input: {detail}")]
    BadInput { detail: String },
    #[error("degenerate data: {detail}")]
    DegenerateData { detail: String },
    #[error("metrics report: {detail}")]
    BadReport { detail: String },
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
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One measured value. `details` keys serialize sorted, so a record's JSON
/// form is a pure function of its contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub details: serde_json::Map<String, serde_json::Value>,
}

/// An append-only list of metric records, stored as JSONL (one record per
/// line) with an optional CSV projection of the metric/value columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<MetricRecord>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, metric: impl Into<String>, value: f64) {
        self.records.push(MetricRecord {
            metric: metric.into(),
            value,
            details: serde_json::Map::new(),
        });
    }

    pub fn push_detailed(&mut self, metric: impl Into<String>, value: f64, details: serde_json::Value) {
        let details = match details {
            serde_json::Value::Object(map) => map,
            other => {
                let mut map = serde_json::Map::new();
                map.insert("detail".into(), other);
                map
            }
        };
        self.records.push(MetricRecord {
            metric: metric.into(),
            value,
            details,
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.records.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.records.extend(other.records);
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: MetricRecord =
                serde_json::from_str(line).map_err(|e| EvalError::BadReport {
                    detail: format!("{} line {}: {e}", path.display(), i + 1),
                })?;
            records.push(record);
        }
        Ok(Self { records })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for r in &self.records {
            out.push_str(&format!("{},{}\n", r.metric, r.value));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| io_err(path, e))
    }
}

/// FNV-1a over parameter names and exact value bits; evaluations assert it
/// unchanged to prove they never touched the encoder.
pub fn params_checksum(params: &Params<f32>) -> u64 {
    let mut bytes = Vec::new();
    for (name, t) in params.entries() {
        bytes.extend_from_slice(name.as_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fnv1a64(&bytes)
}

/// One clip frame scaled to the encoder's input size, channels first.
pub fn frame_input(clip: &VideoClip, t: usize, input_size: usize) -> Tensor<f32> {
    let img = Image::from_clip_frame(clip, t);
    let img = if img.h == input_size && img.w == input_size {
        img
    } else {
        resize_bicubic(&img, input_size, input_size)
    };
    img.to_chw_tensor()
}

/// Stack [3, S, S] inputs into one [B, 3, S, S] batch.
pub fn stack_inputs(inputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = inputs.first().ok_or_else(|| EvalError::BadInput {
        detail: "empty input batch".into(),
    })?;
    let mut data = Vec::with_capacity(inputs.len() * first.numel());
    for t in inputs {
        if t.shape() != first.shape() {
            return Err(EvalError::BadInput {
                detail: format!("input shape {:?} != {:?}", t.shape(), first.shape()),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![inputs.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::new(&shape, data)?)
}

/// Forward the encoder alone and read out the tapped feature maps, one
/// [B, C, h, w] tensor per scale. No gradients are recorded or applied.
pub fn encode_frames(
    cfg: &ModelConfig,
    params: &Params<f32>,
    batch: &Tensor<f32>,
) -> Result<Vec<Tensor<f32>>> {
    let tape = Tape::<f32>::new();
    let bound = bind_params(&tape, params, false);
    let input = tape.constant(batch.clone());
    let maps = encode(&tape, cfg, &bound, input)?;
    Ok(maps.into_iter().map(|id| tape.value(id)).collect())
}

/// Channel means over space for one sample of a [B, C, h, w] map.
pub fn spatial_mean(map: &Tensor<f32>, sample: usize) -> Vec<f64> {
    let shape = map.shape();
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let data = &map.data()[sample * c * hw..(sample + 1) * c * hw];
    (0..c)
        .map(|ch| data[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
        .collect()
}

/// The frozen-encoder embedding probes consume: the spatial mean of the
/// final tapped feature map, mirroring global average pooling.
pub fn embed_inputs(
    cfg: &ModelConfig,
    params: &Params<f32>,
    inputs: &[Tensor<f32>],
    batch_size: usize,
) -> Result<Tensor<f64>> {
    if inputs.is_empty() {
        return Err(EvalError::BadInput {
            detail: "no inputs to embed".into(),
        });
    }
    let dim = cfg.stage_widths[cfg.stage_widths.len() - 1];
    let mut out = Vec::with_capacity(inputs.len() * dim);
    for chunk in inputs.chunks(batch_size.max(1)) {
        let batch = stack_inputs(chunk)?;
        let maps = encode_frames(cfg, params, &batch)?;
        let last = maps.last().expect("at least one scale tap");
        for sample in 0..chunk.len() {
            out.extend(spatial_mean(last, sample));
        }
    }
    Ok(Tensor::new(&[inputs.len(), dim], out)?)
}

/// Deterministic frame picks for one clip: distinct indices, sorted.
pub fn pick_frames(n_frames: usize, per_clip: usize, seed: u64) -> Vec<usize> {
    let take = per_clip.min(n_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..n_frames).collect();
    all.shuffle(&mut rng);
    let mut picked = all[..take].to_vec();
    picked.sort_unstable();
    picked
}

/// Frame-level features and labels extracted from a corpus with a frozen
/// encoder. Labels are the clips' true categories.
#[derive(Clone, Debug)]
pub struct FrameDataset {
    /// [N, D]
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

pub fn featurize_corpus(
    cfg: &ModelConfig,
    params: &Params<f32>,
    corpus_dir: &Path,
    manifest: &CorpusManifest,
    frames_per_clip: usize,
    seed: u64,
    batch_size: usize,
) -> Result<FrameDataset> {
    if manifest.entries.is_empty() {
        return Err(EvalError::DegenerateData {
            detail: "empty corpus".into(),
        });
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for index in 0..manifest.entries.len() {
        let clip = manifest.load_clip_frames(corpus_dir, index)?;
        for t in pick_frames(clip.n_frames(), frames_per_clip, derive_seed(seed, index as u64)) {
            inputs.push(frame_input(&clip, t, cfg.input_size));
            labels.push(clip.label);
        }
    }
    let features = embed_inputs(cfg, params, &inputs, batch_size)?;
    Ok(FrameDataset {
        features,
        labels,
        n_classes: manifest.categories.len(),
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::model::ModelState;

    /// A small but structurally complete model: two taps, attention on.
    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            stage_widths: vec![4, 8],
            stage_strides: vec![2, 2],
            attn_hidden: 6,
            proj_hidden: 12,
            proj_dim: 6,
            ..ModelConfig::default()
        }
    }

    pub fn tiny_state(seed: u64) -> ModelState {
        ModelState::init(tiny_config(), seed).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::datagen::{gen_corpus, GenConfig};
    use tempfile::TempDir;

    #[test]
    fn report_roundtrips_and_projects_to_csv() {
        let dir = TempDir::new().unwrap();
        let mut report = MetricsReport::new();
        report.push("probe_accuracy", 0.75);
        report.push_detailed(
            "j_mean",
            0.5,
            serde_json::json!({"clips": 4, "tap": 0}),
        );
        let path = dir.path().join("report.jsonl");
        report.save_jsonl(&path).unwrap();
        let loaded = MetricsReport::load_jsonl(&path).unwrap();
        assert_eq!(report, loaded);
        assert_eq!(loaded.get("probe_accuracy"), Some(0.75));
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,value\n"));
        assert!(csv.contains("j_mean,0.5\n"));
    }

    #[test]
    fn report_serialization_is_bitwise_stable() {
        let mut report = MetricsReport::new();
        report.push_detailed(
            "x",
            std::f64::consts::PI,
            serde_json::json!({"b": 1.0 / 3.0, "a": 2}),
        );
        let one = serde_json::to_string(&report).unwrap();
        let two = serde_json::to_string(&report).unwrap();
        assert_eq!(one, two);
        // keys come out sorted regardless of insertion order
        assert!(one.find("\"a\"").unwrap() < one.find("\"b\"").unwrap());
    }

    #[test]
    fn checksum_tracks_any_bit_flip() {
        let state = tiny_state(3);
        let before = params_checksum(&state.online);
        assert_eq!(before, params_checksum(&state.online));
        let mut changed = state.online.clone();
        let (name, t) = changed.entries()[0].clone();
        let bumped = t.with_element(0, t.data()[0] + 1e-6);
        changed.set(&name, bumped).unwrap();
        assert_ne!(before, params_checksum(&changed));
    }

    #[test]
    fn embeddings_are_deterministic_and_sized() {
        let cfg = tiny_config();
        let state = tiny_state(5);
        let inputs: Vec<Tensor<f32>> = (0..5)
            .map(|i| Tensor::from_fn(&[3, 16, 16], |j| ((i * 131 + j) % 97) as f32 / 97.0))
            .collect();
        let a = embed_inputs(&cfg, &state.online, &inputs, 2).unwrap();
        let b = embed_inputs(&cfg, &state.online, &inputs, 4).unwrap();
        assert_eq!(a.shape(), &[5, 8]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9, "batching changed embeddings");
        }
    }

    #[test]
    fn frame_picks_are_distinct_sorted_and_seed_stable() {
        let picks = pick_frames(20, 6, 9);
        assert_eq!(picks, pick_frames(20, 6, 9));
        assert_eq!(picks.len(), 6);
        assert!(picks.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(pick_frames(3, 10, 1).len(), 3);
    }

    #[test]
    fn corpus_featurization_labels_every_row() {
        let dir = TempDir::new().unwrap();
        let gen = GenConfig {
            size: 16,
            duration_s: 1.0,
            ..GenConfig::default()
        };
        let manifest = gen_corpus(&gen, 6, dir.path(), 2).unwrap();
        let cfg = tiny_config();
        let state = tiny_state(7);
        let ds = featurize_corpus(&cfg, &state.online, dir.path(), &manifest, 2, 11, 4).unwrap();
        assert_eq!(ds.features.shape()[0], ds.labels.len());
        assert_eq!(ds.features.shape(), &[12, 8]);
        assert_eq!(ds.n_classes, 10);
        assert!(ds.labels.iter().all(|&l| l < 10));
        assert!(ds.features.is_finite());
    }
}

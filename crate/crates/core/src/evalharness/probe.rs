//! Linear probing of a frozen encoder: multinomial logistic regression on
//! frame embeddings, trained with nesterov-momentum SGD over a swept
//! learning-rate grid, best head picked by validation accuracy.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{embed_inputs, frame_input, io_err, params_checksum, EvalError, FrameDataset, Result};
use crate::curation::FrameClassifier;
use crate::datagen::VideoClip;
use crate::hash::derive_seed;
use crate::model::{ModelConfig, Params};
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Learning rates to sweep; the head with the best validation accuracy
    /// wins, earlier entries win ties.
    pub lrs: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Share of the labeled data held out to pick the learning rate.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lrs: vec![0.4, 0.3, 0.2, 0.1, 0.05],
            epochs: 40,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 0.0,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(EvalError::BadInput { detail });
        if self.lrs.is_empty() || self.lrs.iter().any(|&lr| !(lr > 0.0)) {
            return bad(format!("learning rates {:?} must be positive", self.lrs));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

/// A trained linear classifier over frozen embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub n_classes: usize,
    pub dim: usize,
    /// [n_classes, dim], row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Learning rate this head was trained with.
    pub lr: f64,
}

impl ProbeHead {
    fn zeros(n_classes: usize, dim: usize, lr: f64) -> Self {
        Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
            lr,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (0..self.n_classes)
            .map(|c| {
                let row = &self.weights[c * self.dim..(c + 1) * self.dim];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[c]
            })
            .collect()
    }

    /// Argmax class, ties to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        best
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let logits = self.logits(x);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }
}

/// Fraction of rows the head classifies correctly.
pub fn accuracy(head: &ProbeHead, features: &Tensor<f64>, labels: &[usize]) -> f64 {
    let dim = head.dim;
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if head.predict(&features.data()[i * dim..(i + 1) * dim]) == label {
            hits += 1;
        }
    }
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub head: ProbeHead,
    pub best_lr: f64,
    pub val_accuracy: f64,
    /// (lr, validation accuracy) for every swept rate, in sweep order.
    pub sweep: Vec<(f64, f64)>,
}

fn train_one(
    features: &Tensor<f64>,
    labels: &[usize],
    train_idx: &[usize],
    n_classes: usize,
    lr: f64,
    cfg: &ProbeConfig,
    seed: u64,
) -> ProbeHead {
    let dim = features.shape()[1];
    let data = features.data();
    let mut head = ProbeHead::zeros(n_classes, dim, lr);
    let mut vel_w = vec![0.0; n_classes * dim];
    let mut vel_b = vec![0.0; n_classes];
    let mut order: Vec<usize> = train_idx.to_vec();
    let mu = cfg.momentum;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let m = chunk.len() as f64;
            let mut grad_w = vec![0.0; n_classes * dim];
            let mut grad_b = vec![0.0; n_classes];
            for &i in chunk {
                let x = &data[i * dim..(i + 1) * dim];
                let mut p = head.probabilities(x);
                p[labels[i]] -= 1.0;
                for (c, &pc) in p.iter().enumerate() {
                    let g = pc / m;
                    grad_b[c] += g;
                    let row = &mut grad_w[c * dim..(c + 1) * dim];
                    for (gw, &xv) in row.iter_mut().zip(x) {
                        *gw += g * xv;
                    }
                }
            }
            if cfg.weight_decay != 0.0 {
                for (g, w) in grad_w.iter_mut().zip(&head.weights) {
                    *g += cfg.weight_decay * w;
                }
            }
            // nesterov momentum: v <- mu v + g; p <- p - lr (g + mu v)
            for ((w, v), g) in head.weights.iter_mut().zip(&mut vel_w).zip(&grad_w) {
                *v = mu * *v + g;
                *w -= lr * (g + mu * *v);
            }
            for ((b, v), g) in head.bias.iter_mut().zip(&mut vel_b).zip(&grad_b) {
                *v = mu * *v + g;
                *b -= lr * (g + mu * *v);
            }
        }
    }
    head
}

/// Train a linear head on the given embeddings. The encoder is not an
/// input here at all: probing cannot touch it by construction.
pub fn train_probe(
    features: &Tensor<f64>,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(EvalError::BadInput {
            detail: format!("features {:?} do not match {} labels", shape, labels.len()),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(EvalError::BadInput {
            detail: format!("label {l} outside {n_classes} classes"),
        });
    }
    let distinct = {
        let mut seen = vec![false; n_classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if labels.len() < 4 || distinct < 2 {
        return Err(EvalError::DegenerateData {
            detail: format!("{} samples over {distinct} observed classes", labels.len()),
        });
    }

    let n = labels.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0)));
    let n_val = ((n as f64 * cfg.val_fraction) as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = idx.split_at(n_val);

    let val_feats = gather_rows(features, val_idx);
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut sweep = Vec::with_capacity(cfg.lrs.len());
    let mut best: Option<(f64, ProbeHead)> = None;
    for (k, &lr) in cfg.lrs.iter().enumerate() {
        let head = train_one(
            features,
            labels,
            train_idx,
            n_classes,
            lr,
            cfg,
            derive_seed(cfg.seed, 1 + k as u64),
        );
        let acc = accuracy(&head, &val_feats, &val_labels);
        sweep.push((lr, acc));
        if best.as_ref().map_or(true, |(b, _)| acc > *b) {
            best = Some((acc, head));
        }
    }
    let (val_accuracy, head) = best.expect("nonempty sweep");
    Ok(ProbeOutcome {
        best_lr: head.lr,
        head,
        val_accuracy,
        sweep,
    })
}

fn gather_rows(features: &Tensor<f64>, rows: &[usize]) -> Tensor<f64> {
    let dim = features.shape()[1];
    let data = features.data();
    let mut out = Vec::with_capacity(rows.len() * dim);
    for &r in rows {
        out.extend_from_slice(&data[r * dim..(r + 1) * dim]);
    }
    Tensor::new(&[rows.len(), dim], out).expect("consistent rows")
}

/// Probe a frozen encoder end to end: featurize the labeled corpus, sweep
/// the head, and score it on a held-out corpus. The returned checksums
/// prove the encoder came through untouched.
#[derive(Clone, Debug)]
pub struct ProbeEvaluation {
    pub outcome: ProbeOutcome,
    pub eval_accuracy: f64,
    pub train_rows: usize,
    pub eval_rows: usize,
    pub checksum_before: u64,
    pub checksum_after: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_probe(
    cfg: &ModelConfig,
    params: &Params<f32>,
    train: &FrameDataset,
    eval_corpus: &Path,
    eval_manifest: &crate::datagen::CorpusManifest,
    frames_per_clip: usize,
    probe_cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeEvaluation> {
    let checksum_before = params_checksum(params);
    let outcome = train_probe(&train.features, &train.labels, train.n_classes, probe_cfg)?;
    let eval = super::featurize_corpus(
        cfg,
        params,
        eval_corpus,
        eval_manifest,
        frames_per_clip,
        seed,
        32,
    )?;
    let eval_accuracy = accuracy(&outcome.head, &eval.features, &eval.labels);
    let checksum_after = params_checksum(params);
    Ok(ProbeEvaluation {
        outcome,
        eval_accuracy,
        train_rows: train.labels.len(),
        eval_rows: eval.labels.len(),
        checksum_before,
        checksum_after,
    })
}

/// Frozen encoder plus trained head, bundled so curation can score frames
/// without knowing anything about training.
pub struct ClassifierBundle {
    pub config: ModelConfig,
    pub params: Params<f32>,
    pub head: ProbeHead,
}

impl ClassifierBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let meta = serde_json::json!({
            "config": self.config,
            "head": self.head,
            "param_names": self.params.entries().iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        });
        fs::write(
            dir.join("classifier.json"),
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
        .map_err(|e| io_err(dir, e))?;
        let enc = dir.join("encoder");
        fs::create_dir_all(&enc).map_err(|e| io_err(&enc, e))?;
        for (name, t) in self.params.entries() {
            write_tensor(&enc.join(format!("{name}.vtns")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("classifier.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let meta: serde_json::Value = serde_json::from_str(&text).map_err(|e| EvalError::BadReport {
            detail: format!("{}: {e}", path.display()),
        })?;
        fn parse<T: serde::de::DeserializeOwned>(
            path: &Path,
            what: &str,
            v: serde_json::Value,
        ) -> Result<T> {
            serde_json::from_value(v).map_err(|e| EvalError::BadReport {
                detail: format!("{} {what}: {e}", path.display()),
            })
        }
        let config: ModelConfig = parse(&path, "config", meta["config"].clone())?;
        let head: ProbeHead = parse(&path, "head", meta["head"].clone())?;
        let names: Vec<String> = parse(&path, "param_names", meta["param_names"].clone())?;
        let mut entries = Vec::with_capacity(names.len());
        for name in names {
            let t = read_tensor::<f32>(&dir.join("encoder").join(format!("{name}.vtns")))?;
            entries.push((name, t));
        }
        Ok(Self {
            config,
            params: Params::from_entries(entries)?,
            head,
        })
    }
}

impl FrameClassifier for ClassifierBundle {
    fn n_classes(&self) -> usize {
        self.head.n_classes
    }

    fn classify(&self, clip: &VideoClip, frame_index: usize) -> std::result::Result<Vec<f64>, String> {
        if frame_index >= clip.n_frames() {
            return Err(format!(
                "frame {frame_index} outside clip of {} frames",
                clip.n_frames()
            ));
        }
        let input = frame_input(clip, frame_index, self.config.input_size);
        let emb = embed_inputs(&self.config, &self.params, &[input], 1).map_err(|e| e.to_string())?;
        Ok(self.head.probabilities(emb.data()))
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::curation::{curate, CurationParams};
    use crate::datagen::{gen_corpus, GenConfig};
    use tempfile::TempDir;

    fn toy_blobs(n_per: usize, d: usize, gap: f64, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2 {
            let center = if class == 0 { -gap } else { gap };
            for _ in 0..n_per {
                for j in 0..d {
                    let c = if j == 0 { center } else { 0.0 };
                    data.push(c + rng.gen_range(-0.5..0.5));
                }
                labels.push(class);
            }
        }
        (Tensor::new(&[2 * n_per, d], data).unwrap(), labels)
    }

    fn quick_cfg() -> ProbeConfig {
        ProbeConfig {
            epochs: 15,
            batch_size: 16,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn separable_blobs_reach_perfect_accuracy() {
        let (features, labels) = toy_blobs(40, 4, 3.0, 1);
        let out = train_probe(&features, &labels, 2, &quick_cfg()).unwrap();
        assert_eq!(out.val_accuracy, 1.0, "sweep: {:?}", out.sweep);
        assert_eq!(accuracy(&out.head, &features, &labels), 1.0);
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        use rand::Rng;
        let (features, _) = toy_blobs(150, 6, 2.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let labels: Vec<usize> = (0..300).map(|_| rng.gen_range(0..3usize)).collect();
        let out = train_probe(&features, &labels, 3, &quick_cfg()).unwrap();
        let p = 1.0 / 3.0;
        let n_val = 75.0f64;
        let sigma = (p * (1.0 - p) / n_val).sqrt();
        assert!(
            (out.val_accuracy - p).abs() <= 3.0 * sigma,
            "accuracy {} vs chance {p} (sigma {sigma})",
            out.val_accuracy
        );
    }

    #[test]
    fn single_class_data_rejected() {
        let (features, _) = toy_blobs(10, 3, 1.0, 3);
        let labels = vec![0usize; 20];
        assert!(matches!(
            train_probe(&features, &labels, 2, &quick_cfg()),
            Err(EvalError::DegenerateData { .. })
        ));
    }

    #[test]
    fn out_of_range_labels_and_bad_config_rejected() {
        let (features, mut labels) = toy_blobs(5, 3, 1.0, 4);
        labels[0] = 9;
        assert!(matches!(
            train_probe(&features, &labels, 2, &quick_cfg()),
            Err(EvalError::BadInput { .. })
        ));
        let bad = ProbeConfig {
            lrs: vec![],
            ..ProbeConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sweep_covers_every_rate_and_is_deterministic() {
        let (features, labels) = toy_blobs(30, 4, 1.0, 5);
        let cfg = quick_cfg();
        let a = train_probe(&features, &labels, 2, &cfg).unwrap();
        let b = train_probe(&features, &labels, 2, &cfg).unwrap();
        assert_eq!(a.sweep.len(), cfg.lrs.len());
        assert_eq!(a.sweep, b.sweep);
        assert_eq!(a.head, b.head);
        assert!(cfg.lrs.contains(&a.best_lr));
    }

    #[test]
    fn probing_never_touches_the_encoder() {
        let dir = TempDir::new().unwrap();
        let gen = GenConfig {
            size: 16,
            duration_s: 1.0,
            n_categories: 4,
            ..GenConfig::default()
        };
        let train_manifest = gen_corpus(&gen, 8, &dir.path().join("train"), 1).unwrap();
        let eval_manifest = gen_corpus(&gen, 4, &dir.path().join("eval"), 2).unwrap();
        let cfg = tiny_config();
        let state = tiny_state(9);
        let train = featurize_dataset(&cfg, &state, dir.path(), &train_manifest);
        let report = evaluate_probe(
            &cfg,
            &state.online,
            &train,
            &dir.path().join("eval"),
            &eval_manifest,
            2,
            &quick_cfg(),
            5,
        )
        .unwrap();
        assert_eq!(report.checksum_before, report.checksum_after);
        assert!(report.eval_accuracy >= 0.0 && report.eval_accuracy <= 1.0);
        assert_eq!(report.train_rows, 16);
    }

    fn featurize_dataset(
        cfg: &ModelConfig,
        state: &crate::model::ModelState,
        root: &Path,
        manifest: &crate::datagen::CorpusManifest,
    ) -> FrameDataset {
        super::super::featurize_corpus(cfg, &state.online, &root.join("train"), manifest, 2, 3, 8)
            .unwrap()
    }

    #[test]
    fn classifier_bundle_roundtrips_and_curates() {
        let dir = TempDir::new().unwrap();
        let gen = GenConfig {
            size: 16,
            duration_s: 1.0,
            n_categories: 4,
            ..GenConfig::default()
        };
        let manifest = gen_corpus(&gen, 6, dir.path(), 3).unwrap();
        let cfg = tiny_config();
        let state = tiny_state(11);
        let ds = super::super::featurize_corpus(&cfg, &state.online, dir.path(), &manifest, 2, 1, 8)
            .unwrap();
        let out = train_probe(&ds.features, &ds.labels, ds.n_classes, &quick_cfg()).unwrap();
        let bundle = ClassifierBundle {
            config: cfg.clone(),
            params: state.online.clone(),
            head: out.head.clone(),
        };
        let bdir = dir.path().join("classifier");
        bundle.save(&bdir).unwrap();
        let loaded = ClassifierBundle::load(&bdir).unwrap();
        assert_eq!(loaded.head, bundle.head);
        assert_eq!(loaded.params.entries(), bundle.params.entries());

        let clip = manifest.load_clip(dir.path(), 0).unwrap();
        let probs = loaded.classify(&clip, 0).unwrap();
        assert_eq!(probs.len(), 4);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(loaded.classify(&clip, 999).is_err());

        let curated = curate(
            dir.path(),
            &manifest,
            &loaded,
            &CurationParams {
                min_duration_s: 0.0,
                ..CurationParams::default()
            },
        )
        .unwrap();
        assert_eq!(curated.total, 6);
    }
}

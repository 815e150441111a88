//! Run configuration: one JSON document covering every stage, plus the seed
//! derivation that makes any run reproducible from (config, seed) alone.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use vito_core::curation::CurationParams;
use vito_core::datagen::GenConfig;
use vito_core::evalharness::probe::ProbeConfig;
use vito_core::evalharness::seg::PropagationParams;
use vito_core::hash::derive_seed;
use vito_core::trainer::PretrainConfig;

/// Seed streams, one per stage. Deriving every stage seed from the root
/// keeps a single `--seed` sweep coherent across a whole pipeline run.
pub mod stream {
    pub const GEN_TRAIN: u64 = 0x01;
    pub const GEN_PROBE: u64 = 0x02;
    pub const GEN_EVAL: u64 = 0x03;
    pub const PRETRAIN: u64 = 0x10;
    pub const RANDOM_ENCODER: u64 = 0x18;
    pub const PROBE_FRAMES: u64 = 0x20;
    pub const PROBE_TRAIN: u64 = 0x21;
    pub const STIMULI: u64 = 0x30;
    pub const ROBUST: u64 = 0x40;
    pub const CLIP_EVAL: u64 = 0x50;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub gen: GenConfig,
    /// Unlabeled-style pretraining split; tags carry the configured noise.
    pub train_clips: usize,
    /// Labeled held-out split for training probes and the curation classifier.
    pub probe_clips: usize,
    /// Labeled held-out split every evaluation scores against.
    pub eval_clips: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            train_clips: 2000,
            probe_clips: 400,
            eval_clips: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub config: ProbeConfig,
    /// Frames sampled per clip when building frame-level datasets.
    pub frames_per_clip: usize,
    /// Encoder forward batch while featurizing.
    pub batch: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            config: ProbeConfig::default(),
            frames_per_clip: 4,
            batch: 32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegSection {
    /// Scale tap whose feature map drives label propagation.
    pub tap: usize,
    pub propagation: PropagationParams,
    pub boundary_tolerance: usize,
    pub max_clips: Option<usize>,
}

impl Default for SegSection {
    fn default() -> Self {
        Self {
            tap: 0,
            propagation: PropagationParams::default(),
            boundary_tolerance: 1,
            max_clips: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencySection {
    pub max_clips: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencySection {
    pub n_per_condition: usize,
}

impl Default for ConsistencySection {
    fn default() -> Self {
        Self { n_per_condition: 32 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustSection {
    pub frames_per_clip: usize,
    pub max_clips: Option<usize>,
}

impl Default for RobustSection {
    fn default() -> Self {
        Self {
            frames_per_clip: 2,
            max_clips: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipSection {
    pub frames_per_clip: usize,
}

impl Default for ClipSection {
    fn default() -> Self {
        Self { frames_per_clip: 8 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seg: SegSection,
    pub saliency: SaliencySection,
    pub consistency: ConsistencySection,
    pub robust: RobustSection,
    pub clip: ClipSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub data: DataSection,
    pub curation: CurationParams,
    pub pretrain: PretrainConfig,
    pub probe: ProbeSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            data: DataSection::default(),
            curation: CurationParams::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeSection::default(),
            eval: EvalSection::default(),
        };
        cfg.derive_stage_seeds();
        cfg
    }
}

impl RunConfig {
    /// Load a config file, or defaults when no path is given. The optional
    /// override replaces the root seed before stage seeds are derived.
    pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("read config {}", p.display()))?;
                let mut de = serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize(&mut de).map_err(|e| {
                    anyhow!("config {}: at {}: {}", p.display(), e.path(), e.inner())
                })?
            }
            None => Self::default(),
        };
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        cfg.derive_stage_seeds();
        Ok(cfg)
    }

    /// Stage seeds always come from the root. Nested `seed` fields in the
    /// file are replaced here; the resolved config written next to the
    /// outputs records the values actually used.
    fn derive_stage_seeds(&mut self) {
        self.pretrain.train.seed = derive_seed(self.seed, stream::PRETRAIN);
        self.probe.config.seed = derive_seed(self.seed, stream::PROBE_TRAIN);
    }

    pub fn stage_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }

    /// Generator settings for the labeled probe/eval splits: identical to
    /// the training generator except tags are exact.
    pub fn clean_gen(&self) -> GenConfig {
        GenConfig {
            tag_noise: 0.0,
            ..self.data.gen.clone()
        }
    }

    pub fn save_resolved(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .with_context(|| format!("create {}", parent.display()))?;
            }
        }
        let mut text = serde_json::to_string_pretty(self).context("serialize config")?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("write {}", path.display()))
    }
}

/// Where the resolved config lands: inside directory outputs, next to file
/// outputs.
pub fn resolved_config_path(out: &Path, out_is_dir: bool) -> PathBuf {
    if out_is_dir {
        out.join("config.resolved.json")
    } else {
        out.with_extension("config.resolved.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_have_derived_stage_seeds() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.pretrain.train.seed, derive_seed(0, stream::PRETRAIN));
        assert_eq!(cfg.probe.config.seed, derive_seed(0, stream::PROBE_TRAIN));
    }

    #[test]
    fn seed_override_rederives_stage_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, "{\"seed\": 3}").unwrap();
        let cfg = RunConfig::load(Some(&path), Some(7)).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pretrain.train.seed, derive_seed(7, stream::PRETRAIN));
        assert_eq!(cfg.probe.config.seed, derive_seed(7, stream::PROBE_TRAIN));
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, "{\"data\": {\"gen\": {\"sizee\": 32}}}").unwrap();
        let err = RunConfig::load(Some(&path), None).unwrap_err().to_string();
        assert!(err.contains("data.gen"), "missing key path: {err}");
        assert!(err.contains("sizee"), "missing offending key: {err}");
        assert!(!err.contains('\n'), "error must stay on one line: {err}");
    }

    #[test]
    fn resolved_config_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(None, Some(11)).unwrap();
        let path = resolved_config_path(dir.path(), true);
        cfg.save_resolved(&path).unwrap();
        let back = RunConfig::load(Some(&path), None).unwrap();
        assert_eq!(
            serde_json::to_string(&back).unwrap(),
            serde_json::to_string(&cfg).unwrap()
        );
    }

    #[test]
    fn file_outputs_get_a_sibling_resolved_config() {
        let p = resolved_config_path(Path::new("runs/curation.json"), false);
        assert_eq!(p, Path::new("runs/curation.config.resolved.json"));
    }
}

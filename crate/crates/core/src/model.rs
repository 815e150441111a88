//! The contrastive video network: a strided conv encoder tapped at several
//! scales, per-scale attention pooling, a projector MLP, an EMA target copy
//! of all three, and the multi-view InfoNCE objective.
//!
//! Forward functions are generic over the element type so the same graph
//! runs in f32 for training and f64 for finite-difference checks.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ema_update_named, Scalar, Tape, Tensor, TensorError, ValueId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {detail}")]
    BadConfig { detail: String },
    #[error("parameter {name} not found")]
    MissingParam { name: String },
    #[error("invalid model input: {detail}")]
    BadInput { detail: String },
    #[error("contrastive loss needs at least one negative")]
    EmptyNegatives,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Encoder, pooling, and projector hyperparameters.
///
/// `scale_taps` counts how many of the final stages feed attention pooling;
/// `attention: false` swaps the learned masks for uniform ones, turning the
/// pooling into a spatial mean. Together these expose the pooling ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub stage_widths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub kernel: usize,
    pub scale_taps: usize,
    pub attention: bool,
    pub attn_hidden: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// Normalize projections to unit length. Off together with temperature 1
    /// gives the bare dot-product objective.
    pub normalize: bool,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stage_widths: vec![32, 64, 128, 256],
            stage_strides: vec![2, 2, 2, 2],
            kernel: 3,
            scale_taps: 2,
            attention: true,
            attn_hidden: 64,
            proj_hidden: 256,
            proj_dim: 64,
            normalize: true,
            temperature: 0.1,
        }
    }
}

impl ModelConfig {
    /// Default sizing with the pooling strategy swapped out.
    pub fn pooling_variant(scale_taps: usize, attention: bool) -> Self {
        Self {
            scale_taps,
            attention,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(ModelError::BadConfig { detail });
        if self.stage_widths.is_empty() {
            return bad("no encoder stages".into());
        }
        if self.stage_strides.len() != self.stage_widths.len() {
            return bad(format!(
                "{} strides for {} stages",
                self.stage_strides.len(),
                self.stage_widths.len()
            ));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.scale_taps == 0 || self.scale_taps > self.stage_widths.len() {
            return bad(format!(
                "scale_taps {} outside 1..={}",
                self.scale_taps,
                self.stage_widths.len()
            ));
        }
        if self.attn_hidden == 0 || self.proj_hidden == 0 || self.proj_dim == 0 {
            return bad("zero-width mlp".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        self.stage_shapes().map(|_| ())
    }

    /// (channels, height, width) after each stage, starting from RGB input.
    pub fn stage_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let pad = self.kernel / 2;
        let (mut h, mut w) = (self.input_size, self.input_size);
        let mut shapes = Vec::with_capacity(self.stage_widths.len());
        for (i, (&c, &stride)) in self.stage_widths.iter().zip(&self.stage_strides).enumerate() {
            if stride == 0 || h + 2 * pad < self.kernel || w + 2 * pad < self.kernel {
                return Err(ModelError::BadConfig {
                    detail: format!("stage {i} collapses a {h}x{w} input"),
                });
            }
            h = (h + 2 * pad - self.kernel) / stride + 1;
            w = (w + 2 * pad - self.kernel) / stride + 1;
            if h == 0 || w == 0 || c == 0 {
                return Err(ModelError::BadConfig {
                    detail: format!("stage {i} produces an empty map"),
                });
            }
            shapes.push((c, h, w));
        }
        Ok(shapes)
    }

    /// Shapes of the maps that feed attention pooling, outermost first.
    pub fn tap_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let shapes = self.stage_shapes()?;
        Ok(shapes[shapes.len() - self.scale_taps..].to_vec())
    }

    /// Width of the concatenated pooled vector entering the projector.
    pub fn concat_dim(&self) -> Result<usize> {
        Ok(self.tap_shapes()?.iter().map(|&(c, _, _)| c).sum())
    }
}

/// A named, ordered set of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<E: Scalar> {
    entries: Vec<(String, Tensor<E>)>,
}

impl<E: Scalar> Params<E> {
    pub fn from_entries(entries: Vec<(String, Tensor<E>)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(ModelError::BadConfig {
                    detail: format!("duplicate parameter name {name}"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor<E>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor<E>)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some((_, t)) => {
                *t = value;
                Ok(())
            }
            None => Err(ModelError::MissingParam { name: name.into() }),
        }
    }

    pub fn cast<F: Scalar>(&self) -> Params<F> {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

fn he_uniform<E: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let lim = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| E::from_f64c(rng.gen_range(-lim..=lim)))
}

/// Fresh parameters for a config. Conv and MLP weights draw fan-in-scaled
/// uniforms; biases start at zero. The final attention layer starts at zero
/// so initial masks are uniform and pooling begins as a spatial mean.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.kernel;
    let mut entries: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut c_in = 3;
    for (i, &c_out) in cfg.stage_widths.iter().enumerate() {
        entries.push((format!("enc.{i}.w"), he_uniform(&[c_out, c_in, k, k], c_in * k * k, &mut rng)));
        entries.push((format!("enc.{i}.b"), Tensor::zeros(&[c_out])));
        c_in = c_out;
    }
    if cfg.attention {
        for (s, &(c, _, _)) in cfg.tap_shapes()?.iter().enumerate() {
            entries.push((format!("attn.{s}.w1"), he_uniform(&[cfg.attn_hidden, c], c, &mut rng)));
            entries.push((format!("attn.{s}.b1"), Tensor::zeros(&[cfg.attn_hidden])));
            entries.push((format!("attn.{s}.w2"), Tensor::zeros(&[1, cfg.attn_hidden])));
            entries.push((format!("attn.{s}.b2"), Tensor::zeros(&[1])));
        }
    }
    let concat = cfg.concat_dim()?;
    entries.push(("proj.w1".into(), he_uniform(&[cfg.proj_hidden, concat], concat, &mut rng)));
    entries.push(("proj.b1".into(), Tensor::zeros(&[cfg.proj_hidden])));
    entries.push(("proj.w2".into(), he_uniform(&[cfg.proj_dim, cfg.proj_hidden], cfg.proj_hidden, &mut rng)));
    entries.push(("proj.b2".into(), Tensor::zeros(&[cfg.proj_dim])));
    Params::from_entries(entries)
}

/// Online and target parameter sets. The optimizer only ever writes the
/// online side; the target follows through [`ModelState::update_target`].
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub online: Params<f32>,
    pub target: Params<f32>,
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let online = init_params(&config, seed)?;
        let target = online.clone();
        Ok(Self { config, online, target })
    }

    /// target <- tau * target + (1 - tau) * online, across every tensor.
    pub fn update_target(&mut self, tau: f64) -> Result<()> {
        ema_update_named(self.target.entries_mut(), self.online.entries(), tau as f32)?;
        Ok(())
    }
}

/// Parameters registered on a tape, addressable by name.
pub struct Bound {
    ids: Vec<(String, ValueId)>,
}

impl Bound {
    pub fn new(ids: Vec<(String, ValueId)>) -> Self {
        Self { ids }
    }

    pub fn id(&self, name: &str) -> Result<ValueId> {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
            .ok_or_else(|| ModelError::MissingParam { name: name.into() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ValueId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// Put every parameter on the tape. Trainable parameters record gradients;
/// the target branch binds with `trainable = false` and stays out of the
/// backward sweep entirely.
pub fn bind_params<E: Scalar>(tape: &Tape<E>, params: &Params<E>, trainable: bool) -> Bound {
    Bound::new(
        params
            .entries()
            .iter()
            .map(|(n, t)| {
                let id = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), id)
            })
            .collect(),
    )
}

/// Run the conv stages and return the tapped feature maps, outermost first.
pub fn encode<E: Scalar>(
    tape: &Tape<E>,
    cfg: &ModelConfig,
    params: &Bound,
    frames: ValueId,
) -> Result<Vec<ValueId>> {
    let shape = tape.shape_of(frames);
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.input_size || shape[3] != cfg.input_size {
        return Err(ModelError::BadInput {
            detail: format!(
                "frames {:?} do not match [B, 3, {}, {}]",
                shape, cfg.input_size, cfg.input_size
            ),
        });
    }
    let pad = cfg.kernel / 2;
    let mut x = frames;
    let mut maps = Vec::with_capacity(cfg.stage_widths.len());
    for i in 0..cfg.stage_widths.len() {
        let w = params.id(&format!("enc.{i}.w"))?;
        let b = params.id(&format!("enc.{i}.b"))?;
        x = tape.conv2d(x, w, Some(b), cfg.stage_strides[i], pad)?;
        x = tape.relu(x);
        maps.push(x);
    }
    Ok(maps[cfg.stage_widths.len() - cfg.scale_taps..].to_vec())
}

/// A spatial weighting over one feature map and the vector it pools to.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// [B, H, W], nonnegative, each sample summing to 1.
    pub mask: ValueId,
    /// [B, C] convex combination of the map's location vectors.
    pub pooled: ValueId,
}

/// Weight the map by a per-location softmax mask and pool. The mask comes
/// from a 2-layer MLP over single locations of this map alone, so it cannot
/// mix information across samples, scales, or views. With attention off the
/// mask is uniform and the result is the spatial mean.
pub fn attend_pool<E: Scalar>(
    tape: &Tape<E>,
    cfg: &ModelConfig,
    params: &Bound,
    scale: usize,
    map: ValueId,
) -> Result<AttentionOutput> {
    let shape = tape.shape_of(map);
    if shape.len() != 4 {
        return Err(ModelError::BadInput {
            detail: format!("feature map {shape:?} is not [B, C, H, W]"),
        });
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let mask = if cfg.attention {
        let rows = tape.map_rows(map)?;
        let w1 = params.id(&format!("attn.{scale}.w1"))?;
        let b1 = params.id(&format!("attn.{scale}.b1"))?;
        let w2 = params.id(&format!("attn.{scale}.w2"))?;
        let b2 = params.id(&format!("attn.{scale}.b2"))?;
        let hidden = tape.relu(tape.linear(rows, w1, b1)?);
        let logits = tape.linear(hidden, w2, b2)?;
        let logits = tape.reshape(logits, &[b, h, w])?;
        tape.spatial_softmax(logits)?
    } else {
        let u = E::from_f64c(1.0 / (h * w) as f64);
        tape.constant(Tensor::full(&[b, h, w], u))
    };
    let pooled = tape.weighted_pool(map, mask)?;
    Ok(AttentionOutput { mask, pooled })
}

/// A projected embedding, unit-length when `normalized` is set.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    /// [B, proj_dim]
    pub z: ValueId,
    pub normalized: bool,
}

/// Concatenate the pooled scales and push them through the projector MLP.
pub fn project<E: Scalar>(
    tape: &Tape<E>,
    cfg: &ModelConfig,
    params: &Bound,
    pooled: &[ValueId],
) -> Result<Projection> {
    if pooled.len() != cfg.scale_taps {
        return Err(ModelError::BadInput {
            detail: format!("{} pooled vectors for {} scale taps", pooled.len(), cfg.scale_taps),
        });
    }
    let x = if pooled.len() == 1 {
        pooled[0]
    } else {
        tape.concat_cols(pooled)?
    };
    let w1 = params.id("proj.w1")?;
    let b1 = params.id("proj.b1")?;
    let w2 = params.id("proj.w2")?;
    let b2 = params.id("proj.b2")?;
    let hidden = tape.relu(tape.linear(x, w1, b1)?);
    let mut z = tape.linear(hidden, w2, b2)?;
    if cfg.normalize {
        z = tape.l2_normalize_rows(z)?;
    }
    Ok(Projection {
        z,
        normalized: cfg.normalize,
    })
}

/// Everything one branch computes for one view batch.
#[derive(Clone, Debug)]
pub struct ViewForward {
    /// Tapped feature maps, one per scale.
    pub maps: Vec<ValueId>,
    /// Attention masks, one per scale.
    pub masks: Vec<ValueId>,
    /// Pooled vectors, one per scale.
    pub pooled: Vec<ValueId>,
    pub projection: Projection,
}

pub fn forward_view<E: Scalar>(
    tape: &Tape<E>,
    cfg: &ModelConfig,
    params: &Bound,
    frames: ValueId,
) -> Result<ViewForward> {
    let maps = encode(tape, cfg, params, frames)?;
    let mut masks = Vec::with_capacity(maps.len());
    let mut pooled = Vec::with_capacity(maps.len());
    for (s, &map) in maps.iter().enumerate() {
        let out = attend_pool(tape, cfg, params, s, map)?;
        masks.push(out.mask);
        pooled.push(out.pooled);
    }
    let projection = project(tape, cfg, params, &pooled)?;
    Ok(ViewForward {
        maps,
        masks,
        pooled,
        projection,
    })
}

/// Contrastive loss for one embedding against one positive and explicit
/// negatives: -log( exp(zi.zj/t) / (exp(zi.zj/t) + sum_n exp(zi.zn/t)) ).
///
/// The positive and negatives enter as plain values, so gradients flow
/// through `z_online` only.
pub fn infonce<E: Scalar>(
    tape: &Tape<E>,
    z_online: ValueId,
    z_target: ValueId,
    negatives: &[ValueId],
    tau: f64,
) -> Result<ValueId> {
    if negatives.is_empty() {
        return Err(ModelError::EmptyNegatives);
    }
    if !(tau > 0.0) {
        return Err(ModelError::BadInput {
            detail: format!("temperature {tau} must be positive"),
        });
    }
    let as_row = |id: ValueId| -> Result<Vec<E>> {
        let t = tape.value(id);
        match t.rank() {
            1 => Ok(t.data().to_vec()),
            2 if t.shape()[0] == 1 => Ok(t.data().to_vec()),
            _ => Err(ModelError::BadInput {
                detail: format!("projection {:?} is not a single vector", t.shape()),
            }),
        }
    };
    let dim = as_row(z_online)?.len();
    let mut candidates = as_row(z_target)?;
    for &n in negatives {
        candidates.extend(as_row(n)?);
    }
    if candidates.len() != (negatives.len() + 1) * dim {
        return Err(ModelError::BadInput {
            detail: "projection dimensions disagree".into(),
        });
    }
    let online = if tape.shape_of(z_online).len() == 1 {
        tape.reshape(z_online, &[1, dim])?
    } else {
        z_online
    };
    let cand = tape.constant(Tensor::new(&[negatives.len() + 1, dim], candidates)?);
    let logits = tape.matmul_nt(online, cand)?;
    let scaled = tape.scale(logits, E::from_f64c(1.0 / tau));
    let log_probs = tape.log_softmax_rows(scaled)?;
    let pick = tape.constant(Tensor::from_fn(&[1, negatives.len() + 1], |i| {
        if i == 0 {
            E::one()
        } else {
            E::zero()
        }
    }));
    let positive = tape.sum_all(tape.mul(log_probs, pick)?);
    Ok(tape.scale(positive, -E::one()))
}

/// Batched contrastive loss for one ordered view pair. Row b of the logit
/// matrix scores sample b's online projection against every sample's target
/// projection; the diagonal is the positive and the other samples in the
/// batch act as negatives. Returns the batch mean.
pub fn pair_infonce<E: Scalar>(
    tape: &Tape<E>,
    z_online: ValueId,
    z_target: ValueId,
    tau: f64,
) -> Result<ValueId> {
    let (so, st) = (tape.shape_of(z_online), tape.shape_of(z_target));
    if so.len() != 2 || so != st {
        return Err(ModelError::BadInput {
            detail: format!("projection batches {so:?} vs {st:?}"),
        });
    }
    if so[0] < 2 {
        return Err(ModelError::EmptyNegatives);
    }
    if !(tau > 0.0) {
        return Err(ModelError::BadInput {
            detail: format!("temperature {tau} must be positive"),
        });
    }
    let logits = tape.matmul_nt(z_online, z_target)?;
    let scaled = tape.scale(logits, E::from_f64c(1.0 / tau));
    let log_probs = tape.log_softmax_rows(scaled)?;
    let positives = tape.diag(log_probs)?;
    let total = tape.sum_all(positives);
    Ok(tape.scale(total, E::from_f64c(-1.0 / so[0] as f64)))
}

#[derive(Clone, Debug)]
pub struct MultiviewOutput {
    /// Sum of the per-pair batch-mean losses over all ordered view pairs.
    pub loss: ValueId,
    /// Online-branch forward of each view.
    pub views: Vec<ViewForward>,
    /// Target projections per view, re-entered as constants.
    pub target_projections: Vec<ValueId>,
    pub pair_count: usize,
}

/// Full objective over a batch of view sets: run both branches on every
/// view, then sum pair_infonce over all ordered pairs (i, j), i != j, with
/// view i from the online branch and view j from the target branch.
///
/// Target projections are read out and re-entered as constants, so the
/// target branch is detached no matter how its parameters were bound.
pub fn multiview_loss<E: Scalar>(
    tape: &Tape<E>,
    cfg: &ModelConfig,
    online: &Bound,
    target: &Bound,
    view_frames: &[ValueId],
    tau: f64,
) -> Result<MultiviewOutput> {
    if view_frames.len() < 2 {
        return Err(ModelError::BadInput {
            detail: format!("{} views, need at least 2", view_frames.len()),
        });
    }
    let views: Vec<ViewForward> = view_frames
        .iter()
        .map(|&f| forward_view(tape, cfg, online, f))
        .collect::<Result<_>>()?;
    let target_projections: Vec<ValueId> = view_frames
        .iter()
        .map(|&f| {
            let fwd = forward_view(tape, cfg, target, f)?;
            Ok(tape.constant(tape.value(fwd.projection.z)))
        })
        .collect::<Result<_>>()?;
    let mut loss: Option<ValueId> = None;
    let mut pair_count = 0;
    for i in 0..views.len() {
        for j in 0..views.len() {
            if i == j {
                continue;
            }
            let term = pair_infonce(tape, views[i].projection.z, target_projections[j], tau)?;
            loss = Some(match loss {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
            pair_count += 1;
        }
    }
    Ok(MultiviewOutput {
        loss: loss.expect("at least two views"),
        views,
        target_projections,
        pair_count,
    })
}

/// Finite-difference check of the whole training graph in f64: encoder
/// stages, per-scale attention pooling, projector, and the multi-view
/// contrastive loss, at randomly drawn parameters and frames. The target
/// branch uses an independent draw so the detachment path is exercised.
pub fn verify_graph_gradients(
    cfg: &ModelConfig,
    n_views: usize,
    batch: usize,
    tau: f64,
    opts: &crate::tensor::GradCheckOptions,
) -> Result<crate::tensor::GradCheckReport> {
    use crate::tensor::{grad_check_sampled, ParamSpec};

    cfg.validate()?;
    let shapes = init_params(cfg, 0)?;
    let specs: Vec<ParamSpec> = shapes
        .entries()
        .iter()
        .map(|(n, t)| ParamSpec::new(n.clone(), t.shape()).range(-0.5, 0.5))
        .collect();
    let names: Vec<String> = shapes.entries().iter().map(|(n, _)| n.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xf1a7);
    let frames: Vec<Tensor<f64>> = (0..n_views)
        .map(|_| {
            Tensor::from_fn(&[batch, 3, cfg.input_size, cfg.input_size], |_| {
                rng.gen_range(0.0..1.0)
            })
        })
        .collect();
    let target = init_params(cfg, 99)?.cast::<f64>();
    let report = grad_check_sampled(&specs, opts, |tape, ids| {
        let online = Bound::new(names.iter().cloned().zip(ids.iter().copied()).collect());
        let target = bind_params(tape, &target, false);
        let views: Vec<ValueId> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let out = multiview_loss(tape, cfg, &online, &target, &views, tau)
            .expect("forward should build");
        Ok(out.loss)
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_sampled, GradCheckOptions, ParamSpec};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            input_size: 8,
            stage_widths: vec![4, 6],
            stage_strides: vec![2, 2],
            scale_taps: 2,
            attn_hidden: 4,
            proj_hidden: 8,
            proj_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn random_frames(batch: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[batch, 3, size, size], |_| rng.gen_range(0.0..=1.0))
    }

    #[test]
    fn default_config_taps_expected_shapes() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.tap_shapes().unwrap(), vec![(128, 8, 8), (256, 4, 4)]);
        assert_eq!(cfg.concat_dim().unwrap(), 384);
    }

    #[test]
    fn default_param_count_is_frozen() {
        let params = init_params(&ModelConfig::default(), 0).unwrap();
        assert_eq!(params.numel(), 528_258);
    }

    #[test]
    fn encode_matches_tap_shapes_and_duplicates_rows() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let tape = Tape::<f32>::new();
        let bound = bind_params(&tape, &params, false);
        let one = random_frames(1, 8, 2);
        let frames = tape.constant(Tensor::from_fn(&[2, 3, 8, 8], |i| one.data()[i % one.numel()]));
        let maps = encode(&tape, &cfg, &bound, frames).unwrap();
        assert_eq!(tape.shape_of(maps[0]), vec![2, 4, 4, 4]);
        assert_eq!(tape.shape_of(maps[1]), vec![2, 6, 2, 2]);
        for &m in &maps {
            let t = tape.value(m);
            let half = t.numel() / 2;
            assert_eq!(t.data()[..half], t.data()[half..]);
        }
    }

    #[test]
    fn encode_rejects_wrong_input_size() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let tape = Tape::<f32>::new();
        let bound = bind_params(&tape, &params, false);
        let frames = tape.constant(Tensor::zeros(&[2, 3, 16, 16]));
        assert!(matches!(
            encode(&tape, &cfg, &bound, frames),
            Err(ModelError::BadInput { .. })
        ));
    }

    #[test]
    fn zero_final_attention_layer_pools_to_spatial_mean() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 3).unwrap();
        let tape = Tape::<f32>::new();
        let bound = bind_params(&tape, &params, false);
        let map = tape.constant(Tensor::from_fn(&[1, 4, 2, 2], |i| i as f32));
        let out = attend_pool(&tape, &cfg, &bound, 0, map).unwrap();
        let pooled = tape.value(out.pooled);
        for c in 0..4 {
            assert!((pooled.data()[c] - (4 * c) as f32 - 1.5).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_attention_selects_one_location() {
        let cfg = ModelConfig {
            attn_hidden: 1,
            ..tiny_cfg()
        };
        let mut params = init_params(&cfg, 4).unwrap();
        params.set("attn.0.w1", Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        params.set("attn.0.b1", Tensor::zeros(&[1])).unwrap();
        params.set("attn.0.w2", Tensor::new(&[1, 1], vec![40.0]).unwrap()).unwrap();
        params.set("attn.0.b2", Tensor::new(&[1], vec![-20.0]).unwrap()).unwrap();
        let tape = Tape::<f32>::new();
        let bound = bind_params(&tape, &params, false);
        let map = tape.constant(
            Tensor::new(&[1, 2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 7.0, 3.0, 5.0, 9.0]).unwrap(),
        );
        let out = attend_pool(&tape, &cfg, &bound, 0, map).unwrap();
        let pooled = tape.value(out.pooled);
        assert!((pooled.data()[0] - 1.0).abs() < 1e-4, "{:?}", pooled.data());
        assert!((pooled.data()[1] - 7.0).abs() < 1e-4, "{:?}", pooled.data());
    }

    #[test]
    fn masks_sum_to_one_and_match_manual_pooling() {
        let cfg = tiny_cfg();
        let mut params = init_params(&cfg, 5).unwrap();
        for s in 0..2 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + s as u64);
            params
                .set(
                    &format!("attn.{s}.w2"),
                    Tensor::from_fn(&[1, cfg.attn_hidden], |_| rng.gen_range(-1.0..=1.0)),
                )
                .unwrap();
        }
        let tape = Tape::<f32>::new();
        let bound = bind_params(&tape, &params, false);
        let frames = tape.constant(random_frames(3, 8, 6));
        let maps = encode(&tape, &cfg, &bound, frames).unwrap();
        for (s, &map) in maps.iter().enumerate() {
            let out = attend_pool(&tape, &cfg, &bound, s, map).unwrap();
            let mask = tape.value(out.mask);
            let (b, h, w) = (tape.shape_of(map)[0], tape.shape_of(map)[2], tape.shape_of(map)[3]);
            let c = tape.shape_of(map)[1];
            for bi in 0..b {
                let slice = &mask.data()[bi * h * w..(bi + 1) * h * w];
                let sum: f32 = slice.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "scale {s} sample {bi} sums to {sum}");
                assert!(slice.iter().all(|&v| v >= 0.0));
            }
            let pooled = tape.value(out.pooled);
            let feat = tape.value(map);
            for bi in 0..b {
                for ci in 0..c {
                    let mut manual = 0.0f32;
                    for p in 0..h * w {
                        manual += mask.data()[bi * h * w + p] * feat.data()[(bi * c + ci) * h * w + p];
                    }
                    assert!((manual - pooled.data()[bi * c + ci]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn attention_is_per_sample() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 7).unwrap();
        let run = |second: Tensor<f32>| {
            let tape = Tape::<f32>::new();
            let bound = bind_params(&tape, &params, false);
            let first = random_frames(1, 8, 8);
            let frames = tape.constant(Tensor::from_fn(&[2, 3, 8, 8], |i| {
                if i < first.numel() {
                    first.data()[i]
                } else {
                    second.data()[i - first.numel()]
                }
            }));
            let fwd = forward_view(&tape, &cfg, &bound, frames).unwrap();
            let z = tape.value(fwd.projection.z);
            z.data()[..cfg.proj_dim].to_vec()
        };
        let a = run(random_frames(1, 8, 9));
        let b = run(random_frames(1, 8, 10));
        assert_eq!(a, b);
    }

    #[test]
    fn single_scale_and_mean_pool_variants_run() {
        for (taps, attention) in [(1, false), (1, true), (2, false), (2, true)] {
            let cfg = ModelConfig {
                scale_taps: taps,
                attention,
                ..tiny_cfg()
            };
            let params = init_params(&cfg, 11).unwrap();
            let tape = Tape::<f32>::new();
            let bound = bind_params(&tape, &params, false);
            let frames = tape.constant(random_frames(2, 8, 12));
            let fwd = forward_view(&tape, &cfg, &bound, frames).unwrap();
            assert_eq!(fwd.maps.len(), taps);
            assert_eq!(tape.shape_of(fwd.projection.z), vec![2, 4]);
            if !attention {
                let mask = tape.value(fwd.masks[0]);
                let first = mask.data()[0];
                assert!(mask.data().iter().all(|&v| (v - first).abs() < 1e-7));
            }
        }
    }

    #[test]
    fn projections_are_unit_length() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 13).unwrap();
        let tape = Tape::<f32>::new();
        let bound = bind_params(&tape, &params, false);
        let frames = tape.constant(random_frames(4, 8, 14));
        let fwd = forward_view(&tape, &cfg, &bound, frames).unwrap();
        assert!(fwd.projection.normalized);
        let z = tape.value(fwd.projection.z);
        for b in 0..4 {
            let row = &z.data()[b * 4..(b + 1) * 4];
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "sample {b} norm {norm}");
        }
    }

    #[test]
    fn zero_projector_emits_zero_before_normalization() {
        let cfg = ModelConfig {
            normalize: false,
            ..tiny_cfg()
        };
        let mut params = init_params(&cfg, 15).unwrap();
        params.set("proj.w1", Tensor::zeros(&[8, 10])).unwrap();
        params.set("proj.w2", Tensor::zeros(&[4, 8])).unwrap();
        let tape = Tape::<f32>::new();
        let bound = bind_params(&tape, &params, false);
        let frames = tape.constant(random_frames(2, 8, 16));
        let fwd = forward_view(&tape, &cfg, &bound, frames).unwrap();
        assert!(!fwd.projection.normalized);
        assert!(tape.value(fwd.projection.z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infonce_matches_hand_evaluated_cases() {
        let tape = Tape::<f64>::new();
        let zi = tape.param(Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap());
        let zj = tape.constant(Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap());
        let n1 = tape.constant(Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap());
        let n2 = tape.constant(Tensor::new(&[3], vec![0.0, 0.0, 1.0]).unwrap());
        let loss = infonce(&tape, zi, zj, &[n1, n2], 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        assert!((expected - 0.55144).abs() < 1e-5);

        let all_equal = tape.constant(Tensor::new(&[3], vec![0.3, -0.2, 0.9]).unwrap());
        let loss = infonce(&tape, zi, all_equal, &[all_equal, all_equal, all_equal], 0.7).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_saturates_to_zero_on_dominant_positive() {
        let tape = Tape::<f64>::new();
        let zi = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let zj = tape.constant(Tensor::new(&[2], vec![80.0, 0.0]).unwrap());
        let neg = tape.constant(Tensor::new(&[2], vec![-80.0, 0.0]).unwrap());
        let loss = infonce(&tape, zi, zj, &[neg], 1.0).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn infonce_rejects_empty_negatives() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(infonce(&tape, z, z, &[], 1.0), Err(ModelError::EmptyNegatives)));
        let batch = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            pair_infonce(&tape, batch, batch, 1.0),
            Err(ModelError::EmptyNegatives)
        ));
    }

    #[test]
    fn infonce_gradient_skips_target_and_negatives() {
        let tape = Tape::<f64>::new();
        let zi = tape.param(Tensor::new(&[2], vec![0.6, -0.1]).unwrap());
        let zj = tape.param(Tensor::new(&[2], vec![0.2, 0.9]).unwrap());
        let neg = tape.param(Tensor::new(&[2], vec![-0.4, 0.3]).unwrap());
        let loss = infonce(&tape, zi, zj, &[neg], 0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.of(&tape, zi).data().iter().any(|&g| g != 0.0));
        assert!(grads.of(&tape, zj).data().iter().all(|&g| g == 0.0));
        assert!(grads.of(&tape, neg).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batched_pair_loss_matches_per_sample_infonce() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let b = 4;
        let d = 5;
        let zo = Tensor::<f64>::from_fn(&[b, d], |_| rng.gen_range(-1.0..=1.0));
        let zt = Tensor::<f64>::from_fn(&[b, d], |_| rng.gen_range(-1.0..=1.0));
        let tau = 0.3;
        let tape = Tape::<f64>::new();
        let batched = pair_infonce(
            &tape,
            tape.constant(zo.clone()),
            tape.constant(zt.clone()),
            tau,
        )
        .unwrap();
        let mut manual = 0.0;
        for i in 0..b {
            let row = |t: &Tensor<f64>, r: usize| {
                Tensor::new(&[d], t.data()[r * d..(r + 1) * d].to_vec()).unwrap()
            };
            let zi = tape.constant(row(&zo, i));
            let zj = tape.constant(row(&zt, i));
            let negs: Vec<ValueId> = (0..b)
                .filter(|&j| j != i)
                .map(|j| tape.constant(row(&zt, j)))
                .collect();
            manual += tape.value(infonce(&tape, zi, zj, &negs, tau).unwrap()).item();
        }
        assert!((tape.value(batched).item() - manual / b as f64).abs() < 1e-12);
    }

    #[test]
    fn multiview_counts_ordered_pairs_and_sums_equal_terms() {
        let cfg = tiny_cfg();
        let state = ModelState::init(cfg.clone(), 19).unwrap();
        let tape = Tape::<f32>::new();
        let online = bind_params(&tape, &state.online, true);
        let target = bind_params(&tape, &state.target, false);
        let frames = tape.constant(random_frames(3, 8, 20));
        let out = multiview_loss(&tape, &cfg, &online, &target, &[frames, frames, frames], 0.1).unwrap();
        assert_eq!(out.pair_count, 6);
        let single = pair_infonce(&tape, out.views[0].projection.z, out.target_projections[0], 0.1).unwrap();
        let total = tape.value(out.loss).item();
        assert!((total - 6.0 * tape.value(single).item()).abs() < 1e-4, "{total}");

        let two = multiview_loss(&tape, &cfg, &online, &target, &[frames, frames], 0.1).unwrap();
        assert_eq!(two.pair_count, 2);
    }

    #[test]
    fn multiview_total_ignores_view_order() {
        let cfg = tiny_cfg();
        let state = ModelState::init(cfg.clone(), 21).unwrap();
        let views: Vec<Tensor<f64>> = (0..3).map(|s| random_frames(3, 8, 30 + s).cast()).collect();
        let online64 = state.online.cast::<f64>();
        let target64 = state.target.cast::<f64>();
        let total = |order: [usize; 3]| {
            let tape = Tape::<f64>::new();
            let online = bind_params(&tape, &online64, false);
            let target = bind_params(&tape, &target64, false);
            let ids: Vec<ValueId> = order.iter().map(|&i| tape.constant(views[i].clone())).collect();
            let out = multiview_loss(&tape, &cfg, &online, &target, &ids, 0.1).unwrap();
            tape.value(out.loss).item()
        };
        assert!((total([0, 1, 2]) - total([2, 0, 1])).abs() < 1e-9);
    }

    #[test]
    fn multiview_loss_is_positive_and_detached_from_target() {
        let cfg = tiny_cfg();
        let state = ModelState::init(cfg.clone(), 23).unwrap();
        let tape = Tape::<f32>::new();
        let online = bind_params(&tape, &state.online, true);
        let target = bind_params(&tape, &state.target, true);
        let views: Vec<ValueId> = (0..2)
            .map(|s| tape.constant(random_frames(4, 8, 40 + s)))
            .collect();
        let out = multiview_loss(&tape, &cfg, &online, &target, &views, 0.1).unwrap();
        assert!(tape.value(out.loss).item() > 0.0);
        let grads = tape.backward(out.loss).unwrap();
        let mut online_nonzero = false;
        for (name, id) in online.iter() {
            if grads.of(&tape, id).data().iter().any(|&g| g != 0.0) {
                online_nonzero = true;
            }
            let _ = name;
        }
        assert!(online_nonzero);
        for (name, id) in target.iter() {
            assert!(
                grads.of(&tape, id).data().iter().all(|&g| g == 0.0),
                "target grad leaked into {name}"
            );
        }
    }

    #[test]
    fn update_target_moves_toward_online() {
        let cfg = tiny_cfg();
        let mut state = ModelState::init(cfg, 25).unwrap();
        let before = state.target.get("enc.0.w").unwrap().clone();
        let shape = before.shape().to_vec();
        state
            .online
            .set("enc.0.w", Tensor::full(&shape, 1.0))
            .unwrap();
        state.update_target(0.9).unwrap();
        let after = state.target.get("enc.0.w").unwrap();
        for (i, (&b, &a)) in before.data().iter().zip(after.data().iter()).enumerate() {
            let expected = 0.9 * b + 0.1;
            assert!((a - expected).abs() < 1e-6, "element {i}");
        }
    }

    #[test]
    fn whole_graph_check_passes_with_three_views() {
        let cfg = ModelConfig {
            normalize: true,
            ..tiny_cfg()
        };
        let opts = GradCheckOptions {
            max_elements: 6,
            ..GradCheckOptions::default()
        };
        let report = verify_graph_gradients(&cfg, 3, 2, 0.2, &opts).unwrap();
        assert!(report.elements_checked > 0);
        assert!(
            report.ok() && report.max_rel_err < 1e-5,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn tiny_graph_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            normalize: true,
            ..tiny_cfg()
        };
        let shapes = init_params(&cfg, 0).unwrap();
        let specs: Vec<ParamSpec> = shapes
            .entries()
            .iter()
            .map(|(n, t)| ParamSpec::new(n.clone(), t.shape()).range(-0.5, 0.5))
            .collect();
        let names: Vec<String> = shapes.entries().iter().map(|(n, _)| n.clone()).collect();
        let frames: Vec<Tensor<f64>> = (0..2).map(|s| random_frames(2, 8, 60 + s).cast()).collect();
        let target = init_params(&cfg, 99).unwrap().cast::<f64>();
        let opts = GradCheckOptions {
            max_elements: 24,
            ..GradCheckOptions::default()
        };
        let report = grad_check_sampled(&specs, &opts, |tape, ids| {
            let online = Bound::new(names.iter().cloned().zip(ids.iter().copied()).collect());
            let target = bind_params(tape, &target, false);
            let views: Vec<ValueId> = frames.iter().map(|f| tape.constant(f.clone())).collect();
            let out = multiview_loss(tape, &cfg, &online, &target, &views, 0.2)
                .expect("forward should build");
            Ok(out.loss)
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {}",
            report.max_rel_err
        );
    }
}

//! Self-supervised video pretraining on procedurally generated clips:
//! data generation, temporal view sampling, augmentation, a small
//! convolutional encoder with multi-scale attention pooling, contrastive
//! training against an EMA target, corpus curation, and the evaluation
//! harness (probing, label propagation, saliency, robustness, consistency).

pub mod augment;
pub mod curation;
pub mod datagen;
pub mod evalharness;
pub mod hash;
pub mod model;
pub mod trainer;
pub mod tensor;

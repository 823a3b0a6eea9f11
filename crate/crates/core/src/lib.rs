//! Streaming test-time OOD detection: a static ID dictionary of informative
//! inlier features, a bounded priority-queue dictionary of latent outliers,
//! and k-th neighbor cosine scores against both.

pub mod bench;
pub mod eval;
pub mod features;
pub mod id_dict;
pub mod kernels;
pub mod ood_dict;
pub mod scorer;
pub mod stream;
pub mod synth;

//! Unsupervised domain adaptation for two-stream video action recognition
//! with learned informative-patch selection.
//!
//! The pipeline has two halves:
//!
//! 1. **Feature extraction** ([`streams`]): per frame and per stream (RGB,
//!    flow), a lightweight *glancer* scans the whole frame, a *policy* head
//!    proposes a patch center, a differentiable bilinear crop ([`sampler`])
//!    extracts the patch, and a *focuser* encodes it. Global-frame encodings,
//!    local-patch encodings, and an audio embedding are fused by
//!    concatenation into one feature per segment.
//! 2. **Adaptation** ([`relation`], [`adaptation`]): fused frame features
//!    pass through a shared embedding and multi-scale temporal relation
//!    modules. Domain discriminators at frame, relation, and video level —
//!    trained through a gradient reversal layer — align source and target;
//!    relation-level domain entropy drives residual attention over scales,
//!    and attentive entropy regularizes class predictions on both domains.
//!
//! Training runs in two phases ([`harness`]): the extractor is trained on
//! source labels alone, then frozen while the adaptation stack trains on
//! source labels plus both-domain adversarial and entropy losses. A synthetic
//! two-domain moving-sprites dataset ([`data`]) with verb = motion pattern
//! and noun = sprite shape exercises the whole system end to end.
//!
//! All gradients flow through a small reverse-mode tape ([`autodiff`]) over
//! `ndarray` tensors; no external ML framework is involved.

pub mod adaptation;
pub mod autodiff;
pub mod container;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod relation;
pub mod sampler;
pub mod streams;

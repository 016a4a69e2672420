#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Three-hop chain-of-thought multimodal classifier for misogynous memes.
//!
//! The pipeline: scene-graph relations and meme text are turned into three
//! prompts (emotion, target, context); the LLM rationales are encoded into
//! token matrices; text and image features are fused with factorized
//! bilinear pooling and refined by three stacked cross-attention stages;
//! a softmax head is trained with cross-entropy plus contrastive alignment
//! terms.

pub mod config;
pub mod cot;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod fusion;
pub mod numerics;
pub mod objective;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

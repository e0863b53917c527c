//! Closed-loop multi-agent latent rollout training over a synthetic 2D driving world.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`] and [`tokens`]: continuous world types and the four-token state encoding.
//! - [`world`]: scenario generation and the rule-based expert that produces logged clips.
//! - [`grad`]: a small reverse-mode autodiff engine with AdamW.
//! - [`model`]: encoder, next-state head, VAE planner pool and background motion head.
//! - [`rollout`], [`losses`], [`rewards`], [`grpo`]: the training stages.
//! - [`eval`]: closed-loop evaluation and ablations.
//! - [`config`], [`pipeline`], [`metrics`], [`report`]: run orchestration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod eval;
pub mod geometry;
pub mod grad;
pub mod grpo;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rewards;
pub mod rng;
pub mod rollout;
pub mod tokens;
pub mod train;
pub mod world;

#[cfg(test)]
mod testutil;

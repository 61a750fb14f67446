//! Sparse interpolated experts over a frozen pre-trained network.
//!
//! A pool of hard-concrete masks carves sparse slices out of one shared dense
//! modulation; a small prototype-conditioned router picks a weighted
//! combination per few-shot task. Training is constrained: each mask keeps a
//! target sparsity enforced by a resettable Lagrange multiplier.

pub mod adapt;
pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod diffcore;
pub mod eval;
pub mod experts;
pub mod fewshot;
pub mod l0mask;
pub mod metaopt;
pub mod optim;
pub mod params;
pub mod rng;
pub mod router;
pub mod tasks;

//! Subclass contrastive metric learning.
//!
//! Each subject carries two subclasses of samples: non-injured (the enrolled
//! gallery) and injured (the probes). The subclass contrastive loss pulls the
//! two subclasses of a subject together and pushes the subclasses of different
//! subjects apart. This crate bundles everything needed to train and evaluate
//! that objective without a tensor framework:
//!
//! - [`dataset`]: subclass-structured datasets, a synthetic generator, CSV
//!   ingestion and the subject-disjoint split / gallery-probe protocol.
//! - [`mining`]: genuine and imposter sets, contrastive pairs, triplets, batches.
//! - [`losses`]: the subclass contrastive loss plus contrastive and triplet
//!   baselines, all with closed-form gradients.
//! - [`model`]: a small fully-connected embedding network with manual
//!   backpropagation, a frozen-prefix mask and binary checkpoints.
//! - [`training`]: Adam / SGD and the epoch loop.
//! - [`evaluation`]: identification (CMC, rank-k), verification (GAR@FAR),
//!   inter-class distance, extended gallery and the repeated sub-sampling harness.
//! - [`report`]: run configuration, JSON/CSV/SVG report emission used by the CLI.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod mining;
pub mod model;
pub mod report;
pub mod seed;
pub mod training;

pub use error::{Error, Result};

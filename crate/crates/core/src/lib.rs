//! Multi-verb action label representations and their evaluation.
//!
//! Actions are labelled over a fixed verb vocabulary in three ways: a
//! majority-voted one-hot label (SL), a thresholded binary multi-label (ML),
//! and a soft-assigned multi-label of annotator fractions (SAML). A small
//! regressor maps precomputed video features onto these label vectors, and
//! the evaluation module scores predictions by overlap accuracy and by
//! retrieval mAP in both directions, treating the label space as an
//! embedding space.
//!
//! The crate is organised around that flow:
//!
//! * [`label_space`] — vocabulary, vote records, label builders;
//! * [`dataset`] — feature files, synthetic data, stratified folds;
//! * [`regressor`] — forward pass, losses, gradients, training;
//! * [`evaluation`] — accuracy, rankings, mAP, query enumeration.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod label_space;
pub mod regressor;

pub use dataset::{FoldAssignment, SyntheticSpec, VideoInstance};
pub use error::{Error, Result};
pub use evaluation::{EmbeddedVideo, EvalReport, QueryVector, RankedList};
pub use label_space::{LabelScheme, LabelVector, VerbVocabulary, VoteRecord};
pub use regressor::{LossKind, ModelParams, OutputActivation, TrainConfig};

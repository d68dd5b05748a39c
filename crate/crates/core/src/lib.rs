//! Multi-level deep ensemble (MLDE) toolkit for dermoscopy lesion classification.
//!
//! Four branch classifiers see the same lesion at four scales (the whole image
//! and three centered crops). Their positive-class probabilities are combined by
//! a learned convex weighting, trained end to end with the branches. Seven such
//! ensembles, one per diagnosis, form a one-vs-rest bank that is scored by the
//! mean of the seven ROC AUCs.

pub mod backbone;
pub mod cli;
pub mod dataset;
pub mod evaluation;
pub mod fusion;
pub mod imaging;
pub mod synth;
pub mod training;

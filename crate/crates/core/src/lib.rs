//! Glaucoma screening on OCT volumes by unifying structure classification
//! with visual-field regression.
//!
//! Stage 1 ([`embedding`]) trains a B-scan classifier, pools its features into
//! one vector per volume and [`surrogate`] copies visual-field labels from the
//! nearest same-class neighbour to volumes that lack them. Stage 2
//! ([`mtl_model`], [`training`]) trains a multi-task network on B-scan
//! triplets; [`evaluation`] scores it at image and case level.

pub mod config;
pub mod data_model;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod mtl_model;
pub mod nn;
pub mod surrogate;
pub mod training;

pub use error::{Error, Result};

//! Zero-shot coordination in ad hoc teams with successor features,
//! difference rewards and generalized policy improvement.

pub mod baselines;
pub mod diffreward;
pub mod env;
pub mod error;
pub mod experiment;
pub mod gpi;
pub mod library;
pub mod mmdp;
pub mod par;
pub mod seed;
pub mod sfql;
pub mod stats;
pub mod vector;

pub use error::{Error, Result};
pub use vector::{FeatureVector, WeightVector};

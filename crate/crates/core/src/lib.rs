//! Negative-dominant contrastive learning for imbalanced domain
//! generalization: prediction-space losses with analytic gradients,
//! hard-negative mixup, imbalanced split plans, margin and discrepancy
//! diagnostics, and a small deterministic MLP trainer.

pub mod audit;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod negmine;
pub mod numkit;
pub mod splits;
pub mod trainer;

pub use error::{Error, Result};

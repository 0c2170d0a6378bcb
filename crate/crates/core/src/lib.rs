//! A world-model driven self-improving policy pipeline at desk scale.
//!
//! A learned dynamics model and a progress/TD value model form an imagined
//! environment in which an advantage-conditioned, flow-matching chunk policy is
//! refined. Ground-truth synthetic manipulation tasks provide offline data and
//! final evaluation.

pub mod approx;
pub mod domain;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod eval;
pub mod norm;
pub mod pipeline;
pub mod policy;
pub mod seeding;
pub mod selfimprove;
pub mod value;

pub use error::{Error, Result};

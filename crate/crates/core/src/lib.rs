//! Laplace-approximation regularizers for low-rank fine-tuning.
//!
//! A pre-trained network is fine-tuned through LoRA adapters while a
//! quadratic penalty `λ Σ_l vec(ΔW_l)ᵀ F_l vec(ΔW_l)` anchors each adapted
//! layer to its pre-trained weight. `F_l` is the identity (L2-SP), a diagonal
//! empirical Fisher (EWC), or a Kronecker-factored Fisher (KFAC) estimated on
//! the pre-training task.

pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fisher;
pub mod lora;
pub mod model;
pub mod oracle;
pub mod penalty;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Matrix, Tape, Var};

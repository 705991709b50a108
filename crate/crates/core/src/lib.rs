//! Tessellated kernel learning.
//!
//! A tessellated kernel is `k(x, y) = integral over [a, b] of
//! N(z, x)^T P N(z, y) dz`, where `N` stacks monomials gated by the two
//! orthants at `x`. The kernel is linear in the PSD matrix `P`, so kernel
//! learning for SVM classification and regression splits into
//!
//! - a dual QP over the SVM coefficients with `P` fixed ([`dual`]), and
//! - an analytic step over trace-constrained `P` with the coefficients fixed
//!   ([`kernel_step`]),
//!
//! which [`train`] alternates with a line search until the duality gap closes.

pub mod basis;
pub mod cv;
pub mod data;
pub mod dual;
pub mod error;
pub mod kernel;
pub mod kernel_step;
pub mod linalg;
pub mod model_io;
pub mod oracle;
pub mod synth;
pub mod train;

pub use basis::{DomainBox, TkBasis};
pub use data::{Dataset, LabelColumn, Scaler};
pub use dual::{DualProblem, DualSolution, SmoParams, Task};
pub use error::{Result, TklError};
pub use kernel::{eval_kernel, gram_matrix, KernelParams};
pub use train::{train, TkModel, TrainConfig};

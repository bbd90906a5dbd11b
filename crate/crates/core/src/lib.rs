//! Multi-task variational information bottleneck, from the tensors up.
//!
//! This crate implements everything below the experiment harness:
//!
//! * [`tensor`] / [`linalg`] / [`graph`] — a dense row-major tensor type and a
//!   reverse-mode autodiff tape covering exactly the layer set the
//!   architectures need (conv, max-pool, dense, batch norm, softmax
//!   cross-entropy, and the elementwise glue for the loss terms).
//! * [`optim`] — named parameters and a bias-corrected Adam optimizer.
//! * [`vib`] — the Gaussian latent layer: reparameterized sampling, the
//!   closed-form KL rate against a standard normal prior, a Monte-Carlo KL
//!   estimator used as a test oracle, and the single-task VIB objective.
//! * [`multitask`] — homoscedastic task uncertainties `s_k = log σ_k²`, the
//!   scaled softmax, the uncertainty-weighted task loss, the combined
//!   MTVIB objective, and the GS/UWL baseline objectives.
//! * [`models`] — builders for the STL / MTL / STVIB / MTVIB architectures at
//!   paper and desk scale, producing a [`models::ModelBundle`] that the
//!   harness trains.
//! * [`attack`] — FGSM input perturbation driven by each model's own loss.
//! * [`data`] — IDX ingestion, 36×36 two-digit overlay construction, and a
//!   compact binary cache format for generated datasets.
//! * [`check`] — central finite-difference gradient checking used by the
//!   test suites.
//!
//! Numeric precision is a constructor-level choice: every value-carrying type
//! is generic over [`tensor::Element`], instantiated with `f64` by the test
//! oracles and `f32` by the training harness.
//!
//! Everything is deterministic given seeds: execution is single-threaded,
//! floating-point reductions run in a fixed order, and all randomness flows
//! through explicitly seeded [`rng`] streams.

// Activation and gradient buffers run to ~100 MB per training step and are
// freed at step end; the system allocator returns blocks that large to the
// kernel immediately, so every step pays its page faults again. mimalloc
// keeps the spans cached across steps. Applies to every binary linking this
// crate; opt out with `default-features = false`.
#[cfg(feature = "fast-alloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod attack;
pub mod check;
pub mod data;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod models;
pub mod multitask;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod vib;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Element, Tensor};

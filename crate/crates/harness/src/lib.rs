//! Experiment harness for the multi-task variational information bottleneck:
//! dataset construction, training of every baseline variant, FGSM robustness
//! sweeps, and CSV/SVG reporting. The `mtvib` binary is a thin CLI over
//! these modules.

pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod runio;
pub mod svg;
pub mod sweep;
pub mod synth;
pub mod train;

pub use error::{HarnessError, Result};

/// Training element type. Accuracy-critical oracles run in f64 inside the
/// core crate's tests; the experiment loops run single precision for speed.
pub type Elem = f32;

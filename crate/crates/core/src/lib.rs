//! Black-box physical attack on infrared pedestrian detectors using rotated
//! rectangular "infrared blocks".
//!
//! The pipeline is:
//!
//! * [`patch`] describes blocks (anchor, pixel value, relative length, angle),
//!   the flat genome encoding and the rotated-rectangle geometry.
//! * [`raster`] turns blocks into pixel coverage and composites them onto a
//!   grayscale image.
//! * [`eot`] samples and applies the transformation distribution used to make
//!   fitness robust to small physical deviations.
//! * [`oracle`] is the black-box detector contract: builtin stubs, the
//!   newline-delimited JSON wire protocol, ensembles and query accounting.
//! * [`de`] is the differential evolution driver.
//! * [`eval`] computes ASR/AP over a dataset manifest, runs ablation grids and
//!   transfer evaluation.

pub mod de;
pub mod eot;
mod error;
pub mod eval;
pub mod oracle;
pub mod patch;
pub mod raster;
pub mod rng;

pub use de::{run_attack, run_attack_observed, AttackFailure, DeConfig, MutationBase, Population, RunTrace};
pub use eot::{EotConfig, TransformInstance};
pub use error::{Error, Result};
pub use oracle::{Detection, Detector, OracleHandle};
pub use patch::{Block, Genome, GenomeTemplate, MaskBox, Quantization, RotRect};
pub use raster::{CoverageMask, GrayImage};

//! Scribble-seeded image segmentation driven by partial cross-entropy plus
//! a relaxed normalized cut regularizer over a dense Gaussian RGBXY kernel.
//!
//! The dense kernel is applied in linear time with a permutohedral lattice
//! ([`lattice`]); [`oracle`] holds the exact quadratic-time reference.
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common instantiations.

pub mod affinity;
pub mod descent;
pub mod error;
pub mod formats;
pub mod imagery;
pub mod lattice;
pub mod losses;
pub mod oracle;
pub mod scalar;
pub mod synth;
pub mod verify;

pub use affinity::{AffinityFilter, Scaled};
pub use descent::{DescentConfig, DescentOutcome, EnergyTrace, HardLabeling, Init, KernelMode};
pub use error::{Error, Result};
pub use imagery::{
    embed_features, load_image, load_scribbles, FeatureMatrix, FeatureMode, Image, KernelSpec,
    ScribbleMask, UNLABELED,
};
pub use lattice::PermutohedralLattice;
pub use losses::{Energies, Logits, LossConfig, LossContext, LossReport, SoftSegmentation};
pub use oracle::DenseKernel;
pub use scalar::Scalar;

pub type FeatureMatrix32 = FeatureMatrix<f32>;
pub type FeatureMatrix64 = FeatureMatrix<f64>;
pub type SoftSegmentation32 = SoftSegmentation<f32>;
pub type SoftSegmentation64 = SoftSegmentation<f64>;
pub type Logits32 = Logits<f32>;
pub type Logits64 = Logits<f64>;
pub type Lattice32 = PermutohedralLattice<f32>;
pub type Lattice64 = PermutohedralLattice<f64>;

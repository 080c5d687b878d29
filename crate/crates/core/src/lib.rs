//! Non-Fourier SENSE reconstruction.
//!
//! The crate covers the complete prescan workflow (masks, coil sensitivities,
//! B0 maps, k-space filter) and the conjugate-gradient reconstruction that
//! applies the encoding operator through a phase matrix `P = exp(i K R)`,
//! either held in memory or recomputed block by block.

pub mod b0map;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fft;
pub mod grid;
pub mod kfilter;
pub mod masks;
pub mod recon;
pub mod sensmaps;
pub mod simulate;
pub mod sparse;
pub mod workflow;

pub use data::{
    Dataset, DatasetManifest, FieldMap, KSpaceFilter, MaskPair, PrescanData, RawCoilData,
    ReconImage, SensitivityMaps, SpatialBasis, TemporalBasis,
};
pub use error::{Error, Result};
pub use grid::Grid;
pub use num_complex::Complex64;

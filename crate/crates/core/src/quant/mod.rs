//! Fixed-point, affine and codebook quantization.

pub mod affine;
pub mod apply;
pub mod codebook;
pub mod fixed;
pub mod saturation;

pub use affine::{fit_affine, quantize_affine_int, AffineIntParams, AffineMode};
pub use apply::{apply_quantization, ActQuant, LayerQuant, QuantInfo, QuantOptions, Scheme, Targets};
pub use codebook::{build_codebook, Codebook};
pub use fixed::{fit_fixed_point, quantize_fixed, FixedPointParams};
pub use saturation::{calibrate_saturation, SaturationPolicy};

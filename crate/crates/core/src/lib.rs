//! Software model of a fused lookup-table-dequantization matmul engine.
//!
//! * [`numerics`]: binary16 emulation and the fragment MMA.
//! * [`nfquant`]: NormalFloat tables, group quantization, learned scales.
//! * [`restructure`]: offline reordering and bit-slice packing.
//! * [`lut_dequant`]: paired lookup tables and the bank-conflict model.
//! * [`streamk`]: Stream-K / Slice-K decomposition and the scheduler cursor.
//! * [`engine`]: the fused executor and traffic accounting.
//! * [`cli_io`]: FLTE files, raw matrices, presets and the `flute-sim` commands.

pub mod cli_io;
pub mod engine;
pub mod error;
pub mod lut_dequant;
pub mod matrix;
pub mod nfquant;
pub mod numerics;
pub mod restructure;
pub mod scalar;
pub mod streamk;

pub use error::{FluteError, Result};
pub use matrix::Matrix;
pub use nfquant::{LookupTable, QuantConfig, QuantizedMatrix};
pub use numerics::{Accum, Half};
pub use scalar::Real;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type HalfMatrix = Matrix<Half>;
pub type NfTable = LookupTable<f32>;
pub type NfTable64 = LookupTable<f64>;
pub type QuantizedMatrix32 = QuantizedMatrix<f32>;
pub type QuantizedMatrix64 = QuantizedMatrix<f64>;

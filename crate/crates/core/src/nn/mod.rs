//! Hand-written layers with explicit forward/backward passes and the three
//! networks built from them.

pub mod act;
pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod disc;
pub mod extractors;
pub mod gemm;
pub mod linear;
pub mod norm;
pub mod params;
pub mod pas;
pub mod spectral;
pub mod tensor;
pub mod unet;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use linear::Matrix;
pub use params::ParamStore;
pub use tensor::Tensor4;

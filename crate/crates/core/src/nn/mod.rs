//! Tensor building blocks shared by the generator, quantizer and
//! discriminators.

pub mod layers;
pub mod ops;
pub mod params;
pub mod spectral;

pub use params::ParamStore;

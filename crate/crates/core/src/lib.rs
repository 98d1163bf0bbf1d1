//! Video implicit neural representations built from interchangeable parts.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases at the bottom of this file fix the precision for common uses.

pub mod autodiff;
pub mod budget;
pub mod codec;
pub mod components;
pub mod error;
pub mod hypernerv;
pub mod metrics;
pub mod params;
pub mod scalar;
pub mod trainer;
pub mod video;
pub mod xinc;

pub use error::{NervError, Result};
pub use scalar::Scalar;

pub type Video32 = video::VideoTensor<f32>;
pub type Video64 = video::VideoTensor<f64>;
pub type Model32 = components::NervModel<f32>;
pub type Model64 = components::NervModel<f64>;
pub type HyperNerv32 = hypernerv::HyperNerv<f32>;
pub type HyperNerv64 = hypernerv::HyperNerv<f64>;
pub type Params32 = params::ParamStore<f32>;
pub type Params64 = params::ParamStore<f64>;

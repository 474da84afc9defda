pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod field;
pub mod model;
pub mod pafno;
pub mod rng;
pub mod spectral;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use field::{AxisName, AxisSpec, ComplexField, Field};
pub use model::{ModelConfig, ModelParams};
pub use pafno::{MixerConfig, MixerDomain, MixerMode, Nonlinearity, SpectralFilter};

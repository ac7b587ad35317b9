pub mod autodiff;
pub mod backbone;
pub mod caption;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod depth;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod seg;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use autodiff::{finite_diff_check, FiniteDiff, GradientMap, Graph, Var};
pub use error::{Error, Result};
pub use params::{Group, ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::{seeded_init, Init, Tensor};

//! Sparse triangular transport maps for learning conditional independence
//! graphs of non-Gaussian data.

pub mod basis;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod estimate;
pub mod experiments;
pub mod graphops;
pub mod linalg;
pub mod map;
pub mod precision;
pub mod quadrature;
pub mod samples;
pub mod scalar;
pub mod scaling;
pub mod sing;

pub use error::{Result, SingError};
pub use graphops::{Graph, Ordering, OrderingHeuristic};
pub use map::{MapComponent, SparsityPattern, TriangularMap};
pub use samples::SampleSet;
pub use scalar::Real;

pub type Map = TriangularMap<f64>;
pub type Map32 = TriangularMap<f32>;
pub type Samples = SampleSet<f64>;
pub type Samples32 = SampleSet<f32>;
pub use sing::{run_sing, SingConfig, SingOutput, SingTrace};

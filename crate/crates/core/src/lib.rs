pub mod ancona;
pub mod error;
pub mod floyd;
pub mod freeprod;
pub mod group;
pub mod measure;
pub mod numeric;
pub mod parabolic;
pub mod potential;
pub mod radial;
pub mod scalar;
pub mod window;

pub use error::{Error, Result};
pub use group::{Ball, Coset, FactorElement, FactorSpec, GroupElement, GroupSpec};
pub use scalar::Scalar;

pub use measure::{make_measure, FiniteMeasure, MeasureSpec};
pub use numeric::Interval;
pub use potential::{GreenEstimate, SpectralRadiusEstimate, Walk};

/// Double-precision measure used by every analytic routine.
pub type Measure = FiniteMeasure<f64>;
/// Single-precision measure, for cheap convolution tables.
pub type Measure32 = FiniteMeasure<f32>;
/// Exact rational measure, for oracle convolution tables.
pub type ExactMeasure = FiniteMeasure<num_rational::BigRational>;

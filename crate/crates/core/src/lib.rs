pub mod budget;
pub mod data;
pub mod error;
pub mod lms;
pub mod model;
pub mod numerics;
pub mod params;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use lms::{LanguageId, LmsLinear, Route, SynthesisMode};
pub use numerics::{Graph, Mat, Var};
pub use params::{Binder, ParamKind, Parameterized};
pub use scalar::Scalar;

/// Working precision of the model, training and data layers.
pub type Real = f64;
/// Matrix at working precision.
pub type Matrix = Mat<Real>;
/// Single-precision matrix.
pub type Matrix32 = Mat<f32>;
/// Autodiff graph at working precision.
pub type DiffGraph = Graph<Real>;

mod conv;
mod elementwise;
mod norm;
mod sample;
mod shape;

pub use elementwise::{sigmoid, softplus};
pub use norm::{NormKind, NORM_EPS};

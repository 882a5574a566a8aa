mod basic;
mod conv;
mod linalg;
mod nn;
mod sample;

pub use conv::Conv2dGeometry;
pub use nn::{log_softmax, softmax};

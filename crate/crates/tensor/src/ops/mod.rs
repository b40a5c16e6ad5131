pub(crate) mod conv;
mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod shape;

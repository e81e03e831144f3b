pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

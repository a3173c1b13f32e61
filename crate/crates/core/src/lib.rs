pub mod autodiff;
pub mod error;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod regularizer;
pub mod data;
pub mod model;
pub mod classify;
pub mod gradcheck;
pub mod cli;

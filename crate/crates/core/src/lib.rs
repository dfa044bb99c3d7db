pub mod augment;
pub mod autograd;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod forge;
pub mod loss;
pub mod nn;
pub mod ood;
pub mod runner;

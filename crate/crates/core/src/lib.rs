pub mod analysis;
pub mod baselines;
pub mod bgm;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod gamp;
pub mod model;
pub mod normal;
pub mod quantizer;
pub mod reconstruct;
pub mod rng;
pub mod sensing;
pub mod sparsify;

pub mod assocmem;
pub mod datagen;
pub mod laser;
pub mod linalg;
pub mod metrics;
pub mod montecarlo;
pub mod nets;
pub mod oracles;
pub mod par;
pub mod runner;
pub mod train;

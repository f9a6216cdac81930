pub mod attention;
pub mod blob;
pub mod checkpoint;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod pnm;
pub mod report;
pub mod sample;
pub mod scalar;
pub mod scenes;
pub mod tape;
pub mod tensor;
pub mod train;

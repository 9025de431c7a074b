pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod matrix;
pub mod memory;
pub mod model;
pub mod rng;
pub mod runconfig;
pub mod tape;

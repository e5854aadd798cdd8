pub mod checkpoint;
pub mod config;
pub mod data;
pub mod format;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub(crate) mod parallel;
pub mod tensor;
pub mod trainer;

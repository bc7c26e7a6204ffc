pub mod checkpoint;
pub mod dataset;
pub mod idx;

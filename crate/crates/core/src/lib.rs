//! Distributed checkpointing for nested trees of sharded dense arrays.

pub mod chunkstore;
pub mod coordination;
pub mod error;
pub mod json;
pub mod load;
pub mod save;
pub mod sharding;
pub mod storage;
pub mod training;
pub mod tree;

pub use error::{Error, Result};

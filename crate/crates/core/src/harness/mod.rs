pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod search;

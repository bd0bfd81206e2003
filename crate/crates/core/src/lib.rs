pub mod checkpoint;
pub mod cli;
pub mod cost;
pub mod exit;
pub mod model;
mod pattern;
pub mod pipeline;
pub mod prune;
pub mod search;
pub mod trainmath;

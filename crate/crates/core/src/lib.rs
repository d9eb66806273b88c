//! Synthetic dialogue-state-tracking data generation.

pub mod embed;
pub mod gateway;
pub mod jsonl;
pub mod model;
pub mod parse;
pub mod scenario;
pub mod dialogue;
pub mod annotate;
pub mod describe;
pub mod dataset;
pub mod icl;
pub mod eval;
pub mod sim;

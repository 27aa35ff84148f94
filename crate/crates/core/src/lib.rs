pub mod geo;
pub mod ingest;
pub mod matching;
pub mod matrix;
pub mod network;
pub mod pattern;
pub mod congestion;
pub mod synth;
pub mod export;
pub mod pipeline;

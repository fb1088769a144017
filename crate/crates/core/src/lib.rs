pub mod eval;
pub mod geo;
pub mod imagery;
pub mod ingest;
pub mod labeling;
pub mod mapping;
pub mod synth;

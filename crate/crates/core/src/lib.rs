pub mod eval;
pub mod impact;
pub mod ingest;
pub mod rng;
pub mod stratify;
pub mod types;
pub mod synth;

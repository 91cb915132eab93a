pub mod diffcore;
pub mod evalkit;
pub mod ingest;
pub mod labeler;
pub mod model;
pub mod par;
pub mod penalties;
pub mod sampler;
pub mod schema;
pub mod trainer;

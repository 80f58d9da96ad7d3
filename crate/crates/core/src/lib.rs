pub mod eval;
pub mod kv;
pub mod model;
pub mod pipeline;
pub mod profiler;
pub mod substrate;

pub mod compare;
pub mod eval;
pub mod generate;
pub mod profile;

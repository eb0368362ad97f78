//! Pipeline runner for bundle-generation knowledge distillation: LLM gateway,
//! file formats, manifests and the experiment grids.

pub mod embedding;
pub mod gateway;
pub mod grid;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod store;

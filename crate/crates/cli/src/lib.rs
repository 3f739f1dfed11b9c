//! Library side of the `imr` command: app registry, data generators, run
//! orchestration, manifests and output comparison.

pub mod apps;
pub mod compare;
pub mod datagen;
pub mod manifest;
pub mod runner;
pub mod text;

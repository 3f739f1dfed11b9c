//! Incremental MapReduce engine with a preserved map/reduce bipartite
//! graph, iterative jobs, change propagation control and checkpointed
//! recovery.

pub mod engine;
pub mod error;
pub mod faults;
pub mod incr_iter;
pub mod incremental;
pub mod iterative;
pub mod metrics;
pub mod mrbg;
pub mod partition;
pub mod pool;
pub mod record;
pub mod result;
pub mod run;
pub mod shuffle;

pub use error::{Error, Result};

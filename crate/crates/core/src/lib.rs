//! Benchmark harness and dual-graph evaluator for cross-platform GUI agents.
//!
//! Tasks are sub-goal DAGs ([`task_graph`]) built from templates
//! ([`synthesis`]); agents ([`agent`]) act on a simulated desktop/mobile
//! fleet ([`env`]), optionally primed with private-domain application
//! knowledge ([`knowledge`]); every episode is scored by [`eval`] and runs are
//! summarised by [`analysis`]. [`runner`] wires the pipeline together.

pub mod agent;
pub mod analysis;
pub mod checker;
pub mod env;
pub mod eval;
pub mod geometry;
pub mod knowledge;
pub mod platform;
pub mod runner;
pub mod schema;
pub mod synthesis;
pub mod task_graph;
pub mod trace;

pub use geometry::BoundingBox;
pub use platform::Platform;

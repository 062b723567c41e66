//! Device micro-benchmark, scaling driver and their CSV reports.

pub mod devbench;
pub mod pattern;
pub mod report;
pub mod scaling;

pub use devbench::{run_devbench, run_grid, DevbenchConfig, DevbenchGrid, DevbenchTarget};
pub use pattern::{fill_pattern, verify_pattern};
pub use report::{AccessPattern, DevbenchRow, Role, RwMix, ScalingMode, ScalingRow, Status, Timestep};
pub use scaling::{run_scaling, Launch, ScalingConfig, ScalingReport};

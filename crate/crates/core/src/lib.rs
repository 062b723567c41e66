//! In-situ data staging: versioned N-dimensional array regions shared between
//! writer and reader processes through staging servers with pluggable storage
//! tiers, plus device and scaling benchmark drivers.

pub mod geometry;
pub mod tier;
pub mod bench;
pub mod client;
pub mod directory;
pub mod protocol;

//! Seeded fixture generators with known ground truth.

pub mod dht;
pub mod probe;
pub mod sessions;

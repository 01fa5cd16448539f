//! Neural-collapse lab.
pub mod arch;
pub mod cli;
pub mod data;
pub mod experiments;
pub mod gufm;
pub mod metrics;
pub mod numerics;
pub mod synthesis;

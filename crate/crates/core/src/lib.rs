//! Functional-structural tree growth with source-sink allocation, Q/D-driven
//! topological plasticity and global parameter identification.

pub mod calibration;
pub mod cli;
pub mod io;
pub mod engine;
pub mod error;
pub mod model;
pub mod oracle;
pub mod plot;
pub mod source_sink;
pub mod targets;
pub mod topology;
pub mod validate;

pub use engine::{simulate, Engine, SimulationOutput, Topology};
pub use error::{ModelError, Result};
pub use model::{GrowthParameters, ScriptEntry, TargetDataset, ZoneRule, ZoneRuleSet};

use thiserror::Error;

/// Errors raised by the simulation and its numerical kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("allocation error: shoot demand is zero while {q_s} g is available for shoots")]
    Allocation { q_s: f64 },

    #[error("ring partition error: no ring sink can receive {q_r} g")]
    NoRingSink { q_r: f64 },

    #[error("degenerate geometry: zero internode length carries {wood} g of wood")]
    DegenerateGeometry { wood: f64 },

    #[error("no trunk script entry for growth unit {0}")]
    MissingScript(u32),

    #[error("trunk growth unit {gu}: {branches} scripted branches on {metamers} metamers")]
    ScriptOverflow { gu: u32, branches: u32, metamers: u32 },

    #[error("axis distribution: total {total} exceeds capacity {capacity}")]
    OverCapacity { total: u64, capacity: u64 },

    #[error("no environment factor for tree {0}")]
    MissingEnvironment(usize),

    #[error("target alignment failed, missing: {}", .0.join(", "))]
    Alignment(Vec<String>),

    #[error("{}", .0.join("\n"))]
    Parse(Vec<String>),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("unfittable: {0}")]
    Unfittable(String),

    #[error("cycle {cycle}: {source}")]
    AtCycle {
        cycle: u32,
        #[source]
        source: Box<ModelError>,
    },
}

impl ModelError {
    pub(crate) fn at_cycle(self, cycle: u32) -> Self {
        match self {
            e @ ModelError::AtCycle { .. } => e,
            e => ModelError::AtCycle {
                cycle,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

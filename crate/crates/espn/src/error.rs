use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum EspnError {
    #[error("shape mismatch in {layer}: expected {expected}, got {got}")]
    Shape {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("parameter vector has length {got}, network expects {expected}")]
    ParamSize { expected: usize, got: usize },

    #[error("non-finite value produced in {layer}")]
    NonFinite { layer: String },

    #[error("non-finite fitness while probing parameter {param_index}")]
    NonFiniteFitness { param_index: usize },

    #[error("update produced non-finite parameters; mean model left unchanged")]
    NonFiniteUpdate,

    #[error("label {label} has no support rows")]
    MissingClass { label: usize },

    #[error("cosine similarity undefined for a zero vector")]
    DegenerateVector,

    #[error("episode requests {requested} images per class but classes hold {available}")]
    EpisodeCapacity { requested: usize, available: usize },

    #[error("dataset integrity: {0}")]
    DatasetIntegrity(String),

    #[error("failed to ingest {count} image file(s): {first_paths:?}")]
    Ingestion {
        count: usize,
        first_paths: Vec<String>,
    },

    #[error("worker failed while evaluating candidate {candidate}: {source}")]
    WorkerFailure {
        candidate: usize,
        #[source]
        source: Box<EspnError>,
    },

    #[error("checkpoint file is not in the expected format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("per-step tensor bytes g must be positive to define crossover thresholds")]
    UndefinedThreshold,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EspnError>;

use crate::graph::{NodeId, ParamId, StochId};

/// Errors raised while building, differentiating or evaluating objectives.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("node {0:?} does not belong to this arena")]
    ForeignNode(NodeId),

    #[error("node {0:?} is out of range for this arena")]
    InvalidNode(NodeId),

    #[error("parameter {0:?} is not registered in this arena")]
    UnknownParam(ParamId),

    #[error("component {component} out of range for parameter {param:?} (dim {dim})")]
    ComponentOutOfRange {
        param: ParamId,
        component: usize,
        dim: usize,
    },

    #[error("binding is missing parameter {0:?}")]
    MissingParam(ParamId),

    #[error("binding for parameter {param:?} has length {got}, expected {expected}")]
    BindingLength {
        param: ParamId,
        expected: usize,
        got: usize,
    },

    #[error("no sample value for stochastic node {0:?}")]
    MissingSample(StochId),

    #[error("stochastic node {0:?} is not part of this graph")]
    UnknownStochastic(StochId),

    #[error("domain error at node {node:?}: {what}")]
    Domain { node: NodeId, what: &'static str },

    #[error("trajectory {index}: {source}")]
    Trajectory { index: usize, source: Box<Error> },

    #[error("enumeration needs 2^{count} outcomes, cap is 2^{cap}")]
    TooManyOutcomes { count: usize, cap: usize },

    #[error("invalid baseline for stochastic node {stoch:?}: {reason}")]
    InvalidBaseline { stoch: StochId, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

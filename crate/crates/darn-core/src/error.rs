use thiserror::Error;

/// Errors produced by form construction and the numerical operations.
#[derive(Debug, Error)]
pub enum FormError {
    #[error("vector length {got} does not match state count {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("node mass m[{index}] = {value} must be strictly positive")]
    NonPositiveMass { index: usize, value: f64 },

    #[error("killing weight kappa[{index}] = {value} must be nonnegative")]
    NegativeKilling { index: usize, value: f64 },

    #[error("edge ({x}, {y}) has negative conductance {weight}")]
    NegativeConductance { x: usize, y: usize, weight: f64 },

    #[error("edge ({x}, {y}) is a self-loop; conductances must have zero diagonal")]
    SelfLoop { x: usize, y: usize },

    #[error("edge ({x}, {y}) references a state outside 0..{n}")]
    EdgeOutOfRange { x: usize, y: usize, n: usize },

    #[error("alpha = {0} must be strictly positive")]
    NonPositiveAlpha(f64),

    #[error("alpha = {0} must be nonnegative")]
    NegativeAlpha(f64),

    #[error("time t = {0} must be nonnegative")]
    NegativeTime(f64),

    #[error("lambda = {0} must be nonnegative")]
    NegativeLambda(f64),

    #[error("hole {index} is empty")]
    EmptyHole { index: usize },

    #[error("holes {first} and {second} overlap (node {node})")]
    OverlappingHoles { first: usize, second: usize, node: usize },

    #[error("hole {index} repeats node {node}")]
    DuplicateHoleNode { index: usize, node: usize },

    #[error("hole {index} references node {node} outside 0..{n}")]
    HoleOutOfRange { index: usize, node: usize, n: usize },

    #[error("holes cover the whole state space; the retained set D must be nonempty")]
    NoRetainedStates,

    #[error("explicit mass for hole {index} is {value}; masses must be strictly positive")]
    NonPositiveHoleMass { index: usize, value: f64 },

    #[error("expected {expected} explicit hole masses, got {got}")]
    MassCountMismatch { expected: usize, got: usize },

    #[error("measure for hole {hole} must be strictly positive on node {node} (got {value})")]
    MeasureSupportMismatch { hole: usize, node: usize, value: f64 },

    #[error("expected {expected} per-hole measures, got {got}")]
    MeasureCountMismatch { expected: usize, got: usize },

    #[error("measure for hole {hole} has {got} weights but the hole has {expected} nodes")]
    MeasureLengthMismatch { hole: usize, expected: usize, got: usize },

    #[error("vector is not constant on hole {hole}: spread {spread:.3e} exceeds tolerance")]
    NotConstantOnHole { hole: usize, spread: f64 },

    #[error("interior system is singular at alpha = 0: some part of D neither reaches the holes nor is killed")]
    SingularInteriorSystem,

    #[error("state index {state} outside 0..{n}")]
    StateOutOfRange { state: usize, n: usize },

    #[error("horizon = {0} must be strictly positive")]
    NonPositiveHorizon(f64),

    #[error("times must be strictly increasing and start above 0 (times[{index}] = {value})")]
    NonIncreasingTimes { index: usize, value: f64 },

    #[error("expected {expected} test functions for {times} observation times, got {got}")]
    FunctionCountMismatch { expected: usize, times: usize, got: usize },

    #[error("initial measure must be nonnegative with positive total mass")]
    InvalidInitialMeasure,

    #[error("path count must be at least 1")]
    NoPaths,

    #[error("lambda schedule must be nonempty and strictly increasing")]
    BadSchedule,

    #[error("sweep needs at least one test function")]
    EmptyTestSet,

    #[error("sweep needs at least one alpha or one t probe")]
    EmptyProbeSet,

    #[error("forms are incompatible: {0}")]
    IncompatibleForms(String),

    #[error("lattice geometry too coarse: {0}")]
    GeometryTooCoarse(String),

    #[error("internal numerical failure: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, FormError>;

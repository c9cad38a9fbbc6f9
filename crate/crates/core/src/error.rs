//! Error type shared by every module of the crate.

use thiserror::Error;

/// Result alias used throughout `ndcl-core`.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // numeric kernel
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("degenerate vector")]
    DegenerateVector,
    #[error("invalid Beta parameter {0}")]
    InvalidBetaParameter(f64),
    #[error("invalid Gamma shape {0}")]
    InvalidGammaShape(f64),
    #[error("non-finite evaluation at coordinate {coord}")]
    NonFiniteEvaluation { coord: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    // losses
    #[error("degenerate anchor neighborhood at anchor {anchor}")]
    DegenerateAnchorNeighborhood { anchor: usize },
    #[error("anchor without negatives: {anchor}")]
    AnchorWithoutNegatives { anchor: usize },
    #[error("anchor without positives: {anchor}")]
    AnchorWithoutPositives { anchor: usize },
    #[error("zero similarity denominator at anchor {anchor}")]
    ZeroDenominator { anchor: usize },
    #[error("log of zero at anchor {anchor}, negative {negative}")]
    LogOfZero { anchor: usize, negative: usize },
    #[error("negatives coincide with anchor {anchor}")]
    NegativesCoincideWithAnchor { anchor: usize },
    #[error("infinite CE loss at sample {sample}")]
    InfiniteCeLoss { sample: usize },
    #[error("empty class set")]
    EmptyClassSet,
    #[error("degenerate prototype set")]
    DegeneratePrototypeSet,
    #[error("invalid trade-off {0}")]
    InvalidTradeOff(f64),
    #[error("gradient shape mismatch")]
    GradientShapeMismatch,
    #[error("batch needs at least two samples")]
    BatchTooSmall,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    // mining
    #[error("class {0} not in batch")]
    ClassNotInBatch(usize),
    #[error("empty class {0}")]
    EmptyClass(usize),
    #[error("no negatives available for class {0}")]
    NoNegativesAvailable(usize),
    #[error("invalid mining config: {0}")]
    InvalidMiningConfig(String),

    // splits
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
    #[error("class {0} eliminated")]
    ClassEliminated(usize),
    #[error("empty domain {0}")]
    EmptyDomain(usize),

    // diagnostics
    #[error("off-simplex input")]
    OffSimplex,
    #[error("degenerate series")]
    DegenerateSeries,
    #[error("no target samples")]
    NoTargetSamples,

    // trainer
    #[error("stale activation cache")]
    StaleCache,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("iteration {iteration}: non-finite loss ({dump})")]
    NonFiniteLoss { iteration: usize, dump: String },

    // text formats
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

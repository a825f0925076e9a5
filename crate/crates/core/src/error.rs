use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

/// Pipeline stage names used when an error is attributed to a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Calibration,
    Fisher,
    Merge,
    Deltas,
    Factorize,
    Prune,
    Package,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Calibration => "calibration",
            Stage::Fisher => "fisher",
            Stage::Merge => "merge",
            Stage::Deltas => "deltas",
            Stage::Factorize => "factorize",
            Stage::Prune => "prune",
            Stage::Package => "package",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Zero-sized matrix or a data buffer whose length disagrees with the shape.
    InvalidDimensions { rows: usize, cols: usize, len: usize },
    NonFinite { op: &'static str },
    ShapeMismatch { op: &'static str, detail: String },
    /// One-sided Jacobi sweeps exhausted without convergence.
    NoConvergence { rows: usize, cols: usize },
    NotSymmetric { dim: usize },
    NotPositiveDefinite { dim: usize, last_damping: f64 },
    SingularTriangular { index: usize },
    EmptyCalibration,
    InvalidParameter { name: &'static str, detail: String },
    DegenerateInput { op: &'static str },
    InfeasibleBudget { requested: f64, min: f64, max: f64 },
    /// Internal consistency violation, e.g. a trimmed expert's factor was requested.
    Invariant(String),
    Stage {
        stage: Stage,
        layer: Option<usize>,
        expert: Option<usize>,
        source: Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn at(self, stage: Stage, layer: Option<usize>, expert: Option<usize>) -> Error {
        Error::Stage { stage, layer, expert, source: Box::new(self) }
    }

    /// True for errors that come from numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NoConvergence { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::SingularTriangular { .. }
            | Error::NonFinite { .. }
            | Error::DegenerateInput { .. } => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidDimensions { rows, cols, len } => {
                write!(f, "invalid matrix dimensions {rows}x{cols} with {len} values")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NoConvergence { rows, cols } => {
                write!(f, "svd of {rows}x{cols} matrix did not converge")
            }
            Error::NotSymmetric { dim } => write!(f, "{dim}x{dim} gram matrix is not symmetric"),
            Error::NotPositiveDefinite { dim, last_damping } => write!(
                f,
                "{dim}x{dim} matrix not positive definite after damping {last_damping:e}"
            ),
            Error::SingularTriangular { index } => {
                write!(f, "triangular factor has zero diagonal at {index}")
            }
            Error::EmptyCalibration => write!(f, "calibration set is empty"),
            Error::InvalidParameter { name, detail } => write!(f, "invalid {name}: {detail}"),
            Error::DegenerateInput { op } => write!(f, "{op}: degenerate input"),
            Error::InfeasibleBudget { requested, min, max } => write!(
                f,
                "budget ratio {requested} infeasible, feasible range is [{min}, {max}]"
            ),
            Error::Invariant(msg) => write!(f, "invariant violated: {msg}"),
            Error::Stage { stage, layer, expert, source } => {
                write!(f, "stage {}", stage.name())?;
                if let Some(l) = layer {
                    write!(f, " layer {l}")?;
                }
                if let Some(e) = expert {
                    write!(f, " expert {e}")?;
                }
                write!(f, ": {source}")
            }
        }
    }
}

impl core::error::Error for Error {}

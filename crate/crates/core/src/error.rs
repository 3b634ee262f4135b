use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the pruning library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two objects disagree on a dimension.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// An input value contained NaN or infinity.
    NonFinite(&'static str),
    /// An expert index was outside `[0, n_experts)`.
    IndexOutOfRange { index: usize, len: usize },
    /// A parameter failed its precondition.
    InvalidParameter(String),
    /// An expert never received gate probability mass.
    ZeroMass { expert: usize },
    /// A domain id had no tokens assigned.
    EmptyDomain { domain: usize },
    /// Exhaustive search would exceed the subset budget.
    BudgetExceeded { subsets: u128, budget: u64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected {expected}, found {found}"),
            Error::NonFinite(what) => write!(f, "{what} contains a non-finite value"),
            Error::IndexOutOfRange { index, len } => {
                write!(f, "expert index {index} out of range for {len} experts")
            }
            Error::InvalidParameter(msg) => f.write_str(msg),
            Error::ZeroMass { expert } => write!(
                f,
                "expert {expert} has zero total gate probability; its activation distribution is undefined"
            ),
            Error::EmptyDomain { domain } => write!(f, "domain {domain} has no tokens"),
            Error::BudgetExceeded { subsets, budget } => write!(
                f,
                "exhaustive search needs {subsets} subsets, above the budget of {budget}; use greedy mode"
            ),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

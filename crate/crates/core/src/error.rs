use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {0}: need at least 2")]
    InvalidDimension(usize),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("density matrix trace {0} is not one")]
    Normalization(f64),

    #[error("matrix has non-finite entries")]
    NonFinite,

    #[error("{what} did not converge (residual {residual:e})")]
    Convergence { what: String, residual: f64 },

    #[error("hamiltonian is not Hermitian (deviation {0:e})")]
    NonHermitian(f64),

    #[error("lindblad operators are linearly dependent or too many ({0})")]
    DependentLindblads(usize),

    #[error("no unique steady state: L0 is singular or has non-decaying modes ({0})")]
    NoUniqueSteadyState(String),

    #[error("steady state is not full rank (min eigenvalue {0:e})")]
    RankDeficientSteadyState(f64),

    #[error("invalid unravelling setting: {0}")]
    InvalidSetting(String),

    #[error("invariant subspace certificate violated (off-block norm {0:e})")]
    InconsistentSubspace(f64),

    #[error("invariant subspace contains no pure state")]
    InfeasibleSubspace,

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("transition graph is inconsistent with the symmetry: {0}")]
    InconsistentGraph(String),

    #[error("symmetry maps a state outside the state space (min eigenvalue {0:e})")]
    SymmetryViolation(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("measurement-scheme synthesis failed for member {member}: best residual {residual:e}")]
    SynthesisFailure { member: usize, residual: f64 },

    #[error("trajectory left the ensemble: drift {drift:e} after {jumps} jumps")]
    RealizationFailure { drift: f64, jumps: usize },

    #[error("spec file error: {0}")]
    Spec(String),
}

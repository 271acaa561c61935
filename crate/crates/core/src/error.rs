use crate::netmodel::BusId;

/// Which of the two power-flow circles at a bus a message refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CircleKind {
    RealPower,
    ReactivePower,
    Voltage,
}

impl core::fmt::Display for CircleKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            CircleKind::RealPower => "real-power",
            CircleKind::ReactivePower => "reactive-power",
            CircleKind::Voltage => "voltage",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unknown bus {0}")]
    UnknownBus(BusId),
    #[error("bus {0} appears more than once")]
    DuplicateBus(BusId),
    #[error("case must have exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("bus {bus}: {reason}")]
    InvalidBus { bus: BusId, reason: &'static str },
    #[error("branch {from}-{to}: {reason}")]
    InvalidBranch {
        from: BusId,
        to: BusId,
        reason: &'static str,
    },
    #[error("network is disconnected: bus {0} is unreachable from the slack over in-service branches")]
    Disconnected(BusId),
    #[error("load scaling factor must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("no branch between {0} and {1}")]
    NoSuchBranch(BusId, BusId),
    #[error("branch {0}-{1} is already outaged")]
    AlreadyOutaged(BusId, BusId),
    #[error("power flow did not converge in {iterations} iterations (max mismatch {mismatch:e})")]
    NonConvergence { iterations: usize, mismatch: f64 },
    #[error("singular Jacobian")]
    SingularJacobian,
    #[error("base case is infeasible: {0}")]
    BaseCaseInfeasible(&'static str),
    #[error("invalid solver option: {0}")]
    InvalidOption(&'static str),
    #[error("degenerate circle at bus {bus}: t1 = {t1:e}, t4 = {t4:e}")]
    DegenerateCircle { bus: BusId, t1: f64, t4: f64 },
    #[error("bus {bus}: missing voltage for neighbour {neighbor}")]
    MissingNeighborVoltage { bus: BusId, neighbor: BusId },
    #[error("bus {bus}: {circle} circle does not exist (radicand {radicand:e})")]
    InfeasibleLocalCircle {
        bus: BusId,
        circle: CircleKind,
        radicand: f64,
    },
    #[error("normalisation reference must be positive, got {0:e}")]
    NonPositiveReference(f64),
    #[error("bus {0} is not a PV bus")]
    NotPvBus(BusId),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("rank-deficient sample window (condition number {conditioning:e})")]
    RankDeficientWindow { conditioning: f64 },
    #[error("invalid noise model: {0}")]
    InvalidNoise(&'static str),
    #[error("invalid timeline: {0}")]
    InvalidTimeline(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

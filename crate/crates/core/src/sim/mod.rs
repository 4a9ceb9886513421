//! Discrete-event engine, radio medium, and throttled backhaul links.

mod clock;
mod envelope;
mod link;
mod radio;
mod scheduler;

pub use clock::{Pacer, SimClock};
pub use envelope::{AggregateFields, Envelope, EnvelopeError, EnvelopeKind};
pub use link::{Endpoint, Lane, LaneDir, Link, LinkConfig, LinkStats};
pub use radio::{CoverageMatrix, RadioCounters, RadioMedium, RadioTx, Reception, TxId};
pub use scheduler::{Scheduler, TraceHasher};

/// Simulation time in microseconds since scenario start.
pub type Micros = u64;

pub const MS: Micros = 1_000;
pub const SECOND: Micros = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("event scheduled at {at} us, before current time {now} us")]
    ScheduledInPast { at: Micros, now: Micros },
    #[error("unknown device index {0}")]
    UnknownDevice(usize),
    #[error(transparent)]
    Capacity(#[from] crate::ddf::CapacityExceeded),
}

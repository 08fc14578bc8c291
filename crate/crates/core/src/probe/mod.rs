//! Active measurement: port allocation, pooling, STUN mapping type and
//! TTL-based NAT enumeration, each runnable against the simulator or live
//! endpoints.

pub mod echo;
pub mod live;
mod ports;
mod profile;
mod simdriver;
pub mod stun;
mod ttl;

use thiserror::Error;

pub use ports::{
    detect_chunks, infer_flows, infer_pooling, infer_port_allocation, session_spans, PoolingGuess, PortStrategy,
    ARBITRARY_SHARE, CHUNK_MIN_SESSIONS, CHUNK_SPAN_LIMIT, PRESERVE_SHARE, SEQUENTIAL_GAP, TRACE_LEN,
};
pub use profile::{as_profile, preservation_by_model, AsProfile, CGN_MIN_HOP, MIN_PROFILE_SESSIONS};
pub use simdriver::SimProbe;
pub use stun::{stun_classify, StunDriver, StunMapping, StunOutcome};
pub use ttl::{hop_count, ttl_enumerate, DetectedNat, ProbePlan, TtlDriver, TtlResult, GUARD_IDLE, MAX_IDLE};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("server unreachable")]
    Unreachable,
    #[error("port trace has {0} flows, need 10")]
    TraceTooShort(usize),
    #[error("need at least {need} sessions, have {have}")]
    Insufficient { need: usize, have: usize },
    #[error("sessions mix ASes or access types")]
    MixedInput,
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

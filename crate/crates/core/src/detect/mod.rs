//! CGN classifiers: DHT leakage clustering and session address heuristics.

pub mod dht;
pub mod session;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("no sessions to work with")]
    Empty,
    #[error("sessions mix cellular and non-cellular access")]
    MixedAccess,
    #[error("sessions belong to more than one AS")]
    MixedAsn,
}

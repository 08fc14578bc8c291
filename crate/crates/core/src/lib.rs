//! Carrier-grade NAT detection toolkit.
//!
//! - [`addr`]: reserved ranges, routing-table lookup and address categories.
//! - [`sim`]: deterministic NAT/router network simulator.
//! - [`dht`]: bencode, KRPC and a leakage crawler for the Mainline DHT.
//! - [`detect`]: per-AS classifiers over crawl records and client sessions.
//! - [`probe`]: active measurement against simulated or live servers.
//! - [`report`]: coverage and detection tables.
//! - [`synth`]: seeded fixtures with ground truth.

pub mod addr;
pub mod detect;
pub mod dht;
pub mod probe;
pub mod record;
pub mod report;
pub mod sim;
pub mod synth;

pub use addr::{Asn, ReservedRange, RoutingTable};
pub use dht::{NodeId, PeerIdentity};
pub use record::{Access, AsVerdict, Evidence, FlowObservation, PeerRecord, SessionRecord, Verdict};
pub use sim::{NatConfig, Packet, Proto, SimTime, Topology, TopologyBuilder};

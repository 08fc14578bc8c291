//! Locating stateful hops and their mapping timeouts with TTL-limited
//! keepalives.
//!
//! One experiment opens a fresh UDP flow, then for the chosen hop `j`
//! sends keepalives every 10 s from the client with TTL `j - 1` and from
//! the server with TTL `n - j`, so every hop except `j` sees traffic. After
//! the idle time a full-TTL packet from the server tests whether hop `j`
//! still holds the mapping.

use std::net::{Ipv4Addr, SocketAddrV4};

use serde::{Deserialize, Serialize};

use super::ProbeError;

pub const KEEPALIVE_INTERVAL: u32 = 10;
pub const MAX_IDLE: u32 = 200;
/// Extra idle step just past the longest grid point, so a timeout of
/// exactly 200 s is still observed expiring.
pub const GUARD_IDLE: u32 = MAX_IDLE + 1;
pub const FULL_TTL: u8 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedNat {
    pub hop: u8,
    /// Longest idle time (s) the mapping survived; the timeout is at least
    /// this long.
    pub timeout_low: u32,
    /// Shortest idle time (s) after which it was gone; the timeout is
    /// shorter than this.
    pub timeout_high: u32,
}

impl DetectedNat {
    pub fn estimate(&self) -> f64 {
        f64::from(self.timeout_low + self.timeout_high) / 2.0
    }

    pub fn contains(&self, timeout: u32) -> bool {
        self.timeout_low <= timeout && timeout < self.timeout_high
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtlResult {
    pub nats: Vec<DetectedNat>,
    pub address_mismatch: bool,
    pub stateful_no_nat: bool,
    pub unstable_path: bool,
    pub hop_count: Option<u8>,
    pub experiments: u32,
}

impl TtlResult {
    pub fn deepest_hop(&self) -> Option<u8> {
        self.nats.iter().map(|n| n.hop).max()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbePlan {
    /// Ascending idle times in seconds.
    pub grid: Vec<u32>,
    pub interval: u32,
}

impl Default for ProbePlan {
    fn default() -> Self {
        let mut grid: Vec<u32> = (1..=MAX_IDLE / KEEPALIVE_INTERVAL).map(|k| k * KEEPALIVE_INTERVAL).collect();
        grid.push(GUARD_IDLE);
        ProbePlan { grid, interval: KEEPALIVE_INTERVAL }
    }
}

/// Client and server ends of the reachability experiment.
pub trait TtlDriver {
    fn local_ip(&self) -> Ipv4Addr;
    /// Opens a fresh flow at full TTL and returns the source endpoint the
    /// server observed, or none if nothing arrived.
    fn open_flow(&mut self) -> Result<Option<SocketAddrV4>, ProbeError>;
    /// Client packet on the current flow; true if the server received it.
    fn client_send(&mut self, ttl: u8) -> Result<bool, ProbeError>;
    /// Server packet to the current flow; true if the client received it.
    fn server_send(&mut self, ttl: u8) -> Result<bool, ProbeError>;
    fn wait(&mut self, secs: u32) -> Result<(), ProbeError>;
}

/// Hops between client and server: one less than the smallest TTL that
/// reaches the server. None if farther than `max_hops`.
pub fn hop_count<D: TtlDriver + ?Sized>(d: &mut D, max_hops: u8) -> Result<Option<u8>, ProbeError> {
    d.open_flow()?.ok_or(ProbeError::Unreachable)?;
    for ttl in 1..=max_hops.saturating_add(1) {
        if d.client_send(ttl)? {
            return Ok(Some(ttl - 1));
        }
    }
    Ok(None)
}

/// True if the flow survived `idle` seconds with every hop but `hop`
/// kept alive.
fn experiment<D: TtlDriver + ?Sized>(d: &mut D, hop: u8, n: u8, idle: u32, step: u32) -> Result<bool, ProbeError> {
    d.open_flow()?.ok_or(ProbeError::Unreachable)?;
    let mut elapsed = 0;
    while elapsed + step < idle {
        d.wait(step)?;
        elapsed += step;
        if hop >= 2 {
            d.client_send(hop - 1)?;
        }
        if n > hop {
            d.server_send(n - hop)?;
        }
    }
    d.wait(idle - elapsed)?;
    d.server_send(FULL_TTL)
}

pub fn ttl_enumerate<D: TtlDriver + ?Sized>(
    d: &mut D,
    max_hops: u8,
    plan: &ProbePlan,
) -> Result<TtlResult, ProbeError> {
    let observed = d.open_flow()?.ok_or(ProbeError::Unreachable)?;
    let address_mismatch = *observed.ip() != d.local_ip();
    let n = hop_count(d, max_hops)?.ok_or(ProbeError::Unreachable)?;
    let mut nats = Vec::new();
    let mut experiments = 0u32;
    let step = plan.interval.max(1);
    if let Some(&longest) = plan.grid.last() {
        for j in 1..=n {
            experiments += 1;
            if experiment(d, j, n, longest, step)? {
                continue;
            }
            // Survival is monotone in idle time: bisect for the first loss.
            let (mut start, mut hi) = (0, plan.grid.len() - 1);
            while start < hi {
                let mid = (start + hi) / 2;
                experiments += 1;
                if experiment(d, j, n, plan.grid[mid], step)? {
                    start = mid + 1;
                } else {
                    hi = mid;
                }
            }
            nats.push(DetectedNat {
                hop: j,
                timeout_low: if hi == 0 { 0 } else { plan.grid[hi - 1] },
                timeout_high: plan.grid[hi],
            });
        }
    }
    let after = hop_count(d, max_hops)?;
    let unstable_path = after != Some(n);
    if unstable_path {
        nats.clear();
    }
    Ok(TtlResult {
        stateful_no_nat: !nats.is_empty() && !address_mismatch,
        nats,
        address_mismatch,
        unstable_path,
        hop_count: Some(n),
        experiments,
    })
}

//! The leakage crawler: five find_node queries per contacted peer, with
//! batches of ten more for as long as a peer keeps handing out new
//! internal endpoints.

use std::collections::{HashMap, HashSet, VecDeque};
use std::net::SocketAddrV4;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::krpc::{Body, KrpcMessage, Method};
use super::node::{NodeId, PeerIdentity};
use super::transport::Transport;
use super::DhtError;
use crate::addr::{is_rejected, is_reserved};
use crate::record::PeerRecord;

#[derive(Debug, Clone)]
pub struct CrawlConfig {
    /// Maximum number of peers sent find_node queries.
    pub budget: usize,
    pub queries_per_peer: usize,
    pub batch_size: usize,
    /// Cap on escalation batches per peer.
    pub max_batches: usize,
    pub max_in_flight: usize,
    pub retransmit_ms: u64,
    pub timeout_ms: u64,
    /// Ping every routable learned peer to record responsiveness.
    pub ping_learned: bool,
}

impl Default for CrawlConfig {
    fn default() -> Self {
        CrawlConfig {
            budget: 1000,
            queries_per_peer: 5,
            batch_size: 10,
            max_batches: 100,
            max_in_flight: 64,
            retransmit_ms: 2000,
            timeout_ms: 5000,
            ping_learned: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CrawlStats {
    pub contacted: usize,
    pub responsive: usize,
    pub queries: usize,
    pub retransmits: usize,
    pub timeouts: usize,
    pub escalated: usize,
    pub batches: usize,
    pub pings: usize,
}

#[derive(Debug, Clone, Copy)]
enum Job {
    FindNode(usize),
    Ping(PeerIdentity),
}

struct Pending {
    job: Job,
    to: SocketAddrV4,
    bytes: Vec<u8>,
    sent: u64,
    retransmitted: bool,
}

impl Pending {
    fn next_timer(&self, cfg: &CrawlConfig) -> u64 {
        if self.retransmitted {
            self.sent + cfg.timeout_ms
        } else {
            self.sent + cfg.retransmit_ms.min(cfg.timeout_ms)
        }
    }
}

struct Contact {
    endpoint: SocketAddrV4,
    outstanding: usize,
    responded: bool,
    batches: usize,
    round_saw_internal: bool,
    round_new_internal: usize,
    internal_known: HashSet<PeerIdentity>,
}

struct Crawler<'a> {
    cfg: &'a CrawlConfig,
    rng: ChaCha8Rng,
    id: NodeId,
    next_tid: u32,
    contacts: Vec<Contact>,
    frontier: VecDeque<SocketAddrV4>,
    learned: HashSet<PeerIdentity>,
    jobs: VecDeque<Job>,
    pending: HashMap<Vec<u8>, Pending>,
    records: Vec<(u64, PeerIdentity, PeerIdentity)>,
    edges: HashSet<(PeerIdentity, PeerIdentity)>,
    ping_ok: HashMap<PeerIdentity, bool>,
    stats: CrawlStats,
}

/// Crawls from `bootstrap` and returns every leakage observation, in
/// arrival order, deduplicated per (reporter, reported) identity pair.
pub fn crawl<T: Transport + ?Sized>(
    transport: &mut T,
    bootstrap: &[SocketAddrV4],
    cfg: &CrawlConfig,
    seed: u64,
) -> Result<(Vec<PeerRecord>, CrawlStats), DhtError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = NodeId::random(&mut rng);
    let mut c = Crawler {
        cfg,
        rng,
        id,
        next_tid: 0,
        contacts: Vec::new(),
        frontier: bootstrap.iter().copied().collect(),
        learned: HashSet::new(),
        jobs: VecDeque::new(),
        pending: HashMap::new(),
        records: Vec::new(),
        edges: HashSet::new(),
        ping_ok: HashMap::new(),
        stats: CrawlStats::default(),
    };
    c.run(transport)?;
    let records = c
        .records
        .iter()
        .map(|&(ms, reporter, reported)| {
            let ok = c.ping_ok.get(&reported).copied().unwrap_or(false);
            PeerRecord::new(ms as f64 / 1000.0, reporter, reported, ok)
        })
        .collect();
    Ok((records, c.stats))
}

impl Crawler<'_> {
    fn run<T: Transport + ?Sized>(&mut self, t: &mut T) -> Result<(), DhtError> {
        loop {
            while self.jobs.len() < self.cfg.max_in_flight && self.contacts.len() < self.cfg.budget {
                let Some(ep) = self.frontier.pop_front() else { break };
                self.start_contact(ep);
            }
            while self.pending.len() < self.cfg.max_in_flight.max(1) {
                let Some(job) = self.jobs.pop_front() else { break };
                self.issue(t, job)?;
            }
            if self.pending.is_empty() && self.jobs.is_empty() {
                if self.frontier.is_empty() || self.contacts.len() >= self.cfg.budget {
                    return Ok(());
                }
                continue;
            }
            let deadline = self.pending.values().map(|p| p.next_timer(self.cfg)).min().unwrap_or_else(|| t.now_ms());
            if let Some((from, bytes)) = t.recv_until(deadline)? {
                self.handle(t, from, &bytes)?;
            }
            self.fire_timers(t)?;
        }
    }

    fn start_contact(&mut self, endpoint: SocketAddrV4) {
        let i = self.contacts.len();
        self.contacts.push(Contact {
            endpoint,
            outstanding: self.cfg.queries_per_peer,
            responded: false,
            batches: 0,
            round_saw_internal: false,
            round_new_internal: 0,
            internal_known: HashSet::new(),
        });
        self.stats.contacted += 1;
        self.jobs.extend(std::iter::repeat_n(Job::FindNode(i), self.cfg.queries_per_peer));
    }

    fn issue<T: Transport + ?Sized>(&mut self, t: &mut T, job: Job) -> Result<(), DhtError> {
        self.next_tid = self.next_tid.wrapping_add(1);
        let tid = self.next_tid.to_be_bytes().to_vec();
        let (to, msg) = match job {
            Job::FindNode(i) => {
                self.stats.queries += 1;
                let target = NodeId::random(&mut self.rng);
                (self.contacts[i].endpoint, KrpcMessage::find_node(&tid, &self.id, &target))
            }
            Job::Ping(p) => {
                self.stats.pings += 1;
                (p.endpoint, KrpcMessage::ping(&tid, &self.id))
            }
        };
        let bytes = msg.encode();
        t.send_to(to, &bytes)?;
        let sent = t.now_ms();
        self.pending.insert(tid, Pending { job, to, bytes, sent, retransmitted: false });
        Ok(())
    }

    fn fire_timers<T: Transport + ?Sized>(&mut self, t: &mut T) -> Result<(), DhtError> {
        let now = t.now_ms();
        let mut due: Vec<Vec<u8>> =
            self.pending.iter().filter(|(_, p)| p.next_timer(self.cfg) <= now).map(|(k, _)| k.clone()).collect();
        due.sort();
        for tid in due {
            let p = self.pending.get_mut(&tid).expect("listed above");
            if !p.retransmitted && now < p.sent + self.cfg.timeout_ms {
                p.retransmitted = true;
                self.stats.retransmits += 1;
                t.send_to(p.to, &p.bytes)?;
            } else {
                let p = self.pending.remove(&tid).expect("listed above");
                self.stats.timeouts += 1;
                self.finish(p.job, None, now);
            }
        }
        Ok(())
    }

    fn handle<T: Transport + ?Sized>(&mut self, t: &mut T, from: SocketAddrV4, bytes: &[u8]) -> Result<(), DhtError> {
        let Ok(msg) = KrpcMessage::decode(bytes) else {
            return Ok(());
        };
        match &msg.body {
            Body::Query { method, .. } => {
                let reply = match method {
                    Method::Ping => KrpcMessage::ping_response(&msg.tid, &self.id),
                    Method::FindNode => KrpcMessage::find_node_response(&msg.tid, &self.id, &[]),
                    Method::Other(_) => KrpcMessage::error(&msg.tid, 204, "Method Unknown"),
                };
                t.send_to(from, &reply.encode())?;
            }
            Body::Response { .. } | Body::Error { .. } => {
                let matches = self.pending.get(&msg.tid).is_some_and(|p| p.to == from);
                if matches {
                    let p = self.pending.remove(&msg.tid).expect("checked");
                    let reply = matches!(msg.body, Body::Response { .. }).then_some(&msg);
                    self.finish(p.job, reply, t.now_ms());
                }
            }
        }
        Ok(())
    }

    /// Completes one query; `reply` is none on timeout or error.
    fn finish(&mut self, job: Job, reply: Option<&KrpcMessage>, now: u64) {
        match job {
            Job::Ping(p) => {
                let ok = reply.and_then(|m| m.sender_id()) == Some(p.nodeid);
                *self.ping_ok.entry(p).or_insert(false) |= ok;
            }
            Job::FindNode(i) => {
                if let Some(m) = reply {
                    self.absorb(i, m, now);
                }
                let c = &mut self.contacts[i];
                c.outstanding -= 1;
                if c.outstanding > 0 {
                    return;
                }
                let escalate = if c.batches == 0 { c.round_saw_internal } else { c.round_new_internal > 0 };
                if escalate && c.batches < self.cfg.max_batches {
                    if c.batches == 0 {
                        self.stats.escalated += 1;
                    }
                    c.batches += 1;
                    c.outstanding = self.cfg.batch_size;
                    c.round_saw_internal = false;
                    c.round_new_internal = 0;
                    self.stats.batches += 1;
                    for _ in 0..self.cfg.batch_size {
                        self.jobs.push_front(Job::FindNode(i));
                    }
                }
            }
        }
    }

    fn absorb(&mut self, i: usize, m: &KrpcMessage, now: u64) {
        let (Some(id), Ok(nodes)) = (m.sender_id(), m.nodes()) else {
            return;
        };
        let c = &mut self.contacts[i];
        if !c.responded {
            c.responded = true;
            self.stats.responsive += 1;
        }
        let reporter = PeerIdentity { endpoint: c.endpoint, nodeid: id };
        for n in nodes {
            let reported = n.identity();
            if self.edges.insert((reporter, reported)) {
                self.records.push((now, reporter, reported));
            }
            let ip = *n.addr.ip();
            if is_reserved(ip) {
                c.round_saw_internal = true;
                if c.internal_known.insert(reported) {
                    c.round_new_internal += 1;
                }
            } else if !is_rejected(ip)
                && !ip.is_unspecified()
                && n.addr.port() != 0
                && n.id != self.id
                && self.learned.insert(reported)
            {
                self.frontier.push_back(n.addr);
                if self.cfg.ping_learned {
                    self.jobs.push_back(Job::Ping(reported));
                }
            }
        }
    }
}

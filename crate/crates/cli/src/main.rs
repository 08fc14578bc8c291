//! `cgnscope`: simulate NAT topologies, generate fixtures, crawl the DHT,
//! probe NAT behavior, classify ASes and aggregate verdicts.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Ipv4Addr, SocketAddrV4, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cgnscope_core::addr::{RirMap, RoutingTable};
use cgnscope_core::detect::dht::detect_dht;
use cgnscope_core::detect::session::detect_sessions;
use cgnscope_core::dht::simnet::from_topology_file;
use cgnscope_core::dht::transport::UdpTransport;
use cgnscope_core::dht::{crawl, CrawlConfig};
use cgnscope_core::probe::live::{live_port_session, serve, LiveStun, LiveTtl, ServerConfig};
use cgnscope_core::probe::{infer_flows, stun_classify, ttl_enumerate, ProbePlan, SimProbe};
use cgnscope_core::record::{read_jsonl, write_jsonl, AsVerdict, PeerRecord, SessionRecord};
use cgnscope_core::report::{aggregate, range_usage, region_breakdown, render_text, EyeballSource, Population};
use cgnscope_core::sim::file::TopologyFile;
use cgnscope_core::synth::dht::{synth_peer_records, DhtSynthConfig};
use cgnscope_core::synth::probe::{matrix_cases, run_matrix_case};
use cgnscope_core::synth::sessions::{synth_cpe_corpus, synth_sessions, SessionAsKind};
use cgnscope_core::{Access, Asn, Proto};

#[derive(Parser)]
#[command(name = "cgnscope", version, about = "Carrier-grade NAT detection toolkit")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replays the packet script of a topology file and prints the trace.
    Simulate {
        #[arg(long)]
        topology: PathBuf,
    },
    /// Generates synthetic inputs with known ground truth.
    Synth {
        #[command(subcommand)]
        what: SynthCmd,
    },
    /// Crawls the DHT for internal address leakage.
    Crawl(CrawlArgs),
    /// Classifies ASes from crawled peer records.
    DetectDht {
        /// Peer records (JSONL); `-` reads stdin.
        #[arg(long)]
        records: PathBuf,
        /// Routing table, one `prefix,asn` per line.
        #[arg(long)]
        routing: PathBuf,
    },
    /// Classifies ASes from measurement sessions.
    DetectSessions {
        /// Session records (JSONL); `-` reads stdin.
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        routing: PathBuf,
    },
    /// Runs one measurement session: STUN, port allocation and TTL probing.
    Probe(ProbeArgs),
    /// Aggregates verdicts into coverage and penetration tables.
    Report(ReportArgs),
    /// Serves the echo, STUN and TTL endpoints used by `probe --transport live`.
    EchoServer(ServerArgs),
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Peer records crawled from a simulated multi-AS DHT.
    Dht {
        #[arg(long, default_value_t = 50)]
        ases: usize,
        #[arg(long)]
        peers_per_as: Option<usize>,
        /// Writes per-AS ground truth (JSONL) here.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Session records from simulated subscriber populations.
    Sessions {
        /// AS kinds, one AS each.
        #[arg(long, value_delimiter = ',', default_value = "nat444,home-only,cellular-cgn,cellular-public")]
        kinds: Vec<KindArg>,
        #[arg(long, default_value_t = 40)]
        subscribers: usize,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Home-router sessions over a mix of CPE models.
    CpeCorpus {
        #[arg(long, default_value_t = 500)]
        sessions: usize,
    },
    /// Runs the 32-configuration NAT behavior matrix.
    Matrix,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Nat444,
    HomeOnly,
    CellularCgn,
    CellularPublic,
}

impl From<KindArg> for SessionAsKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Nat444 => SessionAsKind::Nat444,
            KindArg::HomeOnly => SessionAsKind::HomeOnly,
            KindArg::CellularCgn => SessionAsKind::CellularCgn,
            KindArg::CellularPublic => SessionAsKind::CellularPublic,
        }
    }
}

#[derive(Args)]
struct CrawlArgs {
    /// Bootstrap node. Defaults to the `bootstrap` host with `--transport sim:`.
    #[arg(long)]
    bootstrap: Option<String>,
    #[arg(long, default_value_t = 1000)]
    budget: usize,
    /// `live` or `sim:<topology file>`.
    #[arg(long, default_value = "live")]
    transport: String,
    /// Local address for the live crawler socket.
    #[arg(long, default_value = "0.0.0.0:6881")]
    bind: String,
    /// Peers each simulated peer greets during warm-up.
    #[arg(long, default_value_t = 4)]
    fanout: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AccessArg {
    Cellular,
    NonCellular,
}

#[derive(Args)]
struct ProbeArgs {
    /// `live` or `sim:<topology file>`.
    #[arg(long, default_value = "live")]
    transport: String,
    /// Live: server address. Sim: server host name.
    #[arg(long)]
    server: String,
    /// Sim: client host name.
    #[arg(long, default_value = "client")]
    client: String,
    #[arg(long, default_value_t = 0)]
    asn: u32,
    #[arg(long, value_enum, default_value_t = AccessArg::NonCellular)]
    access: AccessArg,
    #[arg(long, default_value_t = 10)]
    flows: u32,
    #[arg(long, default_value_t = 30)]
    max_hops: u8,
    /// Skips the TTL experiments, which take about an hour live.
    #[arg(long)]
    no_ttl: bool,
    #[arg(long, default_value_t = 7)]
    echo_port: u16,
    #[arg(long, default_value_t = 3478)]
    stun_port: u16,
    #[arg(long, default_value_t = 5300)]
    ttl_port: u16,
    #[arg(long, default_value_t = 5301)]
    ttl_control_port: u16,
    /// Live reply timeout in milliseconds.
    #[arg(long, default_value_t = 1000)]
    timeout_ms: u64,
    #[arg(long, default_value = "session-0")]
    session_id: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Verdict files (JSONL) from any detector.
    #[arg(long, value_delimiter = ',', required = true)]
    verdicts: Vec<PathBuf>,
    /// Routed ASes, one `asn[,weight]` per line.
    #[arg(long)]
    population: PathBuf,
    /// PBL-like then APNIC-like eyeball lists (`asn,weight`).
    #[arg(long, value_delimiter = ',')]
    eyeball: Vec<PathBuf>,
    /// ASN ranges to regions, one `lo-hi,REGION` per line.
    #[arg(long)]
    rir: Option<PathBuf>,
    /// Routing table for the routed-as-internal check and the fingerprint.
    #[arg(long)]
    routing: Option<PathBuf>,
    /// Report JSON destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also prints the aligned text tables to stderr.
    #[arg(long)]
    text: bool,
}

#[derive(Args)]
struct ServerArgs {
    #[arg(long, default_value = "0.0.0.0")]
    bind: Ipv4Addr,
    /// Second address for STUN change-IP replies.
    #[arg(long)]
    alt_ip: Option<Ipv4Addr>,
    #[arg(long, default_value_t = 7)]
    echo_port: u16,
    #[arg(long, value_delimiter = ',', default_value = "3478,3479")]
    stun_ports: Vec<u16>,
    #[arg(long, default_value_t = 5300)]
    ttl_port: u16,
    #[arg(long, default_value_t = 5301)]
    ttl_control_port: u16,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cgnscope: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Simulate { topology } => simulate(&topology, seed),
        Command::Synth { what } => synth(what, seed),
        Command::Crawl(a) => crawl_cmd(a, seed),
        Command::DetectDht { records, routing } => {
            let records: Vec<PeerRecord> = read_jsonl(reader(&records)?).context("reading peer records")?;
            let table = routing_table(&routing)?;
            emit(None, &detect_dht(&records, &table))
        }
        Command::DetectSessions { sessions, routing } => {
            let sessions: Vec<SessionRecord> = read_jsonl(reader(&sessions)?).context("reading sessions")?;
            let table = routing_table(&routing)?;
            emit(None, &detect_sessions(&sessions, &table)?)
        }
        Command::Probe(a) => probe(a),
        Command::Report(a) => report(a),
        Command::EchoServer(a) => echo_server(a),
    }
}

fn reader(path: &Path) -> Result<Box<dyn BufRead>> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Box::new(BufReader::new(f)))
}

fn read_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    reader(path)?.read_to_string(&mut s).with_context(|| format!("reading {}", path.display()))?;
    Ok(s)
}

fn routing_table(path: &Path) -> Result<RoutingTable> {
    RoutingTable::parse(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// Writes one JSON value per line to `out`, or stdout.
fn emit<T: serde::Serialize>(out: Option<&Path>, items: &[T]) -> Result<()> {
    match out {
        Some(p) => {
            let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_jsonl(io::BufWriter::new(f), items)?;
        }
        None => write_jsonl(io::stdout().lock(), items)?,
    }
    Ok(())
}

fn sim_path(transport: &str) -> Result<Option<PathBuf>> {
    match transport {
        "live" => Ok(None),
        t => match t.strip_prefix("sim:") {
            Some(p) if !p.is_empty() => Ok(Some(PathBuf::from(p))),
            _ => bail!("transport must be `live` or `sim:<topology file>`, got `{t}`"),
        },
    }
}

fn topology_file(path: &Path) -> Result<TopologyFile> {
    TopologyFile::parse(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn simulate(path: &Path, seed: u64) -> Result<()> {
    let file = topology_file(path)?;
    let mut topo = file.build(Some(seed))?;
    topo.enable_trace();
    file.run(&mut topo)?;
    let lines: Vec<serde_json::Value> = topo
        .trace()
        .iter()
        .map(|r| {
            json!({
                "time": r.time.as_secs_f64(),
                "proto": r.proto,
                "src": r.src,
                "dst": r.dst,
                "ttl": r.ttl,
                "verdict": r.verdict.to_string(),
                "hop": r.hop.map(|h| h.0),
            })
        })
        .collect();
    emit(None, &lines)
}

fn synth(what: SynthCmd, seed: u64) -> Result<()> {
    match what {
        SynthCmd::Dht { ases, peers_per_as, truth } => {
            if !(1..=200).contains(&ases) {
                bail!("--ases must be between 1 and 200");
            }
            let mut cfg = DhtSynthConfig::mixed(ases, seed);
            if let Some(n) = peers_per_as {
                cfg.peers_per_as = n;
            }
            let fx = synth_peer_records(&cfg)?;
            if let Some(t) = truth {
                emit(Some(&t), &fx.truth.values().collect::<Vec<_>>())?;
            }
            emit(None, &fx.records)
        }
        SynthCmd::Sessions { kinds, subscribers, truth } => {
            if !(1..=250).contains(&subscribers) {
                bail!("--subscribers must be between 1 and 250");
            }
            let kinds: Vec<SessionAsKind> = kinds.into_iter().map(Into::into).collect();
            let fx = synth_sessions(&kinds, subscribers, seed)?;
            if let Some(t) = truth {
                let rows: Vec<_> = fx.truth.iter().map(|(asn, kind)| json!({"asn": asn, "kind": kind})).collect();
                emit(Some(&t), &rows)?;
            }
            emit(None, &fx.sessions)
        }
        SynthCmd::CpeCorpus { sessions } => emit(None, &synth_cpe_corpus(sessions, seed)?.sessions),
        SynthCmd::Matrix => {
            let outcomes = matrix_cases()
                .iter()
                .enumerate()
                .map(|(i, c)| run_matrix_case(c, seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            emit(None, &outcomes)
        }
    }
}

fn resolve_v4(s: &str) -> Result<SocketAddrV4> {
    s.to_socket_addrs()
        .with_context(|| format!("resolving {s}"))?
        .find_map(|a| match a {
            std::net::SocketAddr::V4(v) => Some(v),
            _ => None,
        })
        .ok_or_else(|| anyhow!("{s} has no IPv4 address"))
}

fn crawl_cmd(a: CrawlArgs, seed: u64) -> Result<()> {
    let cfg = CrawlConfig { budget: a.budget, ..CrawlConfig::default() };
    let (records, stats) = match sim_path(&a.transport)? {
        Some(path) => {
            let (mut net, boot) = from_topology_file(&topology_file(&path)?, seed, a.fanout)?;
            let boot = match &a.bootstrap {
                Some(b) => resolve_v4(b)?,
                None => boot,
            };
            crawl(&mut net, &[boot], &cfg, seed)?
        }
        None => {
            let boot =
                resolve_v4(a.bootstrap.as_deref().ok_or_else(|| anyhow!("--bootstrap is required for live crawls"))?)?;
            let mut t = UdpTransport::bind(a.bind.as_str())?;
            crawl(&mut t, &[boot], &cfg, seed)?
        }
    };
    eprintln!("{}", serde_json::to_string(&json!({ "stats": stats }))?);
    emit(a.out.as_deref(), &records)
}

fn probe(a: ProbeArgs) -> Result<()> {
    let access = match a.access {
        AccessArg::Cellular => Access::Cellular,
        AccessArg::NonCellular => Access::NonCellular,
    };
    let (local, stun, flows, ttl) = match sim_path(&a.transport)? {
        Some(path) => {
            let topo = topology_file(&path)?.build(None)?;
            let mut p = SimProbe::new(topo, &a.client, &a.server)?;
            let stun = stun_classify(&mut p)?;
            let flows = p.port_session(Proto::Tcp, a.flows, 1)?;
            let ttl = if a.no_ttl { None } else { Some(ttl_enumerate(&mut p, a.max_hops, &ProbePlan::default())?) };
            (*stun.local.ip(), stun, flows, ttl)
        }
        None => {
            let ip: Ipv4Addr =
                a.server.parse().with_context(|| format!("server `{}` is not an IPv4 address", a.server))?;
            let timeout = Duration::from_millis(a.timeout_ms);
            let mut s = LiveStun::new(
                SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0),
                SocketAddrV4::new(ip, a.stun_port),
                timeout,
            )?;
            let stun = stun_classify(&mut s)?;
            let flows = live_port_session(SocketAddrV4::new(ip, a.echo_port), a.flows, timeout)?;
            let ttl = if a.no_ttl {
                None
            } else {
                let mut t = LiveTtl::new(
                    SocketAddrV4::new(ip, a.ttl_port),
                    SocketAddrV4::new(ip, a.ttl_control_port),
                    timeout,
                )?;
                Some(ttl_enumerate(&mut t, a.max_hops, &ProbePlan::default())?)
            };
            (*stun.local.ip(), stun, flows, ttl)
        }
    };
    let mut rec = SessionRecord::new(a.session_id, Asn(a.asn), access, local, *stun.test1.ip());
    rec.stun = Some(stun);
    rec.flows = flows;
    rec.ttl_result = ttl;
    if let Ok(strategy) = infer_flows(&rec.flows) {
        eprintln!("{}", serde_json::to_string(&json!({ "port_strategy": strategy }))?);
    }
    emit(None, &[rec])
}

fn report(a: ReportArgs) -> Result<()> {
    let mut verdicts: Vec<AsVerdict> = Vec::new();
    for v in &a.verdicts {
        verdicts.extend(read_jsonl::<AsVerdict, _>(reader(v)?).with_context(|| format!("reading {}", v.display()))?);
    }
    let mut pops = vec![Population::from_csv("routed", &read_text(&a.population)?)?];
    if a.eyeball.len() > 2 {
        bail!("at most two eyeball lists: PBL-like then APNIC-like");
    }
    for (path, (name, source)) in
        a.eyeball.iter().zip([("pbl", EyeballSource::PblLike), ("apnic", EyeballSource::ApnicLike)])
    {
        pops.push(Population::eyeball(name, source, &read_text(path)?)?);
    }
    let table = a.routing.as_deref().map(routing_table).transpose()?;
    let mut report = aggregate(&verdicts, &pops)?;
    if let Some(rir) = &a.rir {
        let rir = RirMap::parse(&read_text(rir)?).with_context(|| format!("parsing {}", rir.display()))?;
        report.regions = region_breakdown(&verdicts, &pops[0], &rir)?;
    }
    report.ranges = range_usage(&verdicts, table.as_ref());
    report.metadata.routing_fingerprint = table.as_ref().map(RoutingTable::fingerprint);
    if a.text {
        eprint!("{}", render_text(&report));
    }
    let body = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => fs::write(p, body + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => writeln!(io::stdout().lock(), "{body}")?,
    }
    Ok(())
}

fn echo_server(a: ServerArgs) -> Result<()> {
    let mut stun_ips = vec![a.bind];
    stun_ips.extend(a.alt_ip);
    let cfg = ServerConfig {
        echo: SocketAddrV4::new(a.bind, a.echo_port),
        ttl_data: SocketAddrV4::new(a.bind, a.ttl_port),
        ttl_control: SocketAddrV4::new(a.bind, a.ttl_control_port),
        stun_ips,
        stun_ports: a.stun_ports,
    };
    let handle = serve(&cfg)?;
    let bound: Vec<_> = handle.bound.iter().map(|(role, addr)| json!({ "role": role, "addr": addr })).collect();
    emit(None, &bound)?;
    handle.join();
    Ok(())
}

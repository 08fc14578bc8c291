//! Coverage and detection tables over per-AS verdicts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{region_of, AddrError, Asn, Region, RirMap, RoutingTable};
use crate::record::{AsVerdict, Evidence, Verdict};

pub const SCHEMA: u32 = 1;
pub const PBL_MIN_ADDRESSES: u64 = 2048;
pub const APNIC_MIN_SAMPLES: u64 = 1000;
pub const METHODS: [&str; 4] = ["dht", "session-noncellular", "union", "session-cellular"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("conflicting verdicts for {asn} ({method}): {a:?} and {b:?}")]
    Conflict { asn: Asn, method: &'static str, a: Verdict, b: Verdict },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Addr(#[from] AddrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EyeballSource {
    /// Address-equivalents per AS; kept from 2048 up.
    PblLike,
    /// Measurement samples per AS; kept from 1000 up.
    ApnicLike,
}

impl EyeballSource {
    pub fn threshold(self) -> u64 {
        match self {
            EyeballSource::PblLike => PBL_MIN_ADDRESSES,
            EyeballSource::ApnicLike => APNIC_MIN_SAMPLES,
        }
    }
}

/// A named set of ASes that rows are computed against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Population {
    pub name: String,
    pub asns: BTreeSet<Asn>,
}

/// Parses `asn[,weight]` lines. A first line that does not start with an
/// ASN is taken as a header. Returns ASN and weight (1 when absent).
pub fn parse_asn_csv(text: &str) -> Result<Vec<(Asn, u64)>, ReportError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut fields = body.split(',').map(str::trim);
        let first = fields.next().unwrap_or("");
        let asn = match first.parse::<Asn>() {
            Ok(a) => a,
            Err(_) if out.is_empty() && i == 0 => continue,
            Err(e) => return Err(ReportError::Parse { line: i + 1, msg: e.to_string() }),
        };
        let weight = match fields.next() {
            Some(w) => {
                w.parse::<u64>().map_err(|_| ReportError::Parse { line: i + 1, msg: format!("bad weight `{w}`") })?
            }
            None => 1,
        };
        out.push((asn, weight));
    }
    Ok(out)
}

impl Population {
    pub fn new(name: impl Into<String>, asns: impl IntoIterator<Item = Asn>) -> Self {
        Population { name: name.into(), asns: asns.into_iter().collect() }
    }

    /// Every origin AS in a routing table.
    pub fn routed(table: &RoutingTable) -> Self {
        Population::new("routed", table.entries().iter().map(|(_, a)| *a))
    }

    pub fn from_csv(name: impl Into<String>, text: &str) -> Result<Self, ReportError> {
        Ok(Population::new(name, parse_asn_csv(text)?.into_iter().map(|(a, _)| a)))
    }

    /// An eyeball list, keeping ASes whose summed weight reaches the
    /// source's inclusion threshold.
    pub fn eyeball(name: impl Into<String>, source: EyeballSource, text: &str) -> Result<Self, ReportError> {
        let mut w: BTreeMap<Asn, u64> = BTreeMap::new();
        for (a, x) in parse_asn_csv(text)? {
            *w.entry(a).or_default() += x;
        }
        Ok(Population::new(name, w.into_iter().filter(|(_, x)| *x >= source.threshold()).map(|(a, _)| a)))
    }
}

/// Percentage with one decimal, rounded half up; zero for an empty base.
pub fn pct(count: usize, of: usize) -> f64 {
    if of == 0 {
        return 0.0;
    }
    ((count as u128 * 1000 * 2 + of as u128) / (of as u128 * 2)) as f64 / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub population: String,
    pub method: String,
    pub ases: usize,
    pub covered: usize,
    /// Covered ASes as a share of the population.
    pub covered_pct: f64,
    pub positive: usize,
    /// Positive ASes as a share of the covered ones.
    pub positive_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionRow {
    pub region: Region,
    pub ases: usize,
    pub covered: usize,
    pub covered_pct: f64,
    pub noncellular_covered: usize,
    pub noncellular_positive: usize,
    pub noncellular_pct: f64,
    pub cellular_covered: usize,
    pub cellular_positive: usize,
    pub cellular_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoutableInternal {
    pub block: String,
    pub routed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RangeUsage {
    pub asn: Asn,
    pub ranges: Vec<String>,
    pub multi_range: bool,
    pub routable_internal: Vec<RoutableInternal>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    /// How an AS counts as covered.
    pub covered_rule: String,
    pub union_of: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routing_fingerprint: Option<String>,
    pub populations: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema: u32,
    pub metadata: ReportMeta,
    pub rows: Vec<Row>,
    pub regions: Vec<RegionRow>,
    pub ranges: Vec<RangeUsage>,
}

/// Final verdict per method and AS, rejecting contradictory duplicates.
pub fn index_verdicts(verdicts: &[AsVerdict]) -> Result<BTreeMap<&'static str, BTreeMap<Asn, Verdict>>, ReportError> {
    let mut by: BTreeMap<&'static str, BTreeMap<Asn, Verdict>> = BTreeMap::new();
    for v in verdicts {
        let method = v.method();
        let slot = by.entry(method).or_default();
        match slot.get(&v.asn) {
            Some(&prev) if prev != v.verdict => {
                return Err(ReportError::Conflict { asn: v.asn, method, a: prev, b: v.verdict });
            }
            _ => {
                slot.insert(v.asn, v.verdict);
            }
        }
    }
    Ok(by)
}

struct MethodSets {
    covered: BTreeSet<Asn>,
    positive: BTreeSet<Asn>,
}

fn method_sets(by: &BTreeMap<&'static str, BTreeMap<Asn, Verdict>>) -> BTreeMap<&'static str, MethodSets> {
    let sets = |m: &str| {
        let empty = BTreeMap::new();
        let v = by.get(m).unwrap_or(&empty);
        MethodSets {
            covered: v.iter().filter(|(_, v)| **v != Verdict::Insufficient).map(|(a, _)| *a).collect(),
            positive: v.iter().filter(|(_, v)| **v == Verdict::CgnPositive).map(|(a, _)| *a).collect(),
        }
    };
    let dht = sets("dht");
    let nc = sets("session-noncellular");
    let union = MethodSets {
        covered: dht.covered.union(&nc.covered).copied().collect(),
        positive: dht.positive.union(&nc.positive).copied().collect(),
    };
    BTreeMap::from([
        ("dht", dht),
        ("session-noncellular", nc),
        ("union", union),
        ("session-cellular", sets("session-cellular")),
    ])
}

/// Coverage and positive counts per population and method. The union row
/// combines the DHT and non-cellular session methods, counting each AS once.
pub fn aggregate(verdicts: &[AsVerdict], populations: &[Population]) -> Result<Report, ReportError> {
    let by = index_verdicts(verdicts)?;
    let sets = method_sets(&by);
    let mut rows = Vec::new();
    for p in populations {
        for m in METHODS {
            let s = &sets[m];
            let covered = p.asns.intersection(&s.covered).count();
            let positive = p.asns.intersection(&s.positive).count();
            rows.push(Row {
                population: p.name.clone(),
                method: m.to_string(),
                ases: p.asns.len(),
                covered,
                covered_pct: pct(covered, p.asns.len()),
                positive,
                positive_pct: pct(positive, covered),
            });
        }
    }
    Ok(Report {
        schema: SCHEMA,
        metadata: ReportMeta {
            covered_rule: "an AS is covered by a method when that method returned a verdict other than \
                           insufficient; for the DHT method this means at least 200 queried peers or a \
                           positive cluster"
                .to_string(),
            union_of: vec!["dht".to_string(), "session-noncellular".to_string()],
            routing_fingerprint: None,
            populations: populations.iter().map(|p| (p.name.clone(), p.asns.len())).collect(),
        },
        rows,
        regions: Vec::new(),
        ranges: Vec::new(),
    })
}

/// Per-region coverage (any method) and penetration for the union of the
/// non-cellular methods and for the cellular method.
pub fn region_breakdown(
    verdicts: &[AsVerdict],
    population: &Population,
    rir: &RirMap,
) -> Result<Vec<RegionRow>, ReportError> {
    let by = index_verdicts(verdicts)?;
    let sets = method_sets(&by);
    let mut out = Vec::new();
    for region in Region::ALL {
        let ases: BTreeSet<Asn> = population.asns.iter().copied().filter(|a| region_of(*a, rir) == region).collect();
        if ases.is_empty() {
            continue;
        }
        let count = |s: &BTreeSet<Asn>| ases.intersection(s).count();
        let any: BTreeSet<Asn> = sets["union"].covered.union(&sets["session-cellular"].covered).copied().collect();
        let covered = count(&any);
        let (nc_c, nc_p) = (count(&sets["union"].covered), count(&sets["union"].positive));
        let (c_c, c_p) = (count(&sets["session-cellular"].covered), count(&sets["session-cellular"].positive));
        out.push(RegionRow {
            region,
            ases: ases.len(),
            covered,
            covered_pct: pct(covered, ases.len()),
            noncellular_covered: nc_c,
            noncellular_positive: nc_p,
            noncellular_pct: pct(nc_p, nc_c),
            cellular_covered: c_c,
            cellular_positive: c_p,
            cellular_pct: pct(c_p, c_c),
        });
    }
    Ok(out)
}

/// Internal ranges seen per CGN-positive AS. Labels other than the four
/// reserved tags are routable /8 blocks used internally; their routed
/// status comes from `table` when given.
pub fn range_usage(verdicts: &[AsVerdict], table: Option<&RoutingTable>) -> Vec<RangeUsage> {
    let mut per: BTreeMap<Asn, BTreeSet<String>> = BTreeMap::new();
    for v in verdicts.iter().filter(|v| v.verdict == Verdict::CgnPositive) {
        let labels: Vec<String> = match &v.evidence {
            Evidence::Dht { ranges, .. } => ranges.iter().map(|r| r.tag().to_string()).collect(),
            Evidence::Session { internal_ranges, .. } => internal_ranges.clone(),
        };
        per.entry(v.asn).or_default().extend(labels);
    }
    per.into_iter()
        .map(|(asn, ranges)| {
            let routable_internal = ranges
                .iter()
                .filter_map(|r| r.parse::<Ipv4Net>().ok())
                .map(|block| RoutableInternal {
                    block: block.to_string(),
                    routed: table.is_some_and(|t| t.overlaps(block)),
                })
                .collect();
            RangeUsage { asn, multi_range: ranges.len() > 1, ranges: ranges.into_iter().collect(), routable_internal }
        })
        .collect()
}

/// Aligned plain-text rendering.
pub fn render_text(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:<20} {:>6} {:>8} {:>7} {:>8} {:>7}",
        "population", "method", "ases", "covered", "%", "positive", "%"
    );
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{:<14} {:<20} {:>6} {:>8} {:>7.1} {:>8} {:>7.1}",
            row.population, row.method, row.ases, row.covered, row.covered_pct, row.positive, row.positive_pct
        );
    }
    if !r.regions.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>8} {:>7} {:>10} {:>7} {:>10} {:>7}",
            "region", "ases", "covered", "%", "noncell+", "%", "cell+", "%"
        );
        for g in &r.regions {
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>8} {:>7.1} {:>10} {:>7.1} {:>10} {:>7.1}",
                g.region.name(),
                g.ases,
                g.covered,
                g.covered_pct,
                format!("{}/{}", g.noncellular_positive, g.noncellular_covered),
                g.noncellular_pct,
                format!("{}/{}", g.cellular_positive, g.cellular_covered),
                g.cellular_pct
            );
        }
    }
    if !r.ranges.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10} {:<6} ranges", "asn", "multi");
        for u in &r.ranges {
            let mut line = u.ranges.join(",");
            for ri in &u.routable_internal {
                let _ = write!(line, " [{} {}]", ri.block, if ri.routed { "routed" } else { "unrouted" });
            }
            let _ = writeln!(s, "{:<10} {:<6} {}", u.asn.to_string(), if u.multi_range { "yes" } else { "no" }, line);
        }
    }
    s
}

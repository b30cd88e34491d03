//! Cycle-accurate two-phase simulation.
//!
//! One cycle: settle every combinational node in topological order from
//! inputs and register outputs, observe, then commit all register
//! next-values at once. Netlists are acyclic by construction, so a single
//! pass per cycle is exact. All state starts at zero; there are no unknown
//! values.

use crate::diag::Diagnostic;
use crate::staging::{Netlist, Node, NodeId, Op, RegRole};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;

fn mask(w: u32) -> u64 {
    if w >= 64 {
        u64::MAX
    } else {
        (1u64 << w) - 1
    }
}

/// Integer floor square root.
pub fn isqrt(x: u64) -> u64 {
    if x == 0 {
        return 0;
    }
    let mut r = (x as f64).sqrt() as u64;
    while (r + 1).checked_mul(r + 1).map(|s| s <= x).unwrap_or(false) {
        r += 1;
    }
    while r.checked_mul(r).map(|s| s > x).unwrap_or(true) {
        r -= 1;
    }
    r
}

// ---------------------------------------------------------------------------
// PRNG
// ---------------------------------------------------------------------------

/// SplitMix64: a small named generator with a fixed published update, so
/// identical seeds give identical stimulus everywhere.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// True with probability `p`.
    pub fn coin(&mut self, p: f64) -> bool {
        ((self.next_u64() >> 11) as f64) / ((1u64 << 53) as f64) < p
    }

    /// Uniform in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }

    pub fn bits(&mut self, w: u32) -> u64 {
        self.next_u64() & mask(w)
    }
}

// ---------------------------------------------------------------------------
// Core simulator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Sim<'n> {
    pub netlist: &'n Netlist,
    vals: Vec<u64>,
    pub cycle: u64,
}

impl<'n> Sim<'n> {
    pub fn new(netlist: &'n Netlist) -> Self {
        let mut vals = vec![0; netlist.nodes.len()];
        for (id, node) in netlist.nodes.iter().enumerate() {
            if let Node::Const { value, width } = node {
                vals[id] = value & mask(*width);
            }
        }
        Sim {
            netlist,
            vals,
            cycle: 0,
        }
    }

    /// Set an input value (masked to the input's width).
    pub fn set(&mut self, node: NodeId, v: u64) {
        debug_assert!(matches!(self.netlist.nodes[node], Node::Input { .. }));
        self.vals[node] = v & mask(self.netlist.width(node));
    }

    pub fn get(&self, node: NodeId) -> u64 {
        self.vals[node]
    }

    /// Phase 1: settle combinational nodes.
    pub fn eval(&mut self) {
        for &id in &self.netlist.eval_order {
            let Node::Comb { op, args, width } = &self.netlist.nodes[id] else {
                unreachable!("eval order holds comb nodes");
            };
            let m = mask(*width);
            let v = match op {
                Op::Buf => self.vals[args[0]],
                Op::Not => (self.vals[args[0]] == 0) as u64,
                Op::And => ((self.vals[args[0]] != 0) && (self.vals[args[1]] != 0)) as u64,
                Op::Or => ((self.vals[args[0]] != 0) || (self.vals[args[1]] != 0)) as u64,
                Op::Eq => (self.vals[args[0]] == self.vals[args[1]]) as u64,
                Op::Ne => (self.vals[args[0]] != self.vals[args[1]]) as u64,
                Op::Add => self.vals[args[0]].wrapping_add(self.vals[args[1]]),
                Op::Sub => self.vals[args[0]].wrapping_sub(self.vals[args[1]]),
                Op::Mul => self.vals[args[0]].wrapping_mul(self.vals[args[1]]),
                Op::Mux => {
                    if self.vals[args[0]] != 0 {
                        self.vals[args[1]]
                    } else {
                        self.vals[args[2]]
                    }
                }
                Op::Sqrt => isqrt(self.vals[args[0]]),
                Op::Slice(hi, lo) => (self.vals[args[0]] >> lo) & mask(hi - lo + 1),
            };
            self.vals[id] = v & m;
        }
    }

    /// Phase 2: commit register next-values simultaneously.
    pub fn commit(&mut self) {
        let mut next: Vec<(NodeId, u64)> = Vec::with_capacity(self.netlist.regs.len());
        for &r in &self.netlist.regs {
            let Node::Reg {
                next: Some(n),
                width,
                ..
            } = &self.netlist.nodes[r]
            else {
                unreachable!("registers have next values");
            };
            next.push((r, self.vals[*n] & mask(*width)));
        }
        for (r, v) in next {
            self.vals[r] = v;
        }
        self.cycle += 1;
    }

    /// One full cycle with current input values.
    pub fn step(&mut self) {
        self.eval();
        self.commit();
    }

    /// Sum of occupancy-carrying register values (in-flight transactions).
    pub fn occupancy(&self) -> u64 {
        let mut total = 0;
        for &r in &self.netlist.regs {
            if let Node::Reg { role, .. } = &self.netlist.nodes[r] {
                match role {
                    RegRole::ValidBit | RegRole::Count => total += self.vals[r],
                    _ => {}
                }
            }
        }
        total
    }

    /// Groups of occupancy registers currently holding transactions.
    pub fn occupied_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = Vec::new();
        for &r in &self.netlist.regs {
            if let Node::Reg { role, group, .. } = &self.netlist.nodes[r] {
                if matches!(role, RegRole::ValidBit | RegRole::Count) && self.vals[r] != 0 {
                    groups.push(group.clone());
                }
            }
        }
        groups.sort();
        groups.dedup();
        groups
    }

    fn reg_hash(&self, mut h: u64) -> u64 {
        for &r in &self.netlist.regs {
            h ^= self.vals[r];
            h = h.wrapping_mul(0x100000001B3);
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Testbench harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub cycles: u64,
    pub seed: u64,
    /// Per-stop, per-cycle offer probability.
    pub inject_p: f64,
    /// Probability that a checker deasserts ready in a cycle.
    pub backpressure_q: f64,
    /// Extra cycles allowed for the drain phase.
    pub drain_timeout: u64,
    pub check_conservation: bool,
    pub vcd_path: Option<std::path::PathBuf>,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            cycles: 1000,
            seed: 1,
            inject_p: 0.5,
            backpressure_q: 0.0,
            drain_timeout: 2000,
            check_conservation: false,
            vcd_path: None,
        }
    }
}

/// Provenance of one injected transaction.
#[derive(Debug, Clone)]
pub struct TransactionRecord {
    pub tag: u64,
    pub source: u32,
    pub dest: u64,
    pub payload: BTreeMap<String, u64>,
    pub inject_cycle: u64,
    pub deliveries: Vec<Delivery>,
}

#[derive(Debug, Clone)]
pub struct Delivery {
    pub cycle: u64,
    pub port: u32,
    pub fields: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub enum CheckFailure {
    UnknownTag {
        port: u32,
        cycle: u64,
        tag: u64,
    },
    DuplicateDelivery {
        tag: u64,
    },
    WrongPort {
        tag: u64,
        expected: u64,
        got: u32,
    },
    OrderViolation {
        src: u32,
        dest: u64,
        tag: u64,
        after_tag: u64,
    },
    NonCausalDelivery {
        tag: u64,
    },
    DrainTimeout {
        undelivered: Vec<u64>,
        stuck_components: Vec<String>,
    },
    ConservationViolation {
        cycle: u64,
        injected: u64,
        delivered: u64,
        occupancy: u64,
    },
}

impl fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckFailure::UnknownTag { port, cycle, tag } => {
                write!(f, "port {port} delivered unknown tag {tag} at cycle {cycle}")
            }
            CheckFailure::DuplicateDelivery { tag } => {
                write!(f, "tag {tag} delivered more than once")
            }
            CheckFailure::WrongPort { tag, expected, got } => {
                write!(f, "tag {tag} destined {expected} delivered at port {got}")
            }
            CheckFailure::OrderViolation {
                src,
                dest,
                tag,
                after_tag,
            } => write!(
                f,
                "order violation for ({src} -> {dest}): tag {tag} delivered after {after_tag}"
            ),
            CheckFailure::NonCausalDelivery { tag } => {
                write!(f, "tag {tag} delivered no later than it was injected")
            }
            CheckFailure::DrainTimeout {
                undelivered,
                stuck_components,
            } => write!(
                f,
                "drain timeout: {} transaction(s) stuck ({}...), components: {}",
                undelivered.len(),
                undelivered
                    .iter()
                    .take(4)
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                stuck_components.join(", ")
            ),
            CheckFailure::ConservationViolation {
                cycle,
                injected,
                delivered,
                occupancy,
            } => write!(
                f,
                "conservation violated at cycle {cycle}: injected {injected} - delivered \
                 {delivered} != occupancy {occupancy}"
            ),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StopCounters {
    pub injected: u64,
    pub delivered: u64,
    pub bypass_taken: u64,
    pub forced_onto_ring: u64,
    pub cum_latency: u64,
}

#[derive(Debug, Clone, Default)]
pub struct PerfCounters {
    pub stops: Vec<StopCounters>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<TransactionRecord>,
    pub counters: PerfCounters,
    pub failures: Vec<CheckFailure>,
    pub cycles_run: u64,
    pub trace_hash: u64,
}

impl RunResult {
    pub fn delivered_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| !r.deliveries.is_empty())
            .count()
    }

    /// Text transaction log: `tag src dest inject_cycle deliver_cycle fields...`
    pub fn log(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let (dc, fields) = match r.deliveries.first() {
                Some(d) => (
                    d.cycle.to_string(),
                    d.fields
                        .iter()
                        .map(|(k, v)| format!("{k}={v}"))
                        .collect::<Vec<_>>()
                        .join(" "),
                ),
                None => ("-".into(), String::new()),
            };
            out.push_str(&format!(
                "{} {} {} {} {} {}\n",
                r.tag, r.source, r.dest, r.inject_cycle, dc, fields
            ));
        }
        out
    }
}

/// Drive the testbench generators from the seeded PRNG, collect transaction
/// records and counters, then drain until the design is empty.
pub fn run(netlist: &Netlist, spec: &RunSpec) -> Result<RunResult, Diagnostic> {
    let tb = netlist
        .tb
        .as_ref()
        .ok_or_else(|| Diagnostic::global("design has no testbench to drive"))?;
    let stops = tb.stops.len();
    let mut rng = SplitMix64::new(spec.seed);
    let mut sim = Sim::new(netlist);
    let mut vcd = match &spec.vcd_path {
        Some(p) => Some(VcdWriter::create(netlist, p)?),
        None => None,
    };

    let mut records: BTreeMap<u64, TransactionRecord> = BTreeMap::new();
    let mut counters = PerfCounters {
        stops: vec![StopCounters::default(); stops],
    };
    let mut failures: Vec<CheckFailure> = Vec::new();
    let mut last_tag_per_pair: BTreeMap<(u32, u64), u64> = BTreeMap::new();
    let mut next_tag: u64 = 0;
    let mut injected_total: u64 = 0;
    let mut delivered_total: u64 = 0;
    let mut trace_hash: u64 = 0xcbf29ce484222325;

    let limit = spec.cycles + spec.drain_timeout;
    let mut t = 0u64;
    loop {
        let injecting = t < spec.cycles;
        if !injecting && injected_total == delivered_total {
            break;
        }
        if t >= limit {
            let undelivered: Vec<u64> = records
                .values()
                .filter(|r| r.deliveries.is_empty())
                .map(|r| r.tag)
                .collect();
            failures.push(CheckFailure::DrainTimeout {
                undelivered,
                stuck_components: sim.occupied_groups(),
            });
            break;
        }

        // Offers: per stop, draw the offer coin, then dest, then the other
        // payload fields in sorted name order.
        let mut offers: Vec<Option<(u64, BTreeMap<String, u64>)>> = Vec::with_capacity(stops);
        for stop in tb.stops.iter() {
            if injecting && rng.coin(spec.inject_p) {
                let mut fields: BTreeMap<String, u64> = BTreeMap::new();
                for (name, &node) in &stop.gen_fields {
                    if name == "tag" {
                        continue;
                    }
                    let w = netlist.width(node);
                    let v = if name == "dest" {
                        rng.below(stops as u64)
                    } else {
                        rng.bits(w)
                    };
                    fields.insert(name.clone(), v);
                }
                offers.push(Some((next_tag, fields)));
                next_tag += 1;
            } else {
                offers.push(None);
            }
        }
        // Checker readiness.
        let mut readies: Vec<bool> = Vec::with_capacity(stops);
        for _ in 0..stops {
            readies.push(if spec.backpressure_q > 0.0 {
                !rng.coin(spec.backpressure_q)
            } else {
                true
            });
        }

        for (i, stop) in tb.stops.iter().enumerate() {
            match &offers[i] {
                Some((tag, fields)) => {
                    sim.set(stop.gen_valid, 1);
                    if let Some(&tn) = stop.gen_fields.get("tag") {
                        sim.set(tn, *tag);
                    }
                    for (name, &node) in &stop.gen_fields {
                        if name == "tag" {
                            continue;
                        }
                        sim.set(node, fields[name]);
                    }
                }
                None => sim.set(stop.gen_valid, 0),
            }
            sim.set(stop.out_ready, readies[i] as u64);
        }

        sim.eval();

        // Accepted offers become injections.
        for (i, stop) in tb.stops.iter().enumerate() {
            if let Some((tag, fields)) = &offers[i] {
                if sim.get(stop.gen_ready) != 0 {
                    let dest = fields.get("dest").copied().unwrap_or(0);
                    let mut payload = fields.clone();
                    payload.remove("dest");
                    records.insert(
                        *tag,
                        TransactionRecord {
                            tag: *tag,
                            source: i as u32,
                            dest,
                            payload,
                            inject_cycle: t,
                            deliveries: Vec::new(),
                        },
                    );
                    injected_total += 1;
                    counters.stops[i].injected += 1;
                }
            }
        }
        // Deliveries.
        for (i, stop) in tb.stops.iter().enumerate() {
            if sim.get(stop.out_valid) != 0 && readies[i] {
                let mut fields = BTreeMap::new();
                for (name, &node) in &stop.out_fields {
                    fields.insert(name.clone(), sim.get(node));
                }
                let tag = fields.get("tag").copied().unwrap_or(u64::MAX);
                delivered_total += 1;
                counters.stops[i].delivered += 1;
                match records.get_mut(&tag) {
                    None => failures.push(CheckFailure::UnknownTag {
                        port: i as u32,
                        cycle: t,
                        tag,
                    }),
                    Some(rec) => {
                        if !rec.deliveries.is_empty() {
                            failures.push(CheckFailure::DuplicateDelivery { tag });
                        }
                        if rec.dest != i as u64 {
                            failures.push(CheckFailure::WrongPort {
                                tag,
                                expected: rec.dest,
                                got: i as u32,
                            });
                        }
                        if t <= rec.inject_cycle {
                            failures.push(CheckFailure::NonCausalDelivery { tag });
                        }
                        let pair = (rec.source, rec.dest);
                        if let Some(&prev) = last_tag_per_pair.get(&pair) {
                            if tag < prev {
                                failures.push(CheckFailure::OrderViolation {
                                    src: rec.source,
                                    dest: rec.dest,
                                    tag,
                                    after_tag: prev,
                                });
                            }
                        }
                        last_tag_per_pair.insert(pair, tag);
                        counters.stops[i].cum_latency += t - rec.inject_cycle;
                        rec.deliveries.push(Delivery {
                            cycle: t,
                            port: i as u32,
                            fields,
                        });
                    }
                }
            }
        }
        // Splitter probes.
        for &(stop, taken, forced) in &netlist.probes.opp {
            counters.stops[stop as usize].bypass_taken += sim.get(taken);
            counters.stops[stop as usize].forced_onto_ring += sim.get(forced);
        }

        if let Some(v) = &mut vcd {
            v.sample(&sim, t)?;
        }

        sim.commit();
        trace_hash = sim.reg_hash(trace_hash);

        if spec.check_conservation {
            let occ = sim.occupancy();
            if injected_total - delivered_total != occ {
                failures.push(CheckFailure::ConservationViolation {
                    cycle: t,
                    injected: injected_total,
                    delivered: delivered_total,
                    occupancy: occ,
                });
            }
        }
        t += 1;
    }

    if let Some(v) = &mut vcd {
        v.finish()?;
    }

    Ok(RunResult {
        records: records.into_values().collect(),
        counters,
        failures,
        cycles_run: t,
        trace_hash,
    })
}

// ---------------------------------------------------------------------------
// Equivalence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Equivalent,
    Divergent(String),
    InterfaceMismatch(String),
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Equivalent => write!(f, "equivalent"),
            Verdict::Divergent(s) => write!(f, "divergent: {s}"),
            Verdict::InterfaceMismatch(s) => write!(f, "interface mismatch: {s}"),
        }
    }
}

/// Run two netlists on identical stimulus and compare delivered field values
/// and per-(source, dest) delivery order; absolute cycles are ignored.
pub fn check_equivalence(a: &Netlist, b: &Netlist, spec: &RunSpec) -> Result<Verdict, Diagnostic> {
    let (ta, tbind) = match (&a.tb, &b.tb) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Diagnostic::global("both designs need testbenches")),
    };
    if ta.stops.len() != tbind.stops.len() {
        return Ok(Verdict::InterfaceMismatch(format!(
            "stop counts differ: {} vs {}",
            ta.stops.len(),
            tbind.stops.len()
        )));
    }
    for (i, (sa, sb)) in ta.stops.iter().zip(&tbind.stops).enumerate() {
        let ga: Vec<&String> = sa.gen_fields.keys().collect();
        let gb: Vec<&String> = sb.gen_fields.keys().collect();
        if ga != gb {
            return Ok(Verdict::InterfaceMismatch(format!(
                "stop {i} generator fields differ: {ga:?} vs {gb:?}"
            )));
        }
        let oa: Vec<&String> = sa.out_fields.keys().collect();
        let ob: Vec<&String> = sb.out_fields.keys().collect();
        if oa != ob {
            return Ok(Verdict::InterfaceMismatch(format!(
                "stop {i} output fields differ: {oa:?} vs {ob:?}"
            )));
        }
    }
    let ra = run(a, spec)?;
    let rb = run(b, spec)?;
    if ra.records.len() != rb.records.len() {
        return Ok(Verdict::Divergent(format!(
            "injection counts differ: {} vs {}",
            ra.records.len(),
            rb.records.len()
        )));
    }
    let mb: BTreeMap<u64, &TransactionRecord> = rb.records.iter().map(|r| (r.tag, r)).collect();
    for rec in &ra.records {
        let Some(other) = mb.get(&rec.tag) else {
            return Ok(Verdict::Divergent(format!("tag {} missing in B", rec.tag)));
        };
        let da = rec.deliveries.first();
        let db = other.deliveries.first();
        match (da, db) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if x.port != y.port {
                    return Ok(Verdict::Divergent(format!(
                        "tag {} delivered to port {} vs {}",
                        rec.tag, x.port, y.port
                    )));
                }
                if x.fields != y.fields {
                    return Ok(Verdict::Divergent(format!(
                        "tag {} field values differ: {:?} vs {:?}",
                        rec.tag, x.fields, y.fields
                    )));
                }
            }
            _ => {
                return Ok(Verdict::Divergent(format!(
                    "tag {} delivered in one design only",
                    rec.tag
                )));
            }
        }
    }
    // Per-pair delivery order.
    let order = |r: &RunResult| -> BTreeMap<(u32, u64), Vec<u64>> {
        let mut seq: Vec<(u64, u32, u64)> = Vec::new();
        for rec in &r.records {
            if let Some(d) = rec.deliveries.first() {
                seq.push((d.cycle, d.port, rec.tag));
            }
        }
        seq.sort();
        let by_tag: BTreeMap<u64, &TransactionRecord> =
            r.records.iter().map(|x| (x.tag, x)).collect();
        let mut out: BTreeMap<(u32, u64), Vec<u64>> = BTreeMap::new();
        for (_, _, tag) in seq {
            let rec = by_tag[&tag];
            out.entry((rec.source, rec.dest)).or_default().push(tag);
        }
        out
    };
    let (oa, ob) = (order(&ra), order(&rb));
    if oa != ob {
        for (pair, sa) in &oa {
            if ob.get(pair) != Some(sa) {
                return Ok(Verdict::Divergent(format!(
                    "delivery order differs for pair {pair:?}"
                )));
            }
        }
    }
    Ok(Verdict::Equivalent)
}

// ---------------------------------------------------------------------------
// VCD output
// ---------------------------------------------------------------------------

/// Minimal VCD waveform writer covering ports and registers.
pub struct VcdWriter {
    w: std::io::BufWriter<std::fs::File>,
    signals: Vec<(NodeId, String, u32)>,
    last: Vec<Option<u64>>,
}

fn vcd_id(mut n: u32) -> String {
    let mut s = String::new();
    loop {
        s.push(char::from_u32(33 + n % 94).unwrap());
        n /= 94;
        if n == 0 {
            break;
        }
    }
    s
}

impl VcdWriter {
    pub fn create(netlist: &Netlist, path: &std::path::Path) -> Result<Self, Diagnostic> {
        let file = std::fs::File::create(path)
            .map_err(|e| Diagnostic::global(format!("cannot create {}: {e}", path.display())))?;
        let mut w = std::io::BufWriter::new(file);
        let mut signals: Vec<(NodeId, String, u32)> = Vec::new();
        let mut wanted: Vec<(String, NodeId)> = Vec::new();
        for (name, node) in &netlist.inputs {
            wanted.push((name.clone(), *node));
        }
        for (name, node) in &netlist.outputs {
            wanted.push((name.clone(), *node));
        }
        for &r in &netlist.regs {
            wanted.push((netlist.names[r].clone(), r));
        }
        (|| -> std::io::Result<()> {
            writeln!(w, "$timescale 1ns $end")?;
            writeln!(w, "$scope module design $end")?;
            for (i, (name, node)) in wanted.iter().enumerate() {
                let id = vcd_id(i as u32);
                let width = netlist.width(*node);
                writeln!(w, "$var wire {width} {id} {name} $end")?;
                signals.push((*node, id, width));
            }
            writeln!(w, "$upscope $end")?;
            writeln!(w, "$enddefinitions $end")?;
            Ok(())
        })()
        .map_err(|e| Diagnostic::global(format!("vcd write failed: {e}")))?;
        let n = signals.len();
        Ok(VcdWriter {
            w,
            signals,
            last: vec![None; n],
        })
    }

    pub fn sample(&mut self, sim: &Sim<'_>, t: u64) -> Result<(), Diagnostic> {
        (|| -> std::io::Result<()> {
            writeln!(self.w, "#{t}")?;
            for (i, (node, id, width)) in self.signals.iter().enumerate() {
                let v = sim.get(*node);
                if self.last[i] != Some(v) {
                    if *width == 1 {
                        writeln!(self.w, "{v}{id}")?;
                    } else {
                        writeln!(self.w, "b{v:b} {id}")?;
                    }
                    self.last[i] = Some(v);
                }
            }
            Ok(())
        })()
        .map_err(|e| Diagnostic::global(format!("vcd write failed: {e}")))
    }

    pub fn finish(&mut self) -> Result<(), Diagnostic> {
        self.w
            .flush()
            .map_err(|e| Diagnostic::global(format!("vcd write failed: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::staging::Netlist;

    #[test]
    fn isqrt_matches_brute_force() {
        for x in 0u64..2000 {
            let r = isqrt(x);
            assert!(r * r <= x && (r + 1) * (r + 1) > x, "isqrt({x}) = {r}");
        }
        assert_eq!(isqrt(450), 21);
    }

    #[test]
    fn splitmix_is_deterministic() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SplitMix64::new(43);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    /// A one-bit toggle register (D = !Q) produces 0,1,0,1,...
    #[test]
    fn toggle_register() {
        let mut n = Netlist::default();
        n.nodes.push(Node::Reg {
            next: None,
            width: 1,
            role: RegRole::Control,
            group: "t".into(),
        });
        n.names.push("q".into());
        n.regs.push(0);
        n.nodes.push(Node::Comb {
            op: Op::Not,
            args: vec![0],
            width: 1,
        });
        n.names.push("d".into());
        match &mut n.nodes[0] {
            Node::Reg { next, .. } => *next = Some(1),
            _ => unreachable!(),
        }
        n.eval_order = crate::staging::check_acyclic(&n).unwrap();
        let mut sim = Sim::new(&n);
        let mut seen = Vec::new();
        for _ in 0..6 {
            sim.eval();
            seen.push(sim.get(0));
            sim.commit();
        }
        assert_eq!(seen, vec![0, 1, 0, 1, 0, 1]);
    }
}

//! Netlist construction: staging registers, steering muxes, handshake
//! machinery, and storage, flattened into a synchronous circuit.
//!
//! Points of the flow graph become per-instance wire bundles (valid, ready,
//! demanded fields). Every element drives the slots it owns: producers drive
//! valid/fields of their output points, consumers drive ready of their input
//! points, statements drive the fields they assign. Slot references make
//! construction order irrelevant; a final pass checks that every slot was
//! driven and that the combinational graph is acyclic.

use crate::diag::Diagnostic;
use crate::flow::{
    DomainKind, EdgeId, EdgeKind, FlowGraph, PointId, PointKey, ProducerSite, SinkKind, SourceKind,
};
use crate::frontend::{BinOp, Expr, PathElem};
use crate::scope::{index_const_width, CondRef, Element, FlowPoint, ScopeGraph, ScopePath};
use std::collections::{BTreeMap, BTreeSet};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Width adapter / wire alias.
    Buf,
    Not,
    And,
    Or,
    Eq,
    Ne,
    Add,
    Sub,
    Mul,
    /// `args = [sel, a, b]`: sel != 0 ? a : b.
    Mux,
    /// Integer floor square root.
    Sqrt,
    Slice(u32, u32),
}

impl Op {
    pub fn name(&self) -> String {
        match self {
            Op::Buf => "buf".into(),
            Op::Not => "not".into(),
            Op::And => "and".into(),
            Op::Or => "or".into(),
            Op::Eq => "eq".into(),
            Op::Ne => "ne".into(),
            Op::Add => "add".into(),
            Op::Sub => "sub".into(),
            Op::Mul => "mul".into(),
            Op::Mux => "mux".into(),
            Op::Sqrt => "sqrt".into(),
            Op::Slice(hi, lo) => format!("slice{hi}_{lo}"),
        }
    }
}

/// Register classification, used for occupancy accounting and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegRole {
    /// Carries transaction data (field staging).
    Data,
    /// One bit of occupancy: counts toward in-flight transactions.
    ValidBit,
    /// Occupancy counter: its value counts toward in-flight transactions.
    Count,
    /// Handshake or bookkeeping state.
    Control,
}

#[derive(Debug, Clone)]
pub enum Node {
    Input {
        width: u32,
    },
    Const {
        value: u64,
        width: u32,
    },
    Comb {
        op: Op,
        args: Vec<NodeId>,
        width: u32,
    },
    Reg {
        next: Option<NodeId>,
        width: u32,
        role: RegRole,
        group: String,
    },
}

impl Node {
    pub fn width(&self) -> u32 {
        match self {
            Node::Input { width }
            | Node::Const { width, .. }
            | Node::Comb { width, .. }
            | Node::Reg { width, .. } => *width,
        }
    }
}

/// Testbench wiring for one stop.
#[derive(Debug, Clone)]
pub struct TbStop {
    pub gen_valid: NodeId,
    pub gen_ready: NodeId,
    pub gen_fields: BTreeMap<String, NodeId>,
    pub out_valid: NodeId,
    pub out_ready: NodeId,
    pub out_fields: BTreeMap<String, NodeId>,
}

#[derive(Debug, Clone, Default)]
pub struct TbBinding {
    pub stops: Vec<TbStop>,
}

/// Per-stop opportunistic-splitter probes: (stop, taken transfer,
/// forced-to-main transfer of a condition-true transaction).
#[derive(Debug, Clone, Default)]
pub struct Probes {
    pub opp: Vec<(u32, NodeId, NodeId)>,
}

/// Which deliberate defect to build in (acceptance mutation tests).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Invert the ring ejection compare.
    InvertDestCompare,
    /// Give arbiter priority to input 2 instead of input 1.
    SwapArbPriority,
    /// Corrupt the first field staging register's next value.
    CorruptStagingRegister,
}

#[derive(Debug, Clone, Default)]
pub struct BuildOpts {
    pub mutation: Mutation,
}

#[derive(Debug, Clone, Default)]
pub struct Netlist {
    pub nodes: Vec<Node>,
    pub names: Vec<String>,
    pub inputs: Vec<(String, NodeId)>,
    pub outputs: Vec<(String, NodeId)>,
    pub regs: Vec<NodeId>,
    /// Topological order of combinational nodes.
    pub eval_order: Vec<NodeId>,
    pub tb: Option<TbBinding>,
    pub probes: Probes,
}

impl Netlist {
    pub fn width(&self, n: NodeId) -> u32 {
        self.nodes[n].width()
    }

    pub fn find_input(&self, name: &str) -> Option<NodeId> {
        self.inputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }

    pub fn find_output(&self, name: &str) -> Option<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }

    pub fn count_op(&self, op: Op) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Comb { op: o, .. } if *o == op))
            .count()
    }

    /// Stable text dump: one node per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let name = if self.names[id].is_empty() {
                "-"
            } else {
                &self.names[id]
            };
            match node {
                Node::Input { width } => {
                    out.push_str(&format!("{id} input {width} - {name}\n"));
                }
                Node::Const { value, width } => {
                    out.push_str(&format!("{id} const {width} {value} {name}\n"));
                }
                Node::Comb { op, args, width } => {
                    let a: Vec<String> = args.iter().map(|x| x.to_string()).collect();
                    out.push_str(&format!(
                        "{id} {} {width} {} {name}\n",
                        op.name(),
                        if a.is_empty() {
                            "-".into()
                        } else {
                            a.join(",")
                        }
                    ));
                }
                Node::Reg {
                    next, width, role, ..
                } => {
                    let r = match role {
                        RegRole::Data => "data",
                        RegRole::ValidBit => "valid",
                        RegRole::Count => "count",
                        RegRole::Control => "ctl",
                    };
                    out.push_str(&format!(
                        "{id} reg.{r} {width} next={} {name}\n",
                        next.map(|n| n.to_string()).unwrap_or_else(|| "-".into())
                    ));
                }
            }
        }
        for (n, id) in &self.inputs {
            out.push_str(&format!("port in {n} {id}\n"));
        }
        for (n, id) in &self.outputs {
            out.push_str(&format!("port out {n} {id}\n"));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Stage plan
// ---------------------------------------------------------------------------

/// Registers needed for one field over one pipeline span.
#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub field: String,
    pub pipe: String,
    pub from: String,
    pub to: String,
    pub regs: u32,
}

#[derive(Debug, Clone, Default)]
pub struct StagePlan {
    pub entries: Vec<PlanEntry>,
}

/// Compute per-field register counts along each rigid domain and elastic
/// pipeline, and reject same-pipeline consumption before production.
pub fn plan_stages(g: &ScopeGraph, fg: &FlowGraph) -> Result<StagePlan, Diagnostic> {
    let _ = g;
    for (name, fr) in &fg.fields {
        let stmt_points: Vec<PointId> = fr
            .producers
            .iter()
            .filter_map(|p| match p {
                ProducerSite::Stmt(p) => Some(*p),
                _ => None,
            })
            .collect();
        for &c in &fr.consumers {
            let (dc, tc) = match &fg.points[c].key {
                PointKey::Domain { domain, tau } => (*domain, *tau),
                _ => continue,
            };
            for &p in &stmt_points {
                if let PointKey::Domain { domain: dp, tau: tp } = &fg.points[p].key {
                    if *dp == dc && *tp > tc {
                        let (cp, cs) = fg.domains[dc].label_of(tc);
                        let (pp, ps) = fg.domains[*dp].label_of(*tp);
                        return Err(Diagnostic::global(format!(
                            "${name} is consumed at |{cp}@{cs} before its assignment at \
                             |{pp}@{ps} (negative stage distance)"
                        )));
                    }
                }
            }
        }
    }

    let mut plan = StagePlan::default();
    for (name, fr) in &fg.fields {
        let mut per_domain: BTreeMap<usize, (u32, u32, u32)> = BTreeMap::new();
        for &e in &fr.route {
            let edge = &fg.edges[e];
            if let EdgeKind::DomainStep { domain } = edge.kind {
                let tau = match &fg.points[edge.from].key {
                    PointKey::Domain { tau, .. } => *tau,
                    _ => continue,
                };
                let en = per_domain.entry(domain).or_insert((u32::MAX, 0, 0));
                en.0 = en.0.min(tau);
                en.1 = en.1.max(tau + 1);
                en.2 += 1;
            }
        }
        for (d, (lo, hi, regs)) in per_domain {
            let dom = &fg.domains[d];
            let (p0, s0) = dom.label_of(lo);
            let (p1, s1) = dom.label_of(hi);
            plan.entries.push(PlanEntry {
                field: name.clone(),
                pipe: format!("{}|{}", dom.scope, dom.pipes[0]),
                from: format!("|{p0}@{s0}"),
                to: format!("|{p1}@{s1}"),
                regs,
            });
        }
        for &e in &fr.route {
            let edge = &fg.edges[e];
            if edge.kind == EdgeKind::RvHop {
                plan.entries.push(PlanEntry {
                    field: name.clone(),
                    pipe: fg.points[edge.to].display.clone(),
                    from: fg.points[edge.from].display.clone(),
                    to: fg.points[edge.to].display.clone(),
                    regs: 1,
                });
            }
        }
    }
    Ok(plan)
}

pub fn dump_plan(plan: &StagePlan) -> String {
    let mut out = String::new();
    for e in &plan.entries {
        out.push_str(&format!(
            "stage {} {} {} -> {} regs {}\n",
            e.field, e.pipe, e.from, e.to, e.regs
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Netlist builder
// ---------------------------------------------------------------------------

struct Nb {
    nodes: Vec<Node>,
    names: Vec<String>,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
    regs: Vec<NodeId>,
    used_io: BTreeSet<String>,
}

impl Nb {
    fn new() -> Self {
        Nb {
            nodes: Vec::new(),
            names: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            regs: Vec::new(),
            used_io: BTreeSet::new(),
        }
    }

    fn push(&mut self, node: Node, name: String) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(node);
        self.names.push(name);
        id
    }

    fn io_name(&mut self, want: &str) -> String {
        let mut name = want.to_string();
        let mut k = 2;
        while !self.used_io.insert(name.clone()) {
            name = format!("{want}_{k}");
            k += 1;
        }
        name
    }

    fn input(&mut self, name: &str, width: u32) -> NodeId {
        let name = self.io_name(name);
        let id = self.push(Node::Input { width }, name.clone());
        self.inputs.push((name, id));
        id
    }

    fn find_input_node(&self, name: &str) -> Option<NodeId> {
        self.inputs.iter().find(|(n, _)| n == name).map(|&(_, i)| i)
    }

    fn output(&mut self, name: &str, node: NodeId) {
        let name = self.io_name(name);
        self.outputs.push((name, node));
    }

    fn constant(&mut self, value: u64, width: u32) -> NodeId {
        self.push(Node::Const { value, width }, String::new())
    }

    fn comb(&mut self, op: Op, args: Vec<NodeId>, width: u32) -> NodeId {
        self.push(Node::Comb { op, args, width }, String::new())
    }

    /// Allocate an undriven slot (a Buf with no argument yet).
    fn slot(&mut self, width: u32, name: String) -> NodeId {
        self.push(
            Node::Comb {
                op: Op::Buf,
                args: Vec::new(),
                width,
            },
            name,
        )
    }

    fn drive(&mut self, slot: NodeId, src: NodeId) -> Result<(), Diagnostic> {
        let name = self.names[slot].clone();
        match &mut self.nodes[slot] {
            Node::Comb {
                op: Op::Buf, args, ..
            } => {
                if !args.is_empty() {
                    return Err(Diagnostic::global(format!(
                        "internal: wire '{name}' driven twice"
                    )));
                }
                args.push(src);
                Ok(())
            }
            _ => Err(Diagnostic::global(format!(
                "internal: drive on non-slot '{name}'"
            ))),
        }
    }

    fn reg(&mut self, width: u32, role: RegRole, group: &str, name: String) -> NodeId {
        let id = self.push(
            Node::Reg {
                next: None,
                width,
                role,
                group: group.to_string(),
            },
            name,
        );
        self.regs.push(id);
        id
    }

    fn set_next(&mut self, reg: NodeId, next: NodeId) {
        match &mut self.nodes[reg] {
            Node::Reg { next: n, .. } => *n = Some(next),
            _ => unreachable!("set_next on non-reg"),
        }
    }

    fn w(&self, n: NodeId) -> u32 {
        self.nodes[n].width()
    }

    fn not_(&mut self, a: NodeId) -> NodeId {
        self.comb(Op::Not, vec![a], 1)
    }

    fn and_(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.comb(Op::And, vec![a, b], 1)
    }

    fn or_(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.comb(Op::Or, vec![a, b], 1)
    }

    fn eq_(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.comb(Op::Eq, vec![a, b], 1)
    }

    fn ne_(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.comb(Op::Ne, vec![a, b], 1)
    }

    fn add_(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let w = self.w(a).max(self.w(b)) + 1;
        self.comb(Op::Add, vec![a, b], w)
    }

    fn sub_(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let w = self.w(a).max(self.w(b));
        self.comb(Op::Sub, vec![a, b], w)
    }

    fn mul_(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let w = self.w(a) + self.w(b);
        self.comb(Op::Mul, vec![a, b], w)
    }

    fn mux(&mut self, s: NodeId, a: NodeId, b: NodeId) -> NodeId {
        let w = self.w(a).max(self.w(b));
        self.comb(Op::Mux, vec![s, a, b], w)
    }

    fn resize(&mut self, a: NodeId, w: u32) -> NodeId {
        let aw = self.w(a);
        if aw == w {
            a
        } else if aw > w {
            self.comb(Op::Slice(w - 1, 0), vec![a], w)
        } else {
            self.comb(Op::Buf, vec![a], w)
        }
    }
}

fn sanitize(s: &str) -> String {
    let mut out = String::new();
    let mut last_us = true;
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c);
            last_us = false;
        } else if !last_us {
            out.push('_');
            last_us = true;
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

#[derive(Debug, Clone, Default)]
struct Wires {
    valid: Option<NodeId>,
    ready: Option<NodeId>,
    fields: BTreeMap<String, NodeId>,
    loop_flag: Option<NodeId>,
}

/// A splitter whose main output rejoins its taken output through a ring:
/// tracking state keeps locally-destined transactions in order.
#[derive(Debug, Clone)]
struct HoldLink {
    opp_element: usize,
    ring_element: usize,
    /// Points from ring ejection to the arbiter input, in flow order.
    chain: Vec<PointId>,
    /// RvHop edges along the chain.
    chain_edges: Vec<EdgeId>,
}

struct Build<'a> {
    g: &'a ScopeGraph,
    fg: &'a FlowGraph,
    nb: Nb,
    opts: BuildOpts,
    ports: u32,
    index_width: u32,
    wires: BTreeMap<(PointId, u32), Wires>,
    holds: Vec<HoldLink>,
    /// Per (ring element, stop): (eject_grant, head_loop) for chain-less
    /// rejoins.
    ring_arrivals: BTreeMap<(usize, u32), (NodeId, NodeId)>,
    tb: TbBinding,
    probes: Probes,
}

impl<'a> Build<'a> {
    fn inst_count(&self, scope: &ScopePath) -> u32 {
        if scope.0.iter().any(|e| matches!(e, PathElem::HierRep(_))) {
            self.ports
        } else {
            1
        }
    }

    fn flat(&self, p: PointId, inst: u32) -> String {
        let d = self.fg.points[p].display.replace("[*]", &inst.to_string());
        sanitize(&d)
    }

    fn wires(&self, p: PointId, inst: u32) -> &Wires {
        &self.wires[&(p, inst)]
    }

    fn valid(&self, p: PointId, inst: u32) -> NodeId {
        self.wires(p, inst).valid.expect("valid wire allocated")
    }

    fn ready(&self, p: PointId, inst: u32) -> NodeId {
        self.wires(p, inst).ready.expect("ready wire allocated")
    }

    fn field(&self, p: PointId, inst: u32, f: &str) -> NodeId {
        *self
            .wires(p, inst)
            .fields
            .get(f)
            .unwrap_or_else(|| panic!("field {f} wired at point {}", self.fg.points[p].display))
    }
}

/// Find splitters whose main path feeds a ring that rejoins the taken path
/// at an arbiter (the order-preserving interlock applies there).
fn find_holds(fg: &FlowGraph) -> Vec<HoldLink> {
    let mut holds = Vec::new();
    let opps: Vec<(usize, PointId)> = fg
        .edges
        .iter()
        .filter_map(|e| match e.kind {
            EdgeKind::OppTaken { element } => Some((element, e.to)),
            _ => None,
        })
        .collect();
    for (opp_eid, taken_pt) in opps {
        let Some(main_pt) = fg.edges.iter().find_map(|m| match m.kind {
            EdgeKind::OppMain { element } if element == opp_eid => Some(m.to),
            _ => None,
        }) else {
            continue;
        };
        let Some(ring_eid) = fg.out_edges(main_pt).find_map(|e| match e.kind {
            EdgeKind::RingInject { element } => Some(element),
            _ => None,
        }) else {
            continue;
        };
        let Some((arb_eid, which)) = fg.out_edges(taken_pt).find_map(|e| match e.kind {
            EdgeKind::ArbIn { element, which } => Some((element, which)),
            _ => None,
        }) else {
            continue;
        };
        let other_in = fg.edges.iter().find_map(|e| match e.kind {
            EdgeKind::ArbIn { element, which: w2 } if element == arb_eid && w2 != which => {
                Some(e.from)
            }
            _ => None,
        });
        let Some(mut p) = other_in else { continue };
        let mut chain = vec![p];
        let mut chain_edges = Vec::new();
        let mut found = false;
        for _ in 0..64 {
            let Some((kind, eid2, from)) =
                fg.in_edges(p).next().map(|e| (e.kind, e.id, e.from))
            else {
                break;
            };
            match kind {
                EdgeKind::RvHop => {
                    chain_edges.push(eid2);
                    chain.push(from);
                    p = from;
                }
                EdgeKind::RingEject { element } if element == ring_eid => {
                    found = true;
                    break;
                }
                _ => break,
            }
        }
        if found {
            chain.reverse();
            chain_edges.reverse();
            holds.push(HoldLink {
                opp_element: opp_eid,
                ring_element: ring_eid,
                chain,
                chain_edges,
            });
        }
    }
    holds
}

/// Build the flat synchronous netlist for a resolved design.
pub fn build_netlist(
    g: &ScopeGraph,
    fg: &FlowGraph,
    opts: &BuildOpts,
) -> Result<Netlist, Diagnostic> {
    for (_, el) in &g.elements {
        if let Element::StallChain { first, last, base, .. } = el {
            if first == last {
                return Err(Diagnostic::global(format!(
                    "stall pipeline |{base} needs at least two hops to build \
                     (entry and exit share one flow point)"
                )));
            }
        }
        if let Element::RvPipe { first, last, base, .. } = el {
            if first == last {
                return Err(Diagnostic::global(format!(
                    "pipeline |{base} needs at least two hops to build \
                     (entry and exit share one flow point)"
                )));
            }
        }
    }

    let mut b = Build {
        g,
        fg,
        nb: Nb::new(),
        opts: opts.clone(),
        ports: g.ports,
        index_width: index_const_width(g.ports),
        wires: BTreeMap::new(),
        holds: find_holds(fg),
        ring_arrivals: BTreeMap::new(),
        tb: TbBinding::default(),
        probes: Probes::default(),
    };

    allocate_wires(&mut b);
    for name in &b.g.stall_inputs.clone() {
        b.nb.input(name, 1);
    }
    build_sources(&mut b)?;
    build_domains(&mut b)?;
    build_hops(&mut b)?;
    build_elements(&mut b)?;
    build_statements(&mut b)?;
    build_any_muxes(&mut b)?;
    build_sinks(&mut b)?;
    apply_reg_corruption(&mut b);

    for (id, node) in b.nb.nodes.iter().enumerate() {
        if let Node::Comb {
            op: Op::Buf, args, ..
        } = node
        {
            if args.is_empty() {
                return Err(Diagnostic::global(format!(
                    "internal: undriven wire '{}' (node {id})",
                    b.nb.names[id]
                )));
            }
        }
    }
    for &r in &b.nb.regs {
        if let Node::Reg { next: None, .. } = b.nb.nodes[r] {
            return Err(Diagnostic::global(format!(
                "internal: register '{}' has no next value",
                b.nb.names[r]
            )));
        }
    }

    let mut netlist = Netlist {
        nodes: b.nb.nodes,
        names: b.nb.names,
        inputs: b.nb.inputs,
        outputs: b.nb.outputs,
        regs: b.nb.regs,
        eval_order: Vec::new(),
        tb: if b.tb.stops.is_empty() {
            None
        } else {
            Some(b.tb)
        },
        probes: b.probes,
    };
    netlist.eval_order = check_acyclic(&netlist)?;
    Ok(netlist)
}

/// Pre-allocate the wire slots of every point instance.
fn allocate_wires(b: &mut Build<'_>) {
    let mut loop_points: BTreeSet<PointId> = BTreeSet::new();
    for h in &b.holds {
        loop_points.extend(h.chain.iter().copied());
    }

    for p in 0..b.fg.points.len() {
        let (key_handshake, scope, skip) = {
            let info = &b.fg.points[p];
            let handshake = match &info.key {
                PointKey::Elastic { .. } => true,
                PointKey::Domain { domain, tau } => {
                    let dom = &b.fg.domains[*domain];
                    matches!(dom.kind, DomainKind::Stall { .. })
                        && (*tau == 0 || *tau == dom.tau_exit)
                }
                PointKey::Sub { .. } | PointKey::RingArc { .. } => false,
            };
            (
                handshake,
                info.scope.clone(),
                matches!(info.key, PointKey::RingArc { .. }),
            )
        };
        if skip {
            continue;
        }
        let fields = b.fg.fields_at(p);
        for inst in 0..b.inst_count(&scope) {
            let flat = b.flat(p, inst);
            let mut w = Wires::default();
            if key_handshake {
                w.valid = Some(b.nb.slot(1, format!("{flat}_valid")));
                w.ready = Some(b.nb.slot(1, format!("{flat}_ready")));
            }
            for f in &fields {
                let width = b.fg.fields[f].width;
                w.fields
                    .insert(f.clone(), b.nb.slot(width, format!("{flat}_{f}")));
            }
            if loop_points.contains(&p) {
                w.loop_flag = Some(b.nb.slot(1, format!("{flat}_loop")));
            }
            b.wires.insert((p, inst), w);
        }
    }
}

/// Generators and primary inputs drive the valid/field slots of their
/// points; their ready wires become outputs.
fn build_sources(b: &mut Build<'_>) -> Result<(), Diagnostic> {
    for src in &b.fg.sources.clone() {
        let p = src.point;
        let produced: Vec<String> = b
            .fg
            .fields
            .iter()
            .filter(|(_, r)| r.producers.contains(&ProducerSite::External(p)))
            .map(|(n, _)| n.clone())
            .collect();
        let scope = b.fg.points[p].scope.clone();
        let insts = b.inst_count(&scope);
        let is_gen = matches!(src.kind, SourceKind::Generator { .. });
        let bare = insts == 1 && b.wires(p, 0).valid.is_none();
        for inst in 0..insts {
            let base = if is_gen {
                format!("gen{inst}")
            } else {
                b.flat(p, inst)
            };
            let mut gen_fields = BTreeMap::new();
            for f in &produced {
                let width = b.fg.fields[f].width;
                let name = if bare { f.clone() } else { format!("{base}_{f}") };
                let node = b.nb.input(&name, width);
                let slot = b.field(p, inst, f);
                b.nb.drive(slot, node)?;
                gen_fields.insert(f.clone(), node);
            }
            let vslot = b.wires(p, inst).valid;
            if let Some(vslot) = vslot {
                let v = b.nb.input(&format!("{base}_valid"), 1);
                b.nb.drive(vslot, v)?;
                let r = b.ready(p, inst);
                b.nb.output(&format!("{base}_ready"), r);
                if is_gen {
                    b.tb.stops.push(TbStop {
                        gen_valid: v,
                        gen_ready: r,
                        gen_fields,
                        out_valid: 0,
                        out_ready: 0,
                        out_fields: BTreeMap::new(),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Rigid domains: lockstep valid chains and per-field staging registers.
fn build_domains(b: &mut Build<'_>) -> Result<(), Diagnostic> {
    for (d, dom) in b.fg.domains.clone().iter().enumerate() {
        let insts = b.inst_count(&dom.scope);
        let pts: Vec<Option<PointId>> = (0..=dom.tau_max)
            .map(|tau| {
                b.fg.points
                    .iter()
                    .position(|pi| pi.key == PointKey::Domain { domain: d, tau })
            })
            .collect();
        let stall_input = match dom.kind {
            DomainKind::Stall { element } => {
                let name = b.g.elements.iter().find_map(|(id, e)| match e {
                    Element::StallChain { stall_input, .. } if *id == element => {
                        Some(stall_input.clone())
                    }
                    _ => None,
                });
                name.map(|n| {
                    b.nb
                        .find_input_node(&n)
                        .expect("stall input registered before domains")
                })
            }
            DomainKind::Free => None,
        };

        for inst in 0..insts {
            let group = format!(
                "{}_{}",
                sanitize(&dom.scope.to_string().replace("[*]", &inst.to_string())),
                dom.pipes[0]
            );
            let is_stall = matches!(dom.kind, DomainKind::Stall { .. });

            let mut advance = None;
            if is_stall {
                let p0 = pts[0].expect("entry point exists");
                let mut vregs = Vec::new();
                for tau in 1..=dom.tau_max {
                    let v = b
                        .nb
                        .reg(1, RegRole::ValidBit, &group, format!("{group}_v{tau}"));
                    vregs.push(v);
                }
                let v_exit = vregs[dom.tau_exit as usize - 1];
                let p_exit = pts[dom.tau_exit as usize].expect("exit point exists");
                let exit_valid_slot = b.wires(p_exit, inst).valid.expect("stall exit handshake");
                b.nb.drive(exit_valid_slot, v_exit)?;
                let exit_ready = b.ready(p_exit, inst);
                let not_ready = b.nb.not_(exit_ready);
                let blocked = b.nb.and_(v_exit, not_ready);
                let hold = match stall_input {
                    Some(si) => b.nb.or_(si, blocked),
                    None => blocked,
                };
                let adv = b.nb.not_(hold);
                let entry_ready_slot = b.wires(p0, inst).ready.expect("stall entry handshake");
                b.nb.drive(entry_ready_slot, adv)?;
                let entry_valid = b.valid(p0, inst);
                let entry_transfer = b.nb.and_(entry_valid, adv);
                for (k, &v) in vregs.iter().enumerate() {
                    let prev = if k == 0 { entry_transfer } else { vregs[k - 1] };
                    let nxt = b.nb.mux(adv, prev, v);
                    b.nb.set_next(v, nxt);
                }
                advance = Some(adv);
            }

            for tau in 1..=dom.tau_max {
                let Some(pt) = pts[tau as usize] else { continue };
                let Some(prev_pt) = pts[(tau - 1) as usize] else {
                    continue;
                };
                let step_edge = b.fg.edges.iter().find_map(|e| {
                    if matches!(e.kind, EdgeKind::DomainStep { domain } if domain == d)
                        && e.from == prev_pt
                        && e.to == pt
                    {
                        Some(e.id)
                    } else {
                        None
                    }
                });
                let Some(step_edge) = step_edge else { continue };
                for f in b.fg.crossing(step_edge) {
                    let width = b.fg.fields[&f].width;
                    let r = b
                        .nb
                        .reg(width, RegRole::Data, &group, format!("{group}_t{tau}_{f}"));
                    let prev = b.field(prev_pt, inst, &f);
                    let nxt = match advance {
                        Some(adv) => b.nb.mux(adv, prev, r),
                        None => prev,
                    };
                    b.nb.set_next(r, nxt);
                    let slot = b.field(pt, inst, &f);
                    b.nb.drive(slot, r)?;
                }
            }
        }
    }
    Ok(())
}

/// Elastic interlocked stages: every RvHop edge becomes one full-interlock
/// register stage (accept when empty or draining this cycle).
fn build_hops(b: &mut Build<'_>) -> Result<(), Diagnostic> {
    let loop_edges: BTreeSet<EdgeId> = b
        .holds
        .iter()
        .flat_map(|h| h.chain_edges.iter().copied())
        .collect();
    let edges: Vec<(EdgeId, PointId, PointId)> = b
        .fg
        .edges
        .iter()
        .filter(|e| e.kind == EdgeKind::RvHop)
        .map(|e| (e.id, e.from, e.to))
        .collect();
    for (eid, from, to) in edges {
        let scope = b.fg.points[to].scope.clone();
        let insts = b.inst_count(&scope);
        let crossing = b.fg.crossing(eid);
        for inst in 0..insts {
            let group = b.flat(to, inst);
            let v = b.nb.reg(1, RegRole::ValidBit, &group, format!("{group}_v"));
            let in_valid = b.valid(from, inst);
            let out_ready = b.ready(to, inst);
            let nv = b.nb.not_(v);
            let in_ready = b.nb.or_(nv, out_ready);
            let in_ready_slot = b.wires(from, inst).ready.expect("hop input handshake");
            b.nb.drive(in_ready_slot, in_ready)?;
            let in_transfer = b.nb.and_(in_valid, in_ready);
            let departs = b.nb.and_(v, out_ready);
            let nd = b.nb.not_(departs);
            let stay = b.nb.and_(v, nd);
            let vn = b.nb.or_(in_transfer, stay);
            b.nb.set_next(v, vn);
            let out_valid_slot = b.wires(to, inst).valid.expect("hop output handshake");
            b.nb.drive(out_valid_slot, v)?;
            for f in &crossing {
                let width = b.fg.fields[f].width;
                let r = b.nb.reg(width, RegRole::Data, &group, format!("{group}_{f}"));
                let src = b.field(from, inst, f);
                let nxt = b.nb.mux(in_transfer, src, r);
                b.nb.set_next(r, nxt);
                let slot = b.field(to, inst, f);
                b.nb.drive(slot, r)?;
            }
            if loop_edges.contains(&eid) {
                let r = b.nb.reg(1, RegRole::Data, &group, format!("{group}_loop"));
                let src = b.wires(from, inst).loop_flag.expect("loop flag on chain");
                let nxt = b.nb.mux(in_transfer, src, r);
                b.nb.set_next(r, nxt);
                let slot = b.wires(to, inst).loop_flag.expect("loop flag on chain");
                b.nb.drive(slot, r)?;
            }
        }
    }
    Ok(())
}

fn build_elements(b: &mut Build<'_>) -> Result<(), Diagnostic> {
    let elements = b.g.elements.clone();
    // Rings first: splitter hold logic reads their arrival taps.
    for (eid, el) in &elements {
        if matches!(el, Element::Ring { .. }) {
            build_ring(b, *eid, el)?;
        }
    }
    for (eid, el) in &elements {
        match el {
            Element::Fifo {
                input,
                output,
                depth,
                ..
            } => build_fifo(b, input, output, *depth)?,
            Element::Arb2 { in1, in2, out, .. } => build_arb(b, in1, in2, out)?,
            Element::Opp {
                input,
                taken,
                main,
                cond,
                ..
            } => build_opp(b, *eid, input, taken, main, cond)?,
            Element::Testbench { exit, .. } => build_checker(b, exit)?,
            _ => {}
        }
    }
    Ok(())
}

fn ptr_inc_mod(b: &mut Build<'_>, ptr: NodeId, depth: u32, ptr_w: u32) -> NodeId {
    let one = b.nb.constant(1, ptr_w);
    let maxv = b.nb.constant((depth - 1) as u64, ptr_w);
    let at_max = b.nb.eq_(ptr, maxv);
    let zero = b.nb.constant(0, ptr_w);
    let sum = b.nb.add_(ptr, one);
    let sum = b.nb.resize(sum, ptr_w);
    b.nb.mux(at_max, zero, sum)
}

fn build_fifo(
    b: &mut Build<'_>,
    input: &FlowPoint,
    output: &FlowPoint,
    depth: u32,
) -> Result<(), Diagnostic> {
    let a = b.fg.find_point(input).expect("fifo input point");
    let o = b.fg.find_point(output).expect("fifo output point");
    let eid = b
        .fg
        .edges
        .iter()
        .find(|e| matches!(e.kind, EdgeKind::Fifo { .. }) && e.from == a && e.to == o)
        .map(|e| e.id)
        .expect("fifo edge");
    let crossing = b.fg.crossing(eid);
    let scope = b.fg.points[a].scope.clone();
    let insts = b.inst_count(&scope);
    let ptr_w = (32 - (depth.max(2) - 1).leading_zeros()).max(1);
    let cnt_w = 32 - depth.leading_zeros();
    for inst in 0..insts {
        let group = format!("{}_fifo", b.flat(o, inst));
        let count = b
            .nb
            .reg(cnt_w, RegRole::Count, &group, format!("{group}_count"));
        let head = b
            .nb
            .reg(ptr_w, RegRole::Control, &group, format!("{group}_head"));
        let tail = b
            .nb
            .reg(ptr_w, RegRole::Control, &group, format!("{group}_tail"));
        let zero_c = b.nb.constant(0, cnt_w);
        let depth_c = b.nb.constant(depth as u64, cnt_w);
        let empty = b.nb.eq_(count, zero_c);
        let full = b.nb.eq_(count, depth_c);
        let in_valid = b.valid(a, inst);
        let out_ready = b.ready(o, inst);

        let one1 = b.nb.constant(1, 1);
        let out_valid = b.nb.mux(empty, in_valid, one1);
        let ovs = b.wires(o, inst).valid.expect("fifo out handshake");
        b.nb.drive(ovs, out_valid)?;

        let nempty = b.nb.not_(empty);
        let pop_store = b.nb.and_(nempty, out_ready);
        let nfull = b.nb.not_(full);
        let in_ready = b.nb.or_(nfull, pop_store);
        let irs = b.wires(a, inst).ready.expect("fifo in handshake");
        b.nb.drive(irs, in_ready)?;

        let iv_and_rdy = b.nb.and_(in_valid, in_ready);
        let byp = b.nb.and_(empty, out_ready);
        let bypass_transfer = b.nb.and_(byp, in_valid);
        let nbyp = b.nb.not_(bypass_transfer);
        let push_store = b.nb.and_(iv_and_rdy, nbyp);

        let tail_inc = ptr_inc_mod(b, tail, depth, ptr_w);
        let tail_n = b.nb.mux(push_store, tail_inc, tail);
        b.nb.set_next(tail, tail_n);
        let head_inc = ptr_inc_mod(b, head, depth, ptr_w);
        let head_n = b.nb.mux(pop_store, head_inc, head);
        b.nb.set_next(head, head_n);
        let c1 = b.nb.add_(count, push_store);
        let c2 = b.nb.sub_(c1, pop_store);
        let cn = b.nb.resize(c2, cnt_w);
        b.nb.set_next(count, cn);

        for f in &crossing {
            let width = b.fg.fields[f].width;
            let mut cells = Vec::new();
            for e in 0..depth {
                let cell = b
                    .nb
                    .reg(width, RegRole::Data, &group, format!("{group}_e{e}_{f}"));
                let idx = b.nb.constant(e as u64, ptr_w);
                let here = b.nb.eq_(tail, idx);
                let wr = b.nb.and_(push_store, here);
                let src = b.field(a, inst, f);
                let nxt = b.nb.mux(wr, src, cell);
                b.nb.set_next(cell, nxt);
                cells.push(cell);
            }
            let mut read = cells[depth as usize - 1];
            for e in (0..depth - 1).rev() {
                let idx = b.nb.constant(e as u64, ptr_w);
                let here = b.nb.eq_(head, idx);
                read = b.nb.mux(here, cells[e as usize], read);
            }
            let src = b.field(a, inst, f);
            let outv = b.nb.mux(empty, src, read);
            let slot = b.field(o, inst, f);
            b.nb.drive(slot, outv)?;
        }
    }
    Ok(())
}

fn build_arb(
    b: &mut Build<'_>,
    in1: &FlowPoint,
    in2: &FlowPoint,
    out: &FlowPoint,
) -> Result<(), Diagnostic> {
    let a1 = b.fg.find_point(in1).expect("arb in1 point");
    let a2 = b.fg.find_point(in2).expect("arb in2 point");
    let o = b.fg.find_point(out).expect("arb out point");
    let fields: BTreeSet<String> = b
        .fg
        .edges
        .iter()
        .filter(|e| e.to == o && matches!(e.kind, EdgeKind::ArbIn { .. }))
        .flat_map(|e| b.fg.crossing(e.id))
        .collect();
    let scope = b.fg.points[o].scope.clone();
    let insts = b.inst_count(&scope);
    let swap = b.opts.mutation == Mutation::SwapArbPriority;
    for inst in 0..insts {
        let v1 = b.valid(a1, inst);
        let v2 = b.valid(a2, inst);
        let out_ready = b.ready(o, inst);
        let ov = b.nb.or_(v1, v2);
        let ovs = b.wires(o, inst).valid.expect("arb out handshake");
        b.nb.drive(ovs, ov)?;
        let (wins1, r1, r2) = if swap {
            let nv2 = b.nb.not_(v2);
            let r1 = b.nb.and_(out_ready, nv2);
            (nv2, r1, out_ready)
        } else {
            let nv1 = b.nb.not_(v1);
            let r2 = b.nb.and_(out_ready, nv1);
            (v1, out_ready, r2)
        };
        let r1s = b.wires(a1, inst).ready.expect("arb in1 handshake");
        b.nb.drive(r1s, r1)?;
        let r2s = b.wires(a2, inst).ready.expect("arb in2 handshake");
        b.nb.drive(r2s, r2)?;
        for f in &fields {
            let f1 = b.field(a1, inst, f);
            let f2 = b.field(a2, inst, f);
            let sel = b.nb.mux(wins1, f1, f2);
            let slot = b.field(o, inst, f);
            b.nb.drive(slot, sel)?;
        }
    }
    Ok(())
}

fn build_opp(
    b: &mut Build<'_>,
    eid: usize,
    input: &FlowPoint,
    taken: &FlowPoint,
    main: &FlowPoint,
    cond: &CondRef,
) -> Result<(), Diagnostic> {
    let a = b.fg.find_point(input).expect("opp input point");
    let t = b.fg.find_point(taken).expect("opp taken point");
    let m = b.fg.find_point(main).expect("opp main point");
    let hold = b.holds.iter().find(|h| h.opp_element == eid).cloned();
    let taken_fields = b
        .fg
        .edges
        .iter()
        .find(|e| matches!(e.kind, EdgeKind::OppTaken { element } if element == eid))
        .map(|e| b.fg.crossing(e.id))
        .unwrap_or_default();
    let main_fields = b
        .fg
        .edges
        .iter()
        .find(|e| matches!(e.kind, EdgeKind::OppMain { element } if element == eid))
        .map(|e| b.fg.crossing(e.id))
        .unwrap_or_default();
    let scope = b.fg.points[a].scope.clone();
    let insts = b.inst_count(&scope);
    for inst in 0..insts {
        let group = format!("{}_opp", b.flat(a, inst));
        let c0 = b.field(a, inst, &cond.signal);
        let c = if cond.negated { b.nb.not_(c0) } else { c0 };
        let in_valid = b.valid(a, inst);
        let taken_ready = b.ready(t, inst);
        let main_ready = b.ready(m, inst);

        // While forced locals are in flight on the ring, keep further
        // condition-true traffic on the main route so the rejoin arbiter
        // sees returning transactions in injection order.
        let (c_use, inc_slot) = match &hold {
            Some(h) => {
                let cnt =
                    b.nb.reg(8, RegRole::Control, &group, format!("{group}_outstanding"));
                let zero8 = b.nb.constant(0, 8);
                let idle = b.nb.eq_(cnt, zero8);
                let c_eff = b.nb.and_(c, idle);
                let dec = if let Some(&last) = h.chain_edges.last() {
                    let (efrom,) = {
                        let e = &b.fg.edges[last];
                        (e.from,)
                    };
                    let av = b.valid(efrom, inst);
                    let ar = b.ready(efrom, inst);
                    let tr = b.nb.and_(av, ar);
                    let lp = b.wires(efrom, inst).loop_flag.expect("loop flag on chain");
                    b.nb.and_(tr, lp)
                } else {
                    let (grant, lp) = b.ring_arrivals[&(h.ring_element, inst)];
                    b.nb.and_(grant, lp)
                };
                let inc_slot = b.nb.slot(1, format!("{group}_forced"));
                let a1 = b.nb.add_(cnt, inc_slot);
                let a2 = b.nb.sub_(a1, dec);
                let nxt = b.nb.resize(a2, 8);
                b.nb.set_next(cnt, nxt);
                (c_eff, Some(inc_slot))
            }
            None => (c, None),
        };

        let tv = b.nb.and_(in_valid, c_use);
        let tvs = b.wires(t, inst).valid.expect("opp taken handshake");
        b.nb.drive(tvs, tv)?;
        let taken_go = b.nb.and_(c_use, taken_ready);
        let ntg = b.nb.not_(taken_go);
        let mv = b.nb.and_(in_valid, ntg);
        let mvs = b.wires(m, inst).valid.expect("opp main handshake");
        b.nb.drive(mvs, mv)?;
        let in_ready = b.nb.or_(taken_go, main_ready);
        let irs = b.wires(a, inst).ready.expect("opp input handshake");
        b.nb.drive(irs, in_ready)?;

        for f in &taken_fields {
            let src = b.field(a, inst, f);
            let slot = b.field(t, inst, f);
            b.nb.drive(slot, src)?;
        }
        for f in &main_fields {
            let src = b.field(a, inst, f);
            let slot = b.field(m, inst, f);
            b.nb.drive(slot, src)?;
        }

        let taken_transfer = b.nb.and_(tv, taken_ready);
        let main_transfer = b.nb.and_(mv, main_ready);
        let forced = b.nb.and_(main_transfer, c);
        if let Some(slot) = inc_slot {
            b.nb.drive(slot, forced)?;
        }
        b.probes.opp.push((inst, taken_transfer, forced));
    }
    Ok(())
}

fn build_ring(b: &mut Build<'_>, eid: usize, el: &Element) -> Result<(), Diagnostic> {
    let Element::Ring {
        injection, ejection, ..
    } = el
    else {
        unreachable!()
    };
    let inj = b.fg.find_point(injection).expect("ring injection point");
    let ej = b.fg.find_point(ejection).expect("ring ejection point");
    let fields: BTreeSet<String> = b
        .fg
        .edges
        .iter()
        .filter(|e| {
            matches!(
                e.kind,
                EdgeKind::RingInject { element }
                | EdgeKind::RingThrough { element }
                | EdgeKind::RingEject { element } if element == eid
            )
        })
        .flat_map(|e| b.fg.crossing(e.id))
        .collect();
    let n = b.ports as usize;
    let invert = b.opts.mutation == Mutation::InvertDestCompare;

    struct Stop {
        s0v: NodeId,
        s1v: NodeId,
        s0f: BTreeMap<String, NodeId>,
        s1f: BTreeMap<String, NodeId>,
        s0l: NodeId,
        s1l: NodeId,
        rdy: NodeId,
        skv: NodeId,
        skf: BTreeMap<String, NodeId>,
        skl: NodeId,
    }
    let mut stops: Vec<Stop> = Vec::new();
    for i in 0..n {
        let group = format!("ring_stop{i}_hop");
        let s0v = b
            .nb
            .reg(1, RegRole::ValidBit, &group, format!("{group}_s0_v"));
        let s1v = b
            .nb
            .reg(1, RegRole::ValidBit, &group, format!("{group}_s1_v"));
        let mut s0f = BTreeMap::new();
        let mut s1f = BTreeMap::new();
        for f in &fields {
            let w = b.fg.fields[f].width;
            s0f.insert(
                f.clone(),
                b.nb.reg(w, RegRole::Data, &group, format!("{group}_s0_{f}")),
            );
            s1f.insert(
                f.clone(),
                b.nb.reg(w, RegRole::Data, &group, format!("{group}_s1_{f}")),
            );
        }
        let s0l = b
            .nb
            .reg(1, RegRole::Data, &group, format!("{group}_s0_loop"));
        let s1l = b
            .nb
            .reg(1, RegRole::Data, &group, format!("{group}_s1_loop"));
        let rdy = b
            .nb
            .reg(1, RegRole::Control, &group, format!("{group}_rdy"));
        let sk_group = format!("ring_stop{i}_skid");
        let skv = b
            .nb
            .reg(1, RegRole::ValidBit, &sk_group, format!("{sk_group}_v"));
        let mut skf = BTreeMap::new();
        for f in &fields {
            let w = b.fg.fields[f].width;
            skf.insert(
                f.clone(),
                b.nb
                    .reg(w, RegRole::Data, &sk_group, format!("{sk_group}_{f}")),
            );
        }
        let skl = b
            .nb
            .reg(1, RegRole::Data, &sk_group, format!("{sk_group}_loop"));
        stops.push(Stop {
            s0v,
            s1v,
            s0f,
            s1f,
            s0l,
            s1l,
            rdy,
            skv,
            skf,
            skl,
        });
    }

    struct Decision {
        fwd_grant: NodeId,
        inj_transfer: NodeId,
        dep: NodeId,
    }
    let mut decisions: Vec<Decision> = Vec::new();
    for i in 0..n {
        let (s0v, skv, skl, s0l) = (stops[i].s0v, stops[i].skv, stops[i].skl, stops[i].s0l);
        let s0_dest = stops[i].s0f["dest"];
        let next_rdy = stops[(i + 1) % n].rdy;
        let idx = b.nb.constant(i as u64, b.index_width);
        let cmp = if invert {
            b.nb.ne_(s0_dest, idx)
        } else {
            b.nb.eq_(s0_dest, idx)
        };
        let eject_want = b.nb.and_(s0v, cmp);
        let out_ready = b.ready(ej, i as u32);
        let skid_pop = b.nb.and_(skv, out_ready);
        let nskv = b.nb.not_(skv);
        let skid_can = b.nb.or_(nskv, skid_pop);
        let eject_grant = b.nb.and_(eject_want, skid_can);
        let new = b.nb.not_(eject_want);
        let fwd_want = b.nb.and_(s0v, new);
        let fwd_grant = b.nb.and_(fwd_want, next_rdy);
        let dep = b.nb.or_(eject_grant, fwd_grant);
        let nfw = b.nb.not_(fwd_want);
        let inj_ready = b.nb.and_(next_rdy, nfw);
        let irs = b
            .wires(inj, i as u32)
            .ready
            .expect("ring injection handshake");
        b.nb.drive(irs, inj_ready)?;
        let inj_valid = b.valid(inj, i as u32);
        let inj_transfer = b.nb.and_(inj_valid, inj_ready);

        // Skid register and ejection presentation.
        let zero1 = b.nb.constant(0, 1);
        let one1 = b.nb.constant(1, 1);
        let skvn0 = b.nb.mux(skid_pop, zero1, skv);
        let skvn = b.nb.mux(eject_grant, one1, skvn0);
        b.nb.set_next(skv, skvn);
        for f in &fields {
            let cell = stops[i].skf[f];
            let src = stops[i].s0f[f];
            let nxt = b.nb.mux(eject_grant, src, cell);
            b.nb.set_next(cell, nxt);
            let slot = b.field(ej, i as u32, f);
            b.nb.drive(slot, cell)?;
        }
        let skl_next = b.nb.mux(eject_grant, s0l, skl);
        b.nb.set_next(skl, skl_next);
        let ovs = b
            .wires(ej, i as u32)
            .valid
            .expect("ring ejection handshake");
        b.nb.drive(ovs, skv)?;
        let loop_slot = b.wires(ej, i as u32).loop_flag;
        if let Some(slot) = loop_slot {
            b.nb.drive(slot, skl)?;
        }
        b.ring_arrivals.insert((eid, i as u32), (eject_grant, s0l));

        decisions.push(Decision {
            fwd_grant,
            inj_transfer,
            dep,
        });
    }

    // Arrivals: stop i receives from stop i-1.
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let fwd_grant = decisions[prev].fwd_grant;
        let inj_transfer = decisions[prev].inj_transfer;
        let dep_i = decisions[i].dep;
        let (s0v, s1v, s0l, s1l, rdy) = (
            stops[i].s0v,
            stops[i].s1v,
            stops[i].s0l,
            stops[i].s1l,
            stops[i].rdy,
        );
        let prev_s0l = stops[prev].s0l;

        let arr_v = b.nb.or_(fwd_grant, inj_transfer);
        let or_s1_arr = b.nb.or_(s1v, arr_v);
        let or_s0_arr = b.nb.or_(s0v, arr_v);
        let s0vn = b.nb.mux(dep_i, or_s1_arr, or_s0_arr);
        b.nb.set_next(s0v, s0vn);
        let zero1 = b.nb.constant(0, 1);
        let into_s1 = b.nb.and_(arr_v, s0v);
        let or_s1_in = b.nb.or_(s1v, into_s1);
        let s1vn = b.nb.mux(dep_i, zero1, or_s1_in);
        b.nb.set_next(s1v, s1vn);
        let ndep = b.nb.not_(dep_i);
        let land_s1 = b.nb.and_(ndep, into_s1);

        for f in &fields {
            let prev_s0f = stops[prev].s0f[f];
            let inj_f = b.field(inj, prev as u32, f);
            let arr_f = b.nb.mux(fwd_grant, prev_s0f, inj_f);
            let s0 = stops[i].s0f[f];
            let s1 = stops[i].s1f[f];
            let shift = b.nb.mux(s1v, s1, arr_f);
            let keep = b.nb.mux(s0v, s0, arr_f);
            let s0n = b.nb.mux(dep_i, shift, keep);
            b.nb.set_next(s0, s0n);
            let s1n = b.nb.mux(land_s1, arr_f, s1);
            b.nb.set_next(s1, s1n);
        }
        // The loop flag rides like a field; it is set at injection when the
        // transaction's destination equals its injection stop.
        let idxp = b.nb.constant(prev as u64, b.index_width);
        let inj_dest = b.field(inj, prev as u32, "dest");
        let inj_loop = b.nb.eq_(inj_dest, idxp);
        let arr_l = b.nb.mux(fwd_grant, prev_s0l, inj_loop);
        let shift = b.nb.mux(s1v, s1l, arr_l);
        let keep = b.nb.mux(s0v, s0l, arr_l);
        let s0ln = b.nb.mux(dep_i, shift, keep);
        b.nb.set_next(s0l, s0ln);
        let s1ln = b.nb.mux(land_s1, arr_l, s1l);
        b.nb.set_next(s1l, s1ln);

        let occ = b.nb.add_(s0vn, s1vn);
        let two = b.nb.constant(2, 2);
        let rdy_n = b.nb.ne_(occ, two);
        b.nb.set_next(rdy, rdy_n);
    }
    Ok(())
}

fn build_checker(b: &mut Build<'_>, exit: &FlowPoint) -> Result<(), Diagnostic> {
    let p = b.fg.find_point(exit).expect("checker exit point");
    let demands: Vec<String> = b
        .fg
        .sinks
        .iter()
        .find(|s| s.point == p && matches!(s.kind, SinkKind::Checker { .. }))
        .map(|s| s.demands.clone())
        .unwrap_or_default();
    let scope = b.fg.points[p].scope.clone();
    let insts = b.inst_count(&scope);
    for inst in 0..insts {
        let ready = b.nb.input(&format!("out{inst}_ready"), 1);
        let rs = b.wires(p, inst).ready.expect("checker handshake");
        b.nb.drive(rs, ready)?;
        let v = b.valid(p, inst);
        b.nb.output(&format!("out{inst}_valid"), v);
        let mut out_fields = BTreeMap::new();
        for f in &demands {
            let w = b.field(p, inst, f);
            b.nb.output(&format!("out{inst}_{f}"), w);
            out_fields.insert(f.clone(), w);
        }
        if let Some(stop) = b.tb.stops.get_mut(inst as usize) {
            stop.out_valid = v;
            stop.out_ready = ready;
            stop.out_fields = out_fields;
        }
    }
    Ok(())
}

fn build_statements(b: &mut Build<'_>) -> Result<(), Diagnostic> {
    let stmts = b.fg.stmts.clone();
    for ps in &stmts {
        let scope = b.fg.points[ps.point].scope.clone();
        let insts = b.inst_count(&scope);
        for inst in 0..insts {
            let value = build_expr(b, &ps.stmt.rhs, ps.point, inst)?;
            let width = b.fg.fields[&ps.stmt.lhs.name].width;
            let value = b.nb.resize(value, width);
            let slot = b.wires(ps.point, inst).fields.get(&ps.stmt.lhs.name).copied();
            if let Some(slot) = slot {
                b.nb.drive(slot, value)?;
            }
        }
    }
    Ok(())
}

fn build_expr(b: &mut Build<'_>, e: &Expr, point: PointId, inst: u32) -> Result<NodeId, Diagnostic> {
    Ok(match e {
        Expr::Signal(n) | Expr::Child(_, n) => b.field(point, inst, n),
        Expr::Index(_) => b.nb.constant(inst as u64, b.index_width),
        Expr::Int(v) => {
            let w = (64 - v.leading_zeros()).max(1);
            b.nb.constant(*v, w)
        }
        Expr::Select(inner, hi, lo) => {
            let a = build_expr(b, inner, point, inst)?;
            let aw = b.nb.w(a);
            let a = if *hi >= aw {
                b.nb.resize(a, hi + 1)
            } else {
                a
            };
            b.nb.comb(Op::Slice(*hi, *lo), vec![a], hi - lo + 1)
        }
        Expr::Not(inner) => {
            let a = build_expr(b, inner, point, inst)?;
            b.nb.not_(a)
        }
        Expr::Binary(op, x, y) => {
            let a = build_expr(b, x, point, inst)?;
            let c = build_expr(b, y, point, inst)?;
            match op {
                BinOp::Add => b.nb.add_(a, c),
                BinOp::Sub => b.nb.sub_(a, c),
                BinOp::Eq => b.nb.eq_(a, c),
                BinOp::Ne => b.nb.ne_(a, c),
            }
        }
        Expr::Cond(s, x, y) => {
            let sv = build_expr(b, s, point, inst)?;
            let a = build_expr(b, x, point, inst)?;
            let c = build_expr(b, y, point, inst)?;
            b.nb.mux(sv, a, c)
        }
        Expr::Pow(x, k) => {
            let a = build_expr(b, x, point, inst)?;
            let mut acc = a;
            for _ in 1..*k {
                acc = b.nb.mul_(acc, a);
            }
            acc
        }
        Expr::Sqrt(x) => {
            let a = build_expr(b, x, point, inst)?;
            let w = b.nb.w(a).div_ceil(2);
            b.nb.comb(Op::Sqrt, vec![a], w)
        }
        Expr::Any | Expr::ChildAny(_) => {
            return Err(Diagnostic::global(
                "internal: $ANY reached expression lowering",
            ))
        }
    })
}

fn build_any_muxes(b: &mut Build<'_>) -> Result<(), Diagnostic> {
    let muxes = b.fg.any_muxes.clone();
    for mux in &muxes {
        let scope = b.fg.points[mux.point].scope.clone();
        let insts = b.inst_count(&scope);
        let arm_edges: Vec<EdgeId> = b
            .fg
            .edges
            .iter()
            .filter(|e| e.to == mux.point && matches!(e.kind, EdgeKind::AnyArm { .. }))
            .map(|e| e.id)
            .collect();
        let fields: BTreeSet<String> = arm_edges.iter().flat_map(|&e| b.fg.crossing(e)).collect();
        for inst in 0..insts {
            for f in &fields {
                let slot = b.field(mux.point, inst, f);
                let val = match (&mux.select, mux.arms.len()) {
                    (Some(sel), 2) => {
                        let s = b.field(mux.point, inst, sel);
                        let a0 = b.field(mux.arms[0], inst, f);
                        let a1 = b.field(mux.arms[1], inst, f);
                        b.nb.mux(s, a0, a1)
                    }
                    (None, 1) => b.field(mux.arms[0], inst, f),
                    _ => {
                        return Err(Diagnostic::global("internal: malformed $ANY expression"))
                    }
                };
                b.nb.drive(slot, val)?;
            }
        }
    }
    Ok(())
}

fn build_sinks(b: &mut Build<'_>) -> Result<(), Diagnostic> {
    let sinks = b.fg.sinks.clone();
    for s in &sinks {
        if matches!(s.kind, SinkKind::Checker { .. }) {
            continue; // built with the testbench
        }
        let scope = b.fg.points[s.point].scope.clone();
        let insts = b.inst_count(&scope);
        let handshake = b.wires(s.point, 0).valid.is_some();
        let bare = insts == 1 && !handshake;
        for inst in 0..insts {
            let base = b.flat(s.point, inst);
            if handshake {
                let ready = b.nb.input(&format!("{base}_out_ready"), 1);
                let rs = b.wires(s.point, inst).ready.expect("sink handshake");
                b.nb.drive(rs, ready)?;
                let v = b.valid(s.point, inst);
                b.nb.output(&format!("{base}_out_valid"), v);
            }
            for f in &s.demands {
                let w = b.field(s.point, inst, f);
                let name = if bare { f.clone() } else { format!("{base}_{f}") };
                b.nb.output(&name, w);
            }
        }
    }
    Ok(())
}

fn apply_reg_corruption(b: &mut Build<'_>) {
    if b.opts.mutation != Mutation::CorruptStagingRegister {
        return;
    }
    let target = b.nb.regs.iter().copied().find(|&r| {
        matches!(
            b.nb.nodes[r],
            Node::Reg {
                role: RegRole::Data,
                ..
            }
        )
    });
    if let Some(r) = target {
        let (next, width) = match b.nb.nodes[r] {
            Node::Reg { next, width, .. } => (next, width),
            _ => unreachable!(),
        };
        let Some(next) = next else { return };
        let one = b.nb.constant(1, width);
        let bad = b.nb.add_(next, one);
        let bad = b.nb.resize(bad, width);
        b.nb.set_next(r, bad);
    }
}

// ---------------------------------------------------------------------------
// Acyclicity
// ---------------------------------------------------------------------------

/// Topologically order the combinational nodes, or report a minimal cycle.
pub fn check_acyclic(n: &Netlist) -> Result<Vec<NodeId>, Diagnostic> {
    let is_comb = |id: NodeId| matches!(n.nodes[id], Node::Comb { .. });
    let comb_args = |id: NodeId| -> Vec<NodeId> {
        match &n.nodes[id] {
            Node::Comb { args, .. } => args.iter().copied().filter(|&a| is_comb(a)).collect(),
            _ => Vec::new(),
        }
    };
    let mut indeg: Vec<usize> = vec![0; n.nodes.len()];
    let mut dependents: Vec<Vec<NodeId>> = vec![Vec::new(); n.nodes.len()];
    for id in 0..n.nodes.len() {
        if is_comb(id) {
            let args = comb_args(id);
            indeg[id] = args.len();
            for a in args {
                dependents[a].push(id);
            }
        }
    }
    let mut ready: Vec<NodeId> = (0..n.nodes.len())
        .filter(|&id| is_comb(id) && indeg[id] == 0)
        .collect();
    let mut order = Vec::new();
    while let Some(id) = ready.pop() {
        order.push(id);
        for &d in &dependents[id] {
            indeg[d] -= 1;
            if indeg[d] == 0 {
                ready.push(d);
            }
        }
    }
    let total = (0..n.nodes.len()).filter(|&id| is_comb(id)).count();
    if order.len() != total {
        let stuck: BTreeSet<NodeId> = (0..n.nodes.len())
            .filter(|&id| is_comb(id) && indeg[id] > 0)
            .collect();
        let start = *stuck.iter().next().unwrap();
        let mut path = vec![start];
        let mut cur = start;
        let cycle = loop {
            let next = comb_args(cur)
                .into_iter()
                .find(|a| stuck.contains(a))
                .expect("stuck node has stuck argument");
            if let Some(pos) = path.iter().position(|&p| p == next) {
                break path[pos..].to_vec();
            }
            path.push(next);
            cur = next;
        };
        let names: Vec<String> = cycle
            .iter()
            .map(|&id| {
                if n.names[id].is_empty() {
                    format!("n{id}")
                } else {
                    n.names[id].clone()
                }
            })
            .collect();
        return Err(Diagnostic::global(format!(
            "combinational cycle: {}",
            names.join(" -> ")
        )));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::compile_source;
    use crate::flow::{build_flow_graph, resolve_fields};
    use crate::frontend::parse_source;
    use crate::scope::{expand_instantiations, merge_reentrant, resolve_references};

    fn corpus(name: &str) -> String {
        let p = format!("{}/corpus/{name}", env!("CARGO_MANIFEST_DIR"));
        std::fs::read_to_string(p).unwrap()
    }

    fn plan_of(src: &str) -> Result<StagePlan, Diagnostic> {
        let tree = parse_source(src).unwrap();
        let g = merge_reentrant(&tree)?;
        let g = expand_instantiations(g, 4)?;
        let g = resolve_references(g)?;
        let fg = build_flow_graph(&g)?;
        let fg = resolve_fields(fg, &g)?;
        plan_stages(&g, &fg)
    }

    #[test]
    fn one_register_per_stage_distance() {
        let plan = plan_of(&corpus("pythag.tlv")).unwrap();
        let regs =
            |f: &str| -> u32 { plan.entries.iter().filter(|e| e.field == f).map(|e| e.regs).sum() };
        // aa_sq assigned @1 consumed @2; cc_sq assigned @2 consumed @3.
        assert_eq!(regs("aa_sq"), 1);
        assert_eq!(regs("bb_sq"), 1);
        assert_eq!(regs("cc_sq"), 1);
        // aa consumed at its landing stage: no staging.
        assert_eq!(regs("aa"), 0);
        assert_eq!(regs("cc"), 0);
    }

    #[test]
    fn negative_stage_distance_rejected() {
        let err = plan_of("|p\n   @1\n      $y[4:0] = $x + 1;\n   @2\n      $x[3:0] = $in[3:0];\n")
            .unwrap_err();
        assert!(err.message.contains("negative stage distance"), "{err}");
    }

    #[test]
    fn pythag_netlist_node_counts() {
        let c = compile_source(&corpus("pythag.tlv"), 4, &BuildOpts::default()).unwrap();
        assert_eq!(c.netlist.count_op(Op::Mul), 2);
        assert_eq!(c.netlist.count_op(Op::Add), 1);
        assert_eq!(c.netlist.count_op(Op::Sqrt), 1);
        assert!(c.netlist.regs.len() >= 3);
        // Width preservation: declared [hi:lo] widths carry through.
        let cc = c.netlist.find_output("cc").unwrap();
        assert_eq!(c.netlist.width(cc), 5);
        let aa = c.netlist.find_input("aa").unwrap();
        assert_eq!(c.netlist.width(aa), 4);
    }

    #[test]
    fn zero_logic_design_has_no_registers() {
        let c = compile_source("|p\n   @1\n      $x[3:0] = $in[3:0];\n", 4, &BuildOpts::default())
            .unwrap();
        assert!(c.netlist.regs.is_empty());
    }

    #[test]
    fn showcase_netlist_is_acyclic_and_buildable() {
        let c = compile_source(&corpus("showcase.tlv"), 4, &BuildOpts::default()).unwrap();
        assert!(check_acyclic(&c.netlist).is_ok());
        assert!(c.netlist.tb.is_some());
        assert_eq!(c.netlist.tb.as_ref().unwrap().stops.len(), 4);
    }

    #[test]
    fn combinational_cycle_is_reported_with_names() {
        let mut n = Netlist::default();
        n.nodes.push(Node::Comb {
            op: Op::Not,
            args: vec![1],
            width: 1,
        });
        n.names.push("a".into());
        n.nodes.push(Node::Comb {
            op: Op::Not,
            args: vec![0],
            width: 1,
        });
        n.names.push("b".into());
        let err = check_acyclic(&n).unwrap_err();
        assert!(err.message.contains("combinational cycle"), "{err}");
        assert!(err.message.contains('a') && err.message.contains('b'));
    }

    #[test]
    fn empty_netlist_is_acyclic() {
        let n = Netlist::default();
        assert!(check_acyclic(&n).unwrap().is_empty());
    }

    #[test]
    fn corruption_mutation_changes_a_register() {
        let clean = compile_source(&corpus("showcase.tlv"), 4, &BuildOpts::default()).unwrap();
        let bad = compile_source(
            &corpus("showcase.tlv"),
            4,
            &BuildOpts {
                mutation: Mutation::CorruptStagingRegister,
            },
        )
        .unwrap();
        assert!(bad.netlist.nodes.len() > clean.netlist.nodes.len());
    }

    #[test]
    fn netlist_dump_is_stable() {
        let a = compile_source(&corpus("showcase.tlv"), 4, &BuildOpts::default()).unwrap();
        let b = compile_source(&corpus("showcase.tlv"), 4, &BuildOpts::default()).unwrap();
        assert_eq!(a.netlist.dump(), b.netlist.dump());
    }
}

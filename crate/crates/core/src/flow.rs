//! Design-wide flow graph and demand-driven field resolution.
//!
//! Flow points are positions a transaction can occupy; edges are the ways it
//! moves between them (rigid pipeline steps, elastic hops, FIFOs, arbiter
//! muxes, splitter arms, ring arcs, `$ANY` flow expressions). Each consumed
//! field is traced upstream from every consumption to its producers, and the
//! traversed edges become the field's route: exactly the places that must
//! stage or store it. Fields not demanded downstream are not carried, so
//! transactions change shape along the flow.

use crate::diag::Diagnostic;
use crate::frontend::{Expr, PathElem};
use crate::scope::{Binding, Direction, Element, FlowPoint, ScopeGraph, ScopePath, Statement};
use std::collections::{BTreeMap, BTreeSet};

pub type PointId = usize;
pub type EdgeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum PointKey {
    /// Position inside a rigid domain (stall chain or free pipeline), by
    /// time offset from the domain entry.
    Domain { domain: usize, tau: u32 },
    /// A handshake junction or elastic stage.
    Elastic {
        scope: ScopePath,
        pipe: String,
        stage: u32,
    },
    /// Child transaction bundle at a point (`/in1` of an `$ANY` mux).
    Sub { parent: PointId, path: Vec<String> },
    /// The on-ring arc position of a ring element (quotient over stops).
    RingArc { element: usize },
}

#[derive(Debug, Clone)]
pub struct PointInfo {
    pub key: PointKey,
    pub display: String,
    /// Scope controlling replication of this point's wires.
    pub scope: ScopePath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// One rigid register step inside a domain.
    DomainStep { domain: usize },
    /// Elastic interlocked stage (pipeline hop or channel stage gap).
    RvHop,
    /// FIFO storage traversal.
    Fifo { element: usize },
    /// Arbiter input arm (a mux join).
    ArbIn { element: usize, which: u8 },
    /// Splitter arms.
    OppTaken { element: usize },
    OppMain { element: usize },
    /// Ring arcs.
    RingInject { element: usize },
    RingThrough { element: usize },
    RingEject { element: usize },
    /// `$ANY` flow-expression arm (mux join) or identity pass.
    AnyArm { arm: u8 },
}

impl EdgeKind {
    pub fn label(&self) -> String {
        match self {
            EdgeKind::DomainStep { .. } => "step".into(),
            EdgeKind::RvHop => "hop".into(),
            EdgeKind::Fifo { .. } => "fifo".into(),
            EdgeKind::ArbIn { which, .. } => format!("arb_in{which}"),
            EdgeKind::OppTaken { .. } => "opp_taken".into(),
            EdgeKind::OppMain { .. } => "opp_main".into(),
            EdgeKind::RingInject { .. } => "ring_inject".into(),
            EdgeKind::RingThrough { .. } => "ring_through".into(),
            EdgeKind::RingEject { .. } => "ring_eject".into(),
            EdgeKind::AnyArm { arm } => format!("mux_arm{arm}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub id: EdgeId,
    pub from: PointId,
    pub to: PointId,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    /// Stall chain: advances unless stalled or exit-blocked.
    Stall { element: usize },
    /// Free-running pipeline: advances every cycle.
    Free,
}

/// A rigid domain: pipelines whose registers advance in lockstep, giving
/// every (pipe, stage) label inside it a single time offset `tau`.
#[derive(Debug, Clone)]
pub struct Domain {
    pub kind: DomainKind,
    pub scope: ScopePath,
    /// Pipe names in hop order.
    pub pipes: Vec<String>,
    /// First stage label of the entry pipe.
    pub first_stage: u32,
    /// Tau of the exit endpoint (last hop at its endpoint stage).
    pub tau_exit: u32,
    /// Largest tau referenced (>= tau_exit).
    pub tau_max: u32,
}

impl Domain {
    /// Tau for a (pipe-index, stage) label inside the domain.
    fn tau_of(&self, pipe_idx: usize, stage: u32) -> Option<u32> {
        let base = pipe_idx as i64 + stage as i64 - self.first_stage as i64;
        if base < 0 {
            None
        } else {
            Some(base as u32)
        }
    }

    /// Canonical (pipe, stage) label for a tau.
    pub fn label_of(&self, tau: u32) -> (String, u32) {
        let hops = (self.pipes.len() - 1) as u32;
        if tau <= hops {
            (self.pipes[tau as usize].clone(), self.first_stage)
        } else {
            (
                self.pipes.last().unwrap().clone(),
                self.first_stage + (tau - hops),
            )
        }
    }
}

/// Why a point produces fields on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// Testbench generator (element id).
    Generator { element: usize },
    /// Unmatched consumer endpoint or free-domain entry: primary inputs.
    Input,
}

#[derive(Debug, Clone)]
pub struct Source {
    pub point: PointId,
    pub kind: SourceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkKind {
    /// Testbench checker (element id).
    Checker { element: usize },
    /// Unmatched producer endpoint: primary outputs.
    Output,
}

#[derive(Debug, Clone)]
pub struct Sink {
    pub point: PointId,
    pub kind: SinkKind,
    /// Fields observed at this sink.
    pub demands: Vec<String>,
}

/// A statement placed at its flow point (quotient form).
#[derive(Debug, Clone)]
pub struct PlacedStmt {
    pub point: PointId,
    pub stmt: Statement,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProducerSite {
    /// Assigned by the statement at this point.
    Stmt(PointId),
    /// Produced on demand by a generator or primary input.
    External(PointId),
}

#[derive(Debug, Clone)]
pub struct FieldRoute {
    pub width: u32,
    pub producers: BTreeSet<ProducerSite>,
    pub consumers: BTreeSet<PointId>,
    pub route: BTreeSet<EdgeId>,
}

/// An `$ANY` flow expression: a mux (two arms) or identity pass (one arm).
#[derive(Debug, Clone)]
pub struct AnyMux {
    pub point: PointId,
    /// Select field name; `None` for identity passes.
    pub select: Option<String>,
    pub arms: Vec<PointId>,
}

#[derive(Debug, Clone, Default)]
pub struct FlowGraph {
    pub points: Vec<PointInfo>,
    pub edges: Vec<Edge>,
    pub domains: Vec<Domain>,
    pub stmts: Vec<PlacedStmt>,
    pub sources: Vec<Source>,
    pub sinks: Vec<Sink>,
    pub any_muxes: Vec<AnyMux>,
    pub fields: BTreeMap<String, FieldRoute>,
    /// Template demands (besides statements): field consumed at point.
    pub template_demands: Vec<(String, PointId)>,
}

impl FlowGraph {
    pub fn point(&self, id: PointId) -> &PointInfo {
        &self.points[id]
    }

    pub fn in_edges(&self, p: PointId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.to == p)
    }

    pub fn out_edges(&self, p: PointId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.from == p)
    }

    /// Fields crossing an edge (on its route), sorted.
    pub fn crossing(&self, edge: EdgeId) -> Vec<String> {
        self.fields
            .iter()
            .filter(|(_, r)| r.route.contains(&edge))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Fields present at a point: crossing an adjacent route edge, produced,
    /// or consumed there.
    pub fn fields_at(&self, p: PointId) -> Vec<String> {
        self.fields
            .iter()
            .filter(|(_, r)| {
                r.producers.contains(&ProducerSite::Stmt(p))
                    || r.producers.contains(&ProducerSite::External(p))
                    || r.consumers.contains(&p)
                    || r.route.iter().any(|&e| {
                        let e = &self.edges[e];
                        e.from == p || e.to == p
                    })
            })
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn find_point(&self, fp: &FlowPoint) -> Option<PointId> {
        let display = format!("{fp}");
        self.points.iter().position(|p| {
            match &p.key {
                PointKey::Elastic { scope, pipe, stage } => {
                    *scope == fp.scope && *pipe == fp.pipe && *stage == fp.stage
                }
                PointKey::Domain { .. } => p.display == display,
                _ => false,
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum PipeOwner {
    StallDomain(usize),
    RvPipe,
    Junction,
    FreeDomain(usize),
}

struct Builder {
    fg: FlowGraph,
    owners: BTreeMap<(ScopePath, String), PipeOwner>,
    point_ids: BTreeMap<PointKey, PointId>,
}

impl Builder {
    fn point_id(&mut self, key: PointKey, display: String, scope: ScopePath) -> PointId {
        if let Some(&id) = self.point_ids.get(&key) {
            return id;
        }
        let id = self.fg.points.len();
        self.fg.points.push(PointInfo {
            key: key.clone(),
            display,
            scope,
        });
        self.point_ids.insert(key, id);
        id
    }

    fn domain_point(&mut self, d: usize, tau: u32) -> PointId {
        let scope = self.fg.domains[d].scope.clone();
        let (lp, ls) = self.fg.domains[d].label_of(tau);
        self.point_id(
            PointKey::Domain { domain: d, tau },
            format!("{scope}|{lp}@{ls}"),
            scope,
        )
    }

    /// Resolve a (scope, pipe, stage) label to a point.
    fn point_of(&mut self, fp: &FlowPoint) -> Result<PointId, Diagnostic> {
        let owner = self
            .owners
            .get(&(fp.scope.clone(), fp.pipe.clone()))
            .cloned()
            .unwrap_or(PipeOwner::Junction);
        match owner {
            PipeOwner::StallDomain(d) | PipeOwner::FreeDomain(d) => {
                let (pipe_idx, first_stage) = {
                    let dom = &self.fg.domains[d];
                    (
                        dom.pipes.iter().position(|p| *p == fp.pipe).unwrap(),
                        dom.first_stage,
                    )
                };
                let tau = self.fg.domains[d].tau_of(pipe_idx, fp.stage).ok_or_else(|| {
                    Diagnostic::global(format!(
                        "stage @{} precedes the entry (@{first_stage}) of {}|{}",
                        fp.stage, fp.scope, fp.pipe
                    ))
                })?;
                self.fg.domains[d].tau_max = self.fg.domains[d].tau_max.max(tau);
                Ok(self.domain_point(d, tau))
            }
            PipeOwner::RvPipe => {
                if fp.stage != 1 {
                    return Err(Diagnostic::global(format!(
                        "stage @{} is not on the flow of {}|{} (interlocked hops sit at @1)",
                        fp.stage, fp.scope, fp.pipe
                    )));
                }
                Ok(self.elastic(fp))
            }
            PipeOwner::Junction => Ok(self.elastic(fp)),
        }
    }

    fn elastic(&mut self, fp: &FlowPoint) -> PointId {
        self.point_id(
            PointKey::Elastic {
                scope: fp.scope.clone(),
                pipe: fp.pipe.clone(),
                stage: fp.stage,
            },
            format!("{fp}"),
            fp.scope.clone(),
        )
    }

    fn edge(&mut self, from: PointId, to: PointId, kind: EdgeKind) -> EdgeId {
        let id = self.fg.edges.len();
        self.fg.edges.push(Edge { id, from, to, kind });
        id
    }

    fn sub_point(&mut self, base: PointId, path: &[String]) -> PointId {
        let scope = self.fg.points[base].scope.clone();
        let display = format!(
            "{}{}",
            self.fg.points[base].display,
            path.iter().map(|t| format!("/{t}")).collect::<String>()
        );
        self.point_id(
            PointKey::Sub {
                parent: base,
                path: path.to_vec(),
            },
            display,
            scope,
        )
    }
}

/// Build the design-wide flow graph: domains, points, movement edges,
/// placed statements, sources, and sinks.
pub fn build_flow_graph(g: &ScopeGraph) -> Result<FlowGraph, Diagnostic> {
    let mut b = Builder {
        fg: FlowGraph::default(),
        owners: BTreeMap::new(),
        point_ids: BTreeMap::new(),
    };

    // Domains and pipe ownership.
    for (eid, el) in &g.elements {
        match el {
            Element::StallChain {
                scope,
                base,
                first,
                last,
                ..
            } => {
                let d = b.fg.domains.len();
                let pipes: Vec<String> = (*first..=*last).map(|i| format!("{base}{i}")).collect();
                for p in &pipes {
                    b.owners
                        .insert((scope.clone(), p.clone()), PipeOwner::StallDomain(d));
                }
                b.fg.domains.push(Domain {
                    kind: DomainKind::Stall { element: *eid },
                    scope: scope.clone(),
                    pipes,
                    first_stage: 1,
                    tau_exit: last - first,
                    tau_max: last - first,
                });
            }
            Element::RvPipe {
                scope,
                base,
                first,
                last,
            } => {
                for i in *first..=*last {
                    b.owners
                        .insert((scope.clone(), format!("{base}{i}")), PipeOwner::RvPipe);
                }
            }
            _ => {}
        }
    }

    // Free domains: pipes with statements and no endpoints at all.
    let mut endpoint_pipes: BTreeSet<(ScopePath, String)> = BTreeSet::new();
    for ep in &g.endpoints {
        endpoint_pipes.insert((ep.point.scope.clone(), ep.point.pipe.clone()));
    }
    for ch in &g.channels {
        for ep in [&ch.producer, &ch.consumer] {
            endpoint_pipes.insert((ep.point.scope.clone(), ep.point.pipe.clone()));
        }
    }
    let mut stmt_stages: BTreeMap<(ScopePath, String), BTreeSet<u32>> = BTreeMap::new();
    for (fp, _) in g.statements() {
        stmt_stages
            .entry((fp.scope.clone(), fp.pipe.clone()))
            .or_default()
            .insert(fp.stage);
    }
    for ((scope, pipe), stages) in &stmt_stages {
        let key = (scope.clone(), pipe.clone());
        if b.owners.contains_key(&key) || endpoint_pipes.contains(&key) {
            continue;
        }
        let d = b.fg.domains.len();
        let first_stage = *stages.iter().next().unwrap();
        let last_stage = *stages.iter().last().unwrap();
        b.owners.insert(key, PipeOwner::FreeDomain(d));
        b.fg.domains.push(Domain {
            kind: DomainKind::Free,
            scope: scope.clone(),
            pipes: vec![pipe.clone()],
            first_stage,
            tau_exit: last_stage - first_stage,
            tau_max: last_stage - first_stage,
        });
    }

    // Element edges.
    for (eid, el) in &g.elements {
        match el {
            Element::StallChain { .. } => {}
            Element::RvPipe {
                scope,
                base,
                first,
                last,
            } => {
                for i in *first..*last {
                    let a = b.point_of(&FlowPoint::new(scope, &format!("{base}{i}"), 1))?;
                    let c = b.point_of(&FlowPoint::new(scope, &format!("{base}{}", i + 1), 1))?;
                    b.edge(a, c, EdgeKind::RvHop);
                }
            }
            Element::Fifo { input, output, .. } => {
                let a = b.point_of(input)?;
                let c = b.point_of(output)?;
                b.edge(a, c, EdgeKind::Fifo { element: *eid });
            }
            Element::Arb2 { in1, in2, out, .. } => {
                let a1 = b.point_of(in1)?;
                let a2 = b.point_of(in2)?;
                let o = b.point_of(out)?;
                b.edge(
                    a1,
                    o,
                    EdgeKind::ArbIn {
                        element: *eid,
                        which: 1,
                    },
                );
                b.edge(
                    a2,
                    o,
                    EdgeKind::ArbIn {
                        element: *eid,
                        which: 2,
                    },
                );
            }
            Element::Opp {
                input, taken, main, ..
            } => {
                let i = b.point_of(input)?;
                let t = b.point_of(taken)?;
                let m = b.point_of(main)?;
                b.edge(i, t, EdgeKind::OppTaken { element: *eid });
                b.edge(i, m, EdgeKind::OppMain { element: *eid });
            }
            Element::Ring {
                stop_scope,
                injection,
                ejection,
            } => {
                let inj = b.point_of(injection)?;
                let ej = b.point_of(ejection)?;
                let arc = b.point_id(
                    PointKey::RingArc { element: *eid },
                    format!("{stop_scope}<ring-arc>"),
                    stop_scope.clone(),
                );
                b.edge(inj, arc, EdgeKind::RingInject { element: *eid });
                b.edge(arc, arc, EdgeKind::RingThrough { element: *eid });
                b.edge(arc, ej, EdgeKind::RingEject { element: *eid });
                b.fg.template_demands.push(("dest".into(), arc));
            }
            Element::Testbench { entry, exit, .. } => {
                let en = b.point_of(entry)?;
                let ex = b.point_of(exit)?;
                b.fg.sources.push(Source {
                    point: en,
                    kind: SourceKind::Generator { element: *eid },
                });
                b.fg.sinks.push(Sink {
                    point: ex,
                    kind: SinkKind::Checker { element: *eid },
                    demands: Vec::new(),
                });
            }
        }
    }

    // External channels: stage-gap hops (same point when stages match).
    for ch in &g.channels {
        if ch.producer.internal && ch.consumer.internal && ch.producer.instance == ch.consumer.instance {
            // Element-internal channels (hops, ring arc) are already edges.
            if ch.producer.point.pipe == ch.consumer.point.pipe
                && ch.producer.point.stage == ch.consumer.point.stage
            {
                continue;
            }
        }
        if ch.producer.point.scope != ch.consumer.point.scope
            || ch.producer.point.pipe != ch.consumer.point.pipe
        {
            continue;
        }
        let (ps, cs) = (ch.producer.point.stage, ch.consumer.point.stage);
        if ps == cs {
            continue;
        }
        let scope = &ch.producer.point.scope;
        let pipe = &ch.producer.point.pipe;
        for s in ps..cs {
            let a = b.point_of(&FlowPoint::new(scope, pipe, s))?;
            let c = b.point_of(&FlowPoint::new(scope, pipe, s + 1))?;
            b.edge(a, c, EdgeKind::RvHop);
        }
    }

    // Statement placement.
    let placements: Vec<(FlowPoint, Statement)> = g
        .statements()
        .into_iter()
        .map(|(fp, s)| (fp, s.clone()))
        .collect();
    for (fp, stmt) in placements {
        let base = b.point_of(&fp)?;
        // A refinement whose head is a registered transaction scope places
        // the statement on the main bundle; other refinements address child
        // bundles (used by $ANY flow expressions).
        let on_main = stmt.trans.is_empty()
            || g.trans_scopes
                .contains(&(fp.scope.clone(), stmt.trans[0].clone()));
        let point = if on_main {
            base
        } else {
            b.sub_point(base, &stmt.trans)
        };
        if stmt.lhs.any {
            place_any_statement(&mut b, point, base, &stmt)?;
        } else {
            if stmt.rhs.contains_any() {
                return Err(Diagnostic::new(
                    stmt.pos,
                    "$ANY operand in an expression whose left side is not $ANY",
                ));
            }
            b.fg.stmts.push(PlacedStmt { point, stmt });
        }
    }

    // Rigid domain steps over the full referenced span.
    for d in 0..b.fg.domains.len() {
        for tau in 0..b.fg.domains[d].tau_max {
            let a = b.domain_point(d, tau);
            let c = b.domain_point(d, tau + 1);
            if !b.fg.edges.iter().any(|e| e.from == a && e.to == c) {
                b.edge(a, c, EdgeKind::DomainStep { domain: d });
            }
        }
    }

    // Unmatched external endpoints become the design interface.
    for ep in &g.endpoints {
        if ep.internal {
            continue;
        }
        let p = b.point_of(&ep.point)?;
        match ep.direction {
            Direction::Consumer => b.fg.sources.push(Source {
                point: p,
                kind: SourceKind::Input,
            }),
            Direction::Producer => b.fg.sinks.push(Sink {
                point: p,
                kind: SinkKind::Output,
                demands: Vec::new(),
            }),
        }
    }

    // Free-domain entries with no feeding edge are input sources.
    for d in 0..b.fg.domains.len() {
        if b.fg.domains[d].kind != DomainKind::Free {
            continue;
        }
        let p0 = b.domain_point(d, 0);
        if !b.fg.edges.iter().any(|e| e.to == p0) {
            b.fg.sources.push(Source {
                point: p0,
                kind: SourceKind::Input,
            });
        }
    }

    // Child bundles with no upstream (the leaf arms of flow expressions)
    // are likewise fed from outside.
    for p in 0..b.fg.points.len() {
        if matches!(b.fg.points[p].key, PointKey::Sub { .. })
            && !b.fg.edges.iter().any(|e| e.to == p)
        {
            b.fg.sources.push(Source {
                point: p,
                kind: SourceKind::Input,
            });
        }
    }

    Ok(b.fg)
}

/// Validate and register an `$ANY` flow expression.
fn place_any_statement(
    b: &mut Builder,
    point: PointId,
    base: PointId,
    stmt: &Statement,
) -> Result<(), Diagnostic> {
    match &stmt.rhs {
        Expr::ChildAny(path) => {
            let s = b.sub_point(base, path);
            b.edge(s, point, EdgeKind::AnyArm { arm: 0 });
            b.fg.any_muxes.push(AnyMux {
                point,
                select: None,
                arms: vec![s],
            });
            Ok(())
        }
        Expr::Cond(sel, a1, a2) => {
            let sel_name = match &**sel {
                Expr::Signal(n) => n.clone(),
                _ => {
                    return Err(Diagnostic::new(
                        stmt.pos,
                        "$ANY multiplexer select must be a plain signal",
                    ))
                }
            };
            let arm = |e: &Expr| -> Result<Vec<String>, Diagnostic> {
                match e {
                    Expr::ChildAny(p) => Ok(p.clone()),
                    _ => Err(Diagnostic::new(
                        stmt.pos,
                        "flow expression alters the $ANY payload; arms must be \
                         child-scope $ANY references",
                    )),
                }
            };
            let p1 = arm(a1)?;
            let p2 = arm(a2)?;
            let s1 = b.sub_point(base, &p1);
            let s2 = b.sub_point(base, &p2);
            b.edge(s1, point, EdgeKind::AnyArm { arm: 0 });
            b.edge(s2, point, EdgeKind::AnyArm { arm: 1 });
            b.fg.any_muxes.push(AnyMux {
                point,
                select: Some(sel_name),
                arms: vec![s1, s2],
            });
            Ok(())
        }
        _ => Err(Diagnostic::new(
            stmt.pos,
            "flow expression alters the $ANY payload (only identity and \
             2-way multiplexers steer transactions unaltered)",
        )),
    }
}

// ---------------------------------------------------------------------------
// Field resolution
// ---------------------------------------------------------------------------

fn rhs_field_refs(stmt: &Statement) -> Vec<String> {
    stmt.bindings
        .iter()
        .filter(|(_, b)| {
            matches!(
                b,
                Binding::Local | Binding::BackRef { .. } | Binding::FlowDemand
            )
        })
        .map(|(n, _)| n.clone())
        .collect()
}

/// Demand-driven field resolution: trace each consumed field upstream from
/// every consumption to its producers, marking every traversed edge as part
/// of the field's route.
pub fn resolve_fields(mut fg: FlowGraph, g: &ScopeGraph) -> Result<FlowGraph, Diagnostic> {
    let mut stmt_producers: BTreeMap<String, BTreeSet<PointId>> = BTreeMap::new();
    for ps in &fg.stmts {
        if !ps.stmt.lhs.any {
            stmt_producers
                .entry(ps.stmt.lhs.name.clone())
                .or_default()
                .insert(ps.point);
        }
    }
    let mut consumers: BTreeMap<String, BTreeSet<PointId>> = BTreeMap::new();
    for ps in &fg.stmts {
        for f in rhs_field_refs(&ps.stmt) {
            consumers.entry(f).or_default().insert(ps.point);
        }
    }
    for (f, p) in &fg.template_demands {
        consumers.entry(f.clone()).or_default().insert(*p);
    }
    for (_eid, el) in &g.elements {
        if let Element::Opp { input, cond, .. } = el {
            if let Some(p) = fg.find_point(input) {
                consumers.entry(cond.signal.clone()).or_default().insert(p);
            }
        }
    }
    for mux in &fg.any_muxes {
        if let Some(sel) = &mux.select {
            consumers.entry(sel.clone()).or_default().insert(mux.point);
        }
    }

    // Terminal fields: assigned but never consumed anywhere.
    let assigned: BTreeSet<String> = stmt_producers.keys().cloned().collect();
    let consumed_names: BTreeSet<String> = consumers.keys().cloned().collect();
    let terminals: Vec<String> = assigned.difference(&consumed_names).cloned().collect();

    // External-origin fields: in the width table but never assigned.
    let external_fields: Vec<String> = g
        .fields
        .keys()
        .filter(|f| !assigned.contains(*f))
        .cloned()
        .collect();

    // Sink demands.
    let sinks = fg.sinks.clone();
    let mut sink_demands: Vec<(usize, Vec<String>)> = Vec::new();
    for (i, s) in sinks.iter().enumerate() {
        let mut d: Vec<String> = match s.kind {
            SinkKind::Checker { .. } => {
                let mut v = vec!["tag".to_string(), "dest".to_string()];
                v.extend(terminals.iter().cloned());
                v
            }
            SinkKind::Output => {
                let mut v = terminals.clone();
                v.extend(external_fields.iter().cloned());
                v
            }
        };
        d.sort();
        d.dedup();
        sink_demands.push((i, d.clone()));
        for f in &d {
            consumers.entry(f.clone()).or_default().insert(s.point);
        }
    }
    for (i, d) in sink_demands {
        fg.sinks[i].demands = d;
    }

    // Terminal fields in sink-less designs are observed at their assignment
    // point (free-running pipelines expose them as outputs there).
    if fg.sinks.is_empty() {
        let mut by_point: BTreeMap<PointId, Vec<String>> = BTreeMap::new();
        for f in &terminals {
            for p in stmt_producers.get(f).into_iter().flatten() {
                consumers.entry(f.clone()).or_default().insert(*p);
                by_point.entry(*p).or_default().push(f.clone());
            }
        }
        for (point, demands) in by_point {
            fg.sinks.push(Sink {
                point,
                kind: SinkKind::Output,
                demands,
            });
        }
    }

    let source_points: BTreeMap<PointId, SourceKind> =
        fg.sources.iter().map(|s| (s.point, s.kind)).collect();

    let mut fields: BTreeMap<String, FieldRoute> = BTreeMap::new();
    for (name, cons) in &consumers {
        let width = match g.fields.get(name) {
            Some(d) => d.width,
            None => {
                return Err(Diagnostic::global(format!(
                    "unresolved field ${name}: no width information"
                )))
            }
        };
        let producers_here = stmt_producers.get(name).cloned().unwrap_or_default();
        let mut route: BTreeSet<EdgeId> = BTreeSet::new();
        let mut producers: BTreeSet<ProducerSite> = BTreeSet::new();
        let mut visited: BTreeSet<PointId> = BTreeSet::new();

        let assigned_anywhere = !producers_here.is_empty();
        for &c in cons {
            let mut stack: Vec<(PointId, Vec<PointId>)> = vec![(c, vec![c])];
            while let Some((p, path)) = stack.pop() {
                if producers_here.contains(&p) {
                    producers.insert(ProducerSite::Stmt(p));
                    continue;
                }
                if !visited.insert(p) {
                    continue;
                }
                // External sources supply only fields the design never
                // computes itself; a field assigned somewhere must reach its
                // consumers through the flow.
                if source_points.contains_key(&p) && !assigned_anywhere {
                    producers.insert(ProducerSite::External(p));
                    continue;
                }
                let ins: Vec<(EdgeId, PointId)> = fg.in_edges(p).map(|e| (e.id, e.from)).collect();
                if ins.is_empty() {
                    // A same-domain assignment later in the pipeline makes
                    // this the negative-distance case.
                    if let PointKey::Domain { domain, tau } = &fg.points[p].key {
                        for &q in &producers_here {
                            if let PointKey::Domain {
                                domain: dq,
                                tau: tq,
                            } = &fg.points[q].key
                            {
                                if dq == domain && tq > tau {
                                    return Err(Diagnostic::global(format!(
                                        "${name} is consumed at {} before its assignment at \
                                         {} (negative stage distance)",
                                        fg.points[path[0]].display, fg.points[q].display
                                    )));
                                }
                            }
                        }
                    }
                    let chain: Vec<String> = path
                        .iter()
                        .rev()
                        .map(|&q| fg.points[q].display.clone())
                        .collect();
                    return Err(Diagnostic::global(format!(
                        "unresolved field ${name}: no producer upstream of {} (path: {})",
                        fg.points[p].display,
                        chain.join(" <- ")
                    )));
                }
                for (eid, from) in ins {
                    route.insert(eid);
                    let mut path2 = path.clone();
                    path2.push(from);
                    stack.push((from, path2));
                }
            }
        }

        // Multiply-driven: one producer reachable upstream from another.
        for &p in &producers_here {
            if !producers.contains(&ProducerSite::Stmt(p)) && cons.is_empty() {
                continue;
            }
            let mut stack: Vec<PointId> = fg.in_edges(p).map(|e| e.from).collect();
            let mut seen: BTreeSet<PointId> = BTreeSet::new();
            while let Some(q) = stack.pop() {
                if !seen.insert(q) {
                    continue;
                }
                if producers_here.contains(&q) {
                    return Err(Diagnostic::global(format!(
                        "field ${name} is multiply driven: {} is upstream of {}",
                        fg.points[q].display, fg.points[p].display
                    )));
                }
                stack.extend(fg.in_edges(q).map(|e| e.from));
            }
        }

        fields.insert(
            name.clone(),
            FieldRoute {
                width,
                producers,
                consumers: cons.clone(),
                route,
            },
        );
    }

    fg.fields = fields;
    Ok(fg)
}

/// Stable listing of resolved fields for `--dump-flow`.
pub fn dump_flow(fg: &FlowGraph) -> String {
    let mut out = String::new();
    for (name, fr) in &fg.fields {
        out.push_str(&format!("field {name} width {}\n", fr.width));
        for p in &fr.producers {
            match p {
                ProducerSite::Stmt(p) => {
                    out.push_str(&format!("  producer {}\n", fg.points[*p].display))
                }
                ProducerSite::External(p) => {
                    out.push_str(&format!("  producer external {}\n", fg.points[*p].display))
                }
            }
        }
        for c in &fr.consumers {
            out.push_str(&format!("  consumer {}\n", fg.points[*c].display));
        }
        for e in &fr.route {
            let edge = &fg.edges[*e];
            out.push_str(&format!(
                "  route {} {} -> {}\n",
                edge.kind.label(),
                fg.points[edge.from].display,
                fg.points[edge.to].display
            ));
        }
    }
    out
}

// PathElem is used in signatures via ScopePath; keep the import referenced.
const _: fn(&PathElem) -> bool = |e| matches!(e, PathElem::Pipe(_));

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_source;
    use crate::scope::{expand_instantiations, merge_reentrant, resolve_references};

    fn corpus(name: &str) -> String {
        let p = format!("{}/corpus/{name}", env!("CARGO_MANIFEST_DIR"));
        std::fs::read_to_string(p).unwrap()
    }

    fn flow_of(src: &str) -> Result<(ScopeGraph, FlowGraph), Diagnostic> {
        let tree = parse_source(src).unwrap();
        let g = merge_reentrant(&tree)?;
        let g = expand_instantiations(g, 4)?;
        let g = resolve_references(g)?;
        let fg = build_flow_graph(&g)?;
        let fg = resolve_fields(fg, &g)?;
        Ok((g, fg))
    }

    const MUX_DESIGN: &str = "\
|m
   @1
      /in1
         $v[3:0] = $p[3:0] + 0;
      /in2
         $v[3:0] = $q[3:0] + 0;
      $select = $s[0:0];
      $ANY = $select ? /in1$ANY : /in2$ANY;
   @2
      $out[3:0] = $v + 0;
";

    #[test]
    fn any_mux_makes_two_arm_edges() {
        let (_, fg) = flow_of(MUX_DESIGN).unwrap();
        assert_eq!(fg.any_muxes.len(), 1);
        let mux = &fg.any_muxes[0];
        assert_eq!(mux.arms.len(), 2);
        assert_eq!(mux.select.as_deref(), Some("select"));
        // The steered field is demanded from both arms.
        let v = &fg.fields["v"];
        let arm_edges: Vec<_> = fg
            .edges
            .iter()
            .filter(|e| matches!(e.kind, EdgeKind::AnyArm { .. }))
            .collect();
        assert_eq!(arm_edges.len(), 2);
        for e in arm_edges {
            assert!(v.route.contains(&e.id), "field v routed through both arms");
        }
        assert_eq!(v.producers.len(), 2);
    }

    #[test]
    fn any_identity_pass_is_single_edge() {
        let src = "\
|m
   @1
      /in
         $v[3:0] = $p[3:0] + 0;
      $ANY = /in$ANY;
   @2
      $out[3:0] = $v + 0;
";
        let (_, fg) = flow_of(src).unwrap();
        assert_eq!(fg.any_muxes.len(), 1);
        assert_eq!(fg.any_muxes[0].arms.len(), 1);
        assert!(fg.any_muxes[0].select.is_none());
    }

    #[test]
    fn any_with_altering_expression_rejected() {
        let src = "\
|m
   @1
      /in
         $v[3:0] = $p[3:0] + 0;
      $ANY = /in$ANY + 1;
";
        let err = flow_of(src).unwrap_err();
        assert!(err.message.contains("$ANY"), "{err}");
    }

    #[test]
    fn any_operand_with_plain_lhs_rejected() {
        let src = "\
|m
   @1
      /in
         $v[3:0] = $p[3:0] + 0;
      $x[3:0] = /in$ANY;
";
        let err = flow_of(src).unwrap_err();
        assert!(err.message.contains("left side"), "{err}");
    }

    #[test]
    fn same_stage_production_and_consumption_has_empty_route() {
        let src = "\
|p
   @1
      $a[3:0] = $in[3:0] + 0;
      $b[4:0] = $a + 1;
";
        let (_, fg) = flow_of(src).unwrap();
        assert!(fg.fields["a"].route.is_empty());
    }

    #[test]
    fn staged_route_traverses_split_ring_and_merge() {
        let (_, fg) = flow_of(&corpus("showcase_staged.tlv")).unwrap();
        let cc_sq = &fg.fields["cc_sq"];
        let kinds: Vec<EdgeKind> = cc_sq.route.iter().map(|&e| fg.edges[e].kind).collect();
        let has = |pred: &dyn Fn(&EdgeKind) -> bool| kinds.iter().any(|k| pred(k));
        assert!(has(&|k| matches!(k, EdgeKind::RvHop)), "bp hops");
        assert!(has(&|k| matches!(k, EdgeKind::OppTaken { .. })), "bypass arm");
        assert!(has(&|k| matches!(k, EdgeKind::OppMain { .. })), "ring arm");
        assert!(has(&|k| matches!(k, EdgeKind::RingInject { .. })), "ring inject");
        assert!(has(&|k| matches!(k, EdgeKind::RingThrough { .. })), "ring arc");
        assert!(has(&|k| matches!(k, EdgeKind::RingEject { .. })), "ring eject");
        assert!(
            has(&|k| matches!(k, EdgeKind::ArbIn { which: 1, .. }))
                && has(&|k| matches!(k, EdgeKind::ArbIn { which: 2, .. })),
            "both arbiter arms"
        );
    }

    #[test]
    fn dest_resolves_to_generator_through_entry_chain() {
        let (_, fg) = flow_of(&corpus("showcase.tlv")).unwrap();
        let dest = &fg.fields["dest"];
        assert_eq!(dest.producers.len(), 1);
        assert!(matches!(
            dest.producers.iter().next().unwrap(),
            ProducerSite::External(_)
        ));
        let kinds: Vec<EdgeKind> = dest.route.iter().map(|&e| fg.edges[e].kind).collect();
        assert!(kinds.iter().any(|k| matches!(k, EdgeKind::DomainStep { .. })));
        assert!(kinds.iter().any(|k| matches!(k, EdgeKind::Fifo { .. })));
        assert!(kinds.iter().any(|k| matches!(k, EdgeKind::RvHop)));
    }

    #[test]
    fn route_minimality_every_edge_reaches_a_consumer() {
        // Reverse-reachability: every route edge must lie on a path from a
        // producer to a consumer (checked downstream-wards).
        let (_, fg) = flow_of(&corpus("showcase_staged.tlv")).unwrap();
        for (name, fr) in &fg.fields {
            for &e in &fr.route {
                let mut stack = vec![fg.edges[e].to];
                let mut seen = std::collections::BTreeSet::new();
                let mut ok = false;
                while let Some(p) = stack.pop() {
                    if fr.consumers.contains(&p) {
                        ok = true;
                        break;
                    }
                    if !seen.insert(p) {
                        continue;
                    }
                    for oe in fg.out_edges(p) {
                        if fr.route.contains(&oe.id) {
                            stack.push(oe.to);
                        }
                    }
                }
                assert!(ok, "field {name}: route edge {e} reaches no consumer");
            }
        }
    }

    #[test]
    fn resolution_is_deterministic() {
        let a = flow_of(&corpus("showcase_staged.tlv")).unwrap().1;
        let b = flow_of(&corpus("showcase_staged.tlv")).unwrap().1;
        assert_eq!(dump_flow(&a), dump_flow(&b));
    }

    #[test]
    fn unresolved_mux_arm_reports_failing_path() {
        // Field w is produced on one arm only; the other arm cannot satisfy
        // the demand downstream of the mux.
        let src = "\
|m
   @1
      /in1
         $v[3:0] = $p[3:0] + 0;
         $w[3:0] = $p[3:0] + 1;
      /in2
         $v[3:0] = $q[3:0] + 0;
      $select = $s[0:0];
      $ANY = $select ? /in1$ANY : /in2$ANY;
   @2
      $out[4:0] = $v + $w;
";
        let err = flow_of(src).unwrap_err();
        assert!(err.message.contains("unresolved field $w"), "{err}");
        assert!(err.message.contains("path:"), "{err}");
    }
}

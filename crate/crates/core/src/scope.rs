//! Merged scope hierarchy: reentrant scope fusion, component expansion, and
//! reference resolution.
//!
//! Parsing keeps same-named scope entries separate; `merge_reentrant` fuses
//! them into one node per distinct path. Component instantiations expand into
//! the same structure, so user statements written inside component-created
//! pipelines (lexical reentrance) land in the nodes the expansion created.

use crate::diag::{Diagnostic, Pos};
use crate::frontend::{Expr, Instantiation, Lhs, ParseNode, ParseTree, PathElem};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

// ---------------------------------------------------------------------------
// Paths and flow points
// ---------------------------------------------------------------------------

/// An absolute scope path: hierarchy elements with an optional trailing
/// pipeline element.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ScopePath(pub Vec<PathElem>);

impl ScopePath {
    pub fn child(&self, elem: PathElem) -> ScopePath {
        let mut v = self.0.clone();
        v.push(elem);
        ScopePath(v)
    }
}

impl fmt::Display for ScopePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "/");
        }
        for e in &self.0 {
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

/// A position in the flow: a pipeline stage in a given scope.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowPoint {
    /// Scope containing the pipeline (no pipe element).
    pub scope: ScopePath,
    pub pipe: String,
    pub stage: u32,
}

impl FlowPoint {
    pub fn new(scope: &ScopePath, pipe: &str, stage: u32) -> Self {
        FlowPoint {
            scope: scope.clone(),
            pipe: pipe.to_string(),
            stage,
        }
    }
}

impl fmt::Display for FlowPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}@{}", self.scope, self.pipe, self.stage)
    }
}

// ---------------------------------------------------------------------------
// Channels and elements
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakeClass {
    /// Valid only; transactions march unconditionally.
    FreeFlow,
    /// Valid downstream, ready upstream; transfer when both hold.
    ReadyValid,
    /// Whole chain holds under one shared signal.
    Stall,
    /// Ring arc: valid plus through-traffic priority.
    RingHop,
}

impl fmt::Display for HandshakeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HandshakeClass::FreeFlow => "free",
            HandshakeClass::ReadyValid => "ready_valid",
            HandshakeClass::Stall => "stall",
            HandshakeClass::RingHop => "ring_hop",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Producer,
    Consumer,
}

/// One side of a channel: a component delivering transactions to, or taking
/// them from, a flow point.
#[derive(Debug, Clone)]
pub struct ChannelEndpoint {
    pub direction: Direction,
    pub point: FlowPoint,
    pub handshake: HandshakeClass,
    pub instance: usize,
    /// Internal endpoints (e.g. pipeline hops) pair within their element and
    /// never match against other components.
    pub internal: bool,
}

/// A paired producer/consumer connection.
#[derive(Debug, Clone)]
pub struct Channel {
    pub id: usize,
    pub producer: ChannelEndpoint,
    pub consumer: ChannelEndpoint,
    pub class: HandshakeClass,
}

/// Condition argument of the opportunistic splitter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CondRef {
    pub signal: String,
    pub negated: bool,
}

/// Flow machinery contributed by component expansion. Elements carry the
/// stateful structure (registers, storage, priority logic); they define no
/// transaction logic of their own.
#[derive(Debug, Clone)]
pub enum Element {
    StallChain {
        scope: ScopePath,
        base: String,
        first: u32,
        last: u32,
        /// Design-level stall input name.
        stall_input: String,
    },
    RvPipe {
        scope: ScopePath,
        base: String,
        first: u32,
        last: u32,
    },
    Fifo {
        scope: ScopePath,
        depth: u32,
        input: FlowPoint,
        output: FlowPoint,
    },
    Arb2 {
        scope: ScopePath,
        in1: FlowPoint,
        in2: FlowPoint,
        out: FlowPoint,
    },
    Opp {
        scope: ScopePath,
        input: FlowPoint,
        taken: FlowPoint,
        main: FlowPoint,
        cond: CondRef,
    },
    Ring {
        stop_scope: ScopePath,
        injection: FlowPoint,
        ejection: FlowPoint,
    },
    Testbench {
        top: ScopePath,
        stop_scope: ScopePath,
        entry: FlowPoint,
        exit: FlowPoint,
    },
}

impl Element {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Element::StallChain { .. } => "stall_chain",
            Element::RvPipe { .. } => "rv_pipe",
            Element::Fifo { .. } => "fifo",
            Element::Arb2 { .. } => "arb2",
            Element::Opp { .. } => "opportunistic",
            Element::Ring { .. } => "ring",
            Element::Testbench { .. } => "testbench",
        }
    }
}

/// Record of one expanded instantiation.
#[derive(Debug, Clone)]
pub struct ComponentInstance {
    pub id: usize,
    pub component: String,
    pub at: ScopePath,
    pub pos: Pos,
}

// ---------------------------------------------------------------------------
// Scope graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Root,
    Hier,
    HierRep,
    Pipe,
}

/// How a consumed reference was bound by `resolve_references`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    /// Assigned at the same pipeline stage (same cycle).
    Local,
    /// Assigned earlier in the same pipeline; carried by staging registers.
    BackRef { distance: u32 },
    /// No local producer: the field must arrive along the flow.
    FlowDemand,
    /// Replication-index constant of the named enclosing scope.
    IndexConst { scope_name: String },
}

/// One assignment statement placed at a pipeline stage, with an optional
/// transaction sub-scope refinement (`/trans` between stage and statement).
#[derive(Debug, Clone)]
pub struct Statement {
    pub trans: Vec<String>,
    pub lhs: Lhs,
    pub rhs: Expr,
    pub pos: Pos,
    /// Per consumed reference, in RHS traversal order. Filled by
    /// `resolve_references`.
    pub bindings: Vec<(String, Binding)>,
}

#[derive(Debug, Clone)]
pub struct ScopeNode {
    pub name: String,
    pub kind: NodeKind,
    pub children: Vec<ScopeNode>,
    /// Stage number -> statements, for pipeline nodes.
    pub stages: BTreeMap<u32, Vec<Statement>>,
}

impl ScopeNode {
    fn new(name: &str, kind: NodeKind) -> Self {
        ScopeNode {
            name: name.to_string(),
            kind,
            children: Vec::new(),
            stages: BTreeMap::new(),
        }
    }

    pub fn find_child(&self, name: &str, kind: NodeKind) -> Option<&ScopeNode> {
        self.children
            .iter()
            .find(|c| c.name == name && c.kind == kind)
    }
}

/// Where a field's width came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WidthSource {
    Declared,
    Inferred,
    Template,
    BitSelect,
}

#[derive(Debug, Clone)]
pub struct FieldDecl {
    pub width: u32,
    pub source: WidthSource,
    pub pos: Pos,
}

/// An instantiation collected during merge, awaiting expansion.
#[derive(Debug, Clone)]
pub struct PendingInst {
    pub inst: Instantiation,
    pub at: ScopePath,
}

#[derive(Debug, Clone, Default)]
pub struct ScopeGraph {
    pub root: Option<ScopeNode>,
    /// Replication count for `[*]` scopes.
    pub ports: u32,
    pub pending: Vec<PendingInst>,
    pub instances: Vec<ComponentInstance>,
    pub elements: Vec<(usize, Element)>,
    pub channels: Vec<Channel>,
    /// All endpoints; paired ones are marked internal. Remaining external
    /// endpoints become the design-level interface.
    pub endpoints: Vec<ChannelEndpoint>,
    /// Transaction sub-scopes declared by component instantiations:
    /// (owning scope, name). Statements under these land on the main bundle.
    pub trans_scopes: BTreeSet<(ScopePath, String)>,
    /// Sub-scopes opened as stage refinements in source (child bundles of
    /// `$ANY` flow expressions unless also a registered trans scope).
    pub stage_scopes: BTreeSet<(ScopePath, String)>,
    /// Field widths, populated by `resolve_references`.
    pub fields: BTreeMap<String, FieldDecl>,
    /// Design-level stall inputs contributed by stall chains.
    pub stall_inputs: Vec<String>,
}

fn walk_create<'a>(
    node: &'a mut ScopeNode,
    elems: &[PathElem],
) -> Result<&'a mut ScopeNode, Diagnostic> {
    let Some(first) = elems.first() else {
        return Ok(node);
    };
    let (name, kind) = match first {
        PathElem::Hier(n) => (n.as_str(), NodeKind::Hier),
        PathElem::HierRep(n) => (n.as_str(), NodeKind::HierRep),
        PathElem::Pipe(n) => (n.as_str(), NodeKind::Pipe),
    };
    check_replication_conflict(node, name, kind)?;
    let idx = match node
        .children
        .iter()
        .position(|c| c.name == name && c.kind == kind)
    {
        Some(i) => i,
        None => {
            node.children.push(ScopeNode::new(name, kind));
            node.children.len() - 1
        }
    };
    walk_create(&mut node.children[idx], &elems[1..])
}

impl ScopeGraph {
    fn root_mut(&mut self) -> &mut ScopeNode {
        self.root
            .get_or_insert_with(|| ScopeNode::new("", NodeKind::Root))
    }

    /// Walk (creating as needed) to the node for `path`.
    pub fn node_at_mut(&mut self, path: &ScopePath) -> Result<&mut ScopeNode, Diagnostic> {
        let elems = path.0.clone();
        walk_create(self.root_mut(), &elems)
    }

    pub fn node_at(&self, path: &ScopePath) -> Option<&ScopeNode> {
        let mut node = self.root.as_ref()?;
        for elem in &path.0 {
            let (name, kind) = match elem {
                PathElem::Hier(n) => (n.as_str(), NodeKind::Hier),
                PathElem::HierRep(n) => (n.as_str(), NodeKind::HierRep),
                PathElem::Pipe(n) => (n.as_str(), NodeKind::Pipe),
            };
            node = node.find_child(name, kind)?;
        }
        Some(node)
    }

    pub fn has_testbench(&self) -> bool {
        self.elements
            .iter()
            .any(|(_, e)| matches!(e, Element::Testbench { .. }))
    }

    /// All statements with their flow position, in deterministic order.
    pub fn statements(&self) -> Vec<(FlowPoint, &Statement)> {
        let mut out = Vec::new();
        if let Some(root) = &self.root {
            collect_statements(root, &ScopePath::default(), &mut out);
        }
        out
    }
}

fn collect_statements<'a>(
    node: &'a ScopeNode,
    path: &ScopePath,
    out: &mut Vec<(FlowPoint, &'a Statement)>,
) {
    if node.kind == NodeKind::Pipe {
        let scope = ScopePath(path.0[..path.0.len() - 1].to_vec());
        for (&stage, stmts) in &node.stages {
            for s in stmts {
                out.push((FlowPoint::new(&scope, &node.name, stage), s));
            }
        }
    }
    for c in &node.children {
        let elem = match c.kind {
            NodeKind::Hier => PathElem::Hier(c.name.clone()),
            NodeKind::HierRep => PathElem::HierRep(c.name.clone()),
            NodeKind::Pipe => PathElem::Pipe(c.name.clone()),
            NodeKind::Root => unreachable!("root has no parent"),
        };
        collect_statements(c, &path.child(elem), out);
    }
}

fn check_replication_conflict(
    parent: &ScopeNode,
    name: &str,
    kind: NodeKind,
) -> Result<(), Diagnostic> {
    let clash = match kind {
        NodeKind::Hier => parent.find_child(name, NodeKind::HierRep).is_some(),
        NodeKind::HierRep => parent.find_child(name, NodeKind::Hier).is_some(),
        _ => false,
    };
    if clash {
        return Err(Diagnostic::global(format!(
            "conflicting replication markers on scope '/{name}'"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// merge_reentrant
// ---------------------------------------------------------------------------

/// Fuse all scope entries with equal paths into one hierarchy. Statement
/// order within a fused stage is source order of appearance. Instantiations
/// are collected unexpanded.
pub fn merge_reentrant(tree: &ParseTree) -> Result<ScopeGraph, Diagnostic> {
    let mut g = ScopeGraph {
        ports: 4,
        ..Default::default()
    };
    g.root_mut();
    for node in &tree.root {
        merge_node(node, &ScopePath::default(), &mut g)?;
    }
    Ok(g)
}

fn merge_node(node: &ParseNode, path: &ScopePath, g: &mut ScopeGraph) -> Result<(), Diagnostic> {
    match node {
        ParseNode::Scope { elem, children, .. } => {
            let child_path = path.child(elem.clone());
            g.node_at_mut(&child_path)?;
            for c in children {
                merge_node(c, &child_path, g)?;
            }
        }
        ParseNode::Stage {
            number, children, ..
        } => {
            merge_stage(children, &Vec::new(), path, *number, g)?;
        }
        ParseNode::Inst(inst) => {
            g.pending.push(PendingInst {
                inst: inst.clone(),
                at: path.clone(),
            });
        }
        ParseNode::Assign(a) => {
            return Err(Diagnostic::new(a.pos, "statement outside a stage"));
        }
    }
    Ok(())
}

/// Collect assignments under a stage, tracking `/trans`-style refinements.
fn merge_stage(
    children: &[ParseNode],
    trans: &Vec<String>,
    pipe_path: &ScopePath,
    stage: u32,
    g: &mut ScopeGraph,
) -> Result<(), Diagnostic> {
    for c in children {
        match c {
            ParseNode::Assign(a) => {
                if let Some(first) = trans.first() {
                    let scope = ScopePath(pipe_path.0[..pipe_path.0.len() - 1].to_vec());
                    g.stage_scopes.insert((scope, first.clone()));
                }
                let node = g.node_at_mut(pipe_path)?;
                let stmts = node.stages.entry(stage).or_default();
                if !a.lhs.any
                    && stmts
                        .iter()
                        .any(|s| !s.lhs.any && s.lhs.name == a.lhs.name && s.trans == *trans)
                {
                    return Err(Diagnostic::new(
                        a.pos,
                        format!(
                            "duplicate assignment to ${} in {}@{}",
                            a.lhs.name, pipe_path, stage
                        ),
                    ));
                }
                stmts.push(Statement {
                    trans: trans.clone(),
                    lhs: a.lhs.clone(),
                    rhs: a.rhs.clone(),
                    pos: a.pos,
                    bindings: Vec::new(),
                });
            }
            ParseNode::Scope {
                elem: PathElem::Hier(n),
                children,
                ..
            } => {
                let mut t = trans.clone();
                t.push(n.clone());
                merge_stage(children, &t, pipe_path, stage, g)?;
            }
            ParseNode::Scope { pos, .. } => {
                return Err(Diagnostic::new(
                    *pos,
                    "only hierarchy scopes may refine a stage",
                ));
            }
            ParseNode::Stage { pos, .. } => {
                return Err(Diagnostic::new(*pos, "stage entry nested inside a stage"));
            }
            ParseNode::Inst(inst) => {
                return Err(Diagnostic::new(inst.pos, "instantiation inside a stage"));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// expand_instantiations
// ---------------------------------------------------------------------------

/// Expand every collected instantiation through the component library,
/// merging the produced scopes/pipelines into the graph and pairing channel
/// endpoints. `ports` is the replication count for `[*]` scopes.
pub fn expand_instantiations(mut g: ScopeGraph, ports: u32) -> Result<ScopeGraph, Diagnostic> {
    g.ports = ports;
    let pending = std::mem::take(&mut g.pending);
    for (id, p) in pending.iter().enumerate() {
        crate::flowlib::expand(&p.inst, &p.at, id, &mut g)?;
        g.instances.push(ComponentInstance {
            id,
            component: p.inst.component.clone(),
            at: p.at.clone(),
            pos: p.inst.pos,
        });
    }
    pair_endpoints(&mut g)?;
    Ok(g)
}

/// Match external producer endpoints with external consumer endpoints by
/// (scope, pipeline). A stage gap between producer and consumer is closed
/// later by staging hops. Unpaired endpoints become the design interface.
fn pair_endpoints(g: &mut ScopeGraph) -> Result<(), Diagnostic> {
    let mut by_pipe: BTreeMap<(ScopePath, String), Vec<usize>> = BTreeMap::new();
    for (i, ep) in g.endpoints.iter().enumerate() {
        if ep.internal {
            continue;
        }
        by_pipe
            .entry((ep.point.scope.clone(), ep.point.pipe.clone()))
            .or_default()
            .push(i);
    }
    let mut to_pair: Vec<(usize, usize)> = Vec::new();
    for ((scope, pipe), idxs) in &by_pipe {
        let producers: Vec<usize> = idxs
            .iter()
            .copied()
            .filter(|&i| g.endpoints[i].direction == Direction::Producer)
            .collect();
        let consumers: Vec<usize> = idxs
            .iter()
            .copied()
            .filter(|&i| g.endpoints[i].direction == Direction::Consumer)
            .collect();
        if producers.len() > 1 {
            return Err(Diagnostic::global(format!(
                "two components claim the producer flow point {scope}|{pipe}"
            )));
        }
        if consumers.len() > 1 {
            return Err(Diagnostic::global(format!(
                "two components consume the flow point {scope}|{pipe}"
            )));
        }
        if let (Some(&p), Some(&c)) = (producers.first(), consumers.first()) {
            let (ps, cs) = (g.endpoints[p].point.stage, g.endpoints[c].point.stage);
            if cs < ps {
                return Err(Diagnostic::global(format!(
                    "consumer at {scope}|{pipe}@{cs} precedes producer at stage {ps}"
                )));
            }
            to_pair.push((p, c));
        }
    }
    for (p, c) in to_pair {
        let id = g.channels.len();
        let class = g.endpoints[c].handshake;
        g.channels.push(Channel {
            id,
            producer: g.endpoints[p].clone(),
            consumer: g.endpoints[c].clone(),
            class,
        });
        g.endpoints[p].internal = true;
        g.endpoints[c].internal = true;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// resolve_references
// ---------------------------------------------------------------------------

struct WidthCtx {
    fields: BTreeMap<String, FieldDecl>,
    index_width: u32,
}

fn expr_width(e: &Expr, ctx: &WidthCtx) -> Option<u32> {
    match e {
        Expr::Signal(n) | Expr::Child(_, n) => ctx.fields.get(n).map(|f| f.width),
        Expr::Any | Expr::ChildAny(_) => None,
        Expr::Index(_) => Some(ctx.index_width),
        Expr::Int(v) => Some((64 - v.leading_zeros()).max(1)),
        Expr::Select(_, hi, lo) => Some(hi - lo + 1),
        Expr::Not(_) => Some(1),
        Expr::Binary(op, a, b) => {
            let (wa, wb) = (expr_width(a, ctx)?, expr_width(b, ctx)?);
            match op {
                crate::frontend::BinOp::Add => Some(wa.max(wb) + 1),
                crate::frontend::BinOp::Sub => Some(wa.max(wb)),
                crate::frontend::BinOp::Eq | crate::frontend::BinOp::Ne => Some(1),
            }
        }
        Expr::Cond(_, a, b) => {
            let (wa, wb) = (expr_width(a, ctx)?, expr_width(b, ctx)?);
            Some(wa.max(wb))
        }
        Expr::Pow(a, k) => Some(expr_width(a, ctx)? * k),
        Expr::Sqrt(a) => Some(expr_width(a, ctx)?.div_ceil(2)),
    }
}

fn visit_refs<'a>(e: &'a Expr, f: &mut impl FnMut(&'a Expr)) {
    f(e);
    match e {
        Expr::Select(a, _, _) | Expr::Not(a) | Expr::Pow(a, _) | Expr::Sqrt(a) => visit_refs(a, f),
        Expr::Binary(_, a, b) => {
            visit_refs(a, f);
            visit_refs(b, f);
        }
        Expr::Cond(c, a, b) => {
            visit_refs(c, f);
            visit_refs(a, f);
            visit_refs(b, f);
        }
        _ => {}
    }
}

pub fn index_const_width(ports: u32) -> u32 {
    (32 - (ports.max(2) - 1).leading_zeros()).max(1)
}

/// Width of the testbench-generated tag field.
pub const TAG_WIDTH: u32 = 32;

/// Bind every reference in every statement: local assignments, same-pipeline
/// back-references, index constants, or flow-field demands. Populates the
/// design-wide field width table.
pub fn resolve_references(mut g: ScopeGraph) -> Result<ScopeGraph, Diagnostic> {
    let index_width = index_const_width(g.ports);

    // Pass 1: collect assignment sites and declared widths.
    let mut assign_sites: BTreeMap<String, Vec<(FlowPoint, Option<(u32, u32)>, Pos)>> =
        BTreeMap::new();
    for (point, stmt) in g.statements() {
        if stmt.lhs.any {
            continue;
        }
        assign_sites
            .entry(stmt.lhs.name.clone())
            .or_default()
            .push((point.clone(), stmt.lhs.range, stmt.pos));
    }

    let mut fields: BTreeMap<String, FieldDecl> = BTreeMap::new();
    if g.has_testbench() {
        fields.insert(
            "tag".into(),
            FieldDecl {
                width: TAG_WIDTH,
                source: WidthSource::Template,
                pos: Pos::default(),
            },
        );
    }
    if g.elements
        .iter()
        .any(|(_, e)| matches!(e, Element::Ring { .. } | Element::Testbench { .. }))
    {
        fields.insert(
            "dest".into(),
            FieldDecl {
                width: index_width,
                source: WidthSource::Template,
                pos: Pos::default(),
            },
        );
    }
    // Splitter conditions are one-bit by contract.
    for (_, el) in &g.elements {
        if let Element::Opp { cond, .. } = el {
            fields.entry(cond.signal.clone()).or_insert(FieldDecl {
                width: 1,
                source: WidthSource::Template,
                pos: Pos::default(),
            });
        }
    }
    for (name, sites) in &assign_sites {
        if let Some((_, Some((hi, lo)), pos)) = sites.iter().find(|(_, r, _)| r.is_some()) {
            if let Some(prev) = fields.get(name) {
                if prev.width != hi - lo + 1 {
                    return Err(Diagnostic::new(
                        *pos,
                        format!(
                            "${name} declared [{hi}:{lo}] but has template width {}",
                            prev.width
                        ),
                    ));
                }
            }
            fields.insert(
                name.clone(),
                FieldDecl {
                    width: hi - lo + 1,
                    source: WidthSource::Declared,
                    pos: *pos,
                },
            );
        }
    }

    // Pass 2: bit-select-derived widths for never-assigned fields (these can
    // become generator-driven fields or primary inputs).
    let mut select_bounds: BTreeMap<String, (u32, Pos)> = BTreeMap::new();
    for (_, stmt) in g.statements() {
        let pos = stmt.pos;
        visit_refs(&stmt.rhs, &mut |e| {
            if let Expr::Select(inner, hi, _) = e {
                if let Expr::Signal(n) | Expr::Child(_, n) = &**inner {
                    let en = select_bounds.entry(n.clone()).or_insert((0, pos));
                    en.0 = en.0.max(hi + 1);
                }
            }
        });
    }
    for (name, (width, pos)) in &select_bounds {
        if !fields.contains_key(name) && !assign_sites.contains_key(name) {
            fields.insert(
                name.clone(),
                FieldDecl {
                    width: *width,
                    source: WidthSource::BitSelect,
                    pos: *pos,
                },
            );
        }
    }

    // Pass 3: width inference for assignments without a declared range.
    let mut ctx = WidthCtx {
        fields,
        index_width,
    };
    loop {
        let mut progressed = false;
        for (name, sites) in &assign_sites {
            if ctx.fields.contains_key(name) {
                continue;
            }
            for (point, range, _) in sites {
                if range.is_some() {
                    continue;
                }
                if let Some(stmt) = find_statement(&g, point, name) {
                    if let Some(w) = expr_width(&stmt.rhs, &ctx) {
                        ctx.fields.insert(
                            name.clone(),
                            FieldDecl {
                                width: w.max(1),
                                source: WidthSource::Inferred,
                                pos: stmt.pos,
                            },
                        );
                        progressed = true;
                        break;
                    }
                }
            }
        }
        if !progressed {
            break;
        }
    }
    for (name, sites) in &assign_sites {
        if !ctx.fields.contains_key(name) {
            return Err(Diagnostic::new(
                sites[0].2,
                format!("cannot infer width of ${name}; declare it with [hi:lo]"),
            ));
        }
    }

    // Pass 4: bind references and validate.
    let trans_scopes = g.trans_scopes.clone();
    let stage_scopes = g.stage_scopes.clone();
    let bind_ctx = BindCtx {
        assigns: &assign_sites,
        fields: &ctx.fields,
        trans_scopes: &trans_scopes,
        stage_scopes: &stage_scopes,
        has_tb: g.has_testbench(),
    };
    let mut errors: Vec<Diagnostic> = Vec::new();
    if let Some(root) = &mut g.root {
        bind_node(
            root,
            &ScopePath::default(),
            &mut Vec::new(),
            &bind_ctx,
            &mut errors,
        );
    }
    if let Some(e) = errors.into_iter().next() {
        return Err(e);
    }

    // Pass 5: fields consumed (by statements or templates) but never
    // assigned anywhere need an external producer with an inferable width.
    let mut consumed: BTreeSet<String> = BTreeSet::new();
    for (_, stmt) in g.statements() {
        visit_refs(&stmt.rhs, &mut |e| {
            if let Expr::Signal(n) | Expr::Child(_, n) = e {
                consumed.insert(n.clone());
            }
        });
    }
    for (_, el) in &g.elements {
        if let Element::Opp { cond, .. } = el {
            consumed.insert(cond.signal.clone());
        }
        if let Element::Ring { .. } = el {
            consumed.insert("dest".into());
        }
    }
    for name in &consumed {
        if !ctx.fields.contains_key(name) && !assign_sites.contains_key(name) {
            return Err(Diagnostic::global(format!(
                "unresolved field ${name}: no producer and no inferable width"
            )));
        }
    }

    g.fields = ctx.fields;
    Ok(g)
}

fn find_statement<'a>(g: &'a ScopeGraph, point: &FlowPoint, name: &str) -> Option<&'a Statement> {
    let mut pipe_path = point.scope.clone();
    pipe_path.0.push(PathElem::Pipe(point.pipe.clone()));
    let node = g.node_at(&pipe_path)?;
    node.stages
        .get(&point.stage)?
        .iter()
        .find(|s| !s.lhs.any && s.lhs.name == name)
}

struct BindCtx<'a> {
    assigns: &'a BTreeMap<String, Vec<(FlowPoint, Option<(u32, u32)>, Pos)>>,
    fields: &'a BTreeMap<String, FieldDecl>,
    trans_scopes: &'a BTreeSet<(ScopePath, String)>,
    stage_scopes: &'a BTreeSet<(ScopePath, String)>,
    has_tb: bool,
}

fn bind_node(
    node: &mut ScopeNode,
    path: &ScopePath,
    replicated_ancestors: &mut Vec<String>,
    ctx: &BindCtx<'_>,
    errors: &mut Vec<Diagnostic>,
) {
    let pushed = if node.kind == NodeKind::HierRep {
        replicated_ancestors.push(node.name.clone());
        true
    } else {
        false
    };
    if node.kind == NodeKind::Pipe {
        let scope = ScopePath(path.0[..path.0.len() - 1].to_vec());
        let pipe = node.name.clone();
        for (&stage, stmts) in node.stages.iter_mut() {
            for stmt in stmts.iter_mut() {
                let mut bindings = Vec::new();
                let pos = stmt.pos;
                {
                    let scope = &scope;
                    let pipe = &pipe;
                    let mut record = |e: &Expr| match e {
                        Expr::Signal(n) | Expr::Child(_, n) => {
                            if let Expr::Child(p, _) = e {
                                let owner = (scope.clone(), p[0].clone());
                                if !ctx.trans_scopes.contains(&owner)
                                    && !ctx.stage_scopes.contains(&owner)
                                {
                                    errors.push(Diagnostic::new(
                                        pos,
                                        format!(
                                            "/{} is not a child scope of {}",
                                            p.join("/"),
                                            scope
                                        ),
                                    ));
                                    return;
                                }
                            }
                            let binding = match ctx.assigns.get(n) {
                                Some(sites) => {
                                    let same_pipe: Vec<_> = sites
                                        .iter()
                                        .filter(|(pt, _, _)| {
                                            pt.scope == *scope && pt.pipe == *pipe
                                        })
                                        .collect();
                                    if same_pipe.iter().any(|(pt, _, _)| pt.stage == stage) {
                                        Binding::Local
                                    } else if let Some((pt, _, _)) = same_pipe
                                        .iter()
                                        .filter(|(pt, _, _)| pt.stage < stage)
                                        .max_by_key(|(pt, _, _)| pt.stage)
                                    {
                                        Binding::BackRef {
                                            distance: stage - pt.stage,
                                        }
                                    } else {
                                        Binding::FlowDemand
                                    }
                                }
                                None => Binding::FlowDemand,
                            };
                            if matches!(binding, Binding::FlowDemand)
                                && !ctx.assigns.contains_key(n)
                                && !ctx.fields.contains_key(n)
                                && !ctx.has_tb
                            {
                                errors.push(Diagnostic::new(
                                    pos,
                                    format!(
                                        "unresolved field ${n}: no producer anywhere upstream"
                                    ),
                                ));
                            }
                            bindings.push((n.clone(), binding));
                        }
                        Expr::Index(n) => {
                            if replicated_ancestors.iter().any(|a| a == n) {
                                bindings.push((
                                    n.clone(),
                                    Binding::IndexConst {
                                        scope_name: n.clone(),
                                    },
                                ));
                            } else {
                                errors.push(Diagnostic::new(
                                    pos,
                                    format!(
                                        "#{n} has no replicated ancestor scope named '{n}'"
                                    ),
                                ));
                            }
                        }
                        Expr::Select(inner, hi, _) => {
                            if let Expr::Signal(n) | Expr::Child(_, n) = &**inner {
                                if let Some(decl) = ctx.fields.get(n) {
                                    if *hi >= decl.width
                                        && !matches!(decl.source, WidthSource::BitSelect)
                                    {
                                        errors.push(Diagnostic::new(
                                            pos,
                                            format!(
                                                "bit select [{hi}:..] exceeds width {} of ${n}",
                                                decl.width
                                            ),
                                        ));
                                    }
                                }
                            }
                        }
                        _ => {}
                    };
                    visit_refs(&stmt.rhs, &mut record);
                }
                stmt.bindings = bindings;
            }
        }
    }
    for c in node.children.iter_mut() {
        let elem = match c.kind {
            NodeKind::Hier => PathElem::Hier(c.name.clone()),
            NodeKind::HierRep => PathElem::HierRep(c.name.clone()),
            NodeKind::Pipe => PathElem::Pipe(c.name.clone()),
            NodeKind::Root => unreachable!(),
        };
        let child_path = path.child(elem);
        bind_node(c, &child_path, replicated_ancestors, ctx, errors);
    }
    if pushed {
        replicated_ancestors.pop();
    }
}

// ---------------------------------------------------------------------------
// Stable dump
// ---------------------------------------------------------------------------

fn dump_node(node: &ScopeNode, depth: usize, out: &mut String) {
    match node.kind {
        NodeKind::Root => {}
        NodeKind::Hier => out.push_str(&format!("{}/{}\n", "  ".repeat(depth), node.name)),
        NodeKind::HierRep => out.push_str(&format!("{}/{}[*]\n", "  ".repeat(depth), node.name)),
        NodeKind::Pipe => out.push_str(&format!("{}|{}\n", "  ".repeat(depth), node.name)),
    }
    let depth = if node.kind == NodeKind::Root {
        depth
    } else {
        depth + 1
    };
    let pad = "  ".repeat(depth);
    for (stage, stmts) in &node.stages {
        out.push_str(&format!("{pad}@{stage}\n"));
        for s in stmts {
            let t: String = s.trans.iter().map(|t| format!("/{t}")).collect();
            out.push_str(&format!("{pad}  {}{} = {};\n", t, s.lhs, s.rhs));
        }
    }
    for c in &node.children {
        dump_node(c, depth, out);
    }
}

/// Serialized ScopeGraph: a stable text form used for golden tests and as
/// the "expanded" artifact for code-size metrics.
pub fn dump_scope_graph(g: &ScopeGraph) -> String {
    let mut out = String::new();
    out.push_str(&format!("ports {}\n", g.ports));
    if let Some(root) = &g.root {
        dump_node(root, 0, &mut out);
    }
    for inst in &g.instances {
        out.push_str(&format!(
            "instance {} {} at {}\n",
            inst.id, inst.component, inst.at
        ));
    }
    for (id, el) in &g.elements {
        out.push_str(&format!("element {} {}", id, el.kind_name()));
        match el {
            Element::StallChain {
                scope,
                base,
                first,
                last,
                stall_input,
            } => out.push_str(&format!(
                " {scope}|{base}[{first}..{last}] stall_input={stall_input}"
            )),
            Element::RvPipe {
                scope,
                base,
                first,
                last,
            } => out.push_str(&format!(" {scope}|{base}[{first}..{last}]")),
            Element::Fifo {
                depth,
                input,
                output,
                ..
            } => out.push_str(&format!(" depth={depth} {input} -> {output}")),
            Element::Arb2 {
                in1,
                in2,
                out: o,
                ..
            } => out.push_str(&format!(" {in1} + {in2} -> {o}")),
            Element::Opp {
                input,
                taken,
                main,
                cond,
                ..
            } => out.push_str(&format!(
                " {input} -> taken {taken} | main {main} when {}{}",
                if cond.negated { "!" } else { "" },
                cond.signal
            )),
            Element::Ring {
                stop_scope,
                injection,
                ejection,
            } => out.push_str(&format!(
                " {stop_scope} inject {injection} eject {ejection}"
            )),
            Element::Testbench { entry, exit, .. } => {
                out.push_str(&format!(" entry {entry} exit {exit}"))
            }
        }
        out.push('\n');
    }
    for ch in &g.channels {
        out.push_str(&format!(
            "channel {} {} {} -> {}\n",
            ch.id, ch.class, ch.producer.point, ch.consumer.point
        ));
    }
    for ep in &g.endpoints {
        if !ep.internal {
            let dir = match ep.direction {
                Direction::Producer => "producer",
                Direction::Consumer => "consumer",
            };
            out.push_str(&format!("open {} {} {}\n", dir, ep.handshake, ep.point));
        }
    }
    for (name, decl) in &g.fields {
        out.push_str(&format!("field {name} width {}\n", decl.width));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_source;

    fn corpus(name: &str) -> String {
        let p = format!("{}/corpus/{name}", env!("CARGO_MANIFEST_DIR"));
        std::fs::read_to_string(p).unwrap()
    }

    fn merged(src: &str) -> ScopeGraph {
        merge_reentrant(&parse_source(src).unwrap()).unwrap()
    }

    fn compiled(src: &str) -> Result<ScopeGraph, Diagnostic> {
        let g = merged(src);
        let g = expand_instantiations(g, 4)?;
        resolve_references(g)
    }

    #[test]
    fn fuses_reentrant_pipeline_entries_in_order() {
        let g = merged("|calc\n   @1\n      $a[1:0] = 1;\n|calc\n   @1\n      $b[1:0] = 2;\n");
        let node = g
            .node_at(&ScopePath(vec![PathElem::Pipe("calc".into())]))
            .unwrap();
        let stmts = &node.stages[&1];
        assert_eq!(stmts.len(), 2);
        assert_eq!(stmts[0].lhs.name, "a");
        assert_eq!(stmts[1].lhs.name, "b");
    }

    #[test]
    fn replicated_entries_fuse_idempotently() {
        let g = merged("/ring_stop[*]\n   |p\n      @1\n         $a[1:0] = 1;\n/ring_stop[*]\n   |q\n      @1\n         $b[1:0] = 2;\n");
        let root = g.root.as_ref().unwrap();
        assert_eq!(
            root.children
                .iter()
                .filter(|c| c.name == "ring_stop")
                .count(),
            1
        );
        let rs = root.find_child("ring_stop", NodeKind::HierRep).unwrap();
        assert_eq!(rs.children.len(), 2);
    }

    #[test]
    fn conflicting_replication_markers_rejected() {
        let tree =
            parse_source("/x\n   |p\n      @1\n         $a[1:0] = 1;\n/x[*]\n   |q\n      @1\n         $b[1:0] = 2;\n")
                .unwrap();
        let err = merge_reentrant(&tree).unwrap_err();
        assert!(err.message.contains("replication markers"));
    }

    #[test]
    fn duplicate_assignment_in_fused_stage_rejected() {
        let tree = parse_source("|p\n   @1\n      $a[1:0] = 1;\n|p\n   @1\n      $a[1:0] = 2;\n")
            .unwrap();
        let err = merge_reentrant(&tree).unwrap_err();
        assert!(err.message.contains("duplicate assignment"));
    }

    #[test]
    fn merge_is_order_insensitive_for_disjoint_content() {
        let a = "|p\n   @1\n      $a[1:0] = 1;\n|q\n   @2\n      $b[1:0] = 2;\n";
        let b = "|q\n   @2\n      $b[1:0] = 2;\n|p\n   @1\n      $a[1:0] = 1;\n";
        let (ga, gb) = (merged(a), merged(b));
        // Same set of (pipe, stage, signal) placements.
        let sig = |g: &ScopeGraph| {
            let mut v: Vec<String> = g
                .statements()
                .iter()
                .map(|(fp, s)| format!("{fp} {}", s.lhs.name))
                .collect();
            v.sort();
            v
        };
        assert_eq!(sig(&ga), sig(&gb));
    }

    #[test]
    fn showcase_expands_to_full_port_structure() {
        let g = compiled(&corpus("showcase.tlv")).unwrap();
        let rs = g
            .node_at(&ScopePath(vec![PathElem::HierRep("ring_stop".into())]))
            .unwrap();
        for pipe in [
            "stall0", "stall1", "stall2", "stall3", "bp0", "bp1", "bp2", "bp3", "bypass",
            "ring_in", "ring_out", "arb_out", "fifo2_out",
        ] {
            assert!(
                rs.find_child(pipe, NodeKind::Pipe).is_some(),
                "missing pipeline {pipe}"
            );
        }
        assert_eq!(g.instances.len(), 8);
        // Every external endpoint pairs up in the showcase.
        assert!(g.endpoints.iter().all(|e| e.internal));
    }

    #[test]
    fn staged_variant_lands_logic_in_component_pipelines() {
        let g = compiled(&corpus("showcase_staged.tlv")).unwrap();
        let rs_path = ScopePath(vec![PathElem::HierRep("ring_stop".into())]);
        let stall1 = g
            .node_at(&rs_path.child(PathElem::Pipe("stall1".into())))
            .unwrap();
        assert!(stall1.stages[&2].iter().any(|s| s.lhs.name == "aa_sq"));
        let bp1 = g
            .node_at(&rs_path.child(PathElem::Pipe("bp1".into())))
            .unwrap();
        assert!(bp1.stages[&1].iter().any(|s| s.lhs.name == "cc_sq"));
        let arb_out = g
            .node_at(&rs_path.child(PathElem::Pipe("arb_out".into())))
            .unwrap();
        assert!(arb_out.stages[&1].iter().any(|s| s.lhs.name == "cc"));
    }

    #[test]
    fn index_const_binds_to_replicated_ancestor() {
        let g = compiled(&corpus("showcase.tlv")).unwrap();
        let (_, stmt) = g
            .statements()
            .into_iter()
            .find(|(_, s)| s.lhs.name == "remote")
            .unwrap();
        assert!(stmt
            .bindings
            .iter()
            .any(|(n, b)| n == "ring_stop" && matches!(b, Binding::IndexConst { .. })));
        assert!(stmt
            .bindings
            .iter()
            .any(|(n, b)| n == "dest" && matches!(b, Binding::FlowDemand)));
    }

    #[test]
    fn back_reference_distance_is_recorded() {
        let g = compiled(&corpus("pythag.tlv")).unwrap();
        let (_, stmt) = g
            .statements()
            .into_iter()
            .find(|(_, s)| s.lhs.name == "cc")
            .unwrap();
        assert_eq!(
            stmt.bindings,
            vec![("cc_sq".into(), Binding::BackRef { distance: 1 })]
        );
    }

    #[test]
    fn index_const_without_replicated_ancestor_rejected() {
        let err = compiled("|p\n   @1\n      $x[1:0] = #ring_stop;\n").unwrap_err();
        assert!(err.message.contains("no replicated ancestor"));
    }

    #[test]
    fn undefined_field_without_width_rejected() {
        let err = compiled("|p\n   @1\n      $x[1:0] = $undefined + 1;\n").unwrap_err();
        assert!(err.message.contains("unresolved field $undefined"), "{err}");
    }

    #[test]
    fn child_ref_into_unknown_scope_rejected() {
        let err = compiled("|p\n   @1\n      $x[1:0] = /nowhere$y[1:0] + 1;\n").unwrap_err();
        assert!(err.message.contains("not a child scope"), "{err}");
    }

    #[test]
    fn bit_select_beyond_declared_width_rejected() {
        let err = compiled("|p\n   @1\n      $a[3:0] = 1;\n   @2\n      $b[7:0] = $a[7:0] + 1;\n")
            .unwrap_err();
        assert!(err.message.contains("exceeds width"), "{err}");
    }

    #[test]
    fn remote_flag_width_is_inferred_as_one_bit() {
        let g = compiled(&corpus("showcase.tlv")).unwrap();
        assert_eq!(g.fields["remote"].width, 1);
        assert_eq!(g.fields["dest"].width, 2);
        assert_eq!(g.fields["tag"].width, 32);
    }

    #[test]
    fn pythag_field_widths() {
        let g = compiled(&corpus("pythag.tlv")).unwrap();
        assert_eq!(g.fields["aa"].width, 4);
        assert_eq!(g.fields["aa_sq"].width, 8);
        assert_eq!(g.fields["cc_sq"].width, 9);
        assert_eq!(g.fields["cc"].width, 5);
    }

    #[test]
    fn scope_dump_is_deterministic() {
        let g1 = compiled(&corpus("showcase.tlv")).unwrap();
        let g2 = compiled(&corpus("showcase.tlv")).unwrap();
        assert_eq!(dump_scope_graph(&g1), dump_scope_graph(&g2));
        assert!(!dump_scope_graph(&g1).is_empty());
    }
}

//! Built-in flow component library.
//!
//! Each template contributes scopes, pipelines, channel endpoints, and a flow
//! element describing its handshake machinery. Templates define no
//! transaction logic: user fields arrive by lexical reentrance and are
//! steered, staged, and stored by the element implementations in
//! [`crate::staging`].

use crate::diag::Diagnostic;
use crate::frontend::{InstArg, Instantiation, PathElem};
use crate::scope::{
    ChannelEndpoint, CondRef, Direction, Element, FlowPoint, HandshakeClass, NodeKind, ScopeGraph,
    ScopePath,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgKind {
    Scope,
    Pipe,
    Stage,
    Int,
    Cond,
}

impl ArgKind {
    fn describe(self) -> &'static str {
        match self {
            ArgKind::Scope => "scope path",
            ArgKind::Pipe => "pipeline name",
            ArgKind::Stage => "stage reference",
            ArgKind::Int => "integer",
            ArgKind::Cond => "condition signal",
        }
    }

    fn matches(self, arg: &InstArg) -> bool {
        matches!(
            (self, arg),
            (ArgKind::Scope, InstArg::Scope(_))
                | (ArgKind::Pipe, InstArg::Pipe(_))
                | (ArgKind::Stage, InstArg::Stage(_))
                | (ArgKind::Int, InstArg::Int(_))
                | (ArgKind::Cond, InstArg::Cond { .. })
        )
    }
}

pub struct ComponentDef {
    pub name: &'static str,
    pub kinds: &'static [ArgKind],
    pub summary: &'static str,
}

use ArgKind::*;

pub const COMPONENTS: &[ComponentDef] = &[
    ComponentDef {
        name: "stall_pipeline",
        kinds: &[Scope, Pipe, Int, Int, Scope],
        summary: "Rigid pipeline; every register holds together under one stall signal \
                  or when the exit is refused.",
    },
    ComponentDef {
        name: "bp_pipeline",
        kinds: &[Scope, Pipe, Int, Int, Scope],
        summary: "Ready/valid pipeline with full interlock per stage; ready propagates \
                  combinationally upstream.",
    },
    ComponentDef {
        name: "simple_bypass_fifo",
        kinds: &[Scope, Pipe, Stage, Pipe, Stage, Int, Scope],
        summary: "FIFO that forwards combinationally when empty and its consumer is ready.",
    },
    ComponentDef {
        name: "arb2",
        kinds: &[Scope, Pipe, Stage, Pipe, Stage, Pipe, Stage, Scope],
        summary: "Two-input arbiter with fixed priority to input 1; loser sees ready=0.",
    },
    ComponentDef {
        name: "opportunistic_flow",
        kinds: &[Scope, Pipe, Stage, Pipe, Stage, Cond, Pipe, Stage, Scope],
        summary: "Condition-true transactions take the taken output when it is ready this \
                  cycle, otherwise the main output; condition-false always goes main.",
    },
    ComponentDef {
        name: "simple_ring",
        kinds: &[Scope, Pipe, Stage, Pipe, Stage, Scope],
        summary: "Unidirectional ring, one hop per replicated stop; through-traffic beats \
                  injection; ejects where $dest matches the stop index.",
    },
    ComponentDef {
        name: "router_testbench",
        kinds: &[Scope, Scope, Pipe, Stage, Pipe, Stage],
        summary: "Per-stop random stimulus generator and delivery checker.",
    },
];

pub fn lookup(name: &str) -> Option<&'static ComponentDef> {
    // `_v2`-style suffixes are treated as names for the same template.
    let canonical = name.strip_suffix("_v2").unwrap_or(name);
    COMPONENTS.iter().find(|c| c.name == canonical)
}

fn scope_arg(arg: &InstArg) -> &PathElem {
    match arg {
        InstArg::Scope(e) => e,
        _ => unreachable!("kind-checked"),
    }
}

fn pipe_arg(arg: &InstArg) -> &str {
    match arg {
        InstArg::Pipe(n) => n,
        _ => unreachable!("kind-checked"),
    }
}

fn stage_arg(arg: &InstArg) -> u32 {
    match arg {
        InstArg::Stage(n) => *n,
        _ => unreachable!("kind-checked"),
    }
}

fn int_arg(arg: &InstArg) -> u64 {
    match arg {
        InstArg::Int(v) => *v,
        _ => unreachable!("kind-checked"),
    }
}

fn cond_arg(arg: &InstArg) -> CondRef {
    match arg {
        InstArg::Cond { signal, negated } => CondRef {
            signal: signal.clone(),
            negated: *negated,
        },
        _ => unreachable!("kind-checked"),
    }
}

/// Resolve a scope argument against the instantiation context: an enclosing
/// scope of the same name, an existing child (which may be replicated), or a
/// fresh child scope.
fn resolve_scope(g: &ScopeGraph, at: &ScopePath, elem: &PathElem) -> ScopePath {
    let name = match elem {
        PathElem::Hier(n) | PathElem::HierRep(n) => n.as_str(),
        PathElem::Pipe(_) => unreachable!("kind-checked"),
    };
    for (i, e) in at.0.iter().enumerate().rev() {
        match e {
            PathElem::Hier(n) | PathElem::HierRep(n) if n == name => {
                return ScopePath(at.0[..=i].to_vec());
            }
            _ => {}
        }
    }
    if let Some(node) = g.node_at(at) {
        if node.find_child(name, NodeKind::HierRep).is_some() {
            return at.child(PathElem::HierRep(name.to_string()));
        }
    }
    match elem {
        PathElem::HierRep(_) => at.child(PathElem::HierRep(name.to_string())),
        _ => at.child(PathElem::Hier(name.to_string())),
    }
}

fn register_trans(
    g: &mut ScopeGraph,
    scope: &ScopePath,
    elem: &PathElem,
) -> Result<(), Diagnostic> {
    let name = match elem {
        PathElem::Hier(n) | PathElem::HierRep(n) => n.clone(),
        PathElem::Pipe(_) => unreachable!("kind-checked"),
    };
    g.node_at_mut(&scope.child(PathElem::Hier(name.clone())))?;
    g.trans_scopes.insert((scope.clone(), name));
    Ok(())
}

fn endpoint(
    g: &mut ScopeGraph,
    direction: Direction,
    point: FlowPoint,
    handshake: HandshakeClass,
    instance: usize,
    internal: bool,
) {
    g.endpoints.push(ChannelEndpoint {
        direction,
        point,
        handshake,
        instance,
        internal,
    });
}

fn internal_channel(
    g: &mut ScopeGraph,
    from: FlowPoint,
    to: FlowPoint,
    class: HandshakeClass,
    instance: usize,
) {
    let id = g.channels.len();
    g.channels.push(crate::scope::Channel {
        id,
        producer: ChannelEndpoint {
            direction: Direction::Producer,
            point: from,
            handshake: class,
            instance,
            internal: true,
        },
        consumer: ChannelEndpoint {
            direction: Direction::Consumer,
            point: to,
            handshake: class,
            instance,
            internal: true,
        },
        class,
    });
}

/// Expand one instantiation into the graph.
pub fn expand(
    inst: &Instantiation,
    at: &ScopePath,
    id: usize,
    g: &mut ScopeGraph,
) -> Result<(), Diagnostic> {
    let def = lookup(&inst.component).ok_or_else(|| {
        Diagnostic::new(inst.pos, format!("unknown component '{}'", inst.component))
    })?;
    if inst.args.len() != def.kinds.len() {
        return Err(Diagnostic::new(
            inst.pos,
            format!(
                "{} takes {} arguments, got {}",
                def.name,
                def.kinds.len(),
                inst.args.len()
            ),
        ));
    }
    for (i, (kind, arg)) in def.kinds.iter().zip(&inst.args).enumerate() {
        if !kind.matches(arg) {
            return Err(Diagnostic::new(
                inst.pos,
                format!(
                    "{} argument {} must be a {}, got '{}'",
                    def.name,
                    i + 1,
                    kind.describe(),
                    arg
                ),
            ));
        }
    }
    let a = &inst.args;
    match def.name {
        "stall_pipeline" | "bp_pipeline" => {
            let scope = resolve_scope(g, at, scope_arg(&a[0]));
            let base = pipe_arg(&a[1]).to_string();
            let (first, last) = (int_arg(&a[2]) as u32, int_arg(&a[3]) as u32);
            if last < first {
                return Err(Diagnostic::new(
                    inst.pos,
                    format!("{}: last {last} < first {first}", def.name),
                ));
            }
            register_trans(g, &scope, scope_arg(&a[4]))?;
            for i in first..=last {
                g.node_at_mut(&scope.child(PathElem::Pipe(format!("{base}{i}"))))?;
            }
            let stall = def.name == "stall_pipeline";
            let hop_class = if stall {
                HandshakeClass::FreeFlow
            } else {
                HandshakeClass::ReadyValid
            };
            for i in first..last {
                internal_channel(
                    g,
                    FlowPoint::new(&scope, &format!("{base}{i}"), 1),
                    FlowPoint::new(&scope, &format!("{base}{}", i + 1), 1),
                    hop_class,
                    id,
                );
            }
            endpoint(
                g,
                Direction::Consumer,
                FlowPoint::new(&scope, &format!("{base}{first}"), 1),
                if stall {
                    HandshakeClass::Stall
                } else {
                    HandshakeClass::ReadyValid
                },
                id,
                false,
            );
            endpoint(
                g,
                Direction::Producer,
                FlowPoint::new(&scope, &format!("{base}{last}"), 1),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            let el = if stall {
                let stall_input = format!("{base}_stall");
                if g.stall_inputs.contains(&stall_input) {
                    return Err(Diagnostic::new(
                        inst.pos,
                        format!("duplicate stall input name '{stall_input}'"),
                    ));
                }
                g.stall_inputs.push(stall_input.clone());
                Element::StallChain {
                    scope,
                    base,
                    first,
                    last,
                    stall_input,
                }
            } else {
                Element::RvPipe {
                    scope,
                    base,
                    first,
                    last,
                }
            };
            g.elements.push((id, el));
        }
        "simple_bypass_fifo" => {
            let scope = resolve_scope(g, at, scope_arg(&a[0]));
            let input = FlowPoint::new(&scope, pipe_arg(&a[1]), stage_arg(&a[2]));
            let output = FlowPoint::new(&scope, pipe_arg(&a[3]), stage_arg(&a[4]));
            let depth = int_arg(&a[5]) as u32;
            if depth < 1 {
                return Err(Diagnostic::new(inst.pos, "fifo depth must be at least 1"));
            }
            register_trans(g, &scope, scope_arg(&a[6]))?;
            g.node_at_mut(&scope.child(PathElem::Pipe(input.pipe.clone())))?;
            g.node_at_mut(&scope.child(PathElem::Pipe(output.pipe.clone())))?;
            endpoint(
                g,
                Direction::Consumer,
                input.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            endpoint(
                g,
                Direction::Producer,
                output.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            g.elements.push((
                id,
                Element::Fifo {
                    scope,
                    depth,
                    input,
                    output,
                },
            ));
        }
        "arb2" => {
            let scope = resolve_scope(g, at, scope_arg(&a[0]));
            let in1 = FlowPoint::new(&scope, pipe_arg(&a[1]), stage_arg(&a[2]));
            let in2 = FlowPoint::new(&scope, pipe_arg(&a[3]), stage_arg(&a[4]));
            let out = FlowPoint::new(&scope, pipe_arg(&a[5]), stage_arg(&a[6]));
            register_trans(g, &scope, scope_arg(&a[7]))?;
            for p in [&in1, &in2, &out] {
                g.node_at_mut(&scope.child(PathElem::Pipe(p.pipe.clone())))?;
            }
            endpoint(
                g,
                Direction::Consumer,
                in1.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            endpoint(
                g,
                Direction::Consumer,
                in2.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            endpoint(
                g,
                Direction::Producer,
                out.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            g.elements.push((
                id,
                Element::Arb2 {
                    scope,
                    in1,
                    in2,
                    out,
                },
            ));
        }
        "opportunistic_flow" => {
            let scope = resolve_scope(g, at, scope_arg(&a[0]));
            let input = FlowPoint::new(&scope, pipe_arg(&a[1]), stage_arg(&a[2]));
            let taken = FlowPoint::new(&scope, pipe_arg(&a[3]), stage_arg(&a[4]));
            let cond = cond_arg(&a[5]);
            let main = FlowPoint::new(&scope, pipe_arg(&a[6]), stage_arg(&a[7]));
            register_trans(g, &scope, scope_arg(&a[8]))?;
            for p in [&input, &taken, &main] {
                g.node_at_mut(&scope.child(PathElem::Pipe(p.pipe.clone())))?;
            }
            endpoint(
                g,
                Direction::Consumer,
                input.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            endpoint(
                g,
                Direction::Producer,
                taken.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            endpoint(
                g,
                Direction::Producer,
                main.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            g.elements.push((
                id,
                Element::Opp {
                    scope,
                    input,
                    taken,
                    main,
                    cond,
                },
            ));
        }
        "simple_ring" => {
            let stop_scope = resolve_scope(g, at, scope_arg(&a[0]));
            let replicated = matches!(stop_scope.0.last(), Some(PathElem::HierRep(_)));
            if !replicated {
                return Err(Diagnostic::new(
                    inst.pos,
                    format!(
                        "simple_ring requires a replicated stop scope; {stop_scope} has \
                         unknown replication count"
                    ),
                ));
            }
            let injection = FlowPoint::new(&stop_scope, pipe_arg(&a[1]), stage_arg(&a[2]));
            let ejection = FlowPoint::new(&stop_scope, pipe_arg(&a[3]), stage_arg(&a[4]));
            register_trans(g, &stop_scope, scope_arg(&a[5]))?;
            for p in [&injection, &ejection] {
                g.node_at_mut(&stop_scope.child(PathElem::Pipe(p.pipe.clone())))?;
            }
            endpoint(
                g,
                Direction::Consumer,
                injection.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            endpoint(
                g,
                Direction::Producer,
                ejection.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            internal_channel(
                g,
                injection.clone(),
                ejection.clone(),
                HandshakeClass::RingHop,
                id,
            );
            g.elements.push((
                id,
                Element::Ring {
                    stop_scope,
                    injection,
                    ejection,
                },
            ));
        }
        "router_testbench" => {
            let top = resolve_scope(g, at, scope_arg(&a[0]));
            g.node_at_mut(&top)?;
            let stop_scope = resolve_scope(g, at, scope_arg(&a[1]));
            if !matches!(stop_scope.0.last(), Some(PathElem::HierRep(_))) {
                return Err(Diagnostic::new(
                    inst.pos,
                    "router_testbench requires a replicated stop scope",
                ));
            }
            let entry = FlowPoint::new(&stop_scope, pipe_arg(&a[2]), stage_arg(&a[3]));
            let exit = FlowPoint::new(&stop_scope, pipe_arg(&a[4]), stage_arg(&a[5]));
            for p in [&entry, &exit] {
                g.node_at_mut(&stop_scope.child(PathElem::Pipe(p.pipe.clone())))?;
            }
            endpoint(
                g,
                Direction::Producer,
                entry.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            endpoint(
                g,
                Direction::Consumer,
                exit.clone(),
                HandshakeClass::ReadyValid,
                id,
                false,
            );
            g.elements.push((
                id,
                Element::Testbench {
                    top,
                    stop_scope,
                    entry,
                    exit,
                },
            ));
        }
        _ => unreachable!("lookup covers all components"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_source;
    use crate::scope::{expand_instantiations, merge_reentrant};

    fn build(src: &str) -> Result<ScopeGraph, Diagnostic> {
        let tree = parse_source(src).unwrap();
        let g = merge_reentrant(&tree)?;
        expand_instantiations(g, 4)
    }

    #[test]
    fn stall_pipeline_creates_four_pipes_and_three_hops() {
        let g = build("/top\n   m4+stall_pipeline(/top, |stall, 0, 3, /trans)\n").unwrap();
        let top = g
            .node_at(&ScopePath(vec![PathElem::Hier("top".into())]))
            .unwrap();
        for i in 0..4 {
            assert!(top
                .find_child(&format!("stall{i}"), NodeKind::Pipe)
                .is_some());
        }
        let hops = g
            .channels
            .iter()
            .filter(|c| c.class == HandshakeClass::FreeFlow)
            .count();
        assert_eq!(hops, 3);
        // Entry/exit endpoints stay open (no other component pairs them).
        let open: Vec<_> = g.endpoints.iter().filter(|e| !e.internal).collect();
        assert_eq!(open.len(), 2);
        assert_eq!(g.stall_inputs, vec!["stall_stall".to_string()]);
    }

    #[test]
    fn degenerate_single_hop_pipeline() {
        let g = build("/top\n   m4+stall_pipeline(/top, |p, 0, 0, /trans)\n").unwrap();
        assert_eq!(
            g.channels
                .iter()
                .filter(|c| c.class == HandshakeClass::FreeFlow)
                .count(),
            0
        );
    }

    #[test]
    fn unknown_component_is_rejected() {
        let err = build("/top\n   m4+mystery(/top, |p, 0, 0, /trans)\n").unwrap_err();
        assert!(err.message.contains("unknown component"));
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let err = build("/top\n   m4+arb2(/top, |a, @1, /trans)\n").unwrap_err();
        assert!(err.message.contains("takes 8 arguments"));
    }

    #[test]
    fn argument_kind_mismatch_is_rejected() {
        let err = build("/top\n   m4+stall_pipeline(/top, |p, @1, 3, /trans)\n").unwrap_err();
        assert!(err.message.contains("integer"), "{err}");
    }

    #[test]
    fn reversed_range_is_rejected() {
        let err = build("/top\n   m4+bp_pipeline(/top, |p, 3, 1, /trans)\n").unwrap_err();
        assert!(err.message.contains("last 1 < first 3"));
    }

    #[test]
    fn ring_requires_replicated_scope() {
        let err =
            build("/stop\n   m4+simple_ring(/stop, |in, @1, |out, @1, /trans)\n").unwrap_err();
        assert!(err.message.contains("replicat"));
    }

    #[test]
    fn empty_design_expansion_is_identity() {
        let g = build("|calc\n   @1\n      $a[1:0] = 1;\n").unwrap();
        assert!(g.elements.is_empty());
        assert!(g.channels.is_empty());
        assert!(g.instances.is_empty());
    }

    #[test]
    fn fifo_v2_alias_resolves() {
        let g =
            build("/top\n   m4+simple_bypass_fifo_v2(/top, |a, @1, |b, @1, 4, /trans)\n").unwrap();
        assert!(matches!(g.elements[0].1, Element::Fifo { depth: 4, .. }));
    }

    #[test]
    fn two_producers_collide() {
        let err = build(
            "/top\n   m4+stall_pipeline(/top, |p, 0, 1, /trans)\n   \
             m4+bp_pipeline(/top, |q, 0, 1, /trans)\n   \
             m4+simple_bypass_fifo(/top, |x, @1, |p1, @1, 2, /trans)\n",
        )
        .unwrap_err();
        assert!(err.message.contains("two components claim"), "{err}");
    }
}

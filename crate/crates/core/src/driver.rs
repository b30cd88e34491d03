//! End-to-end compilation pipeline.

use crate::diag::Diagnostic;
use crate::flow::{build_flow_graph, resolve_fields, FlowGraph};
use crate::frontend::{parse_source, ParseTree};
use crate::scope::{expand_instantiations, merge_reentrant, resolve_references, ScopeGraph};
use crate::staging::{build_netlist, plan_stages, BuildOpts, Netlist, StagePlan};

#[derive(Debug, Clone)]
pub struct Compiled {
    pub source: String,
    pub tree: ParseTree,
    pub graph: ScopeGraph,
    pub flow: FlowGraph,
    pub plan: StagePlan,
    pub netlist: Netlist,
}

/// Run the full pipeline on source text.
pub fn compile_source(source: &str, ports: u32, opts: &BuildOpts) -> Result<Compiled, Diagnostic> {
    let tree = parse_source(source)?;
    let graph = merge_reentrant(&tree)?;
    let graph = expand_instantiations(graph, ports)?;
    let graph = resolve_references(graph)?;
    let flow = build_flow_graph(&graph)?;
    let flow = resolve_fields(flow, &graph)?;
    let plan = plan_stages(&graph, &flow)?;
    let netlist = build_netlist(&graph, &flow, opts)?;
    Ok(Compiled {
        source: source.to_string(),
        tree,
        graph,
        flow,
        plan,
        netlist,
    })
}

pub fn compile_file(
    path: &std::path::Path,
    ports: u32,
    opts: &BuildOpts,
) -> Result<Compiled, Diagnostic> {
    let source = std::fs::read_to_string(path)
        .map_err(|e| Diagnostic::global(format!("cannot read {}: {e}", path.display())))?;
    compile_source(&source, ports, opts)
}

//! tlflow: a compiler and cycle-accurate simulator for a transaction-level
//! Verilog subset.
//!
//! The pipeline, from text to waveform:
//!
//! ```text
//! .tlv source
//!   -> frontend::tokenize / frontend::parse          (ParseTree)
//!   -> scope::merge_reentrant                        (ScopeGraph, instantiations collected)
//!   -> scope::expand_instantiations  (flowlib)       (ScopeGraph + elements + channels)
//!   -> scope::resolve_references                     (bound expressions, field demands)
//!   -> flow::build_flow_graph / flow::resolve_fields (FlowGraph, per-field routes)
//!   -> staging::plan_stages / staging::build_netlist (Netlist)
//!   -> verilog::emit_verilog                         (.v text)
//!   -> sim::run / sim::check_equivalence             (traces, transaction records)
//! ```
//!
//! Designs are built from pipelines and library flow components (stall
//! pipelines, ready/valid pipelines, bypass FIFOs, a priority arbiter, an
//! opportunistic splitter, a unidirectional ring, and a router testbench).
//! Transaction logic is ordinary combinational assignment placed anywhere
//! along the flow; the compiler inserts the staging registers and steering
//! muxes needed to carry each field from its producer to its consumers.

pub mod diag;
pub mod frontend;
pub mod scope;
pub mod flowlib;
pub mod flow;
pub mod staging;
pub mod sim;
pub mod verilog;
pub mod driver;

//! Verilog-2001 emission and code-size metrics.
//!
//! One continuous assign per combinational node in topological order, one
//! always block per register group, synchronous reset to zero, all widths
//! explicit. Emission is deterministic: the same netlist gives byte-identical
//! text.

use crate::staging::{Netlist, Node, NodeId, Op};
use std::collections::BTreeMap;
use std::fmt::Write as _;

fn ident(netlist: &Netlist, id: NodeId) -> String {
    let base = &netlist.names[id];
    if base.is_empty() {
        format!("n{id}")
    } else {
        format!("{base}_{id}")
    }
}

fn width_decl(w: u32) -> String {
    format!("[{}:0]", w - 1)
}

/// Emit one synthesizable module for the netlist.
pub fn emit_verilog(netlist: &Netlist, module_name: &str) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "`default_nettype none");
    let _ = writeln!(w, "module {module_name} (");
    let _ = writeln!(w, "  input wire clk,");
    let _ = write!(w, "  input wire reset");
    for (name, node) in &netlist.inputs {
        let _ = write!(
            w,
            ",\n  input wire {} {}",
            width_decl(netlist.width(*node)),
            name
        );
    }
    for (name, node) in &netlist.outputs {
        let _ = write!(
            w,
            ",\n  output wire {} {}",
            width_decl(netlist.width(*node)),
            name
        );
    }
    let _ = writeln!(w, "\n);");
    let _ = writeln!(w);

    // Square-root helper functions, one per input width used.
    let mut sqrt_widths: Vec<u32> = netlist
        .nodes
        .iter()
        .filter_map(|n| match n {
            Node::Comb {
                op: Op::Sqrt, args, ..
            } => Some(netlist.width(args[0])),
            _ => None,
        })
        .collect();
    sqrt_widths.sort();
    sqrt_widths.dedup();
    for iw in sqrt_widths {
        let ow = iw.div_ceil(2);
        let _ = writeln!(w, "  // Restoring integer square root, {iw}-bit radicand.");
        let _ = writeln!(w, "  function [{}:0] isqrt{iw};", ow - 1);
        let _ = writeln!(w, "    input [{}:0] x;", iw - 1);
        let _ = writeln!(w, "    reg [{}:0] xp;", 2 * ow - 1);
        let _ = writeln!(w, "    reg [{}:0] acc;", ow);
        let _ = writeln!(w, "    reg [{}:0] rem;", ow + 2);
        let _ = writeln!(w, "    integer i;");
        let _ = writeln!(w, "    begin");
        let _ = writeln!(w, "      xp = x;");
        let _ = writeln!(w, "      acc = 0;");
        let _ = writeln!(w, "      rem = 0;");
        let _ = writeln!(w, "      for (i = {}; i >= 0; i = i - 1) begin", ow - 1);
        let _ = writeln!(w, "        rem = (rem << 2) | xp[2*i +: 2];");
        let _ = writeln!(w, "        if (rem >= {{acc, 2'b01}}) begin");
        let _ = writeln!(w, "          rem = rem - {{acc, 2'b01}};");
        let _ = writeln!(w, "          acc = (acc << 1) + 1;");
        let _ = writeln!(w, "        end else begin");
        let _ = writeln!(w, "          acc = acc << 1;");
        let _ = writeln!(w, "        end");
        let _ = writeln!(w, "      end");
        let _ = writeln!(w, "      isqrt{iw} = acc[{}:0];", ow - 1);
        let _ = writeln!(w, "    end");
        let _ = writeln!(w, "  endfunction");
        let _ = writeln!(w);
    }

    // Declarations.
    for (id, node) in netlist.nodes.iter().enumerate() {
        match node {
            Node::Comb { width, .. } | Node::Const { width, .. } => {
                let _ = writeln!(w, "  wire {} {};", width_decl(*width), ident(netlist, id));
            }
            Node::Reg { width, .. } => {
                let _ = writeln!(w, "  reg {} {};", width_decl(*width), ident(netlist, id));
            }
            Node::Input { .. } => {}
        }
    }
    let _ = writeln!(w);

    // Input aliases keep expressions uniform.
    for (name, node) in &netlist.inputs {
        let _ = writeln!(
            w,
            "  wire {} {} = {};",
            width_decl(netlist.width(*node)),
            ident(netlist, *node),
            name
        );
    }
    let _ = writeln!(w);

    // Constants.
    for (id, node) in netlist.nodes.iter().enumerate() {
        if let Node::Const { value, width } = node {
            let _ = writeln!(
                w,
                "  assign {} = {width}'d{value};",
                ident(netlist, id)
            );
        }
    }

    // Combinational assigns in evaluation order.
    for &id in &netlist.eval_order {
        let Node::Comb { op, args, width } = &netlist.nodes[id] else {
            continue;
        };
        let a = |k: usize| ident(netlist, args[k]);
        let rhs = match op {
            Op::Buf => {
                let aw = netlist.width(args[0]);
                if aw > *width {
                    format!("{}[{}:0]", a(0), width - 1)
                } else {
                    a(0)
                }
            }
            Op::Not => format!("({} == 0) ? 1'b1 : 1'b0", a(0)),
            Op::And => format!("((|{}) && (|{})) ? 1'b1 : 1'b0", a(0), a(1)),
            Op::Or => format!("((|{}) || (|{})) ? 1'b1 : 1'b0", a(0), a(1)),
            Op::Eq => format!("({} == {}) ? 1'b1 : 1'b0", a(0), a(1)),
            Op::Ne => format!("({} != {}) ? 1'b1 : 1'b0", a(0), a(1)),
            Op::Add => format!("{} + {}", a(0), a(1)),
            Op::Sub => format!("{} - {}", a(0), a(1)),
            Op::Mul => format!("{} * {}", a(0), a(1)),
            Op::Mux => format!("(|{}) ? {} : {}", a(0), a(1), a(2)),
            Op::Sqrt => format!("isqrt{}({})", netlist.width(args[0]), a(0)),
            Op::Slice(hi, lo) => format!("{}[{hi}:{lo}]", a(0)),
        };
        let _ = writeln!(w, "  assign {} = {};", ident(netlist, id), rhs);
    }
    let _ = writeln!(w);

    // Registers, grouped into one clocked block per element instance.
    let mut groups: BTreeMap<&str, Vec<NodeId>> = BTreeMap::new();
    for &r in &netlist.regs {
        if let Node::Reg { group, .. } = &netlist.nodes[r] {
            groups.entry(group.as_str()).or_default().push(r);
        }
    }
    for (group, regs) in groups {
        let _ = writeln!(w, "  // {group}");
        let _ = writeln!(w, "  always @(posedge clk) begin");
        let _ = writeln!(w, "    if (reset) begin");
        for &r in &regs {
            let width = netlist.width(r);
            let _ = writeln!(w, "      {} <= {width}'d0;", ident(netlist, r));
        }
        let _ = writeln!(w, "    end else begin");
        for &r in &regs {
            let Node::Reg { next: Some(n), .. } = &netlist.nodes[r] else {
                continue;
            };
            let _ = writeln!(w, "      {} <= {};", ident(netlist, r), ident(netlist, *n));
        }
        let _ = writeln!(w, "    end");
        let _ = writeln!(w, "  end");
    }
    let _ = writeln!(w);

    for (name, node) in &netlist.outputs {
        let _ = writeln!(w, "  assign {name} = {};", ident(netlist, *node));
    }
    let _ = writeln!(w, "endmodule");
    let _ = writeln!(w, "`default_nettype wire");
    out
}

// ---------------------------------------------------------------------------
// Code-size metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CodeMetrics {
    pub source_chars: usize,
    pub expanded_chars: usize,
    pub verilog_chars: usize,
    pub source_lines: usize,
}

impl CodeMetrics {
    pub fn ratio_expanded(&self) -> Option<f64> {
        if self.source_chars == 0 {
            None
        } else {
            Some(self.expanded_chars as f64 / self.source_chars as f64)
        }
    }

    pub fn ratio_verilog(&self) -> Option<f64> {
        if self.source_chars == 0 {
            None
        } else {
            Some(self.verilog_chars as f64 / self.source_chars as f64)
        }
    }

    /// Aligned-column report plus machine-readable key=value lines.
    pub fn report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10} {:>10}\n", "artifact", "chars"));
        out.push_str(&format!("{:<10} {:>10}\n", "source", self.source_chars));
        out.push_str(&format!("{:<10} {:>10}\n", "expanded", self.expanded_chars));
        out.push_str(&format!("{:<10} {:>10}\n", "verilog", self.verilog_chars));
        match self.ratio_expanded() {
            Some(r) => out.push_str(&format!("ratio expanded/source = {r:.1}\n")),
            None => out.push_str("ratio expanded/source = n/a\n"),
        }
        match self.ratio_verilog() {
            Some(r) => out.push_str(&format!("ratio verilog/source  = {r:.1}\n")),
            None => out.push_str("ratio verilog/source  = n/a\n"),
        }
        out.push_str(&format!("source_chars={}\n", self.source_chars));
        out.push_str(&format!("expanded_chars={}\n", self.expanded_chars));
        out.push_str(&format!("verilog_chars={}\n", self.verilog_chars));
        out.push_str(&format!("source_lines={}\n", self.source_lines));
        out
    }
}

/// Count characters that are neither whitespace nor inside `//` comments.
pub fn count_code_chars(text: &str) -> usize {
    let mut count = 0;
    for line in text.lines() {
        let code = match line.find("//") {
            Some(i) => &line[..i],
            None => line,
        };
        count += code.chars().filter(|c| !c.is_whitespace()).count();
    }
    count
}

/// Count logical (non-blank, non-comment) lines.
pub fn count_logical_lines(text: &str) -> usize {
    text.lines()
        .filter(|line| {
            let code = match line.find("//") {
                Some(i) => &line[..i],
                None => line,
            };
            !code.trim().is_empty()
        })
        .count()
}

/// Character counts for the three artifacts of one compilation.
pub fn measure_code(source: &str, expanded: &str, verilog: &str) -> CodeMetrics {
    CodeMetrics {
        source_chars: count_code_chars(source),
        expanded_chars: count_code_chars(expanded),
        verilog_chars: count_code_chars(verilog),
        source_lines: count_logical_lines(source),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_strings_measure_zero() {
        let m = measure_code("", "", "");
        assert_eq!(m.source_chars, 0);
        assert_eq!(m.expanded_chars, 0);
        assert_eq!(m.verilog_chars, 0);
        assert!(m.ratio_verilog().is_none());
    }

    #[test]
    fn comments_and_whitespace_are_excluded() {
        let m = measure_code("a b // comment\n  c\n", "", "");
        assert_eq!(m.source_chars, 3);
        assert_eq!(m.source_lines, 2);
    }
}

//! Line-oriented text format for circuits.
//!
//! ```text
//! pc <d> <num_nodes>
//! L <id> <var> <p | alpha0,alpha1>
//! S <id> <child,weight> <child,weight> ...
//! P <id> <child> <child> ...
//! ```
//!
//! Node ids are dense and ascending, children precede parents, and the root
//! is the last line, so files are diffable. The writer renumbers nodes into
//! that canonical bottom-up order (orphans are dropped).

use super::{Circuit, CircuitBuilder, CircuitError, LeafParams, Node, NodeId, Var};

impl Circuit {
    pub fn to_text(&self) -> String {
        let order = self.postorder();
        let mut remap = vec![u32::MAX; self.num_nodes()];
        for (new, old) in order.iter().enumerate() {
            remap[old.index()] = new as u32;
        }
        let mut out = String::new();
        out.push_str(&format!("pc {} {}\n", self.num_vars(), order.len()));
        for (new, old) in order.iter().enumerate() {
            match self.node(*old) {
                Node::Leaf { var, params } => {
                    let ptxt = match params {
                        LeafParams::Bernoulli { p } => format!("{p}"),
                        LeafParams::Dirichlet { alpha0, alpha1 } => format!("{alpha0},{alpha1}"),
                    };
                    out.push_str(&format!("L {new} {} {ptxt}\n", var.0));
                }
                Node::Sum { children, weights } => {
                    out.push_str(&format!("S {new}"));
                    for (c, w) in children.iter().zip(weights) {
                        out.push_str(&format!(" {},{w}", remap[c.index()]));
                    }
                    out.push('\n');
                }
                Node::Product { children } => {
                    out.push_str(&format!("P {new}"));
                    for c in children {
                        out.push_str(&format!(" {}", remap[c.index()]));
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    /// Children-before-parents traversal from the root, children in stored
    /// order. For circuits built depth-first this is the identity order.
    fn postorder(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.num_nodes());
        let mut visited = vec![false; self.num_nodes()];
        // Explicit stack to avoid recursion on deep circuits.
        enum Step {
            Enter(NodeId),
            Emit(NodeId),
        }
        let mut stack = vec![Step::Enter(self.root())];
        while let Some(step) = stack.pop() {
            match step {
                Step::Enter(id) => {
                    if visited[id.index()] {
                        continue;
                    }
                    visited[id.index()] = true;
                    stack.push(Step::Emit(id));
                    for &c in self.node(id).children().iter().rev() {
                        stack.push(Step::Enter(c));
                    }
                }
                Step::Emit(id) => order.push(id),
            }
        }
        order
    }

    pub fn from_text(text: &str) -> Result<Circuit, CircuitError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| CircuitError::Format("empty input".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("pc") {
            return Err(CircuitError::Format("missing `pc` header".into()));
        }
        let d: usize = parse_field(parts.next(), "variable count", 1)?;
        let n: usize = parse_field(parts.next(), "node count", 1)?;

        let mut builder = CircuitBuilder::new(d).with_node_cap(n.max(super::DEFAULT_NODE_CAP));
        let mut count = 0usize;
        for (lineno, line) in lines {
            let mut parts = line.split_whitespace();
            let kind = parts
                .next()
                .ok_or_else(|| CircuitError::Format(format!("line {}: empty", lineno + 1)))?;
            let id: usize = parse_field(parts.next(), "node id", lineno + 1)?;
            if id != count {
                return Err(CircuitError::Format(format!(
                    "line {}: expected id {count}, got {id}",
                    lineno + 1
                )));
            }
            match kind {
                "L" => {
                    let var: u16 = parse_field(parts.next(), "leaf variable", lineno + 1)?;
                    let ptxt = parts.next().ok_or_else(|| {
                        CircuitError::Format(format!("line {}: missing leaf parameter", lineno + 1))
                    })?;
                    let params = if let Some((a0, a1)) = ptxt.split_once(',') {
                        LeafParams::Dirichlet {
                            alpha0: parse_float(a0, lineno + 1)?,
                            alpha1: parse_float(a1, lineno + 1)?,
                        }
                    } else {
                        LeafParams::Bernoulli {
                            p: parse_float(ptxt, lineno + 1)?,
                        }
                    };
                    builder.leaf_with(Var(var), params)?;
                }
                "S" => {
                    let mut children = Vec::new();
                    let mut weights = Vec::new();
                    for tok in parts {
                        let (c, w) = tok.split_once(',').ok_or_else(|| {
                            CircuitError::Format(format!(
                                "line {}: sum child needs `id,weight`, got `{tok}`",
                                lineno + 1
                            ))
                        })?;
                        let cid: u32 = c.parse().map_err(|_| {
                            CircuitError::Format(format!("line {}: bad child id `{c}`", lineno + 1))
                        })?;
                        children.push(NodeId(cid));
                        weights.push(parse_float(w, lineno + 1)?);
                    }
                    builder.sum(children, weights)?;
                }
                "P" => {
                    let mut children = Vec::new();
                    for tok in parts {
                        let cid: u32 = tok.parse().map_err(|_| {
                            CircuitError::Format(format!(
                                "line {}: bad child id `{tok}`",
                                lineno + 1
                            ))
                        })?;
                        children.push(NodeId(cid));
                    }
                    builder.product(children)?;
                }
                other => {
                    return Err(CircuitError::Format(format!(
                        "line {}: unknown node kind `{other}`",
                        lineno + 1
                    )))
                }
            }
            count += 1;
        }
        if count != n {
            return Err(CircuitError::Format(format!(
                "header declares {n} nodes, found {count}"
            )));
        }
        builder.build(NodeId(count as u32 - 1))
    }
}

fn parse_field<T: std::str::FromStr>(
    field: Option<&str>,
    what: &str,
    lineno: usize,
) -> Result<T, CircuitError> {
    field
        .ok_or_else(|| CircuitError::Format(format!("line {lineno}: missing {what}")))?
        .parse()
        .map_err(|_| CircuitError::Format(format!("line {lineno}: bad {what}")))
}

fn parse_float(s: &str, lineno: usize) -> Result<f64, CircuitError> {
    s.parse()
        .map_err(|_| CircuitError::Format(format!("line {lineno}: bad float `{s}`")))
}

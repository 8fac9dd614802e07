//! Expression trees for shape arithmetic expressions.
//!
//! A tree combines binary arithmetic over raw variables with placeholders for
//! trainable univariate shape functions. Transparency is validated against
//! three criteria: disjoint variable sets under every binary operator, no
//! shape-of-shape composition, and no numeric constants.

use std::collections::BTreeSet;
use std::fmt;

/// Index of a dataset column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }

    /// Operators emitted by the structure search. Sub is parsed and validated
    /// but never generated.
    pub const SEARCH_SET: [BinaryOp; 3] = [BinaryOp::Add, BinaryOp::Mul, BinaryOp::Div];

    pub fn is_commutative(self) -> bool {
        matches!(self, BinaryOp::Add | BinaryOp::Mul)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprNode {
    Variable(VarId),
    Constant(f64),
    Binary(BinaryOp, Box<ExprNode>, Box<ExprNode>),
    Shape(usize, Box<ExprNode>),
}

impl ExprNode {
    pub fn var(i: usize) -> ExprNode {
        ExprNode::Variable(VarId(i))
    }

    pub fn bin(op: BinaryOp, l: ExprNode, r: ExprNode) -> ExprNode {
        ExprNode::Binary(op, Box::new(l), Box::new(r))
    }

    pub fn shape(id: usize, child: ExprNode) -> ExprNode {
        ExprNode::Shape(id, Box::new(child))
    }

    pub fn size(&self) -> usize {
        match self {
            ExprNode::Variable(_) | ExprNode::Constant(_) => 1,
            ExprNode::Binary(_, l, r) => 1 + l.size() + r.size(),
            ExprNode::Shape(_, c) => 1 + c.size(),
        }
    }

    /// Number of nodes on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        match self {
            ExprNode::Variable(_) | ExprNode::Constant(_) => 1,
            ExprNode::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
            ExprNode::Shape(_, c) => 1 + c.depth(),
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a ExprNode)) {
        f(self);
        match self {
            ExprNode::Binary(_, l, r) => {
                l.for_each(f);
                r.for_each(f);
            }
            ExprNode::Shape(_, c) => c.for_each(f),
            _ => {}
        }
    }
}

/// Set of variables occurring in the subtree of `node`.
pub fn active_vars(node: &ExprNode) -> BTreeSet<VarId> {
    let mut set = BTreeSet::new();
    node.for_each(&mut |n| {
        if let ExprNode::Variable(v) = n {
            set.insert(*v);
        }
    });
    set
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExprTree {
    pub root: ExprNode,
    pub var_names: Vec<String>,
}

impl ExprTree {
    pub fn new(root: ExprNode, var_names: Vec<String>) -> ExprTree {
        ExprTree { root, var_names }
    }

    pub fn n_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn active_vars(&self) -> BTreeSet<VarId> {
        active_vars(&self.root)
    }

    pub fn n_shapes(&self) -> usize {
        let mut n = 0;
        self.root.for_each(&mut |node| {
            if matches!(node, ExprNode::Shape(..)) {
                n += 1;
            }
        });
        n
    }

    /// Reassign shape ids in left-to-right (preorder) order, starting from 0.
    pub fn renumber_shapes(&mut self) {
        let mut next = 0usize;
        renumber(&mut self.root, &mut next);
        fn renumber(node: &mut ExprNode, next: &mut usize) {
            match node {
                ExprNode::Shape(id, c) => {
                    *id = *next;
                    *next += 1;
                    renumber(c, next);
                }
                ExprNode::Binary(_, l, r) => {
                    renumber(l, next);
                    renumber(r, next);
                }
                _ => {}
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuralMetrics {
    pub size: usize,
    pub depth: usize,
    pub n_shapes: usize,
    pub n_binary_ops: usize,
    pub n_leaves: usize,
}

pub fn structural_metrics(tree: &ExprTree) -> StructuralMetrics {
    let mut n_shapes = 0;
    let mut n_binary_ops = 0;
    let mut n_leaves = 0;
    tree.root.for_each(&mut |node| match node {
        ExprNode::Shape(..) => n_shapes += 1,
        ExprNode::Binary(..) => n_binary_ops += 1,
        ExprNode::Variable(_) | ExprNode::Constant(_) => n_leaves += 1,
    });
    StructuralMetrics {
        size: tree.root.size(),
        depth: tree.root.depth(),
        n_shapes,
        n_binary_ops,
        n_leaves,
    }
}

/// Depth and size caps a transparent tree over `n` variables cannot exceed.
pub fn transparency_bounds(n: usize) -> (usize, usize) {
    assert!(n >= 1);
    (2 * n, 4 * n - 2)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateVariable(VarId),
    ShapeOfShape(usize),
    ConstantNode(usize),
    OverlappingBinaryArgs(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateVariable(v) => write!(f, "variable x{} appears more than once", v.0),
            Violation::ShapeOfShape(at) => write!(f, "shape applied to a shape at node {at}"),
            Violation::ConstantNode(at) => write!(f, "numeric constant at node {at}"),
            Violation::OverlappingBinaryArgs(at) => {
                write!(f, "binary operator with overlapping variable sets at node {at}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransparencyVerdict {
    pub is_transparent: bool,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidateOptions {
    /// Treat subtraction as a violation. Off by default: the validator accepts
    /// the full operator set even though the search emits only {+, *, /}.
    pub reject_sub: bool,
}

pub fn validate_transparent(tree: &ExprTree) -> TransparencyVerdict {
    validate_transparent_with(tree, ValidateOptions::default())
}

pub fn validate_transparent_with(tree: &ExprTree, opts: ValidateOptions) -> TransparencyVerdict {
    let mut violations = Vec::new();

    // Global path: each variable at most once; equivalent to node-local
    // disjointness of every binary operator.
    let mut counts = vec![0usize; tree.n_vars().max(1)];
    tree.root.for_each(&mut |node| {
        if let ExprNode::Variable(v) = node {
            if v.0 >= counts.len() {
                counts.resize(v.0 + 1, 0);
            }
            counts[v.0] += 1;
        }
    });
    for (i, &c) in counts.iter().enumerate() {
        if c > 1 {
            violations.push(Violation::DuplicateVariable(VarId(i)));
        }
    }

    // Node-local path: disjoint active variables under every binary operator,
    // plus the shape-of-shape and constant checks, in preorder.
    let mut idx = 0usize;
    walk(&tree.root, &mut idx, &mut violations, opts);
    fn walk(
        node: &ExprNode,
        idx: &mut usize,
        violations: &mut Vec<Violation>,
        opts: ValidateOptions,
    ) -> BTreeSet<VarId> {
        let here = *idx;
        *idx += 1;
        match node {
            ExprNode::Variable(v) => BTreeSet::from([*v]),
            ExprNode::Constant(_) => {
                violations.push(Violation::ConstantNode(here));
                BTreeSet::new()
            }
            ExprNode::Binary(op, l, r) => {
                if opts.reject_sub && *op == BinaryOp::Sub {
                    violations.push(Violation::OverlappingBinaryArgs(here));
                }
                let lv = walk(l, idx, violations, opts);
                let rv = walk(r, idx, violations, opts);
                if lv.intersection(&rv).next().is_some() {
                    violations.push(Violation::OverlappingBinaryArgs(here));
                }
                lv.union(&rv).copied().collect()
            }
            ExprNode::Shape(_, c) => {
                if matches!(**c, ExprNode::Shape(..)) {
                    violations.push(Violation::ShapeOfShape(here));
                }
                walk(c, idx, violations, opts)
            }
        }
    }

    TransparencyVerdict {
        is_transparent: violations.is_empty(),
        violations,
    }
}

/// Verdicts of the two Rule-2 checker paths in isolation: global variable
/// uniqueness, and node-local disjointness of every binary operator.
pub fn rule2_paths(tree: &ExprTree) -> (bool, bool) {
    let verdict = validate_transparent(tree);
    let global_ok = !verdict
        .violations
        .iter()
        .any(|v| matches!(v, Violation::DuplicateVariable(_)));
    let local_ok = !verdict
        .violations
        .iter()
        .any(|v| matches!(v, Violation::OverlappingBinaryArgs(_)));
    (global_ok, local_ok)
}

fn render_node(node: &ExprNode, names: &[String], with_ids: bool, out: &mut String) {
    match node {
        ExprNode::Variable(v) => {
            if v.0 < names.len() {
                out.push_str(&names[v.0]);
            } else {
                out.push_str(&format!("x{}", v.0 + 1));
            }
        }
        ExprNode::Constant(c) => out.push_str(&format!("{c}")),
        ExprNode::Binary(op, l, r) => {
            out.push('(');
            render_node(l, names, with_ids, out);
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            render_node(r, names, with_ids, out);
            out.push(')');
        }
        ExprNode::Shape(id, c) => {
            if with_ids {
                out.push_str(&format!("s{}(", id + 1));
            } else {
                out.push_str("s(");
            }
            render_node(c, names, with_ids, out);
            out.push(')');
        }
    }
}

/// Plain structural rendering: fully parenthesized, shape ids as-is.
pub fn render(tree: &ExprTree) -> String {
    let mut s = String::new();
    render_node(&tree.root, &tree.var_names, true, &mut s);
    s
}

/// The tree in canonical form: children of commutative operators sorted by
/// their shape-id-free rendering, then shape ids renumbered left-to-right.
pub fn canonicalize(tree: &ExprTree) -> ExprTree {
    fn sort_children(node: &mut ExprNode, names: &[String]) -> String {
        match node {
            ExprNode::Binary(op, l, r) => {
                let lk = sort_children(l, names);
                let rk = sort_children(r, names);
                if op.is_commutative() && rk < lk {
                    std::mem::swap(l, r);
                    format!("({rk} {} {lk})", op.symbol())
                } else {
                    format!("({lk} {} {rk})", op.symbol())
                }
            }
            ExprNode::Shape(_, c) => {
                let ck = sort_children(c, names);
                format!("s({ck})")
            }
            _ => {
                let mut s = String::new();
                render_node(node, names, false, &mut s);
                s
            }
        }
    }
    let mut out = tree.clone();
    sort_children(&mut out.root, &tree.var_names);
    out.renumber_shapes();
    out
}

/// Deterministic text form used as the fitness-cache key: structurally
/// equivalent trees up to commutativity and shape relabeling render the same.
pub fn canonical_render(tree: &ExprTree) -> String {
    render(&canonicalize(tree))
}

//! Parsing of textual closed-form equations and the transparent-expressibility
//! checker.
//!
//! The checker runs in two stages: first, every maximal single-variable
//! subtree is collapsed into a shape-function placeholder and the result is
//! validated; second, repeated two-variable sub-expressions (a/b, a-b, a*b,
//! a+b, with x^2/y^2-style power alignment) are substituted by fresh variables
//! and the collapse is retried.

use crate::expr::{
    canonical_render, validate_transparent, BinaryOp, ExprNode, ExprTree, Violation,
};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EqOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FunKind {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
}

impl FunKind {
    pub fn name(self) -> &'static str {
        match self {
            FunKind::Sin => "sin",
            FunKind::Cos => "cos",
            FunKind::Tan => "tan",
            FunKind::Exp => "exp",
            FunKind::Log => "log",
            FunKind::Sqrt => "sqrt",
        }
    }

    fn from_name(s: &str) -> Option<FunKind> {
        Some(match s {
            "sin" => FunKind::Sin,
            "cos" => FunKind::Cos,
            "tan" => FunKind::Tan,
            "exp" => FunKind::Exp,
            "log" => FunKind::Log,
            "sqrt" => FunKind::Sqrt,
            _ => return None,
        })
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            FunKind::Sin => x.sin(),
            FunKind::Cos => x.cos(),
            FunKind::Tan => x.tan(),
            FunKind::Exp => x.exp(),
            FunKind::Log => x.ln(),
            FunKind::Sqrt => x.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EqNode {
    Num(f64),
    Var(String),
    Neg(Box<EqNode>),
    Fun(FunKind, Box<EqNode>),
    Bin(EqOp, Box<EqNode>, Box<EqNode>),
    /// Shape-function placeholder `s<k>(...)`, 1-based in source text.
    ShapeCall(usize, Box<EqNode>),
}

impl EqNode {
    pub fn bin(op: EqOp, l: EqNode, r: EqNode) -> EqNode {
        EqNode::Bin(op, Box::new(l), Box::new(r))
    }

    /// Number of nodes; the term count used as the size of a closed-form
    /// expression (e.g. sin(x+1) has size 4).
    pub fn size(&self) -> usize {
        match self {
            EqNode::Num(_) | EqNode::Var(_) => 1,
            EqNode::Neg(c) | EqNode::Fun(_, c) | EqNode::ShapeCall(_, c) => 1 + c.size(),
            EqNode::Bin(_, l, r) => 1 + l.size() + r.size(),
        }
    }

    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        self.collect_vars(&mut set);
        set
    }

    fn collect_vars(&self, set: &mut BTreeSet<String>) {
        match self {
            EqNode::Var(v) => {
                set.insert(v.clone());
            }
            EqNode::Neg(c) | EqNode::Fun(_, c) | EqNode::ShapeCall(_, c) => c.collect_vars(set),
            EqNode::Bin(_, l, r) => {
                l.collect_vars(set);
                r.collect_vars(set);
            }
            EqNode::Num(_) => {}
        }
    }

    pub fn eval(&self, env: &BTreeMap<String, f64>) -> f64 {
        match self {
            EqNode::Num(c) => *c,
            EqNode::Var(v) => env.get(v).copied().unwrap_or(f64::NAN),
            EqNode::Neg(c) => -c.eval(env),
            EqNode::Fun(f, c) => f.apply(c.eval(env)),
            EqNode::Bin(op, l, r) => {
                let (a, b) = (l.eval(env), r.eval(env));
                match op {
                    EqOp::Add => a + b,
                    EqOp::Sub => a - b,
                    EqOp::Mul => a * b,
                    EqOp::Div => a / b,
                    EqOp::Pow => a.powf(b),
                }
            }
            EqNode::ShapeCall(..) => f64::NAN,
        }
    }

    pub fn render(&self) -> String {
        match self {
            EqNode::Num(c) => format!("{c}"),
            EqNode::Var(v) => v.clone(),
            EqNode::Neg(c) => format!("(-{})", c.render()),
            EqNode::Fun(f, c) => format!("{}({})", f.name(), c.render()),
            EqNode::ShapeCall(k, c) => format!("s{}({})", k, c.render()),
            EqNode::Bin(op, l, r) => {
                let sym = match op {
                    EqOp::Add => "+",
                    EqOp::Sub => "-",
                    EqOp::Mul => "*",
                    EqOp::Div => "/",
                    EqOp::Pow => "^",
                };
                format!("({} {} {})", l.render(), sym, r.render())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParsedEquation {
    pub node: EqNode,
    pub free_vars: Vec<String>,
    pub source_text: String,
}

impl ParsedEquation {
    pub fn size(&self) -> usize {
        self.node.size()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("parse error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown function '{0}'")]
    UnknownFunction(String),
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    End,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0 }
    }

    fn peek_tok(&mut self) -> Result<(Tok, usize), ParseError> {
        let save = self.pos;
        let t = self.next_tok()?;
        let at = self.pos;
        self.pos = save;
        Ok((t.0, at.min(t.1)))
    }

    fn next_tok(&mut self) -> Result<(Tok, usize), ParseError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        if self.pos >= self.src.len() {
            return Ok((Tok::End, start));
        }
        let c = self.src[self.pos] as char;
        match c {
            '+' | '-' | '*' | '/' | '^' => {
                self.pos += 1;
                Ok((Tok::Op(c), start))
            }
            '(' => {
                self.pos += 1;
                Ok((Tok::LParen, start))
            }
            ')' => {
                self.pos += 1;
                Ok((Tok::RParen, start))
            }
            _ if c.is_ascii_digit() || c == '.' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_digit() || self.src[end] == b'.')
                {
                    end += 1;
                }
                // exponent part
                if end < self.src.len() && (self.src[end] == b'e' || self.src[end] == b'E') {
                    let mut e = end + 1;
                    if e < self.src.len() && (self.src[e] == b'+' || self.src[e] == b'-') {
                        e += 1;
                    }
                    if e < self.src.len() && self.src[e].is_ascii_digit() {
                        while e < self.src.len() && self.src[e].is_ascii_digit() {
                            e += 1;
                        }
                        end = e;
                    }
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    pos: start,
                    msg: format!("invalid number '{text}'"),
                })?;
                self.pos = end;
                Ok((Tok::Num(v), start))
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && ((self.src[end] as char).is_ascii_alphanumeric()
                        || self.src[end] == b'_'
                        || self.src[end] == b'.')
                {
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap().to_string();
                self.pos = end;
                Ok((Tok::Ident(text), start))
            }
            _ => Err(ParseError::Syntax { pos: start, msg: format!("unexpected character '{c}'") }),
        }
    }
}

struct Parser<'a> {
    lex: Lexer<'a>,
}

impl<'a> Parser<'a> {
    fn parse_expr(&mut self) -> Result<EqNode, ParseError> {
        self.parse_bin(0)
    }

    // Precedence climbing; levels: 0 = +/-, 1 = */div, 2 = ^, all
    // left-associative. Unary minus binds between */ and ^.
    fn parse_bin(&mut self, level: u8) -> Result<EqNode, ParseError> {
        if level == 2 {
            let mut lhs = self.parse_unary()?;
            loop {
                let (tok, _) = self.lex.peek_tok()?;
                if tok == Tok::Op('^') {
                    self.lex.next_tok()?;
                    let rhs = self.parse_unary()?;
                    lhs = expand_pow(lhs, rhs);
                } else {
                    return Ok(lhs);
                }
            }
        }
        let mut lhs = self.parse_bin(level + 1)?;
        loop {
            let (tok, _) = self.lex.peek_tok()?;
            let op = match (level, &tok) {
                (0, Tok::Op('+')) => EqOp::Add,
                (0, Tok::Op('-')) => EqOp::Sub,
                (1, Tok::Op('*')) => EqOp::Mul,
                (1, Tok::Op('/')) => EqOp::Div,
                _ => return Ok(lhs),
            };
            self.lex.next_tok()?;
            let rhs = self.parse_bin(level + 1)?;
            lhs = EqNode::bin(op, lhs, rhs);
        }
    }

    fn parse_unary(&mut self) -> Result<EqNode, ParseError> {
        let (tok, _) = self.lex.peek_tok()?;
        if tok == Tok::Op('-') {
            self.lex.next_tok()?;
            // unary minus binds tighter than * but looser than ^
            let inner = self.parse_bin(2)?;
            return Ok(EqNode::Neg(Box::new(inner)));
        }
        self.parse_atom()
    }

    fn parse_atom(&mut self) -> Result<EqNode, ParseError> {
        let (tok, pos) = self.lex.next_tok()?;
        match tok {
            Tok::Num(v) => Ok(EqNode::Num(v)),
            Tok::LParen => {
                let inner = self.parse_expr()?;
                let (close, cpos) = self.lex.next_tok()?;
                if close != Tok::RParen {
                    return Err(ParseError::Syntax { pos: cpos, msg: "expected ')'".into() });
                }
                Ok(inner)
            }
            Tok::Ident(name) => {
                let (next, _) = self.lex.peek_tok()?;
                if next == Tok::LParen {
                    self.lex.next_tok()?;
                    let arg = self.parse_expr()?;
                    let (close, cpos) = self.lex.next_tok()?;
                    if close != Tok::RParen {
                        return Err(ParseError::Syntax { pos: cpos, msg: "expected ')'".into() });
                    }
                    if let Some(f) = FunKind::from_name(&name) {
                        Ok(EqNode::Fun(f, Box::new(arg)))
                    } else if let Some(k) = shape_index(&name) {
                        Ok(EqNode::ShapeCall(k, Box::new(arg)))
                    } else {
                        Err(ParseError::UnknownFunction(name))
                    }
                } else if name == "pi" {
                    Ok(EqNode::Num(std::f64::consts::PI))
                } else {
                    Ok(EqNode::Var(name))
                }
            }
            Tok::Op(c) => {
                Err(ParseError::Syntax { pos, msg: format!("unexpected operator '{c}'") })
            }
            Tok::RParen => Err(ParseError::Syntax { pos, msg: "unexpected ')'".into() }),
            Tok::End => Err(ParseError::Syntax { pos, msg: "unexpected end of input".into() }),
        }
    }
}

fn shape_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix('s')?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok()
}

/// x^2 and x^3 become repeated multiplication; other exponents stay as powers.
fn expand_pow(base: EqNode, exp: EqNode) -> EqNode {
    if let EqNode::Num(k) = exp {
        if k == 2.0 {
            return EqNode::bin(EqOp::Mul, base.clone(), base);
        }
        if k == 3.0 {
            return EqNode::bin(EqOp::Mul, EqNode::bin(EqOp::Mul, base.clone(), base.clone()), base);
        }
    }
    EqNode::bin(EqOp::Pow, base, exp)
}

pub fn parse(text: &str) -> Result<ParsedEquation, ParseError> {
    let mut p = Parser { lex: Lexer::new(text) };
    let node = p.parse_expr()?;
    let (end, pos) = p.lex.next_tok()?;
    if end != Tok::End {
        return Err(ParseError::Syntax { pos, msg: "trailing input".into() });
    }
    let free_vars = node.free_vars().into_iter().collect();
    Ok(ParsedEquation { node, free_vars, source_text: text.to_string() })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvertError {
    #[error("construct not expressible as a SHARE tree: {0}")]
    Unsupported(String),
    #[error("unknown variable '{0}'")]
    UnknownVariable(String),
}

/// Convert a parsed fixed-structure expression (arithmetic, variables, and
/// `s<k>(...)` placeholders) into an [`ExprTree`] over the given columns.
pub fn to_expr_tree(eq: &EqNode, var_names: &[String]) -> Result<ExprTree, ConvertError> {
    fn conv(node: &EqNode, names: &[String]) -> Result<ExprNode, ConvertError> {
        match node {
            EqNode::Num(c) => Ok(ExprNode::Constant(*c)),
            EqNode::Var(v) => names
                .iter()
                .position(|n| n == v)
                .map(ExprNode::var)
                .ok_or_else(|| ConvertError::UnknownVariable(v.clone())),
            EqNode::Neg(c) => Ok(ExprNode::bin(
                BinaryOp::Sub,
                ExprNode::Constant(0.0),
                conv(c, names)?,
            )),
            EqNode::Bin(op, l, r) => {
                let o = match op {
                    EqOp::Add => BinaryOp::Add,
                    EqOp::Sub => BinaryOp::Sub,
                    EqOp::Mul => BinaryOp::Mul,
                    EqOp::Div => BinaryOp::Div,
                    EqOp::Pow => return Err(ConvertError::Unsupported("power".into())),
                };
                Ok(ExprNode::bin(o, conv(l, names)?, conv(r, names)?))
            }
            EqNode::ShapeCall(k, c) => Ok(ExprNode::shape(k.saturating_sub(1), conv(c, names)?)),
            EqNode::Fun(f, _) => Err(ConvertError::Unsupported(f.name().into())),
        }
    }
    let root = conv(eq, var_names)?;
    let mut t = ExprTree::new(root, var_names.to_vec());
    t.renumber_shapes();
    Ok(t)
}

/// The result of collapsing univariate subtrees into shape placeholders.
/// `shape_bodies[k]` is the closed-form sub-function of shape k, written over
/// the placeholder variable [`ARG`].
#[derive(Debug, Clone)]
pub struct Collapsed {
    pub tree: ExprTree,
    pub shape_bodies: Vec<EqNode>,
}

/// Placeholder variable naming a shape argument inside a collapsed body.
pub const ARG: &str = "#arg";

fn substitute_var(node: &EqNode, from: &str, to: &EqNode) -> EqNode {
    match node {
        EqNode::Var(v) if v == from => to.clone(),
        EqNode::Num(_) | EqNode::Var(_) => node.clone(),
        EqNode::Neg(c) => EqNode::Neg(Box::new(substitute_var(c, from, to))),
        EqNode::Fun(f, c) => EqNode::Fun(*f, Box::new(substitute_var(c, from, to))),
        EqNode::ShapeCall(k, c) => EqNode::ShapeCall(*k, Box::new(substitute_var(c, from, to))),
        EqNode::Bin(op, l, r) => EqNode::bin(
            *op,
            substitute_var(l, from, to),
            substitute_var(r, from, to),
        ),
    }
}

/// Replace every maximal single-variable subtree by a fresh shape placeholder
/// applied to that variable. Bare variable leaves stay bare; pure-constant
/// subtrees stay as constants (flagged downstream by the validator).
pub fn collapse_univariate(eq: &ParsedEquation) -> Result<Collapsed, ConvertError> {
    let names: Vec<String> = eq.free_vars.clone();
    let mut bodies = Vec::new();

    fn conv(
        node: &EqNode,
        names: &[String],
        bodies: &mut Vec<EqNode>,
    ) -> Result<ExprNode, ConvertError> {
        let vars = node.free_vars();
        if vars.len() == 1 {
            let v = vars.iter().next().unwrap().clone();
            if let EqNode::Var(_) = node {
                let idx = names.iter().position(|n| *n == v).unwrap();
                return Ok(ExprNode::var(idx));
            }
            let idx = names.iter().position(|n| *n == v).unwrap();
            let body = substitute_var(node, &v, &EqNode::Var(ARG.into()));
            bodies.push(body);
            return Ok(ExprNode::shape(bodies.len() - 1, ExprNode::var(idx)));
        }
        if vars.is_empty() {
            // constant subtree; evaluate it to a single node
            return Ok(ExprNode::Constant(node.eval(&BTreeMap::new())));
        }
        match node {
            EqNode::Bin(op, l, r) => {
                let o = match op {
                    EqOp::Add => BinaryOp::Add,
                    EqOp::Sub => BinaryOp::Sub,
                    EqOp::Mul => BinaryOp::Mul,
                    EqOp::Div => BinaryOp::Div,
                    EqOp::Pow => {
                        return Err(ConvertError::Unsupported(
                            "power with variables in both base and exponent".into(),
                        ))
                    }
                };
                Ok(ExprNode::bin(o, conv(l, names, bodies)?, conv(r, names, bodies)?))
            }
            EqNode::Neg(c) => Ok(ExprNode::bin(
                BinaryOp::Sub,
                ExprNode::Constant(0.0),
                conv(c, names, bodies)?,
            )),
            EqNode::Fun(f, c) => {
                // multivariate argument: the named function becomes a shape
                // wrapping the converted child (Rule 1 composition)
                let child = conv(c, names, bodies)?;
                bodies.push(EqNode::Fun(*f, Box::new(EqNode::Var(ARG.into()))));
                Ok(collapse_shape_chain(ExprNode::shape(bodies.len() - 1, child)))
            }
            EqNode::ShapeCall(..) => {
                Err(ConvertError::Unsupported("shape placeholder in closed form".into()))
            }
            EqNode::Num(_) | EqNode::Var(_) => unreachable!(),
        }
    }

    let root = conv(&eq.node, &names, &mut bodies)?;
    let mut tree = ExprTree::new(root, names);
    // bodies are indexed by original shape id; renumbering keeps preorder,
    // so re-sort bodies to match
    let order = shape_order(&tree.root);
    let bodies = order.iter().map(|&i| bodies[i].clone()).collect();
    tree.renumber_shapes();
    Ok(Collapsed { tree, shape_bodies: bodies })
}

fn shape_order(root: &ExprNode) -> Vec<usize> {
    let mut order = Vec::new();
    root.for_each(&mut |n| {
        if let ExprNode::Shape(id, _) = n {
            order.push(*id);
        }
    });
    order
}

/// s_i(s_j(T)) -> s_i'(T) at this node (outer function absorbs the inner).
fn collapse_shape_chain(node: ExprNode) -> ExprNode {
    if let ExprNode::Shape(id, child) = node {
        if let ExprNode::Shape(_, inner) = *child {
            return collapse_shape_chain(ExprNode::Shape(id, inner));
        }
        return ExprNode::Shape(id, child);
    }
    node
}

/// Evaluate a collapsed tree with its shapes bound to the recorded
/// closed-form bodies. Used to verify that collapsing preserves the function.
pub fn eval_collapsed(c: &Collapsed, env: &BTreeMap<String, f64>) -> f64 {
    fn eval(node: &ExprNode, c: &Collapsed, env: &BTreeMap<String, f64>) -> f64 {
        match node {
            ExprNode::Variable(v) => env[&c.tree.var_names[v.0]],
            ExprNode::Constant(k) => *k,
            ExprNode::Binary(op, l, r) => {
                let (a, b) = (eval(l, c, env), eval(r, c, env));
                match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => a / b,
                }
            }
            ExprNode::Shape(id, child) => {
                let x = eval(child, c, env);
                let mut e = BTreeMap::new();
                e.insert(ARG.to_string(), x);
                c.shape_bodies[*id].eval(&e)
            }
        }
    }
    eval(&c.tree.root, c, env)
}

/// A candidate two-variable sub-expression for substitution.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SubCandidate {
    pub op: char,
    pub a: String,
    pub b: String,
}

impl SubCandidate {
    pub fn render(&self) -> String {
        format!("{} {} {}", self.a, self.op, self.b)
    }
}

fn eq_op_char(op: EqOp) -> Option<char> {
    Some(match op {
        EqOp::Add => '+',
        EqOp::Sub => '-',
        EqOp::Mul => '*',
        EqOp::Div => '/',
        EqOp::Pow => return None,
    })
}

/// Does `node` match candidate `(op, a, b)` directly or in power-aligned form
/// (a*a)/(b*b), (a^k)/(b^k)? Returns the matched replacement built over `u`.
fn match_candidate(node: &EqNode, cand: &SubCandidate, u: &str) -> Option<EqNode> {
    let var = |n: &EqNode, name: &str| matches!(n, EqNode::Var(v) if v == name);
    if let EqNode::Bin(op, l, r) = node {
        let c = eq_op_char(*op)?;
        if c == cand.op && var(l, &cand.a) && var(r, &cand.b) {
            return Some(EqNode::Var(u.into()));
        }
        // commutative forms match in either order
        if c == cand.op
            && (c == '+' || c == '*')
            && var(l, &cand.b)
            && var(r, &cand.a)
        {
            return Some(EqNode::Var(u.into()));
        }
        // power alignment: (a*a) op (b*b) -> u*u for op in {/, *}
        if c == cand.op && (c == '/' || c == '*') {
            let sq = |n: &EqNode, name: &str| {
                matches!(n, EqNode::Bin(EqOp::Mul, x, y) if var(x, name) && var(y, name))
            };
            if sq(l, &cand.a) && sq(r, &cand.b) {
                return Some(EqNode::bin(
                    EqOp::Mul,
                    EqNode::Var(u.into()),
                    EqNode::Var(u.into()),
                ));
            }
            // (a^k) op (b^k) with equal numeric exponents
            if let (EqNode::Bin(EqOp::Pow, la, lk), EqNode::Bin(EqOp::Pow, rb, rk)) = (&**l, &**r) {
                if var(la, &cand.a) && var(rb, &cand.b) && lk == rk {
                    if let EqNode::Num(k) = **lk {
                        return Some(EqNode::bin(
                            EqOp::Pow,
                            EqNode::Var(u.into()),
                            EqNode::Num(k),
                        ));
                    }
                }
            }
        }
    }
    None
}

fn count_candidate(node: &EqNode, cand: &SubCandidate) -> usize {
    if match_candidate(node, cand, "#u").is_some() {
        // a match consumes the whole subtree
        return 1;
    }
    match node {
        EqNode::Neg(c) | EqNode::Fun(_, c) | EqNode::ShapeCall(_, c) => count_candidate(c, cand),
        EqNode::Bin(_, l, r) => count_candidate(l, cand) + count_candidate(r, cand),
        _ => 0,
    }
}

fn apply_candidate(node: &EqNode, cand: &SubCandidate, u: &str) -> EqNode {
    if let Some(rep) = match_candidate(node, cand, u) {
        return rep;
    }
    match node {
        EqNode::Neg(c) => EqNode::Neg(Box::new(apply_candidate(c, cand, u))),
        EqNode::Fun(f, c) => EqNode::Fun(*f, Box::new(apply_candidate(c, cand, u))),
        EqNode::ShapeCall(k, c) => EqNode::ShapeCall(*k, Box::new(apply_candidate(c, cand, u))),
        EqNode::Bin(op, l, r) => EqNode::bin(
            *op,
            apply_candidate(l, cand, u),
            apply_candidate(r, cand, u),
        ),
        _ => node.clone(),
    }
}

/// Enumerate candidate sub-expressions occurring at least twice.
fn find_candidates(eq: &ParsedEquation) -> Vec<SubCandidate> {
    let vars = &eq.free_vars;
    let mut out = Vec::new();
    for a in vars {
        for b in vars {
            if a == b {
                continue;
            }
            for op in ['/', '-', '*', '+'] {
                // commutative pairs are counted once, in sorted order
                if (op == '+' || op == '*') && a > b {
                    continue;
                }
                let cand = SubCandidate { op, a: a.clone(), b: b.clone() };
                if count_candidate(&eq.node, &cand) >= 2 {
                    out.push(cand);
                }
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

#[derive(Debug, Clone)]
pub struct CheckerVerdict {
    pub direct_transparent: bool,
    pub transparent_after_rewrites: bool,
    /// (substituted sub-expression, fresh variable name)
    pub applied_substitutions: Vec<(String, String)>,
    pub collapsed_shape_count: usize,
    pub violations: Vec<Violation>,
    /// Canonical text of the transparent form, when one was found.
    pub transparent_form: Option<String>,
}

pub fn check_transparent_expressible(eq: &ParsedEquation, max_substitutions: usize) -> CheckerVerdict {
    // Stage 1: direct collapse.
    let direct = collapse_univariate(eq);
    let (direct_ok, violations, mut shape_count, mut form) = match &direct {
        Ok(c) => {
            let v = validate_transparent(&c.tree);
            let ok = v.is_transparent;
            let n = c.tree.n_shapes();
            let f = if ok { Some(canonical_render(&c.tree)) } else { None };
            (ok, v.violations, n, f)
        }
        Err(_) => (false, Vec::new(), 0, None),
    };
    if direct_ok {
        return CheckerVerdict {
            direct_transparent: true,
            transparent_after_rewrites: true,
            applied_substitutions: Vec::new(),
            collapsed_shape_count: shape_count,
            violations,
            transparent_form: form,
        };
    }

    // Stage 2: bounded substitution of repeated two-variable sub-expressions.
    let candidates = find_candidates(eq);
    let mut applied = Vec::new();
    let mut after_ok = false;
    'outer: for set_size in 1..=max_substitutions.min(candidates.len()) {
        for set in subsets(&candidates, set_size) {
            let mut node = eq.node.clone();
            let mut subs = Vec::new();
            let mut fresh_ok = true;
            for (i, cand) in set.iter().enumerate() {
                let u = format!("u{}", i + 1);
                node = apply_candidate(&node, cand, &u);
                // substitution is only sound if the original variables are
                // fully consumed
                let vars = node.free_vars();
                if vars.contains(&cand.a) || vars.contains(&cand.b) {
                    fresh_ok = false;
                    break;
                }
                subs.push((cand.render(), u));
            }
            if !fresh_ok {
                continue;
            }
            let rewritten = ParsedEquation {
                free_vars: node.free_vars().into_iter().collect(),
                node,
                source_text: eq.source_text.clone(),
            };
            if let Ok(c) = collapse_univariate(&rewritten) {
                let v = validate_transparent(&c.tree);
                if v.is_transparent {
                    after_ok = true;
                    applied = subs;
                    shape_count = c.tree.n_shapes();
                    form = Some(canonical_render(&c.tree));
                    break 'outer;
                }
            }
        }
    }

    CheckerVerdict {
        direct_transparent: false,
        transparent_after_rewrites: after_ok,
        applied_substitutions: applied,
        collapsed_shape_count: shape_count,
        violations,
        transparent_form: form,
    }
}

fn subsets<T: Clone>(items: &[T], k: usize) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let n = items.len();
    fn rec<T: Clone>(items: &[T], k: usize, start: usize, cur: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i].clone());
            rec(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    if k <= n {
        rec(items, k, 0, &mut Vec::new(), &mut out);
    }
    out
}

#[derive(Debug, Clone)]
pub struct CensusEntry {
    pub name: String,
    pub verdict: Option<CheckerVerdict>,
    pub size: usize,
    pub n_vars: usize,
    pub parse_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Census {
    pub n_total: usize,
    pub n_direct: usize,
    pub n_after_rewrites: usize,
    pub entries: Vec<CensusEntry>,
}

/// Run the checker over `name :: expression` lines.
pub fn census(lines: &[(String, String)], max_substitutions: usize) -> Census {
    let mut entries = Vec::new();
    let mut n_direct = 0;
    let mut n_after = 0;
    for (name, text) in lines {
        match parse(text) {
            Ok(eq) => {
                let v = check_transparent_expressible(&eq, max_substitutions);
                if v.direct_transparent {
                    n_direct += 1;
                }
                if v.transparent_after_rewrites {
                    n_after += 1;
                }
                entries.push(CensusEntry {
                    name: name.clone(),
                    size: eq.size(),
                    n_vars: eq.free_vars.len(),
                    verdict: Some(v),
                    parse_error: None,
                });
            }
            Err(e) => entries.push(CensusEntry {
                name: name.clone(),
                verdict: None,
                size: 0,
                n_vars: 0,
                parse_error: Some(e.to_string()),
            }),
        }
    }
    Census { n_total: lines.len(), n_direct, n_after_rewrites: n_after, entries }
}

/// Verdict CSV: name, direct, after_rewrites, substitutions, shape_count,
/// size, prop1_budget_2n, prop1_budget_4n_minus_2.
pub fn census_csv(c: &Census) -> String {
    let mut out = String::from(
        "name,direct,after_rewrites,substitutions,shape_count,size,prop1_budget_2n,prop1_budget_4n_minus_2\n",
    );
    for e in &c.entries {
        match (&e.verdict, &e.parse_error) {
            (Some(v), _) => {
                let subs = v
                    .applied_substitutions
                    .iter()
                    .map(|(expr, u)| format!("{u}={expr}"))
                    .collect::<Vec<_>>()
                    .join("; ");
                let (d2n, d4n) = if e.n_vars >= 1 {
                    let (a, b) = crate::expr::transparency_bounds(e.n_vars);
                    (a.to_string(), b.to_string())
                } else {
                    (String::new(), String::new())
                };
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    e.name,
                    v.direct_transparent,
                    v.transparent_after_rewrites,
                    subs,
                    v.collapsed_shape_count,
                    e.size,
                    d2n,
                    d4n
                ));
            }
            (None, Some(err)) => {
                out.push_str(&format!("{},error,error,{},,,,\n", e.name, err.replace(',', ";")));
            }
            (None, None) => unreachable!(),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_counting_convention() {
        assert_eq!(parse("sin(x+1)").unwrap().size(), 4);
        assert_eq!(parse("r*F*sin(theta)").unwrap().size(), 6);
        let eq = parse("3*sin(x1+x2)").unwrap();
        assert_eq!(eq.free_vars, vec!["x1".to_string(), "x2".to_string()]);
        assert!(matches!(eq.node, EqNode::Bin(EqOp::Mul, ..)));
    }

    #[test]
    fn parse_error_positions() {
        assert!(matches!(parse("x +"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("foo(x)"), Err(ParseError::UnknownFunction(_))));
    }

    #[test]
    fn collapse_single_variable_function() {
        let eq = parse("sin(theta)").unwrap();
        let c = collapse_univariate(&eq).unwrap();
        assert_eq!(crate::expr::render(&c.tree), "s1(theta)");
    }

    #[test]
    fn collapse_torque() {
        let eq = parse("r*F*sin(theta)").unwrap();
        let c = collapse_univariate(&eq).unwrap();
        assert_eq!(c.tree.n_shapes(), 1);
        let v = validate_transparent(&c.tree);
        assert!(v.is_transparent);
    }

    #[test]
    fn torque_direct_transparent() {
        let eq = parse("r*F*sin(theta)").unwrap();
        let v = check_transparent_expressible(&eq, 2);
        assert!(v.direct_transparent);
        assert_eq!(v.collapsed_shape_count, 1);
    }

    #[test]
    fn relativistic_doppler_needs_substitution() {
        let eq = parse("(1+v/c)/sqrt(1-v^2/c^2)*w0").unwrap();
        let v = check_transparent_expressible(&eq, 2);
        assert!(!v.direct_transparent);
        assert!(v.transparent_after_rewrites);
        assert_eq!(v.applied_substitutions.len(), 1);
        assert_eq!(v.applied_substitutions[0].0, "v / c");
    }

    #[test]
    fn distributive_form_fails_both_stages() {
        let eq = parse("x1*x2 + x1*x3").unwrap();
        let v = check_transparent_expressible(&eq, 2);
        assert!(!v.direct_transparent);
        assert!(!v.transparent_after_rewrites);
    }

    #[test]
    fn monotone_in_max_substitutions() {
        let eq = parse("(1+v/c)/sqrt(1-v^2/c^2)*w0").unwrap();
        for k in 1..4 {
            assert!(check_transparent_expressible(&eq, k).transparent_after_rewrites);
        }
    }

    #[test]
    fn collapse_preserves_function() {
        use rand::{Rng, SeedableRng};
        let texts = [
            "r*F*sin(theta)",
            "q*(Ef+B*v*sin(theta))",
            "sqrt((x2-x1)^2+(y2-y1)^2)",
            "n0*exp(-m*g*x/(kb*T))",
            "kappa*(T2-T1)*A/d",
            "exp(-(theta-theta1)^2/(2*sigma^2))/sqrt(2*pi*sigma^2)",
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for text in texts {
            let eq = parse(text).unwrap();
            let c = collapse_univariate(&eq).unwrap();
            for _ in 0..40 {
                let mut env = BTreeMap::new();
                for v in &eq.free_vars {
                    env.insert(v.clone(), rng.gen_range(0.5..2.0));
                }
                let a = eq.node.eval(&env);
                let b = eval_collapsed(&c, &env);
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{text}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn census_over_lines() {
        let lines = vec![
            ("I.18.12".to_string(), "r*F*sin(theta)".to_string()),
            ("I.34.14".to_string(), "(1+v/c)/sqrt(1-v^2/c^2)*w0".to_string()),
            ("bad".to_string(), "x +".to_string()),
        ];
        let c = census(&lines, 2);
        assert_eq!(c.n_total, 3);
        assert_eq!(c.n_direct, 1);
        assert_eq!(c.n_after_rewrites, 2);
        assert!(c.entries[2].parse_error.is_some());
        let empty = census(&[], 2);
        assert_eq!((empty.n_total, empty.n_direct, empty.n_after_rewrites), (0, 0, 0));
    }

    #[test]
    fn fixed_structure_parsing() {
        let eq = parse("s1(E/m + s2(t0))").unwrap();
        let cols = vec!["E".to_string(), "m".to_string(), "t0".to_string()];
        let t = to_expr_tree(&eq.node, &cols).unwrap();
        assert_eq!(t.n_shapes(), 2);
        assert!(validate_transparent(&t).is_transparent);

        let eq = parse("s1(s2(x))").unwrap();
        let t = to_expr_tree(&eq.node, &["x".to_string()]).unwrap();
        assert!(!validate_transparent(&t).is_transparent);
    }
}

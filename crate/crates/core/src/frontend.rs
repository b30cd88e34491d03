//! Tokenizer and indentation-based parser for the source language.
//!
//! The parser preserves the lexical order of scope entries: entering the same
//! scope twice produces two sibling nodes. Fusing those (lexical reentrance)
//! is the job of [`crate::scope::merge_reentrant`], not the parser.

use crate::diag::{Diagnostic, Pos};
use std::fmt;

// ---------------------------------------------------------------------------
// Tokens
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    /// `/name`, with `/name[*]` marking a replicated scope.
    Scope { name: String, replicated: bool },
    /// `|name`
    Pipeline(String),
    /// `@N`
    Stage(u32),
    /// `$name` (including `$ANY`)
    Signal(String),
    /// `/a/b$name` reference into a child scope.
    ChildSignal { path: Vec<String>, name: String },
    /// `#name` replication-index constant.
    IndexRef(String),
    Ident(String),
    Int(u64),
    /// `[hi:lo]`
    BitRange { hi: u32, lo: u32 },
    Op(&'static str),
    Punct(char),
    /// `m4+name` component instantiation keyword.
    Instantiate(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub pos: Pos,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.text)
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    i: usize,
    line: u32,
    col: u32,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            i: 0,
            line: 1,
            col: 1,
        }
    }

    fn pos(&self) -> Pos {
        Pos::new(self.line, self.col)
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.i).copied()
    }

    fn peek2(&self) -> Option<u8> {
        self.src.get(self.i + 1).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek()?;
        self.i += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn ident(&mut self) -> String {
        let start = self.i;
        while matches!(self.peek(), Some(c) if c == b'_' || c.is_ascii_alphanumeric()) {
            self.bump();
        }
        String::from_utf8_lossy(&self.src[start..self.i]).into_owned()
    }

    fn int(&mut self) -> Result<u64, Diagnostic> {
        let pos = self.pos();
        let start = self.i;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.bump();
        }
        let text = std::str::from_utf8(&self.src[start..self.i]).unwrap_or("");
        text.parse::<u64>()
            .map_err(|_| Diagnostic::new(pos, format!("integer literal out of range: {text}")))
    }
}

/// Tokenize source text. Comments (`//` to end of line) and blank lines
/// disappear; each surviving token carries its 1-based line and column, so
/// leading-whitespace depth is recoverable from the first token of a line.
pub fn tokenize(source: &str) -> Result<Vec<Token>, Diagnostic> {
    let mut lx = Lexer::new(source);
    let mut out = Vec::new();
    let mut at_line_start = true;

    while let Some(c) = lx.peek() {
        if at_line_start && c == b'\t' {
            return Err(Diagnostic::new(
                lx.pos(),
                "tab character in leading whitespace (use spaces)",
            ));
        }
        match c {
            b'\n' => {
                lx.bump();
                at_line_start = true;
                continue;
            }
            b' ' | b'\r' | b'\t' => {
                lx.bump();
                continue;
            }
            _ => {}
        }
        at_line_start = false;
        let pos = lx.pos();

        // Comment to end of line.
        if c == b'/' && lx.peek2() == Some(b'/') {
            while let Some(c) = lx.peek() {
                if c == b'\n' {
                    break;
                }
                lx.bump();
            }
            continue;
        }

        let tok = match c {
            b'/' => {
                // `/name`, `/name[*]`, or a chained child reference `/a/b$sig`.
                let mut path = Vec::new();
                let mut replicated = false;
                let mut text = String::new();
                loop {
                    lx.bump(); // '/'
                    text.push('/');
                    let name = lx.ident();
                    if name.is_empty() {
                        return Err(Diagnostic::new(pos, "expected identifier after '/'"));
                    }
                    text.push_str(&name);
                    path.push(name);
                    if lx.peek() == Some(b'[') && lx.peek2() == Some(b'*') {
                        lx.bump();
                        lx.bump();
                        if lx.peek() != Some(b']') {
                            return Err(Diagnostic::new(lx.pos(), "expected ']' after '[*'"));
                        }
                        lx.bump();
                        text.push_str("[*]");
                        replicated = true;
                        break;
                    }
                    if lx.peek() == Some(b'/') && lx.peek2() != Some(b'/') {
                        continue;
                    }
                    break;
                }
                if lx.peek() == Some(b'$') {
                    lx.bump();
                    let name = lx.ident();
                    if name.is_empty() {
                        return Err(Diagnostic::new(lx.pos(), "expected identifier after '$'"));
                    }
                    if replicated {
                        return Err(Diagnostic::new(
                            pos,
                            "replicated scope marker not allowed in a signal reference",
                        ));
                    }
                    text.push('$');
                    text.push_str(&name);
                    Token {
                        kind: TokenKind::ChildSignal { path, name },
                        text,
                        pos,
                    }
                } else {
                    if path.len() != 1 {
                        return Err(Diagnostic::new(
                            pos,
                            "scope entry takes one path element per line",
                        ));
                    }
                    Token {
                        kind: TokenKind::Scope {
                            name: path.pop().unwrap(),
                            replicated,
                        },
                        text,
                        pos,
                    }
                }
            }
            b'|' => {
                lx.bump();
                let name = lx.ident();
                if name.is_empty() {
                    return Err(Diagnostic::new(pos, "expected identifier after '|'"));
                }
                Token {
                    text: format!("|{name}"),
                    kind: TokenKind::Pipeline(name),
                    pos,
                }
            }
            b'@' => {
                lx.bump();
                if !matches!(lx.peek(), Some(c) if c.is_ascii_digit()) {
                    return Err(Diagnostic::new(pos, "expected stage number after '@'"));
                }
                let n = lx.int()?;
                let n = u32::try_from(n)
                    .map_err(|_| Diagnostic::new(pos, "stage number out of range"))?;
                Token {
                    text: format!("@{n}"),
                    kind: TokenKind::Stage(n),
                    pos,
                }
            }
            b'$' => {
                lx.bump();
                let name = lx.ident();
                if name.is_empty() {
                    return Err(Diagnostic::new(pos, "expected identifier after '$'"));
                }
                Token {
                    text: format!("${name}"),
                    kind: TokenKind::Signal(name),
                    pos,
                }
            }
            b'#' => {
                lx.bump();
                let name = lx.ident();
                if name.is_empty() {
                    return Err(Diagnostic::new(pos, "expected identifier after '#'"));
                }
                Token {
                    text: format!("#{name}"),
                    kind: TokenKind::IndexRef(name),
                    pos,
                }
            }
            b'[' => {
                lx.bump();
                if !matches!(lx.peek(), Some(c) if c.is_ascii_digit()) {
                    return Err(Diagnostic::new(pos, "expected bit index after '['"));
                }
                let hi = lx.int()?;
                if lx.peek() != Some(b':') {
                    return Err(Diagnostic::new(lx.pos(), "expected ':' in bit range"));
                }
                lx.bump();
                let lo = lx.int()?;
                if lx.peek() != Some(b']') {
                    return Err(Diagnostic::new(lx.pos(), "expected ']' closing bit range"));
                }
                lx.bump();
                if hi < lo {
                    return Err(Diagnostic::new(
                        pos,
                        format!("bit range [{hi}:{lo}] has hi < lo"),
                    ));
                }
                let hi = u32::try_from(hi)
                    .map_err(|_| Diagnostic::new(pos, "bit index out of range"))?;
                let lo = u32::try_from(lo)
                    .map_err(|_| Diagnostic::new(pos, "bit index out of range"))?;
                Token {
                    text: format!("[{hi}:{lo}]"),
                    kind: TokenKind::BitRange { hi, lo },
                    pos,
                }
            }
            b'0'..=b'9' => {
                let n = lx.int()?;
                Token {
                    text: n.to_string(),
                    kind: TokenKind::Int(n),
                    pos,
                }
            }
            b'm' if lx.src[lx.i..].starts_with(b"m4+") => {
                lx.bump();
                lx.bump();
                lx.bump();
                let name = lx.ident();
                if name.is_empty() {
                    return Err(Diagnostic::new(pos, "expected component name after 'm4+'"));
                }
                Token {
                    text: format!("m4+{name}"),
                    kind: TokenKind::Instantiate(name),
                    pos,
                }
            }
            c if c == b'_' || c.is_ascii_alphabetic() => {
                let name = lx.ident();
                Token {
                    text: name.clone(),
                    kind: TokenKind::Ident(name),
                    pos,
                }
            }
            b'*' if lx.peek2() == Some(b'*') => {
                lx.bump();
                lx.bump();
                Token {
                    text: "**".into(),
                    kind: TokenKind::Op("**"),
                    pos,
                }
            }
            b'=' if lx.peek2() == Some(b'=') => {
                lx.bump();
                lx.bump();
                Token {
                    text: "==".into(),
                    kind: TokenKind::Op("=="),
                    pos,
                }
            }
            b'!' if lx.peek2() == Some(b'=') => {
                lx.bump();
                lx.bump();
                Token {
                    text: "!=".into(),
                    kind: TokenKind::Op("!="),
                    pos,
                }
            }
            b'=' => {
                lx.bump();
                Token {
                    text: "=".into(),
                    kind: TokenKind::Op("="),
                    pos,
                }
            }
            b'+' => {
                lx.bump();
                Token {
                    text: "+".into(),
                    kind: TokenKind::Op("+"),
                    pos,
                }
            }
            b'-' => {
                lx.bump();
                Token {
                    text: "-".into(),
                    kind: TokenKind::Op("-"),
                    pos,
                }
            }
            b'?' => {
                lx.bump();
                Token {
                    text: "?".into(),
                    kind: TokenKind::Op("?"),
                    pos,
                }
            }
            b':' => {
                lx.bump();
                Token {
                    text: ":".into(),
                    kind: TokenKind::Op(":"),
                    pos,
                }
            }
            b'!' => {
                lx.bump();
                Token {
                    text: "!".into(),
                    kind: TokenKind::Op("!"),
                    pos,
                }
            }
            b'(' | b')' | b',' | b';' => {
                lx.bump();
                Token {
                    text: (c as char).to_string(),
                    kind: TokenKind::Punct(c as char),
                    pos,
                }
            }
            other => {
                return Err(Diagnostic::new(
                    pos,
                    format!("illegal character {:?}", other as char),
                ));
            }
        };
        out.push(tok);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parse tree
// ---------------------------------------------------------------------------

/// One element of a scope path.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PathElem {
    Hier(String),
    HierRep(String),
    Pipe(String),
}

impl fmt::Display for PathElem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathElem::Hier(n) => write!(f, "/{n}"),
            PathElem::HierRep(n) => write!(f, "/{n}[*]"),
            PathElem::Pipe(n) => write!(f, "|{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Eq,
    Ne,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    /// `$name`
    Signal(String),
    /// `$ANY`
    Any,
    /// `/a/b$name`
    Child(Vec<String>, String),
    /// `/a$ANY`
    ChildAny(Vec<String>),
    /// `#name`
    Index(String),
    Int(u64),
    /// `expr[hi:lo]`
    Select(Box<Expr>, u32, u32),
    /// `!expr`
    Not(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    /// `cond ? a : b`
    Cond(Box<Expr>, Box<Expr>, Box<Expr>),
    /// `expr ** k`
    Pow(Box<Expr>, u32),
    /// `sqrt(expr)`: integer floor square root.
    Sqrt(Box<Expr>),
}

impl Expr {
    pub fn is_any_ref(&self) -> bool {
        matches!(self, Expr::Any | Expr::ChildAny(_))
    }

    pub fn contains_any(&self) -> bool {
        match self {
            Expr::Any | Expr::ChildAny(_) => true,
            Expr::Signal(_) | Expr::Child(..) | Expr::Index(_) | Expr::Int(_) => false,
            Expr::Select(e, _, _) | Expr::Not(e) | Expr::Pow(e, _) | Expr::Sqrt(e) => {
                e.contains_any()
            }
            Expr::Binary(_, a, b) => a.contains_any() || b.contains_any(),
            Expr::Cond(c, a, b) => c.contains_any() || a.contains_any() || b.contains_any(),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Signal(n) => write!(f, "${n}"),
            Expr::Any => write!(f, "$ANY"),
            Expr::Child(p, n) => {
                for e in p {
                    write!(f, "/{e}")?;
                }
                write!(f, "${n}")
            }
            Expr::ChildAny(p) => {
                for e in p {
                    write!(f, "/{e}")?;
                }
                write!(f, "$ANY")
            }
            Expr::Index(n) => write!(f, "#{n}"),
            Expr::Int(v) => write!(f, "{v}"),
            Expr::Select(e, hi, lo) => write!(f, "{e}[{hi}:{lo}]"),
            Expr::Not(e) => write!(f, "!{e}"),
            Expr::Binary(op, a, b) => write!(f, "{a} {} {b}", op.symbol()),
            Expr::Cond(c, a, b) => write!(f, "{c} ? {a} : {b}"),
            Expr::Pow(e, k) => write!(f, "{e} ** {k}"),
            Expr::Sqrt(e) => write!(f, "sqrt({e})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lhs {
    /// Signal name; `ANY` if `any` is set.
    pub name: String,
    pub any: bool,
    /// Declared width `[hi:lo]`, if present.
    pub range: Option<(u32, u32)>,
}

impl fmt::Display for Lhs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}", self.name)?;
        if let Some((hi, lo)) = self.range {
            write!(f, "[{hi}:{lo}]")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignStmt {
    pub lhs: Lhs,
    pub rhs: Expr,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstArg {
    Scope(PathElem),
    Pipe(String),
    Stage(u32),
    Int(u64),
    /// `$sig` or `!$sig` condition argument.
    Cond { signal: String, negated: bool },
}

impl fmt::Display for InstArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstArg::Scope(e) => write!(f, "{e}"),
            InstArg::Pipe(n) => write!(f, "|{n}"),
            InstArg::Stage(n) => write!(f, "@{n}"),
            InstArg::Int(v) => write!(f, "{v}"),
            InstArg::Cond { signal, negated } => {
                if *negated {
                    write!(f, "!${signal}")
                } else {
                    write!(f, "${signal}")
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instantiation {
    pub component: String,
    pub args: Vec<InstArg>,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseNode {
    Scope {
        elem: PathElem,
        children: Vec<ParseNode>,
        pos: Pos,
    },
    Stage {
        number: u32,
        children: Vec<ParseNode>,
        pos: Pos,
    },
    Assign(AssignStmt),
    Inst(Instantiation),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParseTree {
    pub root: Vec<ParseNode>,
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct LineTokens<'a> {
    indent: u32,
    pos: Pos,
    toks: &'a [Token],
}

fn split_lines(tokens: &[Token]) -> Vec<LineTokens<'_>> {
    let mut lines = Vec::new();
    let mut start = 0;
    while start < tokens.len() {
        let line_no = tokens[start].pos.line;
        let mut end = start;
        while end < tokens.len() && tokens[end].pos.line == line_no {
            end += 1;
        }
        lines.push(LineTokens {
            indent: tokens[start].pos.col - 1,
            pos: tokens[start].pos,
            toks: &tokens[start..end],
        });
        start = end;
    }
    lines
}

struct ExprParser<'a> {
    toks: &'a [Token],
    i: usize,
    end_pos: Pos,
}

impl<'a> ExprParser<'a> {
    fn peek(&self) -> Option<&'a TokenKind> {
        self.toks.get(self.i).map(|t| &t.kind)
    }

    fn pos(&self) -> Pos {
        self.toks.get(self.i).map(|t| t.pos).unwrap_or(self.end_pos)
    }

    fn bump(&mut self) -> Option<&'a Token> {
        let t = self.toks.get(self.i);
        self.i += 1;
        t
    }

    fn expect_punct(&mut self, c: char) -> Result<(), Diagnostic> {
        match self.peek() {
            Some(TokenKind::Punct(p)) if *p == c => {
                self.bump();
                Ok(())
            }
            _ => Err(Diagnostic::new(self.pos(), format!("expected '{c}'"))),
        }
    }

    fn ternary(&mut self) -> Result<Expr, Diagnostic> {
        let cond = self.equality()?;
        if matches!(self.peek(), Some(TokenKind::Op("?"))) {
            self.bump();
            let a = self.ternary()?;
            match self.peek() {
                Some(TokenKind::Op(":")) => {
                    self.bump();
                }
                _ => return Err(Diagnostic::new(self.pos(), "expected ':' in conditional")),
            }
            let b = self.ternary()?;
            return Ok(Expr::Cond(Box::new(cond), Box::new(a), Box::new(b)));
        }
        Ok(cond)
    }

    fn equality(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.additive()?;
        loop {
            let op = match self.peek() {
                Some(TokenKind::Op("==")) => BinOp::Eq,
                Some(TokenKind::Op("!=")) => BinOp::Ne,
                _ => break,
            };
            self.bump();
            let rhs = self.additive()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn additive(&mut self) -> Result<Expr, Diagnostic> {
        let mut lhs = self.power()?;
        loop {
            let op = match self.peek() {
                Some(TokenKind::Op("+")) => BinOp::Add,
                Some(TokenKind::Op("-")) => BinOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.power()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn power(&mut self) -> Result<Expr, Diagnostic> {
        let base = self.unary()?;
        if matches!(self.peek(), Some(TokenKind::Op("**"))) {
            let pos = self.pos();
            self.bump();
            match self.peek() {
                Some(TokenKind::Int(k)) => {
                    let k = *k;
                    self.bump();
                    if k == 0 || k > 8 {
                        return Err(Diagnostic::new(pos, "exponent must be in 1..=8"));
                    }
                    return Ok(Expr::Pow(Box::new(base), k as u32));
                }
                _ => {
                    return Err(Diagnostic::new(
                        pos,
                        "'**' requires an integer literal exponent",
                    ))
                }
            }
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<Expr, Diagnostic> {
        if matches!(self.peek(), Some(TokenKind::Op("!"))) {
            self.bump();
            let e = self.unary()?;
            return Ok(Expr::Not(Box::new(e)));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, Diagnostic> {
        let mut e = self.primary()?;
        while let Some(TokenKind::BitRange { hi, lo }) = self.peek() {
            let (hi, lo) = (*hi, *lo);
            self.bump();
            e = Expr::Select(Box::new(e), hi, lo);
        }
        Ok(e)
    }

    fn primary(&mut self) -> Result<Expr, Diagnostic> {
        let pos = self.pos();
        let tok = self
            .bump()
            .ok_or_else(|| Diagnostic::new(pos, "unexpected end of expression"))?;
        match &tok.kind {
            TokenKind::Signal(n) if n == "ANY" => Ok(Expr::Any),
            TokenKind::Signal(n) => Ok(Expr::Signal(n.clone())),
            TokenKind::ChildSignal { path, name } if name == "ANY" => {
                Ok(Expr::ChildAny(path.clone()))
            }
            TokenKind::ChildSignal { path, name } => Ok(Expr::Child(path.clone(), name.clone())),
            TokenKind::IndexRef(n) => Ok(Expr::Index(n.clone())),
            TokenKind::Int(v) => Ok(Expr::Int(*v)),
            TokenKind::Ident(n) if n == "sqrt" => {
                self.expect_punct('(')?;
                let e = self.ternary()?;
                self.expect_punct(')')?;
                Ok(Expr::Sqrt(Box::new(e)))
            }
            TokenKind::Punct('(') => {
                let e = self.ternary()?;
                self.expect_punct(')')?;
                Ok(e)
            }
            other => Err(Diagnostic::new(
                tok.pos,
                format!("unexpected token in expression: {other:?}"),
            )),
        }
    }
}

/// Positions where `$ANY` may legally appear in a right-hand side: the whole
/// RHS, or a direct operand of the top-level operator. Deeper nesting means
/// the payload would be altered.
fn check_any_placement(rhs: &Expr, pos: Pos) -> Result<(), Diagnostic> {
    let reject_nested = |e: &Expr| -> Result<(), Diagnostic> {
        if e.is_any_ref() {
            Ok(())
        } else if e.contains_any() {
            Err(Diagnostic::new(
                pos,
                "$ANY may only appear as a full operand, not inside a sub-expression",
            ))
        } else {
            Ok(())
        }
    };
    match rhs {
        Expr::Any | Expr::ChildAny(_) => Ok(()),
        Expr::Binary(_, a, b) => {
            reject_nested(a)?;
            reject_nested(b)
        }
        Expr::Cond(c, a, b) => {
            if c.contains_any() {
                return Err(Diagnostic::new(
                    pos,
                    "$ANY may not appear in a condition position",
                ));
            }
            reject_nested(a)?;
            reject_nested(b)
        }
        Expr::Select(e, _, _) | Expr::Not(e) | Expr::Pow(e, _) | Expr::Sqrt(e) => reject_nested(e),
        other => {
            if other.contains_any() {
                Err(Diagnostic::new(
                    pos,
                    "$ANY may only appear as a full operand of the right-hand side",
                ))
            } else {
                Ok(())
            }
        }
    }
}

fn parse_statement_line(line: &LineTokens<'_>) -> Result<ParseNode, Diagnostic> {
    let first = &line.toks[0];
    match &first.kind {
        TokenKind::Scope { name, replicated } => {
            if line.toks.len() > 1 {
                return Err(Diagnostic::new(
                    line.toks[1].pos,
                    "unexpected tokens after scope entry",
                ));
            }
            let elem = if *replicated {
                PathElem::HierRep(name.clone())
            } else {
                PathElem::Hier(name.clone())
            };
            Ok(ParseNode::Scope {
                elem,
                children: Vec::new(),
                pos: first.pos,
            })
        }
        TokenKind::Pipeline(name) => {
            if line.toks.len() > 1 {
                return Err(Diagnostic::new(
                    line.toks[1].pos,
                    "unexpected tokens after pipeline entry",
                ));
            }
            Ok(ParseNode::Scope {
                elem: PathElem::Pipe(name.clone()),
                children: Vec::new(),
                pos: first.pos,
            })
        }
        TokenKind::Stage(n) => {
            if line.toks.len() > 1 {
                return Err(Diagnostic::new(
                    line.toks[1].pos,
                    "unexpected tokens after stage entry",
                ));
            }
            Ok(ParseNode::Stage {
                number: *n,
                children: Vec::new(),
                pos: first.pos,
            })
        }
        TokenKind::Signal(name) => {
            // `$name[hi:lo] = expr ;`
            let mut i = 1;
            let any = name == "ANY";
            let mut range = None;
            if let Some(TokenKind::BitRange { hi, lo }) = line.toks.get(i).map(|t| &t.kind) {
                range = Some((*hi, *lo));
                i += 1;
            }
            match line.toks.get(i).map(|t| &t.kind) {
                Some(TokenKind::Op("=")) => i += 1,
                _ => {
                    return Err(Diagnostic::new(
                        line.pos,
                        "expected '=' in assignment statement",
                    ))
                }
            }
            let rest = &line.toks[i..];
            if rest.last().map(|t| &t.kind) != Some(&TokenKind::Punct(';')) {
                return Err(Diagnostic::new(line.pos, "expected ';' ending assignment"));
            }
            let body = &rest[..rest.len() - 1];
            let mut ep = ExprParser {
                toks: body,
                i: 0,
                end_pos: rest.last().unwrap().pos,
            };
            let rhs = ep.ternary()?;
            if ep.i != body.len() {
                return Err(Diagnostic::new(
                    ep.pos(),
                    "unexpected trailing tokens in expression",
                ));
            }
            check_any_placement(&rhs, line.pos)?;
            if any && range.is_some() {
                return Err(Diagnostic::new(line.pos, "$ANY takes no bit range"));
            }
            Ok(ParseNode::Assign(AssignStmt {
                lhs: Lhs {
                    name: name.clone(),
                    any,
                    range,
                },
                rhs,
                pos: first.pos,
            }))
        }
        TokenKind::Instantiate(component) => {
            let toks = line.toks;
            if toks.get(1).map(|t| &t.kind) != Some(&TokenKind::Punct('(')) {
                return Err(Diagnostic::new(line.pos, "expected '(' after component name"));
            }
            let mut args = Vec::new();
            let mut i = 2;
            if toks.get(i).map(|t| &t.kind) == Some(&TokenKind::Punct(')')) {
                i += 1;
            } else {
                loop {
                    let tok = toks
                        .get(i)
                        .ok_or_else(|| Diagnostic::new(line.pos, "unterminated argument list"))?;
                    let arg = match &tok.kind {
                        TokenKind::Scope { name, replicated } => {
                            i += 1;
                            InstArg::Scope(if *replicated {
                                PathElem::HierRep(name.clone())
                            } else {
                                PathElem::Hier(name.clone())
                            })
                        }
                        TokenKind::Pipeline(n) => {
                            i += 1;
                            InstArg::Pipe(n.clone())
                        }
                        TokenKind::Stage(n) => {
                            i += 1;
                            InstArg::Stage(*n)
                        }
                        TokenKind::Int(v) => {
                            i += 1;
                            InstArg::Int(*v)
                        }
                        TokenKind::Signal(n) => {
                            i += 1;
                            InstArg::Cond {
                                signal: n.clone(),
                                negated: false,
                            }
                        }
                        TokenKind::Op("!") => {
                            let next = toks.get(i + 1).ok_or_else(|| {
                                Diagnostic::new(tok.pos, "expected signal after '!'")
                            })?;
                            match &next.kind {
                                TokenKind::Signal(n) => {
                                    i += 2;
                                    InstArg::Cond {
                                        signal: n.clone(),
                                        negated: true,
                                    }
                                }
                                _ => {
                                    return Err(Diagnostic::new(
                                        tok.pos,
                                        "expected signal after '!' in argument list",
                                    ))
                                }
                            }
                        }
                        other => {
                            return Err(Diagnostic::new(
                                tok.pos,
                                format!("malformed instantiation argument: {other:?}"),
                            ))
                        }
                    };
                    args.push(arg);
                    match toks.get(i).map(|t| &t.kind) {
                        Some(TokenKind::Punct(',')) => i += 1,
                        Some(TokenKind::Punct(')')) => {
                            i += 1;
                            break;
                        }
                        _ => {
                            return Err(Diagnostic::new(
                                toks.get(i).map(|t| t.pos).unwrap_or(line.pos),
                                "expected ',' or ')' in argument list",
                            ))
                        }
                    }
                }
            }
            if i != toks.len() {
                return Err(Diagnostic::new(
                    toks[i].pos,
                    "unexpected tokens after instantiation",
                ));
            }
            Ok(ParseNode::Inst(Instantiation {
                component: component.clone(),
                args,
                pos: first.pos,
            }))
        }
        other => Err(Diagnostic::new(
            first.pos,
            format!("unexpected token at start of line: {other:?}"),
        )),
    }
}

/// Ancestry context threaded through block parsing, for structural checks.
#[derive(Clone, Copy, Default)]
struct Ctx {
    in_pipe: bool,
    in_stage: bool,
    parent_is_pipe: bool,
}

/// Parse one block of lines that share an indent, recursing into deeper
/// blocks as children of the preceding container line.
fn parse_block(
    lines: &[LineTokens<'_>],
    i: &mut usize,
    indent: u32,
    ctx: Ctx,
) -> Result<Vec<ParseNode>, Diagnostic> {
    let mut out: Vec<ParseNode> = Vec::new();
    while *i < lines.len() {
        let line = &lines[*i];
        if line.indent < indent {
            break; // enclosing block continues
        }
        if line.indent > indent {
            // Deeper: children of the node we just produced.
            let Some(prev) = out.last_mut() else {
                return Err(Diagnostic::new(
                    line.pos,
                    format!("inconsistent dedent to column {}", line.indent + 1),
                ));
            };
            match prev {
                ParseNode::Scope { elem, children, .. } => {
                    if !children.is_empty() {
                        return Err(Diagnostic::new(
                            line.pos,
                            format!("inconsistent dedent to column {}", line.indent + 1),
                        ));
                    }
                    let child_ctx = Ctx {
                        in_pipe: ctx.in_pipe || matches!(elem, PathElem::Pipe(_)),
                        in_stage: ctx.in_stage,
                        parent_is_pipe: matches!(elem, PathElem::Pipe(_)),
                    };
                    *children = parse_block(lines, i, line.indent, child_ctx)?;
                }
                ParseNode::Stage { children, .. } => {
                    if !children.is_empty() {
                        return Err(Diagnostic::new(
                            line.pos,
                            format!("inconsistent dedent to column {}", line.indent + 1),
                        ));
                    }
                    let child_ctx = Ctx {
                        in_pipe: ctx.in_pipe,
                        in_stage: true,
                        parent_is_pipe: false,
                    };
                    *children = parse_block(lines, i, line.indent, child_ctx)?;
                }
                ParseNode::Assign(_) | ParseNode::Inst(_) => {
                    return Err(Diagnostic::new(
                        line.pos,
                        "indented line under a statement that takes no children",
                    ));
                }
            }
            continue;
        }

        let node = parse_statement_line(line)?;
        match &node {
            ParseNode::Stage { .. } => {
                if !ctx.parent_is_pipe {
                    return Err(Diagnostic::new(
                        line.pos,
                        "stage entry must sit directly under a pipeline",
                    ));
                }
            }
            ParseNode::Assign(a) => {
                if !ctx.in_stage {
                    return Err(Diagnostic::new(a.pos, "statement outside a stage"));
                }
            }
            ParseNode::Inst(inst) => {
                if ctx.in_pipe || ctx.in_stage {
                    return Err(Diagnostic::new(
                        inst.pos,
                        "instantiation must sit at scope level, not inside a pipeline",
                    ));
                }
            }
            ParseNode::Scope { elem, .. } => match elem {
                PathElem::Pipe(_) => {
                    if ctx.in_pipe {
                        return Err(Diagnostic::new(line.pos, "pipeline inside a pipeline"));
                    }
                }
                PathElem::Hier(_) | PathElem::HierRep(_) => {
                    if ctx.in_pipe && !ctx.in_stage {
                        return Err(Diagnostic::new(
                            line.pos,
                            "hierarchy scope inside a pipeline must sit under a stage",
                        ));
                    }
                }
            },
        }
        out.push(node);
        *i += 1;
    }
    Ok(out)
}

/// Parse a token stream into a [`ParseTree`]. Indentation drives nesting:
/// any strictly greater depth opens one level under the previous line, and a
/// dedent must return to a depth that is still open.
pub fn parse(tokens: &[Token]) -> Result<ParseTree, Diagnostic> {
    let lines = split_lines(tokens);
    if lines.is_empty() {
        return Ok(ParseTree::default());
    }
    let mut i = 0;
    let root = parse_block(&lines, &mut i, lines[0].indent, Ctx::default())?;
    if i != lines.len() {
        return Err(Diagnostic::new(
            lines[i].pos,
            format!("inconsistent dedent to column {}", lines[i].indent + 1),
        ));
    }
    Ok(ParseTree { root })
}

/// Convenience: tokenize + parse.
pub fn parse_source(source: &str) -> Result<ParseTree, Diagnostic> {
    parse(&tokenize(source)?)
}

// ---------------------------------------------------------------------------
// Canonical printer
// ---------------------------------------------------------------------------

const INDENT: &str = "   ";

fn print_node(node: &ParseNode, depth: usize, out: &mut String) {
    let pad = INDENT.repeat(depth);
    match node {
        ParseNode::Scope { elem, children, .. } => {
            out.push_str(&format!("{pad}{elem}\n"));
            for c in children {
                print_node(c, depth + 1, out);
            }
        }
        ParseNode::Stage {
            number, children, ..
        } => {
            out.push_str(&format!("{pad}@{number}\n"));
            for c in children {
                print_node(c, depth + 1, out);
            }
        }
        ParseNode::Assign(a) => {
            out.push_str(&format!("{pad}{} = {};\n", a.lhs, a.rhs));
        }
        ParseNode::Inst(inst) => {
            let args: Vec<String> = inst.args.iter().map(|a| a.to_string()).collect();
            out.push_str(&format!("{pad}m4+{}({})\n", inst.component, args.join(", ")));
        }
    }
}

/// Print a tree with canonical 3-space indentation. Reparsing the output
/// yields a structurally identical tree.
pub fn pretty_print(tree: &ParseTree) -> String {
    let mut out = String::new();
    for n in &tree.root {
        print_node(n, 0, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG_PIPE: &str = "\
|calc
   @1
      $aa_sq[7:0] = $aa[3:0] ** 2;
      $bb_sq[7:0] = $bb[3:0] ** 2;
   @2
      $cc_sq[8:0] = $aa_sq + $bb_sq;
   @3
      $cc[4:0] = sqrt($cc_sq);
";

    #[test]
    fn tokenize_local_compare_line() {
        let toks = tokenize("$local = /trans$dest != #ring_stop;").unwrap();
        let kinds: Vec<&TokenKind> = toks.iter().map(|t| &t.kind).collect();
        assert_eq!(kinds.len(), 6);
        assert_eq!(*kinds[0], TokenKind::Signal("local".into()));
        assert_eq!(*kinds[1], TokenKind::Op("="));
        assert_eq!(
            *kinds[2],
            TokenKind::ChildSignal {
                path: vec!["trans".into()],
                name: "dest".into()
            }
        );
        assert_eq!(*kinds[3], TokenKind::Op("!="));
        assert_eq!(*kinds[4], TokenKind::IndexRef("ring_stop".into()));
        assert_eq!(*kinds[5], TokenKind::Punct(';'));
    }

    #[test]
    fn tokenize_empty_input() {
        assert!(tokenize("").unwrap().is_empty());
    }

    #[test]
    fn tokenize_sqrt_line() {
        let toks = tokenize("$cc[4:0] = sqrt($cc_sq);").unwrap();
        let kinds: Vec<&TokenKind> = toks.iter().map(|t| &t.kind).collect();
        assert_eq!(*kinds[0], TokenKind::Signal("cc".into()));
        assert_eq!(*kinds[1], TokenKind::BitRange { hi: 4, lo: 0 });
        assert_eq!(*kinds[2], TokenKind::Op("="));
        assert_eq!(*kinds[3], TokenKind::Ident("sqrt".into()));
        assert_eq!(*kinds[4], TokenKind::Punct('('));
        assert_eq!(*kinds[5], TokenKind::Signal("cc_sq".into()));
        assert_eq!(*kinds[6], TokenKind::Punct(')'));
        assert_eq!(*kinds[7], TokenKind::Punct(';'));
    }

    #[test]
    fn tokenize_rejects_tab_indent() {
        let err = tokenize("|p\n\t@1\n").unwrap_err();
        assert!(err.message.contains("tab"));
        assert_eq!(err.pos.line, 2);
    }

    #[test]
    fn tokenize_positions_are_strictly_increasing() {
        let toks = tokenize("$a = $b + 1;\n$c = $a - 2;\n").unwrap();
        for w in toks.windows(2) {
            assert!((w[0].pos.line, w[0].pos.col) < (w[1].pos.line, w[1].pos.col));
        }
    }

    #[test]
    fn tokenize_rejects_reversed_bit_range() {
        assert!(tokenize("$a[0:4] = $b;").is_err());
    }

    #[test]
    fn parse_calc_pipeline_structure() {
        let tree = parse_source(FIG_PIPE).unwrap();
        assert_eq!(tree.root.len(), 1);
        let ParseNode::Scope { elem, children, .. } = &tree.root[0] else {
            panic!("expected scope node");
        };
        assert_eq!(*elem, PathElem::Pipe("calc".into()));
        assert_eq!(children.len(), 3);
        let stage_counts: Vec<(u32, usize)> = children
            .iter()
            .map(|c| match c {
                ParseNode::Stage {
                    number, children, ..
                } => (*number, children.len()),
                _ => panic!("expected stage"),
            })
            .collect();
        assert_eq!(stage_counts, vec![(1, 2), (2, 1), (3, 1)]);
    }

    #[test]
    fn parse_preserves_reentrant_entries() {
        let src = "\
|p
   @1
      $a = 1;
|p
   @1
      $b = 2;
";
        let tree = parse_source(src).unwrap();
        assert_eq!(tree.root.len(), 2);
        for n in &tree.root {
            assert!(matches!(
                n,
                ParseNode::Scope {
                    elem: PathElem::Pipe(p),
                    ..
                } if p == "p"
            ));
        }
    }

    #[test]
    fn parse_arb2_instantiation() {
        let src = "m4+arb2(/ring_stop, |ring_out, @4, |bypass, @1, |arb_out, @1, /trans)\n";
        let tree = parse_source(src).unwrap();
        let ParseNode::Inst(inst) = &tree.root[0] else {
            panic!("expected instantiation");
        };
        assert_eq!(inst.component, "arb2");
        assert_eq!(inst.args.len(), 8);
        assert_eq!(inst.args[0], InstArg::Scope(PathElem::Hier("ring_stop".into())));
        assert_eq!(inst.args[1], InstArg::Pipe("ring_out".into()));
        assert_eq!(inst.args[2], InstArg::Stage(4));
        assert_eq!(inst.args[7], InstArg::Scope(PathElem::Hier("trans".into())));
    }

    #[test]
    fn parse_condition_arguments() {
        let src = "m4+opportunistic_flow(/s, |a, @1, |t, @1, !$remote, |m, @1, /trans)\n";
        let tree = parse_source(src).unwrap();
        let ParseNode::Inst(inst) = &tree.root[0] else {
            panic!("expected instantiation");
        };
        assert_eq!(
            inst.args[5],
            InstArg::Cond {
                signal: "remote".into(),
                negated: true
            }
        );
    }

    #[test]
    fn parse_rejects_statement_outside_stage() {
        let err = parse_source("$a = 1;\n").unwrap_err();
        assert!(err.message.contains("outside a stage"));
    }

    #[test]
    fn parse_rejects_inconsistent_dedent() {
        let src = "\
|p
      @1
         $a = 1;
   $b = 2;
";
        let err = parse_source(src).unwrap_err();
        assert!(err.message.contains("dedent"), "{err}");
    }

    #[test]
    fn parse_rejects_any_in_subexpression() {
        let err = parse_source("|p\n   @1\n      $x = ($ANY + 1) - 2;\n").unwrap_err();
        assert!(err.message.contains("$ANY"));
    }

    #[test]
    fn parse_accepts_any_mux() {
        let src = "|p\n   @1\n      $ANY = $select ? /in1$ANY : /in2$ANY;\n";
        let tree = parse_source(src).unwrap();
        let printed = pretty_print(&tree);
        assert!(printed.contains("$ANY = $select ? /in1$ANY : /in2$ANY;"));
    }

    #[test]
    fn round_trip_is_stable() {
        let tree = parse_source(FIG_PIPE).unwrap();
        let printed = pretty_print(&tree);
        let tree2 = parse_source(&printed).unwrap();
        assert_eq!(tree, tree2);
        assert_eq!(printed, pretty_print(&tree2));
    }

    #[test]
    fn never_panics_on_arbitrary_bytes() {
        // Small deterministic fuzz over printable-ish byte soup.
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..500 {
            let len = (next() % 80) as usize;
            let s: String = (0..len)
                .map(|_| {
                    let c = (next() % 96) as u8 + 32;
                    if next() % 13 == 0 {
                        '\n'
                    } else {
                        c as char
                    }
                })
                .collect();
            let _ = parse_source(&s);
        }
    }
}

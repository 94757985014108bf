//! The mini imperative language: AST, rendering with per-token AST tags,
//! and an interpreter used to check that clone transforms preserve meaning.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(non_camel_case_types, clippy::upper_case_acronyms)]
pub enum AstTag {
    FUNC_DEF,
    PARAM,
    IDENT_USE,
    ASSIGN,
    BINOP,
    NUM_LIT,
    IF_KW,
    WHILE_KW,
    CALL,
    RETURN_KW,
    DELIM,
    COMMENT,
}

impl AstTag {
    pub const ALL: [AstTag; 12] = [
        AstTag::FUNC_DEF,
        AstTag::PARAM,
        AstTag::IDENT_USE,
        AstTag::ASSIGN,
        AstTag::BINOP,
        AstTag::NUM_LIT,
        AstTag::IF_KW,
        AstTag::WHILE_KW,
        AstTag::CALL,
        AstTag::RETURN_KW,
        AstTag::DELIM,
        AstTag::COMMENT,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AstTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Mod,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Gt,
    Le,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    /// The operator giving the same truth value with operands swapped.
    pub fn flipped(self) -> Self {
        match self {
            CmpOp::Lt => CmpOp::Gt,
            CmpOp::Gt => CmpOp::Lt,
            CmpOp::Le => CmpOp::Ge,
            CmpOp::Ge => CmpOp::Le,
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Builtin {
    Max,
    Min,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Var(String),
    Num(i64),
    Bin(Box<Expr>, BinOp, Box<Expr>),
    Call(Builtin, Box<Expr>, Box<Expr>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cond {
    pub lhs: Expr,
    pub op: CmpOp,
    pub rhs: Expr,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stmt {
    Assign(String, Expr),
    If(Cond, Vec<Stmt>),
    While(Cond, Vec<Stmt>),
    Return(Expr),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    pub doc: Vec<String>,
    pub name: String,
    pub params: Vec<String>,
    pub body: Vec<Stmt>,
}

pub fn var(name: &str) -> Expr {
    Expr::Var(name.to_string())
}

pub fn num(v: i64) -> Expr {
    Expr::Num(v)
}

pub fn bin(l: Expr, op: BinOp, r: Expr) -> Expr {
    Expr::Bin(Box::new(l), op, Box::new(r))
}

pub fn call(f: Builtin, a: Expr, b: Expr) -> Expr {
    Expr::Call(f, Box::new(a), Box::new(b))
}

pub fn cond(lhs: Expr, op: CmpOp, rhs: Expr) -> Cond {
    Cond { lhs, op, rhs }
}

struct Renderer {
    tokens: Vec<String>,
    tags: Vec<AstTag>,
}

impl Renderer {
    fn emit(&mut self, tok: &str, tag: AstTag) {
        self.tokens.push(tok.to_string());
        self.tags.push(tag);
    }

    fn expr(&mut self, e: &Expr, nested: bool) {
        match e {
            Expr::Var(v) => self.emit(v, AstTag::IDENT_USE),
            Expr::Num(n) => self.emit(&n.to_string(), AstTag::NUM_LIT),
            Expr::Bin(l, op, r) => {
                if nested {
                    self.emit("(", AstTag::DELIM);
                }
                self.expr(l, true);
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Mod => "%",
                };
                self.emit(sym, AstTag::BINOP);
                self.expr(r, true);
                if nested {
                    self.emit(")", AstTag::DELIM);
                }
            }
            Expr::Call(f, a, b) => {
                self.emit(
                    match f {
                        Builtin::Max => "max",
                        Builtin::Min => "min",
                    },
                    AstTag::CALL,
                );
                self.emit("(", AstTag::DELIM);
                self.expr(a, false);
                self.emit(",", AstTag::DELIM);
                self.expr(b, false);
                self.emit(")", AstTag::DELIM);
            }
        }
    }

    fn cond(&mut self, c: &Cond) {
        self.expr(&c.lhs, false);
        let sym = match c.op {
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        };
        self.emit(sym, AstTag::BINOP);
        self.expr(&c.rhs, false);
    }

    fn block(&mut self, body: &[Stmt]) {
        self.emit("{", AstTag::DELIM);
        for s in body {
            self.stmt(s);
        }
        self.emit("}", AstTag::DELIM);
    }

    fn stmt(&mut self, s: &Stmt) {
        match s {
            Stmt::Assign(v, e) => {
                self.emit(v, AstTag::IDENT_USE);
                self.emit("=", AstTag::ASSIGN);
                self.expr(e, false);
                self.emit(";", AstTag::DELIM);
            }
            Stmt::If(c, body) => {
                self.emit("if", AstTag::IF_KW);
                self.cond(c);
                self.block(body);
            }
            Stmt::While(c, body) => {
                self.emit("while", AstTag::WHILE_KW);
                self.cond(c);
                self.block(body);
            }
            Stmt::Return(e) => {
                self.emit("return", AstTag::RETURN_KW);
                self.expr(e, false);
                self.emit(";", AstTag::DELIM);
            }
        }
    }
}

impl Program {
    /// Tokens with one AST tag each: the `#` doc comment, then the function.
    pub fn render(&self) -> (Vec<String>, Vec<AstTag>) {
        let mut r = Renderer {
            tokens: Vec::new(),
            tags: Vec::new(),
        };
        r.emit("#", AstTag::COMMENT);
        for w in &self.doc {
            r.emit(w, AstTag::COMMENT);
        }
        r.emit("def", AstTag::FUNC_DEF);
        r.emit(&self.name, AstTag::FUNC_DEF);
        r.emit("(", AstTag::DELIM);
        for (i, p) in self.params.iter().enumerate() {
            if i > 0 {
                r.emit(",", AstTag::DELIM);
            }
            r.emit(p, AstTag::PARAM);
        }
        r.emit(")", AstTag::DELIM);
        r.block(&self.body);
        (r.tokens, r.tags)
    }

    /// Source text with the doc comment on its own line.
    pub fn source(&self) -> String {
        let (tokens, tags) = self.render();
        let split = tags.iter().position(|&t| t != AstTag::COMMENT).unwrap_or(tokens.len());
        format!("{}\n{}", tokens[..split].join(" "), tokens[split..].join(" "))
    }

    /// Number of `if` and `while` statements, nested ones included.
    pub fn branch_count(&self) -> usize {
        fn walk(body: &[Stmt]) -> usize {
            body.iter()
                .map(|s| match s {
                    Stmt::If(_, b) | Stmt::While(_, b) => 1 + walk(b),
                    _ => 0,
                })
                .sum()
        }
        walk(&self.body)
    }

    /// Runs the function on `args`. Arithmetic wraps; `x % 0` is 0; loops
    /// give up after `fuel` iterations in total and return `None`.
    pub fn eval(&self, args: &[i64], fuel: usize) -> Option<i64> {
        let mut env: HashMap<&str, i64> = self.params.iter().map(String::as_str).zip(args.iter().copied()).collect();
        let mut fuel = fuel;
        match exec(&self.body, &mut env, &mut fuel)? {
            Flow::Return(v) => Some(v),
            Flow::Next => None,
        }
    }
}

enum Flow {
    Next,
    Return(i64),
}

fn eval_expr(e: &Expr, env: &HashMap<&str, i64>) -> Option<i64> {
    Some(match e {
        Expr::Var(v) => *env.get(v.as_str())?,
        Expr::Num(n) => *n,
        Expr::Bin(l, op, r) => {
            let (a, b) = (eval_expr(l, env)?, eval_expr(r, env)?);
            match op {
                BinOp::Add => a.wrapping_add(b),
                BinOp::Sub => a.wrapping_sub(b),
                BinOp::Mul => a.wrapping_mul(b),
                BinOp::Mod => {
                    if b == 0 {
                        0
                    } else {
                        a.wrapping_rem(b)
                    }
                }
            }
        }
        Expr::Call(f, a, b) => {
            let (a, b) = (eval_expr(a, env)?, eval_expr(b, env)?);
            match f {
                Builtin::Max => a.max(b),
                Builtin::Min => a.min(b),
            }
        }
    })
}

fn eval_cond(c: &Cond, env: &HashMap<&str, i64>) -> Option<bool> {
    let (a, b) = (eval_expr(&c.lhs, env)?, eval_expr(&c.rhs, env)?);
    Some(match c.op {
        CmpOp::Lt => a < b,
        CmpOp::Gt => a > b,
        CmpOp::Le => a <= b,
        CmpOp::Ge => a >= b,
        CmpOp::Eq => a == b,
        CmpOp::Ne => a != b,
    })
}

fn exec<'a>(body: &'a [Stmt], env: &mut HashMap<&'a str, i64>, fuel: &mut usize) -> Option<Flow> {
    for s in body {
        match s {
            Stmt::Assign(v, e) => {
                let x = eval_expr(e, env)?;
                env.insert(v.as_str(), x);
            }
            Stmt::If(c, b) => {
                if eval_cond(c, env)? {
                    if let Flow::Return(v) = exec(b, env, fuel)? {
                        return Some(Flow::Return(v));
                    }
                }
            }
            Stmt::While(c, b) => {
                while eval_cond(c, env)? {
                    *fuel = fuel.checked_sub(1)?;
                    if let Flow::Return(v) = exec(b, env, fuel)? {
                        return Some(Flow::Return(v));
                    }
                }
            }
            Stmt::Return(e) => return Some(Flow::Return(eval_expr(e, env)?)),
        }
    }
    Some(Flow::Next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Program {
        Program {
            doc: vec!["count".into(), "up".into()],
            name: "f".into(),
            params: vec!["n".into()],
            body: vec![
                Stmt::Assign("i".into(), num(0)),
                Stmt::While(
                    cond(var("i"), CmpOp::Lt, var("n")),
                    vec![
                        Stmt::If(
                            cond(bin(var("i"), BinOp::Mod, num(2)), CmpOp::Eq, num(0)),
                            vec![Stmt::Assign("i".into(), bin(var("i"), BinOp::Add, num(1)))],
                        ),
                        Stmt::Assign("i".into(), bin(var("i"), BinOp::Add, num(1))),
                    ],
                ),
                Stmt::Return(var("i")),
            ],
        }
    }

    #[test]
    fn render_tags_align_with_tokens() {
        let p = sample();
        let (toks, tags) = p.render();
        assert_eq!(toks.len(), tags.len());
        assert_eq!(&toks[..5], &["#", "count", "up", "def", "f"]);
        assert_eq!(tags[5], AstTag::DELIM);
        assert_eq!(tags[6], AstTag::PARAM);
        let w = toks.iter().position(|t| t == "while").unwrap();
        assert_eq!(tags[w], AstTag::WHILE_KW);
        assert_eq!(p.branch_count(), 2);
        assert!(p.source().starts_with("# count up\ndef f ( n ) {"));
    }

    #[test]
    fn interpreter_runs_loops() {
        let p = sample();
        assert_eq!(p.eval(&[5], 100), Some(6));
        assert_eq!(p.eval(&[0], 100), Some(0));
        assert_eq!(p.eval(&[1000], 10), None);
    }
}

//! A small expression language over predictable states.
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary ('*' unary)*
//! unary := '-' unary | atom
//! atom  := number | name | 't' | '(' expr ')'
//!        | 'ind' '(' expr cmp expr ')' | 'atrisk' '(' name (',' name)* ')'
//! cmp   := '<' | '<=' | '>' | '>=' | '==' | '!='
//! ```
//!
//! Names refer to baseline variables or to the left-limit state of a module.
//! `atrisk(B, C)` is one while every listed module is still at its initial
//! state. `t` is the decision time and is only legal where a context allows
//! it (jump probabilities and intervention rules).

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::events::Alphabet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("expression `{src}`: {msg} at offset {pos}")]
    Syntax { src: String, pos: usize, msg: String },
    #[error("unknown name `{0}`")]
    UnknownName(String),
    #[error("`atrisk` argument `{0}` is not a module")]
    NotAModule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl Cmp {
    fn symbol(self) -> &'static str {
        match self {
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
            Cmp::Eq => "==",
            Cmp::Ne => "!=",
        }
    }

    fn holds(self, a: f64, b: f64) -> bool {
        match self {
            Cmp::Lt => a < b,
            Cmp::Le => a <= b,
            Cmp::Gt => a > b,
            Cmp::Ge => a >= b,
            Cmp::Eq => a == b,
            Cmp::Ne => a != b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Time,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Ind(Box<Expr>, Cmp, Box<Expr>),
    AtRisk(Vec<String>),
}

const RESERVED: [&str; 3] = ["t", "ind", "atrisk"];

pub fn is_reserved(name: &str) -> bool {
    RESERVED.contains(&name)
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ExprError> {
        let tokens = tokenize(src)?;
        let mut p = Parser { src, tokens, pos: 0 };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    /// Names read by the expression (excluding `t`).
    pub fn references(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) | Expr::Time => {}
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(a) => a.collect_refs(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Ind(a, _, b) => {
                a.collect_refs(out);
                b.collect_refs(out);
            }
            Expr::AtRisk(vs) => out.extend(vs.iter().cloned()),
        }
    }

    pub fn uses_time(&self) -> bool {
        match self {
            Expr::Time => true,
            Expr::Num(_) | Expr::Var(_) | Expr::AtRisk(_) => false,
            Expr::Neg(a) => a.uses_time(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Ind(a, _, b) => a.uses_time() || b.uses_time(),
        }
    }

    pub fn compile(&self, alphabet: &Alphabet) -> Result<CompiledExpr, ExprError> {
        Ok(CompiledExpr {
            root: self.lower(alphabet)?,
            source: self.clone(),
        })
    }

    fn lower(&self, alpha: &Alphabet) -> Result<Node, ExprError> {
        let bin = |a: &Expr, b: &Expr| -> Result<(Box<Node>, Box<Node>), ExprError> {
            Ok((Box::new(a.lower(alpha)?), Box::new(b.lower(alpha)?)))
        };
        Ok(match self {
            Expr::Num(x) => Node::Num(*x),
            Expr::Time => Node::Time,
            Expr::Var(v) => Node::Slot(alpha.slot(v).ok_or_else(|| ExprError::UnknownName(v.clone()))?),
            Expr::Neg(a) => Node::Neg(Box::new(a.lower(alpha)?)),
            Expr::Add(a, b) => {
                let (a, b) = bin(a, b)?;
                Node::Add(a, b)
            }
            Expr::Sub(a, b) => {
                let (a, b) = bin(a, b)?;
                Node::Sub(a, b)
            }
            Expr::Mul(a, b) => {
                let (a, b) = bin(a, b)?;
                Node::Mul(a, b)
            }
            Expr::Ind(a, c, b) => {
                let (a, b) = bin(a, b)?;
                Node::Ind(a, *c, b)
            }
            Expr::AtRisk(vs) => {
                let mut slots = Vec::with_capacity(vs.len());
                for v in vs {
                    let j = alpha.module_index(v).ok_or_else(|| ExprError::NotAModule(v.clone()))?;
                    slots.push((alpha.module_slot(j), alpha.modules[j].initial as f64));
                }
                Node::AtRisk(slots)
            }
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) => 2,
            Expr::Neg(..) => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |f: &mut fmt::Formatter<'_>, e: &Expr, min: u8| {
            if e.precedence() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Num(x) => write!(f, "{x}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Time => write!(f, "t"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                wrap(f, a, 3)
            }
            Expr::Add(a, b) => {
                wrap(f, a, 1)?;
                write!(f, " + ")?;
                wrap(f, b, 2)
            }
            Expr::Sub(a, b) => {
                wrap(f, a, 1)?;
                write!(f, " - ")?;
                wrap(f, b, 2)
            }
            Expr::Mul(a, b) => {
                wrap(f, a, 2)?;
                write!(f, "*")?;
                wrap(f, b, 3)
            }
            Expr::Ind(a, c, b) => write!(f, "ind({a} {} {b})", c.symbol()),
            Expr::AtRisk(vs) => write!(f, "atrisk({})", vs.join(", ")),
        }
    }
}

/// Read access to predictable state, indexed by alphabet slot.
pub trait StateView {
    fn slot(&self, slot: usize) -> f64;
    fn time(&self) -> f64;
}

/// A slot vector paired with the evaluation time.
pub struct SlotState<'a> {
    pub values: &'a [f64],
    pub time: f64,
}

impl StateView for SlotState<'_> {
    fn slot(&self, slot: usize) -> f64 {
        self.values[slot]
    }

    fn time(&self) -> f64 {
        self.time
    }
}

/// Records every slot read through it.
pub struct TracingView<'a, V: StateView + ?Sized> {
    inner: &'a V,
    reads: RefCell<BTreeSet<usize>>,
}

impl<'a, V: StateView + ?Sized> TracingView<'a, V> {
    pub fn new(inner: &'a V) -> Self {
        TracingView {
            inner,
            reads: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn into_reads(self) -> BTreeSet<usize> {
        self.reads.into_inner()
    }
}

impl<V: StateView + ?Sized> StateView for TracingView<'_, V> {
    fn slot(&self, slot: usize) -> f64 {
        self.reads.borrow_mut().insert(slot);
        self.inner.slot(slot)
    }

    fn time(&self) -> f64 {
        self.inner.time()
    }
}

/// Hides every slot outside an allowed set: reads of hidden slots yield
/// NaN and are recorded.
pub struct RestrictedView<'a, V: StateView + ?Sized> {
    inner: &'a V,
    allowed: &'a [bool],
    hidden_reads: RefCell<BTreeSet<usize>>,
}

impl<'a, V: StateView + ?Sized> RestrictedView<'a, V> {
    pub fn new(inner: &'a V, allowed: &'a [bool]) -> Self {
        RestrictedView {
            inner,
            allowed,
            hidden_reads: RefCell::new(BTreeSet::new()),
        }
    }

    pub fn hidden_reads(&self) -> BTreeSet<usize> {
        self.hidden_reads.borrow().clone()
    }
}

impl<V: StateView + ?Sized> StateView for RestrictedView<'_, V> {
    fn slot(&self, slot: usize) -> f64 {
        if self.allowed.get(slot).copied().unwrap_or(false) {
            self.inner.slot(slot)
        } else {
            self.hidden_reads.borrow_mut().insert(slot);
            f64::NAN
        }
    }

    fn time(&self) -> f64 {
        self.inner.time()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Slot(usize),
    Time,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Ind(Box<Node>, Cmp, Box<Node>),
    AtRisk(Vec<(usize, f64)>),
}

impl Node {
    fn eval<V: StateView + ?Sized>(&self, s: &V) -> f64 {
        match self {
            Node::Num(x) => *x,
            Node::Slot(k) => s.slot(*k),
            Node::Time => s.time(),
            Node::Neg(a) => -a.eval(s),
            Node::Add(a, b) => a.eval(s) + b.eval(s),
            Node::Sub(a, b) => a.eval(s) - b.eval(s),
            Node::Mul(a, b) => a.eval(s) * b.eval(s),
            Node::Ind(a, c, b) => {
                let (x, y) = (a.eval(s), b.eval(s));
                if x.is_nan() || y.is_nan() {
                    f64::NAN
                } else if c.holds(x, y) {
                    1.0
                } else {
                    0.0
                }
            }
            Node::AtRisk(slots) => {
                let mut out = 1.0;
                for &(k, init) in slots {
                    let v = s.slot(k);
                    if v.is_nan() {
                        return f64::NAN;
                    }
                    if v != init {
                        out = 0.0;
                    }
                }
                out
            }
        }
    }
}

/// An expression resolved against an [`Alphabet`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledExpr {
    root: Node,
    source: Expr,
}

impl CompiledExpr {
    pub fn eval<V: StateView + ?Sized>(&self, state: &V) -> f64 {
        self.root.eval(state)
    }

    pub fn source(&self) -> &Expr {
        &self.source
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(&'static str),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |pos: usize, msg: &str| ExprError::Syntax {
        src: src.to_string(),
        pos,
        msg: msg.to_string(),
    };
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let x: f64 = text.parse().map_err(|_| err(start, "invalid number"))?;
            out.push((start, Tok::Num(x)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(src[start..i].to_string())));
        } else {
            let two = src.get(i..i + 2).unwrap_or("");
            let sym = match two {
                "<=" => Some("<="),
                ">=" => Some(">="),
                "==" => Some("=="),
                "!=" => Some("!="),
                _ => None,
            };
            if let Some(s) = sym {
                out.push((i, Tok::Sym(s)));
                i += 2;
                continue;
            }
            let s = match c {
                '+' => "+",
                '-' => "-",
                '*' => "*",
                '(' => "(",
                ')' => ")",
                ',' => ",",
                '<' => "<",
                '>' => ">",
                _ => return Err(err(i, "unexpected character")),
            };
            out.push((i, Tok::Sym(s)));
            i += 1;
        }
    }
    Ok(out)
}

struct Parser<'a> {
    src: &'a str,
    tokens: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> ExprError {
        let pos = self.tokens.get(self.pos).map(|t| t.0).unwrap_or(self.src.len());
        ExprError::Syntax {
            src: self.src.to_string(),
            pos,
            msg: msg.to_string(),
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.1)
    }

    fn eat(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(s)) if *s == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, sym: &str) -> Result<(), ExprError> {
        if self.eat(sym) {
            Ok(())
        } else {
            Err(self.error(&format!("expected `{sym}`")))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat("+") {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat("-") {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while self.eat("*") {
            lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat("-") {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.atom()
        }
    }

    fn cmp(&mut self) -> Result<Cmp, ExprError> {
        let c = match self.peek() {
            Some(Tok::Sym("<")) => Cmp::Lt,
            Some(Tok::Sym("<=")) => Cmp::Le,
            Some(Tok::Sym(">")) => Cmp::Gt,
            Some(Tok::Sym(">=")) => Cmp::Ge,
            Some(Tok::Sym("==")) => Cmp::Eq,
            Some(Tok::Sym("!=")) => Cmp::Ne,
            _ => return Err(self.error("expected comparison")),
        };
        self.pos += 1;
        Ok(c)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek().cloned() {
            Some(Tok::Num(x)) => {
                self.pos += 1;
                Ok(Expr::Num(x))
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(")")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                match name.as_str() {
                    "t" => Ok(Expr::Time),
                    "ind" => {
                        self.expect("(")?;
                        let a = self.expr()?;
                        let c = self.cmp()?;
                        let b = self.expr()?;
                        self.expect(")")?;
                        Ok(Expr::Ind(Box::new(a), c, Box::new(b)))
                    }
                    "atrisk" => {
                        self.expect("(")?;
                        let mut names = Vec::new();
                        loop {
                            match self.peek().cloned() {
                                Some(Tok::Ident(n)) if !is_reserved(&n) => {
                                    self.pos += 1;
                                    names.push(n);
                                }
                                _ => return Err(self.error("expected module name")),
                            }
                            if !self.eat(",") {
                                break;
                            }
                        }
                        self.expect(")")?;
                        Ok(Expr::AtRisk(names))
                    }
                    _ => Ok(Expr::Var(name)),
                }
            }
            _ => Err(self.error("expected number, name or `(`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{MarkSig, ModuleSig};

    fn alpha() -> Alphabet {
        Alphabet {
            horizon: 1.0,
            baseline: vec!["A".into(), "L".into()],
            modules: vec![
                ModuleSig {
                    name: "B".into(),
                    marks: vec![MarkSig { label: 0, delta: 1 }],
                    initial: 0,
                    schedule: None,
                },
                ModuleSig {
                    name: "C".into(),
                    marks: vec![MarkSig { label: 0, delta: 1 }],
                    initial: 0,
                    schedule: None,
                },
            ],
        }
    }

    fn eval(src: &str, values: &[f64], t: f64) -> f64 {
        let e = Expr::parse(src).unwrap().compile(&alpha()).unwrap();
        e.eval(&SlotState { values, time: t })
    }

    #[test]
    fn arithmetic_and_precedence() {
        let v = [1.0, 0.0, 0.0, 0.0];
        assert!((eval("0.5 - 0.2*A + 0.4*L", &v, 0.0) - 0.3).abs() < 1e-15);
        assert_eq!(eval("2*(A + 1)", &v, 0.0), 4.0);
        assert_eq!(eval("-A*3", &v, 0.0), -3.0);
        assert_eq!(eval("1 - 2 - 3", &v, 0.0), -4.0);
        assert_eq!(eval("1e-1*10", &v, 0.0), 1.0);
    }

    #[test]
    fn indicators_and_time() {
        let v = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(eval("ind(A == 1)", &v, 0.0), 1.0);
        assert_eq!(eval("ind(L > 0)", &v, 0.0), 0.0);
        assert_eq!(eval("ind(t <= 0.25)", &v, 0.25), 1.0);
        assert_eq!(eval("atrisk(B)", &v, 0.0), 1.0);
        assert_eq!(eval("atrisk(B, C)", &v, 0.0), 0.0);
    }

    #[test]
    fn references_exclude_time() {
        let e = Expr::parse("ind(t < 0.5)*L + atrisk(B, C)").unwrap();
        let refs: Vec<_> = e.references().into_iter().collect();
        assert_eq!(refs, vec!["B", "C", "L"]);
        assert!(e.uses_time());
    }

    #[test]
    fn errors() {
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("(1").is_err());
        assert!(Expr::parse("1 $ 2").is_err());
        assert!(Expr::parse("ind(A)").is_err());
        let e = Expr::parse("Z + 1").unwrap();
        assert_eq!(e.compile(&alpha()), Err(ExprError::UnknownName("Z".into())));
        let e = Expr::parse("atrisk(A)").unwrap();
        assert_eq!(e.compile(&alpha()), Err(ExprError::NotAModule("A".into())));
    }

    #[test]
    fn tracing_and_restriction() {
        let e = Expr::parse("A + 2*B").unwrap().compile(&alpha()).unwrap();
        let values = [1.0, 1.0, 3.0, 0.0];
        let base = SlotState {
            values: &values,
            time: 0.0,
        };
        let tracer = TracingView::new(&base);
        assert_eq!(e.eval(&tracer), 7.0);
        assert_eq!(tracer.into_reads().into_iter().collect::<Vec<_>>(), vec![0, 2]);

        let allowed = [true, true, false, true];
        let restricted = RestrictedView::new(&base, &allowed);
        assert!(e.eval(&restricted).is_nan());
        assert_eq!(restricted.hidden_reads().into_iter().collect::<Vec<_>>(), vec![2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_expr() -> impl Strategy<Value = Expr> {
            let leaf = prop_oneof![
                (0u32..100).prop_map(|x| Expr::Num(x as f64 / 8.0)),
                prop_oneof![Just("A"), Just("L"), Just("B")].prop_map(|s| Expr::Var(s.to_string())),
                Just(Expr::Time),
            ];
            leaf.prop_recursive(4, 24, 2, |inner| {
                prop_oneof![
                    (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                    (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                    (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                    inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                    (inner.clone(), inner).prop_map(|(a, b)| Expr::Ind(Box::new(a), Cmp::Le, Box::new(b))),
                ]
            })
        }

        proptest! {
            #[test]
            fn print_parse_is_identity(e in arb_expr()) {
                let printed = e.to_string();
                let parsed = Expr::parse(&printed).unwrap();
                prop_assert_eq!(&parsed, &e);
            }
        }
    }
}

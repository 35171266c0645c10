//! Contract manager: a small composable contract calculus, residuation of
//! lifecycle events, and versioned instrument instances keyed by ISIN.
//!
//! # Text format
//!
//! Contracts are written as s-expressions:
//!
//! ```text
//! spec  := done | fail
//!        | (seq SPEC SPEC) | (both SPEC SPEC) | (choice SPEC SPEC)
//!        | (pay FROM TO "RESOURCE" EXPR DEADLINE)
//!        | (observe AGENT "KEY" PRED DEADLINE)
//! FROM, AGENT := issuer | (party "ID")
//! TO    := issuer | holders | (party "ID")
//! EXPR  := INT | (var "KEY") | (add EXPR EXPR) | (sub EXPR EXPR)
//!        | (mul EXPR EXPR) | (div EXPR EXPR)
//! PRED  := any | (>= INT) | (> INT) | (<= INT) | (< INT) | (= INT)
//! ```
//!
//! `holders` pays pro rata to the instrument holders recorded by the most
//! recent observation that carried a holdings snapshot, excluding the
//! issuer. Integer division; the remainder goes one unit each to holders in
//! descending-balance, then party-id order.
//!
//! # Residuation
//!
//! `Seq` needs its head to match. `Both` tries the left branch first, then
//! the right. `Choice` commits to the leftmost branch that matches.
//! `TimeAdvanced(t)` turns every atom whose deadline is before `t` into
//! `Fail`; an instance whose residual is `Fail` is in default.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{sha256, Digest, PartySigner, Signer};
use crate::identity::IdentityHandle;
use crate::ids::{Isin, ManagerId, PartyId, ResourceId, TxnId};
use crate::ledger::{Draft, EventEnvelope, KeyDirectory, Ledger, LedgerError, Reducer, Storage};
use crate::resource::ResourceEffect;
use crate::txn::{
    check_decision, AtomicTxn, Decision, Effect, LocalStatus, TxnBook, TxnError, TxnHost, TxnLogEvent, Vote,
};

/// Basis-point scale for yields.
pub const YIELD_SCALE: i64 = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PartyRef {
    Issuer,
    Party(PartyId),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Issuer,
    Party(PartyId),
    ProRataHolders,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Lit(i64),
    Var(String),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn var(k: &str) -> Expr {
        Expr::Var(k.to_owned())
    }

    /// `None` on an unbound variable, overflow or division by zero.
    pub fn eval(&self, bindings: &BTreeMap<String, i64>) -> Option<i64> {
        match self {
            Expr::Lit(v) => Some(*v),
            Expr::Var(k) => bindings.get(k).copied(),
            Expr::Add(a, b) => a.eval(bindings)?.checked_add(b.eval(bindings)?),
            Expr::Sub(a, b) => a.eval(bindings)?.checked_sub(b.eval(bindings)?),
            Expr::Mul(a, b) => a.eval(bindings)?.checked_mul(b.eval(bindings)?),
            Expr::Div(a, b) => a.eval(bindings)?.checked_div(b.eval(bindings)?),
        }
    }

    fn vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Var(k) => {
                out.insert(k.clone());
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.vars(out);
                b.vars(out);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Ge,
    Gt,
    Le,
    Lt,
    Eq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pred {
    Any,
    Cmp(CmpOp, i64),
}

impl Pred {
    pub fn holds(&self, v: i64) -> bool {
        match *self {
            Pred::Any => true,
            Pred::Cmp(CmpOp::Ge, t) => v >= t,
            Pred::Cmp(CmpOp::Gt, t) => v > t,
            Pred::Cmp(CmpOp::Le, t) => v <= t,
            Pred::Cmp(CmpOp::Lt, t) => v < t,
            Pred::Cmp(CmpOp::Eq, t) => v == t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Payment {
    pub from: PartyRef,
    pub to: Target,
    pub resource: ResourceId,
    pub amount: Expr,
    pub deadline: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    pub agent: PartyRef,
    pub key: String,
    pub pred: Pred,
    pub deadline: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Spec {
    Done,
    Fail,
    Payment(Payment),
    Observation(Observation),
    Seq(Arc<Spec>, Arc<Spec>),
    Both(Arc<Spec>, Arc<Spec>),
    Choice(Arc<Spec>, Arc<Spec>),
}

impl Spec {
    pub fn done() -> Arc<Spec> {
        Arc::new(Spec::Done)
    }

    pub fn fail() -> Arc<Spec> {
        Arc::new(Spec::Fail)
    }

    pub fn pay(from: PartyRef, to: Target, resource: &str, amount: Expr, deadline: u64) -> Arc<Spec> {
        Arc::new(Spec::Payment(Payment { from, to, resource: ResourceId::from(resource), amount, deadline }))
    }

    pub fn observe(agent: PartyRef, key: &str, pred: Pred, deadline: u64) -> Arc<Spec> {
        Arc::new(Spec::Observation(Observation { agent, key: key.to_owned(), pred, deadline }))
    }

    pub fn seq(a: Arc<Spec>, b: Arc<Spec>) -> Arc<Spec> {
        match (&*a, &*b) {
            (Spec::Done, _) => b,
            (Spec::Fail, _) | (_, Spec::Fail) => Spec::fail(),
            (_, Spec::Done) => a,
            _ => Arc::new(Spec::Seq(a, b)),
        }
    }

    pub fn both(a: Arc<Spec>, b: Arc<Spec>) -> Arc<Spec> {
        match (&*a, &*b) {
            (Spec::Fail, _) | (_, Spec::Fail) => Spec::fail(),
            (Spec::Done, _) => b,
            (_, Spec::Done) => a,
            _ => Arc::new(Spec::Both(a, b)),
        }
    }

    pub fn choice(a: Arc<Spec>, b: Arc<Spec>) -> Arc<Spec> {
        match (&*a, &*b) {
            (Spec::Done, _) | (_, Spec::Done) => Spec::done(),
            (Spec::Fail, _) => b,
            (_, Spec::Fail) => a,
            _ => Arc::new(Spec::Choice(a, b)),
        }
    }

    fn deadlines(&self) -> Option<(u64, u64)> {
        match self {
            Spec::Done | Spec::Fail => None,
            Spec::Payment(p) => Some((p.deadline, p.deadline)),
            Spec::Observation(o) => Some((o.deadline, o.deadline)),
            Spec::Seq(a, b) | Spec::Both(a, b) | Spec::Choice(a, b) => match (a.deadlines(), b.deadlines()) {
                (Some((l1, h1)), Some((l2, h2))) => Some((l1.min(l2), h1.max(h2))),
                (x, None) | (None, x) => x,
            },
        }
    }

    /// Checks variable scoping and deadline ordering. Returns the variables
    /// bound on every completion path.
    fn check(&self, bound: &BTreeSet<String>) -> Result<BTreeSet<String>, String> {
        match self {
            Spec::Done | Spec::Fail => Ok(bound.clone()),
            Spec::Observation(o) => {
                if bound.contains(&o.key) {
                    return Err(format!("observation key `{}` bound twice", o.key));
                }
                let mut out = bound.clone();
                out.insert(o.key.clone());
                Ok(out)
            }
            Spec::Payment(p) => {
                let mut vars = BTreeSet::new();
                p.amount.vars(&mut vars);
                if let Some(v) = vars.iter().find(|v| !bound.contains(*v)) {
                    return Err(format!("amount uses `{v}` before it is observed"));
                }
                Ok(bound.clone())
            }
            Spec::Seq(a, b) => {
                if let (Some((_, hi)), Some((lo, _))) = (a.deadlines(), b.deadlines()) {
                    if lo <= hi {
                        return Err(format!("deadline {lo} does not follow {hi} in sequence"));
                    }
                }
                let after = a.check(bound)?;
                b.check(&after)
            }
            Spec::Both(a, b) => {
                let x = a.check(bound)?;
                let y = b.check(bound)?;
                if x.intersection(&y).any(|k| !bound.contains(k)) {
                    return Err("parallel branches bind the same key".into());
                }
                Ok(x.union(&y).cloned().collect())
            }
            Spec::Choice(a, b) => {
                let x = a.check(bound)?;
                let y = b.check(bound)?;
                Ok(x.intersection(&y).cloned().collect())
            }
        }
    }

    pub fn well_formed(&self) -> Result<(), String> {
        self.check(&BTreeSet::new()).map(|_| ())
    }

    /// Replaces atoms whose deadline lies before `t` by `Fail`.
    pub fn expire(self: &Arc<Spec>, t: u64) -> Arc<Spec> {
        match &**self {
            Spec::Done | Spec::Fail => self.clone(),
            Spec::Payment(p) if p.deadline < t => Spec::fail(),
            Spec::Observation(o) if o.deadline < t => Spec::fail(),
            Spec::Payment(_) | Spec::Observation(_) => self.clone(),
            Spec::Seq(a, b) => Spec::seq(a.expire(t), b.expire(t)),
            Spec::Both(a, b) => Spec::both(a.expire(t), b.expire(t)),
            Spec::Choice(a, b) => Spec::choice(a.expire(t), b.expire(t)),
        }
    }

    /// Discharges payments whose amount is now known to be zero.
    pub fn settle_zero(self: &Arc<Spec>, bindings: &BTreeMap<String, i64>) -> Arc<Spec> {
        match &**self {
            Spec::Payment(p) if p.amount.eval(bindings) == Some(0) => Spec::done(),
            Spec::Done | Spec::Fail | Spec::Payment(_) | Spec::Observation(_) => self.clone(),
            Spec::Seq(a, b) => Spec::seq(a.settle_zero(bindings), b.settle_zero(bindings)),
            Spec::Both(a, b) => Spec::both(a.settle_zero(bindings), b.settle_zero(bindings)),
            Spec::Choice(a, b) => Spec::choice(a.settle_zero(bindings), b.settle_zero(bindings)),
        }
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn parse(text: &str) -> Result<Arc<Spec>, ContractError> {
        sexpr::parse_spec(text).map_err(ContractError::MalformedSpec)
    }
}

impl fmt::Display for PartyRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartyRef::Issuer => f.write_str("issuer"),
            PartyRef::Party(p) => write!(f, "(party {})", quote(p.as_str())),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Issuer => f.write_str("issuer"),
            Target::Party(p) => write!(f, "(party {})", quote(p.as_str())),
            Target::ProRataHolders => f.write_str("holders"),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(v) => write!(f, "{v}"),
            Expr::Var(k) => write!(f, "(var {})", quote(k)),
            Expr::Add(a, b) => write!(f, "(add {a} {b})"),
            Expr::Sub(a, b) => write!(f, "(sub {a} {b})"),
            Expr::Mul(a, b) => write!(f, "(mul {a} {b})"),
            Expr::Div(a, b) => write!(f, "(div {a} {b})"),
        }
    }
}

impl fmt::Display for Pred {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (op, t) = match self {
            Pred::Any => return f.write_str("any"),
            Pred::Cmp(CmpOp::Ge, t) => (">=", t),
            Pred::Cmp(CmpOp::Gt, t) => (">", t),
            Pred::Cmp(CmpOp::Le, t) => ("<=", t),
            Pred::Cmp(CmpOp::Lt, t) => ("<", t),
            Pred::Cmp(CmpOp::Eq, t) => ("=", t),
        };
        write!(f, "({op} {t})")
    }
}

impl fmt::Display for Spec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Spec::Done => f.write_str("done"),
            Spec::Fail => f.write_str("fail"),
            Spec::Payment(p) => {
                write!(f, "(pay {} {} {} {} {})", p.from, p.to, quote(p.resource.as_str()), p.amount, p.deadline)
            }
            Spec::Observation(o) => write!(f, "(observe {} {} {} {})", o.agent, quote(&o.key), o.pred, o.deadline),
            Spec::Seq(a, b) => write!(f, "(seq {a} {b})"),
            Spec::Both(a, b) => write!(f, "(both {a} {b})"),
            Spec::Choice(a, b) => write!(f, "(choice {a} {b})"),
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

mod sexpr {
    use super::*;

    #[derive(Debug)]
    enum Node {
        Atom(String),
        Str(String),
        List(Vec<Node>),
    }

    fn tokenize(src: &str) -> Result<Vec<Node>, String> {
        let mut stack: Vec<Vec<Node>> = vec![Vec::new()];
        let mut chars = src.chars().peekable();
        while let Some(&c) = chars.peek() {
            match c {
                c if c.is_whitespace() => {
                    chars.next();
                }
                ';' => {
                    for c in chars.by_ref() {
                        if c == '\n' {
                            break;
                        }
                    }
                }
                '(' => {
                    chars.next();
                    stack.push(Vec::new());
                }
                ')' => {
                    chars.next();
                    let list = stack.pop().filter(|_| !stack.is_empty()).ok_or("unbalanced `)`")?;
                    stack.last_mut().expect("non-empty").push(Node::List(list));
                }
                '"' => {
                    chars.next();
                    let mut s = String::new();
                    loop {
                        match chars.next().ok_or("unterminated string")? {
                            '"' => break,
                            '\\' => s.push(chars.next().ok_or("unterminated string")?),
                            c => s.push(c),
                        }
                    }
                    stack.last_mut().expect("non-empty").push(Node::Str(s));
                }
                _ => {
                    let mut s = String::new();
                    while let Some(&c) = chars.peek() {
                        if c.is_whitespace() || c == '(' || c == ')' || c == '"' {
                            break;
                        }
                        s.push(c);
                        chars.next();
                    }
                    stack.last_mut().expect("non-empty").push(Node::Atom(s));
                }
            }
        }
        if stack.len() != 1 {
            return Err("unbalanced `(`".into());
        }
        Ok(stack.pop().expect("one level"))
    }

    fn head(items: &[Node]) -> Result<(&str, &[Node]), String> {
        match items.split_first() {
            Some((Node::Atom(h), rest)) => Ok((h.as_str(), rest)),
            _ => Err("list must start with a keyword".into()),
        }
    }

    fn arity<'a>(rest: &'a [Node], n: usize, what: &str) -> Result<&'a [Node], String> {
        if rest.len() != n {
            return Err(format!("`{what}` takes {n} arguments, got {}", rest.len()));
        }
        Ok(rest)
    }

    fn string(n: &Node) -> Result<String, String> {
        match n {
            Node::Str(s) => Ok(s.clone()),
            other => Err(format!("expected string, got {other:?}")),
        }
    }

    fn int<T: std::str::FromStr>(n: &Node) -> Result<T, String> {
        match n {
            Node::Atom(a) => a.parse().map_err(|_| format!("bad integer `{a}`")),
            other => Err(format!("expected integer, got {other:?}")),
        }
    }

    fn party_ref(n: &Node) -> Result<PartyRef, String> {
        match n {
            Node::Atom(a) if a == "issuer" => Ok(PartyRef::Issuer),
            Node::List(items) => match head(items)? {
                ("party", rest) => Ok(PartyRef::Party(PartyId(string(&arity(rest, 1, "party")?[0])?))),
                (h, _) => Err(format!("unknown party form `{h}`")),
            },
            other => Err(format!("expected party, got {other:?}")),
        }
    }

    fn target(n: &Node) -> Result<Target, String> {
        match n {
            Node::Atom(a) if a == "holders" => Ok(Target::ProRataHolders),
            other => party_ref(other).map(|p| match p {
                PartyRef::Issuer => Target::Issuer,
                PartyRef::Party(p) => Target::Party(p),
            }),
        }
    }

    fn expr(n: &Node) -> Result<Expr, String> {
        match n {
            Node::Atom(_) => Ok(Expr::Lit(int(n)?)),
            Node::List(items) => {
                let (h, rest) = head(items)?;
                if h == "var" {
                    return Ok(Expr::Var(string(&arity(rest, 1, h)?[0])?));
                }
                let r = arity(rest, 2, h)?;
                let (a, b) = (Box::new(expr(&r[0])?), Box::new(expr(&r[1])?));
                Ok(match h {
                    "add" => Expr::Add(a, b),
                    "sub" => Expr::Sub(a, b),
                    "mul" => Expr::Mul(a, b),
                    "div" => Expr::Div(a, b),
                    _ => return Err(format!("unknown operator `{h}`")),
                })
            }
            Node::Str(_) => Err("expected expression, got string".into()),
        }
    }

    fn pred(n: &Node) -> Result<Pred, String> {
        match n {
            Node::Atom(a) if a == "any" => Ok(Pred::Any),
            Node::List(items) => {
                let (h, rest) = head(items)?;
                let op = match h {
                    ">=" => CmpOp::Ge,
                    ">" => CmpOp::Gt,
                    "<=" => CmpOp::Le,
                    "<" => CmpOp::Lt,
                    "=" => CmpOp::Eq,
                    _ => return Err(format!("unknown predicate `{h}`")),
                };
                Ok(Pred::Cmp(op, int(&arity(rest, 1, h)?[0])?))
            }
            other => Err(format!("expected predicate, got {other:?}")),
        }
    }

    fn spec(n: &Node) -> Result<Arc<Spec>, String> {
        match n {
            Node::Atom(a) if a == "done" => Ok(Spec::done()),
            Node::Atom(a) if a == "fail" => Ok(Spec::fail()),
            Node::List(items) => {
                let (h, rest) = head(items)?;
                match h {
                    "seq" | "both" | "choice" => {
                        let r = arity(rest, 2, h)?;
                        let (a, b) = (spec(&r[0])?, spec(&r[1])?);
                        Ok(Arc::new(match h {
                            "seq" => Spec::Seq(a, b),
                            "both" => Spec::Both(a, b),
                            _ => Spec::Choice(a, b),
                        }))
                    }
                    "pay" => {
                        let r = arity(rest, 5, h)?;
                        Ok(Arc::new(Spec::Payment(Payment {
                            from: party_ref(&r[0])?,
                            to: target(&r[1])?,
                            resource: ResourceId(string(&r[2])?),
                            amount: expr(&r[3])?,
                            deadline: int(&r[4])?,
                        })))
                    }
                    "observe" => {
                        let r = arity(rest, 4, h)?;
                        Ok(Arc::new(Spec::Observation(Observation {
                            agent: party_ref(&r[0])?,
                            key: string(&r[1])?,
                            pred: pred(&r[2])?,
                            deadline: int(&r[3])?,
                        })))
                    }
                    _ => Err(format!("unknown contract form `{h}`")),
                }
            }
            other => Err(format!("expected contract, got {other:?}")),
        }
    }

    /// Parses exactly one contract. The tree is kept as written; smart
    /// constructor simplification happens only during residuation.
    pub(super) fn parse_spec(src: &str) -> Result<Arc<Spec>, String> {
        let nodes = tokenize(src)?;
        match nodes.as_slice() {
            [one] => spec(one),
            [] => Err("empty contract".into()),
            _ => Err("trailing input after contract".into()),
        }
    }
}

// ---------------------------------------------------------------------------
// Lifecycle events and residuation

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SettledTransfer {
    pub from: PartyId,
    pub to: PartyId,
    pub resource: ResourceId,
    pub amount: u64,
}

impl Canonical for SettledTransfer {
    fn encode(&self, e: &mut Encoder) {
        e.item(&self.from).item(&self.to).item(&self.resource).u64(self.amount);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(SettledTransfer { from: d.item()?, to: d.item()?, resource: d.item()?, amount: d.u64()? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LifecycleKind {
    /// `record` is a holdings snapshot taken atomically with the
    /// observation; empty when none was taken.
    ObservationMade { key: String, value: i64, record: Vec<(PartyId, u64)> },
    PaymentSettled { transfers: Vec<SettledTransfer> },
    TimeAdvanced { to: u64 },
    IssuerNotice { tag: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LifecycleEvent {
    pub isin: Isin,
    pub kind: LifecycleKind,
}

impl LifecycleEvent {
    fn ledger_kind(&self) -> &'static str {
        match self.kind {
            LifecycleKind::ObservationMade { .. } => "contract.observation",
            LifecycleKind::PaymentSettled { .. } => "contract.payment",
            LifecycleKind::TimeAdvanced { .. } => "contract.time",
            LifecycleKind::IssuerNotice { .. } => "contract.notice",
        }
    }
}

impl Canonical for LifecycleEvent {
    fn encode(&self, e: &mut Encoder) {
        e.item(&self.isin);
        match &self.kind {
            LifecycleKind::ObservationMade { key, value, record } => e.str("observation").str(key).i64(*value).list(record),
            LifecycleKind::PaymentSettled { transfers } => e.str("payment").list(transfers),
            LifecycleKind::TimeAdvanced { to } => e.str("time").u64(*to),
            LifecycleKind::IssuerNotice { tag } => e.str("notice").str(tag),
        };
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let isin = d.item()?;
        let kind = match d.str()?.as_str() {
            "observation" => LifecycleKind::ObservationMade { key: d.str()?, value: d.i64()?, record: d.list()? },
            "payment" => LifecycleKind::PaymentSettled { transfers: d.list()? },
            "time" => LifecycleKind::TimeAdvanced { to: d.u64()? },
            "notice" => LifecycleKind::IssuerNotice { tag: d.str()? },
            t => return Err(CodecError::BadTag(t.to_owned())),
        };
        Ok(LifecycleEvent { isin, kind })
    }
}

/// Who the parties of an instance are and what has been observed.
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub issuer: &'a PartyId,
    pub bindings: &'a BTreeMap<String, i64>,
    pub record: &'a [(PartyId, u64)],
}

impl Ctx<'_> {
    fn resolve(&self, p: &PartyRef) -> PartyId {
        match p {
            PartyRef::Issuer => self.issuer.clone(),
            PartyRef::Party(p) => p.clone(),
        }
    }

    /// The transfers that discharge `p`, sorted.
    pub fn expected_transfers(&self, p: &Payment) -> Option<Vec<SettledTransfer>> {
        let amount = u64::try_from(p.amount.eval(self.bindings)?).ok()?;
        let from = self.resolve(&p.from);
        let mk = |to: PartyId, amount| SettledTransfer { from: from.clone(), to, resource: p.resource.clone(), amount };
        let mut out: Vec<SettledTransfer> = match &p.to {
            Target::Issuer => vec![mk(self.issuer.clone(), amount)],
            Target::Party(t) => vec![mk(t.clone(), amount)],
            Target::ProRataHolders => {
                pro_rata(amount, self.record).into_iter().map(|(to, a)| mk(to, a)).collect()
            }
        };
        out.retain(|t| t.amount > 0 && t.from != t.to);
        out.sort();
        Some(out)
    }
}

/// Splits `amount` over `holdings` proportionally with floor division; the
/// remainder goes one unit each to the largest holders (ties by party id).
pub fn pro_rata(amount: u64, holdings: &[(PartyId, u64)]) -> Vec<(PartyId, u64)> {
    let total: u128 = holdings.iter().map(|(_, h)| *h as u128).sum();
    if total == 0 {
        return Vec::new();
    }
    let mut shares: Vec<(PartyId, u64, u64)> = holdings
        .iter()
        .map(|(p, h)| (p.clone(), *h, (amount as u128 * *h as u128 / total) as u64))
        .collect();
    let mut rest = amount - shares.iter().map(|s| s.2).sum::<u64>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| shares[b].1.cmp(&shares[a].1).then_with(|| shares[a].0.cmp(&shares[b].0)));
    for i in order {
        if rest == 0 {
            break;
        }
        shares[i].2 += 1;
        rest -= 1;
    }
    shares.into_iter().map(|(p, _, s)| (p, s)).collect()
}

/// A lifecycle event as the residuation rules see it.
#[derive(Debug, Clone, Copy)]
pub struct Occurrence<'a> {
    pub author: &'a PartyId,
    pub kind: &'a LifecycleKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Residue {
    Match { spec: Arc<Spec>, bindings: BTreeMap<String, i64> },
    NoMatch,
}

/// Pure residuation of `spec` by one event.
pub fn residuate(spec: &Arc<Spec>, ev: Occurrence<'_>, ctx: Ctx<'_>) -> Residue {
    if let LifecycleKind::TimeAdvanced { to } = ev.kind {
        return Residue::Match { spec: spec.expire(*to), bindings: ctx.bindings.clone() };
    }
    match step(spec, ev, ctx) {
        Some((s, binding)) => {
            let mut bindings = ctx.bindings.clone();
            if let Some((k, v)) = binding {
                bindings.insert(k, v);
            }
            let spec = s.settle_zero(&bindings);
            Residue::Match { spec, bindings }
        }
        None => Residue::NoMatch,
    }
}

type Step = Option<(Arc<Spec>, Option<(String, i64)>)>;

fn step(spec: &Arc<Spec>, ev: Occurrence<'_>, ctx: Ctx<'_>) -> Step {
    match &**spec {
        Spec::Done | Spec::Fail => None,
        Spec::Observation(o) => {
            let (key, value) = match ev.kind {
                LifecycleKind::ObservationMade { key, value, .. } => (key, *value),
                LifecycleKind::IssuerNotice { tag } if o.agent == PartyRef::Issuer => (tag, 1),
                _ => return None,
            };
            let ok = *key == o.key && ctx.resolve(&o.agent) == *ev.author && o.pred.holds(value);
            ok.then(|| (Spec::done(), Some((key.clone(), value))))
        }
        Spec::Payment(p) => {
            let LifecycleKind::PaymentSettled { transfers } = ev.kind else { return None };
            let mut got = transfers.clone();
            got.sort();
            (ctx.expected_transfers(p)? == got).then(|| (Spec::done(), None))
        }
        Spec::Seq(a, b) => step(a, ev, ctx).map(|(a2, bd)| (Spec::seq(a2, b.clone()), bd)),
        Spec::Both(a, b) => match step(a, ev, ctx) {
            Some((a2, bd)) => Some((Spec::both(a2, b.clone()), bd)),
            None => step(b, ev, ctx).map(|(b2, bd)| (Spec::both(a.clone(), b2), bd)),
        },
        Spec::Choice(a, b) => step(a, ev, ctx).or_else(|| step(b, ev, ctx)),
    }
}

// ---------------------------------------------------------------------------
// Green bond template

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreenBondTerms {
    /// Face value in currency minor units.
    pub principal: u64,
    pub currency: ResourceId,
    pub n_coupons: u32,
    /// Tons of CO2 that must be verified for a period's coupon to proceed.
    pub co2_threshold: i64,
    /// Verification deadline of each period; the yield is due one tick
    /// later and the coupon two ticks later.
    pub coupon_dates: Vec<u64>,
    pub maturity: u64,
    pub verifier: PartyId,
    pub calculator: PartyId,
}

/// Builds the green bond contract: per period, verified CO2, then the
/// registered yield in basis points, then a pro-rata coupon of
/// `yield * principal / 10_000`; finally the principal at maturity.
pub fn make_green_bond(t: &GreenBondTerms) -> Result<Arc<Spec>, ContractError> {
    let bad = |m: &str| Err(ContractError::InvalidParams(m.to_owned()));
    if t.n_coupons == 0 {
        return bad("at least one coupon is required");
    }
    if t.principal == 0 || i64::try_from(t.principal).is_err() {
        return bad("principal must be positive");
    }
    if t.coupon_dates.len() != t.n_coupons as usize {
        return bad("one date per coupon is required");
    }
    let mut periods = Vec::new();
    for (i, &d) in t.coupon_dates.iter().enumerate() {
        let n = i + 1;
        let yield_key = format!("yield_{n}");
        let coupon = Expr::Div(
            Box::new(Expr::Mul(Box::new(Expr::var(&yield_key)), Box::new(Expr::Lit(t.principal as i64)))),
            Box::new(Expr::Lit(YIELD_SCALE)),
        );
        periods.push(Spec::seq(
            Spec::observe(
                PartyRef::Party(t.verifier.clone()),
                &format!("co2_tons_{n}"),
                Pred::Cmp(CmpOp::Ge, t.co2_threshold),
                d,
            ),
            Spec::seq(
                Spec::observe(PartyRef::Party(t.calculator.clone()), &yield_key, Pred::Cmp(CmpOp::Ge, 0), d + 1),
                Spec::pay(PartyRef::Issuer, Target::ProRataHolders, t.currency.as_str(), coupon, d + 2),
            ),
        ));
    }
    let redemption = Spec::pay(
        PartyRef::Issuer,
        Target::ProRataHolders,
        t.currency.as_str(),
        Expr::Lit(t.principal as i64),
        t.maturity,
    );
    let spec = periods.into_iter().rev().fold(redemption, |rest, p| Spec::seq(p, rest));
    spec.well_formed().map_err(ContractError::InvalidParams)?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// ISINs

fn isin_digits(body: &str) -> Option<Vec<u32>> {
    let mut digits = Vec::new();
    for c in body.chars() {
        let v = c.to_digit(36)?;
        if v >= 10 {
            digits.push(v / 10);
        }
        digits.push(v % 10);
    }
    Some(digits)
}

/// Luhn check digit over the letter-expanded first eleven characters.
pub fn isin_check_digit(body: &str) -> Option<char> {
    let digits = isin_digits(body)?;
    let sum: u32 = digits
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &d)| {
            if i % 2 == 0 {
                let x = d * 2;
                x / 10 + x % 10
            } else {
                d
            }
        })
        .sum();
    char::from_digit((10 - sum % 10) % 10, 10)
}

pub fn isin_valid(isin: &str, check_digit: bool) -> bool {
    let shape = isin.len() == 12 && isin.chars().all(|c| c.is_ascii_digit() || c.is_ascii_uppercase());
    shape && (!check_digit || isin_check_digit(&isin[..11]) == isin[11..].chars().next())
}

// ---------------------------------------------------------------------------
// Instances and manager state

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceStatus {
    Live,
    Matured,
    /// A deadline was missed; trading is suspended.
    Default,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractInstance {
    pub isin: Isin,
    pub issuer: PartyId,
    pub spec: Arc<Spec>,
    pub residual: Arc<Spec>,
    pub state_version: u64,
    pub bindings: BTreeMap<String, i64>,
    pub record: Vec<(PartyId, u64)>,
    pub docs_hash: Digest,
    pub now: u64,
    /// Latest price mark and the ledger slot it was recorded at. Marks are
    /// not lifecycle events and leave `state_version` alone.
    pub mark: Option<(i64, u64)>,
    pending: Option<TxnId>,
}

impl ContractInstance {
    pub fn status(&self) -> InstanceStatus {
        match *self.residual {
            Spec::Done => InstanceStatus::Matured,
            Spec::Fail => InstanceStatus::Default,
            _ => InstanceStatus::Live,
        }
    }

    fn ctx(&self) -> Ctx<'_> {
        Ctx { issuer: &self.issuer, bindings: &self.bindings, record: &self.record }
    }

    /// Transfer sets of the payments the residual would accept next.
    pub fn due_payments(&self) -> Vec<Vec<SettledTransfer>> {
        let mut out = Vec::new();
        enabled_payments(&self.residual, &mut out);
        out.into_iter().filter_map(|p| self.ctx().expected_transfers(p)).collect()
    }
}

fn enabled_payments<'a>(spec: &'a Spec, out: &mut Vec<&'a Payment>) {
    match spec {
        Spec::Payment(p) => out.push(p),
        Spec::Seq(a, _) => enabled_payments(a, out),
        Spec::Both(a, b) | Spec::Choice(a, b) => {
            enabled_payments(a, out);
            enabled_payments(b, out);
        }
        Spec::Done | Spec::Fail | Spec::Observation(_) => {}
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentView {
    pub isin: Isin,
    pub state_version: u64,
    pub residual: String,
    pub bindings: BTreeMap<String, i64>,
    pub status: InstanceStatus,
}

#[derive(Debug, Error)]
pub enum ContractError {
    #[error("malformed contract: {0}")]
    MalformedSpec(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{0}")]
    Unauthorized(String),
    #[error("event does not match the residual contract")]
    NoMatch,
    #[error("instrument {0} is in default")]
    DeadlineExpired(Isin),
    #[error("unknown instrument {0}")]
    UnknownInstrument(Isin),
    #[error("instrument {0} already exists")]
    DuplicateIsin(Isin),
    #[error("invalid ISIN {0}")]
    InvalidIsin(String),
    #[error("instrument {0} has a transaction in progress")]
    Busy(Isin),
    #[error("{0}")]
    CrossCheck(String),
    #[error("{isin} pinned at version {pinned}, now {current}")]
    StaleVersion { isin: Isin, pinned: u64, current: u64 },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl ContractError {
    pub fn code(&self) -> &'static str {
        match self {
            ContractError::MalformedSpec(_) => "MalformedSpec",
            ContractError::InvalidParams(_) => "InvalidParams",
            ContractError::Unauthorized(_) => "Unauthorized",
            ContractError::NoMatch => "NoMatch",
            ContractError::DeadlineExpired(_) => "DeadlineExpired",
            ContractError::UnknownInstrument(_) => "UnknownInstrument",
            ContractError::DuplicateIsin(_) => "DuplicateIsin",
            ContractError::InvalidIsin(_) => "InvalidIsin",
            ContractError::Busy(_) => "Busy",
            ContractError::CrossCheck(_) => "CrossCheck",
            ContractError::StaleVersion { .. } => "StaleStateVersion",
            ContractError::Ledger(_) => "Ledger",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContractEffect {
    Issue { isin: Isin, spec: String, docs: Vec<u8>, issuer: PartyId },
    Apply(LifecycleEvent),
    /// Votes yes only while the instrument is live at `version`; holds the
    /// instrument at that version until decided.
    AssertVersion { isin: Isin, version: u64 },
}

impl Canonical for ContractEffect {
    fn encode(&self, e: &mut Encoder) {
        match self {
            ContractEffect::Issue { isin, spec, docs, issuer } => {
                e.str("issue").item(isin).str(spec).bytes(docs).item(issuer)
            }
            ContractEffect::Apply(ev) => e.str("apply").item(ev),
            ContractEffect::AssertVersion { isin, version } => e.str("assert_version").item(isin).u64(*version),
        };
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match d.str()?.as_str() {
            "issue" => ContractEffect::Issue {
                isin: d.item()?,
                spec: d.str()?,
                docs: d.bytes()?.to_vec(),
                issuer: d.item()?,
            },
            "apply" => ContractEffect::Apply(d.item()?),
            "assert_version" => ContractEffect::AssertVersion { isin: d.item()?, version: d.u64()? },
            t => return Err(CodecError::BadTag(t.to_owned())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct IssueRecord {
    isin: Isin,
    spec: String,
    docs: Vec<u8>,
    issuer: PartyId,
}

impl Canonical for IssueRecord {
    fn encode(&self, e: &mut Encoder) {
        e.item(&self.isin).str(&self.spec).bytes(&self.docs).item(&self.issuer);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(IssueRecord { isin: d.item()?, spec: d.str()?, docs: d.bytes()?.to_vec(), issuer: d.item()? })
    }
}

/// A price mark posted by a calculation agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriceMark {
    pub isin: Isin,
    pub price: i64,
}

impl Canonical for PriceMark {
    fn encode(&self, e: &mut Encoder) {
        e.item(&self.isin).i64(self.price);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(PriceMark { isin: d.item()?, price: d.i64()? })
    }
}

/// Instruments of one contract manager; a pure fold of its ledger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractState {
    manager: ManagerId,
    instances: BTreeMap<Isin, ContractInstance>,
    docs: BTreeMap<Digest, Vec<u8>>,
    pending_isins: BTreeSet<Isin>,
    book: TxnBook,
}

impl ContractState {
    pub fn new(manager: ManagerId) -> Self {
        ContractState {
            manager,
            instances: BTreeMap::new(),
            docs: BTreeMap::new(),
            pending_isins: BTreeSet::new(),
            book: TxnBook::default(),
        }
    }

    pub fn instance(&self, isin: &Isin) -> Option<&ContractInstance> {
        self.instances.get(isin)
    }

    pub fn instances(&self) -> impl Iterator<Item = &ContractInstance> {
        self.instances.values()
    }

    pub fn document(&self, hash: &Digest) -> Option<&[u8]> {
        self.docs.get(hash).map(Vec::as_slice)
    }

    pub fn txn_book(&self) -> &TxnBook {
        &self.book
    }

    fn check_issue(&self, rec: &IssueRecord, author: &PartyId, check_digit: bool) -> Result<Arc<Spec>, ContractError> {
        if author != &rec.issuer {
            return Err(ContractError::Unauthorized(format!("{author} may not issue for {}", rec.issuer)));
        }
        if !isin_valid(rec.isin.as_str(), check_digit) {
            return Err(ContractError::InvalidIsin(rec.isin.to_string()));
        }
        if self.instances.contains_key(&rec.isin) || self.pending_isins.contains(&rec.isin) {
            return Err(ContractError::DuplicateIsin(rec.isin.clone()));
        }
        let spec = Spec::parse(&rec.spec)?;
        spec.well_formed().map_err(ContractError::MalformedSpec)?;
        Ok(spec)
    }

    fn create(&mut self, rec: IssueRecord) {
        let Ok(spec) = Spec::parse(&rec.spec) else { return };
        let docs_hash = sha256(&rec.docs);
        self.docs.insert(docs_hash, rec.docs);
        self.instances.insert(
            rec.isin.clone(),
            ContractInstance {
                isin: rec.isin,
                issuer: rec.issuer,
                residual: spec.clone(),
                spec,
                state_version: 0,
                bindings: BTreeMap::new(),
                record: Vec::new(),
                docs_hash,
                now: 0,
                mark: None,
                pending: None,
            },
        );
    }

    /// Residuates without changing state.
    fn check_event(&self, ev: &LifecycleEvent, author: &PartyId) -> Result<Residue, ContractError> {
        let inst = self.instances.get(&ev.isin).ok_or_else(|| ContractError::UnknownInstrument(ev.isin.clone()))?;
        if inst.pending.is_some() {
            return Err(ContractError::Busy(ev.isin.clone()));
        }
        if let LifecycleKind::TimeAdvanced { to } = ev.kind {
            if to <= inst.now {
                return Err(ContractError::NoMatch);
            }
        } else if inst.status() == InstanceStatus::Default {
            return Err(ContractError::DeadlineExpired(ev.isin.clone()));
        }
        match residuate(&inst.residual, Occurrence { author, kind: &ev.kind }, inst.ctx()) {
            Residue::NoMatch => Err(ContractError::NoMatch),
            r => Ok(r),
        }
    }

    fn apply_event(&mut self, ev: &LifecycleEvent, author: &PartyId) {
        let Ok(Residue::Match { spec, bindings }) = self.check_event(ev, author) else { return };
        let inst = self.instances.get_mut(&ev.isin).expect("checked");
        inst.residual = spec;
        inst.bindings = bindings;
        inst.state_version += 1;
        match &ev.kind {
            LifecycleKind::TimeAdvanced { to } => inst.now = *to,
            LifecycleKind::ObservationMade { record, .. } if !record.is_empty() => inst.record = record.clone(),
            _ => {}
        }
    }

    fn own_effects<'a>(&self, txn: &'a AtomicTxn) -> Vec<&'a ContractEffect> {
        txn.effects_for(&self.manager)
            .filter_map(|e| match e {
                Effect::Contract(c) => Some(c),
                Effect::Resource(_) => None,
            })
            .collect()
    }

    fn check_prepare(&self, txn: &AtomicTxn, dir: &dyn KeyDirectory, check_digit: bool) -> Result<(), ContractError> {
        let who = &txn.initiator;
        let own = self.own_effects(txn);
        if own.len() != txn.effects_for(&self.manager).count() {
            return Err(ContractError::CrossCheck("non-contract effect".into()));
        }
        let mut touched = BTreeSet::new();
        for eff in own {
            match eff {
                ContractEffect::Issue { isin, spec, docs, issuer } => {
                    if !dir.may_author(who, "contract.issue") {
                        return Err(ContractError::Unauthorized(format!("{who} may not issue instruments")));
                    }
                    let rec = IssueRecord { isin: isin.clone(), spec: spec.clone(), docs: docs.clone(), issuer: issuer.clone() };
                    self.check_issue(&rec, who, check_digit)?;
                    if !touched.insert(isin.clone()) {
                        return Err(ContractError::DuplicateIsin(isin.clone()));
                    }
                }
                ContractEffect::Apply(ev) => {
                    if !touched.insert(ev.isin.clone()) {
                        return Err(ContractError::CrossCheck("two events for one instrument".into()));
                    }
                    let kind_ok = match &ev.kind {
                        LifecycleKind::PaymentSettled { .. } => true,
                        k => dir.may_author(who, LifecycleEvent { isin: ev.isin.clone(), kind: k.clone() }.ledger_kind()),
                    };
                    if !kind_ok {
                        return Err(ContractError::Unauthorized(format!("{who} may not submit this event")));
                    }
                    self.check_event(ev, who)?;
                    cross_check(txn, ev, self.instances[&ev.isin].issuer.clone())?;
                }
                ContractEffect::AssertVersion { isin, version } => {
                    if !touched.insert(isin.clone()) {
                        return Err(ContractError::CrossCheck("two effects for one instrument".into()));
                    }
                    let inst = self.instances.get(isin).ok_or_else(|| ContractError::UnknownInstrument(isin.clone()))?;
                    if inst.pending.is_some() {
                        return Err(ContractError::Busy(isin.clone()));
                    }
                    if inst.status() != InstanceStatus::Live {
                        return Err(ContractError::DeadlineExpired(isin.clone()));
                    }
                    if inst.state_version != *version {
                        return Err(ContractError::StaleVersion { isin: isin.clone(), pinned: *version, current: inst.state_version });
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_prepare(&mut self, txn: &AtomicTxn) {
        for eff in self.own_effects(txn) {
            match eff {
                ContractEffect::Issue { isin, .. } => {
                    self.pending_isins.insert(isin.clone());
                }
                ContractEffect::Apply(LifecycleEvent { isin, .. }) | ContractEffect::AssertVersion { isin, .. } => {
                    if let Some(i) = self.instances.get_mut(isin) {
                        i.pending = Some(txn.txn_id.clone());
                    }
                }
            }
        }
        self.book.insert_prepared(txn.clone());
    }

    fn apply_decision(&mut self, id: &TxnId, decision: Decision) {
        let Some(rec) = self.book.get(id).filter(|r| r.status == LocalStatus::Prepared).cloned() else {
            return;
        };
        for eff in self.own_effects(&rec.txn) {
            match eff {
                ContractEffect::Issue { isin, spec, docs, issuer } => {
                    self.pending_isins.remove(isin);
                    if decision == Decision::Commit {
                        self.create(IssueRecord {
                            isin: isin.clone(),
                            spec: spec.clone(),
                            docs: docs.clone(),
                            issuer: issuer.clone(),
                        });
                    }
                }
                ContractEffect::Apply(ev) => {
                    if let Some(i) = self.instances.get_mut(&ev.isin) {
                        if i.pending.as_ref() == Some(id) {
                            i.pending = None;
                        }
                    }
                    if decision == Decision::Commit {
                        self.apply_event(ev, &rec.txn.initiator);
                    }
                }
                ContractEffect::AssertVersion { isin, .. } => {
                    if let Some(i) = self.instances.get_mut(isin) {
                        if i.pending.as_ref() == Some(id) {
                            i.pending = None;
                        }
                    }
                }
            }
        }
        self.book.set_decided(id, decision);
    }

    pub fn apply(&mut self, env: &EventEnvelope) -> Result<(), CodecError> {
        let mut d = Decoder::new(&env.payload);
        match env.payload_kind.as_str() {
            k if k.starts_with("txn.") => match TxnLogEvent::decode(k, &env.payload)? {
                TxnLogEvent::Prepared(txn) => self.apply_prepare(&txn),
                TxnLogEvent::Decided { txn_id, decision } => self.apply_decision(&txn_id, decision),
                TxnLogEvent::Tombstone { txn_id } => self.book.tombstone(&txn_id),
            },
            "contract.issue" => {
                let rec: IssueRecord = d.item()?;
                d.finish()?;
                self.create(rec);
            }
            "contract.observation" | "contract.time" | "contract.notice" => {
                let ev: LifecycleEvent = d.item()?;
                d.finish()?;
                self.apply_event(&ev, &env.author);
            }
            "contract.mark" => {
                let m: PriceMark = d.item()?;
                d.finish()?;
                if let Some(inst) = self.instances.get_mut(&m.isin) {
                    if m.price > 0 {
                        inst.mark = Some((m.price, env.seq));
                    }
                }
            }
            t => return Err(CodecError::BadTag(t.to_owned())),
        }
        Ok(())
    }

    pub fn view(&self, isin: &Isin) -> Result<InstrumentView, ContractError> {
        let i = self.instances.get(isin).ok_or_else(|| ContractError::UnknownInstrument(isin.clone()))?;
        Ok(InstrumentView {
            isin: isin.clone(),
            state_version: i.state_version,
            residual: i.residual.to_text(),
            bindings: i.bindings.clone(),
            status: i.status(),
        })
    }

    pub fn encode_state(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.item(&self.manager).u64(self.instances.len() as u64);
        for i in self.instances.values() {
            e.item(&i.isin).item(&i.issuer).str(&i.spec.to_text()).str(&i.residual.to_text());
            e.u64(i.state_version).u64(i.now).bytes(&i.docs_hash).option(i.pending.as_ref());
            e.u64(i.bindings.len() as u64);
            for (k, v) in &i.bindings {
                e.str(k).i64(*v);
            }
            e.list(&i.record);
            match i.mark {
                Some((p, at)) => e.bool(true).i64(p).u64(at),
                None => e.bool(false),
            };
        }
        let pending: Vec<Isin> = self.pending_isins.iter().cloned().collect();
        e.list(&pending);
        self.book.encode_into(&mut e);
        e.finish()
    }
}

/// Checks that the other legs of `txn` are exactly what the event claims.
fn cross_check(txn: &AtomicTxn, ev: &LifecycleEvent, issuer: PartyId) -> Result<(), ContractError> {
    let resource_effects = || {
        txn.actions.iter().filter_map(|a| match &a.effect {
            Effect::Resource(r) => Some(r),
            Effect::Contract(_) => None,
        })
    };
    match &ev.kind {
        LifecycleKind::PaymentSettled { transfers } => {
            let mut legs: Vec<SettledTransfer> = resource_effects()
                .filter_map(|r| match r {
                    ResourceEffect::Transfer { from, to, resource, amount } => Some(SettledTransfer {
                        from: from.clone(),
                        to: to.clone(),
                        resource: resource.clone(),
                        amount: *amount,
                    }),
                    _ => None,
                })
                .collect();
            let mut claimed = transfers.clone();
            legs.sort();
            claimed.sort();
            if legs != claimed {
                return Err(ContractError::CrossCheck("payment legs differ from the settled transfers".into()));
            }
            if claimed.iter().any(|t| t.from != txn.initiator) {
                return Err(ContractError::Unauthorized("payer must initiate the payment".into()));
            }
        }
        LifecycleKind::ObservationMade { record, .. } if !record.is_empty() => {
            let asserted = resource_effects().any(|r| {
                matches!(r, ResourceEffect::AssertHoldings { resource, holdings, excluding }
                    if *resource == ev.isin.resource() && holdings == record && excluding.as_ref() == Some(&issuer))
            });
            if !asserted {
                return Err(ContractError::CrossCheck("holdings snapshot is not asserted by the security manager".into()));
            }
        }
        _ => {}
    }
    Ok(())
}

pub struct ContractReducer(pub ManagerId);

impl Reducer for ContractReducer {
    type State = ContractState;
    fn init(&self) -> ContractState {
        ContractState::new(self.0.clone())
    }
    fn step(&self, s: &mut ContractState, env: &EventEnvelope) -> Result<(), CodecError> {
        s.apply(env)
    }
}

#[derive(Debug, Clone)]
pub struct ContractConfig {
    /// Four-character ISIN prefix for instruments issued here.
    pub isin_prefix: String,
    pub validate_check_digit: bool,
}

impl ContractConfig {
    pub fn for_manager(id: &ManagerId) -> Self {
        let h = sha256(id.as_str().as_bytes());
        let alpha = |b: u8| (b'A' + b % 26) as char;
        let isin_prefix = format!("XS{}{}", alpha(h[0]), alpha(h[1]));
        ContractConfig { isin_prefix, validate_check_digit: false }
    }
}

pub struct ContractManager {
    id: ManagerId,
    ledger: Ledger,
    state: ContractState,
    dir: IdentityHandle,
    operator: PartySigner,
    config: ContractConfig,
}

impl std::fmt::Debug for ContractManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContractManager").field("id", &self.id).field("len", &self.ledger.len()).finish()
    }
}

impl ContractManager {
    pub fn new(id: ManagerId, storage: Box<dyn Storage>, dir: IdentityHandle, operator: PartySigner) -> Self {
        ContractManager {
            ledger: Ledger::with_storage(id.as_str(), storage),
            state: ContractState::new(id.clone()),
            config: ContractConfig::for_manager(&id),
            id,
            dir,
            operator,
        }
    }

    pub fn recover(
        id: ManagerId,
        storage: Box<dyn Storage>,
        dir: IdentityHandle,
        operator: PartySigner,
    ) -> Result<Self, LedgerError> {
        let (ledger, _) = Ledger::open(id.as_str(), storage)?;
        let entries = ledger.entries();
        let state = crate::ledger::replay(entries.iter().map(|e| e.as_ref()), &ContractReducer(id.clone()))?;
        Ok(ContractManager { config: ContractConfig::for_manager(&id), id, ledger, state, dir, operator })
    }

    pub fn with_config(mut self, config: ContractConfig) -> Self {
        self.config = config;
        self
    }

    pub fn id(&self) -> &ManagerId {
        &self.id
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn state(&self) -> &ContractState {
        &self.state
    }

    pub fn operator_signer(&self) -> &PartySigner {
        &self.operator
    }

    /// A fresh ISIN for the next instrument issued here.
    pub fn next_isin(&self) -> Isin {
        let mut n = self.state.instances.len() + self.state.pending_isins.len();
        loop {
            let body = format!("{}{:07}", self.config.isin_prefix, n);
            let isin = Isin(format!("{body}{}", isin_check_digit(&body).expect("alphanumeric")));
            if !self.state.instances.contains_key(&isin) && !self.state.pending_isins.contains(&isin) {
                return isin;
            }
            n += 1;
        }
    }

    /// The contract effect of an issuance, for inclusion in a transaction
    /// that also registers the security resource.
    pub fn issue_effect(&self, spec: &Spec, docs: Vec<u8>, issuer: &PartyId) -> (Isin, ContractEffect) {
        let isin = self.next_isin();
        let eff = ContractEffect::Issue { isin: isin.clone(), spec: spec.to_text(), docs, issuer: issuer.clone() };
        (isin, eff)
    }

    /// Issues an instrument on this manager alone.
    pub fn issue_instrument(&mut self, spec: &Spec, docs: Vec<u8>, issuer: &dyn Signer) -> Result<Isin, ContractError> {
        let rec = IssueRecord { isin: self.next_isin(), spec: spec.to_text(), docs, issuer: issuer.party().clone() };
        self.state.check_issue(&rec, issuer.party(), self.config.validate_check_digit)?;
        let mut e = Encoder::new();
        e.item(&rec);
        let draft = self.ledger.sign_draft("contract.issue", e.finish(), issuer, self.dir.epoch());
        let env = self.ledger.append(draft, &self.dir)?;
        self.state.apply(&env).map_err(LedgerError::from)?;
        Ok(rec.isin)
    }

    /// Draft of a lifecycle event signed by `author`.
    pub fn event_draft(&self, ev: &LifecycleEvent, author: &dyn Signer) -> Draft {
        let mut e = Encoder::new();
        e.item(ev);
        self.ledger.sign_draft(ev.ledger_kind(), e.finish(), author, self.dir.epoch())
    }

    /// Applies a single-manager lifecycle event. Returns the new state
    /// version.
    pub fn apply_event(&mut self, ev: &LifecycleEvent, author: &dyn Signer) -> Result<u64, ContractError> {
        let draft = self.event_draft(ev, author);
        self.submit(draft)
    }

    /// Validates and appends a client-signed lifecycle event or price mark.
    /// Returns the instrument's state version afterwards.
    pub fn submit(&mut self, draft: Draft) -> Result<u64, ContractError> {
        let isin = self.check_draft(&draft)?;
        let env = self.ledger.append(draft, &self.dir)?;
        self.state.apply(&env).map_err(LedgerError::from)?;
        Ok(self.state.instances[&isin].state_version)
    }

    /// Submits a run of drafts signed for consecutive slots, checking all
    /// signatures with one batch verification. Stops at the first rejected
    /// draft.
    pub fn submit_batch(&mut self, drafts: Vec<Draft>) -> Result<usize, ContractError> {
        let ok = self.ledger.verify_batch_drafts(&drafts, &self.dir);
        let total = drafts.len();
        for draft in drafts.into_iter().take(ok) {
            self.check_draft(&draft)?;
            let env = self.ledger.append_preverified(draft)?;
            self.state.apply(&env).map_err(LedgerError::from)?;
        }
        if ok < total {
            return Err(LedgerError::BadSignature.into());
        }
        Ok(total)
    }

    /// Draft of a price mark signed by `author`.
    pub fn mark_draft(&self, isin: &Isin, price: i64, author: &dyn Signer) -> Draft {
        let mut e = Encoder::new();
        e.item(&PriceMark { isin: isin.clone(), price });
        self.ledger.sign_draft("contract.mark", e.finish(), author, self.dir.epoch())
    }

    fn check_draft(&self, draft: &Draft) -> Result<Isin, ContractError> {
        let mut d = Decoder::new(&draft.payload);
        if draft.kind == "contract.mark" {
            let m: PriceMark = d.item().map_err(LedgerError::from)?;
            d.finish().map_err(LedgerError::from)?;
            if !self.state.instances.contains_key(&m.isin) {
                return Err(ContractError::UnknownInstrument(m.isin));
            }
            if m.price <= 0 {
                return Err(ContractError::CrossCheck("price marks must be positive".into()));
            }
            return Ok(m.isin);
        }
        let ev: LifecycleEvent = d.item().map_err(LedgerError::from)?;
        d.finish().map_err(LedgerError::from)?;
        if ev.ledger_kind() != draft.kind || ev.ledger_kind() == "contract.payment" {
            return Err(ContractError::Unauthorized("payments settle only in a transaction".into()));
        }
        if let LifecycleKind::ObservationMade { record, .. } = &ev.kind {
            if !record.is_empty() {
                return Err(ContractError::CrossCheck("holdings snapshots need a transaction".into()));
            }
        }
        self.state.check_event(&ev, &draft.author)?;
        Ok(ev.isin)
    }

    /// Advances logical time of every live instrument to `to`.
    pub fn advance_time(&mut self, to: u64) -> Result<Vec<Isin>, ContractError> {
        let due: Vec<Isin> = self
            .state
            .instances()
            .filter(|i| i.now < to && i.status() == InstanceStatus::Live && i.pending.is_none())
            .map(|i| i.isin.clone())
            .collect();
        let op = self.operator.clone();
        for isin in &due {
            self.apply_event(&LifecycleEvent { isin: isin.clone(), kind: LifecycleKind::TimeAdvanced { to } }, &op)?;
        }
        Ok(due)
    }

    pub fn query_state(&self, isin: &Isin) -> Result<InstrumentView, ContractError> {
        self.state.view(isin)
    }

    fn log_txn(&mut self, ev: TxnLogEvent) -> Result<Arc<EventEnvelope>, LedgerError> {
        let draft = self.ledger.sign_draft(ev.kind(), ev.encode(), &self.operator, self.dir.epoch());
        let env = self.ledger.append(draft, &self.dir)?;
        self.state.apply(&env)?;
        Ok(env)
    }
}

impl TxnHost for ContractManager {
    fn host_id(&self) -> &ManagerId {
        &self.id
    }

    fn directory(&self) -> &dyn KeyDirectory {
        &self.dir
    }

    fn operator(&self) -> &PartySigner {
        &self.operator
    }

    fn txn_status(&self, id: &TxnId) -> LocalStatus {
        self.state.book.status(id)
    }

    fn prepare(&mut self, txn: &AtomicTxn) -> Vote {
        if let Err(e) = self.state.check_prepare(txn, &self.dir, self.config.validate_check_digit) {
            return Vote::No(format!("{}: {e}", e.code()));
        }
        match self.log_txn(TxnLogEvent::Prepared(txn.clone())) {
            Ok(_) => Vote::Yes,
            Err(e) => Vote::No(format!("Ledger: {e}")),
        }
    }

    fn decide(&mut self, id: &TxnId, d: Decision) -> Result<u64, TxnError> {
        if let Some(seq) = check_decision(&self.state.book, id, d)? {
            return Ok(seq);
        }
        Ok(self.log_txn(TxnLogEvent::Decided { txn_id: id.clone(), decision: d })?.seq)
    }

    fn tombstone(&mut self, id: &TxnId) -> Result<(), TxnError> {
        if self.state.book.status(id) == LocalStatus::Unknown {
            self.log_txn(TxnLogEvent::Tombstone { txn_id: id.clone() })?;
        }
        Ok(())
    }

    fn in_doubt(&self) -> Vec<AtomicTxn> {
        self.state.book.in_doubt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::Parties;
    use crate::ledger::{replay, MemDisk};
    use proptest::prelude::*;

    fn pid(s: &str) -> PartyId {
        PartyId::from(s)
    }

    fn ctx<'a>(issuer: &'a PartyId, b: &'a BTreeMap<String, i64>, rec: &'a [(PartyId, u64)]) -> Ctx<'a> {
        Ctx { issuer, bindings: b, record: rec }
    }

    fn obs(key: &str, value: i64) -> LifecycleKind {
        LifecycleKind::ObservationMade { key: key.into(), value, record: vec![] }
    }

    fn paid(from: &str, to: &str, amount: u64) -> LifecycleKind {
        LifecycleKind::PaymentSettled {
            transfers: vec![SettledTransfer { from: pid(from), to: pid(to), resource: "EUR".into(), amount }],
        }
    }

    #[test]
    fn observation_then_rest() {
        let v = pid("V");
        let rest = Spec::pay(PartyRef::Issuer, Target::Party(pid("H")), "EUR", Expr::var("co2_tons"), 20);
        let spec = Spec::seq(Spec::observe(PartyRef::Party(v.clone()), "co2_tons", Pred::Cmp(CmpOp::Ge, 1), 10), rest.clone());
        let (issuer, b) = (pid("I"), BTreeMap::new());
        let r = residuate(&spec, Occurrence { author: &v, kind: &obs("co2_tons", 5) }, ctx(&issuer, &b, &[]));
        let Residue::Match { spec: s, bindings } = r else { panic!("no match") };
        assert_eq!(s, rest);
        assert_eq!(bindings.get("co2_tons"), Some(&5));

        // Payment before the observation does not match a sequence head.
        let r = residuate(&spec, Occurrence { author: &issuer, kind: &paid("I", "H", 5) }, ctx(&issuer, &b, &[]));
        assert_eq!(r, Residue::NoMatch);
        // Wrong agent, failing predicate.
        assert_eq!(residuate(&spec, Occurrence { author: &issuer, kind: &obs("co2_tons", 5) }, ctx(&issuer, &b, &[])), Residue::NoMatch);
        assert_eq!(residuate(&spec, Occurrence { author: &v, kind: &obs("co2_tons", 0) }, ctx(&issuer, &b, &[])), Residue::NoMatch);
        // Done absorbs nothing.
        assert_eq!(residuate(&Spec::done(), Occurrence { author: &v, kind: &obs("co2_tons", 5) }, ctx(&issuer, &b, &[])), Residue::NoMatch);
    }

    #[test]
    fn both_interleaves_and_choice_prefers_left() {
        let (issuer, b) = (pid("I"), BTreeMap::new());
        let p1 = Spec::pay(PartyRef::Issuer, Target::Party(pid("A")), "EUR", Expr::Lit(5), 10);
        let p2 = Spec::pay(PartyRef::Issuer, Target::Party(pid("B")), "EUR", Expr::Lit(7), 10);
        let both = Arc::new(Spec::Both(p1.clone(), p2.clone()));
        let r = residuate(&both, Occurrence { author: &issuer, kind: &paid("I", "B", 7) }, ctx(&issuer, &b, &[]));
        assert_eq!(r, Residue::Match { spec: p1.clone(), bindings: b.clone() });

        let a = Arc::new(Spec::Seq(Spec::observe(PartyRef::Issuer, "call", Pred::Any, 5), p1.clone()));
        let bb = Arc::new(Spec::Seq(Spec::observe(PartyRef::Issuer, "call", Pred::Cmp(CmpOp::Ge, 0), 5), p2.clone()));
        let choice = Arc::new(Spec::Choice(a, bb));
        let ev = obs("call", 1);
        let Residue::Match { spec, .. } = residuate(&choice, Occurrence { author: &issuer, kind: &ev }, ctx(&issuer, &b, &[])) else {
            panic!()
        };
        assert_eq!(spec, p1, "leftmost branch wins when both match");
    }

    #[test]
    fn deadlines_expire_to_fail() {
        let (issuer, b) = (pid("I"), BTreeMap::new());
        let p = Spec::pay(PartyRef::Issuer, Target::Party(pid("A")), "EUR", Expr::Lit(5), 10);
        let at = |t| residuate(&p, Occurrence { author: &issuer, kind: &LifecycleKind::TimeAdvanced { to: t } }, ctx(&issuer, &b, &[]));
        assert_eq!(at(10), Residue::Match { spec: p.clone(), bindings: b.clone() });
        assert_eq!(at(11), Residue::Match { spec: Spec::fail(), bindings: b.clone() });
    }

    #[test]
    fn issuer_notice_matches_issuer_observation() {
        let (issuer, b) = (pid("I"), BTreeMap::new());
        let redeem = Spec::pay(PartyRef::Issuer, Target::ProRataHolders, "EUR", Expr::Lit(100), 20);
        let spec = Arc::new(Spec::Choice(
            Arc::new(Spec::Seq(Spec::observe(PartyRef::Issuer, "prepay", Pred::Any, 10), redeem.clone())),
            Spec::pay(PartyRef::Issuer, Target::ProRataHolders, "EUR", Expr::Lit(5), 15),
        ));
        let ev = LifecycleKind::IssuerNotice { tag: "prepay".into() };
        let Residue::Match { spec: s, bindings } = residuate(&spec, Occurrence { author: &issuer, kind: &ev }, ctx(&issuer, &b, &[])) else {
            panic!()
        };
        assert_eq!(s, redeem);
        assert_eq!(bindings["prepay"], 1);
        let other = pid("X");
        assert_eq!(residuate(&spec, Occurrence { author: &other, kind: &ev }, ctx(&issuer, &b, &[])), Residue::NoMatch);
    }

    fn terms(n: u32) -> GreenBondTerms {
        GreenBondTerms {
            principal: 1_000_000,
            currency: ResourceId::from("EUR"),
            n_coupons: n,
            co2_threshold: 100,
            coupon_dates: (0..n as u64).map(|i| 10 + 10 * i).collect(),
            maturity: 10 + 10 * n as u64,
            verifier: pid("V"),
            calculator: pid("C"),
        }
    }

    #[test]
    fn green_bond_coupon_and_redemption() {
        let spec = make_green_bond(&terms(1)).unwrap();
        let issuer = pid("I");
        let record = vec![(pid("A"), 600), (pid("B"), 400)];
        let mut b = BTreeMap::new();
        let mut s = spec.clone();
        let steps: Vec<(PartyId, LifecycleKind)> = vec![
            (pid("V"), obs("co2_tons_1", 150)),
            (pid("C"), obs("yield_1", 250)),
            (
                issuer.clone(),
                LifecycleKind::PaymentSettled {
                    transfers: vec![
                        SettledTransfer { from: issuer.clone(), to: pid("A"), resource: "EUR".into(), amount: 15_000 },
                        SettledTransfer { from: issuer.clone(), to: pid("B"), resource: "EUR".into(), amount: 10_000 },
                    ],
                },
            ),
            (
                issuer.clone(),
                LifecycleKind::PaymentSettled {
                    transfers: vec![
                        SettledTransfer { from: issuer.clone(), to: pid("A"), resource: "EUR".into(), amount: 600_000 },
                        SettledTransfer { from: issuer.clone(), to: pid("B"), resource: "EUR".into(), amount: 400_000 },
                    ],
                },
            ),
        ];
        for (author, kind) in &steps {
            match residuate(&s, Occurrence { author, kind }, ctx(&issuer, &b, &record)) {
                Residue::Match { spec, bindings } => {
                    s = spec;
                    b = bindings;
                }
                Residue::NoMatch => panic!("step {kind:?} rejected on {s}"),
            }
        }
        assert_eq!(*s, Spec::Done);
    }

    #[test]
    fn coupon_arithmetic_and_zero_yield() {
        let spec = make_green_bond(&terms(1)).unwrap();
        let Spec::Seq(period, _) = &*spec else { panic!() };
        let Spec::Seq(_, tail) = &**period else { panic!() };
        let Spec::Seq(_, pay) = &**tail else { panic!() };
        let Spec::Payment(p) = &**pay else { panic!() };
        let b = BTreeMap::from([("yield_1".to_string(), 250)]);
        assert_eq!(p.amount.eval(&b), Some(25_000));

        let issuer = pid("I");
        let (c, mut b) = (pid("C"), BTreeMap::new());
        b.insert("co2_tons_1".into(), 150);
        let Residue::Match { spec, .. } = residuate(tail, Occurrence { author: &c, kind: &obs("yield_1", 0) }, ctx(&issuer, &b, &[])) else {
            panic!()
        };
        assert_eq!(*spec, Spec::Done, "a zero coupon is discharged by the yield observation");
    }

    #[test]
    fn green_bond_rejects_bad_params() {
        assert!(make_green_bond(&GreenBondTerms { n_coupons: 0, coupon_dates: vec![], ..terms(1) }).is_err());
        assert!(make_green_bond(&GreenBondTerms { principal: 0, ..terms(1) }).is_err());
        assert!(make_green_bond(&GreenBondTerms { maturity: 11, ..terms(1) }).is_err());
    }

    #[test]
    fn pro_rata_split_and_remainder() {
        let r = pro_rata(25_000, &[(pid("A"), 600), (pid("B"), 400)]);
        assert_eq!(r, vec![(pid("A"), 15_000), (pid("B"), 10_000)]);
        // 10 over 1/1/1: 3 each, remainder 1 to the first by party id.
        let r = pro_rata(10, &[(pid("C"), 1), (pid("A"), 1), (pid("B"), 1)]);
        assert_eq!(r, vec![(pid("C"), 3), (pid("A"), 4), (pid("B"), 3)]);
        // Larger holders get the remainder first.
        let r = pro_rata(5, &[(pid("A"), 1), (pid("B"), 2)]);
        assert_eq!(r, vec![(pid("A"), 1), (pid("B"), 4)]);
        assert!(pro_rata(5, &[]).is_empty());
    }

    #[test]
    fn isin_check_digits() {
        assert_eq!(isin_check_digit("US037833100"), Some('5'));
        assert!(isin_valid("US0378331005", true));
        assert!(!isin_valid("US0378331006", true));
        assert!(isin_valid("US0378331006", false));
        assert!(!isin_valid("us0378331005", false));
        assert!(isin_valid("DE000BAY0017", true));
    }

    #[test]
    fn well_formedness() {
        let bad_var = "(pay issuer holders \"EUR\" (var \"y\") 5)";
        assert!(Spec::parse(bad_var).unwrap().well_formed().is_err());
        let bad_order = "(seq (observe issuer \"y\" any 5) (pay issuer holders \"EUR\" (var \"y\") 5))";
        assert!(Spec::parse(bad_order).unwrap().well_formed().is_err());
        let ok = "(seq (observe issuer \"y\" any 5) (pay issuer holders \"EUR\" (var \"y\") 6))";
        assert!(Spec::parse(ok).unwrap().well_formed().is_ok());
        assert!(Spec::parse("(seq done)").is_err());
        assert!(Spec::parse("(seq done done) done").is_err());
        assert!(Spec::parse("(pay issuer holders \"EUR\" 1").is_err());
    }

    fn leaf() -> impl Strategy<Value = Arc<Spec>> {
        let party = prop_oneof![Just(PartyRef::Issuer), "[A-Z][0-9]{2}".prop_map(|s| PartyRef::Party(PartyId(s)))];
        let target = prop_oneof![Just(Target::Issuer), Just(Target::ProRataHolders), "[a-z\"]{1,3}".prop_map(|s| Target::Party(PartyId(s)))];
        let expr = (any::<i64>(), "[a-z_]{1,4}").prop_map(|(v, k)| Expr::Add(Box::new(Expr::Lit(v)), Box::new(Expr::Var(k))));
        prop_oneof![
            Just(Spec::done()),
            Just(Spec::fail()),
            (party.clone(), target, expr, any::<u64>()).prop_map(|(f, t, a, d)| Spec::pay(f, t, "EUR", a, d)),
            (party, "[a-z_ ]{0,5}", any::<i64>(), any::<u64>())
                .prop_map(|(a, k, v, d)| Spec::observe(a, &k, Pred::Cmp(CmpOp::Le, v), d)),
        ]
    }

    fn spec_strategy() -> impl Strategy<Value = Arc<Spec>> {
        leaf().prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Arc::new(Spec::Seq(a, b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Arc::new(Spec::Both(a, b))),
                (inner.clone(), inner).prop_map(|(a, b)| Arc::new(Spec::Choice(a, b))),
            ]
        })
    }

    proptest! {
        #[test]
        fn text_format_round_trips(s in spec_strategy()) {
            let text = s.to_text();
            prop_assert_eq!(Spec::parse(&text).unwrap(), s);
        }

        #[test]
        fn pro_rata_conserves(amount in 0..10_000_000u64, hs in proptest::collection::vec(1..1_000u64, 1..8)) {
            let holdings: Vec<_> = hs.iter().enumerate().map(|(i, h)| (PartyId(format!("P{i}")), *h)).collect();
            let r = pro_rata(amount, &holdings);
            prop_assert_eq!(r.iter().map(|x| x.1).sum::<u64>(), amount);
            let total: u64 = hs.iter().sum();
            for ((_, h), (_, s)) in holdings.iter().zip(&r) {
                let exact = amount as u128 * *h as u128 / total as u128;
                prop_assert!(*s as u128 == exact || *s as u128 == exact + 1);
            }
        }
    }

    fn manager(p: &Parties) -> (ContractManager, MemDisk) {
        let disk = MemDisk::new();
        (ContractManager::new(ManagerId::from("cm"), disk.storage(), p.dir(), p.s("cm")), disk)
    }

    #[test]
    fn issue_apply_query_and_replay() {
        let p = Parties::new();
        let (mut m, disk) = manager(&p);
        let spec = make_green_bond(&GreenBondTerms { verifier: p.id("verifier"), calculator: p.id("calc"), ..terms(2) }).unwrap();
        let isin = m.issue_instrument(&spec, b"prospectus".to_vec(), &p.s("issuer")).unwrap();
        let isin2 = m.issue_instrument(&Spec::Done, vec![], &p.s("issuer")).unwrap();
        assert_ne!(isin, isin2);
        assert!(isin_valid(isin.as_str(), true));
        assert_eq!(m.query_state(&isin2).unwrap().status, InstanceStatus::Matured);
        assert_eq!(m.query_state(&isin).unwrap().state_version, 0);
        assert_eq!(m.state().instance(&isin).unwrap().residual, spec);
        assert!(m.issue_instrument(&Spec::Done, vec![], &p.s("alice")).is_err());

        let co2 = LifecycleEvent { isin: isin.clone(), kind: obs("co2_tons_1", 120) };
        assert!(matches!(m.apply_event(&co2, &p.s("calc")), Err(ContractError::NoMatch)));
        assert_eq!(m.apply_event(&co2, &p.s("verifier")).unwrap(), 1);
        let again = LifecycleEvent { isin: isin.clone(), kind: obs("co2_tons_1", 130) };
        assert!(matches!(m.apply_event(&again, &p.s("verifier")), Err(ContractError::NoMatch)));
        assert_eq!(m.query_state(&isin).unwrap().state_version, 1);

        m.advance_time(12).unwrap();
        let v = m.query_state(&isin).unwrap();
        assert_eq!((v.status, v.state_version), (InstanceStatus::Default, 2));
        let y = LifecycleEvent { isin: isin.clone(), kind: obs("yield_1", 100) };
        assert!(matches!(m.apply_event(&y, &p.s("calc")), Err(ContractError::DeadlineExpired(_))));

        let entries = m.ledger().entries();
        let replayed = replay(entries.iter().map(|e| e.as_ref()), &ContractReducer(ManagerId::from("cm"))).unwrap();
        assert_eq!(replayed.encode_state(), m.state().encode_state());
        disk.crash();
        let m2 = ContractManager::recover(ManagerId::from("cm"), disk.storage(), p.dir(), p.s("cm")).unwrap();
        assert_eq!(m2.state().encode_state(), m.state().encode_state());
        assert_eq!(m2.state().document(&sha256(b"prospectus")), Some(&b"prospectus"[..]));
    }

    #[test]
    fn instruments_evolve_independently() {
        let p = Parties::new();
        let spec = make_green_bond(&GreenBondTerms { verifier: p.id("verifier"), calculator: p.id("calc"), ..terms(1) }).unwrap();
        let run = |interleave: bool| {
            let (mut m, _) = manager(&p);
            let a = m.issue_instrument(&spec, vec![], &p.s("issuer")).unwrap();
            let b = m.issue_instrument(&spec, vec![], &p.s("issuer")).unwrap();
            let evs = |i: &Isin| {
                vec![
                    (LifecycleEvent { isin: i.clone(), kind: obs("co2_tons_1", 200) }, "verifier"),
                    (LifecycleEvent { isin: i.clone(), kind: obs("yield_1", 0) }, "calc"),
                ]
            };
            let (ea, eb) = (evs(&a), evs(&b));
            let order: Vec<_> = if interleave {
                vec![&eb[0], &ea[0], &eb[1], &ea[1]]
            } else {
                ea.iter().chain(eb.iter()).collect()
            };
            for (ev, who) in order {
                m.apply_event(ev, &p.s(who)).unwrap();
            }
            [a, b].map(|i| m.state().instance(&i).unwrap().residual.to_text())
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn marks_leave_version_and_batch_matches_single() {
        let p = Parties::new();
        let spec = make_green_bond(&GreenBondTerms { verifier: p.id("verifier"), calculator: p.id("calc"), ..terms(1) }).unwrap();
        let (mut m, _) = manager(&p);
        let (mut shadow, _) = manager(&p);
        let isin = m.issue_instrument(&spec, vec![], &p.s("issuer")).unwrap();
        shadow.issue_instrument(&spec, vec![], &p.s("issuer")).unwrap();

        let mut drafts = Vec::new();
        for price in [9_900, 9_950, 10_010] {
            let d = shadow.mark_draft(&isin, price, &p.s("calc"));
            shadow.submit(d.clone()).unwrap();
            drafts.push(d);
        }
        assert_eq!(m.submit_batch(drafts).unwrap(), 3);
        assert_eq!(m.state().encode_state(), shadow.state().encode_state());
        let inst = m.state().instance(&isin).unwrap();
        assert_eq!((inst.state_version, inst.mark.map(|x| x.0)), (0, Some(10_010)));

        assert!(m.submit(m.mark_draft(&isin, 0, &p.s("calc"))).is_err());
        assert!(m.submit(m.mark_draft(&isin, 5, &p.s("alice"))).is_err());

        // A tampered signature stops the batch at that draft.
        let good = m.mark_draft(&isin, 1, &p.s("calc"));
        let mut bad = good.clone();
        bad.signature[0] ^= 1;
        let before = m.ledger().len();
        assert!(m.submit_batch(vec![bad]).is_err());
        assert_eq!(m.ledger().len(), before);
        assert_eq!(m.submit_batch(vec![good]).unwrap(), 1);
    }
}

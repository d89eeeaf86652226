use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expr {
    Nat(BigUint),
    Ident(String),
    Add(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Calls `f` on every identifier, left to right.
    pub fn for_each_ident<'a>(&'a self, f: &mut impl FnMut(&'a str)) {
        match self {
            Expr::Nat(_) => {}
            Expr::Ident(name) => f(name),
            Expr::Add(l, r) | Expr::Mul(l, r) => {
                l.for_each_ident(f);
                r.for_each_ident(f);
            }
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent_is_product: bool) -> fmt::Result {
        match self {
            Expr::Nat(n) => write!(f, "{n}"),
            Expr::Ident(name) => f.write_str(name),
            Expr::Add(l, r) => {
                if parent_is_product {
                    f.write_str("(")?;
                }
                l.fmt_prec(f, false)?;
                f.write_str(" + ")?;
                // Right operand of a left-associative sum needs parens when it is itself a sum.
                if matches!(**r, Expr::Add(..)) {
                    f.write_str("(")?;
                    r.fmt_prec(f, false)?;
                    f.write_str(")")?;
                } else {
                    r.fmt_prec(f, false)?;
                }
                if parent_is_product {
                    f.write_str(")")?;
                }
                Ok(())
            }
            Expr::Mul(l, r) => {
                l.fmt_prec(f, true)?;
                f.write_str(" * ")?;
                if matches!(**r, Expr::Mul(..)) {
                    f.write_str("(")?;
                    r.fmt_prec(f, true)?;
                    f.write_str(")")
                } else {
                    r.fmt_prec(f, true)
                }
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Lt,
    Le,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prop {
    True,
    False,
    Cmp { lhs: Expr, op: CmpOp, rhs: Expr },
}

impl Prop {
    pub fn for_each_ident<'a>(&'a self, f: &mut impl FnMut(&'a str)) {
        if let Prop::Cmp { lhs, rhs, .. } = self {
            lhs.for_each_ident(f);
            rhs.for_each_ident(f);
        }
    }
}

impl fmt::Display for Prop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prop::True => f.write_str("true"),
            Prop::False => f.write_str("false"),
            Prop::Cmp { lhs, op, rhs } => write!(f, "{lhs} {} {rhs}", op.symbol()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProofStep {
    Check(Prop),
    Delay(u64),
    Abort,
    Use(String),
}

impl fmt::Display for ProofStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProofStep::Check(p) => write!(f, "check {p} ."),
            ProofStep::Delay(ms) => write!(f, "delay {ms} ."),
            ProofStep::Abort => f.write_str("abort ."),
            ProofStep::Use(name) => write!(f, "use {name} ."),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Def,
    Lemma,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Def(Expr),
    Lemma { statement: Prop, body: Vec<ProofStep> },
}

/// One top-level document item.
///
/// `range` covers the item from its keyword through the final `.`;
/// `statement_end` is the end of the statement part (for a lemma, the `.`
/// closing the proposition; for a def, the whole item). `statement_text` is
/// the canonical text of the statement region, the input to evidence hashing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub name: String,
    pub payload: Payload,
    pub range: Range<usize>,
    pub statement_end: usize,
    pub statement_text: String,
}

impl Item {
    pub fn kind(&self) -> ItemKind {
        match self.payload {
            Payload::Def(_) => ItemKind::Def,
            Payload::Lemma { .. } => ItemKind::Lemma,
        }
    }

    pub fn statement_range(&self) -> Range<usize> {
        self.range.start..self.statement_end
    }

    /// The `proof ... qed .` region, if any.
    pub fn body_range(&self) -> Option<Range<usize>> {
        match self.payload {
            Payload::Lemma { .. } => Some(self.statement_end..self.range.end),
            Payload::Def(_) => None,
        }
    }

    /// Same item with every offset shifted left by `by`.
    pub fn rebased(&self, by: usize) -> Item {
        Item {
            name: self.name.clone(),
            payload: self.payload.clone(),
            range: self.range.start - by..self.range.end - by,
            statement_end: self.statement_end - by,
            statement_text: self.statement_text.clone(),
        }
    }
}

/// Canonical text of a source region: comments dropped, whitespace runs
/// collapsed to one space, ends trimmed.
pub fn canonical_text(src: &str) -> String {
    let mut out = String::with_capacity(src.len());
    let mut pending_space = false;
    let mut rest = src;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("--") {
            let end = rest.find('\n').unwrap_or(rest.len());
            rest = &rest[end..];
            pending_space = true;
            continue;
        }
        rest = &rest[c.len_utf8()..];
        if c.is_whitespace() {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn canonical_text_collapses_and_strips_comments() {
        assert_eq!(canonical_text("  lemma  t :\n\ta = 2 ."), "lemma t : a = 2 .");
        assert_eq!(canonical_text("a -- comment\n = 2"), "a = 2");
        assert_eq!(canonical_text("-- only\n"), "");
    }

    #[test]
    fn display_inserts_needed_parens() {
        let two = || Box::new(Expr::Nat(2u32.into()));
        let sum = Expr::Add(two(), two());
        let prod = Expr::Mul(Box::new(sum.clone()), two());
        assert_eq!(prod.to_string(), "(2 + 2) * 2");
        assert_eq!(Expr::Add(two(), Box::new(Expr::Mul(two(), two()))).to_string(), "2 + 2 * 2");
        assert_eq!(Expr::Add(two(), Box::new(sum)).to_string(), "2 + (2 + 2)");
    }
}

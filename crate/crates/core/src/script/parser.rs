//! Recursive-descent parser with item-level error recovery.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::ast::{canonical_text, CmpOp, Expr, Item, ItemKind, Payload, ProofStep, Prop};
use super::lexer::{tokenize, Keyword, Sym, Tok, Token};

pub const DEFAULT_MAX_DELAY_MS: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParseOptions {
    /// Largest accepted `delay` argument.
    pub max_delay_ms: u64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { max_delay_ms: DEFAULT_MAX_DELAY_MS }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    /// Byte offset of the offending token (or the text length at end of input).
    pub offset: usize,
    /// Sorted, deduplicated descriptions of what would have been accepted.
    pub expected: Vec<String>,
}

impl ParseError {
    fn new(offset: usize, expected: &[&str]) -> Self {
        let mut expected: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
        expected.sort();
        expected.dedup();
        ParseError { offset, expected }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parse error at byte {}: expected ", self.offset)?;
        match self.expected.as_slice() {
            [one] => write!(f, "{one}"),
            many => write!(f, "one of {}", many.join(", ")),
        }
    }
}

impl core::error::Error for ParseError {}

/// An item that failed to parse. Its range runs from the item's first token
/// up to (not including) the next `def` or `lemma` keyword.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Malformed {
    pub range: Range<usize>,
    pub error: ParseError,
    pub kind_hint: Option<ItemKind>,
    pub name_hint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParsedSpan {
    Item(Item),
    Malformed(Malformed),
}

impl ParsedSpan {
    pub fn range(&self) -> Range<usize> {
        match self {
            ParsedSpan::Item(item) => item.range.clone(),
            ParsedSpan::Malformed(m) => m.range.clone(),
        }
    }

    pub fn item(&self) -> Option<&Item> {
        match self {
            ParsedSpan::Item(item) => Some(item),
            ParsedSpan::Malformed(_) => None,
        }
    }
}

/// Parses a whole document, stopping at the first error.
pub fn parse_document(text: &str) -> Result<Vec<Item>, ParseError> {
    parse_document_with(text, &ParseOptions::default())
}

pub fn parse_document_with(text: &str, opts: &ParseOptions) -> Result<Vec<Item>, ParseError> {
    let tokens = tokenize(text);
    let mut parser = Parser { src: text, tokens: &tokens, pos: 0, opts };
    let mut items = Vec::new();
    while !parser.at_end() {
        items.push(parser.item()?);
    }
    Ok(items)
}

/// Parses a document into spans, turning each unparseable item into a
/// [`Malformed`] span and resuming at the next item keyword.
pub fn parse_spans(text: &str, opts: &ParseOptions) -> Vec<ParsedSpan> {
    let tokens = tokenize(text);
    let mut parser = Parser { src: text, tokens: &tokens, pos: 0, opts };
    let mut spans = Vec::new();
    while !parser.at_end() {
        let start = parser.pos;
        match parser.item() {
            Ok(item) => spans.push(ParsedSpan::Item(item)),
            Err(error) => {
                let resume = tokens[start + 1..]
                    .iter()
                    .position(|t| matches!(t.tok, Tok::Kw(Keyword::Def | Keyword::Lemma)))
                    .map_or(tokens.len(), |p| p + start + 1);
                let kind_hint = match tokens[start].tok {
                    Tok::Kw(Keyword::Def) => Some(ItemKind::Def),
                    Tok::Kw(Keyword::Lemma) => Some(ItemKind::Lemma),
                    _ => None,
                };
                let name_hint = match (kind_hint, tokens.get(start + 1).map(|t| t.tok)) {
                    (Some(_), Some(Tok::Ident(name))) if start + 1 < resume => Some(name.to_string()),
                    _ => None,
                };
                spans.push(ParsedSpan::Malformed(Malformed {
                    range: tokens[start].start..tokens[resume - 1].end,
                    error,
                    kind_hint,
                    name_hint,
                }));
                parser.pos = resume;
            }
        }
    }
    spans
}

struct Parser<'t, 'a> {
    src: &'a str,
    tokens: &'t [Token<'a>],
    pos: usize,
    opts: &'t ParseOptions,
}

type PResult<T> = Result<T, ParseError>;

impl<'a> Parser<'_, 'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.tokens.len()
    }

    fn peek(&self) -> Option<Tok<'a>> {
        self.tokens.get(self.pos).map(|t| t.tok)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.src.len(), |t| t.start)
    }

    fn fail<T>(&self, expected: &[&str]) -> PResult<T> {
        Err(ParseError::new(self.offset(), expected))
    }

    fn bump(&mut self) -> Token<'a> {
        let t = self.tokens[self.pos];
        self.pos += 1;
        t
    }

    fn eat_sym(&mut self, sym: Sym) -> bool {
        if self.peek() == Some(Tok::Sym(sym)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_kw(&mut self, kw: Keyword) -> bool {
        if self.peek() == Some(Tok::Kw(kw)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, sym: Sym, expected: &[&str]) -> PResult<Token<'a>> {
        if self.peek() == Some(Tok::Sym(sym)) {
            Ok(self.bump())
        } else {
            self.fail(expected)
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek() {
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                Ok(name.to_string())
            }
            _ => self.fail(&["identifier"]),
        }
    }

    fn item(&mut self) -> PResult<Item> {
        let start = self.offset();
        if self.eat_kw(Keyword::Def) {
            let name = self.ident()?;
            self.expect_sym(Sym::Eq, &["="])?;
            let value = self.expr()?;
            let dot = self.expect_sym(Sym::Dot, &["*", "+", "."])?;
            Ok(Item {
                name,
                payload: Payload::Def(value),
                range: start..dot.end,
                statement_end: dot.end,
                statement_text: canonical_text(&self.src[start..dot.end]),
            })
        } else if self.eat_kw(Keyword::Lemma) {
            let name = self.ident()?;
            self.expect_sym(Sym::Colon, &[":"])?;
            let (statement, follow) = self.prop()?;
            let stmt_dot = self.expect_sym(Sym::Dot, follow)?;
            if !self.eat_kw(Keyword::Proof) {
                return self.fail(&["proof"]);
            }
            let mut body = Vec::new();
            while !self.eat_kw(Keyword::Qed) {
                body.push(self.step()?);
            }
            let dot = self.expect_sym(Sym::Dot, &["."])?;
            Ok(Item {
                name,
                payload: Payload::Lemma { statement, body },
                range: start..dot.end,
                statement_end: stmt_dot.end,
                statement_text: canonical_text(&self.src[start..stmt_dot.end]),
            })
        } else {
            self.fail(&["def", "lemma"])
        }
    }

    fn step(&mut self) -> PResult<ProofStep> {
        let step = match self.peek() {
            Some(Tok::Kw(Keyword::Check)) => {
                self.pos += 1;
                let (prop, follow) = self.prop()?;
                self.expect_sym(Sym::Dot, follow)?;
                return Ok(ProofStep::Check(prop));
            }
            Some(Tok::Kw(Keyword::Delay)) => {
                self.pos += 1;
                let ms = match self.peek() {
                    Some(Tok::Nat(digits)) => match digits.parse::<u64>() {
                        Ok(ms) if ms <= self.opts.max_delay_ms => ms,
                        _ => return Err(self.delay_bound_error()),
                    },
                    _ => return self.fail(&["number"]),
                };
                self.pos += 1;
                ProofStep::Delay(ms)
            }
            Some(Tok::Kw(Keyword::Abort)) => {
                self.pos += 1;
                ProofStep::Abort
            }
            Some(Tok::Kw(Keyword::Use)) => {
                self.pos += 1;
                ProofStep::Use(self.ident()?)
            }
            _ => return self.fail(&["abort", "check", "delay", "qed", "use"]),
        };
        self.expect_sym(Sym::Dot, &["."])?;
        Ok(step)
    }

    fn delay_bound_error(&self) -> ParseError {
        ParseError {
            offset: self.offset(),
            expected: alloc::vec![alloc::format!("number at most {}", self.opts.max_delay_ms)],
        }
    }

    /// Returns the proposition and the token set that may legally follow it
    /// besides the caller's terminator.
    fn prop(&mut self) -> PResult<(Prop, &'static [&'static str])> {
        if self.eat_kw(Keyword::True) {
            return Ok((Prop::True, &["."]));
        }
        if self.eat_kw(Keyword::False) {
            return Ok((Prop::False, &["."]));
        }
        if !matches!(self.peek(), Some(Tok::Nat(_) | Tok::Ident(_) | Tok::Sym(Sym::LParen))) {
            return self.fail(&["(", "false", "identifier", "number", "true"]);
        }
        let lhs = self.expr()?;
        let op = match self.peek() {
            Some(Tok::Sym(Sym::Eq)) => CmpOp::Eq,
            Some(Tok::Sym(Sym::Lt)) => CmpOp::Lt,
            Some(Tok::Sym(Sym::Le)) => CmpOp::Le,
            _ => return self.fail(&["*", "+", "<", "<=", "="]),
        };
        self.pos += 1;
        let rhs = self.expr()?;
        Ok((Prop::Cmp { lhs, op, rhs }, &["*", "+", "."]))
    }

    fn expr(&mut self) -> PResult<Expr> {
        let mut acc = self.term()?;
        while self.eat_sym(Sym::Plus) {
            acc = Expr::Add(Box::new(acc), Box::new(self.term()?));
        }
        Ok(acc)
    }

    fn term(&mut self) -> PResult<Expr> {
        let mut acc = self.atom()?;
        while self.eat_sym(Sym::Star) {
            acc = Expr::Mul(Box::new(acc), Box::new(self.atom()?));
        }
        Ok(acc)
    }

    fn atom(&mut self) -> PResult<Expr> {
        match self.peek() {
            Some(Tok::Nat(digits)) => {
                self.pos += 1;
                let n = BigUint::parse_bytes(digits.as_bytes(), 10).expect("lexer yields only digits");
                Ok(Expr::Nat(n))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                Ok(Expr::Ident(name.to_string()))
            }
            Some(Tok::Sym(Sym::LParen)) => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect_sym(Sym::RParen, &["*", "+", ")"])?;
                Ok(inner)
            }
            _ => self.fail(&["(", "identifier", "number"]),
        }
    }
}

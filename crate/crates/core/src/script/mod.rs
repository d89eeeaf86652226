//! The toy proof-script language: items, evaluation and proof checking.

mod ast;
mod eval;
mod lexer;
mod parser;

pub use ast::{canonical_text, CmpOp, Expr, Item, ItemKind, Payload, ProofStep, Prop};
pub use eval::{
    check_proof, decode_bindings, elaborate, eval_expr, eval_prop, evidence, CheckOutcome, FailPoint, NoSleep,
    NumEnv, Sleeper, UnresolvedIdent,
};
pub use parser::{
    parse_document, parse_document_with, parse_spans, Malformed, ParseError, ParseOptions, ParsedSpan,
    DEFAULT_MAX_DELAY_MS,
};

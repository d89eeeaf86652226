//! Evaluation, statement elaboration and proof checking.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::ast::{CmpOp, Expr, Item, Payload, ProofStep, Prop};
use crate::hash::Hash256;

/// Numeric bindings from defs plus the names of lemmas stated so far.
///
/// A name bound twice keeps only its latest value, so lookups always see
/// the binding closest before the evaluation point.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NumEnv {
    defs: BTreeMap<String, Arc<BigUint>>,
    lemmas: BTreeSet<String>,
}

const TAG_DEF: u8 = 1;
const TAG_LEMMA: u8 = 2;

impl NumEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: impl Into<Arc<BigUint>>) {
        self.defs.insert(name.into(), value.into());
    }

    pub fn state_lemma(&mut self, name: impl Into<String>) {
        self.lemmas.insert(name.into());
    }

    pub fn lookup(&self, name: &str) -> Option<&BigUint> {
        self.defs.get(name).map(|v| &**v)
    }

    pub fn has_lemma(&self, name: &str) -> bool {
        self.lemmas.contains(name)
    }

    pub fn defs(&self) -> impl Iterator<Item = (&str, &Arc<BigUint>)> {
        self.defs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn lemmas(&self) -> impl Iterator<Item = &str> {
        self.lemmas.iter().map(String::as_str)
    }

    /// Canonical encoding of one def binding:
    /// `0x01 ‖ u32be(len name) ‖ name ‖ u32be(len value) ‖ value (big-endian magnitude)`.
    pub fn encode_binding(name: &str, value: &BigUint, out: &mut Vec<u8>) {
        let bytes = value.to_bytes_be();
        out.push(TAG_DEF);
        out.extend_from_slice(&(name.len() as u32).to_be_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(&bytes);
    }

    /// Canonical serialization: every binding in name order, then every
    /// lemma name as `0x02 ‖ u32be(len) ‖ name`, also in name order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, value) in &self.defs {
            Self::encode_binding(name, value, &mut out);
        }
        for name in &self.lemmas {
            out.push(TAG_LEMMA);
            out.extend_from_slice(&(name.len() as u32).to_be_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        out
    }

    pub fn fingerprint(&self) -> Hash256 {
        Hash256::of(&self.canonical_bytes())
    }
}

/// Decodes a concatenation of canonical binding encodings.
pub fn decode_bindings(mut bytes: &[u8]) -> Option<Vec<(String, BigUint)>> {
    fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
        if bytes.len() < n {
            return None;
        }
        let (head, tail) = bytes.split_at(n);
        *bytes = tail;
        Some(head)
    }
    fn take_len(bytes: &mut &[u8]) -> Option<usize> {
        let raw: [u8; 4] = take(bytes, 4)?.try_into().ok()?;
        Some(u32::from_be_bytes(raw) as usize)
    }
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if take(&mut bytes, 1)? != [TAG_DEF] {
            return None;
        }
        let name_len = take_len(&mut bytes)?;
        let name = core::str::from_utf8(take(&mut bytes, name_len)?).ok()?.to_string();
        let value_len = take_len(&mut bytes)?;
        let value = BigUint::from_bytes_be(take(&mut bytes, value_len)?);
        out.push((name, value));
    }
    Some(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnresolvedIdent(pub String);

impl fmt::Display for UnresolvedIdent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unresolved identifier: {}", self.0)
    }
}

impl core::error::Error for UnresolvedIdent {}

pub fn eval_expr(e: &Expr, env: &NumEnv) -> Result<BigUint, UnresolvedIdent> {
    Ok(match e {
        Expr::Nat(n) => n.clone(),
        Expr::Ident(name) => env.lookup(name).cloned().ok_or_else(|| UnresolvedIdent(name.clone()))?,
        Expr::Add(l, r) => eval_expr(l, env)? + eval_expr(r, env)?,
        Expr::Mul(l, r) => eval_expr(l, env)? * eval_expr(r, env)?,
    })
}

pub fn eval_prop(p: &Prop, env: &NumEnv) -> Result<bool, UnresolvedIdent> {
    Ok(match p {
        Prop::True => true,
        Prop::False => false,
        Prop::Cmp { lhs, op, rhs } => {
            let (l, r) = (eval_expr(lhs, env)?, eval_expr(rhs, env)?);
            match op {
                CmpOp::Eq => l == r,
                CmpOp::Lt => l < r,
                CmpOp::Le => l <= r,
            }
        }
    })
}

/// Blocks the calling executor. Injected so that tests can run proofs on a
/// virtual clock.
pub trait Sleeper {
    fn sleep_ms(&self, ms: u64);
}

impl<S: Sleeper + ?Sized> Sleeper for &S {
    fn sleep_ms(&self, ms: u64) {
        (**self).sleep_ms(ms)
    }
}

/// A sleeper that returns immediately.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoSleep;

impl Sleeper for NoSleep {
    fn sleep_ms(&self, _ms: u64) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailPoint {
    Step(usize),
    Final,
}

impl fmt::Display for FailPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailPoint::Step(i) => write!(f, "step {i}"),
            FailPoint::Final => f.write_str("final"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "lowercase")]
pub enum CheckOutcome {
    Ok { evidence: Hash256 },
    Fail { at: FailPoint, message: String },
}

impl CheckOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, CheckOutcome::Ok { .. })
    }

    fn fail(at: FailPoint, message: impl Into<String>) -> Self {
        CheckOutcome::Fail { at, message: message.into() }
    }
}

/// Evidence for a checked lemma: SHA-256 of the canonical statement text
/// followed by the raw environment fingerprint.
pub fn evidence(statement_text: &str, env_fingerprint: &Hash256) -> Hash256 {
    Hash256::of_parts(&[statement_text.as_bytes(), env_fingerprint.as_bytes()])
}

/// Runs a lemma's proof against the environment that precedes it.
///
/// The outcome is a pure function of the lemma and the environment contents;
/// `Use` only needs the named lemma to be stated, never its proof.
pub fn check_proof(lemma: &Item, env: &NumEnv, sleeper: &dyn Sleeper) -> CheckOutcome {
    let Payload::Lemma { statement, body } = &lemma.payload else {
        return CheckOutcome::fail(FailPoint::Final, "not a lemma");
    };
    for (index, step) in body.iter().enumerate() {
        let at = FailPoint::Step(index);
        match step {
            ProofStep::Check(prop) => match eval_prop(prop, env) {
                Ok(true) => {}
                Ok(false) => return CheckOutcome::fail(at, format!("check failed: {prop}")),
                Err(e) => return CheckOutcome::fail(at, e.to_string()),
            },
            ProofStep::Delay(ms) => sleeper.sleep_ms(*ms),
            ProofStep::Abort => return CheckOutcome::fail(at, "aborted"),
            ProofStep::Use(name) => {
                if !env.has_lemma(name) {
                    return CheckOutcome::fail(at, format!("unknown lemma: {name}"));
                }
            }
        }
    }
    match eval_prop(statement, env) {
        Ok(true) => CheckOutcome::Ok { evidence: evidence(&lemma.statement_text, &env.fingerprint()) },
        Ok(false) => CheckOutcome::fail(FailPoint::Final, format!("statement does not hold: {statement}")),
        Err(e) => CheckOutcome::fail(FailPoint::Final, e.to_string()),
    }
}

/// Elaborates an item's statement on top of `env`, producing the next
/// spine state. Defs are evaluated and bound; lemma statements only need
/// their identifiers to resolve.
pub fn elaborate(item: &Item, env: &NumEnv) -> Result<NumEnv, UnresolvedIdent> {
    let mut next = env.clone();
    match &item.payload {
        Payload::Def(value) => next.bind(item.name.clone(), eval_expr(value, env)?),
        Payload::Lemma { statement, .. } => {
            let mut missing = None;
            statement.for_each_ident(&mut |name| {
                if missing.is_none() && env.lookup(name).is_none() {
                    missing = Some(name.to_string());
                }
            });
            if let Some(name) = missing {
                return Err(UnresolvedIdent(name));
            }
            next.state_lemma(item.name.clone());
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::script::parse_document;
    use alloc::vec;
    use core::cell::Cell;

    fn expr(src: &str) -> Expr {
        let items = parse_document(&format!("def x = {src} .")).unwrap();
        match &items[0].payload {
            Payload::Def(e) => e.clone(),
            _ => unreachable!(),
        }
    }

    fn prop(src: &str) -> Prop {
        let items = parse_document(&format!("lemma x : {src} . proof qed .")).unwrap();
        match &items[0].payload {
            Payload::Lemma { statement, .. } => statement.clone(),
            _ => unreachable!(),
        }
    }

    fn env_a2() -> NumEnv {
        let mut env = NumEnv::new();
        env.bind("a", BigUint::from(2u32));
        env
    }

    #[test]
    fn eval_expr_examples() {
        assert_eq!(eval_expr(&expr("a*3+1"), &env_a2()), Ok(BigUint::from(7u32)));
        assert_eq!(eval_expr(&expr("b"), &NumEnv::new()), Err(UnresolvedIdent("b".into())));
        assert_eq!(eval_expr(&expr("2+3*4"), &NumEnv::new()), Ok(BigUint::from(14u32)));
    }

    #[test]
    fn eval_is_arbitrary_precision() {
        let big = eval_expr(&expr("4294967296 * 4294967296 * 4294967296"), &NumEnv::new()).unwrap();
        assert_eq!(big.to_string(), "79228162514264337593543950336");
    }

    #[test]
    fn eval_prop_examples() {
        assert_eq!(eval_prop(&prop("true"), &NumEnv::new()), Ok(true));
        assert_eq!(eval_prop(&prop("false"), &env_a2()), Ok(false));
        assert_eq!(eval_prop(&prop("a = 2"), &env_a2()), Ok(true));
        assert_eq!(eval_prop(&prop("a < 2"), &env_a2()), Ok(false));
        assert_eq!(eval_prop(&prop("a <= 2"), &env_a2()), Ok(true));
        assert_eq!(eval_prop(&prop("1 = zz"), &env_a2()), Err(UnresolvedIdent("zz".into())));
    }

    fn lemma(src: &str) -> Item {
        parse_document(src).unwrap().remove(0)
    }

    // Expected digests computed outside Rust (Python hashlib over the
    // canonical byte layout) and frozen here.
    #[test]
    fn check_proof_evidence_vectors() {
        let env = env_a2();
        assert_eq!(
            env.fingerprint().to_hex(),
            "e558dd24f88c0d58f9f25f8697ee4c0000bf7452c015356c04c6c74382dd28dd"
        );
        let out = check_proof(&lemma("lemma   t :\n  a = 2 . proof qed ."), &env, &NoSleep);
        let CheckOutcome::Ok { evidence } = out else { panic!("expected ok, got {out:?}") };
        assert_eq!(evidence.to_hex(), "3c6d97415b931ded22ce0e88eff90e5ae871ed499ab4dc2dd3354f0cf6cd7b95");
        let out = check_proof(&lemma("lemma t : true . proof qed ."), &NumEnv::new(), &NoSleep);
        assert_eq!(
            out,
            CheckOutcome::Ok {
                evidence: Hash256::from_hex("956b5c975d1aa35466be9d837feabd9a1c5318055713a0fef41cc49350edfe6f")
                    .unwrap()
            }
        );
    }

    #[test]
    fn check_proof_abort_and_failed_check() {
        let env = env_a2();
        assert_eq!(
            check_proof(&lemma("lemma t : a = 2 . proof abort . qed ."), &env, &NoSleep),
            CheckOutcome::Fail { at: FailPoint::Step(0), message: "aborted".into() }
        );
        assert_eq!(
            check_proof(&lemma("lemma t : a = 2 . proof check 1 = 2 . qed ."), &env, &NoSleep),
            CheckOutcome::Fail { at: FailPoint::Step(0), message: "check failed: 1 = 2".into() }
        );
    }

    #[test]
    fn check_proof_final_statement_and_use() {
        let mut env = env_a2();
        assert_eq!(
            check_proof(&lemma("lemma t : a = 3 . proof qed ."), &env, &NoSleep),
            CheckOutcome::Fail { at: FailPoint::Final, message: "statement does not hold: a = 3".into() }
        );
        let with_use = lemma("lemma t : true . proof use s . qed .");
        assert_eq!(
            check_proof(&with_use, &env, &NoSleep),
            CheckOutcome::Fail { at: FailPoint::Step(0), message: "unknown lemma: s".into() }
        );
        env.state_lemma("s");
        assert!(check_proof(&with_use, &env, &NoSleep).is_ok());
    }

    #[test]
    fn delay_goes_through_the_sleeper() {
        struct Recorder(Cell<u64>);
        impl Sleeper for Recorder {
            fn sleep_ms(&self, ms: u64) {
                self.0.set(self.0.get() + ms);
            }
        }
        let rec = Recorder(Cell::new(0));
        let out = check_proof(&lemma("lemma t : true . proof delay 30 . delay 12 . qed ."), &NumEnv::new(), &rec);
        assert!(out.is_ok());
        assert_eq!(rec.0.get(), 42);
    }

    #[test]
    fn elaborate_binds_defs_and_states_lemmas() {
        let items = parse_document("def a = 2 . lemma t : a = 5 . proof qed . lemma u : b = 1 . proof qed .").unwrap();
        let e1 = elaborate(&items[0], &NumEnv::new()).unwrap();
        assert_eq!(e1.lookup("a"), Some(&BigUint::from(2u32)));
        let e2 = elaborate(&items[1], &e1).unwrap();
        assert!(e2.has_lemma("t"));
        assert_eq!(elaborate(&items[2], &e2), Err(UnresolvedIdent("b".into())));
    }

    #[test]
    fn canonical_bindings_round_trip() {
        let mut env = NumEnv::new();
        env.bind("a", BigUint::from(0u32));
        env.bind("bb", BigUint::from(70000u32));
        let mut bytes = Vec::new();
        for (name, value) in env.defs() {
            NumEnv::encode_binding(name, value, &mut bytes);
        }
        let decoded = decode_bindings(&bytes).unwrap();
        assert_eq!(decoded, vec![("a".into(), BigUint::from(0u32)), ("bb".into(), BigUint::from(70000u32))]);
        assert_eq!(decode_bindings(&bytes[..bytes.len() - 1]), None);
    }
}

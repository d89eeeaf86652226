//! Test support: a from-scratch sequential checker, random documents and
//! edit traces, and a client-side reducer over feedback lines.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;
use proofkernel::kernel::KernelConfig;
use proofkernel::sim::SimRuntime;
use proofkernel_core::dag::SpanState;
use proofkernel_core::document::SpanId;
use proofkernel_core::script::{CmpOp, Expr, ParseOptions, ParsedSpan, Payload, ProofStep, Prop, parse_spans};
use rand::Rng;
use rand::seq::SliceRandom;
use serde_json::{Value, json};

// ---- oracle -----------------------------------------------------------------

/// Verdict per span from one sequential pass over the text: defs are bound,
/// lemma statements entered, proofs checked in place, and everything after
/// the first span that cannot elaborate is orphaned.
pub fn oracle(text: &str) -> Vec<SpanState> {
    let mut defs: BTreeMap<String, BigUint> = BTreeMap::new();
    let mut lemmas: BTreeSet<String> = BTreeSet::new();
    let mut broken = false;
    let mut out = Vec::new();
    for span in parse_spans(text, &ParseOptions::default()) {
        if broken {
            out.push(SpanState::Orphaned);
            continue;
        }
        let ParsedSpan::Item(item) = span else {
            broken = true;
            out.push(SpanState::Fail);
            continue;
        };
        match &item.payload {
            Payload::Def(e) => match value(e, &defs) {
                Some(v) => {
                    defs.insert(item.name.clone(), v);
                    out.push(SpanState::Ok);
                }
                None => {
                    broken = true;
                    out.push(SpanState::Fail);
                }
            },
            Payload::Lemma { statement, body } => {
                if truth(statement, &defs).is_none() {
                    broken = true;
                    out.push(SpanState::Fail);
                    continue;
                }
                let steps_ok = body.iter().all(|step| match step {
                    ProofStep::Check(p) => truth(p, &defs) == Some(true),
                    ProofStep::Delay(_) => true,
                    ProofStep::Abort => false,
                    ProofStep::Use(name) => lemmas.contains(name),
                });
                let ok = steps_ok && truth(statement, &defs) == Some(true);
                out.push(if ok { SpanState::Ok } else { SpanState::Fail });
                lemmas.insert(item.name.clone());
            }
        }
    }
    out
}

fn value(e: &Expr, defs: &BTreeMap<String, BigUint>) -> Option<BigUint> {
    Some(match e {
        Expr::Nat(n) => n.clone(),
        Expr::Ident(x) => defs.get(x)?.clone(),
        Expr::Add(l, r) => value(l, defs)? + value(r, defs)?,
        Expr::Mul(l, r) => value(l, defs)? * value(r, defs)?,
    })
}

fn truth(p: &Prop, defs: &BTreeMap<String, BigUint>) -> Option<bool> {
    Some(match p {
        Prop::True => true,
        Prop::False => false,
        Prop::Cmp { lhs, op, rhs } => {
            let (l, r) = (value(lhs, defs)?, value(rhs, defs)?);
            match op {
                CmpOp::Eq => l == r,
                CmpOp::Lt => l < r,
                CmpOp::Le => l <= r,
            }
        }
    })
}

// ---- generator --------------------------------------------------------------

const DEF_NAMES: &[&str] = &["a", "b", "c", "x", "y"];
const LEMMA_NAMES: &[&str] = &["p", "q", "r", "s", "a"];

pub struct Gen<R> {
    pub rng: R,
    pub max_delay: u64,
}

impl<R: Rng> Gen<R> {
    pub fn new(rng: R) -> Self {
        Gen { rng, max_delay: 30 }
    }

    fn name(&mut self, pool: &[&str]) -> String {
        let n = pool.choose(&mut self.rng).unwrap().to_string();
        // Occasionally a name nothing defines.
        if self.rng.gen_ratio(1, 25) { format!("{n}{n}") } else { n }
    }

    fn expr(&mut self, depth: u32) -> String {
        match self.rng.gen_range(0..if depth == 0 { 2 } else { 4 }) {
            0 => self.rng.gen_range(0..8u32).to_string(),
            1 => self.name(DEF_NAMES),
            2 => format!("({} + {})", self.expr(depth - 1), self.expr(depth - 1)),
            _ => format!("{} * {}", self.expr(depth - 1), self.expr(depth - 1)),
        }
    }

    fn prop(&mut self) -> String {
        match self.rng.gen_range(0..10) {
            0 => "true".into(),
            1 => "false".into(),
            _ => {
                let op = ["=", "<", "<="].choose(&mut self.rng).unwrap();
                format!("{} {op} {}", self.expr(2), self.expr(1))
            }
        }
    }

    pub fn body(&mut self) -> String {
        let mut s = String::from(" proof");
        for _ in 0..self.rng.gen_range(0..4) {
            let step = match self.rng.gen_range(0..12) {
                0..=3 => format!("check {}", self.prop()),
                4..=7 => format!("delay {}", self.rng.gen_range(0..=self.max_delay)),
                8 => "abort".into(),
                _ => format!("use {}", self.name(LEMMA_NAMES)),
            };
            s.push_str(&format!(" {step} ."));
        }
        s.push_str(" qed .");
        s
    }

    pub fn statement(&mut self) -> String {
        format!("lemma {} : {} .", self.name(LEMMA_NAMES), self.prop())
    }

    fn garbage(&mut self) -> String {
        match self.rng.gen_range(0..6) {
            0 => format!("lemma {} proof qed .", self.name(LEMMA_NAMES)),
            1 => "def = 3 .".into(),
            2 => format!("lemma {} : 1 < . proof qed .", self.name(LEMMA_NAMES)),
            3 => "@@ junk".into(),
            4 => format!("lemma {} : true . proof delay 99999 . qed .", self.name(LEMMA_NAMES)),
            _ => format!("def {} = {}", self.name(DEF_NAMES), self.expr(1)),
        }
    }

    /// One line of document text.
    pub fn piece(&mut self) -> String {
        let mut s = match self.rng.gen_range(0..40) {
            0..=13 => format!("def {} = {} .", self.name(DEF_NAMES), self.expr(2)),
            14..=37 => format!("{}{}", self.statement(), self.body()),
            _ => self.garbage(),
        };
        if self.rng.gen_ratio(1, 15) {
            s.push_str(" -- note");
        }
        s
    }

    pub fn document(&mut self, max_pieces: usize) -> Vec<String> {
        let n = self.rng.gen_range(0..=max_pieces);
        (0..n).map(|_| self.piece()).collect()
    }

    /// A random edit of `pieces`, applied in place. Returns the matching
    /// text edit against the joined text (`from`, `to`, `insert`).
    pub fn edit(&mut self, pieces: &mut Vec<String>, max_pieces: usize) -> (usize, usize, String) {
        let offset = |pieces: &[String], k: usize| pieces[..k].iter().map(|p| p.len() + 1).sum::<usize>();
        let choice = if pieces.is_empty() { 50 } else { self.rng.gen_range(0..100) };
        match choice {
            0..=29 => {
                // Replace a lemma's proof, keeping its statement.
                let k = self.rng.gen_range(0..pieces.len());
                let at = pieces[k].find(" proof").unwrap_or(pieces[k].len());
                let body = self.body();
                let start = offset(pieces, k) + at;
                let old_len = pieces[k].len() - at;
                pieces[k].replace_range(at.., &body);
                (start, start + old_len, body)
            }
            30..=44 => {
                // Replace the statement part.
                let k = self.rng.gen_range(0..pieces.len());
                let at = pieces[k].find(" proof").unwrap_or(pieces[k].len());
                let stmt = if self.rng.gen_bool(0.7) { self.statement() } else { self.piece() };
                let start = offset(pieces, k);
                pieces[k].replace_range(..at, &stmt);
                (start, start + at, stmt)
            }
            45..=59 if pieces.len() < max_pieces => {
                let k = self.rng.gen_range(0..=pieces.len());
                let piece = self.piece();
                let start = offset(pieces, k);
                let insert = if k == pieces.len() && k > 0 {
                    // Appending: the separator goes before the new line.
                    let start = start - 1;
                    pieces.push(piece.clone());
                    return (start, start, format!("\n{piece}"));
                } else if pieces.is_empty() {
                    piece.clone()
                } else {
                    format!("{piece}\n")
                };
                pieces.insert(k, piece);
                (start, start, insert)
            }
            60..=69 if !pieces.is_empty() => {
                let k = self.rng.gen_range(0..pieces.len());
                let start = offset(pieces, k);
                let removed = pieces.remove(k);
                if pieces.is_empty() {
                    (0, removed.len(), String::new())
                } else if k == pieces.len() {
                    (start - 1, start + removed.len(), String::new())
                } else {
                    (start, start + removed.len() + 1, String::new())
                }
            }
            70..=84 => {
                // Whole-line replacement.
                let k = self.rng.gen_range(0..pieces.len());
                let piece = self.piece();
                let start = offset(pieces, k);
                let old = std::mem::replace(&mut pieces[k], piece.clone());
                (start, start + old.len(), piece)
            }
            _ => {
                // Raw splice inside one line.
                let k = self.rng.gen_range(0..pieces.len());
                let len = pieces[k].len();
                let a = self.rng.gen_range(0..=len);
                let b = (a + self.rng.gen_range(0..4)).min(len);
                let junk: String = (0..self.rng.gen_range(0..4))
                    .map(|_| *[" ", ".", "x", "1", "+", "@", ":", "q", "-"].choose(&mut self.rng).unwrap())
                    .collect();
                let start = offset(pieces, k);
                pieces[k].replace_range(a..b, &junk);
                (start + a, start + b, junk)
            }
        }
    }
}

pub fn join(pieces: &[String]) -> String {
    pieces.join("\n")
}

// ---- protocol helpers -------------------------------------------------------

pub fn open_req(id: u64, text: &str) -> String {
    json!({"id": id, "cmd": "open", "text": text}).to_string()
}

pub fn edit_req(id: u64, base: u64, from: usize, to: usize, insert: &str) -> String {
    json!({"id": id, "cmd": "edit", "base_version": base, "from": from, "to": to, "insert": insert}).to_string()
}

pub fn observe_req(id: u64, span: SpanId) -> String {
    json!({"id": id, "cmd": "observe", "span": span}).to_string()
}

/// The state the client would display for each span: the state of the
/// highest-tag feedback frame seen for it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClientView {
    spans: BTreeMap<u64, (u64, String)>,
}

impl ClientView {
    pub fn apply(&mut self, line: &str) {
        let v: Value = serde_json::from_str(line).expect("server lines are JSON");
        let Some(f) = v.get("feedback") else { return };
        let span = f["span"].as_u64().unwrap();
        let tag = f["tag"].as_u64().unwrap();
        let state = f["state"].as_str().unwrap().to_string();
        let entry = self.spans.entry(span).or_insert((0, String::new()));
        if tag > entry.0 {
            *entry = (tag, state);
        }
    }

    pub fn state(&self, span: SpanId) -> Option<&str> {
        self.spans.get(&span.0).map(|(_, s)| s.as_str())
    }
}

pub fn states(map: &[(SpanId, SpanState)]) -> Vec<SpanState> {
    map.iter().map(|(_, s)| *s).collect()
}

/// Drives one random document and edit trace through a simulated kernel.
/// Returns the final text and the runtime after quiescence.
pub fn run_random_trace<R: Rng>(
    g: &mut Gen<R>,
    workers: usize,
    max_pieces: usize,
    max_edits: usize,
) -> (String, SimRuntime) {
    let mut pieces = g.document(max_pieces);
    let mut sim = SimRuntime::new(KernelConfig::default(), workers);
    let mut id = 1;
    sim.submit_at(0.0, open_req(id, &join(&pieces)));
    let mut t = 0.0;
    for _ in 0..g.rng.gen_range(0..=max_edits) {
        t += g.rng.gen_range(0..40) as f64;
        sim.run_until(t);
        if g.rng.gen_ratio(1, 6) {
            if let Some(doc) = sim.kernel().document().filter(|d| !d.spans().is_empty()) {
                let span = doc.spans()[g.rng.gen_range(0..doc.spans().len())].id;
                id += 1;
                sim.submit_at(t, observe_req(id, span));
            }
        }
        let (from, to, insert) = g.edit(&mut pieces, max_pieces);
        id += 1;
        sim.submit_at(t, edit_req(id, sim.kernel().version(), from, to, &insert));
        sim.run_until(t);
    }
    sim.run_until_idle();
    (join(&pieces), sim)
}

/// Compares a quiescent simulation against the oracle on `text`. Returns a
/// description of the first disagreement.
pub fn compare_with_oracle(text: &str, sim: &SimRuntime) -> Result<(), String> {
    let kernel = sim.kernel();
    let doc = kernel.document().ok_or("no document")?;
    if doc.text() != text {
        return Err(format!("kernel text diverged:\n{:?}\nvs\n{:?}", doc.text(), text));
    }
    let got = states(&kernel.status_map());
    let want = oracle(text);
    if got != want {
        return Err(format!("text {text:?}\nkernel {got:?}\noracle {want:?}"));
    }
    if !kernel.is_idle() || !kernel.graph().unwrap().is_quiescent() {
        return Err("not quiescent".into());
    }
    let mut view = ClientView::default();
    for (_, line) in sim.client_log() {
        view.apply(line);
    }
    for (span, state) in kernel.status_map() {
        if view.state(span) != Some(state.as_str()) {
            return Err(format!("client shows {:?} for span {span}, kernel {state:?}", view.state(span)));
        }
    }
    Ok(())
}

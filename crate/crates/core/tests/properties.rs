use std::cell::Cell;

use num_bigint::BigUint;
use proofkernel_core::document::{DocumentVersion, Edit};
use proofkernel_core::hash::Hash256;
use proofkernel_core::promise::ProofPromise;
use proofkernel_core::script::{
    CmpOp, Expr, NumEnv, ParseOptions, Payload, ProofStep, Prop, Sleeper, check_proof, elaborate, evidence,
    parse_document,
};
use proptest::prelude::*;

fn expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (0u64..1000).prop_map(|n| Expr::Nat(BigUint::from(n))),
        prop::sample::select(vec!["x", "y", "zz"]).prop_map(|s| Expr::Ident(s.to_string())),
    ];
    leaf.prop_recursive(4, 16, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
        ]
    })
}

fn prop_() -> impl Strategy<Value = Prop> {
    prop_oneof![
        Just(Prop::True),
        Just(Prop::False),
        (expr(), prop::sample::select(vec![CmpOp::Eq, CmpOp::Lt, CmpOp::Le]), expr())
            .prop_map(|(lhs, op, rhs)| Prop::Cmp { lhs, op, rhs }),
    ]
}

fn step() -> impl Strategy<Value = ProofStep> {
    prop_oneof![
        prop_().prop_map(ProofStep::Check),
        (0u64..50).prop_map(ProofStep::Delay),
        Just(ProofStep::Abort),
        prop::sample::select(vec!["p", "q"]).prop_map(|s| ProofStep::Use(s.to_string())),
    ]
}

fn payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        expr().prop_map(Payload::Def),
        (prop_(), prop::collection::vec(step(), 0..4)).prop_map(|(statement, body)| Payload::Lemma { statement, body }),
    ]
}

fn render(name: &str, p: &Payload) -> String {
    match p {
        Payload::Def(e) => format!("def {name} = {e} ."),
        Payload::Lemma { statement, body } => {
            let steps: Vec<String> = body.iter().map(ToString::to_string).collect();
            format!("lemma {name} : {statement} . proof {} qed .", steps.join(" "))
        }
    }
}

struct Counting(Cell<u64>);

impl Sleeper for Counting {
    fn sleep_ms(&self, ms: u64) {
        self.0.set(self.0.get() + ms);
    }
}

fn env() -> NumEnv {
    let mut env = NumEnv::new();
    env.bind("x", BigUint::from(3u32));
    env.bind("y", BigUint::from(7u32));
    env.state_lemma("p");
    env
}

proptest! {
    #[test]
    fn printed_items_parse_back(payloads in prop::collection::vec(payload(), 1..6)) {
        let text: Vec<String> = payloads.iter().enumerate().map(|(i, p)| render(&format!("n{i}"), p)).collect();
        let items = parse_document(&text.join("\n")).unwrap();
        prop_assert_eq!(items.len(), payloads.len());
        for (item, p) in items.iter().zip(&payloads) {
            prop_assert_eq!(&item.payload, p);
        }
    }

    #[test]
    fn proof_checking_is_deterministic_and_pure(p in payload()) {
        let text = render("t", &p);
        let item = &parse_document(&text).unwrap()[0];
        let env = env();
        let before = env.fingerprint();
        let (s1, s2) = (Counting(Cell::new(0)), Counting(Cell::new(0)));
        if let Payload::Lemma { body, .. } = &p {
            let a = check_proof(item, &env, &s1);
            let b = check_proof(item, &env, &s2);
            prop_assert_eq!(a, b);
            prop_assert_eq!(s1.0.get(), s2.0.get());
            let requested: u64 = body.iter().map(|s| if let ProofStep::Delay(ms) = s { *ms } else { 0 }).sum();
            prop_assert!(s1.0.get() <= requested);
        } else {
            prop_assert_eq!(elaborate(item, &env).is_ok(), elaborate(item, &env).is_ok());
        }
        prop_assert_eq!(env.fingerprint(), before);
    }

    #[test]
    fn edits_match_a_fresh_parse(
        payloads in prop::collection::vec(payload(), 0..5),
        a in any::<prop::sample::Index>(),
        b in any::<prop::sample::Index>(),
        insert in "[a-z0-9 .:=+*<]{0,12}",
    ) {
        let text = payloads.iter().enumerate().map(|(i, p)| render(&format!("n{i}"), p)).collect::<Vec<_>>().join("\n");
        let doc = DocumentVersion::open(text.clone(), 1, 1, ParseOptions::default());
        let (mut from, mut to) = (a.index(text.len() + 1), b.index(text.len() + 1));
        if from > to {
            std::mem::swap(&mut from, &mut to);
        }
        let next = doc.apply_edit(&Edit { base_version: 1, from, to, insert: insert.clone() }).unwrap();
        let expected = format!("{}{insert}{}", &text[..from], &text[to..]);
        prop_assert_eq!(next.text(), expected.as_str());
        prop_assert_eq!(next.version(), 2);
        let fresh = DocumentVersion::open(expected, 2, 1, ParseOptions::default());
        prop_assert_eq!(next.parsed(), fresh.parsed());
        let ranges = |d: &DocumentVersion| d.spans().iter().map(|s| s.range.clone()).collect::<Vec<_>>();
        prop_assert_eq!(ranges(&next), ranges(&fresh));
    }

    #[test]
    fn evidence_separates_statements_and_environments(s in "[a-z ]{1,20}", t in "[a-z ]{1,20}", x in any::<[u8; 8]>()) {
        let fp = Hash256::of(&x);
        prop_assume!(s != t);
        prop_assert_ne!(evidence(&s, &fp), evidence(&t, &fp));
        prop_assert_ne!(evidence(&s, &fp), evidence(&s, &Hash256::of(&[x.as_slice(), b"!"].concat())));
    }

    #[test]
    fn promises_commit_at_most_once(commits in prop::collection::vec(any::<bool>(), 1..6)) {
        let mut p = ProofPromise::new(proofkernel_core::document::SpanId(1), None);
        let env = env();
        let item = &parse_document("lemma t : x < y . proof qed .").unwrap()[0];
        let outcome = check_proof(item, &env, &Counting(Cell::new(0)));
        let accepted: Vec<bool> = commits.iter().map(|&ran| p.commit(&outcome, ran)).collect();
        prop_assert!(accepted[0]);
        prop_assert!(accepted[1..].iter().all(|a| !a));
        prop_assert_eq!(p.force_count(), u32::from(commits[0]));
        prop_assert!(p.is_forced());
    }
}

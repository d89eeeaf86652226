//! Versioned documents, text edits and statement-versus-body change
//! classification.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::hash::Hash256;
use crate::script::{canonical_text, parse_spans, ItemKind, ParseError, ParseOptions, ParsedSpan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpanId(pub u64);

impl fmt::Display for SpanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Def,
    Lemma,
    /// Text that did not parse as an item.
    Malformed,
}

impl From<ItemKind> for SpanKind {
    fn from(kind: ItemKind) -> Self {
        match kind {
            ItemKind::Def => SpanKind::Def,
            ItemKind::Lemma => SpanKind::Lemma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub id: SpanId,
    pub kind: SpanKind,
    pub name: String,
    /// Hash of the canonical statement text (the whole text for defs and
    /// malformed spans).
    pub statement_hash: Hash256,
    /// Hash of the canonical `proof ... qed .` text; zero for non-lemmas.
    pub body_hash: Hash256,
    pub range: Range<usize>,
    pub introduced: u64,
}

impl Span {
    fn alignment_key(&self) -> (SpanKind, &str, &Hash256) {
        (self.kind, &self.name, &self.statement_hash)
    }

    fn same_content(&self, other: &Span) -> bool {
        self.alignment_key() == other.alignment_key() && self.body_hash == other.body_hash
    }
}

fn draft_span(text: &str, parsed: &ParsedSpan, version: u64) -> Span {
    match parsed {
        ParsedSpan::Item(item) => Span {
            id: SpanId(0),
            kind: item.kind().into(),
            name: item.name.clone(),
            statement_hash: Hash256::of(item.statement_text.as_bytes()),
            body_hash: item
                .body_range()
                .map_or(Hash256::ZERO, |r| Hash256::of(canonical_text(&text[r]).as_bytes())),
            range: item.range.clone(),
            introduced: version,
        },
        ParsedSpan::Malformed(m) => Span {
            id: SpanId(0),
            kind: SpanKind::Malformed,
            name: m.name_hint.clone().unwrap_or_default(),
            statement_hash: Hash256::of(canonical_text(&text[m.range.clone()]).as_bytes()),
            body_hash: Hash256::ZERO,
            range: m.range.clone(),
            introduced: version,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edit {
    pub base_version: u64,
    pub from: usize,
    pub to: usize,
    pub insert: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EditError {
    StaleBase { expected: u64, got: u64 },
    InvalidRange { from: usize, to: usize, len: usize },
}

impl fmt::Display for EditError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditError::StaleBase { expected, got } => {
                write!(f, "stale base: document is at version {expected}, edit targets {got}")
            }
            EditError::InvalidRange { from, to, len } => {
                write!(f, "invalid range {from}..{to} for text of {len} bytes")
            }
        }
    }
}

impl core::error::Error for EditError {}

/// One immutable version of a document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocumentVersion {
    version: u64,
    text: String,
    spans: Vec<Span>,
    parsed: Vec<ParsedSpan>,
    next_span_id: u64,
    opts: ParseOptions,
}

impl DocumentVersion {
    /// A fresh document at version 1 with span ids starting at 1.
    pub fn new(text: impl Into<String>) -> Self {
        Self::open(text, 1, 1, ParseOptions::default())
    }

    /// A fresh document at `version`, allocating span ids from `first_span_id`.
    pub fn open(text: impl Into<String>, version: u64, first_span_id: u64, opts: ParseOptions) -> Self {
        let text = text.into();
        let parsed = parse_spans(&text, &opts);
        let mut next_span_id = first_span_id;
        let spans = parsed
            .iter()
            .map(|p| {
                let mut span = draft_span(&text, p, version);
                span.id = SpanId(next_span_id);
                next_span_id += 1;
                span
            })
            .collect();
        DocumentVersion { version, text, spans, parsed, next_span_id, opts }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn parsed(&self) -> &[ParsedSpan] {
        &self.parsed
    }

    pub fn parse_options(&self) -> &ParseOptions {
        &self.opts
    }

    pub fn next_span_id(&self) -> u64 {
        self.next_span_id
    }

    pub fn parse_error(&self, index: usize) -> Option<&ParseError> {
        match self.parsed.get(index)? {
            ParsedSpan::Malformed(m) => Some(&m.error),
            ParsedSpan::Item(_) => None,
        }
    }

    pub fn index_of(&self, id: SpanId) -> Option<usize> {
        self.spans.iter().position(|s| s.id == id)
    }

    /// Splices the edit into the text and re-parses the whole document.
    /// Spans matched by [`align_spans`] keep their identity.
    pub fn apply_edit(&self, edit: &Edit) -> Result<DocumentVersion, EditError> {
        if edit.base_version != self.version {
            return Err(EditError::StaleBase { expected: self.version, got: edit.base_version });
        }
        let len = self.text.len();
        if edit.from > edit.to
            || edit.to > len
            || !self.text.is_char_boundary(edit.from)
            || !self.text.is_char_boundary(edit.to)
        {
            return Err(EditError::InvalidRange { from: edit.from, to: edit.to, len });
        }
        let mut text = String::with_capacity(len - (edit.to - edit.from) + edit.insert.len());
        text.push_str(&self.text[..edit.from]);
        text.push_str(&edit.insert);
        text.push_str(&self.text[edit.to..]);

        let version = self.version + 1;
        let parsed = parse_spans(&text, &self.opts);
        let mut spans: Vec<Span> = parsed.iter().map(|p| draft_span(&text, p, version)).collect();
        let mut next_span_id = self.next_span_id;
        let alignment = align_spans(&self.spans, &spans);
        for (span, inherited) in spans.iter_mut().zip(alignment) {
            match inherited {
                Some(old) => {
                    let old = &self.spans[old];
                    span.id = old.id;
                    span.introduced = old.introduced;
                }
                None => {
                    span.id = SpanId(next_span_id);
                    next_span_id += 1;
                }
            }
        }
        Ok(DocumentVersion { version, text, spans, parsed, next_span_id, opts: self.opts })
    }
}

/// Cells above which the quadratic alignment table is not built; the
/// unmatched middle region then gets fresh ids.
const MAX_ALIGN_CELLS: usize = 1 << 24;

/// Longest-common-subsequence alignment of `new` against `old` on
/// `(kind, name, statement-hash)`. Returns, per new span, the index of the
/// old span whose identity it inherits. Ties go to the earliest positions.
pub fn align_spans(old: &[Span], new: &[Span]) -> Vec<Option<usize>> {
    let mut out = vec![None; new.len()];
    let prefix = old.iter().zip(new).take_while(|(a, b)| a.alignment_key() == b.alignment_key()).count();
    for (i, slot) in out.iter_mut().enumerate().take(prefix) {
        *slot = Some(i);
    }
    let (old_rest, new_rest) = (&old[prefix..], &new[prefix..]);
    let suffix = old_rest
        .iter()
        .rev()
        .zip(new_rest.iter().rev())
        .take_while(|(a, b)| a.alignment_key() == b.alignment_key())
        .count();
    for k in 0..suffix {
        out[new.len() - 1 - k] = Some(old.len() - 1 - k);
    }
    let old_mid = &old_rest[..old_rest.len() - suffix];
    let new_mid = &new_rest[..new_rest.len() - suffix];
    let (m, n) = (old_mid.len(), new_mid.len());
    if m == 0 || n == 0 || (m + 1) * (n + 1) > MAX_ALIGN_CELLS {
        return out;
    }
    // table[i][j] = LCS length of old_mid[i..] and new_mid[j..]
    let width = n + 1;
    let mut table = vec![0u32; (m + 1) * width];
    for i in (0..m).rev() {
        for j in (0..n).rev() {
            table[i * width + j] = if old_mid[i].alignment_key() == new_mid[j].alignment_key() {
                table[(i + 1) * width + j + 1] + 1
            } else {
                table[(i + 1) * width + j].max(table[i * width + j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    while i < m && j < n {
        if old_mid[i].alignment_key() == new_mid[j].alignment_key()
            && table[i * width + j] == table[(i + 1) * width + j + 1] + 1
        {
            out[prefix + j] = Some(prefix + i);
            i += 1;
            j += 1;
        } else if table[(i + 1) * width + j] >= table[i * width + j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// What an edit invalidated, in terms of the new version's span indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InvalidationSet {
    /// First span whose statement changed; it and every later span must be
    /// re-elaborated.
    pub first_spine_invalid: Option<usize>,
    /// Lemmas before `first_spine_invalid` whose statement is unchanged but
    /// whose proof body differs.
    pub body_only: BTreeSet<usize>,
    /// Leading spans identical in statement and body.
    pub unchanged_prefix_len: usize,
}

impl InvalidationSet {
    pub fn is_empty(&self) -> bool {
        self.first_spine_invalid.is_none() && self.body_only.is_empty()
    }
}

/// Classifies the change from `old` to `new` position by position.
///
/// A span with equal kind, name and statement hash keeps its spine state;
/// if only its body hash differs it lands in `body_only`. The first position
/// that differs otherwise (or that exists only in `new`) invalidates the
/// spine from there on.
pub fn diff(old: &DocumentVersion, new: &DocumentVersion) -> InvalidationSet {
    let mut inv = InvalidationSet {
        unchanged_prefix_len: old.spans.iter().zip(&new.spans).take_while(|(a, b)| a.same_content(b)).count(),
        ..InvalidationSet::default()
    };
    for (i, (a, b)) in old.spans.iter().zip(&new.spans).enumerate() {
        if a.alignment_key() != b.alignment_key() {
            inv.first_spine_invalid = Some(i);
            return inv;
        }
        if a.body_hash != b.body_hash {
            inv.body_only.insert(i);
        }
    }
    if new.spans.len() > old.spans.len() {
        inv.first_spine_invalid = Some(old.spans.len());
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = "def a = 2 . lemma t : a = 2 . proof qed . lemma u : 1 < 2 . proof check true . qed .";

    fn edit(doc: &DocumentVersion, needle: &str, insert: &str) -> Edit {
        let from = doc.text().find(needle).expect("needle present");
        Edit { base_version: doc.version(), from, to: from + needle.len(), insert: insert.into() }
    }

    #[test]
    fn identity_edit_preserves_everything_but_the_version() {
        let v1 = DocumentVersion::new(THREE);
        let v2 = v1.apply_edit(&Edit { base_version: 1, from: 5, to: 5, insert: String::new() }).unwrap();
        assert_eq!(v2.version(), 2);
        assert_eq!(v1.spans(), v2.spans());
        assert_eq!(diff(&v1, &v2), InvalidationSet { unchanged_prefix_len: 3, ..Default::default() });
        assert!(diff(&v1, &v2).is_empty());
    }

    #[test]
    fn body_edit_keeps_id_and_statement_hash() {
        let v1 = DocumentVersion::new(THREE);
        let qed = v1.text().find("qed").unwrap();
        let v2 = v1.apply_edit(&Edit { base_version: 1, from: qed, to: qed, insert: "abort . ".into() }).unwrap();
        let (a, b) = (&v1.spans()[1], &v2.spans()[1]);
        assert_eq!(a.id, b.id);
        assert_eq!(a.statement_hash, b.statement_hash);
        assert_ne!(a.body_hash, b.body_hash);
        let inv = diff(&v1, &v2);
        assert_eq!(inv.first_spine_invalid, None);
        assert_eq!(inv.body_only, BTreeSet::from([1]));
        assert_eq!(inv.unchanged_prefix_len, 1);
    }

    #[test]
    fn stale_base_is_rejected() {
        let v1 = DocumentVersion::new(THREE);
        let v2 = v1.apply_edit(&Edit { base_version: 1, from: 0, to: 0, insert: " ".into() }).unwrap();
        let err = v2.apply_edit(&Edit { base_version: 1, from: 0, to: 0, insert: " ".into() }).unwrap_err();
        assert_eq!(err, EditError::StaleBase { expected: 2, got: 1 });
    }

    #[test]
    fn out_of_range_and_split_characters_are_rejected() {
        let v1 = DocumentVersion::new("def é = 1 .");
        let bad = |from, to| v1.apply_edit(&Edit { base_version: 1, from, to, insert: String::new() });
        assert!(matches!(bad(3, 2), Err(EditError::InvalidRange { .. })));
        assert!(matches!(bad(0, 99), Err(EditError::InvalidRange { .. })));
        assert!(matches!(bad(5, 5), Err(EditError::InvalidRange { .. })));
    }

    #[test]
    fn def_value_change_invalidates_spine_from_there() {
        let v1 = DocumentVersion::new(THREE);
        let v2 = v1.apply_edit(&edit(&v1, "def a = 2", "def a = 3")).unwrap();
        let inv = diff(&v1, &v2);
        assert_eq!(inv.first_spine_invalid, Some(0));
        assert!(inv.body_only.is_empty());
        // Defs are aligned on their full text, so the changed def gets a fresh id.
        assert_ne!(v1.spans()[0].id, v2.spans()[0].id);
        assert_eq!(v1.spans()[1].id, v2.spans()[1].id);
    }

    #[test]
    fn inserted_lemma_gets_fresh_id_and_others_keep_theirs() {
        // Hand LCS on 3 old spans [a, t, u] vs 4 new [a, x, t, u]: matches a, t, u.
        let v1 = DocumentVersion::new(THREE);
        let at = v1.text().find("lemma u").unwrap();
        let v2 = v1
            .apply_edit(&Edit { base_version: 1, from: at, to: at, insert: "lemma x : true . proof qed . ".into() })
            .unwrap();
        let old: Vec<_> = v1.spans().iter().map(|s| s.id).collect();
        let new: Vec<_> = v2.spans().iter().map(|s| s.id).collect();
        assert_eq!(new, vec![old[0], old[1], SpanId(4), old[2]]);
        assert_eq!(v2.spans()[2].introduced, 2);
        assert_eq!(diff(&v1, &v2).first_spine_invalid, Some(2));
    }

    #[test]
    fn rename_is_delete_plus_insert() {
        let v1 = DocumentVersion::new(THREE);
        let v2 = v1.apply_edit(&edit(&v1, "lemma t", "lemma t2")).unwrap();
        assert_ne!(v1.spans()[1].id, v2.spans()[1].id);
        assert_eq!(v1.spans()[2].id, v2.spans()[2].id);
    }

    #[test]
    fn alignment_prefers_earliest_duplicate() {
        let v1 = DocumentVersion::new("def a = 1 . def a = 1 .");
        let v2 = v1.apply_edit(&Edit { base_version: 1, from: 12, to: 23, insert: String::new() }).unwrap();
        assert_eq!(v2.spans().len(), 1);
        assert_eq!(v2.spans()[0].id, v1.spans()[0].id);
    }

    #[test]
    fn truncation_has_no_spine_invalidation() {
        let v1 = DocumentVersion::new(THREE);
        let at = v1.text().find("lemma u").unwrap();
        let v2 = v1.apply_edit(&Edit { base_version: 1, from: at, to: v1.text().len(), insert: String::new() }).unwrap();
        let inv = diff(&v1, &v2);
        assert_eq!(inv.first_spine_invalid, None);
        assert_eq!(inv.unchanged_prefix_len, 2);
    }

    #[test]
    fn parse_errors_are_spans() {
        let doc = DocumentVersion::new("def a = 1 . lemma b : . proof qed . def c = 2 .");
        assert_eq!(doc.spans().len(), 3);
        assert_eq!(doc.spans()[1].kind, SpanKind::Malformed);
        assert_eq!(doc.spans()[1].name, "b");
        assert!(doc.parse_error(1).is_some());
        assert!(doc.parse_error(0).is_none());
    }
}

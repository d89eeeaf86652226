//! Trimmed environment snapshots and the key-referenced blob store.
//!
//! Bindings too large to ship inline are parked in a [`BlobStore`] and
//! replaced by opaque keys. Each document version holds a reference to the
//! keys its snapshots use; releasing the version drops those references and
//! evicts whatever is left unreferenced.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use num_bigint::BigUint;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::hash::{hex_val, push_hex_byte, Hash256};
use crate::script::{decode_bindings, NumEnv};

pub const DEFAULT_INLINE_THRESHOLD: usize = 4 * 1024;

/// Target size for blobs that pack many small overflow bindings.
const CHUNK_TARGET: usize = 64 * 1024;

/// Opaque 128-bit blob reference. Never reused within a store's lifetime.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlobKey(pub u128);

impl fmt::Debug for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlobKey({:032x})", self.0)
    }
}

impl fmt::Display for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl Serialize for BlobKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = String::with_capacity(32);
        for b in self.0.to_be_bytes() {
            push_hex_byte(&mut s, b);
        }
        serializer.serialize_str(&s)
    }
}

impl<'de> Deserialize<'de> for BlobKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let bad = || serde::de::Error::custom("expected 32 hex digits");
        if s.len() != 32 {
            return Err(bad());
        }
        let mut value = 0u128;
        for c in s.bytes() {
            value = (value << 4) | u128::from(hex_val(c).ok_or_else(bad)?);
        }
        Ok(BlobKey(value))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlobError {
    Evicted(BlobKey),
    Unknown(BlobKey),
}

impl fmt::Display for BlobError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlobError::Evicted(k) => write!(f, "blob {k} was evicted"),
            BlobError::Unknown(k) => write!(f, "blob {k} was never issued"),
        }
    }
}

impl core::error::Error for BlobError {}

#[derive(Clone, Debug)]
struct BlobEntry {
    bytes: Vec<u8>,
    content: Hash256,
    refcount: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Released {
    pub evicted: usize,
    pub bytes_freed: usize,
}

#[derive(Clone, Debug, Default)]
pub struct BlobStore {
    entries: BTreeMap<BlobKey, BlobEntry>,
    by_content: BTreeMap<Hash256, BlobKey>,
    holders: BTreeMap<u64, BTreeSet<BlobKey>>,
    next_key: u128,
    bytes: usize,
}

impl BlobStore {
    pub fn new() -> Self {
        BlobStore { next_key: 1, ..Self::default() }
    }

    /// Stores `bytes` on behalf of `version` and returns its key. Identical
    /// live content is shared; the refcount counts distinct holding versions.
    pub fn put(&mut self, version: u64, bytes: Vec<u8>) -> BlobKey {
        let content = Hash256::of(&bytes);
        let key = match self.by_content.get(&content) {
            Some(key) => *key,
            None => {
                let key = BlobKey(self.next_key);
                self.next_key += 1;
                self.bytes += bytes.len();
                self.entries.insert(key, BlobEntry { bytes, content, refcount: 0 });
                self.by_content.insert(content, key);
                key
            }
        };
        if self.holders.entry(version).or_default().insert(key) {
            self.entries.get_mut(&key).expect("entry just looked up").refcount += 1;
        }
        key
    }

    pub fn get(&self, key: BlobKey) -> Result<&[u8], BlobError> {
        match self.entries.get(&key) {
            Some(e) => Ok(&e.bytes),
            None if key.0 != 0 && key.0 < self.next_key => Err(BlobError::Evicted(key)),
            None => Err(BlobError::Unknown(key)),
        }
    }

    pub fn refcount(&self, key: BlobKey) -> usize {
        self.entries.get(&key).map_or(0, |e| e.refcount)
    }

    /// Drops every reference held by `version`, evicting blobs that end up
    /// unreferenced.
    pub fn release_version(&mut self, version: u64) -> Released {
        let mut released = Released::default();
        for key in self.holders.remove(&version).unwrap_or_default() {
            let entry = self.entries.get_mut(&key).expect("held keys are live");
            entry.refcount -= 1;
            if entry.refcount == 0 {
                let entry = self.entries.remove(&key).expect("present");
                self.by_content.remove(&entry.content);
                self.bytes -= entry.bytes.len();
                released.evicted += 1;
                released.bytes_freed += entry.bytes.len();
            }
        }
        released
    }

    /// Versions currently holding at least one key.
    pub fn holding_versions(&self) -> impl Iterator<Item = u64> + '_ {
        self.holders.keys().copied()
    }

    /// Bytes of blobs referenced by `version`.
    pub fn bytes_held_by(&self, version: u64) -> usize {
        self.holders
            .get(&version)
            .map_or(0, |keys| keys.iter().map(|k| self.entries[k].bytes.len()).sum())
    }

    pub fn total_bytes(&self) -> usize {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InlineBinding {
    pub name: String,
    /// Decimal digits.
    pub value: String,
}

/// The environment of one state node, ready to cross a process boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u64,
    pub node: usize,
    pub fingerprint: Hash256,
    pub inline: Vec<InlineBinding>,
    pub lemmas: Vec<String>,
    pub blob_keys: Vec<BlobKey>,
}

/// Moves bindings whose canonical encoding exceeds `threshold` bytes, and
/// small bindings once `threshold` bytes of inline text are spent, into
/// `store`.
pub fn trim(env: &NumEnv, version: u64, node: usize, store: &mut BlobStore, threshold: usize) -> Snapshot {
    let mut inline = Vec::new();
    let mut inline_bytes = 0;
    let mut blob_keys = Vec::new();
    let mut chunk = Vec::new();
    let mut encoded = Vec::new();
    for (name, value) in env.defs() {
        encoded.clear();
        NumEnv::encode_binding(name, value, &mut encoded);
        if encoded.len() > threshold {
            blob_keys.push(store.put(version, encoded.clone()));
            continue;
        }
        // Inline values travel as decimal text, so budget by that size.
        let text = value.to_string();
        if inline_bytes + name.len() + text.len() <= threshold {
            inline_bytes += name.len() + text.len();
            inline.push(InlineBinding { name: name.to_string(), value: text });
        } else {
            chunk.extend_from_slice(&encoded);
            if chunk.len() >= CHUNK_TARGET {
                blob_keys.push(store.put(version, core::mem::take(&mut chunk)));
            }
        }
    }
    if !chunk.is_empty() {
        blob_keys.push(store.put(version, chunk));
    }
    Snapshot {
        version,
        node,
        fingerprint: env.fingerprint(),
        inline,
        lemmas: env.lemmas().map(str::to_string).collect(),
        blob_keys,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResolveError {
    MissingBlob(BlobKey),
    CorruptBlob(BlobKey),
    BadInline(String),
    FingerprintMismatch { expected: Hash256, actual: Hash256 },
}

impl fmt::Display for ResolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResolveError::MissingBlob(k) => write!(f, "blob {k} unavailable"),
            ResolveError::CorruptBlob(k) => write!(f, "blob {k} does not decode"),
            ResolveError::BadInline(name) => write!(f, "inline binding {name} is not a number"),
            ResolveError::FingerprintMismatch { expected, actual } => {
                write!(f, "reconstructed environment {actual} does not match {expected}")
            }
        }
    }
}

impl core::error::Error for ResolveError {}

/// Rebuilds the environment, fetching blob contents through `fetch`, and
/// checks it against the snapshot's fingerprint.
pub fn resolve(snap: &Snapshot, mut fetch: impl FnMut(BlobKey) -> Option<Vec<u8>>) -> Result<NumEnv, ResolveError> {
    let mut env = NumEnv::new();
    for b in &snap.inline {
        let value = BigUint::parse_bytes(b.value.as_bytes(), 10).ok_or_else(|| ResolveError::BadInline(b.name.clone()))?;
        env.bind(b.name.clone(), value);
    }
    for key in &snap.blob_keys {
        let bytes = fetch(*key).ok_or(ResolveError::MissingBlob(*key))?;
        for (name, value) in decode_bindings(&bytes).ok_or(ResolveError::CorruptBlob(*key))? {
            env.bind(name, value);
        }
    }
    for name in &snap.lemmas {
        env.state_lemma(name.clone());
    }
    let actual = env.fingerprint();
    if actual != snap.fingerprint {
        return Err(ResolveError::FingerprintMismatch { expected: snap.fingerprint, actual });
    }
    Ok(env)
}

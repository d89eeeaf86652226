//! Batch checking: every promise is forced and the document's soundness
//! decides the exit code.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use proofkernel_core::dag::SpanState;
use proofkernel_core::promise::{Offender, Soundness};
use proofkernel_core::script::{ParseError, parse_document_with};

use crate::kernel::{KernelConfig, SpanReport};
use crate::runtime::{Runtime, WorkerMode};

pub const EXIT_SOUND: i32 = 0;
pub const EXIT_UNSOUND: i32 = 1;
pub const EXIT_PARSE: i32 = 2;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub rows: Vec<SpanReport>,
    pub offenders: Vec<Offender>,
    pub wall_ms: f64,
}

impl CheckReport {
    pub fn is_sound(&self) -> bool {
        self.offenders.is_empty()
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_sound() { EXIT_SOUND } else { EXIT_UNSOUND }
    }

    /// `(id, name, state)` per span; the part of the report that does not
    /// depend on timing.
    pub fn verdicts(&self) -> Vec<(u64, String, SpanState)> {
        self.rows.iter().map(|r| (r.span.0, r.name.clone(), r.state)).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
        let _ = writeln!(out, "{:>4}  {:<width$}  {:<8}  {:>9}", "id", "name", "state", "ms");
        for r in &self.rows {
            let ms = r.ms.map_or_else(|| "-".to_string(), |ms| format!("{ms:.1}"));
            let name = if r.name.is_empty() { "?" } else { &r.name };
            let _ = writeln!(out, "{:>4}  {:<width$}  {:<8}  {:>9}", r.span.0, name, r.state.as_str(), ms);
            if let (Some(msg), SpanState::Fail) = (&r.msg, r.state) {
                let _ = writeln!(out, "      {msg}");
            }
        }
        let verdict = if self.is_sound() {
            "sound".to_string()
        } else {
            let list: Vec<String> =
                self.offenders.iter().map(|o| format!("{} ({})", o.span.0, reason(o))).collect();
            format!("unsound: {}", list.join(", "))
        };
        let _ = writeln!(out, "{verdict}");
        let _ = writeln!(out, "total wall time: {:.1} ms", self.wall_ms);
        out
    }
}

fn reason(o: &Offender) -> &'static str {
    use proofkernel_core::promise::UnsoundReason::*;
    match o.reason {
        Unforced => "unforced",
        Failed => "failed",
        Orphaned => "orphaned",
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error("{0}")]
    Parse(#[from] ParseError),
    #[error("worker startup failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("checking did not finish within {0:?}")]
    Timeout(Duration),
}

impl CheckError {
    pub fn exit_code(&self) -> i32 {
        EXIT_PARSE
    }
}

/// Checks `text` with `workers` workers. A document that does not parse as a
/// whole is rejected before any checking.
pub fn run_check(text: &str, workers: usize, mode: WorkerMode, cfg: KernelConfig) -> Result<CheckReport, CheckError> {
    parse_document_with(text, &cfg.parse)?;
    let cfg = KernelConfig { lazy: false, ..cfg };
    let start = Instant::now();
    let mut rt = Runtime::new(cfg, workers, mode, Box::new(|_| {}))?;
    rt.submit(&serde_json::json!({"id": 1, "cmd": "open", "text": text}).to_string());
    // Every delay is bounded, so a generous ceiling only trips on a hang.
    let limit = Duration::from_secs(3600);
    if !rt.run_until_idle(Some(limit)) {
        return Err(CheckError::Timeout(limit));
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1000.0;
    let offenders = match rt.kernel().soundness() {
        Soundness::Sound => Vec::new(),
        Soundness::Unsound(o) => o,
    };
    Ok(CheckReport { rows: rt.kernel().span_reports(), offenders, wall_ms })
}

//! Trace replay. A trace is one request object per line with an extra
//! `at_ms` field giving its send time relative to the start of the trace.

use std::time::Duration;

use serde_json::{Map, Value, json};

use crate::kernel::{Kernel, KernelConfig};
use crate::runtime::{Runtime, WorkerMode};
use crate::sim::SimRuntime;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub at_ms: f64,
    pub request: Map<String, Value>,
}

#[derive(Debug, thiserror::Error)]
#[error("trace line {line}: {msg}")]
pub struct TraceError {
    pub line: usize,
    pub msg: String,
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEntry>, TraceError> {
    let mut out = Vec::new();
    let mut last = 0.0;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| TraceError { line: line_no, msg };
        let Value::Object(mut request) = serde_json::from_str(line).map_err(|e| err(e.to_string()))? else {
            return Err(err("not a JSON object".into()));
        };
        let at_ms = request
            .remove("at_ms")
            .and_then(|v| v.as_f64())
            .filter(|t| t.is_finite() && *t >= 0.0)
            .ok_or_else(|| err("missing or invalid at_ms".into()))?;
        if at_ms < last {
            return Err(err(format!("at_ms {at_ms} goes back in time (previous {last})")));
        }
        last = at_ms;
        out.push(TraceEntry { at_ms, request });
    }
    Ok(out)
}

/// Maps the versions a trace was recorded against onto the versions of the
/// kernel replaying it. Every `open` and `edit` in the trace is assumed to
/// have produced one version when recorded.
#[derive(Clone, Debug, Default)]
pub struct Rebaser {
    recorded: u64,
}

impl Rebaser {
    pub fn rebase(&mut self, request: &mut Map<String, Value>, current: u64) {
        match request.get("cmd").and_then(Value::as_str) {
            Some("open") => self.recorded += 1,
            Some("edit") => {
                if let Some(base) = request.get("base_version").and_then(Value::as_u64) {
                    let rebased = current as i128 + (base as i128 - self.recorded as i128);
                    request.insert("base_version".into(), json!(rebased.clamp(0, u64::MAX as i128) as u64));
                }
                self.recorded += 1;
            }
            _ => {}
        }
    }
}

/// Metrics written by `replay --report`.
pub fn report(kernel: &Kernel, workers: usize, virtual_clock: bool, duration_ms: f64) -> Value {
    let m = kernel.metrics_json();
    let c = kernel.counters();
    json!({
        "time_to_first_verdict_ms": m["time_to_first_verdict_ms"],
        "tasks_executed": c.tasks_executed,
        "tasks_skipped_memo": c.tasks_skipped_memo,
        "bytes_on_bus": c.bytes_on_bus,
        "tasks_executed_total": c.tasks_executed_total,
        "tasks_skipped_memo_total": c.tasks_skipped_memo_total,
        "requests": c.requests,
        "error_responses": c.error_responses,
        "workers": workers,
        "virtual_clock": virtual_clock,
        "duration_ms": duration_ms,
        "counters": m,
    })
}

/// Replays on the virtual clock; timings are exact and reproducible.
pub fn replay_virtual(trace: &[TraceEntry], workers: usize, cfg: KernelConfig) -> (SimRuntime, Value) {
    let mut sim = SimRuntime::new(cfg, workers);
    let mut rebaser = Rebaser::default();
    for entry in trace {
        sim.run_until(entry.at_ms);
        let mut request = entry.request.clone();
        rebaser.rebase(&mut request, sim.kernel().version());
        sim.submit_at(entry.at_ms, Value::Object(request).to_string());
        // Process it before the next entry rebases against the version.
        sim.run_until(entry.at_ms);
    }
    sim.run_until_idle();
    let report = report(sim.kernel(), workers, true, sim.now());
    (sim, report)
}

/// Replays in real time, sending each request at its recorded offset.
pub fn replay_wall(
    trace: &[TraceEntry],
    workers: usize,
    mode: WorkerMode,
    cfg: KernelConfig,
) -> std::io::Result<(Runtime, Value)> {
    let mut rt = Runtime::new(cfg, workers, mode, Box::new(|_| {}))?;
    let t0 = rt.now_ms();
    let mut rebaser = Rebaser::default();
    for entry in trace {
        let wait = (t0 + entry.at_ms - rt.now_ms()).max(0.0);
        rt.run_until(|_| false, Some(Duration::from_secs_f64(wait / 1000.0)));
        let mut request = entry.request.clone();
        rebaser.rebase(&mut request, rt.kernel().version());
        rt.submit(&Value::Object(request).to_string());
    }
    rt.run_until_idle(Some(Duration::from_secs(3600)));
    let duration = rt.now_ms() - t0;
    let report = report(rt.kernel(), workers, false, duration);
    Ok((rt, report))
}

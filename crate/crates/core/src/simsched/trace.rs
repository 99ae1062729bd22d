//! Trace-event export (the JSON format read by chrome://tracing and
//! Perfetto). One process, one thread lane per resource; times in
//! microseconds.

use serde_json::{json, Value};

use super::graph::Resource;
use super::schedule::Timeline;
use crate::{Error, Result};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Trace of one or more timelines laid out back to back; `label` prefixes
/// event names (e.g. `fwd`, `bwd`).
pub fn to_trace(parts: &[(&str, &Timeline)]) -> Value {
    let mut events: Vec<Value> = Resource::ALL
        .iter()
        .map(|r| {
            json!({
                "name": "thread_name",
                "ph": "M",
                "pid": 0,
                "tid": r.index(),
                "args": { "name": r.name() },
            })
        })
        .collect();
    let mut offset = 0.0;
    for (label, tl) in parts {
        for e in &tl.events {
            events.push(json!({
                "name": format!("{label}:{}", e.name),
                "cat": label,
                "ph": "X",
                "pid": 0,
                "tid": e.resource.index(),
                "ts": (offset + e.start) * 1e6,
                "dur": (e.end - e.start) * 1e6,
                "args": { "node": e.node },
            }));
        }
        offset += tl.makespan;
    }
    json!({
        "traceEvents": events,
        "displayTimeUnit": "ms",
        "otherData": { "schema_version": TRACE_SCHEMA_VERSION },
    })
}

/// Parses a trace and counts complete events that overlap on one lane.
/// Touching intervals do not overlap; a relative slack of 1e-9 absorbs the
/// microsecond conversion.
pub fn trace_overlaps(trace: &Value) -> Result<usize> {
    let events = trace
        .get("traceEvents")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Graph("trace has no traceEvents array".into()))?;
    let mut lanes: std::collections::BTreeMap<u64, Vec<(f64, f64)>> = Default::default();
    for e in events {
        if e.get("ph").and_then(Value::as_str) != Some("X") {
            continue;
        }
        let field = |k: &str| {
            e.get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Graph(format!("trace event missing `{k}`")))
        };
        let tid = e
            .get("tid")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Graph("trace event missing `tid`".into()))?;
        let ts = field("ts")?;
        let dur = field("dur")?;
        lanes.entry(tid).or_default().push((ts, ts + dur));
    }
    let mut bad = 0;
    for lane in lanes.values_mut() {
        lane.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in lane.windows(2) {
            let slack = 1e-9 * w[0].1.abs().max(1.0);
            if w[1].0 + slack < w[0].1 {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

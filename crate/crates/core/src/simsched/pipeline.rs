//! Pipeline-level roll-up under interleaved 1F1B.
//!
//! With `F` and `W` the forward and backward time of one micro-batch on one
//! pipeline stage (all of its virtual chunks), `p` stages, `v` chunks per
//! stage and `m` micro-batches:
//!
//! ```text
//! T = m * (F + W) + (p - 1) * (F + W) / v + dp_sync
//! ```
//!
//! The interleaved schedule needs `m % p == 0`; otherwise the stage runs
//! its chunks as plain 1F1B (`v = 1`). Point-to-point activation transfers
//! between stages are not modeled.

use serde::Serialize;

use crate::config::{ClusterConfig, ModelConfig};
use crate::{Error, Result};

/// Virtual chunks the schedule actually uses.
pub fn effective_vpp(pp: u64, vpp: u64, microbatches: u64) -> u64 {
    if vpp > 1 && pp > 1 && !microbatches.is_multiple_of(pp) {
        1
    } else {
        vpp.max(1)
    }
}

pub fn pipeline_iteration_time(
    per_mb_fwd: f64,
    per_mb_bwd: f64,
    pp: u64,
    vpp: u64,
    microbatches: u64,
    dp_sync: f64,
) -> Result<f64> {
    if microbatches == 0 || pp == 0 || vpp == 0 {
        return Err(Error::domain(
            "pipeline sizes and micro-batch count must be >= 1",
        ));
    }
    let v = effective_vpp(pp, vpp, microbatches);
    let step = per_mb_fwd + per_mb_bwd;
    Ok(microbatches as f64 * step + (pp - 1) as f64 * step / v as f64 + dp_sync)
}

/// Idle fraction of the pipeline part of an iteration.
pub fn bubble_fraction(pp: u64, vpp: u64, microbatches: u64) -> f64 {
    let v = effective_vpp(pp, vpp, microbatches) as f64;
    let bubble = (pp - 1) as f64 / v;
    bubble / (microbatches as f64 + bubble)
}

/// Achieved model FLOPs over aggregate peak.
pub fn mfu(
    iteration_time: f64,
    model_flops: f64,
    cluster: &ClusterConfig,
    total_gpus: u64,
) -> Result<f64> {
    if !(iteration_time > 0.0) {
        return Err(Error::domain("iteration time must be > 0"));
    }
    Ok(model_flops / (iteration_time * cluster.peak_flops * total_gpus as f64))
}

/// MFU from a model description, using its per-iteration FLOP count.
pub fn model_mfu(
    iteration_time: f64,
    model: &ModelConfig,
    cluster: &ClusterConfig,
    total_gpus: u64,
) -> Result<f64> {
    let flops = crate::config::derive(model, &Default::default()).model_flops_per_iter;
    mfu(iteration_time, flops, cluster, total_gpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PipeOp {
    Forward { mb: u64, chunk: u64 },
    Backward { mb: u64, chunk: u64 },
}

/// Per-stage operation order of the interleaved 1F1B schedule: a warm-up
/// of forwards, a steady one-forward-one-backward phase, then a cool-down
/// of backwards. Forward `i` runs chunk `(i mod pv) / p` of micro-batch
/// `(i / pv) * p + i mod p`; backwards walk the chunks in reverse.
pub fn stage_order(pp: u64, vpp: u64, microbatches: u64, rank: u64) -> Vec<PipeOp> {
    let (p, v, m) = (pp, vpp, microbatches);
    let total = m * v;
    let warmup = if v == 1 {
        (p - rank - 1).min(total)
    } else {
        ((p - rank - 1) * 2 + (v - 1) * p).min(total)
    };
    let locate = |i: u64, fwd: bool| {
        let group = i % (p * v);
        let chunk = if fwd { group / p } else { v - 1 - group / p };
        let mb = (i / (p * v)) * p + group % p;
        (mb, chunk)
    };
    let fwd = |i| {
        let (mb, chunk) = locate(i, true);
        PipeOp::Forward { mb, chunk }
    };
    let bwd = |i| {
        let (mb, chunk) = locate(i, false);
        PipeOp::Backward { mb, chunk }
    };
    let mut ops: Vec<PipeOp> = (0..warmup).map(fwd).collect();
    let steady = total - warmup;
    for i in 0..steady {
        ops.push(fwd(warmup + i));
        ops.push(bwd(i));
    }
    ops.extend((steady..total).map(bwd));
    ops
}

/// Event-by-event execution of [`stage_order`] on every stage; returns the
/// makespan. `f` and `w` are per-chunk forward and backward times. Needs
/// `m % p == 0` when `v > 1`.
pub fn simulate_pipeline(pp: u64, vpp: u64, microbatches: u64, f: f64, w: f64) -> Result<f64> {
    let (p, v, m) = (pp, vpp, microbatches);
    if p == 0 || v == 0 || m == 0 {
        return Err(Error::domain(
            "pipeline sizes and micro-batch count must be >= 1",
        ));
    }
    if v > 1 && p > 1 && m % p != 0 {
        return Err(Error::domain(
            "interleaving needs micro-batches divisible by stages",
        ));
    }
    let orders: Vec<Vec<PipeOp>> = (0..p).map(|r| stage_order(p, v, m, r)).collect();
    let idx = |mb: u64, chunk: u64, stage: u64| ((mb * v + chunk) * p + stage) as usize;
    let slots = (m * v * p) as usize;
    let mut fwd_end = vec![f64::NAN; slots];
    let mut bwd_end = vec![f64::NAN; slots];
    let mut next = vec![0usize; p as usize];
    let mut free = vec![0.0f64; p as usize];
    let mut remaining: usize = orders.iter().map(Vec::len).sum();
    while remaining > 0 {
        let mut progressed = false;
        for r in 0..p {
            let ri = r as usize;
            let Some(&op) = orders[ri].get(next[ri]) else {
                continue;
            };
            let dep = match op {
                PipeOp::Forward { mb, chunk } => {
                    if r > 0 {
                        Some(fwd_end[idx(mb, chunk, r - 1)])
                    } else if chunk > 0 {
                        Some(fwd_end[idx(mb, chunk - 1, p - 1)])
                    } else {
                        Some(0.0)
                    }
                }
                PipeOp::Backward { mb, chunk } => {
                    if r + 1 < p {
                        Some(bwd_end[idx(mb, chunk, r + 1)])
                    } else if chunk + 1 < v {
                        Some(bwd_end[idx(mb, chunk + 1, 0)])
                    } else {
                        Some(fwd_end[idx(mb, chunk, r)])
                    }
                }
            };
            let Some(ready) = dep.filter(|t| !t.is_nan()) else {
                continue;
            };
            let start = free[ri].max(ready);
            let (end, slot) = match op {
                PipeOp::Forward { mb, chunk } => (start + f, &mut fwd_end[idx(mb, chunk, r)]),
                PipeOp::Backward { mb, chunk } => (start + w, &mut bwd_end[idx(mb, chunk, r)]),
            };
            *slot = end;
            free[ri] = end;
            next[ri] += 1;
            remaining -= 1;
            progressed = true;
        }
        if !progressed {
            return Err(Error::Graph("pipeline schedule deadlocked".into()));
        }
    }
    Ok(free.iter().copied().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_stage_has_no_bubble() {
        assert_eq!(
            pipeline_iteration_time(1.0, 2.0, 1, 1, 5, 0.5).unwrap(),
            15.5
        );
        assert_eq!(bubble_fraction(1, 1, 5), 0.0);
    }

    #[test]
    fn two_stages_two_microbatches() {
        let closed = pipeline_iteration_time(1.0, 2.0, 2, 1, 2, 0.0).unwrap();
        assert_eq!(closed, 9.0);
        assert_eq!(simulate_pipeline(2, 1, 2, 1.0, 2.0).unwrap(), closed);
    }

    #[test]
    fn bubble_shrinks_with_more_microbatches() {
        let mut prev = 1.0;
        for m in [4, 8, 16, 32] {
            let b = bubble_fraction(4, 1, m);
            assert!(b < prev);
            prev = b;
        }
        assert!(bubble_fraction(4, 2, 8) < bubble_fraction(4, 1, 8));
    }

    #[test]
    fn interleaving_falls_back_when_indivisible() {
        assert_eq!(effective_vpp(4, 2, 6), 1);
        assert_eq!(effective_vpp(4, 2, 8), 2);
        assert_eq!(
            pipeline_iteration_time(1.0, 1.0, 4, 2, 6, 0.0).unwrap(),
            pipeline_iteration_time(1.0, 1.0, 4, 1, 6, 0.0).unwrap()
        );
    }

    #[test]
    fn order_covers_every_op_once() {
        for (p, v, m) in [(4, 2, 8), (3, 1, 5), (2, 2, 4)] {
            for r in 0..p {
                let ops = stage_order(p, v, m, r);
                assert_eq!(ops.len() as u64, 2 * m * v);
                let mut seen = std::collections::BTreeSet::new();
                for op in &ops {
                    assert!(seen.insert(format!("{op:?}")));
                }
            }
        }
    }

    #[test]
    fn mfu_is_inverse_in_time() {
        let cl = crate::config::cluster_preset("h800").unwrap();
        let a = mfu(2.0, 1e15, &cl, 8).unwrap();
        let b = mfu(1.0, 1e15, &cl, 8).unwrap();
        assert_eq!(b, 2.0 * a);
        assert!(mfu(0.0, 1.0, &cl, 8).is_err());
    }
}

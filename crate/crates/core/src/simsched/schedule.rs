use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::graph::{OpGraph, Resource};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// Everything on one virtual stream, in topological order.
    Serial,
    /// List scheduling over compute and the two communication lanes.
    InterOp,
}

impl ScheduleMode {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleMode::Serial => "serial",
            ScheduleMode::InterOp => "inter-op",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub node: usize,
    pub name: String,
    pub start: f64,
    pub end: f64,
    pub resource: Resource,
}

/// Time buckets of a timeline: attention and GEMMs, exposed
/// communication, and everything else on the compute lane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Breakdown {
    pub math: f64,
    pub exposed_comm: f64,
    pub other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timeline {
    /// Sorted by start time, then node id.
    pub events: Vec<Event>,
    pub makespan: f64,
    /// `makespan - busy_compute`: time the compute lane waits on
    /// communication (or on nothing at all).
    pub exposed_comm: f64,
    pub busy_compute: f64,
    pub breakdown: Breakdown,
}

impl Timeline {
    fn from_events(g: &OpGraph, mut events: Vec<Event>) -> Self {
        events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.node.cmp(&b.node)));
        let makespan = events.iter().map(|e| e.end).fold(0.0, f64::max);
        let mut math = 0.0;
        let mut busy = 0.0;
        for e in events.iter().filter(|e| e.resource == Resource::Compute) {
            let d = e.end - e.start;
            busy += d;
            if g.nodes[e.node].kind.is_math() {
                math += d;
            }
        }
        let exposed = (makespan - busy).max(0.0);
        Self {
            events,
            makespan,
            exposed_comm: exposed,
            busy_compute: busy,
            breakdown: Breakdown {
                math,
                exposed_comm: exposed,
                other: busy - math,
            },
        }
    }

    /// Checks resource exclusivity and dependency order. Returns the number
    /// of violations found.
    pub fn violations(&self, g: &OpGraph) -> usize {
        let mut bad = 0;
        for r in Resource::ALL {
            let mut lane: Vec<&Event> = self.events.iter().filter(|e| e.resource == r).collect();
            lane.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
            bad += lane.windows(2).filter(|w| w[1].start < w[0].end).count();
        }
        let mut end = vec![f64::NAN; g.nodes.len()];
        for e in &self.events {
            end[e.node] = e.end;
        }
        for e in &self.events {
            for &d in &g.nodes[e.node].deps {
                if !(end[d] <= e.start) {
                    bad += 1;
                }
            }
        }
        bad
    }
}

/// Longest path through the live graph, weighting nodes by `costs`.
pub fn critical_path(g: &OpGraph, costs: &[f64]) -> Result<f64> {
    let order = g.topo_order()?;
    let mut finish = vec![0.0f64; g.nodes.len()];
    let mut best = 0.0f64;
    for id in order {
        let start = g.nodes[id]
            .deps
            .iter()
            .map(|&d| finish[d])
            .fold(0.0, f64::max);
        finish[id] = start + costs[id];
        best = best.max(finish[id]);
    }
    Ok(best)
}

pub fn serial_sum(g: &OpGraph, costs: &[f64]) -> f64 {
    g.live().map(|n| costs[n.id]).sum()
}

/// Remaining critical path from each node, inclusive of its own cost.
fn bottom_levels(g: &OpGraph, costs: &[f64], order: &[usize]) -> Vec<f64> {
    let succ = g.successors();
    let mut level = vec![0.0f64; g.nodes.len()];
    for &id in order.iter().rev() {
        let tail = succ[id].iter().map(|&s| level[s]).fold(0.0, f64::max);
        level[id] = costs[id] + tail;
    }
    level
}

/// Schedules the live nodes of `g` with per-node durations `costs`.
///
/// `InterOp` is non-delay list scheduling: whenever a lane is idle it
/// starts the ready node with the longest remaining critical path, ties
/// broken by lower node id.
pub fn schedule(g: &OpGraph, costs: &[f64], mode: ScheduleMode) -> Result<Timeline> {
    if costs.len() != g.nodes.len() {
        return Err(Error::Graph(format!(
            "{} costs for {} nodes",
            costs.len(),
            g.nodes.len()
        )));
    }
    let order = g.topo_order()?;
    let events = match mode {
        ScheduleMode::Serial => {
            let mut t = 0.0;
            order
                .iter()
                .map(|&id| {
                    let start = t;
                    t += costs[id];
                    event(g, id, start, t)
                })
                .collect()
        }
        ScheduleMode::InterOp => list_schedule(g, costs, &order),
    };
    Ok(Timeline::from_events(g, events))
}

fn event(g: &OpGraph, id: usize, start: f64, end: f64) -> Event {
    Event {
        node: id,
        name: g.nodes[id].name.clone(),
        start,
        end,
        resource: g.nodes[id].resource(),
    }
}

fn list_schedule(g: &OpGraph, costs: &[f64], order: &[usize]) -> Vec<Event> {
    let level = bottom_levels(g, costs, order);
    // Dispatch rank: higher level first, then lower id.
    let mut by_prio: Vec<usize> = order.to_vec();
    by_prio.sort_by(|&a, &b| level[b].total_cmp(&level[a]).then(a.cmp(&b)));
    let mut rank = vec![usize::MAX; g.nodes.len()];
    for (i, &id) in by_prio.iter().enumerate() {
        rank[id] = i;
    }

    let succ = g.successors();
    let mut pending: Vec<usize> = g.nodes.iter().map(|n| n.deps.len()).collect();
    let mut ready: [BTreeSet<usize>; 3] = Default::default();
    for &id in order {
        if pending[id] == 0 {
            ready[g.nodes[id].resource().index()].insert(rank[id]);
        }
    }
    let mut running: [Option<(f64, usize)>; 3] = [None; 3];
    let mut events = Vec::with_capacity(order.len());
    let mut t = 0.0f64;
    let mut done = 0;
    while done < order.len() {
        for r in 0..3 {
            if running[r].is_none() {
                if let Some(rk) = ready[r].pop_first() {
                    let id = by_prio[rk];
                    let end = t + costs[id];
                    running[r] = Some((end, id));
                    events.push(event(g, id, t, end));
                }
            }
        }
        // Advance to the earliest completion and retire everything ending then.
        let next = running
            .iter()
            .flatten()
            .map(|&(e, _)| e)
            .fold(f64::INFINITY, f64::min);
        debug_assert!(next.is_finite(), "acyclic graph always has runnable work");
        t = next;
        for slot in running.iter_mut() {
            if let Some((end, id)) = *slot {
                if end <= t {
                    *slot = None;
                    done += 1;
                    for &s in &succ[id] {
                        pending[s] -= 1;
                        if pending[s] == 0 {
                            ready[g.nodes[s].resource().index()].insert(rank[s]);
                        }
                    }
                }
            }
        }
    }
    events
}

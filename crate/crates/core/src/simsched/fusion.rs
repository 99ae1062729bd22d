//! Tile-fused communication/computation kernels.
//!
//! A fused kernel splits a GEMM into row tiles and streams the matching
//! communication tiles alongside it. All-to-all moves data with SMs, so the
//! GEMM loses `c` of its `S` SMs; all-gather and reduce-scatter run on copy
//! engines and leave every SM to the GEMM.
//!
//! Time model (ours; the latency of tile signalling is not published):
//!
//! ```text
//! cs    = compute * S / (S - c)                  (SM-driven comm only)
//! comm' = comm * max(1, c_sat / c)               (SM-driven comm only)
//! fill  = max(cs / tiles, comm' / tiles * w)
//! time  = min(max(cs, comm') + fill, compute + comm)
//! ```
//!
//! `w` is the number of source ranks the first tile waits on: the first
//! tile's dependency count in natural order, the smallest dependency count
//! of any tile under swizzling (which starts with the tile whose data lands
//! first). The final clamp keeps a fused kernel from losing to the unfused
//! pair. With no communication the kernel is just the compute.

use serde::{Deserialize, Serialize};

use super::graph::{OpGraph, OpKind, OpNode};
use super::schedule::{schedule, ScheduleMode};
use crate::commcost::Collective;
use crate::config::ClusterConfig;
use crate::routing::TileLayout;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileOrder {
    Natural,
    Swizzle,
}

/// How the communication half moves its bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommPath {
    /// All-to-all driven by `c` dedicated SMs.
    SmDriven,
    /// All-gather / reduce-scatter on copy engines.
    CopyEngine,
}

/// A chain of adjacent graph nodes executed as one tile-fused kernel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusedPair {
    /// Node ids in execution order; exactly one is a collective.
    pub nodes: Vec<usize>,
    pub name: String,
    pub path: CommPath,
    /// Unfused time of the non-communication members.
    pub compute_time: f64,
    pub comm_time: f64,
    pub comm_sms: u64,
    pub tiles: u64,
    pub order: TileOrder,
    pub first_tile_deps: u64,
    pub min_tile_deps: u64,
}

impl FusedPair {
    pub fn unfused_time(&self) -> f64 {
        self.compute_time + self.comm_time
    }

    /// Takes the tile count and dependency widths from a routing layout.
    pub fn with_layout(mut self, layout: &TileLayout) -> Self {
        self.tiles = layout.tiles.len().max(1) as u64;
        self.first_tile_deps = layout
            .tiles
            .first()
            .map_or(1, |t| t.dep_ranks.len().max(1) as u64);
        self.min_tile_deps = layout
            .tiles
            .iter()
            .map(|t| t.dep_ranks.len().max(1) as u64)
            .min()
            .unwrap_or(1);
        self
    }
}

/// Compute time once `c` SMs are taken for communication.
pub fn compute_scaled(compute: f64, path: CommPath, sm_count: u64, c: u64) -> Result<f64> {
    if c == 0 || c >= sm_count {
        return Err(Error::domain(format!(
            "communication SMs must lie in [1, {sm_count}), got {c}"
        )));
    }
    Ok(match path {
        CommPath::SmDriven => compute * sm_count as f64 / (sm_count - c) as f64,
        CommPath::CopyEngine => compute,
    })
}

/// Fill delay: the part of the kernel that cannot overlap.
pub fn fill_time(pair: &FusedPair, cs: f64, comm: f64) -> f64 {
    let tiles = pair.tiles.max(1) as f64;
    let w = match pair.order {
        TileOrder::Natural => pair.first_tile_deps,
        TileOrder::Swizzle => pair.min_tile_deps,
    }
    .max(1) as f64;
    (cs / tiles).max(comm / tiles * w)
}

pub fn fused_overlap_time(pair: &FusedPair, cluster: &ClusterConfig) -> Result<f64> {
    let cs = compute_scaled(
        pair.compute_time,
        pair.path,
        cluster.sm_count,
        pair.comm_sms,
    )?;
    if pair.comm_time == 0.0 {
        return Ok(pair.compute_time);
    }
    let comm = match pair.path {
        CommPath::SmDriven => {
            let sat = cluster.a2a_saturation_sms.max(1) as f64;
            pair.comm_time * (sat / pair.comm_sms as f64).max(1.0)
        }
        CommPath::CopyEngine => pair.comm_time,
    };
    let t = cs.max(comm) + fill_time(pair, cs, comm);
    Ok(t.min(pair.unfused_time()))
}

/// Picks the SM count minimizing the fused time; ties go to fewer SMs.
pub fn tune_comm_sms(pair: &FusedPair, cluster: &ClusterConfig) -> Result<u64> {
    if pair.path == CommPath::CopyEngine {
        return Ok(pair.comm_sms);
    }
    let mut best = (f64::INFINITY, pair.comm_sms);
    for c in 1..cluster.sm_count {
        let t = fused_overlap_time(
            &FusedPair {
                comm_sms: c,
                ..pair.clone()
            },
            cluster,
        )?;
        if t < best.0 {
            best = (t, c);
        }
    }
    Ok(best.1)
}

/// Knobs for [`find_fusions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionOptions {
    pub tile_rows: u64,
    pub comm_sms: u64,
    pub order: TileOrder,
    /// Source ranks of an all-to-all receive buffer.
    pub ranks: u64,
}

fn is_gemm(n: &OpNode) -> bool {
    matches!(n.kind, OpKind::Gemm | OpKind::GroupedGemm)
}

fn is_scatter_gather(n: &OpNode) -> bool {
    matches!(n.kind, OpKind::Scatter | OpKind::Gather)
}

fn collective_of(n: &OpNode) -> Option<Collective> {
    match n.kind {
        OpKind::Collective { collective, .. } => Some(collective),
        _ => None,
    }
}

/// Checks that `chain` is a fusible pattern of adjacent live nodes: each
/// later member depends only on the previous one, and each earlier member
/// feeds only the next one.
fn check_chain(g: &OpGraph, succ: &[Vec<usize>], chain: &[usize]) -> Result<CommPath> {
    for &id in chain {
        if id >= g.nodes.len() || g.nodes[id].consumed {
            return Err(Error::Graph(format!(
                "fusion refers to missing or consumed node {id}"
            )));
        }
    }
    for w in chain.windows(2) {
        if g.nodes[w[1]].deps != [w[0]] || succ[w[0]] != [w[1]] {
            return Err(Error::Graph(format!(
                "`{}` and `{}` are not adjacent",
                g.nodes[w[0]].name, g.nodes[w[1]].name
            )));
        }
    }
    let nodes: Vec<&OpNode> = chain.iter().map(|&i| &g.nodes[i]).collect();
    let mismatch = || {
        let names: Vec<&str> = nodes.iter().map(|n| n.name.as_str()).collect();
        Error::Graph(format!("not a fusible pattern: {}", names.join("+")))
    };
    match nodes.as_slice() {
        [a, b] => match (collective_of(a), collective_of(b)) {
            (Some(Collective::AllToAll), None) if is_gemm(b) => Ok(CommPath::SmDriven),
            (None, Some(Collective::AllToAll)) if is_gemm(a) => Ok(CommPath::SmDriven),
            (Some(Collective::AllGather), None) if is_gemm(b) => Ok(CommPath::CopyEngine),
            (None, Some(Collective::ReduceScatter)) if is_gemm(a) => Ok(CommPath::CopyEngine),
            _ => Err(mismatch()),
        },
        [a, b, c] => {
            let gather_in = collective_of(a) == Some(Collective::AllGather) && is_gemm(c);
            let scatter_out = is_gemm(a) && collective_of(c) == Some(Collective::ReduceScatter);
            if is_scatter_gather(b) && (gather_in || scatter_out) {
                Ok(CommPath::CopyEngine)
            } else {
                Err(mismatch())
            }
        }
        _ => Err(mismatch()),
    }
}

fn make_pair(
    g: &OpGraph,
    costs: &[f64],
    chain: Vec<usize>,
    path: CommPath,
    opts: &FusionOptions,
) -> FusedPair {
    let mut compute = 0.0;
    let mut comm = 0.0;
    let mut rows = 0;
    for &id in &chain {
        let n = &g.nodes[id];
        if n.kind.is_collective() {
            comm += costs[id];
        } else {
            compute += costs[id];
            rows = rows.max(n.rows);
        }
    }
    let tiles = rows.div_ceil(opts.tile_rows.max(1)).max(1);
    // Tokens sorted by source rank put one rank in the first tile of a
    // gathered buffer; an all-to-all receive tile waits on every rank.
    let first = match path {
        CommPath::SmDriven => opts.ranks.max(1),
        CommPath::CopyEngine => 1,
    };
    let name = chain
        .iter()
        .map(|&i| g.nodes[i].name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    FusedPair {
        nodes: chain,
        name,
        path,
        compute_time: compute,
        comm_time: comm,
        comm_sms: opts.comm_sms,
        tiles,
        order: opts.order,
        first_tile_deps: first,
        min_tile_deps: 1,
    }
}

/// Finds the fusible chains of `g`: A2A+GEMM, GEMM+A2A,
/// AG(+scatter/gather)+GEMM and GEMM(+scatter/gather)+RS, in either phase.
/// Chains are disjoint and listed by first node id.
pub fn find_fusions(g: &OpGraph, costs: &[f64], opts: &FusionOptions) -> Vec<FusedPair> {
    let succ = g.successors();
    let single_succ = |id: usize| match succ[id].as_slice() {
        [s] => Some(*s),
        _ => None,
    };
    let single_pred = |id: usize| match g.nodes[id].deps.as_slice() {
        [p] => Some(*p),
        _ => None,
    };
    let mut candidates: Vec<Vec<usize>> = Vec::new();
    for x in g.live().filter(|n| n.kind.is_collective()) {
        let id = x.id;
        let forward = |len: usize| -> Option<Vec<usize>> {
            let mut chain = vec![id];
            while chain.len() < len {
                chain.push(single_succ(*chain.last()?)?);
            }
            Some(chain)
        };
        let backward = |len: usize| -> Option<Vec<usize>> {
            let mut chain = vec![id];
            while chain.len() < len {
                chain.insert(0, single_pred(chain[0])?);
            }
            Some(chain)
        };
        let tries: Vec<Option<Vec<usize>>> = match collective_of(x) {
            Some(Collective::AllToAll) => vec![forward(2), backward(2)],
            Some(Collective::AllGather) => vec![forward(3), forward(2)],
            Some(Collective::ReduceScatter) => vec![backward(3), backward(2)],
            None => vec![],
        };
        if let Some(chain) = tries
            .into_iter()
            .flatten()
            .find(|c| check_chain(g, &succ, c).is_ok())
        {
            candidates.push(chain);
        }
    }
    candidates.sort_by_key(|c| c[0]);
    let mut taken = vec![false; g.nodes.len()];
    let mut out = Vec::new();
    for chain in candidates {
        if chain.iter().any(|&i| taken[i]) {
            continue;
        }
        for &i in &chain {
            taken[i] = true;
        }
        let path = check_chain(g, &succ, &chain).expect("checked above");
        out.push(make_pair(g, costs, chain, path, opts));
    }
    out
}

/// Replaces every fusion's chain with one fused compute node costed by
/// [`fused_overlap_time`]. Consumed nodes stay in the arena, so node ids
/// remain stable; applying a fusion twice is an error.
pub fn apply_intra_op(
    g: &OpGraph,
    fusions: &[FusedPair],
    cluster: &ClusterConfig,
) -> Result<OpGraph> {
    let mut out = g.clone();
    for pair in fusions {
        let succ = out.successors();
        check_chain(&out, &succ, &pair.nodes)?;
        let time = fused_overlap_time(pair, cluster)?;
        let first = pair.nodes[0];
        let last = *pair.nodes.last().expect("chain is nonempty");
        let deps = out.nodes[first].deps.clone();
        let rows = pair
            .nodes
            .iter()
            .map(|&i| out.nodes[i].rows)
            .max()
            .unwrap_or(0);
        let fused = out.add_fixed(&format!("fused:{}", pair.name), OpKind::Fused, time, &deps);
        out.nodes[fused].rows = rows;
        for &i in &pair.nodes {
            out.nodes[i].consumed = true;
        }
        for &s in &succ[last] {
            for d in out.nodes[s].deps.iter_mut() {
                if *d == last {
                    *d = fused;
                }
            }
        }
    }
    out.topo_order()?;
    Ok(out)
}

/// Costs of a graph produced by [`apply_intra_op`] from `g`: fused nodes
/// take their fixed time, consumed nodes cost nothing.
pub fn fused_costs(fused: &OpGraph, costs: &[f64]) -> Vec<f64> {
    fused
        .nodes
        .iter()
        .map(|n| match (n.consumed, n.fixed_time) {
            (true, _) => 0.0,
            (false, Some(t)) if n.id >= costs.len() => t,
            _ => costs[n.id],
        })
        .collect()
}

/// Keeps the candidates that do not lengthen the schedule, greedily in
/// order. A fused kernel runs its communication on the compute lane, so a
/// chain whose collective already hid under independent compute can make
/// the layer slower; those chains stay unfused.
pub fn select_fusions(
    g: &OpGraph,
    costs: &[f64],
    candidates: Vec<FusedPair>,
    cluster: &ClusterConfig,
    mode: ScheduleMode,
) -> Result<Vec<FusedPair>> {
    let mut best = schedule(g, costs, mode)?.makespan;
    let mut kept: Vec<FusedPair> = Vec::new();
    for cand in candidates {
        kept.push(cand);
        let fused = apply_intra_op(g, &kept, cluster)?;
        let t = schedule(&fused, &fused_costs(&fused, costs), mode)?.makespan;
        if t <= best {
            best = t;
        } else {
            kept.pop();
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commcost::Tier;
    use crate::config::cluster_preset;
    use crate::simsched::graph::Phase;

    fn pair(compute: f64, comm: f64, path: CommPath, c: u64, tiles: u64) -> FusedPair {
        FusedPair {
            nodes: vec![],
            name: "p".into(),
            path,
            compute_time: compute,
            comm_time: comm,
            comm_sms: c,
            tiles,
            order: TileOrder::Swizzle,
            first_tile_deps: 8,
            min_tile_deps: 1,
        }
    }

    #[test]
    fn sm_driven_compute_slows_down() {
        let cs = compute_scaled(10e-6, CommPath::SmDriven, 132, 16).unwrap();
        assert!((cs - 11.3793e-6).abs() < 1e-10, "{cs}");
        assert_eq!(
            compute_scaled(10e-6, CommPath::CopyEngine, 132, 16).unwrap(),
            10e-6
        );
        assert!(compute_scaled(1.0, CommPath::SmDriven, 132, 132).is_err());
        assert!(compute_scaled(1.0, CommPath::SmDriven, 132, 0).is_err());
    }

    #[test]
    fn many_tiles_hide_copy_engine_comm() {
        let cl = cluster_preset("h800").unwrap();
        let t =
            fused_overlap_time(&pair(10.0, 6.0, CommPath::CopyEngine, 20, 1_000_000), &cl).unwrap();
        assert!((t - 10.0).abs() < 1e-4);
    }

    #[test]
    fn no_comm_is_plain_compute() {
        let cl = cluster_preset("h800").unwrap();
        assert_eq!(
            fused_overlap_time(&pair(7.0, 0.0, CommPath::SmDriven, 20, 4), &cl).unwrap(),
            7.0
        );
    }

    #[test]
    fn never_worse_than_unfused() {
        let cl = cluster_preset("h800").unwrap();
        let p = FusedPair {
            order: TileOrder::Natural,
            ..pair(1.0, 5.0, CommPath::SmDriven, 1, 1)
        };
        assert_eq!(fused_overlap_time(&p, &cl).unwrap(), 6.0);
    }

    #[test]
    fn swizzle_fill_not_above_natural() {
        let cl = cluster_preset("h800").unwrap();
        let sw = pair(4.0, 5.0, CommPath::SmDriven, 20, 8);
        let nat = FusedPair {
            order: TileOrder::Natural,
            ..sw.clone()
        };
        assert!(fused_overlap_time(&sw, &cl).unwrap() <= fused_overlap_time(&nat, &cl).unwrap());
    }

    #[test]
    fn tuning_balances_compute_and_comm() {
        let cl = cluster_preset("h800").unwrap();
        let p = pair(10.0, 1.0, CommPath::SmDriven, 20, 16);
        let c = tune_comm_sms(&p, &cl).unwrap();
        let tuned = fused_overlap_time(
            &FusedPair {
                comm_sms: c,
                ..p.clone()
            },
            &cl,
        )
        .unwrap();
        assert!(tuned <= fused_overlap_time(&p, &cl).unwrap());
        assert!(c < 20);
    }

    fn chain_graph() -> OpGraph {
        let mut g = OpGraph::new(Phase::Forward, None);
        let a = g.add_fixed("gemm", OpKind::Gemm, 4.0, &[]);
        g.nodes[a].rows = 512;
        let x = g.add_fixed(
            "a2a",
            OpKind::Collective {
                collective: Collective::AllToAll,
                tier: Tier::Intra,
            },
            3.0,
            &[a],
        );
        g.add_fixed("next", OpKind::Norm, 1.0, &[x]);
        g
    }

    #[test]
    fn find_and_apply() {
        let cl = cluster_preset("h800").unwrap();
        let g = chain_graph();
        let costs: Vec<f64> = g.nodes.iter().map(|n| n.fixed_time.unwrap()).collect();
        let opts = FusionOptions {
            tile_rows: 128,
            comm_sms: 20,
            order: TileOrder::Swizzle,
            ranks: 8,
        };
        let found = find_fusions(&g, &costs, &opts);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].nodes, vec![0, 1]);
        assert_eq!(found[0].tiles, 4);
        let fused = apply_intra_op(&g, &found, &cl).unwrap();
        assert_eq!(fused.live_count(), 2);
        let next = fused.find("next").unwrap();
        assert_eq!(fused.nodes[next].deps, vec![3]);
        // Consumed nodes cannot be fused again.
        assert!(matches!(
            apply_intra_op(&fused, &found, &cl),
            Err(Error::Graph(_))
        ));
    }

    #[test]
    fn mismatched_pattern_rejected() {
        let cl = cluster_preset("h800").unwrap();
        let g = chain_graph();
        let bogus = FusedPair {
            nodes: vec![1, 2],
            ..pair(1.0, 1.0, CommPath::SmDriven, 20, 1)
        };
        assert!(apply_intra_op(&g, &[bogus], &cl).is_err());
        let gap = FusedPair {
            nodes: vec![0, 2],
            ..pair(1.0, 1.0, CommPath::SmDriven, 20, 1)
        };
        assert!(apply_intra_op(&g, &[gap], &cl).is_err());
    }

    #[test]
    fn selection_skips_fusions_that_hurt() {
        let cl = cluster_preset("h800").unwrap();
        // AG -> GEMM beside an independent GEMM: unfused, the gather hides
        // under the other GEMM; fused, it would occupy the compute lane.
        let mut g = OpGraph::new(Phase::Forward, None);
        let ag = g.add_fixed(
            "ag",
            OpKind::Collective {
                collective: Collective::AllGather,
                tier: Tier::Intra,
            },
            4.0,
            &[],
        );
        let gemm = g.add_fixed("gemm", OpKind::Gemm, 4.0, &[ag]);
        g.nodes[gemm].rows = 128;
        g.add_fixed("other", OpKind::Gemm, 4.0, &[]);
        let costs: Vec<f64> = g.nodes.iter().map(|n| n.fixed_time.unwrap()).collect();
        let opts = FusionOptions {
            tile_rows: 128,
            comm_sms: 20,
            order: TileOrder::Swizzle,
            ranks: 8,
        };
        let found = find_fusions(&g, &costs, &opts);
        assert_eq!(found.len(), 1);
        let all = apply_intra_op(&g, &found, &cl).unwrap();
        let mode = ScheduleMode::InterOp;
        assert_eq!(schedule(&g, &costs, mode).unwrap().makespan, 8.0);
        assert_eq!(
            schedule(&all, &fused_costs(&all, &costs), mode)
                .unwrap()
                .makespan,
            12.0
        );
        assert!(select_fusions(&g, &costs, found, &cl, mode)
            .unwrap()
            .is_empty());

        let g = chain_graph();
        let costs: Vec<f64> = g.nodes.iter().map(|n| n.fixed_time.unwrap()).collect();
        let found = find_fusions(&g, &costs, &opts);
        assert_eq!(
            select_fusions(&g, &costs, found.clone(), &cl, mode).unwrap(),
            found
        );
    }
}

use serde::Serialize;

use crate::commcost::{ep_dispatch_volumes, Collective, CommVolume, EpPattern, Tier};
use crate::config::{ModelConfig, PrecisionConfig};
use crate::exact::int;
use crate::memmodel::RematPolicy;
use crate::planner::{AttnStrategy, FfnKind, ParallelismPlan};
use crate::{Error, Exact, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Gemm,
    GroupedGemm,
    AttentionCore,
    Norm,
    Swiglu,
    Router,
    Scatter,
    Gather,
    WeightedSum,
    Collective {
        collective: Collective,
        tier: Tier,
    },
    /// A tile-fused communication/computation kernel.
    Fused,
}

impl OpKind {
    pub fn is_collective(self) -> bool {
        matches!(self, OpKind::Collective { .. })
    }

    /// GEMMs and attention: the "useful" compute bucket.
    pub fn is_math(self) -> bool {
        matches!(
            self,
            OpKind::Gemm | OpKind::GroupedGemm | OpKind::AttentionCore | OpKind::Fused
        )
    }

    pub fn is_memory_bound(self) -> bool {
        matches!(
            self,
            OpKind::Norm
                | OpKind::Swiglu
                | OpKind::Router
                | OpKind::Scatter
                | OpKind::Gather
                | OpKind::WeightedSum
        )
    }

    pub fn resource(self) -> Resource {
        match self {
            OpKind::Collective {
                tier: Tier::Intra, ..
            } => Resource::CommIntra,
            OpKind::Collective {
                tier: Tier::Inter, ..
            } => Resource::CommInter,
            _ => Resource::Compute,
        }
    }
}

/// Execution lanes: the SMs and one communication channel per tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Compute,
    CommIntra,
    CommInter,
}

impl Resource {
    pub const ALL: [Resource; 3] = [Resource::Compute, Resource::CommIntra, Resource::CommInter];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Resource::Compute => "compute",
            Resource::CommIntra => "comm_intra",
            Resource::CommInter => "comm_inter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpNode {
    pub id: usize,
    pub name: String,
    pub kind: OpKind,
    pub flops: f64,
    pub bytes_moved: f64,
    /// Set for collectives.
    pub comm: Option<CommVolume>,
    pub participants: u64,
    pub deps: Vec<usize>,
    /// Recomputation of a discarded activation.
    pub remat: bool,
    /// Precomputed duration (fused kernels and synthetic graphs).
    pub fixed_time: Option<f64>,
    /// Set once the node has been folded into a fused kernel.
    pub consumed: bool,
    /// Output rows of a GEMM (tokens or token-slots); 0 elsewhere.
    pub rows: u64,
}

impl OpNode {
    pub fn resource(&self) -> Resource {
        self.kind.resource()
    }
}

/// Operator DAG of one layer for one micro-batch on one GPU.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpGraph {
    pub nodes: Vec<OpNode>,
    pub phase: Phase,
    pub plan: Option<ParallelismPlan>,
}

impl OpGraph {
    pub fn new(phase: Phase, plan: Option<ParallelismPlan>) -> Self {
        Self {
            nodes: Vec::new(),
            phase,
            plan,
        }
    }

    fn push(&mut self, name: &str, kind: OpKind, deps: &[usize]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(OpNode {
            id,
            name: name.to_string(),
            kind,
            flops: 0.0,
            bytes_moved: 0.0,
            comm: None,
            participants: 1,
            deps: deps.to_vec(),
            remat: false,
            fixed_time: None,
            consumed: false,
            rows: 0,
        });
        id
    }

    pub fn add_compute(&mut self, name: &str, kind: OpKind, flops: f64, deps: &[usize]) -> usize {
        let id = self.push(name, kind, deps);
        self.nodes[id].flops = flops;
        id
    }

    pub fn add_memory(&mut self, name: &str, kind: OpKind, bytes: f64, deps: &[usize]) -> usize {
        let id = self.push(name, kind, deps);
        self.nodes[id].bytes_moved = bytes;
        id
    }

    pub fn add_collective(
        &mut self,
        name: &str,
        volume: CommVolume,
        participants: u64,
        deps: &[usize],
    ) -> usize {
        let kind = OpKind::Collective {
            collective: volume.collective,
            tier: volume.tier,
        };
        let id = self.push(name, kind, deps);
        self.nodes[id].comm = Some(volume);
        self.nodes[id].participants = participants;
        id
    }

    /// Node with a fixed duration on the resource implied by `kind`.
    pub fn add_fixed(&mut self, name: &str, kind: OpKind, time: f64, deps: &[usize]) -> usize {
        let id = self.push(name, kind, deps);
        self.nodes[id].fixed_time = Some(time);
        id
    }

    pub fn live(&self) -> impl Iterator<Item = &OpNode> {
        self.nodes.iter().filter(|n| !n.consumed)
    }

    pub fn live_count(&self) -> usize {
        self.live().count()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.live().find(|n| n.name == name).map(|n| n.id)
    }

    /// Live successors of every node.
    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut succ = vec![Vec::new(); self.nodes.len()];
        for n in self.live() {
            for &d in &n.deps {
                succ[d].push(n.id);
            }
        }
        succ
    }

    /// Topological order, smallest id first among ready nodes.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let mut indeg = vec![0usize; self.nodes.len()];
        for n in self.live() {
            for &d in &n.deps {
                if d >= self.nodes.len() || self.nodes[d].consumed {
                    return Err(Error::Graph(format!(
                        "node `{}` depends on missing node {d}",
                        n.name
                    )));
                }
                indeg[n.id] += 1;
            }
        }
        let succ = self.successors();
        let mut ready: std::collections::BTreeSet<usize> = self
            .live()
            .filter(|n| indeg[n.id] == 0)
            .map(|n| n.id)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for &s in &succ[id] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != self.live_count() {
            return Err(Error::Graph("operator graph contains a cycle".into()));
        }
        Ok(order)
    }

    pub fn collective_count(&self, c: Collective) -> usize {
        self.live()
            .filter(|n| matches!(n.kind, OpKind::Collective { collective, .. } if collective == c))
            .count()
    }

    pub fn count_kind(&self, pred: impl Fn(OpKind) -> bool) -> usize {
        self.live().filter(|n| pred(n.kind)).count()
    }
}

/// Per-GPU sizes for one layer and one micro-batch.
struct Dims {
    /// Tokens in the micro-batch (`b*s`).
    t: f64,
    s: f64,
    h: f64,
    ffn: f64,
    experts: f64,
    k: f64,
    n: u64,
    nf: f64,
    /// `1 + 2/m`: QKV width relative to `h`.
    qkv: f64,
    qkv_exact: Exact,
    m: u64,
    /// Bytes per element of stored activations.
    act: f64,
    /// Bytes per element on the wire.
    wire: u64,
    tokens: Exact,
    b: u64,
    s_len: u64,
    h_len: u64,
    k_len: u64,
}

impl Dims {
    fn new(model: &ModelConfig, n: u64, precision: &PrecisionConfig) -> Self {
        let qkv_exact = Exact::from_integer(1) + int(2) / int(model.kv_ratio);
        Self {
            t: (model.micro_batch * model.seq_len) as f64,
            s: model.seq_len as f64,
            h: model.hidden as f64,
            ffn: model.ffn_hidden as f64,
            experts: model.num_experts as f64,
            k: model.top_k as f64,
            n,
            nf: n as f64,
            qkv: crate::to_f64(&qkv_exact),
            qkv_exact,
            m: model.kv_ratio,
            act: precision.activation_bytes() as f64,
            wire: precision.comm_bytes(),
            tokens: int(model.micro_batch) * int(model.seq_len),
            b: model.micro_batch,
            s_len: model.seq_len,
            h_len: model.hidden,
            k_len: model.top_k,
        }
    }

    fn h_exact(&self) -> Exact {
        int(self.h_len)
    }

    /// Local tokens when the sequence is sharded.
    fn tl(&self) -> f64 {
        self.t / self.nf
    }

    fn rows(&self, x: f64) -> u64 {
        x.ceil() as u64
    }

    /// Read-plus-write traffic of an elementwise op over `elems` elements.
    fn rw(&self, elems: f64) -> f64 {
        2.0 * elems * self.act
    }
}

/// Ids of the chain ends each block builder hands to the next.
struct Built {
    out: usize,
}

fn attention_block(g: &mut OpGraph, d: &Dims, attn: AttnStrategy) -> Result<Built> {
    let n = d.n;
    let comm = n > 1;
    let tl = d.tl();
    let norm = g.add_memory("attn_norm", OpKind::Norm, d.rw(tl * d.h), &[]);
    match attn {
        AttnStrategy::Sp => {
            let qkv = g.add_compute(
                "qkv_proj",
                OpKind::Gemm,
                2.0 * tl * d.h * d.h * d.qkv,
                &[norm],
            );
            g.nodes[qkv].rows = d.rows(tl);
            let mut prev = qkv;
            if comm {
                // Buffers sized so the pair's traffic equals the SP volume
                // formula (which counts each exchanged tensor twice).
                let buf = int(2) * d.qkv_exact * d.tokens * d.h_exact() / int(n);
                let v = CommVolume::new(Collective::AllToAll, Tier::Intra, buf, d.wire);
                prev = g.add_collective("a2a_qkv", v, n, &[qkv]);
            }
            let core = g.add_compute(
                "attn_core",
                OpKind::AttentionCore,
                4.0 * d.t * d.s * d.h / d.nf,
                &[prev],
            );
            prev = core;
            if comm {
                let buf = int(2) * d.tokens * d.h_exact() / int(n);
                let v = CommVolume::new(Collective::AllToAll, Tier::Intra, buf, d.wire);
                prev = g.add_collective("a2a_out", v, n, &[core]);
            }
            let out = g.add_compute("out_proj", OpKind::Gemm, 2.0 * tl * d.h * d.h, &[prev]);
            g.nodes[out].rows = d.rows(tl);
            Ok(Built { out })
        }
        AttnStrategy::Tp => {
            let mut prev = norm;
            if comm {
                let v = CommVolume::new(
                    Collective::AllGather,
                    Tier::Intra,
                    d.tokens * d.h_exact(),
                    d.wire,
                );
                prev = g.add_collective("ag_attn", v, n, &[norm]);
            }
            let qkv = g.add_compute(
                "qkv_proj",
                OpKind::Gemm,
                2.0 * d.t * d.h * d.h * d.qkv / d.nf,
                &[prev],
            );
            let core = g.add_compute(
                "attn_core",
                OpKind::AttentionCore,
                4.0 * d.t * d.s * d.h / d.nf,
                &[qkv],
            );
            let proj = g.add_compute(
                "out_proj",
                OpKind::Gemm,
                2.0 * d.t * d.h * d.h / d.nf,
                &[core],
            );
            g.nodes[qkv].rows = d.rows(d.t);
            g.nodes[proj].rows = d.rows(d.t);
            let mut out = proj;
            if comm {
                let v = CommVolume::new(
                    Collective::ReduceScatter,
                    Tier::Intra,
                    d.tokens * d.h_exact(),
                    d.wire,
                );
                out = g.add_collective("rs_attn", v, n, &[proj]);
            }
            Ok(Built { out })
        }
        AttnStrategy::Cp => {
            let qkv = g.add_compute(
                "qkv_proj",
                OpKind::Gemm,
                2.0 * tl * d.h * d.h * d.qkv,
                &[norm],
            );
            g.nodes[qkv].rows = d.rows(tl);
            let mut prev = qkv;
            if comm {
                let buf = int(2) * d.tokens * d.h_exact() / int(d.m);
                let v = CommVolume::new(Collective::AllGather, Tier::Intra, buf, d.wire);
                prev = g.add_collective("ag_kv", v, n, &[qkv]);
            }
            let core = g.add_compute(
                "attn_core",
                OpKind::AttentionCore,
                4.0 * d.t * d.s * d.h / d.nf,
                &[prev],
            );
            let out = g.add_compute("out_proj", OpKind::Gemm, 2.0 * tl * d.h * d.h, &[core]);
            g.nodes[out].rows = d.rows(tl);
            Ok(Built { out })
        }
        AttnStrategy::Dp => Err(Error::Config(
            "DP attention is not simulated: it needs n-fold activation memory".into(),
        )),
    }
}

fn ffn_block(
    g: &mut OpGraph,
    d: &Dims,
    ffn: FfnKind,
    pattern: Option<EpPattern>,
    after: usize,
) -> Result<Built> {
    let n = d.n;
    let comm = n > 1;
    let tl = d.tl();
    let norm = g.add_memory("ffn_norm", OpKind::Norm, d.rw(tl * d.h), &[after]);
    let router = g.add_compute(
        "router",
        OpKind::Router,
        2.0 * tl * d.h * d.experts,
        &[norm],
    );
    g.nodes[router].bytes_moved = tl * d.h * d.act + tl * d.experts * 4.0;

    // Expert rows this GPU computes and the width of its expert shard.
    let (rows, width) = match ffn {
        FfnKind::Ep => (d.t * d.k / d.nf, d.ffn),
        FfnKind::Tp => (d.t * d.k, d.ffn / d.nf),
    };
    let expert_chain = |g: &mut OpGraph, first_dep: usize| {
        let fc1 = g.add_compute(
            "fc1",
            OpKind::GroupedGemm,
            2.0 * rows * d.h * 2.0 * width,
            &[first_dep],
        );
        let act = g.add_memory("swiglu", OpKind::Swiglu, rows * 3.0 * width * d.act, &[fc1]);
        let ws = g.add_memory(
            "weighted_sum",
            OpKind::WeightedSum,
            d.rw(rows * width),
            &[act],
        );
        let fc2 = g.add_compute("fc2", OpKind::GroupedGemm, 2.0 * rows * width * d.h, &[ws]);
        g.nodes[fc1].rows = d.rows(rows);
        g.nodes[fc2].rows = d.rows(rows);
        fc2
    };

    let pattern = match ffn {
        FfnKind::Ep => {
            pattern.ok_or_else(|| Error::Config("EP plan without a dispatch pattern".into()))?
        }
        FfnKind::Tp => EpPattern::AgRs,
    };
    let vols = if comm {
        ep_dispatch_volumes(pattern, d.b, d.s_len, d.h_len, n, d.k_len, d.wire)?
    } else {
        Vec::new()
    };
    let out = match pattern {
        EpPattern::AgRs => {
            let mut prev = router;
            if let Some(v) = vols.first() {
                prev = g.add_collective("ag_ffn", v.clone(), n, &[router]);
            }
            let scatter = g.add_memory("scatter", OpKind::Scatter, d.rw(rows * d.h), &[prev]);
            let fc2 = expert_chain(g, scatter);
            let gather = g.add_memory("gather", OpKind::Gather, d.rw(rows * d.h), &[fc2]);
            match vols.get(1) {
                Some(v) => g.add_collective("rs_ffn", v.clone(), n, &[gather]),
                None => gather,
            }
        }
        EpPattern::A2a => {
            let local_rows = tl * d.k;
            let scatter = g.add_memory(
                "scatter",
                OpKind::Scatter,
                d.rw(local_rows * d.h),
                &[router],
            );
            let mut prev = scatter;
            if let Some(v) = vols.first() {
                prev = g.add_collective("a2a_dispatch", v.clone(), n, &[scatter]);
            }
            let mut last = expert_chain(g, prev);
            if let Some(v) = vols.get(1) {
                last = g.add_collective("a2a_combine", v.clone(), n, &[last]);
            }
            g.add_memory("gather", OpKind::Gather, d.rw(local_rows * d.h), &[last])
        }
    };
    Ok(Built { out })
}

/// Forward graph of one MoE layer for one micro-batch.
///
/// SP attention: `attn_norm -> qkv_proj -> a2a_qkv -> attn_core -> a2a_out
/// -> out_proj`. TP attention wraps the projections in an all-gather and a
/// reduce-scatter; CP all-gathers K and V. EP with `ag_rs`: `ffn_norm ->
/// router -> ag_ffn -> scatter -> fc1 -> swiglu -> weighted_sum -> fc2 ->
/// gather -> rs_ffn`; the routing weights multiply right after SwiGLU. EP
/// with `a2a` scatters locally and exchanges tokens with two all-to-alls.
/// TP FFN uses the `ag_rs` shape with every GPU computing all `k*b*s` rows
/// on a `1/n` slice of every expert.
pub fn build_layer_graph(
    plan: &ParallelismPlan,
    model: &ModelConfig,
    precision: &PrecisionConfig,
) -> Result<OpGraph> {
    let d = Dims::new(model, plan.n, precision);
    let mut g = OpGraph::new(Phase::Forward, Some(plan.clone()));
    let attn = attention_block(&mut g, &d, plan.attn)?;
    ffn_block(&mut g, &d, plan.ffn, plan.ep_pattern, attn.out)?;
    Ok(g)
}

fn transpose(c: Collective) -> Collective {
    match c {
        Collective::AllGather => Collective::ReduceScatter,
        Collective::ReduceScatter => Collective::AllGather,
        Collective::AllToAll => Collective::AllToAll,
    }
}

/// Backward graph mirroring `fwd`.
///
/// Every forward op gets a gradient op (`d_<name>`) depending on the
/// gradients of its forward consumers. GEMMs split into an input-gradient
/// op and a weight-gradient op (`w_<name>`), each with the forward FLOPs;
/// attention backward costs twice its forward; collectives are transposed
/// (all-gather <-> reduce-scatter). With rematerialization three ops
/// re-create discarded activations: `remat_norm` (both RMSNorm outputs),
/// `remat_dispatch` (the FFN dispatch collective, after `remat_norm`) and
/// `remat_swiglu` (SwiGLU plus routing weight, from the kept FC1 output).
/// None of them depends on a gradient op, so they can overlap the first
/// gradient collective. Node count = forward + GEMMs + remat ops.
pub fn build_backward_graph(fwd: &OpGraph, remat: &RematPolicy) -> Result<OpGraph> {
    if fwd.phase != Phase::Forward {
        return Err(Error::Graph("backward graph needs a forward graph".into()));
    }
    let order = fwd.topo_order()?;
    let succ = fwd.successors();
    let mut g = OpGraph::new(Phase::Backward, fwd.plan.clone());

    let mut remat_norm = None;
    let mut remat_dispatch = None;
    let mut remat_swiglu = None;
    if remat.enabled {
        let norm_bytes: f64 = fwd
            .live()
            .filter(|n| n.kind == OpKind::Norm)
            .map(|n| n.bytes_moved)
            .sum();
        let rn = g.add_memory("remat_norm", OpKind::Norm, norm_bytes, &[]);
        g.nodes[rn].remat = true;
        remat_norm = Some(rn);
        let dispatch = ["ag_ffn", "a2a_dispatch"]
            .iter()
            .find_map(|name| fwd.find(name));
        if let Some(id) = dispatch {
            let f = &fwd.nodes[id];
            let rd = g.add_collective(
                "remat_dispatch",
                f.comm.clone().expect("collective has a volume"),
                f.participants,
                &[rn],
            );
            g.nodes[rd].remat = true;
            remat_dispatch = Some(rd);
        }
        let swiglu_bytes: f64 = fwd
            .live()
            .filter(|n| matches!(n.kind, OpKind::Swiglu | OpKind::WeightedSum))
            .map(|n| n.bytes_moved)
            .sum();
        let rs = g.add_memory("remat_swiglu", OpKind::Swiglu, swiglu_bytes, &[]);
        g.nodes[rs].remat = true;
        remat_swiglu = Some(rs);
    }

    // Gradient op ids per forward node.
    let mut dgrad = vec![usize::MAX; fwd.nodes.len()];
    for &fid in order.iter().rev() {
        let f = &fwd.nodes[fid];
        let deps: Vec<usize> = succ[fid].iter().map(|&s| dgrad[s]).collect();
        let name = format!("d_{}", f.name);
        let id = match f.kind {
            OpKind::Collective { collective, tier } => {
                let v = f.comm.as_ref().expect("collective has a volume");
                let t = CommVolume {
                    collective: transpose(collective),
                    tier,
                    elements: v.elements,
                    bytes: v.bytes,
                };
                g.add_collective(&name, t, f.participants, &deps)
            }
            OpKind::AttentionCore => g.add_compute(&name, f.kind, 2.0 * f.flops, &deps),
            OpKind::Gemm | OpKind::GroupedGemm => {
                let d = g.add_compute(&name, f.kind, f.flops, &deps);
                g.nodes[d].rows = f.rows;
                let mut wdeps = deps.clone();
                let needs = match f.name.as_str() {
                    "qkv_proj" => remat_norm,
                    "fc1" => remat_dispatch.or(remat_norm),
                    "fc2" => remat_swiglu,
                    _ => None,
                };
                wdeps.extend(needs);
                let w = g.add_compute(&format!("w_{}", f.name), f.kind, f.flops, &wdeps);
                g.nodes[w].rows = f.rows;
                d
            }
            OpKind::Fused => {
                return Err(Error::Graph(
                    "cannot differentiate a fused graph; fuse after building both phases".into(),
                ))
            }
            _ => {
                let mut deps = deps;
                let needs = match f.kind {
                    OpKind::Router => remat_norm,
                    OpKind::WeightedSum => remat_swiglu,
                    _ => None,
                };
                deps.extend(needs);
                let id = g.add_memory(&name, f.kind, f.bytes_moved, &deps);
                g.nodes[id].flops = f.flops;
                id
            }
        };
        dgrad[fid] = id;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::model_preset;

    fn plan(
        attn: AttnStrategy,
        ffn: FfnKind,
        pattern: Option<EpPattern>,
        n: u64,
    ) -> ParallelismPlan {
        ParallelismPlan {
            attn,
            ffn,
            ep_pattern: pattern,
            n,
            pp: 1,
            vpp: 1,
            dp: 1,
            zero_stage: 1,
        }
    }

    fn build(p: &ParallelismPlan) -> OpGraph {
        build_layer_graph(
            p,
            &model_preset("mixtral-8x7b").unwrap(),
            &PrecisionConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn sp_ep_ag_rs_collectives() {
        let g = build(&plan(
            AttnStrategy::Sp,
            FfnKind::Ep,
            Some(EpPattern::AgRs),
            8,
        ));
        assert_eq!(g.collective_count(Collective::AllToAll), 2);
        assert_eq!(g.collective_count(Collective::AllGather), 1);
        assert_eq!(g.collective_count(Collective::ReduceScatter), 1);
        let names: Vec<&str> = g.nodes.iter().map(|n| n.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "attn_norm",
                "qkv_proj",
                "a2a_qkv",
                "attn_core",
                "a2a_out",
                "out_proj",
                "ffn_norm",
                "router",
                "ag_ffn",
                "scatter",
                "fc1",
                "swiglu",
                "weighted_sum",
                "fc2",
                "gather",
                "rs_ffn"
            ]
        );
    }

    #[test]
    fn tp_tp_collectives() {
        let g = build(&plan(AttnStrategy::Tp, FfnKind::Tp, None, 8));
        assert_eq!(g.collective_count(Collective::AllGather), 2);
        assert_eq!(g.collective_count(Collective::ReduceScatter), 2);
        assert_eq!(g.collective_count(Collective::AllToAll), 0);
    }

    #[test]
    fn single_gpu_has_no_collectives() {
        for p in [
            plan(AttnStrategy::Sp, FfnKind::Ep, Some(EpPattern::A2a), 1),
            plan(AttnStrategy::Tp, FfnKind::Tp, None, 1),
        ] {
            assert_eq!(build(&p).count_kind(OpKind::is_collective), 0);
        }
    }

    #[test]
    fn graph_volumes_match_formulas() {
        use crate::commcost::{attention_sp_volume, attention_tp_volume, ffn_ep_volume};
        let m = model_preset("mixtral-8x7b").unwrap();
        let traffic = |g: &OpGraph, names: &[&str]| {
            names.iter().fold(Exact::from_integer(0), |acc, nm| {
                let node = &g.nodes[g.find(nm).unwrap()];
                // Wire bytes back to elements.
                acc + node.comm.as_ref().unwrap().traffic(node.participants) / int(2)
            })
        };
        let sp = build(&plan(
            AttnStrategy::Sp,
            FfnKind::Ep,
            Some(EpPattern::A2a),
            8,
        ));
        assert_eq!(
            traffic(&sp, &["a2a_qkv", "a2a_out"]),
            attention_sp_volume(1, 8192, 4096, 8, 4).unwrap()
        );
        assert_eq!(
            traffic(&sp, &["a2a_dispatch", "a2a_combine"]),
            ffn_ep_volume(1, 8192, 4096, 8, m.top_k).unwrap()
        );
        let tp = build(&plan(AttnStrategy::Tp, FfnKind::Tp, None, 8));
        assert_eq!(
            traffic(&tp, &["ag_attn", "rs_attn"]),
            attention_tp_volume(1, 8192, 4096, 8).unwrap()
        );
    }

    #[test]
    fn backward_counts_and_remat_edges() {
        let fwd = build(&plan(
            AttnStrategy::Sp,
            FfnKind::Ep,
            Some(EpPattern::AgRs),
            8,
        ));
        let gemms = fwd.count_kind(|k| matches!(k, OpKind::Gemm | OpKind::GroupedGemm));
        let on = build_backward_graph(&fwd, &RematPolicy::selective()).unwrap();
        let off = build_backward_graph(&fwd, &RematPolicy::off()).unwrap();
        let remats = on.live().filter(|n| n.remat).count();
        assert_eq!(remats, 3);
        assert_eq!(off.live().filter(|n| n.remat).count(), 0);
        assert_eq!(on.live_count(), fwd.live_count() + gemms + remats);
        assert_eq!(off.live_count(), fwd.live_count() + gemms);

        let rd = on.find("remat_dispatch").unwrap();
        let d_rs = on.find("d_rs_ffn").unwrap();
        assert_eq!(
            on.nodes[d_rs].kind,
            OpKind::Collective {
                collective: Collective::AllGather,
                tier: Tier::Intra
            }
        );
        // No path from the gradient all-gather to the recomputed all-gather.
        let mut stack = on.nodes[rd].deps.clone();
        while let Some(x) = stack.pop() {
            assert_ne!(x, d_rs);
            stack.extend(on.nodes[x].deps.iter().copied());
        }
        on.topo_order().unwrap();
    }

    #[test]
    fn cycle_detected() {
        let mut g = OpGraph::new(Phase::Forward, None);
        let a = g.add_fixed("a", OpKind::Gemm, 1.0, &[]);
        let b = g.add_fixed("b", OpKind::Gemm, 1.0, &[a]);
        g.nodes[a].deps.push(b);
        assert!(matches!(g.topo_order(), Err(Error::Graph(_))));
    }

    #[test]
    fn dp_attention_is_rejected() {
        let p = plan(AttnStrategy::Dp, FfnKind::Ep, Some(EpPattern::A2a), 8);
        assert!(build_layer_graph(
            &p,
            &model_preset("mixtral-8x7b").unwrap(),
            &PrecisionConfig::default()
        )
        .is_err());
    }
}

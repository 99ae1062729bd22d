//! Operator graphs, analytic op costs and schedules.
//!
//! A layer is simulated for one micro-batch on one GPU, forward and
//! backward, under one of three regimes: serial, inter-operator overlap
//! (list scheduling over a compute lane and two communication lanes), and
//! inter-operator plus tile-fused kernels. Per-layer makespans roll up
//! through the pipeline closed form to an iteration time and MFU.
//!
//! Backward GEMMs cost twice their forward (input and weight gradients).

pub mod cost;
pub mod fusion;
pub mod graph;
pub mod pipeline;
pub mod schedule;
pub mod trace;

use serde::{Deserialize, Serialize};

pub use cost::{CostModel, EfficiencyTable};
pub use fusion::{
    apply_intra_op, compute_scaled, find_fusions, fused_costs, fused_overlap_time, select_fusions,
    tune_comm_sms, CommPath, FusedPair, FusionOptions, TileOrder,
};
pub use graph::{
    build_backward_graph, build_layer_graph, OpGraph, OpKind, OpNode, Phase, Resource,
};
pub use pipeline::{
    bubble_fraction, effective_vpp, mfu, pipeline_iteration_time, simulate_pipeline, stage_order,
    PipeOp,
};
pub use schedule::{critical_path, schedule, serial_sum, Breakdown, Event, ScheduleMode, Timeline};
pub use trace::{to_trace, trace_overlaps, TRACE_SCHEMA_VERSION};

use crate::commcost::{
    collective_time, dp_sync_time, hierarchical_sync_plan, CommVolume, LinkModel, SyncLayout, Tier,
};
use crate::config::{Config, DpCompress};
use crate::exact::int;
use crate::memmodel::{param_state_memory, RematPolicy};
use crate::planner::{AttnStrategy, ParallelismPlan};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub mode: ScheduleMode,
    pub remat: bool,
    /// Fuse the communication/computation chains that shorten the layer.
    pub fuse: bool,
    /// Search the SM split of each SM-driven fused kernel.
    pub tune_sms: bool,
    pub order: TileOrder,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::InterOp,
            remat: true,
            fuse: false,
            tune_sms: false,
            order: TileOrder::Swizzle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairReport {
    pub name: String,
    pub phase: Phase,
    pub path: CommPath,
    pub comm_sms: u64,
    pub tiles: u64,
    pub compute_time: f64,
    pub comm_time: f64,
    pub unfused_time: f64,
    pub fused_time: f64,
}

/// Simulated layer timelines, rolled up to one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub plan: ParallelismPlan,
    pub options: SimOptions,
    pub forward: Timeline,
    pub backward: Timeline,
    pub layers_per_stage: u64,
    pub microbatches: u64,
    /// Forward time of one micro-batch on one stage.
    pub per_mb_fwd: f64,
    pub per_mb_bwd: f64,
    pub dp_sync: f64,
    pub iteration_time: f64,
    pub mfu: f64,
    pub fusions: Vec<PairReport>,
}

impl SimReport {
    /// Iteration time split into the math / exposed-comm / other buckets,
    /// with pipeline bubble and gradient sync reported separately.
    pub fn iteration_breakdown(&self) -> (Breakdown, f64, f64) {
        let scale = (self.microbatches * self.layers_per_stage) as f64;
        let b = Breakdown {
            math: (self.forward.breakdown.math + self.backward.breakdown.math) * scale,
            exposed_comm: (self.forward.breakdown.exposed_comm
                + self.backward.breakdown.exposed_comm)
                * scale,
            other: (self.forward.breakdown.other + self.backward.breakdown.other) * scale,
        };
        let bubble = self.iteration_time
            - self.dp_sync
            - (self.per_mb_fwd + self.per_mb_bwd) * self.microbatches as f64;
        (b, bubble, self.dp_sync)
    }
}

/// Gradient synchronization after the last micro-batch: the stage's FP32
/// gradients (BF16 when compressed) across the `dp` nodes, plus the
/// intra-node reduce-scatter/all-gather of replicated attention weights.
///
/// Replicated attention gradients are reduce-scattered inside the node
/// first, so only a `1/n` shard of them crosses nodes, as under TP.
pub fn dp_sync_seconds(plan: &ParallelismPlan, cfg: &Config, link: &LinkModel) -> Result<f64> {
    let compressed = cfg.job.dp_compress != DpCompress::Off;
    let sharded = ParallelismPlan {
        attn: AttnStrategy::Tp,
        ..plan.clone()
    };
    let state = param_state_memory(&sharded, &cfg.model);
    let mut t = dp_sync_time(state.grads, plan.dp, link, compressed)?;
    if plan.attn != AttnStrategy::Tp && plan.n > 1 {
        let layers = int(cfg.model.num_layers / plan.pp);
        let grad_bytes = if compressed { 2 } else { 4 };
        let p = cfg.derived().attn_params * layers * int(grad_bytes);
        let sync = hierarchical_sync_plan(SyncLayout::Sp, p, plan.n, plan.dp)?;
        for s in sync.steps.iter().filter(|s| s.tier == Tier::Intra) {
            let v = CommVolume::new(s.collective, s.tier, s.bytes, 1);
            t += collective_time(&v, s.participants, link)?;
        }
    }
    Ok(t)
}

struct PhaseResult {
    timeline: Timeline,
    pairs: Vec<PairReport>,
}

fn run_phase(
    g: &OpGraph,
    cost: &CostModel,
    cfg: &Config,
    plan: &ParallelismPlan,
    opts: &SimOptions,
) -> Result<PhaseResult> {
    let costs = cost.costs(g)?;
    if !opts.fuse {
        return Ok(PhaseResult {
            timeline: schedule(g, &costs, opts.mode)?,
            pairs: Vec::new(),
        });
    }
    let fopts = FusionOptions {
        tile_rows: cfg.job.tile_rows,
        comm_sms: cfg.job.comm_sms,
        order: opts.order,
        ranks: plan.n,
    };
    let mut pairs = find_fusions(g, &costs, &fopts);
    if opts.tune_sms {
        for p in pairs.iter_mut() {
            p.comm_sms = tune_comm_sms(p, &cfg.cluster)?;
        }
    }
    let pairs = select_fusions(g, &costs, pairs, &cfg.cluster, opts.mode)?;
    let fused = apply_intra_op(g, &pairs, &cfg.cluster)?;
    let fused_costs = cost.costs(&fused)?;
    let reports = pairs
        .iter()
        .map(|p| {
            Ok(PairReport {
                name: p.name.clone(),
                phase: g.phase,
                path: p.path,
                comm_sms: p.comm_sms,
                tiles: p.tiles,
                compute_time: p.compute_time,
                comm_time: p.comm_time,
                unfused_time: p.unfused_time(),
                fused_time: fused_overlap_time(p, &cfg.cluster)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhaseResult {
        timeline: schedule(&fused, &fused_costs, opts.mode)?,
        pairs: reports,
    })
}

/// Forward and backward graphs of one layer under `plan`.
pub fn build_graphs(
    plan: &ParallelismPlan,
    cfg: &Config,
    remat: bool,
) -> Result<(OpGraph, OpGraph)> {
    let fwd = build_layer_graph(plan, &cfg.model, &cfg.precision)?;
    let bwd = build_backward_graph(&fwd, &RematPolicy::from_flag(remat))?;
    Ok((fwd, bwd))
}

pub fn simulate(plan: &ParallelismPlan, cfg: &Config, opts: &SimOptions) -> Result<SimReport> {
    let (fwd, bwd) = build_graphs(plan, cfg, opts.remat)?;
    let cost = CostModel::from_config(cfg);
    let f = run_phase(&fwd, &cost, cfg, plan, opts)?;
    let b = run_phase(&bwd, &cost, cfg, plan, opts)?;

    let layers_per_stage = cfg.model.num_layers / plan.pp;
    let microbatches = plan.micro_batches(&cfg.model);
    let per_mb_fwd = f.timeline.makespan * layers_per_stage as f64;
    let per_mb_bwd = b.timeline.makespan * layers_per_stage as f64;
    let dp_sync = dp_sync_seconds(plan, cfg, &cost.link)?;
    let iteration_time = pipeline_iteration_time(
        per_mb_fwd,
        per_mb_bwd,
        plan.pp,
        plan.vpp,
        microbatches,
        dp_sync,
    )?;
    let total_gpus = plan.n * plan.pp * plan.dp;
    let mfu = mfu(
        iteration_time,
        cfg.derived().model_flops_per_iter,
        &cfg.cluster,
        total_gpus,
    )?;
    let mut fusions = f.pairs;
    fusions.extend(b.pairs);
    Ok(SimReport {
        plan: plan.clone(),
        options: *opts,
        forward: f.timeline,
        backward: b.timeline,
        layers_per_stage,
        microbatches,
        per_mb_fwd,
        per_mb_bwd,
        dp_sync,
        iteration_time,
        mfu,
        fusions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::FfnKind;

    #[test]
    fn replicated_attention_adds_only_intra_node_sync() {
        let cfg = Config::from_presets("mixtral-8x7b", "h800", 4).unwrap();
        let link = LinkModel::from_cluster(&cfg.cluster);
        let mut plan = ParallelismPlan::from_job(&cfg).unwrap();
        assert_eq!(plan.ffn, FfnKind::Ep);
        plan.attn = AttnStrategy::Tp;
        let tp = dp_sync_seconds(&plan, &cfg, &link).unwrap();
        plan.attn = AttnStrategy::Sp;
        let sp = dp_sync_seconds(&plan, &cfg, &link).unwrap();

        let layers = int(cfg.model.num_layers);
        let p = cfg.derived().attn_params * layers * int(2);
        let sync = hierarchical_sync_plan(SyncLayout::Sp, p, plan.n, plan.dp).unwrap();
        let intra: f64 = sync
            .steps
            .iter()
            .filter(|s| s.tier == Tier::Intra)
            .map(|s| {
                collective_time(
                    &CommVolume::new(s.collective, s.tier, s.bytes, 1),
                    s.participants,
                    &link,
                )
                .unwrap()
            })
            .sum();
        assert!(intra > 0.0);
        assert!(
            ((sp - tp) - intra).abs() <= 1e-12 * sp,
            "sp {sp} tp {tp} intra {intra}"
        );
    }
}

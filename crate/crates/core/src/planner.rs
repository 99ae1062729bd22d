//! Parallelism plans: enumeration, scoring, ranking and the scale-up test.
//!
//! The design space pairs an attention strategy (TP, SP, CP, or DP, which
//! is always rejected) with an FFN strategy (TP or EP) inside a node of `n`
//! GPUs; pipeline and virtual stage counts come from the job, and data
//! parallelism takes the remaining GPUs.

use serde::{Deserialize, Serialize};

use crate::commcost::{ep_dispatch_time, ffn_ep_volume, EpPattern, LinkModel};
use crate::config::{
    ClusterConfig, Config, EpPatternChoice, JobConfig, ModelConfig, PrecisionConfig,
};
use crate::exact::int;
use crate::memmodel::{peak_memory, RematPolicy};
use crate::simsched::{build_graphs, simulate, CostModel, OpGraph, Resource, SimOptions};
use crate::{to_f64, Error, Exact, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnStrategy {
    Tp,
    Sp,
    /// Context parallelism; its volume is an estimate.
    Cp,
    /// Replicated attention: needs `n`-fold activation memory.
    Dp,
}

impl AttnStrategy {
    pub const ALL: [AttnStrategy; 4] = [
        AttnStrategy::Tp,
        AttnStrategy::Sp,
        AttnStrategy::Cp,
        AttnStrategy::Dp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttnStrategy::Tp => "tp",
            AttnStrategy::Sp => "sp",
            AttnStrategy::Cp => "cp",
            AttnStrategy::Dp => "dp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Tp,
    Ep,
}

impl FfnKind {
    pub const ALL: [FfnKind; 2] = [FfnKind::Tp, FfnKind::Ep];

    pub fn name(self) -> &'static str {
        match self {
            FfnKind::Tp => "tp",
            FfnKind::Ep => "ep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelismPlan {
    pub attn: AttnStrategy,
    pub ffn: FfnKind,
    /// Dispatch pattern; set exactly when `ffn` is EP.
    pub ep_pattern: Option<EpPattern>,
    /// Intra-node parallel size.
    pub n: u64,
    pub pp: u64,
    pub vpp: u64,
    pub dp: u64,
    pub zero_stage: u8,
}

impl ParallelismPlan {
    pub fn micro_batches(&self, model: &ModelConfig) -> u64 {
        model.global_batch / (model.micro_batch * self.dp)
    }

    /// `sp+ep`, `tp+tp`, ...
    pub fn strategy(&self) -> String {
        format!("{}+{}", self.attn.name(), self.ffn.name())
    }

    pub fn name(&self) -> String {
        let pattern = self
            .ep_pattern
            .map(|p| format!("({})", p.name()))
            .unwrap_or_default();
        format!(
            "{}{} n={} pp={} vpp={} dp={}",
            self.strategy(),
            pattern,
            self.n,
            self.pp,
            self.vpp,
            self.dp
        )
    }

    /// The plan a job describes, with the planner's choices filled in for
    /// unset strategies.
    pub fn from_job(cfg: &Config) -> Result<Self> {
        let job = &cfg.job;
        let ffn = job.ffn.unwrap_or(FfnKind::Ep);
        let link = LinkModel::from_cluster(&cfg.cluster);
        let plan = Self {
            attn: job.attention.unwrap_or(AttnStrategy::Sp),
            ffn,
            ep_pattern: match ffn {
                FfnKind::Ep => Some(resolve_pattern(
                    job.ep_pattern,
                    &cfg.model,
                    job.parallel_size,
                    &link,
                    &cfg.precision,
                )?),
                FfnKind::Tp => None,
            },
            n: job.parallel_size,
            pp: job.pipeline_stages,
            vpp: job.virtual_stages,
            dp: job.data_parallel(&cfg.cluster),
            zero_stage: job.zero_stage,
        };
        if let Some(reason) = plan.rejection(&cfg.model, &cfg.cluster) {
            return Err(Error::validation(
                "job",
                format!("plan {} is not admissible: {reason}", plan.name()),
            ));
        }
        Ok(plan)
    }

    /// Why the plan is not admissible, if it is not.
    pub fn rejection(&self, model: &ModelConfig, cluster: &ClusterConfig) -> Option<String> {
        let n = self.n;
        if n == 0 || n > cluster.gpus_per_node {
            return Some(format!(
                "n={n} exceeds the {} GPUs of a node",
                cluster.gpus_per_node
            ));
        }
        if n * self.pp * self.dp != cluster.total_gpus() {
            return Some("n * pp * dp differs from the GPU count".into());
        }
        if !model
            .global_batch
            .is_multiple_of(model.micro_batch * self.dp)
        {
            return Some(format!("global batch does not split over dp={}", self.dp));
        }
        if !model.num_layers.is_multiple_of(self.pp * self.vpp) {
            return Some("layers do not split over pipeline chunks".into());
        }
        match self.attn {
            AttnStrategy::Dp if n > 1 => return Some("n× activation memory".into()),
            AttnStrategy::Tp if !model.num_heads.is_multiple_of(n) => {
                return Some(format!("{} heads not divisible by n={n}", model.num_heads))
            }
            AttnStrategy::Sp
                if !model.num_heads.is_multiple_of(n) || !model.seq_len.is_multiple_of(n) =>
            {
                return Some(format!("heads or sequence not divisible by n={n}"))
            }
            AttnStrategy::Cp if !model.seq_len.is_multiple_of(n) => {
                return Some(format!("sequence not divisible by n={n}"))
            }
            _ => {}
        }
        match self.ffn {
            FfnKind::Ep if !model.num_experts.is_multiple_of(n) => Some(format!(
                "{} experts not divisible by n={n}",
                model.num_experts
            )),
            FfnKind::Ep if self.ep_pattern.is_none() => {
                Some("EP plan without a dispatch pattern".into())
            }
            FfnKind::Tp if !model.ffn_hidden.is_multiple_of(n) => {
                Some(format!("expert hidden size not divisible by n={n}"))
            }
            FfnKind::Tp if self.ep_pattern.is_some() => {
                Some("TP FFN has no dispatch pattern".into())
            }
            _ => None,
        }
    }
}

/// Adaptive dispatch: the cheaper of the two patterns, ties to all-to-all
/// (which needs no full gather buffer).
pub fn select_ep_pattern(
    model: &ModelConfig,
    n: u64,
    link: &LinkModel,
    precision: &PrecisionConfig,
) -> Result<EpPattern> {
    let time = |p| {
        ep_dispatch_time(
            p,
            model.micro_batch,
            model.seq_len,
            model.hidden,
            n,
            model.top_k,
            link,
            precision,
        )
    };
    let a2a = time(EpPattern::A2a)?;
    let agrs = time(EpPattern::AgRs)?;
    Ok(if agrs < a2a {
        EpPattern::AgRs
    } else {
        EpPattern::A2a
    })
}

fn resolve_pattern(
    choice: EpPatternChoice,
    model: &ModelConfig,
    n: u64,
    link: &LinkModel,
    precision: &PrecisionConfig,
) -> Result<EpPattern> {
    match choice {
        EpPatternChoice::Auto => select_ep_pattern(model, n, link, precision),
        EpPatternChoice::A2a => Ok(EpPattern::A2a),
        EpPatternChoice::AgRs => Ok(EpPattern::AgRs),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejected {
    pub plan: ParallelismPlan,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Enumeration {
    pub plans: Vec<ParallelismPlan>,
    pub rejected: Vec<Rejected>,
}

/// Every (attention, FFN, n) combination for the job's pipeline shape.
/// Inadmissible ones, including every DP-attention plan with `n > 1`, are
/// kept in `rejected` with the reason.
pub fn enumerate_plans(
    model: &ModelConfig,
    cluster: &ClusterConfig,
    job: &JobConfig,
    precision: &PrecisionConfig,
) -> Result<Enumeration> {
    let link = LinkModel::from_cluster(cluster);
    let total = cluster.total_gpus();
    let mut out = Enumeration {
        plans: Vec::new(),
        rejected: Vec::new(),
    };
    for n in 1..=cluster.gpus_per_node {
        let shards = n * job.pipeline_stages;
        let dp = if total.is_multiple_of(shards) {
            total / shards
        } else {
            0
        };
        for attn in AttnStrategy::ALL {
            for ffn in FfnKind::ALL {
                let ep_pattern = match ffn {
                    FfnKind::Ep => {
                        Some(resolve_pattern(job.ep_pattern, model, n, &link, precision)?)
                    }
                    FfnKind::Tp => None,
                };
                let plan = ParallelismPlan {
                    attn,
                    ffn,
                    ep_pattern,
                    n,
                    pp: job.pipeline_stages,
                    vpp: job.virtual_stages,
                    dp,
                    zero_stage: job.zero_stage,
                };
                let reason = if dp == 0 {
                    Some(format!("n * pp = {shards} does not divide {total} GPUs"))
                } else {
                    plan.rejection(model, cluster)
                };
                match reason {
                    Some(reason) => out.rejected.push(Rejected { plan, reason }),
                    None => out.plans.push(plan),
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanScore {
    pub plan: ParallelismPlan,
    /// Collective time per layer (forward + backward) on the dependency
    /// chain.
    pub critical_path_comm: f64,
    /// Collective time per layer that has no gradient dependency
    /// (rematerialized dispatch) and can hide under compute.
    pub overlappable_comm: f64,
    /// Compute-lane time per layer, forward + backward.
    pub compute: f64,
    pub mem_per_gpu: u64,
    pub feasible: bool,
    pub est_iter_time: f64,
    pub mfu: f64,
    /// The plan's volumes rest on an estimate (CP).
    pub estimate: bool,
    pub note: Option<String>,
}

fn lane_sums(g: &OpGraph, costs: &[f64]) -> (f64, f64, f64) {
    let (mut crit, mut over, mut comp) = (0.0, 0.0, 0.0);
    for node in g.live() {
        let t = costs[node.id];
        match (node.resource(), node.remat) {
            (Resource::Compute, _) => comp += t,
            (_, true) => over += t,
            (_, false) => crit += t,
        }
    }
    (crit, over, comp)
}

/// Scores a plan with the quick simulation (inter-operator overlap, no
/// fusion). Failures surface as `feasible = false`.
pub fn score_plan(plan: &ParallelismPlan, cfg: &Config) -> PlanScore {
    match try_score(plan, cfg) {
        Ok(s) => s,
        Err(e) => PlanScore {
            plan: plan.clone(),
            critical_path_comm: 0.0,
            overlappable_comm: 0.0,
            compute: 0.0,
            mem_per_gpu: 0,
            feasible: false,
            est_iter_time: f64::INFINITY,
            mfu: 0.0,
            estimate: plan.attn == AttnStrategy::Cp,
            note: Some(e.to_string()),
        },
    }
}

fn try_score(plan: &ParallelismPlan, cfg: &Config) -> Result<PlanScore> {
    let remat = cfg.job.remat;
    let (fwd, bwd) = build_graphs(plan, cfg, remat)?;
    let cost = CostModel::from_config(cfg);
    let mut sums = (0.0, 0.0, 0.0);
    for g in [&fwd, &bwd] {
        let (c, o, p) = lane_sums(g, &cost.costs(g)?);
        sums.0 += c;
        sums.1 += o;
        sums.2 += p;
    }
    let mem = peak_memory(
        plan,
        cfg,
        &RematPolicy::from_flag(remat),
        cfg.job.dp_compress,
    )?;
    let sim = simulate(
        plan,
        cfg,
        &SimOptions {
            remat,
            ..SimOptions::default()
        },
    )?;
    let fits = mem.total <= cfg.cluster.mem_capacity;
    Ok(PlanScore {
        plan: plan.clone(),
        critical_path_comm: sums.0,
        overlappable_comm: sums.1,
        compute: sums.2,
        mem_per_gpu: mem.total,
        feasible: fits,
        est_iter_time: sim.iteration_time,
        mfu: sim.mfu,
        estimate: plan.attn == AttnStrategy::Cp,
        note: (!fits).then(|| format!("needs {} bytes per GPU", mem.total)),
    })
}

/// Best first: exact before estimated, feasible before infeasible, then
/// higher MFU, lower memory, lower critical-path communication, and name.
pub fn rank_plans(mut scores: Vec<PlanScore>) -> Vec<PlanScore> {
    scores.sort_by(|a, b| {
        a.estimate
            .cmp(&b.estimate)
            .then(b.feasible.cmp(&a.feasible))
            .then(b.mfu.total_cmp(&a.mfu))
            .then(a.mem_per_gpu.cmp(&b.mem_per_gpu))
            .then(a.critical_path_comm.total_cmp(&b.critical_path_comm))
            .then(a.plan.name().cmp(&b.plan.name()))
    });
    scores
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleUpReport {
    pub n: u64,
    /// `intra` when `n` fits in a node, else `inter`.
    pub tier: String,
    pub bandwidth_elems: f64,
    pub comm_time: f64,
    pub comp_time: f64,
    /// `comp_time / comm_time = 1.5 h_ffn (bw/peak) n/(n-1)`.
    pub r: f64,
    /// `1.5 h_ffn bw / peak`, dropping the `n/(n-1)` factor.
    pub r_approx: f64,
    pub sustains: bool,
}

/// Ratio of expert compute time to EP dispatch time.
///
/// `R` is evaluated from its cancelled form, so scaling `b`, `s`, `h` or
/// `k` leaves it bit-identical; the times themselves are reported too.
pub fn scale_up_ratio(
    model: &ModelConfig,
    cluster: &ClusterConfig,
    n: u64,
    precision: &PrecisionConfig,
) -> Result<ScaleUpReport> {
    if n < 2 {
        return Err(Error::domain("scale-up ratio needs n >= 2"));
    }
    let (tier, bw) = if n <= cluster.gpus_per_node {
        ("intra", cluster.intra_bw)
    } else {
        ("inter", cluster.inter_bw)
    };
    if !(bw > 0.0) || !(cluster.peak_flops > 0.0) {
        return Err(Error::domain("bandwidth and peak FLOP/s must be positive"));
    }
    let bw_elems = bw / precision.comm_bytes() as f64;
    let (b, s, h, k) = (model.micro_batch, model.seq_len, model.hidden, model.top_k);
    let volume = ffn_ep_volume(b, s, h, n, k)?;
    let flops = int(3) * int(k) * int(b) * int(s) * int(h) * int(model.ffn_hidden) / int(n);
    let comm_time = to_f64(&volume) / bw_elems;
    let comp_time = to_f64(&flops) / cluster.peak_flops;
    let half = Exact::new(3, 2) * int(model.ffn_hidden);
    let exact_r = half * int(n) / int(n - 1);
    let rate = bw_elems / cluster.peak_flops;
    let r = to_f64(&exact_r) * rate;
    Ok(ScaleUpReport {
        n,
        tier: tier.into(),
        bandwidth_elems: bw_elems,
        comm_time,
        comp_time,
        r,
        r_approx: to_f64(&half) * rate,
        sustains: r > 1.0,
    })
}

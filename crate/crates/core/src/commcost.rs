//! Communication volumes and collective latencies.
//!
//! Volume functions return per-rank element counts as exact rationals. With
//! `b` micro-batch sequences of `s` tokens, hidden size `h`, parallel size
//! `n`, `m` query heads per KV head and `k` experts per token:
//!
//! | quantity            | elements per rank                  |
//! |---------------------|------------------------------------|
//! | TP attention        | `2bsh (n-1)/n`                     |
//! | SP attention        | `2bsh (n-1)/n * (2 + 2/m)/n`       |
//! | CP attention (est.) | `2bs (h/m) (n-1)/n`                |
//! | EP FFN              | `2 (k/n) bsh (n-1)/n`              |
//! | TP FFN              | `2bsh (n-1)/n`                     |
//!
//! The CP figure is an estimate (all-gathered K and V only); reports flag it.
//!
//! # Latency model
//!
//! Ring all-gather and reduce-scatter over `p` ranks of a buffer of `B`
//! bytes (the full, gathered size) cost `alpha (p-1) + B beta (p-1)/p`.
//! All-to-all moves the same `(p-1)/p` share of its buffer but is less
//! efficient than neighbour-only rings; it costs
//! `(alpha + B beta (p-1)/p) * a2a_penalty`. The default penalty of 1.4
//! places the all-to-all vs. all-gather/reduce-scatter crossover for
//! Mixtral-8x7B geometry on H800 links at `k = 7`.
//!
//! # EP dispatch
//!
//! With the `a2a` pattern each rank sends its tokens, replicated to `k`
//! experts, to the expert owners and receives them back: two all-to-alls
//! with a buffer of `k bsh / n` elements each. Their combined traffic,
//! `2 (k bsh/n)(n-1)/n`, is exactly the EP FFN volume. With `ag_rs` every
//! rank gathers all `bsh` activations and reduce-scatters the outputs, for
//! the TP-shaped volume.

use serde::{Deserialize, Serialize};

use crate::config::{ClusterConfig, PrecisionConfig};
use crate::exact::int;
use crate::{to_f64, Error, Exact, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Intra,
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collective {
    AllGather,
    ReduceScatter,
    AllToAll,
}

impl Collective {
    pub fn short_name(self) -> &'static str {
        match self {
            Collective::AllGather => "AG",
            Collective::ReduceScatter => "RS",
            Collective::AllToAll => "A2A",
        }
    }
}

/// Alpha-beta parameters for both tiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkModel {
    pub alpha_intra: f64,
    pub beta_intra: f64,
    pub alpha_inter: f64,
    pub beta_inter: f64,
    pub a2a_penalty: f64,
}

impl LinkModel {
    pub fn from_cluster(c: &ClusterConfig) -> Self {
        Self {
            alpha_intra: c.alpha_intra,
            beta_intra: 1.0 / c.intra_bw,
            alpha_inter: c.alpha_inter,
            beta_inter: 1.0 / c.inter_bw,
            a2a_penalty: c.a2a_penalty,
        }
    }

    /// Latency-free, penalty-free model from two bandwidths (bytes/s).
    pub fn bandwidth_only(intra_bw: f64, inter_bw: f64) -> Self {
        Self {
            alpha_intra: 0.0,
            beta_intra: 1.0 / intra_bw,
            alpha_inter: 0.0,
            beta_inter: 1.0 / inter_bw,
            a2a_penalty: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_intra,
            self.beta_intra,
            self.alpha_inter,
            self.beta_inter,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::domain("link parameters must be finite and >= 0"));
        }
        if self.beta_inter < self.beta_intra {
            return Err(Error::domain("inter-node beta must be >= intra-node beta"));
        }
        if !(self.a2a_penalty >= 1.0) {
            return Err(Error::domain("a2a_penalty must be >= 1"));
        }
        Ok(())
    }

    fn tier(&self, t: Tier) -> (f64, f64) {
        match t {
            Tier::Intra => (self.alpha_intra, self.beta_intra),
            Tier::Inter => (self.alpha_inter, self.beta_inter),
        }
    }
}

/// One collective's buffer. `elements` is the full buffer each rank holds
/// (gathered size for AG/RS, send buffer for A2A).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommVolume {
    pub collective: Collective,
    pub tier: Tier,
    pub elements: Exact,
    pub bytes: Exact,
}

impl CommVolume {
    pub fn new(
        collective: Collective,
        tier: Tier,
        elements: Exact,
        bytes_per_element: u64,
    ) -> Self {
        Self {
            collective,
            tier,
            elements,
            bytes: elements * int(bytes_per_element),
        }
    }

    /// Bytes each rank actually sends: `(p-1)/p` of the buffer.
    pub fn traffic(&self, participants: u64) -> Exact {
        if participants == 0 {
            return Exact::from_integer(0);
        }
        self.bytes * int(participants - 1) / int(participants)
    }
}

fn check_n(n: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::domain("parallel size n must be >= 1"));
    }
    Ok(())
}

fn check_m(m: u64) -> Result<()> {
    if m == 0 {
        return Err(Error::domain("kv ratio m must be >= 1"));
    }
    Ok(())
}

fn bsh(b: u64, s: u64, h: u64) -> Exact {
    int(b) * int(s) * int(h)
}

/// `(n-1)/n`.
fn ring_share(n: u64) -> Exact {
    int(n - 1) / int(n)
}

/// TP attention: all-gather before QKV plus reduce-scatter after the output
/// projection.
pub fn attention_tp_volume(b: u64, s: u64, h: u64, n: u64) -> Result<Exact> {
    check_n(n)?;
    Ok(int(2) * bsh(b, s, h) * ring_share(n))
}

/// SP attention: all-to-all of Q, K, V before attention and of the output
/// after it.
pub fn attention_sp_volume(b: u64, s: u64, h: u64, n: u64, m: u64) -> Result<Exact> {
    check_m(m)?;
    let tp = attention_tp_volume(b, s, h, n)?;
    Ok(tp * (int(2) + int(2) / int(m)) / int(n))
}

/// CP attention estimate: all-gather of K and V.
pub fn attention_cp_volume(b: u64, s: u64, h: u64, n: u64, m: u64) -> Result<Exact> {
    check_n(n)?;
    check_m(m)?;
    Ok(int(2) * int(b) * int(s) * (int(h) / int(m)) * ring_share(n))
}

/// EP FFN: dispatch and combine all-to-alls.
pub fn ffn_ep_volume(b: u64, s: u64, h: u64, n: u64, k: u64) -> Result<Exact> {
    check_n(n)?;
    if k == 0 {
        return Err(Error::domain("top_k must be >= 1"));
    }
    Ok(int(2) * (int(k) / int(n)) * bsh(b, s, h) * ring_share(n))
}

/// TP FFN: all-gather plus reduce-scatter of the layer activations.
pub fn ffn_tp_volume(b: u64, s: u64, h: u64, n: u64) -> Result<Exact> {
    attention_tp_volume(b, s, h, n)
}

/// Alpha-beta time of one collective.
pub fn collective_time(v: &CommVolume, participants: u64, link: &LinkModel) -> Result<f64> {
    if participants == 0 {
        return Err(Error::domain("collective needs at least one participant"));
    }
    if participants == 1 {
        return Ok(0.0);
    }
    let (alpha, beta) = link.tier(v.tier);
    let p = participants as f64;
    let bandwidth_term = to_f64(&v.traffic(participants)) * beta;
    Ok(match v.collective {
        Collective::AllGather | Collective::ReduceScatter => alpha * (p - 1.0) + bandwidth_term,
        Collective::AllToAll => (alpha + bandwidth_term) * link.a2a_penalty,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpPattern {
    A2a,
    AgRs,
}

impl EpPattern {
    pub fn name(self) -> &'static str {
        match self {
            EpPattern::A2a => "a2a",
            EpPattern::AgRs => "ag_rs",
        }
    }
}

/// Buffers moved by one EP dispatch plus combine, in execution order.
pub fn ep_dispatch_volumes(
    pattern: EpPattern,
    b: u64,
    s: u64,
    h: u64,
    n: u64,
    k: u64,
    bytes_per_element: u64,
) -> Result<Vec<CommVolume>> {
    check_n(n)?;
    Ok(match pattern {
        EpPattern::A2a => {
            let buf = int(k) * bsh(b, s, h) / int(n);
            vec![
                CommVolume::new(Collective::AllToAll, Tier::Intra, buf, bytes_per_element),
                CommVolume::new(Collective::AllToAll, Tier::Intra, buf, bytes_per_element),
            ]
        }
        EpPattern::AgRs => {
            let buf = bsh(b, s, h);
            vec![
                CommVolume::new(Collective::AllGather, Tier::Intra, buf, bytes_per_element),
                CommVolume::new(
                    Collective::ReduceScatter,
                    Tier::Intra,
                    buf,
                    bytes_per_element,
                ),
            ]
        }
    })
}

/// Time of one EP dispatch plus combine on the intra-node tier.
#[allow(clippy::too_many_arguments)]
pub fn ep_dispatch_time(
    pattern: EpPattern,
    b: u64,
    s: u64,
    h: u64,
    n: u64,
    k: u64,
    link: &LinkModel,
    precision: &PrecisionConfig,
) -> Result<f64> {
    ep_dispatch_volumes(pattern, b, s, h, n, k, precision.comm_bytes())?
        .iter()
        .map(|v| collective_time(v, n, link))
        .sum()
}

/// Parameter layout of attention weights, which decides how gradients are
/// synchronized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncLayout {
    /// Weights sharded `n` ways; each shard synchronizes across nodes.
    Tp,
    /// Weights replicated on all `n` ranks of a node.
    Sp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncStep {
    pub collective: Collective,
    pub tier: Tier,
    /// Buffer size in bytes.
    pub bytes: Exact,
    pub participants: u64,
}

impl SyncStep {
    fn volume(&self) -> CommVolume {
        CommVolume {
            collective: self.collective,
            tier: self.tier,
            elements: self.bytes,
            bytes: self.bytes,
        }
    }

    /// Bytes each rank sends in this step.
    pub fn traffic(&self) -> Exact {
        self.volume().traffic(self.participants)
    }
}

/// Gradient synchronization of replicated or sharded attention weights over
/// `n` ranks per node and `d` nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncPlan {
    pub steps: Vec<SyncStep>,
    /// Per-rank bytes sent on the inter-node tier.
    pub inter_volume: Exact,
    /// Per-rank bytes sent on the intra-node tier.
    pub intra_volume: Exact,
}

impl SyncPlan {
    /// Steps executed back to back.
    pub fn serial_time(&self, link: &LinkModel) -> Result<f64> {
        self.steps
            .iter()
            .map(|s| collective_time(&s.volume(), s.participants, link))
            .sum()
    }

    /// Chunked execution in which the tiers run concurrently; bounded by
    /// the slower tier.
    pub fn pipelined_time(&self, link: &LinkModel) -> Result<f64> {
        let mut by_tier = [0.0f64; 2];
        for s in &self.steps {
            let t = collective_time(&s.volume(), s.participants, link)?;
            by_tier[(s.tier == Tier::Inter) as usize] += t;
        }
        Ok(by_tier[0].max(by_tier[1]))
    }
}

/// Builds the reduce/distribute steps for `p_attn` bytes of attention
/// gradients.
///
/// TP: inter-node reduce-scatter and all-gather of each `P/n` shard across
/// the `d` nodes. SP: intra-node reduce-scatter of the full `P` first, so
/// every rank owns a `P/n` slice, then the same two inter-node steps, then
/// an intra-node all-gather. The inter-node traffic is identical.
pub fn hierarchical_sync_plan(
    layout: SyncLayout,
    p_attn: Exact,
    n: u64,
    d: u64,
) -> Result<SyncPlan> {
    if n == 0 || d == 0 {
        return Err(Error::domain("hierarchical sync needs n >= 1 and d >= 1"));
    }
    let shard = p_attn / int(n);
    let step = |collective, tier, bytes, participants| SyncStep {
        collective,
        tier,
        bytes,
        participants,
    };
    let inter = [
        step(Collective::ReduceScatter, Tier::Inter, shard, d),
        step(Collective::AllGather, Tier::Inter, shard, d),
    ];
    let steps: Vec<SyncStep> = match layout {
        SyncLayout::Sp if n > 1 => {
            let mut v = vec![step(Collective::ReduceScatter, Tier::Intra, p_attn, n)];
            v.extend(inter);
            v.push(step(Collective::AllGather, Tier::Intra, p_attn, n));
            v
        }
        _ => inter.to_vec(),
    };
    let sum = |tier: Tier| {
        steps
            .iter()
            .filter(|s| s.tier == tier)
            .map(SyncStep::traffic)
            .fold(Exact::from_integer(0), |a, b| a + b)
    };
    let inter_volume = sum(Tier::Inter);
    let intra_volume = sum(Tier::Intra);
    Ok(SyncPlan {
        steps,
        inter_volume,
        intra_volume,
    })
}

/// Ratio of inter-node to intra-node latency of the SP synchronization:
/// `(1/n) (intra_bw/inter_bw) n(d-1) / (d(n-1))`.
pub fn hierarchical_ratio(n: u64, d: u64, intra_bw: Exact, inter_bw: Exact) -> Result<Exact> {
    if n < 2 {
        return Err(Error::domain(
            "hierarchical ratio needs n >= 2 (divides by n-1)",
        ));
    }
    if d < 2 {
        return Err(Error::domain("hierarchical ratio needs d >= 2"));
    }
    if inter_bw <= Exact::from_integer(0) || intra_bw <= Exact::from_integer(0) {
        return Err(Error::domain("bandwidths must be positive"));
    }
    Ok(
        Exact::from_integer(1) / int(n) * (intra_bw / inter_bw) * int(n) * int(d - 1)
            / (int(d) * int(n - 1)),
    )
}

/// Limit of [`hierarchical_ratio`] for many nodes: `(intra/inter)/(n-1)`.
pub fn hierarchical_ratio_asymptotic(n: u64, intra_bw: Exact, inter_bw: Exact) -> Result<Exact> {
    if n < 2 {
        return Err(Error::domain(
            "hierarchical ratio needs n >= 2 (divides by n-1)",
        ));
    }
    if inter_bw <= Exact::from_integer(0) || intra_bw <= Exact::from_integer(0) {
        return Err(Error::domain("bandwidths must be positive"));
    }
    Ok(Exact::from_integer(1) / int(n) * (intra_bw / inter_bw) * int(n) / int(n - 1))
}

/// Bytes in each data-parallel gradient collective: the FP32 gradients, or
/// half of them once cast to BF16.
pub fn dp_sync_bytes(grad_bytes_fp32: Exact, compressed: bool) -> Exact {
    if compressed {
        grad_bytes_fp32 / int(2)
    } else {
        grad_bytes_fp32
    }
}

/// Data-parallel gradient synchronization on the inter-node tier.
///
/// Uncompressed: FP32 reduce-scatter plus all-gather. Compressed: BF16
/// all-to-all, local FP32 reduction, then BF16 all-gather.
pub fn dp_sync_time(
    grad_bytes_fp32: Exact,
    d: u64,
    link: &LinkModel,
    compressed: bool,
) -> Result<f64> {
    if d == 0 {
        return Err(Error::domain("data-parallel size must be >= 1"));
    }
    let bytes = dp_sync_bytes(grad_bytes_fp32, compressed);
    let first = if compressed {
        Collective::AllToAll
    } else {
        Collective::ReduceScatter
    };
    let steps = [
        CommVolume::new(first, Tier::Inter, bytes, 1),
        CommVolume::new(Collective::AllGather, Tier::Inter, bytes, 1),
    ];
    steps.iter().map(|v| collective_time(v, d, link)).sum()
}

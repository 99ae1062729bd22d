//! Model, cluster, job and precision descriptions.
//!
//! Everything downstream consumes the resolved [`Config`]. It is immutable
//! after loading and can be shared freely across sweep workers.
//!
//! # Units
//!
//! In memory, bandwidths are bytes per second, compute rates FLOP per
//! second, capacities bytes and latencies seconds. The file format spells the
//! unit in every key name (`intra_bw_gbps` is decimal gigabytes per second);
//! see [`file`] and `configs/template.toml`.
//!
//! # FLOP convention
//!
//! A GEMM of shape `M x K` by `K x N` costs `2*M*N*K` FLOP. Attention core
//! (score and value products) costs `4*s*h` FLOP per token per layer with
//! no causal discount. A training step costs three times the forward pass
//! (forward plus input- and weight-gradient GEMMs). Embedding and output
//! head are excluded from model FLOPs and from the simulated layer graphs,
//! so utilization figures compare like with like.

mod file;
mod presets;

pub use file::{apply_override, load_config, FileConfig};
pub use presets::{cluster_preset, model_preset, CLUSTER_PRESETS, MODEL_PRESETS};

use serde::{Deserialize, Serialize};

use crate::exact::int;
use crate::numerics::{FloatFormat, Granularity, QuantScheme};
use crate::planner::{AttnStrategy, FfnKind};
use crate::simsched::EfficiencyTable;
use crate::{Error, Exact, Result};

/// MoE transformer architecture plus the batch geometry of a job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub num_layers: u64,
    /// Hidden size `h`.
    pub hidden: u64,
    pub num_heads: u64,
    /// Query heads per key/value head (`m`).
    pub kv_ratio: u64,
    /// Intermediate size of one expert (`h_ffn`).
    pub ffn_hidden: u64,
    pub num_experts: u64,
    pub top_k: u64,
    pub vocab_size: u64,
    /// Sequence length `s` in tokens.
    pub seq_len: u64,
    /// Micro-batch size `b` in sequences.
    pub micro_batch: u64,
    /// Global batch in sequences.
    pub global_batch: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("num_heads", self.num_heads),
            ("kv_ratio", self.kv_ratio),
            ("ffn_hidden", self.ffn_hidden),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("micro_batch", self.micro_batch),
            ("global_batch", self.global_batch),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::validation(format!("model.{key}"), "must be >= 1"));
            }
        }
        if !self.num_heads.is_multiple_of(self.kv_ratio) {
            return Err(Error::validation(
                "model.kv_ratio",
                format!(
                    "num_heads ({}) must be divisible by kv_ratio ({})",
                    self.num_heads, self.kv_ratio
                ),
            ));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::validation(
                "model.num_heads",
                format!(
                    "hidden ({}) must be divisible by num_heads ({})",
                    self.hidden, self.num_heads
                ),
            ));
        }
        if self.top_k > self.num_experts {
            return Err(Error::validation(
                "model.top_k",
                format!(
                    "top_k ({}) exceeds num_experts ({})",
                    self.top_k, self.num_experts
                ),
            ));
        }
        if !self.global_batch.is_multiple_of(self.micro_batch) {
            return Err(Error::validation(
                "model.global_batch",
                format!(
                    "global_batch ({}) must be a multiple of micro_batch ({})",
                    self.global_batch, self.micro_batch
                ),
            ));
        }
        Ok(())
    }

    pub fn kv_heads(&self) -> u64 {
        self.num_heads / self.kv_ratio
    }

    pub fn head_dim(&self) -> u64 {
        self.hidden / self.num_heads
    }

    /// Tokens in one micro-batch, `b*s`.
    pub fn tokens_per_micro_batch(&self) -> u64 {
        self.micro_batch * self.seq_len
    }
}

/// Hardware description: two bandwidth tiers plus per-GPU compute and
/// memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub name: String,
    pub gpus_per_node: u64,
    pub num_nodes: u64,
    /// NVLink-tier bandwidth per GPU, bytes/s.
    pub intra_bw: f64,
    /// NIC-tier bandwidth per GPU, bytes/s.
    pub inter_bw: f64,
    /// Dense peak, FLOP/s per GPU.
    pub peak_flops: f64,
    pub sm_count: u64,
    /// Device memory per GPU, bytes.
    pub mem_capacity: u64,
    /// HBM bandwidth, bytes/s.
    pub mem_bw: f64,
    /// Copy-engine transfer rate, bytes/s.
    pub copy_engine_bw: f64,
    /// Per-step collective latency on the intra tier, seconds.
    pub alpha_intra: f64,
    /// Per-step collective latency on the inter tier, seconds.
    pub alpha_inter: f64,
    /// All-to-all slowdown relative to ring collectives of equal volume.
    pub a2a_penalty: f64,
    /// SMs an SM-driven all-to-all needs to reach full link bandwidth.
    pub a2a_saturation_sms: u64,
}

impl ClusterConfig {
    pub fn total_gpus(&self) -> u64 {
        self.gpus_per_node * self.num_nodes
    }

    pub fn validate(&self) -> Result<()> {
        if self.gpus_per_node == 0 {
            return Err(Error::validation("cluster.gpus_per_node", "must be >= 1"));
        }
        if self.num_nodes == 0 {
            return Err(Error::validation("cluster.num_nodes", "must be >= 1"));
        }
        let positive = [
            ("inter_bw_gbps", self.inter_bw),
            ("peak_tflops", self.peak_flops),
            ("mem_bw_tbps", self.mem_bw),
            ("copy_engine_bw_gbps", self.copy_engine_bw),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("cluster.{key}"), "must be > 0"));
            }
        }
        if !(self.intra_bw.is_finite() && self.intra_bw >= self.inter_bw) {
            return Err(Error::validation(
                "cluster.intra_bw_gbps",
                "intra-node bandwidth must be >= inter-node bandwidth",
            ));
        }
        if self.sm_count == 0 {
            return Err(Error::validation("cluster.sm_count", "must be >= 1"));
        }
        if self.mem_capacity == 0 {
            return Err(Error::validation("cluster.mem_capacity_gb", "must be > 0"));
        }
        for (key, v) in [
            ("alpha_intra_us", self.alpha_intra),
            ("alpha_inter_us", self.alpha_inter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!("cluster.{key}"), "must be >= 0"));
            }
        }
        if !(self.a2a_penalty.is_finite() && self.a2a_penalty >= 1.0) {
            return Err(Error::validation("cluster.a2a_penalty", "must be >= 1"));
        }
        if self.a2a_saturation_sms == 0 {
            return Err(Error::validation(
                "cluster.a2a_saturation_sms",
                "must be >= 1",
            ));
        }
        Ok(())
    }
}

/// How the DP gradient compression stages its BF16 buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpCompress {
    /// FP32 reduce-scatter, no compression.
    Off,
    /// BF16 copy in a separate buffer (adds half the FP32 gradient bytes).
    Naive,
    /// BF16 written into half of the FP32 buffer.
    Inplace,
}

/// How the EP dispatch pattern is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpPatternChoice {
    Auto,
    A2a,
    AgRs,
}

/// Job-level knobs: parallel sizes, memory options and simulator tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobConfig {
    /// Intra-node model-parallel size `n` (TP, SP or EP).
    pub parallel_size: u64,
    pub pipeline_stages: u64,
    pub virtual_stages: u64,
    pub zero_stage: u8,
    /// Fixed attention strategy for `simulate`/`memory`; `None` lets the
    /// planner choose.
    pub attention: Option<AttnStrategy>,
    pub ffn: Option<FfnKind>,
    pub ep_pattern: EpPatternChoice,
    pub remat: bool,
    pub dp_compress: DpCompress,
    pub capacity_factor: f64,
    pub seed: u64,
    /// Rows per GEMM tile in fused kernels.
    pub tile_rows: u64,
    /// SMs given to SM-driven communication in fused kernels.
    pub comm_sms: u64,
    pub efficiency: EfficiencyTable,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            parallel_size: 8,
            pipeline_stages: 1,
            virtual_stages: 1,
            zero_stage: 1,
            attention: None,
            ffn: None,
            ep_pattern: EpPatternChoice::Auto,
            remat: true,
            dp_compress: DpCompress::Inplace,
            capacity_factor: 1.0,
            seed: 0,
            tile_rows: 128,
            comm_sms: 20,
            efficiency: EfficiencyTable::default(),
        }
    }
}

impl JobConfig {
    pub fn validate(&self, model: &ModelConfig, cluster: &ClusterConfig) -> Result<()> {
        let n = self.parallel_size;
        if n == 0 {
            return Err(Error::validation("job.parallel_size", "must be >= 1"));
        }
        if self.pipeline_stages == 0 {
            return Err(Error::validation("job.pipeline_stages", "must be >= 1"));
        }
        if self.virtual_stages == 0 {
            return Err(Error::validation("job.virtual_stages", "must be >= 1"));
        }
        if self.zero_stage > 1 {
            return Err(Error::validation(
                "job.zero_stage",
                "only stages 0 and 1 are modeled",
            ));
        }
        if !cluster
            .total_gpus()
            .is_multiple_of(n * self.pipeline_stages)
        {
            return Err(Error::validation(
                "job.parallel_size",
                format!(
                    "parallel_size * pipeline_stages ({}) must divide the GPU count ({})",
                    n * self.pipeline_stages,
                    cluster.total_gpus()
                ),
            ));
        }
        if !model
            .num_layers
            .is_multiple_of(self.pipeline_stages * self.virtual_stages)
        {
            return Err(Error::validation(
                "job.pipeline_stages",
                format!(
                    "num_layers ({}) must divide evenly into pipeline_stages * virtual_stages",
                    model.num_layers
                ),
            ));
        }
        let dp = cluster.total_gpus() / (n * self.pipeline_stages);
        if !model.global_batch.is_multiple_of(model.micro_batch * dp) {
            return Err(Error::validation(
                "model.global_batch",
                format!(
                    "global_batch ({}) must be a multiple of micro_batch * dp ({})",
                    model.global_batch,
                    model.micro_batch * dp
                ),
            ));
        }
        if !(self.capacity_factor.is_finite() && self.capacity_factor > 0.0) {
            return Err(Error::validation("job.capacity_factor", "must be > 0"));
        }
        if self.tile_rows == 0 {
            return Err(Error::validation("job.tile_rows", "must be >= 1"));
        }
        if self.comm_sms == 0 || self.comm_sms >= cluster.sm_count {
            return Err(Error::validation(
                "job.comm_sms",
                format!("must be in [1, {})", cluster.sm_count),
            ));
        }
        self.efficiency.validate()
    }

    /// Data-parallel size implied by the cluster and the other sizes.
    pub fn data_parallel(&self, cluster: &ClusterConfig) -> u64 {
        cluster.total_gpus() / (self.parallel_size * self.pipeline_stages)
    }

    /// Micro-batches each pipeline processes per iteration.
    pub fn micro_batches(&self, model: &ModelConfig, cluster: &ClusterConfig) -> u64 {
        model.global_batch / (model.micro_batch * self.data_parallel(cluster))
    }
}

/// Numeric formats for compute and communication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionConfig {
    pub compute_format: FloatFormat,
    pub grad_sync_format: FloatFormat,
    pub tp_comm_format: FloatFormat,
    /// Required whenever an FP8 format is selected.
    pub quant: Option<QuantScheme>,
}

impl Default for PrecisionConfig {
    fn default() -> Self {
        Self {
            compute_format: FloatFormat::Bf16,
            grad_sync_format: FloatFormat::Bf16,
            tp_comm_format: FloatFormat::Bf16,
            quant: None,
        }
    }
}

impl PrecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.compute_format, FloatFormat::Bf16 | FloatFormat::E4M3) {
            return Err(Error::validation(
                "precision.compute_format",
                "must be bf16 or fp8_e4m3",
            ));
        }
        if !matches!(self.grad_sync_format, FloatFormat::Fp32 | FloatFormat::Bf16) {
            return Err(Error::validation(
                "precision.grad_sync_format",
                "must be fp32 or bf16",
            ));
        }
        if !matches!(self.tp_comm_format, FloatFormat::Bf16 | FloatFormat::E4M3) {
            return Err(Error::validation(
                "precision.tp_comm_format",
                "must be bf16 or fp8_e4m3",
            ));
        }
        let uses_fp8 =
            self.compute_format == FloatFormat::E4M3 || self.tp_comm_format == FloatFormat::E4M3;
        if uses_fp8 && self.quant.is_none() {
            return Err(Error::validation(
                "precision.quant",
                "an FP8 format requires a quantization scheme",
            ));
        }
        if let Some(q) = &self.quant {
            if let Granularity::Grouped { group_size }
            | Granularity::ChannelGrouped { group_size } = q.granularity
            {
                if group_size == 0 {
                    return Err(Error::validation(
                        "precision.quant.group_size",
                        "must be >= 1",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Bytes per element of activations moved by model-parallel collectives.
    pub fn comm_bytes(&self) -> u64 {
        self.tp_comm_format.bytes_per_element()
    }

    /// Parameters are held in BF16 regardless of the compute format.
    pub fn param_bytes(&self) -> u64 {
        FloatFormat::Bf16.bytes_per_element()
    }

    /// Main gradients are accumulated in FP32.
    pub fn grad_bytes(&self) -> u64 {
        FloatFormat::Fp32.bytes_per_element()
    }

    /// Stored activations stay in BF16.
    pub fn activation_bytes(&self) -> u64 {
        FloatFormat::Bf16.bytes_per_element()
    }
}

/// A fully resolved, validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub job: JobConfig,
    pub precision: PrecisionConfig,
}

impl Config {
    pub fn new(
        model: ModelConfig,
        cluster: ClusterConfig,
        job: JobConfig,
        precision: PrecisionConfig,
    ) -> Result<Self> {
        let cfg = Self {
            model,
            cluster,
            job,
            precision,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config built from presets with default job and precision settings.
    pub fn from_presets(model: &str, cluster: &str, num_nodes: u64) -> Result<Self> {
        let model = model_preset(model).ok_or_else(|| {
            Error::validation("model.preset", format!("unknown preset `{model}`"))
        })?;
        let mut cluster_cfg = cluster_preset(cluster).ok_or_else(|| {
            Error::validation("cluster.preset", format!("unknown preset `{cluster}`"))
        })?;
        cluster_cfg.num_nodes = num_nodes;
        Self::new(
            model,
            cluster_cfg,
            JobConfig::default(),
            PrecisionConfig::default(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cluster.validate()?;
        self.precision.validate()?;
        self.job.validate(&self.model, &self.cluster)?;
        let compressed = self.precision.grad_sync_format == FloatFormat::Bf16;
        let off = self.job.dp_compress == DpCompress::Off;
        if compressed == off {
            return Err(Error::validation(
                "job.dp_compress",
                "must be `off` exactly when precision.grad_sync_format is fp32",
            ));
        }
        Ok(())
    }

    pub fn derived(&self) -> DerivedQuantities {
        derive(&self.model, &self.precision)
    }
}

/// Quantities computed once from the model and shared by all modules.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedQuantities {
    /// `h_ffn / h`, exact.
    pub ffn_ratio: Exact,
    /// QKV plus output-projection parameters of one layer.
    pub attn_params: Exact,
    /// `attn_params` in bytes at parameter precision (`P` of the
    /// hierarchical synchronization model).
    pub attn_param_bytes: Exact,
    /// Parameters of one expert (gate, up and down projections).
    pub expert_params: Exact,
    pub router_params: Exact,
    /// Forward FLOP per token across all layers, activated path only.
    pub flops_per_token: f64,
    /// Training FLOP per iteration (3x forward over the global batch).
    pub model_flops_per_iter: f64,
}

/// Computes [`DerivedQuantities`]. Pure and deterministic.
pub fn derive(model: &ModelConfig, precision: &PrecisionConfig) -> DerivedQuantities {
    let h = int(model.hidden);
    let m = int(model.kv_ratio);
    let ffn_ratio = int(model.ffn_hidden) / h;
    // Q and O are h x h; K and V are h x h/m each.
    let attn_params = int(2) * h * h * (Exact::from_integer(1) + Exact::from_integer(1) / m);
    let attn_param_bytes = attn_params * int(precision.param_bytes());
    let expert_params = int(3) * h * int(model.ffn_hidden);
    let router_params = h * int(model.num_experts);

    let activated = attn_params + int(model.top_k) * expert_params + router_params;
    let per_layer = int(2) * activated + int(4) * int(model.seq_len) * h;
    let flops_per_token = crate::to_f64(&(per_layer * int(model.num_layers)));
    let model_flops_per_iter =
        3.0 * model.global_batch as f64 * model.seq_len as f64 * flops_per_token;

    DerivedQuantities {
        ffn_ratio,
        attn_params,
        attn_param_bytes,
        expert_params,
        router_params,
        flops_per_token,
        model_flops_per_iter,
    }
}

//! TOML config files and `--set` overrides.
//!
//! The file has four sections. `[model]` and `[cluster]` are required and
//! may name a `preset` whose values individual keys then override; without
//! a preset every key of the section must be given. `[job]`,
//! `[job.efficiency]`, `[precision]` and `[precision.quant]` are optional.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    cluster_preset, model_preset, ClusterConfig, Config, DpCompress, EpPatternChoice, JobConfig,
    ModelConfig, PrecisionConfig,
};
use crate::numerics::{FloatFormat, Granularity, QuantScheme};
use crate::planner::{AttnStrategy, FfnKind};
use crate::simsched::EfficiencyTable;
use crate::{Error, Result};

const GB: f64 = 1e9;

/// On-disk layout of a config file. Every field is optional at this level;
/// [`FileConfig::resolve`] fills defaults and validates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub cluster: ClusterSection,
    #[serde(default)]
    pub job: JobSection,
    #[serde(default)]
    pub precision: PrecisionSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kv_ratio: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_experts: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_batch: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_batch: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gpus_per_node: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_nodes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intra_bw_gbps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inter_bw_gbps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_tflops: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sm_count: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mem_capacity_gb: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mem_bw_tbps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub copy_engine_bw_gbps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_intra_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_inter_us: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a2a_penalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a2a_saturation_sms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallel_size: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pipeline_stages: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub virtual_stages: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_stage: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttnStrategy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn: Option<FfnKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ep_pattern: Option<EpPatternChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remat: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dp_compress: Option<DpCompress>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacity_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tile_rows: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comm_sms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub efficiency: Option<EfficiencySection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencySection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gemm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grouped_gemm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_bound: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compute_format: Option<FloatFormat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_sync_format: Option<FloatFormat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tp_comm_format: Option<FloatFormat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularityKind {
    PerTensor,
    PerToken,
    PerChannel,
    Grouped,
    ChannelGrouped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    pub granularity: GranularityKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<FloatFormat>,
}

fn required<T>(v: Option<T>, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::validation(field, "missing (and no preset supplies it)"))
}

impl ModelSection {
    fn resolve(self) -> Result<ModelConfig> {
        let base = match &self.preset {
            Some(p) => Some(model_preset(p).ok_or_else(|| {
                Error::validation("model.preset", format!("unknown model preset `{p}`"))
            })?),
            None => None,
        };
        let b = base.as_ref();
        Ok(ModelConfig {
            name: self
                .name
                .or_else(|| b.map(|m| m.name.clone()))
                .unwrap_or_else(|| "custom".to_string()),
            num_layers: required(
                self.num_layers.or(b.map(|m| m.num_layers)),
                "model.num_layers",
            )?,
            hidden: required(self.hidden.or(b.map(|m| m.hidden)), "model.hidden")?,
            num_heads: required(self.num_heads.or(b.map(|m| m.num_heads)), "model.num_heads")?,
            kv_ratio: required(self.kv_ratio.or(b.map(|m| m.kv_ratio)), "model.kv_ratio")?,
            ffn_hidden: required(
                self.ffn_hidden.or(b.map(|m| m.ffn_hidden)),
                "model.ffn_hidden",
            )?,
            num_experts: required(
                self.num_experts.or(b.map(|m| m.num_experts)),
                "model.num_experts",
            )?,
            top_k: required(self.top_k.or(b.map(|m| m.top_k)), "model.top_k")?,
            vocab_size: required(
                self.vocab_size.or(b.map(|m| m.vocab_size)),
                "model.vocab_size",
            )?,
            seq_len: required(self.seq_len.or(b.map(|m| m.seq_len)), "model.seq_len")?,
            micro_batch: self.micro_batch.unwrap_or(1),
            global_batch: required(
                self.global_batch.or(b.map(|m| m.global_batch)),
                "model.global_batch",
            )?,
        })
    }

    fn from_config(m: &ModelConfig) -> Self {
        Self {
            preset: None,
            name: Some(m.name.clone()),
            num_layers: Some(m.num_layers),
            hidden: Some(m.hidden),
            num_heads: Some(m.num_heads),
            kv_ratio: Some(m.kv_ratio),
            ffn_hidden: Some(m.ffn_hidden),
            num_experts: Some(m.num_experts),
            top_k: Some(m.top_k),
            vocab_size: Some(m.vocab_size),
            seq_len: Some(m.seq_len),
            micro_batch: Some(m.micro_batch),
            global_batch: Some(m.global_batch),
        }
    }
}

impl ClusterSection {
    fn resolve(self) -> Result<ClusterConfig> {
        let base = match &self.preset {
            Some(p) => Some(cluster_preset(p).ok_or_else(|| {
                Error::validation("cluster.preset", format!("unknown cluster preset `{p}`"))
            })?),
            None => None,
        };
        let b = base.as_ref();
        let intra_bw = required(
            self.intra_bw_gbps.map(|v| v * GB).or(b.map(|c| c.intra_bw)),
            "cluster.intra_bw_gbps",
        )?;
        Ok(ClusterConfig {
            name: self
                .name
                .or_else(|| b.map(|c| c.name.clone()))
                .unwrap_or_else(|| "custom".to_string()),
            gpus_per_node: required(
                self.gpus_per_node.or(b.map(|c| c.gpus_per_node)),
                "cluster.gpus_per_node",
            )?,
            num_nodes: required(
                self.num_nodes.or(b.map(|c| c.num_nodes)),
                "cluster.num_nodes",
            )?,
            intra_bw,
            inter_bw: required(
                self.inter_bw_gbps.map(|v| v * GB).or(b.map(|c| c.inter_bw)),
                "cluster.inter_bw_gbps",
            )?,
            peak_flops: required(
                self.peak_tflops
                    .map(|v| v * 1e12)
                    .or(b.map(|c| c.peak_flops)),
                "cluster.peak_tflops",
            )?,
            sm_count: required(self.sm_count.or(b.map(|c| c.sm_count)), "cluster.sm_count")?,
            mem_capacity: required(
                self.mem_capacity_gb
                    .map(|v| (v * GB).round() as u64)
                    .or(b.map(|c| c.mem_capacity)),
                "cluster.mem_capacity_gb",
            )?,
            mem_bw: required(
                self.mem_bw_tbps.map(|v| v * 1e12).or(b.map(|c| c.mem_bw)),
                "cluster.mem_bw_tbps",
            )?,
            // An explicit intra_bw without an explicit copy-engine rate
            // moves the copy-engine rate along with it.
            copy_engine_bw: match (self.copy_engine_bw_gbps, self.intra_bw_gbps) {
                (Some(v), _) => v * GB,
                (None, Some(_)) => intra_bw,
                (None, None) => b.map(|c| c.copy_engine_bw).unwrap_or(intra_bw),
            },
            alpha_intra: self
                .alpha_intra_us
                .map(|v| v / 1e6)
                .or(b.map(|c| c.alpha_intra))
                .unwrap_or(3e-6),
            alpha_inter: self
                .alpha_inter_us
                .map(|v| v / 1e6)
                .or(b.map(|c| c.alpha_inter))
                .unwrap_or(10e-6),
            a2a_penalty: self.a2a_penalty.or(b.map(|c| c.a2a_penalty)).unwrap_or(1.4),
            a2a_saturation_sms: self
                .a2a_saturation_sms
                .or(b.map(|c| c.a2a_saturation_sms))
                .unwrap_or(20),
        })
    }

    fn from_config(c: &ClusterConfig) -> Self {
        Self {
            preset: None,
            name: Some(c.name.clone()),
            gpus_per_node: Some(c.gpus_per_node),
            num_nodes: Some(c.num_nodes),
            intra_bw_gbps: Some(c.intra_bw / GB),
            inter_bw_gbps: Some(c.inter_bw / GB),
            peak_tflops: Some(c.peak_flops / 1e12),
            sm_count: Some(c.sm_count),
            mem_capacity_gb: Some(c.mem_capacity as f64 / GB),
            mem_bw_tbps: Some(c.mem_bw / 1e12),
            copy_engine_bw_gbps: Some(c.copy_engine_bw / GB),
            alpha_intra_us: Some(c.alpha_intra * 1e6),
            alpha_inter_us: Some(c.alpha_inter * 1e6),
            a2a_penalty: Some(c.a2a_penalty),
            a2a_saturation_sms: Some(c.a2a_saturation_sms),
        }
    }
}

impl JobSection {
    fn resolve(self, grad_sync: FloatFormat) -> JobConfig {
        let d = JobConfig::default();
        let e = self.efficiency.unwrap_or_default();
        let de = EfficiencyTable::default();
        JobConfig {
            parallel_size: self.parallel_size.unwrap_or(d.parallel_size),
            pipeline_stages: self.pipeline_stages.unwrap_or(d.pipeline_stages),
            virtual_stages: self.virtual_stages.unwrap_or(d.virtual_stages),
            zero_stage: self.zero_stage.unwrap_or(d.zero_stage),
            attention: self.attention,
            ffn: self.ffn,
            ep_pattern: self.ep_pattern.unwrap_or(d.ep_pattern),
            remat: self.remat.unwrap_or(d.remat),
            dp_compress: self
                .dp_compress
                .unwrap_or(if grad_sync == FloatFormat::Fp32 {
                    DpCompress::Off
                } else {
                    DpCompress::Inplace
                }),
            capacity_factor: self.capacity_factor.unwrap_or(d.capacity_factor),
            seed: self.seed.unwrap_or(d.seed),
            tile_rows: self.tile_rows.unwrap_or(d.tile_rows),
            comm_sms: self.comm_sms.unwrap_or(d.comm_sms),
            efficiency: EfficiencyTable {
                gemm: e.gemm.unwrap_or(de.gemm),
                grouped_gemm: e.grouped_gemm.unwrap_or(de.grouped_gemm),
                attention: e.attention.unwrap_or(de.attention),
                memory_bound: e.memory_bound.unwrap_or(de.memory_bound),
            },
        }
    }

    fn from_config(j: &JobConfig) -> Self {
        Self {
            parallel_size: Some(j.parallel_size),
            pipeline_stages: Some(j.pipeline_stages),
            virtual_stages: Some(j.virtual_stages),
            zero_stage: Some(j.zero_stage),
            attention: j.attention,
            ffn: j.ffn,
            ep_pattern: Some(j.ep_pattern),
            remat: Some(j.remat),
            dp_compress: Some(j.dp_compress),
            capacity_factor: Some(j.capacity_factor),
            seed: Some(j.seed),
            tile_rows: Some(j.tile_rows),
            comm_sms: Some(j.comm_sms),
            efficiency: Some(EfficiencySection {
                gemm: Some(j.efficiency.gemm),
                grouped_gemm: Some(j.efficiency.grouped_gemm),
                attention: Some(j.efficiency.attention),
                memory_bound: Some(j.efficiency.memory_bound),
            }),
        }
    }
}

impl PrecisionSection {
    fn resolve(self) -> Result<PrecisionConfig> {
        let d = PrecisionConfig::default();
        let quant = match self.quant {
            None => None,
            Some(q) => {
                let granularity = match (q.granularity, q.group_size) {
                    (GranularityKind::PerTensor, _) => Granularity::PerTensor,
                    (GranularityKind::PerToken, _) => Granularity::PerToken,
                    (GranularityKind::PerChannel, _) => Granularity::PerChannel,
                    (GranularityKind::Grouped, Some(g)) => Granularity::Grouped { group_size: g },
                    (GranularityKind::ChannelGrouped, Some(g)) => {
                        Granularity::ChannelGrouped { group_size: g }
                    }
                    (_, None) => {
                        return Err(Error::validation(
                            "precision.quant.group_size",
                            "required for grouped granularities",
                        ))
                    }
                };
                Some(QuantScheme {
                    granularity,
                    format: q.format.unwrap_or(FloatFormat::E4M3),
                })
            }
        };
        Ok(PrecisionConfig {
            compute_format: self.compute_format.unwrap_or(d.compute_format),
            grad_sync_format: self.grad_sync_format.unwrap_or(d.grad_sync_format),
            tp_comm_format: self.tp_comm_format.unwrap_or(d.tp_comm_format),
            quant,
        })
    }

    fn from_config(p: &PrecisionConfig) -> Self {
        Self {
            compute_format: Some(p.compute_format),
            grad_sync_format: Some(p.grad_sync_format),
            tp_comm_format: Some(p.tp_comm_format),
            quant: p.quant.map(|q| {
                let (granularity, group_size) = match q.granularity {
                    Granularity::PerTensor => (GranularityKind::PerTensor, None),
                    Granularity::PerToken => (GranularityKind::PerToken, None),
                    Granularity::PerChannel => (GranularityKind::PerChannel, None),
                    Granularity::Grouped { group_size } => {
                        (GranularityKind::Grouped, Some(group_size))
                    }
                    Granularity::ChannelGrouped { group_size } => {
                        (GranularityKind::ChannelGrouped, Some(group_size))
                    }
                };
                QuantSection {
                    granularity,
                    group_size,
                    format: Some(q.format),
                }
            }),
        }
    }
}

impl FileConfig {
    /// Applies presets and defaults, then validates.
    pub fn resolve(self) -> Result<Config> {
        let precision = self.precision.resolve()?;
        let job = self.job.resolve(precision.grad_sync_format);
        Config::new(
            self.model.resolve()?,
            self.cluster.resolve()?,
            job,
            precision,
        )
    }

    /// Fully explicit file form of a resolved config (no presets).
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            model: ModelSection::from_config(&cfg.model),
            cluster: ClusterSection::from_config(&cfg.cluster),
            job: JobSection::from_config(&cfg.job),
            precision: PrecisionSection::from_config(&cfg.precision),
        }
    }
}

impl Config {
    /// Parses TOML text, applies `key.path=value` overrides, then resolves.
    pub fn from_toml_str(text: &str, source_name: &str, overrides: &[String]) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            message,
        };
        let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let file: FileConfig = table.try_into().map_err(|e| parse_err(e.to_string()))?;
        file.resolve()
    }

    /// Serializes the resolved config as an explicit TOML document.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(&FileConfig::from_config(self)).expect("config serializes to TOML")
    }
}

/// Applies one `a.b.c=value` override to a parsed document. The value is
/// read as a TOML literal when possible (`4`, `true`, `1.5`, `"x"`) and as
/// a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let bad = |message: &str| Error::Parse {
        source_name: "--set".to_string(),
        message: format!("`{spec}`: {message}"),
    };
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| bad("expected key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("empty key segment"));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, path) = parts.split_last().expect("nonempty key");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| bad("path crosses a non-table value"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Reads and resolves a config file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        source_name: path.display().to_string(),
        message: format!("cannot read file: {e}"),
    })?;
    Config::from_toml_str(&text, &path.display().to_string(), overrides)
}

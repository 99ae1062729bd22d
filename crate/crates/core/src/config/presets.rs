//! Published model architectures and GPU specifications.

use super::{ClusterConfig, ModelConfig};

/// Names accepted by [`model_preset`].
pub const MODEL_PRESETS: [&str; 6] = [
    "internal-352b",
    "mixtral-8x7b",
    "mixtral-8x22b",
    "hunyuan-large",
    "phi-3.5-moe",
    "deepseekmoe",
];

/// Names accepted by [`cluster_preset`].
pub const CLUSTER_PRESETS: [&str; 3] = ["h800", "a100", "h20"];

const GB: f64 = 1e9;

/// Architecture preset with sequence length 8192, vocabulary 65536,
/// micro-batch 1 and global batch 32.
pub fn model_preset(name: &str) -> Option<ModelConfig> {
    // (layers, hidden, heads, kv_ratio, ffn_hidden, experts, top_k)
    let (layers, hidden, heads, m, ffn, experts, k) = match name {
        "internal-352b" => (60, 4096, 32, 4, 14336, 32, 3),
        "mixtral-8x7b" => (32, 4096, 32, 4, 14336, 8, 2),
        "mixtral-8x22b" => (56, 6144, 48, 6, 16384, 8, 2),
        "hunyuan-large" => (64, 6400, 80, 10, 18304, 16, 1),
        "phi-3.5-moe" => (32, 4096, 32, 4, 6400, 16, 2),
        "deepseekmoe" => (28, 2048, 16, 1, 1408, 64, 6),
        _ => return None,
    };
    Some(ModelConfig {
        name: name.to_string(),
        num_layers: layers,
        hidden,
        num_heads: heads,
        kv_ratio: m,
        ffn_hidden: ffn,
        num_experts: experts,
        top_k: k,
        vocab_size: 65536,
        seq_len: 8192,
        micro_batch: 1,
        global_batch: 32,
    })
}

/// Single-node GPU preset (8 GPUs per node, 50 GB/s NIC per GPU).
pub fn cluster_preset(name: &str) -> Option<ClusterConfig> {
    // (TFLOPS, memory GB, HBM TB/s, NVLink GB/s, SMs)
    let (tflops, mem_gb, hbm_tbps, nvlink_gbps, sms) = match name {
        "h800" => (989.0, 80, 3.4, 400.0, 132),
        "a100" => (312.0, 80, 2.0, 600.0, 108),
        "h20" => (148.0, 96, 4.0, 900.0, 78),
        _ => return None,
    };
    Some(ClusterConfig {
        name: name.to_string(),
        gpus_per_node: 8,
        num_nodes: 1,
        intra_bw: nvlink_gbps * GB,
        inter_bw: 50.0 * GB,
        peak_flops: tflops * 1e12,
        sm_count: sms,
        mem_capacity: mem_gb * 1_000_000_000,
        mem_bw: hbm_tbps * 1e12,
        copy_engine_bw: nvlink_gbps * GB,
        alpha_intra: 3e-6,
        alpha_inter: 10e-6,
        a2a_penalty: 1.4,
        a2a_saturation_sms: 20,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for name in MODEL_PRESETS {
            model_preset(name).unwrap().validate().unwrap();
        }
        for name in CLUSTER_PRESETS {
            cluster_preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn unknown_names() {
        assert!(model_preset("gpt-4").is_none());
        assert!(cluster_preset("b200").is_none());
    }
}

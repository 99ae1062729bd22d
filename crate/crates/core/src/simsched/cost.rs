use serde::{Deserialize, Serialize};

use super::graph::{OpGraph, OpKind, OpNode};
use crate::commcost::{collective_time, LinkModel};
use crate::config::Config;
use crate::{Error, Result};

/// Fraction of peak each op class achieves. Uncalibrated defaults; the
/// right values depend on kernel quality and hardware.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyTable {
    /// Dense GEMMs, fraction of peak FLOP/s.
    pub gemm: f64,
    pub grouped_gemm: f64,
    pub attention: f64,
    /// Elementwise and data-movement ops, fraction of HBM bandwidth.
    pub memory_bound: f64,
}

impl Default for EfficiencyTable {
    fn default() -> Self {
        Self {
            gemm: 0.75,
            grouped_gemm: 0.65,
            attention: 0.6,
            memory_bound: 0.8,
        }
    }
}

impl EfficiencyTable {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("gemm", self.gemm),
            ("grouped_gemm", self.grouped_gemm),
            ("attention", self.attention),
            ("memory_bound", self.memory_bound),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::validation(
                    format!("job.efficiency.{key}"),
                    "must lie in (0, 1]",
                ));
            }
        }
        Ok(())
    }

    fn for_kind(&self, kind: OpKind) -> Option<f64> {
        match kind {
            OpKind::Gemm => Some(self.gemm),
            OpKind::GroupedGemm => Some(self.grouped_gemm),
            OpKind::AttentionCore => Some(self.attention),
            k if k.is_memory_bound() => Some(self.memory_bound),
            _ => None,
        }
    }
}

/// Hardware rates used to turn op sizes into seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostModel {
    pub peak_flops: f64,
    pub mem_bw: f64,
    pub link: LinkModel,
    pub efficiency: EfficiencyTable,
}

impl CostModel {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            peak_flops: cfg.cluster.peak_flops,
            mem_bw: cfg.cluster.mem_bw,
            link: LinkModel::from_cluster(&cfg.cluster),
            efficiency: cfg.job.efficiency,
        }
    }

    /// Duration of one op. Compute ops: `flops / (peak * eff)`; memory-bound
    /// ops: `bytes / (mem_bw * eff)`; collectives: the alpha-beta model.
    pub fn op_time(&self, node: &OpNode) -> Result<f64> {
        if let Some(t) = node.fixed_time {
            return Ok(t);
        }
        if node.kind.is_collective() {
            let v = node
                .comm
                .as_ref()
                .ok_or_else(|| Error::Graph(format!("collective `{}` has no volume", node.name)))?;
            return collective_time(v, node.participants, &self.link);
        }
        let eff = self
            .efficiency
            .for_kind(node.kind)
            .ok_or_else(|| Error::Config(format!("no efficiency entry for op `{}`", node.name)))?;
        if !(eff > 0.0 && eff <= 1.0) {
            return Err(Error::Config(format!(
                "efficiency for `{}` must lie in (0, 1], got {eff}",
                node.name
            )));
        }
        if node.kind.is_memory_bound() {
            Ok(node.bytes_moved / (self.mem_bw * eff))
        } else {
            Ok(node.flops / (self.peak_flops * eff))
        }
    }

    /// Durations of every node, indexed by id (0 for consumed nodes).
    pub fn costs(&self, g: &OpGraph) -> Result<Vec<f64>> {
        g.nodes
            .iter()
            .map(|n| if n.consumed { Ok(0.0) } else { self.op_time(n) })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simsched::graph::Phase;

    fn model(peak: f64, mem_bw: f64, eff: EfficiencyTable) -> CostModel {
        CostModel {
            peak_flops: peak,
            mem_bw,
            link: LinkModel::bandwidth_only(400e9, 50e9),
            efficiency: eff,
        }
    }

    #[test]
    fn gemm_at_peak_takes_one_second() {
        let eff = EfficiencyTable {
            gemm: 1.0,
            ..EfficiencyTable::default()
        };
        let mut g = OpGraph::new(Phase::Forward, None);
        let id = g.add_compute("g", OpKind::Gemm, 989e12, &[]);
        assert_eq!(
            model(989e12, 3.4e12, eff).op_time(&g.nodes[id]).unwrap(),
            1.0
        );
    }

    #[test]
    fn scatter_of_one_gib() {
        let eff = EfficiencyTable {
            memory_bound: 1.0,
            ..EfficiencyTable::default()
        };
        let mut g = OpGraph::new(Phase::Forward, None);
        let id = g.add_memory("s", OpKind::Scatter, (1u64 << 30) as f64, &[]);
        let t = model(989e12, 3.4e12, eff).op_time(&g.nodes[id]).unwrap();
        assert!((t - 0.3158e-3).abs() < 1e-6, "{t}");
        let half = EfficiencyTable {
            memory_bound: 0.5,
            ..EfficiencyTable::default()
        };
        assert_eq!(
            model(989e12, 3.4e12, half).op_time(&g.nodes[id]).unwrap(),
            2.0 * t
        );
    }

    #[test]
    fn bad_efficiency_is_config_error() {
        let eff = EfficiencyTable {
            attention: 0.0,
            ..EfficiencyTable::default()
        };
        let mut g = OpGraph::new(Phase::Forward, None);
        let id = g.add_compute("a", OpKind::AttentionCore, 1.0, &[]);
        assert!(matches!(
            model(1.0, 1.0, eff).op_time(&g.nodes[id]),
            Err(Error::Config(_))
        ));
        let mut g = OpGraph::new(Phase::Forward, None);
        let id = g.add_compute("f", OpKind::Fused, 1.0, &[]);
        assert!(matches!(
            model(1.0, 1.0, EfficiencyTable::default()).op_time(&g.nodes[id]),
            Err(Error::Config(_))
        ));
    }
}

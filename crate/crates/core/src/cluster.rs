//! Hardware topology, model geometry and TP/DP layouts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// TP degrees the system ever considers; further capped by node size.
pub const TP_DEGREES: [u32; 4] = [1, 2, 4, 8];

/// Transformer geometry used by every byte-count formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub bytes_per_elem: u32,
    /// Full (unsharded) weight bytes of one transformer layer.
    pub layer_param_bytes: u64,
}

impl ModelSpec {
    /// LLaMA-3.1-8B: 32 layers, hidden 4096, bf16. A layer holds
    /// q/o (4096x4096 each), k/v (4096x1024 each), three 4096x14336 MLP
    /// matrices and two norm vectors.
    pub fn llama31_8b() -> Self {
        let h: u64 = 4096;
        let attn = 2 * h * h + 2 * h * 1024;
        let mlp = 3 * h * 14_336;
        let norms = 2 * h;
        ModelSpec {
            name: "llama3.1-8b".into(),
            num_layers: 32,
            hidden_dim: 4096,
            bytes_per_elem: 2,
            layer_param_bytes: (attn + mlp + norms) * 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.layer_param_bytes == 0 {
            return Err(Error::Config(format!(
                "model `{}`: layer count, hidden dim and layer bytes must be >= 1",
                self.name
            )));
        }
        if ![1, 2, 4].contains(&self.bytes_per_elem) {
            return Err(Error::Config(format!(
                "model `{}`: bytes_per_elem must be 1, 2 or 4 (got {})",
                self.name, self.bytes_per_elem
            )));
        }
        Ok(())
    }

    /// K and V bytes one context token occupies across all layers (unsharded).
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.num_layers as u64 * self.hidden_dim as u64 * self.bytes_per_elem as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub num_nodes: u32,
    pub gpus_per_node: u32,
    /// One-way per-rank bandwidth seen by migration and resharding traffic, bytes/s.
    pub intra_bw_unidir: f64,
    pub kv_tokens_per_gpu: u64,
    /// Effective HBM bandwidth per GPU, bytes/s.
    pub hbm_bw: f64,
    /// Effective dense throughput per GPU, flop/s.
    pub peak_flops: f64,
    /// Fixed cost of the per-layer TP collective at TP=2, seconds. Scales with (tp-1)/tp.
    pub per_layer_tp_comm_base: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::Config("num_nodes must be >= 1".into()));
        }
        let g = self.gpus_per_node;
        if !(1..=8).contains(&g) || !g.is_power_of_two() {
            return Err(Error::Config(format!(
                "gpus_per_node must be a power of two in [1, 8], got {g}"
            )));
        }
        for (name, v) in [
            ("intra_bw_unidir", self.intra_bw_unidir),
            ("hbm_bw", self.hbm_bw),
            ("peak_flops", self.peak_flops),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.per_layer_tp_comm_base < 0.0 {
            return Err(Error::Config("per_layer_tp_comm_base must be >= 0".into()));
        }
        if self.kv_tokens_per_gpu == 0 {
            return Err(Error::Config("kv_tokens_per_gpu must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_gpus(&self) -> u32 {
        self.num_nodes * self.gpus_per_node
    }

    pub fn config_for_tp(&self, tp: u32) -> Result<ParallelConfig> {
        ParallelConfig::new(tp, self)
    }
}

/// Intra-node TP with intra- and inter-node DP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub tp: u32,
    pub dp_intra: u32,
    pub dp_inter: u32,
}

impl ParallelConfig {
    pub fn new(tp: u32, cluster: &ClusterSpec) -> Result<Self> {
        if !TP_DEGREES.contains(&tp) || tp > cluster.gpus_per_node {
            return Err(Error::Config(format!(
                "tp={tp} not admissible on {}-GPU nodes",
                cluster.gpus_per_node
            )));
        }
        Ok(ParallelConfig {
            tp,
            dp_intra: cluster.gpus_per_node / tp,
            dp_inter: cluster.num_nodes,
        })
    }
}

impl std::fmt::Display for ParallelConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TP{}xDP{}", self.tp, self.dp_intra)
    }
}

/// One configuration per admissible TP degree, ascending by TP.
pub fn candidate_configs(cluster: &ClusterSpec) -> Vec<ParallelConfig> {
    TP_DEGREES
        .iter()
        .filter(|&&tp| tp <= cluster.gpus_per_node)
        .map(|&tp| ParallelConfig {
            tp,
            dp_intra: cluster.gpus_per_node / tp,
            dp_inter: cluster.num_nodes,
        })
        .collect()
}

/// Node-level active-token budget T_cap. Independent of the TP degree.
pub fn token_budget(cluster: &ClusterSpec, _config: &ParallelConfig) -> u64 {
    cluster.kv_tokens_per_gpu * cluster.gpus_per_node as u64
}

#[cfg(test)]
pub(crate) fn test_cluster(gpus_per_node: u32, kv_tokens_per_gpu: u64) -> ClusterSpec {
    ClusterSpec {
        num_nodes: 1,
        gpus_per_node,
        intra_bw_unidir: 1e10,
        kv_tokens_per_gpu,
        hbm_bw: 1e12,
        peak_flops: 1e14,
        per_layer_tp_comm_base: 1e-4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_gpu_node_gets_four_configs() {
        let got: Vec<(u32, u32)> = candidate_configs(&test_cluster(8, 1))
            .iter()
            .map(|c| (c.tp, c.dp_intra))
            .collect();
        assert_eq!(got, vec![(1, 8), (2, 4), (4, 2), (8, 1)]);
    }

    #[test]
    fn node_size_caps_tp() {
        let tps: Vec<u32> = candidate_configs(&test_cluster(4, 1))
            .iter()
            .map(|c| c.tp)
            .collect();
        assert_eq!(tps, vec![1, 2, 4]);
        let one = candidate_configs(&test_cluster(1, 1));
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].tp, one[0].dp_intra), (1, 1));
    }

    #[test]
    fn tp_times_dp_fills_the_node() {
        for g in [1, 2, 4, 8] {
            for c in candidate_configs(&test_cluster(g, 1)) {
                assert_eq!(c.tp * c.dp_intra, g);
            }
        }
    }

    #[test]
    fn non_power_of_two_nodes_rejected() {
        for g in [0, 3, 5, 6, 7, 9, 16] {
            assert!(test_cluster(g, 1).validate().is_err(), "g={g}");
        }
    }

    #[test]
    fn token_budget_cases() {
        let c = test_cluster(8, 131_072);
        assert_eq!(token_budget(&c, &candidate_configs(&c)[0]), 1 << 20);
        let c = test_cluster(1, 1000);
        assert_eq!(token_budget(&c, &candidate_configs(&c)[0]), 1000);
        let c = test_cluster(4, 2048);
        assert_eq!(token_budget(&c, &candidate_configs(&c)[2]), 8192);
    }

    #[test]
    fn inadmissible_tp_rejected() {
        let c = test_cluster(4, 1);
        assert!(ParallelConfig::new(8, &c).is_err());
        assert!(ParallelConfig::new(3, &c).is_err());
        assert_eq!(ParallelConfig::new(2, &c).unwrap().dp_intra, 2);
    }

    #[test]
    fn model_validation() {
        let mut m = ModelSpec::llama31_8b();
        m.validate().unwrap();
        m.bytes_per_elem = 3;
        assert!(m.validate().is_err());
    }

    #[test]
    fn llama_layer_bytes() {
        assert_eq!(ModelSpec::llama31_8b().layer_param_bytes, 436_224_000);
    }
}

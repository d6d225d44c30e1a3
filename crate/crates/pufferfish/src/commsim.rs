//! Analytical ring-allreduce cost model for data-parallel gradient exchange.
//!
//! The ring estimate for synchronizing `n` bytes across `p` nodes is
//!
//! ```text
//! T(n) = 2 (p - 1) alpha  +  2 n (p - 1) / (p * beta)
//! ```
//!
//! two phases (reduce-scatter + allgather) of `p - 1` messages each, with
//! every node moving `n / p` bytes per step at bandwidth `beta`. Gradients
//! travel as FP32 regardless of compute precision, so payload bytes are
//! `4 * param_count`. Flat mode packs every gradient tensor into one buffer
//! and pays the latency term once per iteration; per-layer mode pays it once
//! per parameterized layer.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::zoo::ModelGraph;

pub const BYTES_PER_SCALAR: u64 = 4;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ClusterModel {
    /// Node count, at least 2.
    pub nodes: usize,
    /// Per-message latency in seconds.
    pub alpha: f64,
    /// Per-node bandwidth in bytes/second.
    pub beta: f64,
}

impl ClusterModel {
    pub fn new(nodes: usize, alpha: f64, beta: f64) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::Argument(format!("cluster needs >= 2 nodes, got {nodes}")));
        }
        if !(alpha >= 0.0) || !(beta > 0.0) {
            return Err(Error::Argument(format!(
                "cluster needs alpha >= 0 and beta > 0, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(ClusterModel { nodes, alpha, beta })
    }
}

/// Seconds for one ring allreduce of `n_bytes`.
pub fn allreduce_time(n_bytes: u64, cluster: &ClusterModel) -> f64 {
    let p = cluster.nodes as f64;
    2.0 * (p - 1.0) * cluster.alpha + 2.0 * n_bytes as f64 * (p - 1.0) / (p * cluster.beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CommMode {
    Flat,
    PerLayer,
}

/// Gradient payload per parameterized layer (name, bytes), FP32.
pub fn layer_payloads(model: &ModelGraph) -> Vec<(String, u64)> {
    model
        .layers
        .iter()
        .filter(|l| l.param_count() > 0)
        .map(|l| (l.spec.name.clone(), BYTES_PER_SCALAR * l.param_count()))
        .collect()
}

pub fn total_payload_bytes(model: &ModelGraph) -> u64 {
    BYTES_PER_SCALAR * model.param_count()
}

/// Gradient-exchange seconds for one epoch of `iters_per_epoch` iterations.
pub fn epoch_comm_time(
    model: &ModelGraph,
    cluster: &ClusterModel,
    iters_per_epoch: u64,
    mode: CommMode,
) -> f64 {
    let per_iter = match mode {
        CommMode::Flat => allreduce_time(total_payload_bytes(model), cluster),
        CommMode::PerLayer => layer_payloads(model)
            .iter()
            .map(|(_, bytes)| allreduce_time(*bytes, cluster))
            .sum(),
    };
    per_iter * iters_per_epoch as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelCommReport {
    pub per_layer_bytes: Vec<(String, u64)>,
    pub total_bytes: u64,
    pub message_count_per_layer_mode: usize,
    pub seconds_flat: f64,
    pub seconds_per_layer: f64,
}

/// Per-epoch communication report for one model.
pub fn comm_report(model: &ModelGraph, cluster: &ClusterModel, iters: u64) -> ModelCommReport {
    let per_layer_bytes = layer_payloads(model);
    ModelCommReport {
        total_bytes: total_payload_bytes(model),
        message_count_per_layer_mode: per_layer_bytes.len(),
        seconds_flat: epoch_comm_time(model, cluster, iters, CommMode::Flat),
        seconds_per_layer: epoch_comm_time(model, cluster, iters, CommMode::PerLayer),
        per_layer_bytes,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpeedupReport {
    pub cluster: ClusterModel,
    pub iters_per_epoch: u64,
    pub vanilla: ModelCommReport,
    pub hybrid: ModelCommReport,
    /// hybrid bytes / vanilla bytes == hybrid params / vanilla params.
    pub payload_ratio: f64,
    pub vanilla_epoch_seconds: f64,
    pub hybrid_epoch_seconds: f64,
    /// Whole-run projection over E epochs with E_wu vanilla warm-up epochs.
    pub epochs: u64,
    pub warmup_epochs: u64,
    pub projected_speedup: f64,
}

/// Combines modeled communication time with caller-supplied compute seconds
/// per epoch into a whole-run speedup projection.
#[allow(clippy::too_many_arguments)]
pub fn speedup_report(
    vanilla: &ModelGraph,
    hybrid: &ModelGraph,
    cluster: &ClusterModel,
    iters_per_epoch: u64,
    vanilla_compute_s: f64,
    hybrid_compute_s: f64,
    epochs: u64,
    warmup_epochs: u64,
) -> Result<SpeedupReport> {
    if warmup_epochs > epochs {
        return Err(Error::Argument(format!(
            "warm-up epochs {warmup_epochs} exceed total epochs {epochs}"
        )));
    }
    let v = comm_report(vanilla, cluster, iters_per_epoch);
    let h = comm_report(hybrid, cluster, iters_per_epoch);
    let vanilla_epoch = vanilla_compute_s + v.seconds_flat;
    let hybrid_epoch = hybrid_compute_s + h.seconds_flat;
    let baseline = epochs as f64 * vanilla_epoch;
    let staged = warmup_epochs as f64 * vanilla_epoch + (epochs - warmup_epochs) as f64 * hybrid_epoch;
    Ok(SpeedupReport {
        cluster: *cluster,
        iters_per_epoch,
        payload_ratio: h.total_bytes as f64 / v.total_bytes as f64,
        vanilla_epoch_seconds: vanilla_epoch,
        hybrid_epoch_seconds: hybrid_epoch,
        vanilla: v,
        hybrid: h,
        epochs,
        warmup_epochs,
        projected_speedup: baseline / staged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_model, ArchMode};

    fn cluster(p: usize, alpha: f64, beta: f64) -> ClusterModel {
        ClusterModel::new(p, alpha, beta).unwrap()
    }

    #[test]
    fn zero_bytes_is_pure_latency() {
        let c = cluster(5, 3e-5, 1e9);
        assert_eq!(allreduce_time(0, &c), 2.0 * 4.0 * 3e-5);
    }

    #[test]
    fn two_nodes_collapse_to_alpha_plus_n_over_beta() {
        let c = cluster(2, 1e-4, 2e9);
        let n = 1_000_000u64;
        let want = 2.0 * 1e-4 + n as f64 / 2e9;
        assert!((allreduce_time(n, &c) - want).abs() <= 1e-15);
    }

    #[test]
    fn latency_term_scales_with_node_count() {
        let n = 123_456u64;
        for p in [2usize, 4, 8, 16] {
            let c = cluster(p, 5e-5, 1.25e9);
            let direct = 2.0 * (p as f64 - 1.0) * 5e-5
                + 2.0 * n as f64 * (p as f64 - 1.0) / (p as f64 * 1.25e9);
            assert!((allreduce_time(n, &c) - direct).abs() <= 1e-15);
        }
    }

    #[test]
    fn flat_equals_per_layer_for_single_layer_model() {
        let model = {
            let mut m = build_model("toy_mlp", ArchMode::Vanilla, None).unwrap();
            // reduce to a single parameterized layer by zeroing the rest
            m.layers.truncate(1);
            m
        };
        let c = cluster(4, 2e-5, 1e9);
        let flat = epoch_comm_time(&model, &c, 10, CommMode::Flat);
        let per = epoch_comm_time(&model, &c, 10, CommMode::PerLayer);
        assert!((flat - per).abs() <= 1e-15);
    }

    #[test]
    fn per_layer_minus_flat_is_extra_latency() {
        let model = build_model("toy_cnn", ArchMode::Vanilla, None).unwrap();
        let iters = 7u64;
        let c = cluster(8, 5e-5, 1.25e9);
        let l = layer_payloads(&model).len() as f64;
        let flat = epoch_comm_time(&model, &c, iters, CommMode::Flat);
        let per = epoch_comm_time(&model, &c, iters, CommMode::PerLayer);
        let want = iters as f64 * 2.0 * (8.0 - 1.0) * 5e-5 * (l - 1.0);
        assert!((per - flat - want).abs() <= 1e-12, "{}", per - flat - want);
    }

    #[test]
    fn payload_is_four_bytes_per_param() {
        for arch in ["toy_mlp", "toy_cnn", "toy_lstm", "toy_transformer"] {
            let m = build_model(arch, ArchMode::Vanilla, None).unwrap();
            assert_eq!(total_payload_bytes(&m), 4 * m.param_count());
        }
    }
}

//! Analytic per-round cost of clustering: server-side similarity
//! floating-point operations and bytes on the wire.

use crate::strategy::StrategyKind;

/// Floating-point operations for one cosine or L2 similarity between two
/// `n`-vectors (a multiply-add pass for the dot product plus the two norms,
/// or equivalently for the squared difference).
pub fn pair_flops(n: u64) -> u64 {
    3 * n
}

/// Server-side similarity work for one clustering pass over `m` devices and
/// `k` centers.
///
/// The low-rank strategy compares `d`-vectors and builds its low-rank
/// centers by averaging device uploads (`m * d` adds). Device-side
/// assignment and unclustered strategies cost the server nothing.
pub fn similarity_flops(strategy: StrategyKind, m: u64, k: u64, dim: u64, d: u64) -> u64 {
    match strategy {
        StrategyKind::FeSem | StrategyKind::FedGroup | StrategyKind::Cgpfl => m * k * pair_flops(dim),
        StrategyKind::LcFed => m * k * pair_flops(d) + m * d,
        StrategyKind::Ifca | StrategyKind::FedAvg | StrategyKind::FedPer => 0,
    }
}

/// Ratio of full-parameter to low-rank cost for a single device/center pair.
pub fn pair_reduction_factor(dim: u64, d: u64) -> f64 {
    pair_flops(dim) as f64 / pair_flops(d) as f64
}

/// Bytes moved in one round as `(uplink, downlink)`.
///
/// Every strategy uploads full models; the low-rank strategy also uploads
/// its `d`-vector and downloads the global embedding with its center. The
/// device-side assignment strategy downloads all `k` centers.
pub fn comm_bytes(
    strategy: StrategyKind,
    m_selected: u64,
    k: u64,
    dim: u64,
    phi_dim: u64,
    d: u64,
    bytes_per_scalar: u64,
) -> (u64, u64) {
    let up = match strategy {
        StrategyKind::LcFed => m_selected * (dim + d),
        _ => m_selected * dim,
    };
    let down = match strategy {
        StrategyKind::Ifca => m_selected * k * dim,
        StrategyKind::LcFed => m_selected * (dim + phi_dim),
        _ => m_selected * dim,
    };
    (up * bytes_per_scalar, down * bytes_per_scalar)
}

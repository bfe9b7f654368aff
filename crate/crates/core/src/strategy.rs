use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// The simulated training strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    /// One global model, plain local SGD.
    FedAvg,
    /// Global embedding, personal decision block.
    FedPer,
    /// Online clustering on full-model L2 distance, prox toward the center.
    FeSem,
    /// Full-cosine clustering performed once, then frozen.
    FedGroup,
    /// Personal models pulled toward their cluster center, full-cosine
    /// clustering. Approximated as the low-rank method with `lambda = 0`.
    Cgpfl,
    /// Devices pick the center with the lowest local loss.
    Ifca,
    /// Cluster and global-embedding prox terms with low-rank cosine
    /// clustering.
    LcFed,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::FedAvg,
        StrategyKind::FedPer,
        StrategyKind::FeSem,
        StrategyKind::FedGroup,
        StrategyKind::Cgpfl,
        StrategyKind::Ifca,
        StrategyKind::LcFed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedPer => "fedper",
            StrategyKind::FeSem => "fesem",
            StrategyKind::FedGroup => "fedgroup",
            StrategyKind::Cgpfl => "cgpfl",
            StrategyKind::Ifca => "ifca",
            StrategyKind::LcFed => "lcfed",
        }
    }

    /// Whether the strategy maintains more than one center.
    pub fn is_clustered(self) -> bool {
        !matches!(self, StrategyKind::FedAvg | StrategyKind::FedPer)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::input(format!("unknown strategy `{s}`")))
    }
}

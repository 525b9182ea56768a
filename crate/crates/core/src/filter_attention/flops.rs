//! Analytic multiply-accumulate counts.

use serde::{Deserialize, Serialize};

/// `Q·Kᵀ` for `k` tokens of width `c`.
pub fn score_macs(k: u64, c: u64) -> u64 {
    k * k * c
}

/// Attention-weighted sum of values.
pub fn weighted_value_macs(k: u64, c: u64) -> u64 {
    k * k * c
}

/// Q, K, V and output projections.
pub fn projection_macs(k: u64, c: u64) -> u64 {
    4 * k * c * c
}

pub fn mlp_macs(k: u64, c: u64, mlp_ratio: u64) -> u64 {
    2 * k * c * c * mlp_ratio
}

/// The quadratic part of one attention layer.
pub fn score_value_macs(k: u64, c: u64) -> u64 {
    score_macs(k, c) + weighted_value_macs(k, c)
}

pub fn encoder_layer_macs(k: u64, c: u64, mlp_ratio: u64) -> u64 {
    score_value_macs(k, c) + projection_macs(k, c) + mlp_macs(k, c, mlp_ratio)
}

pub fn encoder_macs(k: u64, c: u64, mlp_ratio: u64, depth: u64) -> u64 {
    depth * encoder_layer_macs(k, c, mlp_ratio)
}

/// Standard convolution count: `(cin/groups)·cout·kernel²·out_h·out_w`.
pub fn conv_macs(cin: u64, cout: u64, kernel: u64, out_h: u64, out_w: u64, groups: u64) -> u64 {
    cin / groups * cout * kernel * kernel * out_h * out_w
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum AttentionKind {
    /// Every position is a token.
    Dense,
    /// Scorer plus top-K tokens.
    Filter { k: u64 },
    /// Scorer plus `k` random tokens (the scorer still scales the map).
    Dropout { k: u64 },
    /// Tokens after `window × window` average pooling.
    Pooled { window: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    pub height: u64,
    pub width: u64,
    pub channels: u64,
    pub depth: u64,
    pub mlp_ratio: u64,
}

impl AttentionKind {
    pub fn tokens(self, d: &AttentionDims) -> u64 {
        match self {
            AttentionKind::Dense => d.height * d.width,
            AttentionKind::Filter { k } | AttentionKind::Dropout { k } => k,
            AttentionKind::Pooled { window } => (d.height / window) * (d.width / window),
        }
    }
}

/// 3×3, one output channel, same resolution.
pub fn scorer_macs(d: &AttentionDims) -> u64 {
    conv_macs(d.channels, 1, 3, d.height, d.width, 1)
}

/// Total MACs of one attention block of the given kind.
pub fn block_macs(kind: AttentionKind, d: &AttentionDims) -> u64 {
    let enc = encoder_macs(kind.tokens(d), d.channels, d.mlp_ratio, d.depth);
    match kind {
        AttentionKind::Dense | AttentionKind::Pooled { .. } => enc,
        AttentionKind::Filter { .. } | AttentionKind::Dropout { .. } => enc + scorer_macs(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_counts() {
        assert_eq!(score_macs(4, 8), 128);
        assert_eq!(conv_macs(8, 16, 1, 14, 14, 1), 25088);
        let hw = 16 * 16;
        assert_eq!(score_value_macs(hw, 32), 16 * score_value_macs(hw / 4, 32));
    }

    #[test]
    fn full_budget_filter_is_dense_plus_scorer() {
        let d = AttentionDims { height: 8, width: 8, channels: 16, depth: 2, mlp_ratio: 2 };
        assert_eq!(
            block_macs(AttentionKind::Filter { k: 64 }, &d),
            block_macs(AttentionKind::Dense, &d) + scorer_macs(&d)
        );
    }

    #[test]
    fn monotone_in_k() {
        let d = AttentionDims { height: 8, width: 8, channels: 16, depth: 1, mlp_ratio: 2 };
        let counts: Vec<u64> = (1..=64).map(|k| block_macs(AttentionKind::Filter { k }, &d)).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }
}

//! Parameter and multiply-accumulate counting.
//!
//! Parameters come straight from the layout manifest. MACs count one unit
//! per scalar multiply-accumulate in linear maps and in the attention
//! score/context products; normalizations, activations and mean
//! aggregations are excluded (the dominant-term convention).

use crate::config::ModelConfig;
use crate::params::layout;
use serde::Serialize;

/// Exact learnable-parameter total for a configuration.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    layout(cfg).iter().map(|s| s.numel() as u64).sum()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MacBreakdown {
    pub feature_init: u64,
    pub group_estimation: u64,
    pub pair_layers: u64,
    pub hyper_layers: u64,
    pub decoder: u64,
    pub total: u64,
}

/// Forward-pass multiply-accumulate count for a scene with `n_agents`.
pub fn count_macs(cfg: &ModelConfig, n_agents: usize) -> MacBreakdown {
    let n = n_agents as u64;
    let pairs = n * n;
    let (d_in, d_n, d_e, d_h, d_d, t_p, t_f) = (
        cfg.d_in as u64,
        cfg.d_n as u64,
        cfg.d_e as u64,
        cfg.d_h as u64,
        cfg.d_d as u64,
        cfg.t_p as u64,
        cfg.t_f as u64,
    );
    let layers = cfg.layers as u64;
    let k = cfg.k as u64;

    let feature_init =
        // Node embedding: per-step projection, then the flattened second map.
        n * t_p * d_in * d_n + n * (t_p * d_n) * d_n
        // Pair edges: the two-layer MLP over every ordered pair.
        + pairs * (2 * d_n * d_h + d_h * d_e)
        // Hyperedges: the two-layer MLP over every ego group mean.
        + n * (d_n * d_h + d_h * d_e);

    // Cosine affinity dot products.
    let group_estimation = pairs * d_n;

    let pair_layer =
        // Node and edge projections onto q/k/v.
        3 * n * d_n * d_n + 3 * pairs * d_e * d_n
        // Scores and contexts across all heads.
        + pairs * d_n + pairs * d_n
        // Attention output projection and node feed-forward.
        + n * d_n * d_n + n * 2 * d_n * d_h
        // Message, edge projection, edge feed-forward.
        + pairs * (2 * d_e + 2 * d_n) * d_h
        + pairs * d_h * d_e
        + pairs * 2 * d_e * d_h;

    let hyper_layer =
        3 * n * d_n * d_n + 3 * n * d_e * d_n
        + pairs * d_n + pairs * d_n
        + n * d_n * d_n + n * 2 * d_n * d_h
        + n * (d_e + d_n) * d_h
        + n * d_h * d_e
        + n * 2 * d_e * d_h;

    let decoder = k * n * (3 * d_n * d_d + d_d * (d_d / 2) + (d_d / 2) * t_f * 2);

    let pair_layers = layers * pair_layer;
    let hyper_layers = layers * hyper_layer;
    MacBreakdown {
        feature_init,
        group_estimation,
        pair_layers,
        hyper_layers,
        decoder,
        total: feature_init + group_estimation + pair_layers + hyper_layers + decoder,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterStore;

    #[test]
    fn single_linear_with_bias_counts_in_times_out_plus_out() {
        // Isolate one linear through layout bookkeeping: the first node
        // embedding map is d_in x d_n with a d_n bias.
        let cfg = ModelConfig::tiny();
        let specs = layout(&cfg);
        let w = specs.iter().find(|s| s.name == "node_init.l1.w").unwrap();
        let b = specs.iter().find(|s| s.name == "node_init.l1.b").unwrap();
        assert_eq!(w.numel() + b.numel(), cfg.d_in * cfg.d_n + cfg.d_n);
    }

    #[test]
    fn count_matches_live_store_total() {
        for cfg in [ModelConfig::tiny(), ModelConfig::default()] {
            let store = ParameterStore::<f32>::init(&cfg, 0).unwrap();
            assert_eq!(count_params(&cfg), store.total_elements() as u64);
        }
    }

    #[test]
    fn pedestrian_config_matches_independent_hand_count() {
        // Every block summed by hand, written as one flat expression.
        let cfg = ModelConfig::default(); // t_p 8, t_f 12, d_in 2, 64/64/128/128, L4, 8 heads, K20
        let hand: u64 =
            // node embedding: 2x64 + 64, (8*64)x64 + 64
            (2 * 64 + 64) + (512 * 64 + 64)
            // threshold
            + 1
            // pair-edge init MLP: 128->128->64
            + (128 * 128 + 128) + (128 * 64 + 64)
            // hyperedge init MLP: 64->128->64
            + (64 * 128 + 128) + (128 * 64 + 64)
            // one pair layer:
            + 4 * (
                6 * (64 * 64 + 64)          // q/k/v for nodes and edges
                + (64 * 64 + 64)            // attention out
                + 2 * (64 + 64)             // node norms
                + (64 * 128 + 128) + (128 * 64 + 64)   // node ffn
                + (256 * 128 + 128)         // message
                + (128 * 64 + 64)           // edge projection
                + 2 * (64 + 64)             // edge norms
                + (64 * 128 + 128) + (128 * 64 + 64)   // edge ffn
            )
            // one hyper layer:
            + 4 * (
                6 * (64 * 64 + 64)
                + (64 * 64 + 64)
                + 2 * (64 + 64)
                + (64 * 128 + 128) + (128 * 64 + 64)
                + (128 * 128 + 128)         // message over [h; n]
                + (128 * 64 + 64)
                + 2 * (64 + 64)
                + (64 * 128 + 128) + (128 * 64 + 64)
            )
            // twenty decoder heads: 192->128->64->24
            + 20 * ((192 * 128 + 128) + (128 * 64 + 64) + (64 * 24 + 24));
        assert_eq!(count_params(&cfg), hand);
    }

    #[test]
    fn pedestrian_macs_match_independent_hand_count() {
        let cfg = ModelConfig::default();
        let n: u64 = 10;
        let p = n * n;
        let hand: u64 =
            // feature init
            n * 8 * 2 * 64 + n * 512 * 64
            + p * (128 * 128 + 128 * 64)
            + n * (64 * 128 + 128 * 64)
            // affinity
            + p * 64
            // pair layers
            + 4 * (3 * n * 4096 + 3 * p * 4096 + 2 * p * 64
                + n * 4096 + n * 2 * 64 * 128
                + p * 256 * 128 + p * 128 * 64 + p * 2 * 64 * 128)
            // hyper layers
            + 4 * (3 * n * 4096 + 3 * n * 4096 + 2 * p * 64
                + n * 4096 + n * 2 * 64 * 128
                + n * 128 * 128 + n * 128 * 64 + n * 2 * 64 * 128)
            // decoder
            + 20 * n * (192 * 128 + 128 * 64 + 64 * 24);
        assert_eq!(count_macs(&cfg, 10).total, hand);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let cfg = ModelConfig::default();
        let b = count_macs(&cfg, 7);
        assert_eq!(
            b.total,
            b.feature_init + b.group_estimation + b.pair_layers + b.hyper_layers + b.decoder
        );
    }
}

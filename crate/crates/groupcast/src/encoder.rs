//! Two-branch encoder over shared initial features.
//!
//! One forward pass runs, in order: node embedding, group estimation from
//! the initial embeddings, pair-edge and hyperedge initialization, then two
//! independent stacks evolved in parallel from the same initial nodes — L
//! pair-wise layers over (nodes, edges) and L hyper layers over (nodes,
//! hyperedges, incidence). The incidence matrix is estimated once and stays
//! fixed across layers.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::features;
use crate::grouping::{self, GroupIncidence, GroupingTrace, SteVariant};
use crate::hyper;
use crate::numerics::{Real, Tape, ValueId};
use crate::pairwise;
use crate::params::{ParameterStore, TapeParams};

pub struct EncoderOutput {
    /// Final node features from the pair-wise branch, [N, d_n].
    pub n_pair: ValueId,
    /// Final node features from the group branch, [N, d_n].
    pub n_group: ValueId,
    /// The estimated incidence matrix, echoed for dumps and inspection.
    pub groups: GroupIncidence,
}

/// Tape handles and stage log kept for tests and gradient checking.
pub struct EncodeTrace {
    pub stages: Vec<&'static str>,
    pub n0: ValueId,
    pub grouping: GroupingTrace,
    pub pair_edges0: ValueId,
    pub hyperedges0: ValueId,
}

pub fn encode<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    inputs: ValueId,
    n_agents: usize,
    surrogate: Option<SteVariant>,
) -> Result<(EncoderOutput, EncodeTrace)> {
    let mut stages = Vec::new();

    stages.push("node_init");
    let n0 = features::init_node_features(tape, tp, store, cfg, inputs, n_agents)?;

    stages.push("group_estimation");
    let theta_raw = tp.get(store, "group_threshold")?;
    let grouping_trace = grouping::groups_on_tape(tape, n0, theta_raw, surrogate)?;
    let incidence = grouping_trace.incidence;
    let groups = GroupIncidence::from_zero_one(tape.value(incidence))?;

    stages.push("pair_edge_init");
    let pair_edges0 = features::init_pair_edges(tape, tp, store, n0, n_agents)?;

    stages.push("hyperedge_init");
    let hyperedges0 = features::init_hyperedges(tape, tp, store, n0, incidence, n_agents)?;

    stages.push("pair_layers");
    let mut n_pair = n0;
    let mut edges = pair_edges0;
    for l in 0..cfg.layers {
        let (nn, ee) = pairwise::layer(tape, tp, store, cfg, l, n_pair, edges, n_agents)?;
        n_pair = nn;
        edges = ee;
    }

    stages.push("hyper_layers");
    let counts = hyper::membership_counts(tape, incidence, n_agents)?;
    let mut n_group = n0;
    let mut hyperedges = hyperedges0;
    for l in 0..cfg.layers {
        let (nn, hh) = hyper::layer(
            tape, tp, store, cfg, l, n_group, hyperedges, incidence, &counts,
        )?;
        n_group = nn;
        hyperedges = hh;
    }

    Ok((
        EncoderOutput {
            n_pair,
            n_group,
            groups,
        },
        EncodeTrace {
            stages,
            n0,
            grouping: grouping_trace,
            pair_edges0,
            hyperedges0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn cfg_small(layers: usize) -> ModelConfig {
        ModelConfig {
            d_in: 2,
            d_n: 8,
            d_e: 8,
            d_h: 16,
            d_d: 8,
            layers,
            heads: 2,
            k: 1,
            t_p: 3,
            t_f: 2,
            ..ModelConfig::tiny()
        }
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    fn run(
        cfg: &ModelConfig,
        store: &ParameterStore<f64>,
        input_data: &[f64],
        n: usize,
    ) -> (Tensor<f64>, Tensor<f64>, GroupIncidence, Vec<&'static str>) {
        let mut tape = Tape::new();
        let tp = TapeParams::bind(&mut tape, store);
        let inputs = tape.leaf(Tensor::from_f64(vec![n * cfg.t_p, cfg.d_in], input_data).unwrap());
        let (out, trace) = encode(
            &mut tape,
            &tp,
            store,
            cfg,
            inputs,
            n,
            Some(SteVariant::Triangle),
        )
        .unwrap();
        (
            tape.value(out.n_pair).clone(),
            tape.value(out.n_group).clone(),
            out.groups,
            trace.stages,
        )
    }

    #[test]
    fn single_agent_scene_runs_end_to_end() {
        let cfg = cfg_small(2);
        let store = ParameterStore::<f64>::init(&cfg, 40).unwrap();
        let data = pseudo(cfg.t_p * cfg.d_in, 41);
        let (n_pair, n_group, groups, _) = run(&cfg, &store, &data, 1);
        assert_eq!(n_pair.shape(), &[1, cfg.d_n]);
        assert_eq!(n_group.shape(), &[1, cfg.d_n]);
        assert_eq!(groups.n(), 1);
        assert!(n_pair.all_finite() && n_group.all_finite());
    }

    #[test]
    fn zero_layers_return_initial_embeddings_in_both_branches() {
        let cfg = cfg_small(0);
        let store = ParameterStore::<f64>::init(&cfg, 42).unwrap();
        let n = 3;
        let data = pseudo(n * cfg.t_p * cfg.d_in, 43);

        let mut tape = Tape::new();
        let tp = TapeParams::bind(&mut tape, &store);
        let inputs = tape.leaf(Tensor::from_f64(vec![n * cfg.t_p, cfg.d_in], &data).unwrap());
        let (out, trace) = encode(&mut tape, &tp, &store, &cfg, inputs, n, None).unwrap();
        assert_eq!(tape.value(out.n_pair).data(), tape.value(trace.n0).data());
        assert_eq!(tape.value(out.n_group).data(), tape.value(trace.n0).data());
    }

    #[test]
    fn stage_order_is_nodes_groups_edges_hyperedges() {
        let cfg = cfg_small(1);
        let store = ParameterStore::<f64>::init(&cfg, 44).unwrap();
        let data = pseudo(2 * cfg.t_p * cfg.d_in, 45);
        let (_, _, _, stages) = run(&cfg, &store, &data, 2);
        assert_eq!(
            stages,
            vec![
                "node_init",
                "group_estimation",
                "pair_edge_init",
                "hyperedge_init",
                "pair_layers",
                "hyper_layers"
            ]
        );
    }

    #[test]
    fn branches_are_parallel_not_sequential() {
        let cfg = cfg_small(1);
        let n = 3;
        let data = pseudo(n * cfg.t_p * cfg.d_in, 46);
        let base = ParameterStore::<f64>::init(&cfg, 47).unwrap();
        let (pair_a, group_a, _, _) = run(&cfg, &base, &data, n);

        // Zeroing every hyper-branch parameter must not move n_pair.
        let mut no_hyper = base.clone();
        for name in base.names().to_vec() {
            if name.starts_with("hyper.") {
                let shape = no_hyper.get(&name).unwrap().shape().to_vec();
                no_hyper.set(&name, Tensor::zeros(shape)).unwrap();
            }
        }
        let (pair_b, _, _, _) = run(&cfg, &no_hyper, &data, n);
        assert_eq!(pair_a.data(), pair_b.data());

        // And zeroing every pair-branch parameter must not move n_group.
        let mut no_pair = base.clone();
        for name in base.names().to_vec() {
            if name.starts_with("pair.") {
                let shape = no_pair.get(&name).unwrap().shape().to_vec();
                no_pair.set(&name, Tensor::zeros(shape)).unwrap();
            }
        }
        let (_, group_b, _, _) = run(&cfg, &no_pair, &data, n);
        assert_eq!(group_a.data(), group_b.data());
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = cfg_small(2);
        let store = ParameterStore::<f64>::init(&cfg, 48).unwrap();
        let n = 4;
        let data = pseudo(n * cfg.t_p * cfg.d_in, 49);
        let (pair_a, group_a, groups_a, _) = run(&cfg, &store, &data, n);
        let (pair_b, group_b, groups_b, _) = run(&cfg, &store, &data, n);
        assert_eq!(pair_a.data(), pair_b.data());
        assert_eq!(group_a.data(), group_b.data());
        assert_eq!(groups_a, groups_b);
    }

    #[test]
    fn permuting_agents_permutes_outputs() {
        let cfg = cfg_small(2);
        let store = ParameterStore::<f64>::init(&cfg, 50).unwrap();
        let n = 4;
        let data = pseudo(n * cfg.t_p * cfg.d_in, 51);
        let perm = [3usize, 1, 0, 2];
        let block = cfg.t_p * cfg.d_in;
        let mut permuted = vec![0.0; data.len()];
        for (new_i, &old_i) in perm.iter().enumerate() {
            permuted[new_i * block..(new_i + 1) * block]
                .copy_from_slice(&data[old_i * block..(old_i + 1) * block]);
        }
        let (pair_a, group_a, groups_a, _) = run(&cfg, &store, &data, n);
        let (pair_p, group_p, groups_p, _) = run(&cfg, &store, &permuted, n);
        for (new_i, &old_i) in perm.iter().enumerate() {
            for c in 0..cfg.d_n {
                assert!((pair_p.at(new_i, c) - pair_a.at(old_i, c)).abs() < 1e-10);
                assert!((group_p.at(new_i, c) - group_a.at(old_i, c)).abs() < 1e-10);
            }
            for (new_j, &old_j) in perm.iter().enumerate() {
                assert_eq!(
                    groups_p.contains(new_i, new_j),
                    groups_a.contains(old_i, old_j)
                );
            }
        }
    }
}

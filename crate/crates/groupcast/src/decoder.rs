//! Multi-head trajectory decoder and the best-of-K training loss.
//!
//! Each prediction head is an independent three-layer MLP over the
//! concatenation [initial; pair-branch; group-branch] of node features,
//! emitting a full future trajectory per agent. The loss takes, per point
//! or per scene, the minimum Euclidean error across heads; only the argmin
//! head receives gradient.

use crate::config::{LossReduction, ModelConfig};
use crate::error::{Error, Result};
use crate::features::linear;
use crate::numerics::{Real, Tape, ValueId};
use crate::params::{ParameterStore, TapeParams};

/// Decode K candidate futures. Returns one [N, t_f * 2] tensor per head.
pub fn decode<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    n0: ValueId,
    n_pair: ValueId,
    n_group: ValueId,
) -> Result<Vec<ValueId>> {
    let cat = tape.concat_cols(&[n0, n_pair, n_group])?;
    let mut heads = Vec::with_capacity(cfg.k);
    for head in 0..cfg.k {
        let p = format!("decoder.{head}");
        let h = linear(tape, tp, store, &format!("{p}.l1"), cat)?;
        let h = tape.relu(h)?;
        let h = linear(tape, tp, store, &format!("{p}.l2"), h)?;
        let h = tape.relu(h)?;
        heads.push(linear(tape, tp, store, &format!("{p}.l3"), h)?);
    }
    Ok(heads)
}

/// Per-head pointwise Euclidean distances to the target, [N * t_f, 1].
fn head_distances<F: Real>(
    tape: &mut Tape<F>,
    pred: ValueId,
    target: ValueId,
    n_agents: usize,
    t_f: usize,
) -> Result<ValueId> {
    let flat = tape.reshape(pred, n_agents * t_f, 2)?;
    let diff = tape.sub(flat, target)?;
    let sq = tape.rowwise_dot(diff, diff)?;
    tape.sqrt(sq)
}

/// Best-of-K loss. `target` is the ground-truth future as an
/// [N * t_f, 2] leaf. `per_point` takes the min over heads inside the
/// agent/time sums; `per_scene` takes the min over heads of the scene-mean
/// error. Ties resolve to the lowest head index, which alone receives
/// gradient.
pub fn variety_loss<F: Real>(
    tape: &mut Tape<F>,
    preds: &[ValueId],
    target: ValueId,
    n_agents: usize,
    t_f: usize,
    reduction: LossReduction,
) -> Result<ValueId> {
    if preds.is_empty() {
        return Err(Error::Config("variety loss needs at least one head".into()));
    }
    {
        let t = tape.value(target);
        if t.shape() != [n_agents * t_f, 2] {
            return Err(Error::Shape(format!(
                "target shape {:?} does not match [{} * {}, 2]",
                t.shape(),
                n_agents,
                t_f
            )));
        }
    }
    let dists = preds
        .iter()
        .map(|&p| head_distances(tape, p, target, n_agents, t_f))
        .collect::<Result<Vec<_>>>()?;
    match reduction {
        LossReduction::PerPoint => {
            let best = tape.min_over(&dists)?;
            tape.mean_all(best)
        }
        LossReduction::PerScene => {
            let means = dists
                .iter()
                .map(|&d| tape.mean_all(d))
                .collect::<Result<Vec<_>>>()?;
            tape.min_over(&means)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn cfg_small() -> ModelConfig {
        ModelConfig {
            d_in: 2,
            d_n: 4,
            d_e: 4,
            d_h: 8,
            d_d: 8,
            layers: 0,
            heads: 1,
            k: 2,
            t_p: 2,
            t_f: 3,
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

    #[test]
    fn zero_features_and_weights_give_zero_trajectories() {
        let cfg = cfg_small();
        let mut store = ParameterStore::<f64>::init(&cfg, 60).unwrap();
        for head in 0..cfg.k {
            for l in 1..=3 {
                let name = format!("decoder.{head}.l{l}.w");
                let shape = store.get(&name).unwrap().shape().to_vec();
                store.set(&name, Tensor::zeros(shape)).unwrap();
            }
        }
        let mut tape = Tape::new();
        let tp = TapeParams::bind(&mut tape, &store);
        let n = 2;
        let z = tape.leaf(Tensor::zeros(vec![n, cfg.d_n]));
        let heads = decode(&mut tape, &tp, &store, &cfg, z, z, z).unwrap();
        for h in &heads {
            for &v in tape.value(*h).data() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn output_shape_is_heads_by_agents_by_future() {
        let cfg = cfg_small();
        let store = ParameterStore::<f64>::init(&cfg, 61).unwrap();
        let mut tape = Tape::new();
        let tp = TapeParams::bind(&mut tape, &store);
        let n = 3;
        let a = tape.leaf(Tensor::from_f64(vec![n, cfg.d_n], &pseudo(n * cfg.d_n, 62)).unwrap());
        let b = tape.leaf(Tensor::from_f64(vec![n, cfg.d_n], &pseudo(n * cfg.d_n, 63)).unwrap());
        let c = tape.leaf(Tensor::from_f64(vec![n, cfg.d_n], &pseudo(n * cfg.d_n, 64)).unwrap());
        let heads = decode(&mut tape, &tp, &store, &cfg, a, b, c).unwrap();
        assert_eq!(heads.len(), cfg.k);
        for h in &heads {
            assert_eq!(tape.value(*h).shape(), &[n, cfg.t_f * 2]);
        }
    }

    #[test]
    fn decoder_concatenation_order_via_basis_probes() {
        let cfg = cfg_small();
        let n = 1;
        // One probe per input block: route one coordinate of l1 input to
        // the output through identity-ish l2/l3.
        let probe = |coord: usize| -> f64 {
            let mut store = ParameterStore::<f64>::init(&cfg, 65).unwrap();
            let mut w1 = vec![0.0; 3 * cfg.d_n * cfg.d_d];
            w1[coord * cfg.d_d] = 1.0;
            store
                .set(
                    "decoder.0.l1.w",
                    Tensor::from_f64(vec![3 * cfg.d_n, cfg.d_d], &w1).unwrap(),
                )
                .unwrap();
            let mut w2 = vec![0.0; cfg.d_d * (cfg.d_d / 2)];
            w2[0] = 1.0;
            store
                .set(
                    "decoder.0.l2.w",
                    Tensor::from_f64(vec![cfg.d_d, cfg.d_d / 2], &w2).unwrap(),
                )
                .unwrap();
            let mut w3 = vec![0.0; (cfg.d_d / 2) * cfg.t_f * 2];
            w3[0] = 1.0;
            store
                .set(
                    "decoder.0.l3.w",
                    Tensor::from_f64(vec![cfg.d_d / 2, cfg.t_f * 2], &w3).unwrap(),
                )
                .unwrap();
            let mut tape = Tape::new();
            let tp = TapeParams::bind(&mut tape, &store);
            // Positive markers so the relus pass values through.
            let a = tape.leaf(Tensor::from_f64(vec![n, cfg.d_n], &[10.0, 11.0, 12.0, 13.0]).unwrap());
            let b = tape.leaf(Tensor::from_f64(vec![n, cfg.d_n], &[20.0, 21.0, 22.0, 23.0]).unwrap());
            let c = tape.leaf(Tensor::from_f64(vec![n, cfg.d_n], &[30.0, 31.0, 32.0, 33.0]).unwrap());
            let heads = decode(&mut tape, &tp, &store, &cfg, a, b, c).unwrap();
            tape.value(heads[0]).at(0, 0)
        };
        for c in 0..cfg.d_n {
            assert_eq!(probe(c), 10.0 + c as f64);
            assert_eq!(probe(cfg.d_n + c), 20.0 + c as f64);
            assert_eq!(probe(2 * cfg.d_n + c), 30.0 + c as f64);
        }
    }

    #[test]
    fn single_head_reductions_agree_and_equal_mean_distance() {
        let mut tape = Tape::<f64>::new();
        let n = 2;
        let t_f = 3;
        let pred_data = pseudo(n * t_f * 2, 66);
        let gt_data = pseudo(n * t_f * 2, 67);
        let pred = tape.leaf(Tensor::from_f64(vec![n, t_f * 2], &pred_data).unwrap());
        let gt = tape.leaf(Tensor::from_f64(vec![n * t_f, 2], &gt_data).unwrap());
        let a = variety_loss(&mut tape, &[pred], gt, n, t_f, LossReduction::PerPoint).unwrap();
        let b = variety_loss(&mut tape, &[pred], gt, n, t_f, LossReduction::PerScene).unwrap();
        let mut expected = 0.0;
        for p in 0..n * t_f {
            let dx = pred_data[p * 2] - gt_data[p * 2];
            let dy = pred_data[p * 2 + 1] - gt_data[p * 2 + 1];
            expected += (dx * dx + dy * dy).sqrt();
        }
        expected /= (n * t_f) as f64;
        assert!((tape.value(a).data()[0] - expected).abs() < 1e-12);
        assert!((tape.value(b).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn perfect_head_zeroes_per_scene_loss() {
        let mut tape = Tape::<f64>::new();
        let n = 2;
        let t_f = 2;
        let gt_data = pseudo(n * t_f * 2, 68);
        let gt = tape.leaf(Tensor::from_f64(vec![n * t_f, 2], &gt_data).unwrap());
        let perfect = tape.leaf(Tensor::from_f64(vec![n, t_f * 2], &gt_data).unwrap());
        let wrong_data = pseudo(n * t_f * 2, 69);
        let wrong = tape.leaf(Tensor::from_f64(vec![n, t_f * 2], &wrong_data).unwrap());
        let loss =
            variety_loss(&mut tape, &[wrong, perfect], gt, n, t_f, LossReduction::PerScene).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn per_point_never_exceeds_per_scene_on_hand_case() {
        // K = 2, N = 1, T_f = 2. Head 0 wins at step 0, head 1 at step 1:
        // distances head 0: [1, 3], head 1: [2, 1].
        // per_point = (1 + 1) / 2 = 1; per_scene = min(2, 1.5) = 1.5.
        let mut tape = Tape::<f64>::new();
        let gt = tape.leaf(Tensor::from_f64(vec![2, 2], &[0.0; 4]).unwrap());
        let h0 = tape.leaf(Tensor::from_f64(vec![1, 4], &[1.0, 0.0, 3.0, 0.0]).unwrap());
        let h1 = tape.leaf(Tensor::from_f64(vec![1, 4], &[0.0, 2.0, 0.0, 1.0]).unwrap());
        let pp = variety_loss(&mut tape, &[h0, h1], gt, 1, 2, LossReduction::PerPoint).unwrap();
        let ps = variety_loss(&mut tape, &[h0, h1], gt, 1, 2, LossReduction::PerScene).unwrap();
        let (pp, ps) = (tape.value(pp).data()[0], tape.value(ps).data()[0]);
        assert!((pp - 1.0).abs() < 1e-12);
        assert!((ps - 1.5).abs() < 1e-12);
        assert!(pp <= ps);
    }

    #[test]
    fn gradient_flows_only_through_argmin_head() {
        let mut tape = Tape::<f64>::new();
        let n = 1;
        let t_f = 2;
        let gt = tape.leaf(Tensor::from_f64(vec![2, 2], &[0.0; 4]).unwrap());
        // Head 1 is strictly better everywhere.
        let h0 = tape.param(Tensor::from_f64(vec![1, 4], &[3.0, 0.0, 4.0, 0.0]).unwrap());
        let h1 = tape.param(Tensor::from_f64(vec![1, 4], &[1.0, 0.0, 1.0, 0.0]).unwrap());
        for reduction in [LossReduction::PerPoint, LossReduction::PerScene] {
            let loss = variety_loss(&mut tape, &[h0, h1], gt, n, t_f, reduction).unwrap();
            let grads = tape.backprop(loss).unwrap();
            for &g in grads.of(h0).unwrap() {
                assert_eq!(g, 0.0);
            }
            assert!(grads.of(h1).unwrap().iter().any(|&g| g != 0.0));
        }
    }

    #[test]
    fn mismatched_target_shape_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let gt = tape.leaf(Tensor::zeros(vec![3, 2]));
        let h = tape.leaf(Tensor::zeros(vec![1, 4]));
        let r = variety_loss(&mut tape, &[h], gt, 1, 2, LossReduction::PerScene);
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}

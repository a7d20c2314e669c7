//! Scene-level forward pass: inputs, encoder, decoder, loss, and the
//! inference entry points built on top of it.

use crate::config::{LossReduction, MetricMode, ModelConfig};
use crate::data::{self, Scene};
use crate::decoder;
use crate::encoder::{self, EncodeTrace, EncoderOutput};
use crate::error::{Error, Result};
use crate::grouping::{GroupIncidence, SteVariant};
use crate::metrics::{self, MetricReport, PredictionSet};
use crate::numerics::{Real, Tape, Tensor, ValueId};
use crate::params::{ParameterStore, TapeParams};

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Surrogate gradient for the group-estimation step. `None` zeroes the
    /// step's backward path, which finite-difference comparisons require.
    pub surrogate: Option<SteVariant>,
    /// When set, the scene must be labeled and a loss node is built.
    pub loss: Option<LossReduction>,
}

impl ForwardOptions {
    pub fn inference(cfg: &ModelConfig) -> Self {
        ForwardOptions {
            surrogate: Some(cfg.ste_variant),
            loss: None,
        }
    }

    pub fn training(cfg: &ModelConfig, reduction: LossReduction) -> Self {
        ForwardOptions {
            surrogate: Some(cfg.ste_variant),
            loss: Some(reduction),
        }
    }
}

/// One scene's tape plus handles into it.
pub struct SceneForward<F: Real> {
    pub tape: Tape<F>,
    pub n_agents: usize,
    pub encoder: EncoderOutput,
    pub trace: EncodeTrace,
    /// Per-head predictions, [N, t_f * 2] each.
    pub preds: Vec<ValueId>,
    pub loss: Option<ValueId>,
}

pub fn forward_scene<F: Real>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    scene: &Scene,
    opts: &ForwardOptions,
) -> Result<SceneForward<F>> {
    scene.validate()?;
    if scene.t_p() != cfg.t_p {
        return Err(Error::Config(format!(
            "scene {} has t_p = {}, model expects {}",
            scene.scene_id,
            scene.t_p(),
            cfg.t_p
        )));
    }
    let n = scene.n_agents();
    let mut tape = Tape::new();
    let tp = TapeParams::bind(&mut tape, store);

    let inputs_f64 = data::model_inputs(scene, cfg.d_in)?;
    let inputs = tape.leaf(inputs_f64.cast::<F>());
    let (enc, trace) = encoder::encode(&mut tape, &tp, store, cfg, inputs, n, opts.surrogate)?;
    let offsets = decoder::decode(&mut tape, &tp, store, cfg, trace.n0, enc.n_pair, enc.n_group)?;

    // Heads emit offsets from each agent's last observed position; shifting
    // them there yields absolute coordinates in meters and keeps the model
    // translation-equivariant under displacement-only inputs.
    let t_p = cfg.t_p;
    let mut anchor = Vec::with_capacity(n * cfg.t_f * 2);
    for a in 0..n {
        let x = scene.obs.data()[(a * t_p + t_p - 1) * 2];
        let y = scene.obs.data()[(a * t_p + t_p - 1) * 2 + 1];
        for _ in 0..cfg.t_f {
            anchor.push(x);
            anchor.push(y);
        }
    }
    let anchor = tape.leaf(Tensor::<F>::from_f64(vec![n, cfg.t_f * 2], &anchor)?);
    let preds = offsets
        .into_iter()
        .map(|head| tape.add(head, anchor))
        .collect::<Result<Vec<_>>>()?;

    let loss = match opts.loss {
        Some(reduction) => {
            let fut = scene.fut.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "scene {} is unlabeled; the loss needs future trajectories",
                    scene.scene_id
                ))
            })?;
            if fut.shape()[1] != cfg.t_f {
                return Err(Error::Config(format!(
                    "scene {} has t_f = {}, model expects {}",
                    scene.scene_id,
                    fut.shape()[1],
                    cfg.t_f
                )));
            }
            let gt = Tensor::<F>::from_f64(vec![n * cfg.t_f, 2], fut.data())?;
            let gt = tape.leaf(gt);
            Some(decoder::variety_loss(
                &mut tape, &preds, gt, n, cfg.t_f, reduction,
            )?)
        }
        None => None,
    };

    Ok(SceneForward {
        tape,
        n_agents: n,
        encoder: enc,
        trace,
        preds,
        loss,
    })
}

/// Collect the K decoded heads into a prediction set in meters.
pub fn predictions<F: Real>(fw: &SceneForward<F>, cfg: &ModelConfig) -> Result<PredictionSet> {
    let n = fw.n_agents;
    let mut data = Vec::with_capacity(cfg.k * n * cfg.t_f * 2);
    for &head in &fw.preds {
        data.extend(fw.tape.value(head).data().iter().map(|v| v.to_f64()));
    }
    PredictionSet::new(cfg.k, n, cfg.t_f, data)
}

/// Loss value and per-parameter gradients for one labeled scene.
pub fn scene_gradients<F: Real>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    scene: &Scene,
    reduction: LossReduction,
) -> Result<(f64, Vec<Tensor<F>>)> {
    let fw = forward_scene(store, cfg, scene, &ForwardOptions::training(cfg, reduction))?;
    let loss = fw.loss.expect("loss requested");
    let loss_value = fw.tape.value(loss).data()[0].to_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss diverged on scene {}",
            scene.scene_id
        )));
    }
    let grads = fw.tape.backprop(loss)?;
    Ok((loss_value, grads.param_grads(&fw.tape)))
}

/// Dataset-mean best-of-k metrics over labeled scenes.
pub fn evaluate<F: Real>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    scenes: &[Scene],
    k: usize,
    mode: MetricMode,
) -> Result<MetricReport> {
    if scenes.is_empty() {
        return Err(Error::Data("no scenes to evaluate".into()));
    }
    if k == 0 || k > cfg.k {
        return Err(Error::Config(format!(
            "cannot evaluate best-of-{k}: the decoder has {} heads",
            cfg.k
        )));
    }
    let mut reports = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let fut = scene.fut.as_ref().ok_or_else(|| {
            Error::Data(format!("scene {} is unlabeled", scene.scene_id))
        })?;
        let fw = forward_scene(store, cfg, scene, &ForwardOptions::inference(cfg))?;
        let preds = predictions(&fw, cfg)?.truncated(k)?;
        reports.push(metrics::min_ade_fde(&preds, fut, mode)?);
    }
    metrics::mean_report(&reports)
}

/// The estimated group incidence for one scene.
pub fn scene_groups<F: Real>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    scene: &Scene,
) -> Result<GroupIncidence> {
    let fw = forward_scene(store, cfg, scene, &ForwardOptions::inference(cfg))?;
    Ok(fw.encoder.groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthConfig;
    use crate::grouping::{estimate_groups, Threshold};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            t_p: 4,
            t_f: 3,
            ..ModelConfig::tiny()
        }
    }

    fn tiny_scene(seed: u64) -> Scene {
        let cfg = SynthConfig {
            num_scenes: 1,
            agents_per_scene: 4,
            groups_per_scene: 2,
            t_p: 4,
            t_f: 3,
            group_coherence: 0.7,
            noise_std: 0.1,
            seed,
            ..SynthConfig::default()
        };
        data::generate_synthetic(&cfg).unwrap().remove(0)
    }

    #[test]
    fn forward_runs_in_both_precisions() {
        let cfg = tiny_cfg();
        let scene = tiny_scene(1);
        let store64 = ParameterStore::<f64>::init(&cfg, 5).unwrap();
        let fw64 = forward_scene(
            &store64,
            &cfg,
            &scene,
            &ForwardOptions::training(&cfg, LossReduction::PerScene),
        )
        .unwrap();
        let store32 = ParameterStore::<f32>::init(&cfg, 5).unwrap();
        let fw32 = forward_scene(
            &store32,
            &cfg,
            &scene,
            &ForwardOptions::training(&cfg, LossReduction::PerScene),
        )
        .unwrap();
        let l64 = fw64.tape.value(fw64.loss.unwrap()).data()[0];
        let l32 = fw32.tape.value(fw32.loss.unwrap()).data()[0] as f64;
        assert!((l64 - l32).abs() < 1e-4 * l64.abs().max(1.0));
    }

    #[test]
    fn loss_requires_labeled_scene() {
        let cfg = tiny_cfg();
        let mut scene = tiny_scene(2);
        scene.fut = None;
        let store = ParameterStore::<f64>::init(&cfg, 5).unwrap();
        let r = forward_scene(
            &store,
            &cfg,
            &scene,
            &ForwardOptions::training(&cfg, LossReduction::PerScene),
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn horizon_mismatch_is_a_config_error() {
        let cfg = ModelConfig {
            t_p: 5,
            ..tiny_cfg()
        };
        let scene = tiny_scene(3);
        let store = ParameterStore::<f64>::init(&cfg, 5).unwrap();
        let r = forward_scene(&store, &cfg, &scene, &ForwardOptions::inference(&cfg));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn predictions_have_full_shape_and_groups_match_pure_estimate() {
        let cfg = tiny_cfg();
        let scene = tiny_scene(4);
        let store = ParameterStore::<f64>::init(&cfg, 6).unwrap();
        let fw = forward_scene(&store, &cfg, &scene, &ForwardOptions::inference(&cfg)).unwrap();
        let preds = predictions(&fw, &cfg).unwrap();
        assert_eq!(preds.k(), cfg.k);
        assert_eq!(preds.n_agents(), 4);
        assert_eq!(preds.t_f(), cfg.t_f);

        // In-process oracle: the forward's incidence equals the pure
        // estimator applied to the same initial embeddings.
        let n0 = fw.tape.value(fw.trace.n0);
        let raw = store.get("group_threshold").unwrap().data()[0];
        let pure = estimate_groups(n0, &Threshold { raw }).unwrap();
        assert_eq!(fw.encoder.groups, pure);
    }

    #[test]
    fn evaluate_rejects_oversized_k_and_empty_lists() {
        let cfg = tiny_cfg();
        let store = ParameterStore::<f64>::init(&cfg, 7).unwrap();
        let scenes = vec![tiny_scene(8)];
        assert!(matches!(
            evaluate(&store, &cfg, &scenes, cfg.k + 1, MetricMode::Joint),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            evaluate(&store, &cfg, &[], 1, MetricMode::Joint),
            Err(Error::Data(_))
        ));
        let r = evaluate(&store, &cfg, &scenes, cfg.k, MetricMode::Joint).unwrap();
        assert!(r.min_ade.is_finite() && r.min_fde.is_finite());
    }

    #[test]
    fn deterministic_predictions_for_identical_scenes() {
        let cfg = tiny_cfg();
        let scene = tiny_scene(9);
        let store = ParameterStore::<f32>::init(&cfg, 10).unwrap();
        let a = predictions(
            &forward_scene(&store, &cfg, &scene, &ForwardOptions::inference(&cfg)).unwrap(),
            &cfg,
        )
        .unwrap();
        let b = predictions(
            &forward_scene(&store, &cfg, &scene, &ForwardOptions::inference(&cfg)).unwrap(),
            &cfg,
        )
        .unwrap();
        assert_eq!(a, b);
    }
}

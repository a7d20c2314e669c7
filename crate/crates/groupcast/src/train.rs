//! Training loop, optimizer, and checkpointing.
//!
//! Runs are fully deterministic: shuffling is derived from (seed, epoch),
//! per-scene gradients are reduced in scene order regardless of how many
//! threads computed them, and checkpoints carry the optimizer state so a
//! resumed run continues bit-exactly.

use crate::config::TrainConfig;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::model;
use crate::numerics::Tensor;
use crate::params::{layout, ParameterStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

struct Adam {
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    fn new(store: &ParameterStore<f32>) -> Self {
        Adam {
            step: 0,
            m: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    fn apply(&mut self, store: &mut ParameterStore<f32>, grads: &[Tensor<f32>], lr: f32) {
        self.step += 1;
        let bias1 = 1.0 - BETA1.powi(self.step as i32);
        let bias2 = 1.0 - BETA2.powi(self.step as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let params = store.tensor_mut(idx).data_mut();
            for ((p, &g), (m_i, v_i)) in params
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m_i = BETA1 * *m_i + (1.0 - BETA1) * g;
                *v_i = BETA2 * *v_i + (1.0 - BETA2) * g * g;
                let m_hat = *m_i / bias1;
                let v_hat = *v_i / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Serialized training state: a one-line JSON manifest (format version,
/// config, ordered parameter names and shapes) followed by the raw
/// single-precision little-endian payload, parameters first and optimizer
/// slots after when present.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Flat parameter values in manifest order.
    pub params: Vec<f32>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub next_epoch: usize,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    params: Vec<(String, Vec<usize>)>,
    optimizer: Option<ManifestOptimizer>,
}

#[derive(Serialize, Deserialize)]
struct ManifestOptimizer {
    step: u64,
    next_epoch: usize,
}

const FORMAT_VERSION: u32 = 1;

fn write_f32s(out: &mut impl Write, values: &[f32]) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl Checkpoint {
    pub fn from_store(
        config: &TrainConfig,
        store: &ParameterStore<f32>,
        optimizer: Option<OptimizerState>,
    ) -> Self {
        Checkpoint {
            config: config.clone(),
            params: store
                .tensors()
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .collect(),
            optimizer,
        }
    }

    /// Rebuild the parameter store. Values are restored bit-exactly.
    pub fn to_store(&self) -> Result<ParameterStore<f32>> {
        let mut store = ParameterStore::<f32>::init(&self.config.model, 0)?;
        if self.params.len() != store.total_elements() {
            return Err(Error::Version(format!(
                "checkpoint holds {} parameter values, model layout needs {}",
                self.params.len(),
                store.total_elements()
            )));
        }
        let mut offset = 0;
        for idx in 0..store.len() {
            let t = store.tensor_mut(idx);
            let n = t.numel();
            t.data_mut().copy_from_slice(&self.params[offset..offset + n]);
            offset += n;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            params: layout(&self.config.model)
                .into_iter()
                .map(|s| (s.name, s.shape))
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| ManifestOptimizer {
                step: o.step,
                next_epoch: o.next_epoch,
            }),
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut out, &manifest)?;
        out.write_all(b"\n")?;
        write_f32s(&mut out, &self.params)?;
        if let Some(o) = &self.optimizer {
            write_f32s(&mut out, &o.m)?;
            write_f32s(&mut out, &o.v)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut first_line = String::new();
        reader.read_line(&mut first_line)?;
        let manifest: Manifest = serde_json::from_str(first_line.trim_end()).map_err(|e| {
            Error::Version(format!("unreadable checkpoint manifest: {e}"))
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let expected: usize = manifest.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        let sections = if manifest.optimizer.is_some() { 3 } else { 1 };
        if payload.len() != 4 * expected * sections {
            return Err(Error::Version(format!(
                "checkpoint payload is {} bytes, manifest implies {}",
                payload.len(),
                4 * expected * sections
            )));
        }
        let values = read_f32s(&payload);
        let params = values[..expected].to_vec();
        let optimizer = manifest.optimizer.map(|o| OptimizerState {
            step: o.step,
            next_epoch: o.next_epoch,
            m: values[expected..2 * expected].to_vec(),
            v: values[2 * expected..].to_vec(),
        });
        Ok(Checkpoint {
            config: manifest.config,
            params,
            optimizer,
        })
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Train on labeled scenes, optionally resuming. Emits one log entry per
/// epoch through `on_epoch` as it completes.
pub fn train(
    cfg: &TrainConfig,
    scenes: &[Scene],
    resume: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    for scene in scenes {
        scene.validate()?;
        if scene.fut.is_none() {
            return Err(Error::Data(format!(
                "scene {} is unlabeled; training needs future trajectories",
                scene.scene_id
            )));
        }
    }

    let (mut store, mut adam, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.config.model != cfg.model {
                return Err(Error::Version(
                    "checkpoint model configuration differs from the requested one".into(),
                ));
            }
            let store = ckpt.to_store()?;
            let mut adam = Adam::new(&store);
            let start = match &ckpt.optimizer {
                Some(o) => {
                    adam.step = o.step;
                    let mut offset = 0;
                    for idx in 0..adam.m.len() {
                        let n = adam.m[idx].len();
                        adam.m[idx].copy_from_slice(&o.m[offset..offset + n]);
                        adam.v[idx].copy_from_slice(&o.v[offset..offset + n]);
                        offset += n;
                    }
                    o.next_epoch
                }
                None => 0,
            };
            (store, adam, start)
        }
        None => {
            let store = ParameterStore::<f32>::init(&cfg.model, cfg.seed)?;
            let adam = Adam::new(&store);
            (store, adam, 0)
        }
    };

    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15),
        );
        order.shuffle(&mut rng);

        let lr = cfg.lr_at_epoch(epoch) as f32;
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            // Scenes evaluate concurrently over a parameter snapshot; the
            // reduction below runs in scene order, so thread count never
            // changes the result.
            let results: Vec<(f64, Vec<Tensor<f32>>)> = batch
                .par_iter()
                .map(|&idx| model::scene_gradients(&store, &cfg.model, &scenes[idx], cfg.loss_reduction))
                .collect::<Result<Vec<_>>>()?;

            let mut mean_grads: Vec<Tensor<f32>> = store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect();
            let weight = 1.0f32 / batch.len() as f32;
            for (loss, grads) in &results {
                epoch_loss += loss;
                for (acc, g) in mean_grads.iter_mut().zip(grads) {
                    for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += x * weight;
                    }
                }
            }
            adam.apply(&mut store, &mean_grads, lr);
        }

        let entry = EpochLog {
            epoch,
            loss: epoch_loss / scenes.len() as f64,
            lr: lr as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }

    let optimizer = OptimizerState {
        step: adam.step,
        next_epoch: cfg.epochs,
        m: adam.m.iter().flatten().copied().collect(),
        v: adam.v.iter().flatten().copied().collect(),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_store(cfg, &store, Some(optimizer)),
        log,
    })
}

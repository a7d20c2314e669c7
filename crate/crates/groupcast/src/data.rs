//! Scene data: synthetic group-structured generation, the JSON-lines scene
//! file format, sliding-window extraction from frame/agent/x/y text files,
//! and conversion from raw positions to model inputs.
//!
//! Batches never pad: a batch is a list of scenes, each keeping its native
//! agent count.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One prediction instance: N agents' observed (and, when labeled, future)
/// 2-D positions in meters, stored as absolute coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    /// [N, t_p, 2]
    pub obs: Tensor<f64>,
    /// [N, t_f, 2]; present iff the scene is labeled.
    pub fut: Option<Tensor<f64>>,
    /// Planted co-membership: entry (i, j) = 1 iff agents i and j share a
    /// group. Synthetic scenes only.
    pub group_truth: Option<Vec<Vec<u8>>>,
}

impl Scene {
    pub fn n_agents(&self) -> usize {
        self.obs.shape()[0]
    }

    pub fn t_p(&self) -> usize {
        self.obs.shape()[1]
    }

    pub fn t_f(&self) -> Option<usize> {
        self.fut.as_ref().map(|f| f.shape()[1])
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.obs.shape();
        if shape.len() != 3 || shape[2] != 2 {
            return Err(Error::Data(format!(
                "scene {}: observations must be [N, t_p, 2], got {:?}",
                self.scene_id, shape
            )));
        }
        if shape[0] < 1 {
            return Err(Error::Data(format!("scene {}: no agents", self.scene_id)));
        }
        if shape[1] < 2 {
            return Err(Error::Data(format!(
                "scene {}: need at least 2 observed steps, got {}",
                self.scene_id, shape[1]
            )));
        }
        if !self.obs.all_finite() {
            return Err(Error::Data(format!(
                "scene {}: non-finite observation",
                self.scene_id
            )));
        }
        if let Some(fut) = &self.fut {
            let fs = fut.shape();
            if fs.len() != 3 || fs[2] != 2 || fs[0] != shape[0] {
                return Err(Error::Data(format!(
                    "scene {}: future must be [N, t_f, 2] with matching N, got {:?}",
                    self.scene_id, fs
                )));
            }
            if !fut.all_finite() {
                return Err(Error::Data(format!(
                    "scene {}: non-finite future position",
                    self.scene_id
                )));
            }
        }
        if let Some(gt) = &self.group_truth {
            let n = shape[0];
            if gt.len() != n || gt.iter().any(|row| row.len() != n) {
                return Err(Error::Data(format!(
                    "scene {}: group truth must be {n} x {n}",
                    self.scene_id
                )));
            }
        }
        Ok(())
    }
}

/// Synthetic generator settings. `group_coherence` is the fraction of an
/// agent's velocity shared with its group; `overlap_prob` is the chance an
/// agent is sampled into a second group, making memberships overlap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_scenes: usize,
    pub agents_per_scene: usize,
    pub groups_per_scene: usize,
    pub t_p: usize,
    pub t_f: usize,
    pub group_coherence: f64,
    /// Standard deviation of per-step Gaussian position noise, meters.
    pub noise_std: f64,
    pub overlap_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_scenes: 500,
            agents_per_scene: 8,
            groups_per_scene: 2,
            t_p: 10,
            t_f: 20,
            group_coherence: 0.9,
            noise_std: 0.05,
            overlap_prob: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 || self.agents_per_scene == 0 || self.groups_per_scene == 0 {
            return Err(Error::Config("scene, agent and group counts must be positive".into()));
        }
        if self.groups_per_scene > self.agents_per_scene {
            return Err(Error::Config(format!(
                "groups_per_scene {} exceeds agents_per_scene {}",
                self.groups_per_scene, self.agents_per_scene
            )));
        }
        if self.t_p < 2 {
            return Err(Error::Config(format!("t_p must be at least 2, got {}", self.t_p)));
        }
        if self.t_f == 0 {
            return Err(Error::Config("t_f must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.group_coherence) {
            return Err(Error::Config(format!(
                "group_coherence must be in [0, 1], got {}",
                self.group_coherence
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::Config(format!(
                "overlap_prob must be in [0, 1], got {}",
                self.overlap_prob
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config(format!(
                "noise_std must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Scenes of agents moving with a coherence-weighted blend of their group's
/// velocity and a private one, plus Gaussian position noise. Deterministic
/// under the seed.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("invalid noise distribution: {e}")))?;
    let n = cfg.agents_per_scene;
    let steps = cfg.t_p + cfg.t_f;
    let mut scenes = Vec::with_capacity(cfg.num_scenes);

    for scene_idx in 0..cfg.num_scenes {
        // One base velocity per group, well separated in direction.
        let group_velocity: Vec<[f64; 2]> = (0..cfg.groups_per_scene)
            .map(|_| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let speed = rng.gen_range(0.5..1.0);
                [speed * angle.cos(), speed * angle.sin()]
            })
            .collect();

        // Membership: one primary group each, optionally one more.
        let mut memberships: Vec<Vec<usize>> = Vec::with_capacity(n);
        for _ in 0..n {
            let primary = rng.gen_range(0..cfg.groups_per_scene);
            let mut groups = vec![primary];
            if cfg.groups_per_scene > 1 && rng.gen_range(0.0..1.0) < cfg.overlap_prob {
                let mut second = rng.gen_range(0..cfg.groups_per_scene - 1);
                if second >= primary {
                    second += 1;
                }
                groups.push(second);
            }
            memberships.push(groups);
        }

        let mut positions = vec![0.0f64; n * steps * 2];
        for a in 0..n {
            let shared = {
                let gs = &memberships[a];
                let mut v = [0.0f64; 2];
                for &g in gs {
                    v[0] += group_velocity[g][0];
                    v[1] += group_velocity[g][1];
                }
                [v[0] / gs.len() as f64, v[1] / gs.len() as f64]
            };
            let private_angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let private_speed = rng.gen_range(0.5..1.0);
            let private = [
                private_speed * private_angle.cos(),
                private_speed * private_angle.sin(),
            ];
            let c = cfg.group_coherence;
            let velocity = [
                c * shared[0] + (1.0 - c) * private[0],
                c * shared[1] + (1.0 - c) * private[1],
            ];
            let mut pos = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            for t in 0..steps {
                if t > 0 {
                    pos[0] += velocity[0];
                    pos[1] += velocity[1];
                    if cfg.noise_std > 0.0 {
                        pos[0] += noise.sample(&mut rng);
                        pos[1] += noise.sample(&mut rng);
                    } else {
                        // Keep the rng stream aligned across noise settings.
                        let _ = noise.sample(&mut rng);
                        let _ = noise.sample(&mut rng);
                    }
                }
                positions[(a * steps + t) * 2] = pos[0];
                positions[(a * steps + t) * 2 + 1] = pos[1];
            }
        }

        let mut obs = Vec::with_capacity(n * cfg.t_p * 2);
        let mut fut = Vec::with_capacity(n * cfg.t_f * 2);
        for a in 0..n {
            for t in 0..steps {
                let x = positions[(a * steps + t) * 2];
                let y = positions[(a * steps + t) * 2 + 1];
                if t < cfg.t_p {
                    obs.extend_from_slice(&[x, y]);
                } else {
                    fut.extend_from_slice(&[x, y]);
                }
            }
        }

        let truth: Vec<Vec<u8>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let share = memberships[i].iter().any(|g| memberships[j].contains(g));
                        u8::from(share || i == j)
                    })
                    .collect()
            })
            .collect();

        scenes.push(Scene {
            scene_id: format!("synth-{}-{scene_idx}", cfg.seed),
            obs: Tensor::new(vec![n, cfg.t_p, 2], obs)?,
            fut: Some(Tensor::new(vec![n, cfg.t_f, 2], fut)?),
            group_truth: Some(truth),
        });
    }
    Ok(scenes)
}

#[derive(Serialize, Deserialize)]
struct AgentRecord {
    id: usize,
    obs: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fut: Option<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: String,
    agents: Vec<AgentRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    group_truth: Option<Vec<Vec<u8>>>,
}

impl SceneRecord {
    fn from_scene(scene: &Scene) -> Self {
        let n = scene.n_agents();
        let t_p = scene.t_p();
        let agents = (0..n)
            .map(|a| AgentRecord {
                id: a,
                obs: (0..t_p)
                    .map(|t| {
                        let base = (a * t_p + t) * 2;
                        [scene.obs.data()[base], scene.obs.data()[base + 1]]
                    })
                    .collect(),
                fut: scene.fut.as_ref().map(|f| {
                    let t_f = f.shape()[1];
                    (0..t_f)
                        .map(|t| {
                            let base = (a * t_f + t) * 2;
                            [f.data()[base], f.data()[base + 1]]
                        })
                        .collect()
                }),
            })
            .collect();
        SceneRecord {
            scene_id: scene.scene_id.clone(),
            agents,
            group_truth: scene.group_truth.clone(),
        }
    }

    fn into_scene(self) -> Result<Scene> {
        if self.agents.is_empty() {
            return Err(Error::Data(format!("scene {}: no agents", self.scene_id)));
        }
        let n = self.agents.len();
        let t_p = self.agents[0].obs.len();
        let t_f = self.agents[0].fut.as_ref().map(|f| f.len());
        let mut obs = Vec::with_capacity(n * t_p * 2);
        let mut fut = t_f.map(|t| Vec::with_capacity(n * t * 2));
        for agent in &self.agents {
            if agent.obs.len() != t_p {
                return Err(Error::Data(format!(
                    "scene {}: agent {} has {} observed steps, expected {t_p}",
                    self.scene_id,
                    agent.id,
                    agent.obs.len()
                )));
            }
            if agent.fut.as_ref().map(|f| f.len()) != t_f {
                return Err(Error::Data(format!(
                    "scene {}: agent {} future length differs from the record's",
                    self.scene_id, agent.id
                )));
            }
            for p in &agent.obs {
                obs.extend_from_slice(p);
            }
            if let (Some(fut), Some(steps)) = (fut.as_mut(), agent.fut.as_ref()) {
                for p in steps {
                    fut.extend_from_slice(p);
                }
            }
        }
        let scene = Scene {
            scene_id: self.scene_id,
            obs: Tensor::new(vec![n, t_p, 2], obs)?,
            fut: match (fut, t_f) {
                (Some(data), Some(t)) => Some(Tensor::new(vec![n, t, 2], data)?),
                _ => None,
            },
            group_truth: self.group_truth,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// One scene per line as a JSON object.
pub fn save_scenes(scenes: &[Scene], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for scene in scenes {
        serde_json::to_writer(&mut out, &SceneRecord::from_scene(scene))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut scenes = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        scenes.push(record.into_scene().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(scenes)
}

/// Sliding windows over a whitespace-delimited `frame agent_id x y` file.
///
/// Windows span `t_p + t_f` consecutive annotated frames (consecutive in
/// the file's sorted frame list, whatever its cadence). An agent joins a
/// window only if present at all of its frames; windows with no complete
/// agent are dropped.
pub fn window_tsv(path: &Path, t_p: usize, t_f: usize, stride: usize) -> Result<Vec<Scene>> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let reader = BufReader::new(std::fs::File::open(path)?);
    // (frame, agent) -> position
    let mut rows: Vec<(i64, i64, f64, f64)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 4 whitespace-separated fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("non-numeric {what}: {s}"),
            })
        };
        let frame = parse_f(fields[0], "frame")? as i64;
        let agent = parse_f(fields[1], "agent id")? as i64;
        let x = parse_f(fields[2], "x")?;
        let y = parse_f(fields[3], "y")?;
        rows.push((frame, agent, x, y));
    }

    let mut frames: Vec<i64> = rows.iter().map(|r| r.0).collect();
    frames.sort_unstable();
    frames.dedup();

    let window = t_p + t_f;
    if frames.len() < window {
        return Ok(Vec::new());
    }

    use std::collections::HashMap;
    let mut lookup: HashMap<(i64, i64), (f64, f64)> = HashMap::with_capacity(rows.len());
    let mut agents: Vec<i64> = Vec::new();
    for (frame, agent, x, y) in rows {
        lookup.insert((frame, agent), (x, y));
        if !agents.contains(&agent) {
            agents.push(agent);
        }
    }
    agents.sort_unstable();

    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "windows".into());

    let mut scenes = Vec::new();
    let mut start = 0usize;
    while start + window <= frames.len() {
        let span = &frames[start..start + window];
        let complete: Vec<i64> = agents
            .iter()
            .copied()
            .filter(|a| span.iter().all(|f| lookup.contains_key(&(*f, *a))))
            .collect();
        if !complete.is_empty() {
            let n = complete.len();
            let mut obs = Vec::with_capacity(n * t_p * 2);
            let mut fut = Vec::with_capacity(n * t_f * 2);
            for &a in &complete {
                for (idx, &f) in span.iter().enumerate() {
                    let (x, y) = lookup[&(f, a)];
                    if idx < t_p {
                        obs.extend_from_slice(&[x, y]);
                    } else {
                        fut.extend_from_slice(&[x, y]);
                    }
                }
            }
            scenes.push(Scene {
                scene_id: format!("{stem}:{}", span[0]),
                obs: Tensor::new(vec![n, t_p, 2], obs)?,
                fut: Some(Tensor::new(vec![n, t_f, 2], fut)?),
                group_truth: None,
            });
        }
        start += stride;
    }
    Ok(scenes)
}

/// Per-step displacements with a zero leading row: [N, t_p, 2] positions to
/// [N, t_p, 2] displacements.
pub fn displacements(obs: &Tensor<f64>) -> Tensor<f64> {
    let n = obs.shape()[0];
    let t_p = obs.shape()[1];
    let d = obs.data();
    let mut out = vec![0.0f64; n * t_p * 2];
    for a in 0..n {
        for t in 1..t_p {
            for c in 0..2 {
                out[(a * t_p + t) * 2 + c] =
                    d[(a * t_p + t) * 2 + c] - d[(a * t_p + t - 1) * 2 + c];
            }
        }
    }
    Tensor::new(vec![n, t_p, 2], out).expect("displacement shape")
}

/// Inverse of [`displacements`] given the starting positions.
pub fn cumulative_positions(start: &[(f64, f64)], disp: &Tensor<f64>) -> Tensor<f64> {
    let n = disp.shape()[0];
    let t_p = disp.shape()[1];
    let d = disp.data();
    let mut out = vec![0.0f64; n * t_p * 2];
    for a in 0..n {
        let (mut x, mut y) = start[a];
        out[(a * t_p) * 2] = x;
        out[(a * t_p) * 2 + 1] = y;
        for t in 1..t_p {
            x += d[(a * t_p + t) * 2];
            y += d[(a * t_p + t) * 2 + 1];
            out[(a * t_p + t) * 2] = x;
            out[(a * t_p + t) * 2 + 1] = y;
        }
    }
    Tensor::new(vec![n, t_p, 2], out).expect("position shape")
}

/// Model inputs from raw observations: displacements only (d_in = 2) or
/// absolute positions concatenated with displacements (d_in = 4). The
/// result is the stacked [N * t_p, d_in] matrix the embedding consumes.
pub fn model_inputs(scene: &Scene, d_in: usize) -> Result<Tensor<f64>> {
    let n = scene.n_agents();
    let t_p = scene.t_p();
    let disp = displacements(&scene.obs);
    let mut out = Vec::with_capacity(n * t_p * d_in);
    match d_in {
        2 => {
            out.extend_from_slice(disp.data());
        }
        4 => {
            for a in 0..n {
                for t in 0..t_p {
                    let base = (a * t_p + t) * 2;
                    out.extend_from_slice(&[
                        scene.obs.data()[base],
                        scene.obs.data()[base + 1],
                        disp.data()[base],
                        disp.data()[base + 1],
                    ]);
                }
            }
        }
        other => {
            return Err(Error::Config(format!(
                "d_in must be 2 or 4, got {other}"
            )));
        }
    }
    Tensor::new(vec![n * t_p, d_in], out)
}

/// Relabel agents: new index i holds old agent `perm[i]`.
pub fn permute_scene(scene: &Scene, perm: &[usize]) -> Scene {
    let n = scene.n_agents();
    assert_eq!(perm.len(), n);
    let t_p = scene.t_p();
    let mut obs = vec![0.0; n * t_p * 2];
    for (new_i, &old_i) in perm.iter().enumerate() {
        obs[new_i * t_p * 2..(new_i + 1) * t_p * 2]
            .copy_from_slice(&scene.obs.data()[old_i * t_p * 2..(old_i + 1) * t_p * 2]);
    }
    let fut = scene.fut.as_ref().map(|f| {
        let t_f = f.shape()[1];
        let mut data = vec![0.0; n * t_f * 2];
        for (new_i, &old_i) in perm.iter().enumerate() {
            data[new_i * t_f * 2..(new_i + 1) * t_f * 2]
                .copy_from_slice(&f.data()[old_i * t_f * 2..(old_i + 1) * t_f * 2]);
        }
        Tensor::new(vec![n, t_f, 2], data).expect("future shape")
    });
    let group_truth = scene.group_truth.as_ref().map(|gt| {
        (0..n)
            .map(|i| (0..n).map(|j| gt[perm[i]][perm[j]]).collect())
            .collect()
    });
    Scene {
        scene_id: format!("{}-perm", scene.scene_id),
        obs: Tensor::new(vec![n, t_p, 2], obs).expect("obs shape"),
        fut,
        group_truth,
    }
}

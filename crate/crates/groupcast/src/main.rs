//! File-based command line around the library: synthetic data generation,
//! training, evaluation, prediction and group dumps, gradient checking, and
//! parameter/MAC counting. Logs are one JSON object per line on stdout;
//! errors go to stderr with a nonzero exit code.

use clap::{Args, Parser, Subcommand};
use groupcast::config::{MetricMode, TrainConfig};
use groupcast::counting::{count_macs, count_params};
use groupcast::data::{generate_synthetic, load_scenes, save_scenes, SynthConfig};
use groupcast::gradcheck::{self, GradcheckConfig};
use groupcast::model::{forward_scene, predictions, scene_groups, ForwardOptions};
use groupcast::train::{train, Checkpoint};
use groupcast::{Error, Result};
use serde_json::json;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "groupcast",
    version,
    about = "Multi-agent trajectory prediction with relational attention over estimated groups"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Model and training keys. Every key of the flat `key = value` config file
/// has a flag of the same name that overrides it.
#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    d_n: Option<usize>,
    #[arg(long)]
    d_e: Option<usize>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    d_d: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    t_p: Option<usize>,
    #[arg(long)]
    t_f: Option<usize>,
    /// head_dim or model_dim.
    #[arg(long)]
    attn_scale: Option<String>,
    /// clipped_passthrough, triangle or long_tailed.
    #[arg(long)]
    ste_variant: Option<String>,
    /// per_scene or per_point.
    #[arg(long)]
    loss_reduction: Option<String>,
    /// joint or marginal.
    #[arg(long)]
    metric_mode: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.merge_file(path)?;
        }
        let mut overrides: Vec<(&str, String)> = Vec::new();
        macro_rules! push {
            ($key:literal, $field:expr) => {
                if let Some(v) = &$field {
                    overrides.push(($key, v.to_string()));
                }
            };
        }
        push!("lr", self.lr);
        push!("batch_size", self.batch_size);
        push!("epochs", self.epochs);
        push!("lr_decay_factor", self.lr_decay_factor);
        push!("lr_decay_every", self.lr_decay_every);
        push!("seed", self.seed);
        push!("d_in", self.d_in);
        push!("d_n", self.d_n);
        push!("d_e", self.d_e);
        push!("d_h", self.d_h);
        push!("d_d", self.d_d);
        push!("layers", self.layers);
        push!("heads", self.heads);
        push!("k", self.k);
        push!("t_p", self.t_p);
        push!("t_f", self.t_f);
        push!("attn_scale", self.attn_scale);
        push!("ste_variant", self.ste_variant);
        push!("loss_reduction", self.loss_reduction);
        push!("metric_mode", self.metric_mode);
        for (key, value) in overrides {
            cfg.apply_key(key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic group-structured scenes as a JSON-lines file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        num_scenes: usize,
        #[arg(long, default_value_t = 8)]
        agents: usize,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, default_value_t = 10)]
        t_p: usize,
        #[arg(long, default_value_t = 20)]
        t_f: usize,
        #[arg(long, default_value_t = 0.9)]
        coherence: f64,
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        #[arg(long, default_value_t = 0.0)]
        overlap_prob: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train on labeled scenes; one JSON log line per epoch.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume bit-exactly from an earlier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report dataset-mean best-of-k metrics for a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the checkpoint's head count.
        #[arg(long)]
        k: Option<usize>,
        /// joint or marginal; defaults to the checkpoint's setting.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Dump all candidate trajectories per scene as JSON lines.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the estimated group incidence matrix per scene as JSON lines.
    Groups {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reverse-mode gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 4)]
        agents: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Total learnable parameters for a configuration.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Forward-pass multiply-accumulates for a configuration.
    CountMacs {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 10)]
        agents: usize,
    },
}

fn emit(value: serde_json::Value) {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer(&mut stdout, &value).expect("stdout");
    stdout.write_all(b"\n").expect("stdout");
}

fn run() -> Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            out,
            num_scenes,
            agents,
            groups,
            t_p,
            t_f,
            coherence,
            noise_std,
            overlap_prob,
            seed,
        } => {
            let scenes = generate_synthetic(&SynthConfig {
                num_scenes,
                agents_per_scene: agents,
                groups_per_scene: groups,
                t_p,
                t_f,
                group_coherence: coherence,
                noise_std,
                overlap_prob,
                seed,
            })?;
            save_scenes(&scenes, &out)?;
            emit(json!({"event": "synth", "scenes": scenes.len(), "path": out}));
        }

        Command::Train {
            cfg,
            data,
            out,
            resume,
        } => {
            let cfg = cfg.build()?;
            let scenes = load_scenes(&data)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = train(&cfg, &scenes, resume.as_ref(), |entry| {
                emit(json!({"epoch": entry.epoch, "loss": entry.loss, "lr": entry.lr}));
            })?;
            outcome.checkpoint.save(&out)?;
            emit(json!({"event": "checkpoint", "path": out, "epochs": cfg.epochs}));
        }

        Command::Eval { ckpt, data, k, mode } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let store = ckpt.to_store()?;
            let scenes = load_scenes(&data)?;
            let k = k.unwrap_or(ckpt.config.model.k);
            let mode = match mode {
                Some(m) => m.parse::<MetricMode>()?,
                None => ckpt.config.metric_mode,
            };
            let report = groupcast::model::evaluate(&store, &ckpt.config.model, &scenes, k, mode)?;
            emit(serde_json::to_value(&report)?);
        }

        Command::Predict { ckpt, data, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let store = ckpt.to_store()?;
            let cfg = &ckpt.config.model;
            let scenes = load_scenes(&data)?;
            let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
            for scene in &scenes {
                let fw = forward_scene(&store, cfg, scene, &ForwardOptions::inference(cfg))?;
                let preds = predictions(&fw, cfg)?;
                let nested: Vec<Vec<Vec<[f64; 2]>>> = (0..preds.k())
                    .map(|kk| {
                        (0..preds.n_agents())
                            .map(|a| {
                                (0..preds.t_f())
                                    .map(|t| [preds.at(kk, a, t, 0), preds.at(kk, a, t, 1)])
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                serde_json::to_writer(
                    &mut file,
                    &json!({"scene_id": scene.scene_id, "preds": nested}),
                )?;
                file.write_all(b"\n")?;
            }
            file.flush()?;
            emit(json!({"event": "predict", "scenes": scenes.len(), "path": out}));
        }

        Command::Groups { ckpt, data, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let store = ckpt.to_store()?;
            let cfg = &ckpt.config.model;
            let scenes = load_scenes(&data)?;
            let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
            for scene in &scenes {
                let incidence = scene_groups(&store, cfg, scene)?;
                serde_json::to_writer(
                    &mut file,
                    &json!({"scene_id": scene.scene_id, "groups": incidence.rows()}),
                )?;
                file.write_all(b"\n")?;
            }
            file.flush()?;
            emit(json!({"event": "groups", "scenes": scenes.len(), "path": out}));
        }

        Command::Gradcheck {
            cfg,
            agents,
            eps,
            tol,
        } => {
            let train_cfg = {
                let mut args = cfg;
                // Default the model to the documented tiny configuration
                // when no explicit dims arrive.
                if args.config.is_none() {
                    let tiny = groupcast::config::ModelConfig::tiny();
                    args.d_n.get_or_insert(tiny.d_n);
                    args.d_e.get_or_insert(tiny.d_e);
                    args.d_h.get_or_insert(tiny.d_h);
                    args.d_d.get_or_insert(tiny.d_d);
                    args.layers.get_or_insert(tiny.layers);
                    args.heads.get_or_insert(tiny.heads);
                    args.k.get_or_insert(tiny.k);
                    args.t_p.get_or_insert(tiny.t_p);
                    args.t_f.get_or_insert(tiny.t_f);
                }
                args.build()?
            };
            let report = gradcheck::run(&GradcheckConfig {
                model: train_cfg.model,
                n_agents: agents,
                seed: train_cfg.seed,
                eps,
                tol,
                corrupt: None,
            })?;
            emit(serde_json::to_value(&report)?);
            if !report.pass {
                eprintln!(
                    "gradient check failed: {} at relative error {}",
                    report.worst, report.max_rel_err
                );
                return Ok(1);
            }
        }

        Command::CountParams { cfg } => {
            let cfg = cfg.build()?;
            emit(json!({"params": count_params(&cfg.model)}));
        }

        Command::CountMacs { cfg, agents } => {
            let cfg = cfg.build()?;
            let breakdown = count_macs(&cfg.model, agents);
            emit(json!({"macs": breakdown.total, "agents": agents, "breakdown": breakdown}));
        }
    }
    Ok(0)
}

fn main() {
    match run() {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Parse { .. } => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use clap::Args;
use creative_core::backends::BackendSet;
use creative_core::can::{
    can_grid, stripe_batch, train_can as run_can, train_style_head, CanArch, CanGridEntry, CanTrainConfig,
    Discriminator, DiscriminatorSpec,
};
use creative_core::classifiers::{
    read_label_set, write_label_set, ClassifierContext, ClassifierKind, ClassifierRegistry, ClusterModel,
    LinearStyleHead, StyleClassifier, StyleHead,
};
use creative_core::config::RunConfig;
use creative_core::data::{load_dataset, DatasetName};
use creative_core::ddpo::toy::{pretrained_toy_policy, toy_image, ToyDenoiserConfig, TOY_HEAD_SHARPNESS, TOY_STYLE_LABELS};
use creative_core::ddpo::{DdpoTrainer, TrainablePolicy};
use creative_core::diffusion::{codec_from_name, prompt_context, LatentCodec, NoiseSchedule};
use creative_core::reward::{append_jsonl, RewardLogEntry, RewardStack};
use creative_core::rng::{derive_seed, seeded};
use creative_core::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::ctx::{default_labels, find_weights, write_json, Ctx};

pub const DISC_SPEC_FILE: &str = "discriminator.json";
pub const ARCH_FILE: &str = "arch.json";

fn label_strings(labels: &[&str]) -> Vec<String> {
    labels.iter().map(|s| s.to_string()).collect()
}

/// The DDPO toy policy's configuration, with adapter shape taken from the trainer section.
pub fn toy_policy_config(cfg: &RunConfig) -> ToyDenoiserConfig {
    ToyDenoiserConfig {
        rank: cfg.ddpo.adapter_rank,
        alpha: cfg.ddpo.adapter_alpha,
        ..cfg.policy.toy
    }
}

fn require_toy_policy(ctx: &Ctx) -> Result<()> {
    match ctx.cfg.policy.kind.as_str() {
        "toy" => Ok(()),
        k if k.starts_with("external") => Err(Error::BackendUnavailable(format!(
            "policy `{k}`: no pretrained diffusion runtime is linked into this build"
        ))),
        k => Err(Error::Config(format!("unknown policy kind `{k}`"))),
    }
}

fn eval_accuracy(disc: &Discriminator, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred: Vec<u32> = disc.forward(images, false)?.style.argmax(1)?.to_vec1()?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| **p as usize == **l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

#[derive(Args, Debug)]
pub struct DiscArgs {
    /// Train on the two-class left/right toy images at the toy policy's resolution.
    #[arg(long)]
    toy: bool,
    /// Labeled image root (ignored with --toy).
    #[arg(long)]
    root: Option<PathBuf>,
    /// Dataset name (defaults to `classifier.dataset`).
    #[arg(long)]
    dataset: Option<DatasetName>,
    /// Number of generated toy images.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Passes over the data (defaults to `can.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
}

pub fn train_disc(ctx: &Ctx, a: DiscArgs) -> Result<()> {
    let dev = Device::Cpu;
    let mut cfg = ctx.cfg.can.clone();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let (name, spec, labels, images, targets) = if a.toy {
        let side = ctx.cfg.policy.toy.side;
        let spec = DiscriminatorSpec {
            image_dim: side,
            in_channels: 1,
            first_width: 16,
            n_double: 1,
            n_const: 1,
            style_hidden: vec![32],
            n_styles: 2,
            dropout: 0.2,
        };
        let mut rng = seeded(derive_seed(ctx.cfg.seed, &[5]));
        let targets: Vec<usize> = (0..a.n).map(|i| i % 2).collect();
        let pixels: Vec<f32> = targets
            .iter()
            .flat_map(|&c| toy_image(c, side, &mut rng))
            .map(|v| v as f32)
            .collect();
        let images = Tensor::from_vec(pixels, (a.n, 1, side, side), &dev)?;
        ("toy".to_string(), spec, label_strings(&TOY_STYLE_LABELS), images, targets)
    } else {
        let dataset = a
            .dataset
            .or(ctx.cfg.classifier.dataset)
            .unwrap_or(ctx.cfg.data.dataset);
        let set = load_dataset(&ctx.dataset_root(a.root.as_deref())?, dataset)?;
        let spec = DiscriminatorSpec::published(cfg.image_dim, set.label_set.len())?;
        let (images, targets) = set.to_tensor(cfg.image_dim, &dev)?;
        (dataset.name().to_string(), spec, set.label_set.clone(), images, targets)
    };
    let (disc, losses) = train_style_head(spec.clone(), &cfg, &images, &targets)?;
    let accuracy = eval_accuracy(&disc, &images, &targets)?;
    let dir = ctx.prepare(&format!("disc-{name}"), "train-disc")?;
    disc.params()
        .save_safetensors(&dir.join(format!("discriminator-{}.safetensors", ctx.hash)))?;
    write_json(&dir.join(DISC_SPEC_FILE), &spec)?;
    write_label_set(&dir.join("labels.txt"), &labels)?;
    write_json(
        &dir.join("summary.json"),
        &json!({ "config_hash": ctx.hash, "epoch_loss": losses, "train_accuracy": accuracy }),
    )?;
    log::info!(
        "style head: loss {:.4} -> {:.4}, train accuracy {accuracy:.3}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Loads a `train-disc` output (directory or weights file) as a style head plus labels.
fn load_discriminator(path: &Path) -> Result<(Arc<dyn StyleHead>, Vec<String>)> {
    let (dir, weights) = if path.is_dir() {
        (path.to_path_buf(), find_weights(path, "discriminator-")?)
    } else {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        (dir, path.to_path_buf())
    };
    let spec: DiscriminatorSpec = serde_json::from_str(&std::fs::read_to_string(dir.join(DISC_SPEC_FILE))?)?;
    let disc = Discriminator::new(spec, 0, &Device::Cpu)?;
    disc.params().load_safetensors(&weights)?;
    let labels = read_label_set(&dir.join("labels.txt"))?;
    Ok((Arc::new(disc), labels))
}

fn build_classifier(ctx: &Ctx, backends: &BackendSet, side: usize) -> Result<Option<Arc<dyn StyleClassifier>>> {
    let c = &ctx.cfg.classifier;
    let kind = ctx.cfg.reward.classifier_kind;
    let dataset = c.dataset.unwrap_or(ctx.cfg.data.dataset);
    let mut cc = ClassifierContext::new(backends.clone());
    cc.temperature = c.temperature;
    cc.labels = Some(match &c.labels {
        Some(p) => read_label_set(&ctx.path(p))?,
        None => default_labels(dataset),
    });
    match kind {
        ClassifierKind::Kmeans => {
            let path = match &c.clusters {
                Some(p) => ctx.path(p),
                None => ctx
                    .out
                    .join(format!("clusters-{dataset}-k{}", ctx.cfg.data.k))
                    .join("clusters.json"),
            };
            cc.clusters = Some(ClusterModel::load(&path)?);
        }
        ClassifierKind::Discriminator => match &c.discriminator {
            Some(p) => {
                let (head, labels) = load_discriminator(&ctx.path(p))?;
                cc.style_head = Some(head);
                if c.labels.is_none() {
                    cc.labels = Some(labels);
                }
            }
            None => {
                log::info!("no classifier.discriminator given; using the fixed left/right toy head");
                cc.style_head = Some(Arc::new(LinearStyleHead::left_right(side, TOY_HEAD_SHARPNESS)));
                cc.labels = Some(label_strings(&TOY_STYLE_LABELS));
            }
        },
        ClassifierKind::ZeroShot | ClassifierKind::None => {}
    }
    ClassifierRegistry::with_defaults().build(kind.name(), &cc)
}

#[derive(Args, Debug)]
pub struct DdpoArgs {
    /// Number of epochs (defaults to `ddpo.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Run directory name under --out (defaults to `ddpo-<method>`).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Serialize)]
struct RewardRow<'a> {
    epoch: usize,
    #[serde(flatten)]
    entry: &'a RewardLogEntry,
}

pub fn train_ddpo(ctx: &Ctx, a: DdpoArgs) -> Result<()> {
    require_toy_policy(ctx)?;
    let cfg = &ctx.cfg;
    let backends = ctx.backends()?;
    let schedule = NoiseSchedule::default_linear();
    let tc = toy_policy_config(&ctx.cfg);
    let classifier = build_classifier(ctx, &backends, tc.side)?;
    let reward = RewardStack::new(cfg.reward.clone(), classifier, backends.similarity.clone())?;
    let codec: Arc<dyn LatentCodec> = codec_from_name(&cfg.policy.codec)?.into();
    let mut tcfg = cfg.ddpo.clone();
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    tcfg.validate()?;

    let p = &cfg.policy;
    let (policy, (head, tail)) =
        pretrained_toy_policy(tc, &schedule, p.pretrain_steps, p.pretrain_batch, p.pretrain_lr, cfg.seed)?;
    log::info!("base policy pretrained: denoising loss {head:.4} -> {tail:.4}");

    let name = a
        .name
        .unwrap_or_else(|| format!("ddpo-{}", cfg.method.as_deref().unwrap_or("custom")));
    let dir = ctx.prepare(&name, "train-ddpo")?;
    let cdim = tc.context_dim;
    let epochs = tcfg.epochs;
    let mut trainer = DdpoTrainer::new(
        &policy,
        tcfg,
        schedule,
        reward,
        codec,
        Box::new(move |s: &str| prompt_context(s, cdim)),
    )?;
    let mut epoch_log = BufWriter::new(File::create(dir.join("epochs.jsonl"))?);
    let mut reward_log = BufWriter::new(File::create(dir.join("rewards.jsonl"))?);
    let mut last = None;
    for _ in 0..epochs {
        let stats = trainer.train_epoch()?;
        append_jsonl(&mut epoch_log, std::slice::from_ref(&stats))?;
        let rows: Vec<RewardRow> = trainer
            .last_log()
            .iter()
            .map(|entry| RewardRow {
                epoch: stats.epoch,
                entry,
            })
            .collect();
        append_jsonl(&mut reward_log, &rows)?;
        log::info!(
            "epoch {}: reward {:.4} novelty {:.4} utility {:.4} clip {:.3}",
            stats.epoch,
            stats.mean_reward,
            stats.mean_novelty,
            stats.mean_utility,
            stats.clip_fraction
        );
        last = Some(stats);
    }
    drop((epoch_log, reward_log));
    trainer.save_checkpoint(&dir, &ctx.hash)?;
    policy
        .params()
        .save_safetensors(&dir.join(format!("policy-{}.safetensors", ctx.hash)))?;
    write_json(
        &dir.join("summary.json"),
        &json!({ "config_hash": ctx.hash, "pretrain_loss": [head, tail], "last_epoch": last }),
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct CanArgs {
    /// A cell of the ablation grid, e.g. `can-256-full-b128-gp`.
    #[arg(long, conflicts_with = "toy")]
    grid_entry: Option<String>,
    /// Train the 16x16 two-style stripe network instead of the published one.
    #[arg(long)]
    toy: bool,
    /// Labeled image root (ignored with --toy).
    #[arg(long)]
    root: Option<PathBuf>,
    /// Number of generated toy images.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Number of epochs (defaults to `can.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
}

pub fn train_can(ctx: &Ctx, a: CanArgs) -> Result<()> {
    let dev = Device::Cpu;
    let base = &ctx.cfg.can;
    let (name, arch, mut cfg, labels, images, targets): (String, CanArch, CanTrainConfig, Vec<String>, Tensor, Vec<usize>) =
        if a.toy {
            let arch = CanArch::toy();
            let cfg = CanTrainConfig {
                image_dim: arch.generator.image_dim,
                dataset: DatasetName::Toy,
                ..base.clone()
            };
            let mut rng = seeded(derive_seed(ctx.cfg.seed, &[6]));
            let (images, targets) = stripe_batch(a.n, cfg.image_dim, &mut rng, &dev)?;
            let labels = vec!["horizontal".to_string(), "vertical".to_string()];
            ("can-toy".into(), arch, cfg, labels, images, targets)
        } else {
            let entry = match &a.grid_entry {
                Some(n) => *can_grid().iter().find(|e| &e.name() == n).ok_or_else(|| {
                    let names: Vec<String> = can_grid().iter().map(CanGridEntry::name).collect();
                    Error::Config(format!("unknown grid entry `{n}`; expected one of {}", names.join(", ")))
                })?,
                None => CanGridEntry {
                    image_dim: base.image_dim,
                    dataset: base.dataset,
                    batch: base.batch,
                    gradient_penalty: base.gradient_penalty,
                },
            };
            let cfg = entry.apply(base);
            let set = load_dataset(&ctx.dataset_root(a.root.as_deref())?, entry.dataset)?;
            let arch = CanArch::published(cfg.image_dim, set.label_set.len())?;
            let (images, targets) = set.to_tensor(cfg.image_dim, &dev)?;
            (entry.name(), arch, cfg, set.label_set.clone(), images, targets)
        };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let dir = ctx.prepare(&name, "train-can")?;
    write_json(&dir.join(ARCH_FILE), &arch)?;
    write_label_set(&dir.join("labels.txt"), &labels)?;
    let (trainer, records) = run_can(&arch, cfg, &images, &targets, Some(&dir), &ctx.hash)?;
    let accuracy = trainer.style_accuracy(&images, &targets)?;
    let ambiguity = trainer.sample_ambiguity(64, ctx.cfg.seed)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "config_hash": ctx.hash,
            "last_epoch": records.last(),
            "style_accuracy": accuracy,
            "sample_ambiguity": ambiguity,
        }),
    )?;
    log::info!("style accuracy {accuracy:.3}, sample ambiguity {ambiguity:.4}");
    Ok(())
}

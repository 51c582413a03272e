use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::Args;
use creative_core::can::{CanArch, Generator};
use creative_core::config::{RunConfig, SNAPSHOT_FILE};
use creative_core::ddpo::toy::{pretrained_toy_policy, ToyDenoiser};
use creative_core::ddpo::TrainablePolicy;
use creative_core::diffusion::{codec_from_name, prompt_context, NoiseSchedule, SamplerConfig};
use creative_core::eval::{
    generate_eval_set, possibility_space, render_scatter, score_eval_set, similarity_matrix, write_report,
    AestheticMetric, CanModel, DiffusionModel, EmbeddingMode, EvalModel, EvalSet, ImageRewardMetric, ImageScorer,
    ReportOptions, ScoreTable, MANIFEST_FILE,
};
use creative_core::{Error, Result};

use crate::ctx::{find_weights, write_json, Ctx};
use crate::train::{toy_policy_config, ARCH_FILE};

const EVALSETS: &str = "evalsets";

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Set name; defaults to the run's method, the CAN directory name, or `base`.
    #[arg(long)]
    model: Option<String>,
    /// A `train-ddpo` output directory.
    #[arg(long, conflicts_with = "can")]
    checkpoint: Option<PathBuf>,
    /// A `train-can` output directory.
    #[arg(long)]
    can: Option<PathBuf>,
    /// Number of images (defaults to `eval.n`).
    #[arg(long)]
    n: Option<usize>,
    /// Seed every per-image seed derives from (defaults to `eval.base_seed`).
    #[arg(long)]
    base_seed: Option<u64>,
}

fn dir_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn diffusion_model(name: String, run: &RunConfig, weights: Option<&Path>) -> Result<DiffusionModel> {
    if run.policy.kind != "toy" {
        return Err(Error::BackendUnavailable(format!(
            "policy `{}`: no pretrained diffusion runtime is linked into this build",
            run.policy.kind
        )));
    }
    let schedule = NoiseSchedule::default_linear();
    let tc = toy_policy_config(run);
    let policy = match weights {
        Some(w) => {
            let p = ToyDenoiser::new(tc, schedule.num_timesteps(), 0)?;
            p.params().load_safetensors(w)?;
            p
        }
        None => {
            let pc = &run.policy;
            pretrained_toy_policy(tc, &schedule, pc.pretrain_steps, pc.pretrain_batch, pc.pretrain_lr, run.seed)?.0
        }
    };
    let cdim = tc.context_dim;
    Ok(DiffusionModel {
        name,
        policy: Box::new(policy),
        schedule,
        sampler: SamplerConfig {
            n_steps: run.eval.steps,
            eta: run.eval.eta,
        },
        codec: codec_from_name(&run.policy.codec)?.into(),
        context_of: Box::new(move |p: &str| prompt_context(p, cdim)),
    })
}

pub fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let model: Box<dyn EvalModel> = match (&a.checkpoint, &a.can) {
        (_, Some(can)) => {
            let dir = ctx.path(can);
            let arch: CanArch = serde_json::from_str(&std::fs::read_to_string(dir.join(ARCH_FILE))?)?;
            let generator = Generator::new(arch.generator, 0, &Device::Cpu)?;
            generator.params().load_safetensors(&find_weights(&dir, "generator-")?)?;
            Box::new(CanModel {
                name: a.model.clone().unwrap_or_else(|| dir_name(&dir)),
                generator,
            })
        }
        (Some(ck), None) => {
            let dir = ctx.path(ck);
            let run = RunConfig::load(Some(&dir.join(SNAPSHOT_FILE)), &[])?;
            let name = a
                .model
                .clone()
                .or_else(|| run.method.clone())
                .unwrap_or_else(|| dir_name(&dir));
            Box::new(diffusion_model(name, &run, Some(&find_weights(&dir, "policy-")?))?)
        }
        (None, None) => {
            let name = a.model.clone().unwrap_or_else(|| "base".into());
            Box::new(diffusion_model(name, &ctx.cfg, None)?)
        }
    };
    let e = &ctx.cfg.eval;
    let set = generate_eval_set(
        model.as_ref(),
        &e.prompts,
        a.base_seed.unwrap_or(e.base_seed),
        a.n.unwrap_or(e.n),
    )?;
    let dir = ctx.prepare(&format!("{EVALSETS}/{}", model.name()), "eval-generate")?;
    set.save(&dir)?;
    log::info!("{} images ({} failed) in {}", set.len(), set.failures(), dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SetsArgs {
    /// Evaluation set directories; defaults to every set under `<out>/evalsets`.
    #[arg(long, num_args = 1..)]
    sets: Vec<PathBuf>,
}

fn load_sets(ctx: &Ctx, a: &SetsArgs) -> Result<Vec<EvalSet>> {
    let dirs: Vec<PathBuf> = if a.sets.is_empty() {
        let root = ctx.out.join(EVALSETS);
        let mut found = Vec::new();
        if root.is_dir() {
            for entry in std::fs::read_dir(&root)? {
                let p = entry?.path();
                if p.join(MANIFEST_FILE).is_file() {
                    found.push(p);
                }
            }
        }
        found.sort();
        found
    } else {
        a.sets.iter().map(|p| ctx.path(p)).collect()
    };
    if dirs.is_empty() {
        return Err(Error::invalid("no evaluation sets found; run eval-generate first"));
    }
    dirs.iter().map(|d| EvalSet::load(d)).collect()
}

fn with_scorers<T>(ctx: &Ctx, f: impl FnOnce(&[&dyn ImageScorer]) -> Result<T>) -> Result<T> {
    let b = ctx.backends()?;
    let aesthetic = AestheticMetric(b.aesthetic);
    let image_reward = ImageRewardMetric(b.image_reward);
    f(&[&aesthetic, &image_reward])
}

pub fn score(ctx: &Ctx, a: SetsArgs) -> Result<()> {
    let sets = load_sets(ctx, &a)?;
    let scores = with_scorers(ctx, |scorers| sets.iter().map(|s| score_eval_set(s, scorers)).collect::<Result<Vec<_>>>())?;
    let table = ScoreTable::from_scores(&scores)?;
    let dir = ctx.prepare("scores", "eval-score")?;
    let display = table.to_display_csv()?;
    std::fs::write(dir.join("scores.csv"), &display)?;
    std::fs::write(dir.join("scores_long.csv"), table.to_long_csv()?)?;
    write_json(&dir.join("scores.json"), &scores)?;
    print!("{display}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct SimilarityArgs {
    #[command(flatten)]
    sets: SetsArgs,
    /// `content`, `style` or `both`.
    #[arg(long, default_value = "both")]
    mode: String,
}

pub fn similarity(ctx: &Ctx, a: SimilarityArgs) -> Result<()> {
    let modes = match a.mode.as_str() {
        "both" => vec![EmbeddingMode::Content, EmbeddingMode::Style],
        m => vec![m.parse()?],
    };
    let sets = load_sets(ctx, &a.sets)?;
    let embedder = ctx.backends()?.embedder;
    let dir = ctx.prepare("similarity", "eval-similarity")?;
    for mode in modes {
        let m = similarity_matrix(&sets, embedder.as_ref(), mode)?;
        let tag = match mode {
            EmbeddingMode::Content => "content",
            EmbeddingMode::Style => "style",
        };
        std::fs::write(dir.join(format!("similarity_{tag}.csv")), m.to_csv()?)?;
    }
    Ok(())
}

pub fn space(ctx: &Ctx, a: SetsArgs) -> Result<()> {
    let sets = load_sets(ctx, &a)?;
    let embedder = ctx.backends()?.embedder;
    let points = possibility_space(&sets, embedder.as_ref(), &ctx.cfg.eval.space)?;
    let dir = ctx.prepare("space", "eval-space")?;
    let mut w = csv::Writer::from_path(dir.join("space.csv"))?;
    for p in &points {
        w.serialize(p)?;
    }
    w.flush()?;
    let models: Vec<String> = sets.iter().map(|s| s.model().to_string()).collect();
    render_scatter(&points, &models, 400)
        .save(dir.join("space.png"))
        .map_err(creative_core::Error::from)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    sets: SetsArgs,
    /// Leave out the t-SNE projection.
    #[arg(long)]
    skip_space: bool,
}

pub fn report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    let sets = load_sets(ctx, &a.sets)?;
    let embedder = ctx.backends()?.embedder;
    let dir = ctx.prepare("report", "report")?;
    let opts = ReportOptions {
        space: ctx.cfg.eval.space,
        skip_space: a.skip_space,
    };
    let summary = with_scorers(ctx, |scorers| write_report(&dir, &sets, scorers, embedder.as_ref(), &opts))?;
    log::info!("wrote {} report files to {}", summary.files.len(), dir.display());
    print!("{}", summary.table.to_display_csv()?);
    Ok(())
}

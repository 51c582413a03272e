use std::path::PathBuf;

use clap::Args;
use creative_core::classifiers::write_label_set;
use creative_core::data::{
    build_mediums_subset, fit_clusters as fit, load_dataset, CaptionCache, DatasetName, EmbeddingCache, KMeansConfig,
    LabeledImageSet, SubsetOptions,
};
use creative_core::Result;
use serde_json::json;

use crate::ctx::{write_json, Ctx};

pub const SUBSET_FILE: &str = "subset.json";

#[derive(Args, Debug)]
pub struct SubsetArgs {
    /// Source dataset root laid out as `<root>/<label>/<image>`.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Name the source is validated against.
    #[arg(long, default_value = "full")]
    dataset: DatasetName,
    /// Classes to keep (defaults to `data.top_n`).
    #[arg(long)]
    top_n: Option<usize>,
}

pub fn subset_mediums(ctx: &Ctx, a: SubsetArgs) -> Result<()> {
    let root = std::path::absolute(ctx.dataset_root(a.root.as_deref())?)?;
    let source = load_dataset(&root, a.dataset)?;
    let backends = ctx.backends()?;
    let mut cache = CaptionCache::from_env()?;
    let opts = SubsetOptions {
        keywords: ctx.cfg.data.keywords.clone(),
        top_n: a.top_n.unwrap_or(ctx.cfg.data.top_n),
        retries: ctx.cfg.data.caption_retries,
        ..Default::default()
    };
    let (subset, report) = build_mediums_subset(&source, backends.captioner.as_ref(), &mut cache, &opts)?;
    let dir = ctx.prepare("mediums", "subset-mediums")?;
    report.write_csv(&dir.join("mediums.csv"))?;
    write_label_set(&dir.join("labels.txt"), &subset.label_set)?;
    write_json(&dir.join(SUBSET_FILE), &subset)?;
    log::info!(
        "kept {} of {} classes ({} images) in {}",
        subset.label_set.len(),
        source.label_set.len(),
        subset.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    /// Number of clusters (defaults to `data.k`).
    #[arg(long)]
    k: Option<usize>,
    /// Dataset name (defaults to `data.dataset`).
    #[arg(long)]
    dataset: Option<DatasetName>,
    /// Image root to cluster.
    #[arg(long, conflicts_with = "subset")]
    root: Option<PathBuf>,
    /// A `subset-mediums` output directory (or its subset.json).
    #[arg(long)]
    subset: Option<PathBuf>,
}

fn load_subset(path: PathBuf) -> Result<LabeledImageSet> {
    let file = if path.is_dir() { path.join(SUBSET_FILE) } else { path };
    let set: LabeledImageSet = serde_json::from_str(&std::fs::read_to_string(file)?)?;
    set.validate()?;
    Ok(set)
}

pub fn fit_clusters(ctx: &Ctx, a: ClusterArgs) -> Result<()> {
    let data = &ctx.cfg.data;
    let k = a.k.unwrap_or(data.k);
    let dataset = a.dataset.unwrap_or(data.dataset);
    let default_subset = ctx.out.join("mediums").join(SUBSET_FILE);
    let set = match (a.subset, a.root) {
        (Some(s), _) => load_subset(ctx.path(&s))?,
        (None, Some(r)) => load_dataset(&ctx.path(&r), dataset)?,
        (None, None) if dataset == DatasetName::Mediums && default_subset.is_file() => load_subset(default_subset)?,
        (None, None) => load_dataset(&ctx.dataset_root(None)?, dataset)?,
    };
    let cfg = KMeansConfig {
        k,
        seed: ctx.cfg.seed,
        max_iter: data.max_iter,
        tol: data.tol,
    };
    let backends = ctx.backends()?;
    let mut cache = EmbeddingCache::from_env(&ctx.cfg.backend.embedder)?;
    let (model, kfit) = fit(&set, backends.embedder.as_ref(), &mut cache, &cfg)?;
    let dir = ctx.prepare(&format!("clusters-{dataset}-k{k}"), "fit-clusters")?;
    model.save(&dir.join("clusters.json"))?;
    let summary = json!({
        "config_hash": ctx.hash,
        "k": k,
        "images": set.len(),
        "inertia": kfit.inertia,
        "iterations": kfit.iterations,
        "history": kfit.history,
        "assignments": kfit.assignments,
    });
    write_json(&dir.join("fit.json"), &summary)?;
    log::info!("k={k} inertia={:.4} after {} iterations", kfit.inertia, kfit.iterations);
    Ok(())
}

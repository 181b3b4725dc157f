//! `polyforge` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
//! Every command prints one key-sorted JSON line on success.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use polyforge_core::dedup::{
    deduplicate, first_neighbor_distances, select_threshold, ThresholdPolicy,
};
use polyforge_core::denoiser::{AttentionFlags, DenoiserConfig};
use polyforge_core::diffusion::{PredictionKind, SamplerOptions};
use polyforge_core::exec;
use polyforge_core::features::extract_builtin;
use polyforge_core::genmetrics::{
    fit_gaussian, frechet_distance, inception_score, precision_recall,
};
use polyforge_core::io::{
    load_png, read_json, read_pff, to_sorted_json, write_json, write_pff, write_samples, Manifest,
};
use polyforge_core::localizer::{LocalizerConfig, TrainConfig};
use polyforge_core::loceval::{
    mean_average_precision, transfer_grid, Detection, GridBudgets, Modality, NamedSet,
};
use polyforge_core::regimes::{
    generate_dataset, plan_regime, run_training, Checkpoint, CondSource, Datasets, GenerateConfig,
    RandomBoxes, RegimeConfig, RegimeKind,
};
use polyforge_core::schedule::DEFAULT_SAMPLER_STEPS;
use polyforge_core::spatial::{BBox, LatentCodec};
use polyforge_core::toy::{toy_dataset, ToyConfig};
use polyforge_core::{Error, ErrorClass, Result};

/// Diffusion-based synthetic data toolkit for object localization.
#[derive(Debug, Parser)]
#[command(name = "polyforge", version)]
pub struct RunConfig {
    /// Worker threads for parallel loops (0: one per core).
    #[arg(long, env = "POLYFORGE_THREADS", default_value_t = 0, global = true)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset preparation.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Feature extraction.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Train a mask-conditioned denoiser under one of the training regimes.
    Train(TrainArgs),
    /// Generate a labeled dataset from a checkpoint.
    Sample(SampleArgs),
    /// Generated-data quality metrics over feature files.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Localization evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Experiment grids.
    #[command(subcommand)]
    Exp(ExpCmd),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    /// Write a synthetic blob dataset with box labels.
    MakeToy(MakeToyArgs),
    /// Center-crop and resize every image of a manifest to a square size.
    CropResize(CropResizeArgs),
    /// Remove near-duplicates using a feature file.
    Dedup(DedupArgs),
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    /// Number of images.
    #[arg(long)]
    pub n: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    #[arg(long)]
    pub seed: u64,
    /// Index of the first sample, for disjoint splits of the same seed.
    #[arg(long, default_value_t = 0)]
    pub first: u64,
    /// Output directory (PNGs and manifest.json).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CropResizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub res: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    /// PFF1 feature file whose ids are manifest image paths.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// `percentile:P` or `fixed:V`.
    #[arg(long, default_value = "percentile:5")]
    pub policy: String,
    /// Output manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum FeaturesCmd {
    /// Built-in 16x16 grayscale + channel-statistics features.
    ExtractBuiltin(ExtractArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output PFF1 file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// vae-upscale, finetune, alt-batch, alt-epoch or mixed.
    #[arg(long)]
    pub regime: String,
    /// Primary (native-resolution) manifest.
    #[arg(long)]
    pub primary: PathBuf,
    /// Secondary manifests, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub secondary: Vec<PathBuf>,
    /// Target resolution.
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    /// Native resolution of the primary set (defaults to --res).
    #[arg(long)]
    pub native_res: Option<usize>,
    /// Step budget of the first (or only) phase.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Step budget of the second phase (finetune, mixed).
    #[arg(long, default_value_t = 500)]
    pub second_steps: usize,
    /// Epoch count for alt-epoch (derived from --steps when absent).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = polyforge_core::optim::DEFAULT_LR)]
    pub lr: f64,
    /// Phase-2 learning-rate factor for finetune.
    #[arg(long, default_value_t = 0.1)]
    pub finetune_lr_factor: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Generated images for the mixed regime.
    #[arg(long, default_value_t = 500)]
    pub gen_count: usize,
    /// Sampler steps for the mixed regime's generation stage.
    #[arg(long, default_value_t = DEFAULT_SAMPLER_STEPS)]
    pub sampler_steps: usize,
    #[arg(long, default_value_t = polyforge_core::diffusion::DEFAULT_EMA_DECAY)]
    pub ema_decay: f64,
    #[arg(long, default_value_t = polyforge_core::diffusion::DEFAULT_EMA_WARMUP)]
    pub ema_warmup: usize,
    /// epsilon or v.
    #[arg(long, default_value = "epsilon")]
    pub prediction: String,
    /// identity or pool:F.
    #[arg(long, default_value = "identity")]
    pub codec: String,
    /// Keep the linear schedule instead of rescaling it to zero terminal SNR.
    #[arg(long)]
    pub no_zero_terminal: bool,
    #[arg(long, default_value_t = DenoiserConfig::default().base_width)]
    pub base_width: usize,
    #[arg(long, default_value_t = DenoiserConfig::default().layers_per_block)]
    pub layers_per_block: usize,
    #[arg(long, default_value_t = DenoiserConfig::default().time_embed_dim)]
    pub time_embed_dim: usize,
    /// Disable all self-attention blocks.
    #[arg(long)]
    pub no_attention: bool,
    /// Also write `<out stem>-stepNNNNNN.<ext>` every this many steps (0: off).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Optional JSON file receiving the per-step phase log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub n: usize,
    /// Output resolution (multiple of 8 x codec factor).
    #[arg(long)]
    pub res: usize,
    /// Sampler steps.
    #[arg(long, default_value_t = DEFAULT_SAMPLER_STEPS)]
    pub steps: usize,
    /// Manifest whose boxes condition generation.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// resample, fixed, random or none (default: resample with --masks, else random).
    #[arg(long)]
    pub cond: Option<String>,
    /// Largest box count for random conditioning.
    #[arg(long, default_value_t = RandomBoxes::default().max_boxes)]
    pub max_boxes: usize,
    /// Smallest random box side as a fraction of the image side.
    #[arg(long, default_value_t = RandomBoxes::default().min_side)]
    pub min_side: f64,
    /// Largest random box side as a fraction of the image side.
    #[arg(long, default_value_t = RandomBoxes::default().max_side)]
    pub max_side: f64,
    /// Do not clip the predicted clean sample to [-1, 1].
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long)]
    pub seed: u64,
    /// Output directory (PNGs and manifest.json).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCmd {
    /// Frechet distance between Gaussian fits of two feature sets.
    Fid(PairArgs),
    /// Inception score of class-probability rows in --gen.
    Is(IsArgs),
    /// k-NN manifold precision and recall.
    Pr(PrArgs),
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub gen: PathBuf,
}

#[derive(Debug, Args)]
pub struct IsArgs {
    /// Optional reference set; only its size is reported.
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Class-probability rows.
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long, default_value_t = polyforge_core::genmetrics::DEFAULT_SPLITS)]
    pub splits: usize,
}

#[derive(Debug, Args)]
pub struct PrArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long, default_value_t = polyforge_core::genmetrics::DEFAULT_K)]
    pub k: usize,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Mean average precision of box predictions against a manifest.
    Map(MapArgs),
}

#[derive(Debug, Args)]
pub struct MapArgs {
    /// JSON object {image_path: [[x, y, w, h, score], ...]}.
    #[arg(long)]
    pub preds: PathBuf,
    /// Ground-truth manifest.
    #[arg(long)]
    pub gts: PathBuf,
    #[arg(long, default_value_t = polyforge_core::loceval::DEFAULT_IOU)]
    pub iou: f64,
}

#[derive(Debug, Subcommand)]
pub enum ExpCmd {
    /// Modality A (real only) versus B (synthetic pretraining + real fine-tuning).
    TransferGrid(GridArgs),
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Manifest subsets are drawn from.
    #[arg(long)]
    pub real: PathBuf,
    /// Synthetic pretraining manifests, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub synthetic: Vec<PathBuf>,
    /// Held-out benchmark manifests, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub bench: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 25, 50])]
    pub sizes: Vec<usize>,
    /// Number of seeds, counted up from --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Side all images are resized to.
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub pretrain_steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub finetune_steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch)]
    pub batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = polyforge_core::loceval::DEFAULT_IOU)]
    pub iou: f64,
    #[arg(long)]
    pub seed: u64,
    /// Output JSON with every grid cell.
    #[arg(long)]
    pub out: PathBuf,
}

/// Prefixes an error message with the flag it came from, keeping its class.
fn at_flag(flag: &str, e: Error) -> Error {
    match e {
        Error::Param(m) => Error::Param(format!("{flag}: {m}")),
        Error::Shape(m) => Error::Shape(format!("{flag}: {m}")),
        Error::Data(m) => Error::Data(format!("{flag}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{flag}: {m}")),
        other => other,
    }
}

trait FlagContext<T> {
    fn flag(self, name: &str) -> Result<T>;
}

impl<T> FlagContext<T> for Result<T> {
    fn flag(self, name: &str) -> Result<T> {
        self.map_err(|e| at_flag(name, e))
    }
}

fn parse_prediction(s: &str) -> Result<PredictionKind> {
    match s {
        "epsilon" | "eps" => Ok(PredictionKind::Epsilon),
        "v" => Ok(PredictionKind::V),
        _ => Err(Error::Param(format!(
            "--prediction: expected epsilon or v, got `{s}`"
        ))),
    }
}

fn parse_codec(s: &str) -> Result<LatentCodec> {
    if s == "identity" {
        return Ok(LatentCodec::Identity);
    }
    s.strip_prefix("pool:")
        .and_then(|f| f.parse::<usize>().ok())
        .filter(|&f| f >= 1)
        .map(|factor| LatentCodec::Pool { factor })
        .ok_or_else(|| Error::Param(format!("--codec: expected identity or pool:F, got `{s}`")))
}

fn load_native(
    path: &Path,
    flag: &str,
    res: usize,
) -> Result<Vec<polyforge_core::spatial::LabeledSample>> {
    let m = Manifest::load(path)?;
    if m.is_empty() {
        return Err(Error::format(path, format!("{flag}: manifest is empty")));
    }
    m.load_samples(res)
}

fn emit(value: &serde_json::Value) -> Result<()> {
    println!("{}", to_sorted_json(value)?);
    Ok(())
}

fn make_toy(a: &MakeToyArgs) -> Result<()> {
    let cfg = ToyConfig::new(a.res);
    let samples = toy_dataset(&cfg, a.n, a.seed, a.first).flag("--res")?;
    let m = write_samples(&a.out, &samples, "toy_")?;
    let boxes: usize = m.entries.iter().map(|e| e.boxes.len()).sum();
    emit(&json!({"images": m.len(), "boxes": boxes, "manifest": a.out.join("manifest.json")}))
}

fn crop_resize(a: &CropResizeArgs) -> Result<()> {
    let samples = load_native(&a.manifest, "--manifest", a.res)?;
    let m = write_samples(&a.out, &samples, "img_")?;
    emit(&json!({"images": m.len(), "res": a.res, "manifest": a.out.join("manifest.json")}))
}

/// Rewrites image paths of `m` so they resolve from `out`'s directory.
fn rebase(m: &Manifest, out: &Path) -> Result<Manifest> {
    let new_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    let same = |a: &Path, b: &Path| match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    };
    let dir_of = |p: &Path| {
        if p.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            p.to_path_buf()
        }
    };
    if same(&dir_of(&m.base_dir), &dir_of(&new_dir)) {
        return Ok(Manifest::new(m.entries.clone(), new_dir));
    }
    let mut entries = m.entries.clone();
    for e in &mut entries {
        let p = m.resolve(e);
        let abs = p.canonicalize().map_err(|err| Error::Io {
            path: p.clone(),
            source: err,
        })?;
        e.image_path = abs.display().to_string();
    }
    Ok(Manifest::new(entries, new_dir))
}

fn dedup(a: &DedupArgs) -> Result<()> {
    let policy: ThresholdPolicy = a.policy.parse().flag("--policy")?;
    let fs = read_pff(&a.features)?;
    let m = Manifest::load(&a.manifest)?;
    let ids: std::collections::BTreeSet<&str> =
        m.entries.iter().map(|e| e.image_path.as_str()).collect();
    if let Some(bad) = fs.ids().iter().find(|id| !ids.contains(id.as_str())) {
        return Err(Error::Data(format!(
            "--features: id `{bad}` is not an image path of {}",
            a.manifest.display()
        )));
    }
    let d = first_neighbor_distances(&fs).flag("--features")?;
    let threshold = select_threshold(&d, policy).flag("--policy")?;
    let report = deduplicate(&fs, threshold)?;
    let removed: std::collections::BTreeSet<&str> = fs
        .ids()
        .iter()
        .map(String::as_str)
        .filter(|id| !report.kept.iter().any(|k| k == id))
        .collect();
    let kept = Manifest::new(
        m.entries
            .iter()
            .filter(|e| !removed.contains(e.image_path.as_str()))
            .cloned()
            .collect(),
        m.base_dir.clone(),
    );
    let out = rebase(&kept, &a.out)?;
    out.save(&a.out)?;
    emit(&json!({
        "threshold": threshold,
        "components": report.components.len(),
        "kept": out.len(),
        "removed": report.removed_count,
        "n": fs.len(),
    }))
}

fn extract(a: &ExtractArgs) -> Result<()> {
    let m = Manifest::load(&a.manifest)?;
    if m.is_empty() {
        return Err(Error::format(&a.manifest, "--manifest: manifest is empty"));
    }
    let images = m
        .entries
        .iter()
        .map(|e| load_png(&m.resolve(e)))
        .collect::<Result<Vec<_>>>()?;
    let ids = m.entries.iter().map(|e| e.image_path.clone()).collect();
    let fs = extract_builtin(&images, ids, "builtin").flag("--manifest")?;
    write_pff(&a.out, &fs)?;
    emit(&json!({"n": fs.len(), "dim": fs.dim(), "features": a.out}))
}

fn step_path(out: &Path, step: u64) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}-step{step:06}.{}", ext.to_string_lossy()),
        None => format!("{stem}-step{step:06}"),
    };
    out.with_file_name(name)
}

fn train(a: &TrainArgs) -> Result<()> {
    let kind: RegimeKind = a.regime.parse().flag("--regime")?;
    if kind.needs_secondary() && a.secondary.is_empty() {
        return Err(Error::Param(format!(
            "--secondary: regime `{kind}` needs at least one secondary manifest"
        )));
    }
    let prediction = parse_prediction(&a.prediction)?;
    let codec = parse_codec(&a.codec)?;
    let native_res = a.native_res.unwrap_or(a.res);
    let cfg = RegimeConfig {
        native_res,
        target_res: a.res,
        steps: a.steps,
        second_steps: a.second_steps,
        lr: a.lr,
        finetune_lr_factor: a.finetune_lr_factor,
        batch: a.batch,
        epochs: a.epochs,
        gen_count: a.gen_count,
        sampler_steps: a.sampler_steps,
        seed: a.seed,
        ema_decay: a.ema_decay,
        ema_warmup: a.ema_warmup,
        codec,
        prediction,
        zero_terminal: !a.no_zero_terminal,
        checkpoint_every: a.checkpoint_every,
    };
    let model = DenoiserConfig {
        in_channels: 4,
        base_width: a.base_width,
        layers_per_block: a.layers_per_block,
        time_embed_dim: a.time_embed_dim,
        attention: if a.no_attention {
            AttentionFlags::none()
        } else {
            AttentionFlags::default()
        },
        ..Default::default()
    };
    model.validate()?;
    let data = Datasets {
        primary: load_native(&a.primary, "--primary", native_res)?,
        secondary: a
            .secondary
            .iter()
            .map(|p| load_native(p, "--secondary", a.res))
            .collect::<Result<_>>()?,
    };
    let sec_lens: Vec<usize> = data.secondary.iter().map(Vec::len).collect();
    let plan = plan_regime(kind, data.primary.len(), &sec_lens, &cfg)?;
    let out = a.out.clone();
    let final_step = plan.total_steps() as u64;
    let outcome = run_training(&plan, &model, &data, &mut |ckpt: &Checkpoint| {
        if ckpt.step == final_step {
            ckpt.save(&out)
        } else {
            ckpt.save(&step_path(&out, ckpt.step))
        }
    })?;
    if let Some(log) = &a.log {
        write_json(log, &outcome.log)?;
    }
    let tail = &outcome.losses[outcome.losses.len().saturating_sub(100)..];
    emit(&json!({
        "checkpoint": a.out,
        "regime": kind.cli_name(),
        "phases": plan.phases.len(),
        "steps": outcome.checkpoint.step,
        "fingerprint": outcome.checkpoint.plan_fingerprint,
        "final_loss": tail.iter().sum::<f64>() / tail.len().max(1) as f64,
    }))
}

fn sample(a: &SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let masks = match &a.masks {
        Some(p) => Some(
            load_native(p, "--masks", a.res)
                .flag("--masks")?
                .into_iter()
                .map(|s| s.boxes)
                .collect::<Vec<Vec<BBox>>>(),
        ),
        None => None,
    };
    let random = RandomBoxes {
        max_boxes: a.max_boxes,
        min_side: a.min_side,
        max_side: a.max_side,
    };
    let need_masks = |m: &Option<Vec<Vec<BBox>>>| {
        m.clone().ok_or_else(|| {
            Error::Param("--masks: required by --cond resample and --cond fixed".into())
        })
    };
    let cond = match a.cond.as_deref() {
        None if masks.is_some() => CondSource::Resample(need_masks(&masks)?),
        None | Some("random") => CondSource::RandomBoxes(random),
        Some("resample") => CondSource::Resample(need_masks(&masks)?),
        Some("fixed") => CondSource::Fixed(need_masks(&masks)?),
        Some("none") => CondSource::Unconditional,
        Some(other) => {
            return Err(Error::Param(format!(
                "--cond: expected resample, fixed, random or none, got `{other}`"
            )))
        }
    };
    let cfg = GenerateConfig {
        res: a.res,
        sampler_steps: a.steps,
        sampler: SamplerOptions {
            kind: ckpt.prediction,
            clip_x0: !a.no_clip,
        },
        seed: a.seed,
    };
    let m = generate_dataset(&ckpt, a.n, &cfg, &cond, &a.out).flag("--res")?;
    let boxes: usize = m.entries.iter().map(|e| e.boxes.len()).sum();
    emit(
        &json!({"images": m.len(), "boxes": boxes, "res": a.res, "manifest": a.out.join("manifest.json")}),
    )
}

fn metrics(cmd: &MetricsCmd) -> Result<()> {
    match cmd {
        MetricsCmd::Fid(a) => {
            let (r, g) = (read_pff(&a.real)?, read_pff(&a.gen)?);
            let fid = frechet_distance(
                &fit_gaussian(&r).flag("--real")?,
                &fit_gaussian(&g).flag("--gen")?,
            )?;
            emit(
                &json!({"metric": "fid", "fid": fid, "value": fid, "n_real": r.len(), "n_gen": g.len()}),
            )
        }
        MetricsCmd::Is(a) => {
            let g = read_pff(&a.gen)?;
            let n_real = match &a.real {
                Some(p) => Some(read_pff(p)?.len()),
                None => None,
            };
            let is = inception_score(&g, a.splits).flag("--gen")?;
            emit(&json!({
                "metric": "is", "is": is.mean, "value": is.mean, "std": is.std,
                "splits": a.splits, "n_real": n_real, "n_gen": g.len(),
            }))
        }
        MetricsCmd::Pr(a) => {
            let (r, g) = (read_pff(&a.real)?, read_pff(&a.gen)?);
            let pr = precision_recall(&r, &g, a.k).flag("--k")?;
            emit(&json!({
                "metric": "pr", "precision": pr.precision, "recall": pr.recall, "k": pr.k,
                "n_real": r.len(), "n_gen": g.len(),
            }))
        }
    }
}

fn eval_map(a: &MapArgs) -> Result<()> {
    let m = Manifest::load(&a.gts)?;
    let preds: std::collections::BTreeMap<String, Vec<[f64; 5]>> = read_json(&a.preds)?;
    for id in preds.keys() {
        if !m.entries.iter().any(|e| &e.image_path == id) {
            return Err(Error::format(
                &a.preds,
                format!("image id `{id}` is not in {}", a.gts.display()),
            ));
        }
    }
    let mut all_preds = Vec::with_capacity(m.len());
    for e in &m.entries {
        let mut dets = Vec::new();
        for p in preds.get(&e.image_path).into_iter().flatten() {
            if p[..4].iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
                return Err(Error::format(
                    &a.preds,
                    format!(
                        "`{}`: box coordinates must be non-negative integers",
                        e.image_path
                    ),
                ));
            }
            let b = BBox::new(p[0] as usize, p[1] as usize, p[2] as usize, p[3] as usize);
            b.validate(e.height, e.width)
                .map_err(|err| Error::format(&a.preds, format!("`{}`: {err}", e.image_path)))?;
            dets.push(
                Detection::new(b, p[4]).map_err(|err| Error::format(&a.preds, err.to_string()))?,
            );
        }
        all_preds.push(dets);
    }
    let gts: Vec<Vec<BBox>> = m.entries.iter().map(|e| e.bboxes()).collect();
    if !(0.0..=1.0).contains(&a.iou) {
        return Err(Error::Param(format!(
            "--iou: must lie in [0, 1], got {}",
            a.iou
        )));
    }
    let map = mean_average_precision(&all_preds, &gts, a.iou)?;
    emit(&json!({"metric": "map", "map": map, "value": map, "iou": a.iou, "images": m.len()}))
}

fn named(path: &Path, flag: &str, res: usize) -> Result<NamedSet> {
    Ok(NamedSet {
        name: path.display().to_string(),
        samples: load_native(path, flag, res)?,
    })
}

fn transfer(a: &GridArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::Param("--seeds: must be positive".into()));
    }
    let real = load_native(&a.real, "--real", a.res)?;
    let synthetic = a
        .synthetic
        .iter()
        .map(|p| named(p, "--synthetic", a.res))
        .collect::<Result<Vec<_>>>()?;
    let bench = a
        .bench
        .iter()
        .map(|p| named(p, "--bench", a.res))
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.seed.wrapping_add(i)).collect();
    let tc = |steps| TrainConfig {
        steps,
        batch: a.batch,
        lr: a.lr,
        augment: true,
    };
    let budgets = GridBudgets {
        pretrain: tc(a.pretrain_steps),
        finetune: tc(a.finetune_steps),
        scratch: tc(a.finetune_steps),
    };
    let grid = transfer_grid(
        &real,
        &synthetic,
        &bench,
        &a.sizes,
        &seeds,
        &LocalizerConfig::default(),
        &budgets,
        a.iou,
    )
    .flag("--sizes")?;
    write_json(&a.out, &grid)?;
    let summary: Vec<serde_json::Value> = a
        .sizes
        .iter()
        .map(|&n| {
            json!({
                "size": n,
                "a": grid.mean_map(n, Modality::A),
                "b": grid.mean_map(n, Modality::B),
            })
        })
        .collect();
    emit(&json!({"cells": grid.cells.len(), "results": a.out, "mean_map": summary}))
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    match &cfg.command {
        Command::Dataset(DatasetCmd::MakeToy(a)) => make_toy(a),
        Command::Dataset(DatasetCmd::CropResize(a)) => crop_resize(a),
        Command::Dataset(DatasetCmd::Dedup(a)) => dedup(a),
        Command::Features(FeaturesCmd::ExtractBuiltin(a)) => extract(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Metrics(m) => metrics(m),
        Command::Eval(EvalCmd::Map(a)) => eval_map(a),
        Command::Exp(ExpCmd::TransferGrid(a)) => transfer(a),
    }
}

fn configure_threads(n: usize) {
    if n == 1 {
        exec::set_mode(exec::Mode::Sequential);
    } else if n > 1 {
        // Only fails if a global pool already exists, which keeps its size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

pub fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cfg = match RunConfig::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    configure_threads(cfg.threads);
    match run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn leaves(cmd: &clap::Command, path: Vec<String>, out: &mut Vec<(Vec<String>, clap::Command)>) {
        if cmd.get_subcommands().next().is_none() {
            out.push((path.clone(), cmd.clone()));
        }
        for sub in cmd.get_subcommands() {
            let mut p = path.clone();
            p.push(sub.get_name().to_string());
            leaves(sub, p, out);
        }
    }

    #[test]
    fn help_lists_every_registered_flag() {
        let mut root = RunConfig::command();
        root.build();
        let mut all = Vec::new();
        leaves(&root, vec![], &mut all);
        assert!(all.len() >= 11);
        for (path, mut cmd) in all {
            let help = cmd.render_long_help().to_string();
            for arg in cmd.get_arguments() {
                assert!(!arg.is_hide_set(), "{path:?}: hidden flag {}", arg.get_id());
                if let Some(long) = arg.get_long() {
                    assert!(
                        help.contains(&format!("--{long}")),
                        "{path:?}: --{long} missing from help"
                    );
                }
            }
        }
        RunConfig::command().debug_assert();
    }

    #[test]
    fn flag_context_keeps_class() {
        let e = at_flag("--res", Error::Numeric("x".into()));
        assert_eq!(e.class(), ErrorClass::Numeric);
        assert!(e.to_string().contains("--res"));
    }

    #[test]
    fn codec_and_prediction_parsing() {
        assert_eq!(
            parse_codec("pool:2").unwrap(),
            LatentCodec::Pool { factor: 2 }
        );
        assert!(parse_codec("pool:0").is_err());
        assert_eq!(parse_prediction("v").unwrap(), PredictionKind::V);
        assert!(parse_prediction("x0").is_err());
    }

    #[test]
    fn step_checkpoint_names() {
        assert_eq!(
            step_path(Path::new("a/m.ckpt"), 20),
            PathBuf::from("a/m-step000020.ckpt")
        );
    }
}

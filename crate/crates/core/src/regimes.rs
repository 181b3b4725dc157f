//! Training regimes, the training loop, conditional dataset generation and
//! checkpoint files.
//!
//! A [`TrainingPlan`] is a list of phases, each drawing batches from one or
//! more dataset groups at a fixed resolution, plus an optional generation
//! stage whose output becomes a dataset for later phases. Every step is
//! logged as `(dataset, index, dihedral op)` triples so batches can be
//! replayed exactly.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamSet;
use crate::denoiser::{build_denoiser, DenoiserConfig, DenoiserParams, SPATIAL_MULTIPLE};
use crate::diffusion::{
    ddpm_sample, draw_noise, loss_and_grad_with_draws, EmaState, PredictionKind, SamplerOptions,
    DEFAULT_EMA_DECAY, DEFAULT_EMA_WARMUP,
};
use crate::error::{ensure, Error, Result};
use crate::exec;
use crate::io::{to_sorted_json, write_bytes, write_samples, Manifest};
use crate::optim::{Adam, AdamConfig, LrSchedule, DEFAULT_LR};
use crate::schedule::{NoiseSchedule, ScheduleDescriptor, DEFAULT_SAMPLER_STEPS};
use crate::spatial::{
    boxes_to_mask, center_crop_resize, dihedral_augment, downscale_mask, extract_boxes, BBox,
    Dihedral, LabeledSample, LatentCodec, DEFAULT_MIN_AREA_FRAC,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    VaeUpscale,
    Finetune,
    AlternateBatch,
    AlternateEpoch,
    Mixed,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 5] = [
        RegimeKind::VaeUpscale,
        RegimeKind::Finetune,
        RegimeKind::AlternateBatch,
        RegimeKind::AlternateEpoch,
        RegimeKind::Mixed,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            RegimeKind::VaeUpscale => "vae-upscale",
            RegimeKind::Finetune => "finetune",
            RegimeKind::AlternateBatch => "alt-batch",
            RegimeKind::AlternateEpoch => "alt-epoch",
            RegimeKind::Mixed => "mixed",
        }
    }

    pub fn needs_secondary(self) -> bool {
        self != RegimeKind::VaeUpscale
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        let long = |k: RegimeKind| match k {
            RegimeKind::AlternateBatch => "alternate-batch",
            RegimeKind::AlternateEpoch => "alternate-epoch",
            other => other.cli_name(),
        };
        RegimeKind::ALL
            .into_iter()
            .find(|&k| k.cli_name() == norm || long(k) == norm)
            .ok_or_else(|| Error::Param(format!("unknown regime `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "set", content = "index", rename_all = "snake_case")]
pub enum DatasetSelector {
    Primary,
    Secondary(usize),
    Generated,
}

/// Datasets drawn from together, at one resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub sources: Vec<DatasetSelector>,
    pub res: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Interleave {
    /// Batch `s` comes from group `s mod groups`.
    AlternateBatch,
    /// The phase is one epoch of its single group, subsampled to
    /// `epoch_size` items.
    AlternateEpoch { epoch: usize, epoch_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub groups: Vec<Group>,
    pub steps: usize,
    pub lr: LrSchedule,
    pub interleave: Option<Interleave>,
}

/// Samples a dataset from the EMA model after phase `after_phase`,
/// conditioned on masks resampled from `cond_sources`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStage {
    pub after_phase: usize,
    pub count: usize,
    pub res: usize,
    pub sampler_steps: usize,
    pub cond_sources: Vec<DatasetSelector>,
}

/// Inputs to [`plan_regime`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    /// Resolution of the primary set (and of everything in `vae_upscale`).
    pub native_res: usize,
    /// Resolution of the secondary sets and of generated data.
    pub target_res: usize,
    /// Phase-1 budget; the whole budget for single-phase regimes.
    pub steps: usize,
    /// Phase-2 budget of `finetune` and `mixed`.
    pub second_steps: usize,
    pub lr: f64,
    /// Phase-2 peak learning rate of `finetune`, relative to `lr`.
    pub finetune_lr_factor: f64,
    pub batch: usize,
    /// Epoch count for `alternate_epoch`; derived from `steps` when absent.
    pub epochs: Option<usize>,
    pub gen_count: usize,
    pub sampler_steps: usize,
    pub seed: u64,
    pub ema_decay: f64,
    pub ema_warmup: usize,
    pub codec: LatentCodec,
    pub prediction: PredictionKind,
    pub zero_terminal: bool,
    /// Emit a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            native_res: 24,
            target_res: 32,
            steps: 2000,
            second_steps: 500,
            lr: DEFAULT_LR,
            finetune_lr_factor: 0.1,
            batch: 8,
            epochs: None,
            gen_count: 500,
            sampler_steps: DEFAULT_SAMPLER_STEPS,
            seed: 0,
            ema_decay: DEFAULT_EMA_DECAY,
            ema_warmup: DEFAULT_EMA_WARMUP,
            codec: LatentCodec::Identity,
            prediction: PredictionKind::Epsilon,
            zero_terminal: true,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub kind: RegimeKind,
    pub phases: Vec<Phase>,
    pub generation: Option<GenerationStage>,
    pub seed: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    pub ema_decay: f64,
    pub ema_warmup: usize,
    pub codec: LatentCodec,
    pub prediction: PredictionKind,
    pub zero_terminal: bool,
    pub checkpoint_every: usize,
}

fn check_res(res: usize, codec: &LatentCodec) -> Result<()> {
    let m = SPATIAL_MULTIPLE * codec.factor();
    ensure!(
        res > 0 && res.is_multiple_of(m),
        Param,
        "resolution {res} must be a positive multiple of {m} (8 x codec factor {})",
        codec.factor()
    );
    Ok(())
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.phases.is_empty(), Param, "plan has no phases");
        ensure!(self.batch >= 1, Param, "batch size must be >= 1");
        let alternating = matches!(
            self.kind,
            RegimeKind::AlternateBatch | RegimeKind::AlternateEpoch
        );
        for (i, p) in self.phases.iter().enumerate() {
            ensure!(p.steps > 0, Param, "phase {i} has a zero step budget");
            ensure!(
                !p.groups.is_empty(),
                Param,
                "phase {i} has no dataset group"
            );
            ensure!(
                p.interleave.is_none() || alternating,
                Param,
                "phase {i}: interleave rules are only valid for alternating regimes"
            );
            if p.interleave == Some(Interleave::AlternateBatch) {
                ensure!(
                    p.groups.len() >= 2,
                    Param,
                    "phase {i}: batch alternation needs two groups"
                );
            } else {
                ensure!(
                    p.groups.len() == 1,
                    Param,
                    "phase {i}: several groups need an interleave rule"
                );
            }
            p.lr.validate()?;
            for g in &p.groups {
                ensure!(!g.sources.is_empty(), Param, "phase {i} has an empty group");
                check_res(g.res, &self.codec)?;
            }
        }
        if let Some(gen) = &self.generation {
            ensure!(
                gen.after_phase < self.phases.len(),
                Param,
                "generation stage follows missing phase {}",
                gen.after_phase
            );
            ensure!(gen.count > 0, Param, "generation count must be positive");
            ensure!(
                !gen.cond_sources.is_empty(),
                Param,
                "generation needs mask sources"
            );
            check_res(gen.res, &self.codec)?;
        }
        Ok(())
    }

    /// SHA-256 of the key-sorted JSON form of the plan, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(to_sorted_json(self)?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = NoiseSchedule::default_linear();
        if self.zero_terminal {
            s.rescale_zero_terminal_snr(self.prediction.terminal_clamp())
        } else {
            Ok(s)
        }
    }

    /// Number of items a phase draws from, given the dataset sizes.
    pub fn phase_dataset_size(&self, phase: usize, primary: usize, secondary: &[usize]) -> usize {
        let generated = self.generation.as_ref().map_or(0, |g| g.count);
        self.phases[phase]
            .groups
            .iter()
            .flat_map(|g| &g.sources)
            .map(|s| match *s {
                DatasetSelector::Primary => primary,
                DatasetSelector::Secondary(i) => secondary.get(i).copied().unwrap_or(0),
                DatasetSelector::Generated => generated,
            })
            .sum()
    }
}

/// Builds the phase structure of `kind` for datasets of the given sizes.
pub fn plan_regime(
    kind: RegimeKind,
    primary: usize,
    secondary: &[usize],
    cfg: &RegimeConfig,
) -> Result<TrainingPlan> {
    ensure!(primary > 0, Data, "primary dataset is empty");
    ensure!(
        !kind.needs_secondary() || !secondary.is_empty(),
        Param,
        "regime `{kind}` needs at least one secondary dataset"
    );
    if let Some(i) = secondary.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("secondary dataset {i} is empty")));
    }
    ensure!(cfg.steps > 0, Param, "step budget must be positive");
    ensure!(cfg.batch > 0, Param, "batch size must be positive");
    check_res(cfg.native_res, &cfg.codec)?;
    check_res(cfg.target_res, &cfg.codec)?;

    let secs: Vec<DatasetSelector> = (0..secondary.len())
        .map(DatasetSelector::Secondary)
        .collect();
    let primary_group = Group {
        sources: vec![DatasetSelector::Primary],
        res: cfg.native_res,
    };
    let secondary_group = Group {
        sources: secs.clone(),
        res: cfg.target_res,
    };
    let single = |groups: Vec<Group>, steps: usize, peak: f64| Phase {
        groups,
        steps,
        lr: LrSchedule::cosine(peak, steps),
        interleave: None,
    };
    let mut generation = None;
    let phases = match kind {
        RegimeKind::VaeUpscale => {
            let mut sources = vec![DatasetSelector::Primary];
            sources.extend(&secs);
            vec![single(
                vec![Group {
                    sources,
                    res: cfg.native_res,
                }],
                cfg.steps,
                cfg.lr,
            )]
        }
        RegimeKind::Finetune => {
            ensure!(
                cfg.second_steps > 0,
                Param,
                "fine-tune budget must be positive"
            );
            ensure!(
                cfg.finetune_lr_factor > 0.0 && cfg.finetune_lr_factor < 1.0,
                Param,
                "fine-tune learning-rate factor must lie in (0, 1)"
            );
            vec![
                single(vec![primary_group], cfg.steps, cfg.lr),
                single(
                    vec![secondary_group],
                    cfg.second_steps,
                    cfg.lr * cfg.finetune_lr_factor,
                ),
            ]
        }
        RegimeKind::AlternateBatch => vec![Phase {
            groups: vec![primary_group, secondary_group],
            steps: cfg.steps,
            lr: LrSchedule::cosine(cfg.lr, cfg.steps),
            interleave: Some(Interleave::AlternateBatch),
        }],
        RegimeKind::AlternateEpoch => {
            let epoch_size = primary.min(secondary.iter().sum());
            let epoch_steps = epoch_size.div_ceil(cfg.batch);
            let epochs = cfg.epochs.unwrap_or_else(|| {
                ((cfg.steps as f64 / epoch_steps as f64).round() as usize).max(2)
            });
            ensure!(epochs > 0, Param, "epoch count must be positive");
            let total = epochs * epoch_steps;
            (0..epochs)
                .map(|e| Phase {
                    groups: vec![if e % 2 == 0 {
                        primary_group.clone()
                    } else {
                        secondary_group.clone()
                    }],
                    steps: epoch_steps,
                    lr: LrSchedule::Cosine {
                        peak: cfg.lr,
                        offset: e * epoch_steps,
                        total,
                    },
                    interleave: Some(Interleave::AlternateEpoch {
                        epoch: e,
                        epoch_size,
                    }),
                })
                .collect()
        }
        RegimeKind::Mixed => {
            ensure!(
                cfg.second_steps > 0,
                Param,
                "phase-2 budget must be positive"
            );
            ensure!(
                cfg.gen_count > 0,
                Param,
                "generation count must be positive"
            );
            generation = Some(GenerationStage {
                after_phase: 0,
                count: cfg.gen_count,
                res: cfg.target_res,
                sampler_steps: cfg.sampler_steps,
                cond_sources: secs.clone(),
            });
            let mut sources = vec![DatasetSelector::Generated];
            sources.extend(&secs);
            vec![
                single(vec![primary_group], cfg.steps, cfg.lr),
                single(
                    vec![Group {
                        sources,
                        res: cfg.target_res,
                    }],
                    cfg.second_steps,
                    cfg.lr,
                ),
            ]
        }
    };
    let plan = TrainingPlan {
        kind,
        phases,
        generation,
        seed: cfg.seed,
        batch: cfg.batch,
        adam: AdamConfig::default(),
        ema_decay: cfg.ema_decay,
        ema_warmup: cfg.ema_warmup,
        codec: cfg.codec,
        prediction: cfg.prediction,
        zero_terminal: cfg.zero_terminal,
        checkpoint_every: cfg.checkpoint_every,
    };
    plan.validate()?;
    Ok(plan)
}

/// Datasets referenced by a plan, at their stored resolution.
#[derive(Debug, Clone, Default)]
pub struct Datasets {
    pub primary: Vec<LabeledSample>,
    pub secondary: Vec<Vec<LabeledSample>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogItem {
    pub source: DatasetSelector,
    pub index: usize,
    pub op: u8,
}

/// One optimizer step: the group used and every drawn item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: usize,
    pub step: usize,
    pub group: usize,
    pub res: usize,
    pub items: Vec<LogItem>,
}

fn source_set<'a>(
    data: &'a Datasets,
    generated: &'a [LabeledSample],
    sel: DatasetSelector,
) -> Result<&'a [LabeledSample]> {
    let set = match sel {
        DatasetSelector::Primary => &data.primary[..],
        DatasetSelector::Secondary(i) => {
            data.secondary.get(i).map(|v| &v[..]).ok_or_else(|| {
                Error::Param(format!("plan references missing secondary dataset {i}"))
            })?
        }
        DatasetSelector::Generated => generated,
    };
    ensure!(!set.is_empty(), Data, "dataset {sel:?} is empty");
    Ok(set)
}

/// Rebuilds the augmented batch of a logged step.
pub fn replay_batch(
    entry: &LogEntry,
    data: &Datasets,
    generated: &[LabeledSample],
) -> Result<Vec<LabeledSample>> {
    entry
        .items
        .iter()
        .map(|it| {
            let set = source_set(data, generated, it.source)?;
            let s = set.get(it.index).ok_or_else(|| {
                Error::Data(format!("log index {} outside {:?}", it.index, it.source))
            })?;
            let base = center_crop_resize(&s.image, &s.boxes, entry.res)?;
            dihedral_augment(&base, Dihedral::new(it.op)?)
        })
        .collect()
}

/// Codec latent with the downscaled mask appended as the last channel.
pub fn to_training_tensor(sample: &LabeledSample, codec: &LatentCodec) -> Result<Tensor> {
    let latent = codec.encode(&sample.image)?;
    let mask = downscale_mask(&sample.mask, codec.factor())?;
    Tensor::concat_channels(&[&latent, &mask])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub prediction: PredictionKind,
    pub codec: LatentCodec,
    pub schedule: NoiseSchedule,
    pub params: ParamSet,
    pub ema: ParamSet,
    pub plan: Option<TrainingPlan>,
    pub plan_fingerprint: String,
    pub step: u64,
    /// Resolution of the last training phase.
    pub resolution: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
    pub losses: Vec<f64>,
    pub generated: Vec<LabeledSample>,
}

const GENERATION_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Runs every phase of `plan` in order. `sink` receives periodic checkpoints
/// and the final one.
pub fn run_training(
    plan: &TrainingPlan,
    model_cfg: &DenoiserConfig,
    data: &Datasets,
    sink: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    plan.validate()?;
    ensure!(!data.primary.is_empty(), Data, "primary dataset is empty");
    let (img_c, _, _) = data.primary[0].image.chw()?;
    ensure!(
        model_cfg.in_channels == img_c + 1,
        Param,
        "denoiser expects {} input channels; images have {img_c} plus one mask channel",
        model_cfg.in_channels
    );
    let fingerprint = plan.fingerprint()?;
    let schedule = plan.schedule()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(1);
    let mut model = build_denoiser(model_cfg, &mut init_rng)?;
    let mut opt = Adam::new(&model.params, plan.adam);
    let mut ema = EmaState::new(&model.params, plan.ema_decay, plan.ema_warmup)?;
    let mut generated: Vec<LabeledSample> = Vec::new();
    let mut log = Vec::with_capacity(plan.total_steps());
    let mut losses = Vec::with_capacity(plan.total_steps());
    let mut step = 0u64;
    let mut last_res = plan.phases[0].groups[0].res;

    let snapshot = |model: &DenoiserParams, ema: &EmaState, step: u64, res: usize| {
        let mut shadow = ema.shadow.clone();
        shadow.round_to_f32();
        Checkpoint {
            config: model.config.clone(),
            prediction: plan.prediction,
            codec: plan.codec,
            schedule: schedule.clone(),
            params: model.params.clone(),
            ema: shadow,
            plan: Some(plan.clone()),
            plan_fingerprint: fingerprint.clone(),
            step,
            resolution: res,
        }
    };

    for (pi, phase) in plan.phases.iter().enumerate() {
        // Item lists per group, in selector order.
        let pools: Vec<Vec<(DatasetSelector, usize)>> = phase
            .groups
            .iter()
            .map(|g| {
                let mut pool = Vec::new();
                for &sel in &g.sources {
                    let n = source_set(data, &generated, sel)?.len();
                    pool.extend((0..n).map(|i| (sel, i)));
                }
                Ok(pool)
            })
            .collect::<Result<_>>()?;
        let mut resized: HashMap<(DatasetSelector, usize), LabeledSample> = HashMap::new();
        let epoch_order: Option<Vec<(DatasetSelector, usize)>> = match phase.interleave {
            Some(Interleave::AlternateEpoch { epoch_size, .. }) => {
                let mut order = pools[0].clone();
                order.shuffle(&mut rng);
                order.truncate(epoch_size);
                Some(order)
            }
            _ => None,
        };
        for s in 0..phase.steps {
            let gi = match phase.interleave {
                Some(Interleave::AlternateBatch) => s % phase.groups.len(),
                _ => 0,
            };
            let res = phase.groups[gi].res;
            let picks: Vec<(DatasetSelector, usize)> = match &epoch_order {
                Some(order) => {
                    let lo = (s * plan.batch).min(order.len());
                    let hi = ((s + 1) * plan.batch).min(order.len());
                    order[lo..hi].to_vec()
                }
                None => (0..plan.batch)
                    .map(|_| pools[gi][rng.gen_range(0..pools[gi].len())])
                    .collect(),
            };
            ensure!(
                !picks.is_empty(),
                Param,
                "phase {pi} step {s} has an empty batch"
            );
            let items: Vec<LogItem> = picks
                .into_iter()
                .map(|(source, index)| LogItem {
                    source,
                    index,
                    op: rng.gen_range(0..8u8),
                })
                .collect();
            let mut x0 = Vec::with_capacity(items.len());
            for it in &items {
                if let std::collections::hash_map::Entry::Vacant(e) =
                    resized.entry((it.source, it.index))
                {
                    let src = &source_set(data, &generated, it.source)?[it.index];
                    e.insert(center_crop_resize(&src.image, &src.boxes, res)?);
                }
                let aug =
                    dihedral_augment(&resized[&(it.source, it.index)], Dihedral::new(it.op)?)?;
                x0.push(to_training_tensor(&aug, &plan.codec)?);
            }
            let draws = draw_noise(&x0, &schedule, &mut rng);
            let (loss, grads) =
                loss_and_grad_with_draws(&model, &schedule, plan.prediction, &x0, &draws).map_err(
                    |e| match e {
                        Error::Numeric(m) => Error::Numeric(format!("training step {step}: {m}")),
                        other => other,
                    },
                )?;
            opt.step(&mut model.params, &grads, phase.lr.lr(s))?;
            model.params.round_to_f32();
            ema.update(&model.params)?;
            losses.push(loss);
            log.push(LogEntry {
                phase: pi,
                step: step as usize,
                group: gi,
                res,
                items,
            });
            step += 1;
            last_res = res;
            if plan.checkpoint_every > 0 && step.is_multiple_of(plan.checkpoint_every as u64) {
                sink(&snapshot(&model, &ema, step, last_res))?;
            }
        }
        if let Some(gen) = plan.generation.as_ref().filter(|g| g.after_phase == pi) {
            let ckpt = snapshot(&model, &ema, step, last_res);
            let mut masks = Vec::new();
            for &sel in &gen.cond_sources {
                for s in source_set(data, &generated, sel)? {
                    masks.push(center_crop_resize(&s.image, &s.boxes, gen.res)?.boxes);
                }
            }
            let cfg = GenerateConfig {
                res: gen.res,
                sampler_steps: gen.sampler_steps,
                sampler: SamplerOptions {
                    kind: plan.prediction,
                    clip_x0: true,
                },
                seed: plan.seed ^ GENERATION_SALT,
            };
            generated = generate_samples(&ckpt, gen.count, &cfg, &CondSource::Resample(masks))?
                .into_iter()
                .map(|g| g.sample)
                .collect();
        }
    }
    let checkpoint = snapshot(&model, &ema, step, last_res);
    sink(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        losses,
        generated,
    })
}

/// Where generation-time conditioning masks come from. Box coordinates are
/// at the generation resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum CondSource {
    Unconditional,
    /// Each sample draws one box set at random and applies a random dihedral
    /// transform.
    Resample(Vec<Vec<BBox>>),
    /// Sample `i` uses box set `i mod len` as is.
    Fixed(Vec<Vec<BBox>>),
    RandomBoxes(RandomBoxes),
}

/// Random non-touching boxes with sides drawn as fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomBoxes {
    pub max_boxes: usize,
    pub min_side: f64,
    pub max_side: f64,
}

impl Default for RandomBoxes {
    fn default() -> Self {
        Self {
            max_boxes: 2,
            min_side: 0.2,
            max_side: 0.5,
        }
    }
}

impl RandomBoxes {
    pub fn draw(&self, res: usize, rng: &mut impl Rng) -> Result<Vec<BBox>> {
        ensure!(
            self.max_boxes >= 1,
            Param,
            "random boxes need max_boxes >= 1"
        );
        ensure!(
            0.0 < self.min_side && self.min_side <= self.max_side && self.max_side <= 1.0,
            Param,
            "random box side range [{}, {}] must lie in (0, 1]",
            self.min_side,
            self.max_side
        );
        let count = rng.gen_range(1..=self.max_boxes);
        let mut boxes: Vec<BBox> = Vec::new();
        for _ in 0..count {
            for _ in 0..100 {
                let side = |rng: &mut dyn rand::RngCore| {
                    ((rng.gen_range(self.min_side..=self.max_side) * res as f64).round() as usize)
                        .clamp(1, res)
                };
                let (w, h) = (side(rng), side(rng));
                let b = BBox::new(rng.gen_range(0..=res - w), rng.gen_range(0..=res - h), w, h);
                let apart = |o: &BBox| {
                    o.right() < b.x || b.right() < o.x || o.bottom() < b.y || b.bottom() < o.y
                };
                if boxes.iter().all(apart) {
                    boxes.push(b);
                    break;
                }
            }
        }
        boxes.sort();
        Ok(boxes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub res: usize,
    pub sampler_steps: usize,
    pub sampler: SamplerOptions,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    /// Decoded image with boxes extracted from the generated mask channel.
    pub sample: LabeledSample,
    pub cond_boxes: Option<Vec<BBox>>,
    /// Generated mask channel at latent resolution.
    pub mask: Tensor,
}

/// Samples `n` images from the checkpoint's EMA weights. Sample `i` uses its
/// own RNG stream, so results do not depend on scheduling.
pub fn generate_samples(
    ckpt: &Checkpoint,
    n: usize,
    cfg: &GenerateConfig,
    cond: &CondSource,
) -> Result<Vec<GeneratedSample>> {
    check_res(cfg.res, &ckpt.codec)
        .map_err(|e| Error::Param(format!("generation resolution mismatch: {e}")))?;
    match cond {
        CondSource::Resample(v) | CondSource::Fixed(v) => {
            ensure!(!v.is_empty(), Param, "no conditioning masks to draw from");
            for boxes in v {
                for b in boxes {
                    b.validate(cfg.res, cfg.res)?;
                }
            }
        }
        CondSource::RandomBoxes(_) | CondSource::Unconditional => {}
    }
    let f = ckpt.codec.factor();
    let lat = cfg.res / f;
    let sub = ckpt.schedule.subsequence(cfg.sampler_steps)?;
    let model = DenoiserParams {
        config: ckpt.config.clone(),
        params: ckpt.ema.clone(),
    };
    let c = ckpt.config.in_channels;
    exec::try_map_indexed(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let cond_boxes = match cond {
            CondSource::Unconditional => None,
            CondSource::Fixed(v) => Some(v[i % v.len()].clone()),
            CondSource::Resample(v) => {
                let boxes = &v[rng.gen_range(0..v.len())];
                let op = Dihedral::new(rng.gen_range(0..8u8))?;
                let mut out: Vec<BBox> = boxes.iter().map(|b| op.apply_box(cfg.res, b)).collect();
                out.sort();
                Some(out)
            }
            CondSource::RandomBoxes(r) => Some(r.draw(cfg.res, &mut rng)?),
        };
        let cond_mask = match &cond_boxes {
            Some(b) => Some(downscale_mask(&boxes_to_mask(b, cfg.res, cfg.res)?, f)?),
            None => None,
        };
        let (latent, mask) = ddpm_sample(
            &model,
            &ckpt.schedule,
            &sub,
            &cfg.sampler,
            [c, lat, lat],
            cond_mask.as_ref(),
            &mut rng,
        )?;
        let image = ckpt.codec.decode(&latent)?.map(|v| v.clamp(-1.0, 1.0));
        let boxes = extract_boxes(&mask, 0.0, DEFAULT_MIN_AREA_FRAC)?
            .into_iter()
            .map(|b| BBox::new(b.x * f, b.y * f, b.w * f, b.h * f))
            .collect();
        Ok(GeneratedSample {
            sample: LabeledSample::new(image, boxes)?,
            cond_boxes,
            mask,
        })
    })
}

/// Generates `n` samples and writes them as PNGs plus a manifest.
pub fn generate_dataset(
    ckpt: &Checkpoint,
    n: usize,
    cfg: &GenerateConfig,
    cond: &CondSource,
    out_dir: &Path,
) -> Result<Manifest> {
    let samples: Vec<LabeledSample> = generate_samples(ckpt, n, cfg, cond)?
        .into_iter()
        .map(|g| g.sample)
        .collect();
    write_samples(out_dir, &samples, "gen_")
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFCKPT01";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    role: String,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DenoiserConfig,
    prediction: PredictionKind,
    codec: LatentCodec,
    schedule: ScheduleDescriptor,
    schedule_arrays: Vec<ArrayEntry>,
    tensors: Vec<TensorEntry>,
    plan: Option<TrainingPlan>,
    plan_fingerprint: String,
    step: u64,
    resolution: usize,
}

impl Checkpoint {
    pub fn model(&self) -> DenoiserParams {
        DenoiserParams {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn ema_model(&self) -> DenoiserParams {
        DenoiserParams {
            config: self.config.clone(),
            params: self.ema.clone(),
        }
    }

    /// Magic, `u64` header length, key-sorted JSON header, then the data
    /// blob: parameters and EMA shadow as `f32`, schedule arrays as `f64`,
    /// all little endian. Offsets in the header are relative to the blob.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (role, set) in [("params", &self.params), ("ema", &self.ema)] {
            for t in set.tensors() {
                tensors.push(TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                    offset: blob.len(),
                    role: role.into(),
                });
                for &v in &t.data {
                    blob.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        let mut schedule_arrays = Vec::new();
        for (name, arr) in self.schedule.arrays() {
            schedule_arrays.push(ArrayEntry {
                name: name.into(),
                dtype: "f64".into(),
                offset: blob.len(),
                len: arr.len(),
            });
            for &v in arr {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            config: self.config.clone(),
            prediction: self.prediction,
            codec: self.codec,
            schedule: self.schedule.descriptor(),
            schedule_arrays,
            tensors,
            plan: self.plan.clone(),
            plan_fingerprint: self.plan_fingerprint.clone(),
            step: self.step,
            resolution: self.resolution,
        };
        let json = to_sorted_json(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Data(m);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])
            .map_err(|e| bad(format!("bad checkpoint header: {e}")))?;
        let blob = &bytes[hend..];
        let slice = |offset: usize, len: usize| -> Result<&[u8]> {
            offset
                .checked_add(len)
                .filter(|&e| e <= blob.len())
                .map(|e| &blob[offset..e])
                .ok_or_else(|| {
                    bad(format!(
                        "checkpoint data range {offset}+{len} out of bounds"
                    ))
                })
        };
        let mut params = ParamSet::new();
        let mut ema = ParamSet::new();
        for t in &header.tensors {
            ensure!(
                t.dtype == "f32",
                Data,
                "tensor `{}` has unsupported dtype {}",
                t.name,
                t.dtype
            );
            let n: usize = t.shape.iter().product();
            let data = slice(t.offset, 4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            match t.role.as_str() {
                "params" => params.push(t.name.clone(), t.shape.clone(), data),
                "ema" => ema.push(t.name.clone(), t.shape.clone(), data),
                r => return Err(bad(format!("tensor `{}` has unknown role `{r}`", t.name))),
            };
        }
        let mut arrays: [Vec<f64>; 5] = Default::default();
        let names = NoiseSchedule::default_linear().arrays().map(|(n, _)| n);
        for (slot, name) in arrays.iter_mut().zip(names) {
            let a = header
                .schedule_arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| bad(format!("schedule array `{name}` missing")))?;
            ensure!(
                a.dtype == "f64",
                Data,
                "schedule array `{name}` must be f64"
            );
            *slot = slice(a.offset, 8 * a.len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
        }
        let schedule = NoiseSchedule::from_parts(&header.schedule, arrays)?;
        let reference = build_denoiser(&header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        ensure!(
            reference.params.same_layout(&params) && reference.params.same_layout(&ema),
            Data,
            "checkpoint tensors do not match the stored denoiser configuration"
        );
        Ok(Self {
            config: header.config,
            prediction: header.prediction,
            codec: header.codec,
            schedule,
            params,
            ema,
            plan: header.plan,
            plan_fingerprint: header.plan_fingerprint,
            step: header.step,
            resolution: header.resolution,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::format(path, m),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{forward_tensor, AttentionFlags};
    use crate::toy::{toy_dataset, ToyConfig};

    fn tiny_model() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 4,
            base_width: 4,
            channel_multipliers: [1, 1, 2],
            layers_per_block: 1,
            attention: AttentionFlags::none(),
            time_embed_dim: 8,
            ..Default::default()
        }
    }

    fn cfg() -> RegimeConfig {
        RegimeConfig {
            native_res: 16,
            target_res: 16,
            steps: 6,
            second_steps: 4,
            batch: 2,
            gen_count: 3,
            sampler_steps: 4,
            ema_decay: 0.9,
            ema_warmup: 0,
            ..Default::default()
        }
    }

    #[test]
    fn regime_names_round_trip() {
        for k in RegimeKind::ALL {
            assert_eq!(k.cli_name().parse::<RegimeKind>().unwrap(), k);
        }
        assert_eq!(
            "alternate_batch".parse::<RegimeKind>().unwrap(),
            RegimeKind::AlternateBatch
        );
        assert!("sideways".parse::<RegimeKind>().is_err());
    }

    #[test]
    fn plan_shapes() {
        let c = cfg();
        let ft = plan_regime(RegimeKind::Finetune, 5, &[7], &c).unwrap();
        assert_eq!(ft.phases.len(), 2);
        assert!(ft.phases[1].lr.peak() < ft.phases[0].lr.peak());
        let mixed = plan_regime(
            RegimeKind::Mixed,
            5,
            &[7],
            &RegimeConfig {
                gen_count: 100,
                ..c.clone()
            },
        )
        .unwrap();
        assert_eq!(mixed.phase_dataset_size(1, 5, &[7]), 107);
        let ep = plan_regime(
            RegimeKind::AlternateEpoch,
            5,
            &[7],
            &RegimeConfig {
                epochs: Some(4),
                ..c.clone()
            },
        )
        .unwrap();
        assert_eq!(ep.phases.len(), 4);
        assert!(matches!(
            plan_regime(RegimeKind::AlternateBatch, 5, &[], &c),
            Err(Error::Param(_))
        ));
        assert!(plan_regime(RegimeKind::VaeUpscale, 5, &[], &c).is_ok());
        assert!(plan_regime(
            RegimeKind::VaeUpscale,
            5,
            &[],
            &RegimeConfig {
                native_res: 12,
                ..c
            }
        )
        .is_err());
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let data = Datasets {
            primary: toy_dataset(&ToyConfig::new(16), 4, 1, 0).unwrap(),
            secondary: vec![toy_dataset(&ToyConfig::new(16), 3, 2, 0).unwrap()],
        };
        let plan = plan_regime(RegimeKind::AlternateBatch, 4, &[3], &cfg()).unwrap();
        let mut count = 0;
        let a = run_training(&plan, &tiny_model(), &data, &mut |_| {
            count += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(count, 1);
        let b = run_training(&plan, &tiny_model(), &data, &mut |_| Ok(())).unwrap();
        let bytes = a.checkpoint.to_bytes().unwrap();
        assert_eq!(bytes, b.checkpoint.to_bytes().unwrap());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, a.checkpoint);
        let x = Tensor::from_fn(&[4, 16, 16], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
        assert_eq!(
            forward_tensor(&back.model(), &x, 17).unwrap(),
            forward_tensor(&a.checkpoint.model(), &x, 17).unwrap()
        );
        let groups: Vec<usize> = a.log.iter().map(|e| e.group).collect();
        assert_eq!(groups, vec![0, 1, 0, 1, 0, 1]);
        for e in &a.log {
            assert_eq!(replay_batch(e, &data, &[]).unwrap().len(), 2);
        }
        assert!(Checkpoint::from_bytes(&bytes[..40]).is_err());
    }

    #[test]
    fn generation_contract() {
        let data = Datasets {
            primary: toy_dataset(&ToyConfig::new(16), 4, 1, 0).unwrap(),
            secondary: vec![],
        };
        let plan = plan_regime(RegimeKind::VaeUpscale, 4, &[], &cfg()).unwrap();
        let out = run_training(&plan, &tiny_model(), &data, &mut |_| Ok(())).unwrap();
        let gc = GenerateConfig {
            res: 24,
            sampler_steps: 3,
            sampler: SamplerOptions::default(),
            seed: 4,
        };
        let g = generate_samples(
            &out.checkpoint,
            3,
            &gc,
            &CondSource::RandomBoxes(RandomBoxes::default()),
        )
        .unwrap();
        assert_eq!(g.len(), 3);
        for s in &g {
            assert_eq!(s.sample.image.shape(), &[3, 24, 24]);
            assert_eq!(Some(&s.sample.boxes), s.cond_boxes.as_ref());
        }
        assert_eq!(
            g,
            generate_samples(
                &out.checkpoint,
                3,
                &gc,
                &CondSource::RandomBoxes(RandomBoxes::default())
            )
            .unwrap()
        );
        let bad = GenerateConfig { res: 20, ..gc };
        assert!(generate_samples(&out.checkpoint, 1, &bad, &CondSource::Unconditional).is_err());
    }
}

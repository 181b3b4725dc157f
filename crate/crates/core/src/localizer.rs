//! Reference localizer: a 4-layer convolutional backbone with a grid head
//! predicting per-cell objectness and one box per cell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Padding, ParamSet, Var};
use crate::denoiser::gradient;
use crate::error::{ensure, Error, Result};
use crate::exec;
use crate::loceval::{mean_average_precision, nms, Detection};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::spatial::{dihedral_augment, BBox, Dihedral, LabeledSample};
use crate::tensor::Tensor;

/// Side of one grid cell in pixels (three 2x poolings).
pub const CELL: usize = 8;
pub const HEAD_CHANNELS: usize = 5;
pub const NMS_IOU: f64 = 0.5;
pub const MIN_SCORE: f64 = 0.01;
const OBJECTNESS_PRIOR: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    pub in_channels: usize,
    pub widths: [usize; 4],
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [16, 32, 32, 32],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Peak Adam learning rate, decayed to zero by a cosine schedule.
    pub lr: f64,
    /// Random dihedral transform per drawn sample.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 313,
            batch: 8,
            lr: 2e-3,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerParams {
    pub config: LocalizerConfig,
    pub params: ParamSet,
}

pub fn build_localizer(cfg: &LocalizerConfig, rng: &mut impl Rng) -> Result<LocalizerParams> {
    ensure!(
        cfg.in_channels > 0 && cfg.widths.iter().all(|&w| w > 0),
        Param,
        "localizer widths must be positive"
    );
    let mut ps = ParamSet::new();
    let mut cin = cfg.in_channels;
    let conv = |ps: &mut ParamSet,
                name: &str,
                cin: usize,
                cout: usize,
                k: usize,
                rng: &mut dyn rand::RngCore,
                bias: f64| {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let w = (0..cout * cin * k * k)
            .map(|_| normal.sample(rng))
            .collect();
        ps.push(format!("{name}.weight"), vec![cout, cin, k, k], w);
        ps.push(format!("{name}.bias"), vec![cout], vec![bias; cout]);
    };
    for (i, &w) in cfg.widths.iter().enumerate() {
        conv(&mut ps, &format!("conv{i}"), cin, w, 3, rng, 0.0);
        cin = w;
    }
    conv(&mut ps, "head", cin, HEAD_CHANNELS, 1, rng, 0.0);
    let hb = ps.index_of("head.bias").unwrap();
    ps.tensors_mut()[hb].data[0] = OBJECTNESS_PRIOR;
    Ok(LocalizerParams {
        config: *cfg,
        params: ps,
    })
}

impl LocalizerParams {
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        ensure!(
            shape.len() == 3 && shape[0] == self.config.in_channels,
            Shape,
            "localizer expects ({}, H, W) input, got {shape:?}",
            self.config.in_channels
        );
        ensure!(
            shape[1].is_multiple_of(CELL)
                && shape[2].is_multiple_of(CELL)
                && shape[1] > 0
                && shape[2] > 0,
            Shape,
            "localizer input {}x{} is not a multiple of {CELL}",
            shape[1],
            shape[2]
        );
        Ok(())
    }

    /// Raw head output `(5, H/8, W/8)`: objectness logit, then cell-relative
    /// center offsets and log box size in cell units.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = x;
        for i in 0..4 {
            let w = g.param(&format!("conv{i}.weight"));
            let b = g.param(&format!("conv{i}.bias"));
            h = g.conv2d(h, w, Some(b), Padding::Zeros);
            h = g.silu(h);
            if i < 3 {
                h = g.avg_pool2(h);
            }
        }
        let w = g.param("head.weight");
        let b = g.param("head.bias");
        g.conv2d(h, w, Some(b), Padding::Zeros)
    }
}

/// Grid targets and loss weights for one sample. A box belongs to the cell
/// containing its center; when two centers share a cell the larger box wins.
pub fn encode_targets(boxes: &[BBox], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let (gh, gw) = (h / CELL, w / CELL);
    let cells = gh * gw;
    let mut target = vec![0.0; HEAD_CHANNELS * cells];
    let mut weight = vec![0.0; HEAD_CHANNELS * cells];
    let mut owner: Vec<Option<usize>> = vec![None; cells];
    let c = CELL as f64;
    for b in boxes {
        let cx = b.x as f64 + b.w as f64 / 2.0;
        let cy = b.y as f64 + b.h as f64 / 2.0;
        let j = ((cx / c) as usize).min(gw - 1);
        let i = ((cy / c) as usize).min(gh - 1);
        let cell = i * gw + j;
        if owner[cell].is_some_and(|a| a >= b.area()) {
            continue;
        }
        owner[cell] = Some(b.area());
        let vals = [
            1.0,
            cx / c - j as f64,
            cy / c - i as f64,
            (b.w as f64 / c).ln(),
            (b.h as f64 / c).ln(),
        ];
        for (ch, v) in vals.into_iter().enumerate() {
            target[ch * cells + cell] = v;
            weight[ch * cells + cell] = 1.0;
        }
    }
    weight[..cells].fill(1.0);
    (target, weight)
}

fn sample_loss(params: &LocalizerParams, s: &LabeledSample) -> Result<(f64, Vec<Vec<f64>>)> {
    params.check_input(s.image.shape())?;
    let (h, w) = (s.height(), s.width());
    let (target, weight) = encode_targets(&s.boxes, h, w);
    let cells = (h / CELL) * (w / CELL);
    let obj_w: Vec<f64> = (0..target.len())
        .map(|i| if i < cells { 1.0 } else { 0.0 })
        .collect();
    let mut box_w = weight;
    box_w[..cells].fill(0.0);
    let positives = target[..cells].iter().filter(|&&v| v > 0.0).count().max(1) as f64;
    gradient(&params.params, |g| {
        let x = g.input(&s.image);
        let out = params.forward(g, x);
        let obj = g.bce_logits(out, &target, &obj_w, cells as f64);
        let reg = g.smooth_l1(out, &target, &box_w, positives);
        g.add(obj, reg)
    })
}

/// Trains on `samples` from `init` (or from a seeded random init when
/// `None`). Deterministic for a given seed; zero steps returns the start.
pub fn train_localizer(
    samples: &[LabeledSample],
    init: Option<&LocalizerParams>,
    cfg: &LocalizerConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<LocalizerParams> {
    ensure!(
        !samples.is_empty(),
        Data,
        "cannot train a localizer on an empty dataset"
    );
    ensure!(train.batch >= 1, Param, "batch size must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = match init {
        Some(p) => {
            ensure!(
                p.config == *cfg,
                Param,
                "pretrained localizer has a different configuration"
            );
            p.clone()
        }
        None => build_localizer(cfg, &mut rng)?,
    };
    if train.steps == 0 {
        return Ok(model);
    }
    rng.set_stream(1);
    let sched = LrSchedule::cosine(train.lr, train.steps);
    sched.validate()?;
    let mut opt = Adam::new(&model.params, AdamConfig::default());
    for step in 0..train.steps {
        let batch: Vec<LabeledSample> = (0..train.batch)
            .map(|_| {
                let s = &samples[rng.gen_range(0..samples.len())];
                if train.augment {
                    dihedral_augment(s, Dihedral::new(rng.gen_range(0..8))?)
                } else {
                    Ok(s.clone())
                }
            })
            .collect::<Result<_>>()?;
        let parts = exec::try_map_indexed(batch.len(), |i| sample_loss(&model, &batch[i]))?;
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "localizer loss is not finite at step {step}"
            )));
        }
        let inv = 1.0 / batch.len() as f64;
        grads.iter_mut().flatten().for_each(|v| *v *= inv);
        opt.step(&mut model.params, &grads, sched.lr(step))?;
    }
    Ok(model)
}

/// Decoded detections after non-maximum suppression.
pub fn predict(params: &LocalizerParams, image: &Tensor) -> Result<Vec<Detection>> {
    params.check_input(image.shape())?;
    let (_, h, w) = image.chw()?;
    let mut g = Graph::new(&params.params);
    let x = g.input(image);
    let out = params.forward(&mut g, x);
    let v = g.value(out);
    let (gh, gw) = (h / CELL, w / CELL);
    let cells = gh * gw;
    let c = CELL as f64;
    let mut dets = Vec::new();
    for i in 0..gh {
        for j in 0..gw {
            let cell = i * gw + j;
            let score = sigmoid(v[cell]);
            if score < MIN_SCORE {
                continue;
            }
            let at = |ch: usize| v[ch * cells + cell];
            let cx = (j as f64 + at(1)) * c;
            let cy = (i as f64 + at(2)) * c;
            let bw = c * at(3).clamp(-4.0, 4.0).exp();
            let bh = c * at(4).clamp(-4.0, 4.0).exp();
            let x0 = (cx - bw / 2.0).round().clamp(0.0, w as f64) as usize;
            let x1 = (cx + bw / 2.0).round().clamp(0.0, w as f64) as usize;
            let y0 = (cy - bh / 2.0).round().clamp(0.0, h as f64) as usize;
            let y1 = (cy + bh / 2.0).round().clamp(0.0, h as f64) as usize;
            if x1 > x0 && y1 > y0 {
                dets.push(Detection::new(
                    BBox::new(x0, y0, x1 - x0, y1 - y0),
                    score.clamp(0.0, 1.0),
                )?);
            }
        }
    }
    Ok(nms(&dets, NMS_IOU))
}

/// mAP of `params` over labeled samples.
pub fn evaluate_localizer(
    params: &LocalizerParams,
    samples: &[LabeledSample],
    iou_thr: f64,
) -> Result<f64> {
    let preds = exec::try_map_indexed(samples.len(), |i| predict(params, &samples[i].image))?;
    let gts: Vec<Vec<BBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    mean_average_precision(&preds, &gts, iou_thr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{toy_dataset, ToyConfig};

    #[test]
    fn targets_use_center_cell() {
        let (t, w) = encode_targets(&[BBox::new(8, 0, 8, 16)], 16, 16);
        // Center (12, 8) lies in cell (1, 1).
        assert_eq!(t[3], 1.0);
        assert!((t[4 + 3] - 0.5).abs() < 1e-12);
        assert!((t[8 + 3] - 0.0).abs() < 1e-12);
        assert!((t[12 + 3] - 0.0).abs() < 1e-12);
        assert!((t[16 + 3] - 2f64.ln()).abs() < 1e-12);
        assert_eq!(w[..4], [1.0; 4]);
        assert_eq!(w[4 + 2], 0.0);
    }

    #[test]
    fn zero_budget_returns_init_and_runs_are_deterministic() {
        let data = toy_dataset(&ToyConfig::new(16), 4, 1, 0).unwrap();
        let cfg = LocalizerConfig {
            in_channels: 3,
            widths: [4, 4, 4, 4],
        };
        let t = TrainConfig {
            steps: 3,
            batch: 2,
            ..Default::default()
        };
        let a = train_localizer(&data, None, &cfg, &t, 5).unwrap();
        let b = train_localizer(&data, None, &cfg, &t, 5).unwrap();
        assert_eq!(a, b);
        let zero = TrainConfig { steps: 0, ..t };
        assert_eq!(train_localizer(&data, Some(&a), &cfg, &zero, 9).unwrap(), a);
        assert!(train_localizer(&[], None, &cfg, &t, 5).is_err());
    }
}

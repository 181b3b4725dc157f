//! Localization evaluation: IoU, single-class mAP, non-maximum suppression,
//! and the modality A/B transfer grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::exec;
use crate::localizer::{
    evaluate_localizer, train_localizer, LocalizerConfig, LocalizerParams, TrainConfig,
};
use crate::spatial::{BBox, LabeledSample};

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&score),
            Data,
            "detection score {score} outside [0, 1]"
        );
        Ok(Self { bbox, score })
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.right().min(b.right()).saturating_sub(a.x.max(b.x));
    let ih = a.bottom().min(b.bottom()).saturating_sub(a.y.max(b.y));
    let inter = (iw * ih) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Single-class average precision over a set of images.
///
/// Detections from all images are ranked by score (ties: earlier image,
/// then earlier position). Each is matched to the unmatched ground truth of
/// its image with the highest IoU, provided that IoU is at least `iou_thr`
/// (ties: lower ground-truth index). AP is the area under the monotone
/// precision envelope. With no ground truth at all the result is 0.
pub fn mean_average_precision(
    preds: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_thr: f64,
) -> Result<f64> {
    ensure!(
        preds.len() == gts.len(),
        Param,
        "{} prediction lists for {} images",
        preds.len(),
        gts.len()
    );
    ensure!(
        (0.0..=1.0).contains(&iou_thr),
        Param,
        "IoU threshold {iou_thr} outside [0, 1]"
    );
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<(usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    // Stable sort keeps input order among equal scores.
    order.sort_by(|a, b| preds[b.0][b.1].score.total_cmp(&preds[a.0][a.1].score));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (k, &(img, j)) in order.iter().enumerate() {
        let det = &preds[img][j];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts[img].iter().enumerate() {
            if matched[img][gi] {
                continue;
            }
            let v = iou(&det.bbox, g);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            matched[img][gi] = true;
            tp += 1;
        }
        points.push((tp, tp as f64 / (k + 1) as f64));
    }

    // Every recall step has width 1 / total_gt, so the area is the envelope
    // summed over true positives, divided once at the end.
    let mut area = 0.0;
    let mut envelope = 0.0f64;
    for i in (0..points.len()).rev() {
        let (t, p) = points[i];
        envelope = envelope.max(p);
        let t_before = if i == 0 { 0 } else { points[i - 1].0 };
        if t > t_before {
            area += envelope;
        }
    }
    Ok(area / total_gt as f64)
}

/// Greedy non-maximum suppression: keeps detections in score order, dropping
/// any whose IoU with an already kept one exceeds `iou_thr`.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thr) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub subset_size: usize,
    pub modality: Modality,
    pub pretrain: Option<String>,
    pub seed: u64,
    /// mAP per benchmark name.
    pub map: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub iou_threshold: f64,
}

impl GridResult {
    /// Mean mAP over seeds and benchmarks for one (size, modality).
    pub fn mean_map(&self, size: usize, modality: Modality) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.subset_size == size && c.modality == modality)
            .flat_map(|c| c.map.values().copied())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridBudgets {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Budget for modality A; defaults to the fine-tune budget.
    pub scratch: TrainConfig,
}

/// A named set of labeled samples.
#[derive(Debug, Clone)]
pub struct NamedSet {
    pub name: String,
    pub samples: Vec<LabeledSample>,
}

/// Draws `n` distinct indices out of `0..len`, deterministically per seed.
pub fn draw_subset(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    ensure!(
        n <= len,
        Param,
        "subset size {n} exceeds the {len} available samples"
    );
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n);
    Ok(idx)
}

/// Runs modality A (scratch) and modality B (synthetic pretraining, then
/// fine-tuning) for every subset size and seed, evaluating each trained
/// localizer on every benchmark.
#[allow(clippy::too_many_arguments)]
pub fn transfer_grid(
    real: &[LabeledSample],
    synthetic: &[NamedSet],
    benchmarks: &[NamedSet],
    sizes: &[usize],
    seeds: &[u64],
    model: &LocalizerConfig,
    budgets: &GridBudgets,
    iou_thr: f64,
) -> Result<GridResult> {
    ensure!(
        !sizes.is_empty() && !seeds.is_empty(),
        Param,
        "grid needs at least one size and seed"
    );
    ensure!(
        !benchmarks.is_empty(),
        Param,
        "grid needs at least one benchmark"
    );
    for &n in sizes {
        ensure!(n >= 1, Param, "subset sizes must be positive");
        ensure!(
            n <= real.len(),
            Param,
            "subset size {n} exceeds the {} real samples",
            real.len()
        );
    }

    let pre_keys: Vec<(usize, u64)> = (0..synthetic.len())
        .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let pretrained = exec::try_map_indexed(pre_keys.len(), |i| {
        let (s, seed) = pre_keys[i];
        train_localizer(&synthetic[s].samples, None, model, &budgets.pretrain, seed)
    })?;
    let pre_of = |s: usize, seed: u64| -> &LocalizerParams {
        let i = pre_keys.iter().position(|&k| k == (s, seed)).unwrap();
        &pretrained[i]
    };

    let mut jobs: Vec<(usize, u64, Option<usize>)> = Vec::new();
    for &n in sizes {
        for &seed in seeds {
            jobs.push((n, seed, None));
            for s in 0..synthetic.len() {
                jobs.push((n, seed, Some(s)));
            }
        }
    }
    let cells = exec::try_map_indexed(jobs.len(), |i| {
        let (n, seed, syn) = jobs[i];
        let subset: Vec<LabeledSample> = draw_subset(real.len(), n, seed)?
            .into_iter()
            .map(|j| real[j].clone())
            .collect();
        let params = match syn {
            None => train_localizer(&subset, None, model, &budgets.scratch, seed)?,
            Some(s) => train_localizer(
                &subset,
                Some(pre_of(s, seed)),
                model,
                &budgets.finetune,
                seed,
            )?,
        };
        let mut map = BTreeMap::new();
        for b in benchmarks {
            map.insert(
                b.name.clone(),
                evaluate_localizer(&params, &b.samples, iou_thr)?,
            );
        }
        Ok::<_, Error>(GridCell {
            subset_size: n,
            modality: if syn.is_some() {
                Modality::B
            } else {
                Modality::A
            },
            pretrain: syn.map(|s| synthetic[s].name.clone()),
            seed,
            map,
        })
    })?;
    Ok(GridResult {
        cells,
        iou_threshold: iou_thr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: usize, y: usize, w: usize, h: usize) -> BBox {
        BBox::new(x, y, w, h)
    }

    fn d(bx: BBox, s: f64) -> Detection {
        Detection::new(bx, s).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(1, 1, 3, 3), &b(1, 1, 3, 3)), 1.0);
        assert_eq!(iou(&b(0, 0, 2, 2), &b(5, 5, 2, 2)), 0.0);
        assert!((iou(&b(0, 0, 2, 2), &b(1, 0, 2, 2)) - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou(&b(0, 0, 2, 2), &b(2, 0, 2, 2)), 0.0);
    }

    #[test]
    fn map_perfect_and_empty() {
        let gts = vec![vec![b(0, 0, 4, 4)], vec![b(2, 2, 3, 3), b(8, 8, 2, 2)]];
        let perfect: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|&x| d(x, 1.0)).collect())
            .collect();
        assert_eq!(mean_average_precision(&perfect, &gts, 0.5).unwrap(), 1.0);
        assert_eq!(
            mean_average_precision(&[vec![], vec![]], &gts, 0.5).unwrap(),
            0.0
        );
    }

    #[test]
    fn map_fp_between_tps() {
        let gts = vec![vec![b(0, 0, 4, 4)], vec![b(0, 0, 4, 4)], vec![]];
        let preds = vec![
            vec![d(b(0, 0, 4, 4), 0.9)],
            vec![d(b(0, 0, 4, 4), 0.7)],
            vec![d(b(0, 0, 4, 4), 0.8)],
        ];
        // Ranks: TP (p=1, r=.5), FP, TP (p=2/3, r=1).
        let ap = mean_average_precision(&preds, &gts, 0.5).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = vec![vec![b(0, 0, 4, 4)]];
        let preds = vec![vec![d(b(0, 0, 4, 4), 0.9), d(b(0, 0, 4, 4), 0.95)]];
        assert_eq!(mean_average_precision(&preds, &gts, 0.5).unwrap(), 1.0);
        let kept = nms(&preds[0], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.95);
    }

    #[test]
    fn subsets_are_distinct_and_seeded() {
        let s = draw_subset(50, 10, 1).unwrap();
        let mut u = s.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 10);
        assert_eq!(s, draw_subset(50, 10, 1).unwrap());
        assert!(draw_subset(5, 6, 1).is_err());
    }
}

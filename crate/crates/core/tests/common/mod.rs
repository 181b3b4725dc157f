//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. They favour obviousness over speed.

#![allow(dead_code)]

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, ToPrimitive, Zero};
use polyforge_core::autograd::finite_difference;
use polyforge_core::denoiser::DenoiserParams;
use polyforge_core::diffusion::{
    draw_noise, loss_and_grad_with_draws, loss_with_draws, NoisePredictor, PredictionKind,
};
use polyforge_core::loceval::Detection;
use polyforge_core::schedule::NoiseSchedule;
use polyforge_core::spatial::BBox;
use polyforge_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Exact cumulative product of `1 - beta_i` for a linear schedule whose
/// endpoints are given as rationals `num / den`.
pub fn alpha_bar_rational(steps: usize, start: (i64, i64), end: (i64, i64)) -> Vec<f64> {
    let r = |(n, d): (i64, i64)| BigRational::new(BigInt::from(n), BigInt::from(d));
    let (b0, b1) = (r(start), r(end));
    let span = BigRational::from_integer(BigInt::from(steps as i64 - 1));
    let mut acc = BigRational::one();
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let frac = BigRational::from_integer(BigInt::from(i as i64)) / &span;
        let beta = &b0 + (&b1 - &b0) * frac;
        acc *= BigRational::one() - beta;
        out.push(acc.to_f64().unwrap());
    }
    out
}

/// Squared Euclidean distance, plain loop.
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

pub fn rows(matrix: &[f64], dim: usize) -> Vec<&[f64]> {
    matrix.chunks(dim).collect()
}

/// 1-NN distances by full pairwise scan.
pub fn first_neighbor_oracle(points: &[&[f64]]) -> Vec<f64> {
    (0..points.len())
        .map(|i| {
            (0..points.len())
                .filter(|&j| j != i)
                .map(|j| dist2(points[i], points[j]).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Components of the `< threshold` graph by boolean transitive closure
/// (Warshall), as sorted id groups sorted by their first id.
pub fn closure_components(points: &[&[f64]], ids: &[String], threshold: f64) -> Vec<Vec<String>> {
    let n = points.len();
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        reach[i][i] = true;
        for j in 0..n {
            if i != j && dist2(points[i], points[j]).sqrt() < threshold {
                reach[i][j] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let mut groups: Vec<Vec<String>> = Vec::new();
    let mut done = vec![false; n];
    for i in 0..n {
        if done[i] {
            continue;
        }
        let mut g: Vec<String> = (0..n)
            .filter(|&j| reach[i][j])
            .map(|j| ids[j].clone())
            .collect();
        for j in 0..n {
            if reach[i][j] {
                done[j] = true;
            }
        }
        g.sort();
        groups.push(g);
    }
    groups.sort();
    groups
}

/// Precision and recall by sorting all in-set distances per point.
pub fn pr_oracle(real: &[&[f64]], gen: &[&[f64]], k: usize) -> (f64, f64) {
    let radii = |set: &[&[f64]]| -> Vec<f64> {
        (0..set.len())
            .map(|i| {
                let mut d: Vec<f64> = (0..set.len())
                    .filter(|&j| j != i)
                    .map(|j| dist2(set[i], set[j]))
                    .collect();
                d.sort_by(f64::total_cmp);
                d[k - 1]
            })
            .collect()
    };
    let frac = |support: &[&[f64]], r: &[f64], q: &[&[f64]]| {
        let hits = q
            .iter()
            .filter(|x| support.iter().zip(r).any(|(s, rr)| dist2(x, s) <= *rr))
            .count();
        hits as f64 / q.len() as f64
    };
    let (rr, gr) = (radii(real), radii(gen));
    (frac(real, &rr, gen), frac(gen, &gr, real))
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w).saturating_sub(a.x.max(b.x));
    let iy = (a.y + a.h).min(b.y + b.h).saturating_sub(a.y.max(b.y));
    let inter = (ix * iy) as f64;
    inter / ((a.w * a.h + b.w * b.h) as f64 - inter)
}

/// AP from the full PR curve in exact rational arithmetic: every prefix of
/// the ranking is a curve point; for each point the interpolated precision is
/// the best precision at any point with recall at least as high.
pub fn map_oracle(preds: &[Vec<Detection>], gts: &[Vec<BBox>], thr: f64) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let q = |n: usize, d: usize| BigRational::new(BigInt::from(n), BigInt::from(d));
    let mut flat: Vec<(f64, usize, BBox)> = Vec::new();
    for (img, p) in preds.iter().enumerate() {
        for d in p {
            flat.push((d.score, img, d.bbox));
        }
    }
    // Insertion sort: stable, descending score.
    for i in 1..flat.len() {
        let mut j = i;
        while j > 0 && flat[j - 1].0 < flat[j].0 {
            flat.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut curve: Vec<(BigRational, BigRational)> = Vec::new();
    let mut tp = 0;
    for (rank, (_, img, b)) in flat.iter().enumerate() {
        let mut best = None;
        let mut best_iou = -1.0;
        for (gi, g) in gts[*img].iter().enumerate() {
            let v = box_iou(b, g);
            if !used[*img][gi] && v >= thr && v > best_iou {
                best = Some(gi);
                best_iou = v;
            }
        }
        if let Some(gi) = best {
            used[*img][gi] = true;
            tp += 1;
        }
        curve.push((q(tp, total), q(tp, rank + 1)));
    }
    let mut ap = BigRational::zero();
    let mut prev_recall = BigRational::zero();
    for (i, (r, _)) in curve.iter().enumerate() {
        if *r > prev_recall {
            let p_interp = curve[i..].iter().map(|c| c.1.clone()).max().unwrap();
            ap += (r - &prev_recall) * p_interp;
            prev_recall = r.clone();
        }
    }
    ap.to_f64().unwrap()
}

/// Exact posterior-mean noise predictor for data `x0 ~ N(mu, I)`:
/// `E[eps | x_t] = sqrt(1 - ab) * (x_t - sqrt(ab) * mu)`.
pub struct GaussianOracle {
    pub schedule: NoiseSchedule,
    pub mu: Vec<f64>,
}

impl NoisePredictor for GaussianOracle {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let a = self.schedule.sqrt_alpha_bar()[t];
        let b = self.schedule.sqrt_one_minus_alpha_bar()[t];
        Ok(Tensor::from_fn(x.shape(), |i| {
            b * (x.data()[i] - a * self.mu[i])
        }))
    }
}

/// Random valid box inside `res x res`.
pub fn random_box(rng: &mut impl Rng, res: usize) -> BBox {
    let w = rng.gen_range(1..=res);
    let h = rng.gen_range(1..=res);
    BBox::new(rng.gen_range(0..=res - w), rng.gen_range(0..=res - h), w, h)
}

/// Tight boxes of 8-connected `> threshold` regions by repeated flood fill
/// over a visited grid, without a minimum area.
pub fn flood_fill_boxes(plane: &[f64], h: usize, w: usize, threshold: f64) -> Vec<BBox> {
    let mut label = vec![0usize; h * w];
    let mut next = 0;
    let mut boxes = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if plane[sy * w + sx] <= threshold || label[sy * w + sx] != 0 {
                continue;
            }
            next += 1;
            label[sy * w + sx] = next;
            let mut changed = true;
            while changed {
                changed = false;
                for y in 0..h {
                    for x in 0..w {
                        if label[y * w + x] != 0 || plane[y * w + x] <= threshold {
                            continue;
                        }
                        let near = (y.saturating_sub(1)..=(y + 1).min(h - 1)).any(|ny| {
                            (x.saturating_sub(1)..=(x + 1).min(w - 1))
                                .any(|nx| label[ny * w + nx] == next)
                        });
                        if near {
                            label[y * w + x] = next;
                            changed = true;
                        }
                    }
                }
            }
            let cells: Vec<(usize, usize)> = (0..h * w)
                .filter(|&p| label[p] == next)
                .map(|p| (p / w, p % w))
                .collect();
            let y0 = cells.iter().map(|c| c.0).min().unwrap();
            let y1 = cells.iter().map(|c| c.0).max().unwrap();
            let x0 = cells.iter().map(|c| c.1).min().unwrap();
            let x1 = cells.iter().map(|c| c.1).max().unwrap();
            boxes.push(BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1));
        }
    }
    boxes.sort();
    boxes
}

/// Outcome of a finite-difference gradient check.
pub struct GradCheck {
    pub max_rel: f64,
    /// Tensor names that received at least one checked coordinate.
    pub covered: Vec<String>,
}

/// Compares the analytic batch-loss gradient of `model` against central
/// differences on `coords` coordinates. Parameters are first jittered so that
/// zero-initialized layers carry signal. One coordinate is taken from every
/// tensor whose name matches an entry of `must_cover`, the rest at random.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck(
    model: &DenoiserParams,
    kind: PredictionKind,
    res: usize,
    coords: usize,
    must_cover: &[&str],
    seed: u64,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model.clone();
    let jitter = Normal::new(0.0, 0.05).unwrap();
    for t in m.params.tensors_mut() {
        for v in &mut t.data {
            *v += jitter.sample(&mut rng);
        }
    }
    let c = m.config.in_channels;
    let batch: Vec<Tensor> = (0..2)
        .map(|_| Tensor::from_fn(&[c, res, res], |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let schedule = NoiseSchedule::default_linear();
    let draws = draw_noise(&batch, &schedule, &mut rng);
    let (_, grads) = loss_and_grad_with_draws(&m, &schedule, kind, &batch, &draws).unwrap();

    let tensors = m.params.tensors();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for pat in must_cover {
        for (i, t) in tensors.iter().enumerate() {
            if t.name.contains(pat) && !picks.iter().any(|p| p.0 == i) {
                picks.push((i, rng.gen_range(0..t.data.len())));
                break;
            }
        }
    }
    while picks.len() < coords {
        let i = rng.gen_range(0..tensors.len());
        picks.push((i, rng.gen_range(0..tensors[i].data.len())));
    }
    let floor = 1e-6;
    let mut max_rel: f64 = 0.0;
    for &(ti, ei) in &picks {
        let numeric = finite_difference(&m.params, ti, ei, 1e-5, |p| {
            let mut probe = m.clone();
            probe.params = p.clone();
            loss_with_draws(&probe, &schedule, kind, &batch, &draws).unwrap()
        });
        let analytic = grads[ti][ei];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        max_rel = max_rel.max(rel);
    }
    let mut covered: Vec<String> = picks.iter().map(|p| tensors[p.0].name.clone()).collect();
    covered.sort();
    covered.dedup();
    GradCheck { max_rel, covered }
}

/// Two Gaussians whose covariances share an eigenbasis, so the Fréchet
/// distance has the closed form `|mu1 - mu2|^2 + sum (sqrt a_k - sqrt b_k)^2`.
pub struct GaussianPair {
    pub mu: [Vec<f64>; 2],
    /// Orthonormal basis, one vector per row.
    pub basis: Vec<Vec<f64>>,
    pub eig: [Vec<f64>; 2],
}

impl GaussianPair {
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Gram-Schmidt on random vectors.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let mut draw =
            |lo: f64, hi: f64| -> Vec<f64> { (0..dim).map(|_| rng.gen_range(lo..hi)).collect() };
        let mu = [draw(-1.0, 1.0), draw(-1.0, 1.0)];
        let eig = [draw(0.5, 3.0), draw(0.5, 3.0)];
        Self { mu, basis, eig }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn analytic(&self) -> f64 {
        dist2(&self.mu[0], &self.mu[1])
            + self.eig[0]
                .iter()
                .zip(&self.eig[1])
                .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
                .sum::<f64>()
    }

    /// Row-major covariance of member `which`.
    pub fn covariance(&self, which: usize) -> Vec<f64> {
        let d = self.dim();
        let mut c = vec![0.0; d * d];
        for (q, l) in self.basis.iter().zip(&self.eig[which]) {
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] += l * q[i] * q[j];
                }
            }
        }
        c
    }

    /// `n` row-major samples of member `which`.
    pub fn sample(&self, which: usize, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let mut x = self.mu[which].clone();
            for (q, l) in self.basis.iter().zip(&self.eig[which]) {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                let s = l.sqrt() * z;
                x.iter_mut().zip(q).for_each(|(a, b)| *a += s * b);
            }
            out.extend(x);
        }
        out
    }
}

/// Ids `p0, p1, ...`.
pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

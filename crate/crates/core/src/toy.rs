//! Synthetic toy-blob images: soft elliptical bright blobs on a textured dark
//! background, with the blob bounding rectangles as ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::exec;
use crate::spatial::{BBox, LabeledSample};
use crate::tensor::Tensor;

/// Minimum empty pixels between two blob boxes.
pub const BOX_GAP: usize = 2;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub res: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Semi-axis range as a fraction of `res`.
    pub min_radius: f64,
    pub max_radius: f64,
}

impl ToyConfig {
    pub fn new(res: usize) -> Self {
        Self {
            res,
            min_blobs: 1,
            max_blobs: 3,
            min_radius: 0.12,
            max_radius: 0.28,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.res >= 8,
            Param,
            "toy resolution must be >= 8, got {}",
            self.res
        );
        ensure!(
            1 <= self.min_blobs && self.min_blobs <= self.max_blobs,
            Param,
            "blob count range [{}, {}] is invalid",
            self.min_blobs,
            self.max_blobs
        );
        ensure!(
            0.0 < self.min_radius && self.min_radius <= self.max_radius && self.max_radius < 0.5,
            Param,
            "blob radius range [{}, {}] must lie in (0, 0.5)",
            self.min_radius,
            self.max_radius
        );
        Ok(())
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    color: [f64; 3],
}

impl Blob {
    /// Normalized elliptical radius of the pixel center `(y, x)`.
    fn radius(&self, y: usize, x: usize) -> f64 {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        (dy * dy + dx * dx).sqrt()
    }

    /// Full intensity inside radius 0.6, smooth falloff to zero at 1.
    fn weight(&self, y: usize, x: usize) -> f64 {
        let r = self.radius(y, x);
        if r >= 1.0 {
            0.0
        } else if r <= 0.6 {
            1.0
        } else {
            let s = (1.0 - r) / 0.4;
            s * s * (3.0 - 2.0 * s)
        }
    }

    fn bbox(&self, res: usize) -> Option<BBox> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..res {
            for x in 0..res {
                if self.radius(y, x) < 1.0 {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y + 1);
                    x1 = x1.max(x + 1);
                }
            }
        }
        (y0 != usize::MAX).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }
}

fn separated(a: &BBox, b: &BBox) -> bool {
    a.right() + BOX_GAP <= b.x
        || b.right() + BOX_GAP <= a.x
        || a.bottom() + BOX_GAP <= b.y
        || b.bottom() + BOX_GAP <= a.y
}

/// Generates sample `index` of the toy set for `seed`. Each index uses its
/// own RNG stream, so any subset can be regenerated independently.
pub fn toy_sample(cfg: &ToyConfig, seed: u64, index: u64) -> Result<LabeledSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = cfg.res;
    let r = n as f64;

    let freq: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.15..0.6));
    let phase: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let tint = rng.gen_range(-0.08..0.08);
    let mut img = Tensor::zeros(&[3, n, n]);
    for y in 0..n {
        for x in 0..n {
            let tex = 0.05
                * ((freq[0] * y as f64 + phase[0]).sin() + (freq[1] * x as f64 + phase[1]).sin())
                + 0.04
                    * (freq[2] * (x + y) as f64 + phase[2]).sin()
                    * (freq[3] * y as f64 + phase[3]).cos();
            let noise = rng.gen_range(-0.03..0.03);
            let base = -0.7 + tint + tex + noise;
            img.set3(0, y, x, base + 0.1);
            img.set3(1, y, x, base - 0.05);
            img.set3(2, y, x, base - 0.1);
        }
    }

    let count = rng.gen_range(cfg.min_blobs..=cfg.max_blobs);
    let mut blobs: Vec<Blob> = Vec::new();
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let ry = rng.gen_range(cfg.min_radius..=cfg.max_radius) * r;
            let rx = rng.gen_range(cfg.min_radius..=cfg.max_radius) * r;
            let cy = rng.gen_range(ry..=r - ry);
            let cx = rng.gen_range(rx..=r - rx);
            let color = [
                rng.gen_range(0.6..0.9),
                rng.gen_range(0.3..0.6),
                rng.gen_range(0.2..0.5),
            ];
            let blob = Blob {
                cy,
                cx,
                ry,
                rx,
                color,
            };
            let Some(b) = blob.bbox(n) else { continue };
            if boxes.iter().all(|o| separated(o, &b)) {
                boxes.push(b);
                blobs.push(blob);
                break;
            }
        }
    }

    for blob in &blobs {
        for y in 0..n {
            for x in 0..n {
                let w = blob.weight(y, x);
                if w > 0.0 {
                    for (c, col) in blob.color.iter().enumerate() {
                        let v = img.at3(c, y, x);
                        img.set3(c, y, x, v + w * (col - v));
                    }
                }
            }
        }
    }
    let img = img.map(|v| v.clamp(-1.0, 1.0));
    boxes.sort();
    LabeledSample::new(img, boxes)
}

/// Samples `first..first + n` of the toy set for `seed`.
pub fn toy_dataset(cfg: &ToyConfig, n: usize, seed: u64, first: u64) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    exec::try_map_indexed(n, |i| toy_sample(cfg, seed, first + i as u64))
}

//! Geometry shared by training, generation and evaluation: boxes and masks,
//! latent-resolution mask downscaling, connected-component box extraction,
//! crop/resize, dihedral augmentations and the latent codecs.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub const MASK_ON: f64 = 1.0;
pub const MASK_OFF: f64 = -1.0;
pub const DEFAULT_MIN_AREA_FRAC: f64 = 1e-3;

/// Axis-aligned pixel box: top-left `(x, y)` and extent `(w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        ensure!(
            self.w >= 1 && self.h >= 1,
            Data,
            "box {:?} has an empty extent",
            self
        );
        ensure!(
            self.right() <= width && self.bottom() <= height,
            Data,
            "box {:?} exceeds the {}x{} image",
            self,
            width,
            height
        );
        Ok(())
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Image, its boxes, and the binary box mask derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub mask: Tensor,
}

impl LabeledSample {
    pub fn new(image: Tensor, boxes: Vec<BBox>) -> Result<Self> {
        let (_, h, w) = image.chw()?;
        let mask = boxes_to_mask(&boxes, h, w)?;
        Ok(Self { image, boxes, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Union of box rectangles at +1 on a -1 background, shape `(1, H, W)`.
pub fn boxes_to_mask(boxes: &[BBox], height: usize, width: usize) -> Result<Tensor> {
    let mut m = Tensor::full(&[1, height, width], MASK_OFF);
    for b in boxes {
        b.validate(height, width)?;
        for y in b.y..b.bottom() {
            m.data_mut()[y * width + b.x..y * width + b.right()].fill(MASK_ON);
        }
    }
    Ok(m)
}

/// Any-coverage downscale by `factor`: a latent cell is on iff any pixel of
/// its block is on.
pub fn downscale_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = mask.chw()?;
    ensure!(factor >= 1, Param, "downscale factor must be >= 1");
    ensure!(
        h % factor == 0 && w % factor == 0,
        Shape,
        "mask {}x{} is not divisible by factor {}",
        h,
        w,
        factor
    );
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::full(&[c, oh, ow], MASK_OFF);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask.at3(ci, y, x) > 0.0 {
                    out.set3(ci, y / factor, x / factor, MASK_ON);
                }
            }
        }
    }
    Ok(out)
}

/// Tight boxes of the 8-connected components of `plane > threshold`,
/// dropping components with fewer than `min_area_frac * H * W` pixels.
/// Boxes come back sorted by `(x, y, w, h)`.
pub fn extract_boxes(mask: &Tensor, threshold: f64, min_area_frac: f64) -> Result<Vec<BBox>> {
    let (c, h, w) = mask.chw()?;
    ensure!(
        c == 1,
        Shape,
        "extract_boxes expects a single-channel mask, got {c}"
    );
    Ok(extract_boxes_plane(
        mask.data(),
        h,
        w,
        threshold,
        min_area_frac,
    ))
}

pub fn extract_boxes_plane(
    plane: &[f64],
    h: usize,
    w: usize,
    threshold: f64,
    min_area_frac: f64,
) -> Vec<BBox> {
    let on: Vec<bool> = plane.iter().map(|&v| v > threshold).collect();
    let mut seen = vec![false; h * w];
    let min_pixels = min_area_frac * (h * w) as f64;
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut count = 0usize;
        while let Some(p) = stack.pop() {
            let (py, px) = (p / w, p % w);
            count += 1;
            x0 = x0.min(px);
            x1 = x1.max(px);
            y0 = y0.min(py);
            y1 = y1.max(py);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (py as isize + dy, px as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if on[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if count as f64 >= min_pixels {
            boxes.push(BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1));
        }
    }
    boxes.sort();
    boxes
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear resize of a `(C, H, W)` tensor with half-pixel centers and
/// clamped borders.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = img.chw()?;
    ensure!(
        out_h >= 1 && out_w >= 1,
        Param,
        "resize target must be positive"
    );
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(h, out_h);
    let xs = coords(w, out_w);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ci in 0..c {
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = lerp(img.at3(ci, y0, x0), img.at3(ci, y0, x1), tx);
                let bot = lerp(img.at3(ci, y1, x0), img.at3(ci, y1, x1), tx);
                out.set3(ci, oy, ox, lerp(top, bot, ty));
            }
        }
    }
    Ok(out)
}

/// Crops the centered square of side `min(H, W)` and resizes it to
/// `target x target`, mapping boxes through the same transform. Boxes that
/// fall entirely outside the crop are dropped.
pub fn center_crop_resize(image: &Tensor, boxes: &[BBox], target: usize) -> Result<LabeledSample> {
    let (c, h, w) = image.chw()?;
    ensure!(target >= 1, Param, "target size must be >= 1");
    let side = h.min(w);
    let (ox, oy) = ((w - side) / 2, (h - side) / 2);
    let mut cropped = Tensor::zeros(&[c, side, side]);
    for ci in 0..c {
        for y in 0..side {
            for x in 0..side {
                cropped.set3(ci, y, x, image.at3(ci, y + oy, x + ox));
            }
        }
    }
    let resized = if side == target {
        cropped
    } else {
        resize_bilinear(&cropped, target, target)?
    };
    let scale = target as f64 / side as f64;
    let map_range = |lo: usize, len: usize, off: usize| -> Option<(usize, usize)> {
        let a = (lo as isize - off as isize).clamp(0, side as isize) as f64;
        let b = ((lo + len) as isize - off as isize).clamp(0, side as isize) as f64;
        if b <= a {
            return None;
        }
        let s = ((a * scale).round() as usize).min(target - 1);
        let e = ((b * scale).round() as usize).clamp(s + 1, target);
        Some((s, e - s))
    };
    let mapped = boxes
        .iter()
        .filter_map(|b| {
            let (x, bw) = map_range(b.x, b.w, ox)?;
            let (y, bh) = map_range(b.y, b.h, oy)?;
            Some(BBox::new(x, y, bw, bh))
        })
        .collect();
    LabeledSample::new(resized, mapped)
}

/// The eight symmetries of the square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);
    pub const ROT90: Dihedral = Dihedral(1);
    pub const ROT180: Dihedral = Dihedral(2);
    pub const ROT270: Dihedral = Dihedral(3);
    pub const HFLIP: Dihedral = Dihedral(4);
    pub const VFLIP: Dihedral = Dihedral(5);
    pub const TRANSPOSE: Dihedral = Dihedral(6);
    pub const ANTI_TRANSPOSE: Dihedral = Dihedral(7);

    pub fn new(index: u8) -> Result<Self> {
        ensure!(
            index < 8,
            Param,
            "dihedral op index must be in 0..8, got {index}"
        );
        Ok(Self(index))
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    /// Destination of source pixel `(y, x)` in an `n x n` grid.
    pub fn map(self, n: usize, y: usize, x: usize) -> (usize, usize) {
        let m = n - 1;
        match self.0 {
            0 => (y, x),
            1 => (x, m - y),
            2 => (m - y, m - x),
            3 => (m - x, y),
            4 => (y, m - x),
            5 => (m - y, x),
            6 => (x, y),
            _ => (m - x, m - y),
        }
    }

    pub fn apply_tensor(self, t: &Tensor) -> Result<Tensor> {
        let (c, h, w) = t.chw()?;
        ensure!(
            h == w,
            Shape,
            "dihedral ops need a square input, got {}x{}",
            h,
            w
        );
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (ny, nx) = self.map(h, y, x);
                    out.set3(ci, ny, nx, t.at3(ci, y, x));
                }
            }
        }
        Ok(out)
    }

    pub fn apply_box(self, n: usize, b: &BBox) -> BBox {
        let (ay, ax) = self.map(n, b.y, b.x);
        let (by, bx) = self.map(n, b.bottom() - 1, b.right() - 1);
        let (y0, y1) = (ay.min(by), ay.max(by));
        let (x0, x1) = (ax.min(bx), ax.max(bx));
        BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    }
}

/// Applies the indexed dihedral op identically to image, mask and boxes.
pub fn dihedral_augment(sample: &LabeledSample, op: Dihedral) -> Result<LabeledSample> {
    let image = op.apply_tensor(&sample.image)?;
    let mask = op.apply_tensor(&sample.mask)?;
    let n = sample.height();
    let mut boxes: Vec<BBox> = sample.boxes.iter().map(|b| op.apply_box(n, b)).collect();
    boxes.sort();
    Ok(LabeledSample { image, boxes, mask })
}

/// Pixel-to-latent codec standing in for a pretrained autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentCodec {
    #[default]
    Identity,
    Pool {
        factor: usize,
    },
}

impl LatentCodec {
    pub fn factor(&self) -> usize {
        match self {
            LatentCodec::Identity => 1,
            LatentCodec::Pool { factor } => *factor,
        }
    }

    /// Identity, or `f x f` average pooling.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let f = self.factor();
        let (c, h, w) = image.chw()?;
        ensure!(
            h % f == 0 && w % f == 0,
            Shape,
            "image {}x{} is not divisible by codec factor {}",
            h,
            w,
            f
        );
        if f == 1 {
            return Ok(image.clone());
        }
        let (oh, ow) = (h / f, w / f);
        let norm = (f * f) as f64;
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += image.at3(ci, y * f + dy, x * f + dx);
                        }
                    }
                    out.set3(ci, y, x, s / norm);
                }
            }
        }
        Ok(out)
    }

    /// Identity, or bilinear upsampling by `f`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let f = self.factor();
        if f == 1 {
            return Ok(latent.clone());
        }
        let (_, h, w) = latent.chw()?;
        resize_bilinear(latent, h * f, w * f)
    }
}

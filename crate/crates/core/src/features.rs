//! Deterministic built-in feature extractor: a 16x16 grayscale downsample
//! followed by per-channel mean and variance.

use crate::dedup::FeatureSet;
use crate::error::{ensure, Result};
use crate::exec;
use crate::spatial::resize_bilinear;
use crate::tensor::Tensor;

pub const GRID: usize = 16;

pub fn builtin_dim(channels: usize) -> usize {
    GRID * GRID + 2 * channels
}

pub fn builtin_features(image: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = image.chw()?;
    ensure!(c >= 1, Shape, "image has no channels");
    let hw = h * w;
    let mut gray = Tensor::zeros(&[1, h, w]);
    for ch in 0..c {
        for (g, v) in gray.data_mut().iter_mut().zip(image.channel(ch)) {
            *g += v / c as f64;
        }
    }
    let mut out = resize_bilinear(&gray, GRID, GRID)?.into_data();
    for ch in 0..c {
        let p = image.channel(ch);
        let mean = p.iter().sum::<f64>() / hw as f64;
        let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        out.push(mean);
        out.push(var);
    }
    Ok(out)
}

/// Extracts features for every image; rows keep the input order.
pub fn extract_builtin(images: &[Tensor], ids: Vec<String>, source: &str) -> Result<FeatureSet> {
    ensure!(
        images.len() == ids.len(),
        Param,
        "{} images but {} ids",
        images.len(),
        ids.len()
    );
    ensure!(
        !images.is_empty(),
        Param,
        "no images to extract features from"
    );
    let rows = exec::try_map_indexed(images.len(), |i| builtin_features(&images[i]))?;
    let dim = rows[0].len();
    ensure!(
        rows.iter().all(|r| r.len() == dim),
        Shape,
        "images have differing channel counts"
    );
    FeatureSet::new(rows.concat(), dim, ids, source)
}

//! Generated-data quality measures over arbitrary feature sets: Fréchet
//! distance between Gaussian fits, Inception Score from class
//! probabilities, and k-NN manifold precision/recall.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dedup::{sq_dist, FeatureSet};
use crate::error::{ensure, Error, Result};
use crate::exec;

pub const COV_JITTER: f64 = 1e-8;
/// Negative eigenvalues of the product matrix smaller than this in magnitude
/// are treated as round-off and clipped to zero.
pub const EIG_NEG_TOL: f64 = 1e-6;
pub const DEFAULT_K: usize = 3;
pub const DEFAULT_SPLITS: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianFit {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        ensure!(
            sigma.nrows() == mu.len() && sigma.ncols() == mu.len(),
            Shape,
            "covariance must be {0}x{0}",
            mu.len()
        );
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and unbiased covariance, symmetrized, plus `1e-8 * I`.
pub fn fit_gaussian(fs: &FeatureSet) -> Result<GaussianFit> {
    let (n, d) = (fs.len(), fs.dim());
    ensure!(
        n >= 2,
        Param,
        "need at least 2 samples to fit a Gaussian, got {n}"
    );
    let mut mu = DVector::zeros(d);
    for i in 0..n {
        for (m, v) in mu.iter_mut().zip(fs.row(i)) {
            *m += v;
        }
    }
    mu /= n as f64;
    let mut centered = DMatrix::zeros(n, d);
    for i in 0..n {
        for (j, v) in fs.row(i).iter().enumerate() {
            centered[(i, j)] = v - mu[j];
        }
    }
    let mut sigma = centered.tr_mul(&centered) / (n - 1) as f64;
    sigma = (&sigma + sigma.transpose()) * 0.5;
    for j in 0..d {
        sigma[(j, j)] += COV_JITTER;
    }
    Ok(GaussianFit { mu, sigma })
}

/// Symmetric PSD square root by eigendecomposition.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -EIG_NEG_TOL {
            return Err(Error::Numeric(format!(
                "covariance has a negative eigenvalue {v:e}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the trace of the
/// product root taken from the symmetric form `S1^(1/2) S2 S1^(1/2)`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    ensure!(
        a.dim() == b.dim(),
        Param,
        "dimension mismatch: {} vs {}",
        a.dim(),
        b.dim()
    );
    let diff = &a.mu - &b.mu;
    let s1 = sqrt_psd(&a.sigma)?;
    let mut prod = &s1 * &b.sigma * &s1;
    prod = (&prod + prod.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(prod, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let mut tr_root = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -EIG_NEG_TOL {
            return Err(Error::Numeric(format!(
                "covariance product has a negative eigenvalue {v:e}"
            )));
        }
        tr_root += v.max(0.0).sqrt();
    }
    let fd = diff.dot(&diff) + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_root;
    Ok(fd.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InceptionScore {
    pub mean: f64,
    pub std: f64,
}

/// Exp of the mean KL divergence between each row and its split's marginal;
/// mean and (population) standard deviation across `splits` contiguous
/// splits.
pub fn inception_score(probs: &FeatureSet, splits: usize) -> Result<InceptionScore> {
    let (n, k) = (probs.len(), probs.dim());
    ensure!(splits >= 1, Param, "splits must be >= 1");
    ensure!(
        splits <= n,
        Param,
        "splits ({splits}) exceed the number of rows ({n})"
    );
    for i in 0..n {
        let r = probs.row(i);
        let s: f64 = r.iter().sum();
        ensure!(
            (s - 1.0).abs() <= 1e-6 && r.iter().all(|&p| p >= 0.0),
            Data,
            "row `{}` is not a probability distribution (sum {s})",
            probs.ids()[i]
        );
    }
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
            let m = (hi - lo) as f64;
            let mut marginal = vec![0.0; k];
            for i in lo..hi {
                for (acc, p) in marginal.iter_mut().zip(probs.row(i)) {
                    *acc += p;
                }
            }
            marginal.iter_mut().for_each(|v| *v /= m);
            let kl: f64 = (lo..hi)
                .map(|i| {
                    probs
                        .row(i)
                        .iter()
                        .zip(&marginal)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, q)| p * (p.ln() - q.ln()))
                        .sum::<f64>()
                })
                .sum();
            (kl / m).exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok(InceptionScore {
        mean,
        std: var.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrResult {
    pub precision: f64,
    pub recall: f64,
    pub k: usize,
}

/// Squared distance from every point of `fs` to its k-th nearest other point.
pub fn knn_radii_sq(fs: &FeatureSet, k: usize) -> Vec<f64> {
    let n = fs.len();
    exec::map_indexed(n, |i| {
        let mut d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| sq_dist(fs.row(i), fs.row(j)))
            .collect();
        let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
        *kth
    })
}

/// Fraction of `queries` falling inside at least one ball of `support`.
fn coverage(support: &FeatureSet, radii_sq: &[f64], queries: &FeatureSet) -> f64 {
    let inside = exec::map_indexed(queries.len(), |i| {
        let q = queries.row(i);
        (0..support.len()).any(|j| sq_dist(q, support.row(j)) <= radii_sq[j])
    });
    inside.iter().filter(|&&b| b).count() as f64 / queries.len() as f64
}

/// Precision: generated points inside the real manifold. Recall: real points
/// inside the generated manifold. Each manifold is the union of balls whose
/// radius is the distance to the k-th nearest neighbour within the same set;
/// a point on the boundary counts as inside.
pub fn precision_recall(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<PrResult> {
    ensure!(
        real.dim() == gen.dim(),
        Param,
        "dimension mismatch: {} vs {}",
        real.dim(),
        gen.dim()
    );
    let limit = real.len().min(gen.len());
    ensure!(
        k >= 1 && k < limit,
        Param,
        "k must be in [1, {limit}) for {} real and {} generated points, got {k}",
        real.len(),
        gen.len()
    );
    let real_r = knn_radii_sq(real, k);
    let gen_r = knn_radii_sq(gen, k);
    Ok(PrResult {
        precision: coverage(real, &real_r, gen),
        recall: coverage(gen, &gen_r, real),
        k,
    })
}

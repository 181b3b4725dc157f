//! Diffusion noise schedules and the closed-form forward (noising) process.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Terminal `sqrt(alpha_bar)` floor applied after zero-terminal rescaling when
/// the model predicts epsilon; the x0 inversion divides by this value.
pub const TERMINAL_CLAMP: f64 = 1e-6;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_SAMPLER_STEPS: usize = 300;

/// Per-timestep diffusion coefficients, stored at 64-bit precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
    zero_terminal: bool,
}

/// JSON descriptor stored alongside the raw schedule arrays in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub zero_terminal: bool,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(
            steps >= 2,
            Param,
            "schedule needs at least 2 steps, got {steps}"
        );
        ensure!(
            beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            Param,
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        );
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self::assemble(
            beta_start, beta_end, beta, alpha, alpha_bar, false,
        ))
    }

    /// The canonical training schedule: 1000 linear steps, 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    fn assemble(
        beta_start: f64,
        beta_end: f64,
        beta: Vec<f64>,
        alpha: Vec<f64>,
        alpha_bar: Vec<f64>,
        zero_terminal: bool,
    ) -> Self {
        let sqrt_alpha_bar = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Self {
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus_alpha_bar,
            zero_terminal,
        }
    }

    /// Rebuilds a schedule from `sqrt(alpha_bar)`, deriving alpha and beta as
    /// ratios of consecutive cumulative products.
    fn from_sqrt_alpha_bar(
        beta_start: f64,
        beta_end: f64,
        sqrt_alpha_bar: Vec<f64>,
        zero_terminal: bool,
    ) -> Self {
        let alpha_bar: Vec<f64> = sqrt_alpha_bar.iter().map(|s| s * s).collect();
        let alpha: Vec<f64> = alpha_bar
            .iter()
            .enumerate()
            .map(|(i, &ab)| if i == 0 { ab } else { ab / alpha_bar[i - 1] })
            .collect();
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Self {
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus_alpha_bar,
            zero_terminal,
        }
    }

    /// Restores a schedule from checkpointed arrays, in the order of
    /// [`NoiseSchedule::arrays`].
    pub fn from_parts(desc: &ScheduleDescriptor, arrays: [Vec<f64>; 5]) -> Result<Self> {
        ensure!(
            arrays.iter().all(|a| a.len() == desc.steps),
            Data,
            "schedule arrays do not match T = {}",
            desc.steps
        );
        let [beta, alpha, alpha_bar, sqrt_alpha_bar, sqrt_one_minus_alpha_bar] = arrays;
        Ok(Self {
            beta_start: desc.beta_start,
            beta_end: desc.beta_end,
            beta,
            alpha,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus_alpha_bar,
            zero_terminal: desc.zero_terminal,
        })
    }

    /// Named per-step arrays as stored in checkpoints.
    pub fn arrays(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("beta", &self.beta),
            ("alpha", &self.alpha),
            ("alpha_bar", &self.alpha_bar),
            ("sqrt_alpha_bar", &self.sqrt_alpha_bar),
            ("sqrt_one_minus_alpha_bar", &self.sqrt_one_minus_alpha_bar),
        ]
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor {
            steps: self.steps(),
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            zero_terminal: self.zero_terminal,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sqrt_alpha_bar(&self) -> &[f64] {
        &self.sqrt_alpha_bar
    }

    pub fn sqrt_one_minus_alpha_bar(&self) -> &[f64] {
        &self.sqrt_one_minus_alpha_bar
    }

    pub fn zero_terminal(&self) -> bool {
        self.zero_terminal
    }

    /// Rescales `sqrt(alpha_bar)` affinely so the last step carries zero
    /// signal while the first step is unchanged. `clamp` lifts the terminal
    /// value back to a small positive floor (use [`TERMINAL_CLAMP`] for
    /// epsilon prediction, `0.0` for v prediction).
    pub fn rescale_zero_terminal_snr(&self, clamp: f64) -> Result<Self> {
        ensure!(
            !self.zero_terminal,
            Param,
            "schedule has already been rescaled to zero terminal SNR"
        );
        ensure!(clamp >= 0.0, Param, "terminal clamp must be non-negative");
        let rescaled = rescale_sqrt_alpha_bar(&self.sqrt_alpha_bar)?;
        let mut s = Self::from_sqrt_alpha_bar(self.beta_start, self.beta_end, rescaled, true);
        let last = s.steps() - 1;
        if s.sqrt_alpha_bar[last] < clamp {
            s.sqrt_alpha_bar[last] = clamp;
            s = Self::from_sqrt_alpha_bar(s.beta_start, s.beta_end, s.sqrt_alpha_bar, true);
        }
        Ok(s)
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn forward_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        ensure!(
            t < self.steps(),
            Param,
            "timestep {t} outside [0, {})",
            self.steps()
        );
        ensure!(
            x0.shape() == eps.shape(),
            Param,
            "x0 shape {:?} differs from noise shape {:?}",
            x0.shape(),
            eps.shape()
        );
        let (a, b) = (self.sqrt_alpha_bar[t], self.sqrt_one_minus_alpha_bar[t]);
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(x, e)| a * x + b * e)
            .collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    /// `n` timesteps evenly spaced over `[0, T-1]`, always including `T-1`.
    pub fn subsequence(&self, n: usize) -> Result<StepSubsequence> {
        let steps = self.steps();
        ensure!(
            (1..=steps).contains(&n),
            Param,
            "sampler steps must be in [1, {steps}], got {n}"
        );
        let indices = if n == 1 {
            vec![steps - 1]
        } else {
            (0..n)
                .map(|i| {
                    // Round-half-up of i * (T-1) / (n-1) in exact integer arithmetic.
                    let num = 2 * i * (steps - 1) + (n - 1);
                    num / (2 * (n - 1))
                })
                .collect()
        };
        StepSubsequence::new(indices, steps)
    }
}

/// `s' = (s - s_T) * s_1 / (s_1 - s_T)`, elementwise.
pub fn rescale_sqrt_alpha_bar(s: &[f64]) -> Result<Vec<f64>> {
    ensure!(s.len() >= 2, Param, "need at least two steps to rescale");
    let (first, last) = (s[0], s[s.len() - 1]);
    if first == last {
        return Err(Error::Numeric(
            "degenerate schedule: first and last sqrt(alpha_bar) coincide".into(),
        ));
    }
    let scale = first / (first - last);
    let mut out: Vec<f64> = s.iter().map(|v| (v - last) * scale).collect();
    // The map fixes the first entry; keep it free of round-off.
    out[0] = first;
    Ok(out)
}

/// Strictly increasing timestep indices ending at `T-1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSubsequence {
    indices: Vec<usize>,
}

impl StepSubsequence {
    pub fn new(indices: Vec<usize>, steps: usize) -> Result<Self> {
        ensure!(!indices.is_empty(), Param, "empty step subsequence");
        ensure!(
            indices.len() <= steps,
            Param,
            "subsequence longer than the schedule"
        );
        ensure!(
            indices.windows(2).all(|w| w[0] < w[1]),
            Param,
            "subsequence must be strictly increasing"
        );
        ensure!(
            *indices.last().unwrap() == steps - 1,
            Param,
            "subsequence must end at the terminal step {}",
            steps - 1
        );
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

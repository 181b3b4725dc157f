//! DDPM training objective, ancestral sampling over step subsequences,
//! parameterization conversions and weight averaging.
//!
//! Samples carry the image channels followed by one mask channel. Both are
//! noised and predicted jointly; conditioning at sampling time replaces the
//! mask channel with the forward-noised conditioning mask after every step.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamSet};
use crate::denoiser::{forward_tensor, gradient, DifferentiableModel};
use crate::error::{ensure, Error, Result};
use crate::exec;
use crate::schedule::{NoiseSchedule, StepSubsequence, TERMINAL_CLAMP};
use crate::tensor::Tensor;

/// Tolerance on the `[-1, 1]` input range check.
pub const RANGE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    #[default]
    Epsilon,
    V,
}

impl PredictionKind {
    /// Terminal `sqrt(alpha_bar)` floor to use with this parameterization.
    pub fn terminal_clamp(self) -> f64 {
        match self {
            PredictionKind::Epsilon => TERMINAL_CLAMP,
            PredictionKind::V => 0.0,
        }
    }
}

/// Anything that predicts the network target from a noisy sample.
pub trait NoisePredictor: Sync {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor>;
}

impl<M: DifferentiableModel> NoisePredictor for M {
    fn predict(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        forward_tensor(self, x, t)
    }
}

/// Noise draw for one training example.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor,
}

fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn check_range(batch: &[Tensor]) -> Result<()> {
    for (i, x) in batch.iter().enumerate() {
        if let Some(v) = x
            .data()
            .iter()
            .find(|v| !(-1.0 - RANGE_TOL..=1.0 + RANGE_TOL).contains(*v))
        {
            return Err(Error::Data(format!(
                "batch element {i} holds {v}, outside the [-1, 1] training range"
            )));
        }
    }
    Ok(())
}

/// Draws `t ~ U{0..T}` and unit Gaussian noise for each batch element, in order.
pub fn draw_noise(
    batch: &[Tensor],
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Vec<NoiseDraw> {
    batch
        .iter()
        .map(|x| NoiseDraw {
            t: rng.gen_range(0..schedule.steps()),
            eps: standard_normal(x.shape(), rng),
        })
        .collect()
}

/// Network input and regression target for one example.
fn noised_pair(
    schedule: &NoiseSchedule,
    kind: PredictionKind,
    x0: &Tensor,
    draw: &NoiseDraw,
) -> Result<(Tensor, Vec<f64>)> {
    let xt = schedule.forward_sample(x0, draw.t, &draw.eps)?;
    let target = match kind {
        PredictionKind::Epsilon => draw.eps.data().to_vec(),
        PredictionKind::V => v_target(schedule, draw.t, x0, &draw.eps),
    };
    Ok((xt, target))
}

/// `v = sqrt(ab) * eps - sqrt(1 - ab) * x0`.
pub fn v_target(schedule: &NoiseSchedule, t: usize, x0: &Tensor, eps: &Tensor) -> Vec<f64> {
    let (a, b) = (
        schedule.sqrt_alpha_bar()[t],
        schedule.sqrt_one_minus_alpha_bar()[t],
    );
    x0.data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * e - b * x)
        .collect()
}

/// Mean squared error between the regression target and the model output,
/// averaged over the batch.
pub fn training_loss<P: NoisePredictor>(
    model: &P,
    schedule: &NoiseSchedule,
    kind: PredictionKind,
    batch: &[Tensor],
    rng: &mut impl Rng,
) -> Result<f64> {
    ensure!(!batch.is_empty(), Param, "empty training batch");
    check_range(batch)?;
    let draws = draw_noise(batch, schedule, rng);
    let losses = exec::try_map_indexed(batch.len(), |i| -> Result<f64> {
        let (xt, target) = noised_pair(schedule, kind, &batch[i], &draws[i])?;
        let out = model.predict(&xt, draws[i].t)?;
        let n = target.len() as f64;
        Ok(out
            .data()
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    })?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Batch loss and its gradient. Per-example graphs run through [`exec`] and
/// are reduced in batch order.
pub fn training_loss_and_grad<M: DifferentiableModel>(
    model: &M,
    schedule: &NoiseSchedule,
    kind: PredictionKind,
    batch: &[Tensor],
    rng: &mut impl Rng,
) -> Result<(f64, Gradients)> {
    ensure!(!batch.is_empty(), Param, "empty training batch");
    check_range(batch)?;
    let draws = draw_noise(batch, schedule, rng);
    loss_and_grad_with_draws(model, schedule, kind, batch, &draws)
}

/// Same as [`training_loss_and_grad`] with explicit noise draws.
pub fn loss_and_grad_with_draws<M: DifferentiableModel>(
    model: &M,
    schedule: &NoiseSchedule,
    kind: PredictionKind,
    batch: &[Tensor],
    draws: &[NoiseDraw],
) -> Result<(f64, Gradients)> {
    for x in batch {
        model.check_input(x.shape())?;
    }
    let parts = exec::try_map_indexed(batch.len(), |i| -> Result<(f64, Gradients)> {
        let (xt, target) = noised_pair(schedule, kind, &batch[i], &draws[i])?;
        gradient(model.params(), |g| {
            let xi = g.input(&xt);
            let out = model.forward(g, xi, draws[i].t);
            g.mse(out, &target)
        })
    })?;
    let inv = 1.0 / batch.len() as f64;
    let mut total = model.params().zeros_like();
    let mut loss = 0.0;
    for (l, gr) in parts {
        loss += l;
        for (acc, g) in total.iter_mut().zip(gr) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    for acc in &mut total {
        acc.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, total))
}

/// Loss of a fixed set of draws, recorded on a graph (for finite differences).
pub fn loss_with_draws<M: DifferentiableModel>(
    model: &M,
    schedule: &NoiseSchedule,
    kind: PredictionKind,
    batch: &[Tensor],
    draws: &[NoiseDraw],
) -> Result<f64> {
    let mut total = 0.0;
    for (x0, d) in batch.iter().zip(draws) {
        let (xt, target) = noised_pair(schedule, kind, x0, d)?;
        let mut g = Graph::new(model.params());
        let xi = g.input(&xt);
        let out = model.forward(&mut g, xi, d.t);
        let l = g.mse(out, &target);
        total += g.scalar(l);
    }
    Ok(total / batch.len() as f64)
}

/// Turns a model output into `(eps_hat, x0_hat)`; `x0_hat` is clipped to
/// `[-1, 1]` when `clip` is set.
pub fn convert_prediction(
    kind: PredictionKind,
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &Tensor,
    model_out: &Tensor,
    clip: bool,
) -> Result<(Tensor, Tensor)> {
    ensure!(
        t < schedule.steps(),
        Param,
        "timestep {t} outside [0, {})",
        schedule.steps()
    );
    ensure!(
        x_t.shape() == model_out.shape(),
        Shape,
        "model output shape {:?} differs from input {:?}",
        model_out.shape(),
        x_t.shape()
    );
    let a = schedule.sqrt_alpha_bar()[t];
    let b = schedule.sqrt_one_minus_alpha_bar()[t];
    let (eps, x0): (Vec<f64>, Vec<f64>) = match kind {
        PredictionKind::Epsilon => {
            if a < TERMINAL_CLAMP * (1.0 - 1e-9) {
                return Err(Error::Numeric(format!(
                    "sqrt(alpha_bar[{t}]) = {a:e} is below the terminal clamp; \
                     epsilon inversion is undefined"
                )));
            }
            x_t.data()
                .iter()
                .zip(model_out.data())
                .map(|(&x, &e)| (e, (x - b * e) / a))
                .unzip()
        }
        PredictionKind::V => x_t
            .data()
            .iter()
            .zip(model_out.data())
            .map(|(&x, &v)| (b * x + a * v, a * x - b * v))
            .unzip(),
    };
    let x0 = if clip {
        x0.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect()
    } else {
        x0
    };
    let shape = x_t.shape().to_vec();
    Ok((Tensor::new(shape.clone(), eps)?, Tensor::new(shape, x0)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub kind: PredictionKind,
    /// Clip `x0_hat` to `[-1, 1]` at every step.
    pub clip_x0: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            kind: PredictionKind::Epsilon,
            clip_x0: true,
        }
    }
}

/// Ancestral DDPM sampling over `sub`, treated as a shorter schedule whose
/// per-step alpha is the ratio of consecutive cumulative products.
///
/// `shape` is `(image_channels + 1, H, W)`. With `cond_mask` (shape
/// `(1, H, W)`) the mask channel is replaced after every step by the
/// conditioning mask noised to the next timestep, and by the clean mask after
/// the last one. Returns `(image channels, mask channel)`.
pub fn ddpm_sample<P: NoisePredictor>(
    model: &P,
    schedule: &NoiseSchedule,
    sub: &StepSubsequence,
    opts: &SamplerOptions,
    shape: [usize; 3],
    cond_mask: Option<&Tensor>,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let [c, h, w] = shape;
    ensure!(c >= 1, Param, "sample needs at least the mask channel");
    ensure!(
        *sub.indices().last().unwrap() < schedule.steps(),
        Param,
        "step subsequence exceeds the schedule"
    );
    if let Some(m) = cond_mask {
        ensure!(
            m.shape() == [1, h, w],
            Param,
            "conditioning mask shape {:?} does not match (1, {}, {})",
            m.shape(),
            h,
            w
        );
    }
    let ab = schedule.alpha_bar();
    let idx = sub.indices();
    let mut x = standard_normal(&shape, rng);
    if let Some(m) = cond_mask {
        let t = *idx.last().unwrap();
        replace_mask(
            &mut x,
            &schedule.forward_sample(m, t, &standard_normal(&[1, h, w], rng))?,
        );
    }
    for i in (0..idx.len()).rev() {
        let t = idx[i];
        let prev = if i > 0 { Some(idx[i - 1]) } else { None };
        let out = model.predict(&x, t)?;
        let (_, x0) = convert_prediction(opts.kind, schedule, t, &x, &out, opts.clip_x0)?;
        let ab_t = ab[t];
        let ab_prev = prev.map_or(1.0, |p| ab[p]);
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let denom = 1.0 - ab_t;
        let coef_x0 = ab_prev.sqrt() * beta / denom;
        let coef_xt = alpha.sqrt() * (1.0 - ab_prev) / denom;
        let mut next: Vec<f64> = x0
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| coef_x0 * a + coef_xt * b)
            .collect();
        if prev.is_some() {
            let sigma = (beta * (1.0 - ab_prev) / denom).max(0.0).sqrt();
            for v in &mut next {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
        x = Tensor::new(shape.to_vec(), next)?;
        if let Some(m) = cond_mask {
            match prev {
                Some(p) => {
                    let noise = standard_normal(&[1, h, w], rng);
                    replace_mask(&mut x, &schedule.forward_sample(m, p, &noise)?);
                }
                None => replace_mask(&mut x, m),
            }
        }
    }
    Ok((x.channels(0..c - 1), x.channels(c - 1..c)))
}

fn replace_mask(x: &mut Tensor, mask: &Tensor) {
    let c = x.shape()[0];
    x.channel_mut(c - 1).copy_from_slice(mask.data());
}

/// Exponential moving average of model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub shadow: ParamSet,
    pub decay: f64,
    /// Updates over which the decay ramps linearly from 0 to `decay`.
    pub warmup_steps: usize,
    pub updates: usize,
}

pub const DEFAULT_EMA_DECAY: f64 = 0.9999;
pub const DEFAULT_EMA_WARMUP: usize = 1000;

impl EmaState {
    pub fn new(params: &ParamSet, decay: f64, warmup_steps: usize) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&decay),
            Param,
            "EMA decay must lie in [0, 1], got {decay}"
        );
        Ok(Self {
            shadow: params.clone(),
            decay,
            warmup_steps,
            updates: 0,
        })
    }

    /// Decay applied at the next update.
    pub fn effective_decay(&self) -> f64 {
        if self.warmup_steps == 0 {
            self.decay
        } else {
            self.decay * (self.updates as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Warm-up aware update.
    pub fn update(&mut self, params: &ParamSet) -> Result<()> {
        let d = self.effective_decay();
        ema_update(&mut self.shadow, params, d)?;
        self.updates += 1;
        Ok(())
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`, elementwise.
pub fn ema_update(shadow: &mut ParamSet, params: &ParamSet, decay: f64) -> Result<()> {
    ensure!(
        shadow.same_layout(params),
        Param,
        "EMA shadow layout does not match the tracked parameters"
    );
    for (s, p) in shadow.tensors_mut().iter_mut().zip(params.tensors()) {
        for (a, &b) in s.data.iter_mut().zip(&p.data) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

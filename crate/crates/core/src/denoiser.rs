//! Fully-convolutional U-Net noise predictor.
//!
//! Layout: `conv_in`, three encoder blocks (each `layers_per_block` residual
//! layers followed by 2x average pooling), a middle block at 1/8 resolution
//! (residual, optional attention, residual), three decoder blocks (2x nearest
//! upsampling, skip concatenation, `layers_per_block` residual layers) and an
//! output head. Self-attention sits after the last residual layer of the
//! deepest encoder block and after the first residual layer of the matching
//! decoder block. Every residual layer receives a projection of the
//! sinusoidal timestep embedding.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{check_loss, Gradients, Graph, Padding, ParamSet, Var};
use crate::error::{ensure, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Number of 2x downsamplings; spatial sizes must be multiples of `2^DEPTH`.
pub const DEPTH: usize = 3;
pub const SPATIAL_MULTIPLE: usize = 1 << DEPTH;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFlags {
    pub encoder_last: bool,
    pub middle: bool,
    pub decoder_first: bool,
}

impl Default for AttentionFlags {
    fn default() -> Self {
        Self {
            encoder_last: true,
            middle: true,
            decoder_first: true,
        }
    }
}

impl AttentionFlags {
    pub fn none() -> Self {
        Self {
            encoder_last: false,
            middle: false,
            decoder_first: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Image channels plus the mask channel.
    pub in_channels: usize,
    pub base_width: usize,
    pub channel_multipliers: [usize; 3],
    pub layers_per_block: usize,
    pub attention: AttentionFlags,
    pub time_embed_dim: usize,
    #[serde(default)]
    pub padding: Padding,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_width: 16,
            channel_multipliers: [1, 2, 2],
            layers_per_block: 3,
            attention: AttentionFlags::default(),
            time_embed_dim: 32,
            padding: Padding::Zeros,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels >= 1, Param, "in_channels must be >= 1");
        ensure!(self.base_width >= 1, Param, "base_width must be >= 1");
        ensure!(
            self.channel_multipliers.iter().all(|&m| m >= 1),
            Param,
            "channel multipliers must be >= 1"
        );
        ensure!(
            self.layers_per_block >= 1,
            Param,
            "layers_per_block must be >= 1"
        );
        ensure!(
            self.time_embed_dim >= 2 && self.time_embed_dim.is_multiple_of(2),
            Param,
            "time_embed_dim must be even and >= 2"
        );
        Ok(())
    }

    pub fn widths(&self) -> [usize; 3] {
        self.channel_multipliers.map(|m| m * self.base_width)
    }
}

/// Largest divisor of `channels` not exceeding 8.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(8))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// U-Net weights together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

/// Parameter initialization recipe.
#[derive(Clone, Copy)]
enum Init {
    FanIn(usize),
    Zeros,
    Ones,
}

struct Builder<'r, R: Rng> {
    rng: &'r mut R,
    params: ParamSet,
}

impl<R: Rng> Builder<'_, R> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) {
        let n = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let std = (1.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(self.rng);
                        z * std
                    })
                    .collect()
            }
        };
        self.params.push(name, shape, data);
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.add(format!("{p}.gamma"), vec![c], Init::Ones);
        self.add(format!("{p}.beta"), vec![c], Init::Zeros);
    }

    fn conv(&mut self, p: &str, cin: usize, cout: usize, k: usize, zero: bool) {
        let init = if zero {
            Init::Zeros
        } else {
            Init::FanIn(cin * k * k)
        };
        self.add(format!("{p}.weight"), vec![cout, cin, k, k], init);
        self.add(format!("{p}.bias"), vec![cout], Init::Zeros);
    }

    fn linear(&mut self, p: &str, din: usize, dout: usize) {
        self.add(format!("{p}.weight"), vec![dout, din], Init::FanIn(din));
        self.add(format!("{p}.bias"), vec![dout], Init::Zeros);
    }

    fn res(&mut self, p: &str, cin: usize, cout: usize, te: usize) {
        self.norm(&format!("{p}.norm1"), cin);
        self.conv(&format!("{p}.conv1"), cin, cout, 3, false);
        self.linear(&format!("{p}.time"), te, cout);
        self.norm(&format!("{p}.norm2"), cout);
        self.conv(&format!("{p}.conv2"), cout, cout, 3, true);
        if cin != cout {
            self.conv(&format!("{p}.skip"), cin, cout, 1, false);
        }
    }

    fn attn(&mut self, p: &str, c: usize) {
        self.norm(&format!("{p}.norm"), c);
        for n in ["q", "k", "v"] {
            self.conv(&format!("{p}.{n}"), c, c, 1, false);
        }
        self.conv(&format!("{p}.proj"), c, c, 1, true);
    }
}

/// Architecture blocks in build order: `(prefix, cin, cout, is_attention)`.
fn block_list(cfg: &DenoiserConfig) -> Vec<(String, usize, usize, bool)> {
    let w = cfg.widths();
    let l = cfg.layers_per_block;
    let mut out = Vec::new();
    let mut ch = w[0];
    for (i, &wi) in w.iter().enumerate() {
        for j in 0..l {
            out.push((format!("enc.{i}.res.{j}"), ch, wi, false));
            ch = wi;
        }
        if i == 2 && cfg.attention.encoder_last {
            out.push((format!("enc.{i}.attn"), wi, wi, true));
        }
    }
    out.push(("mid.res.0".into(), ch, ch, false));
    if cfg.attention.middle {
        out.push(("mid.attn".into(), ch, ch, true));
    }
    out.push(("mid.res.1".into(), ch, ch, false));
    for i in (0..3).rev() {
        let mut cin = ch + w[i];
        for j in 0..l {
            out.push((format!("dec.{i}.res.{j}"), cin, w[i], false));
            cin = w[i];
            if i == 2 && j == 0 && cfg.attention.decoder_first {
                out.push((format!("dec.{i}.attn"), w[i], w[i], true));
            }
        }
        ch = w[i];
    }
    out
}

/// Initializes a denoiser: fan-in scaled normal weights, zero biases, unit
/// norm scales, zero-initialized final convolution of every residual layer
/// and attention projection. Values are rounded to `f32` precision.
pub fn build_denoiser(cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<DenoiserParams> {
    cfg.validate()?;
    let te = cfg.time_embed_dim;
    let w = cfg.widths();
    let mut b = Builder {
        rng,
        params: ParamSet::new(),
    };
    b.linear("time.lin1", te, te);
    b.linear("time.lin2", te, te);
    b.conv("conv_in", cfg.in_channels, w[0], 3, false);
    for (p, cin, cout, is_attn) in block_list(cfg) {
        if is_attn {
            b.attn(&p, cin);
        } else {
            b.res(&p, cin, cout, te);
        }
    }
    b.norm("out.norm", w[0]);
    b.conv("out.conv", w[0], cfg.in_channels, 3, false);
    let mut params = b.params;
    params.round_to_f32();
    Ok(DenoiserParams {
        config: cfg.clone(),
        params,
    })
}

/// Standard sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

/// A model whose forward pass can be recorded on a [`Graph`].
pub trait DifferentiableModel: Clone + Sync + Send {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Records the forward pass for input `x` at timestep `t`.
    fn forward(&self, g: &mut Graph<'_>, x: Var, t: usize) -> Var;
    /// Validates an input shape before a forward pass.
    fn check_input(&self, shape: &[usize]) -> Result<()>;
}

impl DenoiserParams {
    pub fn total_count(&self) -> usize {
        self.params.total_count()
    }

    fn res_layer(&self, g: &mut Graph<'_>, p: &str, x: Var, temb: Var) -> Var {
        let pad = self.config.padding;
        let cin = g.shape(x)[0];
        let n1 = norm(g, &format!("{p}.norm1"), x, cin);
        let h = g.silu(n1);
        let h = conv(g, &format!("{p}.conv1"), h, pad);
        let (tw, tb) = (
            g.param(&format!("{p}.time.weight")),
            g.param(&format!("{p}.time.bias")),
        );
        let tproj = g.linear(temb, tw, tb);
        let h = g.add_channel(h, tproj);
        let cout = g.shape(h)[0];
        let h = norm(g, &format!("{p}.norm2"), h, cout);
        let h = g.silu(h);
        let h = conv(g, &format!("{p}.conv2"), h, pad);
        let skip = if cin != cout {
            conv(g, &format!("{p}.skip"), x, pad)
        } else {
            x
        };
        g.add(skip, h)
    }

    fn attention(&self, g: &mut Graph<'_>, p: &str, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (c, n) = (shape[0], shape[1] * shape[2]);
        let h = norm(g, &format!("{p}.norm"), x, c);
        let q = conv(g, &format!("{p}.q"), h, Padding::Zeros);
        let k = conv(g, &format!("{p}.k"), h, Padding::Zeros);
        let v = conv(g, &format!("{p}.v"), h, Padding::Zeros);
        let q = g.reshape(q, vec![c, n]);
        let k = g.reshape(k, vec![c, n]);
        let v = g.reshape(v, vec![c, n]);
        let scores = g.matmul(q, k, true, false);
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let o = g.matmul(v, attn, false, true);
        let o = g.reshape(o, shape);
        let o = conv(g, &format!("{p}.proj"), o, Padding::Zeros);
        g.add(x, o)
    }
}

fn norm(g: &mut Graph<'_>, p: &str, x: Var, c: usize) -> Var {
    let (ga, be) = (
        g.param(&format!("{p}.gamma")),
        g.param(&format!("{p}.beta")),
    );
    g.group_norm(x, ga, be, group_count(c))
}

fn conv(g: &mut Graph<'_>, p: &str, x: Var, pad: Padding) -> Var {
    let (w, b) = (
        g.param(&format!("{p}.weight")),
        g.param(&format!("{p}.bias")),
    );
    g.conv2d(x, w, Some(b), pad)
}

impl DifferentiableModel for DenoiserParams {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        ensure!(
            shape.len() == 3 && shape[0] == self.config.in_channels,
            Shape,
            "denoiser expects ({}, H, W) input, got {:?}",
            self.config.in_channels,
            shape
        );
        ensure!(
            shape[1].is_multiple_of(SPATIAL_MULTIPLE) && shape[2].is_multiple_of(SPATIAL_MULTIPLE),
            Shape,
            "spatial size {}x{} must be divisible by {} (three 2x downsamplings)",
            shape[1],
            shape[2],
            SPATIAL_MULTIPLE
        );
        Ok(())
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, t: usize) -> Var {
        let cfg = &self.config;
        let te = cfg.time_embed_dim;
        let l = cfg.layers_per_block;
        let pad = cfg.padding;

        let emb = g.constant(vec![te], timestep_embedding(t, te));
        let (w1, b1) = (g.param("time.lin1.weight"), g.param("time.lin1.bias"));
        let temb = g.linear(emb, w1, b1);
        let temb = g.silu(temb);
        let (w2, b2) = (g.param("time.lin2.weight"), g.param("time.lin2.bias"));
        let temb = g.linear(temb, w2, b2);
        let temb = g.silu(temb);

        let mut h = conv(g, "conv_in", x, pad);
        let mut skips = Vec::with_capacity(3);
        for i in 0..3 {
            for j in 0..l {
                h = self.res_layer(g, &format!("enc.{i}.res.{j}"), h, temb);
            }
            if i == 2 && cfg.attention.encoder_last {
                h = self.attention(g, &format!("enc.{i}.attn"), h);
            }
            skips.push(h);
            h = g.avg_pool2(h);
        }
        h = self.res_layer(g, "mid.res.0", h, temb);
        if cfg.attention.middle {
            h = self.attention(g, "mid.attn", h);
        }
        h = self.res_layer(g, "mid.res.1", h, temb);
        for i in (0..3).rev() {
            h = g.upsample2(h);
            h = g.concat(h, skips[i]);
            for j in 0..l {
                h = self.res_layer(g, &format!("dec.{i}.res.{j}"), h, temb);
                if i == 2 && j == 0 && cfg.attention.decoder_first {
                    h = self.attention(g, &format!("dec.{i}.attn"), h);
                }
            }
        }
        let c0 = g.shape(h)[0];
        h = norm(g, "out.norm", h, c0);
        h = g.silu(h);
        conv(g, "out.conv", h, pad)
    }
}

/// Noise prediction for `x: (in_channels, H, W)` at timestep `t`.
pub fn denoise(
    params: &DenoiserParams,
    x: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    ensure!(
        t < schedule.steps(),
        Param,
        "timestep {t} outside [0, {})",
        schedule.steps()
    );
    forward_tensor(params, x, t)
}

/// Forward pass of any [`DifferentiableModel`] without recording gradients.
pub fn forward_tensor<M: DifferentiableModel>(model: &M, x: &Tensor, t: usize) -> Result<Tensor> {
    model.check_input(x.shape())?;
    let mut g = Graph::new(model.params());
    let xi = g.input(x);
    let out = model.forward(&mut g, xi, t);
    Ok(g.tensor(out))
}

/// Gradients of the scalar recorded by `loss` with respect to every tensor
/// of `params`. Fails with a numeric error if the loss or any gradient is
/// not finite.
pub fn gradient(
    params: &ParamSet,
    loss: impl FnOnce(&mut Graph<'_>) -> Var,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(params);
    let l = loss(&mut g);
    let value = check_loss(g.scalar(l), "loss")?;
    let grads = g.backward(l);
    for (t, gr) in params.tensors().iter().zip(&grads) {
        if gr.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "gradient of parameter `{}` is not finite",
                t.name
            )));
        }
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 2,
            base_width: 8,
            channel_multipliers: [1, 2, 4],
            layers_per_block: 3,
            attention: AttentionFlags::default(),
            time_embed_dim: 16,
            padding: Padding::Zeros,
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_denoiser(&small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = build_denoiser(&small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let c = build_denoiser(&small(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn attention_flags_control_parameters() {
        let mut cfg = small();
        cfg.attention = AttentionFlags::none();
        let p = build_denoiser(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.params.tensors().iter().all(|t| !t.name.contains("attn")));
        let with = build_denoiser(&small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let attn: Vec<_> = with
            .params
            .tensors()
            .iter()
            .filter(|t| t.name.contains("attn"))
            .map(|t| t.name.split(".attn").next().unwrap().to_string())
            .collect();
        assert!(attn.iter().any(|n| n == "enc.2"));
        assert!(attn.iter().any(|n| n == "dec.2"));
        assert!(attn
            .iter()
            .all(|n| n == "enc.2" || n == "dec.2" || n == "mid"));
    }

    #[test]
    fn indivisible_input_is_shape_error() {
        let p = build_denoiser(&small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = NoiseSchedule::default_linear();
        let err = denoise(&p, &Tensor::zeros(&[2, 12, 16]), 5, &s).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("divisible by 8"));
        assert!(denoise(&p, &Tensor::zeros(&[2, 16, 16]), 1000, &s).is_err());
    }

    #[test]
    fn zero_output_projection_gives_zero_output() {
        let mut p = build_denoiser(&small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for name in ["out.conv.weight", "out.conv.bias"] {
            p.params.get_mut(name).unwrap().data.fill(0.0);
        }
        let x = Tensor::from_fn(&[2, 16, 16], |i| (i as f64 * 0.3).sin());
        let y = denoise(&p, &x, 10, &NoiseSchedule::default_linear()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_counts() {
        assert_eq!(group_count(16), 8);
        assert_eq!(group_count(4), 4);
        assert_eq!(group_count(12), 6);
        assert_eq!(group_count(24), 8);
    }
}

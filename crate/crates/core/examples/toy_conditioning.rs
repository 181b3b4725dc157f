//! End-to-end toy run: train a mask-conditioned denoiser on toy blobs, then
//! generate with held-out single-box masks and report how often the
//! generated mask and the generated image content land on the box.
//!
//! Usage: `toy_conditioning [steps] [lr] [sampler_steps] [epsilon|v] [gen_res]`

use std::time::Instant;

use polyforge_core::denoiser::{AttentionFlags, DenoiserConfig};
use polyforge_core::diffusion::{PredictionKind, SamplerOptions};
use polyforge_core::loceval::iou;
use polyforge_core::regimes::{
    generate_samples, plan_regime, run_training, CondSource, Datasets, GenerateConfig,
    RegimeConfig, RegimeKind,
};
use polyforge_core::spatial::{extract_boxes_plane, BBox};
use polyforge_core::toy::{toy_dataset, ToyConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args()
        .nth(i)
        .and_then(|a| a.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let steps: usize = arg(1, 2000);
    let lr: f64 = arg(2, 1e-3);
    let sampler_steps: usize = arg(3, 100);
    let prediction = match std::env::args().nth(4).as_deref() {
        Some("v") => PredictionKind::V,
        _ => PredictionKind::Epsilon,
    };
    let gen_res: usize = arg(5, 32);
    let res = 32;

    let data = Datasets {
        primary: toy_dataset(&ToyConfig::new(res), 500, 11, 0).unwrap(),
        secondary: vec![],
    };
    let cfg = RegimeConfig {
        native_res: res,
        target_res: res,
        steps,
        lr,
        batch: 8,
        ema_decay: 0.995,
        ema_warmup: 100,
        prediction,
        seed: 3,
        ..Default::default()
    };
    let plan = plan_regime(RegimeKind::VaeUpscale, 500, &[], &cfg).unwrap();
    let model = DenoiserConfig {
        in_channels: 4,
        base_width: 16,
        channel_multipliers: [1, 2, 2],
        layers_per_block: 1,
        attention: AttentionFlags::default(),
        time_embed_dim: 32,
        ..Default::default()
    };
    let t0 = Instant::now();
    let out = run_training(&plan, &model, &data, &mut |_| Ok(())).unwrap();
    let chunk = (steps / 10).max(1);
    let means: Vec<String> = out
        .losses
        .chunks(chunk)
        .map(|c| format!("{:.4}", c.iter().sum::<f64>() / c.len() as f64))
        .collect();
    println!(
        "train {:.1}s losses {}",
        t0.elapsed().as_secs_f64(),
        means.join(" ")
    );

    let held: Vec<Vec<BBox>> = toy_dataset(&ToyConfig::new(gen_res), 400, 99, 0)
        .unwrap()
        .into_iter()
        .filter(|s| s.boxes.len() == 1 && s.boxes[0].area() * 10 >= gen_res * gen_res)
        .map(|s| s.boxes)
        .take(100)
        .collect();
    let gc = GenerateConfig {
        res: gen_res,
        sampler_steps,
        sampler: SamplerOptions {
            kind: prediction,
            clip_x0: true,
        },
        seed: 5,
    };
    let t0 = Instant::now();
    let gen = generate_samples(
        &out.checkpoint,
        held.len(),
        &gc,
        &CondSource::Fixed(held.clone()),
    )
    .unwrap();
    let (mut mask_hits, mut image_hits) = (0, 0);
    for (g, cond) in gen.iter().zip(&held) {
        let best = |boxes: &[BBox]| boxes.iter().map(|b| iou(b, &cond[0])).fold(0.0, f64::max);
        if best(&g.sample.boxes) >= 0.5 {
            mask_hits += 1;
        }
        let red = g.sample.image.channel(0);
        let content = extract_boxes_plane(red, gen_res, gen_res, -0.3, 1e-3);
        if best(&content) >= 0.5 {
            image_hits += 1;
        }
    }
    println!(
        "generate {:.1}s n {} mask-iou {} image-iou {}",
        t0.elapsed().as_secs_f64(),
        held.len(),
        mask_hits,
        image_hits
    );
}
